"""Grid-side physics: Poisson solve, cell fields, heavy-species transport.

All grid quantities are cell-centred. Dirichlet walls sit at x = 0 and
x = L, half a cell outside the first and last centres, and are imposed
through mirrored ghost values.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_banded

from .core import CODATA, Constants

RESIDUAL_TOL = 1e-10


class CFLViolation(ValueError):
    def __init__(self, name: str, ratio: float, limit: float):
        super().__init__(f"{name} = {ratio:.4g} exceeds {limit}")
        self.ratio = ratio


class NegativeDensity(ArithmeticError):
    pass


def _laplacian_bands(M: int) -> np.ndarray:
    ab = np.zeros((3, M))
    ab[0, 1:] = -1.0
    ab[1, :] = 2.0
    ab[2, :-1] = -1.0
    # ghost phi_{-1} = 2 V_left - phi_0 folds into the diagonal
    ab[1, 0] = ab[1, -1] = 3.0
    return ab


def poisson_residual(phi, n_i, n_e, bc_left, bc_right, dx, consts: Constants = CODATA) -> float:
    """Relative max-norm residual of the discrete Poisson system."""
    phi = np.asarray(phi, dtype=float)
    rhs = _poisson_rhs(n_i, n_e, bc_left, bc_right, dx, consts)
    ab = _laplacian_bands(phi.size)
    Aphi = ab[1] * phi
    Aphi[:-1] += ab[0, 1:] * phi[1:]
    Aphi[1:] += ab[2, :-1] * phi[:-1]
    scale = max(np.abs(rhs).max(), np.abs(Aphi).max(), np.finfo(float).tiny)
    return float(np.abs(Aphi - rhs).max() / scale)


def _poisson_rhs(n_i, n_e, bc_left, bc_right, dx, consts):
    rhs = (consts.e / consts.eps0) * (np.asarray(n_i, dtype=float) - np.asarray(n_e, dtype=float)) * dx * dx
    rhs = rhs.copy()
    rhs[0] += 2.0 * bc_left
    rhs[-1] += 2.0 * bc_right
    return rhs


def solve_poisson(n_i, n_e, bc_left: float, bc_right: float, dx: float, consts: Constants = CODATA) -> np.ndarray:
    """Solve -phi'' = (e/eps0)(n_i - n_e) with phi(0) = bc_left, phi(L) = bc_right."""
    rhs = _poisson_rhs(n_i, n_e, bc_left, bc_right, dx, consts)
    phi = solve_banded((1, 1), _laplacian_bands(rhs.size), rhs)
    res = poisson_residual(phi, n_i, n_e, bc_left, bc_right, dx, consts)
    if res > RESIDUAL_TOL:
        raise ArithmeticError(f"Poisson residual {res:.3g} above {RESIDUAL_TOL}")
    return phi


def efield_from_phi(phi, dx: float) -> np.ndarray:
    """Cell-constant E = -dphi/dx: central inside, one-sided second order at the ends."""
    phi = np.asarray(phi, dtype=float)
    M = phi.size
    E = np.zeros(M)
    if M == 1:
        return E
    if M == 2:
        E[:] = -(phi[1] - phi[0]) / dx
        return E
    E[1:-1] = -(phi[2:] - phi[:-2]) / (2.0 * dx)
    E[0] = -(-3.0 * phi[0] + 4.0 * phi[1] - phi[2]) / (2.0 * dx)
    E[-1] = -(3.0 * phi[-1] - 4.0 * phi[-2] + phi[-3]) / (2.0 * dx)
    return E


def face_fluxes(n, phi, dx: float, mu: float, D: float, bc=None) -> np.ndarray:
    """Particle fluxes through the M + 1 cell faces (positive towards +x).

    Drift velocity mu E is upwinded; diffusion is centred. Walls hold n = 0.
    ``bc`` gives the wall potentials; without it the wall-face field copies
    the nearest interior face.
    """
    n = np.asarray(n, dtype=float)
    phi = np.asarray(phi, dtype=float)
    M = n.size
    Ef = np.empty(M + 1)
    if M > 1:
        Ef[1:-1] = -(phi[1:] - phi[:-1]) / dx
    if bc is not None:
        Ef[0] = -(phi[0] - bc[0]) / (0.5 * dx)
        Ef[-1] = -(bc[1] - phi[-1]) / (0.5 * dx)
    elif M > 1:
        Ef[0], Ef[-1] = Ef[1], Ef[-2]
    else:
        Ef[:] = 0.0
    vel = mu * Ef
    left = np.concatenate([[0.0], n])  # wall value 0 on the outside
    right = np.concatenate([n, [0.0]])
    drift = vel * np.where(vel > 0, left, right)
    ghost = np.concatenate([[-n[0]], n, [-n[-1]]])
    diff = -D * (ghost[1:] - ghost[:-1]) / dx
    return drift + diff


def check_stability(phi, dx, dt, mu, D, bc=None):
    r_d = D * dt / (dx * dx)
    if r_d > 0.5:
        raise CFLViolation("D dt / dx^2", r_d, 0.5)
    E = np.abs(efield_from_phi(phi, dx)).max(initial=0.0)
    if bc is not None:
        E = max(E, abs(phi[0] - bc[0]) / (0.5 * dx), abs(bc[1] - phi[-1]) / (0.5 * dx))
    r_a = abs(mu) * E * dt / dx
    if r_a > 1.0:
        raise CFLViolation("|mu E| dt / dx", r_a, 1.0)


def advance_heavies(n_k, phi, sources, dt: float, dx: float, mu: float, D: float, bc=None, frozen: bool = False):
    """One explicit step of dn/dt = d/dx(mu n dphi/dx + D dn/dx) + S in flux form."""
    n = np.asarray(n_k, dtype=float)
    if frozen or (mu == 0 and D == 0 and not np.any(sources)):
        return n.copy()
    check_stability(phi, dx, dt, mu, D, bc)
    F = face_fluxes(n, phi, dx, mu, D, bc)
    out = n - (dt / dx) * (F[1:] - F[:-1]) + dt * np.asarray(sources, dtype=float)
    if np.any(out < 0):
        j = int(np.argmin(out))
        raise NegativeDensity(f"density {out[j]:.4g} in cell {j} after transport step")
    return out


def drive_voltage(t: float, v0: float, freq: float) -> float:
    return v0 * np.sin(2.0 * np.pi * freq * t)
