"""Electron-electron Coulomb collisions (Takizuka-Abe binary model).

Pairs are formed inside each cell from an index array built with the
count / exclusive-scan / cursor-scatter pattern; particle data never moves.
Arrival order at the per-cell cursors is a hash of (uid, step), which plays
the role of the scheduler and reshuffles partners every step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .core import AUX_ENERGY, CODATA, Constants, Grid, ParticleStore, Rng

SLOT_DELTA = 8
SLOT_AZIMUTH = 9
SLOT_SHUFFLE = 10

LN_LAMBDA_FLOOR = 2.0


class IndexOverflow(RuntimeError):
    """A cell received more particles than its count allowed (stale counts)."""


@dataclass(frozen=True)
class PairIndex:
    P: np.ndarray
    offsets: np.ndarray
    counts: np.ndarray

    def cell(self, j: int) -> np.ndarray:
        return self.P[self.offsets[j] : self.offsets[j] + self.counts[j]]


@dataclass(frozen=True)
class CoulombParams:
    ln_lambda: float
    n_e: np.ndarray | float
    dt: float
    m_r: float = CODATA.m_e / 2.0

    def __post_init__(self):
        object.__setattr__(self, "ln_lambda", max(float(self.ln_lambda), LN_LAMBDA_FLOOR))

    def delta_variance(self, u, consts: Constants = CODATA):
        """<delta^2> = e^4 n_e lnL dt / (8 pi eps0^2 m_r^2 u^3)."""
        u = np.asarray(u, dtype=float)
        with np.errstate(divide="ignore"):
            return (consts.e**4 * np.asarray(self.n_e) * self.ln_lambda * self.dt) / (
                8.0 * np.pi * consts.eps0**2 * self.m_r**2 * u**3
            )


@dataclass
class CoulombStats:
    pairs: int = 0
    odd_cells: int = 0


def exclusive_prefix_sum(counts) -> np.ndarray:
    counts = np.asarray(counts)
    out = np.zeros_like(counts)
    if counts.size > 1:
        np.cumsum(counts[:-1], out=out[1:])
    return out


def _check_counts(cells, counts):
    actual = np.bincount(cells, minlength=counts.size)
    over = np.flatnonzero(actual > counts)
    if over.size:
        raise IndexOverflow(f"cell {over[0]} cursor passed its slice end; recompute counts")
    if np.any(actual < counts):
        raise IndexOverflow("counts exceed the live particles per cell; recompute counts")


def build_pair_index(store: ParticleStore, grid: Grid, counts, schedule=None) -> PairIndex:
    """Group live particle indices by cell.

    ``schedule`` (a permutation of the live particles) is the order in which
    they reach the per-cell cursors; the default is index order.
    """
    counts = np.asarray(counts, dtype=np.int64)
    live = store.live_indices()
    cells = grid.cell_of(store.pos[live, 0])
    _check_counts(cells, counts)
    offsets = exclusive_prefix_sum(counts)
    arrival = np.arange(live.size) if schedule is None else np.asarray(schedule)
    order = arrival[np.argsort(cells[arrival], kind="stable")]
    return PairIndex(live[order], offsets, counts)


def build_pair_index_sequential(store: ParticleStore, grid: Grid, counts, schedule=None) -> PairIndex:
    """Loop-by-loop reference: one cursor increment per particle."""
    counts = np.asarray(counts, dtype=np.int64)
    offsets = exclusive_prefix_sum(counts)
    cursor = offsets.copy()
    P = np.full(int(counts.sum()), -1, dtype=np.int64)
    live = store.live_indices()
    arrival = range(live.size) if schedule is None else schedule
    for a in arrival:
        l = int(live[a])
        j = min(max(int(np.floor(store.pos[l, 0] / grid.dx)), 0), grid.M - 1)
        if cursor[j] >= offsets[j] + counts[j]:
            raise IndexOverflow(f"cell {j} cursor passed its slice end; recompute counts")
        P[cursor[j]] = l
        cursor[j] += 1
    if np.any(cursor != offsets + counts):
        raise IndexOverflow("counts exceed the live particles per cell; recompute counts")
    return PairIndex(P, offsets, counts)


def ta_collide_pair(v1, v2, params: CoulombParams, r1, r2, consts: Constants = CODATA):
    """Rotate the relative velocity of each pair; returns new (v1, v2).

    tan(theta/2) = delta with delta ~ N(0, <delta^2>) drawn from ``r1`` by the
    inverse normal CDF, azimuth 2 pi ``r2``. Equal masses: each partner takes
    half of the change in relative velocity.
    """
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    u = v1 - v2
    ux, uy, uz = u[..., 0], u[..., 1], u[..., 2]
    umag = np.sqrt(ux * ux + uy * uy + uz * uz)
    uperp = np.sqrt(ux * ux + uy * uy)
    moving = umag > 0
    var = np.where(moving, params.delta_variance(np.where(moving, umag, 1.0), consts), 0.0)
    r1 = np.clip(np.asarray(r1, dtype=float), 2.0**-54, 1.0 - 2.0**-54)
    delta = np.sqrt(var) * ndtri(r1)
    d2 = delta * delta
    sin_t = 2.0 * delta / (1.0 + d2)
    omc = 2.0 * d2 / (1.0 + d2)  # 1 - cos(theta)
    phi = 2.0 * np.pi * np.asarray(r2, dtype=float)
    cphi, sphi = np.cos(phi), np.sin(phi)

    safe = np.where(uperp > 0, uperp, 1.0)
    dux = (ux / safe) * uz * sin_t * cphi - (uy / safe) * umag * sin_t * sphi - ux * omc
    duy = (uy / safe) * uz * sin_t * cphi + (ux / safe) * umag * sin_t * sphi - uy * omc
    duz = -uperp * sin_t * cphi - uz * omc
    # relative velocity along z: the rotation frame degenerates
    along_z = uperp == 0
    dux = np.where(along_z, umag * sin_t * cphi, dux)
    duy = np.where(along_z, umag * sin_t * sphi, duy)
    duz = np.where(along_z, -uz * omc, duz)
    du = np.stack([dux, duy, duz], axis=-1)
    du = np.where(moving[..., None], du, 0.0)
    return v1 + 0.5 * du, v2 - 0.5 * du


def _pairs(index: PairIndex, cells_of_p: np.ndarray):
    local = np.arange(index.P.size) - index.offsets[cells_of_p]
    first = (local % 2 == 0) & (local + 1 < index.counts[cells_of_p])
    pos = np.flatnonzero(first)
    return index.P[pos], index.P[pos + 1], cells_of_p[pos]


def coulomb_step(
    store: ParticleStore,
    grid: Grid,
    params: CoulombParams,
    dt: float,
    rng: Rng,
    step_id: int,
    counts=None,
    consts: Constants = CODATA,
    sequential: bool = False,
) -> CoulombStats:
    """Pair neighbours (P[0],P[1]), (P[2],P[3]), ... inside each cell and collide.

    ``params.n_e`` may be per cell. An odd particle left in a cell sits out
    this step.
    """
    live = store.live_indices()
    cells = grid.cell_of(store.pos[live, 0])
    if counts is None:
        counts = np.bincount(cells, minlength=grid.M)
    key = rng.bits(store.uid[live], step_id, SLOT_SHUFFLE)
    schedule = np.argsort(key, kind="stable")
    build = build_pair_index_sequential if sequential else build_pair_index
    index = build(store, grid, counts, schedule)
    cells_of_p = np.repeat(np.arange(grid.M), index.counts)
    a, b, pc = _pairs(index, cells_of_p)
    stats = CoulombStats(int(a.size), int(np.count_nonzero(index.counts % 2)))
    if a.size == 0:
        return stats
    base = rng.stream_base(store.uid[a])
    r1 = rng.uniform(None, step_id, SLOT_DELTA, base=base)
    r2 = rng.uniform(None, step_id, SLOT_AZIMUTH, base=base)
    n_e = np.asarray(params.n_e, dtype=float)
    local = CoulombParams(params.ln_lambda, n_e[pc] if n_e.ndim else n_e, dt, params.m_r)
    v1, v2 = ta_collide_pair(store.vel[a], store.vel[b], local, r1, r2, consts)
    store.vel[a] = v1
    store.vel[b] = v2
    store.aux[a, AUX_ENERGY] = consts.energy_ev(v1)
    store.aux[b, AUX_ENERGY] = consts.energy_ev(v2)
    return stats
