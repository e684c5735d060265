"""Electron-heavy collision kernel: channel selection, scattering, particle
creation, field push and wall absorption, plus the null-collision variant.

Every particle draws its random numbers from its own counter-based stream
(keyed by uid), so the outcome of a step does not depend on how particles
are split across workers or in which order they are processed.
"""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import (
    AUX_CELL,
    AUX_ENERGY,
    AUX_ION_TAG,
    AUX_META_TAG,
    CODATA,
    Constants,
    Grid,
    ParticleStore,
    Rng,
    append_particle,
    derive_uid,
)
from .xsect import PiecewiseXsec, fit_piecewise, load_table

# random-number slots per particle and step; 0-5 are the six collision draws
SLOT_SELECT, SLOT_COS, SLOT_AZIMUTH, SLOT_SPLIT, SLOT_COS2, SLOT_AZIMUTH2 = range(6)
SLOT_RECOMB = 6
SLOT_NULL = 7


class ProbabilityOverflow(ValueError):
    """Per-particle collision probabilities sum past 1; the timestep is too large."""


class BelowThreshold(ValueError):
    pass


class NullUnderflow(RuntimeError):
    """A particle's collision probability exceeds the null-collision ceiling."""


class ChannelKind(enum.Enum):
    ELASTIC = "elastic"
    IONIZATION = "ionization"
    EXCITATION = "excitation"
    TWO_STEP_IONIZATION = "two_step"

    @property
    def creates(self) -> bool:
        return self in (ChannelKind.IONIZATION, ChannelKind.TWO_STEP_IONIZATION)

    @property
    def tags(self) -> tuple[int, int]:
        """Net (ion, metastable) production per event."""
        return {
            ChannelKind.ELASTIC: (0, 0),
            ChannelKind.IONIZATION: (1, 0),
            ChannelKind.EXCITATION: (0, 1),
            ChannelKind.TWO_STEP_IONIZATION: (1, -1),
        }[self]


@dataclass(frozen=True)
class CollisionChannel:
    kind: ChannelKind
    target: str  # "n" or "m"
    threshold: float
    xsec: PiecewiseXsec
    mass_ratio: float = CODATA.mass_ratio
    name: str = ""

    def __post_init__(self):
        if self.kind is ChannelKind.ELASTIC and self.threshold != 0:
            raise ValueError("elastic channels have zero threshold")
        if self.kind is not ChannelKind.ELASTIC and not self.threshold > 0:
            raise ValueError(f"{self.kind.value} needs a positive threshold")
        if self.target not in ("n", "m"):
            raise ValueError("target species must be 'n' or 'm'")

    def sigma(self, energy) -> np.ndarray:
        return self.xsec(energy)


_TARGETS = {
    ChannelKind.ELASTIC: "n",
    ChannelKind.IONIZATION: "n",
    ChannelKind.EXCITATION: "n",
    ChannelKind.TWO_STEP_IONIZATION: "m",
}


def make_channel(kind: ChannelKind, source, consts: Constants = CODATA, max_rel_err=0.02) -> CollisionChannel:
    """Build a channel from a table path, bundled dataset name, or XsecTable."""
    table = load_table(source) if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__") else source
    return CollisionChannel(
        kind=kind,
        target=_TARGETS[kind],
        threshold=table.threshold,
        xsec=fit_piecewise(table, max_rel_err),
        mass_ratio=consts.mass_ratio,
        name=kind.value,
    )


def channels_from_config(cfg) -> list[CollisionChannel]:
    out = []
    for kind in ChannelKind:
        source = getattr(cfg, kind.value)
        if source:
            out.append(make_channel(kind, source, cfg.constants))
    return out


@dataclass(frozen=True)
class ChannelOutcome:
    channel: int | None
    secondary: bool = False


@dataclass
class StepStats:
    collisions: np.ndarray
    created: int = 0
    absorbed: int = 0
    n_before: int = 0
    n_after: int = 0
    candidates: int = 0

    @classmethod
    def empty(cls, n_channels: int) -> "StepStats":
        return cls(np.zeros(n_channels, dtype=np.int64))

    def __iadd__(self, other: "StepStats") -> "StepStats":
        self.collisions = self.collisions + other.collisions
        self.created += other.created
        self.absorbed += other.absorbed
        self.candidates += other.candidates
        return self


# ----- per-particle physics ----- #


def collision_probability(speed, sigma, n_k, dt):
    """1 - exp(-dt |v| sigma n), evaluated without cancellation."""
    return -np.expm1(-dt * np.asarray(speed) * np.asarray(sigma) * np.asarray(n_k))


def _select(probs: np.ndarray, r: np.ndarray) -> np.ndarray:
    cum = np.cumsum(probs, axis=-1)
    chan = np.sum(r[..., None] >= cum, axis=-1)
    return np.where(chan >= probs.shape[-1], -1, chan)


def select_channels(probs: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Vectorised channel choice: index per row, or -1 for no collision."""
    probs = np.atleast_2d(probs)
    total = probs.sum(axis=-1)
    # a total of exactly 1 (a forced collision) is still a valid partition
    if np.any(total > 1.0):
        worst = float(total.max())
        raise ProbabilityOverflow(f"sum of channel probabilities {worst:.4f} > 1; reduce dt")
    return _select(probs, np.asarray(r, dtype=float))


def select_channel(probs, r: float, creates=None) -> ChannelOutcome:
    """Pick the channel whose probability interval contains ``r``.

    ``[0, 1)`` is cut into consecutive intervals of width ``probs[c]``
    followed by the no-collision remainder.
    """
    chan = int(select_channels(np.asarray(probs, dtype=float)[None, :], np.array([r]))[0])
    if chan < 0:
        return ChannelOutcome(None, False)
    return ChannelOutcome(chan, bool(creates[chan]) if creates is not None else False)


def rotate(direction: np.ndarray, cos_chi, azimuth) -> np.ndarray:
    """Unit vectors at polar angle chi (azimuth phi) about ``direction``."""
    u = np.asarray(direction, dtype=float)
    cos_chi = np.asarray(cos_chi, dtype=float)
    sin_chi = np.sqrt(np.maximum(0.0, 1.0 - cos_chi * cos_chi))
    helper = np.zeros(u.shape)
    use_x = np.abs(u[..., 0]) < 0.6
    helper[..., 0] = np.where(use_x, 1.0, 0.0)
    helper[..., 1] = np.where(use_x, 0.0, 1.0)
    e1 = helper - np.sum(helper * u, axis=-1, keepdims=True) * u
    e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
    e2 = np.cross(u, e1)
    cphi = np.cos(azimuth)[..., None] if np.ndim(azimuth) else np.cos(azimuth)
    sphi = np.sin(azimuth)[..., None] if np.ndim(azimuth) else np.sin(azimuth)
    cc = cos_chi[..., None] if cos_chi.ndim else cos_chi
    sc = sin_chi[..., None] if sin_chi.ndim else sin_chi
    return cc * u + sc * (cphi * e1 + sphi * e2)


def _unit(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    speed = np.sqrt(np.sum(v * v, axis=-1))
    safe = np.where(speed > 0, speed, 1.0)
    u = v / safe[..., None]
    # a particle at rest has no direction; pick +z so the rotation is defined
    u = np.where((speed > 0)[..., None], u, np.array([0.0, 0.0, 1.0]))
    return u, speed


def elastic_scatter(v, mass_ratio: float, r1, r2) -> np.ndarray:
    """Isotropic elastic scattering off a heavy target.

    cos(chi) = 1 - 2 r1, azimuth 2 pi r2, and the kinetic energy is reduced by
    the recoil factor 1 - 2 (m/M) (1 - cos chi).
    """
    v = np.asarray(v, dtype=float)
    u, speed = _unit(v)
    cos_chi = 1.0 - 2.0 * np.asarray(r1, dtype=float)
    loss = 1.0 - 2.0 * mass_ratio * (1.0 - cos_chi)
    new = rotate(u, cos_chi, 2.0 * np.pi * np.asarray(r2, dtype=float))
    return new * (speed * np.sqrt(loss))[..., None]


def inelastic_scatter(v, threshold, split_r, r1, r2, create=False, r3=None, r4=None, consts: Constants = CODATA):
    """Subtract ``threshold`` eV and redirect isotropically.

    With ``create`` (ionization) the residual energy is shared: the primary
    keeps ``split_r`` of it and the secondary the rest, so that
    primary + secondary + threshold equals the incoming energy. The secondary
    direction uses ``(r3, r4)``. Returns ``(v_primary, v_secondary or None)``.
    """
    v = np.asarray(v, dtype=float)
    u, _ = _unit(v)
    eps = consts.energy_ev(v)
    resid = eps - threshold
    if np.any(resid < -1e-12 * max(float(threshold), 1.0)):
        raise BelowThreshold(f"energy {np.min(eps)} eV below threshold {threshold} eV")
    resid = np.maximum(resid, 0.0)
    split_r = np.asarray(split_r, dtype=float)
    e_primary = split_r * resid if create else resid
    d1 = rotate(u, 1.0 - 2.0 * np.asarray(r1, dtype=float), 2.0 * np.pi * np.asarray(r2, dtype=float))
    v1 = d1 * consts.speed_from_ev(e_primary)[..., None]
    if not create:
        return v1, None
    if r3 is None or r4 is None:
        raise ValueError("ionization needs two extra random numbers for the secondary direction")
    e_secondary = resid - e_primary
    d2 = rotate(u, 1.0 - 2.0 * np.asarray(r3, dtype=float), 2.0 * np.pi * np.asarray(r4, dtype=float))
    return v1, d2 * consts.speed_from_ev(e_secondary)[..., None]


def push(x, v, e_cell, q_over_m: float, dt: float):
    """Field kick along x, then drift: v' = v + dt (q/m) E, x' = x + dt v'."""
    x = np.asarray(x, dtype=float)
    v = np.array(v, dtype=float, copy=True)
    v[..., 0] += dt * q_over_m * np.asarray(e_cell)
    return x + dt * v, v


def apply_boundary(x, L: float, weight):
    """Absorb particles outside [0, L); the right wall is exclusive."""
    x = np.asarray(x)
    return np.where((x < 0.0) | (x >= L), 0.0, weight)


# ----- kernels ----- #


def _scatter(store, idx, v, eps_unused, chan, channels, rng, step_id, base, cell, consts):
    """Apply the selected collisions in place on ``v`` (rows aligned with ``idx``)."""
    counts = np.zeros(len(channels), dtype=np.int64)
    created = 0
    hit = np.flatnonzero(chan >= 0)
    if hit.size == 0:
        return counts, created
    b = base[hit]
    r = [rng.uniform(None, step_id, s, base=b) for s in range(1, 6)]
    for c, ch in enumerate(channels):
        m = chan[hit] == c
        if not m.any():
            continue
        rows = hit[m]
        counts[c] = rows.size
        r1, r2, r3, r4, r5 = (a[m] for a in r)
        parents = idx[rows]
        if ch.kind is ChannelKind.ELASTIC:
            v[rows] = elastic_scatter(v[rows], ch.mass_ratio, r1, r2)
        else:
            if ch.kind.creates:
                v1, v2 = inelastic_scatter(v[rows], ch.threshold, r3, r1, r2, True, r4, r5, consts)
                start = store.reserve(rows.size)
                new = slice(start, start + rows.size)
                store.pos[new] = store.pos[parents]
                store.vel[new] = v2
                store.weight[new] = store.weight[parents]
                store.uid[new] = derive_uid(store.uid[parents], step_id)
                store.aux[new] = 0.0
                store.aux[new, AUX_CELL] = cell[rows]
                store.aux[new, AUX_ENERGY] = consts.energy_ev(v2)
                created += rows.size
            else:
                v1, _ = inelastic_scatter(v[rows], ch.threshold, 0.0, r1, r2, False, consts=consts)
            v[rows] = v1
        dion, dmeta = ch.kind.tags
        if dion:
            store.aux[parents, AUX_ION_TAG] += dion
        if dmeta:
            store.aux[parents, AUX_META_TAG] += dmeta
    return counts, created


def _advance(store, grid, idx, x, v, cell, dt, consts, boundary):
    x, v = push(x, v, grid.efield[cell], consts.q_over_m, dt)
    absorbed = 0
    if boundary == "absorb":
        out = (x[:, 0] < 0.0) | (x[:, 0] >= grid.L)
        if out.any():
            dead = idx[out]
            absorbed = int(dead.size)
            tags = store.aux[dead][:, [AUX_ION_TAG, AUX_META_TAG]] * store.weight[dead, None]
            np.add.at(grid.pending, cell[out], tags)
            store.aux[dead, AUX_ION_TAG] = 0.0
            store.aux[dead, AUX_META_TAG] = 0.0
            store.weight[dead] = 0.0
    elif boundary == "periodic":
        xx = np.mod(x[:, 0], grid.L)
        x[:, 0] = np.where(xx >= grid.L, 0.0, xx)
    else:
        raise ValueError(f"unknown boundary {boundary!r}")
    store.pos[idx] = x
    store.vel[idx] = v
    keep = store.weight[idx] > 0
    store.aux[idx[keep], AUX_CELL] = grid.cell_of(x[keep, 0])
    store.aux[idx, AUX_ENERGY] = consts.energy_ev(v)
    return absorbed


def _probabilities(channels, grid, cell, eps, speed, dt):
    P = np.empty((eps.size, len(channels)))
    for c, ch in enumerate(channels):
        P[:, c] = collision_probability(speed, ch.sigma(eps), grid.density(ch.target)[cell], dt)
    return P


def _chunk(store, grid, channels, dt, rng, step_id, idx, consts, boundary, p_null=None):
    stats = StepStats.empty(len(channels))
    if idx.size == 0:
        return stats
    # CS0-CS1: stream state and particle data
    base = rng.stream_base(store.uid[idx])
    x = store.pos[idx].copy()
    v = store.vel[idx].copy()
    cell = grid.cell_of(x[:, 0])
    r0 = rng.uniform(None, step_id, SLOT_SELECT, base=base)
    chan = np.full(idx.size, -1, dtype=np.int64)
    if p_null is None:
        eps = consts.energy_ev(v)
        speed = np.sqrt(np.sum(v * v, axis=1))
        # CS2-CS3
        P = _probabilities(channels, grid, cell, eps, speed, dt)
        chan = select_channels(P, r0)
    else:
        if p_null > 0:
            cand = np.flatnonzero(rng.uniform(None, step_id, SLOT_NULL, base=base) < p_null)
            stats.candidates = int(cand.size)
            if cand.size:
                vc = v[cand]
                eps = consts.energy_ev(vc)
                P = _probabilities(channels, grid, cell[cand], eps, np.sqrt(np.sum(vc * vc, axis=1)), dt)
                total = P.sum(axis=1)
                if np.any(total > p_null):
                    raise NullUnderflow(
                        f"collision probability {total.max():.4g} exceeds P_NULL {p_null:.4g}; recompute P_NULL"
                    )
                chan[cand] = _select(P / p_null, r0[cand])
    # CS4-CS5
    counts, created = _scatter(store, idx, v, None, chan, channels, rng, step_id, base, cell, consts)
    stats.collisions = counts
    stats.created = created
    # CS6-CS7
    stats.absorbed = _advance(store, grid, idx, x, v, cell, dt, consts, boundary)
    return stats


def _run(store, grid, channels, dt, rng, step_id, consts, boundary, workers, p_null):
    n_before = store.live_count
    first_new = store.cursor
    idx = store.live_indices()
    if workers <= 1 or idx.size < 2 * workers:
        stats = _chunk(store, grid, channels, dt, rng, step_id, idx, consts, boundary, p_null)
    else:
        parts = np.array_split(idx, workers)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_chunk, store, grid, channels, dt, rng, step_id, p, consts, boundary, p_null)
                for p in parts
            ]
            results = [f.result() for f in futures]
        stats = StepStats.empty(len(channels))
        for r in results:
            stats += r
    store.canonicalize(first_new)
    stats.n_before = n_before
    stats.n_after = store.live_count
    return stats


def dsmc_step(
    store: ParticleStore,
    grid: Grid,
    channels: list[CollisionChannel],
    dt: float,
    rng: Rng,
    step_id: int,
    consts: Constants = CODATA,
    boundary: str = "absorb",
    workers: int = 1,
) -> StepStats:
    """One collide-push-absorb step over all live particles.

    Every particle tests every channel. Secondaries are appended through the
    shared cursor and are not advanced until the next step.
    """
    return _run(store, grid, channels, dt, rng, step_id, consts, boundary, workers, None)


def compute_p_null(channels, densities, eps_max: float, dt: float, consts: Constants = CODATA,
                   n_scan: int = 100_001, margin: float = 0.0) -> float:
    """Ceiling of the summed per-channel collision probability on [0, eps_max].

    ``densities`` gives one (maximum) target density per channel.
    """
    eps = np.linspace(0.0, eps_max, n_scan)
    speed = consts.speed_from_ev(eps)
    total = np.zeros_like(eps)
    for ch, n in zip(channels, densities):
        total += collision_probability(speed, ch.sigma(eps), n, dt)
    return float(total.max(initial=0.0) * (1.0 + margin))


def null_collision_step(
    store: ParticleStore,
    grid: Grid,
    channels: list[CollisionChannel],
    dt: float,
    rng: Rng,
    step_id: int,
    p_null: float,
    consts: Constants = CODATA,
    boundary: str = "absorb",
    workers: int = 1,
) -> StepStats:
    """Null-collision variant: only a ``p_null`` fraction of particles are tested.

    A particle is a candidate when its own hashed draw falls below ``p_null``;
    a candidate collides on channel c with probability pi_c / p_null. All
    particles are still pushed and boundary-checked.
    """
    if not 0.0 <= p_null <= 1.0:
        raise ValueError("p_null must lie in [0, 1]")
    return _run(store, grid, channels, dt, rng, step_id, consts, boundary, workers, p_null)


def dsmc_step_sequential(
    store: ParticleStore,
    grid: Grid,
    channels: list[CollisionChannel],
    dt: float,
    rng: Rng,
    step_id: int,
    consts: Constants = CODATA,
    boundary: str = "absorb",
) -> StepStats:
    """Particle-by-particle reference for :func:`dsmc_step`."""
    stats = StepStats.empty(len(channels))
    stats.n_before = store.live_count
    first_new = store.cursor
    for l in range(store.cursor):
        if store.weight[l] <= 0 or l >= first_new:
            continue
        uid = store.uid[l]
        r = [rng.draw(uid, step_id, s) for s in range(6)]
        v = store.vel[l].copy()
        x = store.pos[l].copy()
        j = min(max(int(np.floor(x[0] / grid.dx)), 0), grid.M - 1)
        eps = float(consts.energy_ev(v))
        speed = float(np.sqrt(v @ v))
        probs = [float(collision_probability(speed, ch.sigma(eps), grid.density(ch.target)[j], dt)) for ch in channels]
        if sum(probs) > 1.0:
            raise ProbabilityOverflow(f"sum of channel probabilities {sum(probs):.4f} > 1; reduce dt")
        acc, chosen = 0.0, None
        for c, p in enumerate(probs):
            acc += p
            if r[0] < acc:
                chosen = c
                break
        if chosen is not None:
            ch = channels[chosen]
            stats.collisions[chosen] += 1
            if ch.kind is ChannelKind.ELASTIC:
                v = elastic_scatter(v, ch.mass_ratio, r[1], r[2])
            elif ch.kind.creates:
                v, v2 = inelastic_scatter(v, ch.threshold, r[3], r[1], r[2], True, r[4], r[5], consts)
                i = append_particle(store, x, v2, store.weight[l], uid=derive_uid(np.array([uid]), step_id)[0])
                store.aux[i, AUX_CELL] = j
                store.aux[i, AUX_ENERGY] = float(consts.energy_ev(v2))
                stats.created += 1
            else:
                v, _ = inelastic_scatter(v, ch.threshold, 0.0, r[1], r[2], False, consts=consts)
            dion, dmeta = ch.kind.tags
            store.aux[l, AUX_ION_TAG] += dion
            store.aux[l, AUX_META_TAG] += dmeta
        v[0] += dt * consts.q_over_m * grid.efield[j]
        x = x + dt * v
        if boundary == "absorb" and (x[0] < 0.0 or x[0] >= grid.L):
            grid.pending[j] += store.weight[l] * store.aux[l, [AUX_ION_TAG, AUX_META_TAG]]
            store.aux[l, [AUX_ION_TAG, AUX_META_TAG]] = 0.0
            store.weight[l] = 0.0
            stats.absorbed += 1
        elif boundary == "periodic":
            x[0] = x[0] % grid.L
            if x[0] >= grid.L:
                x[0] = 0.0
        store.pos[l] = x
        store.vel[l] = v
        if store.weight[l] > 0:
            store.aux[l, AUX_CELL] = min(max(int(np.floor(x[0] / grid.dx)), 0), grid.M - 1)
        store.aux[l, AUX_ENERGY] = float(consts.energy_ev(v))
    store.canonicalize(first_new)
    stats.n_after = store.live_count
    return stats
