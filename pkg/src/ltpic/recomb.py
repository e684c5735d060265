"""Three-body recombination: flag primaries, bucket catalytes per cell, pair.

The pairing is a two-phase kernel. Phase one fills per-cell catalyte pools
(count, prefix sum, scatter through per-cell cursors); after the barrier,
every primary pops one catalyte from its own cell's pool. The pop order
follows the execution schedule, which the caller may permute to emulate an
arbitrary interleaving of atomic operations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import AUX_ENERGY, AUX_ION_TAG, AUX_META_TAG, CODATA, Constants, Grid, ParticleStore, Rng
from .dsmc import SLOT_RECOMB, _unit


@dataclass(frozen=True)
class PrimaryList:
    indices: np.ndarray
    cells: np.ndarray

    def __len__(self) -> int:
        return int(self.indices.size)


@dataclass(frozen=True)
class CatalytePool:
    items: np.ndarray
    offsets: np.ndarray
    counts: np.ndarray

    def cell(self, j: int) -> np.ndarray:
        return self.items[self.offsets[j] : self.offsets[j] + self.counts[j]]


@dataclass
class RecombStats:
    recombined: int = 0
    starved: int = 0
    pairs: np.ndarray | None = None  # (k, 2): primary, catalyte


def _rate(rate_fn, te):
    return rate_fn(te) if callable(rate_fn) else np.full_like(te, float(rate_fn))


def recombination_probability(grid: Grid, rate_fn, dt: float) -> np.ndarray:
    """Per-cell 1 - exp(-dt k_r(T_e) n_i n_e)."""
    k = np.asarray(_rate(rate_fn, grid.te), dtype=float)
    with np.errstate(invalid="ignore"):
        p = -np.expm1(-dt * k * grid.n_i * grid.n_e)
    return np.nan_to_num(p, nan=1.0)


def mark_primaries(store: ParticleStore, grid: Grid, rate_fn, dt: float, rng: Rng, step_id: int) -> PrimaryList:
    """Flag each live particle with its cell's recombination probability.

    ``rate_fn`` is a constant k_r (m^6/s) or a callable of T_e (eV).
    """
    idx = store.live_indices()
    cells = grid.cell_of(store.pos[idx, 0])
    p = recombination_probability(grid, rate_fn, dt)[cells]
    r = rng.uniform(store.uid[idx], step_id, SLOT_RECOMB)
    hit = r < p
    return PrimaryList(idx[hit], cells[hit])


def _scatter_by_cell(items: np.ndarray, cells: np.ndarray, M: int, schedule=None):
    """Bucket ``items`` by cell; within a cell, arrival order follows ``schedule``."""
    counts = np.bincount(cells, minlength=M).astype(np.int64)
    offsets = np.zeros(M, dtype=np.int64)
    np.cumsum(counts[:-1], out=offsets[1:])
    arrival = np.arange(items.size) if schedule is None else np.asarray(schedule)
    order = arrival[np.argsort(cells[arrival], kind="stable")]
    return items[order], offsets, counts


def build_catalyte_lists(store: ParticleStore, primaries: PrimaryList, grid: Grid, schedule=None) -> CatalytePool:
    """Every live non-primary particle, bucketed into its own cell's pool."""
    live = store.live_indices()
    cand = np.setdiff1d(live, primaries.indices, assume_unique=True)
    cells = grid.cell_of(store.pos[cand, 0])
    if schedule is not None and len(schedule) != cand.size:
        raise ValueError("schedule must be a permutation of the catalyte candidates")
    items, offsets, counts = _scatter_by_cell(cand, cells, grid.M, schedule)
    return CatalytePool(items, offsets, counts)


def recombine(
    store: ParticleStore,
    primaries: PrimaryList,
    pool: CatalytePool,
    grid: Grid | None = None,
    binding_energy: float = 4.21,
    consts: Constants = CODATA,
    schedule=None,
) -> RecombStats:
    """Pair each primary with a distinct catalyte from its cell and destroy it.

    The catalyte keeps its direction and gains the primary's kinetic energy
    plus ``binding_energy`` (eV). Primaries in exhausted cells are starved
    and left untouched. With ``grid`` the primary's pending source tags are
    flushed to ``grid.pending``.
    """
    n = len(primaries)
    if n == 0:
        return RecombStats(0, 0, np.zeros((0, 2), dtype=np.int64))
    M = pool.counts.size
    # per-cell pop cursor: the k-th arrival in cell j takes slot offsets[j] + k
    arrival = np.arange(n) if schedule is None else np.asarray(schedule)
    order = arrival[np.argsort(primaries.cells[arrival], kind="stable")]
    cells = primaries.cells[order]
    first = np.searchsorted(cells, np.arange(M))
    rank = np.arange(n) - first[cells]
    ok = rank < pool.counts[cells]
    prim = primaries.indices[order][ok]
    cat = pool.items[pool.offsets[cells[ok]] + rank[ok]]

    eps_p = consts.energy_ev(store.vel[prim])
    eps_c = consts.energy_ev(store.vel[cat])
    u, _ = _unit(store.vel[cat])
    new_eps = eps_c + eps_p + binding_energy
    store.vel[cat] = u * consts.speed_from_ev(new_eps)[:, None]
    store.aux[cat, AUX_ENERGY] = new_eps
    store.aux[cat, AUX_ION_TAG] -= 1.0
    store.aux[cat, AUX_META_TAG] += 1.0
    if grid is not None:
        np.add.at(grid.pending, cells[ok], store.aux[prim][:, [AUX_ION_TAG, AUX_META_TAG]] * store.weight[prim, None])
    store.aux[prim, AUX_ION_TAG] = 0.0
    store.aux[prim, AUX_META_TAG] = 0.0
    store.weight[prim] = 0.0
    return RecombStats(int(prim.size), int(n - prim.size), np.stack([prim, cat], axis=1))


def recomb_step(store, grid, rate_fn, dt, rng, step_id, binding_energy=4.21, consts=CODATA) -> RecombStats:
    primaries = mark_primaries(store, grid, rate_fn, dt, rng, step_id)
    if len(primaries) == 0:
        return RecombStats(0, 0, np.zeros((0, 2), dtype=np.int64))
    pool = build_catalyte_lists(store, primaries, grid)
    return recombine(store, primaries, pool, grid, binding_energy, consts)
