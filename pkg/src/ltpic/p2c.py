"""Particle-to-cell reductions of weight, energy and source tags."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import AUX_ION_TAG, AUX_META_TAG, CODATA, Constants, Grid, ParticleStore


@dataclass
class CellMoments:
    """Per-cell sums of weight, weight * energy (eV) and source tags.

    Tags are signed per particle, so production (``gains``) and removal
    (``losses``) are accumulated separately; every accumulator stays
    non-negative and the net source is their difference. Columns of both
    are (ion, metastable).
    """

    count: np.ndarray
    energy: np.ndarray
    gains: np.ndarray
    losses: np.ndarray
    subbins: int = 1

    WIDTH = 6

    @property
    def sources(self) -> np.ndarray:
        return self.gains - self.losses

    @classmethod
    def zeros(cls, M: int, subbins: int = 1) -> "CellMoments":
        return cls.from_stacked(np.zeros((M, cls.WIDTH)), subbins)

    def stacked(self) -> np.ndarray:
        """(M, 6) block used for the cross-rank reduction."""
        return np.column_stack([self.count, self.energy, self.gains, self.losses])

    @classmethod
    def from_stacked(cls, arr: np.ndarray, subbins: int = 1) -> "CellMoments":
        arr = np.asarray(arr, dtype=float)
        return cls(arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2:4].copy(), arr[:, 4:6].copy(), subbins)


def particle_vectors(store: ParticleStore, idx: np.ndarray, consts: Constants = CODATA) -> np.ndarray:
    """Per-particle contributions (w, w eps, gains, losses) for ``idx``."""
    w = store.weight[idx]
    eps = consts.energy_ev(store.vel[idx])
    tags = store.aux[idx][:, [AUX_ION_TAG, AUX_META_TAG]] * w[:, None]
    return np.column_stack([w, w * eps, np.maximum(tags, 0.0), np.maximum(-tags, 0.0)])


def _cells_and_sub(store, grid, idx, subbins):
    x = store.pos[idx, 0]
    cells = grid.cell_of(x)
    frac = x / grid.dx - cells
    sub = np.clip((frac * subbins).astype(np.int64), 0, subbins - 1)
    return cells, sub


def deposit_atomic(store: ParticleStore, grid: Grid, subbins: int = 1, consts: Constants = CODATA) -> CellMoments:
    """Scatter-add every live particle into its (cell, sub-bin) accumulator.

    Sub-bins spread contention over ``subbins`` slots per cell and are summed
    back to cells at the end.
    """
    if subbins < 1:
        raise ValueError("subbins must be >= 1")
    idx = store.live_indices()
    M = grid.M
    if idx.size == 0:
        return CellMoments.zeros(M, subbins)
    cells, sub = _cells_and_sub(store, grid, idx, subbins)
    bins = cells * subbins + sub
    V = particle_vectors(store, idx, consts)
    W = CellMoments.WIDTH
    acc = np.empty((M * subbins, W))
    for k in range(W):
        acc[:, k] = np.bincount(bins, weights=V[:, k], minlength=M * subbins)
    cellsum = acc.reshape(M, subbins, W).sum(axis=1)
    return CellMoments.from_stacked(cellsum, subbins)


def deposit_sorted_oracle(store: ParticleStore, grid: Grid, consts: Constants = CODATA) -> CellMoments:
    """Sort by (cell, index) and reduce each cell segment with exact summation."""
    idx = store.live_indices()
    out = np.zeros((grid.M, CellMoments.WIDTH))
    if idx.size:
        cells = grid.cell_of(store.pos[idx, 0])
        order = np.lexsort((idx, cells))
        V = particle_vectors(store, idx[order], consts)
        sc = cells[order]
        bounds = np.searchsorted(sc, np.arange(grid.M + 1))
        for j in range(grid.M):
            lo, hi = bounds[j], bounds[j + 1]
            if hi > lo:
                for k in range(CellMoments.WIDTH):
                    out[j, k] = math.fsum(V[lo:hi, k])
    return CellMoments.from_stacked(out)


def electron_temperature(moments: CellMoments, cell=None):
    """T_e = (2/3) <eps> per cell; returns ``(te, empty)`` with te = 0 where empty."""
    count = moments.count if cell is None else moments.count[cell]
    energy = moments.energy if cell is None else moments.energy[cell]
    empty = np.asarray(count) <= 0
    te = np.where(empty, 0.0, (2.0 / 3.0) * np.asarray(energy) / np.where(empty, 1.0, count))
    return te, empty
