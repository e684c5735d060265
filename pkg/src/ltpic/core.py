"""Domain types shared by every kernel.

Units are SI throughout, except particle kinetic energies and cross-section
abscissae, which are in electron-volts.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.constants as co


class CapacityExhausted(RuntimeError):
    """Raised when an append would overrun the preallocated particle arrays."""


@dataclass(frozen=True)
class Constants:
    """Physical constants (CODATA via scipy). Override only in tests."""

    e: float = co.elementary_charge
    m_e: float = co.electron_mass
    eps0: float = co.epsilon_0
    m_heavy: float = 39.948 * co.atomic_mass  # argon

    @property
    def q_over_m(self) -> float:
        return -self.e / self.m_e

    @property
    def mass_ratio(self) -> float:
        return self.m_e / self.m_heavy

    def energy_ev(self, vel: np.ndarray) -> np.ndarray:
        """Kinetic energy in eV of velocities shaped (..., 3)."""
        return 0.5 * self.m_e * np.einsum("...i,...i->...", vel, vel) / self.e

    def speed_from_ev(self, energy: np.ndarray) -> np.ndarray:
        return np.sqrt(2.0 * self.e * np.asarray(energy) / self.m_e)


CODATA = Constants()


# ----- counter-based random numbers ----- #

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_STEP_MUL = np.uint64(0xD1B54A32D192ED03)
_SLOT_MUL = np.uint64(0x8CB92BA72F3D8DD7)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31, _S11 = (np.uint64(s) for s in (30, 27, 31, 11))
_INV_2_53 = 1.0 / 9007199254740992.0

#: step id used for initial-condition sampling, disjoint from simulation steps
INIT_STEP = 2**64 - 1


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; bijective on uint64
    x = x ^ (x >> _S30)
    x = x * _MIX1
    x = x ^ (x >> _S27)
    x = x * _MIX2
    return x ^ (x >> _S31)


def _as_u64(a) -> np.ndarray:
    if isinstance(a, (int, np.integer)):
        return np.asarray(int(a) % 2**64, dtype=np.uint64)
    arr = np.asarray(a)
    return arr if arr.dtype == np.uint64 else arr.astype(np.uint64)


def _offset(step, slot) -> np.ndarray:
    step = _as_u64(step)
    slot = _as_u64(slot)
    with np.errstate(over="ignore"):
        return (step + _GOLDEN) * _STEP_MUL + slot * _SLOT_MUL


@dataclass(frozen=True)
class Rng:
    """Stateless counter-based generator.

    ``draw(stream, step, slot)`` hashes the tuple together with the seed, so a
    value depends only on its coordinates and never on the order in which
    draws are requested.
    """

    seed: int = 0

    @property
    def _key(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return _mix64(np.asarray(self.seed % 2**64, dtype=np.uint64) + _GOLDEN)

    def stream_base(self, stream) -> np.ndarray:
        """Per-stream hash state; reuse it for several slots of one step."""
        with np.errstate(over="ignore"):
            return _mix64(np.atleast_1d(_as_u64(stream)) ^ self._key)

    def bits(self, stream, step, slot, base=None) -> np.ndarray:
        if base is None:
            base = self.stream_base(stream)
        with np.errstate(over="ignore"):
            return _mix64(base + _offset(step, slot))

    def uniform(self, stream, step, slot, base=None) -> np.ndarray:
        """Uniform doubles in [0, 1), vectorised over ``stream`` and ``slot``."""
        h = self.bits(stream, step, slot, base)
        return (h >> _S11).astype(np.float64) * _INV_2_53

    def draw(self, stream, step, slot):
        """Scalar-friendly :meth:`uniform`."""
        out = self.uniform(stream, step, slot)
        if np.ndim(stream) == 0 and np.ndim(slot) == 0:
            return float(out[0])
        return out

    def spawn(self, key: int) -> "Rng":
        """Independent generator for a sub-task (e.g. one rank)."""
        with np.errstate(over="ignore"):
            child = _mix64(np.asarray([self.seed % 2**64], dtype=np.uint64) ^ _mix64(_as_u64(key) + _SLOT_MUL))
        return Rng(int(child[0]))


def draw_uniform(rng: Rng, stream, step, slot):
    return rng.draw(stream, step, slot)


def derive_uid(parent_uid: np.ndarray, step: int) -> np.ndarray:
    """Deterministic identity for a particle created by ``parent_uid`` at ``step``."""
    with np.errstate(over="ignore"):
        return _mix64(_mix64(_as_u64(parent_uid) + _SLOT_MUL) + _offset(step, 0x5EC))


# ----- particles ----- #

AUX_CELL, AUX_ENERGY, AUX_ION_TAG, AUX_META_TAG = range(4)


class ParticleStore:
    """Preallocated structure-of-arrays electron ensemble.

    Slots ``[0, cursor)`` hold particles; a slot with zero weight is dead.
    ``aux`` columns are cell index, kinetic energy (eV), and the per-step
    ion / metastable source tags.
    """

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = int(capacity)
        self.pos = np.zeros((capacity, 3))
        self.vel = np.zeros((capacity, 3))
        self.weight = np.zeros(capacity)
        self.aux = np.zeros((capacity, 4))
        self.uid = np.zeros(capacity, dtype=np.uint64)
        self.cursor = 0
        self._lock = threading.Lock()

    @classmethod
    def from_arrays(cls, pos, vel, weight, capacity=None, uid=None) -> "ParticleStore":
        n = len(weight)
        store = cls(n if capacity is None else capacity)
        if n > store.capacity:
            raise CapacityExhausted(f"{n} particles exceed capacity {store.capacity}")
        store.pos[:n] = pos
        store.vel[:n] = vel
        store.weight[:n] = weight
        store.uid[:n] = np.arange(n, dtype=np.uint64) if uid is None else uid
        store.cursor = n
        return store

    @property
    def live_count(self) -> int:
        return int(np.count_nonzero(self.weight[: self.cursor] > 0))

    @property
    def dead_count(self) -> int:
        return self.cursor - self.live_count

    def live_indices(self) -> np.ndarray:
        return np.flatnonzero(self.weight[: self.cursor] > 0)

    def reserve(self, k: int) -> int:
        """Atomically claim ``k`` consecutive slots; returns the first one."""
        with self._lock:
            start = self.cursor
            if start + k > self.capacity:
                raise CapacityExhausted(
                    f"append of {k} at cursor {start} exceeds capacity {self.capacity}"
                )
            self.cursor = start + k
        return start

    def canonicalize(self, start: int) -> None:
        """Order slots ``[start, cursor)`` by uid so layout is schedule-independent."""
        stop = self.cursor
        if stop - start < 2:
            return
        order = start + np.argsort(self.uid[start:stop], kind="stable")
        for arr in (self.pos, self.vel, self.weight, self.aux, self.uid):
            arr[start:stop] = arr[order]

    def copy(self) -> "ParticleStore":
        new = ParticleStore(self.capacity)
        for name in ("pos", "vel", "weight", "aux", "uid"):
            getattr(new, name)[:] = getattr(self, name)
        new.cursor = self.cursor
        return new

    def total_weight(self) -> float:
        # exact sum, so the value cannot depend on where dead slots sit
        return math.fsum(self.weight[: self.cursor])


def append_particle(store: ParticleStore, pos, vel, weight, uid=None) -> int:
    """Append one particle through the shared atomic cursor."""
    i = store.reserve(1)
    store.pos[i] = pos
    store.vel[i] = vel
    store.weight[i] = weight
    store.aux[i] = 0.0
    store.uid[i] = i if uid is None else uid
    return i


def compact(store: ParticleStore) -> ParticleStore:
    """Move survivors to the front, keeping their relative order."""
    keep = store.live_indices()
    n = keep.size
    if n == store.cursor:
        return store
    for arr in (store.pos, store.vel, store.weight, store.aux, store.uid):
        arr[:n] = arr[keep]
        arr[n : store.cursor] = 0
    store.cursor = n
    return store


def needs_compaction(store: ParticleStore, dead_fraction: float = 0.25) -> bool:
    live = store.live_count
    return store.cursor - live > dead_fraction * live


# ----- grid ----- #


@dataclass
class Grid:
    """Uniform 1D grid of ``M`` cells spanning ``[0, L)``.

    ``sources`` holds net ion and metastable production (m^-3 s^-1) from the
    last particle-to-cell reduction; ``pending`` collects source tags of
    particles that died before they could be deposited.
    """

    M: int
    L: float
    area: float = 1.0
    phi: np.ndarray = field(default=None)
    efield: np.ndarray = field(default=None)
    n_e: np.ndarray = field(default=None)
    n_i: np.ndarray = field(default=None)
    n_m: np.ndarray = field(default=None)
    n_n: np.ndarray = field(default=None)
    te: np.ndarray = field(default=None)
    sources: np.ndarray = field(default=None)
    pending: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.M < 1 or not self.L > 0:
            raise ValueError("grid needs M >= 1 and L > 0")
        for name in ("phi", "efield", "n_e", "n_i", "n_m", "n_n", "te"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.M))
        if self.sources is None:
            self.sources = np.zeros((self.M, 2))
        if self.pending is None:
            self.pending = np.zeros((self.M, 2))

    @property
    def dx(self) -> float:
        return self.L / self.M

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(self.M) + 0.5) * self.dx

    @property
    def cell_volume(self) -> float:
        return self.dx * self.area

    def density(self, species: str) -> np.ndarray:
        return getattr(self, "n_" + species)

    def cell_of(self, x: np.ndarray) -> np.ndarray:
        # particles at x >= L are absorbed before use; clip guards rounding at L
        j = np.floor(np.asarray(x) / self.dx).astype(np.int64)
        return np.clip(j, 0, self.M - 1)

    def copy(self) -> "Grid":
        kw = {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}
        return Grid(**kw)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.__dict__.items() if isinstance(v, np.ndarray)}
