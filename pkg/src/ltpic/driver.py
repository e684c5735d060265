"""Operator-split time integration, the 0-D steady-state mode, diagnostics
and rank-replicated execution.

A step is split into a kinetic phase (Coulomb, electron-heavy collisions,
push, recombination; repeated ``subcycles`` times), a reduction of per-cell
moments across ranks, and a grid phase (heavy transport and Poisson solve)
that every rank executes identically on the reduced moments.
"""

from __future__ import annotations

import csv
import hashlib
import time
import warnings
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtri

from .config import SimConfig
from .core import (
    AUX_CELL,
    AUX_ENERGY,
    AUX_ION_TAG,
    AUX_META_TAG,
    INIT_STEP,
    Grid,
    ParticleStore,
    Rng,
    compact,
    needs_compaction,
)
from .coulomb import CoulombParams, coulomb_step
from .dsmc import channels_from_config, dsmc_step, dsmc_step_sequential
from .fields import advance_heavies, drive_voltage, efield_from_phi, solve_poisson
from .p2c import CellMoments, deposit_atomic, deposit_sorted_oracle
from .recomb import recomb_step

KERNELS = ("coulomb", "dsmc", "recomb", "p2c", "reduce", "fields")
SLOT_POPULATION = 11


class NonConvergence(RuntimeError):
    pass


class ReplicationError(RuntimeError):
    """Rank grids diverged after the grid phase."""


class EmptyEnsemble(ValueError):
    pass


@dataclass
class StepRecord:
    step: int
    time: float
    n_live: int
    created: int
    absorbed: int
    recombined: int
    starved: int
    pairs: int
    collisions: np.ndarray
    te: float
    vx: float


@dataclass
class SimState:
    config: SimConfig
    store: ParticleStore
    grid: Grid
    channels: list
    rng: Rng
    w0: float
    target: int
    rank: int = 0
    step: int = 0
    time: float = 0.0
    timers: dict = field(default_factory=lambda: dict.fromkeys(KERNELS + ("total",), 0.0))
    calls: Counter = field(default_factory=Counter)
    record: StepRecord | None = None

    @contextmanager
    def timer(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timers[name] += time.perf_counter() - t0


# ----- initialisation ----- #


def sample_maxwellian(rng: Rng, uid: np.ndarray, L: float, temperature: float, consts) -> tuple[np.ndarray, np.ndarray]:
    """Uniform positions in [0, L) and isotropic Maxwellian velocities at ``temperature`` eV."""
    base = rng.stream_base(uid)
    x = np.zeros((uid.size, 3))
    x[:, 0] = L * rng.uniform(None, INIT_STEP, 0, base=base)
    sigma = np.sqrt(consts.e * temperature / consts.m_e)
    v = np.empty((uid.size, 3))
    for k in range(3):
        r = rng.uniform(None, INIT_STEP, k + 1, base=base)
        v[:, k] = sigma * ndtri(np.clip(r, 2.0**-54, 1.0 - 2.0**-54))
    return x, v


def init_state(config: SimConfig, rank: int = 0, ranks: int = 1, n_local: int | None = None) -> SimState:
    cfg = config
    zero_d = cfg.mode == "zero_d"
    M = 1 if zero_d else cfg.M
    n_local = cfg.n_init // ranks if n_local is None else n_local
    n_total = n_local * ranks
    rng = Rng(cfg.seed)
    grid = Grid(M=M, L=cfg.L, area=cfg.area)
    grid.n_n[:] = cfg.n_n
    uid = np.arange(rank * n_local, (rank + 1) * n_local, dtype=np.uint64)
    x, v = sample_maxwellian(rng, uid, cfg.L, cfg.temperature0, cfg.constants)
    if zero_d:
        density = cfg.ionization_fraction * cfg.n_n
        grid.efield[:] = cfg.efield
        grid.n_e[:] = grid.n_i[:] = density
        w0 = (density if density > 0 else 1.0) * cfg.L * cfg.area / max(n_total, 1)
    else:
        w0 = cfg.density0 * cfg.L * cfg.area / max(n_total, 1)
        grid.n_i[:] = cfg.density0
    store = ParticleStore.from_arrays(
        x, v, np.full(n_local, w0), capacity=max(int(round(cfg.capacity_factor * n_local)), n_local), uid=uid
    )
    store.aux[:n_local, AUX_CELL] = grid.cell_of(x[:, 0])
    store.aux[:n_local, AUX_ENERGY] = cfg.constants.energy_ev(v)
    state = SimState(cfg, store, grid, channels_from_config(cfg), rng, w0, n_local, rank)
    return state


# ----- transports ----- #


class InProcessTransport:
    """All ranks live in this process; reduction sums in ascending rank order."""

    def __init__(self, size: int = 1):
        self.size = size
        self.rank = 0

    def allreduce(self, buffers: list[np.ndarray]) -> np.ndarray:
        if len(buffers) != self.size:
            raise RuntimeError(f"expected {self.size} rank buffers, got {len(buffers)}")
        return _ascending_sum(buffers)

    def digests(self, local: list[bytes]) -> list[bytes]:
        return list(local)


class MPITransport:
    """One rank per process via mpi4py; same contract as the in-process transport."""

    def __init__(self, comm=None):
        from mpi4py import MPI

        self.comm = MPI.COMM_WORLD if comm is None else comm
        self.size = self.comm.Get_size()
        self.rank = self.comm.Get_rank()

    def allreduce(self, buffers: list[np.ndarray]) -> np.ndarray:
        if len(buffers) != 1:
            raise RuntimeError("an MPI rank holds exactly one local buffer")
        return _ascending_sum(self.comm.allgather(buffers[0]))

    def digests(self, local: list[bytes]) -> list[bytes]:
        return [d for part in self.comm.allgather(local) for d in part]


def _ascending_sum(buffers) -> np.ndarray:
    total = np.array(buffers[0], dtype=float, copy=True)
    for b in buffers[1:]:
        total += b
    return total


def allreduce_cells(local_moments: list[np.ndarray], transport=None) -> np.ndarray:
    """Element-wise sum of per-rank cell arrays, rank-ascending."""
    transport = transport or InProcessTransport(len(local_moments))
    return transport.allreduce(local_moments)


@dataclass
class RankEnsemble:
    states: list[SimState]
    transport: object

    @property
    def size(self) -> int:
        return self.transport.size


def ensemble_init(config: SimConfig, P: int | None = None, transport=None) -> RankEnsemble:
    """P replicas sampling the same distribution with disjoint particle streams."""
    P = config.ranks if P is None else P
    if config.n_init % P:
        warnings.warn(f"n_init={config.n_init} not divisible by {P} ranks; using {config.n_init // P} per rank")
    n_local = config.n_init // P
    if transport is None:
        transport = InProcessTransport(P)
        ranks = range(P)
    else:
        ranks = [transport.rank]
    return RankEnsemble([init_state(config, r, P, n_local) for r in ranks], transport)


# ----- step phases ----- #


def _n_diag(n_channels: int) -> int:
    return 7 + n_channels


def _population_control(state: SimState, sid: int) -> None:
    store = state.store
    live = store.live_indices()
    excess = live.size - state.target
    if excess <= 0:
        return
    key = state.rng.bits(store.uid[live], sid, SLOT_POPULATION)
    kill = live[np.argsort(key, kind="stable")[:excess]]
    store.weight[kill] = 0.0
    store.aux[kill, AUX_ION_TAG] = 0.0
    store.aux[kill, AUX_META_TAG] = 0.0


def kinetic_phase(state: SimState) -> np.ndarray:
    """Steps S1-S3 on one rank; returns the local reduction buffer."""
    cfg = state.config
    consts = cfg.constants
    zero_d = cfg.mode == "zero_d"
    store, grid = state.store, state.grid
    C = len(state.channels)
    diag = np.zeros(_n_diag(C))
    boundary = "periodic" if zero_d else "absorb"
    use_coulomb = cfg.coulomb and (not zero_d or cfg.ionization_fraction > 0)
    for k in range(cfg.subcycles):
        sid = state.step * cfg.subcycles + k
        if use_coulomb:
            with state.timer("coulomb"):
                cs = coulomb_step(
                    store, grid, CoulombParams(cfg.ln_lambda, grid.n_e, cfg.dt), cfg.dt, state.rng, sid,
                    consts=consts, sequential=cfg.sequential,
                )
            diag[6] += cs.pairs
            state.calls["coulomb"] += 1
        with state.timer("dsmc"):
            if cfg.sequential:
                st = dsmc_step_sequential(store, grid, state.channels, cfg.dt, state.rng, sid, consts, boundary)
            else:
                st = dsmc_step(store, grid, state.channels, cfg.dt, state.rng, sid, consts, boundary, cfg.workers)
        state.calls["dsmc"] += 1
        diag[2] += st.created
        diag[3] += st.absorbed
        diag[7:] += st.collisions
        if not zero_d and cfg.recomb_rate > 0:
            with state.timer("recomb"):
                rs = recomb_step(store, grid, cfg.recomb_rate, cfg.dt, state.rng, sid, cfg.recomb_energy, consts)
            diag[4] += rs.recombined
            diag[5] += rs.starved
            state.calls["recomb"] += 1
        if zero_d:
            _population_control(state, sid)
    if needs_compaction(store):
        compact(store)
    with state.timer("p2c"):
        if cfg.sequential:
            mom = deposit_sorted_oracle(store, grid, consts)
        else:
            mom = deposit_atomic(store, grid, cfg.subbins, consts)
        state.calls["p2c"] += 1
        stacked = mom.stacked()
        stacked[:, 2:4] += np.maximum(grid.pending, 0.0)
        stacked[:, 4:6] += np.maximum(-grid.pending, 0.0)
        grid.pending[:] = 0.0
        store.aux[: store.cursor, AUX_ION_TAG] = 0.0
        store.aux[: store.cursor, AUX_META_TAG] = 0.0
        live = store.live_indices()
        diag[0] = np.dot(store.weight[live], store.vel[live, 0])
        diag[1] = live.size
    return np.concatenate([stacked.ravel(), diag])


def grid_phase(state: SimState, buffer: np.ndarray) -> None:
    """Step S4 from the globally reduced buffer; identical on every rank."""
    cfg = state.config
    grid = state.grid
    M = grid.M
    C = len(state.channels)
    W = CellMoments.WIDTH
    mom = buffer[: W * M].reshape(M, W)
    diag = buffer[W * M :]
    count, energy = mom[:, 0], mom[:, 1]
    vol = grid.cell_volume
    dtf = cfg.dt * cfg.subcycles
    state.step += 1
    state.time += dtf
    with state.timer("fields"):
        with np.errstate(invalid="ignore", divide="ignore"):
            grid.te = np.where(count > 0, (2.0 / 3.0) * energy / np.where(count > 0, count, 1.0), 0.0)
        grid.sources = (mom[:, 2:4] - mom[:, 4:6]) / (vol * dtf)
        if cfg.mode != "zero_d":
            grid.n_e = count / vol
            bc = (drive_voltage(state.time, cfg.v0, cfg.freq), 0.0)
            dx = grid.dx
            s_i, s_m = grid.sources[:, 0], grid.sources[:, 1]
            grid.n_i = advance_heavies(grid.n_i, grid.phi, s_i, dtf, dx, cfg.mu_i, cfg.d_i, bc)
            grid.n_m = advance_heavies(grid.n_m, grid.phi, s_m, dtf, dx, cfg.mu_m, cfg.d_m, bc)
            grid.n_n = advance_heavies(grid.n_n, grid.phi, -(s_i + s_m), dtf, dx, cfg.mu_n, cfg.d_n, bc,
                                       frozen=cfg.freeze_neutrals)
            grid.phi = solve_poisson(grid.n_i, grid.n_e, bc[0], bc[1], dx, cfg.constants)
            grid.efield = efield_from_phi(grid.phi, dx)
        state.calls["fields"] += 1
    w_total = count.sum()
    state.record = StepRecord(
        step=state.step,
        time=state.time,
        n_live=int(diag[1]),
        created=int(diag[2]),
        absorbed=int(diag[3]),
        recombined=int(diag[4]),
        starved=int(diag[5]),
        pairs=int(diag[6]),
        collisions=diag[7 : 7 + C].astype(np.int64),
        te=float((2.0 / 3.0) * energy.sum() / w_total) if w_total > 0 else 0.0,
        vx=float(diag[0] / w_total) if w_total > 0 else 0.0,
    )


def step(state: SimState) -> SimState:
    """One full operator-split step on a single rank."""
    t0 = time.perf_counter()
    buf = kinetic_phase(state)
    with state.timer("reduce"):
        glob = allreduce_cells([buf])
    grid_phase(state, glob)
    state.timers["total"] += time.perf_counter() - t0
    return state


def grid_digest(grid: Grid) -> bytes:
    h = hashlib.sha256()
    for name, arr in sorted(grid.arrays().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.digest()


def check_replication(ensemble: RankEnsemble) -> None:
    digests = ensemble.transport.digests([grid_digest(s.grid) for s in ensemble.states])
    bad = [r for r, d in enumerate(digests) if d != digests[0]]
    if bad:
        raise ReplicationError(f"grid arrays on ranks {bad} differ from rank 0")


def distributed_step(ensemble: RankEnsemble) -> RankEnsemble:
    """Independent kinetic phases, one all-reduce, replicated grid phase."""
    t0 = time.perf_counter()
    bufs = [kinetic_phase(s) for s in ensemble.states]
    lead = ensemble.states[0]
    with lead.timer("reduce"):
        glob = ensemble.transport.allreduce(bufs)
    for s in ensemble.states:
        grid_phase(s, glob)
    check_replication(ensemble)
    elapsed = time.perf_counter() - t0
    for s in ensemble.states:
        s.timers["total"] += elapsed
    return ensemble


# ----- diagnostics ----- #


def eedf_histogram(store: ParticleStore, n_bins: int, eps_max: float, consts=None):
    """Weighted energy histogram normalised to sum(f * d_eps) = 1.

    Returns ``(centers, f)``; particles above ``eps_max`` are not binned.
    """
    from .core import CODATA

    consts = consts or CODATA
    live = store.live_indices()
    if live.size == 0:
        raise EmptyEnsemble("no live particles to histogram")
    eps = consts.energy_ev(store.vel[live])
    hist, edges = np.histogram(eps, bins=n_bins, range=(0.0, eps_max), weights=store.weight[live])
    total = hist.sum()
    if total <= 0:
        raise EmptyEnsemble(f"no particle energies below {eps_max} eV")
    f = hist / (total * np.diff(edges))
    return 0.5 * (edges[:-1] + edges[1:]), f


FIELD_COLUMNS = ("x", "phi", "E", "n_e", "n_i", "n_m", "T_e")
EEDF_COLUMNS = ("eps", "f")
TIMING_COLUMNS = ("step",) + tuple(f"t_{k}" for k in KERNELS) + ("t_total",)


def stats_columns(channels) -> tuple[str, ...]:
    return ("step", "time", "N", "created", "absorbed", "recombined", "starved", "coulomb_pairs", "T_e") + tuple(
        f"coll_{ch.name}" for ch in channels
    )


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


class Diagnostics:
    """CSV writers for fields, EEDF, per-step ledger and timings."""

    def __init__(self, out_dir, channels):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.columns = stats_columns(channels)
        self._stats = open(self.out / "stats.csv", "w", newline="")
        self._timings = open(self.out / "timings.csv", "w", newline="")
        self.stats_writer = csv.writer(self._stats)
        self.timing_writer = csv.writer(self._timings)
        self.stats_writer.writerow(self.columns)
        self.timing_writer.writerow(TIMING_COLUMNS)
        self._last_timers = None

    def record(self, state: SimState) -> None:
        r = state.record
        row = [r.step, r.time, r.n_live, r.created, r.absorbed, r.recombined, r.starved, r.pairs, r.te]
        self.stats_writer.writerow([_fmt(v) for v in row + list(r.collisions)])
        now = dict(state.timers)
        prev = self._last_timers or dict.fromkeys(now, 0.0)
        self.timing_writer.writerow([r.step] + [f"{now[k] - prev[k]:.6e}" for k in KERNELS + ("total",)])
        self._last_timers = now

    def snapshot(self, state: SimState, eedf_bins: int, eedf_emax: float, stores=None) -> None:
        g = state.grid
        with open(self.out / f"fields_{state.step}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(FIELD_COLUMNS)
            for row in zip(g.centers, g.phi, g.efield, g.n_e, g.n_i, g.n_m, g.te):
                w.writerow([_fmt(v) for v in row])
        stores = stores or [state.store]
        merged = merge_stores(stores)
        try:
            centers, f = eedf_histogram(merged, eedf_bins, eedf_emax, state.config.constants)
        except EmptyEnsemble:
            return
        with open(self.out / f"eedf_{state.step}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(EEDF_COLUMNS)
            for row in zip(centers, f):
                w.writerow([_fmt(v) for v in row])

    def close(self) -> None:
        self._stats.close()
        self._timings.close()


def merge_stores(stores) -> ParticleStore:
    if len(stores) == 1:
        return stores[0]
    parts = [(s.pos[: s.cursor], s.vel[: s.cursor], s.weight[: s.cursor]) for s in stores]
    pos, vel, weight = (np.concatenate(p) for p in zip(*parts))
    return ParticleStore.from_arrays(pos, vel, weight)


# ----- drivers ----- #


def run_discharge(config: SimConfig, out_dir=None, transport=None, n_steps=None) -> RankEnsemble:
    """The 1D3V discharge: ``n_steps`` replicated steps with periodic dumps."""
    ens = ensemble_init(config, transport=transport)
    lead = ens.states[0]
    write = out_dir is not None and ens.transport.rank == 0
    diag = Diagnostics(out_dir, lead.channels) if write else None
    n_steps = config.n_steps if n_steps is None else n_steps
    try:
        for _ in range(n_steps):
            distributed_step(ens)
            if diag:
                diag.record(lead)
                if lead.step % config.interval == 0 or lead.step == n_steps:
                    diag.snapshot(lead, config.eedf_bins, config.eedf_emax, [s.store for s in ens.states])
    finally:
        if diag:
            diag.close()
    return ens


@dataclass
class SteadyStateReport:
    te: float
    te_err: float
    rates: dict
    mobility: float
    eedf: tuple
    steps: int
    converged: bool
    history: np.ndarray


def _window_mean_err(x: np.ndarray, batches: int = 10) -> tuple[float, float]:
    mean = float(np.mean(x))
    if x.size < 2 * batches:
        return mean, float(np.std(x) / np.sqrt(max(x.size, 1)))
    b = np.array([np.mean(c) for c in np.array_split(x, batches)])
    return mean, float(np.std(b, ddof=1) / np.sqrt(batches))


def is_steady(te: np.ndarray, check_every: int, tol: float, min_steps: int = 0) -> bool:
    """Relative change of the mean over the last two windows of max(check_every, 10% elapsed)."""
    n = te.size
    w = max(check_every, int(0.1 * n))
    if n < max(min_steps, 2 * w):
        return False
    a = np.mean(te[n - 2 * w : n - w])
    b = np.mean(te[n - w :])
    return bool(abs(b - a) <= tol * abs(b))


def run_zero_d(config: SimConfig, P: int | None = None, fixed_steps: int | None = None,
               raise_on_failure: bool = True) -> SteadyStateReport:
    """Constant-field, fixed-density swarm run to steady state.

    With ``fixed_steps`` the detector is bypassed and the report averages the
    last 10% of the run.
    """
    cfg = config.replace(mode="zero_d")
    ens = ensemble_init(cfg, P)
    lead = ens.states[0]
    C = len(lead.channels)
    te_hist: list[float] = []
    vx_hist: list[float] = []
    n_hist: list[int] = []
    coll_hist: list[np.ndarray] = []
    converged = False
    limit = cfg.max_steps if fixed_steps is None else fixed_steps
    while lead.step < limit:
        distributed_step(ens)
        r = lead.record
        te_hist.append(r.te)
        vx_hist.append(r.vx)
        n_hist.append(r.n_live)
        coll_hist.append(r.collisions)
        if fixed_steps is None and lead.step % cfg.check_every == 0:
            if is_steady(np.asarray(te_hist), cfg.check_every, cfg.steady_tol, cfg.min_steps):
                converged = True
                break
    te = np.asarray(te_hist)
    if fixed_steps is None and not converged and raise_on_failure:
        raise NonConvergence(f"T_e not steady after {lead.step} steps")
    w = max(cfg.check_every, int(0.1 * te.size)) if fixed_steps is None else max(1, te.size // 10)
    w = min(w, te.size)
    mean, err = _window_mean_err(te[-w:])
    coll = np.asarray(coll_hist[-w:]).sum(axis=0) if C else np.zeros(0)
    # collisions in step k were tested by the population left after step k-1
    n_tested = float(np.sum(n_hist[-w - 1 : -1])) if len(n_hist) > w else float(np.sum(n_hist[-w:]))
    rates = {}
    for c, ch in enumerate(lead.channels):
        n_target = float(lead.grid.density(ch.target)[0])
        denom = n_tested * cfg.dt * cfg.subcycles * n_target
        rates[ch.name] = float(coll[c] / denom) if denom > 0 else 0.0
    vx = float(np.mean(vx_hist[-w:]))
    mobility = -vx / cfg.efield if cfg.efield else 0.0
    eedf = eedf_histogram(merge_stores([s.store for s in ens.states]), cfg.eedf_bins, cfg.eedf_emax, cfg.constants)
    return SteadyStateReport(mean, err, rates, mobility, eedf, lead.step, converged, te)
