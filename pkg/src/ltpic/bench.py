"""Kernel timings, the analytic per-particle cost model and the proxy kernel sweep."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .config import SimConfig
from .driver import KERNELS, distributed_step, ensemble_init

F_DSMC = 405  # flops per particle in the collision kernel
M_DSMC = 18 * 8  # bytes moved per particle
M_P2C = 4 * 8


@dataclass(frozen=True)
class CostModel:
    flop_term: float
    memory_term: float

    @property
    def total(self) -> float:
        return self.flop_term + self.memory_term


def cost_model(tau_f: float, tau_m: float, f_d: int = F_DSMC, m_d: int = M_DSMC) -> CostModel:
    """T = f_D tau_f + m_D tau_m (ns per particle for tau in ns/flop, ns/byte)."""
    return CostModel(f_d * tau_f, m_d * tau_m)


def p2c_model(tau_m: float, m: int = M_P2C) -> float:
    return m * tau_m


def allreduce_model(tau_c: float, P: int, M: int) -> float:
    """Hypercube all-reduce estimate tau_c log2(P) M."""
    return tau_c * np.log2(P) * M if P > 1 else 0.0


@njit(cache=True)
def _proxy(x, y, iterations):
    n = x.size
    for _ in range(iterations):
        for i in range(n):
            x[i] = y[i]
            x[i] = 1.0 + i / 10.0
            t = y[i]
            y[i] = x[i]
            x[i] = t


def proxy_kernel(x: np.ndarray, y: np.ndarray, iterations: int) -> None:
    """Read / overwrite / register swap / write-back loop, in place.

    Element i plays the role of one thread; after a single iteration ``x``
    holds the old ``y`` and ``y[i] = 1 + i/10``.
    """
    if x.shape != y.shape:
        raise ValueError("x and y must have the same shape")
    if iterations > 0:
        _proxy(x, y, int(iterations))


def proxy_sweep(sizes_bytes=(1_000, 10_000, 100_000, 1_000_000, 10_000_000), iterations=(1, 10, 100, 1000),
                repeats: int = 3) -> list[dict]:
    """Best-of-``repeats`` time per (message size, iteration count)."""
    proxy_kernel(np.zeros(2), np.zeros(2), 1)  # compile outside the timings
    rows = []
    for it in iterations:
        for size in sizes_bytes:
            n = max(size // 8, 1)
            best = np.inf
            for _ in range(repeats):
                x = np.zeros(n)
                y = np.arange(n, dtype=float)
                t0 = time.perf_counter()
                proxy_kernel(x, y, it)
                best = min(best, time.perf_counter() - t0)
            rows.append({"size_bytes": size, "iterations": it, "seconds": best,
                         "ns_per_element_iteration": best * 1e9 / (n * it)})
    return rows


@dataclass
class BenchReport:
    particles: float  # mean live count over the timed steps
    steps: int
    ranks: int
    kernel_ns: dict = field(default_factory=dict)
    step_seconds: float = 0.0
    normalized_ns: float = 0.0
    model: CostModel | None = None
    p2c_model_ns: float = 0.0
    mpi_model_ns: float = 0.0
    proxy: list = field(default_factory=list)

    def rows(self) -> list[dict]:
        out = [{"kind": "kernel", "name": k, "value": v, "unit": "ns/particle/step"} for k, v in self.kernel_ns.items()]
        out.append({"kind": "step", "name": "T_P", "value": self.step_seconds, "unit": "s/step"})
        out.append({"kind": "step", "name": "T_hat_P", "value": self.normalized_ns, "unit": "ns/particle/step"})
        if self.model is not None:
            out.append({"kind": "model", "name": "dsmc_flops", "value": self.model.flop_term, "unit": "ns/particle"})
            out.append({"kind": "model", "name": "dsmc_memory", "value": self.model.memory_term, "unit": "ns/particle"})
            out.append({"kind": "model", "name": "dsmc_total", "value": self.model.total, "unit": "ns/particle"})
        out.append({"kind": "model", "name": "p2c_memory", "value": self.p2c_model_ns, "unit": "ns/particle"})
        out.append({"kind": "model", "name": "allreduce", "value": self.mpi_model_ns, "unit": "ns/step"})
        for r in self.proxy:
            out.append({"kind": "proxy", "name": f"{r['size_bytes']}B x{r['iterations']}", "value": r["seconds"], "unit": "s",
                        "size_bytes": r["size_bytes"], "iterations": r["iterations"]})
        return out


BENCH_COLUMNS = ("kind", "name", "size_bytes", "iterations", "ranks", "value", "unit")


def write_bench_csv(report: BenchReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_COLUMNS)
        for r in report.rows():
            w.writerow([r["kind"], r["name"], r.get("size_bytes", ""), r.get("iterations", ""), report.ranks,
                        repr(float(r["value"])), r["unit"]])


def bench(config: SimConfig, steps: int = 5, ranks: int | None = None, tau_f: float = 0.0, tau_m: float = 1.0 / 900.0,
          tau_c: float = 0.0, proxy: bool = True, proxy_sizes=None, proxy_iterations=None) -> BenchReport:
    """Time ``steps`` replicated steps and evaluate the analytic models.

    Kernel figures are wall time per particle per step summed over ranks;
    T_hat_P = T_P P / N uses the wall time of a whole step.
    """
    P = config.ranks if ranks is None else ranks
    ens = ensemble_init(config, P)
    distributed_step(ens)  # warm-up
    for s in ens.states:
        s.timers = dict.fromkeys(s.timers, 0.0)
    n_sum = 0
    t0 = time.perf_counter()
    for _ in range(steps):
        distributed_step(ens)
        n_sum += ens.states[0].record.n_live
    wall = (time.perf_counter() - t0) / steps
    n_mean = n_sum / steps
    rep = BenchReport(particles=n_mean, steps=steps, ranks=P)
    for k in KERNELS:
        tot = sum(s.timers[k] for s in ens.states)
        rep.kernel_ns[k] = tot * 1e9 / (steps * n_mean) if n_mean else 0.0
    rep.step_seconds = wall
    rep.normalized_ns = normalized_time(wall, P, n_mean)
    rep.model = cost_model(tau_f, tau_m)
    rep.p2c_model_ns = p2c_model(tau_m)
    rep.mpi_model_ns = allreduce_model(tau_c, P, config.M)
    if proxy:
        kw = {}
        if proxy_sizes is not None:
            kw["sizes_bytes"] = proxy_sizes
        if proxy_iterations is not None:
            kw["iterations"] = proxy_iterations
        rep.proxy = proxy_sweep(**kw)
    return rep


def normalized_time(t_p: float, P: int, N: float) -> float:
    """T_hat_P = T_P P / N, in ns for ``t_p`` in seconds."""
    return t_p * 1e9 * P / N if N else 0.0
