"""Quick invariant checks runnable from the command line."""

from __future__ import annotations

import numpy as np
from scipy import stats

from .config import SimConfig
from .core import Constants, Grid, ParticleStore, Rng, compact
from .coulomb import CoulombParams, build_pair_index, build_pair_index_sequential, ta_collide_pair
from .dsmc import channels_from_config, dsmc_step, dsmc_step_sequential
from .fields import solve_poisson
from .p2c import deposit_atomic, deposit_sorted_oracle
from .xsect import certified_error


def _random_store(seed: int, n: int, L: float) -> ParticleStore:
    g = np.random.default_rng(seed)
    pos = np.zeros((n, 3))
    pos[:, 0] = g.uniform(0, L, n)
    vel = g.normal(scale=1e6, size=(n, 3))
    return ParticleStore.from_arrays(pos, vel, g.integers(1, 4, n).astype(float), capacity=3 * n)


def check_rng(seed: int = 0):
    u = Rng(seed).uniform(np.arange(100_000), 0, 0)
    p = stats.kstest(u, "uniform").pvalue
    return p > 0.01, f"KS p-value {p:.3f}"


def check_xsect(cfg: SimConfig):
    worst = max(certified_error(ch.xsec) for ch in channels_from_config(cfg))
    return worst <= 0.02, f"worst certified error {worst:.4f}"


def check_compact(seed: int = 1):
    s = _random_store(seed, 5000, 1.0)
    s.weight[: s.cursor][np.random.default_rng(seed).random(s.cursor) < 0.3] = 0.0
    before = s.weight[s.live_indices()].copy()
    compact(s)
    return np.array_equal(s.weight[: s.cursor], before), f"{s.cursor} survivors"


def check_pairing(seed: int = 2):
    g = Grid(M=50, L=1.0)
    s = _random_store(seed, 20_000, 1.0)
    counts = np.bincount(g.cell_of(s.pos[: s.cursor, 0]), minlength=g.M)
    a = build_pair_index(s, g, counts)
    b = build_pair_index_sequential(s, g, counts)
    return np.array_equal(a.P, b.P), "vectorised index equals cursor loop"


def check_p2c(seed: int = 3):
    g = Grid(M=64, L=1.0)
    s = _random_store(seed, 20_000, 1.0)
    a, b = deposit_atomic(s, g, 4), deposit_sorted_oracle(s, g)
    rel = np.max(np.abs(a.stacked() - b.stacked()) / np.maximum(np.abs(b.stacked()), 1e-300))
    return rel <= 1e-12, f"max relative difference {rel:.2e}"


def check_dsmc(cfg: SimConfig, seed: int = 4):
    g = Grid(M=10, L=0.01)
    g.n_n[:] = cfg.n_n
    s = _random_store(seed, 2000, 0.01)
    ch = channels_from_config(cfg)
    s2, g2 = s.copy(), g.copy()
    a = dsmc_step(s, g, ch, 1e-12, Rng(seed), 0)
    b = dsmc_step_sequential(s2, g2, ch, 1e-12, Rng(seed), 0)
    same = np.array_equal(a.collisions, b.collisions) and np.array_equal(s.vel, s2.vel)
    return same and a.n_after == a.n_before + a.created - a.absorbed, f"collisions {a.collisions.tolist()}"


def check_coulomb(seed: int = 5):
    g = np.random.default_rng(seed)
    v1, v2 = g.normal(size=(1000, 3)) * 1e6, g.normal(size=(1000, 3)) * 1e6
    w1, w2 = ta_collide_pair(v1, v2, CoulombParams(10.0, 1e21, 1e-11), g.random(1000), g.random(1000))
    dp = np.abs((w1 + w2) - (v1 + v2)).max() / np.abs(v1 + v2).max()
    de = abs(np.sum(w1**2 + w2**2) - np.sum(v1**2 + v2**2)) / np.sum(v1**2 + v2**2)
    return dp < 1e-12 and de < 1e-12, f"momentum {dp:.1e}, energy {de:.1e}"


def check_poisson():
    errs = []
    for M in (64, 128, 256):
        x = (np.arange(M) + 0.5) / M
        rho = np.pi**2 * np.sin(np.pi * x)
        unit = Constants(e=1.0, eps0=1.0)
        phi = solve_poisson(rho, np.zeros(M), 0.0, 0.0, 1.0 / M, unit)
        errs.append(np.abs(phi - np.sin(np.pi * x)).max())
    order = np.log2(errs[-2] / errs[-1])
    return abs(order - 2.0) <= 0.1, f"order {order:.3f}"


def run_all(cfg: SimConfig | None = None):
    cfg = cfg or SimConfig()
    checks = {
        "rng-uniformity": lambda: check_rng(cfg.seed),
        "xsect-certified": lambda: check_xsect(cfg),
        "compact-stable": check_compact,
        "pair-index": check_pairing,
        "p2c-oracle": check_p2c,
        "dsmc-oracle": lambda: check_dsmc(cfg),
        "coulomb-conservation": check_coulomb,
        "poisson-order": check_poisson,
    }
    results = []
    for name, fn in checks.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # report, don't abort the suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results
