"""Command-line entry point: ``ltpic {run,zero-d,bench,validate}``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from importlib import resources
from pathlib import Path

from .config import ConfigError, SimConfig, load_config, parse_config


def _load(args) -> SimConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = parse_config(resources.files("ltpic.data").joinpath("default.ini").read_text())
    changes = {}
    if args.ranks is not None:
        changes["ranks"] = args.ranks
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.steps is not None:
        changes["n_steps"] = args.steps
    if args.sequential_oracle:
        changes["sequential"] = True
        changes["workers"] = 1
    return cfg.replace(**changes) if changes else cfg


def cmd_run(args) -> int:
    from .driver import MPITransport, run_discharge

    cfg = _load(args)
    transport = MPITransport() if args.mpi else None
    out = Path(args.out)
    ens = run_discharge(cfg, out, transport=transport)
    lead = ens.states[0]
    if ens.transport.rank == 0:
        print(f"{lead.step} steps, N = {lead.record.n_live}, mean T_e = {lead.record.te:.3f} eV -> {out}")
    return 0


def cmd_zero_d(args) -> int:
    from .driver import run_zero_d

    cfg = _load(args)
    rep = run_zero_d(cfg, P=cfg.ranks, fixed_steps=args.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eedf_steady.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("eps", "f"))
        for e, f in zip(*rep.eedf):
            w.writerow((repr(float(e)), repr(float(f))))
    summary = {
        "T_e": rep.te,
        "T_e_stderr": rep.te_err,
        "rates": rep.rates,
        "mobility": rep.mobility,
        "steps": rep.steps,
        "converged": rep.converged,
    }
    (out / "steady_state.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))
    return 0


def cmd_bench(args) -> int:
    from .bench import bench, write_bench_csv

    cfg = _load(args)
    rep = bench(cfg, steps=args.bench_steps, tau_f=args.tau_f, tau_m=args.tau_m, tau_c=args.tau_c,
                proxy=not args.no_proxy)
    write_bench_csv(rep, Path(args.out) / "bench.csv")
    for k, v in rep.kernel_ns.items():
        print(f"{k:>8s} {v:10.2f} ns/particle/step")
    print(f"T_P = {rep.step_seconds:.4g} s, T_hat_P = {rep.normalized_ns:.3f} ns (P={rep.ranks}, N={rep.particles:.0f})")
    print(f"model: flops {rep.model.flop_term:.4f} + memory {rep.model.memory_term:.4f} = {rep.model.total:.4f} ns")
    return 0


def cmd_validate(args) -> int:
    from .validate import run_all

    results = run_all(_load(args))
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file (default: bundled glow-discharge case)")
    common.add_argument("--ranks", type=int, help="number of replicated ranks P")
    common.add_argument("--seed", type=int)
    common.add_argument("--steps", type=int, help="number of steps")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--sequential-oracle", action="store_true", help="run every kernel in its sequential reference form")

    p = argparse.ArgumentParser(prog="ltpic", description="1D3V PIC/DSMC solver for low-temperature plasmas")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="1D3V RF glow discharge")
    run.add_argument("--mpi", action="store_true", help="one rank per MPI process (launch with mpiexec)")
    run.set_defaults(func=cmd_run)
    zd = sub.add_parser("zero-d", parents=[common], help="0-D swarm run to steady state")
    zd.set_defaults(func=cmd_zero_d)
    b = sub.add_parser("bench", parents=[common], help="kernel timings, cost model and proxy sweep")
    b.add_argument("--bench-steps", type=int, default=5)
    b.add_argument("--tau-f", type=float, default=0.0, help="ns per flop")
    b.add_argument("--tau-m", type=float, default=1.0 / 900.0, help="ns per byte")
    b.add_argument("--tau-c", type=float, default=0.0, help="ns per reduced cell value per log2(P)")
    b.add_argument("--no-proxy", action="store_true")
    b.set_defaults(func=cmd_bench)
    v = sub.add_parser("validate", parents=[common], help="quick invariant suite")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
