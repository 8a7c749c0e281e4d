"""Command-line entry point.

Exit codes: 0 when every check passes, 1 when an experiment or check fails,
2 for usage and config errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import das, pipeline, theory
from .distill import DistillMode
from .errors import ConfigError, ExfmError, NotConverged
from .numerics import child_seeds, seeded_rng
from .stream import dump_stream, generate_stream


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}  {self.detail}".rstrip()


def _report(checks: list[Check]) -> int:
    for c in checks:
        print(c.line())
    return 0 if all(c.ok for c in checks) else 1


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# ---------------------------------------------------------------------------
# theorem


def theorem_ah_checks(seeds=range(5), out: Path | None = None, sensitivity: bool = False) -> list[Check]:
    checks = []
    rows = []
    start = time.perf_counter()
    for seed in seeds:
        cfg = theory.AHConstructionConfig(seed=seed)
        try:
            r = theory.run_ah_multi_head(cfg)
        except NotConverged as exc:
            checks.append(Check(f"ah seed {seed} converged", False, f"residual {exc.residual:.3g}"))
            continue
        rel = abs(r.single_head_bias - r.expected_single_head_bias) / r.expected_single_head_bias
        rows.append([seed, r.single_head_bias, r.expected_single_head_bias, r.multi_head_relative_error])
        checks.append(Check(f"ah seed {seed} single-head bias", rel <= 0.10,
                            f"{r.single_head_bias:.5f} vs {r.expected_single_head_bias:.5f}"))
        checks.append(Check(f"ah seed {seed} multi-head recovery", r.multi_head_relative_error <= 1e-2,
                            f"relative error {r.multi_head_relative_error:.2e}"))
    elapsed = time.perf_counter() - start
    checks.append(Check("ah runtime", elapsed <= 60, f"{elapsed:.1f}s"))
    if sensitivity:
        for m in (5, 20, 100):
            try:
                r = theory.run_ah_multi_head(theory.AHConstructionConfig(head_steps=m))
                print(f"info  head steps {m}: relative error {r.multi_head_relative_error:.2e}")
            except NotConverged as exc:
                print(f"info  head steps {m}: not converged, residual {exc.residual:.3g}")
    if out is not None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "single_head_bias", "expected_bias", "multi_head_rel_error"])
        w.writerows(rows)
        _write(out / "theorem_ah.csv", buf.getvalue())
    return checks


def theorem_sa_checks(trials: int = 200, out: Path | None = None, seed: int = 0) -> list[Check]:
    checks = []
    start = time.perf_counter()
    exact = theory.sa_closed_forms(theory.SAConstructionConfig(gamma=0.0, alpha=9.0, seed=seed))
    p = theory.sample_sa_problem(theory.SAConstructionConfig(gamma=0.0, seed=seed))
    u_err = float(np.linalg.norm(exact.u - p.H @ (p.w - p.w_hat)))
    worst = max(exact.err_w1, exact.err_wV, u_err)
    checks.append(Check("sa closed forms exact at gamma=0", worst <= 1e-10, f"max error {worst:.2e}"))

    cfg = theory.SAConstructionConfig(N=4096, d=16, s=4, gamma=1.0, alpha=9.0, seed=seed)
    errs = [
        theory.sa_closed_forms(cfg, theory.sample_sa_problem(cfg, seeded_rng(ts)))
        for ts in child_seeds(seed, trials)
    ]
    med_w1 = float(np.median([e.err_w1 for e in errs]))
    scale = cfg.gamma * np.sqrt(cfg.d / cfg.N)
    factor = max(med_w1 / scale, scale / med_w1)
    checks.append(Check("sa median |w1-w| within 3x of gamma*sqrt(d/N)", factor <= 3,
                        f"{med_w1:.4f} vs {scale:.4f} ({factor:.2f}x)"))
    med_ratio = float(np.median([e.ratio for e in errs]))
    target = (cfg.s / cfg.d) ** 0.25
    checks.append(Check("sa median error ratio below 1 and within 2x of (s/d)^(1/4)",
                        med_ratio < 1 and target / 2 <= med_ratio <= 2 * target,
                        f"{med_ratio:.3f} vs {target:.3f}"))

    scaling = theory.sa_scaling_experiment(trials=trials, seed=seed)
    checks.append(Check("sa log-log slope in [0.15, 0.35]", 0.15 <= scaling.slope <= 0.35,
                        f"slope {scaling.slope:.3f}"))
    elapsed = time.perf_counter() - start
    checks.append(Check("sa runtime", elapsed <= 300, f"{elapsed:.1f}s"))
    if out is not None:
        buf = io.StringIO()
        scaling.write_csv(buf)
        _write(out / "theorem_sa.csv", buf.getvalue())
    return checks


# ---------------------------------------------------------------------------
# das-verify


MUTATIONS = {
    "none": {},
    "skip-lease": {"skip_lease_extension": True},
    "gc-ignores-serving": {"gc_ignores_serving": True},
}


def das_verify_checks(count: int = 1000, seed: int = 0, mutation: str = "none",
                      exhaustive_tasks: int = 2, exhaustive_versions: int = 3,
                      random_tasks: int = 4, random_versions: int = 5,
                      out: Path | None = None) -> list[Check]:
    if count < 1:
        raise ConfigError("schedule count must be >= 1")
    flags = MUTATIONS[mutation]
    checks = []
    start = time.perf_counter()
    exh = das.explore_exhaustive(das.DasConfig(n_tasks=exhaustive_tasks, **flags), exhaustive_versions)
    for name, ok in exh.invariants.items():
        checks.append(Check(f"das exhaustive {exhaustive_tasks}x{exhaustive_versions} {name}", ok,
                            f"{exh.states} states"))
    rnd = das.verify_random(das.DasConfig(n_tasks=random_tasks, **flags), random_versions, count, seed)
    for name, ok in rnd.invariants.items():
        checks.append(Check(f"das random {random_tasks}x{random_versions} {name}", ok,
                            f"{rnd.schedules} schedules"))
    elapsed = time.perf_counter() - start
    print(f"info  das-verify took {elapsed:.1f}s")
    bad = rnd.violating_trace or exh.violating_trace
    if bad and out is not None:
        buf = io.StringIO()
        das.write_trace(bad, buf)
        _write(out / "das_violation_trace.csv", buf.getvalue())
        print(f"info  violating trace written to {out / 'das_violation_trace.csv'}")
    return checks


# ---------------------------------------------------------------------------
# experiment checks


def ordering_checks(rows) -> list[Check]:
    rep = pipeline.ordering_report(rows)
    detail = " ".join(f"{m}={v:.5f}" for m, v in rep.means.items())
    return [
        Check("auc ordering AH+SA >= AH >= VanillaKD >= NoDistill", rep.ordered, detail),
        Check("AH+SA - NoDistill > 2 sigma", rep.significant,
              f"{rep.diff_mean * 1e3:+.3f}e-3 +/- {rep.diff_se * 1e3:.3f}e-3"),
    ]


def staleness_checks(summary) -> list[Check]:
    curves = pipeline.staleness_curves(summary)
    ah = curves[DistillMode.AH.value]
    sa = curves[DistillMode.AH_PLUS_SA.value]
    fmt = lambda c: ",".join(f"{v:.4f}" for v in c)  # noqa: E731
    mono = all(b >= a for a, b in zip(ah, ah[1:]))
    mono_sa = all(b >= a for a, b in zip(sa, sa[1:]))
    lower = [s <= a for s, a in zip(sa, ah)]
    return [
        Check("staleness NE nondecreasing in delay (AH)", mono, fmt(ah)),
        Check("staleness NE nondecreasing in delay (AH+SA)", mono_sa, fmt(sa)),
        Check("adapter lowers NE at every delay", all(lower),
              " ".join(f"d{d}:{'y' if ok else 'n'}" for d, ok in enumerate(lower))),
        Check("adapter does not flatten the trend", sa[-1] > sa[0], f"{sa[0]:.4f} -> {sa[-1]:.4f}"),
    ]


DEFAULT_SWEEP = ((0, 1.5, 2), (1, 1.5, 1), (1, 1.5, 4), (1, 1.5, 8), (1, 1.5, 2), (100, 1.5, 2))


def sweep_checks(table) -> list[Check]:
    gain = {(r[0], r[1], r[2]): float(r[3]) for r in table}
    checks = []
    if (0.0, 1.5, 2.0) in gain:
        checks.append(Check("w=0 gives no gain", abs(gain[(0.0, 1.5, 2.0)]) < 1e-9,
                            f"{gain[(0.0, 1.5, 2.0)]:+.4f}%"))
    b = [gain.get((1.0, 1.5, x)) for x in (1.0, 4.0, 8.0)]
    if None not in b:
        checks.append(Check("grad-scale gain concave", b[2] - b[1] <= b[1] - b[0],
                            f"gain(1)={b[0]:+.3f} gain(4)={b[1]:+.3f} gain(8)={b[2]:+.3f}"))
    if (100.0, 1.5, 2.0) in gain and (1.0, 1.5, 2.0) in gain:
        checks.append(Check("w=100 underperforms w=1", gain[(100.0, 1.5, 2.0)] < gain[(1.0, 1.5, 2.0)],
                            f"{gain[(100.0, 1.5, 2.0)]:+.3f} vs {gain[(1.0, 1.5, 2.0)]:+.3f}"))
    return checks


def parse_grid(text: str):
    try:
        cells = [tuple(float(v) for v in c.split(",")) for c in text.split(";") if c.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad grid {text!r}: {exc}") from exc
    if not cells or any(len(c) != 3 for c in cells):
        raise ConfigError("grid cells must be 'w,alpha,beta' separated by ';'")
    return cells


# ---------------------------------------------------------------------------
# argparse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="exfm", description="Teacher-student distillation experiments")
    p.add_argument("--config", help="experiment config file")
    p.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    p.add_argument("--out", help="output directory")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", help="full pipeline: FM, DAS, VMs in every mode")
    st = sub.add_parser("staleness", help="VM NE against teacher snapshot delay")
    st.add_argument("--max-delay", type=int, default=5)
    sw = sub.add_parser("sweep", help="NE gain over a loss-weight/label-scale/grad-scale grid")
    sw.add_argument("--grid", help="cells 'w,alpha,beta;...'")
    th = sub.add_parser("theorem", help="linear-model harnesses")
    th.add_argument("which", choices=["ah", "sa"])
    th.add_argument("--trials", type=int, default=200)
    th.add_argument("--sensitivity", action="store_true", help="also report head-step sensitivity")
    dv = sub.add_parser("das-verify", help="protocol invariants over many schedules")
    dv.add_argument("--count", type=int, default=1000)
    dv.add_argument("--mutation", choices=sorted(MUTATIONS), default="none")
    dv.add_argument("--tasks", type=int, default=2, help="tasks in the exhaustive search")
    dv.add_argument("--versions", type=int, default=3, help="versions in the exhaustive search")
    sub.add_parser("gen-stream", help="write the synthetic traffic as CSV")
    return p


def _config(args) -> pipeline.ExperimentConfig:
    cfg = pipeline.load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        out = Path(cfg.out)
        seed = cfg.seeds[0]
        if args.command == "run":
            rows, out_dir = pipeline.cmd_run(cfg, out)
            print(f"info  wrote {out_dir / 'metrics.csv'}")
            for c in ordering_checks(rows):
                print(f"info  {c.line()}")
            return 0
        if args.command == "staleness":
            if args.config is None:
                cfg = pipeline.staleness_default(args.max_delay, cfg)
            _, summary = pipeline.cmd_staleness(cfg, args.max_delay, out=out)
            return _report(staleness_checks(summary))
        if args.command == "sweep":
            grid = parse_grid(args.grid) if args.grid else DEFAULT_SWEEP
            table = pipeline.cmd_sweep(cfg, grid, out=out)
            return _report(sweep_checks(table))
        if args.command == "theorem":
            if args.which == "ah":
                return _report(theorem_ah_checks(out=out, sensitivity=args.sensitivity))
            return _report(theorem_sa_checks(args.trials, out=out, seed=seed))
        if args.command == "das-verify":
            return _report(das_verify_checks(args.count, seed, args.mutation, args.tasks, args.versions,
                                             out=out))
        if args.command == "gen-stream":
            for s_i, s in enumerate(generate_stream(replace(cfg.stream, seed=seed))):
                buf = io.StringIO()
                dump_stream(s, buf)
                _write(out / f"stream_traffic{s_i}.csv", buf.getvalue())
            print(f"info  wrote {cfg.stream.n_traffics} streams to {out}")
            return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ExfmError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
