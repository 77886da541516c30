"""Command line entry point: ``rpcbf {synth,run,compare}``.

Exit codes: 0 ok, 1 configuration/usage error, 2 synthesis infeasible,
3 runtime invariant violation.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

from .config import ConfigError, DesignBundle, ExperimentConfig, atomic_write
from .design import build_scenario, build_spec, report_text, synthesize
from .plotting import plot_compare, plot_run
from .sim import compare_runs, log_filename, log_from_csv, log_to_csv, run_closed_loop, summarize
from .synthesis import SynthesisError

EXIT_OK, EXIT_CONFIG, EXIT_SYNTH, EXIT_RUNTIME = 0, 1, 2, 3

logger = logging.getLogger("rpcbf")


def resolve_config(name: str) -> Path:
    """A path, or the name of a shipped config (``cwh``, ``lane``, ...)."""
    p = Path(name)
    if p.exists():
        return p
    stem = p.name if p.suffix == ".toml" else f"{p.name}.toml"
    shipped = resources.files("rpcbf") / "configs" / stem
    if shipped.is_file():
        return Path(str(shipped))
    return p


def _workers(n_jobs: int) -> int:
    cap = os.environ.get("PCBF_THREADS")
    limit = os.cpu_count() or 1
    if cap:
        try:
            limit = max(1, int(cap))
        except ValueError:
            raise ConfigError("PCBF_THREADS", f"expected an integer, got {cap!r}") from None
    return max(1, min(limit, n_jobs))


def _bundle_path(cfg: ExperimentConfig, out: Path, profile: str | None) -> Path:
    tag = "" if profile in (None, "full") else f".{profile}"
    return out / f"{cfg.scenario}{tag}.bundle.toml"


def _synth(cfg, profile, samples):
    return synthesize(cfg, cfg.horizon(profile), verify_samples=samples)


def cmd_synth(args) -> int:
    cfg = ExperimentConfig.load(resolve_config(args.config))
    out = Path(args.out)
    bundle = _synth(cfg, args.profile, args.samples)
    path = Path(args.bundle) if args.bundle else _bundle_path(cfg, out, args.profile)
    bundle.save(path)
    text = report_text(cfg, bundle)
    atomic_write(path.with_suffix("").with_suffix(".report.txt"), text)
    sys.stdout.write(text)
    if not bundle.report["sf_contained"] or bundle.report["terminal_violations"]:
        print("design checks failed", file=sys.stderr)
        return EXIT_SYNTH
    print(f"bundle written to {path}")
    return EXIT_OK


def _load_or_synth(cfg, args) -> DesignBundle:
    if args.bundle:
        return DesignBundle.load(args.bundle)
    path = _bundle_path(cfg, Path(args.out), args.profile)
    if path.exists():
        return DesignBundle.load(path)
    bundle = _synth(cfg, args.profile, 2000)
    bundle.save(path)
    atomic_write(path.with_suffix("").with_suffix(".report.txt"), report_text(cfg, bundle))
    return bundle


def _run_one(job):
    cfg_path, bundle_dict, kw, out = job
    cfg = ExperimentConfig.load(cfg_path)
    bundle = DesignBundle.from_dict(bundle_dict)
    log = run_closed_loop(build_scenario(cfg, bundle, **kw))
    name = log_filename(log)
    atomic_write(Path(out) / name, log_to_csv(log))
    atomic_write((Path(out) / name).with_suffix(".svg"), plot_run(log))
    return name, summarize(log), log.failure, log.x_final.tolist()


def cmd_run(args) -> int:
    cfg_path = resolve_config(args.config)
    cfg = ExperimentConfig.load(cfg_path)
    bundle = _load_or_synth(cfg, args)
    build_spec(cfg, bundle)  # hash and model checks before any work
    seeds = args.seeds if args.seeds else [cfg.simulation["seed"] if args.seed is None else args.seed]
    out = Path(args.out)
    jobs = [(str(cfg_path), bundle.to_dict(),
             {"mode": args.mode, "c_alpha": args.c_alpha, "seed": s, "policy": args.policy,
              "steps": args.steps}, str(out)) for s in seeds]
    n = _workers(len(jobs))
    if n == 1:
        results = [_run_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(_run_one, jobs))
    code = EXIT_OK
    for name, s, failure, x_final in results:
        line = (f"{name}: total cost {s['total_cost']:.6g}, steps to X {s['steps_to_X']}, "
                f"median solve {s['median_solve_ms']:.2f} ms, "
                f"final state [{', '.join(f'{v:.4g}' for v in x_final)}]")
        print(line)
        if failure is not None:
            print(f"{name}: invariant violation at step {failure['step']}: {failure['error']}",
                  file=sys.stderr)
            code = EXIT_RUNTIME
    return code


def cmd_compare(args) -> int:
    if len(args.logs) < 2:
        raise ConfigError("logs", "compare needs at least two run logs")
    logs = []
    for p in args.logs:
        try:
            logs.append(log_from_csv(Path(p).read_text()))
        except (OSError, ValueError) as exc:
            raise ConfigError(str(p), f"cannot read run log ({exc})") from None
    try:
        rep = compare_runs(logs)
    except ValueError as exc:
        raise ConfigError("logs", str(exc)) from None
    out = Path(args.out)
    stem = args.name or f"{logs[0].meta['scenario']}_compare_{logs[0].meta['seed']}"
    atomic_write(out / f"{stem}.csv", rep.to_csv())
    atomic_write(out / f"{stem}.svg", plot_compare(logs))
    for r in rep.rows:
        print(f"{r['label']:>22}: cost {r['total_cost']:.6g}  reduction {r['reduction_pct']:6.2f} %"
              f"  median solve {r['median_solve_ms']:.2f} ms  steps to X {r['steps_to_X']}")
    if rep.monotone_in_c_alpha is False:
        print("note: cost is not monotone non-increasing in c_alpha")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rpcbf", description="Robust predictive control barrier "
                                 "functions: synthesis, closed-loop runs and comparisons.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("synth", help="synthesise the tube and terminal design")
    s.add_argument("config")
    s.add_argument("--out", default="out")
    s.add_argument("--bundle", help="bundle path (default: <out>/<scenario>.bundle.toml)")
    s.add_argument("--profile", choices=("full", "ci"), default=None)
    s.add_argument("--samples", type=int, default=100_000, help="verification samples")
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("run", help="closed-loop simulation")
    r.add_argument("config")
    r.add_argument("--mode", choices=("two_step", "multi", "multiobjective", "nominal"))
    r.add_argument("--c-alpha", type=float, dest="c_alpha")
    g = r.add_mutually_exclusive_group()
    g.add_argument("--seed", type=int)
    g.add_argument("--seeds", type=int, nargs="+")
    r.add_argument("--policy", choices=("uniform", "vertices", "zero", "adversarial-heading"))
    r.add_argument("--steps", type=int)
    r.add_argument("--out", default="out")
    r.add_argument("--bundle")
    r.add_argument("--profile", choices=("full", "ci"), default=None)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="compare run logs (first log is the baseline)")
    c.add_argument("logs", nargs="+")
    c.add_argument("--out", default="out")
    c.add_argument("--name")
    c.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    warnings.filterwarnings("ignore", message="Solution may be inaccurate")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        logging.getLogger("rpcbf.controller").setLevel(logging.ERROR)
    try:
        if getattr(args, "c_alpha", None) is not None and not 0 <= args.c_alpha < 1:
            raise ConfigError("--c-alpha", "must lie in [0, 1)")
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SynthesisError as exc:
        print(f"synthesis failed: {exc}", file=sys.stderr)
        return EXIT_SYNTH


if __name__ == "__main__":
    sys.exit(main())
