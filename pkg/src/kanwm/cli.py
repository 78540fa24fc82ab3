"""Command line entry point: ``kanwm {train,ablate,bench,report,verify}``.

Exit codes: 0 success, 1 a check or invariant failed, 2 bad usage or config,
3 training aborted on a non-finite value.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import SUBSYSTEMS, ConfigError, ExperimentConfig, load_config
from .sizing import InfeasibleBudget

OUT_ENV = "KANWM_OUT"
EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3

log = logging.getLogger("kanwm")


def out_root(arg: str | None) -> Path:
    return Path(arg or os.environ.get(OUT_ENV) or "runs")


def _base_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        overrides["env_steps"] = args.steps
    return cfg.replace(**overrides) if overrides else cfg


def _progress(record: dict) -> None:
    log.info("step %d  updates %d  return %s  eval %s", record["env_step"], record["updates"],
             record.get("episode_return"), record.get("eval_return"))


def _train_one(cfg: ExperimentConfig, outdir: Path) -> tuple[Path, list[str]]:
    from .train import check_run, train_loop
    run_dir = train_loop(cfg, outdir, progress=_progress)
    return run_dir, check_run(run_dir, cfg)


def cmd_train(args) -> int:
    from .train import TrainingAborted
    cfg = _base_config(args)
    try:
        run_dir, problems = _train_one(cfg, out_root(args.outdir))
    except TrainingAborted as err:
        log.error("%s", err)
        return EXIT_ABORT
    for p in problems:
        log.error("invariant failed: %s", p)
    print(run_dir)
    return EXIT_CHECK if problems else EXIT_OK


def ablation_configs(base: ExperimentConfig, seeds) -> list[ExperimentConfig]:
    """Baseline plus KAN and FastKAN variants of each subsystem, deduplicated."""
    out, seen = [], set()
    for seed in seeds:
        for sub in SUBSYSTEMS:
            for kind in (None, "kan", "fastkan"):
                cfg = base.replace(seed=seed, perception="cnn", prediction="mlp", behavior="mlp")
                if kind:
                    cfg = cfg.replace(**{sub: kind})
                if cfg.run_id not in seen:
                    seen.add(cfg.run_id)
                    out.append(cfg)
    return out


def cmd_ablate(args) -> int:
    from .report import emit_report
    from .train import TrainingAborted
    base = _base_config(args)
    root = out_root(args.outdir)
    seeds = args.seeds if args.seeds else [base.seed]
    run_dirs, failed = [], False
    for cfg in ablation_configs(base, seeds):
        log.info("running %s", cfg.run_id)
        try:
            run_dir, problems = _train_one(cfg, root)
        except TrainingAborted as err:
            log.error("%s aborted: %s", cfg.run_id, err)
            failed = True
            continue
        failed |= bool(problems)
        run_dirs.append(run_dir)
    if run_dirs:
        paths = emit_report(run_dirs, root / "report")
        print(paths["csv"])
    return EXIT_CHECK if failed else EXIT_OK


def cmd_bench(args) -> int:
    from .bench import run_benchmark
    res = run_benchmark(reps=args.reps, batch=args.batch, repeats=args.repeats, precision=args.precision)
    med = {k: sorted(v)[len(v) // 2] for k, v in res.items()}
    ok = med["fastkan"] >= 1.2 * med["kan"] and med["mlp"] >= med["fastkan"]
    print(json.dumps({"fps": res, "median": med, "ordering_holds": ok}, indent=2))
    return EXIT_OK if ok else EXIT_CHECK


def cmd_report(args) -> int:
    from .report import emit_report
    dirs = [Path(d) for d in args.runs]
    missing = [str(d) for d in dirs if not (d / "summary.json").exists()]
    if missing or not dirs:
        log.error("not completed runs: %s", ", ".join(missing) or "(none given)")
        return EXIT_USAGE
    paths = emit_report(dirs, Path(args.out) if args.out else out_root(None) / "report")
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=2))
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_checks
    res = run_checks(seed=args.seed)
    print(json.dumps(res, indent=2))
    return EXIT_OK if res["passed"] else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kanwm", description="KAN-backbone world-model agent experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", help="YAML experiment config")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int, help="environment steps")
    t.add_argument("--outdir", help=f"output root (default ${OUT_ENV} or ./runs)")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="run the perception/prediction/behavior ablation matrix")
    a.add_argument("--config")
    a.add_argument("--seeds", type=int, nargs="*")
    a.add_argument("--steps", type=int)
    a.add_argument("--outdir")
    a.set_defaults(func=cmd_ablate)

    b = sub.add_parser("bench", help="prediction-head forward+backward throughput")
    b.add_argument("--reps", type=int, default=200)
    b.add_argument("--batch", type=int, default=1024)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--precision", default="float32", choices=["float32", "float64"])
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("report", help="CSV/JSONL/SVG report over finished runs")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    v = sub.add_parser("verify", help="oracle and property spot-checks as JSON")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, InfeasibleBudget, FileNotFoundError) as err:
        log.error("%s", err)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
