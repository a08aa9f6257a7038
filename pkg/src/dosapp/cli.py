"""Command-line entry point: run experiments, run ablations, aggregate reports."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .config import (ConfigError, RunConfig, apply_overrides, build_manifest,
                     parse_config_file)
from .harness import VARIANTS, run_experiment
from .reporting import (build_report, load_run, persist_run,
                        write_momentum_grid_csv, write_report_files)


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"bad seed list: {text!r}")
    if not seeds:
        raise ConfigError("seed list is empty")
    return seeds


def _load_config(args) -> tuple[RunConfig, dict]:
    if args.config is not None:
        cfg, ablate = parse_config_file(args.config)
    else:
        cfg, ablate = RunConfig(), {}
    if getattr(args, "variant", None):
        cfg = dataclasses.replace(cfg, variant=args.variant)
    if args.seeds:
        cfg = dataclasses.replace(cfg, seeds=_parse_seeds(args.seeds))
    if args.override:
        cfg = apply_overrides(cfg, args.override)
    if cfg.variant not in VARIANTS:
        known = ", ".join(sorted(VARIANTS))
        raise ConfigError(f"unknown variant {cfg.variant!r} (known: {known})")
    return cfg, ablate


def _run_and_persist(cfg: RunConfig, seed: int, out_root: Path, name: str | None = None) -> Path:
    result = run_experiment(cfg, seed)
    run_dir = out_root / (name or cfg.variant) / f"seed{seed}"
    persist_run(run_dir, build_manifest(cfg, seed), result)
    return run_dir


def cmd_run(args) -> int:
    cfg, _ = _load_config(args)
    out_root = Path(args.out)
    for seed in cfg.seeds:
        run_dir = _run_and_persist(cfg, seed, out_root)
        rec = load_run(run_dir)
        forg = "" if rec.summary["forgetting"] is None else f" forgetting={rec.summary['forgetting']:.4f}"
        print(f"{cfg.variant} seed={seed}: avg_acc={rec.summary['avg_acc']:.4f}{forg} -> {run_dir}")
    return 0


_DEFAULT_ABLATION = ("dosapp", "finetune_no_ttl", "self_label", "teacher_student_only",
                     "plus_sparse", "plus_union_single_momentum")


def _parse_momentum_grid(text: str) -> list[tuple[float, float]]:
    """Pairs like "0.8:0.9 0.9999:0.9999": low supervised momentum : low adaptation momentum."""
    pairs = []
    for token in text.replace(",", " ").split():
        parts = token.split(":")
        if len(parts) != 2:
            raise ConfigError(f"bad momentum grid entry {token!r}; expected gamma:lambda")
        try:
            pairs.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise ConfigError(f"bad momentum grid entry {token!r}")
    return pairs


def cmd_ablate(args) -> int:
    cfg, ablate = _load_config(args)
    out_root = Path(args.out)
    variants = ablate.get("variants")
    variants = tuple(variants.replace(",", " ").split()) if variants else _DEFAULT_ABLATION
    for v in variants:
        if v not in VARIANTS:
            known = ", ".join(sorted(VARIANTS))
            raise ConfigError(f"unknown variant {v!r} in ablation list (known: {known})")
    grid = _parse_momentum_grid(ablate["momentum_grid"]) if "momentum_grid" in ablate else []

    run_dirs = []
    for variant in variants:
        vcfg = dataclasses.replace(cfg, variant=variant)
        for seed in cfg.seeds:
            run_dirs.append(_run_and_persist(vcfg, seed, out_root))
            print(f"done: {variant} seed={seed}")

    grid_dirs = []
    for gamma, lam in grid:
        gcfg = dataclasses.replace(cfg, variant="dosapp", gamma=gamma, lam=lam)
        name = f"momentum-g{gamma}-l{lam}"
        for seed in cfg.seeds:
            grid_dirs.append(_run_and_persist(gcfg, seed, out_root, name=name))
            print(f"done: {name} seed={seed}")

    bundle = build_report([str(d) for d in run_dirs + grid_dirs])
    write_report_files(out_root / "report", bundle)
    if grid_dirs:
        write_momentum_grid_csv(out_root / "report" / "momentum_grid.csv",
                                [load_run(d) for d in grid_dirs])
    for v in bundle.trend_verdicts:
        print(f"trend {v['trend']}: {'PASS' if v['passed'] else 'FAIL'} ({v['detail']})")
    print(f"report -> {out_root / 'report'}")
    return 0


def cmd_report(args) -> int:
    run_dirs = []
    for root in args.run_dirs:
        root = Path(root)
        if (root / "manifest.json").exists():
            run_dirs.append(root)
        else:
            run_dirs.extend(sorted(p.parent for p in root.rglob("manifest.json")))
    bundle = build_report(run_dirs)
    write_report_files(args.out, bundle)
    def _cell(stat):
        return f"{stat[0]:.4f}" if stat[1] is None else f"{stat[0]:.4f}±{stat[1]:.4f}"

    for variant, agg in sorted(bundle.aggregate.items()):
        parts = [f"avg_acc={_cell(agg['avg_acc'])}"]
        if "forgetting" in agg:
            parts.append(f"forgetting={_cell(agg['forgetting'])}")
        print(f"{variant}: " + " ".join(parts))
    for v in bundle.trend_verdicts:
        print(f"trend {v['trend']}: {'PASS' if v['passed'] else 'FAIL'} ({v['detail']})")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dosapp",
                                     description="Continual test-time learning experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train and adapt one variant over one or more seeds")
    p_run.add_argument("--config", help="INI config or a manifest.json from a previous run")
    p_run.add_argument("--variant", help="variant name (overrides config)")
    p_run.add_argument("--seeds", help="seed list, e.g. '0,1,2' (overrides config)")
    p_run.add_argument("--override", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
    p_run.add_argument("--out", default="runs", help="output root directory")
    p_run.set_defaults(fn=cmd_run)

    p_ab = sub.add_parser("ablate", help="run the variant ladder and momentum grid")
    p_ab.add_argument("--config", help="INI config; [ablate] variants / momentum_grid select the sweep")
    p_ab.add_argument("--seeds", help="seed list shared by every arm")
    p_ab.add_argument("--override", action="append", default=[],
                      metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
    p_ab.add_argument("--out", default="ablation", help="output root directory")
    p_ab.set_defaults(fn=cmd_ablate, variant=None)

    p_rep = sub.add_parser("report", help="aggregate finished run directories")
    p_rep.add_argument("run_dirs", nargs="+", help="run directories, or roots to scan")
    p_rep.add_argument("--out", default="report", help="output directory for report files")
    p_rep.set_defaults(fn=cmd_report)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
