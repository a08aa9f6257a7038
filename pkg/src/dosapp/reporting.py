"""Persisted run artifacts and cross-run aggregation.

Every number a report emits comes from files a run already wrote (manifest,
summary, metrics rows); reporting never re-runs a model. Writers are pure
functions of their inputs, so re-reporting unchanged runs writes identical
bytes.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, read_manifest
from .harness import RunResult

SUMMARY_FIELDS = ("avg_acc", "forgetting", "fta", "cta", "final_task_acc",
                  "post_sup_avg_acc", "post_sup_forgetting", "post_sup_fta",
                  "post_sup_cta", "post_sup_final_task_acc")


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def write_r_matrix_csv(path, r: np.ndarray) -> None:
    """Accuracy matrix, one row per session; cells above the diagonal stay empty."""
    t = r.shape[0]
    lines = ["session," + ",".join(f"task{j}" for j in range(t))]
    for i in range(t):
        cells = [_fmt(None if np.isnan(r[i, j]) else r[i, j]) for j in range(t)]
        lines.append(f"{i}," + ",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def read_r_matrix_csv(path) -> np.ndarray:
    rows = Path(path).read_text().splitlines()[1:]
    out = []
    for line in rows:
        cells = line.split(",")[1:]
        out.append([math.nan if c == "" else float(c) for c in cells])
    return np.array(out, dtype=np.float64)


def write_summary_csv(path, summary: dict) -> None:
    header = ["variant", "seed"] + list(SUMMARY_FIELDS)
    values = [str(summary["variant"]), str(summary["seed"])] + [_fmt(summary.get(k)) for k in SUMMARY_FIELDS]
    Path(path).write_text(",".join(header) + "\n" + ",".join(values) + "\n")


def write_metrics_jsonl(path, rows: list[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def persist_run(run_dir, manifest: dict, result: RunResult) -> None:
    """Write the full artifact set for one finished run."""
    from . import masking as mk
    from . import model as dm
    from .config import write_manifest

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(run_dir / "manifest.json", manifest)
    write_metrics_jsonl(run_dir / "metrics.jsonl", result.metrics_rows)
    write_r_matrix_csv(run_dir / "R_postttl.csv", result.r_post_ttl)
    write_r_matrix_csv(run_dir / "R_postsup.csv", result.r_post_sup)
    write_summary_csv(run_dir / "summary.csv", result.summary)
    dm.save_checkpoint(run_dir / "student.ckpt", result.student, result.table)
    if result.teacher is not None:
        dm.save_checkpoint(run_dir / "teacher.ckpt", result.teacher, result.table)
    if len(result.history):
        mask_dir = run_dir / "masks"
        mask_dir.mkdir(exist_ok=True)
        for mask, scores in zip(result.history.masks, result.history.scores):
            mk.save_mask(mask_dir / f"task{scores.task_id}.mask", mask)
            mk.save_scores(mask_dir / f"task{scores.task_id}.scores", scores)
        if result.final_ttl_mask is not None:
            mk.save_mask(mask_dir / "ttl_final.mask", result.final_ttl_mask)


@dataclass
class RunRecord:
    """One persisted run, reloaded from its artifact files."""

    run_dir: Path
    variant: str
    seed: int
    momenta: tuple[float, float, float]  # gamma, lambda, delta
    summary: dict
    curve: list[float]  # mean seen-task accuracy after each session (post_ttl)


@dataclass
class ReportBundle:
    records: list[RunRecord]
    aggregate: dict[str, dict[str, tuple[float, float]]] = field(default_factory=dict)
    trend_verdicts: list[dict] = field(default_factory=list)


def load_run(run_dir) -> RunRecord:
    run_dir = Path(run_dir)
    manifest = read_manifest(run_dir / "manifest.json")
    ema = manifest["config"]["ema"]
    with open(run_dir / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != 1:
        raise ConfigError(f"{run_dir}: summary.csv must hold exactly one run")
    raw = rows[0]
    summary = {k: (float(raw[k]) if raw[k] != "" else None) for k in SUMMARY_FIELDS}
    curve = []
    with open(run_dir / "metrics.jsonl") as fh:
        for line in fh:
            row = json.loads(line)
            if row.get("type") == "eval" and row.get("checkpoint") == "post_ttl":
                vals = [v for v in row["row"] if v is not None]
                curve.append(float(np.mean(vals)))
    return RunRecord(
        run_dir=run_dir, variant=raw["variant"], seed=int(raw["seed"]),
        momenta=(float(ema["gamma"]), float(ema["lambda"]), float(ema["delta"])),
        summary=summary, curve=curve,
    )


def _mean_std(values) -> tuple[float, float | None]:
    """Std is omitted (None) for a single value; it would be a misleading 0."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), (float(arr.std()) if arr.size > 1 else None)


def _median(values) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))


def _group(records: list[RunRecord]) -> dict[str, list[RunRecord]]:
    out: dict[str, list[RunRecord]] = {}
    for r in records:
        out.setdefault(r.variant, []).append(r)
    return out


def _display_group(records: list[RunRecord]) -> dict[str, list[RunRecord]]:
    """Like _group, but a variant run at several momentum settings gets one
    labeled row per setting instead of a pooled (and misleading) row."""
    momenta_sets: dict[str, set] = {}
    for r in records:
        momenta_sets.setdefault(r.variant, set()).add(r.momenta)
    out: dict[str, list[RunRecord]] = {}
    for r in records:
        key = r.variant
        if len(momenta_sets[r.variant]) > 1:
            key = f"{r.variant}[g={r.momenta[0]!r},l={r.momenta[1]!r}]"
        out.setdefault(key, []).append(r)
    return out


def _shared_seed_pairs(a: list[RunRecord], b: list[RunRecord]) -> list[tuple[RunRecord, RunRecord]]:
    by_seed_b = {r.seed: r for r in b}
    return [(r, by_seed_b[r.seed]) for r in a if r.seed in by_seed_b]


def _canonical_method_runs(runs: list[RunRecord]) -> list[RunRecord]:
    """Momentum-sensitivity arms reuse the method's variant name, so variant
    comparisons keep only runs with the canonical ordering (supervised low <
    adaptation low < high), one per seed."""
    ordered = [r for r in runs if r.momenta[0] < r.momenta[1] < r.momenta[2]]
    out: dict[int, RunRecord] = {}
    for r in sorted(ordered, key=lambda r: (r.seed, r.momenta)):
        out.setdefault(r.seed, r)
    return list(out.values())


def evaluate_trends(records: list[RunRecord]) -> list[dict]:
    """Directional checks across variants; only evaluable ones are emitted."""
    groups = _group(records)
    dosapp_all = list(groups.get("dosapp", []))
    if "dosapp" in groups:
        groups = dict(groups)
        method_runs = _canonical_method_runs(groups["dosapp"])
        if method_runs:
            groups["dosapp"] = method_runs
    verdicts = []

    if "dosapp" in groups and "finetune_no_ttl" in groups:
        pairs = _shared_seed_pairs(groups["dosapp"], groups["finetune_no_ttl"])
        if pairs:
            f_d = _median([a.summary["forgetting"] for a, _ in pairs])
            f_f = _median([b.summary["forgetting"] for _, b in pairs])
            a_d = _median([a.summary["avg_acc"] for a, _ in pairs])
            a_f = _median([b.summary["avg_acc"] for _, b in pairs])
            verdicts.append({
                "trend": "adaptation_reduces_forgetting_and_lifts_accuracy",
                "passed": bool(f_d < f_f and a_d > a_f),
                "detail": f"forgetting {f_d:.4f} vs {f_f:.4f}; avg_acc {a_d:.4f} vs {a_f:.4f}",
            })

    if "dosapp" in groups and "plus_union_single_momentum" in groups:
        pairs = _shared_seed_pairs(groups["dosapp"], groups["plus_union_single_momentum"])
        if pairs:
            wins = sum(a.summary["avg_acc"] > b.summary["avg_acc"] for a, b in pairs)
            need = math.ceil(0.8 * len(pairs))
            verdicts.append({
                "trend": "dual_momentum_beats_single_momentum_union",
                "passed": bool(wins >= need),
                "detail": f"strict wins {wins}/{len(pairs)} (need {need})",
            })

    if "dosapp" in groups and "teacher_student_only" in groups:
        pairs = _shared_seed_pairs(groups["dosapp"], groups["teacher_student_only"])
        if pairs:
            a_d = _median([a.summary["avg_acc"] for a, _ in pairs])
            a_t = _median([b.summary["avg_acc"] for _, b in pairs])
            verdicts.append({
                "trend": "full_method_at_least_matches_teacher_student_baseline",
                "passed": bool(a_d >= a_t),
                "detail": f"median avg_acc {a_d:.4f} vs {a_t:.4f}",
            })

    by_momenta: dict[tuple[float, float, float], list[RunRecord]] = {}
    for r in dosapp_all:
        by_momenta.setdefault(r.momenta, []).append(r)
    single = [m for m in by_momenta if m[0] == m[2] and m[1] == m[2]]
    dual = [m for m in by_momenta if m not in single]
    if single and dual:
        best_dual = max(dual, key=lambda m: _median([r.summary["avg_acc"] for r in by_momenta[m]]))
        a_single = _median([r.summary["avg_acc"] for r in by_momenta[single[0]]])
        a_dual = _median([r.summary["avg_acc"] for r in by_momenta[best_dual]])
        verdicts.append({
            "trend": "single_momentum_collapse_degrades_accuracy",
            "passed": bool(a_single < a_dual),
            "detail": f"median avg_acc {a_single:.4f} (single) vs {a_dual:.4f} (dual)",
        })
    return verdicts


def build_report(run_dirs) -> ReportBundle:
    records = [load_run(d) for d in run_dirs]
    if not records:
        raise ConfigError("no runs to report on")
    aggregate = {}
    for variant, runs in sorted(_display_group(records).items()):
        aggregate[variant] = {
            k: _mean_std([r.summary[k] for r in runs if r.summary[k] is not None])
            for k in SUMMARY_FIELDS
            if any(r.summary[k] is not None for r in runs)
        }
    return ReportBundle(records=records, aggregate=aggregate,
                        trend_verdicts=evaluate_trends(records))


def write_report_files(out_dir, bundle: ReportBundle) -> None:
    """aggregate.csv, curves.csv (accuracy vs session), forgetting.csv, trends.txt."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    lines = ["variant,n_runs," + ",".join(f"{k}_mean,{k}_std" for k in SUMMARY_FIELDS)]
    for variant, agg in sorted(bundle.aggregate.items()):
        n = len([r for r in bundle.records if r.variant == variant])
        cells = []
        for k in SUMMARY_FIELDS:
            if k in agg:
                cells.extend([_fmt(agg[k][0]), _fmt(agg[k][1])])
            else:
                cells.extend(["", ""])
        lines.append(f"{variant},{n}," + ",".join(cells))
    (out_dir / "aggregate.csv").write_text("\n".join(lines) + "\n")

    lines = ["variant,session,mean_seen_acc_mean,mean_seen_acc_std"]
    for variant, runs in sorted(_display_group(bundle.records).items()):
        depth = min(len(r.curve) for r in runs)
        for s in range(depth):
            m, sd = _mean_std([r.curve[s] for r in runs])
            lines.append(f"{variant},{s},{_fmt(m)},{_fmt(sd)}")
    (out_dir / "curves.csv").write_text("\n".join(lines) + "\n")

    lines = ["variant,forgetting_mean,forgetting_std"]
    for variant, agg in sorted(bundle.aggregate.items()):
        if "forgetting" in agg:
            lines.append(f"{variant},{_fmt(agg['forgetting'][0])},{_fmt(agg['forgetting'][1])}")
    (out_dir / "forgetting.csv").write_text("\n".join(lines) + "\n")

    lines = []
    for v in bundle.trend_verdicts:
        lines.append(f"trend {v['trend']}: {'PASS' if v['passed'] else 'FAIL'} ({v['detail']})")
    (out_dir / "trends.txt").write_text("\n".join(lines) + ("\n" if lines else ""))


def write_momentum_grid_csv(path, records: list[RunRecord]) -> None:
    """Momentum grid summary; the row with every momentum equal is flagged."""
    by_momenta: dict[tuple[float, float, float], list[RunRecord]] = {}
    for r in records:
        by_momenta.setdefault(r.momenta, []).append(r)
    lines = ["gamma,lambda,delta,single_momentum,avg_acc_mean,avg_acc_std,forgetting_mean,forgetting_std"]
    for momenta in sorted(by_momenta):
        runs = by_momenta[momenta]
        g, l, d = momenta
        single = 1 if (g == d and l == d) else 0
        am, asd = _mean_std([r.summary["avg_acc"] for r in runs])
        fvals = [r.summary["forgetting"] for r in runs if r.summary["forgetting"] is not None]
        fm, fsd = _mean_std(fvals) if fvals else (None, None)
        lines.append(f"{_fmt(g)},{_fmt(l)},{_fmt(d)},{single},{_fmt(am)},{_fmt(asd)},{_fmt(fm)},{_fmt(fsd)}")
    Path(path).write_text("\n".join(lines) + "\n")
