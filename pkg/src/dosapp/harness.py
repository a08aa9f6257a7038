"""Class-incremental experiment harness.

Runs alternating supervised sessions and test-time adaptation phases over a
synthetic task sequence, records the accuracy matrix at both checkpoints of
every session, and reduces it to the standard continual-learning metrics.
Method variants toggle masking, mask union, the dual-momentum blend, the
teacher, and replay.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as dm
from .autodiff import Graph, Optimizer, OptimizerConfig, backward
from .config import RunConfig
from .data import (LabeledDataset, ReplayBuffer, SessionSchedule, SyntheticTaskSpec, TaskData,
                   build_ttl_stream, generate_tasks)
from .ema import EmaConfig, clone_student_to_teacher, compute_pq, ema_update
from .masking import Mask, MaskHistory, ScoreMap, reselect_topk, score_parameters, select_topk, union_masks
from .model import ClassEmbeddingTable, EncoderConfig, LogitConfig, ParameterSet
from .seeding import substream
from .ttl import TtlStreamConfig, ttl_session


@dataclass(frozen=True)
class VariantKnobs:
    use_mask: bool
    use_union: bool
    dual_momentum: bool
    use_ttl: bool
    use_teacher: bool
    self_label: bool
    default_buffer: int = 0


VARIANTS: dict[str, VariantKnobs] = {
    # the full method: sparse masks, union re-selection, dual momentum, routing
    "dosapp": VariantKnobs(True, True, True, True, True, False),
    # plain sequential fine-tuning, no adaptation phase, no teacher
    "finetune_no_ttl": VariantKnobs(False, False, False, False, False, False),
    # fine-tuning plus adaptation where the student labels its own stream
    "self_label": VariantKnobs(False, False, False, True, False, True),
    # teacher/student routing alone: full updates, single high momentum
    "teacher_student_only": VariantKnobs(False, False, False, True, True, False),
    # adds per-task sparse masks (latest mask gates adaptation too)
    "plus_sparse": VariantKnobs(True, False, False, True, True, False),
    # adds the mask union, still a single high momentum
    "plus_union_single_momentum": VariantKnobs(True, True, False, True, True, False),
    # the full method with a small labeled reservoir replayed 1:1
    "dosapp_er": VariantKnobs(True, True, True, True, True, False, default_buffer=200),
}


def knobs_for(variant: str) -> VariantKnobs:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant '{variant}' (known: {', '.join(sorted(VARIANTS))})")
    return VARIANTS[variant]


class RunAudit:
    """Records which instance ids reach gradient steps, per phase and session."""

    def __init__(self):
        self.events: list[tuple[str, int, tuple[int, ...]]] = []

    def record_gradient_batch(self, phase: str, session: int, ids) -> None:
        self.events.append((phase, int(session), tuple(int(i) for i in ids)))

    def ids_seen(self, phase: str | None = None, session: int | None = None) -> list[int]:
        out: list[int] = []
        for ph, se, ids in self.events:
            if phase is not None and ph != phase:
                continue
            if session is not None and se != session:
                continue
            out.extend(ids)
        return out


@dataclass
class RunResult:
    variant: str
    seed: int
    r_post_sup: np.ndarray
    r_post_ttl: np.ndarray
    metrics_rows: list[dict]
    summary: dict
    history: MaskHistory
    final_ttl_mask: Mask | None
    student: ParameterSet
    teacher: ParameterSet | None
    table: ClassEmbeddingTable


def _derived_configs(cfg: RunConfig) -> tuple[EncoderConfig, LogitConfig, OptimizerConfig]:
    enc = EncoderConfig(
        input_dim=cfg.input_dim, token_count=cfg.token_count, token_dim=cfg.token_dim,
        block_count=cfg.block_count, mlp_hidden_dim=cfg.mlp_hidden_dim,
        embed_dim=cfg.embed_dim, use_attention=cfg.use_attention,
    )
    logit_cfg = LogitConfig(temperature=cfg.temperature)
    opt_cfg = OptimizerConfig(
        learning_rate=cfg.learning_rate, kind=cfg.optimizer_kind, beta1=cfg.beta1,
        beta2=cfg.beta2, epsilon=cfg.epsilon, weight_decay=cfg.weight_decay,
    )
    return enc, logit_cfg, opt_cfg


def run_supervised_session(student: ParameterSet, teacher: ParameterSet | None,
                           table: ClassEmbeddingTable, task: TaskData, seen_classes: list[int],
                           knobs: VariantKnobs, cfg: RunConfig, seed: int,
                           buffer: ReplayBuffer | None = None, audit: RunAudit | None = None,
                           metrics_rows: list[dict] | None = None,
                           ) -> tuple[Mask | None, ScoreMap | None]:
    """One labeled session: (optional) score+select a mask, then train.

    Scoring runs before any update of this session, on this session's data
    only. The training loss competes every seen class, so new embeddings
    must beat old class vectors, not just their within-task rivals.
    Returns the per-task mask and its scores (None without masking).
    """
    _, logit_cfg, opt_cfg = _derived_configs(cfg)
    restrict = sorted(seen_classes)

    mask = None
    score_map = None
    if knobs.use_mask:
        def loss_fn(p, xb, yb):
            return dm.model_loss(p, table, xb, yb, restrict, logit_cfg)
        score_map = score_parameters(student, task.train, loss_fn, cfg.batch_size,
                                     cfg.score_sample_cap, task.task_id)
        mask = select_topk(score_map, cfg.sparsity_c)

    opt = Optimizer(opt_cfg)
    pq = None
    if teacher is not None:
        ema_cfg = EmaConfig(delta=cfg.delta, gamma=cfg.gamma, lam=cfg.lam, phase="supervised")
        pq = compute_pq(mask if knobs.dual_momentum else None, ema_cfg)

    train = task.train
    n = len(train)
    for epoch in range(cfg.epochs):
        order = substream(seed, "shuffle", f"train-task{task.task_id}", f"epoch{epoch}").permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            pick = order[start : start + cfg.batch_size]
            xb, yb, idb = train.x[pick], train.y[pick], train.ids[pick]
            if buffer is not None and len(buffer) > 0:
                bx, by, bids = buffer.sample(len(pick))
                xb = np.concatenate([xb, bx])
                yb = np.concatenate([yb, by])
                idb = np.concatenate([idb, bids])
            if audit is not None:
                audit.record_gradient_batch("supervised", task.task_id, idb)
            student.zero_grads()
            with Graph() as g:
                loss = dm.model_loss(student, table, xb, yb, restrict, logit_cfg)
            backward(loss, g)
            opt.step(student, mask)
            if teacher is not None:
                ema_update(teacher, student, pq)
            losses.append(loss.item())
            if buffer is not None and epoch == 0:
                # reservoir sees each labeled example once, on its first epoch
                for row, y, iid in zip(train.x[pick], train.y[pick], train.ids[pick]):
                    buffer.add(row, y, iid)
        if metrics_rows is not None:
            metrics_rows.append({
                "type": "train_epoch", "session": task.task_id, "epoch": epoch,
                "mean_loss": float(np.mean(losses)),
            })
    return mask, score_map


def _accuracy(params: ParameterSet, table: ClassEmbeddingTable, ds: LabeledDataset,
              restrict: list[int], logit_cfg: LogitConfig, batch_size: int = 256) -> float:
    correct = 0
    for start in range(0, len(ds), batch_size):
        xb = ds.x[start : start + batch_size]
        yb = ds.y[start : start + batch_size]
        pred = dm.predict(params, table, xb, restrict, logit_cfg)
        correct += int((pred == yb).sum())
    return correct / len(ds)


def evaluate(params: ParameterSet, table: ClassEmbeddingTable, schedule: SessionSchedule,
             upto: int, logit_cfg: LogitConfig) -> np.ndarray:
    """Holdout accuracy on every task seen so far, logits over all seen classes."""
    restrict = schedule.seen_classes(upto)
    row = np.full(len(schedule.tasks), np.nan)
    for j in range(upto + 1):
        row[j] = _accuracy(params, table, schedule.tasks[j].eval, restrict, logit_cfg)
    return row


def compute_metrics(r: np.ndarray) -> dict:
    """Average accuracy, forgetting, first-task accuracy, current-task accuracy.

    r[i, j] is accuracy on task j's holdout after session i. Forgetting is
    the mean drop from each task's own-session accuracy to its final-row
    accuracy, sign-flipped; undefined (None) with a single task.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise ValueError(f"accuracy matrix must be square, got {r.shape}")
    t = r.shape[0]
    last = r[t - 1]
    forgetting = None
    if t >= 2:
        forgetting = float(-np.mean([last[i] - r[i, i] for i in range(t - 1)]))
    return {
        "avg_acc": float(np.mean(last)),
        "forgetting": forgetting,
        "fta": float(last[0]),
        "cta": float(np.mean(np.diag(r))),
        "final_task_acc": float(r[t - 1, t - 1]),
    }


def _row_json(row: np.ndarray) -> list:
    return [None if np.isnan(v) else float(v) for v in row]


def run_experiment(cfg: RunConfig, seed: int, audit: RunAudit | None = None) -> RunResult:
    """Full alternating schedule for one variant and one seed; writes nothing."""
    knobs = knobs_for(cfg.variant)
    enc, logit_cfg, opt_cfg = _derived_configs(cfg)
    spec = SyntheticTaskSpec(
        total_classes=cfg.total_classes, tasks=cfg.tasks, classes_per_task=cfg.classes_per_task,
        samples_train=cfg.samples_train, samples_ttl=cfg.samples_ttl, samples_eval=cfg.samples_eval,
        input_dim=cfg.input_dim, cluster_separation=cfg.cluster_separation,
        noise_sigma=cfg.noise_sigma, seed=seed,
    )
    schedule = generate_tasks(spec, epochs=cfg.epochs, imbalance_mode=cfg.ttl_imbalance,
                              dirichlet_alpha=cfg.dirichlet_alpha)
    student = dm.init_model(enc, seed)
    teacher = clone_student_to_teacher(student) if knobs.use_teacher else None
    table = dm.init_class_table(cfg.total_classes, cfg.embed_dim, seed)
    capacity = cfg.buffer_capacity if cfg.buffer_capacity > 0 else knobs.default_buffer
    buffer = ReplayBuffer(capacity, seed) if capacity > 0 else None

    history = MaskHistory()
    final_ttl_mask: Mask | None = None
    t_count = cfg.tasks
    r_sup = np.full((t_count, t_count), np.nan)
    r_ttl = np.full((t_count, t_count), np.nan)
    metrics_rows: list[dict] = []

    for t, task in enumerate(schedule.tasks):
        table.active_classes.update(task.class_ids)
        seen = schedule.seen_classes(t)
        mask, score_map = run_supervised_session(
            student, teacher, table, task, seen, knobs, cfg, seed,
            buffer=buffer, audit=audit, metrics_rows=metrics_rows)
        if mask is not None and score_map is not None:
            history.append(mask, score_map)

        eval_params = teacher if knobs.use_teacher else student
        r_sup[t] = evaluate(eval_params, table, schedule, t, logit_cfg)
        metrics_rows.append({"type": "eval", "session": t, "checkpoint": "post_supervised",
                             "row": _row_json(r_sup[t])})

        if knobs.use_ttl:
            ttl_mask = None
            if knobs.use_mask:
                if knobs.use_union:
                    ttl_mask = reselect_topk(union_masks(history), history, cfg.sparsity_c)
                else:
                    ttl_mask = history.masks[-1]
            final_ttl_mask = ttl_mask
            stream, composition = build_ttl_stream(schedule, t, seed, cfg.ttl_stream_scope)
            metrics_rows.append({"type": "ttl_stream", "session": t,
                                 "composition": {str(c): int(n) for c, n in sorted(composition.items())}})
            stream_cfg = TtlStreamConfig(batch_size=cfg.ttl_batch_size, class_set=tuple(seen),
                                         shuffle_seed=seed)
            ema_ttl = EmaConfig(delta=cfg.delta, gamma=cfg.gamma, lam=cfg.lam, phase="ttl")
            report = ttl_session(
                student, teacher, ttl_mask, stream, stream_cfg, ema_ttl, opt_cfg,
                table, logit_cfg,
                ema_mask=ttl_mask if knobs.dual_momentum else None,
                audit=audit, session=t)
            metrics_rows.extend(report.rows)
            r_ttl[t] = evaluate(eval_params, table, schedule, t, logit_cfg)
        else:
            r_ttl[t] = r_sup[t]
        metrics_rows.append({"type": "eval", "session": t, "checkpoint": "post_ttl",
                             "row": _row_json(r_ttl[t])})

    headline = compute_metrics(r_ttl)
    post_sup = compute_metrics(r_sup)
    summary = dict(headline)
    summary.update({f"post_sup_{k}": v for k, v in post_sup.items()})
    summary.update({"variant": cfg.variant, "seed": int(seed)})
    metrics_rows.append({"type": "summary", **summary})
    return RunResult(
        variant=cfg.variant, seed=int(seed), r_post_sup=r_sup, r_post_ttl=r_ttl,
        metrics_rows=metrics_rows, summary=summary, history=history,
        final_ttl_mask=final_ttl_mask, student=student, teacher=teacher, table=table,
    )
