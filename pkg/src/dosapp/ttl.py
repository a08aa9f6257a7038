"""Unsupervised test-time adaptation with max-logit pseudo-label routing.

For every stream sample the teacher's and student's highest raw logits are
compared; whichever model is more confident supplies the pseudo label (ties
go to the teacher). The student takes one masked optimizer step per batch
and the teacher follows by the test-time blend. Each stream is consumable
exactly once: adaptation is single-pass by construction.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import model as dm
from .autodiff import Graph, Optimizer, OptimizerConfig, backward
from .data import UnlabeledStream
from .ema import EmaConfig, compute_pq, ema_update


@dataclass(frozen=True)
class RoutingDecision:
    pseudo_label: int
    source: str  # "teacher" | "student"
    teacher_max: float
    student_max: float


@dataclass(frozen=True)
class TtlStreamConfig:
    batch_size: int
    class_set: tuple[int, ...]
    single_pass: bool = True
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not self.class_set:
            raise ValueError("class_set must be nonempty")
        if not self.single_pass:
            raise ValueError("test-time adaptation is single-pass; single_pass must stay True")


@dataclass
class TtlReport:
    """Per-batch routing diagnostics, JSON-ready."""

    rows: list[dict] = field(default_factory=list)
    teacher_count: int = 0
    student_count: int = 0

    @property
    def sample_count(self) -> int:
        return self.teacher_count + self.student_count

    def teacher_fraction(self) -> float:
        n = self.sample_count
        return self.teacher_count / n if n else 0.0


def route_pseudo_label(teacher_logits, student_logits, class_ids) -> RoutingDecision:
    """Pick the label from whichever row has the larger maximum raw logit."""
    t = np.asarray(teacher_logits, dtype=np.float64).ravel()
    s = np.asarray(student_logits, dtype=np.float64).ravel()
    ids = tuple(int(c) for c in class_ids)
    if not ids:
        raise ValueError("route_pseudo_label: empty class set")
    if t.shape != (len(ids),) or s.shape != (len(ids),):
        raise ValueError(
            f"route_pseudo_label: class-set mismatch (rows {t.shape} / {s.shape} "
            f"for {len(ids)} classes)"
        )
    t_max = float(t.max())
    s_max = float(s.max())
    if t_max >= s_max:  # tie goes to the teacher
        return RoutingDecision(ids[int(np.argmax(t))], "teacher", t_max, s_max)
    return RoutingDecision(ids[int(np.argmax(s))], "student", t_max, s_max)


def _entropy(labels: np.ndarray) -> float:
    _, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def ttl_session(student, teacher, mask, stream: UnlabeledStream, cfg: TtlStreamConfig,
                ema_cfg: EmaConfig, opt_cfg: OptimizerConfig, table, logit_cfg,
                ema_mask=None, audit=None, session: int = 0) -> TtlReport:
    """Adapt the student on one unlabeled stream; the teacher trails by EMA.

    mask gates the optimizer (None trains everything); ema_mask picks the
    dual-momentum lane (None keeps the single high momentum everywhere).
    teacher=None self-labels from the student and skips the EMA entirely.
    Mutates student/teacher in place and returns the routing report.
    """
    if ema_cfg.phase != "ttl":
        raise ValueError("ttl_session needs an EmaConfig with phase='ttl'")
    report = TtlReport()
    if len(stream) == 0:
        warnings.warn("empty adaptation stream; nothing to adapt")
        return report
    x_all, ids_all = stream.take()
    classes = tuple(sorted(cfg.class_set))
    opt = Optimizer(opt_cfg)
    pq = compute_pq(ema_mask, ema_cfg) if teacher is not None else None

    for b, start in enumerate(range(0, len(ids_all), cfg.batch_size)):
        xb = x_all[start : start + cfg.batch_size]
        idb = ids_all[start : start + cfg.batch_size]
        s_log = dm.logits(student, table, xb, classes, logit_cfg).data
        if teacher is not None:
            t_log = dm.logits(teacher, table, xb, classes, logit_cfg).data
            decisions = [route_pseudo_label(t_log[i], s_log[i], classes) for i in range(len(idb))]
        else:
            decisions = [
                RoutingDecision(classes[int(np.argmax(s_log[i]))], "student",
                                math.nan, float(s_log[i].max()))
                for i in range(len(idb))
            ]
        pseudo = np.array([d.pseudo_label for d in decisions], dtype=np.int64)
        if audit is not None:
            audit.record_gradient_batch("ttl", session, idb)

        student.zero_grads()
        with Graph() as g:
            loss = dm.model_loss(student, table, xb, pseudo, classes, logit_cfg)
        backward(loss, g)
        opt.step(student, mask)
        if teacher is not None:
            ema_update(teacher, student, pq)

        from_teacher = [d for d in decisions if d.source == "teacher"]
        from_student = [d for d in decisions if d.source == "student"]
        report.teacher_count += len(from_teacher)
        report.student_count += len(from_student)
        report.rows.append({
            "type": "ttl_batch",
            "session": session,
            "batch": b,
            "size": len(idb),
            "loss": loss.item(),
            "teacher_fraction": len(from_teacher) / len(idb),
            "student_fraction": len(from_student) / len(idb),
            "pseudo_label_entropy": _entropy(pseudo),
            "mean_max_logit_teacher":
                float(np.mean([d.teacher_max for d in from_teacher])) if from_teacher else None,
            "mean_max_logit_student":
                float(np.mean([d.student_max for d in from_student])) if from_student else None,
        })
    return report
