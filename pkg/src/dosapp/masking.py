"""Gradient-magnitude scoring and sparse mask selection for candidate tensors.

A score is the absolute value of the MEAN gradient over the scoring data
(mean first, then absolute value, so sign-cancelling gradients score zero).
Selection keeps the top ceil(c * N) entries per candidate tensor, ties
broken toward the lower flat index. Per-task masks are kept with their
scores so later sessions can take the union and re-select within it.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, backward

MASK_HEADER = "dosapp-mask v1"
SCORES_HEADER = "dosapp-scores v1"


@dataclass
class ScoreMap:
    """Per-candidate-tensor nonnegative scores plus scoring provenance."""

    scores: dict[str, np.ndarray]
    task_id: int
    sample_count: int


@dataclass
class Mask:
    """Binary selection per candidate tensor."""

    bits: dict[str, np.ndarray]
    sparsity: float
    origin: str  # "per_task" | "union_reselected"

    def popcount(self, path: str | None = None) -> int:
        if path is not None:
            return int(self.bits[path].sum())
        return int(sum(b.sum() for b in self.bits.values()))


@dataclass
class MaskHistory:
    masks: list[Mask] = field(default_factory=list)
    scores: list[ScoreMap] = field(default_factory=list)

    def append(self, mask: Mask, score_map: ScoreMap) -> None:
        self.masks.append(mask)
        self.scores.append(score_map)

    def __len__(self) -> int:
        return len(self.masks)


def topk_count(c: float, n: int) -> int:
    """ceil(c*n) with a tiny slack so float noise cannot bump the count up."""
    return max(1, min(n, math.ceil(c * n - 1e-12)))


def score_parameters(params, dataset, loss_fn, batch_size: int, sample_cap: int | None = None,
                     task_id: int = 0) -> ScoreMap:
    """One pass over the data accumulating mean gradients of candidate tensors.

    loss_fn(params, x, y) must build a scalar loss on the active graph.
    No parameter or optimizer state changes; only grads are touched.
    """
    n_total = len(dataset.y)
    if n_total == 0:
        raise ValueError("score_parameters: empty dataset")
    if batch_size < 1:
        raise ValueError("score_parameters: batch_size must be positive")
    n_used = n_total if sample_cap is None else min(sample_cap, n_total)
    if n_used < 1:
        raise ValueError("score_parameters: sample cap leaves no data")
    cand = params.candidate_paths()
    accum = {p: np.zeros_like(params.entries[p].data) for p in cand}
    done = 0
    while done < n_used:
        take = min(batch_size, n_used - done)
        xb = dataset.x[done : done + take]
        yb = dataset.y[done : done + take]
        params.zero_grads()
        with Graph() as g:
            loss = loss_fn(params, xb, yb)
        backward(loss, g)
        for p in cand:
            grad = params.entries[p].grad
            if grad is not None:
                accum[p] += grad * take
        done += take
    params.zero_grads()
    scores = {p: np.abs(a / n_used) for p, a in accum.items()}
    return ScoreMap(scores=scores, task_id=task_id, sample_count=n_used)


def select_topk(score_map: ScoreMap, c: float, origin: str = "per_task") -> Mask:
    """Keep the top ceil(c*N) scores per tensor; ties go to the lower index."""
    if not (0.0 < c <= 1.0):
        raise ValueError(f"sparsity must lie in (0, 1], got {c}")
    bits = {}
    for path, arr in score_map.scores.items():
        flat = arr.ravel()
        k = topk_count(c, flat.size)
        order = np.argsort(-flat, kind="stable")  # stable keeps ascending index among ties
        chosen = order[:k]
        b = np.zeros(flat.size, dtype=bool)
        b[chosen] = True
        bits[path] = b.reshape(arr.shape)
    return Mask(bits=bits, sparsity=c, origin=origin)


def union_masks(history: MaskHistory) -> dict[str, np.ndarray]:
    """Elementwise OR of every stored per-task mask; raw, no sparsity target."""
    if len(history) == 0:
        raise ValueError("union_masks: empty history")
    out: dict[str, np.ndarray] = {}
    for mask in history.masks:
        for path, b in mask.bits.items():
            if path in out:
                out[path] = out[path] | b
            else:
                out[path] = b.copy()
    return out


def reselect_topk(union_bits: dict[str, np.ndarray], history: MaskHistory, c: float) -> Mask:
    """Re-select within the union: per-entry score is the max over tasks.

    Keeps ceil(c*N) per tensor out of the union pool; if the pool is smaller
    than that, the whole pool is kept and a warning is emitted.
    """
    if len(history) == 0:
        raise ValueError("reselect_topk: empty history")
    if not (0.0 < c <= 1.0):
        raise ValueError(f"sparsity must lie in (0, 1], got {c}")
    best: dict[str, np.ndarray] = {}
    for sm in history.scores:
        for path, arr in sm.scores.items():
            if path in best:
                best[path] = np.maximum(best[path], arr)
            else:
                best[path] = arr.copy()
    bits = {}
    for path, pool in union_bits.items():
        flat_scores = best[path].ravel()
        flat_pool = pool.ravel()
        k = topk_count(c, flat_pool.size)
        pool_idx = np.flatnonzero(flat_pool)
        if pool_idx.size < k:
            warnings.warn(
                f"union pool for '{path}' has {pool_idx.size} entries, fewer than the "
                f"re-selection target {k}; keeping the whole pool"
            )
            chosen = pool_idx
        else:
            order = np.argsort(-flat_scores[pool_idx], kind="stable")
            chosen = pool_idx[order[:k]]
        b = np.zeros(flat_pool.size, dtype=bool)
        b[chosen] = True
        bits[path] = b.reshape(pool.shape)
    return Mask(bits=bits, sparsity=c, origin="union_reselected")


# ---------------------------------------------------------------- persistence

def save_mask(path, mask: Mask) -> None:
    lines = [f"{MASK_HEADER} sparsity={float.hex(float(mask.sparsity))} origin={mask.origin}"]
    for name, b in mask.bits.items():
        shape = ",".join(str(s) for s in b.shape)
        lines.append(f"{name} shape={shape}")
        lines.append("".join("1" if v else "0" for v in b.ravel()))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_mask(path) -> Mask:
    with open(path) as fh:
        lines = fh.read().splitlines()
    head = lines[0].split()
    if len(head) != 4 or " ".join(head[:2]) != MASK_HEADER:
        raise ValueError(f"unsupported mask header in {path}")
    sparsity = float.fromhex(head[2].split("=", 1)[1])
    origin = head[3].split("=", 1)[1]
    bits = {}
    i = 1
    while i < len(lines):
        name, shape_tok = lines[i].split()
        shape = tuple(int(s) for s in shape_tok[len("shape="):].split(","))
        b = np.array([ch == "1" for ch in lines[i + 1]], dtype=bool).reshape(shape)
        bits[name] = b
        i += 2
    return Mask(bits=bits, sparsity=sparsity, origin=origin)


def save_scores(path, score_map: ScoreMap) -> None:
    lines = [f"{SCORES_HEADER} task={score_map.task_id} samples={score_map.sample_count}"]
    for name, arr in score_map.scores.items():
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"{name} shape={shape}")
        lines.append(" ".join(float.hex(float(v)) for v in arr.ravel()))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_scores(path) -> ScoreMap:
    with open(path) as fh:
        lines = fh.read().splitlines()
    head = lines[0].split()
    if head[0] != SCORES_HEADER.split()[0] or head[1] != SCORES_HEADER.split()[1]:
        raise ValueError(f"unsupported scores header in {path}")
    task_id = int(head[2].split("=", 1)[1])
    samples = int(head[3].split("=", 1)[1])
    scores = {}
    i = 1
    while i < len(lines):
        name, shape_tok = lines[i].split()
        shape = tuple(int(s) for s in shape_tok[len("shape="):].split(","))
        vals = np.array([float.fromhex(t) for t in lines[i + 1].split()], dtype=np.float64)
        scores[name] = vals.reshape(shape)
        i += 2
    return ScoreMap(scores=scores, task_id=task_id, sample_count=samples)
