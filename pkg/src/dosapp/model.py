"""Toy dual-encoder classifier.

A small transformer-style encoder maps an input vector (viewed as a short
token sequence) to a unit-norm embedding, which is scored against a fixed
table of unit-norm class embeddings by temperature-scaled cosine similarity.
Only the first MLP layer weight of each block is a candidate for sparse
masked updates; everything else stays frozen under masked training.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .seeding import substream

CHECKPOINT_HEADER = "dosapp-checkpoint v1"


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 64
    token_count: int = 4
    token_dim: int = 16
    block_count: int = 2
    mlp_hidden_dim: int = 64
    embed_dim: int = 32
    use_attention: bool = True

    def __post_init__(self):
        for name in ("input_dim", "token_count", "token_dim", "block_count", "mlp_hidden_dim", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"EncoderConfig.{name} must be positive")
        if self.token_count * self.token_dim != self.input_dim:
            raise ValueError(
                f"token_count*token_dim must equal input_dim "
                f"({self.token_count}*{self.token_dim} != {self.input_dim})"
            )


@dataclass(frozen=True)
class LogitConfig:
    temperature: float = 0.07

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")


class ParameterSet:
    """Named float64 parameter tensors plus per-tensor candidate flags.

    Candidate tensors (the per-block first MLP weights) are the only ones a
    sparse mask may select from. Iteration order is construction order and
    is stable, which keeps every downstream loop deterministic.
    """

    def __init__(self, config: EncoderConfig):
        self.config = config
        self.entries: dict[str, Tensor] = {}
        self.candidate_flags: dict[str, bool] = {}

    def add(self, path: str, value: np.ndarray, candidate: bool = False) -> None:
        if path in self.entries:
            raise ValueError(f"duplicate parameter path '{path}'")
        self.entries[path] = Tensor(value)
        self.candidate_flags[path] = candidate

    def candidate_paths(self) -> list[str]:
        return [p for p, f in self.candidate_flags.items() if f]

    def zero_grads(self) -> None:
        for t in self.entries.values():
            t.grad = None

    def total_count(self) -> int:
        return sum(t.size for t in self.entries.values())

    def candidate_count(self) -> int:
        return sum(self.entries[p].size for p in self.candidate_paths())

    def clone(self) -> "ParameterSet":
        out = ParameterSet(self.config)
        for path, t in self.entries.items():
            out.add(path, t.data.copy(), self.candidate_flags[path])
        return out


def init_model(cfg: EncoderConfig, seed: int) -> ParameterSet:
    """Deterministic init: scaled-uniform weights per fan-in, identity norms."""
    rng = substream(seed, "init")
    params = ParameterSet(cfg)
    d, h = cfg.token_dim, cfg.mlp_hidden_dim

    def uniform(shape, fan_in):
        s = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-s, s, size=shape)

    for i in range(cfg.block_count):
        if cfg.use_attention:
            params.add(f"block{i}.ln1.gain", np.ones(d))
            params.add(f"block{i}.ln1.bias", np.zeros(d))
            for name in ("q", "k", "v", "out"):
                params.add(f"block{i}.attn.{name}.weight", uniform((d, d), d))
        params.add(f"block{i}.ln2.gain", np.ones(d))
        params.add(f"block{i}.ln2.bias", np.zeros(d))
        params.add(f"block{i}.mlp.fc1.weight", uniform((d, h), d), candidate=True)
        params.add(f"block{i}.mlp.fc1.bias", np.zeros(h))
        params.add(f"block{i}.mlp.fc2.weight", uniform((h, d), h))
        params.add(f"block{i}.mlp.fc2.bias", np.zeros(d))
    flat = cfg.token_count * d
    params.add("proj.weight", uniform((flat, cfg.embed_dim), flat))
    return params


@dataclass
class ClassEmbeddingTable:
    """Fixed unit-norm class embedding per class id; frozen during training."""

    vectors: np.ndarray  # [total_classes, embed_dim]
    active_classes: set[int] = field(default_factory=set)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError(f"class table must be 2-d, got {self.vectors.shape}")

    @property
    def total_classes(self) -> int:
        return self.vectors.shape[0]


def init_class_table(total_classes: int, embed_dim: int, seed: int) -> ClassEmbeddingTable:
    """Random unit-norm class embeddings, drawn from the data substream."""
    if total_classes < 1:
        raise ValueError("total_classes must be positive")
    rng = substream(seed, "data", "class-table")
    v = rng.standard_normal((total_classes, embed_dim))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return ClassEmbeddingTable(v)


def encode(params: ParameterSet, x) -> Tensor:
    """Embed a batch [batch, input_dim] into unit-norm rows [batch, embed_dim]."""
    cfg = params.config
    x = ad._as_tensor(x)
    if x.data.ndim != 2 or x.data.shape[1] != cfg.input_dim:
        raise ValueError(f"encode: want [batch, {cfg.input_dim}], got {x.data.shape}")
    b = x.data.shape[0]
    e = params.entries
    d = cfg.token_dim
    tokens = ad.reshape(x, (b, cfg.token_count, d))
    for i in range(cfg.block_count):
        if cfg.use_attention:
            hn = ad.layer_norm(tokens, e[f"block{i}.ln1.gain"], e[f"block{i}.ln1.bias"])
            q = ad.matmul(hn, e[f"block{i}.attn.q.weight"])
            k = ad.matmul(hn, e[f"block{i}.attn.k.weight"])
            v = ad.matmul(hn, e[f"block{i}.attn.v.weight"])
            scores = ad.scale(ad.matmul(q, k, transpose_b=True), 1.0 / math.sqrt(d))
            mixed = ad.matmul(ad.softmax(scores), v)
            tokens = ad.add(tokens, ad.matmul(mixed, e[f"block{i}.attn.out.weight"]))
        hn2 = ad.layer_norm(tokens, e[f"block{i}.ln2.gain"], e[f"block{i}.ln2.bias"])
        hidden = ad.gelu(ad.add(ad.matmul(hn2, e[f"block{i}.mlp.fc1.weight"]), e[f"block{i}.mlp.fc1.bias"]))
        out = ad.add(ad.matmul(hidden, e[f"block{i}.mlp.fc2.weight"]), e[f"block{i}.mlp.fc2.bias"])
        tokens = ad.add(tokens, out)
    flat = ad.reshape(tokens, (b, cfg.token_count * d))
    return ad.normalize_rows(ad.matmul(flat, e["proj.weight"]))


def _check_restrict(table: ClassEmbeddingTable, restrict_to) -> list[int]:
    ids = sorted(int(c) for c in restrict_to)
    if not ids:
        raise ValueError("logits: empty class restriction")
    if len(set(ids)) != len(ids):
        raise ValueError("logits: duplicate class ids in restriction")
    if ids[0] < 0 or ids[-1] >= table.total_classes:
        raise ValueError(f"logits: class id out of range [0, {table.total_classes})")
    return ids


def logits(params: ParameterSet, table: ClassEmbeddingTable, x, restrict_to, cfg: LogitConfig) -> Tensor:
    """Cosine(embedding, class vector)/temperature, columns in ascending class id."""
    ids = _check_restrict(table, restrict_to)
    emb = encode(params, x)
    sub = Tensor(table.vectors[ids])
    return ad.scale(ad.cosine_similarity_rows(emb, sub), 1.0 / cfg.temperature)


def model_loss(params: ParameterSet, table: ClassEmbeddingTable, x, labels, restrict_to, cfg: LogitConfig) -> Tensor:
    """Cross-entropy over the restricted class set; labels are raw class ids."""
    ids = _check_restrict(table, restrict_to)
    col = {c: j for j, c in enumerate(ids)}
    labels = np.asarray(labels, dtype=np.int64)
    try:
        mapped = np.array([col[int(y)] for y in labels], dtype=np.int64)
    except KeyError as err:
        raise ValueError(f"model_loss: label {err} outside the restricted class set")
    return ad.cross_entropy_from_logits(logits(params, table, x, ids, cfg), mapped)


def predict(params: ParameterSet, table: ClassEmbeddingTable, x, restrict_to, cfg: LogitConfig) -> np.ndarray:
    """Argmax class ids over the restricted set (no tape is recorded)."""
    ids = _check_restrict(table, restrict_to)
    lg = logits(params, table, x, ids, cfg)
    pick = np.argmax(lg.data, axis=1)
    return np.asarray(ids, dtype=np.int64)[pick]


# ---------------------------------------------------------------- persistence

def _format_floats(arr: np.ndarray) -> str:
    return " ".join(float.hex(float(v)) for v in arr.ravel())


def _parse_floats(text: str, shape: tuple[int, ...]) -> np.ndarray:
    vals = np.array([float.fromhex(tok) for tok in text.split()], dtype=np.float64)
    return vals.reshape(shape)


def save_checkpoint(path, params: ParameterSet, table: ClassEmbeddingTable | None = None,
                    meta: dict | None = None) -> None:
    """Write parameters (and optionally the class table) bit-exactly as text."""
    lines = [CHECKPOINT_HEADER]
    cfg_dict = {f: getattr(params.config, f) for f in params.config.__dataclass_fields__}
    lines.append("config " + json.dumps(cfg_dict, sort_keys=True))
    full_meta = dict(meta or {})
    if table is not None:
        full_meta["active_classes"] = sorted(int(c) for c in table.active_classes)
    lines.append("meta " + json.dumps(full_meta, sort_keys=True))
    for p, t in params.entries.items():
        shape = ",".join(str(s) for s in t.data.shape)
        cand = 1 if params.candidate_flags[p] else 0
        lines.append(f"tensor {p} candidate={cand} shape={shape}")
        lines.append(_format_floats(t.data))
    if table is not None:
        shape = ",".join(str(s) for s in table.vectors.shape)
        lines.append(f"tensor class_table candidate=0 shape={shape}")
        lines.append(_format_floats(table.vectors))
    lines.append("end")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[ParameterSet, ClassEmbeddingTable | None, dict]:
    """Inverse of save_checkpoint; rejects unknown versions."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_HEADER:
        found = lines[0] if lines else "<empty file>"
        raise ValueError(f"unsupported checkpoint header {found!r} in {path} "
                         f"(want {CHECKPOINT_HEADER!r})")
    if not lines[1].startswith("config "):
        raise ValueError("checkpoint missing config line")
    cfg = EncoderConfig(**json.loads(lines[1][len("config "):]))
    meta = json.loads(lines[2][len("meta "):]) if lines[2].startswith("meta ") else {}
    params = ParameterSet(cfg)
    table = None
    i = 3
    while i < len(lines) and lines[i] != "end":
        head = lines[i].split()
        if head[0] != "tensor" or len(head) != 4:
            raise ValueError(f"malformed checkpoint line: {lines[i]!r}")
        name = head[1]
        cand = head[2] == "candidate=1"
        shape = tuple(int(s) for s in head[3][len("shape="):].split(","))
        values = _parse_floats(lines[i + 1], shape)
        if name == "class_table":
            table = ClassEmbeddingTable(values, set(meta.get("active_classes", [])))
        else:
            params.add(name, values, cand)
        i += 2
    return params, table, meta
