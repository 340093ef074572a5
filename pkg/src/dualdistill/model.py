"""BERT-style encoder with dual-vocabulary MLM heads and size accounting."""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from collections import Counter
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, WorkbenchError
from .tensor import Tensor
from .vocab import Source


# encoder invocations per model role; read by tests and run instrumentation
forward_counts: Counter[str] = Counter()


class DimClass(str, enum.Enum):
    HIDDEN = "HIDDEN"
    INTERMEDIATE = "INTERMEDIATE"
    VOCAB_S = "VOCAB_S"
    VOCAB_T = "VOCAB_T"
    POSITION = "POSITION"
    TYPE = "TYPE"
    SCALAR = "SCALAR"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden_dim: int
    intermediate_dim: int
    num_layers: int
    num_heads: int
    max_positions: int = 128
    extra_vocab_size: int = 0
    type_vocab: int = 2
    tie_mlm_decoder: bool = True
    role: str = "student"
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        dims = (self.vocab_size, self.hidden_dim, self.intermediate_dim, self.num_heads,
                self.max_positions, self.type_vocab)
        if any(int(v) < 1 for v in dims) or self.num_layers < 0 or self.extra_vocab_size < 0:
            raise ConfigError("bad-config", f"non-positive dimension in {self}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError("bad-config", "hidden_dim must be divisible by num_heads")
        if self.role not in ("teacher", "student"):
            raise ConfigError("bad-config", f"unknown role {self.role!r}")
        if self.role == "student" and self.extra_vocab_size:
            raise ConfigError("bad-config", "a student model has no extra vocabulary table")

    @property
    def primary_source(self) -> Source:
        return Source.TEACHER if self.role == "teacher" else Source.STUDENT

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError("bad-config", f"unknown model keys {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError("bad-config", str(exc)) from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> ModelConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


def student_config(vocab_size: int, hidden_dim: int, num_layers: int = 12,
                   max_positions: int = 128) -> ModelConfig:
    """Student profile: intermediate = 4d, fixed head size 16."""
    return ModelConfig(
        vocab_size=vocab_size,
        hidden_dim=hidden_dim,
        intermediate_dim=4 * hidden_dim,
        num_layers=num_layers,
        num_heads=max(1, hidden_dim // 16),
        max_positions=max_positions,
    )


def bert_base_config(extra_vocab_size: int = 0) -> ModelConfig:
    return ModelConfig(
        vocab_size=30522,
        hidden_dim=768,
        intermediate_dim=3072,
        num_layers=12,
        num_heads=12,
        max_positions=512,
        extra_vocab_size=extra_vocab_size,
        role="teacher",
    )


class ParamRegistry:
    """Ordered name -> Tensor map with a dimension class for every axis."""

    def __init__(self, config: ModelConfig | None = None):
        self.config = config
        self.entries: dict[str, Tensor] = {}
        self.dim_classes: dict[str, tuple[DimClass, ...]] = {}

    def add(self, name: str, t: Tensor, classes: tuple[DimClass, ...]) -> Tensor:
        if name in self.entries:
            raise WorkbenchError("registry-mismatch", f"duplicate parameter {name}")
        if len(classes) != t.ndim:
            raise WorkbenchError("registry-mismatch", f"{name}: {len(classes)} classes for rank {t.ndim}")
        self.entries[name] = t
        self.dim_classes[name] = tuple(DimClass(c) for c in classes)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def num_elements(self) -> int:
        return sum(t.data.size for t in self.entries.values())

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.grad = None

    def astype(self, dtype) -> ParamRegistry:
        out = ParamRegistry(self.config)
        for name, t in self.entries.items():
            out.add(name, Tensor(t.data.astype(dtype), requires_grad=t.requires_grad),
                    self.dim_classes[name])
        return out

    def copy(self) -> ParamRegistry:
        return self.astype(np.float32)

    def structure(self) -> list[tuple[str, tuple[DimClass, ...]]]:
        return [(n, self.dim_classes[n]) for n in self.entries]


# --------------------------------------------------------------------------
# parameter layout


def param_layout(config: ModelConfig) -> list[tuple[str, tuple[int, ...], tuple[DimClass, ...]]]:
    """Names, shapes and axis classes of every trainable tensor, in order."""
    H, I = DimClass.HIDDEN, DimClass.INTERMEDIATE
    primary = DimClass.VOCAB_T if config.role == "teacher" else DimClass.VOCAB_S
    d, i = config.hidden_dim, config.intermediate_dim
    V, E = config.vocab_size, config.extra_vocab_size
    layout: list[tuple[str, tuple[int, ...], tuple[DimClass, ...]]] = [
        ("embeddings.word", (V, d), (primary, H)),
    ]
    if E:
        layout.append(("embeddings.word_extra", (E, d), (DimClass.VOCAB_S, H)))
    layout += [
        ("embeddings.position", (config.max_positions, d), (DimClass.POSITION, H)),
        ("embeddings.type", (config.type_vocab, d), (DimClass.TYPE, H)),
        ("embeddings.ln.gain", (d,), (H,)),
        ("embeddings.ln.bias", (d,), (H,)),
    ]
    for layer in range(config.num_layers):
        p = f"layer.{layer}."
        for proj in ("query", "key", "value", "output"):
            layout.append((p + f"attn.{proj}.weight", (d, d), (H, H)))
            layout.append((p + f"attn.{proj}.bias", (d,), (H,)))
        layout += [
            (p + "attn.ln.gain", (d,), (H,)),
            (p + "attn.ln.bias", (d,), (H,)),
            (p + "ffn.in.weight", (d, i), (H, I)),
            (p + "ffn.in.bias", (i,), (I,)),
            (p + "ffn.out.weight", (i, d), (I, H)),
            (p + "ffn.out.bias", (d,), (H,)),
            (p + "ffn.ln.gain", (d,), (H,)),
            (p + "ffn.ln.bias", (d,), (H,)),
        ]
    layout += [
        ("pooler.weight", (d, d), (H, H)),
        ("pooler.bias", (d,), (H,)),
        ("mlm.transform.weight", (d, d), (H, H)),
        ("mlm.transform.bias", (d,), (H,)),
        ("mlm.ln.gain", (d,), (H,)),
        ("mlm.ln.bias", (d,), (H,)),
    ]
    if not config.tie_mlm_decoder:
        layout.append(("mlm.decoder", (d, V), (H, primary)))
        if E:
            layout.append(("mlm.decoder_extra", (d, E), (H, DimClass.VOCAB_S)))
    layout.append(("mlm.decoder_bias", (V,), (primary,)))
    if E:
        layout.append(("mlm.decoder_bias_extra", (E,), (DimClass.VOCAB_S,)))
    layout += [
        ("nsp.weight", (d, 2), (H, DimClass.SCALAR)),
        ("nsp.bias", (2,), (DimClass.SCALAR,)),
    ]
    return layout


def xavier_uniform(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_model(config: ModelConfig, rng: np.random.Generator) -> ParamRegistry:
    """Xavier-uniform matrices, zero biases, unit layer-norm gains."""
    reg = ParamRegistry(config)
    for name, shape, classes in param_layout(config):
        if len(shape) == 2:
            data = xavier_uniform(shape, rng)
        elif name.endswith(".gain"):
            data = np.ones(shape, dtype=np.float32)
        else:
            data = np.zeros(shape, dtype=np.float32)
        reg.add(name, Tensor(data, requires_grad=True), classes)
    return reg


def count_params(config: ModelConfig) -> int:
    """Closed-form parameter count (tied decoder contributes only biases)."""
    d, i, L = config.hidden_dim, config.intermediate_dim, config.num_layers
    V, E = config.vocab_size, config.extra_vocab_size
    embeddings = V * d + E * d + config.max_positions * d + config.type_vocab * d + 2 * d
    per_layer = 4 * (d * d + d) + 2 * d + (d * i + i + i * d + d) + 2 * d
    pooler = d * d + d
    mlm = d * d + d + 2 * d + V + E
    if not config.tie_mlm_decoder:
        mlm += d * (V + E)
    nsp = 2 * d + 2
    return embeddings + L * per_layer + pooler + mlm + nsp


def flops_per_token(config: ModelConfig, seq_len: int) -> int:
    """Forward multiply-accumulates per token over the transformer stack.

    Per layer: ``4 d^2`` (Q, K, V, output projections) + ``2 seq_len d``
    (attention scores and mixing) + ``2 d i`` (feed-forward). Embedding
    lookups and the task heads are not counted.
    """
    if seq_len < 1:
        raise WorkbenchError("bad-config", "seq_len must be >= 1")
    d, i = config.hidden_dim, config.intermediate_dim
    return config.num_layers * (4 * d * d + 2 * seq_len * d + 2 * d * i)


FLOPS_FORMULA = "L * (4*d^2 + 2*seq_len*d + 2*d*i) MACs per token; embeddings and heads excluded"


# --------------------------------------------------------------------------
# batches and forward passes


@dataclass
class Batch:
    """Padded model input.

    ``mask_rows``/``mask_cols`` locate masked positions; ``label_sources`` and
    ``label_ids`` give, per masked position, which vocabulary the target
    belongs to and its id there. ``mask_words`` holds the index of the word
    each masked position belongs to, which lines up the views of one example.
    """

    token_ids: np.ndarray
    source_tags: np.ndarray
    attention_mask: np.ndarray
    type_ids: np.ndarray
    mask_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    mask_cols: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    label_sources: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    label_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    mask_words: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    @property
    def shape(self) -> tuple[int, int]:
        return self.token_ids.shape

    @property
    def num_masked(self) -> int:
        return int(self.mask_rows.size)


def _table_index(config: ModelConfig, tags: np.ndarray) -> np.ndarray:
    """Map source tags to embedding-table index (0 primary, 1 extra)."""
    tags = np.asarray(tags)
    if config.role == "student":
        if (tags == Source.TEACHER).any():
            raise WorkbenchError("wrong-consumer", "teacher-vocabulary input fed to a student model")
        return np.zeros_like(tags, dtype=np.int64)
    if (tags == Source.STUDENT).any() and not config.extra_vocab_size:
        raise WorkbenchError("wrong-consumer", "teacher model has no student-vocabulary table")
    return (tags == Source.STUDENT).astype(np.int64)


def _word_tables(params: ParamRegistry) -> list[Tensor]:
    tables = [params["embeddings.word"]]
    if "embeddings.word_extra" in params:
        tables.append(params["embeddings.word_extra"])
    return tables


def embed(params: ParamRegistry, batch: Batch) -> Tensor:
    cfg = params.config
    B, S = batch.shape
    if S > cfg.max_positions:
        raise WorkbenchError("bad-token-id", f"sequence length {S} > max_positions")
    which = _table_index(cfg, batch.source_tags)
    word = T.embedding(_word_tables(params), batch.token_ids, which)
    pos_ids = np.broadcast_to(np.arange(S), (B, S))
    pos = T.embedding([params["embeddings.position"]], pos_ids)
    typ = T.embedding([params["embeddings.type"]], batch.type_ids)
    x = T.add(T.add(word, pos), typ)
    return T.layer_norm(x, params["embeddings.ln.gain"], params["embeddings.ln.bias"],
                        cfg.layer_norm_eps)


def _layer(params: ParamRegistry, x2: Tensor, B: int, S: int, key_mask: np.ndarray,
           layer: int) -> Tensor:
    cfg = params.config
    d, H = cfg.hidden_dim, cfg.num_heads
    dh = d // H
    p = f"layer.{layer}."

    def heads(name: str, axes: tuple[int, ...]) -> Tensor:
        h = T.linear(x2, params[p + f"attn.{name}.weight"], params[p + f"attn.{name}.bias"])
        return T.transpose(T.reshape(h, (B, S, H, dh)), axes)

    q = heads("query", (0, 2, 1, 3))  # B H S dh
    kt = heads("key", (0, 2, 3, 1))  # B H dh S
    v = heads("value", (0, 2, 1, 3))
    scores = T.scale(T.matmul(q, kt), 1.0 / math.sqrt(dh))
    probs = T.softmax_rows(scores, key_mask)
    ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (B * S, d))
    attn = T.linear(ctx, params[p + "attn.output.weight"], params[p + "attn.output.bias"])
    x2 = T.layer_norm(T.add(x2, attn), params[p + "attn.ln.gain"], params[p + "attn.ln.bias"],
                      cfg.layer_norm_eps)
    h = T.gelu(T.linear(x2, params[p + "ffn.in.weight"], params[p + "ffn.in.bias"]))
    out = T.linear(h, params[p + "ffn.out.weight"], params[p + "ffn.out.bias"])
    return T.layer_norm(T.add(x2, out), params[p + "ffn.ln.gain"], params[p + "ffn.ln.bias"],
                        cfg.layer_norm_eps)


def encode(params: ParamRegistry, batch: Batch) -> Tensor:
    """Hidden states, shape ``[batch, seq, d]``."""
    cfg = params.config
    forward_counts[cfg.role] += 1
    B, S = batch.shape
    x = embed(params, batch)
    key_mask = (np.asarray(batch.attention_mask) != 0)[:, None, None, :]
    x2 = T.reshape(x, (B * S, cfg.hidden_dim))
    for layer in range(cfg.num_layers):
        x2 = _layer(params, x2, B, S, key_mask, layer)
    return T.reshape(x2, (B, S, cfg.hidden_dim))


@dataclass
class HeadOutput:
    logits: Tensor
    labels: np.ndarray
    rows: np.ndarray  # index into the batch's masked positions


@dataclass
class RoutedLogits:
    """Per-vocabulary MLM logits for the masked positions of one batch."""

    heads: dict[Source, HeadOutput]
    num_positions: int

    def __getitem__(self, source: Source) -> HeadOutput:
        return self.heads[source]


def _head_params(params: ParamRegistry, source: Source) -> tuple[Tensor, Tensor]:
    cfg = params.config
    if source == cfg.primary_source:
        suffix = ""
    elif cfg.role == "teacher" and source == Source.STUDENT and cfg.extra_vocab_size:
        suffix = "_extra"
    else:
        raise WorkbenchError("wrong-consumer", f"no {source.name} head in a {cfg.role} model")
    if cfg.tie_mlm_decoder:
        weight = T.transpose(params["embeddings.word" + suffix])
    else:
        weight = params["mlm.decoder" + suffix]
    return weight, params["mlm.decoder_bias" + suffix]


def mlm_transform(params: ParamRegistry, hidden: Tensor, batch: Batch) -> Tensor:
    cfg = params.config
    B, S = batch.shape
    flat = T.reshape(hidden, (B * S, cfg.hidden_dim))
    picked = T.take_rows(flat, batch.mask_rows * S + batch.mask_cols)
    h = T.gelu(T.linear(picked, params["mlm.transform.weight"], params["mlm.transform.bias"]))
    return T.layer_norm(h, params["mlm.ln.gain"], params["mlm.ln.bias"], cfg.layer_norm_eps)


def forward_mlm(params: ParamRegistry, batch: Batch) -> RoutedLogits:
    """Logits for every masked position, routed by the masked word's vocabulary."""
    cfg = params.config
    sources = np.asarray(batch.label_sources)
    present = [Source(s) for s in sorted(set(sources.tolist()))]
    for s in present:
        _head_params(params, s)  # routing errors before any compute
    if batch.num_masked == 0:
        return RoutedLogits({}, 0)
    h = mlm_transform(params, encode(params, batch), batch)
    heads = {}
    for s in present:
        rows = np.nonzero(sources == s)[0]
        hs = h if len(present) == 1 else T.take_rows(h, rows)
        weight, bias = _head_params(params, s)
        logits = T.add(T.matmul(hs, weight), bias)
        heads[s] = HeadOutput(logits, np.asarray(batch.label_ids)[rows], rows)
    return RoutedLogits(heads, batch.num_masked)


def mlm_loss(out: RoutedLogits) -> Tensor:
    """Mean cross-entropy over all masked positions, each on its own head."""
    if out.num_positions == 0:
        return Tensor(np.float32(0.0))
    total = None
    for head in out.heads.values():
        ce = T.cross_entropy(head.logits, head.labels, reduction="sum")
        total = ce if total is None else T.add(total, ce)
    return T.scale(total, 1.0 / out.num_positions)


def masked_predictions(out: RoutedLogits) -> tuple[int, int]:
    """(correct, total) top-1 predictions over all heads."""
    correct = 0
    for head in out.heads.values():
        correct += int((head.logits.data.argmax(axis=-1) == head.labels).sum())
    return correct, out.num_positions
