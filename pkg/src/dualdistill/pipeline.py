"""Run configuration, training loops, evaluation and size reporting."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, optim
from . import tensor as T
from .data import ingest_corpus
from .distill import (
    DistillConfig,
    Mode,
    ProjectionSet,
    build_dual_batch,
    build_student_batch,
    dual_ce_loss,
    init_projections,
    proj_loss_down,
    proj_loss_up,
    total_loss,
)
from .errors import ConfigError, DivergenceError, WorkbenchError
from .model import (
    FLOPS_FORMULA,
    ModelConfig,
    ParamRegistry,
    bert_base_config,
    count_params,
    encode,
    flops_per_token,
    forward_mlm,
    init_model,
    masked_predictions,
    mlm_loss,
    xavier_uniform,
)
from .optim import OptimConfig, OptimState, linear_warmup_decay
from .tensor import Tensor
from .vocab import Source, Vocabulary

log = logging.getLogger(__name__)

STUDENT_CHECKPOINT = "student.mdst"
STUDENT_CONFIG = "student_config.json"
TEACHER_CHECKPOINT = "teacher.mdst"
TEACHER_CONFIG = "teacher_config.json"
METRICS_FILE = "metrics.jsonl"


@dataclass
class RunConfig:
    teacher: ModelConfig
    student: ModelConfig
    distill: DistillConfig = field(default_factory=DistillConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    teacher_vocab: str = ""
    student_vocab: str = ""
    train_corpus: str = ""
    eval_corpus: str | None = None
    teacher_checkpoint: str | None = None
    pretrain_steps: int = 0
    steps: int = 1
    batch_size: int = 16
    eval_every: int = 100
    checkpoint_dir: str = "run"
    seed: int = 0
    deterministic: bool = True
    max_seq_len: int = 128

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("bad-config", "steps must be >= 1")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("bad-config", "batch_size and eval_every must be >= 1")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["teacher"] = self.teacher.to_dict()
        d["student"] = self.student.to_dict()
        d["distill"] = self.distill.to_dict()
        d["optim"] = self.optim.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: str | Path | None = None) -> RunConfig:
        """Build from a JSON document; relative paths resolve against ``base_dir``."""
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        if set(d) - known:
            raise ConfigError("bad-config", f"unknown run keys {sorted(set(d) - known)}")
        for key in ("teacher", "student"):
            if key not in d:
                raise ConfigError("bad-config", f"missing {key!r} model config")
        if base_dir is not None:
            for key in ("teacher_vocab", "student_vocab", "train_corpus", "eval_corpus",
                        "teacher_checkpoint", "checkpoint_dir"):
                if d.get(key):
                    d[key] = str(Path(base_dir) / d[key])
        vocabs = {"teacher": d.get("teacher_vocab"), "student": d.get("student_vocab")}
        models = {}
        for key in ("teacher", "student"):
            m = dict(d[key])
            m.setdefault("role", key)
            if not m.get("vocab_size") and vocabs[key]:
                m["vocab_size"] = len(_load_vocab(vocabs[key]))
            if key == "teacher" and m.get("extra_vocab_size") is None and vocabs["student"]:
                m["extra_vocab_size"] = len(_load_vocab(vocabs["student"]))
            models[key] = ModelConfig.from_dict(m)
        d.update(models)
        try:
            d["distill"] = DistillConfig.from_dict(d.get("distill", {}))
            d["optim"] = OptimConfig.from_dict(d.get("optim", {}))
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError("bad-config", str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("bad-config", str(exc)) from exc
        return cls.from_dict(doc, base_dir=path.parent)

    def check_paths(self, *keys: str) -> None:
        for key in keys:
            value = getattr(self, key)
            if not value or not Path(value).exists():
                raise ConfigError("bad-config", f"{key} path {value!r} does not exist")


def _load_vocab(path) -> Vocabulary:
    try:
        return Vocabulary.load(path)
    except WorkbenchError as exc:
        raise ConfigError("bad-config", str(exc)) from exc


def full_scale_profile(student_dim: int = 48) -> dict:
    """Full-scale hyperparameters, kept for reference; not runnable on a desk."""
    return {
        "teacher": bert_base_config(extra_vocab_size=4928).to_dict(),
        "student": dataclasses.replace(
            ModelConfig(4928, student_dim, 4 * student_dim, 12, max(1, student_dim // 16)),
            max_positions=512,
        ).to_dict(),
        "distill": DistillConfig(mode=Mode.DUAL_PROJ_UP, p_dt=0.5, epsilon=1.0).to_dict(),
        "optim": OptimConfig(lr=0.00125).to_dict(),
        "steps": 250_000,
        "batch_size": 4096,
        "max_seq_len": 128,
    }


# --------------------------------------------------------------------------
# metrics and bookkeeping


@dataclass
class MetricsRecord:
    """Averages over the steps since the previous record."""

    step: int
    L_final: float
    L_ce_student: float
    L_ce_teacher: float
    L_p: float
    masked_accuracy: float
    wall_clock: float | None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


class _Window:
    def __init__(self):
        self.reset()

    def reset(self):
        self.sums = dict.fromkeys(("L_final", "L_ce_student", "L_ce_teacher", "L_p"), 0.0)
        self.n = 0
        self.correct = 0
        self.total = 0

    def add(self, values: Mapping[str, float], correct: int, total: int):
        for k, v in values.items():
            self.sums[k] += v
        self.n += 1
        self.correct += correct
        self.total += total

    def record(self, step: int, wall_clock: float | None) -> MetricsRecord:
        means = {k: v / max(self.n, 1) for k, v in self.sums.items()}
        acc = self.correct / self.total if self.total else 0.0
        return MetricsRecord(step=step, masked_accuracy=acc, wall_clock=wall_clock, **means)


def _epoch_sampler(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    pos = 0
    while True:
        if pos + batch_size > n:
            tail = order[pos:]
            order = rng.permutation(n)
            take = batch_size - len(tail)
            yield np.concatenate([tail, order[:take]])
            pos = take
        else:
            yield order[pos:pos + batch_size]
            pos += batch_size


def _seeds(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _is_finite(t: Tensor) -> bool:
    return bool(np.all(np.isfinite(t.data)))


def _optimizer_step(params: Mapping[str, Tensor], state: OptimState, lr: float, step_idx: int):
    try:
        optim.step(params, optim.collect_grads(params), state, lr)
    except WorkbenchError as exc:
        if exc.code == "non-finite-grad":
            raise DivergenceError(f"step {step_idx}: {exc}") from exc
        raise


@dataclass
class RunResult:
    student: ParamRegistry
    metrics: list[MetricsRecord]
    checkpoint: Path | None
    teacher_forward_calls: int = 0
    teacher: ParamRegistry | None = None
    projections: ProjectionSet | None = None


# --------------------------------------------------------------------------
# training loops


def _mlm_train(params: ParamRegistry, vocab: Vocabulary, examples: Sequence[Sequence[str]],
               cfg: RunConfig, steps: int, seed: int, out_dir: Path | None,
               ckpt_name: str) -> RunResult:
    """Single-model MLM training on one vocabulary (teacher pretraining, NO_KD-style)."""
    source = params.config.primary_source
    dcfg = dataclasses.replace(cfg.distill, p_dt=0.0 if source == Source.TEACHER else 1.0)
    data_rng, mask_rng = _seeds(seed, 2)
    state = OptimState(cfg.optim)
    sampler = _epoch_sampler(len(examples), cfg.batch_size, data_rng)
    window = _Window()
    metrics: list[MetricsRecord] = []
    start = time.perf_counter()
    path = out_dir / ckpt_name if out_dir else None
    for step_idx in range(1, steps + 1):
        batch_words = [examples[i] for i in next(sampler)]
        if source == Source.TEACHER:
            batch, _ = build_dual_batch(batch_words, vocab, vocab, dcfg, mask_rng,
                                        max_len=cfg.max_seq_len)
        else:
            batch = build_student_batch(batch_words, vocab, dcfg, mask_rng, cfg.max_seq_len)
        params.zero_grad()
        out = forward_mlm(params, batch)
        loss = mlm_loss(out)
        if not _is_finite(loss):
            raise DivergenceError(f"non-finite loss at step {step_idx}")
        if loss.requires_grad:
            loss.backward()
        lr = linear_warmup_decay(step_idx, steps, cfg.optim.lr, cfg.optim.warmup_fraction)
        _optimizer_step(params.entries, state, lr, step_idx)
        correct, total = masked_predictions(out)
        value = loss.item()
        window.add({"L_final": value, "L_ce_student": value, "L_ce_teacher": 0.0, "L_p": 0.0},
                   correct, total)
        if step_idx == 1 or step_idx % cfg.eval_every == 0 or step_idx == steps:
            wall = None if cfg.deterministic else round(time.perf_counter() - start, 3)
            metrics.append(window.record(step_idx, wall))
            window.reset()
    if path is not None:
        checkpoint.save_registry(path, params)
    return RunResult(params, metrics, path)


def pretrain_teacher(cfg: RunConfig, examples: Sequence[Sequence[str]] | None = None,
                     teacher_vocab: Vocabulary | None = None,
                     out_dir: str | Path | None = None) -> RunResult:
    """MLM-only teacher pretraining on teacher-vocabulary segmentation."""
    teacher_vocab = teacher_vocab or _load_vocab(cfg.teacher_vocab)
    if examples is None:
        examples = list(ingest_corpus(cfg.train_corpus))
    if not examples:
        raise WorkbenchError("empty-corpus")
    steps = cfg.pretrain_steps or cfg.steps
    init_rng, _ = _seeds(cfg.seed + 7919, 2)
    params = init_model(cfg.teacher, init_rng)
    out = Path(out_dir) if out_dir is not None else Path(cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.teacher.save(out / TEACHER_CONFIG)
    result = _mlm_train(params, teacher_vocab, examples, cfg, steps, cfg.seed + 7919,
                        out, TEACHER_CHECKPOINT)
    _write_metrics(out / "teacher_metrics.jsonl", result.metrics)
    return result


def _write_metrics(path: Path, metrics: Sequence[MetricsRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in metrics:
            f.write(rec.to_json() + "\n")


def run_distillation(
    cfg: RunConfig,
    teacher: ParamRegistry | None = None,
    examples: Sequence[Sequence[str]] | None = None,
    teacher_vocab: Vocabulary | None = None,
    student_vocab: Vocabulary | None = None,
) -> RunResult:
    """Distill a student under ``cfg.distill.mode``.

    Each step builds the dual batch, runs the student (and, except in NO_KD,
    the teacher) forward, combines the losses and takes one optimizer step on
    the student, the teacher (cross-entropy gradients only) and the
    projections. The student checkpoint never contains the projections.
    """
    mode = cfg.distill.mode
    student_vocab = student_vocab or _load_vocab(cfg.student_vocab)
    if mode.uses_teacher:
        teacher_vocab = teacher_vocab or _load_vocab(cfg.teacher_vocab)
    if examples is None:
        examples = list(ingest_corpus(cfg.train_corpus))
    if not examples:
        raise WorkbenchError("empty-corpus")
    if cfg.student.vocab_size != len(student_vocab):
        raise ConfigError("bad-config", "student vocab_size does not match the student vocabulary")

    init_rng, proj_rng, data_rng, mask_rng, dual_rng = _seeds(cfg.seed, 5)
    student = init_model(cfg.student, init_rng)

    projections = None
    if mode.uses_teacher:
        if teacher is None:
            if not cfg.teacher_checkpoint:
                raise ConfigError("bad-config", "teacher_checkpoint required for this mode")
            teacher = checkpoint.load_registry(cfg.teacher_checkpoint, cfg.teacher)
        if teacher.config.extra_vocab_size != len(student_vocab):
            raise ConfigError("bad-config", "teacher extra_vocab_size must equal student vocab size")
        if mode.uses_projection:
            projections = init_projections(teacher.config, cfg.student, proj_rng)
    dcfg = cfg.distill if mode.uses_teacher else dataclasses.replace(cfg.distill, p_dt=0.0)

    states = {"student": OptimState(cfg.optim), "teacher": OptimState(cfg.optim),
              "proj": OptimState(cfg.optim)}
    out_dir = Path(cfg.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.student.save(out_dir / STUDENT_CONFIG)
    ckpt = out_dir / STUDENT_CHECKPOINT
    metrics_path = out_dir / METRICS_FILE
    metrics_path.write_text("")

    sampler = _epoch_sampler(len(examples), cfg.batch_size, data_rng)
    window = _Window()
    metrics: list[MetricsRecord] = []
    teacher_calls = 0
    start = time.perf_counter()
    for step_idx in range(1, cfg.steps + 1):
        batch_words = [examples[i] for i in next(sampler)]
        t_batch, s_batch = build_dual_batch(
            batch_words, teacher_vocab or student_vocab, student_vocab, dcfg, mask_rng,
            teacher_rng=dual_rng, with_teacher=mode.uses_teacher, max_len=cfg.max_seq_len,
        )
        student.zero_grad()
        s_out = forward_mlm(student, s_batch)
        ce_s = mlm_loss(s_out)
        t_out = None
        ce_t = None
        if mode.uses_teacher:
            teacher.zero_grad()
            t_out = forward_mlm(teacher, t_batch)
            teacher_calls += 1
            ce_t = mlm_loss(t_out)
        l_ce = dual_ce_loss(s_out, t_out)
        l_p = None
        if projections is not None:
            projections.zero_grad()
            fn = proj_loss_down if mode is Mode.DUAL_PROJ_DOWN else proj_loss_up
            l_p = fn(teacher, student, projections, cfg.distill.projection_updates_teacher)
        loss = total_loss(l_p, l_ce, cfg.distill.epsilon)
        if not _is_finite(loss):
            raise DivergenceError(f"non-finite loss at step {step_idx}")
        if loss.requires_grad:
            loss.backward()

        lr = linear_warmup_decay(step_idx, cfg.steps, cfg.optim.lr, cfg.optim.warmup_fraction)
        _optimizer_step(student.entries, states["student"], lr, step_idx)
        if mode.uses_teacher:
            _optimizer_step(teacher.entries, states["teacher"], lr, step_idx)
        if projections is not None:
            _optimizer_step(projections.params(), states["proj"], lr, step_idx)

        correct, total = masked_predictions(s_out)
        window.add(
            {
                "L_final": loss.item(),
                "L_ce_student": ce_s.item(),
                "L_ce_teacher": ce_t.item() if ce_t is not None else 0.0,
                "L_p": l_p.item() if l_p is not None else 0.0,
            },
            correct,
            total,
        )
        if step_idx == 1 or step_idx % cfg.eval_every == 0 or step_idx == cfg.steps:
            wall = None if cfg.deterministic else round(time.perf_counter() - start, 3)
            rec = window.record(step_idx, wall)
            window.reset()
            metrics.append(rec)
            with open(metrics_path, "a", encoding="utf-8") as f:
                f.write(rec.to_json() + "\n")
            log.info("step %d L_final %.4f L_p %.4f acc %.3f", rec.step, rec.L_final, rec.L_p,
                     rec.masked_accuracy)
            if step_idx != cfg.steps:
                checkpoint.save_registry(ckpt, student)
    checkpoint.save_registry(ckpt, student)
    return RunResult(student, metrics, ckpt, teacher_calls, teacher, projections)


# --------------------------------------------------------------------------
# evaluation


def evaluate_masked_accuracy(
    params: ParamRegistry,
    vocab: Vocabulary,
    examples: Sequence[Sequence[str]],
    cfg: DistillConfig | None = None,
    seed: int = 1234,
    batch_size: int = 64,
    max_len: int = 128,
) -> float:
    """Top-1 accuracy on masked positions under a fixed seeded mask.

    ``vocab`` must be the model's own vocabulary. A teacher is scored on pure
    teacher segmentation, a student on student segmentation.
    """
    cfg = cfg or DistillConfig()
    teacher = params.config.primary_source == Source.TEACHER
    if teacher:
        cfg = dataclasses.replace(cfg, p_dt=0.0)
    rng = np.random.default_rng(seed)
    correct = total = 0
    with T.no_grad():
        for lo in range(0, len(examples), batch_size):
            chunk = examples[lo:lo + batch_size]
            if teacher:
                batch, _ = build_dual_batch(chunk, vocab, vocab, cfg, rng, max_len=max_len)
            else:
                batch = build_student_batch(chunk, vocab, cfg, rng, max_len)
            c, n = masked_predictions(forward_mlm(params, batch))
            correct += c
            total += n
    if total == 0:
        raise WorkbenchError("no-eval-data", "no masked positions in the evaluation set")
    return correct / total


def _classify_batch(rows, vocab, max_len):
    from .distill import MaskedSequence, collate
    from .vocab import segment_sequence

    items = []
    for _, words in rows:
        seq = segment_sequence(vocab, words, Source.STUDENT)
        ids = seq.ids[: max_len - 2]
        items.append(MaskedSequence(ids, seq.sources[: len(ids)]))
    return collate(items, Source.STUDENT, max_len)


def _classifier_logits(params: ParamRegistry, head: Mapping[str, Tensor], batch) -> Tensor:
    h = encode(params, batch)
    B, S, d = h.dims
    cls = T.take_rows(T.reshape(h, (B * S, d)), np.arange(B) * S)
    return T.linear(cls, head["classifier.weight"], head["classifier.bias"])


def binary_f1(pred: np.ndarray, gold: np.ndarray, positive: int = 1) -> float:
    tp = int(((pred == positive) & (gold == positive)).sum())
    fp = int(((pred == positive) & (gold != positive)).sum())
    fn = int(((pred != positive) & (gold == positive)).sum())
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def finetune_classifier(
    params: ParamRegistry,
    vocab: Vocabulary,
    train_rows: Sequence[tuple[int, Sequence[str]]],
    eval_rows: Sequence[tuple[int, Sequence[str]]],
    num_classes: int,
    epochs: int = 40,
    lr: float = 5e-3,
    batch_size: int = 32,
    seed: int = 0,
    max_len: int = 128,
    optim_config: OptimConfig | None = None,
) -> dict:
    """Fine-tune every weight plus an affine head on the [CLS] encoding.

    Works on a copy of ``params``. Returns eval accuracy, train accuracy and,
    for two classes, F1 of class 1.
    """
    if not train_rows:
        raise WorkbenchError("bad-dataset", "empty training set")
    for label, _ in list(train_rows) + list(eval_rows):
        if not 0 <= label < num_classes:
            raise WorkbenchError("bad-dataset", f"label {label} outside [0, {num_classes})")
    model = params.copy()
    init_rng, order_rng = _seeds(seed, 2)
    d = model.config.hidden_dim
    head = {
        "classifier.weight": Tensor(xavier_uniform((d, num_classes), init_rng), requires_grad=True),
        "classifier.bias": Tensor(np.zeros(num_classes, np.float32), requires_grad=True),
    }
    ocfg = optim_config or OptimConfig(lr=lr, weight_decay=0.0)
    state = OptimState(ocfg)
    n = len(train_rows)
    steps_per_epoch = math.ceil(n / batch_size)
    total_steps = epochs * steps_per_epoch
    step_idx = 0
    trainables = dict(model.entries)
    trainables.update(head)
    for _ in range(epochs):
        order = order_rng.permutation(n)
        for lo in range(0, n, batch_size):
            rows = [train_rows[i] for i in order[lo:lo + batch_size]]
            batch = _classify_batch(rows, vocab, max_len)
            for t in trainables.values():
                t.grad = None
            logits = _classifier_logits(model, head, batch)
            loss = T.cross_entropy(logits, [r[0] for r in rows])
            if not _is_finite(loss):
                raise DivergenceError("non-finite fine-tuning loss")
            loss.backward()
            step_idx += 1
            cur_lr = linear_warmup_decay(step_idx, total_steps, ocfg.lr, ocfg.warmup_fraction)
            _optimizer_step(trainables, state, cur_lr, step_idx)

    def predict(rows):
        preds = []
        with T.no_grad():
            for lo in range(0, len(rows), 64):
                chunk = rows[lo:lo + 64]
                preds.append(_classifier_logits(model, head, _classify_batch(chunk, vocab, max_len))
                             .data.argmax(axis=-1))
        return np.concatenate(preds) if preds else np.zeros(0, np.int64)

    train_pred = predict(train_rows)
    train_gold = np.array([r[0] for r in train_rows])
    result = {"train_accuracy": float((train_pred == train_gold).mean())}
    if eval_rows:
        pred = predict(eval_rows)
        gold = np.array([r[0] for r in eval_rows])
        result["accuracy"] = float((pred == gold).mean())
        if num_classes == 2:
            result["f1"] = binary_f1(pred, gold)
    return result


# --------------------------------------------------------------------------
# size accounting


@dataclass(frozen=True)
class SizeReport:
    params: int
    size_mb: float
    flops_ratio: float
    flops_per_token: int
    formula: str = FLOPS_FORMULA


def size_mb(num_params: int) -> float:
    """float32 storage in MiB, one decimal."""
    return round(num_params * 4 / 2**20, 1)


def report_model_size(config: ModelConfig, reference: ModelConfig | None = None,
                      seq_len: int = 128) -> SizeReport:
    reference = reference or bert_base_config()
    n = count_params(config)
    ref_flops = flops_per_token(reference, seq_len)
    flops = flops_per_token(config, seq_len)
    ratio = flops / ref_flops if ref_flops else float("nan")
    return SizeReport(n, size_mb(n), ratio, flops)
