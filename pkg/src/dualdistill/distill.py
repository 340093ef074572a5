"""Dual-vocabulary batches, shared-projection losses and the combined objective."""

from __future__ import annotations

import dataclasses
import enum
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, WorkbenchError
from .model import (
    Batch,
    DimClass,
    ModelConfig,
    ParamRegistry,
    RoutedLogits,
    mlm_loss,
    xavier_uniform,
)
from .tensor import Tensor
from .vocab import (
    CLS_ID,
    MASK_ID,
    NUM_SPECIALS,
    PAD_ID,
    SEP_ID,
    Source,
    TaggedTokenSequence,
    Vocabulary,
    dual_segment,
    segment_sequence,
)


class Mode(str, enum.Enum):
    NO_KD = "NO_KD"
    DUAL = "DUAL"
    DUAL_PROJ_DOWN = "DUAL_PROJ_DOWN"
    DUAL_PROJ_UP = "DUAL_PROJ_UP"

    @property
    def uses_teacher(self) -> bool:
        return self is not Mode.NO_KD

    @property
    def uses_projection(self) -> bool:
        return self in (Mode.DUAL_PROJ_DOWN, Mode.DUAL_PROJ_UP)


@dataclass
class DistillConfig:
    mode: Mode = Mode.DUAL
    p_dt: float = 0.5
    epsilon: float = 1.0
    mask_rate: float = 0.15
    replace_probs: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    projection_updates_teacher: bool = False

    def __post_init__(self):
        try:
            self.mode = Mode(self.mode)
        except ValueError as exc:
            raise ConfigError("bad-config", f"unknown mode {self.mode!r}") from exc
        self.replace_probs = tuple(float(p) for p in self.replace_probs)
        for name in ("p_dt", "mask_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError("bad-config", f"{name} must lie in [0, 1]")
        if len(self.replace_probs) != 3 or any(p < 0 for p in self.replace_probs):
            raise ConfigError("bad-config", "replace_probs must be three nonnegative numbers")
        if abs(sum(self.replace_probs) - 1.0) > 1e-9:
            raise ConfigError("bad-config", "replace_probs must sum to 1")

    @classmethod
    def from_dict(cls, d: Mapping) -> DistillConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        if set(d) - known:
            raise ConfigError("bad-config", f"unknown distill keys {sorted(set(d) - known)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mode"] = self.mode.value
        d["replace_probs"] = list(self.replace_probs)
        return d


# --------------------------------------------------------------------------
# masking


@dataclass
class MaskedSequence:
    """A tagged sequence after masking, with per-position targets."""

    ids: list[int]
    sources: list[Source]
    positions: list[int] = field(default_factory=list)
    label_sources: list[Source] = field(default_factory=list)
    label_ids: list[int] = field(default_factory=list)
    label_words: list[int] = field(default_factory=list)


def plan_mask(num_words: int, mask_rate: float, rng: np.random.Generator) -> np.ndarray:
    """Independent per-word mask decisions."""
    return rng.random(num_words) < mask_rate


def apply_mask(
    seq: TaggedTokenSequence,
    plan: Sequence[bool],
    cfg: DistillConfig,
    rng: np.random.Generator,
    vocab_sizes: Mapping[Source, int],
) -> MaskedSequence:
    """Corrupt every piece of every planned word: MASK / random same-vocab / keep."""
    p_mask, p_rand, _ = cfg.replace_probs
    ids = list(seq.ids)
    out = MaskedSequence(ids, list(seq.sources))
    for k, (start, end) in enumerate(seq.word_spans):
        if not plan[k]:
            continue
        for pos in range(start, end):
            src = seq.sources[pos]
            out.positions.append(pos)
            out.label_sources.append(src)
            out.label_ids.append(seq.ids[pos])
            out.label_words.append(k)
            r = rng.random()
            if r < p_mask:
                ids[pos] = MASK_ID
            elif r < p_mask + p_rand:
                ids[pos] = int(rng.integers(NUM_SPECIALS, vocab_sizes[src]))
    return out


def mask_words(
    seq: TaggedTokenSequence,
    cfg: DistillConfig,
    rng: np.random.Generator,
    vocab_sizes: Mapping[Source, int],
) -> MaskedSequence:
    """Whole-word masking of one sequence."""
    return apply_mask(seq, plan_mask(len(seq.word_spans), cfg.mask_rate, rng), cfg, rng, vocab_sizes)


def collate(examples: Sequence[MaskedSequence], consumer: Source, max_len: int) -> Batch:
    """Wrap each example in [CLS] ... [SEP] and pad to the longest one."""
    if not examples:
        raise WorkbenchError("empty-batch")
    S = max(len(e.ids) for e in examples) + 2
    if S > max_len:
        raise WorkbenchError("bad-token-id", f"sequence of {S} tokens exceeds {max_len}")
    B = len(examples)
    token_ids = np.full((B, S), PAD_ID, dtype=np.int64)
    tags = np.full((B, S), int(consumer), dtype=np.int64)
    attn = np.zeros((B, S), dtype=np.int64)
    rows, cols, lsrc, lids, lwords = [], [], [], [], []
    for b, e in enumerate(examples):
        n = len(e.ids)
        token_ids[b, 0] = CLS_ID
        token_ids[b, 1:n + 1] = e.ids
        token_ids[b, n + 1] = SEP_ID
        tags[b, 1:n + 1] = [int(s) for s in e.sources]
        attn[b, :n + 2] = 1
        rows += [b] * len(e.positions)
        cols += [p + 1 for p in e.positions]
        lsrc += [int(s) for s in e.label_sources]
        lids += e.label_ids
        lwords += e.label_words
    return Batch(
        token_ids=token_ids,
        source_tags=tags,
        attention_mask=attn,
        type_ids=np.zeros((B, S), dtype=np.int64),
        mask_rows=np.asarray(rows, dtype=np.int64),
        mask_cols=np.asarray(cols, dtype=np.int64),
        label_sources=np.asarray(lsrc, dtype=np.int64),
        label_ids=np.asarray(lids, dtype=np.int64),
        mask_words=np.asarray(lwords, dtype=np.int64),
    )


def _truncate(seq: TaggedTokenSequence, num_words: int) -> TaggedTokenSequence:
    if num_words >= len(seq.word_spans):
        return seq
    end = seq.word_spans[num_words - 1][1] if num_words else 0
    return TaggedTokenSequence(seq.ids[:end], seq.sources[:end], seq.word_spans[:num_words])


def _words_that_fit(seqs: Sequence[TaggedTokenSequence], budget: int) -> int:
    n = min(len(s.word_spans) for s in seqs)
    for s in seqs:
        while n and s.word_spans[n - 1][1] > budget:
            n -= 1
    return n


def build_dual_batch(
    examples: Sequence[Sequence[str]],
    teacher_vocab: Vocabulary,
    student_vocab: Vocabulary,
    cfg: DistillConfig,
    rng: np.random.Generator,
    teacher_rng: np.random.Generator | None = None,
    with_teacher: bool = True,
    max_len: int = 128,
) -> tuple[Batch | None, Batch]:
    """Teacher (mixed-vocabulary) and student (student-only) views of the same examples.

    One word-level mask plan per example is shared by both views. ``rng``
    drives the plan and the student view; ``teacher_rng`` (default: ``rng``)
    drives the teacher's vocabulary choices and corruption. Keeping them apart
    makes the student batch independent of whether a teacher view is built.
    Both views are cut to the words that fit in both within ``max_len``.
    """
    if not examples:
        raise WorkbenchError("empty-batch")
    teacher_rng = rng if teacher_rng is None else teacher_rng
    s_sizes = {Source.STUDENT: len(student_vocab)}
    t_sizes = {Source.TEACHER: len(teacher_vocab), Source.STUDENT: len(student_vocab)}
    budget = max_len - 2
    t_items, s_items = [], []
    for words in examples:
        s_seq = segment_sequence(student_vocab, words, Source.STUDENT)
        seqs = [s_seq]
        if with_teacher:
            t_seq = dual_segment(teacher_vocab, student_vocab, words, cfg.p_dt, teacher_rng)
            seqs.append(t_seq)
        n = _words_that_fit(seqs, budget)
        plan = plan_mask(len(words), cfg.mask_rate, rng)[:n]
        s_items.append(apply_mask(_truncate(s_seq, n), plan, cfg, rng, s_sizes))
        if with_teacher:
            t_items.append(apply_mask(_truncate(t_seq, n), plan, cfg, teacher_rng, t_sizes))
    student = collate(s_items, Source.STUDENT, max_len)
    teacher = collate(t_items, Source.TEACHER, max_len) if with_teacher else None
    return teacher, student


def build_student_batch(examples, student_vocab, cfg, rng, max_len=128) -> Batch:
    _, batch = build_dual_batch(examples, student_vocab, student_vocab, cfg, rng,
                                with_teacher=False, max_len=max_len)
    return batch


# --------------------------------------------------------------------------
# shared projections


@dataclass
class ProjectionSet:
    """One (U, V) pair per dimension group.

    ``U[g]`` is (student dim x teacher dim), ``V[g]`` (teacher dim x student dim).
    """

    U: dict[DimClass, Tensor]
    V: dict[DimClass, Tensor]

    def params(self) -> dict[str, Tensor]:
        out = {}
        for g in self.U:
            out[f"proj.{g.value}.U"] = self.U[g]
            out[f"proj.{g.value}.V"] = self.V[g]
        return out

    def groups(self) -> tuple[DimClass, ...]:
        return tuple(self.U)

    def zero_grad(self) -> None:
        for t in self.params().values():
            t.grad = None


def init_projections(teacher: ModelConfig, student: ModelConfig,
                     rng: np.random.Generator) -> ProjectionSet:
    """Xavier-initialized projections for the HIDDEN and INTERMEDIATE groups."""
    dims = {
        DimClass.HIDDEN: (student.hidden_dim, teacher.hidden_dim),
        DimClass.INTERMEDIATE: (student.intermediate_dim, teacher.intermediate_dim),
    }
    U, V = {}, {}
    for g, (s, t) in dims.items():
        U[g] = Tensor(xavier_uniform((s, t), rng), requires_grad=True)
        V[g] = Tensor(xavier_uniform((t, s), rng), requires_grad=True)
    return ProjectionSet(U, V)


def corresponding_pairs(teacher: ParamRegistry, student: ParamRegistry) -> list[tuple[str, str]]:
    """(teacher name, student name) for every student variable.

    A student variable pairs with the same-named teacher variable when the
    axis classes agree, otherwise with the teacher's ``*_extra`` (student
    vocabulary) variable. Teacher-vocabulary-only variables are left out.
    """
    pairs = []
    for name in student:
        classes = student.dim_classes[name]
        for cand in (name, name + "_extra"):
            if cand in teacher and teacher.dim_classes[cand] == classes:
                pairs.append((cand, name))
                break
        else:
            raise WorkbenchError("registry-mismatch", f"no teacher counterpart for {name}")
    return pairs


def _apply_axes(x: Tensor, classes, left: Mapping, right: Mapping) -> Tensor:
    """Left-multiply axis 0 and right-multiply axis 1 by their group's matrix.

    A rank-1 variable is treated as a row vector. Axes whose class has no
    projection group map by identity.
    """
    if x.ndim == 1:
        g = classes[0]
        if g not in right:
            return x
        row = T.reshape(x, (1, x.dims[0]))
        out = T.matmul(row, right[g])
        return T.reshape(out, (out.dims[1],))
    if x.ndim != 2:
        raise WorkbenchError("registry-mismatch", f"cannot project rank-{x.ndim} variable")
    if classes[0] in left:
        x = T.matmul(left[classes[0]], x)
    if classes[1] in right:
        x = T.matmul(x, right[classes[1]])
    return x


def _teacher_view(t: Tensor, trainable: bool) -> Tensor:
    return t if trainable else t.detach()


def _proj_loss(teacher, student, proj, cfg_updates_teacher, down: bool) -> Tensor:
    total = None
    for tname, sname in corresponding_pairs(teacher, student):
        classes = student.dim_classes[sname]
        theta_t = _teacher_view(teacher[tname], cfg_updates_teacher)
        theta_s = student[sname]
        if down:
            mapped, target = _apply_axes(theta_t, classes, proj.U, proj.V), theta_s
        else:
            mapped, target = _apply_axes(theta_s, classes, proj.V, proj.U), theta_t
        if mapped.dims != target.dims:
            raise WorkbenchError(
                "registry-mismatch", f"{tname}->{sname}: projected {mapped.dims} vs {target.dims}"
            )
        term = T.sq_norm(T.sub(mapped, target) if down else T.sub(target, mapped))
        total = term if total is None else T.add(total, term)
    if total is None:
        raise WorkbenchError("registry-mismatch", "no corresponding variables")
    return total


def proj_loss_down(teacher: ParamRegistry, student: ParamRegistry, proj: ProjectionSet,
                   update_teacher: bool = False) -> Tensor:
    """Sum over variable pairs of ||U theta_t V - theta_s||^2 (teacher held constant by default)."""
    return _proj_loss(teacher, student, proj, update_teacher, down=True)


def proj_loss_up(teacher: ParamRegistry, student: ParamRegistry, proj: ProjectionSet,
                 update_teacher: bool = False) -> Tensor:
    """Sum over variable pairs of ||theta_t - V theta_s U||^2."""
    return _proj_loss(teacher, student, proj, update_teacher, down=False)


# --------------------------------------------------------------------------
# objectives


def dual_ce_loss(student_out: RoutedLogits, teacher_out: RoutedLogits | None) -> Tensor:
    """Student MLM cross-entropy plus teacher MLM cross-entropy, each a per-position mean."""
    if Source.TEACHER in student_out.heads:
        raise WorkbenchError("bad-label", "student logits must be over the student vocabulary")
    loss = mlm_loss(student_out)
    if teacher_out is not None:
        loss = T.add(loss, mlm_loss(teacher_out))
    return loss


def total_loss(l_p: Tensor | None, l_ce: Tensor, epsilon: float) -> Tensor:
    """``l_p + epsilon * l_ce``; an absent projection loss counts as zero."""
    weighted = T.scale(l_ce, epsilon)
    return weighted if l_p is None else T.add(l_p, weighted)
