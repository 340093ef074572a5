"""WordPiece vocabularies: training, greedy segmentation and dual-vocabulary mixing."""

from __future__ import annotations

import enum
import unicodedata
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import WorkbenchError

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
NUM_SPECIALS = len(SPECIAL_TOKENS)

MAX_WORD_CHARS = 100


class Source(enum.IntEnum):
    """Which vocabulary produced a token."""

    TEACHER = 0
    STUDENT = 1


class Vocabulary:
    """Ordered, immutable WordPiece token set.

    Ids are dense and 0-based; the five special tokens always occupy ids 0-4.
    """

    def __init__(self, tokens: Sequence[str], continuation_prefix: str = "##"):
        tokens = list(tokens)
        if tuple(tokens[:NUM_SPECIALS]) != SPECIAL_TOKENS:
            raise WorkbenchError("bad-vocab", "special tokens must occupy ids 0-4")
        id_of = {}
        for i, tok in enumerate(tokens):
            if tok in id_of:
                raise WorkbenchError("bad-vocab", f"duplicate token {tok!r}")
            id_of[tok] = i
        self._tokens = tuple(tokens)
        self._id_of = id_of
        self.continuation_prefix = continuation_prefix

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._tokens

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._id_of

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, Vocabulary)
            and self._tokens == other._tokens
            and self.continuation_prefix == other.continuation_prefix
        )

    def __hash__(self) -> int:
        return hash(self._tokens)

    def __repr__(self) -> str:
        return f"Vocabulary(size={len(self)})"

    def id_of(self, token: str) -> int:
        return self._id_of[token]

    def get(self, token: str, default: int | None = None) -> int | None:
        return self._id_of.get(token, default)

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    def content_tokens(self) -> tuple[str, ...]:
        return self._tokens[NUM_SPECIALS:]

    def save(self, path: str | Path) -> None:
        """Write one token per line; the line number is the id."""
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for tok in self._tokens:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path: str | Path, continuation_prefix: str = "##") -> Vocabulary:
        try:
            with open(path, encoding="utf-8") as f:
                tokens = [line.rstrip("\n") for line in f]
        except OSError as exc:
            raise WorkbenchError("io", str(exc)) from exc
        if tokens and tokens[-1] == "":
            tokens.pop()
        return cls(tokens, continuation_prefix)


@dataclass
class TaggedTokenSequence:
    """Content token ids, each tagged with the vocabulary that produced it.

    ``word_spans[k] = (start, end)`` is the half-open range of entries
    produced by the k-th input word.
    """

    ids: list[int] = field(default_factory=list)
    sources: list[Source] = field(default_factory=list)
    word_spans: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def entries(self) -> list[tuple[int, Source]]:
        return list(zip(self.ids, self.sources))

    def word_source(self, k: int) -> Source:
        start, _ = self.word_spans[k]
        return self.sources[start]

    def append_word(self, ids: Sequence[int], source: Source) -> None:
        start = len(self.ids)
        self.ids.extend(ids)
        self.sources.extend([source] * len(ids))
        self.word_spans.append((start, len(self.ids)))

    def check(self) -> None:
        """Raise if the span/tag invariants are broken."""
        pos = 0
        for start, end in self.word_spans:
            if start != pos or end <= start:
                raise WorkbenchError("bad-sequence", f"span ({start}, {end}) at {pos}")
            if len({self.sources[i] for i in range(start, end)}) != 1:
                raise WorkbenchError("bad-sequence", "mixed sources within a word")
            pos = end
        if pos != len(self.ids) or len(self.sources) != len(self.ids):
            raise WorkbenchError("bad-sequence", "spans do not cover all entries")


# --------------------------------------------------------------------------
# text normalization


def _is_punctuation(ch: str) -> bool:
    cp = ord(ch)
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def basic_tokenize(text: str) -> list[str]:
    """Lowercase, NFC-normalize, split on whitespace and isolate punctuation."""
    text = unicodedata.normalize("NFC", text.lower())
    words: list[str] = []
    for chunk in text.split():
        current: list[str] = []
        for ch in chunk:
            if _is_punctuation(ch):
                if current:
                    words.append("".join(current))
                    current = []
                words.append(ch)
            else:
                current.append(ch)
        if current:
            words.append("".join(current))
    return words


# --------------------------------------------------------------------------
# training


def train_wordpiece(
    corpus: Iterable[str], target_size: int, continuation_prefix: str = "##"
) -> Vocabulary:
    """Build a vocabulary by frequency-ranked pair merging over words.

    Every corpus character enters twice (word-initial and continuation form),
    then the most frequent adjacent symbol pair is merged repeatedly until the
    vocabulary reaches ``target_size`` or no pair is left. Ties go to the
    lexicographically smallest pair, so the result is deterministic.
    """
    word_counts: Counter[str] = Counter()
    for line in corpus:
        word_counts.update(basic_tokenize(line))
    if not word_counts:
        raise WorkbenchError("empty-corpus")

    chars = sorted({ch for word in word_counts for ch in word})
    floor = NUM_SPECIALS + 2 * len(chars)
    if target_size < floor:
        raise WorkbenchError(
            "vocab-too-small", f"need at least {floor} tokens for {len(chars)} characters"
        )

    p = continuation_prefix
    tokens = list(SPECIAL_TOKENS) + chars + [p + ch for ch in chars]
    present = set(tokens)

    # distinct words in sorted order keep the pair tally deterministic
    words = sorted(word_counts)
    splits = {w: [w[0]] + [p + ch for ch in w[1:]] for w in words}

    while len(tokens) < target_size:
        pair_counts: Counter[tuple[str, str]] = Counter()
        for w in words:
            symbols = splits[w]
            freq = word_counts[w]
            for a, b in zip(symbols, symbols[1:]):
                pair_counts[(a, b)] += freq
        if not pair_counts:
            break
        best = min(pair_counts, key=lambda pr: (-pair_counts[pr], pr))
        left, right = best
        merged = left + right[len(p):]
        for w in words:
            symbols = splits[w]
            if len(symbols) < 2:
                continue
            out = []
            i = 0
            while i < len(symbols):
                if i + 1 < len(symbols) and symbols[i] == left and symbols[i + 1] == right:
                    out.append(merged)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            splits[w] = out
        if merged not in present:
            present.add(merged)
            tokens.append(merged)

    return Vocabulary(tokens, continuation_prefix)


# --------------------------------------------------------------------------
# segmentation


def segment_word(vocab: Vocabulary, word: str) -> list[int]:
    """Greedy longest-match-first WordPiece segmentation; ``[UNK]`` on failure."""
    if len(word) > MAX_WORD_CHARS or not word:
        return [UNK_ID]
    prefix = vocab.continuation_prefix
    pieces: list[int] = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while start < end:
            sub = word[start:end]
            if start > 0:
                sub = prefix + sub
            idx = vocab.get(sub)
            if idx is not None:
                found = idx
                break
            end -= 1
        if found is None:
            return [UNK_ID]
        pieces.append(found)
        start = end
    return pieces


def detokenize_word(vocab: Vocabulary, ids: Sequence[int]) -> str:
    prefix = vocab.continuation_prefix
    parts = []
    for k, idx in enumerate(ids):
        tok = vocab.token(idx)
        if k > 0 and tok.startswith(prefix):
            tok = tok[len(prefix):]
        parts.append(tok)
    return "".join(parts)


def segment_sequence(
    vocab: Vocabulary, words: Sequence[str], source: Source = Source.STUDENT
) -> TaggedTokenSequence:
    seq = TaggedTokenSequence()
    for word in words:
        seq.append_word(segment_word(vocab, word), source)
    return seq


def dual_segment(
    teacher_vocab: Vocabulary,
    student_vocab: Vocabulary,
    words: Sequence[str],
    p_dt: float,
    rng: np.random.Generator,
) -> TaggedTokenSequence:
    """Segment each word with the student vocabulary with probability ``p_dt``.

    One uniform draw is consumed per word regardless of ``p_dt``.
    """
    if not 0.0 <= p_dt <= 1.0:
        raise WorkbenchError("bad-probability", f"p_DT={p_dt}")
    draws = rng.random(len(words))
    seq = TaggedTokenSequence()
    for word, u in zip(words, draws):
        if u < p_dt:
            seq.append_word(segment_word(student_vocab, word), Source.STUDENT)
        else:
            seq.append_word(segment_word(teacher_vocab, word), Source.TEACHER)
    return seq


def vocab_overlap(a: Vocabulary, b: Vocabulary) -> float:
    """Fraction of ``a``'s content tokens also present in ``b``."""
    content = a.content_tokens()
    if not content:
        raise WorkbenchError("empty-content-vocab")
    other = set(b.content_tokens())
    return sum(tok in other for tok in content) / len(content)
