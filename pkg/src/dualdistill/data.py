"""Corpus ingestion and small synthetic datasets for desk-scale runs."""

from __future__ import annotations

from collections.abc import Iterator, Sequence
from pathlib import Path

import numpy as np

from .errors import WorkbenchError
from .vocab import basic_tokenize


def ingest_corpus(path: str | Path) -> Iterator[list[str]]:
    """Yield one lowercased word list per non-blank line, in file order."""
    try:
        with open(path, "rb") as f:
            raw_lines = f.read().split(b"\n")
    except OSError as exc:
        raise WorkbenchError("io", str(exc)) from exc
    for lineno, raw in enumerate(raw_lines, 1):
        try:
            line = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WorkbenchError("encoding", f"line {lineno}: {exc}") from exc
        words = basic_tokenize(line)
        if words:
            yield words


def read_lines(path: str | Path) -> list[str]:
    return [" ".join(words) for words in ingest_corpus(path)]


# animals with the foods and homes they go with; keeps masked words predictable
_ANIMALS = {
    "cat": (["fish", "milk"], ["kitchen", "garden"]),
    "dog": (["bone", "meat"], ["yard", "park"]),
    "rabbit": (["carrot", "lettuce"], ["meadow", "burrow"]),
    "horse": (["hay", "apple"], ["stable", "field"]),
    "mouse": (["cheese", "grain"], ["barn", "cellar"]),
    "bird": (["seed", "worm"], ["tree", "nest"]),
    "cow": (["grass", "clover"], ["pasture", "barn"]),
    "monkey": (["banana", "mango"], ["jungle", "tree"]),
}
_ADJ = ["small", "big", "happy", "sleepy", "hungry", "young", "old", "quiet", "brown", "white"]
_EAT = ["eats", "finds", "wants", "likes", "steals"]
_NAMES = ["anna", "ben", "carla", "david", "elena", "frank", "greta", "hugo", "irene", "jonas"]
_TOOLS = {
    "paints": ["picture", "wall", "fence"],
    "reads": ["book", "letter", "poem"],
    "cooks": ["soup", "dinner", "pasta"],
    "fixes": ["bike", "clock", "radio"],
}
_TIMES = ["monday", "tuesday", "friday", "sunday", "morning", "evening"]
_WEATHER = ["sunny", "rainy", "windy", "cold", "warm", "cloudy"]
_SEASONS = {"winter": "cold", "summer": "warm", "spring": "rainy", "autumn": "windy"}


def _sentence(rng: np.random.Generator) -> str:
    kind = rng.integers(4)
    if kind == 0:
        animal = rng.choice(list(_ANIMALS))
        foods, homes = _ANIMALS[animal]
        return (f"the {rng.choice(_ADJ)} {animal} {rng.choice(_EAT)} the "
                f"{rng.choice(foods)} in the {rng.choice(homes)} .")
    if kind == 1:
        verb = rng.choice(list(_TOOLS))
        return (f"{rng.choice(_NAMES)} {verb} the {rng.choice(_TOOLS[verb])} "
                f"on {rng.choice(_TIMES)} .")
    if kind == 2:
        season = rng.choice(list(_SEASONS))
        return f"in {season} the weather is often {_SEASONS[season]} ."
    a, b = rng.choice(_NAMES, size=2, replace=False)
    animal = rng.choice(list(_ANIMALS))
    return f"{a} and {b} see a {rng.choice(_ADJ)} {animal} in the {_ANIMALS[animal][1][0]} ."


def toy_corpus(num_sentences: int, seed: int = 0) -> list[str]:
    """Sentences from a small grammar whose slots depend on each other."""
    rng = np.random.default_rng(seed)
    return [_sentence(rng) for _ in range(num_sentences)]


_POSITIVE = ["wonderful", "great", "lovely", "delightful", "excellent"]
_NEGATIVE = ["terrible", "awful", "horrible", "dreadful", "miserable"]


def toy_classification(num_examples: int, seed: int = 0) -> list[tuple[int, str]]:
    """Balanced two-class set; the label is decided by one sentiment word."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(num_examples):
        label = k % 2
        word = rng.choice(_POSITIVE if label else _NEGATIVE)
        base = _sentence(rng).rstrip(" .")
        out.append((label, f"{base} , it was {word} ."))
    order = rng.permutation(num_examples)
    return [out[i] for i in order]


def write_tsv(path: str | Path, rows: Sequence[tuple[int, str]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for label, text in rows:
            f.write(f"{label}\t{text}\n")


def read_labeled_tsv(path: str | Path, num_classes: int) -> list[tuple[int, list[str]]]:
    """Parse ``label<TAB>text`` lines; labels must be integers in [0, num_classes)."""
    rows = []
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise WorkbenchError("io", str(exc)) from exc
    except UnicodeDecodeError as exc:
        raise WorkbenchError("encoding", str(exc)) from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        label_str, sep, body = line.partition("\t")
        try:
            label = int(label_str)
        except ValueError:
            label = -1
        if not sep or not 0 <= label < num_classes:
            raise WorkbenchError("bad-dataset", f"line {lineno}: label {label_str!r}")
        rows.append((label, basic_tokenize(body)))
    return rows
