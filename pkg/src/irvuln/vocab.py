"""Token vocabulary and binary bag-of-words line vectors."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Corpus, Program
from .errors import DataError

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def tokenize(line: str) -> list[str]:
    """Split on single spaces, dropping empty fragments.

    Punctuation stays attached to its token.
    """
    return [t for t in line.split(" ") if t]


@dataclass
class Vocabulary:
    """Ordered, unique token list; position in the list is the vector index."""

    tokens: list[str]
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("vocabulary tokens are not unique")
        if not self.tokens:
            raise DataError("vocabulary is empty")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def file_bytes(self) -> bytes:
        return ("\n".join(self.tokens) + "\n").encode("utf-8")

    def digest(self) -> str:
        """16-hex-char FNV-1a digest of the vocabulary file bytes."""
        return format(fnv1a64(self.file_bytes()), "016x")


@dataclass(eq=False)
class BowVector:
    """Sparse binary presence vector over the vocabulary."""

    dimension: int
    on_indices: np.ndarray  # strictly increasing int64 positions

    def __post_init__(self):
        self.on_indices = np.asarray(self.on_indices, dtype=np.int64)
        if self.on_indices.size:
            if not np.all(np.diff(self.on_indices) > 0):
                raise DataError("on_indices must be strictly increasing")
            if self.on_indices[0] < 0 or self.on_indices[-1] >= self.dimension:
                raise DataError("on_indices out of range")

    def dense(self) -> np.ndarray:
        v = np.zeros(self.dimension)
        v[self.on_indices] = 1.0
        return v

    def __eq__(self, other):
        return (isinstance(other, BowVector)
                and self.dimension == other.dimension
                and np.array_equal(self.on_indices, other.on_indices))


def build_vocabulary(corpus: Corpus) -> Vocabulary:
    """Collect every distinct token in first-occurrence order."""
    seen = {}
    for program in corpus:
        for line in program.lines:
            for tok in tokenize(line):
                if tok not in seen:
                    seen[tok] = len(seen)
    if not seen:
        raise DataError("corpus yields zero tokens")
    return Vocabulary(list(seen))


def vectorize_line(vocab: Vocabulary, line: str) -> BowVector:
    """Binary presence vector of the line's in-vocabulary tokens.

    Out-of-vocabulary tokens contribute nothing.
    """
    idx = {vocab.index[t] for t in tokenize(line) if t in vocab.index}
    return BowVector(vocab.size, np.array(sorted(idx), dtype=np.int64))


def vectorize_program(vocab: Vocabulary, program: Program) -> list[BowVector]:
    return [vectorize_line(vocab, line) for line in program.lines]


def save_vocabulary(vocab: Vocabulary, path) -> None:
    for tok in vocab.tokens:
        if "\n" in tok or "\r" in tok:
            raise DataError(f"token {tok!r} contains a newline")
    Path(path).write_bytes(vocab.file_bytes())


def load_vocabulary(path) -> Vocabulary:
    path = Path(path)
    if not path.exists():
        raise DataError(f"vocabulary file not found: {path}")
    text = path.read_text(encoding="utf-8")
    tokens = text.split("\n")
    if tokens and tokens[-1] == "":
        tokens.pop()
    if not tokens:
        raise DataError(f"{path}: vocabulary file is empty")
    return Vocabulary(tokens)
