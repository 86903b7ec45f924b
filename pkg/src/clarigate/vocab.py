"""Token and categorical-id tables feeding the embedding layers."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .types import ClarigateError

PAD = "<pad>"
UNK = "<unk>"
PAD_ID = 0
UNK_ID = 1


class VocabError(ClarigateError):
    pass


@dataclass(frozen=True)
class Vocab:
    """Word-to-id map with dense 0-based ids and reserved <pad>/<unk> rows."""

    words: tuple[str, ...]

    def __post_init__(self):
        if len(self.words) < 2 or self.words[PAD_ID] != PAD or self.words[UNK_ID] != UNK:
            raise VocabError(f"vocab must start with {PAD!r}, {UNK!r}")
        if len(set(self.words)) != len(self.words):
            raise VocabError("duplicate words in vocab")
        object.__setattr__(self, "_index", {w: i for i, w in enumerate(self.words)})

    def __len__(self) -> int:
        return len(self.words)

    def id_of(self, word: str) -> int:
        return self._index.get(word, UNK_ID)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self._index.get(t, UNK_ID) for t in tokens]

    def sha256(self) -> str:
        return hashlib.sha256("\n".join(self.words).encode("utf-8")).hexdigest()

    @classmethod
    def build(cls, token_seqs: Iterable[Sequence[str]]) -> "Vocab":
        seen: set[str] = set()
        for seq in token_seqs:
            seen.update(seq)
        seen.discard(PAD)
        seen.discard(UNK)
        return cls(words=(PAD, UNK, *sorted(seen)))

    def save(self, path: str | Path) -> None:
        """One token per line; the line number is the id."""
        Path(path).write_text("\n".join(self.words) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        words = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(words=tuple(words))


@dataclass(frozen=True)
class CategoryTable:
    """Name-to-id map for domains, intents, or slot keys; id 0 is <unk>."""

    names: tuple[str, ...]

    def __post_init__(self):
        if len(self.names) < 1 or self.names[0] != UNK:
            raise VocabError(f"category table must start with {UNK!r}")
        if len(set(self.names)) != len(self.names):
            raise VocabError("duplicate names in category table")
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(self.names)})

    def __len__(self) -> int:
        return len(self.names)

    def id_of(self, name: str) -> int:
        return self._index.get(name, 0)

    def sha256(self) -> str:
        return hashlib.sha256("\n".join(self.names).encode("utf-8")).hexdigest()

    @classmethod
    def build(cls, names: Iterable[str]) -> "CategoryTable":
        uniq = sorted(set(names) - {UNK})
        return cls(names=(UNK, *uniq))


def load_word_vectors(path: str | Path, vocab: Vocab, dim: int) -> tuple[np.ndarray, int]:
    """Read whitespace-separated "word v1 .. vd" lines into an embedding block.

    Returns (matrix, n_loaded) where matrix rows for words missing from the
    file are zero; callers typically overlay the loaded rows onto a randomly
    initialized table.
    """
    matrix = np.zeros((len(vocab), dim), dtype=np.float64)
    loaded = 0
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            parts = raw.rstrip("\n").split()
            if not parts:
                continue
            word, values = parts[0], parts[1:]
            if len(values) != dim:
                raise VocabError(
                    f"vector for {word!r} has {len(values)} entries, expected {dim}"
                )
            idx = vocab.id_of(word)
            if idx == UNK_ID and word != UNK:
                continue
            matrix[idx] = np.asarray([float(v) for v in values])
            loaded += 1
    return matrix, loaded
