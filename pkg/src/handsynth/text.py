"""Character vocabulary, one-hot text matrices and greedy CTC decoding."""
from __future__ import annotations

import string
from dataclasses import dataclass, field

import numpy as np


class UnknownCharacterError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    chars: tuple = tuple(string.ascii_lowercase)
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.chars)) != len(self.chars):
            raise ValueError("vocabulary characters must be unique")
        object.__setattr__(self, "chars", tuple(self.chars))
        object.__setattr__(self, "index", {c: i for i, c in enumerate(self.chars)})

    @property
    def size(self) -> int:
        return len(self.chars)

    @property
    def blank(self) -> int:
        return len(self.chars)

    def __contains__(self, ch: str) -> bool:
        return ch in self.index

    def covers(self, text: str) -> bool:
        return all(c in self.index for c in text)

    def encode(self, text: str) -> list:
        try:
            return [self.index[c] for c in text]
        except KeyError as e:
            raise UnknownCharacterError(f"character {e.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids) -> str:
        return "".join(self.chars[i] for i in ids)


@dataclass
class OneHotText:
    """y in {0,1}^{n x L}: one column per character, exactly one 1 per column."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix)
        if m.ndim != 2 or m.shape[1] < 1:
            raise ValueError(f"one-hot text must be (n, L) with L >= 1, got shape {m.shape}")
        if not np.isin(m, (0, 1)).all():
            raise ValueError("one-hot text entries must be 0 or 1")
        sums = m.sum(axis=0)
        if not np.all(sums == 1):
            bad = np.flatnonzero(sums != 1).tolist()
            raise ValueError(f"malformed one-hot text: columns {bad} do not sum to 1")
        self.matrix = m.astype(np.float32)

    @property
    def length(self) -> int:
        return self.matrix.shape[1]

    def indices(self) -> np.ndarray:
        return self.matrix.argmax(axis=0)


def encode_text(text: str, vocab: Vocab) -> OneHotText:
    if not text:
        raise ValueError("cannot encode empty text")
    ids = vocab.encode(text)
    m = np.zeros((vocab.size, len(ids)), dtype=np.float32)
    m[ids, np.arange(len(ids))] = 1.0
    return OneHotText(m)


def collapse_ctc(ids, blank: int) -> list:
    out, prev = [], None
    for i in ids:
        if i != prev and i != blank:
            out.append(int(i))
        prev = i
    return out


def decode_greedy(log_probs, vocab: Vocab) -> list:
    """Best-path decode of (T, B, n+1) log-probabilities: collapse repeats, drop blanks."""
    lp = np.asarray(getattr(log_probs, "data", log_probs))
    if lp.ndim == 2:
        lp = lp[:, None, :]
    best = lp.argmax(axis=-1)  # (T, B)
    return [vocab.decode(collapse_ctc(best[:, b], vocab.blank)) for b in range(best.shape[1])]


def batch_indices(texts, vocab: Vocab, length: int | None = None) -> np.ndarray:
    """Character indices (B, L) padded with -1 to ``length`` (default: longest text)."""
    length = length or max(len(t) for t in texts)
    out = np.full((len(texts), length), -1, dtype=np.int64)
    for b, t in enumerate(texts):
        ids = vocab.encode(t)
        if len(ids) > length:
            raise ValueError(f"text {t!r} longer than {length}")
        out[b, :len(ids)] = ids
    return out
