"""Report normalization, vocabulary construction and integer encoding."""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from pathlib import Path
from typing import Iterable, List, Sequence

from radgen.exceptions import ConfigError, DataError, VocabRangeError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
CONTROL_IDS = frozenset({PAD, BOS, EOS})

DEFAULT_MIN_FREQ = 3
DEFAULT_MAX_LEN = 60

_DIGITS = re.compile(r"\d+")
_PUNCT = re.compile(r"[^\w\s-]|_")
_LOOSE_HYPHEN = re.compile(r"(?<!\w)-|-(?!\w)")
_SPACE = re.compile(r"\s+")


def normalize(text: str) -> str:
    """Lowercase, map digit runs to ``num``, strip punctuation but keep intra-word hyphens.

    >>> normalize("X-ray  shows 2 nodules")
    'x-ray shows num nodules'
    """
    text = _DIGITS.sub(" num ", text.lower())
    text = _PUNCT.sub(" ", text)
    text = _LOOSE_HYPHEN.sub(" ", text)
    return _SPACE.sub(" ", text).strip()


def tokenize(text: str) -> List[str]:
    return normalize(text).split()


class Vocab:
    """Bidirectional token/id map; ids 0-3 are the reserved control tokens."""

    def __init__(self, tokens: Sequence[str] = (), min_freq: int = 1):
        self.itos = list(RESERVED) + list(tokens)
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("vocabulary contains duplicate tokens")
        self.min_freq = min_freq

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi and self.stoi[token] >= len(RESERVED)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    @property
    def tokens(self) -> List[str]:
        return self.itos[len(RESERVED):]

    def id_of(self, token: str) -> int:
        idx = self.stoi.get(token, UNK)
        return UNK if idx < len(RESERVED) else idx

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self.itos):
            raise VocabRangeError(f"id {idx} outside vocabulary of size {len(self.itos)}")
        return self.itos[idx]

    def to_text(self) -> str:
        return "".join(tok + "\n" for tok in self.tokens)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        for lineno, tok in enumerate(lines, 1):
            if not tok or tok.split() != [tok]:
                raise DataError(f"{path}:{lineno}: malformed vocabulary entry {tok!r}")
        return cls(lines)


def build_vocab(corpus: Iterable[str], min_freq: int = DEFAULT_MIN_FREQ) -> Vocab:
    """Keep tokens seen at least ``min_freq`` times, ordered by (-count, token)."""
    if min_freq < 1:
        raise ConfigError(f"min_freq must be >= 1, got {min_freq}")
    counts = Counter(tok for text in corpus for tok in tokenize(text))
    kept = sorted((tok for tok, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocab(kept, min_freq=min_freq)


def encode(text: str, vocab: Vocab, max_len: int = DEFAULT_MAX_LEN) -> List[int]:
    """BOS + at most ``max_len - 2`` content ids + EOS."""
    if max_len < 2:
        raise ConfigError(f"max_len must leave room for BOS and EOS, got {max_len}")
    ids = [vocab.id_of(tok) for tok in tokenize(text)][: max_len - 2]
    return [BOS] + ids + [EOS]


def decode(ids: Iterable[int], vocab: Vocab) -> str:
    """Join content tokens with single spaces; PAD/BOS are dropped and EOS ends the text."""
    out = []
    for i in map(int, ids):
        if i == EOS:
            break
        if i not in CONTROL_IDS:
            out.append(vocab.token_of(i))
    return " ".join(out)


def pad(ids: Sequence[int], length: int) -> List[int]:
    if len(ids) > length:
        raise ConfigError(f"sequence of length {len(ids)} does not fit {length}")
    return list(ids) + [PAD] * (length - len(ids))
