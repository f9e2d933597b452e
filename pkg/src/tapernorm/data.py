"""Character-level corpus loading, vocabulary, and window sampling.

The default corpus is synthesized deterministically from a small seeded
sentence grammar, giving a ~1 MB English-like character stream with strong
local structure. Any UTF-8 text file can be used instead.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import InputError

DEFAULT_CORPUS_SEED = 20240901
DEFAULT_CORPUS_BYTES = 1_100_000

_NOUNS = [
    "river", "mountain", "garden", "lantern", "sailor", "merchant", "forest",
    "village", "harbor", "letter", "winter", "meadow", "stranger", "castle",
    "shadow", "morning", "road", "story", "fire", "window", "bridge", "bird",
    "teacher", "child", "clock", "island", "market", "song", "stone", "ship",
    "valley", "orchard", "miller", "fisherman", "doorway", "candle", "storm",
    "anchor", "ribbon", "summer", "evening", "square", "tower", "stable",
    "chapel", "meadowlark", "traveler", "weaver", "baker", "archway", "field",
    "harvest", "lighthouse", "wagon", "cliff", "creek", "attic", "cellar",
]
_VERBS = [
    "crossed", "watched", "remembered", "followed", "carried", "found",
    "built", "opened", "reached", "left", "gathered", "repaired", "painted",
    "studied", "traded", "guarded", "visited", "described", "promised",
    "noticed", "measured", "borrowed", "sketched", "counted", "questioned",
    "climbed", "avoided", "greeted", "startled", "mended", "signaled",
    "sheltered", "unpacked", "recorded", "rebuilt", "surveyed", "answered",
]
_ADJS = [
    "quiet", "old", "bright", "distant", "narrow", "golden", "cold", "small",
    "patient", "curious", "heavy", "pale", "steady", "wild", "simple",
    "crooked", "mossy", "restless", "hollow", "amber", "weathered", "brisk",
    "gentle", "stubborn", "faded", "immense", "clever", "uneven", "silent",
]
_ADVERBS = [
    "slowly", "often", "finally", "quietly", "again", "together", "alone",
    "carefully", "suddenly", "rarely", "twice", "eastward", "reluctantly",
]
_CONNECTORS = ["and", "but", "while", "because", "until", "before", "although", "so"]
_PREPS = ["near", "beyond", "under", "across", "behind", "beside", "toward"]
_OPENERS = [
    "that year", "by dusk", "after the rain", "in the old days", "at first light",
    "for a long while", "without a word", "by the third day",
]


def _noun_phrase(rng: np.random.Generator) -> list[str]:
    pick = rng.choice
    phrase = ["the"]
    if rng.random() < 0.55:
        phrase.append(str(pick(_ADJS)))
    phrase.append(str(pick(_NOUNS)))
    if rng.random() < 0.25:
        phrase += [str(pick(_PREPS)), "the", str(pick(_NOUNS))]
    return phrase


def _clause(rng: np.random.Generator) -> list[str]:
    pick = rng.choice
    parts = _noun_phrase(rng) + [str(pick(_VERBS))] + _noun_phrase(rng)
    if rng.random() < 0.4:
        parts.append(str(pick(_ADVERBS)))
    return parts


def _sentence(rng: np.random.Generator) -> str:
    pick = rng.choice
    parts: list[str] = []
    if rng.random() < 0.3:
        parts += str(pick(_OPENERS)).split() + [","]
    parts += _clause(rng)
    while rng.random() < 0.35:
        joiner = str(pick(_CONNECTORS))
        if rng.random() < 0.4:
            parts += [";", joiner]
        else:
            parts += [joiner]
        parts += _clause(rng)
    text = " ".join(parts).replace(" ,", ",").replace(" ;", ";")
    end = "?" if rng.random() < 0.06 else "."
    return text + end + " "


def build_default_corpus(path: str, n_bytes: int = DEFAULT_CORPUS_BYTES,
                         seed: int = DEFAULT_CORPUS_SEED) -> str:
    """Write the deterministic bundled corpus to ``path`` and return the path."""
    rng = np.random.default_rng(seed)
    chunks: list[str] = []
    total = 0
    line = 0
    while total < n_bytes:
        s = _sentence(rng)
        chunks.append(s)
        total += len(s)
        line += len(s)
        if line > 70:
            chunks.append("\n")
            total += 1
            line = 0
    text = "".join(chunks)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return path


@dataclass(frozen=True)
class Vocab:
    """Deterministic char <-> id mapping, ids contiguous from 0."""

    chars: str

    @property
    def size(self) -> int:
        return len(self.chars)

    def encode(self, text: str) -> np.ndarray:
        table = {c: i for i, c in enumerate(self.chars)}
        try:
            return np.fromiter((table[c] for c in text), dtype=np.int32, count=len(text))
        except KeyError as e:
            raise InputError(f"character {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids: np.ndarray) -> str:
        return "".join(self.chars[i] for i in np.asarray(ids).reshape(-1))

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        return cls("".join(sorted(set(text))))


def load_corpus(path: str) -> tuple[np.ndarray, Vocab]:
    """Tokenize a UTF-8 text file at character level.

    Returns the id stream and the vocabulary built from the file's distinct
    characters, sorted by codepoint so the mapping is reproducible.
    """
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise InputError(f"cannot read corpus {path!r}: {e}") from None
    if not text:
        raise InputError(f"corpus {path!r} is empty")
    vocab = Vocab.from_text(text)
    return vocab.encode(text), vocab


def split_stream(stream: np.ndarray, val_frac: float) -> tuple[np.ndarray, np.ndarray]:
    """Head/tail split into train and validation streams."""
    if not 0.0 < val_frac < 1.0:
        raise InputError(f"val_frac must be in (0, 1), got {val_frac}")
    cut = int(len(stream) * (1.0 - val_frac))
    if cut < 2 or len(stream) - cut < 2:
        raise InputError("stream too short to split")
    return stream[:cut], stream[cut:]


def sample_batch(
    stream: np.ndarray,
    batch_size: int,
    seq_len: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Random contiguous windows; targets are inputs shifted by one token."""
    if len(stream) <= seq_len:
        raise InputError(f"stream length {len(stream)} too short for seq_len {seq_len}")
    starts = rng.integers(0, len(stream) - seq_len, size=batch_size)
    offsets = np.arange(seq_len + 1)
    windows = stream[starts[:, None] + offsets[None, :]]
    return windows[:, :-1], windows[:, 1:]


def sequential_batches(stream: np.ndarray, batch_size: int, seq_len: int, max_batches: int):
    """Deterministic non-overlapping evaluation windows."""
    span = seq_len + 1
    n_windows = (len(stream) - 1) // span
    windows = []
    for w in range(min(n_windows, batch_size * max_batches)):
        chunk = stream[w * span : w * span + span]
        windows.append(chunk)
        if len(windows) == batch_size:
            arr = np.stack(windows)
            yield arr[:, :-1], arr[:, 1:]
            windows = []
    if windows:
        arr = np.stack(windows)
        yield arr[:, :-1], arr[:, 1:]
