"""Byte-level tokenization, corpus loading and deterministic batching."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

BOS_ID = 256
EOS_ID = 257
PAD_ID = 258
VOCAB_SIZE = 259
SPLITS = ("train", "val", "heldout")


class InsufficientTokensError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    """Byte ids 0-255 map to themselves; 256/257/258 are BOS/EOS/PAD."""

    size: int = VOCAB_SIZE
    bos: int = BOS_ID
    eos: int = EOS_ID
    pad: int = PAD_ID

    def encode(self, text: bytes | str) -> np.ndarray:
        return encode(text)

    def decode(self, ids, strip_special: bool = True) -> bytes:
        return decode(ids, strip_special=strip_special)


def encode(text: bytes | str) -> np.ndarray:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)


def decode(ids, strip_special: bool = True) -> bytes:
    """Inverse of :func:`encode`.  Special ids are dropped unless strip_special=False,
    in which case they are an error like any other non-byte id."""
    arr = np.asarray(ids, dtype=np.int64).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() >= VOCAB_SIZE):
        raise ValueError(f"token id out of range [0, {VOCAB_SIZE})")
    special = arr >= 256
    if special.any():
        if not strip_special:
            raise ValueError("special token id cannot be decoded to a byte")
        arr = arr[~special]
    return arr.astype(np.uint8).tobytes()


@dataclass
class Corpus:
    tokens: np.ndarray
    manifest: list[dict] = field(default_factory=list)
    boundaries: dict[str, tuple[int, int]] = field(default_factory=dict)
    seed: int = 0

    def split(self, name: str) -> np.ndarray:
        if name not in self.boundaries:
            raise KeyError(f"unknown split {name!r}; have {sorted(self.boundaries)}")
        lo, hi = self.boundaries[name]
        return self.tokens[lo:hi]

    @classmethod
    def from_bytes(cls, data: bytes, fractions: dict[str, float] | None = None, seed: int = 0,
                   name: str = "<memory>") -> Corpus:
        tokens = encode(data)
        return cls(tokens=tokens, manifest=[{"path": name, "bytes": len(data)}],
                   boundaries=_split_bounds(len(tokens), fractions), seed=seed)

    @classmethod
    def from_manifest(cls, path: str | os.PathLike) -> Corpus:
        """Load ``{files: [...], splits: {train, val, heldout}, seed}``.

        Files are concatenated in order with an EOS id between them; split
        boundaries are contiguous slices of the stream in train/val/heldout order.
        """
        path = os.fspath(path)
        with open(path) as fh:
            spec = json.load(fh)
        base = os.path.dirname(os.path.abspath(path))
        pieces: list[np.ndarray] = []
        manifest = []
        for i, rel in enumerate(spec["files"]):
            fpath = rel if os.path.isabs(rel) else os.path.join(base, rel)
            with open(fpath, "rb") as fh:
                raw = fh.read()
            manifest.append({"path": rel, "bytes": len(raw)})
            if i:
                pieces.append(np.array([EOS_ID], dtype=np.int64))
            pieces.append(encode(raw))
        tokens = np.concatenate(pieces) if pieces else np.zeros(0, dtype=np.int64)
        return cls(tokens=tokens, manifest=manifest,
                   boundaries=_split_bounds(len(tokens), spec.get("splits")),
                   seed=int(spec.get("seed", 0)))


def _split_bounds(n: int, fractions: dict[str, float] | None) -> dict[str, tuple[int, int]]:
    fractions = fractions or {"train": 0.9, "val": 0.05, "heldout": 0.05}
    total = sum(fractions.get(s, 0.0) for s in SPLITS)
    if total <= 0:
        raise ValueError("split fractions must sum to a positive value")
    bounds = {}
    start = 0
    acc = 0.0
    for i, name in enumerate(SPLITS):
        acc += fractions.get(name, 0.0) / total
        end = n if i == len(SPLITS) - 1 else int(round(acc * n))
        bounds[name] = (start, end)
        start = end
    return bounds


def batch_windows(corpus: Corpus, split: str, seq_len: int, batch: int, seed: int,
                  epochs: int | None = 1) -> Iterator[np.ndarray]:
    """Yield int64 blocks of shape (batch, seq_len) from one split.

    Each epoch tiles the split with non-overlapping windows at a random phase
    and visits them in a seeded random order; a trailing partial batch is
    dropped.  ``epochs=None`` loops forever (epoch e uses seed + e).
    """
    data = corpus.split(split)
    if len(data) < batch * seq_len:
        raise InsufficientTokensError(
            f"split {split!r} has {len(data)} tokens, need at least {batch * seq_len}")
    epoch = 0
    while epochs is None or epoch < epochs:
        rng = np.random.default_rng([seed, epoch])
        slack = len(data) - seq_len * (len(data) // seq_len)
        phase = int(rng.integers(0, slack + 1))
        starts = phase + seq_len * np.arange((len(data) - phase) // seq_len)
        starts = starts[rng.permutation(len(starts))]
        for b in range(len(starts) // batch):
            sel = starts[b * batch:(b + 1) * batch]
            yield np.stack([data[s:s + seq_len] for s in sel])
        epoch += 1


def sample_prompts(corpus: Corpus, split: str, count: int, length: int, seed: int) -> np.ndarray:
    """Random contiguous prefixes of ``length`` tokens from a split, shape (count, length)."""
    data = corpus.split(split)
    if len(data) < length + 1:
        raise InsufficientTokensError(f"split {split!r} too short for {length}-token prompts")
    rng = np.random.default_rng(seed)
    starts = rng.integers(0, len(data) - length, size=count)
    return np.stack([data[s:s + length] for s in starts]).astype(np.int64)
