"""KGW (green-list) and KTH (exponential-minimum) decoding watermarks.

Hashing PRNG
------------
Green lists are derived from SplitMix64 used in counter mode:
``word_i = mix64(state0 + (i + 1) * 0x9E3779B97F4A7C15)`` with the standard
SplitMix64 finaliser ``mix64``.  For a context whose token ids sum to ``s``
(Additive-LeftHash; ``s = 0`` when k = 0) the stream is seeded with
``state0 = mix64(key) ^ mix64(s + 1)``.  A permutation of ``0..V-1`` is built
by Fisher-Yates (for i = V-1 down to 1: j = word mod (i + 1); swap) and the
first ``round(gamma * V)`` entries form the green list.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .data import VOCAB_SIZE

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


class InsufficientLengthError(ValueError):
    pass


def mix64(x: int) -> int:
    x &= MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def splitmix_words(state0: int, count: int) -> list[int]:
    return [mix64(state0 + (i + 1) * GOLDEN) for i in range(count)]


def seeded_permutation(state0: int, size: int) -> np.ndarray:
    perm = list(range(size))
    words = splitmix_words(state0, size - 1)
    for w, i in zip(words, range(size - 1, 0, -1)):
        j = w % (i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return np.array(perm, dtype=np.int64)


# ---------------------------------------------------------------------------
# KGW
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KgwScheme:
    key: int
    k: int = 1
    gamma: float = 0.25
    delta: float = 2.0
    vocab_size: int = VOCAB_SIZE

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("context width k must be >= 0")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")

    @property
    def green_size(self) -> int:
        return int(round(self.gamma * self.vocab_size))

    def to_dict(self) -> dict:
        return {"scheme": "kgw", "seed": self.key, "k": self.k, "gamma": self.gamma,
                "delta": self.delta, "vocab_size": self.vocab_size}


@lru_cache(maxsize=65536)
def _green_ids(key: int, context_sum: int, gamma_size: int, vocab_size: int) -> np.ndarray:
    state0 = mix64(key) ^ mix64(context_sum + 1)
    ids = seeded_permutation(state0, vocab_size)[:gamma_size]
    ids.setflags(write=False)
    return ids


def _context_sum(scheme: KgwScheme, prev_tokens) -> int:
    prev = np.asarray(prev_tokens, dtype=np.int64).reshape(-1)
    if len(prev) != scheme.k:
        raise ValueError(f"expected exactly k={scheme.k} previous tokens, got {len(prev)}")
    return int(prev.sum()) if scheme.k else 0


def kgw_green_mask(scheme: KgwScheme, prev_tokens=()) -> np.ndarray:
    """Boolean (V,) mask of green tokens for the context of the k previous tokens."""
    ids = _green_ids(scheme.key, _context_sum(scheme, prev_tokens), scheme.green_size, scheme.vocab_size)
    mask = np.zeros(scheme.vocab_size, dtype=bool)
    mask[ids] = True
    return mask


def kgw_green_table(scheme: KgwScheme) -> np.ndarray:
    """All masks indexed by context sum, shape (k*(V-1)+1, V); one row when k = 0."""
    rows = scheme.k * (scheme.vocab_size - 1) + 1
    table = np.zeros((rows, scheme.vocab_size), dtype=bool)
    for s in range(rows):
        table[s, _green_ids(scheme.key, s, scheme.green_size, scheme.vocab_size)] = True
    return table


def kgw_bias(scheme: KgwScheme, prev_tokens=()) -> np.ndarray:
    return scheme.delta * kgw_green_mask(scheme, prev_tokens).astype(np.float64)


def kgw_bias_fn(scheme: KgwScheme):
    """Batched generation hook for :func:`wmlab.model.sample_with_bias`."""
    table = kgw_green_table(scheme).astype(np.float64) * scheme.delta

    def fn(ctx):
        if scheme.k == 0:
            return np.broadcast_to(table[0], (ctx.shape[0], scheme.vocab_size))
        if ctx.shape[1] < scheme.k:
            raise InsufficientLengthError("context shorter than k")
        return table[ctx[:, -scheme.k:].sum(axis=1)]

    return fn


def green_flags(scheme: KgwScheme, text) -> np.ndarray:
    """Per-position green indicator for positions k..len-1 of ``text``."""
    text = np.asarray(text, dtype=np.int64).reshape(-1)
    if len(text) <= scheme.k:
        raise InsufficientLengthError(f"text of {len(text)} tokens is too short for k={scheme.k}")
    if scheme.k == 0:
        sums = np.zeros(len(text), dtype=np.int64)
    else:
        csum = np.concatenate([[0], np.cumsum(text)])
        sums = csum[scheme.k:len(text)] - csum[:len(text) - scheme.k]
        sums = np.concatenate([np.zeros(scheme.k, dtype=np.int64), sums])
    flags = np.empty(len(text) - scheme.k, dtype=bool)
    for i, t in enumerate(range(scheme.k, len(text))):
        ids = _green_ids(scheme.key, int(sums[t]), scheme.green_size, scheme.vocab_size)
        flags[i] = text[t] in ids
    return flags


def binomial_upper_tail(count: int, trials: int, p: float) -> float:
    """P(B > count) for B ~ Bin(trials, p), by direct summation of the pmf."""
    if count >= trials:
        return 0.0
    lo = max(count + 1, 0)
    if trials <= 1000:
        q = 1.0 - p
        return float(sum(math.comb(trials, j) * p ** j * q ** (trials - j) for j in range(lo, trials + 1)))
    lp, lq = math.log(p), math.log1p(-p)
    lg = math.lgamma(trials + 1)
    return float(sum(math.exp(lg - math.lgamma(j + 1) - math.lgamma(trials - j + 1) + j * lp + (trials - j) * lq)
                     for j in range(lo, trials + 1)))


@dataclass
class KgwDetection:
    green_count: int
    n_scored: int
    p_value: float
    green_fraction: float


def kgw_detect(scheme: KgwScheme, text) -> KgwDetection:
    """p = 1 - F(count) with F the Bin(len - k, gamma) CDF."""
    flags = green_flags(scheme, text)
    count = int(flags.sum())
    n = len(flags)
    return KgwDetection(green_count=count, n_scored=n, p_value=binomial_upper_tail(count, n, scheme.gamma),
                        green_fraction=count / n)


# ---------------------------------------------------------------------------
# KTH
# ---------------------------------------------------------------------------

@dataclass
class KthScheme:
    key: int
    m: int = 256
    s: int = 1
    vocab_size: int = VOCAB_SIZE
    xi: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not 1 <= self.s <= self.m:
            raise ValueError("shift count s must lie in [1, m]")
        self.xi = np.random.default_rng(self.key).random((self.m, self.vocab_size))
        self.xi.setflags(write=False)

    @property
    def shifts(self) -> list[int]:
        step = self.m // self.s
        return [i * step for i in range(self.s)]

    def to_dict(self) -> dict:
        return {"scheme": "kth", "seed": self.key, "m": self.m, "s": self.s, "vocab_size": self.vocab_size}


def kth_select_token(scheme: KthScheme, p, position: int, shift: int = 0) -> int:
    """argmax_i xi[(position + shift - 1) mod m][i] / p_i over tokens with p_i >= 1e-12.

    ``position`` is 1-based.  Ties go to the lowest id.
    """
    if position < 1:
        raise ValueError("position is 1-based")
    p = np.asarray(p, dtype=np.float64)
    row = scheme.xi[(position + shift - 1) % scheme.m]
    ratio = np.full(p.shape, -np.inf)
    ok = p >= 1e-12
    ratio[ok] = row[ok] / p[ok]
    return int(np.argmax(ratio))


def kth_choose_fn(scheme: KthScheme, shifts_per_row: np.ndarray, temperature: float = 1.0):
    """Batched decode hook for :func:`wmlab.model.decode_loop`."""
    shifts_per_row = np.asarray(shifts_per_row, dtype=np.int64)

    def choose(logits, ctx, step):
        z = logits / temperature
        p = np.exp(z - z.max(axis=-1, keepdims=True))
        p /= p.sum(axis=-1, keepdims=True)
        rows = scheme.xi[(step + shifts_per_row) % scheme.m]
        ratio = np.where(p >= 1e-12, rows / np.maximum(p, 1e-300), -np.inf)
        return np.argmax(ratio, axis=-1)

    return choose


def kth_generate(model, scheme: KthScheme, prompts, max_new: int, seed: int = 0) -> np.ndarray:
    from .model import decode_loop

    prompts = np.atleast_2d(prompts)
    rng = np.random.default_rng(seed)
    shifts = np.asarray(scheme.shifts)[rng.integers(0, scheme.s, size=len(prompts))]
    return decode_loop(model, prompts, max_new, kth_choose_fn(scheme, shifts))


def kth_cost(scheme: KthScheme, text) -> np.ndarray:
    """Alignment cost sum_t log(1 - xi[(t + tau - 1) mod m][x_t]) for every offset tau = 0..m-1."""
    text = np.asarray(text, dtype=np.int64).reshape(-1)
    if len(text) < 1:
        raise InsufficientLengthError("empty text")
    xi = np.minimum(scheme.xi, 1.0 - 1e-9)
    logs = np.log1p(-xi[:, text])  # (m, T): row r, col t -> log(1 - xi[r][x_t])
    t = np.arange(len(text))
    rows = (t[None, :] + np.arange(scheme.m)[:, None]) % scheme.m
    return logs[rows, t[None, :]].sum(axis=1)


@dataclass
class KthDetection:
    d_min: float
    p_value: float
    n_reference: int


def kth_detect(scheme: KthScheme, text, reference_null, min_reference: int = 20) -> KthDetection:
    """Minimum cost over key offsets, ranked against a reference set of null texts.

    p = (1 + #{refs with d_min <= observed}) / (T + 1); reference entries may be
    texts or precomputed d_min values.
    """
    if len(reference_null) < min_reference:
        raise ValueError(f"need at least {min_reference} reference texts, got {len(reference_null)}")
    d_obs = float(kth_cost(scheme, text).min())
    ref = np.array([r if np.isscalar(r) else kth_cost(scheme, r).min() for r in reference_null], dtype=np.float64)
    p = (1 + int(np.sum(ref <= d_obs))) / (len(ref) + 1)
    return KthDetection(d_min=d_obs, p_value=p, n_reference=len(ref))


# ---------------------------------------------------------------------------
# key material
# ---------------------------------------------------------------------------

def scheme_from_dict(d: dict):
    kind = d.get("scheme")
    if kind == "kgw":
        return KgwScheme(key=int(d["seed"]), k=int(d.get("k", 1)), gamma=float(d.get("gamma", 0.25)),
                         delta=float(d.get("delta", 2.0)), vocab_size=int(d.get("vocab_size", VOCAB_SIZE)))
    if kind == "kth":
        return KthScheme(key=int(d["seed"]), m=int(d.get("m", 256)), s=int(d.get("s", 1)),
                         vocab_size=int(d.get("vocab_size", VOCAB_SIZE)))
    raise ValueError(f"unknown scheme {kind!r}")


def load_scheme(path):
    with open(path) as fh:
        return scheme_from_dict(json.load(fh))


def save_scheme(scheme, path) -> None:
    with open(path, "w") as fh:
        json.dump(scheme.to_dict(), fh, indent=2)
