"""Learned watermark policy: frozen n-gram embedder + trainable mapping MLP.

The mapper turns the embedding of the n tokens preceding a position into a
vector of raw watermark logits in (-1, 1), one per vocabulary entry.  During
generation the bias ``delta * mapper(embedder(ctx))`` is added to the model's
logits; detection averages the raw mapper output at the realised token.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import VOCAB_SIZE
from .model import CheckpointError, load_params, save_params


class InsufficientLengthError(ValueError):
    """Text has no position with a complete n-token prefix."""


class NGramEmbedder:
    """Secret, frozen per-token embedding table; an n-gram embeds as the mean of its rows.

    The table is drawn from ``numpy.random.default_rng(xi_seed)`` as standard
    normals, so (xi_seed, vocab_size, dim) fully determines it.
    """

    def __init__(self, xi_seed: int, n: int = 1, dim: int = 64, vocab_size: int = VOCAB_SIZE):
        if n < 1:
            raise ValueError("gram length n must be >= 1")
        self.xi_seed = int(xi_seed)
        self.n = n
        self.dim = dim
        self.vocab_size = vocab_size
        table = np.random.default_rng(self.xi_seed).standard_normal((vocab_size, dim))
        self.table = table.astype(np.float32)
        self.table.setflags(write=False)

    def embed(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.shape != (self.n,):
            raise ValueError(f"expected exactly n={self.n} tokens, got shape {tokens.shape}")
        return self.embed_many(tokens[None, :])[0]

    def embed_many(self, contexts) -> np.ndarray:
        """(N, n) token contexts -> (N, dim) float32 embeddings."""
        contexts = np.asarray(contexts, dtype=np.int64)
        if contexts.ndim != 2 or contexts.shape[1] != self.n:
            raise ValueError(f"contexts must have shape (N, {self.n}), got {contexts.shape}")
        if contexts.size and (contexts.min() < 0 or contexts.max() >= self.vocab_size):
            raise IndexError("token id out of vocabulary")
        if self.n == 1:
            return self.table[contexts[:, 0]].copy()
        return np.mean(self.table[contexts], axis=1, dtype=np.float64).astype(np.float32)


class MappingMLP:
    """linear(d_e -> d_h), two residual ReLU blocks, linear(d_h -> V), tanh.

    Each residual block computes ``h + W2 relu(W1 h + b1) + b2``; a ReLU is
    applied to the stream before the output projection.
    """

    def __init__(self, params: "OrderedDict[str, Tensor]"):
        self.params = params

    @classmethod
    def init(cls, d_e: int = 64, d_h: int = 128, vocab_size: int = VOCAB_SIZE, seed: int = 0,
             dtype=np.float32, out_scale: float = 1.0) -> MappingMLP:
        rng = np.random.default_rng(seed)

        def lin(fan_in, fan_out, gain=1.0):
            w = rng.normal(0.0, gain / np.sqrt(fan_in), size=(fan_in, fan_out)).astype(dtype)
            return w, np.zeros(fan_out, dtype)

        p = OrderedDict()
        p["in.weight"], p["in.bias"] = lin(d_e, d_h)
        for b in range(2):
            p[f"res{b}.fc1.weight"], p[f"res{b}.fc1.bias"] = lin(d_h, d_h, np.sqrt(2.0))
            p[f"res{b}.fc2.weight"], p[f"res{b}.fc2.bias"] = lin(d_h, d_h, 0.5)
        p["out.weight"], p["out.bias"] = lin(d_h, vocab_size, out_scale)
        return cls(OrderedDict((k, Tensor(v, requires_grad=True, name=k)) for k, v in p.items()))

    @property
    def d_e(self) -> int:
        return self.params["in.weight"].shape[0]

    @property
    def d_h(self) -> int:
        return self.params["in.weight"].shape[1]

    @property
    def vocab_size(self) -> int:
        return self.params["out.weight"].shape[1]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def copy(self) -> MappingMLP:
        return MappingMLP(OrderedDict((k, Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k))
                                      for k, v in self.params.items()))

    def forward(self, emb) -> Tensor:
        P = self.params
        x = emb if isinstance(emb, Tensor) else Tensor(np.asarray(emb, dtype=P["in.weight"].dtype))
        h = x @ P["in.weight"] + P["in.bias"]
        for b in range(2):
            r = ad.relu(h @ P[f"res{b}.fc1.weight"] + P[f"res{b}.fc1.bias"])
            h = h + (r @ P[f"res{b}.fc2.weight"] + P[f"res{b}.fc2.bias"])
        return ad.tanh(ad.relu(h) @ P["out.weight"] + P["out.bias"])

    __call__ = forward

    def forward_np(self, emb: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.forward(emb).data


@dataclass
class DetectionResult:
    z: float
    per_position_logits: list[float]
    n_scored: int
    threshold: float | None = None
    decision: bool | None = None


@dataclass
class WatermarkPolicy:
    embedder: NGramEmbedder
    mapper: MappingMLP
    delta: float = 1.0
    epsilon: float = 0.2
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be >= 0")

    @property
    def n(self) -> int:
        return self.embedder.n

    @classmethod
    def create(cls, xi_seed: int, n: int = 1, delta: float = 1.0, epsilon: float = 0.2,
               d_e: int = 64, d_h: int = 128, vocab_size: int = VOCAB_SIZE, mapper_seed: int | None = None,
               dtype=np.float32) -> WatermarkPolicy:
        embedder = NGramEmbedder(xi_seed, n=n, dim=d_e, vocab_size=vocab_size)
        seed = xi_seed + 1 if mapper_seed is None else mapper_seed
        mapper = MappingMLP.init(d_e, d_h, vocab_size, seed=seed, dtype=dtype)
        return cls(embedder, mapper, delta=delta, epsilon=epsilon)

    # -- logits ----------------------------------------------------------------------
    def raw(self, contexts) -> Tensor:
        """Mapper outputs (N, V) for (N, n) contexts; graph recorded if grads are on."""
        return self.mapper(self.embedder.embed_many(contexts))

    def raw_np(self, contexts) -> np.ndarray:
        with ad.no_grad():
            return self.raw(contexts).data

    def watermark_logits(self, context) -> np.ndarray:
        """delta * M(E(context)) for a single n-token context; values in (-delta, delta)."""
        context = np.asarray(context, dtype=np.int64)
        if context.ndim != 1 or len(context) < self.n:
            raise InsufficientLengthError(f"context needs at least n={self.n} tokens")
        return self.delta * self.raw_np(context[None, -self.n:])[0]

    def bias_fn(self, sign: float = 1.0):
        """Generation hook: (B, t) context -> (B, V) additive bias sign * delta * M(E(last n))."""
        n = self.n
        scale = sign * self.delta

        def fn(ctx):
            return scale * self.raw_np(ctx[:, -n:]).astype(np.float64)

        return fn

    # -- detection -------------------------------------------------------------------
    def detect(self, text, threshold: float | None = None) -> DetectionResult:
        return detect_z(self, text, threshold)

    def score_many(self, texts) -> np.ndarray:
        return np.array([detect_z(self, t).z for t in texts])

    # -- checkpoints -----------------------------------------------------------------
    def save(self, directory) -> None:
        manifest = {
            "kind": "watermark_policy",
            "xi_seed": self.embedder.xi_seed,
            "n": self.n,
            "delta": self.delta,
            "epsilon": self.epsilon,
            "d_e": self.embedder.dim,
            "d_h": self.mapper.d_h,
            "vocab_size": self.embedder.vocab_size,
        }
        manifest.update(self.meta)
        save_params(directory, OrderedDict((k, v.data) for k, v in self.mapper.params.items()), manifest)

    @classmethod
    def load(cls, directory) -> WatermarkPolicy:
        manifest, arrays = load_params(directory)
        if manifest.get("kind") != "watermark_policy":
            raise CheckpointError(f"{directory} is not a watermark_policy checkpoint")
        embedder = NGramEmbedder(manifest["xi_seed"], n=manifest["n"], dim=manifest["d_e"],
                                 vocab_size=manifest.get("vocab_size", VOCAB_SIZE))
        mapper = MappingMLP(OrderedDict((k, Tensor(v, requires_grad=True, name=k)) for k, v in arrays.items()))
        return cls(embedder, mapper, delta=manifest["delta"], epsilon=manifest["epsilon"])


def contexts_and_targets(tokens, n: int) -> tuple[np.ndarray, np.ndarray]:
    """For a (B, L) block: the (B*(L-n), n) prefixes x[j-n:j] and targets x[j], j = n..L-1."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    B, L = tokens.shape
    if L <= n:
        raise InsufficientLengthError(f"sequence length {L} must exceed gram length n={n}")
    windows = np.lib.stride_tricks.sliding_window_view(tokens, n, axis=1)[:, : L - n]
    return windows.reshape(-1, n), tokens[:, n:].reshape(-1)


def norm_loss(outputs: Tensor, epsilon: float, lam1: float = 1.0) -> Tensor:
    """Three-term regulariser on raw mapper outputs of shape (N, V).

    sum_i |mean_j out_ij| + sum_j |mean_i out_ij| + lam1 * sum_ij max(0, eps - |out_ij|)
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    if outputs.ndim != 2 or outputs.shape[0] < 1:
        raise ValueError(f"outputs must be (N>=1, V), got {outputs.shape}")
    row_term = ad.abs_(outputs.mean(axis=1)).sum()
    col_term = ad.abs_(outputs.mean(axis=0)).sum()
    hinge = ad.relu(epsilon - ad.abs_(outputs)).sum()
    return row_term + col_term + lam1 * hinge


def detect_z(policy: WatermarkPolicy, text, threshold: float | None = None) -> DetectionResult:
    """Mean raw mapper output at each realised token that has a full n-token prefix."""
    text = np.asarray(text, dtype=np.int64).reshape(-1)
    n = policy.n
    if len(text) <= n:
        raise InsufficientLengthError(
            f"insufficient length: text has {len(text)} tokens, need more than n={n}")
    ctx, targets = contexts_and_targets(text[None, :], n)
    raw = policy.raw_np(ctx)
    per_pos = raw[np.arange(len(targets)), targets].astype(np.float64)
    z = float(per_pos.mean())
    decision = None if threshold is None else bool(z > threshold)
    return DetectionResult(z=z, per_position_logits=per_pos.tolist(), n_scored=len(targets),
                           threshold=threshold, decision=decision)


def calibrate_threshold(policy: WatermarkPolicy | None, null_texts, target_fpr: float,
                        min_samples: int = 100) -> float:
    """Empirical (1 - target_fpr) quantile of null z-scores ('higher' interpolation).

    ``null_texts`` may be token arrays (scored with ``policy``) or, when
    ``policy`` is None, precomputed scores.
    """
    if not 0 < target_fpr < 1:
        raise ValueError("target_fpr must lie in (0, 1)")
    if len(null_texts) < min_samples:
        raise ValueError(f"need at least {min_samples} null samples, got {len(null_texts)}")
    scores = np.asarray(null_texts, dtype=np.float64) if policy is None else policy.score_many(null_texts)
    return float(np.quantile(scores, 1.0 - target_fpr, method="higher"))
