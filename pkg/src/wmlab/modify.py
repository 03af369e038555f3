"""User-side model modifications: SLERP merge, RTN quantization, magnitude
pruning and raw-text fine-tuning.  Every function returns a new model and
leaves its inputs untouched."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .data import Corpus, batch_windows
from .model import CausalLM

MODIFICATION_KINDS = ("merge", "quantize", "prune", "finetune")
FINETUNE_GRID = (300, 600, 900, 1200, 1500)


@dataclass(frozen=True)
class ModificationSpec:
    kind: str
    t: float | None = None
    bits: int | None = None
    sparsity: float | None = None
    steps: int | None = None
    split: str | None = None
    lr: float | None = None
    seed: int = 0

    _REQUIRED = {"merge": ("t",), "quantize": ("bits",), "prune": ("sparsity",), "finetune": ("steps",)}
    _OWNED = {"t": "merge", "bits": "quantize", "sparsity": "prune", "steps": "finetune",
              "split": "finetune", "lr": "finetune"}

    def __post_init__(self):
        if self.kind not in MODIFICATION_KINDS:
            raise ValueError(f"unknown modification kind {self.kind!r}")
        for name in self._REQUIRED[self.kind]:
            if getattr(self, name) is None:
                raise ValueError(f"{self.kind} requires {name!r}")
        for name, owner in self._OWNED.items():
            if owner != self.kind and getattr(self, name) is not None:
                raise ValueError(f"{name!r} belongs to {owner}, not {self.kind}")
        if self.kind == "merge" and not 0.0 <= self.t <= 1.0:
            raise ValueError("merge t must lie in [0, 1]")
        if self.kind == "quantize" and self.bits not in (4, 8):
            raise ValueError("bits must be 4 or 8")
        if self.kind == "prune" and not 0.0 <= self.sparsity <= 1.0:
            raise ValueError("sparsity must lie in [0, 1]")
        if self.kind == "finetune" and self.steps < 0:
            raise ValueError("finetune steps must be >= 0")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> ModificationSpec:
        return cls(**d)

    def spec_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]

    def label(self) -> str:
        value = {"merge": self.t, "quantize": self.bits, "prune": self.sparsity, "finetune": self.steps}[self.kind]
        return f"{self.kind}={value}"


def _check_same_arch(a: CausalLM, b: CausalLM) -> None:
    if a.config != b.config or list(a.params) != list(b.params):
        raise ValueError("models have different architectures")
    for k in a.params:
        if a.params[k].shape != b.params[k].shape:
            raise ValueError(f"parameter {k} has shape {a.params[k].shape} vs {b.params[k].shape}")


def slerp(v0: np.ndarray, v1: np.ndarray, t: float, threshold: float = 1e-6) -> np.ndarray:
    """Spherical interpolation of two arrays viewed as flat vectors.

    sin((1-t) W)/sin W * v0 + sin(t W)/sin W * v1 with W the angle between them;
    falls back to linear interpolation when W < threshold or a vector is zero.
    """
    a = np.asarray(v0, dtype=np.float64)
    b = np.asarray(v1, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return (1.0 - t) * a + t * b
    cos = float(np.clip(np.sum(a * b) / (na * nb), -1.0, 1.0))
    omega = float(np.arccos(cos))
    if omega < threshold:
        return (1.0 - t) * a + t * b
    s = np.sin(omega)
    return (np.sin((1.0 - t) * omega) / s) * a + (np.sin(t * omega) / s) * b


def slerp_merge(a: CausalLM, b: CausalLM, t: float) -> CausalLM:
    """Per-tensor SLERP of two models; t=0 returns a copy of a, t=1 a copy of b."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    _check_same_arch(a, b)
    if t == 0.0:
        return a.copy()
    if t == 1.0:
        return b.copy()
    out = a.copy()
    for k, p in out.params.items():
        p.data = slerp(a.params[k].data, b.params[k].data, t).astype(p.dtype)
    return out


def rtn_quantize_array(w: np.ndarray, bits: int) -> tuple[np.ndarray, float]:
    """Symmetric round-to-nearest with scale = max|w| / (2^(bits-1) - 1)."""
    levels = 2 ** (bits - 1) - 1
    w64 = np.asarray(w, dtype=np.float64)
    scale = float(np.max(np.abs(w64))) / levels if w64.size else 0.0
    if scale == 0.0:
        return np.array(w, copy=True), 0.0
    q = np.clip(np.round(w64 / scale), -levels, levels)
    return (q * scale).astype(w.dtype), scale


def is_matrix_weight(name: str, arr: np.ndarray) -> bool:
    return arr.ndim == 2


def quantize_rtn(model: CausalLM, bits: int) -> CausalLM:
    """Per-tensor symmetric RTN on every weight matrix (embeddings and output
    projection included); 1-d biases and layer-norm parameters stay in float."""
    if bits not in (4, 8):
        raise ValueError("bits must be 4 or 8")
    out = model.copy()
    for name, p in out.params.items():
        if is_matrix_weight(name, p.data):
            p.data, _ = rtn_quantize_array(p.data, bits)
    return out


def is_prunable(name: str, arr: np.ndarray) -> bool:
    return arr.ndim == 2 and name not in ("tok_emb", "pos_emb")


def prune_magnitude(model: CausalLM, sparsity: float) -> CausalLM:
    """Zero the globally smallest-|w| fraction of prunable weights.

    Prunable means 2-d weight matrices other than the token and position
    embeddings; layer-norm parameters and biases are exempt.  Exactly
    round(sparsity * count) entries are zeroed (ties by position).
    """
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError("sparsity must lie in [0, 1]")
    out = model.copy()
    names = [k for k, p in out.params.items() if is_prunable(k, p.data)]
    if not names:
        return out
    flat = np.concatenate([np.abs(out.params[k].data).reshape(-1) for k in names])
    k_zero = int(round(sparsity * flat.size))
    if k_zero == 0:
        return out
    order = np.argsort(flat, kind="stable")[:k_zero]
    mask = np.ones(flat.size, dtype=bool)
    mask[order] = False
    offset = 0
    for k in names:
        p = out.params[k]
        size = p.data.size
        p.data = np.where(mask[offset:offset + size].reshape(p.shape), p.data, 0).astype(p.dtype)
        offset += size
    return out


def sparsity_of(model: CausalLM) -> float:
    arrs = [p.data for k, p in model.params.items() if is_prunable(k, p.data)]
    total = sum(a.size for a in arrs)
    return sum(int(np.sum(a == 0)) for a in arrs) / max(total, 1)


def finetune_raw(model: CausalLM, corpus: Corpus, steps: int, lr: float = 3e-4, seed: int = 0,
                 split: str = "heldout", batch: int = 4, seq_len: int = 256,
                 snapshots: tuple[int, ...] = ()) -> tuple[CausalLM, dict[int, CausalLM], list[float]]:
    """Constant-lr AdamW cross-entropy fine-tuning on a raw-text split.

    A constant learning rate makes the model after s steps independent of the
    total step count, so ``snapshots`` returns copies at intermediate steps
    that equal separate shorter runs bit for bit.
    """
    from .training import train_lm

    if steps < 0:
        raise ValueError("steps must be >= 0")
    if len(corpus.split(split)) == 0:
        raise ValueError(f"split {split!r} is empty")
    out = model.copy()
    for p in out.parameters():
        p.requires_grad = True
    taken: dict[int, CausalLM] = {}
    if 0 in snapshots:
        taken[0] = out.copy()
    if steps == 0:
        return out, taken, []
    batches = batch_windows(corpus, split, seq_len + 1, batch, seed, epochs=None)
    wanted = set(snapshots)

    def grab(step, rec):
        if step + 1 in wanted:
            taken[step + 1] = out.copy()

    losses = train_lm(out, batches, steps, lr, callback=grab, constant_lr=True)
    return out, taken, losses


def apply_modification(model: CausalLM, spec: ModificationSpec, base: CausalLM | None = None,
                       corpus: Corpus | None = None) -> CausalLM:
    if spec.kind == "merge":
        if base is None:
            raise ValueError("merge needs the unwatermarked base model")
        return slerp_merge(model, base, spec.t)
    if spec.kind == "quantize":
        return quantize_rtn(model, spec.bits)
    if spec.kind == "prune":
        return prune_magnitude(model, spec.sparsity)
    if corpus is None:
        raise ValueError("finetune needs a corpus")
    lr = 3e-4 if spec.lr is None else spec.lr
    out, _, _ = finetune_raw(model, corpus, spec.steps, lr=lr, seed=spec.seed, split=spec.split or "heldout")
    return out


def write_modified(out_root: str, run: str, spec: ModificationSpec, model: CausalLM) -> str:
    """Save under <out_root>/<run>/<spec-hash>/ with the spec in the manifest."""
    path = os.path.join(out_root, run, spec.spec_hash())
    model.save(path, extra={"modification": spec.to_dict()})
    return path
