"""Finite-difference verification of the autodiff primitives.

``run_suite`` builds small random networks that together touch every
differentiable primitive, evaluates them in float64, and compares the
reverse-mode gradient of every leaf with central differences.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PRIMITIVES = ("add", "sub", "mul", "div", "neg", "relu", "tanh", "exp", "log", "abs", "matmul",
              "reshape", "transpose", "getitem", "concat", "sum", "mean", "softmax", "log_softmax",
              "layer_norm", "embedding", "gather_last", "kl_from_logits", "cross_entropy")


@dataclass
class GradcheckResult:
    name: str
    max_rel_error: float
    n_checked: int
    passed: bool


def numeric_grad(fn: Callable[[], Tensor], leaf: Tensor, h: float) -> np.ndarray:
    grad = np.zeros_like(leaf.data, dtype=np.float64)
    flat = leaf.data.reshape(-1)
    g = grad.reshape(-1)
    with ad.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn().item())
            flat[i] = orig - h
            down = float(fn().item())
            flat[i] = orig
            g[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ||a - n|| / max(||a||, ||n||) over one gradient buffer."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < 1e-12:
        return float(np.linalg.norm(a - n))
    return float(np.linalg.norm(a - n) / scale)


def check(fn: Callable[[], Tensor], leaves: list[Tensor], h: float = 1e-3, tol: float = 1e-6,
          name: str = "fn") -> GradcheckResult:
    for leaf in leaves:
        leaf.grad = None
    out = fn()
    out.backward()
    worst = 0.0
    count = 0
    for leaf in leaves:
        num = numeric_grad(fn, leaf, h)
        worst = max(worst, relative_error(leaf.grad, num))
        count += leaf.size
    return GradcheckResult(name, worst, count, worst < tol)


def _away_from_zero(rng, shape, margin=0.2, scale=1.0):
    x = rng.normal(0.0, scale, size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def random_network(seed: int):
    """A scalar-valued random network exercising every primitive; returns (fn, leaves)."""
    rng = np.random.default_rng(seed)
    B, T, D, V = 2, int(rng.integers(2, 4)), int(rng.integers(4, 7)), int(rng.integers(4, 7))
    f64 = np.float64
    emb = Tensor(rng.normal(0, 2.0, (V, D)).astype(f64), requires_grad=True, name="emb")
    w1 = Tensor(rng.normal(0, 0.5, (D, D)).astype(f64), requires_grad=True, name="w1")
    b1 = Tensor(_away_from_zero(rng, (D,), 0.3, 0.5), requires_grad=True, name="b1")
    ln_w = Tensor(1.0 + rng.normal(0, 0.1, (D,)), requires_grad=True, name="ln_w")
    ln_b = Tensor(rng.normal(0, 0.1, (D,)), requires_grad=True, name="ln_b")
    w2 = Tensor(rng.normal(0, 0.5, (2 * D, V)).astype(f64), requires_grad=True, name="w2")
    pos = Tensor(rng.uniform(1.5, 3.0, (T, V)), requires_grad=True, name="pos")
    ids = rng.integers(0, V, size=(B, T))
    targets = rng.integers(0, V, size=(B, T))
    ref = Tensor(rng.normal(0, 1.0, (B, T, V)), requires_grad=True, name="ref")

    def fn():
        x = ad.embedding(emb, ids)                                  # (B,T,D)
        h = ad.layer_norm(x, ln_w, ln_b)
        a = ad.relu(h @ w1 + b1)
        t = ad.tanh(ad.neg(h) * 0.7)
        hc = ad.concat([a, t], axis=-1)                             # (B,T,2D)
        logits = hc @ w2                                            # (B,T,V)
        logits = logits - ad.abs_(logits) * 0.1
        logits = logits / pos                                       # broadcast div
        sm = ad.softmax(logits, axis=-1)
        ls = ad.log_softmax(logits)
        tr = ad.transpose(ls, (0, 2, 1)).reshape(B * V, T)          # reshape + transpose
        part = tr[1:, :].mean()                                     # getitem + mean
        picked = ad.gather_last(ls, targets).sum()
        lg = ad.log(ad.exp(sm * 0.5) + 1.0).sum(axis=-1).mean()
        kl = ad.kl_from_logits(ref, logits)
        ce = ad.cross_entropy(logits, targets)
        return ce + kl + 0.3 * lg - 0.1 * picked + part

    return fn, [emb, w1, b1, ln_w, ln_b, w2, pos, ref]


def run_suite(count: int = 20, h: float = 1e-3, tol: float = 1e-6, seed: int = 0) -> list[GradcheckResult]:
    prev = ad.set_check_finite(True)
    try:
        results = []
        for i in range(count):
            fn, leaves = random_network(seed + i)
            results.append(check(fn, leaves, h=h, tol=tol, name=f"network[{seed + i}]"))
        return results
    finally:
        ad.set_check_finite(prev)
