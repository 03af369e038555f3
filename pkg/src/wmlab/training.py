"""Watermark training: co-adaptive policy training with perturbation-aware
student updates, teacher pretraining, and the decoding-watermark distillation
baselines.

Position convention: logits at position i predict token i+1, and the watermark
for that prediction is computed from the n tokens ending at i.  For a block of
length L the scored positions are i = n-1 .. L-2, i.e. L-n predictions, the
same positions the detector scores.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .data import Corpus, batch_windows, sample_prompts
from .model import CausalLM, sample_with_bias
from .optim import AdamW, clip_grad_norm, cosine_lr, global_norm
from .policy import InsufficientLengthError, WatermarkPolicy, contexts_and_targets, norm_loss

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    """A loss or gradient became non-finite; the offending batch was dumped."""

    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class TrainConfig:
    lam1: float = 1.0
    lam2: float = 1.0
    alpha: float = 0.1
    beta: float = 5.0
    delta: float = 1.0
    epsilon: float = 0.2
    n: int = 1
    steps: int = 2000
    batch: int = 4
    seq_len: int = 256
    lr: float = 3e-4
    mapper_lr: float | None = None
    warmup_frac: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0
    xi_seed: int = 1234
    anti_refresh: int = 10
    anti_len: int | None = None
    anti_batch: int = 4
    anti_prompt_len: int = 8
    d_e: int = 64
    d_h: int = 128

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.beta > 0 and self.alpha <= 0:
            raise ValueError("beta > 0 requires alpha > 0")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.seq_len <= self.n:
            raise ValueError("seq_len must exceed n")
        if self.steps < 0 or self.batch < 1 or self.anti_refresh < 1:
            raise ValueError("steps >= 0, batch >= 1 and anti_refresh >= 1 required")
        if self.epsilon < 0 or self.delta < 0:
            raise ValueError("epsilon and delta must be >= 0")

    @property
    def effective_mapper_lr(self) -> float:
        return self.lr if self.mapper_lr is None else self.mapper_lr

    @property
    def effective_anti_len(self) -> int:
        return self.seq_len // 2 if self.anti_len is None else self.anti_len

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> TrainConfig:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    path: str | None = None

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")

    def series(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.records if r.get(key) is not None], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def read(cls, path) -> TrainLog:
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _scored(tokens, n: int) -> np.ndarray:
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    if tokens.shape[1] <= n:
        raise InsufficientLengthError(f"block length {tokens.shape[1]} must exceed n={n}")
    return tokens


def teacher_logits(teacher: CausalLM, tokens, n: int) -> np.ndarray:
    """Frozen-teacher logits at the scored positions, shape (B, L-n, V)."""
    tokens = _scored(tokens, n)
    return teacher.logits_np(tokens)[:, n - 1:-1]


def watermark_kl(teacher: CausalLM | np.ndarray, policy: WatermarkPolicy, student: CausalLM | np.ndarray,
                 batch, sign: float = 1.0, wrt: str = "student") -> Tensor:
    """Mean KL(softmax(teacher + sign * delta * M(E(prefix))) || softmax(student)) over scored positions.

    ``teacher`` and ``student`` may be models or precomputed (B, L-n, V) logit
    arrays.  ``wrt`` selects which side records a graph: "student", "mapper",
    "both" or "none"; the teacher is always a constant.
    """
    n = policy.n
    tokens = _scored(batch, n)
    B, L = tokens.shape
    t_logits = teacher if isinstance(teacher, np.ndarray) else teacher_logits(teacher, tokens, n)
    ctx, _ = contexts_and_targets(tokens, n)

    if wrt in ("mapper", "both"):
        raw = policy.raw(ctx)
    else:
        raw = Tensor(policy.raw_np(ctx))
    target = Tensor(t_logits.astype(raw.dtype)) + raw.reshape(B, L - n, -1) * (sign * policy.delta)

    if isinstance(student, np.ndarray):
        s_logits = Tensor(student)
    elif wrt in ("student", "both"):
        s_logits = student(tokens)[:, n - 1:L - 1]
    else:
        s_logits = Tensor(student.logits_np(tokens)[:, n - 1:L - 1])
    return ad.kl_from_logits(target, s_logits)


def sim_loss(teacher, policy: WatermarkPolicy, student, batch, wrt: str = "student") -> Tensor:
    return watermark_kl(teacher, policy, student, batch, sign=1.0, wrt=wrt)


def anti_loss(teacher, policy: WatermarkPolicy, student, anti_batch, wrt: str = "student") -> Tensor:
    """Forgetting loss: the same KL but towards the sign-inverted watermark."""
    return watermark_kl(teacher, policy, student, anti_batch, sign=-1.0, wrt=wrt)


def mapping_objective(sim, norm, lam2: float = 1.0):
    """sim + lam2 * norm (works for Tensors and plain floats)."""
    return sim + norm * lam2


def gen_anti_batch(teacher: CausalLM, policy: WatermarkPolicy, prompts, length: int, seed: int,
                   temperature: float = 1.0) -> np.ndarray:
    """Teacher samples under the inverted watermark bias; returns prompt + continuation."""
    prompts = np.atleast_2d(np.asarray(prompts, dtype=np.int64))
    cont = sample_with_bias(teacher, prompts, length, temperature=temperature,
                            bias_fn=policy.bias_fn(sign=-1.0), seed=seed)
    return np.concatenate([prompts, cont], axis=1)


# ---------------------------------------------------------------------------
# update steps
# ---------------------------------------------------------------------------

def _grads_of(params) -> list[np.ndarray]:
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def _zero(params) -> None:
    for p in params:
        p.grad = None


def _backward_grads(loss: Tensor, params) -> list[np.ndarray]:
    _zero(params)
    loss.backward()
    grads = [g.copy() for g in _grads_of(params)]
    _zero(params)
    return grads


def fpl_step(student: CausalLM, teacher: CausalLM, policy: WatermarkPolicy, wm_batch, anti_batch,
             cfg: TrainConfig, opt: AdamW, lr: float, teacher_wm: np.ndarray | None = None,
             teacher_anti: np.ndarray | None = None, apply_update: bool = True) -> dict:
    """One student update on L_sim + beta * [L_anti(theta) - L_anti(theta - alpha * g/|g|)].

    The second-order term is treated as constant, so the gradient is
    grad L_sim + beta * (grad L_anti(theta) - grad L_anti(theta - alpha g_hat)).
    The perturbation is undone by restoring saved arrays.  With beta = 0 the
    anti passes are skipped and this is a plain L_sim step.
    """
    params = student.parameters()
    t_wm = teacher_logits(teacher, wm_batch, policy.n) if teacher_wm is None else teacher_wm
    l_sim = sim_loss(t_wm, policy, student, wm_batch, wrt="student")
    grads = _backward_grads(l_sim, params)
    rec = {"l_sim": float(l_sim.item()), "l_anti_pre": None, "l_anti_post": None, "gap": None,
           "perturbation_skipped": False}

    if cfg.beta > 0:
        t_anti = teacher_logits(teacher, anti_batch, policy.n) if teacher_anti is None else teacher_anti
        l_pre = anti_loss(t_anti, policy, student, anti_batch, wrt="student")
        g_pre = _backward_grads(l_pre, params)
        rec["l_anti_pre"] = float(l_pre.item())
        g_norm = global_norm(g_pre)
        rec["anti_grad_norm"] = g_norm
        if g_norm < 1e-12:
            rec["perturbation_skipped"] = True
            log.info("anti-gradient norm %.3e below 1e-12; perturbation term skipped", g_norm)
        else:
            saved = [p.data.copy() for p in params]
            step = cfg.alpha / g_norm
            for p, g in zip(params, g_pre):
                p.data -= (step * g).astype(p.data.dtype)
            try:
                l_post = anti_loss(t_anti, policy, student, anti_batch, wrt="student")
                g_post = _backward_grads(l_post, params)
            finally:
                for p, s in zip(params, saved):
                    p.data = s
            rec["l_anti_post"] = float(l_post.item())
            rec["gap"] = rec["l_anti_pre"] - rec["l_anti_post"]
            beta = np.float32(cfg.beta)
            for g, a, b in zip(grads, g_pre, g_post):
                g += beta * (a - b)

    grads, norm = clip_grad_norm(grads, cfg.grad_clip)
    rec["grad_norm"] = norm
    if apply_update and lr > 0:
        opt.step(grads, lr=lr)
    return rec


def mapper_step(teacher_wm: np.ndarray, student: CausalLM, policy: WatermarkPolicy, wm_batch,
                cfg: TrainConfig, opt: AdamW, lr: float) -> dict:
    """Mapper update on L_sim + lam2 * L_norm with the (already updated) student held fixed."""
    n = policy.n
    tokens = _scored(wm_batch, n)
    B, L = tokens.shape
    params = policy.mapper.parameters()
    ctx, _ = contexts_and_targets(tokens, n)
    raw = policy.raw(ctx)
    target = Tensor(teacher_wm.astype(raw.dtype)) + raw.reshape(B, L - n, -1) * policy.delta
    s_logits = Tensor(student.logits_np(tokens)[:, n - 1:L - 1])
    l_sim = ad.kl_from_logits(target, s_logits)
    l_norm = norm_loss(raw, cfg.epsilon, cfg.lam1)
    l_m = mapping_objective(l_sim, l_norm, cfg.lam2)
    grads = _backward_grads(l_m, params)
    grads, norm = clip_grad_norm(grads, cfg.grad_clip)
    if lr > 0:
        opt.step(grads, lr=lr)
    return {"l_sim_mapper": float(l_sim.item()), "l_norm": float(l_norm.item()),
            "l_mapper": float(l_m.item()), "mapper_grad_norm": norm}


def _dump_batch(dump_dir: str | None, step: int, **arrays) -> str | None:
    if not dump_dir:
        return None
    os.makedirs(dump_dir, exist_ok=True)
    path = os.path.join(dump_dir, f"nonfinite_step{step}.npz")
    np.savez(path, **{k: v for k, v in arrays.items() if v is not None})
    return path


def train_cawp(teacher: CausalLM, student: CausalLM, policy: WatermarkPolicy, corpus: Corpus,
               cfg: TrainConfig, log_path: str | None = None, dump_dir: str | None = None,
               callback: Callable[[int, dict], None] | None = None) -> tuple[CausalLM, WatermarkPolicy, TrainLog]:
    """Alternating training: student step (with perturbation-aware term), then mapper step.

    Anti-watermarked batches are sampled from the frozen teacher with the
    current mapper every ``cfg.anti_refresh`` steps.
    """
    if any(p.requires_grad for p in teacher.parameters()):
        teacher.freeze()
    train_log = TrainLog(path=log_path)
    if log_path and os.path.exists(log_path):
        os.remove(log_path)
    if cfg.steps == 0:
        return student, policy, train_log

    opt_s = AdamW(student.parameters(), lr=cfg.lr, betas=(0.9, 0.999), weight_decay=0.0)
    opt_m = AdamW(policy.mapper.parameters(), lr=cfg.effective_mapper_lr, betas=(0.9, 0.999), weight_decay=0.0)
    batches = batch_windows(corpus, "train", cfg.seq_len, cfg.batch, cfg.seed, epochs=None)
    anti_batch = teacher_anti = None
    t0 = time.time()

    for step in range(cfg.steps):
        wm_batch = next(batches)
        lr_s = cosine_lr(step, cfg.steps, cfg.lr, cfg.warmup_frac)
        lr_m = cosine_lr(step, cfg.steps, cfg.effective_mapper_lr, cfg.warmup_frac)
        try:
            if cfg.beta > 0 and step % cfg.anti_refresh == 0:
                prompts = sample_prompts(corpus, "train", cfg.anti_batch, cfg.anti_prompt_len,
                                         seed=cfg.seed * 1_000_003 + step)
                anti_batch = gen_anti_batch(teacher, policy, prompts, cfg.effective_anti_len,
                                            seed=cfg.seed * 1_000_003 + step + 1)
                teacher_anti = teacher_logits(teacher, anti_batch, policy.n)
            teacher_wm = teacher_logits(teacher, wm_batch, policy.n)
            rec = fpl_step(student, teacher, policy, wm_batch, anti_batch, cfg, opt_s, lr_s,
                           teacher_wm=teacher_wm, teacher_anti=teacher_anti)
            rec.update(mapper_step(teacher_wm, student, policy, wm_batch, cfg, opt_m, lr_m))
        except (NonFiniteError, FloatingPointError) as exc:
            path = _dump_batch(dump_dir, step, wm_batch=wm_batch, anti_batch=anti_batch)
            raise TrainingDivergedError(f"non-finite value at step {step}: {exc}", path) from exc
        values = [v for v in rec.values() if isinstance(v, float)]
        if not all(math.isfinite(v) for v in values):
            path = _dump_batch(dump_dir, step, wm_batch=wm_batch, anti_batch=anti_batch)
            raise TrainingDivergedError(f"non-finite loss at step {step}", path)
        rec.update(step=step, lr=lr_s, mapper_lr=lr_m, elapsed=time.time() - t0)
        train_log.append(rec)
        if callback is not None:
            callback(step, rec)
    return student, policy, train_log


# ---------------------------------------------------------------------------
# teacher pretraining and distillation baselines
# ---------------------------------------------------------------------------

def lm_loss(model: CausalLM, tokens) -> Tensor:
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    logits = model(tokens[:, :-1])
    return ad.cross_entropy(logits, tokens[:, 1:])


def evaluate_lm(model: CausalLM, corpus: Corpus, split: str, seq_len: int, batch: int = 8,
                max_batches: int = 20, seed: int = 0) -> float:
    losses = []
    for i, blk in enumerate(batch_windows(corpus, split, seq_len + 1, batch, seed)):
        if i >= max_batches:
            break
        logits = model.logits_np(blk[:, :-1]).astype(np.float64)
        ls = logits - logits.max(-1, keepdims=True)
        ls -= np.log(np.exp(ls).sum(-1, keepdims=True))
        losses.append(-np.take_along_axis(ls, blk[:, 1:, None], -1).mean())
    return float(np.mean(losses))


def train_lm(model: CausalLM, batches, steps: int, lr: float, warmup_frac: float = 0.1,
             grad_clip: float = 1.0, weight_decay: float = 0.0, log_every: int = 0,
             callback: Callable[[int, dict], None] | None = None, constant_lr: bool = False) -> list[float]:
    """Cross-entropy AdamW training on an iterator of (B, T+1) token blocks.

    Uses warmup plus cosine decay unless ``constant_lr`` is set.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    opt = AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    params = model.parameters()
    losses = []
    for step in range(steps):
        blk = next(batches)
        loss = lm_loss(model, blk)
        grads = _backward_grads(loss, params)
        grads, norm = clip_grad_norm(grads, grad_clip)
        cur = lr if constant_lr else cosine_lr(step, steps, lr, warmup_frac)
        if cur > 0:
            opt.step(grads, lr=cur)
        losses.append(float(loss.item()))
        if not math.isfinite(losses[-1]):
            raise TrainingDivergedError(f"non-finite language-model loss at step {step}")
        if log_every and step % log_every == 0:
            log.info("step %d loss %.4f lr %.2e", step, losses[-1], cur)
        if callback is not None:
            callback(step, {"loss": losses[-1], "grad_norm": norm, "lr": cur})
    return losses


def pretrain_teacher(corpus: Corpus, config, steps: int = 3000, batch: int = 8, seq_len: int = 256,
                     lr: float = 1e-3, seed: int = 0, log_every: int = 0) -> tuple[CausalLM, list[float]]:
    model = CausalLM.init(config, seed=seed)
    batches = batch_windows(corpus, "train", seq_len + 1, batch, seed, epochs=None)
    losses = train_lm(model, batches, steps, lr, log_every=log_every)
    return model, losses


def distill_sampling(student: CausalLM, wm_texts, steps: int, batch: int = 8, lr: float = 3e-4,
                     seed: int = 0, warmup_frac: float = 0.1, grad_clip: float = 1.0) -> tuple[CausalLM, list[float]]:
    """Cross-entropy fine-tuning on decoding-watermarked samples (N, T)."""
    texts = np.asarray(wm_texts, dtype=np.int64)
    if texts.size == 0 or texts.ndim != 2 or texts.shape[1] < 2:
        raise ValueError("distill_sampling needs a non-empty (N, T>=2) array of texts")
    rng = np.random.default_rng(seed)

    def gen():
        while True:
            order = rng.permutation(len(texts))
            for lo in range(0, max(1, len(order) - batch + 1), batch):
                yield texts[order[lo:lo + batch]]

    losses = train_lm(student, gen(), steps, lr, warmup_frac=warmup_frac, grad_clip=grad_clip)
    return student, losses


def kgw_target_logits(teacher_logits_arr: np.ndarray, tokens: np.ndarray, scheme) -> np.ndarray:
    """log p + delta * green mask for every position of a (B, T) block, context = last k tokens."""
    from .baselines import kgw_green_table

    table = kgw_green_table(scheme).astype(teacher_logits_arr.dtype) * scheme.delta
    B, T = tokens.shape
    if scheme.k == 0:
        return teacher_logits_arr + table[0]
    csum = np.concatenate([np.zeros((B, 1), np.int64), np.cumsum(tokens, axis=1)], axis=1)
    sums = np.zeros((B, T), np.int64)
    hi = np.arange(T) + 1
    lo = np.maximum(hi - scheme.k, 0)
    sums[:] = csum[:, hi] - csum[:, lo]
    out = teacher_logits_arr + table[sums]
    # positions with fewer than k previous tokens carry no watermark
    if scheme.k > 1:
        out[:, :scheme.k - 1] = teacher_logits_arr[:, :scheme.k - 1]
    return out


def distill_logit(student: CausalLM, teacher: CausalLM, scheme, corpus: Corpus, steps: int,
                  batch: int = 8, seq_len: int = 256, lr: float = 3e-4, seed: int = 0,
                  warmup_frac: float = 0.1, grad_clip: float = 1.0) -> tuple[CausalLM, list[float]]:
    """KL distillation towards the KGW-watermarked teacher distribution on raw prefixes."""
    from .baselines import KgwScheme

    if not isinstance(scheme, KgwScheme):
        raise TypeError("logit distillation needs a smooth target distribution; only KGW provides one")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    opt = AdamW(student.parameters(), lr=lr)
    params = student.parameters()
    batches = batch_windows(corpus, "train", seq_len, batch, seed, epochs=None)
    losses = []
    for step in range(steps):
        blk = next(batches)
        target = kgw_target_logits(teacher.logits_np(blk), blk, scheme)
        loss = ad.kl_from_logits(Tensor(target), student(blk))
        grads = _backward_grads(loss, params)
        grads, _ = clip_grad_norm(grads, grad_clip)
        cur = cosine_lr(step, steps, lr, warmup_frac)
        if cur > 0:
            opt.step(grads, lr=cur)
        losses.append(float(loss.item()))
    return student, losses
