"""A small pre-LayerNorm decoder-only transformer.

Two forward paths share the same parameters:

* :meth:`CausalLM.forward` builds an autodiff graph (training);
* :meth:`CausalLM.logits_np` / :class:`KVCache` run plain numpy with cached
  keys and values (scoring and generation).  They agree with the graph path up
  to float rounding.
"""
from __future__ import annotations

import json
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import VOCAB_SIZE

CHECKPOINT_FORMAT_VERSION = 1


class SequenceTooLongError(ValueError):
    pass


class CheckpointError(OSError):
    pass


@dataclass
class LMConfig:
    vocab_size: int = VOCAB_SIZE
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    max_seq: int = 256
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.dropout != 0.0:
            raise ValueError("dropout is not supported; use 0.0")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


class CausalLM:
    def __init__(self, config: LMConfig, params: "OrderedDict[str, Tensor]", seed: int | None = None):
        self.config = config
        self.params = params
        self.seed = seed

    # -- construction -----------------------------------------------------------
    @classmethod
    def init(cls, config: LMConfig, seed: int = 0, dtype=np.float32) -> CausalLM:
        rng = np.random.default_rng(seed)
        d, V, L = config.d_model, config.vocab_size, config.n_layers
        std = 0.02
        proj_std = std / np.sqrt(2 * L)

        def normal(shape, s=std):
            return rng.normal(0.0, s, size=shape).astype(dtype)

        p: OrderedDict[str, np.ndarray] = OrderedDict()
        p["tok_emb"] = normal((V, d))
        p["pos_emb"] = normal((config.max_seq, d))
        for i in range(L):
            pre = f"blocks.{i}."
            p[pre + "ln1.weight"] = np.ones(d, dtype)
            p[pre + "ln1.bias"] = np.zeros(d, dtype)
            for name in ("q", "k", "v"):
                p[pre + f"attn.{name}.weight"] = normal((d, d))
                p[pre + f"attn.{name}.bias"] = np.zeros(d, dtype)
            p[pre + "attn.proj.weight"] = normal((d, d), proj_std)
            p[pre + "attn.proj.bias"] = np.zeros(d, dtype)
            p[pre + "ln2.weight"] = np.ones(d, dtype)
            p[pre + "ln2.bias"] = np.zeros(d, dtype)
            p[pre + "mlp.fc.weight"] = normal((d, 4 * d))
            p[pre + "mlp.fc.bias"] = np.zeros(4 * d, dtype)
            p[pre + "mlp.proj.weight"] = normal((4 * d, d), proj_std)
            p[pre + "mlp.proj.bias"] = np.zeros(d, dtype)
        p["ln_f.weight"] = np.ones(d, dtype)
        p["ln_f.bias"] = np.zeros(d, dtype)
        # output projection deliberately has no bias
        p["lm_head.weight"] = normal((d, V))
        tensors = OrderedDict((k, Tensor(v, requires_grad=True, name=k)) for k, v in p.items())
        return cls(config, tensors, seed=seed)

    def copy(self) -> CausalLM:
        params = OrderedDict((k, Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k))
                             for k, v in self.params.items())
        return CausalLM(LMConfig(**asdict(self.config)), params, seed=self.seed)

    def astype(self, dtype) -> CausalLM:
        params = OrderedDict((k, Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k))
                             for k, v in self.params.items())
        return CausalLM(LMConfig(**asdict(self.config)), params, seed=self.seed)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def freeze(self) -> CausalLM:
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
        return self

    def num_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self.params.items())

    def load_arrays(self, arrays) -> None:
        for k, v in arrays.items():
            if self.params[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {self.params[k].shape} vs {v.shape}")
            self.params[k].data = np.array(v, dtype=self.params[k].dtype, copy=True)

    def _check_tokens(self, tokens: np.ndarray, offset: int = 0) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.ndim != 2:
            raise ValueError(f"tokens must be (B, T), got shape {tokens.shape}")
        if tokens.dtype.kind not in "iu":
            raise TypeError("token ids must be integers")
        if offset + tokens.shape[1] > self.config.max_seq:
            raise SequenceTooLongError(
                f"sequence of {offset + tokens.shape[1]} tokens exceeds max_seq={self.config.max_seq}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise IndexError(f"token id out of vocabulary [0, {self.config.vocab_size})")
        return tokens

    # -- autodiff forward -----------------------------------------------------------
    def forward(self, tokens) -> Tensor:
        """Logits of shape (B, T, V); position t sees only tokens <= t."""
        tokens = self._check_tokens(tokens)
        cfg = self.config
        B, T = tokens.shape
        H, hd = cfg.n_heads, cfg.head_dim
        P = self.params
        dtype = P["tok_emb"].dtype
        x = ad.embedding(P["tok_emb"], tokens) + ad.getitem(P["pos_emb"], slice(0, T))
        mask = Tensor(np.triu(np.full((T, T), ad.MASK_VALUE, dtype=dtype), k=1))
        scale = 1.0 / np.sqrt(hd)
        for i in range(cfg.n_layers):
            pre = f"blocks.{i}."
            h = ad.layer_norm(x, P[pre + "ln1.weight"], P[pre + "ln1.bias"])

            def heads(name):
                y = h @ P[pre + f"attn.{name}.weight"] + P[pre + f"attn.{name}.bias"]
                return y.reshape(B, T, H, hd).transpose(0, 2, 1, 3)

            q, k, v = heads("q"), heads("k"), heads("v")
            att = (q @ k.transpose(0, 1, 3, 2)) * scale + mask
            att = ad.softmax(att, axis=-1)
            y = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
            x = x + (y @ P[pre + "attn.proj.weight"] + P[pre + "attn.proj.bias"])
            h = ad.layer_norm(x, P[pre + "ln2.weight"], P[pre + "ln2.bias"])
            h = ad.relu(h @ P[pre + "mlp.fc.weight"] + P[pre + "mlp.fc.bias"])
            x = x + (h @ P[pre + "mlp.proj.weight"] + P[pre + "mlp.proj.bias"])
        x = ad.layer_norm(x, P["ln_f.weight"], P["ln_f.bias"])
        return x @ P["lm_head.weight"]

    __call__ = forward

    # -- numpy inference --------------------------------------------------------------
    def new_cache(self, batch: int) -> KVCache:
        return KVCache(self, batch)

    def logits_np(self, tokens) -> np.ndarray:
        """Full-sequence logits without building a graph, shape (B, T, V)."""
        tokens = self._check_tokens(tokens)
        cache = KVCache(self, tokens.shape[0])
        return cache.extend(tokens)

    # -- checkpoints ------------------------------------------------------------------
    def save(self, directory: str | os.PathLike, extra: dict | None = None) -> None:
        manifest = {"kind": "causal_lm", "config": asdict(self.config), "seed": self.seed}
        if extra:
            manifest.update(extra)
        save_params(directory, self.state_arrays(), manifest)

    @classmethod
    def load(cls, directory: str | os.PathLike) -> CausalLM:
        manifest, arrays = load_params(directory)
        if manifest.get("kind") != "causal_lm":
            raise CheckpointError(f"{directory} is not a causal_lm checkpoint")
        config = LMConfig(**manifest["config"])
        params = OrderedDict((k, Tensor(v, requires_grad=True, name=k)) for k, v in arrays.items())
        return cls(config, params, seed=manifest.get("seed"))


class KVCache:
    """Incremental numpy forward pass with per-layer key/value caches."""

    def __init__(self, model: CausalLM, batch: int):
        cfg = model.config
        self.model = model
        self.batch = batch
        self.length = 0
        dtype = model.params["tok_emb"].dtype
        shape = (batch, cfg.n_heads, cfg.max_seq, cfg.head_dim)
        self.keys = [np.zeros(shape, dtype) for _ in range(cfg.n_layers)]
        self.values = [np.zeros(shape, dtype) for _ in range(cfg.n_layers)]

    def extend(self, tokens) -> np.ndarray:
        """Append tokens (B, c) and return their logits (B, c, V)."""
        model = self.model
        tokens = model._check_tokens(tokens, offset=self.length)
        if tokens.shape[0] != self.batch:
            raise ValueError(f"cache batch is {self.batch}, got {tokens.shape[0]} rows")
        cfg = model.config
        P = {k: v.data for k, v in model.params.items()}
        B, c = tokens.shape
        H, hd = cfg.n_heads, cfg.head_dim
        t0, t1 = self.length, self.length + c
        dtype = P["tok_emb"].dtype
        x = P["tok_emb"][tokens] + P["pos_emb"][t0:t1]
        mask = np.triu(np.full((c, t1), ad.MASK_VALUE, dtype=dtype), k=t0 + 1)
        scale = dtype.type(1.0 / np.sqrt(hd))
        for i in range(cfg.n_layers):
            pre = f"blocks.{i}."
            h = _layer_norm_np(x, P[pre + "ln1.weight"], P[pre + "ln1.bias"])

            def heads(name):
                y = h @ P[pre + f"attn.{name}.weight"] + P[pre + f"attn.{name}.bias"]
                return y.reshape(B, c, H, hd).transpose(0, 2, 1, 3)

            q = heads("q")
            self.keys[i][:, :, t0:t1] = heads("k")
            self.values[i][:, :, t0:t1] = heads("v")
            k = self.keys[i][:, :, :t1]
            v = self.values[i][:, :, :t1]
            att = (q @ k.transpose(0, 1, 3, 2)) * scale + mask
            att = np.exp(att - att.max(axis=-1, keepdims=True))
            att /= att.sum(axis=-1, keepdims=True, dtype=np.float64).astype(dtype)
            y = (att @ v).transpose(0, 2, 1, 3).reshape(B, c, cfg.d_model)
            x = x + (y @ P[pre + "attn.proj.weight"] + P[pre + "attn.proj.bias"])
            h = _layer_norm_np(x, P[pre + "ln2.weight"], P[pre + "ln2.bias"])
            h = np.maximum(h @ P[pre + "mlp.fc.weight"] + P[pre + "mlp.fc.bias"], 0)
            x = x + (h @ P[pre + "mlp.proj.weight"] + P[pre + "mlp.proj.bias"])
        x = _layer_norm_np(x, P["ln_f.weight"], P["ln_f.bias"])
        self.length = t1
        return x @ P["lm_head.weight"]


def _layer_norm_np(x, w, b, eps=1e-5):
    mu = np.mean(x, axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True, dtype=np.float64)
    return xc * (1.0 / np.sqrt(var + eps)).astype(x.dtype) * w + b


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

BiasFn = Callable[[np.ndarray], np.ndarray]
ChooseFn = Callable[[np.ndarray, np.ndarray, int], np.ndarray]


def decode_loop(model: CausalLM, prompts, max_new: int, choose: ChooseFn) -> np.ndarray:
    """Generic autoregressive loop.

    ``choose(logits, context, step)`` receives float64 logits (B, V) for the next
    position, the full context so far (B, t) and the 0-based index of the token
    being generated; it returns the chosen ids (B,).  Returns only the new tokens.
    """
    prompts = np.atleast_2d(np.asarray(prompts, dtype=np.int64))
    B, P = prompts.shape
    if P < 1:
        raise ValueError("decoding needs a prompt of at least one token")
    ctx = np.empty((B, P + max_new), dtype=np.int64)
    ctx[:, :P] = prompts
    if max_new == 0:
        return ctx[:, P:]
    cache = model.new_cache(B)
    logits = cache.extend(prompts)[:, -1].astype(np.float64)
    for step in range(max_new):
        nxt = np.asarray(choose(logits, ctx[:, :P + step], step), dtype=np.int64)
        ctx[:, P + step] = nxt
        if step + 1 < max_new:
            logits = cache.extend(nxt[:, None])[:, -1].astype(np.float64)
    return ctx[:, P:]


def sample_with_bias(model: CausalLM, prompts, max_new: int, temperature: float = 1.0,
                     bias_fn: BiasFn | None = None, seed: int = 0) -> np.ndarray:
    """Sample continuations from softmax((logits + bias) / temperature).

    ``bias_fn(context)`` maps the (B, t) context to a (B, V) additive bias.
    Temperature 0 is greedy decoding; ties go to the lowest token id.
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    rng = np.random.default_rng(seed)

    def choose(logits, ctx, step):
        if bias_fn is not None:
            logits = logits + np.asarray(bias_fn(ctx), dtype=np.float64)
        u = rng.random(logits.shape[0])
        if temperature == 0:
            return np.argmax(logits, axis=-1)
        z = logits / temperature
        p = np.exp(z - z.max(axis=-1, keepdims=True))
        cdf = np.cumsum(p, axis=-1)
        target = u * cdf[:, -1]
        picks = (cdf <= target[:, None]).sum(axis=-1)
        return np.minimum(picks, logits.shape[-1] - 1)

    return decode_loop(model, prompts, max_new, choose)


def token_nll(model: CausalLM, texts, start: int = 1) -> list[np.ndarray]:
    """Per-token negative log-likelihoods of each text's tokens from index ``start`` on."""
    out = []
    for text in texts:
        text = np.asarray(text, dtype=np.int64)
        logits = model.logits_np(text[None, :])[0].astype(np.float64)
        ls = logits - logits.max(axis=-1, keepdims=True)
        ls -= np.log(np.exp(ls).sum(axis=-1, keepdims=True))
        idx = np.arange(max(start, 1), len(text))
        out.append(-ls[idx - 1, text[idx]])
    return out


def perplexity(ref_model: CausalLM, text, start: int = 1) -> float:
    """exp(mean next-token cross-entropy) of ``text`` under ``ref_model``.

    Tokens before ``start`` act only as context (e.g. a prompt).
    """
    text = np.asarray(text, dtype=np.int64)
    if len(text) < 2:
        raise ValueError("perplexity needs at least 2 tokens")
    nll = token_nll(ref_model, [text], start=start)[0]
    return float(np.exp(nll.mean()))


def batch_perplexity(ref_model: CausalLM, texts: np.ndarray, start: int = 1, chunk: int = 100) -> np.ndarray:
    """Perplexities of equal-length texts, scored in batches."""
    texts = np.atleast_2d(np.asarray(texts, dtype=np.int64))
    if texts.shape[1] < 2:
        raise ValueError("perplexity needs at least 2 tokens")
    out = []
    for lo in range(0, len(texts), chunk):
        block = texts[lo:lo + chunk]
        logits = ref_model.logits_np(block).astype(np.float64)
        ls = logits - logits.max(axis=-1, keepdims=True)
        ls -= np.log(np.exp(ls).sum(axis=-1, keepdims=True))
        idx = np.arange(max(start, 1), block.shape[1])
        nll = -np.take_along_axis(ls[:, idx - 1], block[:, idx][..., None], axis=-1)[..., 0]
        out.append(np.exp(nll.mean(axis=1)))
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# checkpoint i/o: manifest.json + params.bin (little-endian float32, row-major)
# ---------------------------------------------------------------------------

def save_params(directory, arrays, manifest: dict) -> None:
    directory = os.fspath(directory)
    os.makedirs(directory, exist_ok=True)
    entries = []
    offset = 0
    with open(os.path.join(directory, "params.bin"), "wb") as fh:
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    full = {"format_version": CHECKPOINT_FORMAT_VERSION, "dtype": "float32", "byte_order": "little"}
    full.update(manifest)
    full["params"] = entries
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(full, fh, indent=2, sort_keys=True)


def load_params(directory):
    directory = os.fspath(directory)
    mpath = os.path.join(directory, "manifest.json")
    bpath = os.path.join(directory, "params.bin")
    if not (os.path.isfile(mpath) and os.path.isfile(bpath)):
        raise CheckpointError(f"no checkpoint at {directory}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')}")
    with open(bpath, "rb") as fh:
        blob = fh.read()
    arrays = OrderedDict()
    for e in manifest["params"]:
        chunk = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(e["shape"])
    return manifest, arrays
