"""Detection and quality metrics, evaluation reports and the experiment runner."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .baselines import KgwScheme, KthScheme, green_flags, kgw_detect, kth_cost, kth_generate
from .data import Corpus, sample_prompts
from .model import CausalLM, batch_perplexity, sample_with_bias
from .modify import ModificationSpec, apply_modification
from .policy import WatermarkPolicy

REPORT_FPRS = (0.001, 0.01, 0.05, 0.10)
WATERMARK_KINDS = ("pro", "kgw", "kth", "null")


def _scores(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError("score list is empty")
    return arr


def roc_auc(pos_scores, neg_scores) -> float:
    """Mann-Whitney estimate (#{pos > neg} + 0.5 #{pos == neg}) / (|pos| |neg|)."""
    pos, neg = _scores(pos_scores), _scores(neg_scores)
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    not_above = np.searchsorted(neg_sorted, pos, side="right")
    wins = below.sum() + 0.5 * (not_above - below).sum()
    return float(wins / (len(pos) * len(neg)))


def tpr_at_fpr(pos_scores, neg_scores, fpr: float) -> float:
    """Fraction of positives strictly above the upper (1 - fpr) quantile of the negatives."""
    if not 0 < fpr < 1:
        raise ValueError("fpr must lie in (0, 1)")
    pos, neg = _scores(pos_scores), _scores(neg_scores)
    thr = np.quantile(neg, 1.0 - fpr, method="higher")
    return float(np.mean(pos > thr))


def green_ratio(scheme: KgwScheme, texts) -> float:
    """Pooled fraction of scored positions whose token is green under its own context."""
    texts = list(texts)
    if not texts:
        raise ValueError("no texts")
    flags = np.concatenate([green_flags(scheme, t) for t in texts])
    return float(flags.mean())


def kgw_score(scheme: KgwScheme, text) -> float:
    """Binomial z-statistic of the green count; a monotone transform of the p-value at fixed length."""
    d = kgw_detect(scheme, text)
    g = scheme.gamma
    return (d.green_count - g * d.n_scored) / np.sqrt(d.n_scored * g * (1 - g))


def kth_score(scheme: KthScheme, text) -> float:
    """Negated minimum alignment cost (larger means more watermark-like)."""
    return -float(kth_cost(scheme, text).min())


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    run_id: str
    config_hash: str
    watermark_kind: str
    metrics: dict
    counts: dict
    seeds: dict
    modification: dict | None = None

    def __post_init__(self):
        auc = self.metrics.get("auc")
        if auc is not None and not 0.0 <= auc <= 1.0:
            raise ValueError("auc must lie in [0, 1]")
        if any(v <= 0 for v in self.counts.values()):
            raise ValueError("sample counts must be positive")
        tpr = self.metrics.get("tpr_at", {})
        vals = [tpr[k] for k in sorted(tpr, key=float)]
        if any(b < a for a, b in zip(vals, vals[1:])):
            raise ValueError("tpr must be nondecreasing in fpr")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        return cls(**json.loads(text))

    def flat(self) -> dict:
        row = {"run_id": self.run_id, "config_hash": self.config_hash, "watermark_kind": self.watermark_kind,
               "modification": ModificationSpec.from_dict(self.modification).label() if self.modification else ""}
        for k, v in self.metrics.items():
            if k == "tpr_at":
                for f, t in v.items():
                    row[f"tpr@{f}"] = t
            else:
                row[k] = v
        row.update({f"n_{k}": v for k, v in self.counts.items()})
        return row


def reports_to_csv(reports) -> str:
    rows = [r.flat() for r in reports]
    cols: list[str] = []
    for r in rows:
        cols.extend(c for c in r if c not in cols)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols)
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def write_reports(reports, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "report.csv"), "w") as fh:
        fh.write(reports_to_csv(reports))


def detection_metrics(pos, neg) -> dict:
    return {"auc": roc_auc(pos, neg),
            "tpr_at": {str(f): tpr_at_fpr(pos, neg, f) for f in REPORT_FPRS},
            "z_mean_wm": float(np.mean(pos)), "z_mean_null": float(np.mean(neg))}


# ---------------------------------------------------------------------------
# generation + scoring
# ---------------------------------------------------------------------------

def generate(model: CausalLM, prompts, gen_len: int, seed: int, bias_fn=None, batch: int = 200) -> np.ndarray:
    """Temperature-1 continuations (new tokens only), generated in chunks of ``batch`` prompts."""
    prompts = np.atleast_2d(prompts)
    outs = []
    for i, lo in enumerate(range(0, len(prompts), batch)):
        outs.append(sample_with_bias(model, prompts[lo:lo + batch], gen_len, temperature=1.0,
                                     bias_fn=bias_fn, seed=seed + 7919 * i))
    return np.concatenate(outs)


def make_scorer(kind: str, policy: WatermarkPolicy | None = None, scheme=None):
    if kind == "null" and policy is None and scheme is not None:
        kind = "kgw" if isinstance(scheme, KgwScheme) else "kth"
    if kind in ("pro", "null"):
        if policy is None:
            raise ValueError(f"{kind} evaluation needs a watermark policy for scoring")
        return lambda text: policy.detect(text).z
    if kind == "kgw":
        if not isinstance(scheme, KgwScheme):
            raise TypeError("kgw evaluation needs a KgwScheme detector")
        return lambda text: kgw_score(scheme, text)
    if kind == "kth":
        if not isinstance(scheme, KthScheme):
            raise TypeError("kth evaluation needs a KthScheme detector")
        return lambda text: kth_score(scheme, text)
    raise ValueError(f"unknown watermark kind {kind!r}")


def evaluate_texts(kind: str, wm_texts, null_texts, teacher: CausalLM, prompts, policy=None, scheme=None,
                   with_ppl: bool = True) -> tuple[dict, np.ndarray, np.ndarray]:
    score = make_scorer(kind, policy, scheme)
    pos = np.array([score(t) for t in wm_texts])
    neg = np.array([score(t) for t in null_texts])
    metrics = detection_metrics(pos, neg)
    if with_ppl:
        P = prompts.shape[1]
        metrics["ppl_median_wm"] = float(np.median(batch_perplexity(teacher, np.hstack([prompts, wm_texts]), start=P)))
        metrics["ppl_median_null"] = float(np.median(batch_perplexity(teacher, np.hstack([prompts, null_texts]), start=P)))
    if isinstance(scheme, KgwScheme):
        metrics["green_ratio"] = green_ratio(scheme, wm_texts)
    return metrics, pos, neg


@dataclass
class ExperimentConfig:
    run_id: str = "run"
    watermark_kind: str = "pro"
    teacher: str = ""
    student: str | None = None
    base: str | None = None
    policy: str | None = None
    scheme: str | None = None
    decode_watermark: bool = False
    corpus: str | None = None
    n_samples: int = 200
    prompt_len: int = 20
    gen_len: int = 200
    seed: int = 0
    modifications: list = field(default_factory=list)
    out: str | None = None

    def config_hash(self) -> str:
        d = asdict(self)
        d.pop("out", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


class MissingCheckpointError(FileNotFoundError):
    pass


def _need(path, what):
    if not path or not os.path.isfile(os.path.join(path, "manifest.json")):
        raise MissingCheckpointError(f"missing {what} checkpoint: {path!r}")
    return path


def run_experiment(cfg: ExperimentConfig) -> list[EvalReport]:
    """Generate N watermarked and N null continuations, score them, report.

    The null set comes from the unwatermarked teacher.  Watermarked texts come
    from the student (learned watermark) or, with ``decode_watermark``, from the
    teacher under the KGW/KTH decoding rule.  With ``watermark_kind == 'null'``
    both sides are unwatermarked teacher samples (control run).  Each entry of
    ``modifications`` is applied to the student before generation and yields
    one extra report.
    """
    from .baselines import load_scheme

    if cfg.watermark_kind not in WATERMARK_KINDS:
        raise ValueError(f"unknown watermark kind {cfg.watermark_kind!r}")
    teacher = CausalLM.load(_need(cfg.teacher, "teacher")).freeze()
    policy = WatermarkPolicy.load(_need(cfg.policy, "policy")) if cfg.policy else None
    if cfg.scheme and not os.path.isfile(cfg.scheme):
        raise MissingCheckpointError(f"missing key file {cfg.scheme!r}")
    scheme = load_scheme(cfg.scheme) if cfg.scheme else None
    if cfg.watermark_kind in ("kgw", "kth") and scheme is not None:
        expect = KgwScheme if cfg.watermark_kind == "kgw" else KthScheme
        if not isinstance(scheme, expect):
            raise TypeError(f"detector/watermark-kind mismatch: {type(scheme).__name__} vs {cfg.watermark_kind}")
    corpus = Corpus.from_manifest(cfg.corpus) if cfg.corpus else None
    if corpus is None:
        from .experiments import load_corpus
        corpus = load_corpus()
    prompts = sample_prompts(corpus, "val", cfg.n_samples, cfg.prompt_len, seed=cfg.seed)
    null = generate(teacher, prompts, cfg.gen_len, seed=cfg.seed + 1)

    if cfg.watermark_kind == "null":
        generator = teacher
    elif cfg.decode_watermark:
        generator = teacher
    else:
        generator = CausalLM.load(_need(cfg.student, "student"))
    base = CausalLM.load(_need(cfg.base, "base")) if cfg.base else teacher

    def wm_texts_for(model):
        if cfg.watermark_kind == "null":
            return generate(model, prompts, cfg.gen_len, seed=cfg.seed + 2)
        if cfg.decode_watermark and cfg.watermark_kind == "kgw":
            from .baselines import kgw_bias_fn
            return generate(model, prompts, cfg.gen_len, seed=cfg.seed + 2, bias_fn=kgw_bias_fn(scheme))
        if cfg.decode_watermark and cfg.watermark_kind == "kth":
            return kth_generate(model, scheme, prompts, cfg.gen_len, seed=cfg.seed + 2)
        return generate(model, prompts, cfg.gen_len, seed=cfg.seed + 2)

    reports = []
    mods = [None] + [m if isinstance(m, ModificationSpec) else ModificationSpec.from_dict(m) for m in cfg.modifications]
    for spec in mods:
        model = generator if spec is None else apply_modification(generator, spec, base=base, corpus=corpus)
        wm = wm_texts_for(model)
        metrics, _, _ = evaluate_texts(cfg.watermark_kind, wm, null, teacher, prompts, policy=policy, scheme=scheme)
        reports.append(EvalReport(run_id=cfg.run_id, config_hash=cfg.config_hash(),
                                  watermark_kind=cfg.watermark_kind, metrics=metrics,
                                  counts={"wm": len(wm), "null": len(null)},
                                  seeds={"prompts": cfg.seed, "null": cfg.seed + 1, "wm": cfg.seed + 2},
                                  modification=None if spec is None else spec.to_dict()))
    if cfg.out:
        write_reports(reports, cfg.out)
    return reports
