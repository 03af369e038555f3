"""Cached end-to-end pipeline used by the acceptance suite and the CLI.

Every artifact lives under a cache directory (``WMLAB_CACHE`` or
``<repo>/.cache/wmlab``) keyed by the settings that produce it, so repeated
runs only pay for what is missing.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Corpus
from .model import CausalLM, LMConfig

log = logging.getLogger(__name__)

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
DEFAULT_CORPUS = os.path.join(REPO_ROOT, "data", "corpus", "manifest.json")


def cache_dir() -> str:
    path = os.environ.get("WMLAB_CACHE") or os.path.join(REPO_ROOT, ".cache", "wmlab")
    os.makedirs(path, exist_ok=True)
    return path


def _key(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:12]


def load_corpus(path: str = DEFAULT_CORPUS) -> Corpus:
    return Corpus.from_manifest(path)


@dataclass
class TeacherSettings:
    steps: int = 4000
    batch: int = 8
    seq_len: int = 256
    lr: float = 1e-3
    seed: int = 0
    model: dict = field(default_factory=lambda: asdict(LMConfig()))


def get_teacher(settings: TeacherSettings | None = None, corpus: Corpus | None = None) -> CausalLM:
    """Pretrained frozen teacher, trained once and cached."""
    from .training import evaluate_lm, pretrain_teacher

    settings = settings or TeacherSettings()
    path = os.path.join(cache_dir(), f"teacher-{_key(asdict(settings))}")
    if os.path.isfile(os.path.join(path, "manifest.json")):
        return CausalLM.load(path).freeze()
    corpus = corpus or load_corpus()
    model, losses = pretrain_teacher(corpus, LMConfig(**settings.model), steps=settings.steps,
                                     batch=settings.batch, seq_len=settings.seq_len, lr=settings.lr,
                                     seed=settings.seed, log_every=200)
    val = evaluate_lm(model, corpus, "val", settings.seq_len)
    model.save(path, extra={"role": "teacher", "settings": asdict(settings), "val_loss": val,
                            "final_train_loss": float(np.mean(losses[-50:]))})
    log.info("teacher val loss %.4f", val)
    return model.freeze()


# ---------------------------------------------------------------------------
# watermark training runs
# ---------------------------------------------------------------------------

@dataclass
class ProSettings:
    """One CAWP(+FPL) run.  ``seed`` drives the key, batches and mapper init."""
    seed: int = 0
    beta: float = 5.0
    alpha: float = 0.1
    delta: float = 1.0
    steps: int = 2000
    overrides: dict = field(default_factory=dict)

    def train_config(self):
        from .training import TrainConfig
        return TrainConfig.from_dict({"seed": self.seed, "xi_seed": 1000 + self.seed, "alpha": self.alpha,
                                      "beta": self.beta, "delta": self.delta, "steps": self.steps,
                                      **self.overrides})


@dataclass
class ProRun:
    path: str
    student: CausalLM
    policy: object
    log: object
    settings: ProSettings


def _pro_path(settings: ProSettings, teacher_settings: TeacherSettings) -> str:
    key = _key({"pro": asdict(settings), "teacher": asdict(teacher_settings)})
    return os.path.join(cache_dir(), f"pro-b{settings.beta:g}-s{settings.seed}-{key}")


def get_pro_run(settings: ProSettings, teacher_settings: TeacherSettings | None = None,
                corpus: Corpus | None = None) -> ProRun:
    """Watermarked student, trained policy and training log; trained once and cached."""
    from .policy import WatermarkPolicy
    from .training import TrainLog, train_cawp

    teacher_settings = teacher_settings or TeacherSettings()
    path = _pro_path(settings, teacher_settings)
    done = os.path.join(path, "DONE")
    if os.path.isfile(done):
        return ProRun(path, CausalLM.load(os.path.join(path, "student")),
                      WatermarkPolicy.load(os.path.join(path, "policy")),
                      TrainLog.read(os.path.join(path, "train_log.jsonl")), settings)
    corpus = corpus or load_corpus()
    teacher = get_teacher(teacher_settings, corpus)
    cfg = settings.train_config()
    policy = WatermarkPolicy.create(cfg.xi_seed, n=cfg.n, delta=cfg.delta, epsilon=cfg.epsilon,
                                    d_e=cfg.d_e, d_h=cfg.d_h)
    student = teacher.copy()
    for p in student.parameters():
        p.requires_grad = True
    os.makedirs(path, exist_ok=True)
    log_path = os.path.join(path, "train_log.jsonl")
    if os.path.exists(log_path):
        os.remove(log_path)

    def progress(step, rec):
        if step % 200 == 0:
            log.info("pro seed=%d beta=%g step %d l_sim %.4f l_norm %.3f", settings.seed, settings.beta,
                     step, rec["l_sim"], rec.get("l_norm", float("nan")))

    student, policy, tlog = train_cawp(teacher, student, policy, corpus, cfg, log_path=log_path,
                                       dump_dir=os.path.join(path, "dumps"), callback=progress)
    student.save(os.path.join(path, "student"), extra={"role": "student", "train_config": cfg.to_dict()})
    policy.save(os.path.join(path, "policy"))
    with open(os.path.join(path, "settings.json"), "w") as fh:
        json.dump({"pro": asdict(settings), "teacher": asdict(teacher_settings)}, fh, indent=2)
    with open(done, "w") as fh:
        fh.write("ok\n")
    return ProRun(path, student.freeze(), policy, tlog, settings)


# ---------------------------------------------------------------------------
# evaluation with common random numbers
# ---------------------------------------------------------------------------

@dataclass
class EvalSettings:
    n_samples: int = 200
    prompt_len: int = 20
    gen_len: int = 200
    prompt_seed: int = 0
    null_seed: int = 1
    wm_seed: int = 2


def eval_prompts(corpus: Corpus, ev: EvalSettings, seed: int | None = None) -> np.ndarray:
    from .data import sample_prompts
    return sample_prompts(corpus, "val", ev.n_samples, ev.prompt_len, ev.prompt_seed if seed is None else seed)


def _cached_array(name: str, build) -> np.ndarray:
    path = os.path.join(cache_dir(), name + ".npy")
    if os.path.isfile(path):
        return np.load(path)
    arr = build()
    np.save(path, arr)
    return arr


def get_null_texts(teacher_settings: TeacherSettings, corpus: Corpus, ev: EvalSettings,
                   prompt_seed: int | None = None, gen_seed: int | None = None) -> np.ndarray:
    """Unwatermarked teacher continuations for the evaluation prompts."""
    from .evaluation import generate

    ps = ev.prompt_seed if prompt_seed is None else prompt_seed
    gs = ev.null_seed if gen_seed is None else gen_seed
    key = _key({"teacher": asdict(teacher_settings), "ev": asdict(ev), "ps": ps, "gs": gs})

    def build():
        teacher = get_teacher(teacher_settings, corpus)
        return generate(teacher, eval_prompts(corpus, ev, ps), ev.gen_len, seed=gs)
    return _cached_array(f"null-{key}", build)


def score_student(run: ProRun, model: CausalLM, teacher: CausalLM, corpus: Corpus, ev: EvalSettings,
                  null: np.ndarray, with_ppl: bool = True) -> dict:
    """Detection (and optionally quality) metrics of ``model``'s samples under the run's policy."""
    from .evaluation import evaluate_texts, generate

    prompts = eval_prompts(corpus, ev)
    wm = generate(model, prompts, ev.gen_len, seed=ev.wm_seed)
    metrics, pos, neg = evaluate_texts("pro", wm, null, teacher, prompts, policy=run.policy, with_ppl=with_ppl)
    metrics["z_se_wm"] = float(np.std(pos, ddof=1) / np.sqrt(len(pos)))
    metrics["z_se_null"] = float(np.std(neg, ddof=1) / np.sqrt(len(neg)))
    return metrics


def cell_metrics(run: ProRun, spec, teacher_settings: TeacherSettings | None = None,
                 corpus: Corpus | None = None, ev: EvalSettings | None = None,
                 finetune_cache: dict | None = None) -> dict:
    """Metrics for one modification cell (``spec`` None = unaltered), cached as JSON in the run directory."""
    from .modify import ModificationSpec, apply_modification, finetune_raw

    teacher_settings = teacher_settings or TeacherSettings()
    ev = ev or EvalSettings()
    spec = spec if spec is None or isinstance(spec, ModificationSpec) else ModificationSpec.from_dict(spec)
    label = "unaltered" if spec is None else spec.label()
    out_dir = os.path.join(run.path, "cells")
    os.makedirs(out_dir, exist_ok=True)
    fname = os.path.join(out_dir, f"{_key({'spec': None if spec is None else spec.to_dict(), 'ev': asdict(ev)})}.json")
    if os.path.isfile(fname):
        with open(fname) as fh:
            return json.load(fh)["metrics"]
    corpus = corpus or load_corpus()
    teacher = get_teacher(teacher_settings, corpus)
    null = get_null_texts(teacher_settings, corpus, ev)
    if spec is None:
        model = run.student
    elif spec.kind == "finetune" and finetune_cache is not None:
        model = finetune_cache[spec.steps]
    elif spec.kind == "finetune":
        model, _, _ = finetune_raw(run.student, corpus, spec.steps, lr=spec.lr or 3e-4, seed=spec.seed,
                                   split=spec.split or "heldout")
    else:
        model = apply_modification(run.student, spec, base=teacher, corpus=corpus)
    metrics = score_student(run, model, teacher, corpus, ev, null, with_ppl=spec is None)
    with open(fname, "w") as fh:
        json.dump({"label": label, "spec": None if spec is None else spec.to_dict(), "metrics": metrics}, fh,
                  indent=2)
    log.info("%s %s auc %.4f", os.path.basename(run.path), label, metrics["auc"])
    return metrics


def finetune_grid(run: ProRun, steps=(300, 600, 900, 1200, 1500), teacher_settings: TeacherSettings | None = None,
                  corpus: Corpus | None = None, ev: EvalSettings | None = None, lr: float = 3e-4) -> dict[int, dict]:
    """AUC along one fine-tuning trajectory; intermediate snapshots equal shorter runs."""
    from .modify import ModificationSpec, finetune_raw

    specs = {s: ModificationSpec("finetune", steps=s, split="heldout", lr=lr, seed=run.settings.seed)
             for s in steps}
    ev = ev or EvalSettings()
    out: dict[int, dict] = {}
    missing = []
    for s, spec in specs.items():
        fname = os.path.join(run.path, "cells", f"{_key({'spec': spec.to_dict(), 'ev': asdict(ev)})}.json")
        if os.path.isfile(fname):
            with open(fname) as fh:
                out[s] = json.load(fh)["metrics"]
        else:
            missing.append(s)
    if missing:
        corpus = corpus or load_corpus()
        _, snaps, _ = finetune_raw(run.student, corpus, max(missing), lr=lr, seed=run.settings.seed,
                                   split="heldout", snapshots=tuple(missing))
        for s in missing:
            out[s] = cell_metrics(run, specs[s], teacher_settings, corpus, ev, finetune_cache=snaps)
    return dict(sorted(out.items()))


def _run_array(run: ProRun, name: str, build) -> np.ndarray:
    path = os.path.join(run.path, name + ".npy")
    if os.path.isfile(path):
        return np.load(path)
    arr = build()
    np.save(path, arr)
    return arr


def ordering_scores(run: ProRun, teacher_settings: TeacherSettings | None = None, corpus: Corpus | None = None,
                    ev: EvalSettings | None = None) -> dict[str, np.ndarray]:
    """Detector scores of anti-watermarked, null and watermarked samples on the same prompts."""
    from .evaluation import generate

    teacher_settings = teacher_settings or TeacherSettings()
    ev = ev or EvalSettings()
    corpus = corpus or load_corpus()
    prompts = eval_prompts(corpus, ev)
    teacher = get_teacher(teacher_settings, corpus)
    tag = _key(asdict(ev))
    anti = _run_array(run, f"anti-{tag}", lambda: generate(teacher, prompts, ev.gen_len, seed=ev.wm_seed,
                                                           bias_fn=run.policy.bias_fn(sign=-1.0)))
    wm = _run_array(run, f"wm-{tag}", lambda: generate(run.student, prompts, ev.gen_len, seed=ev.wm_seed))
    null = get_null_texts(teacher_settings, corpus, ev)
    return {"anti": run.policy.score_many(anti), "null": run.policy.score_many(null), "wm": run.policy.score_many(wm)}


def calibration_check(run: ProRun, target_fpr: float = 0.05, count: int = 1000,
                      teacher_settings: TeacherSettings | None = None, corpus: Corpus | None = None,
                      ev: EvalSettings | None = None) -> dict:
    """Threshold from one null set, false-positive rate on a fresh one."""
    from .policy import calibrate_threshold

    teacher_settings = teacher_settings or TeacherSettings()
    ev = ev or EvalSettings()
    corpus = corpus or load_corpus()
    big = EvalSettings(**{**asdict(ev), "n_samples": count})
    calib = get_null_texts(teacher_settings, corpus, big, prompt_seed=101, gen_seed=102)
    fresh = get_null_texts(teacher_settings, corpus, big, prompt_seed=201, gen_seed=202)
    thr = calibrate_threshold(run.policy, list(calib), target_fpr)
    fpr = float(np.mean(run.policy.score_many(fresh) > thr))
    return {"threshold": float(thr), "fpr": fpr, "target": target_fpr, "n_calib": len(calib), "n_fresh": len(fresh)}


def kgw_null_pvalues(count: int = 500, key: int = 20240, teacher_settings: TeacherSettings | None = None,
                     corpus: Corpus | None = None, ev: EvalSettings | None = None) -> np.ndarray:
    """KGW p-values of unwatermarked teacher continuations."""
    from .baselines import KgwScheme, kgw_detect

    teacher_settings = teacher_settings or TeacherSettings()
    ev = ev or EvalSettings()
    corpus = corpus or load_corpus()
    big = EvalSettings(**{**asdict(ev), "n_samples": count})
    texts = get_null_texts(teacher_settings, corpus, big, prompt_seed=301, gen_seed=302)
    scheme = KgwScheme(key=key)
    return np.array([kgw_detect(scheme, t).p_value for t in texts])
