"""Command-line entry point.

Every subcommand reads one JSON config (``--config``) with ``--set key=value``
overrides (dotted keys reach nested objects; values are parsed as JSON when
possible).  Precedence is CLI > config file > built-in defaults.  Secret key
material is only ever read from a file, given by ``--secret`` or the
WM_SECRET_PATH environment variable.

Exit codes:
  0  success
  1  unexpected error
  2  usage error (unknown subcommand or flag)
  3  malformed or invalid config
  4  missing checkpoint, key file or input
  5  input text too short to score
  6  training diverged (non-finite loss or gradient)

Errors are reported as one JSON object on stderr.
"""
from __future__ import annotations

import argparse
import copy
import itertools
import json
import logging
import os
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields

import numpy as np

EXIT_OK, EXIT_OTHER, EXIT_USAGE, EXIT_CONFIG, EXIT_MISSING, EXIT_LENGTH, EXIT_DIVERGED = 0, 1, 2, 3, 4, 5, 6

log = logging.getLogger("wmlab.cli")


class UsageError(Exception):
    pass


class ConfigError(ValueError):
    pass


class MissingInputError(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

DEFAULTS = {
    "pretrain": {"corpus": None, "steps": 4000, "batch": 8, "seq_len": 256, "lr": 1e-3, "seed": 0, "model": {}},
    "train-pro": {"teacher": None, "corpus": None, "train": {}},
    "distill-kgw": {"teacher": None, "corpus": None, "mode": "logit", "steps": 1000, "batch": 8, "seq_len": 256,
                    "lr": 3e-4, "seed": 0, "n_texts": 400, "prompt_len": 20, "gen_len": 200},
    "distill-kth": {"teacher": None, "corpus": None, "steps": 1000, "batch": 8, "lr": 3e-4, "seed": 0,
                    "n_texts": 400, "prompt_len": 20, "gen_len": 200},
    "generate": {"model": None, "corpus": None, "watermark": "none", "policy": None, "n_samples": 10,
                 "prompt_len": 20, "gen_len": 200, "seed": 0, "temperature": 1.0},
    "detect": {"kind": "pro", "policy": None, "threshold": None, "reference": None},
    "modify": {"model": None, "base": None, "corpus": None, "run": "run", "modification": None},
    "eval": {},
    "gradcheck": {"count": 20, "h": 1e-3, "tol": 1e-6, "seed": 0},
    "sweep": {"teacher": None, "corpus": None, "train": {}, "eval": {}, "grid": {}},
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_dotted(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        nxt = node.get(p)
        if nxt is None:
            nxt = node[p] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"cannot set {key!r}: {p!r} is not an object")
        node = nxt
    node[parts[-1]] = value


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(command: str, config_path: str | None, overrides: list[str]) -> dict:
    cfg = copy.deepcopy(DEFAULTS.get(command, {}))
    if config_path:
        if not os.path.isfile(config_path):
            raise MissingInputError(f"config file not found: {config_path}")
        try:
            with open(config_path) as fh:
                loaded = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config {config_path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _merge(cfg, loaded)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        _set_dotted(cfg, key.strip(), _parse_value(value))
    return cfg


def _require(cfg: dict, *keys) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise ConfigError(f"missing required config keys: {missing}")


def read_secret(path: str | None) -> dict:
    """Key material from ``path`` or $WM_SECRET_PATH: a JSON object or a bare integer seed."""
    path = path or os.environ.get("WM_SECRET_PATH")
    if not path:
        raise ConfigError("no secret given: pass --secret FILE or set WM_SECRET_PATH")
    if not os.path.isfile(path):
        raise MissingInputError(f"secret file not found: {path}")
    text = open(path).read().strip()
    try:
        value = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"secret file {path} is neither JSON nor an integer") from exc
    if isinstance(value, int):
        return {"seed": value}
    if not isinstance(value, dict) or "seed" not in value:
        raise ConfigError(f"secret file {path} must hold an integer or an object with a 'seed' field")
    return value


def _build_id() -> str:
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        rev = subprocess.run(["git", "-C", here, "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, timeout=5)
        if rev.returncode == 0:
            return f"git:{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    from importlib.metadata import PackageNotFoundError, version
    try:
        return f"artifact=={version('artifact')}"
    except PackageNotFoundError:
        return "unknown"


def write_manifest(out_dir: str, command: str, config_path: str | None, cfg: dict, seeds: dict) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "run_manifest.json")
    with open(path, "w") as fh:
        json.dump({"command": command, "config_path": config_path, "config": cfg, "seeds": seeds,
                   "build": _build_id(), "out": os.path.abspath(out_dir)}, fh, indent=2, sort_keys=True,
                  default=str)
    return path


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _corpus(cfg: dict):
    from .data import Corpus
    from .experiments import DEFAULT_CORPUS
    path = cfg.get("corpus") or DEFAULT_CORPUS
    if not os.path.isfile(path):
        raise MissingInputError(f"corpus manifest not found: {path}")
    return Corpus.from_manifest(path)


def _load_model(path: str | None, what: str):
    from .model import CausalLM
    if not path or not os.path.isfile(os.path.join(path, "manifest.json")):
        raise MissingInputError(f"missing {what} checkpoint: {path!r}")
    return CausalLM.load(path)


def _load_policy(path: str | None):
    from .policy import WatermarkPolicy
    if not path or not os.path.isfile(os.path.join(path, "manifest.json")):
        raise MissingInputError(f"missing policy checkpoint: {path!r}")
    return WatermarkPolicy.load(path)


def _scheme(secret: dict, kind: str):
    from .baselines import scheme_from_dict
    d = dict(secret)
    d.setdefault("scheme", kind)
    if d["scheme"] != kind:
        raise ConfigError(f"key file holds a {d['scheme']} key, expected {kind}")
    return scheme_from_dict(d)


def _trainable(model):
    for p in model.parameters():
        p.requires_grad = True
    return model


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, default=float))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_pretrain(args, cfg):
    from .model import LMConfig
    from .training import evaluate_lm, pretrain_teacher

    try:
        config = LMConfig(**cfg.get("model", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad model config: {exc}") from exc
    corpus = _corpus(cfg)
    model, losses = pretrain_teacher(corpus, config, steps=int(cfg["steps"]), batch=int(cfg["batch"]),
                                     seq_len=int(cfg["seq_len"]), lr=float(cfg["lr"]), seed=int(cfg["seed"]),
                                     log_every=200)
    val = evaluate_lm(model, corpus, "val", min(int(cfg["seq_len"]), config.max_seq))
    model.save(args.out, extra={"role": "teacher", "val_loss": val})
    write_manifest(args.out, "pretrain", args.config, cfg, {"seed": cfg["seed"]})
    _emit({"out": args.out, "val_loss": val, "final_loss": losses[-1] if losses else None})


def _train_config(cfg: dict, secret: dict):
    from .training import TrainConfig
    train = dict(cfg.get("train", {}))
    train["xi_seed"] = int(secret["seed"])
    try:
        return TrainConfig.from_dict(train)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def cmd_train_pro(args, cfg):
    from .policy import WatermarkPolicy
    from .training import train_cawp

    _require(cfg, "teacher")
    tc = _train_config(cfg, read_secret(args.secret))
    teacher = _load_model(cfg["teacher"], "teacher").freeze()
    corpus = _corpus(cfg)
    policy = WatermarkPolicy.create(tc.xi_seed, n=tc.n, delta=tc.delta, epsilon=tc.epsilon, d_e=tc.d_e, d_h=tc.d_h)
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "train_log.jsonl")
    if os.path.exists(log_path):
        os.remove(log_path)
    student, policy, tlog = train_cawp(teacher, _trainable(teacher.copy()), policy, corpus, tc, log_path=log_path,
                                       dump_dir=os.path.join(args.out, "dumps"))
    student.save(os.path.join(args.out, "student"), extra={"role": "student"})
    policy.save(os.path.join(args.out, "policy"))
    safe = tc.to_dict()
    safe.pop("xi_seed")
    write_manifest(args.out, "train-pro", args.config, {**cfg, "train": safe}, {"seed": tc.seed})
    l_sim = tlog.series("l_sim")
    _emit({"out": args.out, "steps": len(tlog), "l_sim_first": float(l_sim[0]) if len(l_sim) else None,
           "l_sim_last": float(l_sim[-1]) if len(l_sim) else None})


def _distill_texts(teacher, corpus, cfg, choose):
    from .data import sample_prompts
    prompts = sample_prompts(corpus, "train", int(cfg["n_texts"]), int(cfg["prompt_len"]), int(cfg["seed"]))
    return np.hstack([prompts, choose(teacher, prompts)])


def cmd_distill_kgw(args, cfg):
    from .baselines import kgw_bias_fn
    from .evaluation import generate
    from .training import distill_logit, distill_sampling

    _require(cfg, "teacher")
    scheme = _scheme(read_secret(args.secret), "kgw")
    teacher = _load_model(cfg["teacher"], "teacher").freeze()
    corpus = _corpus(cfg)
    student = _trainable(teacher.copy())
    if cfg["mode"] == "logit":
        student, losses = distill_logit(student, teacher, scheme, corpus, int(cfg["steps"]), batch=int(cfg["batch"]),
                                        seq_len=int(cfg["seq_len"]), lr=float(cfg["lr"]), seed=int(cfg["seed"]))
    elif cfg["mode"] == "sampling":
        texts = _distill_texts(teacher, corpus, cfg, lambda m, p: generate(
            m, p, int(cfg["gen_len"]), seed=int(cfg["seed"]) + 1, bias_fn=kgw_bias_fn(scheme)))
        student, losses = distill_sampling(student, texts, int(cfg["steps"]), batch=int(cfg["batch"]),
                                           lr=float(cfg["lr"]), seed=int(cfg["seed"]))
    else:
        raise ConfigError("mode must be 'logit' or 'sampling'")
    student.save(os.path.join(args.out, "student"), extra={"role": "student", "baseline": f"kgw-{cfg['mode']}"})
    write_manifest(args.out, "distill-kgw", args.config, cfg, {"seed": cfg["seed"]})
    _emit({"out": args.out, "steps": len(losses), "final_loss": losses[-1] if losses else None})


def cmd_distill_kth(args, cfg):
    from .baselines import kth_generate
    from .training import distill_sampling

    _require(cfg, "teacher")
    scheme = _scheme(read_secret(args.secret), "kth")
    teacher = _load_model(cfg["teacher"], "teacher").freeze()
    corpus = _corpus(cfg)
    texts = _distill_texts(teacher, corpus, cfg, lambda m, p: kth_generate(
        m, scheme, p, int(cfg["gen_len"]), seed=int(cfg["seed"]) + 1))
    student, losses = distill_sampling(_trainable(teacher.copy()), texts, int(cfg["steps"]), batch=int(cfg["batch"]),
                                       lr=float(cfg["lr"]), seed=int(cfg["seed"]))
    student.save(os.path.join(args.out, "student"), extra={"role": "student", "baseline": "kth-sampling"})
    write_manifest(args.out, "distill-kth", args.config, cfg, {"seed": cfg["seed"]})
    _emit({"out": args.out, "steps": len(losses), "final_loss": losses[-1] if losses else None})


def cmd_generate(args, cfg):
    from .baselines import kgw_bias_fn, kth_generate
    from .data import decode, sample_prompts
    from .model import sample_with_bias

    _require(cfg, "model")
    model = _load_model(cfg["model"], "model").freeze()
    corpus = _corpus(cfg)
    seed = int(cfg["seed"])
    prompts = sample_prompts(corpus, "val", int(cfg["n_samples"]), int(cfg["prompt_len"]), seed)
    n_new, temp = int(cfg["gen_len"]), float(cfg["temperature"])
    kind = cfg["watermark"]
    if kind == "none":
        out = sample_with_bias(model, prompts, n_new, temperature=temp, seed=seed + 1)
    elif kind == "pro-decode":
        out = sample_with_bias(model, prompts, n_new, temperature=temp,
                               bias_fn=_load_policy(cfg["policy"]).bias_fn(), seed=seed + 1)
    elif kind == "kgw":
        out = sample_with_bias(model, prompts, n_new, temperature=temp,
                               bias_fn=kgw_bias_fn(_scheme(read_secret(args.secret), "kgw")), seed=seed + 1)
    elif kind == "kth":
        out = kth_generate(model, _scheme(read_secret(args.secret), "kth"), prompts, n_new, seed=seed + 1)
    else:
        raise ConfigError("watermark must be one of none, pro-decode, kgw, kth")
    sample_dir = os.path.join(args.out, "samples")
    os.makedirs(sample_dir, exist_ok=True)
    for i, row in enumerate(out):
        with open(os.path.join(sample_dir, f"{i:05d}.txt"), "wb") as fh:
            fh.write(decode(row))
    np.save(os.path.join(args.out, "tokens.npy"), out)
    np.save(os.path.join(args.out, "prompts.npy"), prompts)
    write_manifest(args.out, "generate", args.config, cfg, {"prompts": seed, "sampling": seed + 1})
    _emit({"out": args.out, "count": len(out)})


def cmd_detect(args, cfg):
    from .baselines import kgw_detect, kth_detect
    from .data import encode
    from .policy import InsufficientLengthError

    if not args.inputs:
        raise UsageError("detect needs at least one input file")
    kind = cfg["kind"]
    if kind == "pro":
        policy = _load_policy(cfg["policy"])
    elif kind in ("kgw", "kth"):
        scheme = _scheme(read_secret(args.secret), kind)
    else:
        raise ConfigError("kind must be one of pro, kgw, kth")
    refs = None
    if kind == "kth" and cfg.get("reference"):
        ref_dir = cfg["reference"]
        if not os.path.isdir(ref_dir):
            raise MissingInputError(f"reference directory not found: {ref_dir}")
        refs = [encode(open(os.path.join(ref_dir, f), "rb").read()) for f in sorted(os.listdir(ref_dir))]
    for path in args.inputs:
        if not os.path.isfile(path):
            raise MissingInputError(f"input file not found: {path}")
        tokens = encode(open(path, "rb").read())
        if kind == "pro":
            r = policy.detect(tokens, threshold=cfg.get("threshold"))
            rec = {"file": path, "z": r.z, "n_scored": r.n_scored, "decision": r.decision}
        elif kind == "kgw":
            if len(tokens) <= scheme.k:
                raise InsufficientLengthError(f"insufficient length: {path} has {len(tokens)} tokens")
            d = kgw_detect(scheme, tokens)
            rec = {"file": path, "p_value": d.p_value, "green_count": d.green_count, "n_scored": d.n_scored}
        else:
            if len(tokens) == 0:
                raise InsufficientLengthError(f"insufficient length: {path} is empty")
            if refs is None:
                from .evaluation import kth_score
                rec = {"file": path, "score": kth_score(scheme, tokens)}
            else:
                d = kth_detect(scheme, tokens, refs)
                rec = {"file": path, "p_value": d.p_value, "d_min": d.d_min}
        _emit(rec)


def cmd_modify(args, cfg):
    from .modify import ModificationSpec, apply_modification, write_modified

    _require(cfg, "model", "modification")
    try:
        spec = ModificationSpec.from_dict(cfg["modification"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad modification: {exc}") from exc
    model = _load_model(cfg["model"], "model")
    base = _load_model(cfg["base"], "base") if spec.kind == "merge" else None
    if spec.kind == "merge" and base is None:
        raise ConfigError("merge needs 'base'")
    corpus = _corpus(cfg) if spec.kind == "finetune" else None
    path = write_modified(args.out, cfg["run"], spec, apply_modification(model, spec, base=base, corpus=corpus))
    write_manifest(path, "modify", args.config, cfg, {"seed": spec.seed})
    _emit({"out": path, "modification": spec.to_dict()})


def _experiment_config(cfg: dict, args):
    from .evaluation import ExperimentConfig
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigError(f"unknown eval config keys: {sorted(unknown)}")
    ec = ExperimentConfig(**cfg)
    if args.out:
        ec.out = args.out
    if ec.watermark_kind in ("kgw", "kth") and not ec.scheme:
        ec.scheme = args.secret or os.environ.get("WM_SECRET_PATH")
    return ec


def cmd_eval(args, cfg):
    from .evaluation import run_experiment

    ec = _experiment_config(cfg, args)
    reports = run_experiment(ec)
    if ec.out:
        write_manifest(ec.out, "eval", args.config, asdict(ec), {"prompts": ec.seed, "null": ec.seed + 1,
                                                                 "wm": ec.seed + 2})
    for r in reports:
        _emit(r.flat())


def cmd_gradcheck(args, cfg):
    from .gradcheck import run_suite

    results = run_suite(count=int(cfg["count"]), h=float(cfg["h"]), tol=float(cfg["tol"]), seed=int(cfg["seed"]))
    passed = sum(r.passed for r in results)
    _emit({"passed": passed, "total": len(results), "max_rel_error": max(r.max_rel_error for r in results)})
    if args.out:
        write_manifest(args.out, "gradcheck", args.config, cfg, {"seed": cfg["seed"]})
    return EXIT_OK if passed == len(results) else EXIT_OTHER


def _sweep_cell(payload):
    """Train (when train keys vary) and evaluate one grid cell; returns flat report rows."""
    cell_cfg, cell_dir, secret = payload
    from .evaluation import ExperimentConfig, run_experiment
    from .policy import WatermarkPolicy
    from .training import train_cawp

    ev = dict(cell_cfg.get("eval", {}))
    teacher = _load_model(cell_cfg["teacher"], "teacher").freeze()
    corpus = _corpus(cell_cfg)
    tc = _train_config(cell_cfg, secret)
    policy = WatermarkPolicy.create(tc.xi_seed, n=tc.n, delta=tc.delta, epsilon=tc.epsilon, d_e=tc.d_e, d_h=tc.d_h)
    student, policy, _ = train_cawp(teacher, _trainable(teacher.copy()), policy, corpus, tc,
                                    log_path=os.path.join(cell_dir, "train_log.jsonl"))
    student.save(os.path.join(cell_dir, "student"))
    policy.save(os.path.join(cell_dir, "policy"))
    ec = ExperimentConfig(run_id=os.path.basename(cell_dir), watermark_kind="pro", teacher=cell_cfg["teacher"],
                          student=os.path.join(cell_dir, "student"), policy=os.path.join(cell_dir, "policy"),
                          corpus=cell_cfg.get("corpus"), out=cell_dir, **ev)
    return [r.flat() for r in run_experiment(ec)]


def cmd_sweep(args, cfg):
    _require(cfg, "teacher")
    grid = cfg.get("grid") or {}
    if not isinstance(grid, dict) or not all(isinstance(v, list) and v for v in grid.values()):
        raise ConfigError("grid must map dotted keys to non-empty lists")
    secret = read_secret(args.secret)
    keys = sorted(grid)
    cells = []
    for i, values in enumerate(itertools.product(*(grid[k] for k in keys))):
        cell = copy.deepcopy({k: v for k, v in cfg.items() if k != "grid"})
        for k, v in zip(keys, values):
            _set_dotted(cell, k, v)
        _train_config(cell, secret)  # validate before spending compute
        cell_dir = os.path.join(args.out, f"cell-{i:03d}")
        os.makedirs(cell_dir, exist_ok=True)
        write_manifest(cell_dir, "sweep-cell", args.config, cell, {"seed": cell.get("train", {}).get("seed", 0)})
        cells.append((dict(zip(keys, values)), (cell, cell_dir, secret)))
    workers = max(1, int(args.workers))
    if workers == 1:
        results = [_sweep_cell(p) for _, p in cells]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_cell, [p for _, p in cells]))
    rows = []
    for (values, _), reps in zip(cells, results):
        for r in reps:
            rows.append({**values, **r})
    write_manifest(args.out, "sweep", args.config, cfg, {})
    import csv
    cols: list[str] = []
    for r in rows:
        cols.extend(c for c in r if c not in cols)
    with open(os.path.join(args.out, "sweep.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        _emit(r)


COMMANDS = {
    "pretrain": (cmd_pretrain, "pretrain the teacher language model", True),
    "train-pro": (cmd_train_pro, "joint policy/student watermark training with the perturbation-aware term", True),
    "distill-kgw": (cmd_distill_kgw, "distill a KGW watermark into a student (logit or sampling)", True),
    "distill-kth": (cmd_distill_kth, "distill a KTH watermark into a student by sampling", True),
    "generate": (cmd_generate, "sample continuations to files", True),
    "detect": (cmd_detect, "score input files, one JSON line each", False),
    "modify": (cmd_modify, "apply a merge/quantize/prune/finetune modification", True),
    "eval": (cmd_eval, "generate, score and report (optionally over a modification grid)", False),
    "gradcheck": (cmd_gradcheck, "finite-difference check of the autodiff engine", False),
    "sweep": (cmd_sweep, "train and evaluate a grid of configurations", True),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wmlab", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, (_, help_text, needs_out) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
        p.add_argument("--out", required=needs_out, help="output directory")
        p.add_argument("--secret", help="key file (default: $WM_SECRET_PATH)")
        if name == "detect":
            p.add_argument("inputs", nargs="*", help="text files to score")
        if name == "sweep":
            p.add_argument("--workers", type=int, default=1)
    return parser


def _classify(exc: BaseException) -> int:
    from .evaluation import MissingCheckpointError
    from .model import CheckpointError
    from .policy import InsufficientLengthError
    from .training import TrainingDivergedError

    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, InsufficientLengthError):
        return EXIT_LENGTH
    if isinstance(exc, (MissingInputError, MissingCheckpointError, CheckpointError, FileNotFoundError)):
        return EXIT_MISSING
    if isinstance(exc, TrainingDivergedError):
        return EXIT_DIVERGED
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    return EXIT_OTHER


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if not args.command:
            raise UsageError("a subcommand is required")
        cfg = resolve_config(args.command, args.config, args.set)
        code = COMMANDS[args.command][0](args, cfg)
        return EXIT_OK if code is None else code
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001  (every failure becomes a JSON record)
        code = _classify(exc)
        record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        if getattr(exc, "dump_path", None):
            record["dump_path"] = exc.dump_path
        print(json.dumps(record), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
