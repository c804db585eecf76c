"""Command-line experiment runner: ``jointebm {train,eval,convergence,taudiag}``.

Experiments are described by a TOML file::

    seed = 0
    output_dir = "runs/unary"

    [task]
    kind = "multilabel"              # or "label_ranking"
    representation = "permutahedron" # label_ranking only: or "birkhoff"

    [dataset]
    format = "synthetic"             # "libsvm" | "ranking_csv" | "synthetic"
    path = "data/yeast_train.svm"    # file formats only, relative to this file
    n = 300                          # synthetic only
    d = 10
    k = 10
    noise = 1.0
    label_base = 1                   # libsvm only
    split = [0.6, 0.2, 0.2]
    standardize = true

    [train]                          # any TrainConfig field except seed
    loss = "minmin_kl"
    Bprime = 1024
    steps = 5000
    lr_g = 1e-3
    lr_tau = 1e-3

    [grid]                           # optional: validation-set selection
    lr = [1e-2, 1e-3, 1e-4]
    l2 = [0.0, 1e-4, 1e-2]

    [convergence]
    bprimes = [1, 10, "exhaustive"]
    seeds = [0, 1, 2, 3, 4]

The environment variable ``JOINTEBM_OUT`` overrides ``output_dir``; the
``--out`` flag overrides both.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import checkpoint, data, training
from .errors import ConfigError, DivergenceError, EBMError, NotUnary, ParseError
from .evaluation import default_metric, score_dataset, tau_vs_oracle, write_pairs_csv
from .losses import Batch, exact_mle_available, exact_mle_objective
from .spaces import BINARY, BIRKHOFF, PERMUTAHEDRON

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2
OUT_ENV = "JOINTEBM_OUT"

TASKS = {"multilabel": (BINARY,), "label_ranking": (PERMUTAHEDRON, BIRKHOFF)}
FORMATS = ("libsvm", "ranking_csv", "synthetic")


@dataclass
class Experiment:
    raw: dict
    base_dir: Path
    seed: int
    output_dir: Path
    task: str
    representation: str
    dataset: dict
    train: training.TrainConfig
    grid: dict | None
    convergence: dict

    @property
    def config_hash(self) -> str:
        return config_hash(self.raw)


def config_hash(raw: dict) -> str:
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _section(raw, name):
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"{name}: expected a table")
    return sec


def load_experiment(path, out_override=None) -> Experiment:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config: file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config: {exc}") from None
    known = {"seed", "output_dir", "task", "dataset", "train", "grid", "convergence"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"config: unknown key(s) {sorted(unknown)}")
    base = path.parent
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed: must be an integer")
    out = out_override or os.environ.get(OUT_ENV) or raw.get("output_dir", "out")
    out = Path(out) if Path(out).is_absolute() or out_override or os.environ.get(OUT_ENV) else base / out

    task_sec = _section(raw, "task")
    task = task_sec.get("kind", "multilabel")
    if task not in TASKS:
        raise ConfigError(f"task.kind: unknown task {task!r}, expected one of {sorted(TASKS)}")
    representation = task_sec.get("representation", TASKS[task][0])
    if representation not in TASKS[task]:
        raise ConfigError(f"task.representation: {representation!r} is not valid for task {task!r}")

    ds = dict(_section(raw, "dataset"))
    fmt = ds.get("format", "synthetic")
    if fmt not in FORMATS:
        raise ConfigError(f"dataset.format: unknown format {fmt!r}, expected one of {FORMATS}")
    if fmt != "synthetic":
        if "path" not in ds:
            raise ConfigError("dataset.path: required for file datasets")
        p = Path(ds["path"])
        p = p if p.is_absolute() else base / p
        if not p.exists():
            raise ConfigError(f"dataset.path: file not found: {p}")
        ds["path"] = p
        if (fmt == "libsvm") != (task == "multilabel"):
            raise ConfigError(f"dataset.format: {fmt!r} does not fit task {task!r}")
    else:
        for key in ("n", "d", "k"):
            if not isinstance(ds.get(key), int) or ds[key] < 1:
                raise ConfigError(f"dataset.{key}: synthetic datasets need a positive integer")
    fractions = ds.get("split", [0.6, 0.2, 0.2])
    if len(fractions) != 3 or any(f < 0 for f in fractions) or sum(fractions) > 1 + 1e-12:
        raise ConfigError("dataset.split: expected three nonnegative fractions summing to at most 1")

    tr = dict(_section(raw, "train"))
    if "seed" in tr:
        raise ConfigError("train.seed: set the top-level seed instead")
    tr["seed"] = seed
    train_cfg = training.TrainConfig.from_dict(tr)

    grid = raw.get("grid")
    if grid is not None:
        grid = _section(raw, "grid")
        if not grid.get("lr") or not isinstance(grid.get("lr"), list):
            raise ConfigError("grid.lr: expected a nonempty list")
        grid.setdefault("l2", [train_cfg.l2])

    conv = dict(_section(raw, "convergence"))
    conv.setdefault("bprimes", [1, 10, training.EXHAUSTIVE])
    conv.setdefault("seeds", [seed])
    return Experiment(raw, base, seed, out, task, representation, ds, train_cfg, grid, conv)


def load_dataset(exp: Experiment) -> data.Dataset:
    ds = exp.dataset
    fmt = ds.get("format", "synthetic")
    try:
        if fmt == "libsvm":
            return data.parse_libsvm_multilabel(ds["path"], k=ds.get("k"), n_features=ds.get("n_features"),
                                                label_base=ds.get("label_base", 1))
        if fmt == "ranking_csv":
            return data.parse_label_ranking_csv(ds["path"], k=ds.get("k"), representation=exp.representation)
    except (OSError, ParseError) as exc:
        raise ConfigError(f"dataset.path: {exc}") from None
    dseed = ds.get("seed", exp.seed)
    if exp.task == "multilabel":
        return data.synth_multilabel(ds["n"], ds["d"], ds["k"], ds.get("noise", 0.0), dseed)
    return data.synth_label_ranking(ds["n"], ds["d"], ds["k"], ds.get("noise", 0.0), dseed, exp.representation)


@dataclass
class Prepared:
    full: data.Dataset
    split: data.Split
    mean: np.ndarray
    std: np.ndarray

    def part(self, name):
        return self.full.subset(getattr(self.split, f"{name}_idx"))


def prepare(exp: Experiment) -> Prepared:
    ds = load_dataset(exp)
    sp = data.split(len(ds), exp.dataset.get("split", [0.6, 0.2, 0.2]), exp.dataset.get("split_seed", exp.seed))
    if len(sp.train_idx) == 0:
        raise ConfigError("dataset.split: empty training split")
    if exp.dataset.get("standardize", True):
        xs, mean, std = data.standardize(ds.xs, sp.train_idx)
    else:
        xs, mean, std = ds.xs, np.zeros(ds.n_features), np.ones(ds.n_features)
    return Prepared(replace(ds, xs=xs), sp, mean, std)


def _out_dir(exp):
    exp.output_dir.mkdir(parents=True, exist_ok=True)
    return exp.output_dir


def _json_num(v):
    return None if v is None or not np.isfinite(v) else float(v)


# --------------------------------------------------------------------------
# verbs


def cmd_train(args) -> int:
    exp = load_experiment(args.config, args.out)
    prep = prepare(exp)
    train_set, val_set, test_set = prep.part("train"), prep.part("val"), prep.part("test")
    cfg = exp.train
    if exp.grid is not None:
        configs = training.default_grid(cfg, exp.grid["lr"], exp.grid["l2"])
        gr = training.grid_search(configs, prep.full, prep.split)
        cfg, result = gr.best, gr.refit
        print(f"grid: best lr={cfg.lr_g:g} l2={cfg.l2:g} (val scores {gr.scores})")
    else:
        result = training.train(cfg, train_set, val_set if len(val_set) else None)
    out = _out_dir(exp)
    training.write_log_csv(out / "metrics.csv", result.log)
    meta = {"config": exp.raw, "config_hash": exp.config_hash, "train": cfg.to_dict(),
            "feature_mean": prep.mean.tolist(), "feature_std": prep.std.tolist()}
    checkpoint.save(out / "checkpoint.bin", checkpoint.Checkpoint(result.model, result.tau, result.generator, meta))
    test_metric = score_dataset(result.model, test_set).value if len(test_set) else None
    summary = {
        "final_loss": _json_num(result.log[-1]["loss"]) if result.log else None,
        "test_metric": _json_num(test_metric),
        "metric": default_metric(prep.full.space),
        "seed": exp.seed,
        "config_hash": exp.config_hash,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _load_ckpt(path):
    try:
        return checkpoint.load(path)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint: file not found: {path}") from None
    except ParseError as exc:
        raise ConfigError(f"checkpoint: {exc}") from None


def _eval_set(args, ckpt):
    """Test split of ``--config`` or the whole of ``--dataset``, scaled like training."""
    if args.config:
        exp = load_experiment(args.config, args.out)
        raw = load_dataset(exp)
        sp = data.split(len(raw), exp.dataset.get("split", [0.6, 0.2, 0.2]), exp.dataset.get("split_seed", exp.seed))
        ds = raw.subset(sp.test_idx)
    elif args.dataset:
        p = Path(args.dataset)
        if not p.exists():
            raise ConfigError(f"dataset: file not found: {p}")
        try:
            if ckpt.model.space.kind == BINARY:
                ds = data.parse_libsvm_multilabel(p, k=ckpt.model.space.k,
                                                  n_features=ckpt.model.h_spec.input_dim,
                                                  label_base=args.label_base)
            else:
                ds = data.parse_label_ranking_csv(p, k=ckpt.model.space.k, representation=ckpt.model.space.kind)
        except ParseError as exc:
            raise ConfigError(f"dataset: {exc}") from None
    else:
        raise ConfigError("one of --config or --dataset is required")
    if ds.space != ckpt.model.space:
        raise ConfigError(f"dataset space {ds.space} does not match checkpoint space {ckpt.model.space}")
    if ds.n_features != ckpt.model.h_spec.input_dim:
        raise ConfigError(f"dataset has {ds.n_features} features, checkpoint expects {ckpt.model.h_spec.input_dim}")
    mean = np.asarray(ckpt.meta.get("feature_mean", np.zeros(ds.n_features)))
    std = np.asarray(ckpt.meta.get("feature_std", np.ones(ds.n_features)))
    return replace(ds, xs=(ds.xs - mean) / std)


def cmd_eval(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    ds = _eval_set(args, ckpt)
    try:
        report = score_dataset(ckpt.model, ds, args.metric)
    except ValueError as exc:
        raise ConfigError(f"metric: {exc}") from None
    print(f"{report.name} {report.value:.6f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "per_example.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", report.name])
            for i, v in enumerate(report.per_example if report.per_example is not None else []):
                w.writerow([i, repr(float(v))])
    return EXIT_OK


def reference_mle(cfg: training.TrainConfig, dataset: data.Dataset, tol=1e-12):
    """Minimum of the exact negative log-likelihood over ``g`` (L-BFGS from Adam's start)."""
    ref_cfg = replace(cfg, loss="exact_mle")
    model, _, _ = training.init_models(ref_cfg, dataset, np.random.default_rng(cfg.seed))
    batch = Batch(dataset.xs, dataset.ys, np.arange(len(dataset)))

    def fun(w):
        r = exact_mle_objective(model.with_params(w), batch, cfg.cap)
        return r.value, r.grad_g

    res = minimize(fun, model.h_params, jac=True, method="L-BFGS-B",
                   options={"maxiter": 10000, "ftol": tol, "gtol": 1e-10})
    return float(res.fun)


def run_convergence(exp: Experiment):
    """Train once per (seed, B') and collect per-step sampled/exact objectives.

    Returns ``(tables, gaps, reference)``: ``tables[seed]`` is a list of CSV
    rows, ``gaps[b]`` the per-seed final exact-objective gaps to the exact
    MLE minimum.
    """
    bprimes = list(exp.convergence["bprimes"])
    if not bprimes:
        raise ConfigError("convergence.bprimes: empty list")
    for b in bprimes:
        if b != training.EXHAUSTIVE and not (isinstance(b, int) and b >= 1):
            raise ConfigError(f"convergence.bprimes: bad entry {b!r}")
    prep = prepare(exp)
    train_set = prep.part("train")
    probe, _, _ = training.init_models(exp.train, train_set, np.random.default_rng(0))
    if not exact_mle_available(probe, exp.train.cap):
        raise ConfigError("convergence: exact objective unavailable (model is not unary and the space is too large)")
    reference = reference_mle(exp.train, train_set)
    tables, gaps = {}, {b: [] for b in map(str, bprimes)}
    for seed in exp.convergence["seeds"]:
        series = []
        for b in bprimes:
            cfg = replace(exp.train, Bprime=b, seed=int(seed), eval_every=1)
            res = training.train(cfg, train_set)
            series.append(res)
            final = training.final_exact_loss(res, train_set)
            gaps[str(b)].append(final - reference)
        rows = []
        for i in range(exp.train.steps):
            row = [series[0].log[i]["step"]]
            for res in series:
                e = res.log[i]["exact_loss"]
                row += [res.log[i]["loss"], e]
            rows.append(row)
        tables[int(seed)] = rows
    return tables, gaps, reference


def cmd_convergence(args) -> int:
    exp = load_experiment(args.config, args.out)
    tables, gaps, reference = run_convergence(exp)
    out = _out_dir(exp)
    labels = list(gaps)
    header = ["step"] + [c for b in labels for c in (f"loss_{b}", f"exact_{b}")]
    for seed, rows in tables.items():
        with open(out / f"convergence_seed{seed}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([row[0]] + ["" if v is None else repr(float(v)) for v in row[1:]])
    medians = {b: float(np.median(v)) for b, v in gaps.items()}
    summary = {"reference_mle": reference, "gaps": gaps, "median_gap": medians,
               "seeds": list(tables), "config_hash": exp.config_hash}
    (out / "convergence_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for b in labels:
        print(f"B'={b}: median final gap {medians[b]:.6g}")
    return EXIT_OK


def cmd_taudiag(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    if ckpt.tau is None:
        raise ConfigError("checkpoint has no log-partition network")
    ds = _eval_set(args, ckpt)
    try:
        r, pairs = tau_vs_oracle(ckpt.tau, ckpt.model, ds.xs)
    except NotUnary as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    write_pairs_csv(out / "tau_pairs.csv", pairs)
    print(f"pearson {r:.6f}" if np.isfinite(r) else "pearson nan (constant input)")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="jointebm", description="Train and evaluate energy-based structured predictors.")
    sub = p.add_subparsers(dest="verb", required=True)
    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (overrides config and environment)")
    t.set_defaults(func=cmd_train)
    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="evaluate on this experiment's test split")
    e.add_argument("--dataset", help="evaluate on every row of this file")
    e.add_argument("--metric", default="auto", help="f1, micro_f1, kendall or auto")
    e.add_argument("--label-base", type=int, default=1, help="first label id in libsvm files")
    e.add_argument("--out", help="directory for per_example.csv")
    e.set_defaults(func=cmd_eval)
    c = sub.add_parser("convergence", help="sampled vs exact objectives for several B'")
    c.add_argument("--config", required=True)
    c.add_argument("--out")
    c.set_defaults(func=cmd_convergence)
    d = sub.add_parser("taudiag", help="learned log-partition against the exact one")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--config")
    d.add_argument("--dataset")
    d.add_argument("--label-base", type=int, default=1)
    d.add_argument("--out")
    d.set_defaults(func=cmd_taudiag)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, EBMError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
