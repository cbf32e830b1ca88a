"""``agra`` command line: featurize, inject-noise, train, evaluate, report.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data, trainer
from .model import ModelError, load_model, save_model

log = logging.getLogger("agra")

PATH_KEYS = ("train_dir", "dev_dir", "test_dir", "out_dir")


class UsageError(Exception):
    pass


def _threads() -> int:
    raw = os.environ.get("AGRA_THREADS")
    if raw is None or raw == "":
        return 1
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise UsageError(f"AGRA_THREADS must be a positive integer, got {raw!r}")
    return n


# --- featurize ------------------------------------------------------------


def cmd_featurize(args) -> int:
    if args.vocab_cap < 1:
        raise UsageError("--vocab-cap must be >= 1")
    src = Path(args.input)
    if not src.is_file():
        raise UsageError(f"input file not found: {src}")
    texts, labels, noisy = [], [], []
    for lineno, line in enumerate(src.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            texts.append(str(doc["text"]))
            labels.append(doc["label"])
            noisy.append(doc.get("noisy_label", doc["label"]))
        except (json.JSONDecodeError, KeyError, TypeError):
            raise data.MalformedLine(src, lineno, "expected a JSON object with 'text' and 'label'") from None
    if not texts:
        raise data.DataError("empty corpus")
    multi = isinstance(labels[0], list)
    if multi:
        k = len(labels[0])
        names = [str(j) for j in range(k)]
        gold = np.array(labels, dtype=np.int64)
        noisy_arr = np.array(noisy, dtype=np.int64)
    else:
        if all(isinstance(v, int) for v in labels + noisy):
            k = max(max(labels + noisy) + 1, 2)
            names = [str(j) for j in range(k)]
            index = {j: j for j in range(k)}
        else:
            names = sorted({str(v) for v in labels + noisy})
            k = max(len(names), 2)
            index = {n: j for j, n in enumerate(names)}
            labels, noisy = [str(v) for v in labels], [str(v) for v in noisy]
        gold = np.array([index[v] for v in labels], dtype=np.int64)
        noisy_arr = np.array([index[v] for v in noisy], dtype=np.int64)
    features, vocab = data.tfidf_featurize(texts, args.vocab_cap)
    ds = data.Dataset(features, noisy_arr, k, data.TaskKind.MULTI if multi else data.TaskKind.SINGLE,
                      gold, names)
    data.write_dataset(ds, args.out)
    Path(args.out, "vocab.txt").write_text("".join(t + "\n" for t in vocab), encoding="utf-8")
    return 0


# --- inject-noise ---------------------------------------------------------


def cmd_inject_noise(args) -> int:
    src = Path(args.input)
    if not src.is_dir():
        raise UsageError(f"input directory not found: {src}")
    if not 0.0 <= args.rate <= 1.0 or not 0.0 <= args.sparsity <= 1.0:
        raise UsageError("--rate and --sparsity must lie in [0, 1]")
    ds = data.load_dataset(src)
    if ds.is_multi:
        raise UsageError("noise injection supports single-label datasets only")
    gold = ds.gold_labels if ds.gold_labels is not None else ds.noisy_labels
    spec = data.NoiseSpec(data.NoiseKind(args.kind), args.rate, args.sparsity, args.seed)
    noisy = data.inject_noise(gold, spec, ds.n_classes)
    out = replace(ds, noisy_labels=noisy, gold_labels=gold.copy())
    data.write_dataset(out, args.out)
    vocab = src / "vocab.txt"
    if vocab.is_file() and Path(args.out).resolve() != src.resolve():
        shutil.copyfile(vocab, Path(args.out, "vocab.txt"))
    flipped = int(np.sum(noisy != gold))
    log.info("flipped %d of %d labels", flipped, len(gold))
    return 0


# --- train ----------------------------------------------------------------


def load_experiment(path, overrides: dict):
    """Read an experiment JSON, apply CLI overrides, and validate keys and paths."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: expected a JSON object")
    unknown = set(doc) - set(PATH_KEYS) - trainer.TrainConfig.field_names()
    if unknown:
        raise UsageError(f"{path}: unknown keys {sorted(unknown)}")
    missing = [k for k in PATH_KEYS if k not in doc]
    if missing:
        raise UsageError(f"{path}: missing keys {missing}")
    base = path.parent
    paths = {k: (base / doc.pop(k)) for k in PATH_KEYS}
    for k in ("train_dir", "dev_dir", "test_dir"):
        if not paths[k].is_dir():
            raise UsageError(f"{k} does not exist: {paths[k]}")
    if not paths["out_dir"].parent.is_dir():
        raise UsageError(f"parent of out_dir does not exist: {paths['out_dir']}")
    doc.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = trainer.TrainConfig(**doc)
    except TypeError as exc:
        raise UsageError(str(exc)) from None
    return cfg, paths


def cmd_train(args) -> int:
    overrides = {"seed": args.seed, "method": args.method, "comparison_loss": args.comparison_loss,
                 "alternative_label": args.alt_label}
    if args.weighted_sampling:
        overrides["sampler_mode"] = "class_weighted"
    cfg, paths = load_experiment(args.config, overrides)
    threads = _threads()
    train_ds = data.load_dataset(paths["train_dir"])
    dev_ds = data.load_dataset(paths["dev_dir"])
    test_ds = data.load_dataset(paths["test_dir"])
    try:
        trainer.resolve_config(cfg, train_ds.is_multi, train_ds.n_classes)
    except trainer.ConfigError as exc:
        raise UsageError(str(exc)) from None
    result = trainer.train(train_ds, dev_ds, cfg, threads=threads, log_decisions=args.log_decisions)
    report = trainer.evaluate(result.model, test_ds)
    out = paths["out_dir"]
    out.mkdir(exist_ok=True)
    save_model(result.model, out / "model.json")
    trainer.write_history(result.history, out / "history.json")
    (out / "metrics_test.json").write_text(report.to_json() + "\n", encoding="utf-8")
    if train_ds.gold_labels is not None:
        trainer.write_audit(result.audit, out / "audit.csv")
    if args.log_decisions:
        trainer.write_decisions(result.decisions, out / "decisions.csv")
    print(json.dumps(report.metrics, sort_keys=True))
    return 0


# --- evaluate / report ----------------------------------------------------


def cmd_evaluate(args) -> int:
    if not Path(args.model).is_file():
        raise UsageError(f"model file not found: {args.model}")
    if not Path(args.data).is_dir():
        raise UsageError(f"data directory not found: {args.data}")
    model = load_model(args.model)
    ds = data.load_dataset(args.data)
    print(trainer.evaluate(model, ds).to_json())
    return 0


def cmd_report(args) -> int:
    if not Path(args.audit).is_file():
        raise UsageError(f"audit file not found: {args.audit}")
    rows = trainer.audit_summary(trainer.read_audit(args.audit))
    out = Path(args.out) if args.out else Path(args.audit).with_name("audit_summary.csv")
    trainer.write_summary(rows, out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="agra", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("featurize", help="TF-IDF featurize a JSON-lines corpus")
    f.add_argument("--in", dest="input", required=True, help="JSON lines with 'text' and 'label'")
    f.add_argument("--out", required=True, help="output dataset directory")
    f.add_argument("--vocab-cap", type=int, required=True, help="maximum vocabulary size (>= 1)")
    f.set_defaults(func=cmd_featurize)

    n = sub.add_parser("inject-noise", help="flip labels of a clean dataset")
    n.add_argument("--rate", type=float, required=True, help="flip probability in [0, 1]")
    n.add_argument("--sparsity", type=float, default=0.0, help="zero share of off-diagonal flips (matrix)")
    n.add_argument("--kind", choices=["uniform", "matrix"], default="uniform", help="flip scheme")
    n.add_argument("--seed", type=int, default=0, help="random seed")
    n.add_argument("--in", dest="input", required=True, help="input dataset directory")
    n.add_argument("--out", required=True, help="output dataset directory")
    n.set_defaults(func=cmd_inject_noise)

    t = sub.add_parser("train", help="train a linear model with or without outlier filtering")
    t.add_argument("--config", required=True, help="experiment JSON file")
    t.add_argument("--seed", type=int, help="override the seed")
    t.add_argument("--method", choices=["agra", "no_denoising"], help="override the method")
    t.add_argument("--comparison-loss", help="override the comparison loss (ce, f1, or a loss name)")
    t.add_argument("--weighted-sampling", action="store_true", help="class-weighted comparison sampling")
    t.add_argument("--alt-label", type=int, help="alternative label (single-label only)")
    t.add_argument("--log-decisions", action="store_true", help="write decisions.csv")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a model checkpoint on a dataset")
    e.add_argument("--model", required=True, help="model.json checkpoint")
    e.add_argument("--data", required=True, help="dataset directory")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="summarize audit.csv into per-epoch fractions")
    r.add_argument("--audit", required=True, help="audit.csv written by train")
    r.add_argument("--out", help="output CSV (default: audit_summary.csv next to the audit file)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"agra {args.command}: {exc}", file=sys.stderr)
        return 2
    except (data.DataError, ModelError, trainer.TrainingError, ValueError, OSError) as exc:
        print(f"agra {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
