"""Training loop with per-batch outlier filtering, evaluation and audit ledger."""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit

from . import metrics
from .data import Dataset
from .filtering import (
    Decision,
    FilterConfig,
    SamplerMode,
    filter_batch_multi,
    filter_batch_single,
    sample_comparison_batch,
    sampling_weights,
)
from .losses import Batch, LossKind, check_compatible, loss_and_gradient, parse_loss
from .model import AdamState, LinearModel, adam_step

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class Method(str, enum.Enum):
    AGRA = "agra"
    NO_DENOISING = "no_denoising"


SINGLE_METRICS = ("accuracy", "f1_macro", "f1_binary")
MULTI_METRICS = ("auroc_macro", "f1_macro")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-2
    weight_decay: float = 1e-3
    comparison_loss: Optional[str] = None
    update_loss: Optional[str] = None
    sampler_mode: str = "uniform"
    alternative_label: Optional[int] = None
    exclude_bias: bool = True
    method: str = "agra"
    selection_metric: Optional[str] = None
    seed: int = 0

    @classmethod
    def field_names(cls):
        return {f.name for f in fields(cls)}


@dataclass(frozen=True)
class ResolvedConfig:
    epochs: int
    batch_size: int
    lr: float
    weight_decay: float
    comparison_loss: LossKind
    update_loss: LossKind
    sampler_mode: SamplerMode
    alternative_label: Optional[int]
    exclude_bias: bool
    method: Method
    selection_metric: str
    seed: int


def resolve_config(cfg: TrainConfig, multi_label: bool, n_classes: int) -> ResolvedConfig:
    """Validate ``cfg`` against the task and fill task-dependent defaults."""
    try:
        method = Method(str(cfg.method).lower().replace("-", "_"))
        sampler = SamplerMode(str(cfg.sampler_mode).lower().replace("-", "_"))
        comparison = parse_loss(cfg.comparison_loss or "ce", multi_label, n_classes)
        default_update = "masked_bce" if multi_label else "cross_entropy"
        update = parse_loss(cfg.update_loss or default_update, multi_label, n_classes)
        check_compatible(comparison, multi_label, n_classes)
        check_compatible(update, multi_label, n_classes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if int(cfg.epochs) < 0:
        raise ConfigError("epochs must be >= 0")
    if int(cfg.batch_size) < 1:
        raise ConfigError("batch_size must be >= 1")
    if not cfg.lr > 0 or cfg.weight_decay < 0:
        raise ConfigError("lr must be > 0 and weight_decay >= 0")
    if multi_label and comparison not in (LossKind.BCE, LossKind.F1_MACRO_MULTI):
        raise ConfigError("multi-label comparison loss must be bce or f1_macro_multi")
    if multi_label and update not in (LossKind.MASKED_BCE, LossKind.BCE):
        raise ConfigError("multi-label update loss must be masked_bce")
    if multi_label and sampler is SamplerMode.CLASS_WEIGHTED:
        raise ConfigError("class-weighted sampling is defined for single-label tasks only")
    alt = cfg.alternative_label
    if alt is not None:
        if multi_label or method is not Method.AGRA:
            raise ConfigError("alternative_label requires a single-label task and method agra")
        if not 0 <= int(alt) < n_classes:
            raise ConfigError(f"alternative_label {alt} outside [0, {n_classes})")
        alt = int(alt)
    allowed = MULTI_METRICS if multi_label else SINGLE_METRICS
    selection = cfg.selection_metric or ("auroc_macro" if multi_label else "accuracy")
    if selection not in allowed or (selection == "f1_binary" and n_classes != 2):
        raise ConfigError(f"selection_metric {selection!r} not valid for this task")
    if multi_label:
        update = LossKind.MASKED_BCE
    return ResolvedConfig(int(cfg.epochs), int(cfg.batch_size), float(cfg.lr), float(cfg.weight_decay),
                          comparison, update, sampler, alt, bool(cfg.exclude_bias), method,
                          selection, int(cfg.seed))


@dataclass
class Streams:
    """Independent generators for batch shuffling and comparison sampling."""

    shuffle: np.random.Generator
    comparison: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "Streams":
        a, b = np.random.SeedSequence(seed).spawn(2)
        return cls(np.random.default_rng(a), np.random.default_rng(b))


AUDIT_FIELDS = ("correct_kept", "correct_removed", "mislabeled_kept", "mislabeled_removed",
                "relabeled_to_gold", "relabeled_away")


@dataclass
class AuditRecord:
    epoch: int
    batch: int
    correct_kept: int = 0
    correct_removed: int = 0
    mislabeled_kept: int = 0
    mislabeled_removed: int = 0
    relabeled_to_gold: int = 0
    relabeled_away: int = 0

    @property
    def total(self) -> int:
        return sum(getattr(self, f) for f in AUDIT_FIELDS)


@dataclass
class DecisionRow:
    epoch: int
    batch: int
    sample_index: int
    sim_y: object
    sim_alt: object
    decision: str


@dataclass
class TrainResult:
    model: LinearModel
    history: list
    audit: list = field(default_factory=list)
    decisions: list = field(default_factory=list)
    best_epoch: int = 0


def evaluate(model: LinearModel, ds: Dataset) -> metrics.EvalReport:
    """Task-appropriate metrics against gold labels (noisy labels when gold is absent)."""
    if ds.n_features != model.n_features or ds.n_classes != model.n_classes:
        raise ValueError(
            f"model is {model.n_classes}x{model.n_features}, data is {ds.n_classes}x{ds.n_features}")
    golds = ds.gold_labels if ds.gold_labels is not None else ds.noisy_labels
    logits = model.logits(ds.features)
    k = ds.n_classes
    if not ds.is_multi:
        preds = np.argmax(logits, axis=1)
        f1 = metrics.per_class_f1(preds, golds, k)
        values = {"accuracy": metrics.accuracy(preds, golds), "f1_macro": float(f1.mean())}
        if k == 2:
            values["f1_binary"] = float(f1[1])
        per_class = {"f1": {ds.class_names[j]: float(v) for j, v in enumerate(f1)}}
        return metrics.EvalReport(values, per_class, ds.n_rows)
    scores = expit(logits)
    f1 = metrics.per_class_f1((scores >= 0.5).astype(int), golds, k)
    values = {"f1_macro": float(f1.mean())}
    per_class = {"f1": {ds.class_names[j]: float(v) for j, v in enumerate(f1)}}
    if ds.n_rows >= 2:
        aur = metrics.per_class_auroc(scores, golds)
        if aur:
            values["auroc_macro"] = float(np.mean(list(aur.values())))
            per_class["auroc"] = {ds.class_names[j]: v for j, v in aur.items()}
    return metrics.EvalReport(values, per_class, ds.n_rows)


def _audit_single(rec: AuditRecord, decisions, noisy, gold, alt):
    for dec, y, g in zip(decisions, noisy, gold):
        if dec is Decision.RELABEL:
            if alt == g:
                rec.relabeled_to_gold += 1
            else:
                rec.relabeled_away += 1
            continue
        kept = dec is Decision.KEEP
        if y == g:
            rec.correct_kept += kept
            rec.correct_removed += not kept
        else:
            rec.mislabeled_kept += kept
            rec.mislabeled_removed += not kept


def _audit_multi(rec: AuditRecord, keep_mask, noisy, gold):
    correct = noisy == gold
    rec.correct_kept += int((correct & keep_mask).sum())
    rec.correct_removed += int((correct & ~keep_mask).sum())
    rec.mislabeled_kept += int((~correct & keep_mask).sum())
    rec.mislabeled_removed += int((~correct & ~keep_mask).sum())


def _sim_cell(v):
    return "undefined" if v is None or math.isnan(v) else v


def train(train_ds: Dataset, dev_ds: Dataset, cfg: TrainConfig, *, streams: Optional[Streams] = None,
          threads: int = 1, log_decisions: bool = False) -> TrainResult:
    multi = train_ds.is_multi
    k = train_ds.n_classes
    if dev_ds.n_rows == 0:
        raise ConfigError("dev set is empty")
    if (dev_ds.n_features, dev_ds.n_classes, dev_ds.is_multi) != (train_ds.n_features, k, multi):
        raise ConfigError("train and dev datasets disagree on features, classes or task kind")
    rc = resolve_config(cfg, multi, k)
    streams = streams or Streams.from_seed(rc.seed)
    model = LinearModel.zeros(k, train_ds.n_features)
    state = AdamState.init(model, lr=rc.lr, weight_decay=rc.weight_decay)
    fcfg = FilterConfig(rc.comparison_loss, rc.alternative_label, rc.exclude_bias, threads)
    weights = None
    if rc.method is Method.AGRA:
        weights = sampling_weights(train_ds.noisy_labels, k, rc.sampler_mode)
    has_gold = train_ds.gold_labels is not None
    n = train_ds.n_rows
    result = TrainResult(model.copy(), [])
    best_value = -math.inf

    for epoch in range(1, rc.epochs + 1):
        order = streams.shuffle.permutation(n)
        losses, n_removed, n_relabeled, n_masked = [], 0, 0, 0
        for b, lo in enumerate(range(0, n, rc.batch_size), start=1):
            idx = order[lo:lo + rc.batch_size]
            batch = Batch(train_ds.features[idx], train_ds.noisy_labels[idx])
            rec = AuditRecord(epoch, b)
            if rc.method is Method.NO_DENOISING:
                update = batch
                if has_gold:
                    keep_all = ([Decision.KEEP] * len(idx) if not multi
                                else np.ones(batch.ys.shape, dtype=bool))
                    if multi:
                        _audit_multi(rec, keep_all, batch.ys, train_ds.gold_labels[idx])
                    else:
                        _audit_single(rec, keep_all, batch.ys, train_ds.gold_labels[idx], None)
            else:
                comparison = sample_comparison_batch(train_ds, len(idx), rc.sampler_mode,
                                                     streams.comparison, weights)
                if multi:
                    res = filter_batch_multi(model, batch, comparison, fcfg)
                    update = res.batch
                    n_masked += int((~res.keep_mask).sum())
                    if not res.keep_mask.any():
                        update = None
                    if has_gold:
                        _audit_multi(rec, res.keep_mask, batch.ys, train_ds.gold_labels[idx])
                    if log_decisions:
                        for t, i in enumerate(idx):
                            result.decisions.append(DecisionRow(
                                epoch, b, int(i), ";".join(str(_sim_cell(s)) for s in res.sims[t]), "",
                                "".join("1" if m else "0" for m in res.keep_mask[t])))
                else:
                    res = filter_batch_single(model, batch, comparison, fcfg)
                    update = res.batch if len(res.batch) else None
                    n_removed += sum(d is Decision.REMOVE for d in res.decisions)
                    n_relabeled += sum(d is Decision.RELABEL for d in res.decisions)
                    if has_gold:
                        _audit_single(rec, res.decisions, batch.ys, train_ds.gold_labels[idx],
                                      rc.alternative_label)
                    if log_decisions:
                        for t, i in enumerate(idx):
                            alt = "" if res.sim_alt is None else _sim_cell(res.sim_alt[t])
                            result.decisions.append(DecisionRow(
                                epoch, b, int(i), _sim_cell(res.sim_y[t]), alt, res.decisions[t].value))
            if has_gold:
                result.audit.append(rec)
            if update is None:
                continue
            loss, grad = loss_and_gradient(rc.update_loss, model, update)
            if not math.isfinite(loss) or not np.all(np.isfinite(grad.values)):
                raise TrainingError(f"non-finite update loss at epoch {epoch}, batch {b}: {loss}")
            model, state = adam_step(model, state, grad)
            losses.append(loss)
        report = evaluate(model, dev_ds)
        if rc.selection_metric not in report.metrics:
            raise TrainingError(f"selection metric {rc.selection_metric} unavailable on dev set")
        value = report.metrics[rc.selection_metric]
        result.history.append({
            "epoch": epoch,
            "train_loss": float(np.mean(losses)) if losses else None,
            "n_updates": len(losses),
            "n_removed": n_removed,
            "n_relabeled": n_relabeled,
            "n_masked_entries": n_masked,
            "dev": report.metrics,
        })
        log.info("epoch %d dev %s=%.4f", epoch, rc.selection_metric, value)
        if value > best_value:
            best_value = value
            result.model = model.copy()
            result.best_epoch = epoch
    return result


def audit_summary(records) -> list:
    """Per-epoch fractions of correctly/falsely kept and removed samples.

    The four kept/removed fractions are taken over non-relabeled samples and
    sum to 1; relabel fractions are reported separately over all samples.
    """
    records = list(records)
    if not records:
        raise ValueError("empty audit log")
    by_epoch: dict = {}
    for r in records:
        acc = by_epoch.setdefault(r.epoch, dict.fromkeys(AUDIT_FIELDS, 0))
        for f in AUDIT_FIELDS:
            acc[f] += getattr(r, f)
    rows = []
    for epoch in sorted(by_epoch):
        c = by_epoch[epoch]
        total = sum(c.values())
        plain = total - c["relabeled_to_gold"] - c["relabeled_away"]
        frac = (lambda v, d: v / d if d else 0.0)
        rows.append({
            "epoch": epoch,
            "correct_kept": frac(c["correct_kept"], plain),
            "mislabeled_removed": frac(c["mislabeled_removed"], plain),
            "mislabeled_kept": frac(c["mislabeled_kept"], plain),
            "correct_removed": frac(c["correct_removed"], plain),
            "relabeled_to_gold": frac(c["relabeled_to_gold"], total),
            "relabeled_away": frac(c["relabeled_away"], total),
            "n": total,
        })
    return rows


SUMMARY_FIELDS = ("epoch", "correct_kept", "mislabeled_removed", "mislabeled_kept", "correct_removed",
                  "relabeled_to_gold", "relabeled_away", "n")


# --- file writers ---------------------------------------------------------


def write_history(history, path) -> None:
    Path(path).write_text(json.dumps(history, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_audit(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "batch") + AUDIT_FIELDS)
        for r in records:
            w.writerow([r.epoch, r.batch] + [getattr(r, f) for f in AUDIT_FIELDS])


def read_audit(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = ("epoch", "batch") + AUDIT_FIELDS
        if tuple(reader.fieldnames or ()) != expected:
            raise ValueError(f"{path}: header must be {','.join(expected)}")
        return [AuditRecord(**{k: int(v) for k, v in row.items()}) for row in reader]


def write_summary(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def write_decisions(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "batch", "sample_index", "sim_y", "sim_alt", "decision"))
        for r in rows:
            w.writerow(list(asdict(r).values()))
