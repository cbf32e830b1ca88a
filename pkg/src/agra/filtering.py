"""Gradient-similarity outlier filtering.

For every update batch a comparison batch of the same size is drawn from the
training set. Each sample's singleton gradient is compared with the batch
gradient of the comparison batch by cosine similarity; samples whose
similarity is non-positive are dropped (or relabeled, or, for multi-label
tasks, have individual label entries ignored).
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Dataset
from .losses import IGNORE, Batch, LossKind, loss_gradient, singleton_logit_grads
from .model import FlatGradient, LinearModel

UNDEFINED = math.nan


class FilterError(ValueError):
    pass


class SamplerMode(str, enum.Enum):
    UNIFORM = "uniform"
    CLASS_WEIGHTED = "class_weighted"


class Decision(str, enum.Enum):
    KEEP = "keep"
    REMOVE = "remove"
    RELABEL = "relabel"


def sampling_weights(labels: np.ndarray, n_classes: int, mode: SamplerMode) -> np.ndarray:
    """Per-sample draw probabilities; class-weighted uses 1 / count of the class."""
    n = labels.shape[0]
    if n == 0:
        raise FilterError("empty training set")
    if SamplerMode(mode) is SamplerMode.UNIFORM:
        return np.full(n, 1.0 / n)
    if labels.ndim != 1:
        raise FilterError("class-weighted sampling needs single-label targets")
    counts = np.bincount(labels, minlength=n_classes)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise FilterError(f"class-weighted sampling: classes {missing} have no samples")
    w = 1.0 / counts[labels]
    return w / w.sum()


def sample_comparison_batch(train: Dataset, size: int, mode: SamplerMode, rng,
                            weights: Optional[np.ndarray] = None) -> Batch:
    """Draw ``size`` samples with replacement from ``train``."""
    if size < 1:
        raise FilterError("comparison batch size must be >= 1")
    if weights is None:
        weights = sampling_weights(train.noisy_labels, train.n_classes, mode)
    idx = rng.choice(train.n_rows, size=size, replace=True, p=weights)
    return Batch(train.features[idx], train.noisy_labels[idx])


def similarity(g: FlatGradient, g_com: FlatGradient, exclude_bias: bool = True) -> float:
    """Cosine similarity of two flat gradients; NaN when either norm is zero."""
    if (g.n_classes, g.n_features) != (g_com.n_classes, g_com.n_features):
        raise FilterError("gradient layouts differ")
    a = g.weight_block if exclude_bias else g.values
    b = g_com.weight_block if exclude_bias else g_com.values
    return _cosine(a, b)


def _cosine(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return UNDEFINED
    return float(np.dot(a, b) / (na * nb))


def _positive(s) -> bool:
    return not math.isnan(s) and s > 0


def decide_single(sim_y: float) -> Decision:
    return Decision.KEEP if _positive(sim_y) else Decision.REMOVE


def decide_single_alt(sim_y: float, sim_alt: float) -> Decision:
    """Keep / remove / relabel with an alternative label; ties keep the original."""
    y_pos, alt_pos = _positive(sim_y), _positive(sim_alt)
    if alt_pos and (not y_pos or sim_alt > sim_y):
        return Decision.RELABEL
    if y_pos:
        return Decision.KEEP
    return Decision.REMOVE


@dataclass
class FilterConfig:
    comparison_loss: LossKind = LossKind.CROSS_ENTROPY
    alternative_label: Optional[int] = None
    exclude_bias: bool = True
    threads: int = 1


@dataclass
class SingleResult:
    batch: Batch  # survivors in original order, relabels applied
    kept_index: np.ndarray  # positions in the input batch of the survivors
    decisions: list
    sim_y: np.ndarray
    sim_alt: Optional[np.ndarray]


@dataclass
class MultiResult:
    batch: Batch  # labels with IGNORE where an entry was dropped
    keep_mask: np.ndarray  # (M, K) bool
    sims: np.ndarray  # (M, K)


def _chunked_rows(fn, n_rows: int, threads: int) -> np.ndarray:
    """Evaluate ``fn(lo, hi)`` over row chunks; output slots are fixed per row."""
    threads = max(1, int(threads))
    if threads == 1 or n_rows < 2:
        return fn(0, n_rows)
    bounds = np.linspace(0, n_rows, min(threads, n_rows) + 1).astype(int)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda i: fn(bounds[i], bounds[i + 1]), range(len(bounds) - 1)))
    return np.concatenate(parts, axis=0)


def _projections(batch: Batch, com: FlatGradient, threads: int) -> np.ndarray:
    """(M, K) matrix of x_t . (comparison weight row k)."""
    w_com = com.weight_matrix()
    xs = batch.xs
    return _chunked_rows(lambda lo, hi: np.asarray(xs[lo:hi] @ w_com.T), xs.shape[0], threads)


def _row_norms(batch: Batch) -> np.ndarray:
    sq = batch.xs.multiply(batch.xs).sum(axis=1)
    return np.sqrt(np.asarray(sq).ravel())


def _flat_similarities(d_z, proj, x_norm, com: FlatGradient, exclude_bias: bool) -> np.ndarray:
    """Cosine of each outer-product gradient d_z[t] (x) x_t with the comparison gradient."""
    dot = (d_z * proj).sum(axis=1)
    dz_norm = np.sqrt((d_z * d_z).sum(axis=1))
    if exclude_bias:
        g_norm = dz_norm * x_norm
        c_norm = np.linalg.norm(com.weight_block)
    else:
        dot = dot + d_z @ com.bias_block
        g_norm = dz_norm * np.sqrt(x_norm * x_norm + 1.0)
        c_norm = np.linalg.norm(com.values)
    denom = g_norm * c_norm
    out = np.full(dot.shape, UNDEFINED)
    ok = denom > 0
    out[ok] = dot[ok] / denom[ok]
    return out


def filter_batch_single(model: LinearModel, batch: Batch, comparison: Batch,
                        cfg: FilterConfig) -> SingleResult:
    kind = LossKind(cfg.comparison_loss)
    if kind.multi_label:
        raise FilterError(f"{kind.value} is not a single-label comparison loss")
    g_com = loss_gradient(kind, model, comparison)
    proj = _projections(batch, g_com, cfg.threads)
    x_norm = _row_norms(batch)
    d_y = singleton_logit_grads(kind, model, batch)
    sim_y = _flat_similarities(d_y, proj, x_norm, g_com, cfg.exclude_bias)
    sim_alt = None
    if cfg.alternative_label is not None:
        alt = int(cfg.alternative_label)
        if not 0 <= alt < model.n_classes:
            raise FilterError(f"alternative label {alt} out of range")
        d_alt = singleton_logit_grads(kind, model, batch, np.full(len(batch), alt))
        sim_alt = _flat_similarities(d_alt, proj, x_norm, g_com, cfg.exclude_bias)
        decisions = [decide_single_alt(a, b) for a, b in zip(sim_y, sim_alt)]
    else:
        decisions = [decide_single(a) for a in sim_y]
    ys = batch.ys.copy()
    keep = []
    for t, dec in enumerate(decisions):
        if dec is Decision.REMOVE:
            continue
        if dec is Decision.RELABEL:
            ys[t] = cfg.alternative_label
        keep.append(t)
    kept_index = np.array(keep, dtype=np.int64)
    survivors = Batch(batch.xs[kept_index], ys[kept_index])
    return SingleResult(survivors, kept_index, decisions, sim_y, sim_alt)


def filter_batch_multi(model: LinearModel, batch: Batch, comparison: Batch,
                       cfg: FilterConfig) -> MultiResult:
    """Per-class variant: entry (t, k) is ignored when its class-k similarity is not positive."""
    kind = LossKind(cfg.comparison_loss)
    if kind not in (LossKind.BCE, LossKind.F1_MACRO_MULTI):
        raise FilterError("multi-label comparison loss must be bce or f1_macro_multi")
    g_com = loss_gradient(kind, model, comparison)
    proj = _projections(batch, g_com, cfg.threads)
    x_norm = _row_norms(batch)[:, None]
    d_z = singleton_logit_grads(kind, model, batch)
    w_com = g_com.weight_matrix()
    dot = d_z * proj
    if cfg.exclude_bias:
        g_norm = np.abs(d_z) * x_norm
        c_norm = np.sqrt((w_com * w_com).sum(axis=1))
    else:
        b_com = g_com.bias_block
        dot = dot + d_z * b_com
        g_norm = np.abs(d_z) * np.sqrt(x_norm * x_norm + 1.0)
        c_norm = np.sqrt((w_com * w_com).sum(axis=1) + b_com * b_com)
    denom = g_norm * c_norm
    sims = np.full(d_z.shape, UNDEFINED)
    ok = denom > 0
    sims[ok] = dot[ok] / denom[ok]
    keep = ok & (sims > 0)
    ys = np.where(keep, batch.ys, IGNORE)
    return MultiResult(Batch(batch.xs, ys), keep, sims)


def explicit_similarities(kind: LossKind, model: LinearModel, batch: Batch, comparison: Batch,
                          exclude_bias: bool = True, ys=None) -> np.ndarray:
    """Reference path: materialize each singleton gradient and apply ``similarity``."""
    g_com = loss_gradient(kind, model, comparison)
    b = batch if ys is None else Batch(batch.xs, ys)
    return np.array([similarity(loss_gradient(kind, model, b.take([t])), g_com, exclude_bias)
                     for t in range(len(b))])
