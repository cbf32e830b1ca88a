"""Batch losses and their exact parameter gradients.

Every loss is written once as a function of a logit block of shape
``(..., M, K)``, returning the loss and its derivative with respect to the
logits. Batch losses use a single group; per-sample (singleton) gradients
evaluate the same function on ``M`` groups of size one.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, log_softmax

from .model import FlatGradient, LinearModel

F1_EPS = 1e-5
IGNORE = -1  # label sentinel for ignored multi-label entries


class LossError(ValueError):
    pass


class LossKind(str, enum.Enum):
    CROSS_ENTROPY = "cross_entropy"
    BCE = "bce"
    F1_BINARY = "f1_binary"
    F1_MACRO_SINGLE = "f1_macro"
    F1_MACRO_MULTI = "f1_macro_multi"
    MASKED_BCE = "masked_bce"

    @property
    def multi_label(self) -> bool:
        return self in (LossKind.BCE, LossKind.F1_MACRO_MULTI, LossKind.MASKED_BCE)


def parse_loss(name: str, multi_label: bool, n_classes: int) -> LossKind:
    """Resolve a loss name; ``"ce"`` and ``"f1"`` pick the variant for the task."""
    key = name.lower().replace("-", "_")
    if key in ("ce", "cross_entropy"):
        return LossKind.BCE if multi_label else LossKind.CROSS_ENTROPY
    if key == "f1":
        if multi_label:
            return LossKind.F1_MACRO_MULTI
        return LossKind.F1_BINARY if n_classes == 2 else LossKind.F1_MACRO_SINGLE
    try:
        return LossKind(key)
    except ValueError:
        raise LossError(f"unknown loss {name!r}") from None


def check_compatible(kind: LossKind, multi_label: bool, n_classes: int) -> None:
    if kind.multi_label != multi_label:
        task = "multi-label" if multi_label else "single-label"
        raise LossError(f"loss {kind.value} cannot be used for a {task} task")
    if kind is LossKind.F1_BINARY and n_classes != 2:
        raise LossError("f1_binary requires exactly 2 classes")


@dataclass
class Batch:
    xs: sp.csr_matrix  # (M, D)
    ys: np.ndarray  # (M,) class indices or (M, K) 0/1 with IGNORE allowed

    def __post_init__(self):
        self.xs = sp.csr_matrix(self.xs, dtype=np.float64)
        self.ys = np.asarray(self.ys, dtype=np.int64)
        if self.xs.shape[0] != self.ys.shape[0]:
            raise LossError("xs and ys differ in length")

    def __len__(self):
        return self.ys.shape[0]

    def take(self, idx) -> "Batch":
        idx = np.asarray(idx, dtype=np.int64)
        return Batch(self.xs[idx], self.ys[idx])


# --- logit-space losses ---------------------------------------------------


def _softplus(z):
    return np.logaddexp(0.0, z)


def _one_hot(y, k):
    return (y[..., None] == np.arange(k)).astype(np.float64)


def _soft_f1(P, T):
    """Macro soft-F1 over the last axis; returns (loss, dL/dP)."""
    tp = (P * T).sum(axis=-2, keepdims=True)
    denom = P.sum(axis=-2, keepdims=True) + T.sum(axis=-2, keepdims=True) + F1_EPS
    k = P.shape[-1]
    loss = 1.0 - (2.0 * tp / denom).sum(axis=(-2, -1)) / k
    d_p = -2.0 * (T * denom - tp) / (denom * denom) / k
    return loss, d_p


def _logit_loss(kind: LossKind, Z, Y, mask=None):
    M, K = Z.shape[-2], Z.shape[-1]
    if kind is LossKind.CROSS_ENTROPY:
        logp = log_softmax(Z, axis=-1)
        T = _one_hot(Y, K)
        loss = -(logp * T).sum(axis=(-2, -1)) / M
        return loss, (np.exp(logp) - T) / M
    if kind is LossKind.F1_MACRO_SINGLE or kind is LossKind.F1_BINARY:
        P = np.exp(log_softmax(Z, axis=-1))
        T = _one_hot(Y, K)
        if kind is LossKind.F1_BINARY:
            loss, d_p1 = _soft_f1(P[..., 1:2], T[..., 1:2])
            # d p1 / d z_j = p1 (delta_j1 - p_j)
            d_z = d_p1 * P[..., 1:2] * (np.eye(K)[1] - P)
            return loss, d_z
        loss, d_p = _soft_f1(P, T)
        return loss, P * (d_p - (d_p * P).sum(axis=-1, keepdims=True))
    if kind is LossKind.F1_MACRO_MULTI:
        P = expit(Z)
        loss, d_p = _soft_f1(P, Y.astype(np.float64))
        return loss, d_p * P * (1.0 - P)
    # BCE / masked BCE
    if mask is None:
        mask = Y != IGNORE
    W = np.asarray(mask, dtype=np.float64)
    Yf = np.where(W > 0, Y, 0).astype(np.float64)
    retained = W.sum(axis=-2, keepdims=True)
    included = retained > 0
    n_incl = included.sum(axis=-1, keepdims=True)
    scale = np.divide(W, retained * np.maximum(n_incl, 1), out=np.zeros_like(W), where=W > 0)
    per_entry = Yf * _softplus(-Z) + (1.0 - Yf) * _softplus(Z)
    loss = (scale * per_entry).sum(axis=(-2, -1))
    return loss, scale * (expit(Z) - Yf)


# --- parameter-space API --------------------------------------------------


def _validate(kind: LossKind, model: LinearModel, batch: Batch, mask):
    if len(batch) == 0:
        raise LossError("empty batch")
    K = model.n_classes
    if kind.multi_label:
        if batch.ys.ndim != 2 or batch.ys.shape[1] != K:
            raise LossError(f"{kind.value} needs (M, {K}) label vectors")
    else:
        if batch.ys.ndim != 1:
            raise LossError(f"{kind.value} needs class-index labels")
        if np.any((batch.ys < 0) | (batch.ys >= K)):
            raise LossError("label out of range")
    if kind is LossKind.F1_BINARY and K != 2:
        raise LossError("f1_binary requires exactly 2 classes")
    if mask is not None:
        if kind is not LossKind.MASKED_BCE:
            raise LossError("a mask is only accepted by masked_bce")
        if np.shape(mask) != batch.ys.shape:
            raise LossError("mask shape must match labels")
    if kind.multi_label:
        ys = batch.ys
        ok = (ys == 0) | (ys == 1)
        if kind is LossKind.MASKED_BCE:
            ok |= ys == IGNORE
        if not np.all(ok):
            raise LossError("multi-label entries must be 0 or 1")


def _grad_from_logits(d_z, xs) -> FlatGradient:
    grad_w = np.asarray((xs.T @ d_z).T)
    return FlatGradient.from_parts(grad_w, d_z.sum(axis=0))


def loss_value(kind: LossKind, model: LinearModel, batch: Batch, mask=None) -> float:
    kind = LossKind(kind)
    _validate(kind, model, batch, mask)
    loss, _ = _logit_loss(kind, model.logits(batch.xs), batch.ys, mask)
    return float(loss)


def loss_and_gradient(kind: LossKind, model: LinearModel, batch: Batch, mask=None):
    kind = LossKind(kind)
    _validate(kind, model, batch, mask)
    loss, d_z = _logit_loss(kind, model.logits(batch.xs), batch.ys, mask)
    return float(loss), _grad_from_logits(d_z, batch.xs)


def loss_gradient(kind: LossKind, model: LinearModel, batch: Batch, mask=None) -> FlatGradient:
    return loss_and_gradient(kind, model, batch, mask)[1]


def singleton_logit_grads(kind: LossKind, model: LinearModel, batch: Batch,
                          ys: Optional[np.ndarray] = None) -> np.ndarray:
    """Logit gradients of the loss on each sample taken as its own batch.

    Returns an (M, K) array; the parameter gradient of sample t is the outer
    product of row t with x_t (weights) plus row t itself (bias).
    """
    kind = LossKind(kind)
    if ys is not None:
        batch = Batch(batch.xs, ys)
    _validate(kind, model, batch, None)
    Z = model.logits(batch.xs)[:, None, :]
    Y = batch.ys[:, None] if batch.ys.ndim == 1 else batch.ys[:, None, :]
    _, d_z = _logit_loss(kind, Z, Y)
    return d_z[:, 0, :]


def singleton_gradient(kind: LossKind, model: LinearModel, batch: Batch, t: int) -> FlatGradient:
    """Explicit flat gradient of sample ``t`` (same code path as the batch loss)."""
    return loss_gradient(kind, model, batch.take([t]))
