"""K-class linear classifier, parameter flattening and the Adam optimizer."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping

import numpy as np
import scipy.sparse as sp


class ModelError(ValueError):
    pass


@dataclass
class LinearModel:
    weights: np.ndarray  # (K, D)
    bias: np.ndarray  # (K,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ModelError("weights must be (K, D) and bias (K,)")

    @classmethod
    def zeros(cls, n_classes: int, n_features: int) -> "LinearModel":
        return cls(np.zeros((n_classes, n_features)), np.zeros(n_classes))

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]

    @property
    def n_params(self) -> int:
        return self.weights.size + self.bias.size

    def copy(self) -> "LinearModel":
        return LinearModel(self.weights.copy(), self.bias.copy())

    def logits(self, X) -> np.ndarray:
        """Logits for a batch ``X`` of shape (M, D), sparse or dense."""
        if X.shape[1] != self.n_features:
            raise ModelError(f"input has {X.shape[1]} features, model expects {self.n_features}")
        if sp.issparse(X):
            return np.asarray(X @ self.weights.T) + self.bias
        return np.asarray(X, dtype=np.float64) @ self.weights.T + self.bias

    def __eq__(self, other):
        if not isinstance(other, LinearModel):
            return NotImplemented
        return np.array_equal(self.weights, other.weights) and np.array_equal(self.bias, other.bias)


def forward(model: LinearModel, x) -> np.ndarray:
    """Logits for one sparse row given as ``{col: value}`` or a 1xD sparse matrix."""
    if sp.issparse(x):
        if x.shape != (1, model.n_features):
            raise ModelError(f"expected a 1x{model.n_features} row, got {x.shape}")
        return model.logits(x)[0]
    if not isinstance(x, Mapping):
        raise TypeError("x must be a mapping or a sparse row")
    out = model.bias.copy()
    for j, v in x.items():
        if not 0 <= j < model.n_features:
            raise ModelError(f"feature index {j} out of range [0, {model.n_features})")
        out += model.weights[:, j] * v
    return out


@dataclass(frozen=True)
class FlatGradient:
    """Flattened gradient: K*D weight entries (class-major) then K bias entries."""

    values: np.ndarray
    n_classes: int
    n_features: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.shape != (self.n_classes * self.n_features + self.n_classes,):
            raise ModelError("gradient length does not match K*D + K")

    @property
    def weight_block(self) -> np.ndarray:
        return self.values[: self.n_classes * self.n_features]

    @property
    def bias_block(self) -> np.ndarray:
        return self.values[self.n_classes * self.n_features:]

    def weight_matrix(self) -> np.ndarray:
        return self.weight_block.reshape(self.n_classes, self.n_features)

    def slice(self, k: int) -> np.ndarray:
        """Class ``k``'s weight row followed by its bias entry."""
        d = self.n_features
        return np.concatenate([self.values[k * d:(k + 1) * d], self.bias_block[k:k + 1]])

    @classmethod
    def from_parts(cls, grad_w, grad_b) -> "FlatGradient":
        grad_w = np.asarray(grad_w, dtype=np.float64)
        return cls(np.concatenate([grad_w.ravel(), np.asarray(grad_b, dtype=np.float64)]),
                   grad_w.shape[0], grad_w.shape[1])


def flatten_params(model: LinearModel) -> np.ndarray:
    return np.concatenate([model.weights.ravel(), model.bias])


def unflatten(vector, n_classes: int, n_features: int) -> LinearModel:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (n_classes * n_features + n_classes,):
        raise ModelError(f"expected {n_classes * n_features + n_classes} parameters, got {vector.size}")
    split = n_classes * n_features
    return LinearModel(vector[:split].reshape(n_classes, n_features).copy(), vector[split:].copy())


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def init(cls, model: LinearModel, **hyper) -> "AdamState":
        n = model.n_params
        state = cls(np.zeros(n), np.zeros(n), **hyper)
        if state.lr <= 0 or not 0 < state.beta1 < 1 or not 0 < state.beta2 < 1:
            raise ModelError("invalid Adam hyperparameters")
        if state.eps_opt <= 0 or state.weight_decay < 0:
            raise ModelError("invalid Adam hyperparameters")
        return state


def adam_step(model: LinearModel, state: AdamState, grad: FlatGradient):
    """One Adam update with coupled L2 weight decay; returns (model, state)."""
    theta = flatten_params(model)
    g = grad.values
    if g.shape != theta.shape:
        raise ModelError("gradient length does not match model")
    if not np.all(np.isfinite(g)):
        raise ModelError("non-finite gradient")
    if state.weight_decay:
        g = g + state.weight_decay * theta
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    theta = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps_opt)
    return unflatten(theta, model.n_classes, model.n_features), replace(state, m=m, v=v, step=t)


# --- checkpoint -----------------------------------------------------------


def _num_list(values) -> str:
    return "[" + ", ".join(format(float(v), ".17g") for v in values) + "]"


def model_to_json(model: LinearModel) -> str:
    return (
        "{"
        f'"n_classes": {model.n_classes}, "n_features": {model.n_features}, '
        f'"weights": {_num_list(model.weights.ravel())}, "bias": {_num_list(model.bias)}'
        "}\n"
    )


def save_model(model: LinearModel, path) -> None:
    Path(path).write_text(model_to_json(model), encoding="utf-8")


def load_model(path) -> LinearModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        k, d = int(doc["n_classes"]), int(doc["n_features"])
        return unflatten(list(doc["weights"]) + list(doc["bias"]), k, d)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"cannot read model checkpoint {path}: {exc}") from None
