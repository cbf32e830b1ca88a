"""Dataset ingestion, TF-IDF featurization, label-noise injection and splits.

Features are held as ``scipy.sparse.csr_matrix`` with sorted, duplicate-free
column indices. Single-label targets are ``int64`` vectors, multi-label
targets are ``int64`` matrices of 0/1 entries.
"""

from __future__ import annotations

import enum
import json
import math
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

FEATURES_FILE = "features.sfm"
NOISY_FILE = "labels_noisy.txt"
GOLD_FILE = "labels_gold.txt"
META_FILE = "meta.json"


class DataError(ValueError):
    """Raised for any malformed or inconsistent dataset input."""


class MissingFile(DataError):
    pass


class MalformedLine(DataError):
    def __init__(self, path, line, reason):
        self.path, self.line = str(path), line
        super().__init__(f"{path}:{line}: {reason}")


class LabelOutOfRange(DataError):
    def __init__(self, line, value, n_classes):
        self.line = line
        super().__init__(f"label {value} on line {line} outside [0, {n_classes})")


class RowCountMismatch(DataError):
    def __init__(self, n_features, n_labels):
        self.n_features, self.n_labels = n_features, n_labels
        super().__init__(f"features have {n_features} rows but labels have {n_labels}")


class EmptySplit(DataError):
    pass


class TaskKind(str, enum.Enum):
    SINGLE = "single"
    MULTI = "multi"


@dataclass
class Dataset:
    features: sp.csr_matrix
    noisy_labels: np.ndarray
    n_classes: int
    task_kind: TaskKind = TaskKind.SINGLE
    gold_labels: Optional[np.ndarray] = None
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        self.features = sp.csr_matrix(self.features, dtype=np.float64)
        self.features.sort_indices()
        self.task_kind = TaskKind(self.task_kind)
        self.noisy_labels = np.array(self.noisy_labels, dtype=np.int64)
        if self.gold_labels is not None:
            self.gold_labels = np.array(self.gold_labels, dtype=np.int64)
        if not self.class_names:
            self.class_names = [str(k) for k in range(self.n_classes)]
        self.validate()

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def is_multi(self) -> bool:
        return self.task_kind is TaskKind.MULTI

    def validate(self):
        if self.n_classes < 2:
            raise DataError(f"n_classes must be >= 2, got {self.n_classes}")
        if not np.all(np.isfinite(self.features.data)):
            raise DataError("feature values must be finite")
        for labels in (self.noisy_labels, self.gold_labels):
            if labels is None:
                continue
            if labels.shape[0] != self.n_rows:
                raise RowCountMismatch(self.n_rows, labels.shape[0])
            _check_labels(labels, self.n_classes, self.task_kind)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            features=self.features[idx],
            noisy_labels=self.noisy_labels[idx],
            n_classes=self.n_classes,
            task_kind=self.task_kind,
            gold_labels=None if self.gold_labels is None else self.gold_labels[idx],
            class_names=list(self.class_names),
        )


def _check_labels(labels, n_classes, task_kind):
    if task_kind is TaskKind.SINGLE:
        if labels.ndim != 1:
            raise DataError("single-label targets must be a vector")
        bad = np.flatnonzero((labels < 0) | (labels >= n_classes))
        if bad.size:
            raise LabelOutOfRange(int(bad[0]) + 1, int(labels[bad[0]]), n_classes)
    else:
        if labels.ndim != 2 or labels.shape[1] != n_classes:
            raise DataError(f"multi-label targets must have shape (n, {n_classes})")
        bad = np.flatnonzero(np.any((labels != 0) & (labels != 1), axis=1))
        if bad.size:
            raise LabelOutOfRange(int(bad[0]) + 1, labels[bad[0]].tolist(), 2)


# --- file formats ---------------------------------------------------------


def read_sfm(path) -> sp.csr_matrix:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"missing file: {path}")
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise MalformedLine(path, 1, "missing header")
    header = lines[0].split()
    try:
        n_rows, n_cols = int(header[0]), int(header[1])
        if len(header) != 2 or n_rows < 0 or n_cols < 0:
            raise ValueError
    except (ValueError, IndexError):
        raise MalformedLine(path, 1, "header must be 'n_rows n_cols'") from None
    body = lines[1:]
    if len(body) != n_rows:
        raise MalformedLine(path, len(lines), f"expected {n_rows} rows, found {len(body)}")
    indptr, indices, data = [0], [], []
    for i, line in enumerate(body):
        lineno = i + 2
        prev = -1
        for tok in line.split():
            col, sep, val = tok.partition(":")
            try:
                c, v = int(col), float(val)
            except ValueError:
                raise MalformedLine(path, lineno, f"bad entry {tok!r}") from None
            if not sep or c <= prev or c >= n_cols or not math.isfinite(v):
                raise MalformedLine(path, lineno, f"bad entry {tok!r}")
            prev = c
            indices.append(c)
            data.append(v)
        indptr.append(len(indices))
    return sp.csr_matrix(
        (np.array(data, dtype=np.float64), np.array(indices, dtype=np.int64), np.array(indptr)),
        shape=(n_rows, n_cols),
    )


def write_sfm(path, matrix) -> None:
    m = sp.csr_matrix(matrix)
    m.sort_indices()
    out = [f"{m.shape[0]} {m.shape[1]}"]
    for i in range(m.shape[0]):
        lo, hi = m.indptr[i], m.indptr[i + 1]
        out.append(" ".join(f"{c}:{float(v)!r}" for c, v in zip(m.indices[lo:hi], m.data[lo:hi])))
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def read_labels(path, n_classes, task_kind) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"missing file: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        toks = line.split()
        try:
            vals = [int(t) for t in toks]
        except ValueError:
            raise MalformedLine(path, lineno, f"non-integer label {line!r}") from None
        if task_kind is TaskKind.SINGLE:
            if len(vals) != 1:
                raise MalformedLine(path, lineno, "expected one label")
            if not 0 <= vals[0] < n_classes:
                raise LabelOutOfRange(lineno, vals[0], n_classes)
            rows.append(vals[0])
        else:
            if len(vals) != n_classes:
                raise MalformedLine(path, lineno, f"expected {n_classes} entries")
            if any(v not in (0, 1) for v in vals):
                raise LabelOutOfRange(lineno, vals, 2)
            rows.append(vals)
    if task_kind is TaskKind.MULTI:
        return np.array(rows, dtype=np.int64).reshape(len(rows), n_classes)
    return np.array(rows, dtype=np.int64)


def write_labels(path, labels) -> None:
    labels = np.asarray(labels)
    if labels.ndim == 1:
        lines = [str(int(v)) for v in labels]
    else:
        lines = [" ".join(str(int(v)) for v in row) for row in labels]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_meta(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"missing file: {path}")
    try:
        meta = json.loads(path.read_text(encoding="utf-8"))
        meta["n_classes"] = int(meta["n_classes"])
        meta["task_kind"] = TaskKind(meta.get("task_kind", "single"))
    except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
        raise DataError(f"{path}: invalid meta.json ({exc})") from None
    return meta


def load_dataset(dir_path) -> Dataset:
    d = Path(dir_path)
    meta = read_meta(d / META_FILE)
    k, kind = meta["n_classes"], meta["task_kind"]
    features = read_sfm(d / FEATURES_FILE)
    noisy = read_labels(d / NOISY_FILE, k, kind)
    if noisy.shape[0] != features.shape[0]:
        raise RowCountMismatch(features.shape[0], noisy.shape[0])
    gold = None
    if (d / GOLD_FILE).exists():
        gold = read_labels(d / GOLD_FILE, k, kind)
        if gold.shape[0] != features.shape[0]:
            raise RowCountMismatch(features.shape[0], gold.shape[0])
    return Dataset(features, noisy, k, kind, gold, list(meta.get("class_names") or []))


def write_dataset(ds: Dataset, dir_path) -> None:
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    write_sfm(d / FEATURES_FILE, ds.features)
    write_labels(d / NOISY_FILE, ds.noisy_labels)
    if ds.gold_labels is not None:
        write_labels(d / GOLD_FILE, ds.gold_labels)
    meta = {"n_classes": ds.n_classes, "task_kind": ds.task_kind.value, "class_names": ds.class_names}
    (d / META_FILE).write_text(json.dumps(meta) + "\n", encoding="utf-8")


# --- featurization --------------------------------------------------------

_TOKEN = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list:
    return _TOKEN.findall(text.lower())


def tfidf_featurize(docs: Sequence[str], vocab_cap: int):
    """TF-IDF rows for ``docs`` over the ``vocab_cap`` most frequent terms.

    tf is the raw count, idf is ``ln(N / df) + 1``, rows are not normalized.
    Terms are ranked by total corpus count, ties broken lexicographically;
    the kept vocabulary is returned in lexicographic (column) order.
    """
    if len(docs) == 0:
        raise DataError("empty corpus")
    if vocab_cap < 1:
        raise DataError("vocab_cap must be >= 1")
    counts = [Counter(tokenize(doc)) for doc in docs]
    total: Counter = Counter()
    df: Counter = Counter()
    for c in counts:
        total.update(c)
        df.update(c.keys())
    ranked = sorted(total, key=lambda t: (-total[t], t))[:vocab_cap]
    vocab = sorted(ranked)
    col = {t: j for j, t in enumerate(vocab)}
    n = len(docs)
    idf = {t: math.log(n / df[t]) + 1.0 for t in vocab}
    indptr, indices, data = [0], [], []
    for c in counts:
        row = sorted((col[t], tf * idf[t]) for t, tf in c.items() if t in col)
        indices.extend(j for j, _ in row)
        data.extend(v for _, v in row)
        indptr.append(len(indices))
    mat = sp.csr_matrix(
        (np.array(data, dtype=np.float64), np.array(indices, dtype=np.int64), np.array(indptr)),
        shape=(n, len(vocab)),
    )
    return mat, vocab


# --- noise injection ------------------------------------------------------


class NoiseKind(str, enum.Enum):
    UNIFORM = "uniform"
    MATRIX = "matrix"


@dataclass(frozen=True)
class NoiseSpec:
    kind: NoiseKind = NoiseKind.UNIFORM
    rate: float = 0.2
    sparsity: float = 0.0
    seed: int = 0


def flip_transition_matrix(n_classes: int, rate: float, sparsity: float, rng) -> np.ndarray:
    """Row-stochastic flip matrix with ``1 - rate`` on the diagonal.

    Each row spreads ``rate`` evenly over ``floor((1 - sparsity)(K - 1))``
    randomly chosen off-diagonal classes (at least one), so the share of zero
    off-diagonal entries is at least ``sparsity`` whenever that is attainable.
    """
    k = n_classes
    n_targets = max(1, math.floor((1.0 - sparsity) * (k - 1) + 1e-9))
    mat = np.zeros((k, k))
    for c in range(k):
        others = np.array([j for j in range(k) if j != c])
        targets = rng.choice(others, size=n_targets, replace=False)
        mat[c, targets] = rate / n_targets
        mat[c, c] = 1.0 - rate
    return mat


def inject_noise(gold, spec: NoiseSpec, n_classes: int) -> np.ndarray:
    gold = np.asarray(gold, dtype=np.int64)
    if n_classes < 2:
        raise DataError("noise injection needs at least 2 classes")
    if not 0.0 <= spec.rate <= 1.0:
        raise DataError(f"noise rate {spec.rate} outside [0, 1]")
    if not 0.0 <= spec.sparsity <= 1.0:
        raise DataError(f"sparsity {spec.sparsity} outside [0, 1]")
    if gold.ndim != 1:
        raise DataError("noise injection supports single-label targets only")
    _check_labels(gold, n_classes, TaskKind.SINGLE)
    rng = np.random.default_rng(spec.seed)
    kind = NoiseKind(spec.kind)
    matrix = None
    if kind is NoiseKind.MATRIX:
        matrix = flip_transition_matrix(n_classes, spec.rate, spec.sparsity, rng)
    flip = rng.random(gold.shape[0]) < spec.rate
    noisy = gold.copy()
    for i in np.flatnonzero(flip):
        y = gold[i]
        if kind is NoiseKind.UNIFORM:
            r = int(rng.integers(n_classes - 1))
            noisy[i] = r if r < y else r + 1
        else:
            row = matrix[y].copy()
            row[y] = 0.0
            noisy[i] = rng.choice(n_classes, p=row / row.sum())
    return noisy


# --- splits ---------------------------------------------------------------


def split_dataset(ds: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise DataError("fractions must be three positive numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError("fractions must sum to 1")
    n = ds.n_rows
    n_train = math.floor(n * fractions[0] + 1e-9)
    n_dev = math.floor(n * fractions[1] + 1e-9)
    n_test = n - n_train - n_dev
    if min(n_train, n_dev, n_test) <= 0:
        raise EmptySplit(f"split sizes {(n_train, n_dev, n_test)} contain an empty part")
    perm = np.random.default_rng(seed).permutation(n)
    parts = (perm[:n_train], perm[n_train:n_train + n_dev], perm[n_train + n_dev:])
    return tuple(ds.subset(np.sort(p)) for p in parts)


def dataset_files_exist(dir_path) -> bool:
    d = Path(dir_path)
    return all(os.path.isfile(d / f) for f in (FEATURES_FILE, NOISY_FILE, META_FILE))
