import math
from fractions import Fraction

import numpy as np
import pytest
import scipy.sparse as sp

from agra.data import Dataset, TaskKind
from agra.losses import Batch, LossKind, loss_value
from agra.model import LinearModel
from agra.trainer import (AuditRecord, ConfigError, Streams, TrainConfig, audit_summary, evaluate, read_audit,
                          resolve_config, train, write_audit)

from conftest import blob_splits, make_blobs


def small_blobs(seed=0, n=200):
    rng = np.random.default_rng(seed)
    X, y = make_blobs(n, rng, dim=5, shift=1.5)
    Xd, yd = make_blobs(100, rng, dim=5, shift=1.5)
    return Dataset(X, y, 2, gold_labels=y), Dataset(Xd, yd, 2)


def test_zero_epochs_returns_zero_model():
    tr, dev = small_blobs()
    res = train(tr, dev, TrainConfig(epochs=0))
    assert res.model == LinearModel.zeros(2, 5) and res.history == []


def test_no_denoising_one_epoch_learns():
    tr, dev = small_blobs(1)
    res = train(tr, dev, TrainConfig(epochs=1, method="no_denoising"))
    majority = max(np.mean(dev.noisy_labels), 1 - np.mean(dev.noisy_labels))
    assert res.history[0]["dev"]["accuracy"] > majority
    full = Batch(tr.features, tr.noisy_labels)
    assert loss_value(LossKind.CROSS_ENTROPY, res.model, full) < math.log(2)


def test_best_model_is_max_of_history():
    tr, dev = small_blobs(2)
    res = train(tr, dev, TrainConfig(epochs=5, lr=0.5))
    values = [h["dev"]["accuracy"] for h in res.history]
    assert evaluate(res.model, dev)["accuracy"] == max(values)
    assert res.best_epoch == values.index(max(values)) + 1


def test_no_denoising_leaves_comparison_stream_untouched():
    tr, dev = small_blobs()
    streams = Streams.from_seed(5)
    before = streams.comparison.bit_generator.state
    train(tr, dev, TrainConfig(epochs=2, method="no_denoising"), streams=streams)
    assert streams.comparison.bit_generator.state == before
    train(tr, dev, TrainConfig(epochs=1), streams=streams)
    assert streams.comparison.bit_generator.state != before


def test_dataset_is_not_mutated_and_run_is_deterministic():
    tr, dev = small_blobs(3)
    tr.noisy_labels[:40] = 1 - tr.noisy_labels[:40]
    labels = tr.noisy_labels.copy()
    a = train(tr, dev, TrainConfig(epochs=3, alternative_label=0))
    b = train(tr, dev, TrainConfig(epochs=3, alternative_label=0), threads=4)
    np.testing.assert_array_equal(tr.noisy_labels, labels)
    assert a.model == b.model and a.history == b.history
    assert [vars(r) for r in a.audit] == [vars(r) for r in b.audit]


def test_audit_counts_partition_batches():
    tr, dev = small_blobs(4, n=101)
    tr.noisy_labels[:30] = 1 - tr.noisy_labels[:30]
    res = train(tr, dev, TrainConfig(epochs=2, batch_size=16, alternative_label=1))
    assert len(res.audit) == 2 * 7
    sizes = [r.total for r in res.audit]
    assert sizes[:7] == [16] * 6 + [5]
    for epoch in (1, 2):
        recs = [r for r in res.audit if r.epoch == epoch]
        mislabeled = sum(r.mislabeled_kept + r.mislabeled_removed for r in recs)
        assert sum(r.total for r in recs) == 101
        assert mislabeled <= 30
    plain = train(tr, dev, TrainConfig(epochs=2, batch_size=16))
    for epoch in (1, 2):
        recs = [r for r in plain.audit if r.epoch == epoch]
        assert sum(r.mislabeled_kept + r.mislabeled_removed for r in recs) == 30


def test_identical_duplicates_never_removed():
    x = sp.csr_matrix(np.tile([[1.0, -2.0, 0.5]], (40, 1)))
    tr = Dataset(x, np.ones(40, int), 2, gold_labels=np.ones(40, int))
    res = train(tr, Dataset(x[:4], np.ones(4, int), 2), TrainConfig(epochs=2, batch_size=8))
    assert all(h["n_removed"] == 0 for h in res.history)


def test_multilabel_training_and_masking():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(120, 6))
    W = rng.normal(size=(3, 6))
    Y = (X @ W.T > 0).astype(int)
    noisy = Y.copy()
    noisy[:20, 0] = 1 - noisy[:20, 0]
    tr = Dataset(sp.csr_matrix(X), noisy, 3, TaskKind.MULTI, gold_labels=Y)
    dev = Dataset(sp.csr_matrix(X[:40]), Y[:40], 3, TaskKind.MULTI)
    res = train(tr, dev, TrainConfig(epochs=3, batch_size=16, lr=0.05, comparison_loss="f1"))
    assert res.history[-1]["n_masked_entries"] > 0
    assert evaluate(res.model, dev)["auroc_macro"] > 0.8
    assert sum(r.total for r in res.audit if r.epoch == 1) == 120 * 3


def test_evaluate_constant_predictors():
    ds = Dataset(sp.csr_matrix(np.eye(4)), [0, 1, 0, 1], 2)
    assert evaluate(LinearModel.zeros(2, 4), ds)["accuracy"] == 0.5
    perfect = LinearModel(np.array([[1.0, -1, 1, -1], [-1, 1, -1, 1]]), np.zeros(2))
    assert evaluate(perfect, ds)["accuracy"] == 1.0
    multi = Dataset(sp.csr_matrix(np.eye(4)), [[1, 0], [1, 1], [0, 0], [0, 1]], 2, TaskKind.MULTI)
    rep = evaluate(LinearModel.zeros(2, 4), multi)
    assert rep["auroc_macro"] == 0.5 and rep.per_class["auroc"] == {"0": 0.5, "1": 0.5}
    with pytest.raises(ValueError):
        evaluate(LinearModel.zeros(2, 3), ds)


def test_audit_summary_examples():
    rows = audit_summary([AuditRecord(1, 1, correct_kept=5)])
    assert rows[0]["correct_kept"] == 1.0
    rec = AuditRecord(1, 1, correct_kept=2, mislabeled_removed=1, mislabeled_kept=1)
    row = audit_summary([rec])[0]
    assert (row["correct_kept"], row["mislabeled_removed"], row["mislabeled_kept"], row["correct_removed"]) == \
        (0.5, 0.25, 0.25, 0.0)
    with pytest.raises(ValueError):
        audit_summary([])


def test_audit_summary_fractions_sum_to_one():
    rng = np.random.default_rng(0)
    recs = [AuditRecord(e, b, *rng.integers(0, 9, 6)) for e in (1, 2, 3) for b in (1, 2)]
    for row in audit_summary(recs):
        total = row["correct_kept"] + row["mislabeled_removed"] + row["mislabeled_kept"] + row["correct_removed"]
        assert abs(total - 1) < 1e-9


def test_audit_csv_roundtrip(tmp_path):
    recs = [AuditRecord(1, 1, 3, 1, 0, 2, 0, 0), AuditRecord(1, 2, 1, 1, 1, 1, 1, 1)]
    write_audit(recs, tmp_path / "audit.csv")
    assert (tmp_path / "audit.csv").read_text().splitlines()[0] == \
        "epoch,batch,correct_kept,correct_removed,mislabeled_kept,mislabeled_removed,relabeled_to_gold,relabeled_away"
    assert read_audit(tmp_path / "audit.csv") == recs


@pytest.mark.parametrize("cfg, multi", [
    (TrainConfig(batch_size=0), False),
    (TrainConfig(alternative_label=0), True),
    (TrainConfig(alternative_label=5), False),
    (TrainConfig(method="no_denoising", alternative_label=0), False),
    (TrainConfig(comparison_loss="bce"), False),
    (TrainConfig(selection_metric="auroc_macro"), False),
    (TrainConfig(sampler_mode="class_weighted"), True),
    (TrainConfig(method="magic"), False),
])
def test_config_validation(cfg, multi):
    with pytest.raises(ConfigError):
        resolve_config(cfg, multi, 3)


@pytest.mark.slow
def test_clean_data_agra_close_to_baseline():
    """AGRA on noise-free labels stays within 2pp of plain training (paired seeds)."""
    diffs = []
    for seed in range(5):
        tr, dev, te = blob_splits(seed, 0.0)
        a = evaluate(train(tr, dev, TrainConfig(seed=seed)).model, te)["accuracy"]
        b = evaluate(train(tr, dev, TrainConfig(seed=seed, method="no_denoising")).model, te)["accuracy"]
        diffs.append(a - b)
    assert abs(np.mean(diffs)) <= 0.02
