import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m2l.backbone import EncoderConfig, init_network
from m2l.data import MultimodalDataset
from m2l.evaluation import (
    TABLE_COLUMNS,
    MetricsReport,
    PredictionSet,
    accuracy,
    compare,
    confusion,
    consistency_ratio,
    evaluate_reduced,
    f1,
    fuse_modalities,
    train_early_fusion,
    train_unimodal,
)

from conftest import toy_config, toy_dataset


def P(hard, labels=None):
    hard = np.asarray(hard, dtype=float)
    return PredictionSet(hard, labels if labels is not None else hard.astype(int))


# ---------------------------------------------------------------- metric examples

def test_accuracy_examples():
    assert accuracy(P([1, 0, 1])) == 1.0
    assert accuracy(P([1, 1, 0, 0], [1, 0, 0, 0])) == 0.75
    labels = np.array([1] * 7 + [0] * 13)
    assert accuracy(PredictionSet(np.full(20, 0.5), labels)) == 7 / 20


def test_f1_examples():
    assert f1(P([1, 0, 1, 1])) == 1.0
    labels = np.array([1] * 55 + [0] * 45)
    assert f1(PredictionSet(np.ones(100), labels)) == pytest.approx(0.7097, abs=1e-4)
    assert f1(PredictionSet(np.zeros(4), [1, 1, 0, 0])) == 0.0
    assert f1(PredictionSet(np.zeros(3), [0, 0, 0])) == 0.0


def test_consistency_examples():
    a = P([1, 1, 0, 0])
    assert consistency_ratio(a, a) == 1.0
    assert consistency_ratio(a, P([1, 0, 0, 1])) == 0.5
    with pytest.raises(ValueError):
        consistency_ratio(a, P([1, 0]))


def test_empty_prediction_sets_rejected():
    empty = PredictionSet(np.zeros(0), np.zeros(0, int))
    for fn in (accuracy, f1):
        with pytest.raises(ValueError):
            fn(empty)


def test_threshold_is_inclusive():
    pred = PredictionSet([0.5, 0.4999, 0.7], [1, 0, 1])
    assert pred.hard.tolist() == [1, 0, 1]
    assert confusion(pred) == (2, 0, 1, 0)


def test_report_invariants():
    pred = PredictionSet([0.9, 0.2, 0.6, 0.1, 0.8], [1, 0, 0, 1, 1])
    rep = MetricsReport.from_predictions(pred, ["a", "b"], ["a"])
    assert rep.tp + rep.fp + rep.tn + rep.fn == 5
    assert rep.accuracy == (rep.tp + rep.tn) / 5
    assert rep.f1 == 2 * rep.tp / (2 * rep.tp + rep.fp + rep.fn)
    assert rep.reduced and not MetricsReport.from_predictions(pred, ["a"], ["a"]).reduced


# ---------------------------------------------------------------- properties

prob_sets = st.integers(1, 40).flatmap(
    lambda n: st.tuples(
        st.lists(st.floats(0.0, 1.0), min_size=n, max_size=n),
        st.lists(st.floats(0.0, 1.0), min_size=n, max_size=n),
        st.lists(st.integers(0, 1), min_size=n, max_size=n),
        st.randoms(use_true_random=False),
    )
)


@settings(max_examples=300, deadline=None)
@given(prob_sets)
def test_metrics_permutation_invariant_and_bounded(data):
    pa, pb, y, rnd = data
    perm = list(range(len(y)))
    rnd.shuffle(perm)
    a, b = PredictionSet(pa, y), PredictionSet(pb, y)
    ap = PredictionSet(np.asarray(pa)[perm], np.asarray(y)[perm])
    bp = PredictionSet(np.asarray(pb)[perm], np.asarray(y)[perm])
    assert accuracy(a) == accuracy(ap) and f1(a) == f1(ap)
    assert consistency_ratio(a, b) == consistency_ratio(ap, bp)
    assert consistency_ratio(a, a) == 1.0
    for v in (accuracy(a), f1(a), consistency_ratio(a, b)):
        assert 0.0 <= v <= 1.0


# ---------------------------------------------------------------- reduced evaluation

class GuardedInputs(dict):
    def __init__(self, data, forbidden):
        super().__init__(data)
        self.forbidden = forbidden

    def __getitem__(self, key):
        if key in self.forbidden:
            raise AssertionError(f"withheld modality {key!r} was read")
        return super().__getitem__(key)

    def items(self):
        raise AssertionError("bulk access to inputs")

    def values(self):
        raise AssertionError("bulk access to inputs")


def _nets(ds, seed=0):
    return {s.name: init_network(EncoderConfig(s.feature_dim, s.seq_len, hidden=4), [seed, i], s.name)
            for i, s in enumerate(ds.specs)}


def test_singleton_evaluation_never_reads_withheld_modality():
    ds = toy_dataset()
    nets = _nets(ds)
    guarded = MultimodalDataset(ds.specs, ds.subjects, ds.labels, dict(ds.inputs))
    guarded.inputs = GuardedInputs(ds.inputs, {"b"})
    rep = evaluate_reduced(nets, guarded, ["a"])
    direct = PredictionSet(nets["a"].predict_proba(ds.inputs["a"]), ds.labels)
    assert rep.accuracy == accuracy(direct) and rep.f1 == f1(direct)
    assert rep.test_modalities == ["a"] and rep.train_modalities == ["a", "b"] and rep.reduced


def test_full_subset_is_probability_average():
    ds = toy_dataset()
    nets = _nets(ds)
    rep = evaluate_reduced(nets, ds, ["a", "b"])
    avg = (nets["a"].predict_proba(ds.inputs["a"]) + nets["b"].predict_proba(ds.inputs["b"])) / 2
    assert rep.accuracy == accuracy(PredictionSet(avg, ds.labels)) and not rep.reduced


def test_unknown_modality_lists_available():
    ds = toy_dataset()
    with pytest.raises(KeyError, match="available: a, b"):
        evaluate_reduced(_nets(ds), ds, ["zz"])
    with pytest.raises(ValueError):
        evaluate_reduced(_nets(ds), ds, [])


# ---------------------------------------------------------------- baselines

def test_fusion_concatenates_per_timestep():
    ds = toy_dataset(dims=(12, 8), T=4)
    fused = fuse_modalities(ds)
    assert fused.names == ["a+b"] and fused.inputs["a+b"].shape == (ds.N, 4, 20)
    np.testing.assert_array_equal(fused.inputs["a+b"][:, :, 12:], ds.inputs["b"])


def test_fusion_requires_shared_length():
    from m2l.data import ModalitySpec

    specs = [ModalitySpec("a", 1, 3), ModalitySpec("b", 1, 4)]
    ds = MultimodalDataset(specs, ["s"], [1], {"a": np.zeros((1, 3, 1)), "b": np.zeros((1, 4, 1))})
    with pytest.raises(ValueError, match="sequence length"):
        fuse_modalities(ds)


def test_single_modality_fusion_equals_unimodal():
    ds = toy_dataset(signal=(1.0,))
    tr, va = ds.subset(range(150)), ds.subset(range(150, 200))
    cfg = toy_config(total_epochs=2, pretrain_epochs=1)
    fused, _ = train_early_fusion(cfg, tr, va)
    uni = train_unimodal(cfg, tr, va, "a")
    assert all(p.data.tobytes() == q.data.tobytes() for p, q in zip(fused.parameters(), uni.parameters()))


# ---------------------------------------------------------------- comparison harness

@pytest.fixture(scope="module")
def small_comparison():
    ds = toy_dataset(subjects=10, per_subject=12)
    cfg = toy_config(hidden=4, total_epochs=2, pretrain_epochs=1, batch_size=40)
    return ds, cfg, compare(cfg, ds, [0, 1])


def test_compare_rows_mirror_table(small_comparison):
    _, _, table = small_comparison
    keys = [(r["method"], r["train_modalities"], r["test_modalities"], r["reduced_flag"]) for r in table.rows]
    assert keys == [
        ("LSTM", "a", "a", False),
        ("LSTM", "b", "b", False),
        ("LSTM (fusion)", "a+b", "a+b", False),
        ("M2L", "a+b", "a", True),
        ("M2L", "a+b", "b", True),
    ]
    accs = [r["accuracy"] for run in table.per_seed for r in run["reports"] if r["method"] == "M2L" and r["test_modalities"] == ["a"]]
    row = table.row("M2L", "a")
    assert row["acc_mean"] == pytest.approx(np.mean(accs)) and row["acc_std"] == pytest.approx(np.std(accs, ddof=1))
    assert {c["method"] for c in table.consistency} == {"LSTM", "M2L"}


def test_compare_is_deterministic_and_order_independent(small_comparison):
    ds, cfg, table = small_comparison
    assert compare(cfg, ds, [0, 1]).to_json() == table.to_json()
    assert compare(cfg, ds, [0, 1], workers=2).to_json() == table.to_json()


def test_single_seed_std_is_zero():
    ds = toy_dataset(subjects=6, per_subject=10)
    table = compare(toy_config(hidden=4, total_epochs=1, pretrain_epochs=1), ds, [3], include_fusion=False)
    assert len(table.rows) == 4 and all(r["acc_std"] == 0.0 for r in table.rows)


def test_table_csv_columns(small_comparison, tmp_path):
    _, _, table = small_comparison
    table.write_csv(tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert tuple(rows[0]) == TABLE_COLUMNS and len(rows) == 6
    assert json.loads(table.to_json())["seeds"] == [0, 1]


def test_compare_needs_a_seed():
    with pytest.raises(ValueError):
        compare(toy_config(), toy_dataset(), [])
