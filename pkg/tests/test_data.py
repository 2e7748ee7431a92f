import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m2l.core import M2LConfig, train
from m2l.data import (
    ConfigError,
    DataFormatError,
    ModalitySpec,
    MultimodalDataset,
    SyntheticConfig,
    batches,
    generate_synthetic,
    load_dataset_dir,
    load_ndjson,
    normalize,
    read_manifest,
    subject_split,
    write_manifest,
    write_ndjson,
)

from conftest import toy_dataset

SPECS = [ModalitySpec("gsr", 2, 3), ModalitySpec("ecg", 1, 3)]


def _line(subject="s0", label=1, gsr=None, ecg=None, **extra):
    rec = {
        "subject_id": subject,
        "label": label,
        "modalities": {
            "gsr": gsr if gsr is not None else [[0.0, 1.0]] * 3,
            "ecg": ecg if ecg is not None else [[0.5]] * 3,
        },
    }
    rec.update(extra)
    return json.dumps(rec)


def _write(tmp_path, lines):
    path = tmp_path / "data.ndjson"
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return path


# ---------------------------------------------------------------- ingestion

def test_empty_file_gives_empty_dataset(tmp_path):
    ds = load_ndjson(_write(tmp_path, []), SPECS)
    assert ds.N == 0 and ds.M == 2
    assert ds.inputs["gsr"].shape == (0, 3, 2)


def test_single_valid_line(tmp_path):
    ds = load_ndjson(_write(tmp_path, [_line()]), SPECS)
    assert ds.N == 1 and ds.labels.tolist() == [1]
    np.testing.assert_array_equal(ds.inputs["ecg"][0], [[0.5]] * 3)
    sample = next(iter(ds.samples))
    assert sample.subject_id == "s0" and set(sample.modalities) == {"gsr", "ecg"}


def test_short_sequence_cites_line(tmp_path):
    specs = [ModalitySpec("gsr", 2, 60)]
    rec = json.dumps({"subject_id": "a", "label": 0, "modalities": {"gsr": [[0.0, 0.0]] * 59}})
    with pytest.raises(DataFormatError, match=r"line 1: .*\(59, 2\).*\(60, 2\)"):
        load_ndjson(_write(tmp_path, [rec]), specs)


@pytest.mark.parametrize(
    "bad,pattern",
    [
        ("{not json", "line 2: invalid JSON"),
        (_line(label=2), "line 2: label must be 0 or 1"),
        (_line(label=True), "line 2: label"),
        (json.dumps({"subject_id": "x", "label": 0}), "line 2: missing field 'modalities'"),
        (json.dumps({"subject_id": "x", "label": 0, "modalities": {"gsr": [[0.0, 0.0]] * 3}}), "line 2: missing modality 'ecg'"),
        (_line(gsr=[[0.0, 1.0]] * 3, ecg=[[0.5]] * 3).replace('"ecg"', '"eeg"'), "line 2: unknown modality 'eeg'"),
        (_line(ecg=[[0.5, 0.1]] * 3), "line 2: modality 'ecg' has shape"),
        (_line(ecg=[["a"]] * 3), "line 2: modality 'ecg' is not a numeric matrix"),
    ],
)
def test_malformed_lines_name_the_line(tmp_path, bad, pattern):
    with pytest.raises(DataFormatError, match=pattern):
        load_ndjson(_write(tmp_path, [_line(), bad]), SPECS)


def test_non_finite_values_rejected(tmp_path):
    bad = _line().replace("0.5", "NaN", 1)
    with pytest.raises(DataFormatError, match="line 1: .*non-finite"):
        load_ndjson(_write(tmp_path, [bad]), SPECS)


def test_round_trip_through_directory(tmp_path):
    ds = toy_dataset(subjects=3, per_subject=2)
    write_ndjson(ds, tmp_path / "data.ndjson")
    write_manifest(ds.specs, tmp_path / "manifest.json")
    back = load_dataset_dir(tmp_path)
    assert back.names == ds.names and back.subjects.tolist() == ds.subjects.tolist()
    for n in ds.names:
        assert back.inputs[n].tobytes() == ds.inputs[n].tobytes()
    specs, label_field = read_manifest(tmp_path / "manifest.json")
    assert label_field == "label" and specs == list(ds.specs)


def test_custom_label_field(tmp_path):
    rec = json.loads(_line())
    rec["stress"] = rec.pop("label")
    ds = load_ndjson(_write(tmp_path, [json.dumps(rec)]), SPECS, label_field="stress")
    assert ds.labels.tolist() == [1]


def test_modality_spec_invariants():
    with pytest.raises(ConfigError):
        ModalitySpec("x", 0, 5)
    with pytest.raises(ConfigError):
        ModalitySpec("x", 3, 0)
    with pytest.raises(ConfigError):
        MultimodalDataset([ModalitySpec("a", 1, 1)] * 2, [], [], {"a": np.zeros((0, 1, 1))})


def test_dataset_views():
    ds = toy_dataset()
    only_a = ds.with_modalities(["a"])
    assert only_a.names == ["a"] and "b" not in only_a.inputs
    with pytest.raises(KeyError, match="available"):
        ds.spec("zzz")
    with pytest.raises(KeyError):
        ds.with_modalities(["zzz"])
    mask = ds.labels == 1
    assert ds.subset(mask).N == int(mask.sum())


# ---------------------------------------------------------------- splitting

def _subject_dataset(n_subjects, per=3):
    return toy_dataset(subjects=n_subjects, per_subject=per)


def test_ten_subjects_split_6_1_3():
    tr, va, te = subject_split(_subject_dataset(10), seed=0)
    assert (len(tr.subject_set()), len(va.subject_set()), len(te.subject_set())) == (6, 1, 3)
    assert tr.N == 18 and va.N == 3 and te.N == 9


def test_split_is_seeded():
    ds = _subject_dataset(20)
    a = [d.subject_set() for d in subject_split(ds, seed=4)]
    b = [d.subject_set() for d in subject_split(ds, seed=4)]
    c = [d.subject_set() for d in subject_split(ds, seed=5)]
    assert a == b and a != c


def test_split_needs_three_subjects():
    with pytest.raises(ValueError):
        subject_split(_subject_dataset(2))


@pytest.mark.parametrize("n_subjects", [3, 5, 10, 40, 97])
def test_split_disjoint_and_complete_over_seeds(n_subjects):
    ds = _subject_dataset(n_subjects, per=1)
    everyone = ds.subject_set()
    for seed in range(100):
        tr, va, te = (d.subject_set() for d in subject_split(ds, seed=seed))
        assert not (tr & va) and not (tr & te) and not (va & te)
        assert tr | va | te == everyone
        assert tr and va and te
        assert abs(len(tr | va) - 0.7 * n_subjects) <= 1


# ---------------------------------------------------------------- normalization

def test_normalize_train_statistics():
    ds = toy_dataset()
    tr, te = ds.subset(range(100)), ds.subset(range(100, 200))
    (ntr, nte), stats = normalize(tr, te)
    for n in ds.names:
        x = ntr.inputs[n].reshape(-1, ds.spec(n).feature_dim)
        assert np.abs(x.mean(axis=0)).max() < 1e-9
        np.testing.assert_allclose(x.std(axis=0), 1.0, atol=1e-12)
        mu, sd = np.asarray(stats[n]["mean"]), np.asarray(stats[n]["std"])
        np.testing.assert_allclose(nte.inputs[n], (te.inputs[n] - mu) / sd, rtol=1e-15)
        own = nte.inputs[n].reshape(-1, ds.spec(n).feature_dim).mean(axis=0)
        assert np.abs(own).max() > 1e-6  # test set keeps its own offset


def test_constant_feature_maps_to_zero():
    ds = toy_dataset(subjects=3, per_subject=4)
    ds.inputs["a"][:, :, 0] = 7.0
    (out,), stats = normalize(ds)
    assert not out.inputs["a"][:, :, 0].any()
    assert stats["a"]["std"][0] == 1e-8


def test_normalize_empty_train_rejected():
    with pytest.raises(ValueError):
        normalize(toy_dataset().subset([]))


# ---------------------------------------------------------------- batching

def test_batch_sizes_keep_short_final_batch():
    assert [len(b) for b in batches(250, 100, seed=0, epoch=0)] == [100, 100, 50]


def test_batch_order_keyed_by_seed_and_epoch():
    a = np.concatenate(batches(250, 100, seed=1, epoch=1))
    b = np.concatenate(batches(250, 100, seed=1, epoch=1))
    c = np.concatenate(batches(250, 100, seed=1, epoch=2))
    assert a.tolist() == b.tolist() and a.tolist() != c.tolist()


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 500), st.integers(1, 130), st.integers(0, 10**6), st.integers(0, 60))
def test_batches_partition_indices(n, size, seed, epoch):
    out = batches(n, size, seed, epoch)
    assert sorted(np.concatenate(out).tolist()) == list(range(n))
    assert all(len(b) == size for b in out[:-1]) and 1 <= len(out[-1]) <= size


def test_batch_errors():
    with pytest.raises(ValueError):
        batches(0, 10)
    with pytest.raises(ConfigError):
        batches(10, 0)


# ---------------------------------------------------------------- synthetic generator

def test_default_profile_shapes():
    ds = generate_synthetic(SyntheticConfig())
    assert ds.N == 2000 and ds.names == ["gsr", "ecg"]
    assert ds.inputs["gsr"].shape == (2000, 60, 12) and ds.inputs["ecg"].shape == (2000, 60, 8)
    assert len(ds.subject_set()) == 40


def test_generator_is_deterministic():
    a, b = generate_synthetic(SyntheticConfig(seed=3)), generate_synthetic(SyntheticConfig(seed=3))
    c = generate_synthetic(SyntheticConfig(seed=4))
    assert a.labels.tobytes() == b.labels.tobytes()
    assert all(a.inputs[n].tobytes() == b.inputs[n].tobytes() for n in a.names)
    assert a.inputs["gsr"].tobytes() != c.inputs["gsr"].tobytes()


@pytest.mark.parametrize(
    "kw",
    [
        {"corruption_prob": [1.5, 0.0]},
        {"label_flip": -0.1},
        {"signal_strength": [1.0]},
        {"signal_strength": [-1.0, 0.3]},
        {"autocorrelation": 1.0},
        {"subjects": 0},
    ],
)
def test_generator_config_invariants(kw):
    with pytest.raises(ConfigError):
        SyntheticConfig(**kw)


def test_generator_config_json_round_trip():
    cfg = SyntheticConfig(seed=9, label_flip=0.1)
    doc = json.loads(json.dumps(cfg.to_dict()))
    assert SyntheticConfig.from_dict(doc) == cfg
    with pytest.raises(ConfigError, match="bogus"):
        SyntheticConfig.from_dict({"bogus": 1})


def test_corrupted_samples_carry_no_signal():
    cfg = SyntheticConfig(modalities=[ModalitySpec("a", 4, 30)], signal_strength=[5.0], corruption_prob=[1.0],
                          subject_bias=0.0, label_flip=0.0, subjects=20, samples_per_subject=20)
    ds = generate_synthetic(cfg)
    means = ds.inputs["a"].mean(axis=1)
    gap = means[ds.labels == 1].mean(axis=0) - means[ds.labels == 0].mean(axis=0)
    assert np.abs(gap).max() < 0.3


def _probe_accuracy(strength, seed):
    from sklearn.linear_model import LogisticRegression

    cfg = SyntheticConfig(
        modalities=[ModalitySpec("m", 8, 60)], signal_strength=[strength], corruption_prob=[0.05], seed=seed
    )
    tr, va, te = subject_split(generate_synthetic(cfg), seed=seed)
    fit_x = np.concatenate([tr.inputs["m"], va.inputs["m"]]).mean(axis=1)
    fit_y = np.concatenate([tr.labels, va.labels])
    clf = LogisticRegression(max_iter=1000).fit(fit_x, fit_y)
    return clf.score(te.inputs["m"].mean(axis=1), te.labels)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_probe_accuracy_monotone_in_signal(seed):
    accs = [_probe_accuracy(s, seed) for s in (0.0, 0.5, 1.0)]
    assert accs[0] <= accs[1] <= accs[2], accs


def _unimodal_test_accuracy(cfg, name, seed):
    ds = generate_synthetic(cfg)
    (tr, va, te), _ = normalize(*subject_split(ds, seed=seed))
    net = train(M2LConfig(seed=seed), tr.with_modalities([name]), va.with_modalities([name])).networks[name]
    return float(np.mean((net.predict_proba(te.inputs[name]) >= 0.5) == te.labels))


@pytest.mark.slow
def test_no_signal_means_chance_accuracy():
    for seed in range(3):
        cfg = SyntheticConfig(signal_strength=[0.0, 0.0], seed=seed)
        acc = _unimodal_test_accuracy(cfg, "gsr", seed)
        assert 0.45 <= acc <= 0.55, (seed, acc)


@pytest.mark.slow
def test_strong_modality_beats_weak_modality():
    gaps = []
    for seed in range(3):
        cfg = SyntheticConfig(corruption_prob=[0.0, 0.0], seed=seed)
        gaps.append(_unimodal_test_accuracy(cfg, "gsr", seed) - _unimodal_test_accuracy(cfg, "ecg", seed))
    assert np.mean(gaps) >= 0.05, gaps
