"""Metrics, reduced-modality evaluation and the baseline-vs-M2L comparison harness."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np

from .backbone import ModalityNetwork
from .core import M2LConfig, train
from .data import ModalitySpec, MultimodalDataset, normalize, subject_split

TABLE_COLUMNS = ("method", "train_modalities", "test_modalities", "reduced_flag", "acc_mean", "acc_std", "f1_mean", "f1_std")


@dataclass
class PredictionSet:
    probs: np.ndarray
    labels: np.ndarray
    threshold: float = 0.5

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.probs.shape != self.labels.shape or self.probs.ndim != 1:
            raise ValueError(f"probabilities {self.probs.shape} and labels {self.labels.shape} must be equal-length vectors")

    @property
    def hard(self) -> np.ndarray:
        return (self.probs >= self.threshold).astype(np.int64)

    def __len__(self) -> int:
        return len(self.labels)


def _nonempty(pred: PredictionSet) -> None:
    if len(pred) == 0:
        raise ValueError("metrics need at least one prediction")


def confusion(pred: PredictionSet) -> tuple[int, int, int, int]:
    """(TP, FP, TN, FN) for the positive class."""
    h, y = pred.hard, pred.labels
    tp = int(np.sum((h == 1) & (y == 1)))
    fp = int(np.sum((h == 1) & (y == 0)))
    tn = int(np.sum((h == 0) & (y == 0)))
    fn = int(np.sum((h == 0) & (y == 1)))
    return tp, fp, tn, fn


def accuracy(pred: PredictionSet) -> float:
    _nonempty(pred)
    tp, _, tn, _ = confusion(pred)
    return (tp + tn) / len(pred)


def f1(pred: PredictionSet) -> float:
    """2TP / (2TP + FP + FN), or 0 when there are no positives at all."""
    _nonempty(pred)
    tp, fp, _, fn = confusion(pred)
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def consistency_ratio(a: PredictionSet, b: PredictionSet) -> float:
    """Fraction of samples on which two predictors emit the same hard label."""
    if len(a) != len(b):
        raise ValueError(f"prediction sets differ in length: {len(a)} vs {len(b)}")
    _nonempty(a)
    return float(np.mean(a.hard == b.hard))


@dataclass
class MetricsReport:
    accuracy: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    train_modalities: list[str]
    test_modalities: list[str]
    reduced: bool
    method: str = "M2L"
    seed: int | None = None
    consistency: dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, pred: PredictionSet, train_modalities, test_modalities, **meta) -> "MetricsReport":
        tp, fp, tn, fn = confusion(pred)
        train_modalities, test_modalities = list(train_modalities), list(test_modalities)
        reduced = set(test_modalities) != set(train_modalities)
        return cls(accuracy(pred), f1(pred), tp, fp, tn, fn, train_modalities, test_modalities, reduced, **meta)

    def to_dict(self) -> dict:
        return asdict(self)


def predict(networks: Mapping[str, ModalityNetwork], dataset: MultimodalDataset, threshold: float = 0.5) -> PredictionSet:
    """Average the probabilities of every network whose modality is in ``dataset``."""
    probs = [networks[name].predict_proba(dataset.inputs[name]) for name in dataset.names]
    return PredictionSet(np.mean(probs, axis=0), dataset.labels, threshold)


def evaluate_reduced(
    networks: Mapping[str, ModalityNetwork],
    dataset: MultimodalDataset,
    testing_modalities: Sequence[str],
    method: str = "M2L",
    seed: int | None = None,
) -> MetricsReport:
    """Score the networks for ``testing_modalities`` using a view without the others."""
    testing = list(testing_modalities)
    if not testing:
        raise ValueError("testing_modalities must be non-empty")
    unknown = [m for m in testing if m not in networks]
    if unknown:
        raise KeyError(f"unknown modality {unknown[0]!r}; available: {', '.join(networks)}")
    view = dataset.with_modalities(testing)
    return MetricsReport.from_predictions(predict(networks, view), list(networks), testing, method=method, seed=seed)


# ---------------------------------------------------------------- baselines

def fuse_modalities(dataset: MultimodalDataset) -> MultimodalDataset:
    """Concatenate all modalities per timestep into one modality named ``a+b+...``."""
    lens = {s.seq_len for s in dataset.specs}
    if len(lens) != 1:
        raise ValueError(f"early fusion needs a shared sequence length, got {sorted(lens)}")
    if dataset.M == 1:
        return dataset
    name = "+".join(dataset.names)
    spec = ModalitySpec(name, sum(s.feature_dim for s in dataset.specs), lens.pop())
    x = np.concatenate([dataset.inputs[n] for n in dataset.names], axis=2)
    return MultimodalDataset([spec], dataset.subjects, dataset.labels, {name: x})


def train_unimodal(config: M2LConfig, train_set, val_set, name: str) -> ModalityNetwork:
    return train(config, train_set.with_modalities([name]), val_set.with_modalities([name])).networks[name]


def train_early_fusion(config: M2LConfig, train_set, val_set, test_set=None):
    """Single LSTM over per-timestep concatenated features, trained on cross-entropy only."""
    fused_train, fused_val = fuse_modalities(train_set), fuse_modalities(val_set)
    name = fused_train.names[0]
    net = train(replace(config, lam=0.0), fused_train, fused_val).networks[name]
    report = None
    if test_set is not None:
        fused_test = fuse_modalities(test_set)
        report = MetricsReport.from_predictions(
            predict({name: net}, fused_test), train_set.names, train_set.names, method="LSTM (fusion)", seed=config.seed
        )
    return net, report


# ---------------------------------------------------------------- comparison harness

def run_seed(
    config: M2LConfig,
    dataset: MultimodalDataset,
    seed: int,
    train_fraction: float = 0.7,
    val_fraction_of_train: float = 0.1,
    include_fusion: bool = True,
) -> dict:
    """Train every baseline and M2L for one seed and score them on the held-out subjects."""
    cfg = replace(config, seed=seed)
    tr, va, te = subject_split(dataset, train_fraction, val_fraction_of_train, seed)
    (tr, va, te), _ = normalize(tr, va, te)
    names = dataset.names
    reports: list[MetricsReport] = []
    uni_preds = {}
    for name in names:
        net = train_unimodal(cfg, tr, va, name)
        view = te.with_modalities([name])
        uni_preds[name] = predict({name: net}, view)
        reports.append(MetricsReport.from_predictions(uni_preds[name], [name], [name], method="LSTM", seed=seed))
    if include_fusion:
        reports.append(train_early_fusion(cfg, tr, va, te)[1])
    m2l = train(cfg, tr, va).networks
    m2l_preds = {}
    for name in names:
        rep = evaluate_reduced(m2l, te, [name], method="M2L", seed=seed)
        m2l_preds[name] = predict(m2l, te.with_modalities([name]))
        reports.append(rep)
    consistency = []
    for a, b in combinations(names, 2):
        consistency.append({"method": "LSTM", "pair": [a, b], "ratio": consistency_ratio(uni_preds[a], uni_preds[b])})
        consistency.append({"method": "M2L", "pair": [a, b], "ratio": consistency_ratio(m2l_preds[a], m2l_preds[b])})
    return {"seed": seed, "reports": [r.to_dict() for r in reports], "consistency": consistency}


def _std(values: Sequence[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


@dataclass
class ComparisonTable:
    rows: list[dict]
    consistency: list[dict]
    per_seed: list[dict]
    seeds: list[int]

    def to_json(self) -> str:
        return json.dumps(
            {"seeds": self.seeds, "rows": self.rows, "consistency": self.consistency, "per_seed": self.per_seed},
            indent=2,
        )

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TABLE_COLUMNS)
            for row in self.rows:
                w.writerow([repr(v) if isinstance(v, float) else str(v) for v in (row[c] for c in TABLE_COLUMNS)])

    def row(self, method: str, test_modalities: str) -> dict:
        for r in self.rows:
            if r["method"] == method and r["test_modalities"] == test_modalities:
                return r
        raise KeyError((method, test_modalities))


def aggregate(per_seed: list[dict]) -> ComparisonTable:
    """Mean and sample std per (method, train, test) cell, rows in first-seed order."""
    cells: dict[tuple, dict] = {}
    for run in per_seed:
        for rep in run["reports"]:
            key = (rep["method"], "+".join(rep["train_modalities"]), "+".join(rep["test_modalities"]), rep["reduced"])
            cell = cells.setdefault(key, {"acc": [], "f1": []})
            cell["acc"].append(rep["accuracy"])
            cell["f1"].append(rep["f1"])
    rows = []
    for (method, tr, te, reduced), cell in cells.items():
        rows.append({
            "method": method, "train_modalities": tr, "test_modalities": te, "reduced_flag": reduced,
            "acc_mean": float(np.mean(cell["acc"])), "acc_std": _std(cell["acc"]),
            "f1_mean": float(np.mean(cell["f1"])), "f1_std": _std(cell["f1"]),
        })
    ratios: dict[tuple, list] = {}
    for run in per_seed:
        for c in run["consistency"]:
            ratios.setdefault((c["method"], tuple(c["pair"])), []).append(c["ratio"])
    consistency = [
        {"method": m, "pair": list(p), "ratio_mean": float(np.mean(v)), "ratio_std": _std(v)}
        for (m, p), v in ratios.items()
    ]
    return ComparisonTable(rows, consistency, per_seed, [r["seed"] for r in per_seed])


def compare(
    config: M2LConfig,
    dataset: MultimodalDataset,
    seeds: Sequence[int],
    train_fraction: float = 0.7,
    val_fraction_of_train: float = 0.1,
    include_fusion: bool = True,
    workers: int = 1,
) -> ComparisonTable:
    """Unimodal, early-fusion and reduced-modality M2L results over several seeds.

    Seeds are independent; with ``workers > 1`` they run in separate
    processes and are merged back in seed order.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("compare needs at least one seed")
    args = [(config, dataset, s, train_fraction, val_fraction_of_train, include_fusion) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(run_seed, *zip(*args)))
    else:
        per_seed = [run_seed(*a) for a in args]
    return aggregate(per_seed)
