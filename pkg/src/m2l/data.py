"""Multimodal datasets: NDJSON ingestion, subject-level splits, z-scoring, batching,
and a seeded synthetic generator with controllable per-modality signal."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

STD_FLOOR = 1e-8


class DataFormatError(ValueError):
    """Malformed dataset file; the message names the offending line."""


class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    feature_dim: int
    seq_len: int

    def __post_init__(self):
        if not self.name:
            raise ConfigError("modality name must be non-empty")
        if int(self.feature_dim) < 1 or int(self.seq_len) < 1:
            raise ConfigError(
                f"modality {self.name!r}: feature_dim and seq_len must be >= 1, "
                f"got D={self.feature_dim}, T={self.seq_len}"
            )

    @classmethod
    def from_manifest(cls, entry: dict) -> "ModalitySpec":
        return cls(str(entry["name"]), int(entry["D"]), int(entry["T"]))

    def to_manifest(self) -> dict:
        return {"name": self.name, "D": self.feature_dim, "T": self.seq_len}


@dataclass
class Sample:
    subject_id: str
    label: int
    modalities: dict[str, np.ndarray]


class MultimodalDataset:
    """Aligned samples for M modalities, stored column-wise.

    ``inputs[name]`` has shape ``(N, T, D)``. Instances are treated as
    immutable; ``subset`` and ``with_modalities`` return new views.
    """

    def __init__(self, specs: Sequence[ModalitySpec], subjects, labels, inputs: dict[str, np.ndarray]):
        self.specs = tuple(specs)
        names = [s.name for s in self.specs]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate modality names in {names}")
        self.subjects = np.asarray(subjects, dtype=object)
        self.labels = np.asarray(labels, dtype=np.int64)
        n = len(self.labels)
        if len(self.subjects) != n:
            raise ValueError("subjects and labels differ in length")
        if set(inputs) != set(names):
            raise ValueError(f"inputs cover {sorted(inputs)}, specs declare {sorted(names)}")
        self.inputs = {}
        for spec in self.specs:
            arr = np.asarray(inputs[spec.name], dtype=np.float64)
            if n == 0:
                arr = arr.reshape(0, spec.seq_len, spec.feature_dim)
            if arr.shape != (n, spec.seq_len, spec.feature_dim):
                raise ValueError(f"{spec.name}: expected {(n, spec.seq_len, spec.feature_dim)}, got {arr.shape}")
            self.inputs[spec.name] = arr

    @property
    def N(self) -> int:
        return len(self.labels)

    @property
    def M(self) -> int:
        return len(self.specs)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.specs]

    def __len__(self) -> int:
        return self.N

    def spec(self, name: str) -> ModalitySpec:
        for s in self.specs:
            if s.name == name:
                return s
        raise KeyError(f"unknown modality {name!r}; available: {', '.join(self.names)}")

    def subject_set(self) -> set[str]:
        return set(self.subjects.tolist())

    @property
    def samples(self) -> Iterator[Sample]:
        for i in range(self.N):
            yield Sample(
                str(self.subjects[i]), int(self.labels[i]), {name: self.inputs[name][i] for name in self.names}
            )

    def subset(self, index) -> "MultimodalDataset":
        if not isinstance(index, slice):
            index = np.asarray(index)
            if index.size == 0:
                index = index.astype(np.int64)
        return MultimodalDataset(
            self.specs, self.subjects[index], self.labels[index], {k: v[index] for k, v in self.inputs.items()}
        )

    def with_modalities(self, names: Sequence[str]) -> "MultimodalDataset":
        """View restricted to ``names``; the other modalities are absent, not hidden."""
        specs = [self.spec(n) for n in names]
        return MultimodalDataset(specs, self.subjects, self.labels, {n: self.inputs[n] for n in names})

    @classmethod
    def from_samples(cls, specs: Sequence[ModalitySpec], samples: Sequence[Sample]) -> "MultimodalDataset":
        specs = tuple(specs)
        inputs = {
            s.name: np.stack([smp.modalities[s.name] for smp in samples]) if samples else np.zeros((0, s.seq_len, s.feature_dim))
            for s in specs
        }
        return cls(specs, [smp.subject_id for smp in samples], [smp.label for smp in samples], inputs)


# ---------------------------------------------------------------- NDJSON I/O

def load_ndjson(path, specs: Sequence[ModalitySpec], label_field: str = "label") -> MultimodalDataset:
    """Read one JSON sample per line: ``{subject_id, label, modalities: {name: [[...], ...]}}``."""
    specs = tuple(specs)
    by_name = {s.name: s for s in specs}
    subjects, labels = [], []
    rows: dict[str, list] = {s.name: [] for s in specs}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DataFormatError(f"line {lineno}: expected a JSON object")
            for key in ("subject_id", label_field, "modalities"):
                if key not in rec:
                    raise DataFormatError(f"line {lineno}: missing field {key!r}")
            label = rec[label_field]
            if isinstance(label, bool) or label not in (0, 1):
                raise DataFormatError(f"line {lineno}: label must be 0 or 1, got {label!r}")
            mods = rec["modalities"]
            if not isinstance(mods, dict):
                raise DataFormatError(f"line {lineno}: 'modalities' must be an object")
            unknown = sorted(set(mods) - set(by_name))
            if unknown:
                raise DataFormatError(f"line {lineno}: unknown modality {unknown[0]!r}")
            for spec in specs:
                if spec.name not in mods:
                    raise DataFormatError(f"line {lineno}: missing modality {spec.name!r}")
                try:
                    arr = np.asarray(mods[spec.name], dtype=np.float64)
                except (TypeError, ValueError):
                    raise DataFormatError(f"line {lineno}: modality {spec.name!r} is not a numeric matrix") from None
                if arr.shape != (spec.seq_len, spec.feature_dim):
                    raise DataFormatError(
                        f"line {lineno}: modality {spec.name!r} has shape {arr.shape}, "
                        f"expected ({spec.seq_len}, {spec.feature_dim})"
                    )
                if not np.all(np.isfinite(arr)):
                    raise DataFormatError(f"line {lineno}: modality {spec.name!r} contains non-finite values")
                rows[spec.name].append(arr)
            subjects.append(str(rec["subject_id"]))
            labels.append(int(label))
    inputs = {
        s.name: np.stack(rows[s.name]) if rows[s.name] else np.zeros((0, s.seq_len, s.feature_dim)) for s in specs
    }
    return MultimodalDataset(specs, subjects, labels, inputs)


def write_ndjson(dataset: MultimodalDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(dataset.N):
            rec = {
                "subject_id": str(dataset.subjects[i]),
                "label": int(dataset.labels[i]),
                "modalities": {name: dataset.inputs[name][i].tolist() for name in dataset.names},
            }
            fh.write(json.dumps(rec) + "\n")


def read_manifest(path) -> tuple[list[ModalitySpec], str]:
    doc = json.loads(Path(path).read_text())
    try:
        specs = [ModalitySpec.from_manifest(m) for m in doc["modalities"]]
    except (KeyError, TypeError) as exc:
        raise DataFormatError(f"{path}: malformed manifest ({exc})") from None
    return specs, doc.get("label_field", "label")


def write_manifest(specs: Sequence[ModalitySpec], path, label_field: str = "label") -> None:
    doc = {"modalities": [s.to_manifest() for s in specs], "label_field": label_field}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_dataset_dir(directory) -> MultimodalDataset:
    """Load ``manifest.json`` + ``data.ndjson`` from a dataset directory."""
    directory = Path(directory)
    specs, label_field = read_manifest(directory / "manifest.json")
    return load_ndjson(directory / "data.ndjson", specs, label_field)


# ---------------------------------------------------------------- splitting, scaling, batching

def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def subject_split(
    dataset: MultimodalDataset,
    train_fraction: float = 0.7,
    val_fraction_of_train: float = 0.1,
    seed: int = 0,
) -> tuple[MultimodalDataset, MultimodalDataset, MultimodalDataset]:
    """Partition by subject into (train, val, test); val is carved from the train pool."""
    subjects = sorted(dataset.subject_set())
    n = len(subjects)
    if n < 3:
        raise ValueError(f"subject split needs at least 3 subjects, got {n}")
    if not 0.0 < train_fraction < 1.0 or not 0.0 <= val_fraction_of_train < 1.0:
        raise ConfigError("train_fraction must be in (0, 1) and val_fraction_of_train in [0, 1)")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [subjects[i] for i in order]
    n_pool = min(max(_round_half_up(train_fraction * n), 2), n - 1)
    n_val = min(max(_round_half_up(val_fraction_of_train * n_pool), 1), n_pool - 1)
    val_s = set(shuffled[:n_val])
    train_s = set(shuffled[n_val:n_pool])
    test_s = set(shuffled[n_pool:])
    subj = dataset.subjects
    pick = lambda group: np.flatnonzero([s in group for s in subj])  # noqa: E731
    return dataset.subset(pick(train_s)), dataset.subset(pick(val_s)), dataset.subset(pick(test_s))


def fit_normalization(train: MultimodalDataset) -> dict[str, dict[str, list[float]]]:
    if train.N == 0:
        raise ValueError("cannot fit normalization on an empty training set")
    stats = {}
    for name in train.names:
        x = train.inputs[name].reshape(-1, train.spec(name).feature_dim)
        stats[name] = {"mean": x.mean(axis=0).tolist(), "std": np.maximum(x.std(axis=0), STD_FLOOR).tolist()}
    return stats


def apply_normalization(dataset: MultimodalDataset, stats: dict) -> MultimodalDataset:
    inputs = {}
    for name in dataset.names:
        mu = np.asarray(stats[name]["mean"])
        sd = np.asarray(stats[name]["std"])
        inputs[name] = (dataset.inputs[name] - mu) / sd
    return MultimodalDataset(dataset.specs, dataset.subjects, dataset.labels, inputs)


def normalize(train: MultimodalDataset, *others: MultimodalDataset):
    """Per-feature z-score with train statistics; returns ``([train, *others], stats)``."""
    stats = fit_normalization(train)
    return [apply_normalization(d, stats) for d in (train, *others)], stats


def batches(dataset, batch_size: int = 100, seed: int = 0, epoch: int = 0) -> list[np.ndarray]:
    """Seeded per-epoch shuffle cut into index batches; the short final batch is kept."""
    n = dataset if isinstance(dataset, (int, np.integer)) else len(dataset)
    if n <= 0:
        raise ValueError("cannot batch an empty dataset")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


# ---------------------------------------------------------------- synthetic generator

def _default_modalities() -> list[ModalitySpec]:
    return [ModalitySpec("gsr", 12, 60), ModalitySpec("ecg", 8, 60)]


@dataclass
class SyntheticConfig:
    """Generator settings. The default has two modalities, 12 and 8 features over 60 steps."""

    modalities: list[ModalitySpec] = field(default_factory=_default_modalities)
    subjects: int = 40
    samples_per_subject: int = 50
    signal_strength: list[float] = field(default_factory=lambda: [1.0, 0.3])
    corruption_prob: list[float] = field(default_factory=lambda: [0.05, 0.05])
    label_flip: float = 0.3
    autocorrelation: float = 0.9
    subject_bias: float = 0.5
    positive_rate: float = 0.55
    seed: int = 0

    def __post_init__(self):
        self.modalities = [m if isinstance(m, ModalitySpec) else ModalitySpec(**m) for m in self.modalities]
        self.validate()

    def validate(self) -> None:
        M = len(self.modalities)
        if M < 1:
            raise ConfigError("at least one modality is required")
        names = [m.name for m in self.modalities]
        if len(set(names)) != M:
            raise ConfigError(f"duplicate modality names {names}")
        if len(self.signal_strength) != M or len(self.corruption_prob) != M:
            raise ConfigError("signal_strength and corruption_prob need one entry per modality")
        if any(s < 0 for s in self.signal_strength):
            raise ConfigError("signal_strength entries must be >= 0")
        probs = list(self.corruption_prob) + [self.label_flip, self.positive_rate]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ConfigError("corruption_prob, label_flip and positive_rate must lie in [0, 1]")
        if not 0.0 <= self.autocorrelation < 1.0:
            raise ConfigError("autocorrelation must lie in [0, 1)")
        if self.subjects < 1 or self.samples_per_subject < 1:
            raise ConfigError("subjects and samples_per_subject must be >= 1")
        if self.subject_bias < 0:
            raise ConfigError("subject_bias must be >= 0")

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown synthetic config keys: {', '.join(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = [asdict(m) for m in self.modalities]
        return d


def generate_synthetic(cfg: SyntheticConfig) -> MultimodalDataset:
    """Draw a labelled multimodal dataset.

    Each modality's sequence is ``s_m * (2y - 1) * u_m + b_subject + e_t`` with a
    fixed unit direction ``u_m``, a per-subject offset and stationary AR(1)
    unit-variance noise ``e_t``. With probability ``c_m`` a sequence is replaced
    by pure noise. Emitted labels are the latent class flipped with
    probability ``label_flip``.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    S, K = cfg.subjects, cfg.samples_per_subject
    N = S * K
    phi = cfg.autocorrelation
    innov = np.sqrt(1.0 - phi * phi)
    width = len(str(S - 1))
    subjects = np.array([f"s{i:0{width}d}" for i in range(S) for _ in range(K)], dtype=object)
    subj_idx = np.repeat(np.arange(S), K)
    latent = (rng.random(N) < cfg.positive_rate).astype(np.int64)
    flip = rng.random(N) < cfg.label_flip
    labels = np.where(flip, 1 - latent, latent)
    sign = (2.0 * latent - 1.0)[:, None, None]
    inputs = {}
    for spec, s, c in zip(cfg.modalities, cfg.signal_strength, cfg.corruption_prob):
        T, D = spec.seq_len, spec.feature_dim
        u = rng.normal(size=D)
        u /= np.linalg.norm(u)
        bias = cfg.subject_bias * rng.normal(size=(S, D))
        noise = np.empty((N, T, D))
        noise[:, 0] = rng.normal(size=(N, D))
        for t in range(1, T):
            noise[:, t] = phi * noise[:, t - 1] + innov * rng.normal(size=(N, D))
        x = s * sign * u + bias[subj_idx][:, None, :] + noise
        corrupted = rng.random(N) < c
        x[corrupted] = noise[corrupted]
        inputs[spec.name] = x
    return MultimodalDataset(cfg.modalities, subjects, labels, inputs)
