"""Cooperative multimodal training with a gated, one-directional feature-alignment term.

Each modality network minimises its own cross-entropy plus, for every partner
that currently has a lower cross-entropy on the minibatch, a penalty on the
cosine misalignment between its features and the partner's (detached)
features. The penalty weight for partner ``i`` is ``exp(beta * dL) - 1`` where
``dL = L_m - L_i > 0``; weaker partners contribute nothing.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .backbone import EncoderConfig, ModalityNetwork, init_network, name_key
from .data import ConfigError, MultimodalDataset, batches
from .tensor import Tape, Tensor

CURVE_COLUMNS = ("epoch", "modality", "split", "ce", "mean_gate_in", "mean_gate_out", "lr")


class NumericalError(ArithmeticError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class GateConfig:
    beta: float = 2.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigError(f"beta must be > 0, got {self.beta}")


@dataclass
class M2LConfig:
    lam: float = 0.05
    beta: float = 2.0
    batch_size: int = 100
    total_epochs: int = 50
    pretrain_epochs: int = 20
    lr0: float = 1e-3
    lr_decay_every: int = 10
    lr_decay_factor: float = 0.1
    early_stop_patience: int = 10
    lr_restart_on_cotrain: bool = False
    patience_from_cotrain: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    hidden: int = 64
    layers: int = 2
    dropout: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        GateConfig(self.beta)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.total_epochs < 1 or not 0 <= self.pretrain_epochs <= self.total_epochs:
            raise ConfigError("need total_epochs >= 1 and 0 <= pretrain_epochs <= total_epochs")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        if not (self.lr0 > 0 and self.lr_decay_every >= 1 and self.lr_decay_factor > 0):
            raise ConfigError("learning-rate settings must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("invalid Adam coefficients")
        if self.hidden < 1 or self.layers < 1 or not 0 <= self.dropout < 1:
            raise ConfigError("invalid encoder shape or dropout")

    @property
    def gate(self) -> GateConfig:
        return GateConfig(self.beta)

    def encoder(self, input_dim: int, seq_len: int) -> EncoderConfig:
        return EncoderConfig(input_dim, seq_len, self.hidden, self.layers, self.dropout)

    # JSON uses "lambda" for the regularisation weight
    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def keys(cls) -> set[str]:
        return {"lambda" if f.name == "lam" else f.name for f in fields(cls)}

    @classmethod
    def from_dict(cls, doc: dict) -> "M2LConfig":
        doc = dict(doc)
        unknown = sorted(set(doc) - cls.keys())
        if unknown:
            raise ConfigError(f"unknown training config keys: {', '.join(unknown)}")
        if "lambda" in doc:
            doc["lam"] = doc.pop("lambda")
        return cls(**doc)


# ---------------------------------------------------------------- losses and gate

def ce_loss(pred: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy of clamped probabilities against 0/1 labels."""
    y = np.asarray(labels, dtype=np.float64)
    if pred.shape != y.shape or y.ndim != 1 or y.size == 0:
        raise tn.ShapeError(f"ce_loss: predictions {pred.shape} vs labels {y.shape}")
    ll = y * tn.log(pred) + (1.0 - y) * tn.log(1.0 - pred)
    return -tn.mean(ll)


def sim_loss(f_m: Tensor, f_n: Tensor) -> Tensor:
    """Mean row-wise cosine similarity of two ``(B, d)`` feature batches."""
    if f_m.shape != f_n.shape or f_m.ndim != 2:
        raise tn.ShapeError(f"sim_loss: feature shapes {f_m.shape} and {f_n.shape} differ")
    return tn.mean(tn.cosine(f_m, f_n))


def gate(loss_m: float, loss_i: float, beta: float) -> float:
    """Transfer weight from network i into network m; zero unless i has the lower loss."""
    delta = float(loss_m) - float(loss_i)
    if not delta > 0.0:
        return 0.0
    # clamps delta at 30 / beta
    return math.expm1(min(beta * delta, 30.0))


@dataclass
class BatchLosses:
    """Per-minibatch quantities. Pair keys are ``(source, target)``."""

    ce: dict[str, Tensor]
    delta: dict[tuple[str, str], float] = field(default_factory=dict)
    gates: dict[tuple[str, str], float] = field(default_factory=dict)
    sim: dict[tuple[str, str], float] = field(default_factory=dict)

    @classmethod
    def from_ce(cls, ce: dict[str, Tensor], beta: float) -> "BatchLosses":
        out = cls(dict(ce))
        vals = {k: v.item() for k, v in ce.items()}
        for m in vals:
            for i in vals:
                if i == m:
                    continue
                out.delta[(i, m)] = vals[m] - vals[i]
                out.gates[(i, m)] = gate(vals[m], vals[i], beta)
        return out

    def gate_in(self, m: str) -> list[float]:
        return [g for (src, dst), g in self.gates.items() if dst == m]

    def gate_out(self, m: str) -> list[float]:
        return [g for (src, dst), g in self.gates.items() if src == m]


def full_objective(m: str, losses: BatchLosses, features: dict[str, Tensor], lam: float) -> Tensor:
    """Own cross-entropy plus gated misalignment to each stronger partner.

    Partner features are detached and gates are constants, so the result only
    back-propagates into network ``m``. Terms with zero weight are skipped, so
    with ``lam == 0`` or all gates closed the returned tensor is the CE node itself.
    """
    if m not in losses.ce or m not in features:
        raise KeyError(f"no losses or features recorded for modality {m!r}")
    obj = losses.ce[m]
    for n in features:
        if n == m:
            continue
        if (n, m) not in losses.gates:
            raise KeyError(f"missing gate for pair {n!r} -> {m!r}")
        weight = lam * losses.gates[(n, m)]
        if weight == 0.0:
            continue
        sim = sim_loss(features[m], features[n].detach())
        losses.sim[(m, n)] = sim.item()
        obj = obj + weight * (1.0 - sim)
    return obj


# ---------------------------------------------------------------- optimisation

class Adam:
    """Adam with bias correction over a fixed list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray], lr: float) -> None:
        if len(grads) != len(self.params):
            raise tn.ShapeError(f"adam: {len(grads)} gradients for {len(self.params)} parameters")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.data.shape:
                raise tn.ShapeError(f"adam: gradient {g.shape} for parameter {p.data.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: Adam, lr: float) -> Adam:
    """Functional spelling of ``state.step``; ``state`` must wrap ``params``."""
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ValueError("optimizer state belongs to different parameters")
    state.step(grads, lr)
    return state


def lr_schedule(epoch: int, cfg: M2LConfig) -> float:
    """Step decay: ``lr0 * factor ** (epoch // every)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


# ---------------------------------------------------------------- training loop

@dataclass
class EpochRecord:
    epoch: int
    modality: str
    split: str
    ce: float
    mean_gate_in: float
    mean_gate_out: float
    lr: float

    def row(self) -> list[str]:
        return [str(self.epoch), self.modality, self.split, repr(self.ce),
                repr(self.mean_gate_in), repr(self.mean_gate_out), repr(self.lr)]


@dataclass
class TrainState:
    config: M2LConfig
    networks: dict[str, ModalityNetwork]
    optimizers: dict[str, Adam]
    epoch: int = 0
    best: dict[str, ModalityNetwork] = field(default_factory=dict)
    best_val: dict[str, float] = field(default_factory=dict)
    best_epoch: dict[str, int] = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return list(self.networks)


def init_state(config: M2LConfig, dataset: MultimodalDataset) -> TrainState:
    """One freshly initialised network per modality, seeded by (seed, modality name)."""
    nets, opts = {}, {}
    for spec in dataset.specs:
        enc = config.encoder(spec.feature_dim, spec.seq_len)
        net = init_network(enc, [config.seed, name_key(spec.name)], spec.name)
        nets[spec.name] = net
        opts[spec.name] = Adam(net.parameters(), config.adam_beta1, config.adam_beta2, config.adam_eps)
    return TrainState(config, nets, opts)


def _check_finite(value: float, name: str, epoch: int, batch: int) -> None:
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss for modality {name!r} at epoch {epoch}, batch {batch}: {value}")


def epoch_lr(epoch: int, cfg: M2LConfig) -> float:
    """Learning rate used for a global epoch index.

    With ``lr_restart_on_cotrain`` the decay clock restarts when cotraining
    begins, so the transfer phase starts from ``lr0``.
    """
    if cfg.lr_restart_on_cotrain and epoch >= cfg.pretrain_epochs:
        epoch -= cfg.pretrain_epochs
    return lr_schedule(epoch, cfg)


def _run_epoch(state: TrainState, dataset: MultimodalDataset, transfer: bool) -> dict[str, dict[str, float]]:
    cfg = state.config
    if dataset.N == 0:
        raise ValueError("cannot train on an empty dataset")
    names = state.names
    lr = epoch_lr(state.epoch, cfg)
    ce_sum = dict.fromkeys(names, 0.0)
    gin_sum = dict.fromkeys(names, 0.0)
    gout_sum = dict.fromkeys(names, 0.0)
    nb = 0
    for b, idx in enumerate(batches(dataset.N, cfg.batch_size, cfg.seed, state.epoch)):
        y = dataset.labels[idx]
        tapes, feats, ce = {}, {}, {}
        # every forward/backward reads pre-update parameters; updates are applied after
        for name in names:
            rng = np.random.default_rng([cfg.seed, name_key(name), state.epoch, b])
            with Tape() as tape:
                f, p = state.networks[name].forward(dataset.inputs[name][idx], True, rng)
                ce[name] = ce_loss(p, y)
            tapes[name], feats[name] = tape, f
            _check_finite(ce[name].item(), name, state.epoch, b)
        if transfer and len(names) > 1:
            losses = BatchLosses.from_ce(ce, cfg.beta)
        else:
            losses = None
        grads = {}
        for name in names:
            tape = tapes[name]
            if losses is not None:
                with tape:
                    obj = full_objective(name, losses, feats, cfg.lam)
                gi, go = losses.gate_in(name), losses.gate_out(name)
                gin_sum[name] += sum(gi) / len(gi)
                gout_sum[name] += sum(go) / len(go)
            else:
                obj = ce[name]
            _check_finite(obj.item(), name, state.epoch, b)
            g = tape.backward(obj)
            grads[name] = [g[p] for p in state.networks[name].parameters()]
            ce_sum[name] += ce[name].item() * len(idx)
        for name in names:
            state.optimizers[name].step(grads[name], lr)
        nb += 1
    return {
        name: {
            "ce": ce_sum[name] / dataset.N,
            "gate_in": gin_sum[name] / nb,
            "gate_out": gout_sum[name] / nb,
            "lr": lr,
        }
        for name in names
    }


def pretrain_epoch(state: TrainState, dataset: MultimodalDataset) -> dict[str, dict[str, float]]:
    """One epoch of independent cross-entropy training for every modality."""
    if state.epoch >= state.config.pretrain_epochs:
        raise ValueError(f"epoch {state.epoch} is past the pretraining phase")
    return _run_epoch(state, dataset, transfer=False)


def cotrain_epoch(state: TrainState, dataset: MultimodalDataset) -> dict[str, dict[str, float]]:
    """One epoch of joint training with the gated transfer term."""
    if state.epoch < state.config.pretrain_epochs:
        raise ValueError(f"epoch {state.epoch} is still in the pretraining phase")
    return _run_epoch(state, dataset, transfer=True)


def evaluate_ce(net: ModalityNetwork, dataset: MultimodalDataset, batch_size: int = 500) -> float:
    """Eval-mode cross-entropy over a whole dataset."""
    p = net.predict_proba(dataset.inputs[net.name], batch_size)
    return ce_loss(Tensor(p), dataset.labels).item()


@dataclass
class TrainResult:
    networks: dict[str, ModalityNetwork]
    curves: list[EpochRecord]
    best_epoch: dict[str, int]
    epochs_run: int
    state: TrainState


def train(
    config: M2LConfig,
    train_set: MultimodalDataset,
    val_set: MultimodalDataset,
    on_epoch_end: Callable[[TrainState], None] | None = None,
) -> TrainResult:
    """Pretrain, then cotrain, with per-modality best-validation snapshots.

    Training stops for all modalities once none has improved its validation
    cross-entropy for ``early_stop_patience`` consecutive epochs. With
    ``patience_from_cotrain`` those epochs are only counted once cotraining has
    started, so the pretraining phase always runs in full.
    """
    config.validate()
    if train_set.N == 0 or val_set.N == 0:
        raise ValueError("train and validation partitions must be non-empty")
    if train_set.names != val_set.names:
        raise ValueError("train and validation sets carry different modalities")
    state = init_state(config, train_set)
    curves: list[EpochRecord] = []
    stale = 0
    while state.epoch < config.total_epochs:
        if state.epoch < config.pretrain_epochs:
            stats = pretrain_epoch(state, train_set)
        else:
            stats = cotrain_epoch(state, train_set)
        improved = False
        for name, net in state.networks.items():
            s = stats[name]
            val_ce = evaluate_ce(net, val_set)
            _check_finite(val_ce, name, state.epoch, -1)
            curves.append(EpochRecord(state.epoch, name, "train", s["ce"], s["gate_in"], s["gate_out"], s["lr"]))
            curves.append(EpochRecord(state.epoch, name, "val", val_ce, s["gate_in"], s["gate_out"], s["lr"]))
            if val_ce < state.best_val.get(name, math.inf):
                state.best_val[name] = val_ce
                state.best[name] = net.copy()
                state.best_epoch[name] = state.epoch
                improved = True
        state.epoch += 1
        if on_epoch_end is not None:
            on_epoch_end(state)
        counting = not config.patience_from_cotrain or state.epoch > config.pretrain_epochs
        stale = 0 if improved or not counting else stale + 1
        if stale >= config.early_stop_patience:
            break
    return TrainResult(dict(state.best), curves, dict(state.best_epoch), state.epoch, state)


def write_curves_csv(curves: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for rec in curves:
            w.writerow(rec.row())
