"""Per-modality sequence classifier: stacked LSTM encoder and a sigmoid head."""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as tn
from .tensor import Tensor

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    seq_len: int
    hidden: int = 64
    layers: int = 2
    dropout: float = 0.5

    def __post_init__(self):
        if self.input_dim < 1 or self.seq_len < 1:
            raise ValueError(f"input_dim and seq_len must be >= 1, got {self.input_dim}, {self.seq_len}")
        if self.hidden < 1 or self.layers < 1:
            raise ValueError(f"hidden and layers must be >= 1, got {self.hidden}, {self.layers}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def feature_dim(self) -> int:
        return self.hidden


@dataclass
class LstmLayerParams:
    """Weights of one LSTM layer; gate blocks ordered input, forget, cell, output."""

    w_ih: Tensor  # (4H, D_in)
    w_hh: Tensor  # (4H, H)
    bias: Tensor  # (4H,)

    def tensors(self) -> list[Tensor]:
        return [self.w_ih, self.w_hh, self.bias]


@dataclass
class ClassifierHead:
    weight: Tensor  # (1, H)
    bias: Tensor  # (1,)

    def tensors(self) -> list[Tensor]:
        return [self.weight, self.bias]


def name_key(name: str) -> int:
    """Stable integer derived from a modality name, used to key RNG streams."""
    return zlib.crc32(name.encode("utf-8"))


class ModalityNetwork:
    """One modality's encoder and head. Optimizer state lives with the trainer."""

    def __init__(self, name: str, config: EncoderConfig, layers: list[LstmLayerParams], head: ClassifierHead):
        self.name = name
        self.config = config
        self.layers = layers
        self.head = head

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend(layer.tensors())
        out.extend(self.head.tensors())
        return out

    def parameter_names(self) -> list[str]:
        names = []
        for i in range(len(self.layers)):
            names += [f"layer{i}.w_ih", f"layer{i}.w_hh", f"layer{i}.bias"]
        return names + ["head.weight", "head.bias"]

    def copy(self) -> "ModalityNetwork":
        return from_dict(to_dict(self))

    def encode(self, x, train: bool = False, rng: np.random.Generator | None = None, fused: bool = True) -> Tensor:
        return encode(self, x, train, rng, fused)

    def forward(
        self, x, train: bool = False, rng: np.random.Generator | None = None, fused: bool = True
    ) -> tuple[Tensor, Tensor]:
        """Return features ``(B, d)`` and clamped probabilities ``(B,)``."""
        feats = encode(self, x, train, rng, fused)
        head_in = _dropout(feats, self.config.dropout, rng) if train else feats
        return feats, classify(self.head, head_in)

    def predict_proba(self, x, batch_size: int = 500) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = [self.forward(x[i : i + batch_size])[1].data for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0)


def init_network(config: EncoderConfig, seed, name: str = "modality") -> ModalityNetwork:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) weights, forget-gate bias 1, other biases 0.

    ``seed`` is anything ``np.random.default_rng`` accepts.
    """
    rng = np.random.default_rng(seed)
    H = config.hidden
    bound = 1.0 / np.sqrt(H)
    layers = []
    d_in = config.input_dim
    for _ in range(config.layers):
        w_ih = rng.uniform(-bound, bound, size=(4 * H, d_in))
        w_hh = rng.uniform(-bound, bound, size=(4 * H, H))
        bias = np.zeros(4 * H)
        bias[H : 2 * H] = 1.0
        layers.append(LstmLayerParams(Tensor(w_ih, True), Tensor(w_hh, True), Tensor(bias, True)))
        d_in = H
    head = ClassifierHead(Tensor(rng.uniform(-bound, bound, size=(1, H)), True), Tensor(np.zeros(1), True))
    return ModalityNetwork(name, config, layers, head)


def _dropout(t: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate == 0.0:
        return t
    return t * _dropout_mask(t.shape, rate, rng)


def lstm_layer(x: Tensor, layer: LstmLayerParams) -> Tensor:
    """Whole-sequence LSTM layer as a single tape node with hand-written BPTT.

    ``x`` is ``(B, T, D_in)``; returns hidden states ``(B, T, H)`` from zero
    initial state. Internally runs feature-major ``(T, 4H, B)`` so each gate
    block is a contiguous slab.
    """
    xs = np.ascontiguousarray(x.data.transpose(1, 2, 0))  # (T, D, B)
    T, _, B = xs.shape
    w_ih, w_hh, bias = layer.w_ih.data, layer.w_hh.data, layer.bias.data
    H = w_hh.shape[1]
    # sigmoid(z) = 0.5 * tanh(z / 2) + 0.5, so one tanh pass serves all four gates
    scale = np.full((4 * H, 1), 0.5)
    scale[2 * H : 3 * H] = 1.0
    zx = np.matmul(w_ih, xs)
    zx += bias[:, None]
    hs = np.zeros((T + 1, H, B))
    cs = np.zeros((T + 1, H, B))
    acts = np.empty((T, 4 * H, B))
    tcs = np.empty((T, H, B))
    for t in range(T):
        a = acts[t]
        np.multiply(zx[t] + w_hh @ hs[t], scale, out=a)
        np.tanh(a, out=a)
        for blk in (a[: 2 * H], a[3 * H :]):
            blk *= 0.5
            blk += 0.5
        c = cs[t + 1]
        np.multiply(a[H : 2 * H], cs[t], out=c)
        c += a[:H] * a[2 * H : 3 * H]
        np.tanh(c, out=tcs[t])
        np.multiply(a[3 * H :], tcs[t], out=hs[t + 1])
    out = hs[1:].transpose(2, 0, 1)

    def back(g):
        g = g.transpose(1, 2, 0)  # (T, H, B)
        dz = np.empty((T, 4 * H, B))
        dh_next = np.zeros((H, B))
        dc_next = np.zeros((H, B))
        for t in range(T - 1, -1, -1):
            a = acts[t]
            i, f, cand, o = a[:H], a[H : 2 * H], a[2 * H : 3 * H], a[3 * H :]
            tc = tcs[t]
            dh = g[t] + dh_next
            dc = dh * o
            dc *= 1.0 - tc * tc
            dc += dc_next
            d = dz[t]
            np.multiply(dc * cand, i * (1.0 - i), out=d[:H])
            np.multiply(dc * cs[t], f * (1.0 - f), out=d[H : 2 * H])
            np.multiply(dc * i, 1.0 - cand * cand, out=d[2 * H : 3 * H])
            np.multiply(dh * tc, o * (1.0 - o), out=d[3 * H :])
            dc_next = dc * f
            dh_next = w_hh.T @ d
        gx = np.matmul(w_ih.T, dz).transpose(2, 0, 1) if x.requires_grad else None
        g_ih = np.tensordot(dz, xs, axes=([0, 2], [0, 2]))
        g_hh = np.tensordot(dz, hs[:-1], axes=([0, 2], [0, 2]))
        g_b = dz.sum(axis=(0, 2))
        return gx, g_ih, g_hh, g_b

    return tn.record(out, (x, layer.w_ih, layer.w_hh, layer.bias), back)


def _lstm_layer_composite(seq: list, layer: LstmLayerParams) -> list:
    """Reference path: the same recurrence spelled out in elementary tape ops."""
    B = seq[0].shape[0]
    H = layer.w_hh.shape[1]
    w_ihT = layer.w_ih.T
    w_hhT = layer.w_hh.T
    h = Tensor(np.zeros((B, H)))
    c = Tensor(np.zeros((B, H)))
    out = []
    for x_t in seq:
        z = tn.matmul(x_t, w_ihT) + tn.matmul(h, w_hhT) + layer.bias
        i = tn.sigmoid(z[:, :H])
        f = tn.sigmoid(z[:, H : 2 * H])
        g = tn.tanh(z[:, 2 * H : 3 * H])
        o = tn.sigmoid(z[:, 3 * H :])
        c = f * c + i * g
        h = o * tn.tanh(c)
        out.append(h)
    return out


def _dropout_mask(shape, rate: float, rng: np.random.Generator | None) -> np.ndarray:
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    return (rng.random(shape) >= rate) / (1.0 - rate)


def encode(
    net: ModalityNetwork,
    x,
    train: bool = False,
    rng: np.random.Generator | None = None,
    fused: bool = True,
) -> Tensor:
    """Run the stacked LSTM from zero state; return the top layer's last hidden state.

    ``x`` is ``(T, D)`` for one sequence or ``(B, T, D)`` for a batch. In train
    mode, inverted dropout is applied to every inter-layer sequence. ``fused``
    selects the single-node layer primitive; the composite path is kept for
    cross-checking and draws identical masks.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    cfg = net.config
    if x.ndim != 3 or x.shape[1:] != (cfg.seq_len, cfg.input_dim):
        got = x.shape[1:] if single else x.shape
        raise tn.ShapeError(f"{net.name}: expected input (B, {cfg.seq_len}, {cfg.input_dim}), got {got}")
    B, T, _ = x.shape
    drop = train and cfg.dropout > 0.0
    if fused:
        seq = Tensor(x)
        for li, layer in enumerate(net.layers):
            if li > 0 and drop:
                seq = seq * _dropout_mask(seq.shape, cfg.dropout, rng)
            seq = lstm_layer(seq, layer)
        feats = seq[:, -1, :]
    else:
        steps: list = [x[:, t, :] for t in range(T)]
        for li, layer in enumerate(net.layers):
            if li > 0 and drop:
                mask = _dropout_mask((B, T, cfg.hidden), cfg.dropout, rng)
                steps = [s * mask[:, t, :] for t, s in enumerate(steps)]
            steps = _lstm_layer_composite(steps, layer)
        feats = steps[-1]
    return feats[0] if single else feats


def classify(head: ClassifierHead, feats: Tensor) -> Tensor:
    """sigmoid(w . F + b) clamped to [1e-12, 1 - 1e-12]; ``(d,)`` -> scalar, ``(B, d)`` -> ``(B,)``."""
    feats = tn.as_tensor(feats)
    if feats.shape[-1] != head.weight.shape[1]:
        raise tn.ShapeError(f"classify: feature width {feats.shape[-1]} != head width {head.weight.shape[1]}")
    logits = tn.sum(feats * head.weight[0], axis=-1) + head.bias[0]
    return tn.clamp(tn.sigmoid(logits), PROB_FLOOR, 1.0 - PROB_FLOOR)


# ---------------------------------------------------------------- checkpoints

def to_dict(net: ModalityNetwork) -> dict:
    return {
        "name": net.name,
        "config": asdict(net.config),
        "layers": [
            {
                "w_ih": layer.w_ih.data.reshape(-1).tolist(),
                "w_hh": layer.w_hh.data.reshape(-1).tolist(),
                "bias": layer.bias.data.tolist(),
            }
            for layer in net.layers
        ],
        "head": {"weight": net.head.weight.data.reshape(-1).tolist(), "bias": net.head.bias.data.tolist()},
    }


def from_dict(doc: dict) -> ModalityNetwork:
    cfg = EncoderConfig(**doc["config"])
    H = cfg.hidden
    layers = []
    d_in = cfg.input_dim
    for layer in doc["layers"]:
        layers.append(
            LstmLayerParams(
                Tensor(np.array(layer["w_ih"], dtype=np.float64).reshape(4 * H, d_in), True),
                Tensor(np.array(layer["w_hh"], dtype=np.float64).reshape(4 * H, H), True),
                Tensor(np.array(layer["bias"], dtype=np.float64), True),
            )
        )
        d_in = H
    if len(layers) != cfg.layers:
        raise ValueError(f"checkpoint has {len(layers)} layers, config says {cfg.layers}")
    head = ClassifierHead(
        Tensor(np.array(doc["head"]["weight"], dtype=np.float64).reshape(1, H), True),
        Tensor(np.array(doc["head"]["bias"], dtype=np.float64), True),
    )
    return ModalityNetwork(doc["name"], cfg, layers, head)


def save_checkpoint(net: ModalityNetwork, path) -> None:
    Path(path).write_text(json.dumps(to_dict(net)))


def load_checkpoint(path) -> ModalityNetwork:
    return from_dict(json.loads(Path(path).read_text()))
