import numpy as np
import pytest

from m2l import tensor as tn


def numerical_gradient(f, arr, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def tape_grads(fn, *params):
    with tn.Tape() as tape:
        out = fn()
        g = tape.backward(out)
    return out, [g[p] for p in params]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_dataset(seed=0, signal=(2.0, 0.5), subjects=8, per_subject=25, T=6, dims=(3, 2), flip=0.0, corruption=0.0):
    from m2l.data import ModalitySpec, SyntheticConfig, generate_synthetic

    specs = [ModalitySpec(n, d, T) for n, d in zip(("a", "b"), dims)][: len(signal)]
    cfg = SyntheticConfig(
        modalities=specs,
        subjects=subjects,
        samples_per_subject=per_subject,
        signal_strength=list(signal),
        corruption_prob=[corruption] * len(signal),
        label_flip=flip,
        seed=seed,
    )
    return generate_synthetic(cfg)


def toy_config(**kw):
    from m2l.core import M2LConfig

    base = dict(hidden=8, batch_size=50, total_epochs=4, pretrain_epochs=2, seed=0)
    base.update(kw)
    return M2LConfig(**base)
