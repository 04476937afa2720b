import numpy as np
import pytest

from setcompat import ItemInput, ModelConfig, init_params
from setcompat.tensor import Tape, Tensor, backward


def tiny_config(**overrides):
    base = dict(feature_dim=8, projection_dim=8, g_layers=(8, 8), f_layers=(4,))
    base.update(overrides)
    return ModelConfig(**base)


def random_items(rng, n, feature_dim, dtype=np.float32, vocab_size=None, prefix="it"):
    items = []
    for k in range(n):
        d = None
        if vocab_size is not None:
            d = (rng.random(vocab_size) < 0.3).astype(dtype)
        items.append(
            ItemInput(f"{prefix}{k:03d}", rng.normal(size=feature_dim).astype(dtype), d=d)
        )
    return items


def tape_grads(build, arrays):
    """Analytic gradients of a scalar-valued graph wrt each input array."""
    tensors = [Tensor(a.copy()) for a in arrays]
    tape = Tape()
    with tape:
        for t in tensors:
            tape.watch(t)
        loss = build(tensors)
    raw = backward(tape, loss)
    return float(loss.data), [raw[id(t)] for t in tensors]


def fd_grads(build, arrays, h=1e-6):
    """Central-difference gradients of the same builder, op-independent."""
    tensors = [Tensor(a.copy()) for a in arrays]
    grads = []
    for t in tensors:
        flat = t.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = float(build(tensors).data)
            flat[i] = orig - h
            lm = float(build(tensors).data)
            flat[i] = orig
            g[i] = (lp - lm) / (2 * h)
        grads.append(g.reshape(t.data.shape))
    return grads


def assert_grads_close(build, arrays, tol=1e-4):
    _, analytic = tape_grads(build, arrays)
    numeric = fd_grads(build, arrays)
    for ga, gn in zip(analytic, numeric):
        rel = np.abs(ga - gn) / np.maximum(1.0, np.maximum(np.abs(ga), np.abs(gn)))
        assert rel.max() < tol, f"max rel error {rel.max():.3e}"
