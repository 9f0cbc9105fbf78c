import numpy as np
import pytest

from pivotmerge import Layer, ProjectorCheckpoint


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(b), 1e-30)
    return np.linalg.norm(a - b) / denom


def checkpoint_rel_error(ck_a, ck_b):
    """Largest per-layer relative Frobenius error across weights and biases."""
    assert ck_a.num_layers == ck_b.num_layers
    worst = 0.0
    for la, lb in zip(ck_a.layers, ck_b.layers):
        worst = max(worst, rel_error(la.weight, lb.weight))
        if la.bias is not None or lb.bias is not None:
            worst = max(worst, rel_error(la.bias, lb.bias))
    return worst


def make_checkpoint(ckpt_id, rng, chain, with_bias=True, scale=1.0):
    """Random checkpoint along a dimension chain [d0, d1, ..., dL]."""
    layers = []
    for i in range(len(chain) - 1):
        d_in, d_out = chain[i], chain[i + 1]
        weight = rng.standard_normal((d_out, d_in)) * scale
        bias = rng.standard_normal(d_out) * scale if with_bias else None
        layers.append(Layer(weight=weight, bias=bias))
    return ProjectorCheckpoint(id=ckpt_id, layers=tuple(layers))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
