"""Shared test oracles: finite differences and random factorized models."""

import numpy as np

from fedloru.lowrank import LowRankPair, NestedLowRankPair
from fedloru.model import FactorizedModel, Layer, cross_entropy, get_param, set_params


def random_pair(rng, m, n, r, alpha):
    return LowRankPair(rng.standard_normal((m, r)) * 0.3, rng.standard_normal((r, n)) * 0.3, alpha)


def random_nested(rng, m, n, r, ra, rb):
    return NestedLowRankPair(
        rng.standard_normal((m, ra)) * 0.3, rng.standard_normal((ra, r)) * 0.3,
        rng.standard_normal((r, rb)) * 0.3, rng.standard_normal((rb, n)) * 0.3,
        alpha_a=0.7, alpha_b=1.3,
    )


def random_model(seed, dims=(5, 4, 3), nested=True, personal=True, rank=2):
    """Small model where every layer carries update, nested and personal factors."""
    rng = np.random.default_rng(seed)
    layers = []
    for i, (m, n) in enumerate(zip(dims, dims[1:])):
        r = min(rank, m, n)
        layers.append(Layer(
            base=rng.standard_normal((m, n)) * 0.5,
            bias=rng.standard_normal(n) * 0.1,
            update=random_pair(rng, m, n, r, 1.5),
            nested=random_nested(rng, m, n, r, 1, 1) if nested and r > 1 else None,
            personal=random_pair(rng, m, n, r, 0.8) if personal else None,
            activation="tanh" if i < len(dims) - 2 else "identity",
        ))
    return FactorizedModel(tuple(layers))


def finite_difference(model, x, y, layer_index, name, step=1e-5):
    """Central differences of the mean cross-entropy w.r.t. one parameter array."""
    layer = model.layers[layer_index]
    p0 = np.array(get_param(layer, name), dtype=np.float64)
    grad = np.zeros_like(p0)
    for idx in np.ndindex(p0.shape):
        vals = []
        for sign in (1.0, -1.0):
            p = p0.copy()
            p[idx] += sign * step
            layers = list(model.layers)
            layers[layer_index] = set_params(layer, {name: p})
            vals.append(cross_entropy(model.with_layers(layers), x, y))
        grad[idx] = (vals[0] - vals[1]) / (2.0 * step)
    return grad


def relative_error(analytic, numeric):
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)
