"""Desk-scale models whose weights are a frozen base plus low-rank factors.

A model is a tuple of :class:`Layer` records. Each layer computes
``act(h @ W_eff + bias)`` where::

    W_eff = base + alpha * A' @ B' + alpha_per * L @ U
    A' = A + alpha_A * A_d @ A_u,   B' = B + alpha_B * B_d @ B_u

(the nested terms vanish when the layer has no nested factors). Which
factors receive gradients is chosen by a *selector*:

========== =====================================
selector   parameters
========== =====================================
lowrank    ``a``, ``b``
nested     ``a_down``, ``a_up``, ``b_down``, ``b_up``
personal   ``l``, ``u``
full       ``base``
========== =====================================

Biases are trained under every selector.
"""

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError, UnsupportedArchitectureError
from .linalg import as_matrix, format_matrix, parse_matrix
from .lowrank import LowRankPair, NestedLowRankPair, init_random
from .seeding import derive_seed

SELECTORS = {
    "lowrank": ("a", "b"),
    "nested": ("a_down", "a_up", "b_down", "b_up"),
    "personal": ("l", "u"),
    "full": ("base",),
}
ACTIVATIONS = ("identity", "tanh")


@dataclass(frozen=True)
class Layer:
    base: np.ndarray
    bias: np.ndarray
    update: LowRankPair | None = None
    nested: NestedLowRankPair | None = None
    personal: LowRankPair | None = None
    activation: str = "identity"

    def __post_init__(self):
        base = as_matrix(self.base, "base")
        bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if bias.shape[0] != base.shape[1]:
            raise ShapeError(f"bias length {bias.shape[0]} does not match {base.shape[1]} outputs")
        for pair in (self.update, self.personal):
            if pair is not None and pair.shape != base.shape:
                raise ShapeError(f"factor shape {pair.shape} does not match base {base.shape}")
        if self.nested is not None:
            if self.update is None:
                raise ShapeError("nested factors need a base low-rank update")
            if self.nested.base_rank != self.update.rank:
                raise ShapeError("nested factors do not match the update rank")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "bias", bias)

    @property
    def shape(self):
        return self.base.shape

    def recovered_update(self):
        """Rank-r pair with nested factors folded in (``None`` without an update)."""
        if self.update is None or self.nested is None:
            return self.update
        n = self.nested
        a = self.update.a + n.alpha_a * (n.a_down @ n.a_up)
        b = self.update.b + n.alpha_b * (n.b_down @ n.b_up)
        return LowRankPair(a, b, self.update.alpha)

    def effective_weight(self):
        w = self.base
        upd = self.recovered_update()
        if upd is not None:
            w = w + upd.alpha * (upd.a @ upd.b)
        if self.personal is not None:
            w = w + self.personal.alpha * (self.personal.a @ self.personal.b)
        return w

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True)
class FactorizedModel:
    layers: tuple

    def __post_init__(self):
        layers = tuple(self.layers)
        for prev, nxt in zip(layers, layers[1:]):
            if prev.shape[1] != nxt.shape[0]:
                raise ShapeError(f"layer widths do not chain: {prev.shape} -> {nxt.shape}")
        object.__setattr__(self, "layers", layers)

    @property
    def input_dim(self):
        return self.layers[0].shape[0]

    @property
    def output_dim(self):
        return self.layers[-1].shape[1]

    def with_layers(self, layers):
        return FactorizedModel(tuple(layers))

    def map_layers(self, fn):
        return FactorizedModel(tuple(fn(i, layer) for i, layer in enumerate(self.layers)))

    def plain(self):
        """Same function with every factor folded into the base weights."""
        return self.map_layers(lambda i, l: Layer(l.effective_weight(), l.bias, activation=l.activation))


# -- construction ---------------------------------------------------------------

def logistic_model(d_x, n_classes, weight=None, bias=None):
    w = np.zeros((d_x, n_classes)) if weight is None else weight
    b = np.zeros(n_classes) if bias is None else bias
    return FactorizedModel((Layer(w, b),))


def mlp_model(d_x, hidden, n_classes, rng):
    """Two-layer tanh network with Glorot-normal bases and zero biases."""
    w1 = rng.standard_normal((d_x, hidden)) * math.sqrt(2.0 / (d_x + hidden))
    w2 = rng.standard_normal((hidden, n_classes)) * math.sqrt(2.0 / (hidden + n_classes))
    return FactorizedModel((
        Layer(w1, np.zeros(hidden), activation="tanh"),
        Layer(w2, np.zeros(n_classes)),
    ))


def with_updates(model, ranks, alpha, seed, init_scale=None, kind="update"):
    """Attach freshly initialised pairs (Gaussian A, zero B) to every layer.

    ``kind`` is ``"update"`` for the shared pair or ``"personal"`` for (L, U).
    """
    ranks = _per_layer(ranks, len(model.layers))

    def attach(i, layer):
        m, n = layer.shape
        pair = init_random(m, n, ranks[i], alpha, init_scale, seed=derive_seed(seed, kind, i))
        return layer.replace(**{kind: pair})

    return model.map_layers(attach)


def _per_layer(value, n_layers):
    if isinstance(value, (int, np.integer)):
        return [int(value)] * n_layers
    value = list(value)
    if len(value) != n_layers:
        raise ShapeError(f"expected {n_layers} per-layer values, got {len(value)}")
    return [int(v) for v in value]


# -- forward / backward -----------------------------------------------------------

def _act(kind, z):
    return np.tanh(z) if kind == "tanh" else z


def forward(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"inputs {x.shape} do not match input dimension {model.input_dim}")
    h = x
    for layer in model.layers:
        h = _act(layer.activation, h @ layer.effective_weight() + layer.bias)
    return h


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_labels(y, n_rows, n_classes):
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_rows:
        raise DataError(f"expected {n_rows} labels, got shape {y.shape}")
    if n_rows == 0:
        raise DataError("empty batch")
    if y.min() < 0 or y.max() >= n_classes:
        raise DataError(f"labels must lie in [0, {n_classes})")
    return y.astype(np.int64)


def cross_entropy(model, x, y):
    logits = forward(model, x)
    y = _check_labels(y, logits.shape[0], logits.shape[1])
    return float(-np.mean(log_softmax(logits)[np.arange(len(y)), y]))


def accuracy(model, x, y):
    if len(y) == 0:
        return float("nan")
    return float(np.mean(np.argmax(forward(model, x), axis=1) == np.asarray(y)))


def _normalize_selector(trainable):
    if isinstance(trainable, str):
        trainable = (trainable,)
    unknown = set(trainable) - set(SELECTORS)
    if unknown:
        raise ValueError(f"unknown selector(s) {sorted(unknown)}")
    return frozenset(trainable)


def factor_grads(layer, g, trainable):
    """Chain rule from ``g = dloss/dW_eff`` to the selected factors of one layer."""
    out = {}
    if "full" in trainable:
        out["base"] = g
    if trainable & {"lowrank", "nested"}:
        if layer.update is None:
            raise ShapeError("layer has no low-rank update to train")
        upd = layer.recovered_update()
        ga = upd.alpha * (g @ upd.b.T)
        gb = upd.alpha * (upd.a.T @ g)
        if "lowrank" in trainable:
            out["a"], out["b"] = ga, gb
        if "nested" in trainable:
            n = layer.nested
            if n is None:
                raise ShapeError("layer has no nested factors to train")
            out["a_down"] = n.alpha_a * (ga @ n.a_up.T)
            out["a_up"] = n.alpha_a * (n.a_down.T @ ga)
            out["b_down"] = n.alpha_b * (gb @ n.b_up.T)
            out["b_up"] = n.alpha_b * (n.b_down.T @ gb)
    if "personal" in trainable:
        p = layer.personal
        if p is None:
            raise ShapeError("layer has no personal factors to train")
        out["l"] = p.alpha * (g @ p.b.T)
        out["u"] = p.alpha * (p.a.T @ g)
    return out


def loss_and_grad(model, x, y, trainable):
    """Mean softmax cross-entropy and gradients of the selected factors.

    Returns ``(loss, grads)`` where ``grads[i]`` maps parameter names of layer
    ``i`` (always including ``"bias"``) to arrays shaped like the parameter.
    """
    trainable = _normalize_selector(trainable)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"inputs {x.shape} do not match input dimension {model.input_dim}")
    weights = [layer.effective_weight() for layer in model.layers]
    hs = [x]
    for layer, w in zip(model.layers, weights):
        hs.append(_act(layer.activation, hs[-1] @ w + layer.bias))
    logits = hs[-1]
    y = _check_labels(y, logits.shape[0], logits.shape[1])
    n = len(y)
    logp = log_softmax(logits)
    loss = float(-np.mean(logp[np.arange(n), y]))

    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads = [None] * len(model.layers)
    for i in reversed(range(len(model.layers))):
        layer = model.layers[i]
        if layer.activation == "tanh":
            delta = delta * (1.0 - hs[i + 1] ** 2)
        g = hs[i].T @ delta
        gi = factor_grads(layer, g, trainable)
        gi["bias"] = delta.sum(axis=0)
        grads[i] = gi
        if i > 0:
            delta = delta @ weights[i].T
    return loss, grads


# -- parameter access -----------------------------------------------------------

def get_param(layer, name):
    if name in ("base", "bias"):
        return getattr(layer, name)
    if name in ("a", "b"):
        return getattr(layer.update, name)
    if name in ("l", "u"):
        return getattr(layer.personal, {"l": "a", "u": "b"}[name])
    return getattr(layer.nested, name)


def set_params(layer, values):
    """New layer with the named parameters replaced."""
    kw = {}
    if "base" in values:
        kw["base"] = values["base"]
    if "bias" in values:
        kw["bias"] = values["bias"]
    if "a" in values or "b" in values:
        kw["update"] = layer.update.replace(**{k: values[k] for k in ("a", "b") if k in values})
    if "l" in values or "u" in values:
        mapped = {{"l": "a", "u": "b"}[k]: values[k] for k in ("l", "u") if k in values}
        kw["personal"] = layer.personal.replace(**mapped)
    nested_keys = [k for k in SELECTORS["nested"] if k in values]
    if nested_keys:
        kw["nested"] = layer.nested.replace(**{k: values[k] for k in nested_keys})
    return layer.replace(**kw)


# -- optimisation -----------------------------------------------------------------

@dataclass
class CosineSchedule:
    """Cosine annealing from ``lr_max`` at round 0 to ``lr_min`` at round ``cycle``.

    Past ``cycle`` the curve continues (rises back toward ``lr_max``), as in the
    closed-form cosine annealing schedule without restarts.
    """

    lr_max: float
    lr_min: float = 0.0
    cycle: int = 50

    def __post_init__(self):
        if self.lr_max < self.lr_min or self.lr_min < 0:
            raise ValueError("need 0 <= lr_min <= lr_max")
        if self.cycle < 1:
            raise ValueError("cycle must be positive")

    def __call__(self, t):
        cos = math.cos(math.pi * t / self.cycle)
        return self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + cos)


@dataclass
class OptimizerState:
    """SGD with heavy-ball momentum; velocity buffers are created lazily at zero."""

    learning_rate: float
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")


def sgd_step(state, model, grads):
    """``v <- mu v + g``; ``p <- p - lr v`` for every parameter present in ``grads``."""
    velocity = dict(state.velocity)
    layers = list(model.layers)
    for i, gi in enumerate(grads):
        if not gi:
            continue
        updates = {}
        for name, g in gi.items():
            v = velocity.get((i, name))
            v = g.copy() if v is None else state.momentum * v + g
            velocity[(i, name)] = v
            updates[name] = get_param(layers[i], name) - state.learning_rate * v
        layers[i] = set_params(layers[i], updates)
    return model.with_layers(layers), OptimizerState(state.learning_rate, state.momentum, velocity)


def train_epochs(model, x, y, trainable, epochs, batch_size, lr, momentum, rng):
    """Minibatch SGD for ``epochs`` passes; returns ``(model, mean batch loss)``.

    The sample order is reshuffled with ``rng`` at every epoch. The loss is the
    mean of batch losses over all epochs (``nan`` when nothing ran).
    """
    y = np.asarray(y)
    n = len(y)
    if epochs <= 0 or n == 0:
        return model, float("nan")
    state = OptimizerState(lr, momentum)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grads = loss_and_grad(model, x[idx], y[idx], trainable)
            if not math.isfinite(loss):
                return model, loss
            model, state = sgd_step(state, model, grads)
            losses.append(loss)
    return model, float(np.mean(losses))


# -- exact Hessian of multinomial logistic regression ---------------------------------

def _require_logistic(model):
    if len(model.layers) != 1 or model.layers[0].activation != "identity":
        raise UnsupportedArchitectureError("exact Hessians need a single linear softmax layer")


def logistic_params(model):
    """Flat parameter vector ``[vec(W_eff) row-major, bias]``."""
    _require_logistic(model)
    layer = model.layers[0]
    return np.concatenate([layer.effective_weight().ravel(), layer.bias])


def logistic_from_params(theta, d_x, n_classes):
    theta = np.asarray(theta, dtype=np.float64)
    w = theta[: d_x * n_classes].reshape(d_x, n_classes)
    return logistic_model(d_x, n_classes, w, theta[d_x * n_classes:])


def exact_hessian(model, x, y=None):
    """Hessian of the mean cross-entropy w.r.t. ``[vec(W) row-major, bias]``.

    For softmax regression the Hessian does not depend on the labels::

        H = (1/N) sum_s kron(x~_s x~_s^T, diag(p_s) - p_s p_s^T),   x~ = [x, 1]
    """
    _require_logistic(model)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim or x.shape[0] == 0:
        raise ShapeError(f"inputs {x.shape} do not match input dimension {model.input_dim}")
    d_x, c = model.layers[0].shape
    p = np.exp(log_softmax(forward(model, x)))
    xt = np.hstack([x, np.ones((x.shape[0], 1))])
    s = -np.einsum("si,sj->sij", p, p)
    s[:, np.arange(c), np.arange(c)] += p
    h = np.einsum("si,sj,scd->icjd", xt, xt, s, optimize=True) / x.shape[0]
    h = h.reshape((d_x + 1) * c, (d_x + 1) * c)
    return 0.5 * (h + h.T)


# -- checkpoints ----------------------------------------------------------------

def _layer_blocks(layer):
    yield "base", layer.base
    yield "bias", layer.bias[None, :]
    if layer.update is not None:
        yield "alpha", np.array([[layer.update.alpha]])
        yield "a", layer.update.a
        yield "b", layer.update.b
    if layer.nested is not None:
        n = layer.nested
        yield "alpha_a", np.array([[n.alpha_a]])
        yield "alpha_b", np.array([[n.alpha_b]])
        for name in SELECTORS["nested"]:
            yield name, getattr(n, name)
    if layer.personal is not None:
        yield "alpha_per", np.array([[layer.personal.alpha]])
        yield "l", layer.personal.a
        yield "u", layer.personal.b


def format_checkpoint(model):
    """Ordered matrix blocks, each preceded by ``layer_index kind rows cols``.

    A ``layer_index activation <name> 0`` line opens each layer.
    """
    out = [f"checkpoint {len(model.layers)}\n"]
    for i, layer in enumerate(model.layers):
        out.append(f"{i} activation {layer.activation} 0\n")
        for kind, m in _layer_blocks(layer):
            out.append(f"{i} {kind} {m.shape[0]} {m.shape[1]}\n")
            out.append(format_matrix(m))
    out.append("end\n")
    return "".join(out)


def parse_checkpoint(text):
    it = iter(text.splitlines())
    head = next(it).split()
    if head[0] != "checkpoint":
        raise ShapeError("not a checkpoint")
    n_layers = int(head[1])
    raw = [dict() for _ in range(n_layers)]
    acts = ["identity"] * n_layers
    for line in it:
        fields = line.split()
        if fields == ["end"]:
            break
        i, kind = int(fields[0]), fields[1]
        if kind == "activation":
            acts[i] = fields[2]
            continue
        m = parse_matrix(it)
        if m.shape != (int(fields[2]), int(fields[3])):
            raise ShapeError(f"manifest {line!r} disagrees with block shape {m.shape}")
        raw[i][kind] = m
    layers = []
    for i, blocks in enumerate(raw):
        update = nested = personal = None
        if "a" in blocks:
            update = LowRankPair(blocks["a"], blocks["b"], float(blocks["alpha"][0, 0]))
        if "a_down" in blocks:
            nested = NestedLowRankPair(
                *(blocks[k] for k in SELECTORS["nested"]),
                alpha_a=float(blocks["alpha_a"][0, 0]),
                alpha_b=float(blocks["alpha_b"][0, 0]),
            )
        if "l" in blocks:
            personal = LowRankPair(blocks["l"], blocks["u"], float(blocks["alpha_per"][0, 0]))
        layers.append(Layer(blocks["base"], blocks["bias"][0], update, nested, personal, acts[i]))
    return FactorizedModel(tuple(layers))
