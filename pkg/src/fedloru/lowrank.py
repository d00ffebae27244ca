"""Factorized low-rank updates and their communication cost."""

from dataclasses import dataclass

import numpy as np

from .errors import RankError, ShapeError
from .linalg import as_matrix, format_matrix, parse_matrix
from .seeding import make_rng

DEFAULT_ALPHA = 16.0


def _frozen(x, name):
    m = as_matrix(x, name)
    m.flags.writeable = False
    return m


@dataclass(frozen=True)
class LowRankPair:
    """Update ``alpha * a @ b`` with ``a`` m x r and ``b`` r x n."""

    a: np.ndarray
    b: np.ndarray
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        object.__setattr__(self, "a", _frozen(self.a, "a"))
        object.__setattr__(self, "b", _frozen(self.b, "b"))
        if self.a.shape[1] != self.b.shape[0]:
            raise ShapeError(f"inner dimensions differ: a {self.a.shape}, b {self.b.shape}")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        m, n = self.shape
        if self.rank > min(m, n):
            raise RankError(f"rank {self.rank} exceeds min({m}, {n})")

    @property
    def rank(self):
        return self.a.shape[1]

    @property
    def shape(self):
        return (self.a.shape[0], self.b.shape[1])

    def replace(self, **kw):
        fields = {"a": self.a, "b": self.b, "alpha": self.alpha}
        fields.update(kw)
        return LowRankPair(**fields)

    def __eq__(self, other):
        if not isinstance(other, LowRankPair):
            return NotImplemented
        return (
            self.alpha == other.alpha
            and np.array_equal(self.a, other.a)
            and np.array_equal(self.b, other.b)
        )

    __hash__ = None


@dataclass(frozen=True)
class NestedLowRankPair:
    """Hierarchical factors of a rank-r pair.

    ``a_down @ a_up`` (m x r, inner rank r_A) perturbs A and
    ``b_down @ b_up`` (r x n, inner rank r_B) perturbs B.
    """

    a_down: np.ndarray
    a_up: np.ndarray
    b_down: np.ndarray
    b_up: np.ndarray
    alpha_a: float = 1.0
    alpha_b: float = 1.0

    def __post_init__(self):
        for name in ("a_down", "a_up", "b_down", "b_up"):
            object.__setattr__(self, name, _frozen(getattr(self, name), name))
        if self.a_down.shape[1] != self.a_up.shape[0]:
            raise ShapeError("a_down and a_up inner dimensions differ")
        if self.b_down.shape[1] != self.b_up.shape[0]:
            raise ShapeError("b_down and b_up inner dimensions differ")
        r = self.a_up.shape[1]
        if self.b_down.shape[0] != r:
            raise ShapeError(f"b_down has {self.b_down.shape[0]} rows, expected base rank {r}")
        if self.rank_a >= r or self.rank_b >= r:
            raise RankError(f"nested ranks ({self.rank_a}, {self.rank_b}) must be below base rank {r}")

    @property
    def rank_a(self):
        return self.a_down.shape[1]

    @property
    def rank_b(self):
        return self.b_up.shape[0]

    @property
    def base_rank(self):
        return self.a_up.shape[1]

    def replace(self, **kw):
        fields = {k: getattr(self, k) for k in ("a_down", "a_up", "b_down", "b_up", "alpha_a", "alpha_b")}
        fields.update(kw)
        return NestedLowRankPair(**fields)

    __hash__ = None


def init_random(m, n, r, alpha=DEFAULT_ALPHA, init_scale=None, seed=0):
    """Gaussian A with standard deviation ``init_scale`` (default 1/sqrt(r)), zero B."""
    if r < 1 or r > min(m, n):
        raise RankError(f"rank {r} outside [1, min({m}, {n})]")
    if init_scale is None:
        init_scale = 1.0 / np.sqrt(r)
    a = init_scale * make_rng(seed).standard_normal((m, r))
    return LowRankPair(a, np.zeros((r, n)), alpha)


def init_momentum(previous):
    """Continue from the previous factors unchanged."""
    return previous


def init_nested(base, rank_a, rank_b, alpha_a=1.0, alpha_b=1.0, init_scale=None, seed=0):
    """Nested factors with Gaussian down-projections and zero up-projections.

    The recovered pair therefore starts equal to ``base``.
    """
    m, n = base.shape
    r = base.rank
    if not (1 <= rank_a < r and 1 <= rank_b < r):
        raise RankError(f"nested ranks ({rank_a}, {rank_b}) must lie in [1, {r})")
    rng = make_rng(seed)
    sa = 1.0 / np.sqrt(rank_a) if init_scale is None else init_scale
    sb = 1.0 / np.sqrt(rank_b) if init_scale is None else init_scale
    return NestedLowRankPair(
        a_down=sa * rng.standard_normal((m, rank_a)),
        a_up=np.zeros((rank_a, r)),
        b_down=sb * rng.standard_normal((r, rank_b)),
        b_up=np.zeros((rank_b, n)),
        alpha_a=alpha_a,
        alpha_b=alpha_b,
    )


def materialize(p):
    return p.alpha * (p.a @ p.b)


def accumulate(w, p):
    w = np.asarray(w, dtype=np.float64)
    if w.shape != p.shape:
        raise ShapeError(f"weight {w.shape} does not match update {p.shape}")
    return w + materialize(p)


def recover_nested(base, nested):
    """Fold nested factors back into a rank-r pair (alpha and rank unchanged)."""
    if nested.a_down.shape[0] != base.a.shape[0] or nested.base_rank != base.rank:
        raise ShapeError("nested A factors do not match the base pair")
    if nested.b_up.shape[1] != base.b.shape[1] or nested.b_down.shape[0] != base.rank:
        raise ShapeError("nested B factors do not match the base pair")
    a = base.a + nested.alpha_a * (nested.a_down @ nested.a_up)
    b = base.b + nested.alpha_b * (nested.b_down @ nested.b_up)
    return LowRankPair(a, b, base.alpha)


# -- communication accounting (parameter counts) ------------------------------

def comm_cost_full(m, n):
    return m * n


def comm_cost_lowrank(m, n, r):
    return r * (m + n)


def comm_cost_nested(m, n, r, r_a, r_b):
    """Uplink size of a nested upload: A_d, A_u, B_d, B_u."""
    return r_a * (m + r) + r_b * (n + r)


# -- serialization --------------------------------------------------------------

def format_pair(p):
    return f"{p.alpha!r} {p.rank}\n" + format_matrix(p.a) + format_matrix(p.b)


def parse_pair(lines):
    it = iter(lines)
    alpha_s, rank_s = next(it).split()
    a = parse_matrix(it)
    b = parse_matrix(it)
    p = LowRankPair(a, b, float(alpha_s))
    if p.rank != int(rank_s):
        raise ShapeError(f"header rank {rank_s} does not match factors ({p.rank})")
    return p
