"""Spiked-Hessian random matrix predictions and their Monte Carlo checks.

The sample Hessian of a size-N dataset is modelled as a finite-rank "true"
Hessian ``diag(theta_1..theta_{p+q}, 0, ...)`` plus ``s(N) X`` with ``X`` a
Wigner matrix whose spectrum tends to the semicircle of radius ``2 sigma``.
Outlier eigenvalues sit at ``theta + s R(s / theta)``; spikes weaker than
the BBP threshold stick to the bulk edge instead.
"""

import math
from dataclasses import dataclass

import numpy as np

from .data import subsample
from .errors import ShapeError, UnsupportedArchitectureError
from .linalg import as_matrix, stable_rank, symmetric_eigvals
from .model import FactorizedModel, exact_hessian, logistic_model, train_epochs
from .seeding import derive_seed, make_rng


@dataclass(frozen=True)
class Semicircle:
    """Semicircle law on ``[-2 sigma, 2 sigma]``; ``R(w) = sigma^2 w``."""

    sigma: float = 1.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def left_edge(self):
        return -2.0 * self.sigma

    @property
    def right_edge(self):
        return 2.0 * self.sigma

    def density(self, x):
        x = np.asarray(x, dtype=np.float64)
        r2 = 4.0 * self.sigma ** 2
        return np.where(np.abs(x) <= 2 * self.sigma, np.sqrt(np.clip(r2 - x * x, 0, None)) / (2 * np.pi * self.sigma ** 2), 0.0)

    def cdf(self, x):
        """Closed-form distribution function."""
        u = np.clip(np.asarray(x, dtype=np.float64) / (2 * self.sigma), -1.0, 1.0)
        return 0.5 + (u * np.sqrt(1 - u * u) + np.arcsin(u)) / np.pi

    def r_transform(self, w):
        return self.sigma ** 2 * np.asarray(w, dtype=np.float64)

    def stieltjes_at_edge(self):
        """``G(2 sigma) = 1 / sigma``; spikes with ``|theta| > 1/G(edge)`` separate."""
        return 1.0 / self.sigma

    def scaled(self, s):
        """Law of ``s X``."""
        return Semicircle(s * self.sigma)


@dataclass(frozen=True)
class ScaleFunction:
    """``s(N) = N ** -gamma``, decreasing into (0, 1) for N >= 2."""

    gamma: float = 0.5

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")

    def __call__(self, n):
        if n < 2:
            raise ValueError(f"scale function needs N >= 2, got {n}")
        return float(n) ** -self.gamma


@dataclass(frozen=True)
class SpikedModel:
    """Nonzero true-Hessian eigenvalues, strictly descending, embedded in dimension R."""

    thetas: tuple
    dimension: int

    def __post_init__(self):
        th = tuple(float(t) for t in self.thetas)
        if not th:
            raise ValueError("need at least one spike")
        if any(t == 0 for t in th):
            raise ValueError("spikes must be nonzero")
        if any(a <= b for a, b in zip(th, th[1:])):
            raise ValueError("spikes must be strictly descending")
        if th[0] < 0:
            raise ValueError("need at least one positive spike (flip the sign convention)")
        if th[-1] < 0 and abs(th[0]) <= abs(th[-1]):
            raise ValueError("largest spike must dominate the most negative one in magnitude")
        if self.dimension < len(th):
            raise ShapeError(f"dimension {self.dimension} below spike count {len(th)}")
        object.__setattr__(self, "thetas", th)

    @property
    def p(self):
        return sum(t > 0 for t in self.thetas)

    @property
    def q(self):
        return sum(t < 0 for t in self.thetas)

    def scaled(self, c):
        return SpikedModel(tuple(c * t for t in self.thetas), self.dimension)


def sample_wigner(r, sigma=1.0, seed=0):
    """GOE-normalised Wigner matrix: off-diagonal variance sigma^2/R, diagonal 2 sigma^2/R."""
    if r < 2:
        raise ValueError("need R >= 2")
    g = make_rng(seed, "wigner").standard_normal((r, r))
    return (g + g.T) * (sigma / math.sqrt(2.0 * r))


def build_true_hessian(model):
    th = np.asarray(model.thetas)
    if model.dimension < len(th):
        raise ShapeError("dimension below spike count")
    d = np.zeros(model.dimension)
    d[: len(th)] = th
    return np.diag(d)


def embed_spike_model(h_true, new_r):
    """Zero-pad a symmetric matrix to ``new_r`` rows and columns."""
    h = as_matrix(h_true)
    r = h.shape[0]
    if h.shape[1] != r:
        raise ShapeError("expected a square matrix")
    if new_r < r:
        raise ShapeError(f"cannot shrink dimension {r} to {new_r}")
    out = np.zeros((new_r, new_r))
    out[:r, :r] = h
    return out


# -- limiting eigenvalues -----------------------------------------------------------

def outlier_location(theta, s, measure):
    """Unclamped ``theta + s R(s / theta)``."""
    if theta == 0:
        raise ValueError("theta must be nonzero")
    return theta + s * float(measure.r_transform(s / theta))


def separates(theta, s, measure):
    """BBP condition under perturbation ``s X``: ``|theta| > 1 / G_{mu_s}(edge)``."""
    return abs(theta) > s / measure.stieltjes_at_edge()


def limiting_eigenvalue(theta, s, measure):
    """Outlier location if the spike separates, else the nearer bulk edge."""
    if theta == 0:
        raise ValueError("theta must be nonzero")
    if separates(theta, s, measure):
        return outlier_location(theta, s, measure)
    return s * (measure.right_edge if theta > 0 else measure.left_edge)


def predicted_eigenvalue(theta, n, measure, scale=ScaleFunction()):
    """Limit of the eigenvalue attached to spike ``theta`` for dataset size ``n``."""
    return limiting_eigenvalue(theta, scale(n), measure)


def limiting_extremes(model, s, measure):
    """Limits of the p top and q bottom eigenvalues, in spike order."""
    return np.array([limiting_eigenvalue(t, s, measure) for t in model.thetas])


def limiting_stable_rank(model, s, measure):
    """Stable rank restricted to the p + q extreme eigenvalues."""
    lam = limiting_extremes(model, s, measure)
    return float(np.sum(lam ** 2) / np.max(lam ** 2))


def _check_sizes(m, n):
    if m >= n:
        raise ValueError(f"need M < N, got M={m}, N={n}")


def stable_rank_difference_terms(model, s_m, s_n, measure):
    """The six partial sums of ``srank(H_M) - srank(H_N)``.

    Positive spikes are split at ``a_M <= a_N`` (counts of outliers at the
    larger and smaller perturbation), negative ones at ``b_M <= b_N``:

    1. both sides outliers (top, j >= 2)
    2. absorbed at M, outlier at N (top)
    3. absorbed on both sides (top)
    4-6. the same three groups for the bottom spikes.

    Each term compares ``(lambda_j / lambda_1)^2`` at M and N.
    """
    if not s_m >= s_n:
        raise ValueError("the smaller dataset must carry the larger perturbation")
    pos = [t for t in model.thetas if t > 0]
    neg = sorted((t for t in model.thetas if t < 0))  # most negative first
    lam_m = limiting_extremes(model, s_m, measure)
    lam_n = limiting_extremes(model, s_n, measure)
    top_m, top_n = np.max(np.abs(lam_m)), np.max(np.abs(lam_n))
    u_m, u_n = s_m * measure.right_edge, s_n * measure.right_edge
    l_m, l_n = s_m * measure.left_edge, s_n * measure.left_edge

    def g(t, s):
        return outlier_location(t, s, measure)

    a_m = sum(separates(t, s_m, measure) for t in pos)
    a_n = sum(separates(t, s_n, measure) for t in pos)
    b_m = sum(separates(t, s_m, measure) for t in neg)
    b_n = sum(separates(t, s_n, measure) for t in neg)

    def ratio2(x, top):
        return (x / top) ** 2

    # first positive spike is the normaliser itself when it separates; its
    # term is identically zero and is skipped, as is the j = 1 term generally
    first = 1
    terms = [
        sum(ratio2(g(t, s_m), top_m) - ratio2(g(t, s_n), top_n) for t in pos[first:a_m]),
        sum(ratio2(u_m, top_m) - ratio2(g(t, s_n), top_n) for t in pos[max(a_m, first):a_n]),
        sum(ratio2(u_m, top_m) - ratio2(u_n, top_n) for t in pos[max(a_n, first):]),
        sum(ratio2(g(t, s_m), top_m) - ratio2(g(t, s_n), top_n) for t in neg[:b_m]),
        sum(ratio2(l_m, top_m) - ratio2(g(t, s_n), top_n) for t in neg[b_m:b_n]),
        sum(ratio2(l_m, top_m) - ratio2(l_n, top_n) for t in neg[b_n:]),
    ]
    return [float(t) for t in terms]


def limiting_stable_rank_difference(model, m, n, measure, scale=ScaleFunction()):
    """``srank(H_M) - srank(H_N)`` in the large-R limit, summed term by term."""
    _check_sizes(m, n)
    return float(sum(stable_rank_difference_terms(model, scale(m), scale(n), measure)))


# -- Monte Carlo ------------------------------------------------------------------

def spiked_sample(model, s, sigma, seed):
    """One draw of ``diag(theta, 0, ...) + s X``."""
    return build_true_hessian(model) + s * sample_wigner(model.dimension, sigma, seed)


def extreme_eigenvalues(model, eigvals):
    """The p largest and q smallest of a descending eigenvalue list."""
    p, q = model.p, model.q
    return np.concatenate([eigvals[:p], eigvals[len(eigvals) - q:]]) if q else eigvals[:p]


def monte_carlo_extremes(model, s, sigma, seeds, map_fn=map):
    """Eigenvalue vectors (descending) of sampled spiked matrices, one row per seed."""
    def one(seed):
        return symmetric_eigvals(spiked_sample(model, s, sigma, seed))

    return list(map_fn(one, seeds))


def extreme_stable_rank(model, eigvals):
    lam = extreme_eigenvalues(model, eigvals)
    return float(np.sum(lam ** 2) / np.max(lam ** 2))


def monte_carlo_stable_rank_difference(model, s_m, s_n, sigma, seeds, map_fn=map):
    """Mean over seeds of extreme-eigenvalue stable rank at ``s_m`` minus at ``s_n``.

    The two perturbations are independent draws (separate seed streams).
    """
    ev_m = monte_carlo_extremes(model, s_m, sigma, [derive_seed(sd, "mc-M") for sd in seeds], map_fn)
    ev_n = monte_carlo_extremes(model, s_n, sigma, [derive_seed(sd, "mc-N") for sd in seeds], map_fn)
    sr_m = np.mean([extreme_stable_rank(model, e) for e in ev_m])
    sr_n = np.mean([extreme_stable_rank(model, e) for e in ev_n])
    return float(sr_m - sr_n)


@dataclass(frozen=True)
class WeylReport:
    lower_ok: np.ndarray
    upper_ok: np.ndarray

    @property
    def passed(self):
        return bool(np.all(self.lower_ok) and np.all(self.upper_ok))

    @property
    def pass_rate(self):
        return float(np.mean(self.lower_ok & self.upper_ok))


def weyl_sandwich_check(h_true, epsilon, p, q, tol=1e-9):
    """Check ``lambda_{i+q}(eps) <= lambda_i(H_true + eps) <= lambda_{i-p}(eps)`` for all i.

    Indices outside ``1..R`` read as ``-inf`` below and ``+inf`` above.
    ``tol`` is relative to the largest absolute eigenvalue involved.
    """
    h_true = as_matrix(h_true)
    epsilon = as_matrix(epsilon)
    if h_true.shape != epsilon.shape:
        raise ShapeError("matrices differ in shape")
    lam_h = symmetric_eigvals(h_true + epsilon)
    lam_e = symmetric_eigvals(epsilon)
    r = len(lam_h)
    pad = np.concatenate([np.full(p, np.inf), lam_e, np.full(q, -np.inf)])
    # pad[k] holds lambda_{k - p + 1}(eps) in 1-based indexing
    i = np.arange(r)
    upper = pad[i]               # lambda_{i-p}
    lower = pad[i + p + q]       # lambda_{i+q}
    slack = tol * max(1.0, np.max(np.abs(lam_h)), np.max(np.abs(lam_e)))
    return WeylReport(lower_ok=lower <= lam_h + slack, upper_ok=lam_h <= upper + slack)


# -- empirical stable rank of logistic-regression Hessians -------------------------

def fit_logistic(dataset, epochs=50, lr=0.5, batch_size=None, seed=0):
    """Full-batch (default) gradient descent on softmax regression; reference weight."""
    model = logistic_model(dataset.n_features, dataset.n_classes)
    bs = len(dataset) if batch_size is None else batch_size
    model, _ = train_epochs(model, dataset.inputs, dataset.labels, "full", epochs, bs, lr, 0.0,
                            make_rng(seed, "fit-logistic"))
    return model


def empirical_stable_rank(dataset, model, sizes, seeds):
    """Mean and sample stdev of exact-Hessian stable rank over subsamples.

    ``model`` fixes the weight at which every Hessian is evaluated. Returns a
    list of ``(size, mean, stdev)`` rows. A size equal to the dataset size uses
    the full dataset once per seed (no subsampling randomness).
    """
    if not isinstance(model, FactorizedModel) or len(model.layers) != 1:
        raise UnsupportedArchitectureError("empirical stable rank needs a logistic model")
    rows = []
    for size in sizes:
        if size > len(dataset):
            raise ValueError(f"size {size} exceeds dataset size {len(dataset)}")
        values = []
        for seed in seeds:
            sub = dataset if size == len(dataset) else subsample(dataset, size, derive_seed(seed, "srank", size))
            values.append(stable_rank(exact_hessian(model, sub.inputs)))
        sd = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        rows.append((int(size), float(np.mean(values)), sd))
    return rows
