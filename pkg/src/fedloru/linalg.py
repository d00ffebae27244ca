"""Dense linear algebra kernel.

Matrices are plain 2-D ``float64`` numpy arrays. ``as_matrix`` is the single
validation point: it rejects non-2-D input and non-finite entries.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError, UndefinedInputError
from .seeding import make_rng

log = logging.getLogger(__name__)

JACOBI_MAX_SWEEPS = 100
JACOBI_TOL = 1e-12
POWER_TOL = 1e-10
POWER_MAX_ITER = 20000
SYMMETRY_TOL = 1e-10


def as_matrix(x, name="matrix"):
    m = np.array(x, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name} has non-finite entries")
    return m


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigenvalues sorted descending; ``eigenvectors[:, i]`` pairs with ``eigenvalues[i]``."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self):
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _symmetrized(h):
    h = as_matrix(h, "h")
    if h.shape[0] != h.shape[1]:
        raise ShapeError(f"expected a square matrix, got {h.shape}")
    defect = np.max(np.abs(h - h.T))
    scale = max(1.0, np.max(np.abs(h)))
    if defect > SYMMETRY_TOL * scale:
        raise ShapeError(f"matrix is not symmetric (defect {defect:.3g})")
    return 0.5 * (h + h.T)


def jacobi_eig(h, max_sweeps=JACOBI_MAX_SWEEPS, tol=JACOBI_TOL):
    """Cyclic Jacobi eigensolver for a dense symmetric matrix.

    Sweeps over every (p, q) pair in row order, annihilating ``a[p, q]`` with a
    plane rotation. Stops once the off-diagonal Frobenius mass falls below
    ``tol`` times the total Frobenius norm.

    Raises ``NumericError`` if ``max_sweeps`` is exhausted.
    """
    a = _symmetrized(h).copy()
    n = a.shape[0]
    v = np.eye(n)
    total = np.linalg.norm(a)
    if total == 0.0:
        return EigenDecomposition(np.zeros(n), v)
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tol * total:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + np.hypot(1.0, theta))
                c = 1.0 / np.hypot(1.0, t)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off > tol * total:
            raise NumericError(f"Jacobi did not converge in {max_sweeps} sweeps (off-diagonal {off:.3g})")
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return EigenDecomposition(w[order], v[:, order])


def symmetric_eig(h, method="lapack"):
    """Full eigendecomposition of a symmetric matrix, eigenvalues descending.

    ``method="lapack"`` calls ``numpy.linalg.eigh``; ``method="jacobi"`` runs
    the in-house cyclic Jacobi solver (practical up to a few hundred rows).
    """
    if method == "jacobi":
        return jacobi_eig(h)
    if method != "lapack":
        raise ValueError(f"unknown eigensolver {method!r}")
    hs = _symmetrized(h)
    try:
        w, v = np.linalg.eigh(hs)
    except np.linalg.LinAlgError as exc:
        raise NumericError(str(exc)) from exc
    return EigenDecomposition(w[::-1].copy(), v[:, ::-1].copy())


def symmetric_eigvals(h):
    """Eigenvalues only (descending); cheaper than ``symmetric_eig`` for large inputs."""
    return np.linalg.eigvalsh(_symmetrized(h))[::-1].copy()


def frobenius_norm(m):
    m = as_matrix(m)
    return float(np.sqrt(np.sum(m * m)))


def spectral_norm(m, tol=POWER_TOL, max_iter=POWER_MAX_ITER, seed=0):
    """Largest singular value by power iteration on the smaller Gram matrix.

    The start vector is drawn from a fixed-seed generator. Iteration stops
    when the Rayleigh quotient's estimated remaining error (last change scaled
    by the observed contraction rate) drops below ``tol`` relative. If
    ``max_iter`` is hit (nearly tied top singular values), the exact value from
    a dense SVD is returned instead and a warning is logged.
    """
    m = as_matrix(m)
    if not np.any(m):
        return 0.0
    gram_side = m if m.shape[0] >= m.shape[1] else m.T
    x = make_rng(seed, "power-iteration").standard_normal(gram_side.shape[1])
    x /= np.linalg.norm(x)
    rho = 0.0
    prev_step = None
    for _ in range(max_iter):
        y = gram_side @ x
        rho_new = float(y @ y)
        z = gram_side.T @ y
        nz = np.linalg.norm(z)
        if nz == 0.0:
            # start vector in the null space; restart from a fresh direction
            x = make_rng(seed + 1, "power-iteration").standard_normal(x.shape[0])
            x /= np.linalg.norm(x)
            continue
        x = z / nz
        step = abs(rho_new - rho)
        # remaining error ~ step * q / (1 - q) for linear convergence rate q
        q = min(step / prev_step, 0.999) if prev_step else 0.999
        if step == 0.0 or step * max(1.0, q / (1.0 - q)) <= tol * rho_new:
            return float(np.sqrt(rho_new))
        rho, prev_step = rho_new, step
    log.warning("power iteration hit %d iterations; using dense SVD", max_iter)
    return float(np.linalg.norm(m, 2))


def stable_rank(m):
    """Squared Frobenius norm over squared spectral norm."""
    m = as_matrix(m)
    spec = spectral_norm(m)
    if spec == 0.0:
        raise UndefinedInputError("stable rank of the zero matrix is undefined")
    fro = frobenius_norm(m)
    return (fro * fro) / (spec * spec)


def numerical_rank(m, tol=1e-10):
    """Count of singular values above ``tol`` times the largest one."""
    s = np.linalg.svd(as_matrix(m), compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


# -- plain-text serialization -------------------------------------------------

def format_matrix(m):
    m = as_matrix(m)
    lines = [f"{m.shape[0]} {m.shape[1]}"]
    lines.extend(" ".join(repr(float(x)) for x in row) for row in m)
    return "\n".join(lines) + "\n"


def parse_matrix(lines):
    """Read one matrix block from an iterator of text lines."""
    it = iter(lines)
    header = next(it).split()
    if len(header) != 2:
        raise ShapeError(f"bad matrix header {' '.join(header)!r}")
    rows, cols = int(header[0]), int(header[1])
    data = []
    for r in range(rows):
        fields = next(it).split()
        if len(fields) != cols:
            raise ShapeError(f"row {r} has {len(fields)} entries, expected {cols}")
        data.append([float(x) for x in fields])
    return as_matrix(data)


def save_matrix(path, m):
    with open(path, "w") as f:
        f.write(format_matrix(m))


def load_matrix(path):
    with open(path) as f:
        return parse_matrix(line for line in f.read().splitlines())
