"""Synthetic data, CSV ingestion and client partitioning."""

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .seeding import derive_seed, make_rng

log = logging.getLogger(__name__)

DIRICHLET_RETRIES = 10
TEST_FRACTION = 0.2


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim != 2:
            raise DataError(f"inputs must be 2-D, got shape {x.shape}")
        if x.shape[0] != y.shape[0]:
            raise DataError(f"{x.shape[0]} rows but {y.shape[0]} labels")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise DataError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def n_features(self):
        return self.inputs.shape[1]

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.n_classes)


def generate_synthetic(n, d_x, n_classes, cluster_spread, seed):
    """Gaussian clusters around random unit-norm means, labels balanced to within one.

    Rows are in random order.
    """
    if n < n_classes:
        raise DataError(f"need at least one sample per class (n={n}, C={n_classes})")
    rng = make_rng(seed, "synthetic")
    means = rng.standard_normal((n_classes, d_x))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    labels = rng.permutation(np.arange(n) % n_classes)
    x = means[labels] + cluster_spread * rng.standard_normal((n, d_x))
    return Dataset(x, labels, n_classes)


def train_test_split(dataset, test_fraction=TEST_FRACTION):
    """Last ``test_fraction`` of the rows form the test split."""
    n_test = int(round(test_fraction * len(dataset)))
    cut = len(dataset) - n_test
    return dataset.take(np.arange(cut)), dataset.take(np.arange(cut, len(dataset)))


def split_shard(indices, test_fraction=TEST_FRACTION):
    """Split a shard's index list into (train, test) with the last fraction as test."""
    indices = np.asarray(indices, dtype=np.int64)
    n_test = int(round(test_fraction * len(indices)))
    cut = len(indices) - n_test
    return indices[:cut], indices[cut:]


def subsample(dataset, m, seed):
    """Uniform sample of ``m`` rows without replacement."""
    if m > len(dataset) or m < 0:
        raise DataError(f"cannot draw {m} samples from {len(dataset)}")
    idx = make_rng(seed, "subsample").choice(len(dataset), size=m, replace=False)
    return dataset.take(idx)


# -- partitioning ---------------------------------------------------------------

def sample_dirichlet(rng, alpha, k):
    """Dirichlet(alpha, ..., alpha) over ``k`` categories by Gamma normalisation.

    Gamma(alpha) samples are produced in log space as
    ``log Gamma(alpha + 1) + log(U) / alpha``, which stays representable for
    small ``alpha`` where plain Gamma draws underflow to zero.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if k == 1:
        return np.ones(1)
    log_g = np.log(rng.standard_gamma(alpha + 1.0, size=k)) + np.log(rng.random(k)) / alpha
    log_g -= log_g.max()
    g = np.exp(log_g)
    return g / g.sum()


@dataclass(frozen=True)
class Partition:
    shards: tuple

    def __post_init__(self):
        object.__setattr__(self, "shards", tuple(np.asarray(s, dtype=np.int64) for s in self.shards))

    def __len__(self):
        return len(self.shards)

    def sizes(self):
        return [len(s) for s in self.shards]

    def validate(self, n):
        """Raise ``DataError`` unless shards are disjoint and cover ``range(n)``."""
        allidx = np.concatenate(self.shards) if self.shards else np.array([], dtype=np.int64)
        if len(allidx) != n or not np.array_equal(np.sort(allidx), np.arange(n)):
            raise DataError("shards are not a disjoint cover of the index set")


def dirichlet_partition(labels, k, alpha, seed):
    """Per-class Dirichlet split of sample indices across ``k`` clients.

    For every class, proportions ~ Dir(alpha) over clients split that class's
    shuffled indices at the cumulative proportions. If some client ends up
    empty the draw is repeated with a derived seed, up to 10 attempts.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if k < 1:
        raise ValueError("need at least one client")
    if k == 1:
        return Partition((np.arange(len(labels)),))
    classes = np.unique(labels)
    for attempt in range(DIRICHLET_RETRIES):
        rng = make_rng(seed, "dirichlet", attempt)
        shards = [[] for _ in range(k)]
        for c in classes:
            idx = rng.permutation(np.flatnonzero(labels == c))
            props = sample_dirichlet(rng, alpha, k)
            cuts = np.floor(np.cumsum(props)[:-1] * len(idx)).astype(np.int64)
            for client, part in enumerate(np.split(idx, cuts)):
                shards[client].append(part)
        shards = [np.sort(np.concatenate(s)) for s in shards]
        if all(len(s) > 0 for s in shards):
            return Partition(tuple(shards))
        log.debug("dirichlet partition attempt %d left a client empty", attempt)
    raise DataError(f"no non-empty Dirichlet partition after {DIRICHLET_RETRIES} attempts")


def iid_partition(n, k, seed):
    """Random near-equal split of ``range(n)`` into ``k`` shards."""
    if k < 1 or k > n:
        raise ValueError(f"cannot split {n} samples over {k} clients")
    perm = make_rng(seed, "iid").permutation(n)
    return Partition(tuple(np.sort(s) for s in np.array_split(perm, k)))


def class_histogram(labels, shard, n_classes):
    return np.bincount(np.asarray(labels)[shard], minlength=n_classes)


# -- files --------------------------------------------------------------------------

def read_csv(path, n_classes=None):
    """Last column is an integer label, the rest are features; header optional."""
    rows = []
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                values = [float(c) for c in row]
            except ValueError:
                if lineno == 1 and not rows:
                    continue
                raise DataError(f"{path}:{lineno}: non-numeric field") from None
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    width = {len(r) for r in rows}
    if len(width) != 1 or width.pop() < 2:
        raise DataError(f"{path}: rows have inconsistent or too few columns")
    arr = np.array(rows)
    labels = arr[:, -1]
    if not np.all(labels == np.round(labels)):
        raise DataError(f"{path}: labels must be integers")
    labels = labels.astype(np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    return Dataset(arr[:, :-1], labels, n_classes)


def write_csv(path, dataset, header=True):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if header:
            w.writerow([f"x{i}" for i in range(dataset.n_features)] + ["label"])
        for x, y in zip(dataset.inputs, dataset.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def format_partition(partition):
    return "".join(" ".join(str(int(i)) for i in s) + "\n" for s in partition.shards)


def parse_partition(text):
    return Partition(tuple(np.array([int(t) for t in line.split()], dtype=np.int64) for line in text.splitlines()))
