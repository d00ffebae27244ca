import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedloru.data import (
    Dataset,
    Partition,
    class_histogram,
    dirichlet_partition,
    format_partition,
    generate_synthetic,
    iid_partition,
    parse_partition,
    read_csv,
    sample_dirichlet,
    split_shard,
    subsample,
    train_test_split,
    write_csv,
)
from fedloru.errors import DataError
from fedloru.seeding import derive_seed, make_rng


def tv_distance(p, q):
    return 0.5 * float(np.sum(np.abs(p - q)))


def client_tv(labels, partition, n_classes):
    glob = np.bincount(labels, minlength=n_classes) / len(labels)
    out = []
    for shard in partition.shards:
        h = class_histogram(labels, shard, n_classes)
        out.append(tv_distance(h / h.sum(), glob))
    return out


# -- seeding --------------------------------------------------------------------------

def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(0, "a", 1) == derive_seed(0, "a", 1)
    assert len({derive_seed(0, "a", i) for i in range(100)}) == 100
    assert derive_seed(0, "a") != derive_seed(0, "b")
    assert derive_seed(1, "a") != derive_seed(0, "a")


def test_make_rng_reproducible():
    np.testing.assert_array_equal(make_rng(3, "x", 2).random(5), make_rng(3, "x", 2).random(5))


# -- datasets -------------------------------------------------------------------------

def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.zeros((3, 2)), [0, 1], 2)
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 2)), [0, 2], 2)


def test_synthetic_single_class():
    ds = generate_synthetic(20, 3, 1, 0.5, seed=0)
    assert np.all(ds.labels == 0)


def test_synthetic_deterministic():
    a, b = generate_synthetic(50, 4, 3, 0.5, 1), generate_synthetic(50, 4, 3, 0.5, 1)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_synthetic_balanced():
    counts = np.bincount(generate_synthetic(103, 4, 5, 0.5, 2).labels)
    assert counts.max() - counts.min() <= 1


def test_synthetic_requires_n_at_least_c():
    with pytest.raises(DataError):
        generate_synthetic(3, 2, 4, 0.1, 0)


def test_synthetic_centroid_classifier():
    ds = generate_synthetic(1000, 8, 6, 0.01, 3)
    centroids = np.stack([ds.inputs[ds.labels == c].mean(axis=0) for c in range(6)])
    pred = np.argmin(((ds.inputs[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == ds.labels) >= 0.99


def test_train_test_split_last_fifth():
    ds = generate_synthetic(100, 2, 2, 0.5, 4)
    tr, te = train_test_split(ds)
    assert len(tr) == 80 and len(te) == 20
    np.testing.assert_array_equal(te.inputs, ds.inputs[80:])


def test_split_shard():
    tr, te = split_shard(np.arange(10))
    np.testing.assert_array_equal(tr, np.arange(8))
    np.testing.assert_array_equal(te, [8, 9])


# -- subsampling ----------------------------------------------------------------------

def test_subsample_full_is_permutation():
    ds = generate_synthetic(30, 2, 3, 0.5, 5)
    sub = subsample(ds, 30, seed=1)
    assert sorted(map(tuple, sub.inputs)) == sorted(map(tuple, ds.inputs))


def test_subsample_too_large():
    with pytest.raises(DataError):
        subsample(generate_synthetic(10, 2, 2, 0.5, 0), 11, 0)


def test_subsample_single_index_uniform():
    n, trials = 10, 10_000
    ds = Dataset(np.arange(n, dtype=float)[:, None], np.zeros(n, dtype=int), 1)
    counts = np.bincount([int(subsample(ds, 1, s).inputs[0, 0]) for s in range(trials)], minlength=n)
    sd = np.sqrt(trials * (1 / n) * (1 - 1 / n))
    assert np.all(np.abs(counts - trials / n) <= 4 * sd)


def test_subsample_without_replacement():
    ds = Dataset(np.arange(100, dtype=float)[:, None], np.zeros(100, dtype=int), 1)
    vals = subsample(ds, 60, 3).inputs[:, 0]
    assert len(set(vals)) == 60


# -- Dirichlet ------------------------------------------------------------------------

def test_sample_dirichlet_small_alpha_is_finite():
    p = sample_dirichlet(np.random.default_rng(0), 1e-3, 10)
    assert np.all(np.isfinite(p)) and p.sum() == pytest.approx(1.0)


def test_sample_dirichlet_mean():
    rng = np.random.default_rng(1)
    mean = np.mean([sample_dirichlet(rng, 2.0, 4) for _ in range(5000)], axis=0)
    np.testing.assert_allclose(mean, 0.25, atol=0.01)


def test_dirichlet_single_client():
    p = dirichlet_partition(np.arange(20) % 3, 1, 0.5, 0)
    np.testing.assert_array_equal(p.shards[0], np.arange(20))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.sampled_from([0.1, 0.5, 1.0, 10.0]), st.integers(0, 10_000))
def test_partition_is_disjoint_cover(k, alpha, seed):
    labels = np.arange(400) % 5
    try:
        p = dirichlet_partition(labels, k, alpha, seed)
    except DataError:
        return
    p.validate(400)
    assert all(len(s) > 0 for s in p.shards)


def test_dirichlet_large_alpha_matches_global():
    labels = np.arange(5000) % 10
    worst = max(max(client_tv(labels, dirichlet_partition(labels, 10, 1e6, s), 10)) for s in range(50))
    assert worst <= 0.02


def test_dirichlet_small_alpha_is_heterogeneous():
    labels = np.arange(2000) % 10
    shares = []
    for s in range(50):
        p = dirichlet_partition(labels, 10, 0.1, s)
        for shard in p.shards:
            h = class_histogram(labels, shard, 10)
            shares.append(h.max() / h.sum())
    assert np.mean(shares) >= 0.5


def test_dirichlet_tv_decreases_with_alpha():
    labels = np.arange(3000) % 10
    means = [np.mean([np.mean(client_tv(labels, dirichlet_partition(labels, 10, a, s), 10)) for s in range(10)])
             for a in (0.1, 1.0, 10.0, 1e6)]
    assert all(x > y for x, y in zip(means, means[1:]))


def test_dirichlet_retry_exhaustion():
    with pytest.raises(DataError):
        dirichlet_partition(np.zeros(3, dtype=int), 10, 0.1, 0)


def test_iid_partition():
    p = iid_partition(103, 10, 0)
    p.validate(103)
    assert max(p.sizes()) - min(p.sizes()) <= 1


def test_partition_validate_detects_overlap():
    with pytest.raises(DataError):
        Partition(([0, 1], [1, 2])).validate(3)


def test_partition_text_round_trip():
    p = dirichlet_partition(np.arange(50) % 5, 4, 0.5, 1)
    back = parse_partition(format_partition(p))
    assert all(np.array_equal(a, b) for a, b in zip(p.shards, back.shards))


# -- CSV ------------------------------------------------------------------------------

@pytest.mark.parametrize("header", [True, False])
def test_csv_round_trip(tmp_path, header):
    ds = generate_synthetic(15, 3, 3, 0.5, 6)
    write_csv(tmp_path / "d.csv", ds, header=header)
    back = read_csv(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.inputs, ds.inputs)
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_csv_bad_label(tmp_path):
    (tmp_path / "d.csv").write_text("1.0,2.0,0.5\n")
    with pytest.raises(DataError):
        read_csv(tmp_path / "d.csv")


def test_csv_non_numeric_row(tmp_path):
    (tmp_path / "d.csv").write_text("a,b\n1,0\nx,1\n")
    with pytest.raises(DataError, match=":3:"):
        read_csv(tmp_path / "d.csv")
