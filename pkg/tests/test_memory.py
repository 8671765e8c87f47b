import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pseudorecur.features import box_filter, encode_batch, learn_dictionary, pool
from pseudorecur.memory import (
    ActivityStore,
    ClusterMemory,
    ConfigurationError,
    build_cluster_memory,
    build_store,
    kmeans,
    load_memory,
    load_store,
    nearest_center,
    nearest_in_class,
    nearest_many,
    pairwise_sqdist,
    save_memory,
    save_store,
)
from conftest import synthetic_images


@pytest.fixture(scope="module")
def small():
    px, y = synthetic_images(60, seed=11)
    d = learn_dictionary(px, 8, seed=0)
    return px, y, d


def test_store_matches_filter_then_pool(small):
    px, y, d = small
    store = build_store(px, y, d, lowpass=True, store_h1=True, chunk=7)
    h1 = encode_batch(px, d)
    assert np.allclose(store.h1, box_filter(h1), atol=1e-5)  # float32 storage
    assert np.allclose(store.h2, pool(box_filter(h1)), atol=1e-12)
    lean = build_store(px, y, d, lowpass=True)
    assert lean.h1 is None and np.allclose(lean.h2, store.h2, atol=1e-12)
    raw = build_store(px, y, d, lowpass=False)
    assert np.allclose(raw.h2, pool(h1), atol=1e-12)


def test_store_from_records(small):
    from pseudorecur.dataset import ImageRecord

    px, y, d = small
    recs = [ImageRecord(int(l), p) for p, l in zip(px[:5], y[:5])]
    store = build_store(recs, None, d)
    assert store.labels.tolist() == y[:5].tolist()


def test_store_h1_memmap(tmp_path, small):
    px, y, d = small
    store = build_store(px[:4], y[:4], d, store_h1=True, h1_path=tmp_path / "h1.npy")
    assert isinstance(store.h1, np.memmap)
    assert np.load(tmp_path / "h1.npy").shape == (4, 27, 27, 8)


def test_store_row_mismatch():
    with pytest.raises(ValueError):
        ActivityStore(np.zeros((3, 4)), np.zeros(2, np.int64))


def test_kmeans_single_cluster_is_mean():
    x = np.random.default_rng(0).normal(size=(50, 6))
    res = kmeans(x, 1, seed=3)
    assert np.allclose(res.centers[0], x.mean(axis=0))
    assert res.converged


def test_square_corners():
    # four tight groups at the corners of a square; centers are the group means
    rng = np.random.default_rng(2)
    corners = np.array([[0, 0], [0, 10], [10, 0], [10, 10]], float)
    x = np.vstack([c + 0.1 * rng.normal(size=(25, 2)) for c in corners])
    res = kmeans(x, 4, seed=0)
    order = np.lexsort(np.round(res.centers).T[::-1])
    means = np.array([x[25 * i:25 * (i + 1)].mean(axis=0) for i in range(4)])
    assert np.allclose(res.centers[order], means)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_kmeans_inertia_non_increasing(seed, k):
    x = np.random.default_rng(seed).normal(size=(40, 3))
    res = kmeans(x, k, seed=seed)
    assert all(b <= a + 1e-9 for a, b in zip(res.inertia, res.inertia[1:]))
    assert len(np.unique(res.assignment)) == k


def test_kmeans_deterministic():
    x = np.random.default_rng(4).normal(size=(80, 5))
    a, b = kmeans(x, 5, seed=9), kmeans(x, 5, seed=9)
    assert np.array_equal(a.centers, b.centers)


def test_kmeans_too_many_clusters():
    with pytest.raises(ConfigurationError):
        kmeans(np.zeros((3, 2)), 4)


def test_cluster_memory_shapes_and_oracle():
    rng = np.random.default_rng(0)
    h2 = rng.normal(size=(60, 4))
    y = np.repeat(np.arange(3), 20)
    mem = build_cluster_memory(ActivityStore(h2, y), 1)
    assert mem.per_class.shape == (3, 1, 4) and mem.global_.shape == (3, 4)
    for c in range(3):
        assert np.allclose(mem.per_class[c, 0], h2[y == c].mean(axis=0))
    assert (mem.K2, mem.n_classes, mem.dim) == (1, 3, 4)


def test_cluster_memory_infeasible_k2():
    h2 = np.zeros((10, 2))
    y = np.array([0] * 8 + [1] * 2)
    with pytest.raises(ConfigurationError, match="class 1"):
        build_cluster_memory(ActivityStore(h2, y), 3)


def test_cluster_memory_order_independent():
    rng = np.random.default_rng(1)
    h2 = rng.normal(size=(40, 3))
    y = np.repeat([0, 1], 20)
    a = build_cluster_memory(ActivityStore(h2, y), 2, seed=5)
    # interleave the classes; within-class row order is unchanged
    perm = np.ravel(np.column_stack([np.arange(20), np.arange(20, 40)]))
    b = build_cluster_memory(ActivityStore(h2[perm], y[perm]), 2, seed=5)
    assert np.array_equal(a.per_class, b.per_class)


def test_nearest_brute_force():
    rng = np.random.default_rng(7)
    q, c = rng.normal(size=(30, 5)), rng.normal(size=(12, 5))
    idx, dist = nearest_many(q, c)
    brute = ((q[:, None] - c[None]) ** 2).sum(-1)
    assert np.array_equal(idx, brute.argmin(axis=1))
    assert np.allclose(dist, brute.min(axis=1))
    assert np.allclose(pairwise_sqdist(q, c), brute)


def test_nearest_ties_go_low():
    c = np.array([[1.0, 0], [0, 1.0], [-1.0, 0], [1.0, 0]])
    j, center = nearest_center(np.zeros(2), c)
    assert j == 0 and np.array_equal(center, c[0])
    assert nearest_center(np.array([5.0, 0]), c)[0] == 0


def test_nearest_needs_centers():
    with pytest.raises(ValueError):
        nearest_center(np.zeros(2), np.zeros((0, 2)))


def test_nearest_in_class():
    rng = np.random.default_rng(8)
    banks = rng.normal(size=(3, 4, 2))
    q = rng.normal(size=(6, 2))
    cls = np.array([0, 1, 2, 2, 1, 0])
    idx, _ = nearest_in_class(q, banks, cls)
    for i in range(6):
        assert idx[i] == nearest_center(q[i], banks[cls[i]])[0]


def test_store_and_memory_roundtrip(tmp_path, small):
    px, y, d = small
    store = build_store(px[:6], y[:6], d, store_h1=True)
    save_store(tmp_path / "s.prc", store)
    back = load_store(tmp_path / "s.prc")
    assert np.allclose(back.h2, store.h2, atol=1e-6) and back.lowpass
    assert np.array_equal(back.labels, store.labels)
    assert np.array_equal(np.asarray(back.h1), store.h1)
    mem = ClusterMemory(np.arange(24.0).reshape(2, 3, 4), np.arange(24.0).reshape(6, 4))
    save_memory(tmp_path / "m.prc", mem)
    m2 = load_memory(tmp_path / "m.prc")
    assert np.array_equal(m2.per_class, mem.per_class) and np.array_equal(m2.global_, mem.global_)
