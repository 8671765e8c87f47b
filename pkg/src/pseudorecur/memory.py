"""Training-time memories: filtered activity store and K-means cluster memory."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from . import container
from .features import (
    Dictionary,
    as_pixels,
    box_filter,
    encode_batch,
    pool,
    pooling_weights,
    pool_with_weights,
)

log = logging.getLogger(__name__)

KMEANS_MAX_ITER = 100
KMEANS_TOL = 1e-4


class ConfigurationError(ValueError):
    pass


@dataclass
class ActivityStore:
    h2: np.ndarray  # (N, 4K) filtered Layer-2 activity
    labels: np.ndarray  # (N,)
    h1: np.ndarray | None = None  # (N, G, G, K) filtered Layer-1 activity, often a memmap
    lowpass: bool = True

    def __post_init__(self):
        if len(self.h2) != len(self.labels):
            raise ValueError("h2 and labels disagree on row count")
        if self.h1 is not None and len(self.h1) != len(self.h2):
            raise ValueError("h1 and h2 disagree on row count")

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def has_h1(self) -> bool:
        return self.h1 is not None


@dataclass
class ClusterMemory:
    per_class: np.ndarray  # (C, K2, 4K)
    global_: np.ndarray  # (C*K2, 4K)

    @property
    def K2(self) -> int:
        return self.per_class.shape[1]

    @property
    def n_classes(self) -> int:
        return self.per_class.shape[0]

    @property
    def dim(self) -> int:
        return self.per_class.shape[2]


def build_store(
    train,
    labels: np.ndarray | None,
    dictionary: Dictionary,
    lowpass: bool = True,
    store_h1: bool = False,
    h1_path: Path | str | None = None,
    chunk: int = 32,
) -> ActivityStore:
    """Encode, low-pass and pool every training image.

    ``train`` is a pixel batch (then ``labels`` is required) or a sequence of
    ImageRecord. With ``store_h1`` the filtered Layer-1 maps are kept, in a
    float32 ``.npy`` memmap at ``h1_path`` when given.
    """
    if labels is None:
        labels = np.array([r.label for r in train], dtype=np.int64)
    pixels = as_pixels(train)
    n, K = len(pixels), dictionary.K
    g = dictionary.grid(pixels.shape[1])
    h2 = np.empty((n, 4 * K))
    h1 = None
    if store_h1:
        shape = (n, g, g, K)
        if h1_path is not None:
            h1 = np.lib.format.open_memmap(h1_path, mode="w+", dtype=np.float32, shape=shape)
        else:
            h1 = np.empty(shape, dtype=np.float32)
    weights = pooling_weights(g, lowpass)
    for s in range(0, n, chunk):
        block = encode_batch(pixels[s:s + chunk], dictionary, chunk)
        if store_h1:
            filtered = box_filter(block) if lowpass else block
            h1[s:s + len(block)] = filtered
            h2[s:s + len(block)] = pool(filtered)
        else:
            h2[s:s + len(block)] = pool_with_weights(block, weights)
    if isinstance(h1, np.memmap):
        h1.flush()
    return ActivityStore(h2, np.asarray(labels, dtype=np.int64), h1, lowpass)


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (
        np.einsum("ij,ij->i", x, x)[:, None]
        - 2.0 * x @ centers.T
        + np.einsum("ij,ij->i", centers, centers)[None, :]
    )
    return np.maximum(d, 0.0)


def kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    idx = [int(rng.integers(n))]
    closest = _sq_dists(x, x[idx])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every remaining point coincides with a chosen center
            cand = np.setdiff1d(np.arange(n), idx)
            nxt = int(cand[rng.integers(len(cand))]) if len(cand) else int(rng.integers(n))
        else:
            nxt = int(rng.choice(n, p=closest / total))
        idx.append(nxt)
        closest = np.minimum(closest, _sq_dists(x, x[nxt:nxt + 1])[:, 0])
    return x[idx].copy()


@dataclass
class KMeansResult:
    centers: np.ndarray
    assignment: np.ndarray
    inertia: list[float]  # after each assignment step
    converged: bool


def kmeans(
    x: np.ndarray,
    k: int,
    seed: int | np.random.Generator = 0,
    max_iter: int = KMEANS_MAX_ITER,
    tol: float = KMEANS_TOL,
) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Stops when assignments repeat, when the relative inertia change drops
    below ``tol``, or after ``max_iter`` iterations. Centers returned are the
    means of the final assignment. An empty cluster is re-seeded with the
    point currently farthest from its center.
    """
    x = np.asarray(x, dtype=np.float64)
    if k < 1 or k > len(x):
        raise ConfigurationError(f"cannot form {k} clusters from {len(x)} rows")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    centers = kmeans_plus_plus(x, k, rng)
    history: list[float] = []
    assign = None
    converged = False
    for _ in range(max_iter):
        d = _sq_dists(x, centers)
        new = np.argmin(d, axis=1)
        inertia = float(d[np.arange(len(x)), new].sum())
        stable = assign is not None and np.array_equal(new, assign)
        small = bool(history) and abs(history[-1] - inertia) <= tol * max(history[-1], 1e-300)
        history.append(inertia)
        assign = new
        if stable:
            converged = True
            break
        centers = _means(x, assign, k, d)
        if small:
            break
    return KMeansResult(centers, assign, history, converged)


def _means(x, assign, k, d):
    counts = np.bincount(assign, minlength=k)
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, assign, x)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        far = np.argsort(-d[np.arange(len(x)), assign], kind="stable")
        for j, row in zip(empty, far):
            sums[j] = x[row]
            counts[j] = 1
    return sums / counts[:, None]


def build_cluster_memory(store: ActivityStore, K2: int, seed: int = 0, n_classes: int | None = None) -> ClusterMemory:
    labels = store.labels
    C = int(labels.max()) + 1 if n_classes is None else n_classes
    counts = np.bincount(labels, minlength=C)
    short = np.flatnonzero(counts < K2)
    if short.size:
        raise ConfigurationError(
            f"K2={K2} exceeds the training rows of class {int(short[0])} ({int(counts[short[0]])})"
        )
    per_class = np.empty((C, K2, store.h2.shape[1]))
    for c in range(C):
        res = kmeans(store.h2[labels == c], K2, np.random.default_rng([seed, c]))
        per_class[c] = res.centers
        log.debug("class %d: %d iterations, inertia %.4g", c, len(res.inertia), res.inertia[-1])
    glob = kmeans(store.h2, C * K2, np.random.default_rng([seed, C])).centers
    return ClusterMemory(per_class, glob)


@numba.njit(cache=True)
def _sqdist(a, b):
    acc = 0.0
    for j in range(a.shape[0]):
        t = a[j] - b[j]
        acc += t * t
    return acc


@numba.njit(cache=True)
def _nearest(queries, centers):
    n, k = queries.shape[0], centers.shape[0]
    idx = np.empty(n, np.int64)
    dist = np.empty(n)
    for i in range(n):
        best, arg = np.inf, 0
        for j in range(k):
            d = _sqdist(queries[i], centers[j])
            if d < best:
                best, arg = d, j
        idx[i], dist[i] = arg, best
    return idx, dist


@numba.njit(cache=True)
def _nearest_grouped(queries, banks, groups):
    n, k = queries.shape[0], banks.shape[1]
    idx = np.empty(n, np.int64)
    dist = np.empty(n)
    for i in range(n):
        centers = banks[groups[i]]
        best, arg = np.inf, 0
        for j in range(k):
            d = _sqdist(queries[i], centers[j])
            if d < best:
                best, arg = d, j
        idx[i], dist[i] = arg, best
    return idx, dist


@numba.njit(cache=True)
def _pairwise(queries, centers):
    out = np.empty((queries.shape[0], centers.shape[0]))
    for i in range(queries.shape[0]):
        for j in range(centers.shape[0]):
            out[i, j] = _sqdist(queries[i], centers[j])
    return out


def pairwise_sqdist(queries: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Exact squared distances by direct differences (no norm expansion)."""
    return _pairwise(
        np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64),
        np.ascontiguousarray(centers, dtype=np.float64),
    )


def nearest_many(queries: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index and squared distance of each query's nearest center (ties -> lowest index)."""
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    if len(centers) == 0:
        raise ValueError("nearest search needs at least one center")
    return _nearest(np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64), centers)


def nearest_in_class(
    queries: np.ndarray, per_class: np.ndarray, classes: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Nearest center of ``per_class[classes[i]]`` for every query row ``i``."""
    return _nearest_grouped(
        np.ascontiguousarray(queries, dtype=np.float64),
        np.ascontiguousarray(per_class, dtype=np.float64),
        np.ascontiguousarray(classes, dtype=np.int64),
    )


def nearest_center(query: np.ndarray, centers: np.ndarray) -> tuple[int, np.ndarray]:
    """Center minimizing squared Euclidean distance; ties go to the lowest index."""
    centers = np.asarray(centers)
    if len(centers) == 0:
        raise ValueError("nearest_center needs at least one center")
    idx, _ = nearest_many(np.asarray(query, dtype=np.float64)[None, :], centers)
    return int(idx[0]), centers[int(idx[0])]


def save_store(path, store: ActivityStore) -> None:
    arrays = {"h2": store.h2, "labels": store.labels}
    if store.h1 is not None:
        arrays["h1"] = store.h1
    container.save(path, "activity_store", arrays, {"lowpass": store.lowpass})


def load_store(path, mmap: bool = True) -> ActivityStore:
    meta, a = container.load(path, "activity_store", mmap=mmap)
    h2 = np.asarray(a["h2"], dtype=np.float64)
    return ActivityStore(h2, np.asarray(a["labels"], dtype=np.int64), a.get("h1"), meta["lowpass"])


def save_memory(path, mem: ClusterMemory) -> None:
    container.save(path, "cluster_memory", {"per_class": mem.per_class, "global": mem.global_}, {"K2": mem.K2})


def load_memory(path) -> ClusterMemory:
    _, a = container.load(path, "cluster_memory")
    return ClusterMemory(a["per_class"].astype(np.float64), a["global"].astype(np.float64))
