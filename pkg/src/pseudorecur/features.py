"""Single-layer convolutional front end.

Patches are normalized for brightness/contrast, ZCA-whitened, and encoded
against a spherical K-means dictionary with the triangle activation. Layer-1
maps are reduced to Layer-2 vectors by averaging each map over the four image
quadrants.

Patch vectors are flattened in (row, column, channel) order. Layer-2 vectors
are laid out quadrant-major: index ``q * K + k`` holds map ``k`` averaged over
quadrant ``q`` (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .dataset import ImageRecord, as_arrays

PATCH_VAR_REG = 10.0
ZCA_EPS = 1e-5


class DictionaryFitError(ValueError):
    pass


@dataclass(frozen=True)
class Dictionary:
    patch_size: int
    channels: int
    mean: np.ndarray  # (w*w*d,)
    whitener: np.ndarray  # (w*w*d, w*w*d), symmetric
    fields: np.ndarray  # (K, w*w*d), unit norm rows
    var_reg: float = PATCH_VAR_REG
    zca_eps: float = ZCA_EPS

    @property
    def K(self) -> int:
        return self.fields.shape[0]

    @property
    def dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def grid(self, image_side: int = 32) -> int:
        return image_side - self.patch_size + 1

    def __eq__(self, other):
        if not isinstance(other, Dictionary):
            return NotImplemented
        return (
            self.patch_size == other.patch_size
            and self.channels == other.channels
            and all(
                np.array_equal(a, b)
                for a, b in zip(
                    (self.mean, self.whitener, self.fields),
                    (other.mean, other.whitener, other.fields),
                )
            )
        )


def _pixels(images) -> np.ndarray:
    if isinstance(images, np.ndarray):
        return images
    if isinstance(images, ImageRecord):
        return images.pixels[None]
    return as_arrays(images)[0]


def normalize_patches(patches: np.ndarray, var_reg: float = PATCH_VAR_REG):
    """Per-patch brightness/contrast normalization.

    Returns the normalized patches and a mask of constant (zero-variance)
    patches, which normalize to the zero vector.
    """
    x = patches.astype(np.float64, copy=False)
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, ddof=1, keepdims=True)
    return (x - mu) / np.sqrt(var + var_reg), var[:, 0] == 0


def fit_zca(x: np.ndarray, eps: float = ZCA_EPS) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    cov = np.cov(x, rowvar=False)
    evals, evecs = np.linalg.eigh(cov)
    whitener = (evecs / np.sqrt(np.maximum(evals, 0.0) + eps)) @ evecs.T
    # exact symmetry, eigh round-off is not symmetric
    whitener = 0.5 * (whitener + whitener.T)
    return mean, whitener


def spherical_kmeans(
    x: np.ndarray, k: int, rng: np.random.Generator, iterations: int = 50
) -> np.ndarray:
    """Unit-norm centroids; each point goes to the centroid of largest dot product."""
    norms = np.linalg.norm(x, axis=1)
    usable = np.flatnonzero(norms > 0)
    if usable.size < k:
        raise DictionaryFitError(f"only {usable.size} non-zero whitened patches for K={k}")
    # distinct starting points
    uniq, first = np.unique(x[usable], axis=0, return_index=True)
    if len(uniq) < k:
        raise DictionaryFitError(f"only {len(uniq)} distinct patches for K={k}")
    start = usable[np.sort(first)[rng.permutation(len(first))[:k]]]
    centers = x[start] / norms[start, None]
    assign = None
    for _ in range(iterations):
        new = np.argmax(x @ centers.T, axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, x)
        lengths = np.linalg.norm(sums, axis=1)
        empty = lengths == 0
        if empty.any():
            refill = usable[rng.choice(usable.size, int(empty.sum()), replace=False)]
            sums[empty] = x[refill]
            lengths[empty] = norms[refill]
        centers = sums / lengths[:, None]
    return centers


def sample_patches(
    pixels: np.ndarray, w: int, per_image: int, rng: np.random.Generator
) -> np.ndarray:
    n, h, wd, d = pixels.shape
    span = h - w + 1
    rows = rng.integers(0, span, size=(n, per_image))
    cols = rng.integers(0, span, size=(n, per_image))
    windows = sliding_window_view(pixels, (w, w), axis=(1, 2))  # n, span, span, d, w, w
    idx = np.arange(n)[:, None]
    picked = windows[idx, rows, cols]  # n, per_image, d, w, w
    return picked.transpose(0, 1, 3, 4, 2).reshape(n * per_image, w * w * d)


def learn_dictionary(
    train,
    K: int,
    w: int = 6,
    patches_per_image: int = 10,
    seed: int = 0,
    kmeans_iterations: int = 50,
) -> Dictionary:
    if K < 2:
        raise ValueError("K must be at least 2")
    pixels = _pixels(train)
    if w > pixels.shape[1]:
        raise ValueError(f"patch size {w} exceeds image side {pixels.shape[1]}")
    rng = np.random.default_rng(seed)
    raw = sample_patches(pixels, w, patches_per_image, rng)
    x, constant = normalize_patches(raw)
    x = x[~constant]
    if len(x) < 10 * K:
        raise DictionaryFitError(
            f"need at least {10 * K} non-constant patches, sampled {len(x)}"
        )
    mean, whitener = fit_zca(x)
    xw = (x - mean) @ whitener
    fields = spherical_kmeans(xw, K, rng, kmeans_iterations)
    return Dictionary(w, pixels.shape[3], mean, whitener, fields)


def whiten(patches: np.ndarray, dictionary: Dictionary) -> tuple[np.ndarray, np.ndarray]:
    x, constant = normalize_patches(patches, dictionary.var_reg)
    return (x - dictionary.mean) @ dictionary.whitener, constant


def triangle(xw: np.ndarray, fields: np.ndarray) -> np.ndarray:
    """max(0, mean_k z_k - z_k) with z_k the Euclidean distance to field k."""
    d2 = (
        np.einsum("ij,ij->i", xw, xw)[:, None]
        - 2.0 * xw @ fields.T
        + np.einsum("ij,ij->i", fields, fields)[None, :]
    )
    z = np.sqrt(np.maximum(d2, 0.0))
    return np.maximum(z.mean(axis=1, keepdims=True) - z, 0.0)


def encode_batch(pixels: np.ndarray, dictionary: Dictionary, chunk: int = 32) -> np.ndarray:
    """Layer-1 activity for a batch ``[N, 32, 32, d]`` -> ``[N, G, G, K]``."""
    pixels = np.asarray(pixels)
    n = pixels.shape[0]
    w, K = dictionary.patch_size, dictionary.K
    g = pixels.shape[1] - w + 1
    out = np.empty((n, g, g, K))
    for s in range(0, n, chunk):
        block = pixels[s:s + chunk]
        patches = sliding_window_view(block, (w, w), axis=(1, 2))
        patches = patches.transpose(0, 1, 2, 4, 5, 3).reshape(-1, dictionary.dim)
        xw, constant = whiten(patches, dictionary)
        act = triangle(xw, dictionary.fields)
        act[constant] = 0.0
        out[s:s + len(block)] = act.reshape(len(block), g, g, K)
    return out


def encode_layer1(image: ImageRecord | np.ndarray, dictionary: Dictionary) -> np.ndarray:
    pixels = image.pixels if isinstance(image, ImageRecord) else np.asarray(image)
    return encode_batch(pixels[None], dictionary)[0]


def quadrant_slices(g: int) -> list[tuple[slice, slice]]:
    # odd grids: the middle row/column joins the lower/right quadrants
    h = g // 2
    top, bottom = slice(0, h), slice(h, g)
    return [(top, top), (top, bottom), (bottom, top), (bottom, bottom)]


def pool(h1: np.ndarray) -> np.ndarray:
    """Quadrant means of ``[..., G, G, K]`` -> ``[..., 4K]``."""
    h1 = np.asarray(h1)
    parts = [h1[..., r, c, :].mean(axis=(-3, -2)) for r, c in quadrant_slices(h1.shape[-2])]
    return np.concatenate(parts, axis=-1)


def box_filter(h1: np.ndarray) -> np.ndarray:
    """3x3 box low-pass over the spatial axes of ``[..., G, G, K]``, edge-replicated."""
    h1 = np.asarray(h1, dtype=np.float64)
    size = [1] * h1.ndim
    size[-3] = size[-2] = 3
    return ndimage.uniform_filter(h1, size=size, mode="nearest")


def _box_matrix_1d(g: int) -> np.ndarray:
    m = np.zeros((g, g))
    for i in range(g):
        for j in (i - 1, i, i + 1):
            m[i, min(max(j, 0), g - 1)] += 1.0 / 3.0
    return m


def pooling_weights(g: int, lowpass: bool) -> np.ndarray:
    """``(4, G*G)`` matrix so that ``pool(f(h1))[q*K+k] = W[q] @ h1[:, :, k].ravel()``.

    ``f`` is the box filter when ``lowpass`` else the identity; both are
    linear so the composite is a single contraction.
    """
    weights = np.zeros((4, g, g))
    for q, (r, c) in enumerate(quadrant_slices(g)):
        block = weights[q, r, c]
        weights[q, r, c] = 1.0 / block.size
    weights = weights.reshape(4, g * g)
    if lowpass:
        b1 = _box_matrix_1d(g)
        weights = weights @ np.kron(b1, b1)
    return weights


def pool_with_weights(h1: np.ndarray, weights: np.ndarray) -> np.ndarray:
    n, g, _, K = h1.shape
    return np.einsum("qs,nsk->nqk", weights, h1.reshape(n, g * g, K)).reshape(n, 4 * K)


def layer2_batch(
    pixels: np.ndarray, dictionary: Dictionary, lowpass: bool = False, chunk: int = 32
) -> np.ndarray:
    """Encode and pool without keeping Layer-1 tensors around."""
    g = dictionary.grid(pixels.shape[1])
    weights = pooling_weights(g, lowpass)
    out = np.empty((len(pixels), 4 * dictionary.K))
    for s in range(0, len(pixels), chunk):
        block = encode_batch(pixels[s:s + chunk], dictionary, chunk)
        out[s:s + len(block)] = pool_with_weights(block, weights)
    return out


def as_pixels(images: Sequence[ImageRecord] | np.ndarray) -> np.ndarray:
    return _pixels(images)


def save_dictionary(path, dictionary: Dictionary) -> None:
    from . import container

    container.save(
        path,
        "dictionary",
        {"mean": dictionary.mean, "whitener": dictionary.whitener, "fields": dictionary.fields},
        {
            "w": dictionary.patch_size,
            "d": dictionary.channels,
            "K": dictionary.K,
            "var_reg": dictionary.var_reg,
            "zca_eps": dictionary.zca_eps,
        },
    )


def load_dictionary(path) -> Dictionary:
    from . import container

    meta, a = container.load(path, "dictionary")
    return Dictionary(
        meta["w"],
        meta["d"],
        a["mean"].astype(np.float64),
        a["whitener"].astype(np.float64),
        a["fields"].astype(np.float64),
        meta["var_reg"],
        meta["zca_eps"],
    )
