"""Two-class, two-attribute toy world for the imputation mechanism.

Each class is a mixture of isotropic Gaussian clusters. Points are labelled
by a linear rule (nearest *class* mean, standing in for the linear output
layer); a distortion adds an offset to one attribute; imputation moves the
distorted point toward its nearest *cluster* center.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm


@dataclass(frozen=True)
class ToyWorld:
    clusters: np.ndarray = field(
        default_factory=lambda: np.array([[[0.0, 0.0], [2.0, 4.0]], [[4.0, 0.0], [6.0, 4.0]]])
    )  # (C, J, 2)
    sigma: float = 0.5
    axis: int = 0  # attribute hit by the distortion

    def __post_init__(self):
        flat = self.clusters.reshape(-1, 2)
        if len(np.unique(flat, axis=0)) != len(flat):
            raise ValueError("cluster means must be distinct")

    @property
    def class_means(self) -> np.ndarray:
        return self.clusters.mean(axis=1)

    @property
    def centers(self) -> np.ndarray:
        return self.clusters.reshape(-1, 2)

    @property
    def center_class(self) -> np.ndarray:
        C, J, _ = self.clusters.shape
        return np.repeat(np.arange(C), J)


def single_cluster_world(separation: float = 2.0, sigma: float = 1.0) -> ToyWorld:
    return ToyWorld(np.array([[[0.0, 0.0]], [[separation, 0.0]]]), sigma)


def classify(world: ToyWorld, x: np.ndarray) -> np.ndarray:
    d = ((x[:, None, :] - world.class_means[None]) ** 2).sum(-1)
    return np.argmin(d, axis=1)


def distort(world: ToyWorld, x: np.ndarray, magnitude: float) -> np.ndarray:
    out = np.array(x, dtype=np.float64)
    out[:, world.axis] += magnitude
    return out


def impute(world: ToyWorld, x: np.ndarray, alpha: float) -> np.ndarray:
    """Move each point toward its nearest cluster center: ``(x + alpha c) / (1 + alpha)``."""
    d = ((x[:, None, :] - world.centers[None]) ** 2).sum(-1)
    c = world.centers[np.argmin(d, axis=1)]
    if np.isinf(alpha):
        return c.copy()
    return (x + alpha * c) / (1.0 + alpha)


def likelihood_ratio(x: np.ndarray, mu1: np.ndarray, mu2: np.ndarray) -> np.ndarray:
    """``|x - mu1|^2 / |x - mu2|^2``; smaller favours ``mu1``."""
    x = np.atleast_2d(x)
    return ((x - mu1) ** 2).sum(-1) / ((x - mu2) ** 2).sum(-1)


def _nearest_by_class(world: ToyWorld, x: np.ndarray, cls: np.ndarray) -> np.ndarray:
    C, J, _ = world.clusters.shape
    cands = world.clusters[cls]  # (n, J, 2)
    d = ((x[:, None, :] - cands) ** 2).sum(-1)
    return cands[np.arange(len(x)), np.argmin(d, axis=1)]


@dataclass
class ToyResult:
    distortion: float
    alpha: float
    trials: int
    error_before: float
    error_after: float
    correction_rate: float  # P(correct after | wrong before)
    damage_rate: float  # P(wrong after | correct before)
    # median log of |x - mu_true|^2 / |x - mu_other|^2 (nearest centers); -inf once a point sits on its center
    log_ratio_before: float
    log_ratio_after: float


def sample(world: ToyWorld, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    C, J, _ = world.clusters.shape
    labels = rng.integers(0, C, size=n)
    which = rng.integers(0, J, size=n)
    x = world.clusters[labels, which] + rng.normal(0.0, world.sigma, size=(n, 2))
    return x, labels


def toy_oracle(
    world: ToyWorld, trials: int, distortion: float, alpha: float = np.inf, seed: int = 0
) -> ToyResult:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    x, labels = sample(world, trials, rng)
    xd = distort(world, x, distortion)
    xi = impute(world, xd, alpha)
    before = classify(world, xd) != labels
    after = classify(world, xi) != labels
    other = 1 - labels if world.clusters.shape[0] == 2 else (labels + 1) % world.clusters.shape[0]
    mu1 = _nearest_by_class(world, xd, labels)
    mu2 = _nearest_by_class(world, xd, other)
    with np.errstate(divide="ignore"):
        lr_before = np.log(likelihood_ratio(xd, mu1, mu2))
        lr_after = np.log(likelihood_ratio(xi, mu1, mu2))
    return ToyResult(
        distortion=float(distortion),
        alpha=float(alpha),
        trials=trials,
        error_before=float(before.mean()),
        error_after=float(after.mean()),
        correction_rate=float((~after[before]).mean()) if before.any() else float("nan"),
        damage_rate=float(after[~before].mean()) if (~before).any() else float("nan"),
        log_ratio_before=float(np.median(lr_before)),
        log_ratio_after=float(np.median(lr_after)),
    )


def toy_exact(
    world: ToyWorld, distortion: float, alpha: float = np.inf, step: float = 0.02, reach: float = 6.0
) -> tuple[float, float]:
    """Misclassification before/after imputation by enumerating a fine grid.

    Integrates each cluster's Gaussian density over a square grid (midpoint
    rule); independent of the sampler used by ``toy_oracle``.
    """
    C, J, _ = world.clusters.shape
    lo = world.centers.min(axis=0) - reach * world.sigma
    hi = world.centers.max(axis=0) + reach * world.sigma
    gx = np.arange(lo[0], hi[0], step) + step / 2
    gy = np.arange(lo[1], hi[1], step) + step / 2
    X, Y = np.meshgrid(gx, gy, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    xd = distort(world, pts, distortion)
    pred_before = classify(world, xd)
    pred_after = classify(world, impute(world, xd, alpha))
    err_b = err_a = 0.0
    for c in range(C):
        for j in range(J):
            mu = world.clusters[c, j]
            w = (
                norm.pdf(pts[:, 0], mu[0], world.sigma) * norm.pdf(pts[:, 1], mu[1], world.sigma)
            ) * step * step / (C * J)
            err_b += w[pred_before != c].sum()
            err_a += w[pred_after != c].sum()
    return float(err_b), float(err_a)


def nearest_mean_bayes_error(separation: float, sigma: float) -> float:
    """Closed form for two equal-prior isotropic Gaussians."""
    return float(norm.cdf(-separation / (2.0 * sigma)))
