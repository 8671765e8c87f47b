"""Binary RBM baseline: Gibbs sampling on binarized Layer-2 activity."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import container
from .classifiers import LinearClassifier
from .features import Dictionary, encode_layer1, pool

log = logging.getLogger(__name__)


@dataclass
class RbmModel:
    W: np.ndarray  # (V, H), shared by both directions
    visible_bias: np.ndarray  # (V,)
    hidden_bias: np.ndarray  # (H,)
    binarize_threshold: np.ndarray  # (V,) or scalar broadcastable
    errors: list[float] = field(default_factory=list)  # mean reconstruction error per epoch

    @property
    def V(self) -> int:
        return self.W.shape[0]

    @property
    def H(self) -> int:
        return self.W.shape[1]

    def hidden_probs(self, v: np.ndarray) -> np.ndarray:
        return expit(v @ self.W + self.hidden_bias)

    def visible_probs(self, h: np.ndarray) -> np.ndarray:
        return expit(h @ self.W.T + self.visible_bias)

    def free_energy(self, v: np.ndarray) -> np.ndarray:
        """``F(v)``; the unnormalized log-probability of ``v`` is ``-F(v)``."""
        v = np.atleast_2d(v).astype(np.float64)
        return -(v @ self.visible_bias) - np.logaddexp(0.0, v @ self.W + self.hidden_bias).sum(axis=1)


def median_thresholds(h2: np.ndarray) -> np.ndarray:
    return np.median(np.asarray(h2), axis=0)


def binarize(h2: np.ndarray, threshold) -> np.ndarray:
    return (np.asarray(h2) > threshold).astype(np.float64)


def _check_binary(data: np.ndarray) -> None:
    if not np.all((data == 0) | (data == 1)):
        raise ValueError("RBM training data must be binary (0/1)")


def cd1_step(model: RbmModel, v0: np.ndarray, lr: float, rng: np.random.Generator) -> float:
    """One contrastive-divergence update on a mini-batch; returns its mean reconstruction error."""
    ph0 = model.hidden_probs(v0)
    h0 = (rng.random(ph0.shape) < ph0).astype(v0.dtype)
    pv1 = model.visible_probs(h0)
    ph1 = model.hidden_probs(pv1)
    n = len(v0)
    model.W += lr * (v0.T @ ph0 - pv1.T @ ph1) / n
    model.visible_bias += lr * (v0 - pv1).mean(axis=0)
    model.hidden_bias += lr * (ph0 - ph1).mean(axis=0)
    return float(((v0 - pv1) ** 2).sum(axis=1).mean())


def train_rbm(
    data: np.ndarray,
    H: int = 800,
    lr: float = 0.1,
    batch: int = 100,
    epochs: int = 100,
    seed: int = 0,
    init_scale: float = 0.01,
    threshold=0.0,
) -> RbmModel:
    """CD-1 training. ``threshold`` is recorded on the model for later binarization."""
    data = np.asarray(data, dtype=np.float64)
    _check_binary(data)
    rng = np.random.default_rng(seed)
    V = data.shape[1]
    model = RbmModel(
        rng.normal(0.0, init_scale, size=(V, H)) if init_scale > 0 else np.zeros((V, H)),
        np.zeros(V),
        np.zeros(H),
        np.asarray(threshold, dtype=np.float64),
    )
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        errs, sizes = [], []
        for s in range(0, len(data), batch):
            b = order[s:s + batch]
            errs.append(cd1_step(model, data[b], lr, rng))
            sizes.append(len(b))
        model.errors.append(float(np.average(errs, weights=sizes)))
        log.debug("rbm epoch %d: reconstruction error %.3f", epoch + 1, model.errors[-1])
    return model


def reconstruction_flips(model: RbmModel, v: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Visible units that differ after one up-down pass (mean-field), per row."""
    v = np.atleast_2d(v)
    h = model.hidden_probs(v)
    if rng is not None:
        h = (rng.random(h.shape) < h).astype(np.float64)
    return np.abs(v - (model.visible_probs(h) > 0.5)).sum(axis=1)


def gibbs_correct(
    v0: np.ndarray, model: RbmModel, epochs: int, seed: int = 0, binary_readout: bool = False
) -> np.ndarray:
    """Alternating Gibbs sweeps started from ``v0`` (one row or a batch).

    Returns the visible activation probabilities of the last sweep, or the
    last binary visible sample with ``binary_readout``.
    """
    v = np.array(v0, dtype=np.float64)
    single = v.ndim == 1
    v = np.atleast_2d(v)
    if v.shape[1] != model.V:
        raise ValueError(f"visible vector has {v.shape[1]} units, model expects {model.V}")
    if epochs == 0:
        return v[0] if single else v
    rng = np.random.default_rng(seed)
    pv = v
    for _ in range(epochs):
        ph = model.hidden_probs(v)
        h = (rng.random(ph.shape) < ph).astype(np.float64)
        pv = model.visible_probs(h)
        v = (rng.random(pv.shape) < pv).astype(np.float64)
    out = v if binary_readout else pv
    return out[0] if single else out


def rbm_features(
    h2: np.ndarray, model: RbmModel, gibbs_epochs: int, seed: int = 0, binary_readout: bool = False
) -> np.ndarray:
    return gibbs_correct(binarize(h2, model.binarize_threshold), model, gibbs_epochs, seed, binary_readout)


def classify_with_rbm(
    image,
    dictionary: Dictionary,
    model: RbmModel,
    bank_bin: LinearClassifier,
    gibbs_epochs: int,
    seed: int = 0,
    binary_readout: bool = False,
) -> int:
    h2 = pool(encode_layer1(getattr(image, "pixels", image), dictionary))
    if h2.shape[0] != model.V or bank_bin.weights.shape[1] != model.V:
        raise ValueError(
            f"dimension mismatch: Layer-2 {h2.shape[0]}, RBM {model.V}, "
            f"classifier {bank_bin.weights.shape[1]}"
        )
    v = rbm_features(h2, model, gibbs_epochs, seed, binary_readout)
    return bank_bin.predict_one(v)


def save_rbm(path, model: RbmModel) -> None:
    container.save(
        path,
        "rbm",
        {
            "W": model.W,
            "visible_bias": model.visible_bias,
            "hidden_bias": model.hidden_bias,
            "binarize_threshold": np.broadcast_to(model.binarize_threshold, (model.V,)),
            "errors": np.asarray(model.errors, dtype=np.float64),
        },
    )


def load_rbm(path) -> RbmModel:
    _, a = container.load(path, "rbm")
    f = lambda k: a[k].astype(np.float64)  # noqa: E731
    return RbmModel(f("W"), f("visible_bias"), f("hidden_bias"), f("binarize_threshold"), f("errors").tolist())
