"""Linear one-vs-all SVMs and the multi-hypothesis bank built from them."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable

import numba
import numpy as np

from . import container

SVM_EPOCHS = 50
SVM_C = 0.01
SVM_TOL = 1e-3


class TrainingError(ValueError):
    pass


@dataclass
class LinearClassifier:
    weights: np.ndarray  # (C', D)
    biases: np.ndarray  # (C',)
    class_map: np.ndarray  # (C',) original class index of each row
    mean: np.ndarray  # (D,) standardization
    scale: np.ndarray  # (D,)

    def decision(self, X: np.ndarray) -> np.ndarray:
        Z = (np.atleast_2d(X) - self.mean) / self.scale
        return Z @ self.weights.T + self.biases

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.class_map[np.argmax(self.decision(X), axis=1)]

    def predict_one(self, x: np.ndarray) -> int:
        return int(self.predict(np.asarray(x)[None, :])[0])


def hinge_objective(clf: LinearClassifier, X: np.ndarray, y: np.ndarray, C_reg: float) -> float:
    """Summed one-vs-all objective ``lam/2 |w|^2 + mean hinge``, ``lam = 1/(C_reg n)``.

    This is the trainer's objective divided by ``C_reg n``.

    Biases are regularized like weights since the trainer folds them in as
    a constant feature.
    """
    keep = np.isin(y, clf.class_map)
    X, y = X[keep], y[keep]
    lam = 1.0 / (C_reg * len(y))
    S = clf.decision(X)
    T = np.where(y[:, None] == clf.class_map[None, :], 1.0, -1.0)
    hinge = np.maximum(0.0, 1.0 - T * S).mean(axis=0).sum()
    return float(0.5 * lam * ((clf.weights ** 2).sum() + (clf.biases ** 2).sum()) + hinge)


@numba.njit(cache=True, fastmath=True)
def _dual_cd(Z, T, U, orders, tol):
    """Dual coordinate descent for one-vs-all L1-loss SVMs (all classes per sweep)."""
    n, D = Z.shape
    C = T.shape[1]
    W = np.zeros((C, D))
    A = np.zeros((n, C))
    Q = np.empty(n)
    for i in range(n):
        Q[i] = np.dot(Z[i], Z[i])
    epochs = 0
    for e in range(orders.shape[0]):
        epochs += 1
        worst = 0.0
        for j in range(n):
            i = orders[e, j]
            if Q[i] == 0.0:
                continue
            for c in range(C):
                G = T[i, c] * np.dot(W[c], Z[i]) - 1.0
                a = A[i, c]
                if a == 0.0:
                    pg = min(G, 0.0)
                elif a == U:
                    pg = max(G, 0.0)
                else:
                    pg = G
                if abs(pg) > worst:
                    worst = abs(pg)
                if pg != 0.0:
                    a_new = min(max(a - G / Q[i], 0.0), U)
                    step = (a_new - a) * T[i, c]
                    A[i, c] = a_new
                    for d in range(D):
                        W[c, d] += step * Z[i, d]
        if worst < tol:
            break
    return W, epochs


def train_linear_svm(
    X: np.ndarray,
    y: np.ndarray,
    classes: Iterable[int] | None = None,
    C_reg: float = SVM_C,
    epochs: int = SVM_EPOCHS,
    seed: int = 0,
    tol: float = SVM_TOL,
) -> LinearClassifier:
    """One-vs-all L2-regularized hinge-loss SVM.

    Minimizes ``1/2 |w|^2 + C_reg * sum hinge`` per class by dual coordinate
    descent: each epoch visits the rows in a seeded random order, at most
    ``epochs`` epochs, stopping early once the largest projected gradient is
    below ``tol``. Rows are standardized by the included rows' mean and std;
    the bias is the weight of a constant feature.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if classes is None:
        classes = np.unique(y)
    classes = np.array(sorted(int(c) for c in classes))
    keep = np.isin(y, classes)
    X, y = X[keep], y[keep]
    present = np.unique(y)
    if len(classes) < 2 or len(present) < len(classes):
        missing = sorted(set(classes.tolist()) - set(present.tolist()))
        raise TrainingError(
            f"need at least 2 classes with data; included {classes.tolist()}, empty {missing}"
        )
    n, D = X.shape
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    Z = np.hstack([(X - mean) / scale, np.ones((n, 1))])
    T = np.where(y[:, None] == classes[None, :], 1.0, -1.0)
    rng = np.random.default_rng(seed)
    orders = np.stack([rng.permutation(n) for _ in range(epochs)]) if epochs else np.zeros((0, n), np.int64)
    W, _ = _dual_cd(Z, T, float(C_reg), orders, tol)
    return LinearClassifier(W[:, :D].copy(), W[:, D].copy(), classes, mean, scale)


def constant_classifier(label: int, dim: int) -> LinearClassifier:
    """Degenerate member used when an exclusion leaves a single class."""
    return LinearClassifier(
        np.zeros((1, dim)), np.zeros(1), np.array([label]), np.zeros(dim), np.ones(dim)
    )


def pair_key(p: int, q: int) -> tuple[int, int]:
    return (p, q) if p < q else (q, p)


@dataclass
class HypothesisBank:
    full: LinearClassifier
    leave_one: list[LinearClassifier]
    leave_pair: dict[tuple[int, int], LinearClassifier] = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return len(self.full.class_map)

    @property
    def dim(self) -> int:
        return self.full.weights.shape[1]

    def __len__(self) -> int:
        return 1 + len(self.leave_one) + len(self.leave_pair)

    def classifiers(self):
        """``(excluded classes, classifier)`` for every member."""
        yield (), self.full
        for p, clf in enumerate(self.leave_one):
            yield (p,), clf
        for key, clf in sorted(self.leave_pair.items()):
            yield key, clf


def train_bank(
    X: np.ndarray, y: np.ndarray, C_reg: float = SVM_C, seed: int = 0, epochs: int = SVM_EPOCHS
) -> HypothesisBank:
    """Full, leave-one-class-out and leave-pair-out classifiers (1 + C + C(C-1)/2)."""
    classes = np.unique(y)
    C = int(classes.max()) + 1
    if len(classes) != C:
        raise TrainingError(f"all classes 0..{C - 1} must be present, found {classes.tolist()}")

    def fit(excluded):
        kept = [c for c in range(C) if c not in excluded]
        if len(kept) == 1:
            return constant_classifier(kept[0], X.shape[1])
        try:
            return train_linear_svm(
                X, y, [c for c in range(C) if c not in excluded], C_reg, epochs, seed
            )
        except TrainingError as exc:
            raise TrainingError(f"excluding {list(excluded)}: {exc}") from None

    full = fit(())
    leave_one = [fit((p,)) for p in range(C)]
    leave_pair = {}
    if C > 2:
        leave_pair = {(p, q): fit((p, q)) for p, q in combinations(range(C), 2)}
    return HypothesisBank(full, leave_one, leave_pair)


def hypotheses_batch(bank: HypothesisBank, H: np.ndarray, m: int = 3) -> np.ndarray:
    """``(B, m)`` ordered class choices: full, then leave-first-out, then leave-pair-out."""
    if m not in (1, 2, 3):
        raise ValueError(f"m must be 1, 2 or 3, got {m}")
    H = np.atleast_2d(H)
    out = np.empty((len(H), m), dtype=np.int64)
    out[:, 0] = bank.full.predict(H)
    if m >= 2:
        for p in np.unique(out[:, 0]):
            idx = np.flatnonzero(out[:, 0] == p)
            out[idx, 1] = bank.leave_one[p].predict(H[idx])
    if m >= 3:
        keys = np.minimum(out[:, 0], out[:, 1]) * bank.n_classes + np.maximum(out[:, 0], out[:, 1])
        for key in np.unique(keys):
            idx = np.flatnonzero(keys == key)
            p, q = divmod(int(key), bank.n_classes)
            clf = bank.leave_pair.get((p, q))
            if clf is None:
                raise ValueError(f"no leave-pair classifier for {(p, q)}; m=3 needs C > 3")
            out[idx, 2] = clf.predict(H[idx])
    return out


def hypotheses(bank: HypothesisBank, h2: np.ndarray, m: int = 3) -> list[int]:
    return hypotheses_batch(bank, np.asarray(h2)[None, :], m)[0].tolist()


def save_bank(path, bank: HypothesisBank) -> None:
    arrays, tags = {}, []
    for excl, clf in bank.classifiers():
        tag = "S" + "".join(f"_{c}" for c in excl)
        tags.append({"tag": tag, "excluded": list(excl)})
        for name in ("weights", "biases", "class_map", "mean", "scale"):
            arrays[f"{tag}/{name}"] = getattr(clf, name)
    container.save(path, "hypothesis_bank", arrays, {"classifiers": tags})


def load_bank(path) -> HypothesisBank:
    meta, a = container.load(path, "hypothesis_bank")
    full, leave_one, leave_pair = None, {}, {}
    for entry in meta["classifiers"]:
        tag, excl = entry["tag"], tuple(entry["excluded"])
        clf = LinearClassifier(
            *(a[f"{tag}/{n}"].astype(np.float64) for n in ("weights", "biases")),
            a[f"{tag}/class_map"].astype(np.int64),
            *(a[f"{tag}/{n}"].astype(np.float64) for n in ("mean", "scale")),
        )
        if not excl:
            full = clf
        elif len(excl) == 1:
            leave_one[excl[0]] = clf
        else:
            leave_pair[pair_key(*excl)] = clf
    return HypothesisBank(full, [leave_one[p] for p in sorted(leave_one)], leave_pair)
