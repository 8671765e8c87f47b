"""Pseudo-recurrent test loop.

Each iteration extracts class hypotheses from the current Layer-2 activity,
retrieves the nearest cluster memory for each hypothesis, lets the samples
compete, and merges the winner back into the activity. Optionally the merged
activity also selects the most similar training image, whose stored Layer-1
maps are merged into the test Layer-1 maps and pooled back up.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .classifiers import HypothesisBank, hypotheses_batch
from .features import Dictionary, encode_batch, pool
from .memory import (
    ActivityStore,
    ClusterMemory,
    ConfigurationError,
    nearest_center,
    nearest_in_class,
    nearest_many,
    pairwise_sqdist,
)

SCHEME_ALIASES = {
    "wta": "winner_takes_all",
    "winner_takes_all": "winner_takes_all",
    "average": "average",
    "avg": "average",
    "ncs": "non_class_specific",
    "non_class_specific": "non_class_specific",
}


class UnsupportedOperation(RuntimeError):
    pass


@dataclass(frozen=True)
class FeedbackConfig:
    alpha: float = 0.5
    beta: float = 0.0
    tau: float = 0.0
    iterations: int = 3
    scheme: str = "winner_takes_all"
    m: int = 3
    layer1_feedback: bool = False
    anneal: bool = True
    ncs_average3: bool = False

    def __post_init__(self):
        if self.scheme not in SCHEME_ALIASES:
            raise ConfigurationError(f"unknown feedback scheme {self.scheme!r}")
        object.__setattr__(self, "scheme", SCHEME_ALIASES[self.scheme])
        if min(self.alpha, self.beta, self.tau) < 0:
            raise ConfigurationError("alpha, beta and tau must be non-negative")
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if self.m not in (1, 2, 3):
            raise ConfigurationError(f"m must be 1, 2 or 3, got {self.m}")

    @property
    def class_specific(self) -> bool:
        return self.scheme != "non_class_specific"

    def schedule(self) -> list[tuple[float, float]]:
        """(alpha, beta) used at each iteration."""
        out, a, b = [], self.alpha, self.beta
        for _ in range(self.iterations):
            out.append((a, b))
            if self.anneal:
                a, b = a / 2.0, b / 2.0
        return out


@dataclass
class IterationRecord:
    step: int
    hypotheses: list[int]
    alpha: float | None = None
    beta: float | None = None
    sample: list | None = None  # [class or -1 for global, center index]
    distances: list[float] = field(default_factory=list)
    merge_norm: float | None = None
    layer1_index: int | None = None
    seconds: float = 0.0


@dataclass
class TrajectoryLog:
    records: list[IterationRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def alphas(self) -> list[float]:
        return [r.alpha for r in self.records if r.alpha is not None]

    def to_lines(self, **extra) -> list[str]:
        return [json.dumps({**extra, **asdict(r)}, sort_keys=True) for r in self.records]


@dataclass
class FeedbackResult:
    labels: np.ndarray
    hypotheses: np.ndarray  # (B, m) from the last extraction
    cluster_evals: np.ndarray  # (B,) center-distance evaluations
    store_evals: np.ndarray  # (B,) training-row distance evaluations (Layer-1 path)
    seconds: float  # wall time of the feedback iterations only
    logs: list[TrajectoryLog] | None = None


def sample_per_class(h2: np.ndarray, hyps, mem: ClusterMemory) -> list[np.ndarray]:
    """Nearest center of each hypothesis class."""
    return [nearest_center(h2, mem.per_class[y])[1] for y in hyps]


def compete(h2: np.ndarray, samples, scheme: str, mem: ClusterMemory | None = None) -> np.ndarray:
    scheme = SCHEME_ALIASES.get(scheme)
    if scheme is None:
        raise ConfigurationError("unknown feedback scheme")
    if scheme == "non_class_specific":
        return nearest_center(h2, mem.global_)[1]
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) == 0:
        raise ValueError("class-specific competition needs at least one sample")
    if scheme == "average":
        return samples.mean(axis=0)
    d = ((samples - np.asarray(h2)[None, :]) ** 2).sum(axis=1)
    return samples[int(np.argmin(d))]


def merge_layer2(h2: np.ndarray, sample: np.ndarray, alpha: float) -> np.ndarray:
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return (np.asarray(h2) + alpha * np.asarray(sample)) / (1.0 + alpha)


def merge_layer1(h1: np.ndarray, sample: np.ndarray, beta: float) -> np.ndarray:
    if beta < 0:
        raise ValueError("beta must be non-negative")
    h1, sample = np.asarray(h1), np.asarray(sample)
    if h1.shape != sample.shape:
        raise ValueError(f"Layer-1 shape mismatch: {h1.shape} vs {sample.shape}")
    return (h1 + beta * sample) / (1.0 + beta)


def repool_merge(h2_next: np.ndarray, h1_next: np.ndarray, tau: float) -> np.ndarray:
    if tau < 0:
        raise ValueError("tau must be non-negative")
    return (np.asarray(h2_next) + tau * pool(h1_next)) / (1.0 + tau)


def _require_h1(store: ActivityStore | None):
    if store is None or not store.has_h1:
        raise UnsupportedOperation(
            "Layer-1 sampling needs stored Layer-1 activity; rebuild the store with --store-h1 on"
        )


def sample_layer1(h2_next: np.ndarray, store: ActivityStore) -> np.ndarray:
    _require_h1(store)
    idx, _ = nearest_many(np.asarray(h2_next)[None, :], store.h2)
    return np.asarray(store.h1[int(idx[0])], dtype=np.float64)


def check_artifacts(
    mem: ClusterMemory,
    bank: HypothesisBank,
    cfg: FeedbackConfig,
    dim: int,
    store: ActivityStore | None = None,
    dictionary: Dictionary | None = None,
) -> None:
    """Reject inconsistent artifact dimensions before any iteration runs."""
    if dictionary is not None and 4 * dictionary.K != dim:
        raise ValueError(f"dictionary gives {4 * dictionary.K}-d Layer-2 activity, expected {dim}")
    if mem.dim != dim:
        raise ValueError(f"cluster memory is {mem.dim}-d, Layer-2 activity is {dim}-d")
    if bank.dim != dim:
        raise ValueError(f"classifier bank is {bank.dim}-d, Layer-2 activity is {dim}-d")
    if mem.n_classes != bank.n_classes:
        raise ValueError(f"memory has {mem.n_classes} classes, bank has {bank.n_classes}")
    if cfg.m > 1 and len(bank.leave_one) != bank.n_classes:
        raise ValueError("bank lacks leave-one-out classifiers")
    if cfg.m > 2 and not bank.leave_pair:
        raise ValueError("bank lacks leave-pair-out classifiers")
    if cfg.iterations and cfg.layer1_feedback:
        _require_h1(store)
        if store.h2.shape[1] != dim:
            raise ValueError(f"activity store is {store.h2.shape[1]}-d, expected {dim}")


def run_feedback(
    h2: np.ndarray,
    mem: ClusterMemory,
    bank: HypothesisBank,
    cfg: FeedbackConfig,
    h1: np.ndarray | None = None,
    store: ActivityStore | None = None,
    with_logs: bool = False,
) -> FeedbackResult:
    """Run the loop on a batch of Layer-2 rows ``(B, 4K)``.

    ``h1`` (``(B, G, G, K)``) and ``store`` are needed only when
    ``cfg.layer1_feedback`` is set.
    """
    h2 = np.array(np.atleast_2d(h2), dtype=np.float64)
    B, dim = h2.shape
    check_artifacts(mem, bank, cfg, dim, store)
    layer1 = cfg.layer1_feedback and cfg.iterations > 0
    if layer1:
        if h1 is None or len(h1) != B:
            raise ValueError("Layer-1 feedback needs the test Layer-1 activity for every row")
        h1 = np.array(h1, dtype=np.float64)
    cluster_evals = np.zeros(B, dtype=np.int64)
    store_evals = np.zeros(B, dtype=np.int64)
    logs = [TrajectoryLog() for _ in range(B)] if with_logs else None
    rows = np.arange(B)
    spent = 0.0

    for step, (alpha, beta) in enumerate(cfg.schedule()):
        t0 = time.perf_counter()
        hyps = hypotheses_batch(bank, h2, cfg.m)
        if cfg.class_specific:
            samples = np.empty((B, cfg.m, dim))
            sidx = np.empty((B, cfg.m), dtype=np.int64)
            sdist = np.empty((B, cfg.m))
            for i in range(cfg.m):
                sidx[:, i], sdist[:, i] = nearest_in_class(h2, mem.per_class, hyps[:, i])
                samples[:, i] = mem.per_class[hyps[:, i], sidx[:, i]]
            cluster_evals += cfg.m * mem.K2
            if cfg.scheme == "winner_takes_all":
                win = np.argmin(sdist, axis=1)
                sample = samples[rows, win]
                chosen = np.stack([hyps[rows, win], sidx[rows, win]], axis=1)
            else:
                sample = samples.mean(axis=1)
                chosen = np.full((B, 2), -1)
            dists = sdist
        else:
            sample, chosen, dists = _global_sample(h2, mem, cfg)
            cluster_evals += len(mem.global_)
        new = merge_layer2(h2, sample, alpha)
        l1_idx = None
        if layer1:
            l1_idx, _ = nearest_many(new, store.h2)
            store_evals += store.n
            order = np.argsort(l1_idx, kind="stable")
            fetched = np.empty_like(h1)
            fetched[order] = store.h1[l1_idx[order]]
            h1 = merge_layer1(h1, fetched, beta)
            new = (new + cfg.tau * pool(h1)) / (1.0 + cfg.tau)
        elapsed = time.perf_counter() - t0
        spent += elapsed
        if with_logs:
            norms = np.linalg.norm(new - h2, axis=1)
            for b in range(B):
                logs[b].records.append(
                    IterationRecord(
                        step=step,
                        hypotheses=hyps[b].tolist(),
                        alpha=alpha,
                        beta=beta if layer1 else None,
                        sample=chosen[b].tolist(),
                        distances=dists[b].tolist(),
                        merge_norm=float(norms[b]),
                        layer1_index=None if l1_idx is None else int(l1_idx[b]),
                        seconds=elapsed / B,
                    )
                )
        h2 = new

    t0 = time.perf_counter()
    hyps = hypotheses_batch(bank, h2, cfg.m)
    final = time.perf_counter() - t0
    if with_logs:
        for b in range(B):
            logs[b].records.append(
                IterationRecord(step=cfg.iterations, hypotheses=hyps[b].tolist(), seconds=final / B)
            )
    return FeedbackResult(hyps[:, 0].copy(), hyps, cluster_evals, store_evals, spent, logs)


def _global_sample(h2, mem, cfg):
    """Non-class-specific retrieval from the global memory.

    Returns the nearest global center (or the mean of the three nearest with
    ``ncs_average3``); the three nearest distances are kept for the log.
    """
    G = mem.global_
    d = pairwise_sqdist(h2, G)
    top = np.argsort(d, axis=1, kind="stable")[:, :3]
    rows = np.arange(len(h2))[:, None]
    if cfg.ncs_average3:
        sample = G[top].mean(axis=1)
    else:
        sample = G[top[:, 0]]
    chosen = np.stack([np.full(len(h2), -1), top[:, 0]], axis=1)
    return sample, chosen, d[rows, top]


def feedforward_labels(h2: np.ndarray, bank: HypothesisBank) -> np.ndarray:
    return hypotheses_batch(bank, np.atleast_2d(h2), 1)[:, 0]


def classify_recurrent(
    image,
    dictionary: Dictionary,
    mem: ClusterMemory,
    store: ActivityStore | None,
    bank: HypothesisBank,
    cfg: FeedbackConfig,
) -> tuple[int, TrajectoryLog]:
    """Classify one image (ImageRecord or ``32x32x3`` pixels) with feedback."""
    pixels = getattr(image, "pixels", image)
    check_artifacts(mem, bank, cfg, 4 * dictionary.K, store, dictionary)
    h1 = encode_batch(np.asarray(pixels)[None], dictionary)
    h2 = pool(h1)
    res = run_feedback(h2, mem, bank, cfg, h1=h1, store=store, with_logs=True)
    return int(res.labels[0]), res.logs[0]
