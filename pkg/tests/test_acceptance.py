"""Acceptance criteria on the desk profile (10k train / 2k test, K=200, K2=50).

Each test carries ``@pytest.mark.criterion(n)``; the terminal summary prints
one PASS/FAIL line per criterion and writes ``acceptance_report.txt``.
Tolerances are the acceptance tolerances; nothing is relaxed when an outcome
is unfavourable.

Set ``PSEUDORECUR_ARTIFACTS`` to reuse trained artifacts across runs
(results are identical either way, artifacts are deterministic).
"""

from __future__ import annotations

import math
import os
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from _report import record
from pseudorecur import harness
from pseudorecur.classifiers import hypotheses_batch, train_bank
from pseudorecur.dataset import OCCLUSION_LEVELS, load_split
from pseudorecur.features import (
    encode_batch,
    learn_dictionary,
    normalize_patches,
    pool,
    sample_patches,
    whiten,
)
from pseudorecur.feedback import FeedbackConfig, classify_recurrent, merge_layer1, merge_layer2, run_feedback
from pseudorecur.harness import ExperimentSpec, GridPoint, Workbench, evaluate_point
from pseudorecur.memory import kmeans, nearest_center
from pseudorecur.toy import (
    ToyWorld,
    likelihood_ratio,
    nearest_mean_bayes_error,
    single_cluster_world,
    toy_exact,
    toy_oracle,
)

pytestmark = pytest.mark.acceptance

OCCLUDED = tuple(f for f in OCCLUSION_LEVELS if f > 0)
DEFAULT = dict(k2=50, alpha=0.5, beta=0.0, tau=0.0, iterations=3, scheme="winner_takes_all", m=3, anneal=True)


@pytest.fixture(scope="module")
def desk(cifar, tmp_path_factory):
    """Desk-profile workbench; artifacts are trained lazily by the first test that needs them."""
    art = os.environ.get("PSEUDORECUR_ARTIFACTS") or tmp_path_factory.mktemp("desk-artifacts")
    spec = ExperimentSpec(data_dir=str(cifar), train_count=10_000, test_count=2_000)
    return Workbench(spec, art, progress=lambda s: print("  ..", s))


_rows: dict = {}


def acc(bench: Workbench, baseline: str, occlusion: float, **kw) -> float:
    if baseline == "feedback":
        kw = {**DEFAULT, **kw}
    key = (baseline, occlusion, tuple(sorted(kw.items())))
    if key not in _rows:
        row, _ = evaluate_point(bench, GridPoint(baseline, occlusion, **kw))
        assert row.ok, row.reason
        _rows[key] = row
    return _rows[key].accuracy


def ff(bench, occlusion, augment=False):
    return acc(bench, "feedforward", occlusion, augment=augment)


# 1 -----------------------------------------------------------------------

@pytest.mark.criterion(1)
def test_feedforward_degrades_to_chance(desk):
    t0 = time.perf_counter()
    accs = [ff(desk, f) for f in OCCLUSION_LEVELS]
    spent = time.perf_counter() - t0
    record(1, "feedforward " + ", ".join(f"{f:.2f}:{a:.4f}" for f, a in zip(OCCLUSION_LEVELS, accs))
           + f"; {spent:.0f}s incl. training")
    assert all(a > b for a, b in zip(accs, accs[1:])), "not strictly decreasing"
    assert accs[-1] <= 0.15
    assert spent <= 30 * 60


# 2 -----------------------------------------------------------------------

@pytest.mark.criterion(2)
def test_feedback_gain_at_33_percent(desk):
    base, rec = ff(desk, 0.33), acc(desk, "feedback", 0.33)
    ratio = rec / base
    record(2, f"33%: feedforward {base:.4f}, feedback {rec:.4f}, ratio {ratio:.3f} (need >= 1.3)")
    assert ratio >= 1.3


@pytest.mark.criterion(2)
def test_feedback_does_not_impair_clean_images(desk):
    base, rec = ff(desk, 0.0), acc(desk, "feedback", 0.0)
    record(2, f"0%: feedforward {base:.4f}, feedback {rec:.4f}, change {100 * (rec - base):+.2f} pp (need >= -1.0)")
    assert rec >= base - 0.01


# 3 -----------------------------------------------------------------------

@pytest.mark.criterion(3)
def test_gain_saturates_in_k2(desk):
    base = ff(desk, 0.33)
    g50 = acc(desk, "feedback", 0.33, k2=50) - base
    g100 = acc(desk, "feedback", 0.33, k2=100) - base
    record(3, f"K2 gain 50: {100 * g50:+.2f} pp, 100: {100 * g100:+.2f} pp (diff < 2 pp)")
    assert g100 - g50 < 0.02


@pytest.mark.criterion(3)
def test_gain_saturates_in_iterations(desk):
    base = ff(desk, 0.33)
    g3 = acc(desk, "feedback", 0.33, iterations=3) - base
    g5 = acc(desk, "feedback", 0.33, iterations=5) - base
    record(3, f"T gain 3: {100 * g3:+.2f} pp, 5: {100 * g5:+.2f} pp (diff < 1 pp)")
    assert g5 - g3 < 0.01


# 4 -----------------------------------------------------------------------

@pytest.mark.criterion(4)
def test_wta_beats_average(desk):
    wta = acc(desk, "feedback", 0.33)
    avg = acc(desk, "feedback", 0.33, scheme="average")
    record(4, f"33% m=3: WTA {wta:.4f} vs average {avg:.4f}")
    assert wta >= avg


@pytest.mark.criterion(4)
def test_class_specific_beats_non_class_specific(desk):
    base = ff(desk, 0.33)
    wta = acc(desk, "feedback", 0.33)
    ncs = [acc(desk, "feedback", 0.33, scheme="non_class_specific", iterations=T) for T in (1, 2, 3)]
    gains = [a - base for a in ncs]
    record(4, f"WTA@3 {wta:.4f} vs NCS@3 {ncs[-1]:.4f}; NCS gain by iteration "
           + ", ".join(f"{100 * g:+.2f}" for g in gains) + " pp")
    assert wta >= ncs[-1]
    assert all(a >= b for a, b in zip(gains, gains[1:])), "NCS gain increases with iterations"


# 5 -----------------------------------------------------------------------

@pytest.mark.criterion(5)
def test_rbm_gibbs_does_not_help(desk):
    occluded = 0.33
    a0 = {f: acc(desk, "rbm", f, gibbs_epochs=0) for f in (0.0, occluded)}
    lines, ok = [], True
    for g in (1, 5, 20):
        clean = acc(desk, "rbm", 0.0, gibbs_epochs=g)
        occ = acc(desk, "rbm", occluded, gibbs_epochs=g)
        ok &= occ - a0[occluded] <= 0.01 and clean < a0[0.0]
        lines.append(f"g={g}: clean {clean:.4f}, 33% {occ:.4f}")
    row = _rows[("rbm", occluded, (("gibbs_epochs", 0),))]
    record(5, f"g=0: clean {a0[0.0]:.4f}, 33% {a0[occluded]:.4f}; " + "; ".join(lines)
           + f"; reconstruction flips on 33% set {row.recon_flips:.1f} ({100 * row.recon_fraction:.1f}% of units)")
    assert ok


# 6 -----------------------------------------------------------------------

@pytest.mark.criterion(6)
def test_augmentation_raises_half_occlusion_accuracy(desk):
    clean, aug = ff(desk, 0.5), ff(desk, 0.5, augment=True)
    record(6, f"50%: clean-trained {clean:.4f}, augmented {aug:.4f} ({100 * (aug - clean):+.2f} pp, need >= +10)")
    assert aug - clean >= 0.10


@pytest.mark.criterion(6)
def test_feedback_relative_improvement_shrinks_with_augmentation(desk):
    rel = {}
    for aug in (False, True):
        rel[aug] = np.mean([acc(desk, "feedback", f, augment=aug) / ff(desk, f, aug) - 1.0 for f in OCCLUDED])
    record(6, f"mean relative feedback improvement over occluded levels: clean {100 * rel[False]:.1f}%, "
           f"augmented {100 * rel[True]:.1f}%")
    assert rel[True] < rel[False]


# 7 -----------------------------------------------------------------------

@pytest.mark.criterion(7)
def test_distance_counter_is_exact(desk):
    out = []
    for k2 in (10, 25, 50, 100):
        row, _ = evaluate_point(desk, GridPoint("feedback", 0.33, **{**DEFAULT, "k2": k2}))
        out.append((k2, row.distance_evals))
    record(7, "evals/image " + ", ".join(f"K2={k}:{e:g}" for k, e in out) + " (expect 9*K2)")
    assert all(e == 3 * k * 3 for k, e in out)


@pytest.mark.criterion(7)
def test_wall_time_linear_in_k2(desk):
    spec = harness.replace_spec(desk.spec, baselines=("feedback",), occlusion=(0.33,), k2=(10, 25, 50, 100))
    rows = harness.timed_sweep(spec, desk.dir, repeats=3)
    summary = harness.timing_report(rows)
    record(7, f"feedback time vs K2: R^2 {summary.r2:.4f} (need >= 0.9), slope {summary.slope:.2e} s/image/center")
    assert summary.counters_exact
    assert summary.r2 >= 0.9


# 8: property suites ------------------------------------------------------

prop = settings(max_examples=200, deadline=None, suppress_health_check=[HealthCheck.too_slow])
finite = st.floats(-1e3, 1e3, allow_nan=False)


@pytest.mark.criterion(8)
@prop
@given(st.integers(1, 40).flatmap(lambda n: st.tuples(
    st.lists(finite, min_size=n, max_size=n), st.lists(finite, min_size=n, max_size=n))),
    st.floats(1e-6, 1e6))
def test_merge_convex_and_contracting(vecs, alpha):
    h, s = np.array(vecs[0]), np.array(vecs[1])
    out = merge_layer2(h, s, alpha)
    lo, hi = np.minimum(h, s), np.maximum(h, s)
    tol = 1e-9 * (1 + np.abs(h) + np.abs(s))
    assert np.all(out >= lo - tol) and np.all(out <= hi + tol)
    before = np.linalg.norm(h - s)
    after = np.linalg.norm(out - s)
    assert after == pytest.approx(before / (1 + alpha), rel=1e-10, abs=1e-12 * (1 + before))
    h1 = np.stack([h, s])
    out1 = merge_layer1(h1, h1[::-1], alpha)
    assert np.all(out1 >= np.minimum(h1, h1[::-1]) - tol) and np.all(out1 <= np.maximum(h1, h1[::-1]) + tol)


@pytest.mark.criterion(8)
@prop
@given(st.integers(0, 2**32 - 1), st.floats(-10, 10), st.floats(-10, 10), st.sampled_from([1, 4, 9]))
def test_pool_is_linear(seed, a, b, K):
    rng = np.random.default_rng(seed)
    x, y = rng.random((27, 27, K)), rng.random((27, 27, K))
    lhs, rhs = pool(a * x + b * y), a * pool(x) + b * pool(y)
    scale = np.abs(a * pool(x)) + np.abs(b * pool(y)) + 1e-300
    assert np.all(np.abs(lhs - rhs) <= 1e-10 * scale + 1e-14)


@pytest.fixture(scope="module")
def small_real(cifar):
    return load_split(cifar, "train", 1000)


@pytest.mark.criterion(8)
def test_zca_whitened_covariance_is_identity(small_real):
    px, _ = small_real
    d = learn_dictionary(px, 50, patches_per_image=10, seed=0)
    # the patch sample the whitener was fit on (same seeded draw)
    patches = sample_patches(px, 6, 10, np.random.default_rng(0))
    _, const = normalize_patches(patches, d.var_reg)
    xw, _ = whiten(patches[~const], d)
    cov = np.cov(xw, rowvar=False)
    diag, off = np.diag(cov).mean(), np.abs(cov - np.diag(np.diag(cov))).max()
    record(8, f"whitened covariance: diag mean {diag:.3f}, max |off-diag| {off:.3f}")
    assert 0.9 <= diag <= 1.1
    assert off < 0.05
    assert np.allclose(d.whitener, d.whitener.T)


@pytest.mark.criterion(8)
@prop
@given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(1, 6))
def test_kmeans_monotone_and_fixed_point(seed, k, dim):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, 5, size=(k, dim))
    x = centers[rng.integers(k, size=60 + 10 * k)] + rng.normal(size=(60 + 10 * k, dim))
    res = kmeans(x, k, seed, max_iter=500, tol=0.0)
    inertia = np.array(res.inertia)
    assert np.all(np.diff(inertia) <= 1e-9 * inertia[:-1])
    assert res.converged
    d = ((x[:, None, :] - res.centers[None]) ** 2).sum(-1)
    cell = np.argmin(d, axis=1)
    for j in range(k):
        assert np.allclose(x[cell == j].mean(axis=0), res.centers[j], atol=1e-6)


@pytest.mark.criterion(8)
@prop
@given(st.integers(0, 2**32 - 1), st.integers(1, 300), st.integers(1, 50))
def test_nearest_center_matches_brute_force(seed, n, dim):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n, dim))
    for _ in range(100):
        q = rng.normal(size=dim) if rng.random() < 0.8 else centers[rng.integers(n)].copy()
        d = [float(((q - c) ** 2).sum()) for c in centers]
        best = min(range(n), key=lambda i: (d[i], i))
        i, c = nearest_center(q, centers)
        assert i == best and np.array_equal(c, centers[best])


@pytest.fixture(scope="module")
def synthetic_bank():
    rng = np.random.default_rng(7)
    means = rng.normal(0, 3, size=(10, 6))
    y = np.repeat(np.arange(10), 30)
    X = means[y] + rng.normal(size=(len(y), 6))
    return train_bank(X, y, seed=0)


@pytest.mark.criterion(8)
def test_svm_exclusion_invariant(synthetic_bank):
    bank = synthetic_bank
    V = np.random.default_rng(0).normal(0, 20, size=(1000, 6))
    for excluded, clf in bank.classifiers():
        assert not np.isin(clf.predict(V), excluded).any(), excluded
    hyp = hypotheses_batch(bank, V, 3)
    assert all(len(set(r)) == 3 for r in hyp.tolist())
    record(8, f"exclusion invariant held for {len(bank)} classifiers on 1000 fuzz vectors")


@pytest.mark.criterion(8)
@prop
# halving is exact for normal floats; subnormal beta would lose bits
@given(st.floats(1e-3, 10), st.just(0.0) | st.floats(1e-3, 10), st.integers(0, 12))
def test_annealing_halves_each_iteration(alpha, beta, T):
    sched = FeedbackConfig(alpha=alpha, beta=beta, iterations=T).schedule()
    assert len(sched) == T
    for t, (a, b) in enumerate(sched):
        assert a == alpha / 2**t and b == beta / 2**t
    flat = FeedbackConfig(alpha=alpha, iterations=T, anneal=False).schedule()
    assert all(a == alpha for a, _ in flat)


@pytest.mark.criterion(8)
def test_anneal_logged_alphas(synthetic_bank):
    from pseudorecur.memory import ClusterMemory

    rng = np.random.default_rng(1)
    mem = ClusterMemory(rng.normal(size=(10, 4, 6)), rng.normal(size=(40, 6)))
    res = run_feedback(rng.normal(size=(3, 6)), mem, synthetic_bank, FeedbackConfig(alpha=0.8, iterations=3),
                       with_logs=True)
    assert [lg.alphas for lg in res.logs] == [[0.8, 0.4, 0.2]] * 3
    assert all(len(lg) == 4 for lg in res.logs)


@pytest.mark.criterion(8)
def test_zero_iterations_is_bitwise_feedforward(small_real):
    from pseudorecur.memory import build_cluster_memory, build_store

    px, y = small_real
    d = learn_dictionary(px[:600], 30, seed=0)
    store = build_store(px[:600], y[:600], d)
    mem = build_cluster_memory(store, 5)
    bank = train_bank(store.h2, store.labels)
    test = px[600:640]
    h2 = pool(encode_batch(test, d))
    expected = bank.full.predict(h2)
    for alpha in (0.1, 0.9):
        cfg = FeedbackConfig(alpha=alpha, iterations=0)
        got = [classify_recurrent(im, d, mem, store, bank, cfg)[0] for im in test]
        assert np.array_equal(got, expected)
        assert np.array_equal(run_feedback(h2, mem, bank, cfg).labels, expected)
    # all-zero magnitudes: identity merges, any T
    cfg = FeedbackConfig(alpha=0.0, iterations=4)
    assert np.array_equal(run_feedback(h2, mem, bank, cfg).labels, expected)


@pytest.mark.criterion(8)
@prop
@given(st.lists(st.floats(-5, 5), min_size=6, max_size=6), st.floats(0.01, 0.99))
def test_imputation_ratio_monotone(pts, t):
    x, mu1, mu2 = np.array(pts[:2]), np.array(pts[2:4]), np.array(pts[4:])
    if np.linalg.norm(mu1 - mu2) < 1e-3 or np.linalg.norm(x - mu1) < 1e-3:
        return
    # the ratio falls monotonically along x -> mu1 exactly when x lies on mu1's side of mu2
    if (x - mu2) @ (mu1 - mu2) <= 1e-6:
        return
    path = [x + s * (mu1 - x) for s in (0.0, t / 2, t)]
    r = likelihood_ratio(np.array(path), mu1, mu2)
    assert r[0] > r[1] > r[2]


@pytest.mark.criterion(8)
def test_imputation_ratio_counterexample():
    """Behind mu2 the ratio first rises even though the path misses mu2."""
    mu1, mu2, x = np.array([0.0, 0.0]), np.array([2.0, 0.0]), np.array([3.0, 0.5])
    path = np.array([x + s * (mu1 - x) for s in (0.0, 0.2)])
    r = likelihood_ratio(path, mu1, mu2)
    assert r[1] > r[0]


@pytest.mark.criterion(8)
def test_toy_infinite_alpha_equals_bayes_error():
    w = single_cluster_world(separation=2.0, sigma=1.0)
    bayes = nearest_mean_bayes_error(2.0, 1.0)
    assert bayes == pytest.approx(norm.cdf(-1.0), abs=1e-15)
    eb, ea = toy_exact(w, 0.0, math.inf, step=0.02)
    assert ea == pytest.approx(bayes, abs=2e-3) and eb == pytest.approx(bayes, abs=2e-3)
    mc = toy_oracle(w, 200_000, 0.0, math.inf, seed=3)
    assert mc.error_after == pytest.approx(bayes, abs=3 * math.sqrt(bayes * (1 - bayes) / 200_000))
    # with one cluster per class, imputation can neither help nor hurt
    for dist in (0.5, 1.5, 3.0):
        r = toy_oracle(w, 20_000, dist, math.inf, seed=4)
        assert r.error_after == r.error_before
    record(8, f"toy: alpha=inf error {ea:.4f} vs closed form {bayes:.4f}")


@pytest.mark.criterion(8)
def test_two_cluster_toy_recovers_distorted_points():
    w = ToyWorld()
    r = toy_oracle(w, 50_000, 1.0, math.inf, seed=0)
    assert r.error_after < r.error_before
    assert r.correction_rate > 0.9


@pytest.mark.criterion(8)
def test_full_pipeline_deterministic(cifar, tmp_path):
    spec = ExperimentSpec(data_dir=str(cifar), train_count=600, test_count=150, k=30, k2=(5,),
                          occlusion=(0.0, 0.33), iterations=(0, 2))
    outs = []
    for run in ("a", "b"):
        rows = harness.run_sweep(spec, tmp_path / run)
        from pseudorecur.outputs import results_csv

        outs.append(results_csv(rows))
    assert outs[0] == outs[1]
    a = sorted((tmp_path / "a").glob("*.prc"))
    b = sorted((tmp_path / "b").glob("*.prc"))
    assert [p.name for p in a] == [p.name for p in b]
    assert all(p.read_bytes() == q.read_bytes() for p, q in zip(a, b))
