"""Shared fixtures and the acceptance summary.

Real-data tests read CIFAR-10 from ``$PSEUDORECUR_DATA`` (default
``/root/data/cifar-10-batches-bin``, then ``./data/cifar-10-batches-bin``)
and are skipped when the files are absent.
"""

from __future__ import annotations

import os
import time
from pathlib import Path

import numpy as np
import pytest

from pseudorecur.dataset import N_CLASSES, TEST_FILES, TRAIN_FILES, write_cifar10

ROOT = Path(__file__).resolve().parents[1]
_CANDIDATES = [os.environ.get("PSEUDORECUR_DATA"), "/root/data/cifar-10-batches-bin",
               str(ROOT / "data" / "cifar-10-batches-bin")]


def cifar_dir() -> Path | None:
    for c in _CANDIDATES:
        if c and all((Path(c) / n).exists() for n in TRAIN_FILES + TEST_FILES):
            return Path(c)
    return None


@pytest.fixture(scope="session")
def cifar():
    d = cifar_dir()
    if d is None:
        pytest.skip("CIFAR-10 binary batches not found (set PSEUDORECUR_DATA)")
    return d


def synthetic_images(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Smooth class-dependent color blobs with noise: learnable but not trivial."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % N_CLASSES
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:32, 0:32] / 31.0
    palette = rng.uniform(40, 215, size=(N_CLASSES, 3))
    freq = 1.0 + np.arange(N_CLASSES) % 4
    phase = np.linspace(0, np.pi, N_CLASSES)
    imgs = np.empty((n, 32, 32, 3))
    for i, c in enumerate(labels):
        wave = np.sin(2 * np.pi * freq[c] * (xx * np.cos(phase[c]) + yy * np.sin(phase[c])))
        imgs[i] = palette[c] + 40 * wave[..., None] + rng.normal(0, 25, size=(32, 32, 3))
    return np.clip(imgs, 0, 255).astype(np.uint8), labels.astype(np.int64)


@pytest.fixture(scope="session")
def tiny_cifar(tmp_path_factory) -> Path:
    """A synthetic dataset in the native binary layout: 5x80 train, 100 test."""
    d = tmp_path_factory.mktemp("tiny-cifar")
    for i, name in enumerate(TRAIN_FILES):
        write_cifar10(d / name, *synthetic_images(80, seed=i))
    write_cifar10(d / TEST_FILES[0], *synthetic_images(100, seed=99))
    return d


# acceptance summary -------------------------------------------------------

_OUTCOMES: dict[int, list[tuple[str, str, float]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_collection_modifyitems(items):
    for item in items:
        if "desk" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _OUTCOMES.setdefault(m.args[0], []).append((item.name, rep.outcome, rep.duration))


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    from _report import DETAILS, TITLES, BUDGETS

    lines = []
    for n in sorted(_OUTCOMES):
        results = _OUTCOMES[n]
        spent = sum(r[2] for r in results)
        if all(r[1] == "skipped" for r in results):
            status = "SKIP"
        else:
            status = "PASS" if all(r[1] == "passed" for r in results) else "FAIL"
        budget = BUDGETS.get(n)
        if budget is not None and spent > budget and status == "PASS":
            status = "FAIL"
        failed = [r[0] for r in results if r[1] == "failed"]
        detail = "; ".join(DETAILS.get(n, []))
        extra = f" failed: {', '.join(failed)}" if failed else ""
        lines.append(f"criterion {n} [{status}] {TITLES.get(n, '')} ({spent:.0f}s){extra} | {detail}")
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
    (ROOT / "acceptance_report.txt").write_text(
        time.strftime("%Y-%m-%d %H:%M:%S\n") + "\n".join(lines) + "\n"
    )
