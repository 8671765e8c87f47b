"""Result files: CSV tables, tab-separated plot data, rendered figures and a run manifest.

``results.csv`` holds only deterministic columns so that a re-run with the same
seed reproduces it byte for byte; wall-clock measurements go to
``timings.csv``.
"""

from __future__ import annotations

import csv
import io
import json
import platform
import sys
from dataclasses import asdict
from importlib import metadata
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import N_CLASSES
from .harness import PARAM_FIELDS, ResultRow, ToyRow, feedforward_reference, gain

RESULT_FIELDS = (
    *PARAM_FIELDS, "status", "reason", "n_test", "accuracy",
    *(f"acc_class{c}" for c in range(N_CLASSES)),
    "distance_evals", "store_evals", "recon_flips", "recon_fraction",
)
TIMING_FIELDS = (*PARAM_FIELDS, "status", "test_seconds", "feedback_seconds", "distance_evals")


class OutputError(OSError):
    pass


def prepare_output_dir(path: Path | str) -> Path:
    """Create ``path`` and prove it is writable before any computation starts."""
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OutputError(f"output directory {out} is not writable: {exc}") from exc
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, (float, np.floating)):
        return "nan" if np.isnan(v) else repr(float(v))
    return str(v)


def result_record(row: ResultRow) -> dict:
    rec = dict(row.params())
    rec.update(status=row.status, reason=row.reason, n_test=row.n_test,
               accuracy=row.accuracy if row.ok else None,
               distance_evals=row.distance_evals, store_evals=row.store_evals,
               recon_flips=row.recon_flips, recon_fraction=row.recon_fraction)
    for c in range(N_CLASSES):
        rec[f"acc_class{c}"] = row.per_class[c] if row.per_class else None
    return rec


def _table(records: Sequence[dict], columns: Sequence[str], delimiter: str = ",") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(columns)
    for rec in records:
        w.writerow([_fmt(rec.get(c)) for c in columns])
    return buf.getvalue()


def results_csv(rows: Sequence[ResultRow]) -> str:
    return _table([result_record(r) for r in rows], RESULT_FIELDS)


def timings_csv(rows: Sequence[ResultRow]) -> str:
    recs = []
    for r in rows:
        rec = dict(r.params(), status=r.status, test_seconds=r.test_seconds,
                   feedback_seconds=r.feedback_seconds, distance_evals=r.distance_evals)
        recs.append(rec)
    return _table(recs, TIMING_FIELDS)


def toy_csv(rows: Sequence[ToyRow]) -> str:
    recs = [asdict(r) for r in rows]
    return _table(recs, list(recs[0]))


# plot data ----------------------------------------------------------------

def _label(p: dict, keys: Sequence[str]) -> str:
    return ";".join(f"{k}={_fmt(p[k])}" for k in keys) or "all"


def series_table(
    rows: Sequence[ResultRow], x: str, y: str = "accuracy", select=lambda r: True
) -> list[tuple[float, float, str]]:
    """``(x, y, series)`` triples; the series label lists every other parameter that varies.

    ``y`` is ``accuracy``, ``gain`` (minus feedforward on the same test set)
    or ``improvement`` (percent change over feedforward).
    """
    ref = feedforward_reference(rows)
    chosen = [r for r in rows if r.ok and select(r)]
    if not chosen:
        return []
    params = [r.params() for r in chosen]
    varying = [k for k in PARAM_FIELDS if k != x and len({p[k] for p in params}) > 1]
    out = []
    for r, p in zip(chosen, params):
        if y == "accuracy":
            val = r.accuracy
        elif y == "gain":
            val = gain(r, ref)
        else:
            base = ref.get((p["occlusion"], p["augment"]), np.nan)
            val = 100.0 * (r.accuracy - base) / base if base else np.nan
        out.append((float(p[x]), float(val), _label(p, varying)))
    return sorted(out, key=lambda t: (t[2], t[0]))


def _is(baseline):
    return lambda r: r.point.baseline == baseline


FIGURES = {
    # name: (x, y, selector, x label, y label)
    "occlusion_accuracy": ("occlusion", "accuracy", lambda r: r.point.baseline != "rbm", "occlusion fraction", "accuracy"),
    "occlusion_improvement": ("occlusion", "improvement", _is("feedback"), "occlusion fraction", "improvement over feedforward (%)"),
    "k2_gain": ("k2", "gain", _is("feedback"), "cluster centers per class", "accuracy gain"),
    "iterations_gain": ("iterations", "gain", _is("feedback"), "feedback iterations", "accuracy gain"),
    "alpha_gain": ("alpha", "gain", _is("feedback"), "feedback magnitude", "accuracy gain"),
    "beta_gain": ("beta", "gain", _is("feedback"), "Layer-1 feedback magnitude", "accuracy gain"),
    "tau_gain": ("tau", "gain", _is("feedback"), "re-pool ratio", "accuracy gain"),
    "rbm_accuracy": ("gibbs_epochs", "accuracy", _is("rbm"), "Gibbs epochs", "accuracy"),
}


def plot_data(rows: Sequence[ResultRow]) -> dict[str, tuple[list, str, str]]:
    """Figure name -> (triples, x label, y label) for every axis the sweep varied."""
    out = {}
    for name, (x, y, sel, xl, yl) in FIGURES.items():
        triples = series_table(rows, x, y, sel)
        if len({t[0] for t in triples}) >= 2:
            out[name] = (triples, xl, yl)
    return out


def plot_tsv(triples: Sequence[tuple[float, float, str]]) -> str:
    return _table([{"x": a, "y": b, "series": s} for a, b, s in triples], ("x", "y", "series"), "\t")


def render(triples, xlabel: str, ylabel: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    for s in dict.fromkeys(t[2] for t in triples):
        pts = [(a, b) for a, b, lab in triples if lab == s]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=s)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    if len({t[2] for t in triples}) > 1:
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# manifest -----------------------------------------------------------------

def versions() -> dict[str, str]:
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "numba", "matplotlib"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "not installed"
    return out


def write_manifest(out_dir: Path, command: str, params: dict, seed: int, extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "argv": sys.argv,
        "seed": seed,
        "versions": versions(),
        "params": params,
        **(extra or {}),
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def emit_outputs(
    rows: Sequence[ResultRow],
    out_dir: Path | str,
    figures: bool = True,
    echo=None,
) -> list[Path]:
    """Write results.csv, timings.csv and one TSV (+ PNG) per figure; returns the paths."""
    if not rows:
        raise ValueError("no result rows to write")
    out = prepare_output_dir(out_dir)
    text = results_csv(rows)
    if echo is not None:
        echo(text)
    written = []
    for name, body in (("results.csv", text), ("timings.csv", timings_csv(rows))):
        (out / name).write_text(body, encoding="utf-8")
        written.append(out / name)
    for name, (triples, xl, yl) in plot_data(rows).items():
        p = out / f"plot_{name}.tsv"
        p.write_text(plot_tsv(triples), encoding="utf-8")
        written.append(p)
        if figures:
            render(triples, xl, yl, out / f"plot_{name}.png")
            written.append(out / f"plot_{name}.png")
    return written


def emit_toy(rows: Sequence[ToyRow], out_dir: Path | str, figures: bool = True, echo=None) -> list[Path]:
    if not rows:
        raise ValueError("no toy rows to write")
    out = prepare_output_dir(out_dir)
    text = toy_csv(rows)
    if echo is not None:
        echo(text)
    (out / "toy.csv").write_text(text, encoding="utf-8")
    triples = []
    for r in rows:
        triples.append((r.distortion, r.error_before, "before"))
        triples.append((r.distortion, r.error_after, f"after;alpha={_fmt(r.alpha)}"))
    triples = sorted(set(triples), key=lambda t: (t[2], t[0]))
    (out / "plot_toy_error.tsv").write_text(plot_tsv(triples), encoding="utf-8")
    written = [out / "toy.csv", out / "plot_toy_error.tsv"]
    if figures:
        render(triples, "distortion", "misclassification rate", out / "plot_toy_error.png")
        written.append(out / "plot_toy_error.png")
    return written


def emit_timing(summary, out_dir: Path | str, figures: bool = True) -> list[Path]:
    out = prepare_output_dir(out_dir)
    (out / "timing_summary.json").write_text(json.dumps(summary.to_dict(), indent=2) + "\n")
    triples = sorted(
        (float(c["k2"]), c["feedback_seconds"], f"scheme={c['scheme']};m={c['m']};iterations={c['iterations']}")
        for c in summary.configs
    )
    written = [out / "timing_summary.json"]
    if len({t[0] for t in triples}) >= 2:
        (out / "plot_timing_k2.tsv").write_text(plot_tsv(triples), encoding="utf-8")
        written.append(out / "plot_timing_k2.tsv")
        if figures:
            render(triples, "cluster centers per class", "feedback seconds per image", out / "plot_timing_k2.png")
            written.append(out / "plot_timing_k2.png")
    return written
