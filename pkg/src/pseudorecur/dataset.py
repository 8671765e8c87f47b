"""CIFAR-10 binary ingestion and synthetic center occlusion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

N_CLASSES = 10
SIDE = 32
RECORD_BYTES = 1 + 3 * SIDE * SIDE
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)
OCCLUSION_LEVELS = (0.0, 0.11, 0.25, 0.33, 0.50)


class CifarFormatError(ValueError):
    """Raised when a CIFAR-10 binary file is truncated or malformed."""


class CorruptRecordError(CifarFormatError):
    """Raised when a record carries an out-of-range label."""


class OcclusionSpecError(ValueError):
    pass


@dataclass(frozen=True)
class ImageRecord:
    label: int
    pixels: np.ndarray  # (32, 32, 3) uint8, HWC

    def __post_init__(self):
        if not 0 <= self.label < N_CLASSES:
            raise ValueError(f"label {self.label} outside [0, {N_CLASSES})")
        if self.pixels.shape != (SIDE, SIDE, 3):
            raise ValueError(f"pixels must be 32x32x3, got {self.pixels.shape}")


@dataclass(frozen=True)
class OcclusionSpec:
    area_fraction: float
    fill_value: int = field(default=0, init=False)
    placement: str = field(default="center", init=False)

    def __post_init__(self):
        if not 0.0 <= self.area_fraction < 1.0:
            raise OcclusionSpecError(
                f"area_fraction must lie in [0, 1), got {self.area_fraction}"
            )

    @property
    def side(self) -> int:
        return occluder_side(self.area_fraction)

    @property
    def bounds(self) -> tuple[int, int]:
        """Half-open [start, stop) range shared by rows and columns."""
        return occluder_bounds(self.side)


def occluder_side(area_fraction: float) -> int:
    # round half up, not banker's rounding
    return int(math.floor(SIDE * math.sqrt(area_fraction) + 0.5))


def occluder_bounds(side: int) -> tuple[int, int]:
    c = SIDE // 2
    return c - (side + 1) // 2, c + side // 2


def _read_records(path: Path, start: int, stop: int | None) -> np.ndarray:
    raw = np.fromfile(path, dtype=np.uint8)
    n_full, rem = divmod(raw.size, RECORD_BYTES)
    if rem:
        raise CifarFormatError(
            f"{path}: truncated record at index {n_full} "
            f"({rem} of {RECORD_BYTES} bytes present)"
        )
    stop = n_full if stop is None else min(stop, n_full)
    start = min(start, stop)
    records = raw.reshape(n_full, RECORD_BYTES)[start:stop]
    bad = np.flatnonzero(records[:, 0] >= N_CLASSES)
    if bad.size:
        i = start + int(bad[0])
        raise CorruptRecordError(
            f"{path}: record {i} has label {records[bad[0], 0]} (must be < {N_CLASSES})"
        )
    return records


def _decode(records: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    labels = records[:, 0].astype(np.int64)
    # channel-planar R,G,B -> HWC
    pixels = records[:, 1:].reshape(-1, 3, SIDE, SIDE).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(pixels), labels


def load_cifar10_arrays(
    paths: Path | str | Sequence[Path | str], subset: slice | range | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Read one or more batch files into ``(pixels[N,32,32,3] uint8, labels[N])``.

    ``subset`` selects a contiguous record range over the concatenated files
    in file order.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    start, stop = 0, None
    if subset is not None:
        if getattr(subset, "step", 1) not in (None, 1):
            raise ValueError("subset must be a contiguous range")
        start = subset.start or 0
        stop = subset.stop
    chunks, offset = [], 0
    for p in paths:
        p = Path(p)
        size = p.stat().st_size
        n = size // RECORD_BYTES
        if size % RECORD_BYTES:
            # surface the truncation with the global record index
            try:
                _read_records(p, 0, None)
            except CifarFormatError as exc:
                raise CifarFormatError(f"{exc} (global index {offset + n})") from None
        lo, hi = max(start - offset, 0), n if stop is None else min(stop - offset, n)
        if hi > lo:
            chunks.append(_read_records(p, lo, hi))
        offset += n
        if stop is not None and offset >= stop:
            break
    if not chunks:
        return np.zeros((0, SIDE, SIDE, 3), np.uint8), np.zeros(0, np.int64)
    return _decode(np.concatenate(chunks))


def load_cifar10(
    path: Path | str | Sequence[Path | str], subset: slice | range | None = None
) -> list[ImageRecord]:
    pixels, labels = load_cifar10_arrays(path, subset)
    return [ImageRecord(int(y), x) for x, y in zip(pixels, labels)]


def split_files(data_dir: Path | str, split: str) -> list[Path]:
    names = {"train": TRAIN_FILES, "test": TEST_FILES}[split]
    data_dir = Path(data_dir)
    missing = [n for n in names if not (data_dir / n).exists()]
    if missing:
        raise FileNotFoundError(f"{data_dir}: missing {', '.join(missing)}")
    return [data_dir / n for n in names]


def load_split(
    data_dir: Path | str, split: str, count: int | None = None, shuffle_seed: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Load the first ``count`` records of a split (file order).

    With ``shuffle_seed`` the whole split is read and a seeded random subset
    of ``count`` records is returned instead.
    """
    files = split_files(data_dir, split)
    if shuffle_seed is None:
        return load_cifar10_arrays(files, None if count is None else range(0, count))
    pixels, labels = load_cifar10_arrays(files)
    order = np.random.default_rng(shuffle_seed).permutation(len(labels))[:count]
    return pixels[order], labels[order]


def write_cifar10(path: Path | str, pixels: np.ndarray, labels: np.ndarray) -> None:
    """Write records in the native binary layout (inverse of the loader)."""
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(-1, SIDE, SIDE, 3)
    out = np.empty((len(pixels), RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = labels
    out[:, 1:] = pixels.transpose(0, 3, 1, 2).reshape(len(pixels), -1)
    Path(path).write_bytes(out.tobytes())


def as_arrays(records: Iterable[ImageRecord]) -> tuple[np.ndarray, np.ndarray]:
    records = list(records)
    if not records:
        return np.zeros((0, SIDE, SIDE, 3), np.uint8), np.zeros(0, np.int64)
    return (
        np.stack([r.pixels for r in records]),
        np.array([r.label for r in records], dtype=np.int64),
    )


def occlude_pixels(pixels: np.ndarray, spec: OcclusionSpec | float) -> np.ndarray:
    """Zero the centered square on a single image or a batch ``[..., 32, 32, C]``."""
    if not isinstance(spec, OcclusionSpec):
        spec = OcclusionSpec(float(spec))
    out = np.array(pixels, copy=True)
    if spec.side == 0:
        return out
    lo, hi = spec.bounds
    out[..., lo:hi, lo:hi, :] = spec.fill_value
    return out


def occlude(image: ImageRecord, spec: OcclusionSpec | float) -> ImageRecord:
    return ImageRecord(image.label, occlude_pixels(image.pixels, spec))


def augment_arrays(
    pixels: np.ndarray, labels: np.ndarray, levels: Sequence[float]
) -> tuple[np.ndarray, np.ndarray]:
    if len(levels) == 0:
        raise ValueError("augmentation needs at least one occlusion level")
    specs = [OcclusionSpec(float(f)) for f in levels]
    blocks = [pixels] + [occlude_pixels(pixels, s) for s in specs]
    return np.concatenate(blocks), np.tile(labels, len(specs) + 1)


def augment_with_occlusions(
    train: Sequence[ImageRecord], levels: Sequence[float]
) -> list[ImageRecord]:
    """Originals first, then one occluded copy of every image per level."""
    if len(levels) == 0:
        raise ValueError("augmentation needs at least one occlusion level")
    specs = [OcclusionSpec(float(f)) for f in levels]
    out = list(train)
    for s in specs:
        out.extend(occlude(r, s) for r in train)
    return out
