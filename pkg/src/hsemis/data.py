"""Synthetic knee-radiograph stand-in, dataset directories, and stratified splits.

Each image shows two bright horizontal bands (femur above, tibia below)
separated by a joint gap that narrows with grade, plus bright marginal blobs
whose count grows with grade.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, StratificationError
from .hstn import atomic_write_text, read_hstn, write_hstn

# skewed like a typical five-grade knee cohort (grade 0 largest, grade 4 smallest), 1,250 in total
DEFAULT_COUNTS = (493, 226, 329, 164, 38)
LABEL_FRACTIONS = (0.01, 0.05, 0.10, 0.20)


@dataclass
class SyntheticSpec:
    image_size: int = 32
    class_count: int = 5
    counts: tuple[int, ...] = DEFAULT_COUNTS
    gap_widths: tuple[int, ...] = (10, 8, 6, 4, 2)
    blob_counts: tuple[int, ...] = (0, 0, 1, 2, 3)
    noise_sigma: float = 0.08
    gap_jitter: int = 1
    center_jitter: int = 2
    band_intensity: float = 0.8
    blob_intensity: float = 0.5
    seed: int = 42

    def validate(self) -> None:
        k = self.class_count
        if k < 2:
            raise DataError("need at least two classes")
        for name in ("counts", "gap_widths", "blob_counts"):
            if len(getattr(self, name)) != k:
                raise DataError(f"{name} must have {k} entries")
        if any(c < 0 for c in self.counts):
            raise DataError("counts must be nonnegative")
        gaps = self.gap_widths
        if any(a <= b for a, b in zip(gaps, gaps[1:])):
            raise DataError("gap width must strictly decrease with grade")
        if any(a > b for a, b in zip(self.blob_counts, self.blob_counts[1:])):
            raise DataError("blob count must not decrease with grade")
        widest = gaps[0] + self.gap_jitter + 2 * self.center_jitter
        if gaps[-1] - self.gap_jitter < 1 or widest + 8 >= self.image_size:
            raise DataError(f"gap geometry does not fit a {self.image_size}px image")
        if self.noise_sigma < 0:
            raise DataError("noise sigma must be nonnegative")


def render_sample(spec: SyntheticSpec, grade: int, offset: int) -> np.ndarray:
    """Deterministic ``[size, size, 1]`` image for ``(spec.seed, grade, offset)``."""
    rng = np.random.default_rng([spec.seed, grade, offset])
    n = spec.image_size
    img = np.full((n, n), 0.1)
    gap = spec.gap_widths[grade] + int(rng.integers(-spec.gap_jitter, spec.gap_jitter + 1))
    centre = n // 2 + int(rng.integers(-spec.center_jitter, spec.center_jitter + 1))
    top = centre - gap // 2
    bottom = top + gap
    img[:top, :] = spec.band_intensity
    img[bottom:, :] = spec.band_intensity
    rows, cols = np.mgrid[0:n, 0:n]
    for _ in range(spec.blob_counts[grade]):
        c = int(rng.integers(2, n - 2))
        r = top if rng.random() < 0.5 else bottom - 1
        img += spec.blob_intensity * np.exp(-((rows - r) ** 2 + (cols - c) ** 2) / 2.0)
    if spec.noise_sigma > 0:
        img += rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return img[..., None]


@dataclass
class Dataset:
    images: np.ndarray  # [N, h, w, ch]
    grades: np.ndarray  # [N] int
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.ids:
            self.ids = [f"s{i:05d}" for i in range(len(self.images))]
        if len(self.ids) != len(self.images) or len(self.grades) != len(self.images):
            raise DataError("images, grades and ids differ in length")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.grades[idx], [self.ids[i] for i in idx])


def synth_dataset(spec: SyntheticSpec | None = None) -> Dataset:
    spec = spec or SyntheticSpec()
    spec.validate()
    images, grades = [], []
    for grade, count in enumerate(spec.counts):
        for offset in range(count):
            images.append(render_sample(spec, grade, offset))
            grades.append(grade)
    return Dataset(np.stack(images), np.asarray(grades, dtype=np.int64))


def labels_csv(ids, grades) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "grade"])
    for i, g in zip(ids, grades):
        w.writerow([i, int(g)])
    return buf.getvalue()


def write_dataset(ds: Dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for sid, img in zip(ds.ids, ds.images):
        write_hstn(directory / f"{sid}.hstn", img)
    atomic_write_text(directory / "labels.csv", labels_csv(ds.ids, ds.grades))


def read_labels(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"id", "grade"} <= set(reader.fieldnames):
            raise DataError(f"{path}: expected header 'id,grade'")
        rows = list(reader)
    try:
        grades = np.asarray([int(r["grade"]) for r in rows], dtype=np.int64)
    except ValueError as exc:
        raise DataError(f"{path}: non-integer grade") from exc
    return [r["id"] for r in rows], grades


def read_dataset(directory, labels_path=None) -> Dataset:
    """Load a directory of ``<id>.hstn`` tensors; labels default to ``labels.csv`` if present."""
    directory = Path(directory)
    labels_path = Path(labels_path) if labels_path else directory / "labels.csv"
    if labels_path.exists():
        ids, grades = read_labels(labels_path)
    else:
        ids = sorted(p.stem for p in directory.glob("*.hstn"))
        grades = np.full(len(ids), -1, dtype=np.int64)
    if not ids:
        raise DataError(f"{directory}: no samples")
    images = []
    for sid in ids:
        path = directory / f"{sid}.hstn"
        if not path.exists():
            raise DataError(f"missing tensor {path}")
        img = read_hstn(path).astype(np.float64)
        images.append(img if img.ndim == 3 else img[..., None])
    return Dataset(np.stack(images), grades, list(ids))


@dataclass
class Split:
    labeled: np.ndarray
    unlabeled: np.ndarray
    test: np.ndarray


def split_dataset(grades, label_fraction: float = 0.20, seed: int = 0, test_fraction: float = 0.20) -> Split:
    """Stratified train/test split, then a stratified labeled/unlabeled split of train.

    Returns index arrays into ``grades``.
    """
    if label_fraction not in LABEL_FRACTIONS:
        raise ValueError(f"label fraction must be one of {LABEL_FRACTIONS}")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test fraction must lie in (0, 1)")
    grades = np.asarray(grades)
    rng = np.random.default_rng(seed)
    labeled, unlabeled, test = [], [], []
    for g in np.unique(grades):
        idx = rng.permutation(np.flatnonzero(grades == g))
        n_test = int(np.floor(test_fraction * len(idx) + 0.5))
        train = idx[n_test:]
        n_lab = int(np.floor(label_fraction * len(train) + 0.5))
        if n_lab == 0:
            raise StratificationError(
                f"grade {g} has {len(train)} training samples; fraction {label_fraction} labels none"
            )
        test.extend(idx[:n_test])
        labeled.extend(train[:n_lab])
        unlabeled.extend(train[n_lab:])
    return Split(np.sort(labeled), np.sort(unlabeled), np.sort(test))
