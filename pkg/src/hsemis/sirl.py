"""Similarity-aware proxy labeling of reconstructed images against per-class median templates."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ShapeError

DEFAULT_TAU = 0.80
DEFAULT_ALPHA = 0.5
DIST_FLOOR = 1e-8
UNASSIGNED = -1


@dataclass(frozen=True)
class TemplateLibrary:
    templates: np.ndarray  # [C, d]
    samples_per_class: int = 50

    @property
    def class_count(self) -> int:
        return self.templates.shape[0]

    @property
    def dim(self) -> int:
        return self.templates.shape[1]


@dataclass(frozen=True)
class ProxyLabel:
    label: int
    score: float
    per_class_scores: np.ndarray


def build_template_library(features, k: int = 50, rng: np.random.Generator | None = None) -> TemplateLibrary:
    """``features[c]`` is an ``[n_c, d]`` array; up to ``k`` rows per class enter the median.

    Rows are drawn without replacement by ``rng``; without one the first ``k`` are used.
    """
    if k < 1:
        raise ValueError("k must be positive")
    templates = []
    for c, rows in enumerate(features):
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        if rows.size == 0:
            raise ValueError(f"class {c} has no feature vectors")
        if len(rows) > k:
            idx = rng.choice(len(rows), size=k, replace=False) if rng is not None else np.arange(k)
            rows = rows[idx]
        templates.append(np.median(rows, axis=0))
    dims = {t.shape for t in templates}
    if len(dims) != 1:
        raise ShapeError(f"templates differ in dimension: {sorted(dims)}")
    return TemplateLibrary(np.stack(templates), k)


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")


def similarity_score(f, t, alpha: float = DEFAULT_ALPHA) -> float:
    """``alpha * cos(f, t) + (1 - alpha) / max(||f - t||, 1e-8)``."""
    _check_alpha(alpha)
    f, t = np.asarray(f, dtype=np.float64), np.asarray(t, dtype=np.float64)
    if f.shape != t.shape:
        raise ShapeError(f"vector shapes differ: {f.shape} vs {t.shape}")
    nf, nt = np.linalg.norm(f), np.linalg.norm(t)
    if nf == 0.0 or nt == 0.0:
        raise ValueError("similarity is undefined for a zero vector")
    cos = float(f @ t) / (nf * nt)
    return alpha * cos + (1.0 - alpha) / max(float(np.linalg.norm(f - t)), DIST_FLOOR)


def score_matrix(feats: np.ndarray, lib: TemplateLibrary, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Vectorized scores ``[N, C]`` for rows of ``feats``."""
    _check_alpha(alpha)
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    if feats.shape[1] != lib.dim:
        raise ShapeError(f"feature dimension {feats.shape[1]} != library dimension {lib.dim}")
    nf = np.linalg.norm(feats, axis=1)
    nt = np.linalg.norm(lib.templates, axis=1)
    if np.any(nf == 0.0) or np.any(nt == 0.0):
        raise ValueError("similarity is undefined for a zero vector")
    cos = (feats @ lib.templates.T) / np.outer(nf, nt)
    dist = np.linalg.norm(feats[:, None, :] - lib.templates[None], axis=2)
    return alpha * cos + (1.0 - alpha) / np.maximum(dist, DIST_FLOOR)


def _pick(scores: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    best = np.argmax(scores, axis=1)  # first maximum wins ties
    top = scores[np.arange(len(scores)), best]
    return np.where(top >= tau, best, UNASSIGNED), top


def assign_label(f, lib: TemplateLibrary, tau: float = DEFAULT_TAU, alpha: float = DEFAULT_ALPHA) -> ProxyLabel:
    scores = score_matrix(f, lib, alpha)
    labels, top = _pick(scores, tau)
    return ProxyLabel(int(labels[0]), float(top[0]), scores[0])


@dataclass
class ProxyResult:
    ids: list[str]
    labels: np.ndarray  # all samples, -1 where discarded
    scores: np.ndarray

    @property
    def kept(self) -> np.ndarray:
        return np.flatnonzero(self.labels != UNASSIGNED)

    @property
    def discard_count(self) -> int:
        return int(np.sum(self.labels == UNASSIGNED))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "label", "score"])
        for sid, lab, sc in zip(self.ids, self.labels, self.scores):
            w.writerow([sid, int(lab), repr(float(sc))])
        return buf.getvalue()


def label_reconstructed_set(x_rec, extractor: Callable[[np.ndarray], np.ndarray], lib: TemplateLibrary,
                            tau: float = DEFAULT_TAU, alpha: float = DEFAULT_ALPHA, ids=None) -> ProxyResult:
    """Score every reconstruction and keep those whose best score reaches ``tau``."""
    feats = np.asarray(extractor(np.asarray(x_rec)), dtype=np.float64)
    labels, top = _pick(score_matrix(feats, lib, alpha), tau)
    ids = list(ids) if ids is not None else [f"r{i:05d}" for i in range(len(feats))]
    return ProxyResult(ids, labels, top)
