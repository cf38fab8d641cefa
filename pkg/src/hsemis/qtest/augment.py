"""Weak and strong (RandAugment-style) image augmentations for ``[h, w, ch]`` arrays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

STRONG_OPS = ("invert", "shear_x", "shear_y", "scale", "translate_x", "translate_y",
              "brightness", "rotate", "blur")


@dataclass(frozen=True)
class AugmentationSpec:
    flip_prob: float = 0.5
    max_translate: float = 0.2
    shear: tuple[float, float] = (-0.3, 0.3)
    scale: tuple[float, float] = (0.51, 0.60)
    translate: tuple[float, float] = (-0.3, 0.3)
    brightness: tuple[float, float] = (0.05, 0.95)
    rotation_deg: tuple[float, float] = (-30.0, 30.0)
    blur_kernels: tuple[int, ...] = (3, 5)
    ops_per_sample: int = 2

    def range_of(self, op: str):
        return {
            "invert": None,
            "shear_x": self.shear, "shear_y": self.shear,
            "scale": self.scale,
            "translate_x": self.translate, "translate_y": self.translate,
            "brightness": self.brightness,
            "rotate": self.rotation_deg,
            "blur": self.blur_kernels,
        }[op]


def flip(x: np.ndarray, horizontal: bool = True) -> np.ndarray:
    return x[:, ::-1] if horizontal else x[::-1]


def translate(x: np.ndarray, dy: float, dx: float) -> np.ndarray:
    """Shift by ``(dy, dx)`` pixels, filling with zeros."""
    return ndimage.shift(x, (dy, dx, 0), order=1, mode="constant", cval=0.0)


def _affine(x: np.ndarray, matrix: np.ndarray, offset_px=(0.0, 0.0)) -> np.ndarray:
    """Apply ``matrix`` (output -> input coordinates) about the image centre."""
    h, w = x.shape[:2]
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = centre - matrix @ centre - np.asarray(offset_px)
    out = np.empty_like(x)
    for c in range(x.shape[2]):
        out[..., c] = ndimage.affine_transform(x[..., c], matrix, offset=offset, order=1,
                                               mode="constant", cval=0.0)
    return out


def gaussian_blur(x: np.ndarray, kernel: int) -> np.ndarray:
    sigma = 0.3 * ((kernel - 1) * 0.5 - 1) + 0.8
    radius = kernel // 2
    return ndimage.gaussian_filter(x, sigma=(sigma, sigma, 0), radius=(radius, radius, 0), mode="nearest")


def apply_op(x: np.ndarray, op: str, magnitude) -> np.ndarray:
    h, w = x.shape[:2]
    if op == "invert":
        return 1.0 - x
    if op == "shear_x":
        return _affine(x, np.array([[1.0, 0.0], [magnitude, 1.0]]))
    if op == "shear_y":
        return _affine(x, np.array([[1.0, magnitude], [0.0, 1.0]]))
    if op == "scale":
        return _affine(x, np.eye(2) / magnitude)
    if op == "translate_x":
        return translate(x, 0.0, magnitude * w)
    if op == "translate_y":
        return translate(x, magnitude * h, 0.0)
    if op == "brightness":
        return x * magnitude
    if op == "rotate":
        t = np.deg2rad(magnitude)
        return _affine(x, np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]]))
    if op == "blur":
        return gaussian_blur(x, int(magnitude))
    raise ValueError(f"unknown augmentation {op!r}")


def sample_strong_params(rng: np.random.Generator, spec: AugmentationSpec = AugmentationSpec()):
    """Draw ``ops_per_sample`` distinct ops and their magnitudes."""
    ops = rng.choice(len(STRONG_OPS), size=spec.ops_per_sample, replace=False)
    params = []
    for i in ops:
        op = STRONG_OPS[i]
        rng_ = spec.range_of(op)
        if op == "invert":
            mag = None
        elif op == "blur":
            mag = int(rng.choice(rng_))
        else:
            mag = float(rng.uniform(*rng_))
        params.append((op, mag))
    return params


def sample_weak_params(rng: np.random.Generator, spec: AugmentationSpec = AugmentationSpec()):
    return {
        "flip_h": bool(rng.random() < spec.flip_prob),
        "flip_v": bool(rng.random() < spec.flip_prob),
        "dy": float(rng.uniform(-spec.max_translate, spec.max_translate)),
        "dx": float(rng.uniform(-spec.max_translate, spec.max_translate)),
    }


def weak_augment(x: np.ndarray, seed, spec: AugmentationSpec = AugmentationSpec()) -> np.ndarray:
    p = sample_weak_params(np.random.default_rng(seed), spec)
    if p["flip_h"]:
        x = flip(x, True)
    if p["flip_v"]:
        x = flip(x, False)
    h, w = x.shape[:2]
    return translate(np.ascontiguousarray(x), p["dy"] * h, p["dx"] * w)


def strong_augment(x: np.ndarray, seed, spec: AugmentationSpec = AugmentationSpec()) -> np.ndarray:
    for op, mag in sample_strong_params(np.random.default_rng(seed), spec):
        x = apply_op(x, op, mag)
    return x
