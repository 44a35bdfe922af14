"""Volume-to-slice-stack preprocessing.

A CT volume becomes a fixed-length stack of float64 slices in [0, 1]:
uniformly spaced slices are sampled along z, every voxel is mapped through a
lung intensity window, and each slice is resized to a common working
resolution (slightly larger than the final crop size so augmentation can
crop and rotate without running out of pixels).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume_io import Volume


@dataclass(frozen=True)
class WindowSpec:
    """Linear intensity window: [level - width/2, level + width/2] -> [0, 1]."""

    level: float = -600.0
    width: float = 1500.0

    def __post_init__(self) -> None:
        if not (np.isfinite(self.level) and np.isfinite(self.width)) or self.width <= 0:
            raise ValueError(f"bad window: level={self.level}, width={self.width}")


@dataclass
class SliceStack:
    """A fixed-size stack of windowed slices, (n_slices, height, width) float64."""

    data: np.ndarray
    subject_id: str = ""

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"stack must be 3-D, got shape {self.data.shape}")

    @property
    def n_slices(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def validate(self) -> None:
        if min(self.data.shape) < 1:
            raise ValueError(f"empty stack: {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("stack contains non-finite values")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ValueError("stack values outside [0, 1]")


def window_hu(hu, spec: WindowSpec = WindowSpec()):
    """Map HU to [0, 1]; values below/above the window clamp to 0/1.

    Accepts scalars or arrays and preserves shape.
    """
    low = spec.level - spec.width / 2.0
    out = np.clip((np.asarray(hu, dtype=np.float64) - low) / spec.width, 0.0, 1.0)
    if np.ndim(hu) == 0:
        return float(out)
    return out


def uniform_sample_indices(depth: int, n: int = 32) -> list[int]:
    """Indices of n uniformly spaced slices from a volume of the given depth.

    i_k = round(k * (depth - 1) / (n - 1)), computed in exact integer
    arithmetic with halves rounding up; endpoints always land on the first
    and last slice, and indices repeat when depth < n. n = 1 picks the
    middle slice.
    """
    if depth < 1 or n < 1:
        raise ValueError(f"depth and n must be positive, got depth={depth}, n={n}")
    if n == 1:
        return [(depth - 1) // 2]
    span, den = depth - 1, n - 1
    return [(2 * k * span + den) // (2 * den) for k in range(n)]


def _sample_coords(n_out: int, n_in: int) -> np.ndarray:
    # corner-aligned: first/last output samples land exactly on the
    # first/last input samples, so constants and endpoints are preserved
    if n_in == 1 or n_out == 1:
        return np.full(n_out, 0.5 * (n_in - 1))
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def resize_bilinear(img: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear resize of one 2-D image to out_hw (float64).

    Interpolation is a convex combination, so the output never leaves the
    input's value range; equal input/output dims return a bit-equal copy.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 1:
        raise ValueError(f"expected a non-empty 2-D image, got shape {img.shape}")
    out_h, out_w = int(out_hw[0]), int(out_hw[1])
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bad output size {out_hw}")
    if (out_h, out_w) == img.shape:
        return img.copy()

    ys = _sample_coords(out_h, img.shape[0])
    xs = _sample_coords(out_w, img.shape[1])
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, img.shape[0] - 1)
    x1 = np.minimum(x0 + 1, img.shape[1] - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]

    top = (1.0 - fx) * img[np.ix_(y0, x0)] + fx * img[np.ix_(y0, x1)]
    bottom = (1.0 - fx) * img[np.ix_(y1, x0)] + fx * img[np.ix_(y1, x1)]
    out = (1.0 - fy) * top + fy * bottom
    # weights sum to 1 only up to rounding; clip the last-ulp excursions
    return np.clip(out, img.min(), img.max())


def preprocess_volume(
    volume: Volume,
    spec: WindowSpec = WindowSpec(),
    n: int = 32,
    out_hw: tuple[int, int] = (256, 256),
) -> SliceStack:
    """Sample n slices, window every voxel, resize each slice to out_hw."""
    if int(out_hw[0]) < 8 or int(out_hw[1]) < 8:
        raise ValueError(f"working resolution too small: {out_hw}")
    depth = volume.hu.shape[0]
    indices = uniform_sample_indices(depth, n)
    windowed = window_hu(volume.hu[np.asarray(indices)], spec)
    if windowed.shape[1:] == tuple(out_hw):
        data = windowed
    else:
        data = np.empty((n, int(out_hw[0]), int(out_hw[1])), dtype=np.float64)
        for i in range(n):
            data[i] = resize_bilinear(windowed[i], out_hw)
    return SliceStack(data, subject_id=volume.subject_id)
