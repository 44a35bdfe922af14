"""Training-time and test-time augmentation over slice stacks.

One parameter draw is shared by every slice of a stack so geometry stays
consistent through the volume. All randomness comes in through an explicit
numpy Generator; the apply_*_params functions take the drawn parameters
directly, which is what the tests use to force specific transforms.

Values stay in [0, 1] throughout. The saturation setting exists for config
compatibility but is inert on single-channel slices.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import ndimage

from .preprocess import SliceStack


class CropTooLarge(ValueError):
    """Requested crop exceeds the stack's spatial size."""


class DimensionMismatch(ValueError):
    """The two stacks being mixed have different shapes."""


class AugSet(Enum):
    """The four augmentation recipes, each extending the previous one."""

    DEFAULT = "default"
    DEFAULT_STRONG = "default_strong"
    DEFAULT_STRONG_MIXUP = "default_strong_mixup"
    DEFAULT_STRONG_MIXUP_TTA = "default_strong_mixup_tta"

    @property
    def uses_strong(self) -> bool:
        return self is not AugSet.DEFAULT

    @property
    def uses_mixup(self) -> bool:
        return self in (AugSet.DEFAULT_STRONG_MIXUP, AugSet.DEFAULT_STRONG_MIXUP_TTA)

    @property
    def uses_tta(self) -> bool:
        return self is AugSet.DEFAULT_STRONG_MIXUP_TTA


class TtaView(Enum):
    """The eight deterministic test-time views, in evaluation order."""

    CENTER = "center"
    CORNER_TL = "corner_tl"
    CORNER_TR = "corner_tr"
    CORNER_BL = "corner_bl"
    CORNER_BR = "corner_br"
    ROT_NEG5 = "rot_neg5"
    ROT_POS5 = "rot_pos5"
    ROT_POS10 = "rot_pos10"


_TTA_ANGLES = {TtaView.ROT_NEG5: -5.0, TtaView.ROT_POS5: 5.0, TtaView.ROT_POS10: 10.0}


@dataclass(frozen=True)
class AugConfig:
    crop_hw: tuple[int, int] = (224, 224)
    brightness: float = 0.5          # factor drawn from [1 - b, 1 + b]
    contrast: float = 0.5            # factor drawn from [1 - c, 1 + c]
    saturation: float = 0.4          # inert on single-channel input
    gamma_range: tuple[float, float] = (0.8, 1.25)
    rotate_limit_deg: float = 30.0
    median_kernel: int = 3
    mixup_alpha: float = 0.8
    set_id: AugSet = AugSet.DEFAULT

    def __post_init__(self) -> None:
        ch, cw = self.crop_hw
        if ch < 1 or cw < 1:
            raise ValueError(f"bad crop size {self.crop_hw}")
        if not 0.0 <= self.brightness < 1.0 or not 0.0 <= self.contrast < 1.0:
            raise ValueError("brightness/contrast must lie in [0, 1)")
        lo, hi = self.gamma_range
        if not 0.0 < lo <= hi:
            raise ValueError(f"bad gamma range {self.gamma_range}")
        if self.rotate_limit_deg < 0.0:
            raise ValueError("rotate limit must be non-negative")
        if self.median_kernel < 1 or self.median_kernel % 2 == 0:
            raise ValueError("median kernel must be odd and positive")
        if self.mixup_alpha <= 0.0:
            raise ValueError("mixup alpha must be positive")


@dataclass(frozen=True)
class DefaultAugParams:
    flip: bool
    crop_top: int
    crop_left: int
    gamma: float
    brightness_factor: float
    contrast_factor: float


@dataclass(frozen=True)
class StrongAugParams:
    angle_deg: float | None   # None = no rotation this draw
    blur: bool


def _check_crop(hw: tuple[int, int], crop_hw: tuple[int, int]) -> None:
    if crop_hw[0] > hw[0] or crop_hw[1] > hw[1]:
        raise CropTooLarge(f"crop {crop_hw} exceeds stack size {hw}")


def crop_stack(stack: SliceStack, top: int, left: int, crop_hw: tuple[int, int]) -> SliceStack:
    _check_crop((stack.height, stack.width), crop_hw)
    ch, cw = crop_hw
    if not (0 <= top <= stack.height - ch and 0 <= left <= stack.width - cw):
        raise CropTooLarge(f"offset ({top}, {left}) puts crop {crop_hw} out of bounds")
    data = stack.data[:, top : top + ch, left : left + cw].copy()
    return SliceStack(data, subject_id=stack.subject_id)


def center_offsets(hw: tuple[int, int], crop_hw: tuple[int, int]) -> tuple[int, int]:
    return (hw[0] - crop_hw[0]) // 2, (hw[1] - crop_hw[1]) // 2


def center_crop(stack: SliceStack, crop_hw: tuple[int, int]) -> SliceStack:
    top, left = center_offsets((stack.height, stack.width), crop_hw)
    return crop_stack(stack, top, left, crop_hw)


def _rotate_data(data: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate every slice about its center; bilinear, zero outside the frame.

    Positive angles rotate counterclockwise. angle 0 returns a bit-equal copy.
    """
    if angle_deg == 0.0:
        return data.copy()
    _, h, w = data.shape
    theta = np.deg2rad(angle_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    # inverse map: where each output pixel samples from
    sx = cos_t * xx + sin_t * yy + cx
    sy = -sin_t * xx + cos_t * yy + cy
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    fx = sx - x0
    fy = sy - y0
    out = np.zeros_like(data)
    for dy in (0, 1):
        for dx in (0, 1):
            xs = x0 + dx
            ys = y0 + dy
            weight = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            inside = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
            weight = np.where(inside, weight, 0.0)
            xs = np.clip(xs, 0, w - 1)
            ys = np.clip(ys, 0, h - 1)
            out += data[:, ys, xs] * weight
    return out


def rotate_stack(stack: SliceStack, angle_deg: float) -> SliceStack:
    return SliceStack(_rotate_data(stack.data, angle_deg), subject_id=stack.subject_id)


def draw_default_params(
    hw: tuple[int, int], cfg: AugConfig, rng: np.random.Generator
) -> DefaultAugParams:
    _check_crop(hw, cfg.crop_hw)
    ch, cw = cfg.crop_hw
    return DefaultAugParams(
        flip=bool(rng.random() < 0.5),
        crop_top=int(rng.integers(0, hw[0] - ch + 1)),
        crop_left=int(rng.integers(0, hw[1] - cw + 1)),
        gamma=float(rng.uniform(*cfg.gamma_range)),
        brightness_factor=float(rng.uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness)),
        contrast_factor=float(rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast)),
    )


def identity_default_params(hw: tuple[int, int], cfg: AugConfig) -> DefaultAugParams:
    """No flip, center crop, neutral photometrics; handy in tests."""
    top, left = center_offsets(hw, cfg.crop_hw)
    return DefaultAugParams(False, top, left, 1.0, 1.0, 1.0)


def apply_default_params(
    stack: SliceStack, cfg: AugConfig, params: DefaultAugParams
) -> SliceStack:
    """Flip, crop, gamma, brightness, contrast, in that order."""
    src = stack
    if params.flip:
        src = SliceStack(stack.data[:, :, ::-1], subject_id=stack.subject_id)
    out = crop_stack(src, params.crop_top, params.crop_left, cfg.crop_hw)
    data = out.data
    if params.gamma != 1.0:
        data = np.power(data, params.gamma)
    if params.brightness_factor != 1.0:
        data = data * params.brightness_factor
    if params.contrast_factor != 1.0:
        mean = data.mean(axis=(1, 2), keepdims=True)
        data = mean + params.contrast_factor * (data - mean)
    np.clip(data, 0.0, 1.0, out=data)
    return SliceStack(data, subject_id=stack.subject_id)


def apply_default(stack: SliceStack, cfg: AugConfig, rng: np.random.Generator) -> SliceStack:
    params = draw_default_params((stack.height, stack.width), cfg, rng)
    return apply_default_params(stack, cfg, params)


def draw_strong_params(cfg: AugConfig, rng: np.random.Generator) -> StrongAugParams:
    # rotation and blur each fire independently with probability 1/2
    angle = None
    if rng.random() < 0.5:
        angle = float(rng.uniform(-cfg.rotate_limit_deg, cfg.rotate_limit_deg))
    return StrongAugParams(angle_deg=angle, blur=bool(rng.random() < 0.5))


def median_blur(stack: SliceStack, kernel: int = 3) -> SliceStack:
    """Per-slice median filter with zero padding outside the frame."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError("median kernel must be odd and positive")
    data = ndimage.median_filter(stack.data, size=(1, kernel, kernel), mode="constant", cval=0.0)
    return SliceStack(data, subject_id=stack.subject_id)


def apply_strong_params(
    stack: SliceStack, cfg: AugConfig, params: StrongAugParams
) -> SliceStack:
    out = stack
    if params.angle_deg is not None:
        out = rotate_stack(out, params.angle_deg)
    if params.blur:
        out = median_blur(out, cfg.median_kernel)
    return out


def apply_strong(stack: SliceStack, cfg: AugConfig, rng: np.random.Generator) -> SliceStack:
    """Maybe rotate, maybe blur, then the default recipe."""
    out = apply_strong_params(stack, cfg, draw_strong_params(cfg, rng))
    return apply_default(out, cfg, rng)


Labels = tuple[float, float]   # (severe, covid_positive), soft after mixup


def mixup_with_lambda(
    a: SliceStack, y_a: Labels, b: SliceStack, y_b: Labels, lam: float
) -> tuple[SliceStack, Labels]:
    if a.data.shape != b.data.shape:
        raise DimensionMismatch(f"cannot mix shapes {a.data.shape} and {b.data.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    data = lam * a.data + (1.0 - lam) * b.data
    np.clip(data, 0.0, 1.0, out=data)
    labels = (
        lam * y_a[0] + (1.0 - lam) * y_b[0],
        lam * y_a[1] + (1.0 - lam) * y_b[1],
    )
    return SliceStack(data, subject_id=a.subject_id), labels


def mixup_pair(
    a: SliceStack,
    y_a: Labels,
    b: SliceStack,
    y_b: Labels,
    alpha: float,
    rng: np.random.Generator,
) -> tuple[SliceStack, Labels]:
    """Convex combination of two stacks and their labels, lambda ~ Beta(alpha, alpha)."""
    lam = float(rng.beta(alpha, alpha))
    return mixup_with_lambda(a, y_a, b, y_b, lam)


def tta_views(stack: SliceStack, crop_hw: tuple[int, int]) -> list[SliceStack]:
    """The eight deterministic views in TtaView order.

    Center and corner crops come straight from the stack; the three rotated
    views rotate the full-resolution stack first and center-crop after, so
    the zero border mostly falls outside the crop.
    """
    _check_crop((stack.height, stack.width), crop_hw)
    ch, cw = crop_hw
    h, w = stack.height, stack.width
    views = [
        center_crop(stack, crop_hw),
        crop_stack(stack, 0, 0, crop_hw),
        crop_stack(stack, 0, w - cw, crop_hw),
        crop_stack(stack, h - ch, 0, crop_hw),
        crop_stack(stack, h - ch, w - cw, crop_hw),
    ]
    for view in (TtaView.ROT_NEG5, TtaView.ROT_POS5, TtaView.ROT_POS10):
        views.append(center_crop(rotate_stack(stack, _TTA_ANGLES[view]), crop_hw))
    return views
