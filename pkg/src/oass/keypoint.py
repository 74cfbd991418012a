"""Cut-keypoint detection on class activation maps.

Coordinates are ``(x, y)`` = (column, row). Feature-space keypoints live on
the CAM grid; pixel-space keypoints are ``stride * feature`` clamped so that
every patch is at least ``min_patch`` pixels wide and tall.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from . import kernels


class Strategy(str, Enum):
    MAX = "max"
    CMAX = "cmax"
    CTOPK = "ctopk"
    CTOPKW = "ctopkw"
    GT_BBOX = "gt_bbox"
    # image-centre cut, the even 2x2 split used as an ablation baseline
    CENTER = "center"

    @property
    def channelwise(self) -> bool:
        return self in (Strategy.CMAX, Strategy.CTOPK, Strategy.CTOPKW, Strategy.GT_BBOX)


@dataclass(frozen=True)
class Keypoint:
    x: int
    y: int
    space: str = "feature"
    stride: int | None = None
    fallback: bool = False


@dataclass(frozen=True)
class LocalMaximum:
    x: int
    y: int
    value: float


@dataclass(frozen=True)
class StrategyConfig:
    strategy: Strategy = Strategy.MAX
    k: int = 4
    literal_ctopkw_scaling: bool = False

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")


def round_half_away(v) -> int:
    """Round to the nearest integer, halves away from zero (exact for Fractions)."""
    f = Fraction(v)
    n = (2 * abs(f.numerator) + f.denominator) // (2 * f.denominator)
    return n if f >= 0 else -n


def _as_array(m) -> np.ndarray:
    if hasattr(m, "detach"):
        m = m.detach().cpu().numpy()
    a = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("CAM contains non-finite values")
    return a


def find_local_maxima(cam_channel, k: int) -> list[LocalMaximum]:
    """Up to ``k`` plateau-suppressed 8-neighbourhood maxima, strongest first.

    Ties in value keep row-major order. Maps with no positive value yield
    an empty list.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    a = _as_array(cam_channel)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {a.shape}")
    ys, xs, vals = kernels.local_maxima(np.ascontiguousarray(a))
    order = np.argsort(-vals, kind="stable")[:k]
    return [LocalMaximum(int(xs[i]), int(ys[i]), float(vals[i])) for i in order]


def _argmax_rowmajor(a: np.ndarray) -> Keypoint:
    flat = int(np.argmax(a))
    y, x = divmod(flat, a.shape[1])
    return Keypoint(x, y)


def keypoint_max(cams) -> Keypoint:
    """Peak of the merged (channel-max) CAM."""
    a = _as_array(cams)
    if a.ndim != 3 or a.shape[0] < 1:
        raise ValueError(f"expected C x h x w CAMs with C >= 1, got shape {a.shape}")
    return _argmax_rowmajor(a.max(axis=0))


def keypoint_cmax(cams, positives) -> dict[int, Keypoint]:
    a = _as_array(cams)
    pos = np.asarray(positives)
    if pos.shape != (a.shape[0],):
        raise ValueError(f"label vector length {pos.shape} does not match {a.shape[0]} CAM channels")
    return {c: _argmax_rowmajor(a[c]) for c in np.flatnonzero(pos == 1).tolist()}


def _center(shape) -> tuple[int, int]:
    h, w = shape
    return w // 2, h // 2


def _clip(x: int, y: int, shape) -> tuple[int, int]:
    h, w = shape
    return min(max(x, 0), w - 1), min(max(y, 0), h - 1)


def keypoint_ctopk(cam_channel, k: int) -> Keypoint:
    a = _as_array(cam_channel)
    maxima = find_local_maxima(a, k)
    if not maxima:
        return Keypoint(*_center(a.shape), fallback=True)
    n = len(maxima)
    x = round_half_away(Fraction(sum(m.x for m in maxima), n))
    y = round_half_away(Fraction(sum(m.y for m in maxima), n))
    return Keypoint(*_clip(x, y, a.shape))


def keypoint_ctopkw(cam_channel, k: int, cfg: StrategyConfig | None = None) -> Keypoint:
    """Response-weighted centroid of the top-``k`` local maxima.

    With ``literal_ctopkw_scaling`` the centroid is further multiplied by
    ``1/n`` (``n`` = maxima found), reproducing the formula as printed.
    """
    literal = cfg.literal_ctopkw_scaling if cfg is not None else False
    a = _as_array(cam_channel)
    maxima = find_local_maxima(a, k)
    if not maxima:
        return Keypoint(*_center(a.shape), fallback=True)
    vals = [Fraction(m.value) for m in maxima]
    total = sum(vals)
    cx = sum(v * m.x for v, m in zip(vals, maxima)) / total
    cy = sum(v * m.y for v, m in zip(vals, maxima)) / total
    if literal:
        cx /= len(maxima)
        cy /= len(maxima)
    return Keypoint(*_clip(round_half_away(cx), round_half_away(cy), a.shape))


def channel_keypoints(cams, positives, cfg: StrategyConfig) -> dict[int, Keypoint]:
    """Per-positive-class feature-space keypoints for the channel-wise strategies."""
    a = _as_array(cams)
    if cfg.strategy is Strategy.CMAX:
        return keypoint_cmax(a, positives)
    pos = np.flatnonzero(np.asarray(positives) == 1).tolist()
    if cfg.strategy is Strategy.CTOPK:
        return {c: keypoint_ctopk(a[c], cfg.k) for c in pos}
    if cfg.strategy is Strategy.CTOPKW:
        return {c: keypoint_ctopkw(a[c], cfg.k, cfg) for c in pos}
    raise ValueError(f"{cfg.strategy.value} is not a CAM-based channel-wise strategy")


def keypoint_gt_bbox(boxes: Sequence, image_dims: tuple[int, int],
                     multi: str = "centroid") -> dict[int, Keypoint]:
    """Pixel-space keypoint per class at its box centre.

    Several boxes of one class combine by ``multi``: ``centroid`` of their
    centres, the ``largest`` box, or the ``first`` listed. An empty box list
    yields ``{}``; callers use :func:`center_keypoint` as the fallback.
    """
    by_class: dict[int, list] = defaultdict(list)
    for b in boxes:
        by_class[b.class_id].append(b)
    out = {}
    for c, bs in sorted(by_class.items()):
        if multi == "largest":
            bs = [max(bs, key=lambda b: (b.x_h - b.x_l) * (b.y_h - b.y_l))]
        elif multi == "first":
            bs = bs[:1]
        elif multi != "centroid":
            raise ValueError(f"unknown multi-box rule {multi!r}")
        cx = sum(Fraction(b.x_l + b.x_h, 2) for b in bs) / len(bs)
        cy = sum(Fraction(b.y_l + b.y_h, 2) for b in bs) / len(bs)
        out[c] = Keypoint(round_half_away(cx), round_half_away(cy), space="pixel", stride=1)
    return out


def center_keypoint(image_dims: tuple[int, int], fallback: bool = False) -> Keypoint:
    w, h = image_dims
    return Keypoint(w // 2, h // 2, space="pixel", stride=1, fallback=fallback)


def clamp_pixel(x: int, y: int, image_dims: tuple[int, int], min_patch: int) -> tuple[int, int]:
    w, h = image_dims
    if 2 * min_patch > min(w, h):
        raise ValueError(f"min_patch {min_patch} too large for a {w}x{h} image")
    return min(max(x, min_patch), w - min_patch), min(max(y, min_patch), h - min_patch)


def to_pixel_space(kp: Keypoint, s: int, image_dims: tuple[int, int], min_patch: int = 32) -> Keypoint:
    """Scale a feature-grid keypoint by the stride and clamp it into the image."""
    if kp.space == "pixel":
        x, y = kp.x, kp.y
    else:
        x, y = s * kp.x, s * kp.y
    x, y = clamp_pixel(x, y, image_dims, min_patch)
    return Keypoint(x, y, space="pixel", stride=s, fallback=kp.fallback)


def detect(cams, positives, cfg: StrategyConfig, stride: int, image_dims: tuple[int, int],
           min_patch: int, boxes: Iterable | None = None, multi: str = "centroid") -> dict[int, Keypoint]:
    """Pixel-space cut keypoints for one image.

    Returns ``{-1: kp}`` for the single-cut strategies (``max``, ``center``)
    and ``{class: kp}`` for every positive class otherwise.
    """
    s = cfg.strategy
    if s is Strategy.CENTER:
        kps = {-1: center_keypoint(image_dims)}
    elif s is Strategy.MAX:
        kps = {-1: keypoint_max(cams)}
    elif s is Strategy.GT_BBOX:
        boxes = list(boxes or [])
        kps = keypoint_gt_bbox(boxes, image_dims, multi)
        for c in np.flatnonzero(np.asarray(positives) == 1).tolist():
            kps.setdefault(c, center_keypoint(image_dims, fallback=True))
    else:
        kps = channel_keypoints(cams, positives, cfg)
    return {c: to_pixel_space(kp, stride, image_dims, min_patch) for c, kp in kps.items()}
