"""Keypoint-anchored 2x2 patch cutting, patch resizing, and feature tiling."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .keypoint import Keypoint

Rect = tuple[int, int, int, int]  # x0, y0, x1, y1 (half-open)


@dataclass(frozen=True)
class PatchGeometry:
    """Four rectangles: top-left, top-right, bottom-left, bottom-right."""

    rects: tuple[Rect, Rect, Rect, Rect]
    source_dims: tuple[int, int]  # (W, H)
    keypoint: Keypoint


def quad_rects(cx: int, cy: int, w: int, h: int) -> tuple[Rect, Rect, Rect, Rect]:
    return ((0, 0, cx, cy), (cx, 0, w, cy), (0, cy, cx, h), (cx, cy, w, h))


def patch_geometry(kp: Keypoint, image_dims: tuple[int, int], min_patch: int = 1) -> PatchGeometry:
    w, h = image_dims
    if kp.space != "pixel":
        raise ValueError("cut keypoints must be in pixel space")
    lo = max(min_patch, 1)
    if not (lo <= kp.x <= w - lo and lo <= kp.y <= h - lo):
        raise ValueError(
            f"keypoint ({kp.x}, {kp.y}) is not clamped into [{lo}, dim-{lo}] for a {w}x{h} image")
    return PatchGeometry(quad_rects(kp.x, kp.y, w, h), (w, h), kp)


def cut_patches(image: torch.Tensor, kp: Keypoint, min_patch: int = 1):
    """Split ``C x H x W`` at ``kp`` into four copied crops."""
    h, w = image.shape[-2:]
    geom = patch_geometry(kp, (w, h), min_patch)
    crops = [image[..., y0:y1, x0:x1].clone() for x0, y0, x1, y1 in geom.rects]
    return geom, crops


def resize_patch(crop: torch.Tensor, target: tuple[int, int], mode: str = "bilinear") -> torch.Tensor:
    """Resize ``[N x] C x h x w`` to ``target = (height, width)`` (half-pixel centres)."""
    th, tw = target
    if th <= 0 or tw <= 0:
        raise ValueError(f"target size must be positive, got {target}")
    if crop.shape[-2] == 0 or crop.shape[-1] == 0:
        raise ValueError("cannot resize an empty crop")
    if tuple(crop.shape[-2:]) == (th, tw):
        return crop.clone()
    x = crop if crop.dim() == 4 else crop.unsqueeze(0)
    if mode == "bilinear":
        y = F.interpolate(x, size=(th, tw), mode="bilinear", align_corners=False)
    elif mode == "nearest":
        y = F.interpolate(x, size=(th, tw), mode="nearest")
    else:
        raise ValueError(f"unknown interpolation {mode!r}")
    return y if crop.dim() == 4 else y[0]


def snap(v: int, s: int) -> int:
    """``round(v / s)`` with halves rounded up, for non-negative integers."""
    return (2 * v + s) // (2 * s)


def feature_rects(geom: PatchGeometry, s: int) -> tuple[tuple[Rect, ...], tuple[int, int]]:
    """Feature-grid rectangles derived from a single snapped cut.

    Returns the four rectangles and the grid size ``(h, w)`` with
    ``h = ceil(H / s)``.
    """
    w_img, h_img = geom.source_dims
    fh, fw = math.ceil(h_img / s), math.ceil(w_img / s)
    cx, cy = snap(geom.keypoint.x, s), snap(geom.keypoint.y, s)
    if not (0 < cx < fw and 0 < cy < fh):
        raise ValueError(
            f"snapped cut ({cx}, {cy}) leaves an empty feature patch on a {fw}x{fh} grid; "
            f"min_patch must be at least the stride {s}")
    return quad_rects(cx, cy, fw, fh), (fh, fw)


def tile_features(patch_features, geom: PatchGeometry, s: int, mode: str = "bilinear") -> torch.Tensor:
    """Resize four patch feature maps to their source rectangles (in feature units) and tile.

    ``patch_features`` is a sequence of four ``D x h' x w'`` tensors (or one
    ``4 x D x h' x w'`` tensor) ordered TL, TR, BL, BR.
    """
    if len(patch_features) != 4:
        raise ValueError(f"expected 4 patch feature maps, got {len(patch_features)}")
    rects, (fh, fw) = feature_rects(geom, s)
    rows = []
    for top in (0, 2):
        row = []
        for idx in (top, top + 1):
            x0, y0, x1, y1 = rects[idx]
            row.append(resize_patch(patch_features[idx], (y1 - y0, x1 - x0), mode))
        rows.append(torch.cat(row, dim=-1))
    out = torch.cat(rows, dim=-2)
    assert tuple(out.shape[-2:]) == (fh, fw), (tuple(out.shape), (fh, fw))
    return out


def make_patch_batch(images: torch.Tensor, geoms: list[PatchGeometry], index: list[int],
                     mode: str = "bilinear") -> torch.Tensor:
    """Cut and resize patches for several (image, geometry) pairs.

    ``index[i]`` names the image in ``images`` that ``geoms[i]`` applies to.
    Returns ``4 * len(geoms)`` patches of size ``(H/2, W/2)``.
    """
    h, w = images.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"image dims must be even, got {h}x{w}")
    target = (h // 2, w // 2)
    out = []
    for g, i in zip(geoms, index):
        for x0, y0, x1, y1 in g.rects:
            out.append(resize_patch(images[i, :, y0:y1, x0:x1], target, mode))
    return torch.stack(out)


def tile_batch(patch_features: torch.Tensor, geoms: list[PatchGeometry], s: int,
               mode: str = "bilinear") -> torch.Tensor:
    """Inverse of :func:`make_patch_batch` on the feature side."""
    return torch.stack([tile_features(patch_features[4 * n:4 * n + 4], g, s, mode)
                        for n, g in enumerate(geoms)])
