"""Class-specific instance (CSI) features and the instance-level head."""
from __future__ import annotations

import torch

from .cam import CsiHead


def normalize_masks(cams: torch.Tensor, mode: str = "minmax") -> torch.Tensor:
    """Per-channel masks in [0, 1] from ``[N x] C x h x w`` CAMs.

    ``minmax`` rescales each channel by its own range. A flat channel maps to
    all ones if its value is positive and all zeros otherwise. ``relu`` only
    clamps negatives (no rescaling).
    """
    if mode == "relu":
        return cams.clamp_min(0)
    if mode != "minmax":
        raise ValueError(f"unknown mask normalisation {mode!r}")
    lo = cams.amin(dim=(-2, -1), keepdim=True)
    hi = cams.amax(dim=(-2, -1), keepdim=True)
    span = hi - lo
    flat = span <= 0
    scaled = (cams - lo) / torch.where(flat, torch.ones_like(span), span)
    return torch.where(flat, (hi > 0).to(cams.dtype).expand_as(cams), scaled)


def generate_csi(features: torch.Tensor, cams: torch.Tensor, mode: str = "minmax") -> torch.Tensor:
    """Mask ``[N x] D x h x w`` features with each class's CAM.

    Returns ``[N x] C x D x h x w``; entry ``c`` is the features weighted by
    the normalised CAM channel ``c``.
    """
    if features.shape[-2:] != cams.shape[-2:]:
        raise ValueError(
            f"feature grid {tuple(features.shape[-2:])} does not match CAM grid {tuple(cams.shape[-2:])}")
    masks = normalize_masks(cams, mode)
    return features.unsqueeze(-4) * masks.unsqueeze(-3)


def csi_head(csi: torch.Tensor, head: CsiHead) -> torch.Tensor:
    """Image-level logits from explicit CSI features ``[N x] C x D x h x w``.

    Per class a 1x1 projection gives a logit map, the C maps are mixed by a
    1x1 conv, then globally average-pooled.
    """
    if csi.shape[-4] != head.proj.shape[0] or csi.shape[-3] != head.proj.shape[1]:
        raise ValueError(f"CSI shape {tuple(csi.shape)} incompatible with head {tuple(head.proj.shape)}")
    maps = torch.einsum("cd,...cdhw->...chw", head.proj, csi)
    mixed = torch.einsum("kc,...chw->...khw", head.mixer.weight[:, :, 0, 0], maps)
    mixed = mixed + head.mixer.bias[:, None, None]
    return mixed.mean(dim=(-2, -1))
