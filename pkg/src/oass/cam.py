"""Encoders, the multi-label CAM head, and class activation maps.

Tensors follow the torch ``N x C x H x W`` layout. Single images may be
passed without the batch axis; the functions here add and strip it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig


class ImageSizeError(ValueError):
    """Input image is smaller than the encoder can process."""


@dataclass
class FeatureMap:
    data: torch.Tensor
    stride: int


class Encoder(nn.Module):
    """Base class for pluggable encoders.

    Subclasses set ``stride``, ``depth`` and ``min_size`` and implement
    ``forward`` mapping ``N x 3 x H x W`` to ``N x depth x ceil(H/stride) x
    ceil(W/stride)``.
    """

    stride: int = 1
    depth: int = 3
    min_size: int = 1

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        return math.ceil(h / self.stride), math.ceil(w / self.stride)


class TinyEncoder(Encoder):
    """Small CNN: one stride-2 conv-BN-ReLU stage per factor of two in ``stride``, plus one stride-1 stage."""

    def __init__(self, depth: int = 64, stride: int = 16, in_channels: int = 3, width: int = 16):
        super().__init__()
        n_stages = int(round(math.log2(stride)))
        if 2 ** n_stages != stride or stride < 2:
            raise ValueError(f"stride must be a power of two >= 2, got {stride}")
        self.stride = stride
        self.depth = depth
        self.min_size = stride
        chans = [in_channels] + [min(width * 2 ** i, depth) for i in range(n_stages - 1)] + [depth]
        layers: list[nn.Module] = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]
        layers += [nn.Conv2d(depth, depth, 3, padding=1), nn.BatchNorm2d(depth), nn.ReLU(inplace=True)]
        self.body = nn.Sequential(*layers)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class IdentityEncoder(Encoder):
    """Stride-1 encoder returning its input; used for lossless round trips."""

    def __init__(self, depth: int = 3):
        super().__init__()
        self.depth = depth

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x


class PointwiseEncoder(Encoder):
    """1x1 conv followed by average pooling.

    Maps spatially constant inputs to spatially constant features (when the
    input size is a multiple of ``stride``), which makes it useful for
    constant-preservation checks of the tiling path.
    """

    def __init__(self, depth: int = 4, stride: int = 4, in_channels: int = 3):
        super().__init__()
        self.stride = stride
        self.depth = depth
        self.min_size = stride
        self.proj = nn.Conv2d(in_channels, depth, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.proj(x)
        if self.stride > 1:
            y = F.avg_pool2d(y, self.stride, ceil_mode=True)
        return y


ENCODERS = {"tiny": TinyEncoder, "identity": IdentityEncoder, "pointwise": PointwiseEncoder}


def build_encoder(cfg: ModelConfig) -> Encoder:
    if cfg.encoder == "tiny":
        return TinyEncoder(depth=cfg.depth, stride=cfg.stride, width=cfg.width)
    if cfg.encoder == "identity":
        return IdentityEncoder(depth=cfg.depth)
    if cfg.encoder == "pointwise":
        return PointwiseEncoder(depth=cfg.depth, stride=cfg.stride)
    raise ValueError(f"unknown encoder {cfg.encoder!r}; choose from {sorted(ENCODERS)}")


class CsiHead(nn.Module):
    """Instance-level head over class-specific instance features.

    ``proj`` holds one ``D -> 1`` 1x1 conv per class, ``mixer`` is the
    ``C x C`` 1x1 conv (with bias) applied to the stacked class logit maps.
    """

    def __init__(self, num_classes: int, depth: int):
        super().__init__()
        self.proj = nn.Parameter(torch.empty(num_classes, depth))
        nn.init.normal_(self.proj, std=depth ** -0.5)
        self.mixer = nn.Conv2d(num_classes, num_classes, 1)
        with torch.no_grad():
            self.mixer.weight.copy_(torch.eye(num_classes)[:, :, None, None])
            self.mixer.bias.zero_()

    def forward(self, features: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        """Logits from encoder features ``N x D x h x w`` and masks ``N x C x h x w``.

        Equivalent to ``csi.csi_head(csi.generate_csi(...))`` without
        materialising the ``N x C x D x h x w`` instance tensor.
        """
        maps = torch.einsum("cd,ndhw->nchw", self.proj, features) * masks
        pooled = maps.mean(dim=(2, 3))
        return F.linear(pooled, self.mixer.weight[:, :, 0, 0], self.mixer.bias)


class OassModel(nn.Module):
    """Encoder + linear CAM head (+ optional CSI head)."""

    def __init__(self, encoder: Encoder, num_classes: int, csi: bool = False,
                 csi_mask: str = "minmax", detach_csi_masks: bool = True, csi_cls: str = "supplement"):
        super().__init__()
        self.encoder = encoder
        self.num_classes = num_classes
        self.head = nn.Linear(encoder.depth, num_classes)
        self.csi_head = CsiHead(num_classes, encoder.depth) if csi else None
        self.csi_mask = csi_mask
        self.detach_csi_masks = detach_csi_masks
        # "supplement": the classification loss also covers the base head, which otherwise
        # receives no classification gradient when masks are detached
        self.csi_cls = csi_cls

    @property
    def stride(self) -> int:
        return self.encoder.stride

    def image_logits(self, features: torch.Tensor, cams: torch.Tensor | None = None) -> torch.Tensor:
        """Image-level logits: CSI head when enabled, else GAP + linear."""
        if self.csi_head is None:
            return classify(features, self.head)
        from .csi import normalize_masks

        if cams is None:
            cams = compute_cams(features, self.head)
        masks = normalize_masks(cams.detach() if self.detach_csi_masks else cams, self.csi_mask)
        return self.csi_head(features, masks)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        feats = extract_features(images, self.encoder)
        return self.image_logits(feats)


def build_model(cfg: ModelConfig, num_classes: int) -> OassModel:
    return OassModel(build_encoder(cfg), num_classes, csi=cfg.csi == "on", csi_mask=cfg.csi_mask,
                     detach_csi_masks=cfg.detach_csi_masks, csi_cls=cfg.csi_cls)


def _batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() != 4:
        raise ValueError(f"expected a 3-D or 4-D tensor, got shape {tuple(x.shape)}")
    return x, False


def extract_features(image: torch.Tensor, encoder: Encoder) -> torch.Tensor:
    """Run the encoder; rejects inputs smaller than ``encoder.min_size``."""
    x, single = _batched(image)
    h, w = x.shape[-2:]
    if h < encoder.min_size or w < encoder.min_size:
        raise ImageSizeError(
            f"image {h}x{w} is smaller than the encoder minimum {encoder.min_size}x{encoder.min_size}")
    out = encoder(x)
    exp = encoder.output_size(h, w)
    assert tuple(out.shape[-2:]) == exp, (tuple(out.shape), exp)
    return out[0] if single else out


def raw_cams(features: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    """Pre-clamp CAMs ``<w_c, A[:, i, j]>`` (no bias)."""
    x, single = _batched(features)
    if x.shape[1] != head.in_features:
        raise ValueError(f"feature depth {x.shape[1]} does not match head input {head.in_features}")
    out = torch.einsum("cd,ndhw->nchw", head.weight, x)
    return out[0] if single else out


def compute_cams(features: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    return F.relu(raw_cams(features, head))


def merge_cams(cams: torch.Tensor) -> torch.Tensor:
    """Per-pixel max over the class axis (``C x h x w`` or ``N x C x h x w``)."""
    if cams.dim() < 3 or cams.shape[-3] < 1:
        raise ValueError(f"expected at least one CAM channel, got shape {tuple(cams.shape)}")
    return cams.amax(dim=-3)


def classify(features: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    x, single = _batched(features)
    if x.shape[1] != head.in_features:
        raise ValueError(f"feature depth {x.shape[1]} does not match head input {head.in_features}")
    out = head(x.mean(dim=(2, 3)))
    return out[0] if single else out
