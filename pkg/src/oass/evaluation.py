"""Ranking metrics, dataset evaluation, and CAM overlays."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw

from . import kernels
from .cam import OassModel, compute_cams, extract_features
from .data import Sample, to_batch


@dataclass
class APReport:
    per_class_ap: np.ndarray
    map: float
    num_images: int
    config_digest: str = ""

    def __post_init__(self):
        ap = np.asarray(self.per_class_ap, dtype=np.float64)
        ok = ap[~np.isnan(ap)]
        assert np.all((ok >= 0) & (ok <= 1)), ap
        self.per_class_ap = ap

    def to_csv(self, class_names: Sequence[str] | None = None) -> str:
        lines = ["class_id,class_name,ap"]
        for c, ap in enumerate(self.per_class_ap):
            name = class_names[c] if class_names and c < len(class_names) else str(c)
            lines.append(f"{c},{name},{ap:.6f}")
        lines.append(f"mean,mAP,{self.map:.6f}")
        return "\n".join(lines) + "\n"

    def table(self, class_names: Sequence[str] | None = None) -> str:
        rows = [f"{'class':<14}{'AP':>9}"]
        for c, ap in enumerate(self.per_class_ap):
            name = class_names[c] if class_names and c < len(class_names) else str(c)
            rows.append(f"{name:<14}{100 * ap:>8.2f}%")
        rows.append(f"{'mAP':<14}{100 * self.map:>8.2f}%")
        rows.append(f"({self.num_images} images, config {self.config_digest or '-'})")
        return "\n".join(rows)


def average_precision(scores, labels, eleven_point: bool = False) -> float:
    """All-point AP: mean precision at the ranks of the positives.

    Items are ranked by descending score with ties kept in index order.
    Returns ``nan`` when there is no positive.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    order = np.argsort(-scores, kind="stable")
    ranked = np.ascontiguousarray((labels[order] == 1).astype(np.uint8))
    if eleven_point:
        return float(kernels.ranked_average_precision_11pt(ranked))
    return float(kernels.ranked_average_precision(ranked))


def ap_report(scores: np.ndarray, labels: np.ndarray, digest: str = "",
              eleven_point: bool = False) -> APReport:
    """Per-class AP over an ``N x C`` score matrix; classes without positives are skipped (nan)."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    aps = np.full(scores.shape[1], np.nan)
    for c in range(scores.shape[1]):
        if not (labels[:, c] == 1).any():
            warnings.warn(f"class {c} has no positive example; AP undefined, skipped", stacklevel=2)
            continue
        aps[c] = average_precision(scores[:, c], labels[:, c], eleven_point)
    defined = aps[~np.isnan(aps)]
    return APReport(aps, float(defined.mean()) if defined.size else float("nan"), scores.shape[0], digest)


@torch.no_grad()
def predict_scores(model: OassModel, samples: Sequence[Sample], batch_size: int = 64,
                   device: str = "cpu") -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    for b in range(0, len(samples), batch_size):
        images, _ = to_batch(samples[b:b + batch_size])
        out.append(torch.sigmoid(model(images.to(device))).double().cpu().numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, model.num_classes))


def evaluate(model: OassModel, samples: Sequence[Sample], digest: str = "", batch_size: int = 64,
             device: str = "cpu", eleven_point: bool = False) -> APReport:
    if not len(samples):
        raise ValueError("cannot evaluate on an empty dataset")
    n_cls = len(samples[0].labels)
    if n_cls != model.num_classes:
        raise ValueError(f"dataset has {n_cls} classes but the model predicts {model.num_classes}")
    scores = predict_scores(model, samples, batch_size, device)
    labels = np.stack([s.labels for s in samples])
    return ap_report(scores, labels, digest, eleven_point)


def per_class_improvement(a: APReport, b: APReport) -> np.ndarray:
    if a.per_class_ap.shape != b.per_class_ap.shape:
        raise ValueError(f"class counts differ: {a.per_class_ap.size} vs {b.per_class_ap.size}")
    return b.per_class_ap - a.per_class_ap


def plot_improvement(deltas: np.ndarray, shift_var: np.ndarray, path: str | Path,
                     class_names: Sequence[str] | None = None) -> None:
    """Per-class AP deltas (bars) with location-shift variance (line, right axis)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    x = np.arange(len(deltas))
    fig, ax = plt.subplots(figsize=(max(4, 0.4 * len(x) + 2), 3))
    ax.fill_between(x, 0, 100 * np.asarray(deltas), color="tab:blue", alpha=0.5, step="mid")
    ax.set_ylabel("AP delta (%)")
    ax2 = ax.twinx()
    ax2.plot(x, shift_var, color="tab:red")
    ax2.set_ylabel("shift variance")
    ax.set_xticks(x)
    ax.set_xticklabels(class_names if class_names else [str(i) for i in x], rotation=60, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


# ---------------------------------------------------------- visualisation

def _colormap(values: np.ndarray, name: str = "jet") -> np.ndarray:
    from matplotlib import colormaps

    return colormaps[name](values)[..., :3]


def cam_overlay(image: np.ndarray, cam: np.ndarray, alpha: float = 0.5, cmap: str = "jet") -> np.ndarray:
    """Blend a colourised CAM (upsampled to the image) over a ``3 x H x W`` image; returns ``H x W x 3``."""
    _, h, w = image.shape
    t = torch.as_tensor(np.asarray(cam, dtype=np.float64))[None, None]
    up = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)[0, 0].numpy()
    up = np.clip(up, 0, None)
    peak = up.max()
    norm = up / peak if peak > 0 else np.zeros_like(up)
    heat = _colormap(norm, cmap)
    return (1 - alpha) * image.transpose(1, 2, 0) + alpha * heat


def export_cam_visualization(image: np.ndarray, cams: np.ndarray, labels, path: str | Path,
                             class_names: Sequence[str] | None = None, alpha: float = 0.5) -> Path:
    """Write one labelled overlay panel per positive class, side by side, as PNG."""
    cams = np.asarray(cams)
    if cams.ndim != 3:
        raise ValueError(f"expected C x h x w CAMs, got {cams.shape}")
    pos = np.flatnonzero(np.asarray(labels) == 1).tolist() or [int(np.argmax(cams.max(axis=(1, 2))))]
    panels = []
    for c in pos:
        rgb = np.clip(cam_overlay(image, cams[c], alpha), 0, 1)
        im = Image.fromarray(np.round(rgb * 255).astype(np.uint8))
        name = class_names[c] if class_names and c < len(class_names) else f"class {c}"
        ImageDraw.Draw(im).text((3, 2), name, fill=(255, 255, 255))
        panels.append(im)
    canvas = Image.new("RGB", (sum(p.width for p in panels), panels[0].height))
    x = 0
    for p in panels:
        canvas.paste(p, (x, 0))
        x += p.width
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        canvas.save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write visualisation to {path}: {exc}") from exc
    return path


@torch.no_grad()
def sample_cams(model: OassModel, sample: Sample) -> np.ndarray:
    images, _ = to_batch([sample])
    was = model.training
    model.eval()
    cams = compute_cams(extract_features(images, model.encoder), model.head)[0].double().numpy()
    model.train(was)
    return cams
