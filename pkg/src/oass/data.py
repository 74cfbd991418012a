"""Datasets: VOC annotations, augmentation, location-shift statistics, synthetic shapes.

Images are ``float32`` numpy arrays in ``3 x H x W`` layout with values in
``[0, 1]``. Boxes use half-open pixel bounds ``[x_l, x_h) x [y_l, y_h)``;
VOC files are copied field-for-field (their 1-based inclusive convention is
not converted).
"""
from __future__ import annotations

import json
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .config import SynthConfig

VOC_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "sofa",
    "train", "tvmonitor",
)

SHAPE_NAMES = ("square", "disc", "triangle", "cross", "ring", "diamond", "bar", "xshape")


class AnnotationError(ValueError):
    """Malformed or unsupported annotation content."""


class PlacementError(RuntimeError):
    """The synthetic generator could not place the requested objects."""


@dataclass(frozen=True)
class BBoxAnnotation:
    class_id: int
    x_l: int
    x_h: int
    y_l: int
    y_h: int
    image_dims: tuple[int, int]  # (W, H)
    difficult: bool = False

    def __post_init__(self):
        w, h = self.image_dims
        if not (0 <= self.x_l < self.x_h <= w and 0 <= self.y_l < self.y_h <= h):
            raise AnnotationError(
                f"box x[{self.x_l},{self.x_h}) y[{self.y_l},{self.y_h}) invalid for a {w}x{h} image")

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_l + self.x_h) / 2, (self.y_l + self.y_h) / 2


@dataclass
class Sample:
    image: np.ndarray
    labels: np.ndarray
    boxes: list[BBoxAnnotation] | None = None
    id: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def dims(self) -> tuple[int, int]:
        return self.image.shape[2], self.image.shape[1]


def labels_from_boxes(boxes: Iterable[BBoxAnnotation], num_classes: int) -> np.ndarray:
    labels = np.zeros(num_classes, dtype=np.uint8)
    for b in boxes:
        labels[b.class_id] = 1
    return labels


# --------------------------------------------------------------------- VOC

def _child(node: ET.Element, tag: str, path: str) -> ET.Element:
    el = node.find(tag)
    if el is None:
        raise AnnotationError(f"missing element {path}/{tag}")
    return el


def _int(node: ET.Element, tag: str, path: str) -> int:
    el = _child(node, tag, path)
    try:
        return int(round(float((el.text or "").strip())))
    except ValueError:
        raise AnnotationError(f"{path}/{tag}: expected a number, got {el.text!r}") from None


def parse_voc_annotation(xml_text: str, include_difficult: bool = True,
                         classes: Sequence[str] = VOC_CLASSES):
    """Return ``(labels, boxes)`` from one VOC XML annotation."""
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        raise AnnotationError(f"malformed XML: {exc}") from None
    path = "/" + root.tag
    size = _child(root, "size", path)
    dims = (_int(size, "width", path + "/size"), _int(size, "height", path + "/size"))
    boxes = []
    for n, obj in enumerate(root.findall("object")):
        opath = f"{path}/object[{n}]"
        name = (_child(obj, "name", opath).text or "").strip()
        if name not in classes:
            raise AnnotationError(f"{opath}/name: unknown class {name!r}")
        diff_el = obj.find("difficult")
        difficult = diff_el is not None and (diff_el.text or "0").strip() == "1"
        if difficult and not include_difficult:
            continue
        bb = _child(obj, "bndbox", opath)
        bpath = opath + "/bndbox"
        try:
            boxes.append(BBoxAnnotation(
                classes.index(name), _int(bb, "xmin", bpath), _int(bb, "xmax", bpath),
                _int(bb, "ymin", bpath), _int(bb, "ymax", bpath), dims, difficult))
        except AnnotationError as exc:
            raise AnnotationError(f"{bpath}: {exc}") from None
    return labels_from_boxes(boxes, len(classes)), boxes


def to_voc_xml(boxes: Sequence[BBoxAnnotation], image_dims: tuple[int, int], filename: str = "",
               classes: Sequence[str] = VOC_CLASSES) -> str:
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = filename
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(image_dims[0])
    ET.SubElement(size, "height").text = str(image_dims[1])
    ET.SubElement(size, "depth").text = "3"
    for b in boxes:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = classes[b.class_id]
        ET.SubElement(obj, "difficult").text = "1" if b.difficult else "0"
        bb = ET.SubElement(obj, "bndbox")
        for tag, v in (("xmin", b.x_l), ("ymin", b.y_l), ("xmax", b.x_h), ("ymax", b.y_h)):
            ET.SubElement(bb, tag).text = str(v)
    return ET.tostring(root, encoding="unicode")


def read_split(root: str | Path, split: str) -> list[str]:
    path = Path(root) / "ImageSets" / "Main" / f"{split}.txt"
    try:
        return [ln.split()[0] for ln in path.read_text().splitlines() if ln.strip()]
    except OSError as exc:
        raise AnnotationError(f"cannot read split file {path}: {exc}") from None


def load_voc_annotations(root: str | Path, split: str, include_difficult: bool = True):
    """``[(id, labels, boxes), ...]`` for a VOC split, without loading images."""
    out = []
    for img_id in read_split(root, split):
        path = Path(root) / "Annotations" / f"{img_id}.xml"
        try:
            text = path.read_text()
        except OSError as exc:
            raise AnnotationError(f"cannot read {path}: {exc}") from None
        try:
            labels, boxes = parse_voc_annotation(text, include_difficult)
        except AnnotationError as exc:
            raise AnnotationError(f"{path}: {exc}") from None
        out.append((img_id, labels, boxes))
    return out


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


class VocDataset:
    """Lazy VOC split; images are decoded on access."""

    def __init__(self, root: str | Path, split: str, include_difficult: bool = True):
        self.root = Path(root)
        self.records = load_voc_annotations(root, split, include_difficult)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> Sample:
        img_id, labels, boxes = self.records[i]
        image = load_image(self.root / "JPEGImages" / f"{img_id}.jpg")
        return Sample(image, labels.copy(), list(boxes), img_id)


# ----------------------------------------------------- shift statistics

@dataclass
class ShiftStats:
    # class -> (mean dx, var dx, mean dy, var dy, count)
    per_class: dict[int, tuple[float, float, float, float, int]]
    image_size_normalized_to: int = 512


def box_shifts(boxes: Iterable[BBoxAnnotation], target_size: int = 512) -> dict[int, list[tuple[float, float]]]:
    out: dict[int, list[tuple[float, float]]] = {}
    for b in boxes:
        w, h = b.image_dims
        dx = ((b.x_l + b.x_h) / 2 - w / 2) * (target_size / w)
        dy = ((b.y_l + b.y_h) / 2 - h / 2) * (target_size / h)
        out.setdefault(b.class_id, []).append((dx, dy))
    return out


def shift_statistics(samples: Iterable, target_size: int = 512, include_difficult: bool = True) -> ShiftStats:
    """Per-class mean and population variance of box-centre offsets from the image centre.

    Offsets are rescaled to a ``target_size``-pixel frame. ``samples`` may be
    :class:`Sample` objects or plain box lists.
    """
    acc: dict[int, list[tuple[float, float]]] = {}
    for s in samples:
        boxes = s.boxes if isinstance(s, Sample) else s
        if boxes is None:
            raise AnnotationError(f"sample {getattr(s, 'id', '?')} has no boxes")
        if not include_difficult:
            boxes = [b for b in boxes if not b.difficult]
        for c, shifts in box_shifts(boxes, target_size).items():
            acc.setdefault(c, []).extend(shifts)
    per_class = {}
    for c in sorted(acc):
        d = np.asarray(acc[c], dtype=np.float64)
        per_class[c] = (float(d[:, 0].mean()), float(d[:, 0].var()),
                        float(d[:, 1].mean()), float(d[:, 1].var()), len(d))
    return ShiftStats(per_class, target_size)


def mean_abs_shift(samples: Iterable, target_size: int = 512) -> float:
    """Cross-class mean of per-class mean ``|dx|``."""
    acc: dict[int, list[float]] = {}
    for s in samples:
        boxes = s.boxes if isinstance(s, Sample) else s
        for c, shifts in box_shifts(boxes, target_size).items():
            acc.setdefault(c, []).extend(abs(dx) for dx, _ in shifts)
    if not acc:
        return float("nan")
    return float(np.mean([np.mean(v) for v in acc.values()]))


def write_shift_csv(stats: ShiftStats, path: str | Path, class_names: Sequence[str] | None = None) -> None:
    lines = ["class_id,class_name,mean_dx,var_dx,mean_dy,var_dy,count"]
    for c, (mdx, vdx, mdy, vdy, n) in stats.per_class.items():
        name = class_names[c] if class_names and c < len(class_names) else str(c)
        lines.append(f"{c},{name},{mdx:.6f},{vdx:.6f},{mdy:.6f},{vdy:.6f},{n}")
    Path(path).write_text("\n".join(lines) + "\n")


def plot_shift_stats(stats: ShiftStats, path: str | Path, class_names: Sequence[str] | None = None) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cls = list(stats.per_class)
    names = [class_names[c] if class_names and c < len(class_names) else str(c) for c in cls]
    mean = [stats.per_class[c][0] for c in cls]
    std = [math.sqrt(stats.per_class[c][1]) for c in cls]
    fig, ax = plt.subplots(figsize=(max(4, 0.45 * len(cls) + 2), 3.2))
    ax.bar(range(len(cls)), mean, yerr=std, color="tab:blue", ecolor="tab:red", capsize=3)
    ax.axhline(0, color="k", lw=0.6)
    ax.set_xticks(range(len(cls)))
    ax.set_xticklabels(names, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel(f"dx (px @ {stats.image_size_normalized_to})")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


# ------------------------------------------------------------ augmentation

def _resize_image(image: np.ndarray, new_w: int, new_h: int) -> np.ndarray:
    if (new_w, new_h) == (image.shape[2], image.shape[1]):
        return image.copy()
    t = torch.from_numpy(np.ascontiguousarray(image))[None]
    out = F.interpolate(t, size=(new_h, new_w), mode="bilinear", align_corners=False)
    return out[0].numpy()


def _box(b: BBoxAnnotation, x_l, x_h, y_l, y_h, dims) -> BBoxAnnotation:
    return replace(b, x_l=int(x_l), x_h=int(x_h), y_l=int(y_l), y_h=int(y_h), image_dims=dims)


def resize_sample(sample: Sample, new_w: int, new_h: int) -> Sample:
    w, h = sample.dims
    fx, fy = new_w / w, new_h / h
    boxes = None
    if sample.boxes is not None:
        boxes = []
        for b in sample.boxes:
            x_l, y_l = round(b.x_l * fx), round(b.y_l * fy)
            x_h, y_h = max(round(b.x_h * fx), x_l + 1), max(round(b.y_h * fy), y_l + 1)
            boxes.append(_box(b, x_l, min(x_h, new_w), y_l, min(y_h, new_h), (new_w, new_h)))
    return Sample(_resize_image(sample.image, new_w, new_h), sample.labels.copy(), boxes, sample.id,
                  dict(sample.meta))


def hflip(sample: Sample) -> Sample:
    w, h = sample.dims
    boxes = None
    if sample.boxes is not None:
        boxes = [_box(b, w - b.x_h, w - b.x_l, b.y_l, b.y_h, (w, h)) for b in sample.boxes]
    meta = dict(sample.meta)
    meta["flipped"] = not meta.get("flipped", False)
    return Sample(np.ascontiguousarray(sample.image[:, :, ::-1]), sample.labels.copy(), boxes, sample.id, meta)


def _fit_axis(n: int, size: int) -> tuple[int, int]:
    """(source offset, destination offset) placing a length-``n`` axis in ``size``."""
    if n > size:
        return (n - size) // 2, 0
    return 0, 0


def fit_canvas(sample: Sample, size: int) -> Sample:
    """Zero-pad (top-left anchored) or centre-crop to ``size x size``.

    Boxes are clipped to the canvas; boxes left empty by a crop are dropped,
    and when boxes are present the label vector is rebuilt from the survivors.
    """
    w, h = sample.dims
    sx, _ = _fit_axis(w, size)
    sy, _ = _fit_axis(h, size)
    cw, ch = min(w, size), min(h, size)
    out = np.zeros((sample.image.shape[0], size, size), dtype=np.float32)
    out[:, :ch, :cw] = sample.image[:, sy:sy + ch, sx:sx + cw]
    meta = dict(sample.meta)
    if sx or sy:
        meta["crop"] = (sx, sy, sx + cw, sy + ch)
    labels = sample.labels.copy()
    boxes = None
    if sample.boxes is not None:
        boxes = []
        for b in sample.boxes:
            x_l, x_h = max(b.x_l - sx, 0), min(b.x_h - sx, cw)
            y_l, y_h = max(b.y_l - sy, 0), min(b.y_h - sy, ch)
            if x_h > x_l and y_h > y_l:
                boxes.append(_box(b, x_l, x_h, y_l, y_h, (size, size)))
        labels = labels_from_boxes(boxes, len(labels))
    return Sample(out, labels, boxes, sample.id, meta)


def augment(sample: Sample, rng: np.random.Generator, size: int = 512,
            scale_range: tuple[int, int] = (320, 640)) -> Sample:
    """Random longer-side resize, random horizontal flip, then fit to ``size x size``."""
    w, h = sample.dims
    target = int(rng.integers(scale_range[0], scale_range[1] + 1))
    f = target / max(w, h)
    out = resize_sample(sample, max(1, round(w * f)), max(1, round(h * f)))
    if rng.random() < 0.5:
        out = hflip(out)
    return fit_canvas(out, size)


def prepare_eval(sample: Sample, size: int) -> Sample:
    """Deterministic inference preprocessing: longer side to ``size``, then pad."""
    w, h = sample.dims
    if (w, h) == (size, size):
        return sample
    f = size / max(w, h)
    return fit_canvas(resize_sample(sample, max(1, round(w * f)), max(1, round(h * f))), size)


# ------------------------------------------------------- synthetic shapes

def _shape_mask(kind: int, cx: int, cy: int, r: int, size: int) -> np.ndarray:
    """Boolean mask of shape archetype ``kind`` filling the box ``[c-r, c+r)``."""
    yy, xx = np.mgrid[0:size, 0:size]
    u = (xx + 0.5 - cx) / r
    v = (yy + 0.5 - cy) / r
    inside = (np.abs(u) <= 1) & (np.abs(v) <= 1)
    name = SHAPE_NAMES[kind % len(SHAPE_NAMES)]
    if name == "square":
        m = inside
    elif name == "disc":
        m = u * u + v * v <= 1.0
    elif name == "triangle":
        m = inside & (np.abs(u) <= (v + 1) / 2)
    elif name == "cross":
        m = inside & ((np.abs(u) <= 0.3) | (np.abs(v) <= 0.3))
    elif name == "ring":
        rr = u * u + v * v
        m = (rr <= 1.0) & (rr >= 0.36)
    elif name == "diamond":
        m = np.abs(u) + np.abs(v) <= 1.0
    elif name == "bar":
        m = inside & (np.abs(v) <= 0.35)
    else:
        m = inside & ((np.abs(u - v) <= 0.35) | (np.abs(u + v) <= 0.35))
    return m


def _shape_color(rng: np.random.Generator) -> np.ndarray:
    hi = rng.random(3) < 0.5
    base = rng.uniform(0.05, 0.25, size=3)
    return np.where(hi, 1.0 - base, base)


def _background(rng: np.random.Generator, size: int, noise: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    bg = np.empty((3, size, size), dtype=np.float64)
    for ch in range(3):
        a, b, ph = rng.uniform(-0.12, 0.12), rng.uniform(-0.12, 0.12), rng.uniform(0, 2 * np.pi)
        bg[ch] = 0.5 + a * (xx - 0.5) + b * (yy - 0.5) + 0.05 * np.sin(2 * np.pi * (xx + yy) * 3 + ph)
    bg += rng.normal(0.0, noise, size=bg.shape)
    return bg


def placement_offsets(cfg: SynthConfig) -> np.ndarray:
    """Possible absolute centre offsets ``|dx|`` (each equally likely, random sign)."""
    return np.arange(cfg.min_offset, cfg.max_offset + 1)


def placement_variance(cfg: SynthConfig, target_size: int | None = None) -> float:
    """Variance of the generator's horizontal centre offset, in a ``target_size`` frame.

    Offsets are symmetric with zero mean, so the variance is ``E[d^2]``.
    """
    d = placement_offsets(cfg).astype(np.float64)
    scale = (target_size or cfg.image_size) / cfg.image_size
    return float(np.mean(d ** 2) * scale ** 2)


def _validate_synth(cfg: SynthConfig) -> None:
    half = cfg.image_size // 2
    if cfg.image_size % 2:
        raise PlacementError("image_size must be even")
    if not 1 <= cfg.min_objects <= cfg.max_objects:
        raise PlacementError("need 1 <= min_objects <= max_objects")
    if not 0 <= cfg.min_offset <= cfg.max_offset:
        raise PlacementError("need 0 <= min_offset <= max_offset")
    if half + cfg.max_offset + cfg.max_half_size > cfg.image_size:
        raise PlacementError(
            f"objects up to half-size {cfg.max_half_size} at offset {cfg.max_offset} leave a "
            f"{cfg.image_size}px canvas")
    if cfg.min_half_size < 2 or cfg.min_half_size > cfg.max_half_size:
        raise PlacementError("need 2 <= min_half_size <= max_half_size")


def _overlaps(a: BBoxAnnotation, b: BBoxAnnotation, margin: int = 1) -> bool:
    return not (a.x_h + margin <= b.x_l or b.x_h + margin <= a.x_l or
                a.y_h + margin <= b.y_l or b.y_h + margin <= a.y_l)


def synth_sample(cfg: SynthConfig, rng: np.random.Generator, sid: str) -> Sample:
    size, half = cfg.image_size, cfg.image_size // 2
    offsets = placement_offsets(cfg)
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    img = _background(rng, size, cfg.noise)
    boxes: list[BBoxAnnotation] = []
    for _ in range(n_obj):
        c = int(rng.integers(cfg.num_classes))
        for _ in range(cfg.max_tries):
            r = int(rng.integers(cfg.min_half_size, cfg.max_half_size + 1))
            dx = int(rng.choice(offsets)) * (1 if rng.random() < 0.5 else -1)
            dy = int(rng.choice(offsets)) * (1 if rng.random() < 0.5 else -1)
            cx, cy = half + dx, half + dy
            box = BBoxAnnotation(c, cx - r, cx + r, cy - r, cy + r, (size, size))
            if not any(_overlaps(box, b) for b in boxes):
                break
        else:
            raise PlacementError(f"{sid}: could not place object {len(boxes) + 1} of {n_obj}")
        m = _shape_mask(c, cx, cy, r, size)
        img[:, m] = _shape_color(rng)[:, None] + rng.normal(0.0, cfg.noise / 2, size=(3, int(m.sum())))
        boxes.append(box)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Sample(img, labels_from_boxes(boxes, cfg.num_classes), boxes, sid)


def synth_dataset(cfg: SynthConfig, seed: int, prefix: str = "synth") -> list[Sample]:
    """Deterministic synthetic multi-object dataset.

    Each class is one shape archetype with a random colour, centred at an
    integer offset ``d`` from the image centre with ``|d|`` uniform on
    ``[min_offset, max_offset]`` and a random sign, independently per axis.
    Overlapping placements are redrawn.
    """
    _validate_synth(cfg)
    rng = np.random.default_rng(seed)
    return [synth_sample(cfg, rng, f"{prefix}_{i:05d}") for i in range(cfg.num_images)]


def write_dataset(samples: Sequence[Sample], outdir: str | Path, num_classes: int) -> Path:
    """Write PNG images plus ``manifest.jsonl`` (one record per sample)."""
    outdir = Path(outdir)
    (outdir / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        arr = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(arr).save(outdir / "images" / f"{s.id}.png")
        rec = {
            "id": s.id,
            "labels": [int(v) for v in s.labels],
            "boxes": [[b.class_id, b.x_l, b.y_l, b.x_h, b.y_h] for b in (s.boxes or [])],
            "width": s.dims[0],
            "height": s.dims[1],
        }
        lines.append(json.dumps(rec))
    manifest = outdir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    (outdir / "classes.json").write_text(json.dumps(
        [SHAPE_NAMES[c % len(SHAPE_NAMES)] for c in range(num_classes)]))
    return manifest


def read_dataset(outdir: str | Path) -> list[Sample]:
    outdir = Path(outdir)
    try:
        lines = (outdir / "manifest.jsonl").read_text().splitlines()
    except OSError as exc:
        raise AnnotationError(f"cannot read manifest in {outdir}: {exc}") from None
    out = []
    for n, ln in enumerate(lines):
        if not ln.strip():
            continue
        try:
            rec = json.loads(ln)
            dims = (rec["width"], rec["height"])
            boxes = [BBoxAnnotation(c, xl, xh, yl, yh, dims) for c, xl, yl, xh, yh in rec["boxes"]]
            labels = np.asarray(rec["labels"], dtype=np.uint8)
        except (KeyError, ValueError, TypeError) as exc:
            raise AnnotationError(f"manifest line {n + 1}: {exc}") from None
        out.append(Sample(load_image(outdir / "images" / f"{rec['id']}.png"), labels, boxes, rec["id"]))
    return out


def to_batch(samples: Sequence[Sample]) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(np.stack([s.image for s in samples]))
    labels = torch.from_numpy(np.stack([s.labels for s in samples]).astype(np.float32))
    return images, labels
