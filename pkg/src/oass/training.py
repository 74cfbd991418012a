"""EMA teacher, the object-aware self-supervision loss, and the training loop."""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import keypoint as kp
from .cam import OassModel, build_model, classify, extract_features, raw_cams
from .config import Config, from_dict
from .data import Sample, augment, prepare_eval, to_batch
from .keypoint import Strategy, StrategyConfig
from .patching import make_patch_batch, patch_geometry, tile_batch

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "oass-checkpoint"
CHECKPOINT_VERSION = 1
MAX_KEY = -1  # pseudo-class keying the single auxiliary pair of the single-cut strategies


class NumericalError(RuntimeError):
    pass


# ------------------------------------------------------------------- EMA

@dataclass
class EmaState:
    teacher: nn.Module
    decay: float
    step: int = 0


def init_ema(encoder: nn.Module, decay: float = 0.999) -> EmaState:
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1), got {decay}")
    teacher = copy.deepcopy(encoder)
    teacher.requires_grad_(False)
    teacher.eval()
    return EmaState(teacher, decay)


@torch.no_grad()
def ema_update(state: EmaState, student: nn.Module) -> EmaState:
    """``teacher <- decay * teacher + (1 - decay) * student``, in place."""
    t_params = dict(state.teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ValueError("teacher and student parameter names differ")
    for name, t in t_params.items():
        s = s_params[name]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        t.mul_(state.decay).add_(s.detach(), alpha=1.0 - state.decay)
    for (name, tb), (_, sb) in zip(state.teacher.named_buffers(), student.named_buffers()):
        tb.copy_(sb)
    state.step += 1
    return state


# ---------------------------------------------------------------- losses

@dataclass(frozen=True)
class LossWeights:
    alpha_re: float = 1 / 15
    alpha_p: float = 1 / 15
    rampup_epochs: int = 100


def rampup_weight(epoch: int, weights: LossWeights) -> tuple[float, float]:
    """Linear ramp from 0 at epoch 0 to the final weights at ``rampup_epochs``."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    f = 1.0 if weights.rampup_epochs <= 0 else min(1.0, epoch / weights.rampup_epochs)
    return weights.alpha_re * f, weights.alpha_p * f


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise ValueError(f"{what} contains non-finite values")


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-class binary cross-entropy with logits, averaged over the last axis."""
    if logits.shape != labels.shape:
        raise ValueError(f"logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    _check_finite(logits, "logits")
    return F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype), reduction="none").mean(-1)


def reconstruction_loss(full: torch.Tensor, tiled: torch.Tensor, form: str = "l1") -> torch.Tensor:
    if full.shape != tiled.shape:
        raise ValueError(f"CAM shapes differ: {tuple(full.shape)} vs {tuple(tiled.shape)}")
    diff = full - tiled
    if form == "l1":
        return diff.abs().mean()
    if form == "l2":
        return (diff * diff).mean()
    raise ValueError(f"unknown reconstruction form {form!r}")


def patch_classification_loss(tiled_raw: torch.Tensor, bias, y) -> torch.Tensor:
    """BCE of ``sigmoid(spatial mean of the pre-clamp tiled CAM + bias)`` against ``y``.

    Works on one channel (``h x w``) or on stacked channels (``C x h x w``
    with vector ``bias``/``y``), in which case classes are averaged.
    """
    _check_finite(tiled_raw, "tiled CAM")
    logit = tiled_raw.mean(dim=(-2, -1)) + torch.as_tensor(bias, dtype=tiled_raw.dtype)
    target = torch.as_tensor(y, dtype=tiled_raw.dtype).expand_as(logit)
    return F.binary_cross_entropy_with_logits(logit, target)


@dataclass
class LossBundle:
    cls: torch.Tensor
    per_class_re: dict = field(default_factory=dict)
    per_class_pcls: dict = field(default_factory=dict)
    total: torch.Tensor | None = None
    num_positive: int = 0
    alpha_re: float = 0.0
    alpha_p: float = 0.0

    def log_row(self) -> dict[str, float]:
        re = [float(v) for v in self.per_class_re.values()]
        pc = [float(v) for v in self.per_class_pcls.values()]
        return {
            "cls": float(self.cls),
            "re": float(np.mean(re)) if re else 0.0,
            "pcls": float(np.mean(pc)) if pc else 0.0,
            "total": float(self.total),
            "alpha": self.alpha_re,
        }


def total_loss(cls, per_class_re: dict, per_class_pcls: dict, labels, alpha_re: float,
               alpha_p: float, strategy: Strategy | str = Strategy.MAX) -> LossBundle:
    """Combine one image's loss terms.

    Channel-wise strategies average the weighted auxiliary terms over the
    positive classes; the single-cut strategies add one pair keyed
    ``MAX_KEY``. With no positive label only the classification term remains.
    """
    strategy = Strategy(strategy)
    labels = np.asarray(labels.detach().cpu() if hasattr(labels, "detach") else labels)
    positives = np.flatnonzero(labels == 1).tolist()
    cls_t = cls if torch.is_tensor(cls) else torch.as_tensor(cls, dtype=torch.float64)
    bundle = LossBundle(cls_t, per_class_re, per_class_pcls, cls_t, len(positives), alpha_re, alpha_p)
    if not positives or (alpha_re == 0 and alpha_p == 0 and not per_class_re):
        return bundle
    keys = positives if strategy.channelwise else [MAX_KEY]
    missing = [c for c in keys if c not in per_class_re or c not in per_class_pcls]
    if missing:
        raise ValueError(f"missing auxiliary loss terms for classes {missing}")
    aux = sum(alpha_p * per_class_pcls[c] + alpha_re * per_class_re[c] for c in keys)
    if strategy.channelwise:
        aux = aux / max(1, len(positives))
    bundle.total = cls_t + aux
    return bundle


# ------------------------------------------------------ full OASS loss

def strategy_config(cfg: Config) -> StrategyConfig:
    return StrategyConfig(Strategy(cfg.keypoint.strategy), cfg.keypoint.k, cfg.keypoint.literal_ctopkw_scaling)


def oass_loss(model: OassModel, teacher: nn.Module, images: torch.Tensor, labels: torch.Tensor,
              cfg: Config, alpha: tuple[float, float], keypoints: Sequence[dict] | None = None,
              boxes: Sequence | None = None) -> tuple[torch.Tensor, list[LossBundle]]:
    """Batch loss (mean of per-image totals) and the per-image bundles.

    ``keypoints`` optionally fixes the pixel-space cut per image
    (``{class or MAX_KEY: Keypoint}``); otherwise they are detected from the
    detached CAMs selected by ``cfg.keypoint.source``.
    """
    alpha_re, alpha_p = alpha
    strat = strategy_config(cfg)
    mode = cfg.patching.interpolation
    n_img, _, h, w = images.shape
    s = model.stride

    feats = extract_features(images, model.encoder)
    raw = raw_cams(feats, model.head)
    cams = F.relu(raw)
    logits = model.image_logits(feats, cams)
    cls = classification_loss(logits, labels)
    if model.csi_head is not None and model.csi_cls == "supplement":
        cls = (cls + classification_loss(classify(feats, model.head), labels)) / 2

    lab = labels.detach().cpu().numpy()
    has_pos = lab.sum(axis=1) > 0
    use_aux = (alpha_re != 0 or alpha_p != 0) and bool(has_pos.any())

    geoms, index, keys = [], [], []
    if use_aux:
        if keypoints is None:
            if cfg.keypoint.source == "teacher":
                with torch.no_grad():
                    src = F.relu(raw_cams(teacher(images), model.head))
            else:
                src = cams
            src = src.detach().cpu().numpy()
        for n in np.flatnonzero(has_pos).tolist():
            if keypoints is not None:
                kps = keypoints[n]
            else:
                kps = kp.detect(src[n], lab[n], strat, s, (w, h), cfg.keypoint.min_patch,
                                boxes[n] if boxes is not None else None, cfg.keypoint.gt_multi)
            for c, point in sorted(kps.items()):
                geoms.append(patch_geometry(point, (w, h), cfg.keypoint.min_patch))
                index.append(n)
                keys.append((n, c))

    per_re: list[dict] = [dict() for _ in range(n_img)]
    per_pc: list[dict] = [dict() for _ in range(n_img)]
    if geoms:
        patches = make_patch_batch(images, geoms, index, mode)
        with torch.no_grad():
            pfeats = teacher(patches)
        tiled = tile_batch(pfeats, geoms, s, mode)
        tiled_raw = raw_cams(tiled, model.head)
        tiled_cam = F.relu(tiled_raw)
        bias = model.head.bias
        for m, (n, c) in enumerate(keys):
            if c == MAX_KEY:
                per_re[n][c] = reconstruction_loss(cams[n].amax(0), tiled_cam[m].amax(0), cfg.loss.re_form)
                per_pc[n][c] = patch_classification_loss(tiled_raw[m], bias, labels[n])
            else:
                per_re[n][c] = reconstruction_loss(cams[n, c], tiled_cam[m, c], cfg.loss.re_form)
                per_pc[n][c] = patch_classification_loss(tiled_raw[m, c], bias[c], labels[n, c])

    bundles = [total_loss(cls[n], per_re[n], per_pc[n], lab[n], alpha_re, alpha_p, strat.strategy)
               for n in range(n_img)]
    batch_total = torch.stack([b.total for b in bundles]).mean()
    return batch_total, bundles


def merge_bundles(bundles: Sequence[LossBundle], total: torch.Tensor) -> LossBundle:
    re: dict = {}
    pc: dict = {}
    for b in bundles:
        for c, v in b.per_class_re.items():
            re.setdefault(c, []).append(float(v.detach()))
        for c, v in b.per_class_pcls.items():
            pc.setdefault(c, []).append(float(v.detach()))
    return LossBundle(
        torch.stack([b.cls for b in bundles]).mean().detach(),
        {c: float(np.mean(v)) for c, v in re.items()},
        {c: float(np.mean(v)) for c, v in pc.items()},
        total.detach(),
        sum(b.num_positive for b in bundles),
        bundles[0].alpha_re if bundles else 0.0,
        bundles[0].alpha_p if bundles else 0.0,
    )


def train_step(model: OassModel, ema: EmaState, optimizer: torch.optim.Optimizer, images: torch.Tensor,
               labels: torch.Tensor, cfg: Config, epoch: int, boxes: Sequence | None = None,
               batch_id: str | int | None = None) -> LossBundle:
    """One optimiser step on the total loss, followed by the EMA update."""
    model.train()
    weights = LossWeights(cfg.train.alpha_final, cfg.train.alpha_final, cfg.train.rampup_epochs)
    alpha = rampup_weight(epoch, weights)
    total, bundles = oass_loss(model, ema.teacher, images, labels, cfg, alpha, boxes=boxes)
    if not torch.isfinite(total):
        raise NumericalError(f"non-finite loss {float(total)} at batch {batch_id}")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    ema_update(ema, model.encoder)
    return merge_bundles(bundles, total)


# ------------------------------------------------------------- training

def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.use_deterministic_algorithms(True, warn_only=True)


@dataclass
class TrainResult:
    model: OassModel
    ema: EmaState
    optimizer: torch.optim.Optimizer
    history: list[dict]
    epoch: int


def _prepare_batch(samples: Sequence[Sample], cfg: Config, seed: int, epoch: int, idx: Sequence[int]):
    if cfg.data.augment:
        size = cfg.data.input_size
        samples = [augment(s, np.random.default_rng([seed, epoch, int(i)]), size,
                           (cfg.data.scale_min, cfg.data.scale_max)) for s, i in zip(samples, idx)]
    elif any(s.dims != samples[0].dims or s.dims[0] % 2 or s.dims[1] % 2 for s in samples):
        samples = [prepare_eval(s, cfg.data.input_size) for s in samples]
    images, labels = to_batch(samples)
    return images, labels, [s.boxes for s in samples]


def new_training_state(cfg: Config, num_classes: int, device: str = "cpu"):
    seed_everything(cfg.train.seed)
    model = build_model(cfg.model, num_classes).to(device)
    ema = init_ema(model.encoder, cfg.train.ema_decay)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.train.lr)
    return model, ema, optimizer


def fit(cfg: Config, train: Sequence[Sample], num_classes: int, out_dir: str | Path | None = None,
        device: str = "cpu", resume: str | Path | None = None,
        on_epoch: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Train for ``cfg.train.epochs`` epochs; writes metrics CSV and checkpoints to ``out_dir``."""
    model, ema, optimizer = new_training_state(cfg, num_classes, device)
    start = 0
    if resume:
        start = load_checkpoint(resume, model, ema, optimizer)["epoch"]
    out = Path(out_dir) if out_dir else None
    metrics_path = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        if not resume or not metrics_path.exists():
            metrics_path.write_text("epoch,L_cls,L_re,L_pcls,total,alpha\n")

    rng = np.random.default_rng(cfg.train.seed)
    for _ in range(start):
        rng.permutation(len(train))
    history = []
    bs = cfg.train.batch_size
    for epoch in range(start, cfg.train.epochs):
        order = rng.permutation(len(train))
        rows = []
        for b in range(0, len(order), bs):
            idx = order[b:b + bs]
            images, labels, boxes = _prepare_batch([train[i] for i in idx], cfg, cfg.train.seed, epoch, idx)
            bundle = train_step(model, ema, optimizer, images.to(device), labels.to(device), cfg, epoch,
                                boxes=boxes, batch_id=f"epoch{epoch}:batch{b // bs}")
            rows.append(bundle.log_row())
        row = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
        row["epoch"] = epoch
        history.append(row)
        log.info("epoch %d cls=%.4f re=%.4f pcls=%.4f total=%.4f alpha=%.4f", epoch, row["cls"],
                 row["re"], row["pcls"], row["total"], row["alpha"])
        if metrics_path:
            with metrics_path.open("a", newline="") as fh:
                csv.writer(fh).writerow([epoch] + [f"{row[k]:.6f}" for k in ("cls", "re", "pcls", "total", "alpha")])
        if out and cfg.train.checkpoint_every and (epoch + 1) % cfg.train.checkpoint_every == 0:
            save_checkpoint(out / f"checkpoint_{epoch + 1:04d}.pt", model, ema, epoch + 1, cfg, optimizer)
        if on_epoch:
            on_epoch(epoch, row)
    if out:
        save_checkpoint(out / "checkpoint_last.pt", model, ema, cfg.train.epochs, cfg, optimizer)
    return TrainResult(model, ema, optimizer, history, cfg.train.epochs)


# ------------------------------------------------------------ checkpoints

def save_checkpoint(path: str | Path, model: OassModel, ema: EmaState, epoch: int, cfg: Config,
                    optimizer: torch.optim.Optimizer | None = None) -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "num_classes": model.num_classes,
        "model": model.state_dict(),
        "teacher": ema.teacher.state_dict(),
        "ema_decay": ema.decay,
        "ema_step": ema.step,
        "epoch": epoch,
        "config": cfg.to_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }, path)


def read_checkpoint(path: str | Path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an OASS checkpoint")
    if ckpt.get("version", 0) > CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {ckpt['version']} is newer than supported")
    return ckpt


def load_checkpoint(path: str | Path, model: OassModel, ema: EmaState | None = None,
                    optimizer: torch.optim.Optimizer | None = None) -> dict:
    ckpt = read_checkpoint(path)
    if ckpt["num_classes"] != model.num_classes:
        raise ValueError(f"checkpoint has {ckpt['num_classes']} classes, model has {model.num_classes}")
    model.load_state_dict(ckpt["model"])
    if ema is not None:
        ema.teacher.load_state_dict(ckpt["teacher"])
        ema.step = ckpt["ema_step"]
    if optimizer is not None and ckpt.get("optimizer"):
        optimizer.load_state_dict(ckpt["optimizer"])
    return ckpt


def model_from_checkpoint(path: str | Path, device: str = "cpu") -> tuple[OassModel, Config, dict]:
    ckpt = read_checkpoint(path)
    cfg = from_dict(ckpt["config"])
    model = build_model(cfg.model, ckpt["num_classes"])
    model.load_state_dict(ckpt["model"])
    return model.to(device).eval(), cfg, ckpt

