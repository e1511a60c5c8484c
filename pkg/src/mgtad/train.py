"""Target assignment, detection losses, optimizer, and the training loop.

Instances are routed to pyramid levels by duration (base-timestep ranges,
one per level); inside the assigned level every timestep whose base position
falls in the instance is a positive. Duplicated annotation records (from the
rarity-based augmentation) raise the multiplicity weight of their positive
cells, so replicated instances contribute proportionally more loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import VideoAnnotation
from .encoder import PyramidFeatures
from .model import Detector

_PROB_EPS = 1e-12


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 50
    batch_size: int = 8
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    regression_weight: float = 1.0
    warmup_steps: int = 10
    level_ranges: list | None = None  # per level (lo, hi] in base timesteps
    seed: int = 0

    def ranges_for(self, num_levels: int) -> list[tuple[float, float]]:
        """Duration ranges partitioning (0, inf], finest level first."""
        if self.level_ranges is not None:
            if len(self.level_ranges) != num_levels:
                raise ValueError(
                    f"{len(self.level_ranges)} level ranges for {num_levels} levels"
                )
            return [tuple(r) for r in self.level_ranges]
        bounds = [8.0 * 2 ** i for i in range(num_levels - 1)] + [math.inf]
        lows = [0.0] + bounds[:-1]
        return list(zip(lows, bounds))

    def to_json(self) -> dict:
        out = dict(self.__dict__)
        if out["level_ranges"] is not None:
            out["level_ranges"] = [list(r) for r in out["level_ranges"]]
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        if obj.get("level_ranges") is not None:
            obj["level_ranges"] = [tuple(r) for r in obj["level_ranges"]]
        return cls(**obj)


@dataclass
class LevelTargets:
    class_weight: np.ndarray   # K x T, positive multiplicity (0 = negative)
    offsets: np.ndarray        # 2 x T, valid where the cell is positive
    pos_mask: np.ndarray       # T, true where any class is positive


def assign_targets(instances, num_classes: int, level_lengths, strides,
                   seconds_per_step: float, ranges) -> list[LevelTargets]:
    """Per-level class/offset targets for one video.

    An instance of duration d base steps lands on the unique level whose
    range contains d; timesteps whose base position lies inside the instance
    are positive, with offsets measured in level timesteps. When instances of
    different lengths cover the same cell, the shortest owns the offsets.
    """
    targets = []
    covering = []
    for t_len in level_lengths:
        targets.append(LevelTargets(
            class_weight=np.zeros((num_classes, t_len)),
            offsets=np.zeros((2, t_len)),
            pos_mask=np.zeros(t_len, dtype=bool),
        ))
        covering.append(np.full(t_len, np.inf))
    for inst in instances:
        start_b = inst.start_s / seconds_per_step
        end_b = inst.end_s / seconds_per_step
        if end_b <= start_b:
            raise ValueError(f"instance with end <= start: {inst}")
        if not 0 <= inst.label < num_classes:
            raise ValueError(f"label {inst.label} outside 0..{num_classes - 1}")
        d = end_b - start_b
        level = next((i for i, (lo, hi) in enumerate(ranges) if lo < d <= hi), None)
        if level is None:
            raise ValueError(f"duration {d} base steps not covered by level ranges {ranges}")
        stride = strides[level]
        t_len = level_lengths[level]
        t_lo = max(0, math.ceil(start_b / stride))
        t_hi = min(t_len - 1, math.floor(end_b / stride))
        if t_hi < t_lo:
            continue  # no grid point inside; instance has no in-bounds timestep
        tg = targets[level]
        ts = np.arange(t_lo, t_hi + 1)
        tg.class_weight[inst.label, t_lo:t_hi + 1] += 1.0
        tg.pos_mask[t_lo:t_hi + 1] = True
        shorter = d < covering[level][t_lo:t_hi + 1]
        sel = ts[shorter]
        base = sel * stride
        tg.offsets[0, sel] = (base - start_b) / stride
        tg.offsets[1, sel] = (end_b - base) / stride
        covering[level][sel] = d
    return targets


def targets_for_video(ann: VideoAnnotation, model: Detector, cfg: TrainConfig,
                      t_steps: int) -> list[LevelTargets]:
    lengths = PyramidFeatures.level_lengths(t_steps, model.cfg.num_levels)
    return assign_targets(ann.instances, model.cfg.num_classes, lengths,
                          model.level_strides(), ann.seconds_per_step,
                          cfg.ranges_for(model.cfg.num_levels))


# ---------------------------------------------------------------------------
# Losses: each returns (sum-form loss, gradient, weight mass); the caller
# normalizes jointly across levels.
# ---------------------------------------------------------------------------

def focal_bce_parts(probs: np.ndarray, class_weight: np.ndarray,
                    gamma: float = 2.0, alpha: float = 0.25):
    p = np.clip(probs, _PROB_EPS, 1.0 - _PROB_EPS)
    w = class_weight
    pos = w > 0
    one_m = 1.0 - p
    loss_pos = np.where(pos, w * alpha * one_m ** gamma * (-np.log(p)), 0.0)
    loss_neg = np.where(pos, 0.0, (1.0 - alpha) * p ** gamma * (-np.log(one_m)))
    grad_pos = w * alpha * (gamma * one_m ** (gamma - 1.0) * np.log(p) - one_m ** gamma / p)
    grad_neg = (1.0 - alpha) * (gamma * p ** (gamma - 1.0) * (-np.log(one_m))
                                + p ** gamma / one_m)
    grad = np.where(pos, grad_pos, grad_neg)
    grad[(probs <= _PROB_EPS) | (probs >= 1.0 - _PROB_EPS)] = 0.0
    return float(loss_pos.sum() + loss_neg.sum()), grad, float(w.sum())


def focal_bce(probs: np.ndarray, class_weight: np.ndarray,
              gamma: float = 2.0, alpha: float = 0.25) -> float:
    """Focal loss averaged over positives (normalizer 1 when none)."""
    total, _, mass = focal_bce_parts(probs, class_weight, gamma, alpha)
    return total / max(1.0, mass)


def diou_1d_parts(pred_offsets: np.ndarray, target_offsets: np.ndarray,
                  weight: np.ndarray):
    """Distance-IoU between 1-d intervals rebuilt from (start, end) offsets.

    The anchor position cancels out of every term, so intervals are compared
    as (-d_s, +d_e) around zero. Returns (weighted sum, grad, weight mass).
    """
    a_s, a_e = pred_offsets[0], pred_offsets[1]
    b_s, b_e = target_offsets[0], target_offsets[1]
    w = weight
    active = w > 0
    p1, p2 = -a_s, a_e
    g1, g2 = -b_s, b_e
    lo = np.maximum(p1, g1)
    hi = np.minimum(p2, g2)
    inter = np.maximum(0.0, hi - lo)
    len_p = p2 - p1
    len_g = g2 - g1
    union = len_p + len_g - inter
    iou = np.where(union > 0, inter / np.maximum(union, 1e-300), 0.0)
    dc = 0.5 * ((p1 + p2) - (g1 + g2))
    enc = np.maximum(p2, g2) - np.minimum(p1, g1)
    enc = np.maximum(enc, 1e-300)
    loss = 1.0 - iou + (dc * dc) / (enc * enc)

    has_inter = inter > 0
    a1 = (p1 >= g1).astype(float)           # max(p1,g1) side
    a2 = (p2 <= g2).astype(float)           # min(p2,g2) side
    d_inter_p1 = np.where(has_inter, -a1, 0.0)
    d_inter_p2 = np.where(has_inter, a2, 0.0)
    d_union_p1 = -1.0 - d_inter_p1
    d_union_p2 = 1.0 - d_inter_p2
    inv_u = 1.0 / np.maximum(union, 1e-300)
    d_iou_p1 = (d_inter_p1 - iou * d_union_p1) * inv_u
    d_iou_p2 = (d_inter_p2 - iou * d_union_p2) * inv_u
    b1 = (p1 <= g1).astype(float)           # min(p1,g1) side
    b2 = (p2 >= g2).astype(float)           # max(p2,g2) side
    inv_e = 1.0 / enc
    d_pen_p1 = dc * inv_e * inv_e + (dc * dc) * (-2.0) * (inv_e ** 3) * (-b1)
    d_pen_p2 = dc * inv_e * inv_e + (dc * dc) * (-2.0) * (inv_e ** 3) * b2
    d_loss_p1 = -d_iou_p1 + d_pen_p1
    d_loss_p2 = -d_iou_p2 + d_pen_p2

    grad = np.zeros_like(pred_offsets)
    grad[0] = np.where(active, w * (-d_loss_p1), 0.0)   # d p1 / d a_s = -1
    grad[1] = np.where(active, w * d_loss_p2, 0.0)
    total = float((w * np.where(active, loss, 0.0)).sum())
    return total, grad, float(w.sum())


def diou_1d(pred_offsets: np.ndarray, target_offsets: np.ndarray,
            weight: np.ndarray | None = None) -> float:
    """Weighted mean distance-IoU loss over positive cells; 0 when none."""
    if weight is None:
        weight = np.ones(pred_offsets.shape[1])
    total, _, mass = diou_1d_parts(pred_offsets, target_offsets, weight)
    if mass == 0.0:
        return 0.0
    return total / mass


def detection_loss(outputs, targets: list[LevelTargets], cfg: TrainConfig):
    """Joint focal + DIoU loss over all levels with gradients for backward.

    Returns (loss, per-level prob grads, per-level offset grads, parts dict).
    Classification is normalized by total positive weight (1 when there are
    no positives); regression by its own weight mass and skipped when empty.
    """
    cls_sum = 0.0
    reg_sum = 0.0
    cls_mass = 0.0
    reg_mass = 0.0
    raw = []
    for probs, offs, tg in zip(outputs.class_probs, outputs.offsets, targets):
        cl, cg, cm = focal_bce_parts(probs, tg.class_weight, cfg.focal_gamma,
                                     cfg.focal_alpha)
        pos_w = np.where(tg.pos_mask, tg.class_weight.sum(axis=0), 0.0)
        rl, rg, rm = diou_1d_parts(offs, tg.offsets, pos_w)
        cls_sum += cl
        reg_sum += rl
        cls_mass += cm
        reg_mass += rm
        raw.append((cg, rg))
    cls_norm = max(1.0, cls_mass)
    cls_loss = cls_sum / cls_norm
    reg_loss = reg_sum / reg_mass if reg_mass > 0 else 0.0
    g_probs = []
    g_offsets = []
    for cg, rg in raw:
        g_probs.append(cg / cls_norm)
        g_offsets.append(cfg.regression_weight * rg / reg_mass if reg_mass > 0
                         else np.zeros_like(rg))
    loss = cls_loss + cfg.regression_weight * reg_loss
    return loss, g_probs, g_offsets, {"class": cls_loss, "regression": reg_loss}


# ---------------------------------------------------------------------------
# Optimizer and fit loop
# ---------------------------------------------------------------------------

class Adam:
    """Adam with constant learning rate after a linear warmup."""

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 warmup_steps: int = 10):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.warmup = max(1, warmup_steps)
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        self.t += 1
        lr_t = self.lr * min(1.0, self.t / self.warmup)
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            mhat = m / (1.0 - self.b1 ** self.t)
            vhat = v / (1.0 - self.b2 ** self.t)
            p.value -= lr_t * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class FitResult:
    loss_trace: list = field(default_factory=list)     # mean loss per epoch
    class_trace: list = field(default_factory=list)
    regression_trace: list = field(default_factory=list)
    steps: int = 0


def fit(dataset, model: Detector, cfg: TrainConfig,
        progress=None) -> FitResult:
    """Mini-batch training over (annotation, features) pairs.

    Deterministic for a fixed seed in single-threaded mode. Raises
    TrainingDiverged on a non-finite epoch loss.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params(), lr=cfg.learning_rate, warmup_steps=cfg.warmup_steps)
    result = FitResult()
    target_cache: dict[int, list[LevelTargets]] = {}
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        epoch_loss = 0.0
        epoch_cls = 0.0
        epoch_reg = 0.0
        n_batches = 0
        for b0 in range(0, len(order), cfg.batch_size):
            batch = order[b0:b0 + cfg.batch_size]
            model.zero_grads()
            batch_loss = 0.0
            for vi in batch:
                ann, feats = dataset[vi]
                if vi not in target_cache:
                    target_cache[vi] = targets_for_video(ann, model, cfg,
                                                         feats.shape[1])
                targets = target_cache[vi]
                outputs, cache = model.forward(feats)
                loss, g_probs, g_offsets, parts = detection_loss(outputs, targets, cfg)
                scale = 1.0 / len(batch)
                model.backward(cache, [g * scale for g in g_probs],
                               [g * scale for g in g_offsets])
                batch_loss += loss * scale
                epoch_cls += parts["class"] * scale
                epoch_reg += parts["regression"] * scale
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(epoch, batch_loss)
            opt.step()
            result.steps += 1
            epoch_loss += batch_loss
            n_batches += 1
        result.loss_trace.append(epoch_loss / max(1, n_batches))
        result.class_trace.append(epoch_cls / max(1, n_batches))
        result.regression_trace.append(epoch_reg / max(1, n_batches))
        if progress is not None:
            progress(epoch, result.loss_trace[-1])
    return result
