"""Pixel-level metrics for the foreground (lesion) class."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred_mask, gt_mask) -> ConfusionCounts:
    pred = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"confusion: prediction {pred.shape} and ground truth {gt.shape} differ")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def dice_iou_recall(c: ConfusionCounts) -> tuple[float, float, float]:
    """Empty prediction against empty ground truth scores (1, 1, 1)."""
    if c.tp + c.fp + c.fn == 0:
        return 1.0, 1.0, 1.0
    dice = 2 * c.tp / (2 * c.tp + c.fp + c.fn)
    iou = c.tp / (c.tp + c.fp + c.fn)
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 1.0
    return dice, iou, recall


def pr_curve(scores, gt_mask) -> tuple[np.ndarray, np.ndarray]:
    """Recall and precision with every distinct score used as a threshold.

    Points run from the highest threshold to the lowest, preceded by a
    recall-0 point that repeats the first precision. Requires at least one
    positive.
    """
    s = np.asarray(scores, dtype=float).ravel()
    g = np.asarray(gt_mask).astype(bool).ravel()
    if s.shape != g.shape:
        raise ValueError(f"pr_curve: scores {np.shape(scores)} and mask {np.shape(gt_mask)} differ")
    positives = int(g.sum())
    if positives == 0:
        raise ValueError("pr_curve needs at least one positive pixel")
    order = np.argsort(-s, kind="stable")
    s, g = s[order], g[order]
    tp = np.cumsum(g)
    fp = np.cumsum(~g)
    # last index of each run of equal scores = prediction set for that threshold
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    recall = tp[ends] / positives
    precision = tp[ends] / (tp[ends] + fp[ends])
    return np.r_[0.0, recall], np.r_[precision[0], precision]


def auc_pr(scores, gt_mask) -> float:
    """Trapezoidal area under the precision-recall curve; 1.0 when there are no positives."""
    if not np.any(np.asarray(gt_mask).astype(bool)):
        return 1.0
    recall, precision = pr_curve(scores, gt_mask)
    return float(np.sum(np.diff(recall) * (precision[1:] + precision[:-1]) / 2))


@dataclass
class ImageMetrics:
    name: str
    dice: float
    iou: float
    recall: float
    auc_pr: float
    auc_defined: bool
    counts: ConfusionCounts

    def to_record(self) -> str:
        return (f"image={self.name} dice={self.dice:.6f} iou={self.iou:.6f} recall={self.recall:.6f} "
                f"auc_pr={self.auc_pr:.6f} auc_defined={int(self.auc_defined)}")


@dataclass
class MetricsReport:
    """Pooled-pixel metrics in ``dice``/``iou``/``recall``/``auc_pr``; per-image means in ``mean_*``."""

    dice: float
    iou: float
    recall: float
    auc_pr: float
    mean_dice: float
    mean_iou: float
    mean_recall: float
    mean_auc_pr: float
    threshold: float = 0.5
    auc_defined: bool = True
    images: list[ImageMetrics] = field(default_factory=list)

    @property
    def pooled_dice(self) -> float:
        return self.dice

    @property
    def pooled_iou(self) -> float:
        return self.iou

    @property
    def pooled_recall(self) -> float:
        return self.recall

    @property
    def pooled_auc_pr(self) -> float:
        return self.auc_pr

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("images")
        return d

    def to_records(self) -> list[str]:
        lines = [im.to_record() for im in self.images]
        lines.append(
            f"aggregate n={len(self.images)} threshold={self.threshold:g} "
            f"pooled_dice={self.dice:.6f} pooled_iou={self.iou:.6f} pooled_recall={self.recall:.6f} "
            f"pooled_auc_pr={self.auc_pr:.6f} mean_dice={self.mean_dice:.6f} mean_iou={self.mean_iou:.6f} "
            f"mean_recall={self.mean_recall:.6f} mean_auc_pr={self.mean_auc_pr:.6f} "
            f"auc_defined={int(self.auc_defined)}"
        )
        return lines


def image_metrics(scores, gt_mask, threshold: float = 0.5, name: str = "") -> ImageMetrics:
    scores = np.asarray(scores, dtype=float)
    gt = np.asarray(gt_mask).astype(bool)
    c = confusion(scores >= threshold, gt)
    dice, iou, recall = dice_iou_recall(c)
    return ImageMetrics(name, dice, iou, recall, auc_pr(scores, gt), bool(gt.any()), c)


def evaluate_maps(score_maps, gt_masks, threshold: float = 0.5, names=None) -> MetricsReport:
    """Per-image and pooled metrics over foreground probability maps."""
    score_maps, gt_masks = list(score_maps), list(gt_masks)
    if not score_maps:
        raise ValueError("evaluate: empty split")
    if len(score_maps) != len(gt_masks):
        raise ValueError("evaluate: number of predictions and masks differ")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    names = names or [f"{i:04d}" for i in range(len(score_maps))]
    per = [image_metrics(s, g, threshold, n) for s, g, n in zip(score_maps, gt_masks, names)]
    total = per[0].counts
    for im in per[1:]:
        total = total + im.counts
    dice, iou, recall = dice_iou_recall(total)
    flat_s = np.concatenate([np.ravel(s) for s in score_maps])
    flat_g = np.concatenate([np.ravel(g) for g in gt_masks])
    return MetricsReport(
        dice=dice, iou=iou, recall=recall, auc_pr=auc_pr(flat_s, flat_g),
        mean_dice=float(np.mean([m.dice for m in per])),
        mean_iou=float(np.mean([m.iou for m in per])),
        mean_recall=float(np.mean([m.recall for m in per])),
        mean_auc_pr=float(np.mean([m.auc_pr for m in per])),
        threshold=threshold,
        auc_defined=bool(np.asarray(flat_g).astype(bool).any()),
        images=per,
    )
