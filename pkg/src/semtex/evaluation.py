"""IoU scoring of single-frame predictions and of the fused map rendered back into views."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .atlas import UNLABELED, TexelTable
from .camera import CameraFrame, add_pose_noise, invert_pose
from .labelprop import render_pseudo_gt
from .semantic import FusionParams, fuse_frames
from .sparse import SparseSemanticTexture

MAX_TRANSLATION = 0.5
MAX_ROTATION_DEG = 5.0


def confusion(pred: np.ndarray, gt: np.ndarray, class_count: int, ignore_label: int = UNLABELED) -> np.ndarray:
    """Counts ``m[g, p]`` of pixels with ground truth ``g`` and prediction ``p``.

    Ground-truth pixels equal to ``ignore_label`` are skipped.  The result
    has one extra column that counts unlabeled predictions, so a missing
    prediction still costs the ground-truth class a false negative.
    """
    pred = np.asarray(pred).astype(np.int64)
    gt = np.asarray(gt).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    keep = gt != ignore_label
    g, p = gt[keep], pred[keep]
    if g.size and (g.min() < 0 or g.max() >= class_count):
        raise ValueError("ground-truth label outside the class range")
    bad = (p < 0) | ((p >= class_count) & (p != UNLABELED))
    if np.any(bad):
        raise ValueError("predicted label outside the class range")
    p = np.where(p == UNLABELED, class_count, p)
    m = np.bincount(g * (class_count + 1) + p, minlength=class_count * (class_count + 1))
    return m.reshape(class_count, class_count + 1)


@dataclass
class IoUReport:
    per_class: dict
    mean: float
    gt_pixels: dict
    pred_pixels: dict
    class_names: list | None = field(default=None, compare=False)

    def to_dict(self) -> dict:
        return {
            "mean_iou": self.mean,
            "per_class": {str(c): v for c, v in self.per_class.items()},
            "gt_pixels": {str(c): v for c, v in self.gt_pixels.items()},
            "pred_pixels": {str(c): v for c, v in self.pred_pixels.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        """Aligned text table, one column per class plus the mean."""
        classes = sorted(self.per_class)
        names = [self._name(c) for c in classes] + ["mean"]
        vals = [f"{self.per_class[c]:.3f}" for c in classes] + [f"{self.mean:.3f}"]
        widths = [max(len(n), len(v)) for n, v in zip(names, vals)]
        head = " | ".join(n.rjust(w) for n, w in zip(names, widths))
        row = " | ".join(v.rjust(w) for v, w in zip(vals, widths))
        return f"{head}\n{'-' * len(head)}\n{row}"

    def _name(self, c: int) -> str:
        if self.class_names and c < len(self.class_names):
            return str(self.class_names[c])
        return str(c)


def iou(matrix: np.ndarray, class_names=None) -> IoUReport:
    """Per-class ``TP / (TP + FP + FN)`` and the mean over classes present in the ground truth.

    Accepts square matrices or the ``C x (C + 1)`` form from :func:`confusion`.
    """
    m = np.asarray(matrix, dtype=np.int64)
    C = m.shape[0]
    if m.shape[1] not in (C, C + 1):
        raise ValueError("confusion matrix must be C x C or C x (C + 1)")
    tp = np.diag(m[:, :C])
    row = m.sum(axis=1)
    col = m[:, :C].sum(axis=0)
    per_class, gt_pix, pred_pix = {}, {}, {}
    for c in range(C):
        den = row[c] + col[c] - tp[c]
        if den > 0:
            per_class[c] = float(tp[c] / den)
            gt_pix[c] = int(row[c])
            pred_pix[c] = int(col[c])
    present = [per_class[c] for c in range(C) if row[c] > 0]
    mean = float(np.mean(present)) if present else float("nan")
    return IoUReport(per_class, mean, gt_pix, pred_pix, class_names)


def single_frame_iou(preds, gts, class_count: int) -> float:
    """Average over frames of each frame's own mean IoU."""
    means = [iou(confusion(p, g, class_count)).mean for p, g in zip(preds, gts)]
    means = [m for m in means if np.isfinite(m)]
    if not means:
        raise ValueError("no frame has ground-truth pixels")
    return float(np.mean(means))


def evaluate_backprojection(table: TexelTable, store: SparseSemanticTexture, frames, gts, class_names=None) -> IoUReport:
    """Render the fused labels into each ground-truth view and pool the confusion counts."""
    frames = list(frames)
    if not frames:
        raise ValueError("no ground-truth frames to evaluate")
    planes = store.fused_planes()
    total = np.zeros((store.class_count, store.class_count + 1), dtype=np.int64)
    for fr, gt in zip(frames, gts, strict=True):
        pgt = render_pseudo_gt(table, store, fr.model, fr.pose, 0.0, fr.id, planes)
        total += confusion(pgt.labels, gt, store.class_count)
    return iou(total, class_names)


def perturb_frames(frames, level: float, seed: int, max_translation: float = MAX_TRANSLATION, max_rotation_deg: float = MAX_ROTATION_DEG):
    """Copies of ``frames`` with poses perturbed by ``level`` times the noise bounds."""
    if level == 0:
        return list(frames)
    world_from_cam = [invert_pose(fr.pose) for fr in frames]
    noisy = add_pose_noise(world_from_cam, level * max_translation, level * max_rotation_deg, seed)
    return [CameraFrame(fr.id, fr.model, invert_pose(T), fr.rgb, fr.segmentation) for fr, T in zip(frames, noisy)]


def robustness_sweep(
    table: TexelTable,
    frames,
    gts,
    class_count: int,
    levels=(0.0, 0.25, 0.5, 0.75, 1.0),
    seed: int = 0,
    params: FusionParams = FusionParams(),
    page_size: int = 128,
    decommit_threshold: float = 0.1,
    class_names=None,
):
    """IoU of the fused map when fusing with increasingly noisy poses.

    Fusion uses the perturbed poses; evaluation renders into the true ones.
    Returns ``[(level, IoUReport), ...]``.
    """
    frames = list(frames)
    out = []
    for level in levels:
        store = SparseSemanticTexture(table.resolution, class_count, page_size, decommit_threshold)
        fuse_frames(store, table, perturb_frames(frames, level, seed), params)
        out.append((float(level), evaluate_backprojection(table, store, frames, gts, class_names)))
    return out
