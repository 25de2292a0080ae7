"""Point-level and map-level quality metrics for MOS labels.

Point metrics treat dynamic as the positive class and skip points whose
ground truth is unlabeled. Map metrics compare voxelized occupancy: how many
truly static voxels the cleaned map preserved, and how many dynamic-trace
voxels it rejected.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .dataset import CLASS_DYNAMIC, CLASS_UNLABELED, label_classes
from .errors import UndefinedMetricError
from .geometry import PointCloud, voxel_keys


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )


def confusion_counts(pred_labels, gt_labels) -> ConfusionCounts:
    pred = label_classes(pred_labels)
    gt = label_classes(gt_labels)
    if pred.shape != gt.shape:
        raise ValueError(f"label lengths differ: {pred.shape[0]} vs {gt.shape[0]}")
    keep = gt != CLASS_UNLABELED
    pred_dyn = pred[keep] == CLASS_DYNAMIC
    gt_dyn = gt[keep] == CLASS_DYNAMIC
    return ConfusionCounts(
        tp=int((pred_dyn & gt_dyn).sum()),
        fp=int((pred_dyn & ~gt_dyn).sum()),
        fn=int((~pred_dyn & gt_dyn).sum()),
        tn=int((~pred_dyn & ~gt_dyn).sum()),
    )


def iou_mos(c: ConfusionCounts) -> float:
    """tp / (tp + fp + fn); vacuously 1 when there are no positives at all."""
    denom = c.tp + c.fp + c.fn
    return c.tp / denom if denom else 1.0


def f1_score(pr: float, rr: float) -> float:
    """Harmonic mean of preservation and rejection rates (as fractions)."""
    if not (0.0 <= pr <= 1.0 and 0.0 <= rr <= 1.0):
        raise ValueError(f"rates must be fractions in [0, 1], got pr={pr}, rr={rr}")
    if pr == 0.0 and rr == 0.0:
        raise UndefinedMetricError("F1 is undefined when both rates are zero")
    return 2.0 * pr * rr / (pr + rr)


def dynamic_ratio(labels) -> float:
    classes = label_classes(labels)
    if classes.size == 0:
        raise UndefinedMetricError("dynamic ratio is undefined for an empty scan")
    return float((classes == CLASS_DYNAMIC).sum()) / classes.size


@dataclass(frozen=True)
class MapEvalResult:
    preservation_pct: float
    rejection_pct: float
    f1: float
    static_voxels: int
    dynamic_voxels: int


def map_voxel_metrics(
    cleaned_cloud: PointCloud,
    gt_clouds: list[PointCloud],
    gt_labels: list[np.ndarray],
    poses,
    voxel_size: float,
) -> MapEvalResult:
    """Voxel preservation/rejection of a cleaned map against labeled scans.

    The reference is the naively accumulated map of all ground-truth scans;
    a voxel containing at least one dynamic point counts as dynamic. The
    cleaned cloud and the reference are voxelized at the same size, so the
    result is insensitive to duplicate points within a voxel.
    """
    dynamic_sets = []
    all_sets = []
    for cloud, labels, pose in zip(gt_clouds, gt_labels, poses):
        world = pose.apply(cloud.points)
        keys = voxel_keys(world, voxel_size)
        classes = label_classes(labels)
        all_sets.append(keys)
        dynamic_sets.append(keys[classes == CLASS_DYNAMIC])
    occupied = _key_set(np.vstack(all_sets)) if all_sets else set()
    dynamic = _key_set(np.vstack(dynamic_sets)) if dynamic_sets else set()
    static = occupied - dynamic
    if not static:
        raise UndefinedMetricError("no static voxels in the ground-truth map")
    if not dynamic:
        raise UndefinedMetricError("no dynamic voxels in the ground-truth map")
    cleaned = _key_set(voxel_keys(cleaned_cloud.points, voxel_size))
    pr = len(static & cleaned) / len(static)
    rr = 1.0 - len(dynamic & cleaned) / len(dynamic)
    return MapEvalResult(100.0 * pr, 100.0 * rr, f1_score(pr, rr), len(static), len(dynamic))


def _key_set(keys: np.ndarray) -> set[tuple[int, int, int]]:
    return set(map(tuple, np.unique(keys.reshape(-1, 3), axis=0).tolist()))


def metrics_table(rows: list[dict]) -> str:
    """Aligned text table from a list of uniform dictionaries."""
    if not rows:
        return ""
    headers = list(rows[0])
    cells = [[_fmt(r[h]) for h in headers] for r in rows]
    widths = [max(len(h), *(len(c[i]) for c in cells)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    for row in cells:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def metrics_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]))
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)
