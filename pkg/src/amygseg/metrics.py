"""Segmentation evaluation: Dice, average symmetric surface distance, and
the per-class / per-group aggregation used by the experiment reports.

Conventions:
  * masks are boolean [D,H,W] arrays of identical shape;
  * a surface voxel is a mask voxel with at least one 6-connected neighbour
    outside the mask (volume-border voxels count as surface);
  * distances are centre-to-centre Euclidean in voxel units (the target
    volumes are isotropic 1 mm, so voxels equal millimetres);
  * Dice is undefined only when both masks are empty, ASSD when either is;
    undefined values are reported as None and excluded from means.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import distance_transform_edt

from .errors import DataError, ShapeError

# class pairing per structure family: (left, right)
GROUP_CLASSES = {
    "lateral": (1, 5),
    "basal": (2, 6),
    "centromedial": (3, 7),
    "cortico_superficial": (4, 8),
}
FOREGROUND_CLASSES = tuple(range(1, 9))


@dataclass
class MetricRecord:
    subject_id: str
    class_id: int
    dice: float | None
    assd: float | None


@dataclass
class GroupAggregate:
    group: str
    classes: tuple[int, int]
    mean_dice: float | None
    mean_assd: float | None


@dataclass
class AggregateReport:
    class_dice: dict[int, float | None]
    class_assd: dict[int, float | None]
    groups: list[GroupAggregate]
    overall_dice: float | None
    overall_assd: float | None
    undefined_dice: int
    undefined_assd: int


def _check_masks(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeError(f"mask dims differ: {a.shape} vs {b.shape}")


def dice(pred: np.ndarray, gt: np.ndarray) -> float | None:
    """2|A n B| / (|A|+|B|); None when both masks are empty."""
    _check_masks(pred, gt)
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return None
    inter = int(np.logical_and(pred, gt).sum())
    return 2.0 * inter / total


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with a 6-neighbour outside the mask; borders count."""
    m = mask.astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1, 1:-1]
        & padded[2:, 1:-1, 1:-1]
        & padded[1:-1, :-2, 1:-1]
        & padded[1:-1, 2:, 1:-1]
        & padded[1:-1, 1:-1, :-2]
        & padded[1:-1, 1:-1, 2:]
    )
    return m & ~interior


def assd(pred: np.ndarray, gt: np.ndarray) -> float | None:
    """Average symmetric distance between the two surfaces; None if a mask is empty.

    Nearest-surface distances come from an exact Euclidean distance
    transform of each surface's complement.
    """
    _check_masks(pred, gt)
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    if not pred.any() or not gt.any():
        return None
    sp = surface_voxels(pred)
    sg = surface_voxels(gt)
    dist_to_sg = distance_transform_edt(~sg)
    dist_to_sp = distance_transform_edt(~sp)
    total = dist_to_sg[sp].sum() + dist_to_sp[sg].sum()
    return float(total / (int(sp.sum()) + int(sg.sum())))


def volume_to_surface_ratio(mask: np.ndarray) -> float:
    m = mask.astype(bool)
    vol = int(m.sum())
    if vol == 0:
        raise DataError("volume-to-surface ratio is undefined for an empty mask")
    return vol / int(surface_voxels(m).sum())


def evaluate_labels(
    pred_labels: np.ndarray,
    gt_labels: np.ndarray,
    subject_id: str,
    classes: Sequence[int] = FOREGROUND_CLASSES,
) -> list[MetricRecord]:
    """Per-class Dice/ASSD records between two integer label volumes."""
    _check_masks(pred_labels, gt_labels)
    records = []
    for c in classes:
        p = pred_labels == c
        g = gt_labels == c
        records.append(MetricRecord(subject_id, int(c), dice(p, g), assd(p, g)))
    return records


def _mean_defined(values: Iterable[float | None]) -> tuple[float | None, int]:
    vals = [v for v in values if v is not None]
    skipped = sum(1 for v in values if v is None)
    return (float(np.mean(vals)) if vals else None), skipped


def aggregate(records: list[MetricRecord]) -> AggregateReport:
    """Class means over defined records, family means over class pairs,
    and the overall mean of the 8 class means."""
    class_dice: dict[int, float | None] = {}
    class_assd: dict[int, float | None] = {}
    undefined_dice = undefined_assd = 0
    for c in FOREGROUND_CLASSES:
        of_class = [r for r in records if r.class_id == c]
        class_dice[c], sd = _mean_defined([r.dice for r in of_class])
        class_assd[c], sa = _mean_defined([r.assd for r in of_class])
        undefined_dice += sd
        undefined_assd += sa

    groups = []
    for group, (a, b) in GROUP_CLASSES.items():
        pair_dice = [class_dice[a], class_dice[b]]
        pair_assd = [class_assd[a], class_assd[b]]
        g_dice = None if None in pair_dice else float(np.mean(pair_dice))
        g_assd = None if None in pair_assd else float(np.mean(pair_assd))
        groups.append(GroupAggregate(group, (a, b), g_dice, g_assd))

    all_dice = [class_dice[c] for c in FOREGROUND_CLASSES]
    all_assd = [class_assd[c] for c in FOREGROUND_CLASSES]
    overall_dice = None if None in all_dice else float(np.mean(all_dice))
    overall_assd = None if None in all_assd else float(np.mean(all_assd))
    return AggregateReport(
        class_dice=class_dice,
        class_assd=class_assd,
        groups=groups,
        overall_dice=overall_dice,
        overall_assd=overall_assd,
        undefined_dice=undefined_dice,
        undefined_assd=undefined_assd,
    )


def class_group(class_id: int) -> str:
    for group, pair in GROUP_CLASSES.items():
        if class_id in pair:
            return group
    return ""


def report_rows(records: list[MetricRecord]) -> list[dict]:
    """CSV-ready rows: one per record plus aggregate rows.

    Columns: subject, class, group, dice, assd, defined_flag. Aggregate rows
    use subject "mean" with class set to the class id, the group name, or
    "all" for the overall row.
    """

    def fmt(v):
        return "" if v is None else f"{v:.6f}"

    rows = []
    for r in sorted(records, key=lambda r: (r.subject_id, r.class_id)):
        rows.append(
            {
                "subject": r.subject_id,
                "class": str(r.class_id),
                "group": class_group(r.class_id),
                "dice": fmt(r.dice),
                "assd": fmt(r.assd),
                "defined_flag": str(int(r.dice is not None and r.assd is not None)),
            }
        )
    agg = aggregate(records)
    for c in FOREGROUND_CLASSES:
        rows.append(
            {
                "subject": "mean",
                "class": str(c),
                "group": class_group(c),
                "dice": fmt(agg.class_dice[c]),
                "assd": fmt(agg.class_assd[c]),
                "defined_flag": str(int(agg.class_dice[c] is not None)),
            }
        )
    for g in agg.groups:
        rows.append(
            {
                "subject": "mean",
                "class": "",
                "group": g.group,
                "dice": fmt(g.mean_dice),
                "assd": fmt(g.mean_assd),
                "defined_flag": str(int(g.mean_dice is not None)),
            }
        )
    rows.append(
        {
            "subject": "mean",
            "class": "all",
            "group": "",
            "dice": fmt(agg.overall_dice),
            "assd": fmt(agg.overall_assd),
            "defined_flag": str(int(agg.overall_dice is not None)),
        }
    )
    return rows
