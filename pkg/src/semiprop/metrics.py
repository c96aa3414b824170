"""Proposal quality metrics: per-video tIoU recall matrices, AR@AN, AUC."""

from __future__ import annotations

import os

import numpy as np

from .data import AnnotationSet, iou_1d
from .postprocess import Proposal

THUMOS_THRESHOLDS = tuple(np.arange(0.5, 1.0 + 1e-9, 0.05).round(2))
ANET_THRESHOLDS = tuple(np.arange(0.5, 0.95 + 1e-9, 0.05).round(2))


def threshold_set(name: str) -> tuple[float, ...]:
    if name == "thumos":
        return THUMOS_THRESHOLDS
    if name == "anet":
        return ANET_THRESHOLDS
    raise ValueError(f"unknown threshold convention {name!r}")


def recall_matrix(props: list[Proposal], gt: AnnotationSet,
                  thresholds, an_values) -> np.ndarray:
    """Entry (i, j): fraction of gt instances matched at IoU >= thresholds[i]
    by some proposal among the top an_values[j]. Proposals must arrive sorted
    by descending score; gt must be non-empty."""
    scores = [p.score for p in props]
    if any(scores[i] < scores[i + 1] for i in range(len(scores) - 1)):
        raise ValueError("proposals must be sorted by descending score")
    if not gt.instances:
        raise ValueError("recall is undefined for a video without ground truth")
    n_gt = len(gt.instances)
    # best IoU achieved per gt within each ranked prefix
    ious = np.zeros((len(props), n_gt))
    for r, p in enumerate(props):
        for g, inst in enumerate(gt.instances):
            ious[r, g] = iou_1d((p.start, p.end), tuple(inst))
    out = np.zeros((len(thresholds), len(an_values)))
    for j, an in enumerate(an_values):
        top = ious[:an] if an > 0 else ious[:0]
        best = top.max(axis=0) if top.shape[0] else np.zeros(n_gt)
        for i, th in enumerate(thresholds):
            out[i, j] = float((best >= th).sum()) / n_gt
    return out


def ar_at_an(recalls: list[np.ndarray], an_index: int) -> float:
    """Dataset AR at one AN column: mean over videos of the threshold-mean
    recall. `recalls` holds one recall matrix per eligible video."""
    if not recalls:
        raise ValueError("no eligible videos (all ground truth empty)")
    return float(np.mean([r[:, an_index].mean() for r in recalls]))


def auc(recalls: list[np.ndarray], an_values) -> float:
    """100 x mean of AR@AN over AN in 1..100 (integer-grid rectangle rule).
    `an_values` labels the columns of the recall matrices and must cover
    1..100."""
    an_values = list(an_values)
    idx = [an_values.index(an) for an in range(1, 101)]
    return 100.0 * float(np.mean([ar_at_an(recalls, j) for j in idx]))


def evaluate_dataset(per_video: dict[str, tuple[list[Proposal], AnnotationSet]],
                     thresholds, an_max: int = 100) -> dict:
    """Aggregate metrics for a mapping video_id -> (ranked proposals, gt).
    Videos with empty gt are excluded from averaging."""
    an_values = list(range(1, an_max + 1))
    recalls = {}
    for vid, (props, gt) in per_video.items():
        if not gt.instances:
            continue
        recalls[vid] = recall_matrix(props, gt, thresholds, an_values)
    mats = list(recalls.values())
    if not mats:
        return {"eligible_videos": 0}
    result = {
        "eligible_videos": len(mats),
        "thresholds": [float(t) for t in thresholds],
        "an_values": an_values,
        "ar_curve": [ar_at_an(mats, j) for j in range(len(an_values))],
    }
    for an in (10, 50, 100):
        if an <= an_max:
            result[f"AR@{an}"] = ar_at_an(mats, an_values.index(an))
    if an_max >= 100:
        result["AUC"] = auc(mats, an_values)
    # per-threshold recall at the largest AN
    last = len(an_values) - 1
    result["recall_at_max_an"] = {
        f"{t:.2f}": float(np.mean([m[i, last] for m in mats]))
        for i, t in enumerate(thresholds)
    }
    return result


def write_report(result: dict, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("proposal quality report\n")
        fh.write(f"eligible videos: {result.get('eligible_videos', 0)}\n")
        for key in ("AR@10", "AR@50", "AR@100", "AUC"):
            if key in result:
                fh.write(f"{key}: {result[key]:.4f}\n")
        if "recall_at_max_an" in result:
            fh.write("recall by tIoU threshold (at max AN):\n")
            for th, r in result["recall_at_max_an"].items():
                fh.write(f"  {th}: {r:.4f}\n")


def write_ar_curve_csv(result: dict, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("an,ar\n")
        for an, ar in zip(result["an_values"], result["ar_curve"]):
            fh.write(f"{an},{ar:.6f}\n")
