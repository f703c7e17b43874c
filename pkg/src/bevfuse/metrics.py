"""Detection decoding and center-distance evaluation.

Decoding finds 3x3 local maxima per class channel and reads sub-cell
offsets, sizes, and velocities from the regression map at the peak.
Evaluation greedily matches predictions to ground truth per class and
per distance threshold (score order, nearest unmatched truth), then
computes 11-point interpolated average precision. Classes that never
appear in the ground truth are skipped, and the velocity error averages
over true positives at the middle (2-cell) threshold.

Every ordering ties back to a deterministic key (score, then row, col,
class), so repeated runs produce identical reports.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import TruthBox

DIST_THRESHOLDS = (1.0, 2.0, 4.0)
VELOCITY_MATCH_THRESHOLD = 2.0


@dataclass(frozen=True)
class Detection:
    row: float
    col: float
    w: float
    l: float
    vr: float
    vc: float
    class_id: int
    score: float


@dataclass
class DetectionMetrics:
    ap: dict  # (class_id, threshold) -> float
    mean_ap: float
    velocity_error: float  # mean L2 over true positives; nan if none
    num_gt: int
    num_pred: int


def decode_detections(q: np.ndarray, r: np.ndarray, score_thresh: float = 0.1, max_dets: int = 32) -> list[Detection]:
    """Peaks of the class heatmaps, ordered by score then (row, col, class)."""
    h, w, ncls = q.shape
    padded = np.full((h + 2, w + 2, ncls), -np.inf)
    padded[1:-1, 1:-1] = q
    is_peak = np.ones(q.shape, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            is_peak &= q >= padded[1 + di : 1 + di + h, 1 + dj : 1 + dj + w]
    is_peak &= q > score_thresh
    dets = []
    for i, j, c in zip(*np.nonzero(is_peak)):
        reg = r[i, j]
        dets.append(
            Detection(
                row=i + reg[0],
                col=j + reg[1],
                w=reg[2],
                l=reg[3],
                vr=reg[4],
                vc=reg[5],
                class_id=int(c),
                score=float(q[i, j, c]),
            )
        )
    dets.sort(key=lambda d: (-d.score, d.row, d.col, d.class_id))
    return dets[:max_dets]


def _interpolated_ap(is_tp: np.ndarray, num_gt: int) -> float:
    """11-point interpolation over the score-ranked PR curve."""
    if num_gt == 0:
        return 0.0
    tp = np.cumsum(is_tp)
    fp = np.cumsum(~is_tp)
    recall = tp / num_gt
    precision = tp / np.maximum(1, tp + fp)
    total = 0.0
    for level in np.linspace(0.0, 1.0, 11):
        mask = recall >= level - 1e-12
        total += precision[mask].max() if mask.any() else 0.0
    return float(total) / 11.0


def _match_class(preds, gts_per_frame, class_id, threshold):
    """Greedy nearest-unmatched matching; returns per-pred TP flags and
    the velocity errors of the matches."""
    matched = [np.zeros(len(gts), dtype=bool) for gts in gts_per_frame]
    is_tp = np.zeros(len(preds), dtype=bool)
    vel_errors = []
    for n, (fi, det) in enumerate(preds):
        best, best_d = -1, np.inf
        for gi, gt in enumerate(gts_per_frame[fi]):
            if gt.class_id != class_id or matched[fi][gi]:
                continue
            d = np.hypot(det.row - gt.row, det.col - gt.col)
            if d <= threshold and d < best_d:
                best, best_d = gi, d
        if best >= 0:
            matched[fi][best] = True
            is_tp[n] = True
            gt = gts_per_frame[fi][best]
            vel_errors.append(np.hypot(det.vr - gt.vr, det.vc - gt.vc))
    return is_tp, vel_errors


def evaluate(
    dets_per_frame: list[list[Detection]],
    gts_per_frame: list[list[TruthBox]],
    thresholds: tuple = DIST_THRESHOLDS,
) -> DetectionMetrics:
    if len(dets_per_frame) != len(gts_per_frame):
        raise ValueError("detections and ground truth must cover the same frames")
    classes = sorted({gt.class_id for gts in gts_per_frame for gt in gts})
    ap: dict = {}
    vel_errors: list[float] = []
    num_pred = sum(len(d) for d in dets_per_frame)
    num_gt = sum(len(g) for g in gts_per_frame)
    for class_id in classes:
        preds = [
            (fi, det)
            for fi, dets in enumerate(dets_per_frame)
            for det in dets
            if det.class_id == class_id
        ]
        preds.sort(key=lambda p: (-p[1].score, p[1].row, p[1].col))
        n_gt_cls = sum(1 for gts in gts_per_frame for gt in gts if gt.class_id == class_id)
        for threshold in thresholds:
            is_tp, verrs = _match_class(preds, gts_per_frame, class_id, threshold)
            ap[(class_id, threshold)] = _interpolated_ap(is_tp, n_gt_cls)
            if threshold == VELOCITY_MATCH_THRESHOLD:
                vel_errors.extend(verrs)
    mean_ap = float(np.mean(list(ap.values()))) if ap else 0.0
    vel = float(np.mean(vel_errors)) if vel_errors else float("nan")
    return DetectionMetrics(ap=ap, mean_ap=mean_ap, velocity_error=vel, num_gt=num_gt, num_pred=num_pred)


def alignment_error(q_t: np.ndarray, q_hat: np.ndarray) -> float:
    """Mean absolute heatmap gap; the convergence measure for the aligned history."""
    return float(np.mean(np.abs(q_t - q_hat)))
