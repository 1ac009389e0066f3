"""Pose and matching metrics: MPJPE, AP/AR over MPJPE thresholds, PCP3D and
pairwise matching F1."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError

THRESHOLDS_MM = (25.0, 50.0, 75.0, 100.0, 125.0, 150.0)
MPJPE_MATCH_MM = 500.0
PCP_ALPHA = 0.5


def mpjpe(pred, gt) -> float:
    """Mean Euclidean joint error in mm, no alignment."""
    p = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if p.shape != g.shape:
        raise ContractError(f"joint count mismatch: {len(p)} vs {len(g)}")
    return float(np.mean(np.linalg.norm(p - g, axis=1)))


def _pairwise_mpjpe(preds, gts) -> np.ndarray:
    if len(preds) == 0 or len(gts) == 0:
        return np.zeros((len(preds), len(gts)))
    P = np.asarray(preds, dtype=np.float64)
    G = np.asarray(gts, dtype=np.float64)
    if P.shape[1:] != G.shape[1:]:
        raise ContractError("prediction and ground-truth skeletons differ")
    return np.linalg.norm(P[:, None] - G[None], axis=-1).mean(axis=-1)


def assign(preds, scores, gts):
    """Greedy one-to-one assignment in descending score order.

    Each prediction takes the nearest still-unassigned ground truth; ties in
    score keep input order. Returns ``(order, gt_index, error)`` where
    ``gt_index`` is -1 when no ground truth was left.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(scores) != len(preds):
        raise ContractError("one score per prediction required")
    order = np.lexsort((np.arange(len(scores)), -scores))
    D = _pairwise_mpjpe(preds, gts)
    free = np.ones(len(gts), dtype=bool)
    gt_idx = np.full(len(order), -1)
    err = np.full(len(order), np.inf)
    for r, i in enumerate(order):
        if not free.any():
            break
        d = np.where(free, D[i], np.inf)
        j = int(np.argmin(d))
        free[j] = False
        gt_idx[r], err[r] = j, d[j]
    return order, gt_idx, err


def _ap_from_hits(hits: np.ndarray, n_gt: int) -> tuple[float, float]:
    if n_gt == 0 or len(hits) == 0:
        return 0.0, 0.0
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # all-point interpolation: precision envelope, summed over recall steps
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    r_prev = np.concatenate([[0.0], recall[:-1]])
    ap = float(np.sum((recall - r_prev) * envelope))
    return ap, float(recall[-1])


def match_and_score(preds, scores, gts, threshold: float):
    """``(AP, AR, mean MPJPE of true positives)`` at one MPJPE threshold."""
    _, gt_idx, err = assign(preds, scores, gts)
    hits = (gt_idx >= 0) & (err <= threshold)
    ap, ar = _ap_from_hits(hits, len(gts))
    mp = float(np.mean(err[hits])) if hits.any() else float("nan")
    return ap, ar, mp


@dataclass
class PoseScores:
    ap: dict
    ar: dict
    mAP: float
    mAR: float
    mpjpe: float
    n_pred: int
    n_gt: int


def pose_scores(preds, scores, gts, thresholds=THRESHOLDS_MM, mpjpe_match=MPJPE_MATCH_MM) -> PoseScores:
    """Per-threshold AP/AR, their means, and MPJPE over assignments within
    ``mpjpe_match`` mm."""
    _, gt_idx, err = assign(preds, scores, gts)
    ap, ar = {}, {}
    for t in thresholds:
        a, r = _ap_from_hits((gt_idx >= 0) & (err <= t), len(gts))
        ap[float(t)], ar[float(t)] = a, r
    within = (gt_idx >= 0) & (err <= mpjpe_match)
    return PoseScores(
        ap, ar,
        float(np.mean([ap[float(t)] for t in thresholds])),
        float(np.mean([ar[float(t)] for t in thresholds])),
        float(np.mean(err[within])) if within.any() else float("nan"),
        len(preds), len(gts),
    )


def pr_curve(preds, scores, gts, threshold: float) -> np.ndarray:
    """Rows of ``(rank, score, precision, recall)`` for CSV export."""
    order, gt_idx, err = assign(preds, scores, gts)
    hits = (gt_idx >= 0) & (err <= threshold)
    if len(hits) == 0:
        return np.zeros((0, 4))
    tp = np.cumsum(hits)
    prec = tp / np.arange(1, len(hits) + 1)
    rec = tp / max(len(gts), 1)
    s = np.asarray(scores, dtype=np.float64)[order]
    return np.stack([np.arange(1, len(hits) + 1), s, prec, rec], axis=1)


def pcp3d(pred, gt, bones: Sequence, alpha: float = PCP_ALPHA) -> float:
    """Fraction of bones whose two endpoints both lie within
    ``alpha * bone length`` of ground truth."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ContractError("skeleton shapes differ")
    b = np.asarray(bones, dtype=int)
    length = np.linalg.norm(g[b[:, 0]] - g[b[:, 1]], axis=1)
    ea = np.linalg.norm(p[b[:, 0]] - g[b[:, 0]], axis=1)
    eb = np.linalg.norm(p[b[:, 1]] - g[b[:, 1]], axis=1)
    return float(np.mean((ea <= alpha * length) & (eb <= alpha * length)))


def pcp3d_per_actor(preds, gts, bones, alpha: float = PCP_ALPHA) -> list[float]:
    """PCP3D of each ground-truth actor against its nearest prediction
    (0 when nothing was predicted)."""
    out = []
    D = _pairwise_mpjpe(preds, gts)
    for j in range(len(gts)):
        if len(preds) == 0:
            out.append(0.0)
            continue
        i = int(np.argmin(D[:, j]))
        out.append(pcp3d(preds[i], gts[j], bones, alpha))
    return out


def matching_f1(clusters: Sequence[Sequence[int]], identities) -> tuple[float, float, float]:
    """Pairwise precision/recall/F1 of same-cluster decisions against
    same-identity labels (negative identities never match).

    With no predicted pairs precision is reported as 1.
    """
    return f1_from_counts(*pair_counts(clusters, identities))


def pair_counts(clusters, identities) -> tuple[int, int, int]:
    """``(true positive, predicted, true)`` pair counts for pooling F1 over frames."""
    ids = np.asarray(identities)
    label = np.full(len(ids), -1)
    for ci, c in enumerate(clusters):
        label[list(c)] = ci
    iu, ju = np.triu_indices(len(ids), 1)
    same_true = (ids[iu] == ids[ju]) & (ids[iu] >= 0)
    same_pred = (label[iu] == label[ju]) & (label[iu] >= 0)
    return int(np.sum(same_true & same_pred)), int(same_pred.sum()), int(same_true.sum())


def f1_from_counts(tp: int, n_pred: int, n_true: int) -> tuple[float, float, float]:
    precision = tp / n_pred if n_pred else 1.0
    recall = tp / n_true if n_true else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def pooled_pose_scores(frames, thresholds=THRESHOLDS_MM, mpjpe_match=MPJPE_MATCH_MM) -> PoseScores:
    """Dataset-level AP/AR: each frame is assigned independently, then all
    predictions are ranked together by score (ties keep frame order)."""
    scores, gt_idx, errs, n_gt, n_pred = [], [], [], 0, 0
    for preds, s, gts in frames:
        order, gi, err = assign(preds, s, gts)
        scores.append(np.asarray(s, dtype=np.float64).reshape(-1)[order])
        gt_idx.append(gi)
        errs.append(err)
        n_gt += len(gts)
        n_pred += len(preds)
    if not frames:
        raise ContractError("need at least one frame")
    s = np.concatenate(scores)
    gi = np.concatenate(gt_idx)
    err = np.concatenate(errs)
    rank = np.argsort(-s, kind="stable")
    gi, err = gi[rank], err[rank]
    ap, ar = {}, {}
    for t in thresholds:
        a, r = _ap_from_hits((gi >= 0) & (err <= t), n_gt)
        ap[float(t)], ar[float(t)] = a, r
    within = (gi >= 0) & (err <= mpjpe_match)
    return PoseScores(
        ap, ar,
        float(np.mean([ap[float(t)] for t in thresholds])),
        float(np.mean([ar[float(t)] for t in thresholds])),
        float(np.mean(err[within])) if within.any() else float("nan"),
        n_pred, n_gt,
    )


def pooled_pr_curve(frames, threshold: float) -> np.ndarray:
    """Dataset-level ``(rank, score, precision, recall)`` rows."""
    scores, hits, n_gt = [], [], 0
    for preds, s, gts in frames:
        order, gi, err = assign(preds, s, gts)
        scores.append(np.asarray(s, dtype=np.float64).reshape(-1)[order])
        hits.append((gi >= 0) & (err <= threshold))
        n_gt += len(gts)
    s = np.concatenate(scores) if scores else np.zeros(0)
    h = np.concatenate(hits) if hits else np.zeros(0, bool)
    rank = np.argsort(-s, kind="stable")
    s, h = s[rank], h[rank]
    if len(h) == 0:
        return np.zeros((0, 4))
    tp = np.cumsum(h)
    return np.stack([np.arange(1, len(h) + 1), s, tp / np.arange(1, len(h) + 1),
                     tp / max(n_gt, 1)], axis=1)
