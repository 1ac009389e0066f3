"""Coarse-to-fine refinement of 3D person centres.

Each coarse centre from the matching stage seeds a ball-restricted lattice
search. Query points are scored by a per-query multi-view graph (one vertex
per camera) and the best point re-centres a smaller, finer lattice until the
pitch reaches the requested precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from sklearn.utils.validation import check_is_fitted

from .base import GraphEstimator, check_frame, check_points, normalize_coords
from .errors import ContractError, OutOfBoundsError
from .geometry import project_points, sample_features
from .mmg import MatchResult, _item_seed
from .nn import Dense, EdgeConv, GnnModel, Graph, MaxPoolGroups, Residual, l2, sigmoid
from .synth import Frame, Scene, render_detections, render_features

CONF_SIGMA_PX = 20.0


@dataclass(frozen=True)
class SearchSchedule:
    r0: float = 300.0
    tau0: float = 200.0
    gamma: float = 0.6
    gamma_prime: float = 0.25
    epsilon: float = 50.0

    def __post_init__(self):
        if not 0 < self.gamma < 1 or not 0 < self.gamma_prime < 1:
            raise ContractError("shrink factors must lie in (0, 1)")
        if not 0 < self.epsilon <= self.tau0:
            raise ContractError("need 0 < epsilon <= tau0")
        if self.r0 <= 0:
            raise ContractError("r0 must be positive")

    def steps(self) -> list[tuple[float, float]]:
        """``(pitch, radius)`` per iteration; the last pitch is <= epsilon."""
        out = []
        tau, r = self.tau0, self.r0
        while True:
            out.append((tau, r))
            if tau <= self.epsilon:
                return out
            tau, r = tau * self.gamma_prime, r * self.gamma

    def pitches(self) -> list[float]:
        return [p for p, _ in self.steps()]

    def radii(self) -> list[float]:
        return [r for _, r in self.steps()]


def ball_lattice(pitch: float, radius: float) -> np.ndarray:
    """Offsets ``pitch * (i, j, k)`` with norm <= radius, lexicographically sorted."""
    n = int(np.floor(radius / pitch + 1e-9))
    r = np.arange(-n, n + 1)
    I, J, K = np.meshgrid(r, r, r, indexing="ij")
    idx = np.stack([I.ravel(), J.ravel(), K.ravel()], axis=1)
    keep = np.sum(idx.astype(np.float64) ** 2, axis=1) * pitch ** 2 <= radius ** 2 * (1 + 1e-12)
    return idx[keep] * float(pitch)


def queries_per_proposal(schedule: SearchSchedule) -> int:
    return sum(len(ball_lattice(p, r)) for p, r in schedule.steps())


def center_confidence_target(points, gt_centers, sigma: float = 200.0) -> np.ndarray:
    """``max_j exp(-|X - X_j|^2 / (2 sigma^2))`` per point (0 with no persons)."""
    P = check_points(points)
    G = np.asarray(gt_centers, dtype=np.float64).reshape(-1, 3)
    if len(G) == 0:
        return np.zeros(len(P))
    d2 = np.sum((P[:, None, :] - G[None]) ** 2, axis=2)
    return np.exp(-d2.min(axis=1) / (2 * sigma ** 2))


# ---------------------------------------------------------------------------
# Query features
# ---------------------------------------------------------------------------


def detection_confidence(points2d: np.ndarray, detections, sigma_px: float = CONF_SIGMA_PX) -> np.ndarray:
    """Distance-decayed 2D centre confidence at pixel locations."""
    if len(detections.centers) == 0:
        return np.zeros(len(points2d))
    d2 = np.sum((points2d[:, None, :] - detections.centers[None]) ** 2, axis=2)
    return np.max(detections.confidences[None] * np.exp(-0.5 * d2 / sigma_px ** 2), axis=1)


def query_features(frame: Frame, points: np.ndarray) -> np.ndarray:
    """Per-view vertex features ``(Q, V, C + 4)``: visual features, unit-cube
    coordinates and 2D centre confidence. Out-of-view projections get zero
    visual features and zero confidence."""
    P = check_points(points)
    norm = normalize_coords(P, frame.bounds)
    out = []
    for cam, grid, det in zip(frame.cameras, frame.grids, frame.detections):
        uv, depth = project_points(cam, P)
        f, inside = sample_features(grid, uv)
        inside &= depth > 0
        f[~inside] = 0.0
        conf = np.where(inside, detection_confidence(uv, det), 0.0)
        out.append(np.hstack([f, norm, conf[:, None]]))
    return np.stack(out, axis=1)


def query_graph(features: np.ndarray) -> Graph:
    """Batch of fully connected per-query view graphs, pooled per query."""
    Q, V, F = features.shape
    a, b = np.meshgrid(np.arange(V), np.arange(V), indexing="ij")
    off = a != b
    local = np.stack([a[off], b[off]], axis=1)
    base = (np.arange(Q) * V)[:, None, None]
    edges = (local[None] + base).reshape(-1, 2)
    groups = np.repeat(np.arange(Q), V)
    return Graph(features.reshape(Q * V, F), edges, vertex_groups=groups)


# ---------------------------------------------------------------------------
# Coarse-to-fine search
# ---------------------------------------------------------------------------


@dataclass
class RefinedCenters:
    centers: np.ndarray
    confidences: np.ndarray
    query_count: int
    traces: list = field(default_factory=list, repr=False)

    def to_records(self) -> list[dict]:
        return [{"center_mm": c.tolist(), "confidence": float(s)}
                for c, s in zip(self.centers, self.confidences)]


def _lexicographic_argmax(points: np.ndarray, scores: np.ndarray) -> int:
    best = scores.max()
    cand = np.flatnonzero(scores == best)
    if len(cand) == 1:
        return int(cand[0])
    sub = points[cand]
    return int(cand[np.lexsort((sub[:, 2], sub[:, 1], sub[:, 0]))[0]])


def refine_center(scorer: Callable[[np.ndarray], np.ndarray], coarse, schedule: SearchSchedule,
                  bounds: Optional[np.ndarray] = None):
    """Iterative ball search around ``coarse``.

    ``scorer`` maps ``(N, 3)`` points to ``(N,)`` confidences. Lattice points
    are clipped into ``bounds`` so the query count depends only on the
    schedule. Returns ``(center, confidence, queries, trace)`` where the
    trace lists ``(point, score, iteration)`` rows.
    """
    x = np.asarray(coarse, dtype=np.float64).reshape(3)
    if bounds is not None and (np.any(x < bounds[0]) or np.any(x > bounds[1])):
        raise OutOfBoundsError("coarse centre outside scene bounds")
    queries = 0
    trace = []
    conf = 0.0
    for it, (pitch, radius) in enumerate(schedule.steps()):
        pts = x + ball_lattice(pitch, radius)
        if bounds is not None:
            pts = np.clip(pts, bounds[0], bounds[1])
        s = np.asarray(scorer(pts), dtype=np.float64)
        queries += len(pts)
        trace.extend((p.tolist(), float(v), it) for p, v in zip(pts, s))
        k = _lexicographic_argmax(pts, s)
        x, conf = pts[k].copy(), float(s[k])
    return x, conf, queries, trace


def deduplicate(centers: np.ndarray, confidences: np.ndarray, radius: float,
                threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Greedy non-maximum suppression by confidence, then thresholding."""
    order = np.lexsort((np.arange(len(confidences)), -confidences))
    kept: list[int] = []
    for i in order:
        if confidences[i] < threshold:
            continue
        if all(np.linalg.norm(centers[i] - centers[j]) >= radius for j in kept):
            kept.append(int(i))
    return centers[kept].reshape(-1, 3), confidences[kept]


# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------


class _PointScorer(GraphEstimator):
    """Shared training and search logic for point-wise centre scorers."""

    def _prepare(self, scene: Scene, index: int, n_epochs: int) -> list:
        grids = render_features(scene, scene.seed, self.channels, self.stride)
        rng = np.random.default_rng([scene.seed, self.random_state, 21])
        gt = scene.centers
        lo, hi = scene.bounds
        n_pos = int(round(self.samples_per_draw * self.pos_neg_ratio / (self.pos_neg_ratio + 1)))
        n_neg = self.samples_per_draw - n_pos
        out = []
        for epoch in range(n_epochs):
            dets = render_detections(scene, _item_seed(scene.seed, epoch, self.random_state, 22))
            frame = Frame(scene.cameras, tuple(grids), tuple(dets), scene.bounds)
            items = []
            for _ in range(self.draws_per_epoch):
                who = rng.integers(len(gt), size=n_pos)
                pos = gt[who] + rng.normal(0.0, self.pos_sigma, size=(n_pos, 3))
                neg = rng.uniform(lo, hi, size=(n_neg, 3))
                pts = np.clip(np.vstack([pos, neg]), lo, hi)
                target = center_confidence_target(pts, gt, self.target_sigma)
                items.append((query_features(frame, pts), target))
            out.append(items)
        return out

    def _batch_step(self, items, compute_grads=True):
        feats = np.concatenate([f for f, _ in items])
        target = np.concatenate([t for _, t in items])[:, None]
        logits, backward = self._forward(feats)
        p = sigmoid(logits)
        loss, dp = l2(p, target)
        grads = backward(dp * p * (1 - p)) if compute_grads else {}
        return loss, grads, {"mae": float(np.mean(np.abs(p - target)))}

    def score_points(self, frame: Frame, points) -> np.ndarray:
        """Centre confidence for each of ``(N, 3)`` points (must lie in bounds)."""
        check_is_fitted(self, "models_")
        frame = check_frame(frame)
        P = check_points(points)
        lo, hi = frame.bounds
        if np.any(P < lo) or np.any(P > hi):
            raise OutOfBoundsError("query point outside scene bounds")
        out = np.empty(len(P))
        for start in range(0, len(P), 512):
            logits, _ = self._forward(query_features(frame, P[start:start + 512]), need_grad=False)
            out[start:start + 512] = sigmoid(logits[:, 0])
        return out

    def score_point(self, frame: Frame, point) -> float:
        return float(self.score_points(frame, np.asarray(point, dtype=np.float64)[None])[0])

    @property
    def schedule(self) -> SearchSchedule:
        return SearchSchedule(self.r0, self.tau0, self.gamma, self.gamma_prime, self.epsilon)

    def refine(self, frame: Frame, coarse):
        return refine_center(lambda p: self.score_points(frame, p), coarse, self.schedule, frame.bounds)

    def predict(self, frame: Frame, match_result: MatchResult) -> RefinedCenters:
        """Refine every coarse centre, then suppress duplicates."""
        frame = check_frame(frame)
        coarse = match_result.coarse_centers if isinstance(match_result, MatchResult) else \
            np.asarray(match_result, dtype=np.float64).reshape(-1, 3)
        lo, hi = frame.bounds
        centers, confs, traces = [], [], []
        total = 0
        for c in coarse:
            x, s, q, tr = self.refine(frame, np.clip(c, lo, hi))
            centers.append(x)
            confs.append(s)
            traces.append(tr)
            total += q
        centers = np.array(centers).reshape(-1, 3)
        confs = np.array(confs)
        kept_c, kept_s = deduplicate(centers, confs, self.dedupe_radius, self.accept_threshold)
        return RefinedCenters(kept_c, kept_s, total, traces)


class CenterRefinementGraph(_PointScorer):
    """Graph-based point scorer: three EdgeConv layers over the views of a
    query, max-pooling across views, and a two-layer FC head.

    Parameters
    ----------
    channels : int
        Visual feature width.
    hidden : int
        EdgeConv width.
    coord_width : int
        Width of the learned embedding of the normalised 3D coordinates.
    samples_per_draw, draws_per_epoch : int
        Training points per chunk and chunks per scene per epoch.
    pos_sigma, target_sigma : float
        Spread (mm) of positive samples and of the target confidence field.
    pos_neg_ratio : float
        Positive to negative sample ratio.
    """

    def __init__(self, channels=32, hidden=64, coord_width=16, learning_rate=1e-4, epochs=4,
                 batch_size=1, samples_per_draw=64, draws_per_epoch=8, pos_sigma=400.0,
                 target_sigma=200.0, pos_neg_ratio=4.0, r0=300.0, tau0=200.0, gamma=0.6,
                 gamma_prime=0.25, epsilon=50.0, dedupe_radius=500.0, accept_threshold=0.3,
                 stride=8.0, random_state=0):
        self.channels = channels
        self.hidden = hidden
        self.coord_width = coord_width
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.samples_per_draw = samples_per_draw
        self.draws_per_epoch = draws_per_epoch
        self.pos_sigma = pos_sigma
        self.target_sigma = target_sigma
        self.pos_neg_ratio = pos_neg_ratio
        self.r0 = r0
        self.tau0 = tau0
        self.gamma = gamma
        self.gamma_prime = gamma_prime
        self.epsilon = epsilon
        self.dedupe_radius = dedupe_radius
        self.accept_threshold = accept_threshold
        self.stride = stride
        self.random_state = random_state

    def _build_models(self, rng):
        C, H, W = self.channels, self.hidden, self.coord_width
        width = C + W + 1
        return {"model": GnnModel([
            Dense(C + 4, width, relu=True, rng=rng, blocks=[(C, C), (3, W), (1, 1)]),
            EdgeConv(width, H, rng=rng),
            Residual(EdgeConv(H, H, rng=rng)),
            Residual(EdgeConv(H, H, rng=rng)),
            MaxPoolGroups(),
            Dense(H, H, rng=rng),
            Dense(H, 1, relu=False, rng=rng),
        ])}

    def fit(self, X, y=None):
        return self._fit(X)

    def _forward(self, feats, need_grad=True):
        model = self.models_["model"]
        logits, cache = model.forward(query_graph(feats))

        def backward(dlogits):
            g, _ = model.backward(cache, dlogits)
            return self._merge_grads({"model": g})

        return logits, backward


class MLPBaseline(_PointScorer):
    """Concatenate per-view point features in a fixed view order and score
    them with an MLP; tied to the camera count it was trained with."""

    def __init__(self, channels=32, hidden=96, learning_rate=1e-4, epochs=4, batch_size=1,
                 samples_per_draw=64, draws_per_epoch=8, pos_sigma=400.0, target_sigma=200.0,
                 pos_neg_ratio=4.0, r0=300.0, tau0=200.0, gamma=0.6, gamma_prime=0.25,
                 epsilon=50.0, dedupe_radius=500.0, accept_threshold=0.3, n_views=5, stride=8.0,
                 random_state=0):
        self.channels = channels
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.samples_per_draw = samples_per_draw
        self.draws_per_epoch = draws_per_epoch
        self.pos_sigma = pos_sigma
        self.target_sigma = target_sigma
        self.pos_neg_ratio = pos_neg_ratio
        self.r0 = r0
        self.tau0 = tau0
        self.gamma = gamma
        self.gamma_prime = gamma_prime
        self.epsilon = epsilon
        self.dedupe_radius = dedupe_radius
        self.accept_threshold = accept_threshold
        self.n_views = n_views
        self.stride = stride
        self.random_state = random_state

    def _build_models(self, rng):
        D = self.n_views * (self.channels + 4)
        H = self.hidden
        return {"model": GnnModel([
            Dense(D, H, rng=rng),
            Dense(H, H, rng=rng),
            Dense(H, 1, relu=False, rng=rng),
        ])}

    def fit(self, X, y=None):
        views = {s.n_views for s in X}
        if views != {self.n_views}:
            raise ContractError(f"MLP baseline built for {self.n_views} views, scenes have {sorted(views)}")
        return self._fit(X)

    def _forward(self, feats, need_grad=True):
        Q, V, F = feats.shape
        if V != self.n_views:
            raise ContractError(f"MLP baseline expects {self.n_views} views, got {V}")
        model = self.models_["model"]
        flat = feats.reshape(Q, V * F)
        logits, cache = model.forward(Graph(flat), flat)

        def backward(dlogits):
            g, _ = model.backward(cache, dlogits)
            return self._merge_grads({"model": g})

        return logits, backward


def score_point(model: _PointScorer, point, frame: Frame) -> float:
    return model.score_point(frame, point)


def mlp_baseline_score(model: MLPBaseline, point, frame: Frame) -> float:
    return model.score_point(frame, point)


def detect_centers(model: _PointScorer, match_result: MatchResult, frame: Frame) -> RefinedCenters:
    return model.predict(frame, match_result)
