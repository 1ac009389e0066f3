"""Cross-view matching of 2D person-centre detections.

A match graph has one vertex per detection and one edge per pair of
detections in distinct views. :class:`MatchingGraph` scores edges with two
EdgeConv-E layers and an edge MLP; :func:`resolve_clusters` turns scores
into one-detection-per-view clusters, which are triangulated into coarse 3D
centres.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional, Sequence

import numpy as np
from sklearn.utils.validation import check_is_fitted

from .base import GraphEstimator, check_frame
from .errors import ContractError, GraphPoseError, InsufficientViewsError
from .geometry import (
    DEFAULT_M,
    correspondence_score,
    fundamental_matrix,
    sample_features,
    symmetric_epipolar_distances,
    triangulate,
)
from .nn import Dense, EdgeConv, EdgeReadout, GnnModel, Graph, bce, sigmoid
from .synth import Frame, Scene, render_detections, render_features


@dataclass(eq=False)
class MatchGraph:
    """Detections of all views as graph vertices.

    ``pairs`` lists undirected cross-view vertex pairs ``(i, j)`` with
    ``i < j``; ``s_corr`` holds one correspondence score per pair.
    """

    vertices: np.ndarray            # (V, 2) of (view, detection index)
    features: np.ndarray            # (V, C)
    centers2d: np.ndarray           # (V, 2)
    confidences: np.ndarray         # (V,)
    pairs: np.ndarray               # (E, 2)
    s_corr: np.ndarray              # (E,)
    identities: Optional[np.ndarray] = None

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def gnn_graph(self) -> Graph:
        """Directed graph with both orientations of every pair; edge ``k``
        and ``k + E`` are the two directions of ``pairs[k]``."""
        fwd = self.pairs
        edges = np.concatenate([fwd, fwd[:, ::-1]]).reshape(-1, 2)
        ef = np.concatenate([self.s_corr, self.s_corr])[:, None]
        return Graph(self.features, edges, ef)

    def edge_targets(self) -> np.ndarray:
        if self.identities is None:
            raise ContractError("match graph carries no identity labels")
        a, b = self.identities[self.pairs[:, 0]], self.identities[self.pairs[:, 1]]
        return ((a == b) & (a >= 0)).astype(np.float64)


def build_match_graph(detections: Sequence, grids: Sequence, cameras: Sequence,
                      m: float = DEFAULT_M) -> MatchGraph:
    """Assemble the cross-view match graph for one frame."""
    n_views = len(cameras)
    if n_views < 2:
        raise InsufficientViewsError("matching needs at least two views")
    if len(detections) != n_views or len(grids) != n_views:
        raise ContractError("detections, grids and cameras must align per view")
    verts, feats, pts, confs, ids = [], [], [], [], []
    for v, (det, grid) in enumerate(zip(detections, grids)):
        n = len(det.centers)
        if n == 0:
            continue
        f, _ = sample_features(grid, det.centers)
        verts.append(np.stack([np.full(n, v), np.arange(n)], axis=1))
        feats.append(f)
        pts.append(det.centers)
        confs.append(det.confidences)
        ids.append(det.identities)
    C = grids[0].channels
    if not verts:
        return MatchGraph(np.zeros((0, 2), int), np.zeros((0, C)), np.zeros((0, 2)), np.zeros(0),
                          np.zeros((0, 2), int), np.zeros(0), np.zeros(0, int))
    vertices = np.concatenate(verts)
    centers = np.concatenate(pts)
    pair_blocks, score_blocks = [], []
    view_index = vertices[:, 0]
    for va, vb in combinations(range(n_views), 2):
        ia = np.flatnonzero(view_index == va)
        ib = np.flatnonzero(view_index == vb)
        if len(ia) == 0 or len(ib) == 0:
            continue
        pair = fundamental_matrix(cameras[va], cameras[vb])
        A, B = np.meshgrid(ia, ib, indexing="ij")
        A, B = A.ravel(), B.ravel()
        d = symmetric_epipolar_distances(pair, centers[A], centers[B])
        pair_blocks.append(np.stack([A, B], axis=1))
        score_blocks.append(correspondence_score(d, m))
    pairs = np.concatenate(pair_blocks) if pair_blocks else np.zeros((0, 2), int)
    s_corr = np.concatenate(score_blocks) if score_blocks else np.zeros(0)
    return MatchGraph(vertices, np.concatenate(feats), centers, np.concatenate(confs),
                      pairs.astype(np.int64), np.asarray(s_corr, dtype=np.float64),
                      np.concatenate(ids))


def frame_match_graph(frame: Frame, m: float = DEFAULT_M) -> MatchGraph:
    return build_match_graph(frame.detections, frame.grids, frame.cameras, m)


@dataclass(eq=False)
class MatchResult:
    """Clusters of detections and their triangulated coarse centres.

    ``clusters`` holds vertex indices into the match graph;
    ``members`` gives the same clusters as ``(view, detection)`` tuples.
    ``center_clusters[i]`` is the cluster index behind ``coarse_centers[i]``.
    """

    clusters: list
    members: list
    coarse_centers: np.ndarray
    center_scores: np.ndarray
    center_clusters: list
    edge_scores: np.ndarray
    graph: Optional[MatchGraph] = field(default=None, repr=False)

    def to_records(self) -> list[dict]:
        recs = []
        for i, ci in enumerate(self.center_clusters):
            recs.append({
                "center_mm": self.coarse_centers[i].tolist(),
                "score": float(self.center_scores[i]),
                "members": [list(map(int, vm)) for vm in self.members[ci]],
            })
        return recs


def resolve_clusters(graph: MatchGraph, scores, cameras: Sequence, threshold: float = 0.5) -> MatchResult:
    """Greedy agglomeration of high-scoring edges under a one-detection-per-view
    constraint; clusters with two or more members are triangulated."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(scores) != len(graph.pairs):
        raise ContractError("one score per match-graph pair required")
    if np.any((scores < 0) | (scores > 1)):
        raise ContractError("scores must lie in [0, 1]")
    V = graph.n_vertices
    parent = list(range(V))
    views = [{int(graph.vertices[i, 0])} for i in range(V)]
    edge_sum = np.zeros(V)
    edge_cnt = np.zeros(V, dtype=int)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    # descending score; ties resolved by pair order for determinism
    order = np.lexsort((np.arange(len(scores)), -scores))
    for k in order:
        s = scores[k]
        if s < threshold:
            break
        a, b = find(int(graph.pairs[k, 0])), find(int(graph.pairs[k, 1]))
        if a == b:
            edge_sum[a] += s
            edge_cnt[a] += 1
            continue
        if views[a] & views[b]:
            continue
        lo, hi = min(a, b), max(a, b)
        parent[hi] = lo
        views[lo] |= views[hi]
        edge_sum[lo] += edge_sum[hi] + s
        edge_cnt[lo] += edge_cnt[hi] + 1
    roots: dict[int, list] = {}
    for i in range(V):
        roots.setdefault(find(i), []).append(i)
    clusters = [sorted(v) for _, v in sorted(roots.items())]
    members = [[tuple(int(x) for x in graph.vertices[i]) for i in c] for c in clusters]
    centers, cscores, cidx = [], [], []
    for ci, c in enumerate(clusters):
        if len(c) < 2:
            continue
        obs = [(cameras[int(graph.vertices[i, 0])], graph.centers2d[i]) for i in c]
        try:
            X = triangulate(obs)
        except GraphPoseError:
            continue
        root = find(c[0])
        centers.append(X)
        cscores.append(edge_sum[root] / max(edge_cnt[root], 1))
        cidx.append(ci)
    return MatchResult(clusters, members, np.array(centers).reshape(-1, 3), np.array(cscores),
                       cidx, scores, graph)


def ground_truth_scores(graph: MatchGraph) -> np.ndarray:
    return graph.edge_targets()


def _item_seed(*parts) -> int:
    return int(np.random.default_rng([int(p) for p in parts]).integers(2 ** 31 - 1))


class EpipolarMatcher:
    """Geometry-only matcher: edge score is the correspondence score."""

    def __init__(self, m: float = DEFAULT_M, threshold: float = 0.5):
        self.m = m
        self.threshold = threshold

    def fit(self, X=None, y=None):
        return self

    def predict_proba(self, frame: Frame):
        g = frame_match_graph(check_frame(frame), self.m)
        return g, g.s_corr.copy()

    def predict(self, frame: Frame) -> MatchResult:
        g, s = self.predict_proba(frame)
        return resolve_clusters(g, s, frame.cameras, self.threshold)


class GroundTruthMatcher:
    """Oracle matcher using detection identity labels."""

    def __init__(self, m: float = DEFAULT_M):
        self.m = m

    def fit(self, X=None, y=None):
        return self

    def predict_proba(self, frame: Frame):
        g = frame_match_graph(check_frame(frame), self.m)
        return g, ground_truth_scores(g)

    def predict(self, frame: Frame) -> MatchResult:
        g, s = self.predict_proba(frame)
        return resolve_clusters(g, s, frame.cameras, 0.5)


class MatchingGraph(GraphEstimator):
    """Learned cross-view matcher (two EdgeConv-E layers, two FC layers).

    Parameters
    ----------
    channels : int
        Visual feature width of the oracle grids.
    hidden : int
        Width of the EdgeConv-E and FC hidden layers.
    m : float
        Correspondence-score decay constant.
    threshold : float
        Minimum edge score accepted by the cluster resolver.
    draws_per_epoch : int
        Independently jittered detection sets drawn per scene and epoch.
    """

    def __init__(self, channels=32, hidden=64, m=DEFAULT_M, threshold=0.5, learning_rate=1e-4,
                 epochs=2, batch_size=1, draws_per_epoch=10, stride=8.0, random_state=0):
        self.channels = channels
        self.hidden = hidden
        self.m = m
        self.threshold = threshold
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.draws_per_epoch = draws_per_epoch
        self.stride = stride
        self.random_state = random_state

    def _build_models(self, rng):
        C, H = self.channels, self.hidden
        return {"model": GnnModel([
            EdgeConv(C, H, edge_dim=1, rng=rng),
            EdgeConv(H, H, edge_dim=1, rng=rng),
            EdgeReadout(),
            Dense(2 * H, H, relu=True, rng=rng),
            Dense(H, 1, relu=False, rng=rng),
        ])}

    def fit(self, X, y=None):
        """Train on scenes; detections are re-drawn with jitter every epoch."""
        return self._fit(X)

    def _prepare(self, scene: Scene, index: int, n_epochs: int) -> list:
        grids = render_features(scene, scene.seed, self.channels, self.stride)
        out = []
        for epoch in range(n_epochs):
            items = []
            for draw in range(self.draws_per_epoch):
                seed = _item_seed(scene.seed, epoch, draw, self.random_state, 11)
                dets = render_detections(scene, seed, training_mode=True)
                g = build_match_graph(dets, grids, scene.cameras, self.m)
                if len(g.pairs):
                    items.append((g.gnn_graph(), g.edge_targets()))
            out.append(items)
        return out

    def _batch_step(self, items, compute_grads=True):
        graphs = [g for g, _ in items]
        targets = np.concatenate([np.concatenate([t, t]) for _, t in items])[:, None]
        batch = Graph.batch(graphs)
        model = self.models_["model"]
        logits, cache = model.forward(batch)
        p = sigmoid(logits)
        loss, dp = bce(p, targets)
        acc = float(np.mean((p > 0.5) == (targets > 0.5)))
        grads = {}
        if compute_grads:
            g, _ = model.backward(cache, dp * p * (1 - p))
            grads = self._merge_grads({"model": g})
        return loss, grads, {"edge_accuracy": acc}

    def score_graph(self, graph: MatchGraph) -> np.ndarray:
        """Symmetric connectivity score per undirected pair."""
        check_is_fitted(self, "models_")
        if graph.features.shape[1] != self.channels:
            raise ContractError("feature width does not match the model")
        E = len(graph.pairs)
        if E == 0:
            return np.zeros(0)
        logits, _ = self.models_["model"].forward(graph.gnn_graph())
        p = sigmoid(logits[:, 0])
        return 0.5 * (p[:E] + p[E:])

    def predict_proba(self, frame: Frame):
        g = frame_match_graph(check_frame(frame), self.m)
        return g, self.score_graph(g)

    def predict(self, frame: Frame) -> MatchResult:
        g, s = self.predict_proba(frame)
        return resolve_clusters(g, s, frame.cameras, self.threshold)


def predict_connectivity(model: MatchingGraph, graph: MatchGraph) -> np.ndarray:
    return model.score_graph(graph)
