"""Per-person 3D pose refinement on a multi-view pose graph.

The initial pose is projected into every view. Each (view, joint) pair is a
vertex; skeleton edges connect joints within a view and same-type edges
connect a joint across views. After two edge-attributed EdgeConv layers the
views are max-pooled per joint, three more graph layers run on the skeleton,
and two heads predict a 3D offset and a confidence per joint.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from sklearn.utils.validation import check_is_fitted

from .base import GraphEstimator, check_frame, normalize_coords
from .errors import ContractError
from .geometry import project_points, sample_features
from .mmg import _item_seed
from .nn import Dense, EdgeConv, GnnModel, Graph, MaxPoolGroups, Residual, l1, l2, sigmoid
from .synth import (BONES, CENTER_JOINT, N_JOINTS, Frame, Scene, _TEMPLATE, initial_pose,
                    render_features)

OFFSET_UNIT_MM = 100.0
SINGLE_VIEW, CROSS_VIEW = 0, 1


@dataclass
class PoseGraph:
    """Two-stage pose graph of one person.

    ``features`` rows follow ``vertices`` (``(view, joint)`` pairs);
    ``edges`` are undirected pairs and ``edge_types`` their type code.
    """

    vertices: np.ndarray
    features: np.ndarray
    edges: np.ndarray
    edge_types: np.ndarray
    bones: np.ndarray
    n_joints: int

    @property
    def n_views(self) -> int:
        return len(self.vertices) // self.n_joints

    def gnn_graph(self, post_pool_edge_dim: int = 1) -> Graph:
        both = np.vstack([self.edges, self.edges[:, ::-1]]) if len(self.edges) else self.edges
        types = np.concatenate([self.edge_types, self.edge_types])
        onehot = np.eye(2)[types].reshape(-1, 2)
        b = np.vstack([self.bones, self.bones[:, ::-1]])
        coarse_ef = np.ones((len(b), post_pool_edge_dim)) if post_pool_edge_dim else None
        coarse = Graph(np.zeros((self.n_joints, 0)), b, coarse_ef)
        return Graph(self.features, both, onehot, self.vertices[:, 1], coarse)


@dataclass
class RefinedPose:
    joints: np.ndarray
    offsets: np.ndarray
    joint_confidences: np.ndarray

    def to_record(self, person_id: int) -> dict:
        return {"person": int(person_id), "joints": self.joints.tolist(),
                "confidences": self.joint_confidences.tolist()}


def _view_order(cameras) -> list[int]:
    # canonical order makes the graph independent of how views are listed
    centers = np.array([c.center for c in cameras]).reshape(-1, 3)
    return list(np.lexsort(centers.T[::-1]))


def build_pose_graph(initial, views: Sequence, grids: Sequence, skeleton=BONES,
                     bounds=None) -> PoseGraph:
    """Project ``initial`` (K, 3) into each view and assemble the pose graph.

    Vertex features are ``concat(visual, one-hot joint, unit-cube coords)``;
    joints outside an image or behind its camera get zero visual features.
    """
    X = np.asarray(initial, dtype=np.float64)
    bones = np.asarray(skeleton, dtype=np.int64).reshape(-1, 2)
    if X.ndim != 2 or X.shape[1] != 3:
        raise ContractError("initial pose must be (K, 3)")
    K = len(X)
    if len(bones) and bones.max() >= K:
        raise ContractError("skeleton refers to joints beyond the initial pose")
    if len(views) != len(grids):
        raise ContractError("one feature grid per view required")
    if not len(views):
        raise ContractError("need at least one view")
    if bounds is None:
        bounds = np.array([X.min(axis=0) - 1.0, X.max(axis=0) + 1.0])
    norm = normalize_coords(X, np.asarray(bounds, dtype=np.float64))
    onehot = np.eye(K)
    feats = []
    for v in _view_order(views):
        uv, depth = project_points(views[v], X)
        f, inside = sample_features(grids[v], uv)
        f[~(inside & (depth > 0))] = 0.0
        feats.append(np.hstack([f, onehot, norm]))
    V = len(views)
    vertices = np.stack(np.meshgrid(np.arange(V), np.arange(K), indexing="ij"), -1).reshape(-1, 2)
    single = np.concatenate([bones + v * K for v in range(V)]) if len(bones) else np.zeros((0, 2), int)
    iu, ju = np.triu_indices(V, 1)
    cross = np.stack([(iu[:, None] * K + np.arange(K)).ravel(),
                      (ju[:, None] * K + np.arange(K)).ravel()], axis=1)
    edges = np.vstack([single, cross]).astype(np.int64)
    types = np.concatenate([np.full(len(single), SINGLE_VIEW), np.full(len(cross), CROSS_VIEW)])
    return PoseGraph(vertices, np.vstack(feats), edges, types, bones, K)


def offset_confidence_target(offsets, scale: float = 100.0) -> np.ndarray:
    """``exp(-|offset|^2 / (2 scale^2))`` per joint."""
    d2 = np.sum(np.asarray(offsets, dtype=np.float64) ** 2, axis=-1)
    return np.exp(-0.5 * d2 / scale ** 2)


class PoseRegressionGraph(GraphEstimator):
    """Learned per-joint offset regressor.

    Parameters
    ----------
    post_pool_edge_features : bool
        True runs the three post-pool layers as edge-attributed EdgeConv with a
        constant bone feature; False uses plain EdgeConv.
    train_sigma : (float, float)
        Range of per-joint Gaussian noise (mm) applied to ground truth to
        build training initial poses.
    train_shift_mm : float
        Standard deviation of an extra whole-pose translation during training.
    confidence_scale : float
        Offset magnitude (mm) at which the confidence target decays to e^-0.5.
    """

    _model_names = ("trunk", "offset", "confidence")

    def __init__(self, channels=32, hidden=64, coord_width=16, learning_rate=5e-5, epochs=4,
                 batch_size=1, draws_per_epoch=8, train_sigma=(10.0, 50.0), train_shift_mm=20.0,
                 confidence_scale=100.0, confidence_weight=1.0, post_pool_edge_features=True,
                 stride=8.0, random_state=0):
        self.channels = channels
        self.hidden = hidden
        self.coord_width = coord_width
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.draws_per_epoch = draws_per_epoch
        self.train_sigma = train_sigma
        self.train_shift_mm = train_shift_mm
        self.confidence_scale = confidence_scale
        self.confidence_weight = confidence_weight
        self.post_pool_edge_features = post_pool_edge_features
        self.stride = stride
        self.random_state = random_state

    @property
    def _post_edge_dim(self) -> int:
        return 1 if self.post_pool_edge_features else 0

    def _build_models(self, rng):
        C, H, W, K = self.channels, self.hidden, self.coord_width, N_JOINTS
        e = self._post_edge_dim
        width = C + K + W
        trunk = GnnModel([
            Dense(C + K + 3, width, relu=True, rng=rng, blocks=[(C, C), (K, K), (3, W)]),
            EdgeConv(width, H, edge_dim=2, rng=rng),
            Residual(EdgeConv(H, H, edge_dim=2, rng=rng)),
            MaxPoolGroups(),
            Residual(EdgeConv(H, H, edge_dim=e, rng=rng)),
            Residual(EdgeConv(H, H, edge_dim=e, rng=rng)),
            Residual(EdgeConv(H, H, edge_dim=e, rng=rng)),
        ])
        offset = GnnModel([Dense(H, H, rng=rng), Dense(H, 3, relu=False, rng=rng)])
        conf = GnnModel([Dense(H, H, rng=rng), Dense(H, 1, relu=False, rng=rng)])
        # start as the identity refinement
        offset.layers[-1].params["W"][:] = 0.0
        return {"trunk": trunk, "offset": offset, "confidence": conf}

    def fit(self, X, y=None):
        return self._fit(X)

    # --- training data ------------------------------------------------------------

    def _noisy_pose(self, gt, rng):
        lo, hi = self.train_sigma
        sigma = rng.uniform(lo, hi)
        return gt + rng.normal(0.0, sigma, size=gt.shape) + rng.normal(0.0, self.train_shift_mm, size=3)

    def _prepare(self, scene: Scene, index: int, n_epochs: int) -> list:
        grids = render_features(scene, scene.seed, self.channels, self.stride)
        rng = np.random.default_rng([scene.seed, self.random_state, 31])
        out = []
        for _ in range(n_epochs):
            items = []
            for _ in range(self.draws_per_epoch):
                graphs, targets = [], []
                for person in scene.persons:
                    init = self._noisy_pose(person.joints, rng)
                    pg = build_pose_graph(init, scene.cameras, grids, BONES, scene.bounds)
                    graphs.append(pg.gnn_graph(self._post_edge_dim))
                    targets.append(person.joints - init)
                items.append((graphs, targets))
            out.append(items)
        return out

    # --- forward / backward -------------------------------------------------------

    def _forward(self, graph: Graph):
        trunk, head_o, head_c = (self.models_[k] for k in self._model_names)
        h, c_trunk = trunk.forward(graph)
        coarse = graph.coarse
        off, c_off = head_o.forward(coarse, h)
        logit, c_conf = head_c.forward(coarse, h)

        def backward(d_off, d_logit):
            g_o, dh_o = head_o.backward(c_off, d_off)
            g_c, dh_c = head_c.backward(c_conf, d_logit)
            g_t, _ = trunk.backward(c_trunk, dh_o + dh_c)
            return self._merge_grads({"trunk": g_t, "offset": g_o, "confidence": g_c})

        return off * OFFSET_UNIT_MM, sigmoid(logit[:, 0]), backward

    def _batch_step(self, items, compute_grads=True):
        graphs = [g for gs, _ in items for g in gs]
        target = np.concatenate([t for _, ts in items for t in ts])
        off, conf, backward = self._forward(Graph.batch(graphs))
        loss_o, d_off = l1(off / OFFSET_UNIT_MM, target / OFFSET_UNIT_MM)
        conf_t = offset_confidence_target(target, self.confidence_scale)
        loss_c, d_conf = l2(conf, conf_t)
        loss = loss_o + self.confidence_weight * loss_c
        grads = {}
        if compute_grads:
            d_logit = (self.confidence_weight * d_conf * conf * (1 - conf))[:, None]
            grads = backward(d_off, d_logit)
        K = N_JOINTS
        before = np.linalg.norm(target, axis=1).reshape(-1, K).mean(axis=1)
        after = np.linalg.norm(target - off, axis=1).reshape(-1, K).mean(axis=1)
        return loss, grads, {"mpjpe_before": float(before.mean()), "mpjpe_after": float(after.mean())}

    # --- inference ----------------------------------------------------------------

    def refine_pose(self, initial, views, grids, skeleton=BONES, bounds=None) -> RefinedPose:
        check_is_fitted(self, "models_")
        X = np.asarray(initial, dtype=np.float64)
        if X.shape != (N_JOINTS, 3):
            raise ContractError(f"initial pose must be ({N_JOINTS}, 3), got {X.shape}")
        if len(grids) and grids[0].values.shape[2] != self.channels:
            raise ContractError("feature width does not match the model")
        pg = build_pose_graph(X, views, grids, skeleton, bounds)
        off, conf, _ = self._forward(pg.gnn_graph(self._post_edge_dim))
        joints = X + off
        # stored as the realised difference so joints - initial == offsets bit-exactly
        return RefinedPose(joints, joints - X, conf)

    def predict(self, frame: Frame, initial_poses) -> list[RefinedPose]:
        frame = check_frame(frame)
        return [self.refine_pose(p, frame.cameras, frame.grids, BONES, frame.bounds)
                for p in initial_poses]


def refine_pose(model: PoseRegressionGraph, initial, views, grids, skeleton=BONES,
                bounds=None) -> RefinedPose:
    return model.refine_pose(initial, views, grids, skeleton, bounds)


def train_prg(model: PoseRegressionGraph, scenes, epochs: Optional[int] = None):
    """Fit ``model`` on ``scenes``; returns ``(model, history)``."""
    if epochs is not None:
        model.set_params(epochs=epochs)
    model.fit(scenes)
    return model, model.history_


def initial_poses_for_centers(scene: Scene, centers, seed: int, sigma_mm: Optional[float] = None,
                              match_radius: float = 500.0) -> np.ndarray:
    """Initial poses for detected centres.

    A centre within ``match_radius`` of a person takes that person's noisy
    pose, translated so its centre joint sits at the detection; other centres
    get the template skeleton placed at the detection.
    """
    C = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    gt = scene.centers
    out = []
    for i, c in enumerate(C):
        d = np.linalg.norm(gt - c, axis=1) if len(gt) else np.array([np.inf])
        j = int(np.argmin(d))
        if d[j] <= match_radius:
            pose = initial_pose(scene, j, _item_seed(seed, i), sigma_mm)
            out.append(pose - pose[CENTER_JOINT] + c)
        else:
            out.append(_TEMPLATE - _TEMPLATE[CENTER_JOINT] + c)
    return np.array(out).reshape(-1, N_JOINTS, 3)
