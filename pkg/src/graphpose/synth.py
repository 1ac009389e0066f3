"""Synthetic multi-camera scenes and the feature oracle.

The oracle replaces a pretrained 2D backbone: every view gets a dense
feature grid whose first half of channels carries a per-person identity
embedding (shared across views) and whose second half carries geometric
heat around projected person centres and joints.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ContractError, PlacementError
from .geometry import CameraView, FeatureGrid, project_points, triangulate

SCHEMA_VERSION = 1

JOINT_NAMES = (
    "neck", "nose", "mid_hip",
    "l_shoulder", "l_elbow", "l_wrist", "l_hip", "l_knee", "l_ankle",
    "r_shoulder", "r_elbow", "r_wrist", "r_hip", "r_knee", "r_ankle",
)
BONES = (
    (0, 1), (0, 2), (0, 3), (3, 4), (4, 5), (0, 9), (9, 10), (10, 11),
    (2, 6), (6, 7), (7, 8), (2, 12), (12, 13), (13, 14),
)
CENTER_JOINT = 2
N_JOINTS = len(JOINT_NAMES)

# standing pose, mid-hip at the origin; x to the person's left, z up
_TEMPLATE = np.array([
    [0, 0, 500], [0, 60, 650], [0, 0, 0],
    [180, 0, 480], [200, 0, 200], [210, 0, -50], [120, 0, 0], [125, 0, -430], [125, 0, -850],
    [-180, 0, 480], [-200, 0, 200], [-210, 0, -50], [-120, 0, 0], [-125, 0, -430], [-125, 0, -850],
], dtype=np.float64)
# (pivot, moving joints, max swing in degrees)
_LIMB_SWINGS = (
    (3, (4, 5), 70.0), (4, (5,), 60.0), (9, (10, 11), 70.0), (10, (11,), 60.0),
    (6, (7, 8), 25.0), (7, (8,), 25.0), (12, (13, 14), 25.0), (13, (14,), 25.0),
    (0, (1,), 20.0),
)
BONE_LENGTH_RANGE = (100.0, 600.0)
FOOT_CLEARANCE = 80.0


def _rotation(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream)])


@dataclass(frozen=True)
class Skeleton:
    joints: np.ndarray
    bones: tuple = BONES

    def __post_init__(self):
        j = np.asarray(self.joints, dtype=np.float64)
        if j.ndim != 2 or j.shape[1] != 3:
            raise ContractError("joints must be (K, 3)")
        object.__setattr__(self, "joints", j)
        object.__setattr__(self, "bones", tuple(tuple(int(i) for i in b) for b in self.bones))

    @property
    def center(self) -> np.ndarray:
        return self.joints[CENTER_JOINT]

    def bone_lengths(self) -> np.ndarray:
        b = np.array(self.bones)
        return np.linalg.norm(self.joints[b[:, 0]] - self.joints[b[:, 1]], axis=1)


def is_tree(bones, n_joints: int) -> bool:
    """True when ``bones`` connect all joints without cycles."""
    if len(bones) != n_joints - 1:
        return False
    parent = list(range(n_joints))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in bones:
        ra, rb = find(a), find(b)
        if ra == rb:
            return False
        parent[ra] = rb
    return True


@dataclass(frozen=True)
class NoiseConfig:
    """Detection and feature corruption knobs.

    ``center_jitter_px`` is the training-time augmentation magnitude;
    ``detection_noise_px`` is the Gaussian 2D localisation error applied
    outside training mode; ``occlusion_rate`` blanks a person's features in
    a view.
    """

    center_jitter_px: float = 25.0
    miss_rate: float = 0.0
    clutter_rate: float = 0.0
    feature_noise_sigma: float = 0.02
    initial_pose_sigma_mm: float = 30.0
    detection_noise_px: float = 4.0
    occlusion_rate: float = 0.0

    def __post_init__(self):
        for name in ("miss_rate", "clutter_rate", "occlusion_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1]")
        for name in ("center_jitter_px", "feature_noise_sigma", "initial_pose_sigma_mm",
                     "detection_noise_px"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")

    @classmethod
    def zero(cls) -> "NoiseConfig":
        return cls(center_jitter_px=0.0, feature_noise_sigma=0.0, initial_pose_sigma_mm=0.0,
                   detection_noise_px=0.0)


@dataclass(frozen=True)
class RigSpec:
    """Ring of cameras looking at a common target."""

    n_views: int = 5
    radius: float = 10000.0
    height: float = 3000.0
    target: tuple = (0.0, 0.0, 1000.0)
    focal: float = 500.0
    image_size: tuple = (640, 480)
    start_angle_deg: float = 15.0

    def build(self) -> list[CameraView]:
        if not 3 <= self.n_views <= 10:
            raise ContractError("rig must have between 3 and 10 cameras")
        cams = []
        for i in range(self.n_views):
            a = np.deg2rad(self.start_angle_deg) + 2 * np.pi * i / self.n_views
            eye = [self.radius * np.cos(a), self.radius * np.sin(a), self.height]
            cams.append(CameraView.look_at(eye, self.target, self.focal, self.image_size))
        return cams


DEFAULT_BOUNDS = np.array([[-4000.0, -4000.0, 0.0], [4000.0, 4000.0, 2000.0]])


@dataclass(frozen=True, eq=False)
class Scene:
    persons: tuple
    cameras: tuple
    bounds: np.ndarray = field(default_factory=lambda: DEFAULT_BOUNDS.copy())
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "persons", tuple(self.persons))
        object.__setattr__(self, "cameras", tuple(self.cameras))
        object.__setattr__(self, "bounds", np.asarray(self.bounds, dtype=np.float64).reshape(2, 3))
        if not 3 <= len(self.cameras) <= 10:
            raise ContractError("scene must have between 3 and 10 cameras")

    @property
    def centers(self) -> np.ndarray:
        return np.array([p.center for p in self.persons]).reshape(-1, 3)

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    def with_cameras(self, indices) -> "Scene":
        """Sub-rig view of the scene (used for view-count generalisation)."""
        return replace(self, cameras=tuple(self.cameras[i] for i in indices))

    def with_noise(self, noise: NoiseConfig) -> "Scene":
        return replace(self, noise=noise)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": int(self.seed),
            "bounds": self.bounds.tolist(),
            "noise": asdict(self.noise),
            "bones": [list(b) for b in (self.persons[0].bones if self.persons else BONES)],
            "cameras": [c.to_dict() for c in self.cameras],
            "persons": [p.joints.tolist() for p in self.persons],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ContractError(f"unsupported scene schema_version {d.get('schema_version')!r}")
        bones = tuple(tuple(b) for b in d["bones"])
        return cls(
            persons=tuple(Skeleton(np.array(j), bones) for j in d["persons"]),
            cameras=tuple(CameraView.from_dict(c) for c in d["cameras"]),
            bounds=np.array(d["bounds"]),
            noise=NoiseConfig(**d["noise"]),
            seed=int(d["seed"]),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "Scene":
        return cls.from_dict(json.loads(text))


def random_skeleton(rng: np.random.Generator) -> np.ndarray:
    """A randomly posed template skeleton with mid-hip at the origin."""
    joints = _TEMPLATE * rng.uniform(0.92, 1.08)
    for pivot, moving, max_deg in _LIMB_SWINGS:
        axis = rng.normal(size=3)
        R = _rotation(axis, np.deg2rad(rng.uniform(-max_deg, max_deg)))
        idx = list(moving)
        joints[idx] = (joints[idx] - joints[pivot]) @ R.T + joints[pivot]
    yaw = _rotation([0, 0, 1], rng.uniform(0, 2 * np.pi))
    return joints @ yaw.T


def generate_scene(seed: int, n_persons: int, rig_spec: Optional[RigSpec] = None,
                   bounds=None, noise: Optional[NoiseConfig] = None,
                   max_attempts: int = 2000, min_separation: float = 500.0) -> Scene:
    """Place ``n_persons`` random skeletons inside ``bounds`` and build a rig."""
    if n_persons < 1:
        raise ContractError("n_persons must be at least 1")
    rig_spec = rig_spec or RigSpec()
    bounds = DEFAULT_BOUNDS.copy() if bounds is None else np.asarray(bounds, dtype=np.float64)
    rng = _rng(seed, 0)
    persons: list[Skeleton] = []
    attempts = 0
    while len(persons) < n_persons:
        attempts += 1
        if attempts > max_attempts:
            raise PlacementError(f"could not place {n_persons} persons in bounds after {max_attempts} tries")
        local = random_skeleton(rng)
        hip_height = FOOT_CLEARANCE - local[:, 2].min()
        lo = bounds[0, :2] - local[:, :2].min(axis=0)
        hi = bounds[1, :2] - local[:, :2].max(axis=0)
        if np.any(lo >= hi):
            continue
        xy = rng.uniform(lo, hi)
        joints = local + np.array([xy[0], xy[1], hip_height])
        if np.any(joints < bounds[0]) or np.any(joints > bounds[1]):
            continue
        lengths = Skeleton(joints).bone_lengths()
        if lengths.min() < BONE_LENGTH_RANGE[0] or lengths.max() > BONE_LENGTH_RANGE[1]:
            continue
        c = joints[CENTER_JOINT]
        if any(np.linalg.norm(p.center - c) < min_separation for p in persons):
            continue
        persons.append(Skeleton(joints))
    return Scene(tuple(persons), tuple(rig_spec.build()), bounds, noise or NoiseConfig(), seed)


# ---------------------------------------------------------------------------
# Detections
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ViewDetections:
    """2D centre detections of one view; ``identities`` is -1 for clutter."""

    centers: np.ndarray
    confidences: np.ndarray
    identities: np.ndarray

    def __len__(self):
        return len(self.centers)


CONFIDENCE_SCALE_PX = 20.0


def _in_image(uv, depth, camera):
    w, h = camera.image_size
    return (depth > 0) & (uv[:, 0] >= 0) & (uv[:, 1] >= 0) & (uv[:, 0] <= w - 1) & (uv[:, 1] <= h - 1)


def render_detections(scene: Scene, seed: int, training_mode: bool = False) -> list[ViewDetections]:
    """Noisy 2D person-centre detections per view."""
    noise = scene.noise
    rng = _rng(seed, 1)
    centers3d = scene.centers
    out = []
    for cam in scene.cameras:
        uv, depth = project_points(cam, centers3d)
        visible = _in_image(uv, depth, cam)
        n = len(centers3d)
        if training_mode:
            mag = rng.uniform(0.0, noise.center_jitter_px, size=n)
            ang = rng.uniform(0.0, 2 * np.pi, size=n)
            err = np.stack([mag * np.cos(ang), mag * np.sin(ang)], axis=1)
        else:
            err = rng.normal(0.0, noise.detection_noise_px, size=(n, 2))
        keep = visible & (rng.random(n) >= noise.miss_rate)
        pts = uv + err
        conf = np.exp(-np.sum(err ** 2, axis=1) / (2 * CONFIDENCE_SCALE_PX ** 2))
        ids = np.arange(n)
        n_clutter = rng.poisson(noise.clutter_rate) if noise.clutter_rate > 0 else 0
        w, h = cam.image_size
        clutter = rng.uniform([0, 0], [w - 1, h - 1], size=(n_clutter, 2))
        clutter_conf = rng.uniform(0.2, 0.9, size=n_clutter)
        out.append(ViewDetections(
            np.concatenate([pts[keep], clutter]).reshape(-1, 2),
            np.concatenate([conf[keep], clutter_conf]),
            np.concatenate([ids[keep], -np.ones(n_clutter, dtype=np.int64)]).astype(np.int64),
        ))
    return out


# ---------------------------------------------------------------------------
# Feature oracle
# ---------------------------------------------------------------------------

IDENTITY_RADIUS_MM = 350.0
CENTER_HEAT_MM = 120.0
CENTER_DISP_MM = 400.0
JOINT_HEAT_MM = 50.0
JOINT_DISP_MM = 150.0
GROUP_HEAT_MM = 80.0
N_GEOMETRIC_FIXED = 8


def identity_embeddings(n_persons: int, dim: int, seed: int) -> np.ndarray:
    e = _rng(seed, 2).normal(size=(n_persons, dim))
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def _displacement_field(cam, nodes, targets_uv, targets_depth, norm_d2, radius_mm):
    """World-frame displacement (perpendicular to the ray) from each node to
    its nearest target, scaled by ``radius_mm`` and weighted by proximity."""
    nearest = np.argmin(norm_d2, axis=1)
    delta = targets_uv[nearest] - nodes
    z = targets_depth[nearest]
    f = cam.intrinsics[0, 0]
    cam_vec = np.hstack([delta * (z / f)[:, None], np.zeros((len(nodes), 1))])
    world = cam_vec @ cam.rotation
    w = np.exp(-0.5 * np.sum(world ** 2, axis=1) / radius_mm ** 2)
    return world / radius_mm * w[:, None]


def render_view_features(scene: Scene, view: int, embeddings: np.ndarray, channels: int,
                         stride: float, visible_persons: np.ndarray) -> np.ndarray:
    """Noise-free oracle grid of one view, shape (H, W, C)."""
    cam = scene.cameras[view]
    w, h = cam.image_size
    gw, gh = int(np.floor((w - 1) / stride)) + 1, int(np.floor((h - 1) / stride)) + 1
    gx, gy = np.meshgrid(np.arange(gw) * stride, np.arange(gh) * stride)
    nodes = np.stack([gx.ravel(), gy.ravel()], axis=1)
    n_id = channels // 2
    n_groups = channels - n_id - N_GEOMETRIC_FIXED
    out = np.zeros((len(nodes), channels))
    persons = [p for p, vis in zip(scene.persons, visible_persons) if vis]
    if not persons:
        return out.reshape(gh, gw, channels)
    f = cam.intrinsics[0, 0]
    emb = embeddings[visible_persons]

    joints = np.stack([p.joints for p in persons])        # (P, K, 3)
    P, K = joints.shape[:2]
    uv, depth = project_points(cam, joints.reshape(-1, 3))
    front = depth > 0
    uv = np.where(front[:, None], uv, 1e9)
    depth = np.where(front, depth, 1.0)
    uv = uv.reshape(P, K, 2)
    depth = depth.reshape(P, K)

    c_uv, c_depth = uv[:, CENTER_JOINT], depth[:, CENTER_JOINT]
    d2 = ((nodes[:, 0:1] - c_uv[None, :, 0]) ** 2 + (nodes[:, 1:2] - c_uv[None, :, 1]) ** 2)
    d2 *= ((c_depth / f) ** 2)[None]                                     # mm^2 at centre depth

    out[:, :n_id] = np.exp(-0.5 * d2 / IDENTITY_RADIUS_MM ** 2) @ emb
    g0 = n_id
    out[:, g0] = np.exp(-0.5 * d2.min(axis=1) / CENTER_HEAT_MM ** 2)
    out[:, g0 + 1:g0 + 4] = _displacement_field(cam, nodes, c_uv, c_depth, d2, CENTER_DISP_MM)

    j_uv = uv.reshape(-1, 2)
    j_depth = depth.reshape(-1)
    # squared node-joint distances expressed in mm at the joint's depth
    jd2 = ((nodes[:, 0:1] - j_uv[None, :, 0]) ** 2 + (nodes[:, 1:2] - j_uv[None, :, 1]) ** 2)
    jd2 *= ((j_depth / f) ** 2)[None]
    out[:, g0 + 4] = np.exp(-0.5 * jd2.min(axis=1) / JOINT_HEAT_MM ** 2)
    out[:, g0 + 5:g0 + 8] = _displacement_field(cam, nodes, j_uv, j_depth, jd2, JOINT_DISP_MM)
    if n_groups > 0:
        per_type = jd2.reshape(len(nodes), P, K).min(axis=1)
        joint_group = np.arange(K) % n_groups
        for g in range(n_groups):
            out[:, g0 + 8 + g] = np.exp(-0.5 * per_type[:, joint_group == g].min(axis=1) / GROUP_HEAT_MM ** 2)
    return out.reshape(gh, gw, channels)


def render_features(scene: Scene, seed: int, channels: int = 32, stride: float = 8.0) -> list[FeatureGrid]:
    """Per-view oracle feature grids for ``scene``."""
    if channels < 2 * N_GEOMETRIC_FIXED:
        raise ContractError(f"feature oracle needs at least {2 * N_GEOMETRIC_FIXED} channels")
    noise = scene.noise
    emb = identity_embeddings(len(scene.persons), channels // 2, seed)
    occ_rng = _rng(seed, 3)
    noise_rng = _rng(seed, 4)
    grids = []
    for v in range(scene.n_views):
        visible = occ_rng.random(len(scene.persons)) >= noise.occlusion_rate
        vals = render_view_features(scene, v, emb, channels, stride, visible)
        if noise.feature_noise_sigma > 0:
            vals = vals + noise_rng.normal(0.0, noise.feature_noise_sigma, size=vals.shape)
        grids.append(FeatureGrid(vals, stride))
    return grids


# ---------------------------------------------------------------------------
# Initial poses
# ---------------------------------------------------------------------------


def initial_pose(scene: Scene, person: int, seed: int, sigma_mm: Optional[float] = None,
                 mode: str = "noise", joint_noise_px: float = 0.0) -> np.ndarray:
    """Stand-in for a 3D pose regressor's output for ``person``.

    ``mode="noise"`` adds i.i.d. Gaussian noise to the ground truth;
    ``mode="triangulate"`` triangulates each joint from jittered projections.
    """
    if not 0 <= person < len(scene.persons):
        raise ContractError(f"person index {person} out of range")
    gt = scene.persons[person].joints
    rng = _rng(seed, 5 + 1000 * person)
    if mode == "noise":
        sigma = scene.noise.initial_pose_sigma_mm if sigma_mm is None else sigma_mm
        return gt + rng.normal(0.0, sigma, size=gt.shape)
    if mode == "triangulate":
        out = np.empty_like(gt)
        obs_per_view = []
        for cam in scene.cameras:
            uv, depth = project_points(cam, gt)
            uv = uv + rng.normal(0.0, joint_noise_px, size=uv.shape)
            obs_per_view.append((cam, uv, depth > 0))
        for k in range(len(gt)):
            obs = [(cam, uv[k]) for cam, uv, ok in obs_per_view if ok[k]]
            out[k] = triangulate(obs)
        return out
    raise ContractError(f"unknown initial pose mode {mode!r}")


# ---------------------------------------------------------------------------
# Frames: everything a module sees at inference time
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Frame:
    """Cameras, oracle features and detections of one multi-view frame."""

    cameras: tuple
    grids: tuple
    detections: tuple
    bounds: np.ndarray

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    def subset(self, indices) -> "Frame":
        idx = list(indices)
        return Frame(tuple(self.cameras[i] for i in idx), tuple(self.grids[i] for i in idx),
                     tuple(self.detections[i] for i in idx), self.bounds)


def make_frame(scene: Scene, seed: int, training_mode: bool = False, channels: int = 32,
               stride: float = 8.0) -> Frame:
    return Frame(tuple(scene.cameras), tuple(render_features(scene, seed, channels, stride)),
                 tuple(render_detections(scene, seed, training_mode)), scene.bounds)
