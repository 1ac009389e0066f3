"""Calibrated pinhole cameras, feature-grid sampling, epipolar geometry and
linear triangulation.

All coordinates are float64. World units are millimetres, image units are
pixels. Rotations and translations map world points into the camera frame:
``x_cam = R @ X + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    BehindCameraError,
    ContractError,
    DegenerateRigError,
    IllConditionedError,
    InsufficientViewsError,
)

DEFAULT_M = 10.0
MIN_DEPTH = 1e-9


@dataclass(frozen=True, eq=False)
class CameraView:
    """A calibrated pinhole camera.

    Parameters
    ----------
    intrinsics : (3, 3) array
        Upper-triangular calibration matrix with positive focal entries.
    rotation : (3, 3) array
        Orthonormal world-to-camera rotation.
    translation : (3,) array
        World-to-camera translation in mm.
    image_size : (width, height)
    """

    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    image_size: tuple[int, int] = (640, 480)

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-9:
            raise ContractError("rotation is not orthonormal")
        if K[0, 0] <= 0 or K[1, 1] <= 0 or np.any(K[np.tril_indices(3, -1)] != 0):
            raise ContractError("intrinsics must be upper triangular with positive focal lengths")
        for name, arr in (("intrinsics", K), ("rotation", R), ("translation", t)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def projection_matrix(self) -> np.ndarray:
        return self.intrinsics @ np.hstack([self.rotation, self.translation[:, None]])

    @property
    def diagonal(self) -> float:
        w, h = self.image_size
        return float(np.hypot(w, h))

    @classmethod
    def look_at(cls, eye, target, focal, image_size=(640, 480), up=(0.0, 0.0, 1.0)):
        """Camera at ``eye`` whose optical axis points at ``target``."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(x) < 1e-12:
            raise ContractError("viewing direction parallel to up vector")
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        # re-orthonormalise so the 1e-9 invariant holds after float rounding
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        w, h = image_size
        K = np.array([[focal, 0.0, w / 2.0], [0.0, focal, h / 2.0], [0.0, 0.0, 1.0]])
        return cls(K, R, -R @ eye, image_size)

    def to_dict(self) -> dict:
        return {
            "intrinsics": self.intrinsics.tolist(),
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraView":
        return cls(np.array(d["intrinsics"]), np.array(d["rotation"]),
                   np.array(d["translation"]), tuple(d["image_size"]))


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """Dense C-channel feature map.

    ``values[i, j]`` is the feature of the grid node at pixel
    ``(j * stride, i * stride)``.
    """

    values: np.ndarray
    stride: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ContractError("feature grid values must be (height, width, channels)")
        if not np.all(np.isfinite(v)):
            raise ContractError("feature grid contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True, eq=False)
class EpipolarPair:
    """Fundamental matrix mapping pixels of view a to epipolar lines in view b.

    ``scale`` converts pixel distances into the dimensionless units used by
    the correspondence score (mean image diagonal of the two views).
    """

    fundamental: np.ndarray
    scale: float = 1.0
    _rank_tol: float = field(default=1e-6, repr=False)

    def __post_init__(self):
        F = np.asarray(self.fundamental, dtype=np.float64)
        s = np.linalg.svd(F, compute_uv=False)
        if s[-1] >= self._rank_tol * s[0]:
            raise ContractError("fundamental matrix is not rank 2")
        F.setflags(write=False)
        object.__setattr__(self, "fundamental", F)

    def transposed(self) -> "EpipolarPair":
        return EpipolarPair(self.fundamental.T.copy(), self.scale)


def project_points(camera: CameraView, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection without depth checks.

    Returns ``(pixels, depth)`` for an ``(N, 3)`` array; callers decide what to
    do with non-positive depths.
    """
    X = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = X @ camera.rotation.T + camera.translation
    depth = cam[:, 2]
    safe = np.where(np.abs(depth) < MIN_DEPTH, MIN_DEPTH, depth)
    img = cam @ camera.intrinsics.T
    return img[:, :2] / safe[:, None], depth


def project(camera: CameraView, point3d) -> np.ndarray:
    """Project a single world point to pixel coordinates."""
    uv, depth = project_points(camera, point3d)
    if depth[0] <= 0:
        raise BehindCameraError(f"point has non-positive camera depth {depth[0]:g}")
    return uv[0]


def sample_features(grid: FeatureGrid, points2d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear lookup of ``(N, 2)`` pixel queries.

    Returns ``(features, in_view)``; queries outside the node lattice give
    zero vectors and ``in_view = False``.
    """
    p = np.asarray(points2d, dtype=np.float64).reshape(-1, 2) / grid.stride
    x, y = p[:, 0], p[:, 1]
    inside = (x >= 0) & (y >= 0) & (x <= grid.width - 1) & (y <= grid.height - 1)
    inside &= np.isfinite(x) & np.isfinite(y)
    out = np.zeros((len(p), grid.channels))
    if not inside.any():
        return out, inside
    xi, yi = x[inside], y[inside]
    x0 = np.minimum(np.floor(xi).astype(int), max(grid.width - 2, 0))
    y0 = np.minimum(np.floor(yi).astype(int), max(grid.height - 2, 0))
    x1 = np.minimum(x0 + 1, grid.width - 1)
    y1 = np.minimum(y0 + 1, grid.height - 1)
    fx = (xi - x0)[:, None]
    fy = (yi - y0)[:, None]
    v = grid.values
    out[inside] = ((1 - fx) * (1 - fy) * v[y0, x0] + fx * (1 - fy) * v[y0, x1]
                   + (1 - fx) * fy * v[y1, x0] + fx * fy * v[y1, x1])
    return out, inside


def sample_feature(grid: FeatureGrid, point2d) -> tuple[np.ndarray, bool]:
    feats, inside = sample_features(grid, np.asarray(point2d, dtype=np.float64)[None])
    return feats[0], bool(inside[0])


def _skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def fundamental_matrix(a: CameraView, b: CameraView) -> EpipolarPair:
    """F with ``x_b^T F x_a = 0`` for corresponding homogeneous pixels."""
    baseline = np.linalg.norm(a.center - b.center)
    if baseline < 1e-9 * max(1.0, np.linalg.norm(a.center)):
        raise DegenerateRigError("camera centres coincide")
    R = b.rotation @ a.rotation.T
    t = b.translation - R @ a.translation
    E = _skew(t) @ R
    F = np.linalg.inv(b.intrinsics).T @ E @ np.linalg.inv(a.intrinsics)
    F = F / np.linalg.norm(F)
    return EpipolarPair(F, 0.5 * (a.diagonal + b.diagonal))


def _line_distance(lines, pts):
    num = np.abs(lines[:, 0] * pts[:, 0] + lines[:, 1] * pts[:, 1] + lines[:, 2])
    den = np.maximum(np.hypot(lines[:, 0], lines[:, 1]), 1e-300)
    return num / den


def symmetric_epipolar_distances(pair: EpipolarPair, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """Element-wise symmetric epipolar distance for ``(N, 2)`` pixel arrays,
    in image-diagonal units."""
    xa = np.asarray(xa, dtype=np.float64).reshape(-1, 2)
    xb = np.asarray(xb, dtype=np.float64).reshape(-1, 2)
    ha = np.hstack([xa, np.ones((len(xa), 1))])
    hb = np.hstack([xb, np.ones((len(xb), 1))])
    F = pair.fundamental
    d = 0.5 * (_line_distance(ha @ F.T, xb) + _line_distance(hb @ F, xa))
    return d / pair.scale


def symmetric_epipolar_distance(pair: EpipolarPair, xa, xb) -> float:
    return float(symmetric_epipolar_distances(pair, xa, xb)[0])


def correspondence_score(d, m: float = DEFAULT_M):
    """``exp(-m * d)``; accepts scalars or arrays of non-negative distances."""
    d_arr = np.asarray(d, dtype=np.float64)
    if np.any(d_arr < 0) or np.any(np.isnan(d_arr)):
        raise ContractError("epipolar distance must be non-negative")
    s = np.exp(-m * d_arr)
    return float(s) if s.ndim == 0 else s


def triangulate(observations: Sequence[tuple[CameraView, np.ndarray]],
                max_condition: float = 1e10) -> np.ndarray:
    """Homogeneous DLT triangulation from two or more (camera, pixel) pairs."""
    if len(observations) < 2:
        raise InsufficientViewsError("triangulation needs at least two observations")
    centers = np.array([cam.center for cam, _ in observations])
    if np.ptp(centers, axis=0).max() < 1e-9:
        raise DegenerateRigError("all observing cameras share one centre")
    # scale world coordinates to metres-ish magnitudes for conditioning
    scale = max(1.0, float(np.abs(centers).max()))
    S = np.diag([scale, scale, scale, 1.0])
    rows = []
    for cam, uv in observations:
        P = cam.projection_matrix @ S
        u, v = np.asarray(uv, dtype=np.float64)
        for r in (u * P[2] - P[0], v * P[2] - P[1]):
            rows.append(r / np.linalg.norm(r))
    A = np.array(rows)
    _, s, vt = np.linalg.svd(A)
    if s[2] <= 0 or s[0] / s[2] > max_condition:
        raise IllConditionedError("rays are nearly parallel")
    X = vt[-1]
    if abs(X[3]) < 1e-15:
        raise IllConditionedError("triangulated point at infinity")
    return X[:3] / X[3] * scale
