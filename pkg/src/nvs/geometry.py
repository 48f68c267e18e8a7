"""Camera models, rays, Plücker coordinates and the anchored coordinate frame.

Convention used everywhere in the package: right-handed world, cameras look
down their local +Z axis, image x points right and y points down, and pixel
``(u, v)`` has its center at ``(u + 0.5, v + 0.5)``. ``rotation`` and
``translation`` map world points into camera coordinates::

    x_cam = rotation @ x_world + translation
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import DegenerateAnchor, DegenerateRays

ORTHO_TOL = 1e-6
UNIT_TOL = 1e-9
MIN_EIGENVALUE = 1e-8


def _as_vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).reshape(3)
    return v


@dataclass(frozen=True)
class CameraPose:
    """Extrinsics and pinhole intrinsics of a single view."""

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = _as_vec3(self.translation)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if np.linalg.norm(R.T @ R - np.eye(3)) > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation must have determinant +1")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def optical_axis(self) -> np.ndarray:
        """Unit world-space direction of the camera's +Z axis."""
        return self.rotation[2].copy()

    @property
    def resolution(self) -> tuple[int, int]:
        return (self.width, self.height)

    def with_intrinsics(self, fx, fy, cx, cy, width, height) -> "CameraPose":
        return CameraPose(self.rotation, self.translation, fx, fy, cx, cy, width, height)

    def resized(self, width: int, height: int) -> "CameraPose":
        """Same camera with intrinsics rescaled to a new image size."""
        sx, sy = width / self.width, height / self.height
        return CameraPose(
            self.rotation, self.translation,
            self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height,
        )

    def to_dict(self) -> dict:
        return {
            "R": [float(v) for v in self.rotation.reshape(-1)],
            "t": [float(v) for v in self.translation],
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "w": int(self.width),
            "h": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(
            rotation=np.asarray(d["R"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(d["t"], dtype=np.float64),
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["w"]),
            height=int(d["h"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "CameraPose":
        return cls.from_dict(json.loads(s))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = _as_vec3(self.origin)
        d = _as_vec3(self.direction)
        if abs(np.linalg.norm(d) - 1.0) > UNIT_TOL:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    @classmethod
    def through(cls, origin, direction) -> "Ray":
        d = _as_vec3(direction)
        return cls(origin, d / np.linalg.norm(d))


@dataclass(frozen=True)
class PluckerRay:
    direction: np.ndarray
    moment: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.direction, self.moment])

    def allclose(self, other: "PluckerRay", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.as_array(), other.as_array(), atol=atol, rtol=0))


@dataclass(frozen=True)
class RayGrid:
    """Per-pixel rays of one camera, stored as ``(H, W, 3)`` arrays."""

    origins: np.ndarray
    directions: np.ndarray
    pose: CameraPose

    @property
    def shape(self) -> tuple[int, int]:
        return self.origins.shape[:2]

    def __getitem__(self, ij) -> Ray:
        i, j = ij
        return Ray(self.origins[i, j], self.directions[i, j])

    def plucker(self) -> np.ndarray:
        """``(H, W, 6)`` Plücker coordinates of every ray."""
        return plucker_coordinates(self.origins, self.directions)

    def crop(self, rows: slice, cols: slice) -> "RayGrid":
        return RayGrid(self.origins[rows, cols], self.directions[rows, cols], self.pose)


@dataclass(frozen=True)
class SimilarityTransform:
    """``x -> scale * rotation @ x + translation``."""

    scale: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", _as_vec3(self.translation))

    def apply_points(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.scale * x @ self.rotation.T + self.translation

    def inverse(self) -> "SimilarityTransform":
        Rt = self.rotation.T
        return SimilarityTransform(1.0 / self.scale, Rt, -(Rt @ self.translation) / self.scale)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """``self ∘ other``: apply ``other`` first."""
        return SimilarityTransform(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
        )

    def apply_pose(self, pose: CameraPose) -> CameraPose:
        """Re-express a camera in the transformed world.

        Camera-space coordinates are scaled along with the world so that the
        intrinsics stay valid.
        """
        R_new = pose.rotation @ self.rotation.T
        t_new = self.scale * pose.translation - R_new @ self.translation
        R_new = _reorthonormalize(R_new)
        return CameraPose(R_new, t_new, pose.fx, pose.fy, pose.cx, pose.cy, pose.width, pose.height)


def _reorthonormalize(R: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(R)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0), *, fx, fy, cx, cy, width, height) -> CameraPose:
    """Camera at ``eye`` whose +Z axis points at ``target``.

    ``up`` is the world direction that should appear towards the top of the
    image; with y-down images the camera's -Y axis is aligned with it.
    """
    eye = _as_vec3(eye)
    z = _as_vec3(target) - eye
    z /= np.linalg.norm(z)
    up = _as_vec3(up)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        alt = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
        x = np.cross(z, alt)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    t = -R @ eye
    return CameraPose(R, t, fx, fy, cx, cy, width, height)


def camera_rays(pose: CameraPose) -> RayGrid:
    """One unit ray per pixel center, expressed in world coordinates."""
    W, H = pose.width, pose.height
    u = (np.arange(W, dtype=np.float64) + 0.5 - pose.cx) / pose.fx
    v = (np.arange(H, dtype=np.float64) + 0.5 - pose.cy) / pose.fy
    uu, vv = np.meshgrid(u, v, indexing="xy")
    dirs_cam = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
    dirs = dirs_cam @ pose.rotation  # R^T applied row-wise
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.center, dirs.shape).copy()
    return RayGrid(origins, dirs, pose)


def pixel_rays(pose: CameraPose, u, v) -> tuple[np.ndarray, np.ndarray]:
    """Rays through arbitrary (continuous) pixel coordinates ``u``, ``v``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.stack([(u - pose.cx) / pose.fx, (v - pose.cy) / pose.fy, np.ones_like(u)], axis=-1)
    d = d @ pose.rotation
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return np.broadcast_to(pose.center, d.shape).copy(), d


def project(pose: CameraPose, points) -> np.ndarray:
    """Pixel coordinates (continuous, pixel-center convention) of world points."""
    p = np.asarray(points, dtype=np.float64) @ pose.rotation.T + pose.translation
    u = pose.fx * p[..., 0] / p[..., 2] + pose.cx
    v = pose.fy * p[..., 1] / p[..., 2] + pose.cy
    return np.stack([u, v], axis=-1)


def plucker_coordinates(origins, directions) -> np.ndarray:
    """Vectorized ``(d, o × d)`` for arrays of shape ``(..., 3)``."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    return np.concatenate([d, np.cross(o, d)], axis=-1)


def plucker_encode(ray: Ray) -> PluckerRay:
    return PluckerRay(ray.direction.copy(), np.cross(ray.origin, ray.direction))


def solve_anchor_point(rays: Sequence[Ray]) -> np.ndarray:
    """Least-squares point closest to a bundle of lines.

    Minimizes ``sum_i ||(I - d_i d_i^T)(p - o_i)||^2`` by solving the 3x3
    normal equations.
    """
    if len(rays) < 2:
        raise DegenerateRays("need at least two rays")
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for r in rays:
        P = np.eye(3) - np.outer(r.direction, r.direction)
        A += P
        b += P @ r.origin
    if np.linalg.eigvalsh(A)[0] < MIN_EIGENVALUE:
        raise DegenerateRays("rays are (nearly) parallel")
    return np.linalg.solve(A, b)


def anchor_point_residual(rays: Sequence[Ray], p) -> float:
    p = _as_vec3(p)
    total = 0.0
    for r in rays:
        diff = p - r.origin
        perp = diff - r.direction * (r.direction @ diff)
        total += float(perp @ perp)
    return total


def anchor_frame(poses: Sequence[CameraPose]) -> tuple[SimilarityTransform, list[CameraPose]]:
    """Frame in which the first camera sits one unit from the solved origin.

    The origin is the point closest to all optical axes (or one unit in front
    of the camera when only one pose is given); the first camera's axes become
    the world axes.
    """
    if len(poses) == 0:
        raise ValueError("anchor_frame needs at least one pose")
    first = poses[0]
    c1 = first.center
    if len(poses) == 1:
        p = c1 + first.optical_axis
    else:
        p = solve_anchor_point([Ray(q.center, q.optical_axis) for q in poses])
    dist = np.linalg.norm(p - c1)
    if dist < 1e-8:
        raise DegenerateAnchor("solved origin coincides with the anchor camera")
    s = 1.0 / dist
    R = first.rotation
    transform = SimilarityTransform(s, R, -s * R @ p)
    return transform, [transform.apply_pose(q) for q in poses]


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
