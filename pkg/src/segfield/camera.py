"""Pinhole cameras, rays and stratified sampling.

Camera frame follows the OpenCV convention: +x right, +y down, +z along the
optical axis. Poses are stored camera-to-world. Pixel (i, j) means column i,
row j; its center sits at (i + 0.5, j + 0.5).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_NEAR = 0.5
DEFAULT_FAR = 3.5
BEHIND_EPS = 1e-8


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside "
                             f"{self.width}x{self.height} image")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float) -> "Intrinsics":
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(float(f), float(f), width / 2, height / 2, width, height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


class Pose:
    """Rigid camera-to-world transform ``x_world = R @ x_cam + t``."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation, translation):
        r = np.array(rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError(f"rotation has determinant {np.linalg.det(r):.6g}, expected +1")
        r.flags.writeable = False
        t.flags.writeable = False
        self.rotation = r
        self.translation = t

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def inverse_matrix(self) -> np.ndarray:
        """3x4 world-to-camera matrix."""
        return np.hstack([self.rotation.T, (-self.rotation.T @ self.translation)[:, None]])

    def __eq__(self, other):
        return (isinstance(other, Pose) and np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    def __repr__(self):
        return f"Pose(t={self.translation.round(4).tolist()})"


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> Pose:
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(fwd @ up) > 1 - 1e-9:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return Pose(np.stack([right, down, fwd], axis=1), eye)


def rotate(vectors, matrix) -> np.ndarray:
    """``vectors @ matrix`` for (..., 3) rows, with a fixed summation order.

    BLAS may round differently depending on the row count; this keeps every
    row's result independent of how many rows are processed together.
    """
    v = np.asarray(vectors, dtype=np.float64)
    m = np.asarray(matrix)
    return v[..., 0:1] * m[0] + v[..., 1:2] * m[1] + v[..., 2:3] * m[2]


def to_local(points, pose: Pose) -> np.ndarray:
    """World-to-camera rigid transform; points (..., 3)."""
    return rotate(np.asarray(points, dtype=np.float64) - pose.translation, pose.rotation)


def to_world(points, pose: Pose) -> np.ndarray:
    return rotate(points, pose.rotation.T) + pose.translation


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float = DEFAULT_NEAR
    t_far: float = DEFAULT_FAR

    def __post_init__(self):
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        if not (0 <= self.t_near < self.t_far):
            raise ValueError(f"invalid bounds [{self.t_near}, {self.t_far}]")

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


@dataclass
class RayBatch:
    origins: np.ndarray      # (R, 3)
    directions: np.ndarray   # (R, 3), unit
    t_near: float = DEFAULT_NEAR
    t_far: float = DEFAULT_FAR

    def __len__(self) -> int:
        return len(self.origins)

    def __getitem__(self, i) -> Ray:
        return Ray(self.origins[i], self.directions[i], self.t_near, self.t_far)

    def subset(self, idx) -> "RayBatch":
        return RayBatch(self.origins[idx], self.directions[idx], self.t_near, self.t_far)


def pixel_grid(intr: Intrinsics) -> np.ndarray:
    """All (col, row) pixel indices, row-major."""
    rows, cols = np.mgrid[0 : intr.height, 0 : intr.width]
    return np.stack([cols.ravel(), rows.ravel()], axis=1)


def generate_rays(intr: Intrinsics, pose: Pose, pixels=None,
                  t_near: float = DEFAULT_NEAR, t_far: float = DEFAULT_FAR) -> RayBatch:
    """One ray through each pixel center. ``pixels`` is (P, 2) as (col, row)."""
    px = pixel_grid(intr) if pixels is None else np.atleast_2d(np.asarray(pixels))
    if px.size and (px[:, 0].min() < 0 or px[:, 0].max() >= intr.width
                    or px[:, 1].min() < 0 or px[:, 1].max() >= intr.height):
        raise ValueError("pixel index outside image extents")
    u = px[:, 0] + 0.5
    v = px[:, 1] + 0.5
    d_cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones(len(px))], axis=1)
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    dirs = rotate(d_cam, pose.rotation.T)
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    return RayBatch(origins, dirs, t_near, t_far)


@dataclass
class Projection:
    uv: np.ndarray          # (P, 2) pixel coordinates
    depth: np.ndarray       # (P,) camera-frame z
    behind: np.ndarray      # (P,) bool, depth <= BEHIND_EPS
    in_frame: np.ndarray    # (P,) bool, inside [0, W] x [0, H] and in front


def project(points, intr: Intrinsics, pose: Pose) -> Projection:
    p = np.atleast_2d(to_local(points, pose))
    z = p[:, 2]
    behind = z <= BEHIND_EPS
    safe = np.where(behind, 1.0, z)
    u = intr.fx * p[:, 0] / safe + intr.cx
    v = intr.fy * p[:, 1] / safe + intr.cy
    inside = (~behind) & (u >= 0) & (u <= intr.width) & (v >= 0) & (v <= intr.height)
    return Projection(np.stack([u, v], axis=1), z, behind, inside)


def back_project(uv, depth, intr: Intrinsics, pose: Pose) -> np.ndarray:
    """Inverse of :func:`project` at a given camera-frame depth."""
    uv = np.atleast_2d(uv)
    depth = np.asarray(depth, dtype=np.float64)
    x = (uv[:, 0] - intr.cx) / intr.fx * depth
    y = (uv[:, 1] - intr.cy) / intr.fy * depth
    return to_world(np.stack([x, y, np.broadcast_to(depth, x.shape)], axis=1), pose)


def stratified_sample(t_near: float, t_far: float, n_samples: int, rng: np.random.Generator,
                      n_rays: int | None = None) -> np.ndarray:
    """One uniform draw inside each of ``n_samples`` equal bins of [t_near, t_far].

    Returns (n_samples,) for a single ray, (n_rays, n_samples) otherwise.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    shape = (n_samples,) if n_rays is None else (n_rays, n_samples)
    width = (t_far - t_near) / n_samples
    lo = t_near + width * np.arange(n_samples)
    return lo + width * rng.random(shape)


def save_poses(path, cameras, filenames=None) -> None:
    """Pose file: JSON array of {intrinsics, rotation, translation, image}."""
    recs = []
    for k, (intr, pose) in enumerate(cameras):
        recs.append({
            "intrinsics": intr.to_dict(),
            "rotation": pose.rotation.ravel().tolist(),
            "translation": pose.translation.tolist(),
            "image": None if filenames is None else filenames[k],
        })
    Path(path).write_text(json.dumps(recs, indent=1))


def load_poses(path) -> list[tuple[Intrinsics, Pose, str | None]]:
    out = []
    for rec in json.loads(Path(path).read_text()):
        out.append((Intrinsics(**rec["intrinsics"]),
                    Pose(np.reshape(rec["rotation"], (3, 3)), rec["translation"]),
                    rec.get("image")))
    return out
