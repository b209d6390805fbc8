"""Shared geometry types: images, intrinsics, point clouds, rigid transforms.

Conventions
-----------
* All lengths are millimeters, camera frame: +z along the optical axis into
  the scene, +x right, +y down (raster order).
* Gray images are ``uint8`` arrays of shape ``(height, width)``; depth images
  are ``float64`` arrays of the same shape holding millimeters. A depth of 0
  marks an invalid pixel (no return); it is the only invalid sentinel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

__all__ = [
    "GeometryError",
    "InvalidDepthError",
    "CameraIntrinsics",
    "RingSpec",
    "PointCloud",
    "RigidTransform",
    "as_gray",
    "as_depth",
    "back_project",
    "back_project_many",
    "project",
    "compose",
    "rotation_about",
]


class GeometryError(ValueError):
    """Raised for invalid geometric input (degenerate fits, bad shapes)."""


class InvalidDepthError(GeometryError):
    pass


def as_gray(image) -> np.ndarray:
    """Validate and return ``image`` as a 2D ``uint8`` array."""
    arr = np.asarray(image)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise GeometryError(f"gray image must be a nonempty 2D array, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if not np.all(np.isfinite(arr)):
            raise GeometryError("gray image contains non-finite values")
        arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    return arr


def as_depth(depth) -> np.ndarray:
    """Validate and return ``depth`` as a 2D ``float64`` array of millimeters."""
    arr = np.asarray(depth, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise GeometryError(f"depth image must be a nonempty 2D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise GeometryError("depth values must be finite and >= 0")
    return arr


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            if not math.isfinite(getattr(self, name)):
                raise GeometryError(f"intrinsic {name} must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if self.width is not None and not 0 <= self.cx < self.width:
            raise GeometryError("cx outside image width")
        if self.height is not None and not 0 <= self.cy < self.height:
            raise GeometryError("cy outside image height")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_mapping(cls, data: dict) -> "CameraIntrinsics":
        width = data.get("width")
        height = data.get("height")
        return cls(
            fx=float(data["fx"]),
            fy=float(data["fy"]),
            cx=float(data["cx"]),
            cy=float(data["cy"]),
            width=None if width is None else int(width),
            height=None if height is None else int(height),
        )

    @classmethod
    def load(cls, path: str | Path) -> "CameraIntrinsics":
        """Read intrinsics from a TOML/JSON file or plain ``key = value`` lines.

        A TOML file may keep the values at top level or under ``[intrinsics]``.
        """
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        if path.suffix == ".json":
            import json

            data = json.loads(text)
        else:
            import tomli

            try:
                data = tomli.loads(text)
            except tomli.TOMLDecodeError:
                data = {}
                for line in text.splitlines():
                    line = line.split("#", 1)[0].strip()
                    if not line:
                        continue
                    key, sep, value = line.replace(":", "=", 1).partition("=")
                    if not sep:
                        raise GeometryError(f"cannot parse intrinsics line: {line!r}")
                    data[key.strip()] = float(value)
        if "intrinsics" in data:
            data = data["intrinsics"]
        return cls.from_mapping(data)

    def to_dict(self) -> dict:
        out = {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}
        if self.width is not None:
            out["width"] = self.width
        if self.height is not None:
            out["height"] = self.height
        return out


@dataclass(frozen=True)
class RingSpec:
    """Marker geometry in millimeters (ceramic ring: 24 mm outer, 10 mm hole, 3 mm thick)."""

    outer_diameter: float = 24.0
    inner_diameter: float = 10.0
    thickness: float = 3.0

    def __post_init__(self):
        if not 0 < self.inner_diameter < self.outer_diameter:
            raise GeometryError("ring needs 0 < inner_diameter < outer_diameter")
        if self.thickness <= 0:
            raise GeometryError("ring thickness must be positive")

    @property
    def outer_radius(self) -> float:
        return self.outer_diameter / 2.0

    @property
    def inner_radius(self) -> float:
        return self.inner_diameter / 2.0


@dataclass(frozen=True)
class PointCloud:
    """An ``(n, 3)`` point array with optional unit normals of the same shape."""

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if nrm.shape != pts.shape:
                raise GeometryError("normals must match points in count")
            if nrm.size and np.max(np.abs(np.linalg.norm(nrm, axis=1) - 1.0)) > 1e-6:
                raise GeometryError("normals must be unit length")
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def transformed(self, transform: "RigidTransform") -> "PointCloud":
        pts = transform.apply(self.points)
        nrm = None if self.normals is None else self.normals @ transform.rotation.T
        return PointCloud(pts, nrm)

    def subset(self, index) -> "PointCloud":
        nrm = None if self.normals is None else self.normals[index]
        return PointCloud(self.points[index], nrm)


@dataclass(frozen=True)
class RigidTransform:
    """``p -> R @ p + t``; rotation is validated as proper orthonormal."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise GeometryError("transform contains non-finite values")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise GeometryError("rotation must be orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, matrix) -> "RigidTransform":
        m = np.asarray(matrix, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def angle(self) -> float:
        """Rotation angle in radians."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    # snaps accumulated float drift back onto SO(3)
    u, _, vt = np.linalg.svd(R)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Return ``a ∘ b`` so that ``compose(a, b).apply(p) == a.apply(b.apply(p))``."""
    R = a.rotation @ b.rotation
    if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-12:
        R = _orthonormalize(R)
    return RigidTransform(R, a.rotation @ b.translation + a.translation)


def rotation_about(axis: Iterable[float], angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for ``angle`` radians about ``axis``."""
    k = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(k)
    if norm == 0:
        raise GeometryError("rotation axis must be nonzero")
    k = k / norm
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


def back_project(u: float, v: float, depth: float, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Camera-frame point for pixel ``(u, v)`` at ``depth`` mm along the optical axis."""
    if not all(math.isfinite(x) for x in (u, v, depth)):
        raise GeometryError("back_project arguments must be finite")
    if depth <= 0:
        raise InvalidDepthError(f"invalid depth {depth!r}")
    z = float(depth)
    return np.array(
        [(u - intrinsics.cx) * z / intrinsics.fx, (v - intrinsics.cy) * z / intrinsics.fy, z]
    )


def back_project_many(u, v, depth, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Vectorized :func:`back_project`; returns an ``(n, 3)`` array."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    z = np.asarray(depth, dtype=np.float64).ravel()
    if np.any(z <= 0):
        raise InvalidDepthError("all depths must be positive")
    return np.column_stack(
        [(u - intrinsics.cx) * z / intrinsics.fx, (v - intrinsics.cy) * z / intrinsics.fy, z]
    )


def project(points, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of camera-frame points to ``(u, v)`` pixel coordinates."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    z = pts[:, 2]
    out = np.column_stack(
        [intrinsics.fx * pts[:, 0] / z + intrinsics.cx, intrinsics.fy * pts[:, 1] / z + intrinsics.cy]
    )
    return out[0] if np.ndim(points) == 1 else out
