"""Localization of a ring-shaped fiducial marker from paired gray and depth frames.

Two methods share one configuration surface: a baseline that reads depth
under the 2D circle center, and a refined path that masks the depth map to
the marker, fits a cone, and registers an ideal ring template with
Tukey-weighted point-to-plane ICP.
"""

from .core import (
    CameraIntrinsics,
    GeometryError,
    InvalidDepthError,
    PointCloud,
    RigidTransform,
    RingSpec,
    back_project,
    compose,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "CameraIntrinsics",
    "GeometryError",
    "InvalidDepthError",
    "PointCloud",
    "RigidTransform",
    "RingSpec",
    "back_project",
    "compose",
]
