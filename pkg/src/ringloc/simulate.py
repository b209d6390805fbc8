"""Synthetic structured-light captures of a ring marker with ground truth.

Scene model (ring frame: origin at the center of the ring's top face, +z the
outward face normal pointing at the camera side):

* top face: flat annulus ``inner_radius <= rho <= outer_radius`` at ``z = 0``;
* inner and outer walls: cylinders from ``z = -thickness`` to ``z = 0``;
* the surface the ring rests on: the plane ``z = -thickness`` or a sphere cap
  of radius ``surface_radius`` tangent to that plane at the ring axis, rising
  at most ``DOME_HEIGHT`` mm above a base plane;
* a matte black contrast band on the surface just outside the ring.

Depth is ray-cast through each pixel center. Gray intensities are ray-cast at
4x4 subpixels and box-averaged, then blurred and perturbed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import CameraIntrinsics, GeometryError, RigidTransform, RingSpec, project, rotation_about

__all__ = [
    "NoiseModel",
    "SceneConfig",
    "GroundTruth",
    "DEFAULT_INTRINSICS",
    "render",
    "sweep",
    "scene_from_mapping",
]

DEFAULT_INTRINSICS = CameraIntrinsics(fx=580.0, fy=580.0, cx=320.0, cy=240.0, width=640, height=480)

SUPERSAMPLE = 4
DOME_HEIGHT = 40.0

# label codes used by the ray caster
_MISS, _TOP, _WALL, _SURFACE, _CONTRAST = 0, 1, 2, 3, 4


@dataclass(frozen=True)
class NoiseModel:
    """Sensor noise, all parameters nonnegative.

    Depth noise std is ``z_sigma_at_400 + z_sigma_slope * (d - 400)``; the
    optical blur std is ``blur_px_at_400 + blur_slope * |d - 400|`` so it is
    smallest near the nominal working distance. ``gray_sigma`` is additive
    read noise on the gray image in intensity levels.
    """

    z_sigma_at_400: float = 0.3
    z_sigma_slope: float = 0.001
    blur_px_at_400: float = 0.8
    blur_slope: float = 0.002
    speckle_density: float = 0.02
    dropout_rate: float = 0.005
    gray_sigma: float = 2.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not (math.isfinite(value) and value >= 0):
                raise GeometryError(f"noise parameter {name} must be finite and >= 0")
        for name in ("speckle_density", "dropout_rate"):
            if getattr(self, name) > 1:
                raise GeometryError(f"{name} must be a fraction in [0, 1]")

    @classmethod
    def noiseless(cls) -> "NoiseModel":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    def z_sigma(self, distance):
        return np.maximum(self.z_sigma_at_400 + self.z_sigma_slope * (np.asarray(distance) - 400.0), 0.0)

    def blur_px(self, distance: float) -> float:
        return max(self.blur_px_at_400 + self.blur_slope * abs(distance - 400.0), 0.0)


@dataclass(frozen=True)
class SceneConfig:
    distance: float = 400.0
    tilt: float = 0.0
    tilt_direction: float = 0.0
    offset: tuple[float, float] = (0.0, 0.0)
    surface_radius: float | None = None
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
    ring: RingSpec = field(default_factory=RingSpec)
    lighting_level: float = 0.8
    contrast_band: float = 4.0
    noise: NoiseModel = field(default_factory=NoiseModel)
    single_shot: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 200.0 <= self.distance <= 800.0:
            raise GeometryError("distance must lie in [200, 800] mm")
        if not 0.0 <= self.tilt <= 45.0:
            raise GeometryError("tilt must lie in [0, 45] degrees")
        if not 0.0 <= self.lighting_level <= 1.0:
            raise GeometryError("lighting_level must lie in [0, 1]")
        if self.surface_radius is not None and self.surface_radius <= self.ring.outer_radius:
            raise GeometryError("surface_radius must exceed the ring's outer radius")
        if self.intrinsics.width is None or self.intrinsics.height is None:
            raise GeometryError("scene intrinsics need width and height")
        if self.contrast_band < 0:
            raise GeometryError("contrast_band must be >= 0")

    @property
    def marker_pose(self) -> RigidTransform:
        """Ring frame -> camera frame. At zero tilt the ring faces the camera."""
        facing = np.diag([1.0, -1.0, -1.0])
        phi = math.radians(self.tilt_direction)
        axis = (math.cos(phi), math.sin(phi), 0.0)
        R = rotation_about(axis, math.radians(self.tilt)) @ facing
        return RigidTransform(R, (self.offset[0], self.offset[1], self.distance))

    def with_seed(self, seed: int) -> "SceneConfig":
        return replace(self, seed=int(seed))


@dataclass(frozen=True)
class GroundTruth:
    center: np.ndarray
    normal: np.ndarray
    projected_center: np.ndarray
    projected_outer_radius: float

    def to_dict(self) -> dict:
        return {
            "center": [float(c) for c in self.center],
            "normal": [float(c) for c in self.normal],
            "projected_center": [float(c) for c in self.projected_center],
            "projected_outer_radius": float(self.projected_outer_radius),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GroundTruth":
        return cls(
            np.asarray(data["center"], dtype=float),
            np.asarray(data["normal"], dtype=float),
            np.asarray(data["projected_center"], dtype=float),
            float(data["projected_outer_radius"]),
        )


def ground_truth(config: SceneConfig) -> GroundTruth:
    pose = config.marker_pose
    center = pose.translation.copy()
    normal = pose.rotation[:, 2].copy()
    uv = project(center, config.intrinsics)
    radius = config.ring.outer_radius * config.intrinsics.fx / center[2]
    return GroundTruth(center, normal, np.asarray(uv), float(radius))


def _cast(config: SceneConfig, u: np.ndarray, v: np.ndarray):
    """Ray-cast pixel coordinates; return ``(depth, label)`` arrays."""
    K = config.intrinsics
    pose = config.marker_pose
    Rt = pose.rotation.T
    ring = config.ring
    r_in, r_out, thick = ring.inner_radius, ring.outer_radius, ring.thickness

    d_cam = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
    d = d_cam @ Rt.T
    o = -Rt @ pose.translation
    dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]

    best = np.full(u.shape, np.inf)
    label = np.zeros(u.shape, dtype=np.int8)

    def take(s, ok, code):
        ok = ok & (s > 0) & (s < best)
        best[ok] = s[ok]
        label[ok] = code

    with np.errstate(divide="ignore", invalid="ignore"):
        # top face
        s = -o[2] / dz
        rho = np.hypot(o[0] + s * dx, o[1] + s * dy)
        take(s, (rho >= r_in) & (rho <= r_out), _TOP)

        # walls
        a = dx * dx + dy * dy
        b = 2.0 * (o[0] * dx + o[1] * dy)
        for radius in (r_in, r_out):
            c = o[0] ** 2 + o[1] ** 2 - radius * radius
            disc = b * b - 4 * a * c
            root = np.sqrt(np.where(disc >= 0, disc, np.nan))
            for sgn in (-1.0, 1.0):
                s = (-b + sgn * root) / (2 * a)
                z = o[2] + s * dz
                take(s, np.isfinite(s) & (z >= -thick) & (z <= 0.0), _WALL)

        # supporting surface
        if config.surface_radius is None:
            s = (-thick - o[2]) / dz
            ok = np.isfinite(s)
        else:
            R = config.surface_radius
            oc = o - np.array([0.0, 0.0, -thick - R])
            bb = 2.0 * (oc[0] * dx + oc[1] * dy + oc[2] * dz)
            cc = oc @ oc - R * R
            aa = dx * dx + dy * dy + dz * dz
            disc = bb * bb - 4 * aa * cc
            s = (-bb - np.sqrt(np.where(disc >= 0, disc, np.nan))) / (2 * aa)
            # the dome rises from a base plane so every ray lands somewhere
            s_base = (-thick - min(R, DOME_HEIGHT) - o[2]) / dz
            s = np.where(np.isfinite(s) & (s < s_base), s, s_base)
            ok = np.isfinite(s)
        px, py = o[0] + s * dx, o[1] + s * dy
        rho = np.hypot(px, py)
        footprint = (rho >= r_in) & (rho <= r_out)
        band = (rho > r_out) & (rho <= r_out + config.contrast_band)
        ok = ok & ~footprint
        take(s, ok & band, _CONTRAST)
        take(s, ok & ~band, _SURFACE)

    depth = np.where(np.isfinite(best), best * d_cam[..., 2], 0.0)
    return depth, label


def _intensities(config: SceneConfig) -> np.ndarray:
    L = config.lighting_level
    # indexed by label code: miss, top, wall, surface, contrast band
    return np.array([0.0, 220.0, 90.0, 120.0, 25.0]) * L


def _marker_window(config: SceneConfig, margin: int) -> tuple[int, int, int, int]:
    K = config.intrinsics
    pose = config.marker_pose
    reach = config.ring.outer_radius + config.contrast_band + 2.0
    t = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    pts = []
    for z in (0.0, -config.ring.thickness):
        ring_pts = np.column_stack([reach * np.cos(t), reach * np.sin(t), np.full_like(t, z)])
        pts.append(pose.apply(ring_pts))
    uv = project(np.vstack(pts), K)
    u0 = max(int(np.floor(uv[:, 0].min())) - margin, 0)
    v0 = max(int(np.floor(uv[:, 1].min())) - margin, 0)
    u1 = min(int(np.ceil(uv[:, 0].max())) + margin + 1, K.width)
    v1 = min(int(np.ceil(uv[:, 1].max())) + margin + 1, K.height)
    return u0, v0, u1, v1


def render_clean(config: SceneConfig) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free gray (float, before blur) and depth images."""
    K = config.intrinsics
    W, H = K.width, K.height
    vv, uu = np.mgrid[0:H, 0:W].astype(np.float64)
    depth, label = _cast(config, uu, vv)
    levels = _intensities(config)
    gray = levels[label]

    u0, v0, u1, v1 = _marker_window(config, margin=2)
    if u1 > u0 and v1 > v0:
        n = SUPERSAMPLE
        offs = (np.arange(n) + 0.5) / n - 0.5
        su = (np.arange(u0, u1)[:, None] + offs[None, :]).ravel()
        sv = (np.arange(v0, v1)[:, None] + offs[None, :]).ravel()
        SV, SU = np.meshgrid(sv, su, indexing="ij")
        _, sub_label = _cast(config, SU, SV)
        sub = levels[sub_label].reshape(v1 - v0, n, u1 - u0, n).mean(axis=(1, 3))
        gray[v0:v1, u0:u1] = sub
    return gray, depth


def render(config: SceneConfig) -> tuple[np.ndarray, np.ndarray, GroundTruth]:
    """Render a ``(gray uint8, depth float64 mm, GroundTruth)`` triple.

    Deterministic for a given config (including ``seed``).
    """
    rng = np.random.default_rng(config.seed)
    noise = config.noise
    gray, depth = render_clean(config)
    truth = ground_truth(config)

    blur = noise.blur_px(config.distance)
    if blur > 0:
        gray = ndimage.gaussian_filter(gray, blur, mode="nearest")
    if noise.gray_sigma > 0:
        gray = gray + rng.normal(0.0, noise.gray_sigma, gray.shape)
    if config.single_shot and noise.speckle_density > 0:
        hit = rng.random(gray.shape) < noise.speckle_density
        gray = np.where(hit, rng.uniform(200.0, 255.0, gray.shape), gray)
    gray = np.clip(np.rint(gray), 0, 255).astype(np.uint8)

    valid = depth > 0
    sigma = noise.z_sigma(depth)
    if np.any(sigma > 0):
        depth = np.where(valid, depth + rng.standard_normal(depth.shape) * sigma, 0.0)
        depth = np.maximum(depth, 0.0)
    if noise.dropout_rate > 0:
        depth = np.where(rng.random(depth.shape) < noise.dropout_rate, 0.0, depth)
    return gray, depth, truth


def scene_to_mapping(config: SceneConfig) -> dict:
    data = {
        "distance": config.distance,
        "tilt": config.tilt,
        "tilt_direction": config.tilt_direction,
        "offset": list(config.offset),
        "lighting_level": config.lighting_level,
        "contrast_band": config.contrast_band,
        "single_shot": config.single_shot,
        "seed": config.seed,
        "intrinsics": config.intrinsics.to_dict(),
        "ring": asdict(config.ring),
        "noise": asdict(config.noise),
    }
    if config.surface_radius is not None:
        data["surface_radius"] = config.surface_radius
    return data


def scene_from_mapping(data: dict) -> SceneConfig:
    """Build a :class:`SceneConfig` from a parsed config (e.g. a ``[scene]`` TOML table)."""
    data = dict(data.get("scene", data))
    kwargs = {}
    for key in ("distance", "tilt", "tilt_direction", "lighting_level", "contrast_band", "surface_radius"):
        if key in data:
            kwargs[key] = float(data[key])
    if "offset" in data:
        kwargs["offset"] = tuple(float(x) for x in data["offset"])
    if "seed" in data:
        kwargs["seed"] = int(data["seed"])
    if "single_shot" in data:
        kwargs["single_shot"] = bool(data["single_shot"])
    if "intrinsics" in data:
        kwargs["intrinsics"] = CameraIntrinsics.from_mapping(data["intrinsics"])
    if "ring" in data:
        kwargs["ring"] = RingSpec(**{k: float(v) for k, v in data["ring"].items()})
    if "noise" in data:
        kwargs["noise"] = NoiseModel(**{k: float(v) for k, v in data["noise"].items()})
    return SceneConfig(**kwargs)


def sweep(
    template: SceneConfig,
    axis: str,
    values,
    runs_per_value: int,
    out_dir: str | Path,
    *,
    base_seed: int | None = None,
) -> dict:
    """Render ``runs_per_value`` seeded frames for each value along ``axis``.

    ``axis`` is ``"distance"``, ``"tilt"`` or ``"noise"`` (the latter varies
    ``noise.z_sigma_at_400``). Writes PNG frames, per-frame ground truth and
    ``manifest.json`` into ``out_dir`` and returns the manifest.
    """
    from . import io

    values = list(values)
    if not values:
        raise GeometryError("sweep needs at least one value")
    if runs_per_value < 1:
        raise GeometryError("runs_per_value must be >= 1")
    if axis not in ("distance", "tilt", "noise"):
        raise GeometryError(f"unknown sweep axis {axis!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = template.seed if base_seed is None else base_seed

    frames = []
    for i, value in enumerate(values):
        if axis == "noise":
            cfg = replace(template, noise=replace(template.noise, z_sigma_at_400=float(value)))
        else:
            cfg = replace(template, **{axis: float(value)})
        for run in range(runs_per_value):
            cfg_run = cfg.with_seed(seed + i * runs_per_value + run)
            gray, depth, truth = render(cfg_run)
            frame_id = f"{axis}_{i:03d}_run_{run:03d}"
            gray_path = out / f"{frame_id}_gray.png"
            depth_path = out / f"{frame_id}_depth.png"
            truth_path = out / f"{frame_id}_truth.json"
            io.write_gray_png(gray_path, gray)
            io.write_depth_png(depth_path, depth)
            truth_path.write_text(json.dumps(truth.to_dict(), indent=2), encoding="utf-8")
            frames.append(
                {
                    "id": frame_id,
                    "gray": gray_path.name,
                    "depth": depth_path.name,
                    "truth": truth_path.name,
                    "axis": axis,
                    "value": float(value),
                    "seed": cfg_run.seed,
                }
            )
    manifest = {
        "axis": axis,
        "values": [float(v) for v in values],
        "runs_per_value": runs_per_value,
        "depth_scale": io.DEPTH_SCALE,
        "scene": scene_to_mapping(template),
        "frames": frames,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return manifest
