"""End-to-end frame processing: the baseline center-pixel lookup and the refined point-cloud path."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import cloud as cloud_mod
from . import detect, fourier, roi_mask
from .core import CameraIntrinsics, GeometryError, RingSpec, as_depth, as_gray, back_project
from .refine import LocateGates, MarkerPose, locate_marker

__all__ = [
    "METHODS",
    "PipelineConfig",
    "FrameResult",
    "FrameInput",
    "bilinear_depth",
    "run_baseline",
    "run_refined",
    "run_frame",
    "run_batch",
]

log = logging.getLogger(__name__)

METHODS = ("baseline_mapping", "refined")
_METHOD_ALIASES = {"baseline": "baseline_mapping", "baseline_mapping": "baseline_mapping", "refined": "refined"}
DETECTORS = ("classical", "external-roi")


@dataclass(frozen=True)
class PipelineConfig:
    intrinsics: CameraIntrinsics
    ring: RingSpec = field(default_factory=RingSpec)
    method: str = "refined"
    detector: str = "classical"
    enhance: bool = True
    detector_params: detect.DetectorParams = field(default_factory=detect.DetectorParams)
    gates: LocateGates = field(default_factory=LocateGates)
    mask_dilation: int = 1
    max_roi_extent: float | None = 60.0
    normal_k: int | None = None
    template_spacing: float = 0.5
    template_shell: bool = False
    debug_dir: str | None = None

    def __post_init__(self):
        method = _METHOD_ALIASES.get(self.method)
        if method is None:
            raise GeometryError(f"unknown method {self.method!r}; expected one of {METHODS}")
        object.__setattr__(self, "method", method)
        if self.detector not in DETECTORS:
            raise GeometryError(f"unknown detector {self.detector!r}; expected one of {DETECTORS}")
        if not 0 <= self.mask_dilation <= 3:
            raise GeometryError("mask_dilation must be 0-3")
        if self.max_roi_extent is not None and self.max_roi_extent <= 0:
            raise GeometryError("max_roi_extent must be positive")

    @classmethod
    def from_mapping(cls, data: dict, base_dir: str | Path | None = None) -> "PipelineConfig":
        """Build from a parsed config file with per-module sections.

        Recognized sections: ``[pipeline]`` (method, detector, enhance,
        mask_dilation, max_roi_extent, normal_k, template_spacing,
        template_shell, debug_dir, and
        ``intrinsics`` as a path), ``[intrinsics]`` (inline values),
        ``[ring]``, ``[detector]`` and ``[gates]``. A relative intrinsics path
        resolves against ``base_dir``.
        """
        section = dict(data.get("pipeline", {}))
        if "intrinsics" in data and isinstance(data["intrinsics"], dict):
            intrinsics = CameraIntrinsics.from_mapping(data["intrinsics"])
        elif "intrinsics" in section:
            path = Path(section.pop("intrinsics"))
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            if not path.exists():
                raise FileNotFoundError(f"intrinsics file {path} does not exist")
            intrinsics = CameraIntrinsics.load(path)
        else:
            raise GeometryError("config needs an [intrinsics] table or pipeline.intrinsics path")
        section.pop("intrinsics", None)

        kwargs: dict = {"intrinsics": intrinsics}
        if "ring" in data:
            kwargs["ring"] = RingSpec(**{k: float(v) for k, v in data["ring"].items()})
        if "detector" in data:
            kwargs["detector_params"] = detect.DetectorParams(**data["detector"])
        if "gates" in data:
            kwargs["gates"] = LocateGates(**data["gates"])
        for key in ("method", "detector", "enhance", "mask_dilation", "max_roi_extent", "normal_k", "template_spacing", "template_shell", "debug_dir"):
            if key in section:
                kwargs[key] = section.pop(key)
        if section:
            raise GeometryError(f"unknown pipeline keys: {sorted(section)}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        import tomli

        path = Path(path)
        with path.open("rb") as fh:
            data = tomli.load(fh)
        return cls.from_mapping(data, base_dir=path.parent)


@dataclass
class FrameResult:
    """Outcome of one frame.

    ``status`` is ``"accepted"``, ``"rejected"`` (the locator's quality gates
    said no) or ``"failed"`` (a stage could not produce output; ``stage``
    names it). ``center`` is only set for accepted results.
    """

    frame_id: str
    method: str
    status: str
    center: np.ndarray | None = None
    pose: MarkerPose | None = None
    stage: str | None = None
    message: str = ""
    timings_ms: dict = field(default_factory=dict)

    @property
    def accepted(self) -> bool:
        return self.status == "accepted"

    def to_dict(self) -> dict:
        return {
            "frame_id": self.frame_id,
            "method": self.method,
            "status": self.status,
            "center": None if self.center is None else [float(c) for c in self.center],
            "pose": None if self.pose is None else self.pose.to_dict(),
            "stage": self.stage,
            "message": self.message,
            "timings_ms": {k: float(v) for k, v in self.timings_ms.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FrameResult":
        center = data.get("center")
        return cls(
            frame_id=str(data["frame_id"]),
            method=str(data["method"]),
            status=str(data["status"]),
            center=None if center is None else np.asarray(center, dtype=np.float64),
            pose=None,
            stage=data.get("stage"),
            message=data.get("message", ""),
            timings_ms=dict(data.get("timings_ms", {})),
        )


class _Stopwatch:
    def __init__(self):
        self.timings: dict[str, float] = {}
        self.current: str | None = None

    def stage(self, name):
        self.current = name
        return self

    def __enter__(self):
        self._t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.timings[self.current] = max((time.perf_counter() - self._t0) * 1e3, 0.0)
        return False


def _failed(frame_id, method, stage, message, timings) -> FrameResult:
    log.info("frame %s failed at %s: %s", frame_id, stage, message)
    return FrameResult(frame_id, method, "failed", stage=stage, message=message, timings_ms=timings)


def _check_pair(gray, depth):
    gray = as_gray(gray)
    depth = as_depth(depth)
    if gray.shape != depth.shape:
        raise GeometryError(f"gray {gray.shape} and depth {depth.shape} differ in size")
    return gray, depth


def bilinear_depth(depth, x: float, y: float) -> float | None:
    """Depth at ``(x, y)`` from the four surrounding pixels, skipping zeros.

    Weights of invalid neighbors are dropped and the rest renormalized; the
    result is ``None`` when all four are invalid or ``(x, y)`` is off-image.
    """
    d = np.asarray(depth, dtype=np.float64)
    H, W = d.shape
    if not (math.isfinite(x) and math.isfinite(y)) or not (0 <= x <= W - 1 and 0 <= y <= H - 1):
        return None
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
    fx, fy = x - x0, y - y0
    total = weight = 0.0
    for xi, yi, w in ((x0, y0, (1 - fx) * (1 - fy)), (x1, y0, fx * (1 - fy)), (x0, y1, (1 - fx) * fy), (x1, y1, fx * fy)):
        if d[yi, xi] > 0 and w > 0:
            total += w * d[yi, xi]
            weight += w
    if weight == 0.0:
        # exactly on a pixel whose only positive-weight neighbor is invalid
        return None
    return total / weight


def _find_rois(image, cfg: PipelineConfig, rois):
    if rois is not None:
        return list(rois)
    return [box for box, _ in detect.detect_rings(image, cfg.detector_params, cfg.ring, cfg.intrinsics)]


def run_baseline(gray, depth, cfg: PipelineConfig, frame_id: str = "frame", rois=None) -> FrameResult:
    """Fitted 2D circle center, depth looked up under it, back-projected.

    The baseline always runs the classical detector; ``rois`` is accepted for
    signature symmetry with :func:`run_refined` and ignored.
    """
    method = "baseline_mapping"
    sw = _Stopwatch()
    try:
        gray, depth = _check_pair(gray, depth)
    except GeometryError as exc:
        return _failed(frame_id, method, "input", str(exc), sw.timings)
    with sw.stage("detect"):
        try:
            found = detect.detect_rings(gray, cfg.detector_params, cfg.ring, cfg.intrinsics)
        except GeometryError as exc:
            found, err = [], str(exc)
        else:
            err = "no ring candidate"
    if not found:
        return _failed(frame_id, method, "detect", err, sw.timings)
    _, fit = found[0]
    with sw.stage("depth_lookup"):
        z = bilinear_depth(depth, fit.xc, fit.yc)
    if z is None:
        return _failed(frame_id, method, "depth_lookup", "no valid depth under the fitted center", sw.timings)
    with sw.stage("back_project"):
        center = back_project(fit.xc, fit.yc, z, cfg.intrinsics)
    return FrameResult(frame_id, method, "accepted", center=center, timings_ms=sw.timings)


@lru_cache(maxsize=8)
def _template(ring: RingSpec, spacing: float, shell: bool):
    return cloud_mod.make_ring_template(ring, spacing, shell=shell)


def run_refined(gray, depth, cfg: PipelineConfig, frame_id: str = "frame", rois=None) -> FrameResult:
    """Enhance, find the ROI, mask the depth map, and locate the marker in the masked cloud.

    ROIs come from ``rois`` when given (external detector), otherwise from the
    classical detector run on the enhanced image, falling back to the
    original image when the enhanced one yields nothing. Contours are always
    traced on the original gray image; depth values are never touched by the
    enhancement.
    """
    method = "refined"
    sw = _Stopwatch()
    try:
        gray, depth = _check_pair(gray, depth)
    except GeometryError as exc:
        return _failed(frame_id, method, "input", str(exc), sw.timings)
    H, W = gray.shape
    if cfg.detector == "external-roi" and rois is None:
        return _failed(frame_id, method, "detect", "external-roi detector selected but no ROI document given", sw.timings)
    debug = Path(cfg.debug_dir) if cfg.debug_dir else None
    if debug is not None:
        debug.mkdir(parents=True, exist_ok=True)

    enhanced = None
    if cfg.enhance and rois is None:
        with sw.stage("enhance"):
            enhanced = fourier.enhance(gray)
        if debug is not None:
            from .io import write_gray_png

            write_gray_png(debug / f"{frame_id}_enhanced.png", enhanced)

    with sw.stage("detect"):
        try:
            if rois is not None:
                boxes = [b for b in rois if b.inside(W, H)]
            else:
                boxes = _find_rois(enhanced, cfg, None) if enhanced is not None else []
                if not boxes:
                    boxes = _find_rois(gray, cfg, None)
        except GeometryError as exc:
            return _failed(frame_id, method, "detect", str(exc), sw.timings)
    if not boxes:
        return _failed(frame_id, method, "detect", "no ring candidate", sw.timings)

    last_error = ("contour", "no usable ROI")
    for box in boxes:
        try:
            with sw.stage("contour"):
                contour = roi_mask.extract_contour(gray, box)
            with sw.stage("mask"):
                mask = roi_mask.dilate_mask(roi_mask.make_mask(contour, W, H), cfg.mask_dilation)
            with sw.stage("crop"):
                cropped = roi_mask.crop_depth(depth, mask)
        except GeometryError as exc:
            last_error = (sw.current, str(exc))
            continue
        break
    else:
        return _failed(frame_id, method, last_error[0], last_error[1], sw.timings)
    if debug is not None:
        from .io import write_mask_png

        write_mask_png(debug / f"{frame_id}_mask.png", mask)

    try:
        with sw.stage("cloud"):
            roi_cloud = cloud_mod.depth_to_cloud(roi_mask.survivors(cropped), cfg.intrinsics, cfg.max_roi_extent)
        with sw.stage("normals"):
            roi_cloud = cloud_mod.estimate_normals(roi_cloud, cfg.normal_k)
        if debug is not None:
            from .io import write_ply

            write_ply(debug / f"{frame_id}_roi.ply", roi_cloud)
        with sw.stage("locate"):
            pose = locate_marker(roi_cloud, _template(cfg.ring, cfg.template_spacing, cfg.template_shell), cfg.ring, cfg.gates)
    except GeometryError as exc:
        return _failed(frame_id, method, sw.current, str(exc), sw.timings)

    if not pose.accepted:
        return FrameResult(frame_id, method, "rejected", pose=pose, stage="locate", message=pose.quality.value, timings_ms=sw.timings)
    return FrameResult(frame_id, method, "accepted", center=pose.center.copy(), pose=pose, timings_ms=sw.timings)


def run_frame(gray, depth, cfg: PipelineConfig, frame_id: str = "frame", rois=None) -> FrameResult:
    if cfg.method == "baseline_mapping":
        return run_baseline(gray, depth, cfg, frame_id, rois)
    return run_refined(gray, depth, cfg, frame_id, rois)


@dataclass(frozen=True)
class FrameInput:
    frame_id: str
    gray_path: str
    depth_path: str
    roi_path: str | None = None


def _run_one(args) -> FrameResult:
    from .io import read_depth_png, read_gray_png

    item, cfg, depth_scale = args
    try:
        gray = read_gray_png(item.gray_path)
        depth = read_depth_png(item.depth_path, depth_scale)
        rois = None
        if item.roi_path is not None:
            rois = detect.ingest_roi(Path(item.roi_path).read_text(encoding="utf-8"), gray.shape[1], gray.shape[0])
    except (OSError, GeometryError) as exc:
        return _failed(item.frame_id, cfg.method, "input", str(exc), {})
    return run_frame(gray, depth, cfg, item.frame_id, rois)


def run_batch(items, cfg: PipelineConfig, jobs: int = 1, depth_scale: float | None = None) -> list[FrameResult]:
    """Process frames independently, in input order, with up to ``jobs`` worker processes."""
    from .io import DEPTH_SCALE

    items = list(items)
    ids = [it.frame_id for it in items]
    if len(set(ids)) != len(ids):
        raise GeometryError("frame ids must be unique")
    scale = DEPTH_SCALE if depth_scale is None else depth_scale
    work = [(it, cfg, scale) for it in items]
    if jobs <= 1 or len(items) <= 1:
        return [_run_one(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_one, work))
