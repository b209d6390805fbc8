"""Classical 2D ring detection and external ROI ingestion.

The detector chains smoothing, thresholding with a 3x3 opening,
8-connected component labeling, area/circularity screening and an algebraic
circle fit on each surviving region's outer boundary.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy import ndimage
from skimage.measure import perimeter_crofton

from .core import CameraIntrinsics, GeometryError, RingSpec

__all__ = [
    "RoiBox",
    "CircleFit",
    "Region",
    "DetectorParams",
    "RoiClampWarning",
    "preprocess",
    "otsu_threshold",
    "segment",
    "connected_components",
    "screen_regions",
    "fit_circle_lsq",
    "outer_boundary",
    "default_area_bounds",
    "detect_rings",
    "ingest_roi",
    "rois_to_json",
]

_EIGHT = np.ones((3, 3), dtype=bool)


class RoiClampWarning(UserWarning):
    pass


@dataclass(frozen=True)
class RoiBox:
    x: int
    y: int
    w: int
    h: int
    score: float = 1.0

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise GeometryError("ROI box needs w, h >= 1")
        if not 0.0 <= self.score <= 1.0:
            raise GeometryError("ROI score must lie in [0, 1]")

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.y, self.y + self.h), slice(self.x, self.x + self.w)

    def inside(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x + self.w <= width and self.y + self.h <= height

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h, "score": self.score}


@dataclass(frozen=True)
class CircleFit:
    xc: float
    yc: float
    r: float
    rms: float


@dataclass
class Region:
    """One 8-connected component.

    ``circularity`` is ``4*pi*A/P**2`` computed on the hole-filled region, so
    an annulus scores by its outer outline.
    """

    rows: np.ndarray
    cols: np.ndarray
    area: int
    perimeter: float
    circularity: float
    filled_area: int
    bbox: tuple[int, int, int, int]
    label: int = field(default=0, repr=False)

    def mask(self, shape) -> np.ndarray:
        out = np.zeros(shape, dtype=bool)
        out[self.rows, self.cols] = True
        return out


@dataclass(frozen=True)
class DetectorParams:
    preprocess: str = "gaussian"
    gaussian_sigma: float = 1.5
    threshold: int | str = "otsu"
    area_min: float | None = None
    area_max: float | None = None
    circ_min: float = 0.7
    rms_max: float = 1.5
    roi_margin: float = 0.25
    geometric_refine: bool = False


def preprocess(image, mode: str = "gaussian", sigma: float = 1.5) -> np.ndarray:
    """Histogram equalization and/or Gaussian smoothing; returns ``float64``.

    ``mode`` is ``"hist_eq"``, ``"gaussian"`` or ``"hist_eq+gaussian"``.
    Equalization maps level ``l`` to ``floor(255 * cdf(l))``; an image with a
    single level is returned unchanged.
    """
    arr = np.asarray(image)
    if arr.ndim != 2 or arr.size == 0:
        raise GeometryError("preprocess needs a nonempty 2D image")
    out = arr.astype(np.float64)
    steps = mode.split("+")
    if any(s not in ("hist_eq", "gaussian") for s in steps):
        raise GeometryError(f"unknown preprocess mode {mode!r}")
    if "hist_eq" in steps:
        levels = np.clip(np.rint(out), 0, 255).astype(np.int64)
        hist = np.bincount(levels.ravel(), minlength=256)
        if np.count_nonzero(hist) > 1:
            cdf = np.cumsum(hist) / levels.size
            out = np.floor(255.0 * cdf)[levels]
    if "gaussian" in steps and sigma > 0:
        out = ndimage.gaussian_filter(out, sigma, mode="reflect")
    return out


def otsu_threshold(image, nbins: int = 256) -> float:
    """Otsu threshold over ``nbins`` equal bins spanning the data range.

    Foreground is ``image > threshold``. Because the bins follow the data
    range, the result commutes with any affine map ``a*I + b`` with ``a > 0``.
    """
    vals = np.asarray(image, dtype=np.float64).ravel()
    lo, hi = float(vals.min()), float(vals.max())
    if hi <= lo:
        return lo
    hist, edges = np.histogram(vals, bins=nbins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)[:-1].astype(np.float64)
    w1 = vals.size - w0
    s0 = np.cumsum(hist * centers)[:-1]
    total = float((hist * centers).sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        m0 = s0 / w0
        m1 = (total - s0) / w1
        between = w0 * w1 * (m0 - m1) ** 2
    between = np.nan_to_num(between, nan=-1.0)
    k = int(np.argmax(between))
    return float(edges[k + 1])


def segment(image, threshold: int | float | str = "otsu") -> np.ndarray:
    """Binary foreground ``image > threshold`` followed by a 3x3 opening."""
    arr = np.asarray(image, dtype=np.float64)
    level = otsu_threshold(arr) if threshold == "otsu" else float(threshold)
    fg = arr > level
    return ndimage.binary_opening(fg, structure=_EIGHT)


def connected_components(binary) -> list[Region]:
    fg = np.asarray(binary, dtype=bool)
    labels, count = ndimage.label(fg, structure=_EIGHT)
    regions = []
    for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        local = labels[sl] == idx
        rows, cols = np.nonzero(local)
        filled = ndimage.binary_fill_holes(local)
        padded = np.pad(filled, 1)
        perim = float(perimeter_crofton(padded, directions=4))
        filled_area = int(filled.sum())
        circ = 4.0 * math.pi * filled_area / perim**2 if perim > 0 else 0.0
        regions.append(
            Region(
                rows=rows + sl[0].start,
                cols=cols + sl[1].start,
                area=int(rows.size),
                perimeter=perim,
                circularity=circ,
                filled_area=filled_area,
                bbox=(sl[1].start, sl[0].start, sl[1].stop - sl[1].start, sl[0].stop - sl[0].start),
                label=idx,
            )
        )
    return regions


def screen_regions(regions, area_min: float, area_max: float, circ_min: float) -> list[Region]:
    if not (area_min > 0 and area_max > 0 and circ_min > 0):
        raise GeometryError("screening thresholds must be positive")
    if area_min >= area_max:
        raise GeometryError("area_min must be below area_max")
    return [r for r in regions if area_min <= r.area <= area_max and r.circularity >= circ_min]


def default_area_bounds(
    spec: RingSpec, intrinsics: CameraIntrinsics, depth_range: tuple[float, float] = (300.0, 500.0)
) -> tuple[float, float]:
    """Pixel-area bounds covering the hole disk at the far end up to the outer disk at the near end."""
    f = 0.5 * (intrinsics.fx + intrinsics.fy)
    z_near, z_far = depth_range
    smallest = math.pi * (spec.inner_radius * f / z_far) ** 2
    largest = math.pi * (spec.outer_radius * f / z_near) ** 2
    return 0.5 * smallest, 1.5 * largest


def fit_circle_lsq(points, geometric_refine: bool = False) -> CircleFit:
    """Algebraic (Kasa) least-squares circle through ``(x, y)`` points.

    Minimizes ``sum(((x - xc)**2 + (y - yc)**2 - r**2)**2)`` in closed form
    on centered, scaled coordinates. ``rms`` is the geometric residual
    ``sqrt(mean((d_i - r)**2))``.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 3:
        raise GeometryError("circle fit needs at least 3 points")
    mean = pts.mean(axis=0)
    q = pts - mean
    scale = np.sqrt((q**2).sum(axis=1).mean())
    if scale == 0:
        raise GeometryError("circle fit points are coincident")
    q = q / scale
    A = np.column_stack([q, np.ones(len(q))])
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] < 1e-10 * sv[0]:
        raise GeometryError("circle fit points are collinear")
    b = (q**2).sum(axis=1)
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    a_c = sol[:2] / 2.0
    r2 = sol[2] + a_c @ a_c
    if r2 <= 0:
        raise GeometryError("degenerate circle fit")
    center = a_c * scale + mean
    r = math.sqrt(r2) * scale
    if geometric_refine:
        from scipy.optimize import least_squares

        def resid(p):
            return np.hypot(pts[:, 0] - p[0], pts[:, 1] - p[1]) - p[2]

        res = least_squares(resid, [center[0], center[1], r], method="lm")
        center, r = res.x[:2], abs(res.x[2])
    d = np.hypot(pts[:, 0] - center[0], pts[:, 1] - center[1])
    rms = float(np.sqrt(np.mean((d - r) ** 2)))
    return CircleFit(float(center[0]), float(center[1]), float(r), rms)


def outer_boundary(mask) -> np.ndarray:
    """Outer 8-connected border pixels of the largest blob, as ``(x, y)`` rows in traversal order."""
    m = np.ascontiguousarray(np.asarray(mask, dtype=np.uint8))
    contours, _ = cv2.findContours(m, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
    if not contours:
        return np.empty((0, 2), dtype=np.int64)
    best = max(contours, key=cv2.contourArea)
    return best.reshape(-1, 2).astype(np.int64)


def _roi_for(region: Region, margin: float, width: int, height: int) -> tuple[int, int, int, int]:
    x, y, w, h = region.bbox
    mx, my = int(math.ceil(w * margin)), int(math.ceil(h * margin))
    x0, y0 = max(x - mx, 0), max(y - my, 0)
    x1, y1 = min(x + w + mx, width), min(y + h + my, height)
    return x0, y0, x1 - x0, y1 - y0


def detect_rings(
    image,
    params: DetectorParams | None = None,
    spec: RingSpec | None = None,
    intrinsics: CameraIntrinsics | None = None,
) -> list[tuple[RoiBox, CircleFit]]:
    """Find ring candidates; best first (highest circularity, then lowest fit rms).

    Area bounds default to :func:`default_area_bounds` when intrinsics are
    given, otherwise to a wide generic range.
    """
    params = params or DetectorParams()
    arr = np.asarray(image)
    if arr.ndim != 2 or arr.size == 0:
        raise GeometryError("detect_rings needs a nonempty 2D image")
    height, width = arr.shape

    area_min, area_max = params.area_min, params.area_max
    if area_min is None or area_max is None:
        if intrinsics is not None:
            lo, hi = default_area_bounds(spec or RingSpec(), intrinsics)
        else:
            lo, hi = 20.0, 0.25 * width * height
        area_min = lo if area_min is None else area_min
        area_max = hi if area_max is None else area_max

    smooth = preprocess(arr, params.preprocess, params.gaussian_sigma)
    binary = segment(smooth, params.threshold)
    regions = screen_regions(connected_components(binary), area_min, area_max, params.circ_min)

    found = []
    for region in regions:
        x, y, w, h = region.bbox
        local = np.zeros((h, w), dtype=np.uint8)
        local[region.rows - y, region.cols - x] = 1
        border = outer_boundary(local)
        if len(border) < 3:
            continue
        try:
            fit = fit_circle_lsq(border + (x, y), params.geometric_refine)
        except GeometryError:
            continue
        if fit.rms > params.rms_max:
            continue
        score = float(np.clip(region.circularity, 0.0, 1.0))
        found.append((region.circularity, fit.rms, RoiBox(*_roi_for(region, params.roi_margin, width, height), score), fit))
    found.sort(key=lambda item: (-item[0], item[1]))
    return [(box, fit) for _, _, box, fit in found]


def ingest_roi(document, width: int, height: int) -> list[RoiBox]:
    """Parse an ROI interchange document and clamp boxes to the image.

    The document is a JSON array of objects with integer ``x, y, w, h`` and a
    numeric ``score`` in ``[0, 1]`` (text or already-parsed list). Boxes that
    stick out are clamped with a :class:`RoiClampWarning`; boxes that end up
    empty are dropped with the same warning.
    """
    if isinstance(document, (str, bytes)):
        try:
            data = json.loads(document)
        except json.JSONDecodeError as exc:
            raise GeometryError(f"malformed ROI document: {exc}") from exc
    else:
        data = document
    if not isinstance(data, list):
        raise GeometryError("ROI document must be an array")
    boxes = []
    for i, item in enumerate(data):
        if not isinstance(item, dict):
            raise GeometryError(f"ROI entry {i} is not an object")
        try:
            x, y, w, h = (item[k] for k in ("x", "y", "w", "h"))
            score = item.get("score", 1.0)
        except KeyError as exc:
            raise GeometryError(f"ROI entry {i} lacks field {exc}") from exc
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in (x, y, w, h)):
            raise GeometryError(f"ROI entry {i}: x, y, w, h must be integers")
        if not isinstance(score, (int, float)) or isinstance(score, bool) or not 0 <= score <= 1:
            raise GeometryError(f"ROI entry {i}: score must be a number in [0, 1]")
        if w < 1 or h < 1:
            raise GeometryError(f"ROI entry {i}: w and h must be >= 1")
        x0, y0 = max(x, 0), max(y, 0)
        x1, y1 = min(x + w, width), min(y + h, height)
        if (x0, y0, x1, y1) != (x, y, x + w, y + h):
            if x1 <= x0 or y1 <= y0:
                warnings.warn(f"ROI entry {i} lies outside the image; dropped", RoiClampWarning, stacklevel=2)
                continue
            warnings.warn(f"ROI entry {i} clamped to the image bounds", RoiClampWarning, stacklevel=2)
        boxes.append(RoiBox(x0, y0, x1 - x0, y1 - y0, float(score)))
    return boxes


def rois_to_json(boxes) -> str:
    return json.dumps([b.to_dict() for b in boxes], indent=2)
