"""Contour extraction inside an ROI, filled masks, and mask cropping of depth maps."""

from __future__ import annotations

import numpy as np
import cv2
from scipy import ndimage

from .core import GeometryError, as_depth
from .detect import RoiBox, otsu_threshold, outer_boundary

__all__ = [
    "EmptyContourError",
    "extract_contour",
    "make_mask",
    "dilate_mask",
    "crop_depth",
    "survivors",
]

_EIGHT = np.ones((3, 3), dtype=bool)


class EmptyContourError(GeometryError):
    pass


def extract_contour(
    image,
    roi: RoiBox,
    sigma: float = 1.5,
    min_contrast: float = 20.0,
    min_area: int = 9,
) -> np.ndarray:
    """Outer contour ``(x, y)`` (image coordinates) of the dominant bright blob in ``roi``.

    The ROI is smoothed and Otsu-binarized to find the blob, then
    re-binarized at the half-way level between the blob's plateau and its
    immediate surroundings so the contour sits on the edge midpoint rather
    than wherever Otsu happened to land.
    """
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape
    if not roi.inside(W, H):
        raise GeometryError("ROI lies outside the image")
    patch = img[roi.slices]
    if sigma > 0:
        patch = ndimage.gaussian_filter(patch, sigma, mode="nearest")
    if patch.max() - patch.min() < min_contrast:
        raise EmptyContourError("ROI has no contrast")

    blob = _dominant_blob(patch > otsu_threshold(patch), min_area)
    if blob is None:
        raise EmptyContourError("no blob found in ROI")
    inner = float(np.median(patch[blob]))
    ring = ndimage.binary_dilation(blob, _EIGHT, iterations=3) & ~ndimage.binary_dilation(blob, _EIGHT)
    outside = patch[ring & ~ndimage.binary_fill_holes(blob)]
    if outside.size:
        level = 0.5 * (inner + float(np.median(outside)))
        refined = _dominant_blob(patch > level, min_area, seed=blob)
        if refined is not None:
            blob = refined

    contour = outer_boundary(blob)
    if len(contour) < 3:
        raise EmptyContourError("blob too small for a contour")
    return contour + (roi.x, roi.y)


def _dominant_blob(binary, min_area, seed=None):
    opened = ndimage.binary_opening(binary, structure=_EIGHT)
    labels, count = ndimage.label(opened, structure=_EIGHT)
    if count == 0:
        return None
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, count + 1))
    if seed is not None:
        overlap = ndimage.sum_labels(seed, labels, index=np.arange(1, count + 1))
        sizes = np.where(overlap > 0, sizes, 0)
    best = int(np.argmax(sizes))
    if sizes[best] < min_area:
        return None
    return labels == best + 1


def _is_closed(contour: np.ndarray) -> bool:
    if len(contour) < 3:
        return False
    steps = np.abs(np.diff(np.vstack([contour, contour[:1]]), axis=0)).max(axis=1)
    return bool(np.all(steps <= 1))


def make_mask(contour, width: int, height: int) -> np.ndarray:
    """Filled ``uint8`` 0/1 mask of a closed 8-connected pixel contour (boundary included)."""
    if width < 1 or height < 1:
        raise GeometryError("mask dimensions must be positive")
    pts = np.asarray(contour, dtype=np.int32).reshape(-1, 2)
    if len(pts) == 0:
        raise EmptyContourError("empty contour")
    if not _is_closed(pts):
        raise GeometryError("contour is not closed")
    mask = np.zeros((height, width), dtype=np.uint8)
    cv2.drawContours(mask, [pts.reshape(-1, 1, 2)], -1, 1, thickness=cv2.FILLED)
    return mask


def dilate_mask(mask, pixels: int) -> np.ndarray:
    """Grow a mask by ``pixels`` (0-3) using a 3x3 square element."""
    if not 0 <= pixels <= 3:
        raise GeometryError("mask dilation must be 0-3 px")
    m = np.asarray(mask, dtype=bool)
    if pixels:
        m = ndimage.binary_dilation(m, _EIGHT, iterations=pixels)
    return m.astype(np.uint8)


def crop_depth(depth, mask) -> np.ndarray:
    """Elementwise ``depth * mask``; zeros mean absent."""
    d = as_depth(depth)
    m = np.asarray(mask)
    if m.shape != d.shape:
        raise GeometryError(f"mask shape {m.shape} differs from depth shape {d.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise GeometryError("mask values must be 0 or 1")
    return d * m


def survivors(cropped) -> np.ndarray:
    """``(n, 3)`` rows of ``(u, v, depth)`` for nonzero pixels, in row-major order."""
    d = np.asarray(cropped, dtype=np.float64)
    v, u = np.nonzero(d > 0)
    return np.column_stack([u, v, d[v, u]]).astype(np.float64)
