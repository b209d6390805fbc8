"""Frequency-domain difference-of-Gaussians enhancement.

Transforms are unitary (``norm="ortho"``: a factor ``1/sqrt(W*H)`` in each
direction), so spectral energy equals spatial energy. Spectra are stored
DC-centered: the zero-frequency bin sits at ``(H // 2, W // 2)`` in
``[row, col]`` order.
"""

from __future__ import annotations

import numpy as np

from .core import GeometryError, as_gray

__all__ = [
    "fft_forward",
    "fft_inverse",
    "gen_gauss_filter",
    "band_pass_filter",
    "enhance_raw",
    "enhance",
    "rescale_to_byte",
    "log_magnitude_image",
    "filter_display_image",
]


def fft_forward(image) -> np.ndarray:
    """DC-centered unitary 2D spectrum of ``image`` (complex, same shape)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise GeometryError("fft_forward needs a nonempty 2D image")
    return np.fft.fftshift(np.fft.fft2(arr, norm="ortho"))


def fft_inverse(spectrum, clamp: bool = False) -> np.ndarray:
    """Real part of the inverse of a DC-centered unitary spectrum.

    With ``clamp=True`` the result is clipped to ``[0, 255]`` for export.
    """
    spec = np.asarray(spectrum)
    out = np.fft.ifft2(np.fft.ifftshift(spec), norm="ortho").real
    if clamp:
        out = np.clip(out, 0.0, 255.0)
    return out


def _radius_sq(width: int, height: int) -> np.ndarray:
    u = np.arange(width) - width // 2
    v = np.arange(height) - height // 2
    return v[:, None] ** 2 + u[None, :] ** 2


def gen_gauss_filter(sigma: float, width: int, height: int) -> np.ndarray:
    """Isotropic DC-centered Gaussian gain with peak 1 at the DC bin."""
    if not sigma > 0:
        raise GeometryError(f"sigma must be positive, got {sigma!r}")
    if width < 1 or height < 1:
        raise GeometryError("filter dimensions must be positive")
    return np.exp(-_radius_sq(width, height) / (2.0 * sigma * sigma))


def band_pass_filter(sigma_narrow: float = 3.0, sigma_wide: float = 15.0, width: int = 1, height: int = 1) -> np.ndarray:
    """``gauss(sigma_wide) - gauss(sigma_narrow)``: zero at DC and at high frequency."""
    if not 0 < sigma_narrow < sigma_wide:
        raise GeometryError("band_pass_filter needs 0 < sigma_narrow < sigma_wide")
    return gen_gauss_filter(sigma_wide, width, height) - gen_gauss_filter(sigma_narrow, width, height)


def enhance_raw(image, sigma_narrow: float = 3.0, sigma_wide: float = 15.0) -> np.ndarray:
    """Band-passed image before any rescaling (zero mean, float64)."""
    arr = np.asarray(image, dtype=np.float64)
    h, w = arr.shape
    spec = fft_forward(arr) * band_pass_filter(sigma_narrow, sigma_wide, w, h)
    return fft_inverse(spec)


def rescale_to_byte(values) -> np.ndarray:
    """Affine min/max stretch of a frame to ``uint8``; flat frames map to 0."""
    arr = np.asarray(values, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi - lo < 1e-9:
        return np.zeros(arr.shape, dtype=np.uint8)
    return np.rint((arr - lo) * (255.0 / (hi - lo))).astype(np.uint8)


def enhance(image, sigma_narrow: float = 3.0, sigma_wide: float = 15.0) -> np.ndarray:
    """Band-pass enhance a gray image and stretch the result to the full byte range."""
    return rescale_to_byte(enhance_raw(as_gray(image), sigma_narrow, sigma_wide))


def log_magnitude_image(spectrum) -> np.ndarray:
    """8-bit ``log(1 + |F|)`` view of a centered spectrum for inspection."""
    return rescale_to_byte(np.log1p(np.abs(spectrum)))


def filter_display_image(gain) -> np.ndarray:
    """Byte view of a signed filter using the display offset ``gain * 127 + 128``."""
    return np.clip(np.rint(np.asarray(gain) * 127.0 + 128.0), 0, 255).astype(np.uint8)
