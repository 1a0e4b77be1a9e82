"""Image representation, 8-bit save/load round trips, geometric transforms, noise.

Images are plain numpy arrays: color images are float64 (H, W, 3) with values
in [0, 1], grayscale images are (H, W), and quantized images are uint8.
Every function here is pure; nothing mutates its input.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import DataError
from .util import round_half_away

logger = logging.getLogger(__name__)

MAX_SIDE = 65500  # PNG/PPM writers break beyond this; treat as dimension overflow

GRAY_WEIGHTS = (0.30, 0.59, 0.11)


def validate_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Check dtype/range invariants and return the array as float64."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] != 3:
        raise ValueError(f"{name}: expected 3 channels, got {arr.shape[2]}")
    if arr.ndim not in (2, 3):
        raise ValueError(f"{name}: expected 2-D or 3-D array, got ndim={arr.ndim}")
    if arr.size == 0:
        raise ValueError(f"{name}: empty image")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name}: non-finite pixel values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name}: values outside [0, 1]")
    return arr


def quantize(img: np.ndarray) -> np.ndarray:
    """Map [0,1] floats to uint8 with half-away-from-zero rounding."""
    arr = validate_image(img)
    return round_half_away(arr * 255.0).astype(np.uint8)


def dequantize(q: np.ndarray) -> np.ndarray:
    """Map uint8 back to [0,1] floats (q / 255)."""
    q = np.asarray(q)
    if q.dtype != np.uint8:
        raise ValueError("dequantize expects a uint8 array")
    return q.astype(np.float64) / 255.0


def load_image(path) -> np.ndarray:
    """Load a PNG/PPM/JPEG file as a float64 RGB image in [0, 1]."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in {".png", ".ppm", ".jpg", ".jpeg"}:
        raise DataError(f"unsupported image format: {path}")
    try:
        with PILImage.open(path) as im:
            im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except FileNotFoundError:
        raise DataError(f"cannot read image: {path}")
    except OSError as exc:
        raise DataError(f"cannot decode image {path}: {exc}")
    return dequantize(arr)


def save_image(img: np.ndarray, path) -> None:
    """Save an image as 8-bit PNG or binary PPM (P6).

    The written pixels are exactly quantize(img), so save followed by load
    is bit-identical to dequantize(quantize(img)). JPEG output is refused.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in {".png", ".ppm"}:
        raise DataError(f"unsupported output format (PNG/PPM only): {path}")
    arr = validate_image(img)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    h, w = arr.shape[:2]
    if h > MAX_SIDE or w > MAX_SIDE:
        raise DataError(f"image dimensions {h}x{w} overflow the 8-bit container")
    q = quantize(arr)
    if suffix == ".ppm":
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(q.tobytes())
    else:
        PILImage.fromarray(q, mode="RGB").save(path, format="PNG")


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """Weighted RGB-to-gray conversion, weights (0.30, 0.59, 0.11)."""
    arr = validate_image(img)
    if arr.ndim != 3:
        raise ValueError("to_grayscale expects a 3-channel image")
    wr, wg, wb = GRAY_WEIGHTS
    return wr * arr[:, :, 0] + wg * arr[:, :, 1] + wb * arr[:, :, 2]


def _bilinear_axis(arr: np.ndarray, out_len: int, axis: int) -> np.ndarray:
    """Resample one axis with bilinear weights, half-pixel-center convention."""
    in_len = arr.shape[axis]
    if out_len == in_len:
        return arr
    # source coordinate of each output pixel center
    src = (np.arange(out_len, dtype=np.float64) + 0.5) * (in_len / out_len) - 0.5
    src = np.clip(src, 0.0, in_len - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, in_len - 1)
    frac = src - i0
    a = np.take(arr, i0, axis=axis)
    b = np.take(arr, i1, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = out_len
    frac = frac.reshape(shape)
    return a * (1.0 - frac) + b * frac


def resize(img: np.ndarray, scale: float) -> np.ndarray:
    """Bilinear resize to round(dim * scale / 100) per axis (minimum 1 pixel).

    Output pixel centers are mapped back into the source grid with the
    half-pixel convention src = (i + 0.5) * in/out - 0.5, clamped at the edges.
    """
    if not (0.0 < scale <= 400.0):
        raise ValueError(f"scale must be in (0, 400], got {scale}")
    arr = validate_image(img)
    h, w = arr.shape[:2]
    out_h = max(1, int(round_half_away(h * scale / 100.0)))
    out_w = max(1, int(round_half_away(w * scale / 100.0)))
    out = _bilinear_axis(arr, out_h, axis=0)
    out = _bilinear_axis(out, out_w, axis=1)
    return np.clip(out, 0.0, 1.0)


def crop(img: np.ndarray, area_fraction: float) -> np.ndarray:
    """Center crop keeping `area_fraction` percent of the original area.

    Aspect ratio is preserved: each side scales by sqrt(area_fraction/100).
    """
    if not (0.0 < area_fraction <= 100.0):
        raise ValueError(f"area_fraction must be in (0, 100], got {area_fraction}")
    arr = validate_image(img)
    h, w = arr.shape[:2]
    side_scale = np.sqrt(area_fraction / 100.0)
    out_h = int(round_half_away(h * side_scale))
    out_w = int(round_half_away(w * side_scale))
    if out_h < 1 or out_w < 1:
        raise DataError(f"crop to {area_fraction}% of {h}x{w} yields an empty image")
    top = int(round_half_away((h - out_h) / 2.0))
    left = int(round_half_away((w - out_w) / 2.0))
    return arr[top : top + out_h, left : left + out_w].copy()


def crop_box(img: np.ndarray, x1: float, y1: float, x2: float, y2: float) -> np.ndarray:
    """Crop a rectangular region given in (x1, y1, x2, y2) pixel coordinates."""
    arr = validate_image(img)
    h, w = arr.shape[:2]
    if not (0 <= x1 < x2 <= w and 0 <= y1 < y2 <= h):
        raise DataError(f"bounding box ({x1},{y1},{x2},{y2}) outside {w}x{h} image")
    c1 = int(round_half_away(x1))
    r1 = int(round_half_away(y1))
    c2 = min(w, int(round_half_away(x2)))
    r2 = min(h, int(round_half_away(y2)))
    return arr[r1:r2, c1:c2].copy()


def add_gaussian_noise(img: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) pixel noise, clip to [0, 1]. Seeded, deterministic."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    arr = validate_image(img)
    if sigma == 0:
        return arr.copy()
    rng = np.random.default_rng(seed)
    return np.clip(arr + rng.normal(0.0, sigma, size=arr.shape), 0.0, 1.0)


def calibrate_noise_to_ssim(
    img: np.ndarray,
    target_ssim: float,
    tol: float,
    seed: int,
    max_steps: int = 40,
) -> float:
    """Find the noise sigma whose seeded application reaches `target_ssim`.

    Bisects sigma over [0, 0.5] until the measured SSIM is within `tol` of the
    target or `max_steps` steps have run. If the target is unreachable inside
    the range the best boundary sigma is returned and a warning is logged.
    """
    from .evalmetrics import ssim  # local import: evalmetrics depends on this module

    if not (0.0 < target_ssim <= 1.0):
        raise ValueError(f"target_ssim must be in (0, 1], got {target_ssim}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    arr = validate_image(img)
    if target_ssim >= 1.0:
        return 0.0

    lo, hi = 0.0, 0.5
    ssim_hi = ssim(arr, add_gaussian_noise(arr, hi, seed))
    if ssim_hi > target_ssim + tol:
        logger.warning(
            "target SSIM %.4f unreachable: sigma=%.3f still gives SSIM %.4f",
            target_ssim, hi, ssim_hi,
        )
        return hi

    best_sigma, best_err = hi, abs(ssim_hi - target_ssim)
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        val = ssim(arr, add_gaussian_noise(arr, mid, seed))
        err = abs(val - target_ssim)
        if err < best_err:
            best_sigma, best_err = mid, err
        if err <= tol:
            return mid
        if val > target_ssim:  # too clean, add more noise
            lo = mid
        else:
            hi = mid
    logger.warning(
        "noise calibration stopped after %d steps; best |SSIM-target| = %.5f",
        max_steps, best_err,
    )
    return best_sigma
