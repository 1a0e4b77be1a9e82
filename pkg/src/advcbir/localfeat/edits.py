"""Keypoint forensics: removal by local smoothing, injection of fake blobs,
and color recovery for images modified in grayscale."""

from __future__ import annotations

import json
import logging

import numpy as np
from scipy.ndimage import gaussian_filter

from ..imagecore import to_grayscale, validate_image
from .sift import Keypoint

logger = logging.getLogger(__name__)


def remove_keypoints_smoothing(gray: np.ndarray, keypoints, sigma_smooth: float = 1.2) -> np.ndarray:
    """Blur only inside discs around the given keypoints.

    Each keypoint contributes a disc of radius 3 * scale with a 2-pixel linear
    feather; pixels outside every disc are returned bit-exact.
    """
    gray = np.asarray(gray, dtype=np.float64)
    if not keypoints:
        return gray.copy()
    h, w = gray.shape
    yy, xx = np.mgrid[0:h, 0:w]
    blend = np.zeros((h, w))
    for kp in keypoints:
        radius = 3.0 * kp.scale
        dist = np.sqrt((yy - kp.y) ** 2 + (xx - kp.x) ** 2)
        # 1 inside the disc, linear falloff over the 2 px feather, 0 beyond
        local = np.clip((radius + 2.0 - dist) / 2.0, 0.0, 1.0)
        np.maximum(blend, local, out=blend)
    blurred = gaussian_filter(gray, sigma_smooth, mode="nearest")
    out = np.where(blend > 0, (1.0 - blend) * gray + blend * blurred, gray)
    return np.clip(out, 0.0, 1.0)


def inject_keypoints(gray: np.ndarray, count: int, seed: int,
                     amplitude: float = 0.06, sigma: float = 2.0) -> np.ndarray:
    """Add `count` small DoG-shaped bumps at seeded random positions.

    The bump is a flat-topped center lobe (radius 1.6 * sigma) with an
    opposing surround ring, scaled so the largest pixel change is exactly
    `amplitude`; a plain Gaussian profile at this amplitude sits below the
    detector's contrast threshold. Bumps stay at least 16 px from the
    borders; if the image is too small to place any, a warning is logged.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    gray = np.asarray(gray, dtype=np.float64)
    out = gray.copy()
    if count == 0:
        return out
    h, w = gray.shape
    margin = 16
    if h - 2 * margin < 1 or w - 2 * margin < 1:
        logger.warning("inject_keypoints: image %dx%d too small, placed 0 of %d", h, w, count)
        return out

    rng = np.random.default_rng(seed)
    rows = rng.integers(margin, h - margin, size=count)
    cols = rng.integers(margin, w - margin, size=count)
    signs = rng.choice([-1.0, 1.0], size=count)

    r_in, r_out = 1.6 * sigma, 3.2 * sigma
    rad = int(np.ceil(2.5 * r_in))
    yy, xx = np.mgrid[-rad : rad + 1, -rad : rad + 1]
    r = np.sqrt(yy * yy + xx * xx)
    bump = 1.0 / (1.0 + (r / r_in) ** 6) - 0.35 / (1.0 + (r / r_out) ** 6)
    bump *= amplitude / np.abs(bump).max()

    for row, col, s in zip(rows, cols, signs):
        r0, c0 = row - rad, col - rad
        patch = out[r0 : r0 + bump.shape[0], c0 : c0 + bump.shape[1]]
        patch += s * bump[: patch.shape[0], : patch.shape[1]]
    np.clip(out, 0.0, 1.0, out=out)
    # clipping at [0,1] could exceed the amplitude contract; re-impose it
    np.clip(out, gray - amplitude, gray + amplitude, out=out)
    return out


def recover_color(original: np.ndarray, modified_gray: np.ndarray) -> np.ndarray:
    """Put color back onto a grayscale-modified image by per-pixel scaling.

    Every channel is multiplied by alpha = modified / gray(original) and
    clipped to [0, 1]; near-black pixels (gray < 1/255) take the modified
    value directly on all channels. Clipped pixel counts are logged.
    """
    original = validate_image(original, "original")
    modified_gray = np.asarray(modified_gray, dtype=np.float64)
    if original.ndim != 3:
        raise ValueError("original must be a 3-channel image")
    if original.shape[:2] != modified_gray.shape:
        raise ValueError(
            f"dimension mismatch: {original.shape[:2]} vs {modified_gray.shape}")

    gray = to_grayscale(original)
    dark = gray < 1.0 / 255.0
    safe_gray = np.where(dark, 1.0, gray)
    alpha = modified_gray / safe_gray
    out = original * alpha[:, :, None]
    out[dark] = modified_gray[dark, None]
    clipped = int(np.sum(np.any((out < 0.0) | (out > 1.0), axis=2)))
    if clipped:
        logger.info("recover_color: %d pixels clipped to [0, 1]", clipped)
    return np.clip(out, 0.0, 1.0)


def grayscale_consistency_mask(original: np.ndarray, recovered: np.ndarray) -> np.ndarray:
    """True where recover_color could not have clipped (used by verification)."""
    gray = to_grayscale(original)
    dark = gray < 1.0 / 255.0
    return ~dark & np.all(recovered > 0.0, axis=2) & np.all(recovered < 1.0, axis=2)


def save_features_jsonl(path, keypoints, descriptors) -> None:
    """One JSON object per line: keypoint fields plus its descriptor."""
    descriptors = np.asarray(descriptors)
    if len(keypoints) != len(descriptors):
        raise ValueError("keypoint/descriptor count mismatch")
    with open(path, "w", encoding="utf-8") as fh:
        for kp, desc in zip(keypoints, descriptors):
            fh.write(json.dumps({
                "x": kp.x, "y": kp.y, "scale": kp.scale,
                "orientation": kp.orientation, "response": kp.response,
                "octave": kp.octave, "layer": kp.layer,
                "descriptor": [round(float(v), 8) for v in desc],
            }) + "\n")


def load_features_jsonl(path):
    keypoints, descs = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            keypoints.append(Keypoint(
                x=doc["x"], y=doc["y"], scale=doc["scale"],
                orientation=doc["orientation"], response=doc["response"],
                octave=doc["octave"], layer=doc["layer"],
            ))
            descs.append(doc["descriptor"])
    return keypoints, (np.asarray(descs) if descs else np.zeros((0, 128)))
