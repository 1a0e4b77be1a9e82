"""Difference-of-Gaussians keypoint detector and 128-d gradient descriptor.

Classic scale-space pipeline: Gaussian pyramid (3 scales per octave, base
sigma 1.6), DoG extrema with quadratic subpixel refinement, contrast and
edge-ratio rejection, 36-bin orientation assignment, and a 4x4x8 trilinearly
weighted gradient histogram descriptor (L2 normalized, clipped at 0.2,
renormalized). Everything is deterministic; coordinates are (x=column,
y=row) in input-image pixels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SiftParams:
    num_intervals: int = 3          # scales per octave
    base_sigma: float = 1.6
    assumed_blur: float = 0.5       # blur assumed present in the input
    contrast_threshold: float = 0.03
    edge_ratio: float = 10.0
    border: int = 5                 # ignore extrema this close to image edges
    max_octaves: int = 4
    min_octave_side: int = 16
    ori_bins: int = 36
    ori_peak_ratio: float = 0.8
    descr_width: int = 4
    descr_bins: int = 8
    descr_scale_mult: float = 3.0
    descr_clip: float = 0.2


@dataclass
class Keypoint:
    x: float            # column, input-image pixels
    y: float            # row
    scale: float        # absolute sigma in input-image pixels
    orientation: float  # radians in [0, 2*pi)
    response: float     # |interpolated DoG value|
    octave: int = 0
    layer: int = 1


def _num_octaves(shape, params: SiftParams) -> int:
    n = 0
    side = min(shape)
    while side >= params.min_octave_side and n < params.max_octaves:
        n += 1
        side //= 2
    return max(n, 1)


def build_gaussian_pyramid(gray: np.ndarray, params: SiftParams):
    """Per octave, num_intervals + 3 progressively blurred images."""
    sigma_diff = np.sqrt(max(params.base_sigma ** 2 - params.assumed_blur ** 2, 0.01))
    base = gaussian_filter(gray.astype(np.float64), sigma_diff, mode="nearest")
    k = 2.0 ** (1.0 / params.num_intervals)
    # incremental blur widths within one octave
    increments = []
    for i in range(1, params.num_intervals + 3):
        prev = params.base_sigma * k ** (i - 1)
        increments.append(np.sqrt((k * prev) ** 2 - prev ** 2))

    pyramid = []
    img = base
    for _ in range(_num_octaves(gray.shape, params)):
        octave = [img]
        for inc in increments:
            octave.append(gaussian_filter(octave[-1], inc, mode="nearest"))
        pyramid.append(octave)
        down = octave[params.num_intervals]          # sigma = 2 * base
        img = down[::2, ::2]
    return pyramid


def build_dog_pyramid(gaussian_pyramid):
    return [[b - a for a, b in zip(octave, octave[1:])] for octave in gaussian_pyramid]


def _candidate_mask(below, mid, above, threshold):
    """26-neighborhood extrema of the middle DoG layer, vectorized."""
    c = mid[1:-1, 1:-1]
    strong = np.abs(c) > threshold
    is_max = strong & (c > 0)
    is_min = strong & (c < 0)
    for arr in (below, mid, above):
        for di in range(3):
            for dj in range(3):
                if arr is mid and di == 1 and dj == 1:
                    continue
                n = arr[di : di + c.shape[0], dj : dj + c.shape[1]]
                is_max &= c >= n
                is_min &= c <= n
                if not (is_max.any() or is_min.any()):
                    return is_max  # all false
    return is_max | is_min


def _refine_extremum(dog_octave, i, j, layer, params: SiftParams):
    """Quadratic fit around (i, j, layer); returns (i, j, layer, offset, value, hessian_xy) or None."""
    h, w = dog_octave[0].shape
    for _ in range(5):
        below, mid, above = dog_octave[layer - 1], dog_octave[layer], dog_octave[layer + 1]
        dx = 0.5 * (mid[i, j + 1] - mid[i, j - 1])
        dy = 0.5 * (mid[i + 1, j] - mid[i - 1, j])
        ds = 0.5 * (above[i, j] - below[i, j])
        dxx = mid[i, j + 1] - 2 * mid[i, j] + mid[i, j - 1]
        dyy = mid[i + 1, j] - 2 * mid[i, j] + mid[i - 1, j]
        dss = above[i, j] - 2 * mid[i, j] + below[i, j]
        dxy = 0.25 * (mid[i + 1, j + 1] - mid[i + 1, j - 1] - mid[i - 1, j + 1] + mid[i - 1, j - 1])
        dxs = 0.25 * (above[i, j + 1] - above[i, j - 1] - below[i, j + 1] + below[i, j - 1])
        dys = 0.25 * (above[i + 1, j] - above[i - 1, j] - below[i + 1, j] + below[i - 1, j])
        grad = np.array([dx, dy, ds])
        hess = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
        try:
            offset = -np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return None
        if np.all(np.abs(offset) < 0.5):
            value = mid[i, j] + 0.5 * np.dot(grad, offset)
            return i, j, layer, offset, value, np.array([[dxx, dxy], [dxy, dyy]])
        j += int(round(offset[0]))
        i += int(round(offset[1]))
        layer += int(round(offset[2]))
        if (layer < 1 or layer > params.num_intervals
                or i < params.border or i >= h - params.border
                or j < params.border or j >= w - params.border):
            return None
    return None


def _orientations(gauss_img, row, col, scale_octave, params: SiftParams):
    """Peak directions of the Gaussian-weighted gradient histogram, in radians."""
    nbins = params.ori_bins
    sigma = 1.5 * scale_octave
    radius = int(round(3.0 * sigma))
    h, w = gauss_img.shape
    r0, r1 = max(row - radius, 1), min(row + radius + 1, h - 1)
    c0, c1 = max(col - radius, 1), min(col + radius + 1, w - 1)
    if r1 - r0 < 1 or c1 - c0 < 1:
        return []
    region = gauss_img[r0 - 1 : r1 + 1, c0 - 1 : c1 + 1]
    gx = 0.5 * (region[1:-1, 2:] - region[1:-1, :-2])
    gy = 0.5 * (region[2:, 1:-1] - region[:-2, 1:-1])
    mag = np.sqrt(gx * gx + gy * gy)
    ang = np.arctan2(gy, gx)  # (-pi, pi]
    yy, xx = np.mgrid[r0:r1, c0:c1]
    weight = np.exp(-((yy - row) ** 2 + (xx - col) ** 2) / (2.0 * sigma * sigma))
    bins = np.floor((ang + np.pi) / (2 * np.pi) * nbins).astype(int) % nbins
    hist = np.bincount(bins.ravel(), weights=(weight * mag).ravel(), minlength=nbins)

    smooth = hist.copy()
    for _ in range(2):
        smooth = (np.roll(smooth, 1) + smooth + np.roll(smooth, -1)) / 3.0
    peak_floor = params.ori_peak_ratio * smooth.max()
    out = []
    for b in range(nbins):
        left, right = smooth[(b - 1) % nbins], smooth[(b + 1) % nbins]
        if smooth[b] > left and smooth[b] > right and smooth[b] >= peak_floor:
            denom = left - 2 * smooth[b] + right
            interp = b + (0.5 * (left - right) / denom if denom != 0 else 0.0)
            theta = (interp + 0.5) / nbins * 2 * np.pi - np.pi
            out.append(theta % (2 * np.pi))
    return out


def detect_sift(gray: np.ndarray, params: SiftParams = SiftParams()) -> list:
    """Detect scale-space keypoints on a grayscale image (min side 32)."""
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2:
        raise ValueError("detect_sift expects a single-channel image")
    if min(gray.shape) < 32:
        raise ValueError(f"image {gray.shape} below the 32x32 detector minimum")

    gpyr = build_gaussian_pyramid(gray, params)
    dpyr = build_dog_pyramid(gpyr)
    prelim = 0.5 * params.contrast_threshold / params.num_intervals
    keypoints = []
    for octave_idx, dog_octave in enumerate(dpyr):
        h, w = dog_octave[0].shape
        if min(h, w) <= 2 * params.border:
            continue
        for layer in range(1, params.num_intervals + 1):
            mask = _candidate_mask(dog_octave[layer - 1], dog_octave[layer],
                                   dog_octave[layer + 1], prelim)
            cand = np.argwhere(mask) + 1  # offset from the 1-pixel rim
            for ci, cj in cand:
                if not (params.border <= ci < h - params.border
                        and params.border <= cj < w - params.border):
                    continue
                ref = _refine_extremum(dog_octave, int(ci), int(cj), layer, params)
                if ref is None:
                    continue
                ri, rj, rlayer, offset, value, hxy = ref
                if abs(value) * params.num_intervals < params.contrast_threshold:
                    continue
                tr, det = np.trace(hxy), np.linalg.det(hxy)
                r = params.edge_ratio
                if det <= 0 or tr * tr * r >= (r + 1) ** 2 * det:
                    continue
                scale_octave = params.base_sigma * 2.0 ** ((rlayer + offset[2]) / params.num_intervals)
                kp_scale = scale_octave * 2.0 ** octave_idx
                kx = (rj + offset[0]) * 2.0 ** octave_idx
                ky = (ri + offset[1]) * 2.0 ** octave_idx
                gauss_img = gpyr[octave_idx][rlayer]
                for theta in _orientations(gauss_img, ri, rj, scale_octave, params):
                    keypoints.append(Keypoint(
                        x=float(kx), y=float(ky), scale=float(kp_scale),
                        orientation=float(theta), response=float(abs(value)),
                        octave=octave_idx, layer=rlayer,
                    ))
    keypoints.sort(key=lambda k: (k.y, k.x, k.scale, k.orientation))
    return keypoints


def _descriptor_for(gauss_img, kp: Keypoint, params: SiftParams):
    """4x4x8 gradient histogram around the keypoint; None when support exits the image."""
    nbins = params.descr_bins
    width = params.descr_width
    h, w = gauss_img.shape
    scale_octave = kp.scale / 2.0 ** kp.octave
    row = kp.y / 2.0 ** kp.octave
    col = kp.x / 2.0 ** kp.octave
    hist_width = params.descr_scale_mult * scale_octave
    radius = int(round(hist_width * np.sqrt(2) * (width + 1) * 0.5))
    # clamp the window to the image; only keypoints whose center leaves the
    # valid gradient area are skipped, border windows are sampled partially
    r0, r1 = int(round(row)) - radius, int(round(row)) + radius + 1
    c0, c1 = int(round(col)) - radius, int(round(col)) + radius + 1
    r0, r1 = max(r0, 1), min(r1, h - 1)
    c0, c1 = max(c0, 1), min(c1, w - 1)
    if r1 - r0 < 2 or c1 - c0 < 2:
        return None

    yy, xx = np.mgrid[r0:r1, c0:c1]
    dy_off = yy - row
    dx_off = xx - col
    cos_t, sin_t = np.cos(kp.orientation), np.sin(kp.orientation)
    # rotate offsets into the keypoint frame
    rot_x = (cos_t * dx_off + sin_t * dy_off) / hist_width
    rot_y = (-sin_t * dx_off + cos_t * dy_off) / hist_width
    row_bin = rot_y + 0.5 * width - 0.5
    col_bin = rot_x + 0.5 * width - 0.5
    inside = (row_bin > -1) & (row_bin < width) & (col_bin > -1) & (col_bin < width)
    if not inside.any():
        return None

    gx = 0.5 * (gauss_img[r0:r1, c0 + 1 : c1 + 1] - gauss_img[r0:r1, c0 - 1 : c1 - 1])
    gy = 0.5 * (gauss_img[r0 + 1 : r1 + 1, c0:c1] - gauss_img[r0 - 1 : r1 - 1, c0:c1])
    mag = np.sqrt(gx * gx + gy * gy)
    theta = np.arctan2(gy, gx) - kp.orientation
    obin = (theta / (2 * np.pi) * nbins) % nbins
    weight = np.exp(-(rot_x ** 2 + rot_y ** 2) / (0.5 * width * width))

    rb, cb, ob = row_bin[inside], col_bin[inside], obin[inside]
    contrib = (weight * mag)[inside]
    hist = np.zeros((width + 2, width + 2, nbins))
    r_f = np.floor(rb).astype(int)
    c_f = np.floor(cb).astype(int)
    o_f = np.floor(ob).astype(int)
    r_d, c_d, o_d = rb - r_f, cb - c_f, ob - o_f
    for dr in (0, 1):
        wr = contrib * (r_d if dr else 1 - r_d)
        for dc in (0, 1):
            wc = wr * (c_d if dc else 1 - c_d)
            for do in (0, 1):
                wo = wc * (o_d if do else 1 - o_d)
                np.add.at(hist, (r_f + 1 + dr, c_f + 1 + dc, (o_f + do) % nbins), wo)

    vec = hist[1:-1, 1:-1, :].ravel()
    norm = np.linalg.norm(vec)
    if norm < 1e-12:
        return None
    vec = np.minimum(vec / norm, params.descr_clip)
    norm = np.linalg.norm(vec)
    return vec / max(norm, 1e-12)


def describe(gray: np.ndarray, keypoints, params: SiftParams = SiftParams()) -> np.ndarray:
    """Descriptors for keypoints detected on the same image, one row each.

    Keypoints whose support window leaves the image are skipped (logged);
    the returned array therefore may have fewer rows than keypoints.
    """
    gray = np.asarray(gray, dtype=np.float64)
    if not keypoints:
        return np.zeros((0, 128))
    gpyr = build_gaussian_pyramid(gray, params)
    out, skipped = [], 0
    for kp in keypoints:
        if kp.octave >= len(gpyr):
            skipped += 1
            continue
        vec = _descriptor_for(gpyr[kp.octave][kp.layer], kp, params)
        if vec is None:
            skipped += 1
            continue
        out.append(vec)
    if skipped:
        logger.info("describe: skipped %d keypoints with out-of-image support", skipped)
    return np.asarray(out) if out else np.zeros((0, 128))


def detect_and_describe(gray: np.ndarray, params: SiftParams = SiftParams()):
    """Convenience wrapper; returns (keypoints, descriptor matrix)."""
    kps = detect_sift(gray, params)
    return kps, describe(gray, kps, params)
