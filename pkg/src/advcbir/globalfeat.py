"""Global image descriptors: a simplified color+edge histogram and a
Gabor-energy scene descriptor, plus distance-based ranking.

The color+edge histogram works on 2x2 blocks of a 240x240 working image:
each block gets one of six texture classes from five MPEG-7-style 2x2 edge
filters and one of 24 fuzzy HSV color bins, accumulated into a 144-bin
L1-normalized histogram. The scene descriptor applies a frequency-domain
Gabor bank (4 scales x 8 orientations over 180 degrees) to a 128x128
grayscale working image and averages squared responses over a 4x4 grid.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import DataError
from .imagecore import _bilinear_axis, to_grayscale, validate_image

CEDD_WORK_SIZE = 240
CEDD_EDGE_THRESHOLD = 14.0 / 255.0
CEDD_BINS = 144  # 6 texture classes x 24 color bins

GIST_WORK_SIZE = 128
GIST_SCALES = 4
GIST_ORIENTATIONS = 8
GIST_GRID = 4

# texture classes
TEX_NO_EDGE, TEX_NON_DIR, TEX_HORIZONTAL, TEX_VERTICAL, TEX_DIAG45, TEX_DIAG135 = range(6)

_SQRT2 = np.sqrt(2.0)


def _rgb_to_hsv(rgb: np.ndarray):
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    delta = maxc - minc
    v = maxc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    h = np.zeros_like(maxc)
    safe = delta > 0
    rc = np.where(safe, (maxc - r) / np.where(safe, delta, 1.0), 0.0)
    gc = np.where(safe, (maxc - g) / np.where(safe, delta, 1.0), 0.0)
    bc = np.where(safe, (maxc - b) / np.where(safe, delta, 1.0), 0.0)
    h = np.where(maxc == r, bc - gc, h)
    h = np.where((maxc == g) & safe, 2.0 + rc - bc, h)
    h = np.where((maxc == b) & safe, 4.0 + gc - rc, h)
    h = (h / 6.0) % 1.0
    return h * 360.0, s, v


# hue family boundaries in degrees: red wraps around 0
_HUE_FAMILIES = [  # (family index, lo, hi)
    (0, 340.0, 360.0), (0, 0.0, 20.0),   # red
    (1, 20.0, 45.0),                      # orange
    (2, 45.0, 75.0),                      # yellow
    (3, 75.0, 165.0),                     # green
    (4, 165.0, 200.0),                    # cyan
    (5, 200.0, 275.0),                    # blue
    (6, 275.0, 340.0),                    # magenta
]


def _fuzzy_color_bins(rgb_blocks: np.ndarray) -> np.ndarray:
    """24-bin color index per block: white/grey/black + 7 hues x 3 lightness."""
    h, s, v = _rgb_to_hsv(rgb_blocks)
    bins = np.zeros(h.shape, dtype=np.intp)
    black = v < 0.12
    achroma = ~black & (s < 0.10)
    white = achroma & (v >= 0.72)
    grey = achroma & ~white
    bins[white] = 0
    bins[grey] = 1
    bins[black] = 2
    chroma = ~black & ~achroma
    family = np.zeros(h.shape, dtype=np.intp)
    for fam, lo, hi in _HUE_FAMILIES:
        family[(h >= lo) & (h < hi)] = fam
    light = (v >= 0.72) & (s < 0.55)
    dark = v < 0.38
    variant = np.where(light, 0, np.where(dark, 2, 1))
    bins[chroma] = 3 + family[chroma] * 3 + variant[chroma]
    return bins


def _texture_classes(gray: np.ndarray) -> np.ndarray:
    """Per-2x2-block texture class from five directional edge filters."""
    a = gray[0::2, 0::2]
    b = gray[0::2, 1::2]
    c = gray[1::2, 0::2]
    d = gray[1::2, 1::2]
    responses = np.stack([
        np.abs(2.0 * a - 2.0 * b - 2.0 * c + 2.0 * d),       # non-directional
        np.abs(a + b - c - d),                               # horizontal edge
        np.abs(a - b + c - d),                               # vertical edge
        np.abs(_SQRT2 * a - _SQRT2 * d),                     # 45 degrees
        np.abs(_SQRT2 * b - _SQRT2 * c),                     # 135 degrees
    ])
    strongest = np.argmax(responses, axis=0)
    peak = np.max(responses, axis=0)
    classes = np.where(peak < CEDD_EDGE_THRESHOLD, TEX_NO_EDGE, strongest + 1)
    return classes


def cedd(img: np.ndarray) -> np.ndarray:
    """144-bin color+edge histogram (24 colors x 6 textures), L1-normalized.

    Images larger than the 240x240 working size are downsampled to it; smaller
    images are analyzed at native resolution (trimmed to even dimensions for
    the 2x2 blocks). Upsampling small images would interpolate away exactly
    the pixel-level structure the edge filters measure.
    """
    arr = validate_image(img)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if max(arr.shape[:2]) > CEDD_WORK_SIZE:
        work = _resize_to(arr, CEDD_WORK_SIZE)
    else:
        work = arr[: arr.shape[0] // 2 * 2, : arr.shape[1] // 2 * 2]
    gray = to_grayscale(work)
    classes = _texture_classes(gray)
    block_rgb = 0.25 * (work[0::2, 0::2] + work[0::2, 1::2] + work[1::2, 0::2] + work[1::2, 1::2])
    colors = _fuzzy_color_bins(block_rgb)
    hist = np.bincount((classes * 24 + colors).ravel(), minlength=CEDD_BINS).astype(np.float64)
    total = hist.sum()
    if total == 0:
        return np.full(CEDD_BINS, 1.0 / CEDD_BINS)
    return hist / total


def _resize_to(arr: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resample to an exact square, without the public 400% scale cap."""
    out = _bilinear_axis(arr, side, axis=0)
    out = _bilinear_axis(out, side, axis=1)
    return np.clip(out, 0.0, 1.0)


def _gabor_bank(n: int):
    fy = np.fft.fftfreq(n) * n  # cycles per image
    fx = np.fft.fftfreq(n) * n
    fyy, fxx = np.meshgrid(fy, fx, indexing="ij")
    radius = np.sqrt(fxx * fxx + fyy * fyy)
    radius[0, 0] = 1.0  # avoid log(0); the DC bin is zeroed below
    angle = np.arctan2(fyy, fxx)

    sigma_f = 0.45   # log-radial bandwidth
    sigma_t = 0.40   # angular bandwidth (radians)
    filters = []
    for s in range(GIST_SCALES):
        f_center = n / 4.0 / (2.0 ** s)
        radial = np.exp(-((np.log(radius / f_center)) ** 2) / (2.0 * sigma_f ** 2))
        for o in range(GIST_ORIENTATIONS):
            theta = o * np.pi / GIST_ORIENTATIONS
            # pi-periodic angular distance keeps the filter symmetric (real response)
            d = np.angle(np.exp(2j * (angle - theta))) / 2.0
            g = radial * np.exp(-(d ** 2) / (2.0 * sigma_t ** 2))
            g[0, 0] = 0.0
            filters.append(g)
    return filters


_BANK_CACHE: dict = {}


def gist(img: np.ndarray) -> np.ndarray:
    """512-value Gabor-energy descriptor: 4 scales x 8 orientations x 4x4 grid."""
    arr = validate_image(img)
    gray = to_grayscale(arr) if arr.ndim == 3 else arr
    if gray.shape != (GIST_WORK_SIZE, GIST_WORK_SIZE):
        gray = _resize_to(gray, GIST_WORK_SIZE)
    if GIST_WORK_SIZE not in _BANK_CACHE:
        _BANK_CACHE[GIST_WORK_SIZE] = _gabor_bank(GIST_WORK_SIZE)
    filters = _BANK_CACHE[GIST_WORK_SIZE]

    spectrum = np.fft.fft2(gray)
    cell = GIST_WORK_SIZE // GIST_GRID
    out = np.empty(GIST_SCALES * GIST_ORIENTATIONS * GIST_GRID * GIST_GRID)
    pos = 0
    for g in filters:
        response = np.fft.ifft2(spectrum * g).real
        energy = response * response
        pooled = energy.reshape(GIST_GRID, cell, GIST_GRID, cell).mean(axis=(1, 3))
        out[pos : pos + GIST_GRID * GIST_GRID] = pooled.ravel()
        pos += GIST_GRID * GIST_GRID
    return out


def rank_by_global(query_vec: np.ndarray, collection_vecs: dict, metric: str):
    """Rank collection entries by ascending distance to the query vector.

    `metric` is "l1" (color+edge histograms) or "l2" (Gabor descriptors);
    ties break by ascending image id.
    """
    query_vec = np.asarray(query_vec, dtype=np.float64)
    if metric not in ("l1", "l2"):
        raise ValueError(f"unknown metric {metric!r}")
    rows = []
    for name, vec in collection_vecs.items():
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != query_vec.shape:
            raise DataError(f"vector shape mismatch for {name!r}: {vec.shape} vs {query_vec.shape}")
        if metric == "l1":
            dist = float(np.sum(np.abs(query_vec - vec)))
        else:
            dist = float(np.sqrt(np.sum((query_vec - vec) ** 2)))
        rows.append((dist, name))
    rows.sort(key=lambda t: (t[0], t[1]))
    return [(name, dist) for dist, name in rows]


def save_vectors_jsonl(path, vectors: dict, kind: str) -> None:
    """One {"id", "kind", "vector"} JSON object per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for name in vectors:
            fh.write(json.dumps({
                "id": name, "kind": kind,
                "vector": [round(float(v), 10) for v in np.asarray(vectors[name])],
            }) + "\n")


def load_vectors_jsonl(path):
    vectors, kind = {}, None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            if kind is None:
                kind = doc["kind"]
            elif doc["kind"] != kind:
                raise DataError(f"mixed vector kinds in {path}: {kind!r} vs {doc['kind']!r}")
            vectors[doc["id"]] = np.asarray(doc["vector"])
    return vectors, kind
