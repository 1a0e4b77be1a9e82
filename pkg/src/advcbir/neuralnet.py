"""Small deterministic convolutional feature extractor with exact input gradients.

The network is a stack of stride-2 convolutions and ReLUs finished by
generalized-mean pooling and L2 normalization, so the output is a unit-norm
global descriptor. Forward and reverse passes are written directly in numpy:
we only ever need the gradient with respect to the *input* (for perturbation
optimization), never with respect to the weights, which keeps the backward
pass small.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError

GEM_FLOOR = 1e-6  # clamp applied before the p-th power so gradients stay finite


@dataclass(frozen=True)
class ConvLayer:
    out_channels: int
    kernel: int
    stride: int
    padding: int


@dataclass(frozen=True)
class NetworkSpec:
    """Layer list for the extractor. Must end with gem_pool then l2_normalize.

    Entries are ("conv", ConvLayer), ("relu",), ("gem_pool", p) or
    ("l2_normalize",).
    """

    input_channels: int = 3
    layers: tuple = ()

    def validate(self) -> None:
        if len(self.layers) < 2:
            raise ConfigError("spec needs at least gem_pool and l2_normalize")
        if self.layers[-2][0] != "gem_pool" or self.layers[-1][0] != "l2_normalize":
            raise ConfigError("spec must end with gem_pool followed by l2_normalize")
        channels = self.input_channels
        for entry in self.layers[:-2]:
            kind = entry[0]
            if kind == "conv":
                conv = entry[1]
                if conv.out_channels < 1 or conv.kernel < 1 or conv.stride < 1 or conv.padding < 0:
                    raise ConfigError(f"bad conv parameters: {conv}")
                channels = conv.out_channels
            elif kind != "relu":
                raise ConfigError(f"unknown or misplaced layer: {entry}")
        if channels < 1:
            raise ConfigError("channel count collapsed to zero")

    @property
    def feature_dim(self) -> int:
        channels = self.input_channels
        for entry in self.layers:
            if entry[0] == "conv":
                channels = entry[1].out_channels
        return channels

    def min_input_size(self) -> int:
        """Smallest input side that keeps every conv output at least 2 pixels."""
        required = 2
        for entry in reversed(self.layers):
            if entry[0] == "conv":
                conv = entry[1]
                required = (required - 1) * conv.stride + conv.kernel - 2 * conv.padding
                required = max(required, 1)
        return required

    def to_json(self) -> str:
        out = []
        for entry in self.layers:
            if entry[0] == "conv":
                c = entry[1]
                out.append({"type": "conv", "out_channels": c.out_channels,
                            "kernel": c.kernel, "stride": c.stride, "padding": c.padding})
            elif entry[0] == "gem_pool":
                out.append({"type": "gem_pool", "p": entry[1]})
            else:
                out.append({"type": entry[0]})
        return json.dumps({"input_channels": self.input_channels, "layers": out})

    @staticmethod
    def from_json(text: str) -> "NetworkSpec":
        doc = json.loads(text)
        layers = []
        for item in doc["layers"]:
            kind = item["type"]
            if kind == "conv":
                layers.append(("conv", ConvLayer(item["out_channels"], item["kernel"],
                                                 item["stride"], item["padding"])))
            elif kind == "gem_pool":
                layers.append(("gem_pool", float(item["p"])))
            elif kind in ("relu", "l2_normalize"):
                layers.append((kind,))
            else:
                raise ConfigError(f"unknown layer type {kind!r}")
        spec = NetworkSpec(doc["input_channels"], tuple(layers))
        spec.validate()
        return spec


def default_spec() -> NetworkSpec:
    """3 conv layers (3->16->32->64, k=3, s=2, p=1) + ReLU + GeM(3) + L2 norm."""
    return NetworkSpec(3, (
        ("conv", ConvLayer(16, 3, 2, 1)), ("relu",),
        ("conv", ConvLayer(32, 3, 2, 1)), ("relu",),
        ("conv", ConvLayer(64, 3, 2, 1)), ("relu",),
        ("gem_pool", 3.0),
        ("l2_normalize",),
    ))


@dataclass
class NetworkWeights:
    spec: NetworkSpec
    seed: int
    kernels: list = field(default_factory=list)  # (out, in, k, k) per conv
    biases: list = field(default_factory=list)   # (out,) per conv


def init_network(spec: NetworkSpec, seed: int) -> NetworkWeights:
    """Kaiming-style fan-in-scaled uniform init from a seeded PCG64 generator."""
    spec.validate()
    rng = np.random.default_rng(seed)
    kernels, biases = [], []
    channels = spec.input_channels
    for entry in spec.layers:
        if entry[0] != "conv":
            continue
        conv = entry[1]
        fan_in = channels * conv.kernel * conv.kernel
        bound = np.sqrt(6.0 / fan_in)
        kernels.append(rng.uniform(-bound, bound,
                                   size=(conv.out_channels, channels, conv.kernel, conv.kernel)))
        biases.append(np.zeros(conv.out_channels))
        channels = conv.out_channels
    return NetworkWeights(spec=spec, seed=seed, kernels=kernels, biases=biases)


def save_weights(weights: NetworkWeights, path) -> None:
    """Write weights as a JSON shape header + flat little-endian float32 blob."""
    arrays = []
    for k, b in zip(weights.kernels, weights.biases):
        arrays.extend([k, b])
    header = json.dumps({
        "spec": json.loads(weights.spec.to_json()),
        "seed": weights.seed,
        "shapes": [list(a.shape) for a in arrays],
        "dtype": "<f4",
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_weights(path) -> NetworkWeights:
    with open(path, "rb") as fh:
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        spec = NetworkSpec.from_json(json.dumps(header["spec"]))
        kernels, biases = [], []
        for i, shape in enumerate(header["shapes"]):
            n = int(np.prod(shape))
            flat = np.frombuffer(fh.read(4 * n), dtype="<f4").astype(np.float64)
            arr = flat.reshape(shape)
            (kernels if i % 2 == 0 else biases).append(arr)
    return NetworkWeights(spec=spec, seed=header["seed"], kernels=kernels, biases=biases)


def _im2col(x: np.ndarray, kernel: int, stride: int, padding: int):
    """Turn (C, H, W) into a (C*k*k, out_h*out_w) patch matrix."""
    c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    out_h = (h + 2 * padding - kernel) // stride + 1
    out_w = (w + 2 * padding - kernel) // stride + 1
    s0, s1, s2 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(c, kernel, kernel, out_h, out_w),
        strides=(s0, s1, s2, s1 * stride, s2 * stride),
        writeable=False,
    )
    return windows.reshape(c * kernel * kernel, out_h * out_w), out_h, out_w


def _col2im(cols: np.ndarray, x_shape, kernel: int, stride: int, padding: int) -> np.ndarray:
    """Scatter-add the adjoint of _im2col back onto the (C, H, W) input."""
    c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    out_h = (hp - kernel) // stride + 1
    out_w = (wp - kernel) // stride + 1
    grad = np.zeros((c, hp, wp))
    cols = cols.reshape(c, kernel, kernel, out_h, out_w)
    for ki in range(kernel):
        for kj in range(kernel):
            grad[:, ki : ki + out_h * stride : stride, kj : kj + out_w * stride : stride] += cols[:, ki, kj]
    if padding:
        grad = grad[:, padding:-padding, padding:-padding]
    return grad


def _forward_with_cache(weights: NetworkWeights, x: np.ndarray):
    """Run the net on a (C, H, W) input, returning the feature and layer caches."""
    spec = weights.spec
    caches = []
    conv_idx = 0
    cur = x
    for li, entry in enumerate(spec.layers):
        kind = entry[0]
        if kind == "conv":
            conv = entry[1]
            kern = weights.kernels[conv_idx]
            bias = weights.biases[conv_idx]
            cols, out_h, out_w = _im2col(cur, conv.kernel, conv.stride, conv.padding)
            wmat = kern.reshape(conv.out_channels, -1)
            out = (wmat @ cols + bias[:, None]).reshape(conv.out_channels, out_h, out_w)
            caches.append(("conv", conv, kern, cur.shape))
            conv_idx += 1
            cur = out
        elif kind == "relu":
            caches.append(("relu", cur > 0))
            cur = np.maximum(cur, 0.0)
        elif kind == "gem_pool":
            p = entry[1]
            a = np.maximum(cur, GEM_FLOOR)
            mean_p = np.mean(a ** p, axis=(1, 2))
            pooled = mean_p ** (1.0 / p)
            caches.append(("gem_pool", p, a, cur > GEM_FLOOR, pooled))
            cur = pooled
        elif kind == "l2_normalize":
            norm = np.linalg.norm(cur)
            caches.append(("l2_normalize", cur / norm, norm))
            cur = cur / norm
        if not np.isfinite(cur).all():
            raise NumericError(f"non-finite activation after layer {li} ({kind})")
    return cur, caches


def _backward_to_input(weights: NetworkWeights, caches, d_out: np.ndarray) -> np.ndarray:
    grad = d_out
    for cache in reversed(caches):
        kind = cache[0]
        if kind == "l2_normalize":
            _, y, norm = cache
            grad = (grad - y * np.dot(y, grad)) / norm
        elif kind == "gem_pool":
            _, p, a, pass_mask, pooled = cache
            n = a.shape[1] * a.shape[2]
            # d pooled_k / d a_i = pooled_k^(1-p) * a_i^(p-1) / n, gated by the clamp
            scale = (grad * pooled ** (1.0 - p) / n)[:, None, None]
            grad = scale * a ** (p - 1.0) * pass_mask
        elif kind == "relu":
            grad = grad * cache[1]
        elif kind == "conv":
            _, conv, kern, x_shape = cache
            wmat = kern.reshape(conv.out_channels, -1)
            d_flat = grad.reshape(conv.out_channels, -1)
            d_cols = wmat.T @ d_flat
            grad = _col2im(d_cols, x_shape, conv.kernel, conv.stride, conv.padding)
    return grad


def _to_chw(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        img = img[:, :, None]
    return np.ascontiguousarray(np.moveaxis(img, 2, 0).astype(np.float64))


def _check_size(spec: NetworkSpec, img: np.ndarray) -> None:
    min_side = spec.min_input_size()
    if min(img.shape[0], img.shape[1]) < min_side:
        raise ValueError(
            f"input {img.shape[0]}x{img.shape[1]} below the spec minimum of {min_side}"
        )


def forward(weights: NetworkWeights, img: np.ndarray) -> np.ndarray:
    """Extract the unit-norm feature vector of an (H, W, 3) image in [0, 1]."""
    _check_size(weights.spec, img)
    feat, _ = _forward_with_cache(weights, _to_chw(img))
    return feat


def feature_distance_sq(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"feature dimension mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.dot(d, d))


def loss_and_grad(weights: NetworkWeights, x: np.ndarray, v: np.ndarray):
    """Distance loss ||f(x) - f(clamp(x+v))||^2 and its exact gradient wrt v.

    The perturbed image is clamped to [0, 1] inside the forward pass;
    coordinates pushed outside the range receive zero gradient.
    """
    if x.shape != v.shape:
        raise ValueError(f"perturbation shape {v.shape} does not match image {x.shape}")
    _check_size(weights.spec, x)
    raw = x + v
    clamped = np.clip(raw, 0.0, 1.0)
    f_orig, _ = _forward_with_cache(weights, _to_chw(x))
    f_pert, caches = _forward_with_cache(weights, _to_chw(clamped))
    diff = f_orig - f_pert
    loss = float(np.dot(diff, diff))
    d_feat = 2.0 * (f_pert - f_orig)
    d_input = _backward_to_input(weights, caches, d_feat)
    grad = np.moveaxis(d_input, 0, 2)
    if grad.ndim == 3 and v.ndim == 2:
        grad = grad[:, :, 0]
    grad = grad * ((raw >= 0.0) & (raw <= 1.0))
    return loss, grad


def grad_distance_wrt_perturbation(weights: NetworkWeights, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    return loss_and_grad(weights, x, v)[1]


class _BilinearResize:
    """Differentiable bilinear resample to a fixed (size, size) grid.

    Precomputes per-axis gather indices and weights (half-pixel convention,
    matching imagecore.resize); the adjoint scatter-adds with the same weights.
    """

    def __init__(self, in_h: int, in_w: int, size: int):
        self.in_h, self.in_w, self.size = in_h, in_w, size
        self.rows = self._axis_plan(in_h, size)
        self.cols = self._axis_plan(in_w, size)

    @staticmethod
    def _axis_plan(in_len: int, out_len: int):
        src = (np.arange(out_len, dtype=np.float64) + 0.5) * (in_len / out_len) - 0.5
        src = np.clip(src, 0.0, in_len - 1.0)
        i0 = np.floor(src).astype(np.intp)
        i1 = np.minimum(i0 + 1, in_len - 1)
        return i0, i1, src - i0

    def forward(self, img: np.ndarray) -> np.ndarray:
        r0, r1, rf = self.rows
        c0, c1, cf = self.cols
        rf = rf[:, None, None] if img.ndim == 3 else rf[:, None]
        out = img[r0] * (1.0 - rf) + img[r1] * rf
        cf = cf[None, :, None] if img.ndim == 3 else cf[None, :]
        return out[:, c0] * (1.0 - cf) + out[:, c1] * cf

    def backward(self, grad: np.ndarray) -> np.ndarray:
        r0, r1, rf = self.rows
        c0, c1, cf = self.cols
        cf = cf[None, :, None] if grad.ndim == 3 else cf[None, :]
        mid_shape = (self.size, self.in_w) + grad.shape[2:]
        mid = np.zeros(mid_shape)
        np.add.at(mid, (slice(None), c0), grad * (1.0 - cf))
        np.add.at(mid, (slice(None), c1), grad * cf)
        rf = rf[:, None, None] if grad.ndim == 3 else rf[:, None]
        out = np.zeros((self.in_h,) + mid_shape[1:])
        np.add.at(out, r0, mid * (1.0 - rf))
        np.add.at(out, r1, mid * rf)
        return out


class Extractor:
    """Feature extractor pairing network weights with a canonical input size.

    When `input_size` is set, images are bilinearly resampled to a square
    working resolution before the network runs, the way retrieval systems
    normalize incoming resolutions; gradients propagate through the resample.
    `input_size=None` extracts at native resolution.
    """

    def __init__(self, weights: NetworkWeights, input_size: int | None = None):
        self.weights = weights
        self.input_size = input_size

    def _plan(self, h: int, w: int):
        if self.input_size is None or (h == self.input_size and w == self.input_size):
            return None
        return _BilinearResize(h, w, self.input_size)

    def features(self, img: np.ndarray) -> np.ndarray:
        plan = self._plan(img.shape[0], img.shape[1])
        work = plan.forward(img) if plan is not None else img
        return forward(self.weights, work)

    def loss_and_grad(self, x: np.ndarray, v: np.ndarray):
        plan = self._plan(x.shape[0], x.shape[1])
        if plan is None:
            return loss_and_grad(self.weights, x, v)
        if x.shape != v.shape:
            raise ValueError(f"perturbation shape {v.shape} does not match image {x.shape}")
        raw = x + v
        clamped = np.clip(raw, 0.0, 1.0)
        f_orig, _ = _forward_with_cache(self.weights, _to_chw(plan.forward(x)))
        f_pert, caches = _forward_with_cache(self.weights, _to_chw(plan.forward(clamped)))
        diff = f_orig - f_pert
        loss = float(np.dot(diff, diff))
        d_input = _backward_to_input(self.weights, caches, 2.0 * (f_pert - f_orig))
        grad = plan.backward(np.moveaxis(d_input, 0, 2))
        if grad.ndim == 3 and v.ndim == 2:
            grad = grad[:, :, 0]
        grad = grad * ((raw >= 0.0) & (raw <= 1.0))
        return loss, grad


def finite_diff_gradient(weights: NetworkWeights, x: np.ndarray, v: np.ndarray,
                         h: float, coords=None) -> np.ndarray:
    """Central-difference gradient of the distance loss, for use as a test oracle.

    Probes every coordinate unless `coords` (a list of index tuples) narrows it
    down; unprobed entries are left at zero.
    """
    if h <= 0:
        raise ValueError("finite difference step h must be > 0")
    grad = np.zeros_like(v, dtype=np.float64)
    if coords is None:
        coords = list(np.ndindex(v.shape))

    def loss_at(vv):
        clamped = np.clip(x + vv, 0.0, 1.0)
        f0, _ = _forward_with_cache(weights, _to_chw(x))
        f1, _ = _forward_with_cache(weights, _to_chw(clamped))
        return feature_distance_sq(f0, f1)

    for idx in coords:
        vp = v.copy()
        vm = v.copy()
        vp[idx] += h
        vm[idx] -= h
        grad[idx] = (loss_at(vp) - loss_at(vm)) / (2.0 * h)
    return grad
