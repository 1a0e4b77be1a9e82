"""Adversarial query generation: L-infinity-bounded feature-distance ascent.

Starting from a seeded random perturbation, each iteration takes an Adam
ascent step on ||f(x) - f(x+v)||^2 and projects v back into the epsilon box.
Two finalizations are provided: a plain x10 magnification, and a refined
variant that rounds each surviving component up to the nearest 8-bit
quantization step so the perturbation cannot be rounded away on save.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from . import neuralnet

# Half a quantization step: anything smaller rounds to zero on save anyway.
REFINE_THRESHOLD = 1.0 / 510.0

# With epsilon = 2/255 the canonical Adam rate (0.01) pins every coordinate to
# the box boundary within one step, erasing the iteration-count trade-off.
# The default below keeps coordinates moving over hundreds of iterations.
DEFAULT_LEARNING_RATE = 5e-5


@dataclass(frozen=True)
class PireConfig:
    iterations: int = 500
    epsilon: float = 2.0 / 255.0
    learning_rate: float = DEFAULT_LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    finalize_mode: str = "refined"  # or "original_x10"

    def validate(self) -> None:
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if not (0.0 < self.epsilon <= 0.1):
            raise ConfigError(f"epsilon must be in (0, 0.1], got {self.epsilon}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.finalize_mode not in ("original_x10", "refined"):
            raise ConfigError(f"unknown finalize_mode {self.finalize_mode!r}")


@dataclass
class PireTrace:
    losses: list = field(default_factory=list)      # L(v_i) at the start of iteration i
    linf_norms: list = field(default_factory=list)  # ||v||_inf after each projection
    final_loss: float = 0.0

    @property
    def iterations_executed(self) -> int:
        return len(self.losses)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @staticmethod
    def fresh(shape) -> "AdamState":
        return AdamState(m=np.zeros(shape), v=np.zeros(shape), step=0)


def clip_linf(v: np.ndarray, epsilon: float) -> np.ndarray:
    """Componentwise projection onto the L-infinity ball of radius epsilon."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return np.clip(v, -epsilon, epsilon)


def adam_step(v: np.ndarray, grad: np.ndarray, state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """One bias-corrected Adam step in the *ascent* direction. Returns (v', state')."""
    if v.shape != grad.shape:
        raise ValueError(f"shape mismatch: v {v.shape} vs grad {grad.shape}")
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    s = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    s_hat = s / (1.0 - beta2 ** step)
    v_new = v + lr * m_hat / (np.sqrt(s_hat) + eps)
    return v_new, AdamState(m=m, v=s, step=step)


def finalize_original(v: np.ndarray) -> np.ndarray:
    """The plain magnification: 10 * v."""
    return 10.0 * v


def finalize_refined(v: np.ndarray) -> np.ndarray:
    """Round each component up to the nearest 1/255 step; zero out sub-threshold ones.

    Components with |v| <= 1/510 would round to zero on 8-bit save regardless,
    so they are dropped; everything else is placed exactly on a quantization
    step, the smallest one at least as large as |v|.
    """
    mag = np.abs(v)
    steps = np.ceil(mag * 255.0) / 255.0
    out = np.sign(v) * steps
    out[mag <= REFINE_THRESHOLD] = 0.0
    return out


def finalize(v: np.ndarray, mode: str) -> np.ndarray:
    if mode == "original_x10":
        return finalize_original(v)
    if mode == "refined":
        return finalize_refined(v)
    raise ConfigError(f"unknown finalize_mode {mode!r}")


def pire(x: np.ndarray, extractor, config: PireConfig):
    """Generate an adversarial version of image x against the given extractor.

    `extractor` is either a neuralnet.Extractor or bare NetworkWeights.
    Returns (adversarial_image, v_final, trace) where v_final is the raw
    optimized perturbation (pre-finalization, inside the epsilon box) and
    adversarial_image = clamp(x + finalize(v_final), 0, 1). Fully
    deterministic given (x, extractor, config).
    """
    config.validate()
    if isinstance(extractor, neuralnet.NetworkWeights):
        extractor = neuralnet.Extractor(extractor)
    rng = np.random.default_rng(config.seed)
    v = rng.uniform(-config.epsilon, config.epsilon, size=x.shape)
    state = AdamState.fresh(x.shape)
    trace = PireTrace()

    for it in range(config.iterations):
        loss, grad = extractor.loss_and_grad(x, v)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss at iteration {it}")
        trace.losses.append(loss)
        v, state = adam_step(v, grad, state, config.learning_rate,
                             config.beta1, config.beta2, config.adam_eps)
        v = clip_linf(v, config.epsilon)
        trace.linf_norms.append(float(np.abs(v).max()))

    trace.final_loss, _ = extractor.loss_and_grad(x, v)
    adversarial = np.clip(x + finalize(v, config.finalize_mode), 0.0, 1.0)
    return adversarial, v, trace
