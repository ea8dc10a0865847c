"""DP-SGD: per-sample clipping, calibrated Gaussian noise on the summed
mini-batch gradient, and naive sequential composition accounting.

Noise scale: sigma = C * sqrt(ln(1.25/delta)) / epsilon, drawn by Box-Muller
from the seeded generator. Noise is added to the *sum* of clipped per-sample
gradients, not the mean.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .budget import Mechanism, PrivacyBudget
from .corpus import QaPair, Vocab
from .errors import ConfigurationError, NumericError
from .lm import Params, build_samples

_NOISE_STREAM_TAG = 0x6E6F6973  # distinguishes the noise stream from shuffles


@dataclass(frozen=True)
class DpSgdConfig:
    clip_norm: float
    epsilon: float
    delta: float
    lr: float
    batch_size: int
    seed: int
    dataset_size: int

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ConfigurationError("clip_norm must be positive")
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be positive")
        if self.dataset_size < 1:
            raise ConfigurationError("dataset_size must be >= 1")
        if not 0.0 < self.delta < 1.0 / self.dataset_size:
            raise ConfigurationError(
                f"delta must be in (0, 1/|D|) = (0, {1.0 / self.dataset_size:g}), "
                f"got {self.delta}")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.seed < 0:
            raise ConfigurationError("seed must be >= 0")


def clip_gradient(grad: np.ndarray, clip_norm: float) -> np.ndarray:
    """g * min(1, C/||g||_2); inputs already within the ball pass unchanged."""
    if clip_norm <= 0:
        raise ConfigurationError("clip_norm must be positive")
    g = np.asarray(grad, dtype=np.float64)
    if not np.isfinite(g).all():
        raise NumericError("non-finite gradient cannot be clipped")
    norm = float(np.linalg.norm(g))
    if norm <= clip_norm:
        return g.copy()
    return g * (clip_norm / norm)


def noise_sigma(clip_norm: float, epsilon: float, delta: float) -> float:
    """sigma = C * sqrt(ln(1.25/delta)) / epsilon (natural log)."""
    if clip_norm <= 0 or epsilon <= 0 or delta <= 0:
        raise ConfigurationError("clip_norm, epsilon and delta must be positive")
    if delta >= 1.25:
        raise ConfigurationError(f"delta = {delta} makes ln(1.25/delta) nonpositive")
    return clip_norm * math.sqrt(math.log(1.25 / delta)) / epsilon


def gaussian_noise(rng: np.random.Generator, n: int, sigma: float) -> np.ndarray:
    """n iid N(0, sigma^2) draws via Box-Muller on the generator's uniforms."""
    if sigma == 0.0:
        return np.zeros(n)
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)  # (0, 1]: keeps the log finite
    u2 = rng.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(2 * m)
    z[0::2] = r * np.cos(2.0 * np.pi * u2)
    z[1::2] = r * np.sin(2.0 * np.pi * u2)
    return sigma * z[:n]


def dp_step(params: Params, contexts: np.ndarray, targets: np.ndarray,
            cfg: DpSgdConfig, noise_rng: np.random.Generator,
            sigma: float | None = None) -> Params:
    """One noisy update on a mini-batch (the last batch of an epoch may be
    smaller than cfg.batch_size)."""
    if sigma is None:
        sigma = noise_sigma(cfg.clip_norm, cfg.epsilon, cfg.delta)
    _, summed = kernels.clipped_grad_sum(*params.arrays(), contexts, targets,
                                         cfg.clip_norm)
    noisy = summed + gaussian_noise(noise_rng, summed.size, sigma)
    out = params.copy()
    out.add_flat_(noisy, -cfg.lr)
    return out


def train_dp(params: Params, pairs: Sequence[QaPair], vocab: Vocab, epochs: int,
             cfg: DpSgdConfig, log_file=None) -> tuple[Params, PrivacyBudget]:
    """DP-SGD over shuffled batches for `epochs` epochs.

    Returns the final parameters and the naively composed privacy budget
    (epsilon and delta add across steps).
    """
    if epochs < 0:
        raise ConfigurationError("epochs must be >= 0")
    out = params.copy()
    steps = 0
    if epochs > 0:
        if not pairs:
            raise ConfigurationError("cannot train on an empty pair list")
        contexts, targets = build_samples(pairs, vocab, out.context_k())
        n = len(targets)
        sigma = noise_sigma(cfg.clip_norm, cfg.epsilon, cfg.delta)
        noise_rng = np.random.default_rng([cfg.seed, _NOISE_STREAM_TAG])
        log_fh = open(log_file, "a") if log_file is not None else None
        try:
            for e in range(epochs):
                order = np.random.default_rng([cfg.seed, e]).permutation(n)
                for lo in range(0, n, cfg.batch_size):
                    idx = order[lo:lo + cfg.batch_size]
                    out = dp_step(out, contexts[idx], targets[idx], cfg,
                                  noise_rng, sigma=sigma)
                    steps += 1
                    if not out.all_finite():
                        raise NumericError("parameters diverged under DP-SGD",
                                           step=steps)
                    if log_fh is not None:
                        log_fh.write(json.dumps({
                            "step": steps, "epsilon": cfg.epsilon,
                            "delta": cfg.delta,
                            "composed_epsilon": steps * cfg.epsilon,
                        }) + "\n")
        finally:
            if log_fh is not None:
                log_fh.close()
    budget = PrivacyBudget.compose(Mechanism.DP_SGD, cfg.epsilon, cfg.delta, steps)
    return out, budget
