"""Variance-preserving noise schedule and the continuous-time machinery.

The schedule is fixed to alpha(t) = sqrt(1 - t), sigma(t) = sqrt(t) on
t in [t_min, 1], so alpha^2 + sigma^2 == 1 identically and the latent at
t = 1 is exactly standard Gaussian. Functions here are pure and operate
elementwise, so they accept numpy arrays and torch tensors alike.

``ode_step`` is the deterministic reverse update

    x_{t'} = alpha_{t'} x0_hat + (sigma_{t'} / sigma_t) (x_t - alpha_t x0_hat),

which reduces to the identity at t' = t. A published variant that divides
the noise term by sigma_t^2 and flips its sign is available behind
``printed_variant=True`` for comparison; it does not reduce to the
identity and is presumed a transcription error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "NoiseSchedule",
    "alpha_sigma",
    "forward_corrupt",
    "ode_step",
    "renoise",
    "tweedie_score",
    "time_grid",
]


@dataclass(frozen=True)
class NoiseSchedule:
    t_min: float = 1e-3
    kind: str = "vp-linear"

    def __post_init__(self) -> None:
        if not 0.0 < self.t_min < 1.0:
            raise ValueError(f"t_min must lie in (0, 1), got {self.t_min}")
        if self.kind != "vp-linear":
            raise ValueError(f"unknown schedule kind {self.kind!r}")


def _check_t(s: NoiseSchedule, t: float, name: str = "t") -> None:
    if not s.t_min <= t <= 1.0:
        raise ValueError(f"{name}={t} outside schedule range [{s.t_min}, 1]")


def _alpha(t: float) -> float:
    return math.sqrt(1.0 - t)


def _sigma(t: float) -> float:
    return math.sqrt(t)


def alpha_sigma(s: NoiseSchedule, t: float) -> tuple[float, float]:
    """(alpha_t, sigma_t) = (sqrt(1 - t), sqrt(t)) for t in [t_min, 1]."""
    _check_t(s, t)
    return _alpha(t), _sigma(t)


def _same_shape(a, b) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def forward_corrupt(s: NoiseSchedule, x0, t: float, eps):
    """x_t = alpha_t x0 + sigma_t eps."""
    alpha, sigma = alpha_sigma(s, t)
    _same_shape(x0, eps)
    return alpha * x0 + sigma * eps


def ode_step(s: NoiseSchedule, x_t, x0_hat, t: float, t_next: float, *, printed_variant: bool = False):
    """Deterministic reverse step from t to t_next <= t.

    t_next may be exactly 0 (sigma(0) == 0), in which case the step lands
    on x0_hat; t itself must stay >= t_min so sigma_t > 0.
    """
    _check_t(s, t)
    if not 0.0 <= t_next <= t:
        raise ValueError(f"t_next={t_next} outside [0, t={t}]")
    _same_shape(x_t, x0_hat)
    if t_next == t:
        return x_t
    alpha_t, sigma_t = _alpha(t), _sigma(t)
    alpha_n, sigma_n = _alpha(t_next), _sigma(t_next)
    if printed_variant:
        return alpha_n * x0_hat + sigma_n * (alpha_t * x0_hat - x_t) / sigma_t**2
    return alpha_n * x0_hat + (sigma_n / sigma_t) * (x_t - alpha_t * x0_hat)


def renoise(s: NoiseSchedule, x_t, t: float, t_up: float, eps):
    """Re-noise x_t from level t up to t_up >= t.

    Uses (alpha_up / alpha_t) x_t + sqrt(sigma_up^2 - (alpha_up/alpha_t)^2
    sigma_t^2) eps, so the marginal at t_up matches a fresh forward
    corruption of the underlying clean signal. t may be exactly 0
    (re-noising a clean estimate).
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    if t > 0.0:
        _check_t(s, t)
    _check_t(s, t_up, "t_up")
    if t_up < t:
        raise ValueError(f"t_up={t_up} must be >= t={t}")
    _same_shape(x_t, eps)
    ratio = _alpha(t_up) / _alpha(t)
    radicand = _sigma(t_up) ** 2 - ratio**2 * _sigma(t) ** 2
    if radicand < 0.0:
        raise FloatingPointError(f"negative re-noise variance {radicand} (t={t}, t_up={t_up})")
    return ratio * x_t + math.sqrt(radicand) * eps


def tweedie_score(s: NoiseSchedule, x_t, e_hat, t: float, kappa: float):
    """Score of the noisy marginal from a class-probability denoiser:
    (alpha_t * kappa * e_hat - x_t) / sigma_t^2."""
    alpha, sigma = alpha_sigma(s, t)
    _same_shape(x_t, e_hat)
    lo = e_hat.min()
    hi = e_hat.max()
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"e_hat entries outside [0, 1]: min={lo}, max={hi}")
    return (alpha * kappa * e_hat - x_t) / sigma**2


def time_grid(s: NoiseSchedule, n_steps: int) -> np.ndarray:
    """Uniform grid of n_steps + 1 times from 1 down to t_min."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    return np.linspace(1.0, s.t_min, n_steps + 1)
