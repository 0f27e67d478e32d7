"""Noise schedule, timestep annealing and score-distillation gradients.

Timesteps are 1-based (``1 <= t <= T``); ``schedule.alpha_bar[t - 1]`` is
the cumulative signal fraction at step ``t``. The pretrained denoiser is
replaced by closed-form prior oracles, see :class:`PriorOracle`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._validation import (
    InvalidParameterError,
    check_count,
    check_image,
    check_same_shape,
)
from .render import upsample


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def abar(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise InvalidParameterError(f"timestep {t} outside [1, {self.T}]")
        return float(self.alpha_bar[t - 1])

    def signal_to_noise(self, t: int) -> float:
        """``sqrt(abar / (1 - abar))``: the factor by which an SDS residual is amplified at ``t``."""
        ab = self.abar(t)
        return math.sqrt(ab / (1.0 - ab))


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linear DDPM schedule."""
    T = check_count(T, "T", minimum=2)
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise InvalidParameterError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start!r}, {beta_end!r}")
    beta = np.linspace(beta_start, beta_end, T)
    alpha_bar = np.cumprod(1.0 - beta)
    beta.setflags(write=False)
    alpha_bar.setflags(write=False)
    return DiffusionSchedule(T, beta, alpha_bar)


def add_noise(x0, t: int, eps, sched: DiffusionSchedule) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    check_same_shape(x0, eps, ("x0", "eps"))
    ab = sched.abar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


@dataclass(frozen=True)
class AnnealState:
    T: int
    N: int = 100
    t_min: int = 1
    delta: int = 1
    integer_steps: bool = True

    def __post_init__(self):
        check_count(self.T, "T")
        check_count(self.N, "N")
        check_count(self.delta, "delta")
        if not 1 <= self.t_min <= self.T:
            raise InvalidParameterError(f"t_min must lie in [1, T], got {self.t_min}")


def lower_bound(iteration: int, ann: AnnealState) -> int:
    """Smallest timestep that may be sampled at ``iteration``.

    Starts at ``T`` and drops by ``delta`` every ``N`` iterations, never
    below ``t_min``. With ``integer_steps=False`` the drop is continuous
    (``iteration / N``) and the bound is rounded up to the next integer.
    """
    if iteration < 0:
        raise InvalidParameterError("iteration must be non-negative")
    if ann.integer_steps:
        lb = ann.T - (iteration // ann.N) * ann.delta
    else:
        lb = math.ceil(ann.T - iteration * ann.delta / ann.N)
    return max(ann.t_min, lb)


def sample_timestep(iteration: int, ann: AnnealState, rng: np.random.Generator,
                    anneal: bool = True) -> int:
    """Draw ``t`` uniformly from ``[lower_bound(iteration), T]``, or from ``[1, T]`` when not annealing."""
    lb = lower_bound(iteration, ann) if anneal else 1
    return int(rng.integers(lb, ann.T + 1))


@dataclass(frozen=True, eq=False)
class PriorOracle:
    """Closed-form stand-in for a super-resolution diffusion model's noise prediction.

    ``perfect`` predicts the noise that maps ``x_t`` back onto
    ``hr_reference``; ``noisy`` adds ``sigma_p`` times fresh unit normal
    noise to that; ``bicubic`` uses the bicubic upsampling of the
    low-resolution input as the reference.
    """

    mode: str = "perfect"
    hr_reference: np.ndarray | None = None
    sigma_p: float = 0.0

    def __post_init__(self):
        if self.mode not in ("perfect", "noisy", "bicubic"):
            raise InvalidParameterError(f"unknown prior mode {self.mode!r}")
        if self.sigma_p < 0:
            raise InvalidParameterError("sigma_p must be non-negative")
        if self.mode in ("perfect", "noisy"):
            if self.hr_reference is None:
                raise InvalidParameterError(f"{self.mode} prior needs an hr_reference image")
            object.__setattr__(self, "hr_reference", check_image(self.hr_reference, "hr_reference"))

    def reference(self, x_lr, shape) -> np.ndarray:
        if self.mode == "bicubic":
            x_lr = check_image(x_lr, "x_lr")
            factor = shape[0] // x_lr.shape[0]
            if x_lr.shape[0] * factor != shape[0] or x_lr.shape[1] * factor != shape[1]:
                raise InvalidParameterError("x_lr size is not an integer fraction of the render")
            return upsample(x_lr, factor, "bicubic")
        if self.hr_reference.shape != tuple(shape):
            raise InvalidParameterError(
                f"hr_reference shape {self.hr_reference.shape} does not match render {tuple(shape)}")
        return self.hr_reference


def prior_epsilon(oracle: PriorOracle, x_t, x_lr, t: int, sched: DiffusionSchedule,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    x_t = np.asarray(x_t, dtype=np.float64)
    ref = oracle.reference(x_lr, x_t.shape)
    ab = sched.abar(t)
    eps_hat = (x_t - math.sqrt(ab) * ref) / math.sqrt(1.0 - ab)
    if oracle.mode == "noisy" and oracle.sigma_p > 0:
        if rng is None:
            raise InvalidParameterError("noisy prior needs a random generator")
        eps_hat = eps_hat + oracle.sigma_p * rng.standard_normal(x_t.shape)
    return eps_hat


def sds_weight(t: int, sched: DiffusionSchedule, w_mode: str = "const") -> float:
    if w_mode == "const":
        return 1.0
    if w_mode == "one_minus_abar":
        return 1.0 - sched.abar(t)
    raise InvalidParameterError(f"unknown w_mode {w_mode!r}")


def sds_pixel_grad(x0, x_lr, t: int, oracle: PriorOracle, sched: DiffusionSchedule,
                   w_mode: str = "const", rng: np.random.Generator | None = None) -> np.ndarray:
    """Per-pixel score-distillation gradient ``w(t) * (eps_pred - eps)`` for render ``x0``.

    With the closed-form oracles the injected noise cancels:
    ``eps_pred - eps = sqrt(abar / (1 - abar)) * (x0 - ref)`` plus the noisy
    oracle's ``sigma_p`` term. That form is evaluated directly, so no
    cancellation error is left when ``x0`` equals the reference. Fed to the
    backward pass as ``dL/dimage`` (after scaling by the SDS weight).
    """
    x0 = check_image(x0, "x0")
    ref = oracle.reference(x_lr, x0.shape)
    grad = sched.signal_to_noise(t) * (x0 - ref)
    if oracle.mode == "noisy" and oracle.sigma_p > 0:
        if rng is None:
            raise InvalidParameterError("noisy prior needs a random generator")
        grad = grad + oracle.sigma_p * rng.standard_normal(x0.shape)
    return sds_weight(t, sched, w_mode) * grad
