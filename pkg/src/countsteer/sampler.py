"""Variance-exploding noise schedule and reverse-diffusion sampling loop.

Conventions used throughout the package:

* A latent is a float64 array of shape ``(channels, height, width)``; the
  "latent" space is image space (no autoencoder).
* Noising is variance exploding: ``z_t = z_0 + sigma_t * eta``, so the
  one-shot clean estimate ``z0_hat = z_t - sigma_t * eps`` is exact.
* The step index ``t`` counts remaining noise levels: ``t = T`` is pure
  noise, ``t = 0`` is clean. A sampling segment covers the half-open range
  ``(t_start, t_end]`` and performs exactly ``t_start - t_end`` denoiser
  evaluations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

Grid = np.ndarray
Denoiser = Callable[[int, Grid, "object"], Grid]


class SamplerMode(str, Enum):
    """Reverse-process transition type."""

    DETERMINISTIC = "deterministic"
    STOCHASTIC = "stochastic"


@dataclass(frozen=True)
class NoiseSchedule:
    """Monotone sigma ladder ``0 = sigmas[0] < sigmas[1] < ... < sigmas[T]``."""

    sigmas: np.ndarray

    def __post_init__(self):
        sig = np.asarray(self.sigmas, dtype=np.float64)
        object.__setattr__(self, "sigmas", sig)
        if sig.ndim != 1 or sig.size < 3:
            raise ValueError("schedule needs at least T=2 steps (3 sigma values)")
        if sig[0] != 0.0:
            raise ValueError("sigmas[0] must be exactly 0")
        if not np.all(np.diff(sig) > 0):
            raise ValueError("sigmas must be strictly increasing")
        if not np.all(np.isfinite(sig)):
            raise ValueError("sigmas must be finite")

    @property
    def T(self) -> int:
        return self.sigmas.size - 1

    @property
    def sigma_max(self) -> float:
        return float(self.sigmas[-1])


@dataclass
class CostCounter:
    """Per-run cost ledger.

    ``denoiser_evals`` counts evaluations made inside sampling segments
    (``diffusion_steps`` / ``steered_steps``). ``counter_calls`` counts
    count-estimator invocations; the single auxiliary denoiser evaluation
    each estimate needs for its clean-latent reconstruction is attributed
    to the counter call, not to ``denoiser_evals``, so segment costs stay
    in closed form.
    """

    denoiser_evals: int = 0
    counter_calls: int = 0


def make_schedule(T: int, sigma_max: float = 1.0, sigma_min: float = 0.01) -> NoiseSchedule:
    """Geometric sigma ladder from ``sigma_min`` (t=1) to ``sigma_max`` (t=T).

    ``sigmas[t] = sigma_min * (sigma_max / sigma_min) ** ((t - 1) / (T - 1))``
    for ``t in 1..T``, with ``sigmas[0] = 0``.
    """
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not (0.0 < sigma_min < sigma_max):
        raise ValueError(f"need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
    ratio = sigma_max / sigma_min
    ladder = sigma_min * ratio ** (np.arange(T) / (T - 1))
    sigmas = np.concatenate(([0.0], ladder))
    # endpoints exactly as configured regardless of rounding in the power
    sigmas[1] = sigma_min
    sigmas[T] = sigma_max
    return NoiseSchedule(sigmas)


def sample_initial(schedule: NoiseSchedule, shape: tuple[int, ...], rng: np.random.Generator) -> Grid:
    """Draw ``z_T = sigma_T * eta`` with eta element-wise standard normal.

    With the default ``sigma_max = 1`` this is exactly a standard normal grid.
    """
    if len(shape) != 3 or any(s < 1 for s in shape):
        raise ValueError(f"shape must be (channels, height, width), got {shape}")
    return schedule.sigma_max * rng.standard_normal(shape)


def _check_same_shape(a: Grid, b: Grid) -> None:
    if a.shape != b.shape:
        raise ValueError(f"grid shape mismatch: {a.shape} vs {b.shape}")


def reconstruct_clean(z_t: Grid, eps: Grid, sigma_t: float) -> Grid:
    """One-shot clean estimate ``z0_hat = z_t - sigma_t * eps``."""
    _check_same_shape(z_t, eps)
    if sigma_t < 0:
        raise ValueError(f"sigma_t must be >= 0, got {sigma_t}")
    return z_t - sigma_t * eps


def sampler_step(
    z_t: Grid,
    eps: Grid,
    t: int,
    schedule: NoiseSchedule,
    mode: SamplerMode = SamplerMode.DETERMINISTIC,
    rng: np.random.Generator | None = None,
) -> Grid:
    """One reverse transition ``z_t -> z_{t-1}``.

    Deterministic mode takes the probability-flow Euler step
    ``z_{t-1} = z0_hat + sigma_{t-1} * eps``. Stochastic mode samples the
    exact variance-exploding ancestral posterior

        ``z_{t-1} = z0_hat + (sigma_{t-1}^2 / sigma_t^2) (z_t - z0_hat)
                    + sigma_{t-1} * sqrt(1 - sigma_{t-1}^2 / sigma_t^2) * eta``

    with ``z0_hat = z_t - sigma_t * eps`` in both cases.
    """
    if not (1 <= t <= schedule.T):
        raise ValueError(f"step index t={t} outside 1..{schedule.T}")
    _check_same_shape(z_t, eps)
    sig_t = schedule.sigmas[t]
    sig_prev = schedule.sigmas[t - 1]
    z0_hat = z_t - sig_t * eps
    if mode == SamplerMode.DETERMINISTIC:
        return z0_hat + sig_prev * eps
    if rng is None:
        raise ValueError("stochastic mode needs an rng")
    ratio = (sig_prev / sig_t) ** 2
    std = sig_prev * np.sqrt(1.0 - ratio)
    return z0_hat + ratio * (z_t - z0_hat) + std * rng.standard_normal(z_t.shape)


def diffusion_steps(
    denoiser: Denoiser,
    prompt,
    t_start: int,
    t_end: int,
    z_init: Grid,
    schedule: NoiseSchedule,
    mode: SamplerMode = SamplerMode.DETERMINISTIC,
    rng: np.random.Generator | None = None,
    cost: CostCounter | None = None,
) -> Grid:
    """Plain reverse diffusion over the segment ``(t_start, t_end]``.

    Iterates ``t = t_start, ..., t_end + 1``, each step evaluating
    ``eps = denoiser(t, z_t, prompt)`` and applying ``sampler_step``.
    Returns ``z_{t_end}``; an empty segment (``t_start == t_end``) returns
    ``z_init`` unchanged.
    """
    if not (schedule.T >= t_start >= t_end >= 0):
        raise ValueError(f"invalid segment ({t_start}, {t_end}] for T={schedule.T}")
    z = z_init
    for t in range(t_start, t_end, -1):
        eps = denoiser(t, z, prompt)
        z = sampler_step(z, eps, t, schedule, mode, rng)
        if cost is not None:
            cost.denoiser_evals += 1
    return z
