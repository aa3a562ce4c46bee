"""Variance schedule, forward noising, SNR weights, and the Euler sampler.

Two equivalent coordinate systems appear here.  Training uses the
variance-preserving marginal

    z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps,

while the sampler walks a variance-exploding state z = z0 + sigma * eps
down the sigma ladder, with sigma_t = sqrt((1 - abar_t) / abar_t).  The
two are related by z_vp = z_ve / sqrt(1 + sigma^2), which is exactly the
model-input rescaling applied before each denoiser call.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

DenoiseFn = Callable[[np.ndarray, int, np.ndarray | None], np.ndarray]


class SamplingError(RuntimeError):
    """Non-finite state encountered while sampling."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances and their derived ladders.

    ``betas[i]`` is beta_{i+1}; ``alphas_cum`` and ``sigmas`` are indexed by
    timestep 0..T with alphas_cum[0] = 1 and sigmas[0] = 0.
    """

    kind: str
    betas: np.ndarray
    alphas_cum: np.ndarray
    sigmas: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.betas)

    @property
    def sigma_max(self) -> float:
        return float(self.sigmas[-1])

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n_steps": self.n_steps,
            "beta_start": float(self.betas[0]),
            "beta_end": float(self.betas[-1]),
        }

    def save(self, file: str | Path) -> None:
        Path(file).write_text(json.dumps(self.to_json_dict(), sort_keys=True) + "\n")

    @staticmethod
    def load(file: str | Path) -> "NoiseSchedule":
        spec = json.loads(Path(file).read_text())
        return make_schedule(spec["kind"], spec["n_steps"], spec["beta_start"], spec["beta_end"])


def make_schedule(
    kind: str = "scaled_linear",
    n_steps: int = 1000,
    beta_start: float = 0.00085,
    beta_end: float = 0.012,
) -> NoiseSchedule:
    """Build a noise schedule.

    ``linear`` spaces the betas directly; ``scaled_linear`` spaces their
    square roots (the convention of the model family this mirrors).
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, n_steps)
    elif kind == "scaled_linear":
        betas = np.linspace(beta_start**0.5, beta_end**0.5, n_steps) ** 2
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alphas_cum = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    sigmas = np.sqrt((1.0 - alphas_cum) / alphas_cum)
    return NoiseSchedule(kind=kind, betas=betas, alphas_cum=alphas_cum, sigmas=sigmas)


def _check_t(t: int, schedule: NoiseSchedule) -> None:
    if not 1 <= t <= schedule.n_steps:
        raise ValueError(f"timestep must be in 1..{schedule.n_steps}, got {t}")


def forward_noise(z0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form forward marginal: sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    _check_t(t, schedule)
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {eps.shape} does not match z0 shape {z0.shape}")
    abar = schedule.alphas_cum[t]
    return np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps


def snr(t: int, schedule: NoiseSchedule) -> float:
    """Signal-to-noise ratio abar_t / (1 - abar_t)."""
    _check_t(t, schedule)
    abar = schedule.alphas_cum[t]
    return float(abar / (1.0 - abar))


def minsnr_weight(t: int, gamma: float, schedule: NoiseSchedule) -> float:
    """Loss weight min(SNR(t), gamma) / SNR(t) for noise-prediction training."""
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    s = snr(t, schedule)
    return min(s, gamma) / s


@dataclass(frozen=True)
class TimestepSelection:
    """Descending timesteps visited by the sampler, from T down to 0."""

    n_steps: int
    indices: np.ndarray  # length n_steps + 1, indices[0] = T, indices[-1] = 0

    def sigmas(self, schedule: NoiseSchedule) -> np.ndarray:
        return schedule.sigmas[self.indices]


def select_timesteps(schedule: NoiseSchedule, n_steps: int = 50) -> TimestepSelection:
    """Evenly spaced ladder over the full sigma range (endpoints included)."""
    if not 1 <= n_steps <= schedule.n_steps:
        raise ValueError(f"n_steps must be in 1..{schedule.n_steps}, got {n_steps}")
    indices = np.round(np.linspace(schedule.n_steps, 0, n_steps + 1)).astype(np.int64)
    if not (np.diff(indices) < 0).all():  # cannot happen for n_steps <= T
        raise ValueError("timestep ladder is not strictly descending")
    return TimestepSelection(n_steps=n_steps, indices=indices)


def scale_model_input(z: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Map an exploding-space state to the variance-preserving model input."""
    sigma = schedule.sigmas[t]
    return np.asarray(z, dtype=np.float64) / np.sqrt(sigma * sigma + 1.0)


def euler_step(
    z: np.ndarray,
    t_cur: int,
    t_next: int,
    cond: np.ndarray | None,
    denoise_fn: DenoiseFn,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """One Euler update from sigma(t_cur) to sigma(t_next).

    The denoiser sees the variance-preserving input and returns predicted
    noise; the state estimate is zhat0 = z - sigma * eps and the update
    follows d = (z - zhat0) / sigma.  A final step onto sigma = 0 returns
    zhat0 exactly.
    """
    sigma = schedule.sigmas[t_cur]
    sigma_next = schedule.sigmas[t_next]
    x = scale_model_input(z, t_cur, schedule)
    eps = np.asarray(denoise_fn(x, t_cur, cond), dtype=np.float64)
    if eps.shape != z.shape:
        raise ValueError(f"denoiser returned shape {eps.shape}, expected {z.shape}")
    zhat0 = z - sigma * eps
    if sigma_next == 0.0:
        return zhat0
    d = (z - zhat0) / sigma
    return z + (sigma_next - sigma) * d


def euler_sample(
    denoise_fn: DenoiseFn,
    z_init: np.ndarray,
    cond: np.ndarray | None,
    steps: TimestepSelection,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Deterministic Euler sampling down the sigma ladder.

    ``z_init`` must be drawn at the top sigma (z_T = sigma_max * eps); the
    procedure itself contains no randomness.  Raises SamplingError with the
    step index if the state goes non-finite.
    """
    z = np.asarray(z_init, dtype=np.float64)
    indices = steps.indices
    for i in range(len(indices) - 1):
        z = euler_step(z, int(indices[i]), int(indices[i + 1]), cond, denoise_fn, schedule)
        if not np.isfinite(z).all():
            raise SamplingError(f"non-finite state after step {i} (t={int(indices[i])})")
    return z
