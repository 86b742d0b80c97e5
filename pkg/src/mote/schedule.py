"""Forward-noising schedules and reverse-step math for the latent denoiser.

Timesteps are 1-based: t in [1, T] indexes the t-th noising step, and the
signal-retention product at t=0 is defined as exactly 1 (clean data).
"""

from __future__ import annotations

import numpy as np


class NoiseSchedule:
    """Per-step noise fractions plus cached products."""

    def __init__(self, betas: np.ndarray, kind: str = "custom"):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ValueError(f"schedule needs a 1-d beta vector, got shape {betas.shape}")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("betas must lie strictly inside (0, 1)")
        self.kind = kind
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = np.cumprod(self.alphas)

    @property
    def timesteps(self) -> int:
        return self.betas.size

    def _check_t(self, t):
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.timesteps):
            raise ValueError(f"t must be in [0, {self.timesteps}], got {t}")
        return t

    def alpha_bar(self, t):
        """Cumulative signal retention; scalar or array t, alpha_bar(0) == 1."""
        t = self._check_t(t)
        padded = np.concatenate([[1.0], self.alpha_bars])
        out = padded[t]
        return float(out) if np.isscalar(t) or t.ndim == 0 else out

    def beta(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.timesteps):
            raise ValueError(f"step index must be in [1, {self.timesteps}], got {t}")
        out = self.betas[t - 1]
        return float(out) if t.ndim == 0 else out

    def alpha(self, t):
        return 1.0 - self.beta(t)


def build_schedule(kind: str = "scaled_linear", timesteps: int = 1000,
                   beta_start: float = 8.5e-4, beta_end: float = 0.012) -> NoiseSchedule:
    if timesteps < 1:
        raise ValueError(f"timesteps must be positive, got {timesteps}")
    if kind == "scaled_linear":
        roots = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end), timesteps)
        return NoiseSchedule(roots ** 2, kind=kind)
    if kind == "cosine":
        s = 0.008
        steps = np.arange(timesteps + 1, dtype=np.float64)
        f = np.cos((steps / timesteps + s) / (1.0 + s) * np.pi / 2.0) ** 2
        bars = f / f[0]
        betas = np.clip(1.0 - bars[1:] / bars[:-1], 1e-8, 0.999)
        return NoiseSchedule(betas, kind=kind)
    raise ValueError(f"unknown schedule kind {kind!r}")


def _coef(values, like: np.ndarray) -> np.ndarray:
    """Reshape per-sample scalars to broadcast over trailing axes of ``like``."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return values
    return values.reshape(values.shape + (1,) * (like.ndim - 1))


def q_sample(sched: NoiseSchedule, z0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """Jump straight to noise level t: sqrt(abar) z0 + sqrt(1-abar) eps."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != z0.shape:
        raise ValueError(f"q_sample: noise shape {eps.shape} != data shape {z0.shape}")
    abar = sched.alpha_bar(t)
    a = _coef(np.sqrt(abar), z0)
    b = _coef(np.sqrt(1.0 - abar), z0)
    return a * z0 + b * eps


def ddpm_step(sched: NoiseSchedule, z_t: np.ndarray, eps_hat: np.ndarray, t: int,
              noise: np.ndarray | None = None) -> np.ndarray:
    """One stochastic ancestral step t -> t-1.

    Posterior mean uses the predicted noise; variance is beta_t.  The final
    step (t == 1) is noiseless.
    """
    t = int(t)
    beta = sched.beta(t)
    alpha = 1.0 - beta
    abar = sched.alpha_bar(t)
    mean = (z_t - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
    if t == 1:
        return mean
    if noise is None:
        raise ValueError("ddpm_step needs noise for every step except the last")
    return mean + np.sqrt(beta) * noise


def predict_clean(sched: NoiseSchedule, z_t: np.ndarray, eps_hat: np.ndarray, t) -> np.ndarray:
    """Invert q_sample under the predicted noise."""
    abar = sched.alpha_bar(t)
    z_t = np.asarray(z_t, dtype=np.float64)
    a = _coef(np.sqrt(abar), z_t)
    b = _coef(np.sqrt(1.0 - abar), z_t)
    return (z_t - b * eps_hat) / a


def ddim_step(sched: NoiseSchedule, z_t: np.ndarray, eps_hat: np.ndarray, t: int,
              t_prev: int) -> np.ndarray:
    """Deterministic step t -> t_prev through the predicted clean point."""
    if not (0 <= t_prev < t <= sched.timesteps):
        raise ValueError(f"ddim_step: need 0 <= t_prev < t <= {sched.timesteps}, got {t_prev}, {t}")
    z0_hat = predict_clean(sched, z_t, eps_hat, t)
    abar_prev = sched.alpha_bar(t_prev)
    return np.sqrt(abar_prev) * z0_hat + np.sqrt(1.0 - abar_prev) * eps_hat


def ddim_invert(sched: NoiseSchedule, z_prev: np.ndarray, eps_hat: np.ndarray, t_prev: int,
                t: int) -> np.ndarray:
    """Exact inverse of ddim_step for the same predicted noise."""
    if not (0 <= t_prev < t <= sched.timesteps):
        raise ValueError(f"ddim_invert: need 0 <= t_prev < t <= {sched.timesteps}, got {t_prev}, {t}")
    abar_prev = sched.alpha_bar(t_prev)
    z0_hat = (z_prev - np.sqrt(1.0 - abar_prev) * eps_hat) / np.sqrt(abar_prev)
    abar = sched.alpha_bar(t)
    return np.sqrt(abar) * z0_hat + np.sqrt(1.0 - abar) * eps_hat


def spaced_timesteps(total: int, count: int) -> list[int]:
    """Descending uniform-stride ladder ending one stride above zero.

    spaced_timesteps(1000, 100) -> [1000, 990, ..., 10]; samplers take the
    listed pairs and a final step from the last entry down to 0.
    """
    if not (1 <= count <= total):
        raise ValueError(f"need 1 <= count <= {total}, got {count}")
    stride = total // count
    return [total - i * stride for i in range(count)]
