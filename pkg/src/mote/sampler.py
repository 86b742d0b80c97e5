"""Multi-task inference over the shared latent diffusion.

One denoiser serves five tasks; the task is selected purely by which
modality contexts are Noisy, Clean, or Absent:

  text -> motion   motion Noisy, text Clean, guidance against text Absent
  motion -> text   text Noisy, motion Clean, guidance against motion Absent
  unconditional    one modality Noisy, the other Absent, single branch
  joint            both Noisy on one shared timestep ladder
  variation        partial noise on the input's own latent, other Absent

All noise is drawn from generators keyed on (seed, substream), so outputs
are reproducible from (seed, checkpoint) alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import data
from .med import MotionEncoderDecoder
from .mtdm import ModalityContext as MC
from .mtdm import UnifiedDenoiser
from .schedule import NoiseSchedule, ddim_step, q_sample, spaced_timesteps
from .ted import TextEncoderDecoder


@dataclass
class GuidanceConfig:
    w_m: float = 7.5
    w_s: float = 7.0
    steps: int = 100
    seed: int | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be at least 1, got {self.steps}")


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, w: float) -> np.ndarray:
    """Guided noise estimate w*eps_cond + (1-w)*eps_uncond.

    The w=1 and w=0 ends return the corresponding input unchanged so the
    reductions hold bitwise, not just to rounding.
    """
    eps_cond = np.asarray(eps_cond)
    eps_uncond = np.asarray(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(
            f"branch shapes differ: {eps_cond.shape} vs {eps_uncond.shape}")
    if w == 1.0:
        return eps_cond
    if w == 0.0:
        return eps_uncond
    return w * eps_cond + (1.0 - w) * eps_uncond


@dataclass
class LatentStats:
    """Per-token, per-channel standardization of an autoencoder latent space."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape:
            raise ValueError("latent stats mean/std shapes differ")
        if np.any(self.std <= 0):
            raise ValueError("latent stats std must be positive")

    def forward(self, z: np.ndarray) -> np.ndarray:
        return (z - self.mean) / self.std

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean


@dataclass
class GenerationSystem:
    """Frozen stage-1 codecs + trained denoiser + every normalization."""

    denoiser: UnifiedDenoiser
    sched: NoiseSchedule
    med: MotionEncoderDecoder
    ted: TextEncoderDecoder
    vocab: list
    feature_mean: np.ndarray
    feature_std: np.ndarray
    motion_stats: LatentStats
    text_stats: LatentStats
    meta: dict = field(default_factory=dict)

    @property
    def vocab_index(self) -> dict:
        return data.vocab_index(self.vocab)

    def encode_motion(self, clips: list) -> np.ndarray:
        """Raw clips -> standardized diffusion-space motion latents."""
        normed = [(c - self.feature_mean) / self.feature_std for c in clips]
        return self.motion_stats.forward(self.med.encode_mean(normed))

    def decode_motion(self, z: np.ndarray, frames: int) -> list:
        """Standardized latents -> raw clips of the requested length."""
        recon = self.med.decode(self.motion_stats.inverse(z), frames).data
        return [r * self.feature_std + self.feature_mean for r in recon]

    def encode_text(self, captions: list) -> np.ndarray:
        return self.text_stats.forward(
            self.ted.encode_captions(captions, self.vocab_index))

    def decode_text(self, z: np.ndarray) -> list:
        return self.ted.decode_text(self.text_stats.inverse(z), self.vocab, mode="greedy")


def _require_seed(guidance: GuidanceConfig) -> int:
    if guidance.seed is None:
        raise ValueError("deterministic sampling requires an explicit seed")
    return int(guidance.seed)


def _ladder(sched: NoiseSchedule, steps: int) -> list:
    return spaced_timesteps(sched.timesteps, steps)


def _step_pairs(ladder: list):
    for i, t in enumerate(ladder):
        yield t, (ladder[i + 1] if i + 1 < len(ladder) else 0)


def _denoise_one(system: GenerationSystem, z: np.ndarray, ladder: list,
                 modality: str, other: MC, w: float, trace=None) -> np.ndarray:
    """DDIM-denoise one modality down the ladder; the other context is fixed.

    Each step evaluates the conditional branch and, unless w is exactly 1,
    the Absent branch, mixing them with cfg_combine.
    """
    batch = z.shape[0]
    for t, t_prev in _step_pairs(ladder):
        tb = np.full(batch, t)
        if modality == "motion":
            eps_c = system.denoiser.predict_noise(MC.noisy(z, tb), other)[0]
            if w == 1.0:
                eps = eps_c
            else:
                eps_u = system.denoiser.predict_noise(MC.noisy(z, tb), MC.absent())[0]
                eps = cfg_combine(eps_c, eps_u, w)
        else:
            eps_c = system.denoiser.predict_noise(other, MC.noisy(z, tb))[1]
            if w == 1.0:
                eps = eps_c
            else:
                eps_u = system.denoiser.predict_noise(MC.absent(), MC.noisy(z, tb))[1]
                eps = cfg_combine(eps_c, eps_u, w)
        if trace is not None:
            entry = {"t": t, "t_prev": t_prev, "modality": modality,
                     "other_kind": other.kind}
            if other.latent is not None:
                entry["other_latent"] = np.array(other.latent, copy=True)
            trace.append(entry)
        z = ddim_step(system.sched, z, eps, t, t_prev)
    return z


def _denoise_joint(system: GenerationSystem, z_m: np.ndarray, z_s: np.ndarray,
                   ladder: list, trace=None):
    batch = z_m.shape[0]
    for t, t_prev in _step_pairs(ladder):
        tb = np.full(batch, t)
        eps_m, eps_s = system.denoiser.predict_noise(MC.noisy(z_m, tb), MC.noisy(z_s, tb))
        if trace is not None:
            trace.append({"t_m": t, "t_s": t, "t_prev": t_prev})
        z_m = ddim_step(system.sched, z_m, eps_m, t, t_prev)
        z_s = ddim_step(system.sched, z_s, eps_s, t, t_prev)
    return z_m, z_s


def _init_noise(seed: int, stream: int, shape) -> np.ndarray:
    return np.random.default_rng((seed, stream)).standard_normal(shape)


def sample_text_to_motion(system: GenerationSystem, captions: list, frames: int = 64,
                          guidance: GuidanceConfig | None = None, trace=None) -> list:
    """Generate one clip per caption; the text latent stays clean throughout."""
    guidance = guidance or GuidanceConfig()
    seed = _require_seed(guidance)
    cond = MC.clean(system.encode_text(captions))
    cfg = system.denoiser.cfg
    z = _init_noise(seed, 0, (len(captions), cfg.motion_latent_len, cfg.motion_latent_dim))
    ladder = _ladder(system.sched, guidance.steps)
    z = _denoise_one(system, z, ladder, "motion", cond, guidance.w_m, trace)
    return system.decode_motion(z, frames)


def sample_motion_to_text(system: GenerationSystem, clips: list,
                          guidance: GuidanceConfig | None = None, trace=None) -> list:
    """Caption each clip; mirror of text->motion with roles swapped."""
    guidance = guidance or GuidanceConfig()
    seed = _require_seed(guidance)
    cond = MC.clean(system.encode_motion(clips))
    cfg = system.denoiser.cfg
    z = _init_noise(seed, 1, (len(clips), cfg.text_latent_len, cfg.text_latent_dim))
    ladder = _ladder(system.sched, guidance.steps)
    z = _denoise_one(system, z, ladder, "text", cond, guidance.w_s, trace)
    return system.decode_text(z)


def sample_unconditional(system: GenerationSystem, modality: str, n: int,
                         frames: int = 64, guidance: GuidanceConfig | None = None,
                         trace=None) -> list:
    """Marginal sampling: the other modality is Absent, single branch."""
    if modality not in ("motion", "text"):
        raise ValueError(f"modality must be motion or text, got {modality!r}")
    guidance = guidance or GuidanceConfig()
    seed = _require_seed(guidance)
    cfg = system.denoiser.cfg
    ladder = _ladder(system.sched, guidance.steps)
    if modality == "motion":
        z = _init_noise(seed, 0, (n, cfg.motion_latent_len, cfg.motion_latent_dim))
        z = _denoise_one(system, z, ladder, "motion", MC.absent(), 1.0, trace)
        return system.decode_motion(z, frames)
    z = _init_noise(seed, 1, (n, cfg.text_latent_len, cfg.text_latent_dim))
    z = _denoise_one(system, z, ladder, "text", MC.absent(), 1.0, trace)
    return system.decode_text(z)


def sample_joint(system: GenerationSystem, n: int, frames: int = 64,
                 guidance: GuidanceConfig | None = None, trace=None) -> list:
    """Motion-caption pairs denoised together on one shared ladder, no CFG."""
    guidance = guidance or GuidanceConfig()
    seed = _require_seed(guidance)
    cfg = system.denoiser.cfg
    z_m = _init_noise(seed, 0, (n, cfg.motion_latent_len, cfg.motion_latent_dim))
    z_s = _init_noise(seed, 1, (n, cfg.text_latent_len, cfg.text_latent_dim))
    ladder = _ladder(system.sched, guidance.steps)
    z_m, z_s = _denoise_joint(system, z_m, z_s, ladder, trace)
    return list(zip(system.decode_motion(z_m, frames), system.decode_text(z_s)))


def variation(system: GenerationSystem, item, strength: float = 0.5,
              guidance: GuidanceConfig | None = None, trace=None):
    """Same-modality resampling: noise the input's latent partway, re-denoise.

    strength scales how far up the schedule the latent is pushed; the other
    modality stays Absent so only the input's own structure steers the result.
    """
    if not 0.0 < strength < 1.0:
        raise ValueError(f"strength must lie strictly in (0, 1), got {strength}")
    guidance = guidance or GuidanceConfig()
    seed = _require_seed(guidance)
    total = system.sched.timesteps
    t_var = min(total, max(1, round(strength * total)))
    full = _ladder(system.sched, guidance.steps)
    ladder = [t_var] + [t for t in full if t < t_var]
    if isinstance(item, str):
        z0 = system.encode_text([item])
        eps = _init_noise(seed, 2, z0.shape)
        z = q_sample(system.sched, z0, np.array([t_var]), eps)
        z = _denoise_one(system, z, ladder, "text", MC.absent(), 1.0, trace)
        return system.decode_text(z)[0]
    clip = np.asarray(item, dtype=np.float64)
    frames = clip.shape[0]
    z0 = system.encode_motion([clip])
    eps = _init_noise(seed, 2, z0.shape)
    z = q_sample(system.sched, z0, np.array([t_var]), eps)
    z = _denoise_one(system, z, ladder, "motion", MC.absent(), 1.0, trace)
    return system.decode_motion(z, frames)[0]
