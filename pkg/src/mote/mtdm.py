"""Unified denoiser over paired motion and text latents.

One network predicts the noise on either modality while the other modality
is absent, clean, or noisy at its own timestep -- so marginal, conditional,
and joint denoising share every weight.  Each block runs the two token
streams through their own post-norm transformer block and then couples
them in one of three interchangeable interaction modules:

* ``in_context``: one joint block over [t_m, motion, t_s, text]; the
  timestep tokens are re-injected at every block and dropped afterwards.
* ``cross_attention``: per-modality decoder-style block whose memory is
  the other modality's tokens prefixed with the stream's own timestep
  token.
* ``adaln``: per-modality block modulated by (own timestep embedding +
  mean-pooled other-modality tokens) through a zero-initialized projection.

Blocks form a U: the i-th block's output is concatenated into the input
of block (n-1-i) and fused by a linear layer, per modality.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor

ABSENT, CLEAN, NOISY = "absent", "clean", "noisy"
INTERACTIONS = ("in_context", "cross_attention", "adaln")


@dataclass
class ModalityContext:
    """How one modality enters the denoiser: latent tokens plus a noise level."""

    kind: str
    latent: object = None      # (B, l, latent_dim) array or Tensor
    timesteps: object = None   # (B,) ints for noisy contexts

    @classmethod
    def absent(cls):
        return cls(ABSENT)

    @classmethod
    def clean(cls, latent):
        return cls(CLEAN, latent=latent)

    @classmethod
    def noisy(cls, latent, timesteps):
        timesteps = np.atleast_1d(np.asarray(timesteps))
        return cls(NOISY, latent=latent, timesteps=timesteps)

    def batch_size(self):
        if self.latent is None:
            return None
        arr = self.latent.data if isinstance(self.latent, Tensor) else self.latent
        return arr.shape[0]


@dataclass
class MtdmConfig:
    model_dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    blocks: int = 7
    interaction: str = "in_context"
    motion_latent_len: int = 4
    text_latent_len: int = 4
    motion_latent_dim: int = 64
    text_latent_dim: int = 64
    dropout: float = 0.1
    timesteps: int = 1000
    null_timestep: int = 0   # noise level announced for an absent modality

    def __post_init__(self):
        if self.blocks % 2 == 0 or self.blocks < 1:
            raise ValueError(f"block count must be odd and positive, got {self.blocks}")
        if self.interaction not in INTERACTIONS:
            raise ValueError(f"interaction must be one of {INTERACTIONS}, got {self.interaction!r}")

    def to_dict(self):
        return asdict(self)


class DpdBlock(nn.Module):
    """Two unimodal post-norm blocks plus one cross-modal interaction module."""

    def __init__(self, cfg: MtdmConfig, rng, box):
        d, h, f, p = cfg.model_dim, cfg.heads, cfg.ffn_dim, cfg.dropout
        self.kind = cfg.interaction
        self.motion_block = nn.PostNormBlock(d, h, f, rng, box, p)
        self.text_block = nn.PostNormBlock(d, h, f, rng, box, p)
        if self.kind == "in_context":
            self.joint_block = nn.PostNormBlock(d, h, f, rng, box, p)
        elif self.kind == "cross_attention":
            self.motion_cross = nn.CrossAttnBlock(d, h, f, rng, box, p)
            self.text_cross = nn.CrossAttnBlock(d, h, f, rng, box, p)
        else:
            self.motion_ada = nn.AdaLnBlock(d, h, f, rng, box, p)
            self.text_ada = nn.AdaLnBlock(d, h, f, rng, box, p)

    def __call__(self, h_m, h_s, t_m_emb, t_s_emb):
        u_m = self.motion_block(h_m)
        u_s = self.text_block(h_s)
        b, d = t_m_emb.data.shape
        t_m_tok = ad.reshape(t_m_emb, (b, 1, d))
        t_s_tok = ad.reshape(t_s_emb, (b, 1, d))
        if self.kind == "in_context":
            n_m = u_m.data.shape[1]
            n_s = u_s.data.shape[1]
            seq = ad.concat([t_m_tok, u_m, t_s_tok, u_s], axis=1)
            out = self.joint_block(seq)
            return (
                ad.slice_along(out, 1, 1, 1 + n_m),
                ad.slice_along(out, 1, 2 + n_m, 2 + n_m + n_s),
            )
        if self.kind == "cross_attention":
            mem_m = ad.concat([t_m_tok, u_s], axis=1)
            mem_s = ad.concat([t_s_tok, u_m], axis=1)
            return self.motion_cross(u_m, mem_m), self.text_cross(u_s, mem_s)
        cond_m = t_m_emb + u_s.mean(axis=1)
        cond_s = t_s_emb + u_m.mean(axis=1)
        return self.motion_ada(u_m, cond_m), self.text_ada(u_s, cond_s)

    def flops(self, n_m: int, n_s: int) -> int:
        total = self.motion_block.flops(n_m) + self.text_block.flops(n_s)
        if self.kind == "in_context":
            total += self.joint_block.flops(n_m + n_s + 2)
        elif self.kind == "cross_attention":
            total += self.motion_cross.flops(n_m, n_s + 1)
            total += self.text_cross.flops(n_s, n_m + 1)
        else:
            total += self.motion_ada.flops(n_m) + self.text_ada.flops(n_s)
        return total


def profile_config(cfg: MtdmConfig) -> dict:
    """Closed-form parameter count for a config, no instantiation.

    Must agree exactly with param_count(UnifiedDenoiser(cfg)); tests pin the
    two routes together so the cheap formula can rank big configs.
    """
    d, f = cfg.model_dim, cfg.ffn_dim
    mha = 4 * d * d + 3 * d          # no key bias
    ln = 2 * d
    ffn = d * f + f + f * d + d
    post = mha + ffn + 2 * ln
    cross = 2 * mha + ffn + 3 * ln
    ada = mha + ffn + d * 6 * d + 6 * d
    if cfg.interaction == "in_context":
        inter = post
    elif cfg.interaction == "cross_attention":
        inter = 2 * cross
    else:
        inter = 2 * ada
    block = 2 * post + inter
    half = (cfg.blocks - 1) // 2
    lm, ls = cfg.motion_latent_len, cfg.text_latent_len
    dm, ds = cfg.motion_latent_dim, cfg.text_latent_dim
    params = cfg.blocks * block
    params += dm * d + d + ds * d + d                    # input projections
    params += 2 * (lm * d) + 2 * (ls * d)                # positions + nulls
    params += 2 * (d * d + d) + 2 * d                    # timestep MLP + types
    params += 2 * half * (2 * d * d + d)                 # skip fusions
    params += d * dm + dm + d * ds + ds                  # output heads
    return {"params": params, "interaction": cfg.interaction,
            "blocks": cfg.blocks, "ffn_dim": f, "model_dim": d}


class UnifiedDenoiser(nn.Module):
    def __init__(self, cfg: MtdmConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.box = nn.RngBox(seed)
        d = cfg.model_dim
        self.in_motion = nn.Linear(cfg.motion_latent_dim, d, rng)
        self.in_text = nn.Linear(cfg.text_latent_dim, d, rng)
        self.pos_motion = Tensor(rng.standard_normal((cfg.motion_latent_len, d)) * 0.02,
                                 requires_grad=True)
        self.pos_text = Tensor(rng.standard_normal((cfg.text_latent_len, d)) * 0.02,
                               requires_grad=True)
        self.null_motion = Tensor(rng.standard_normal((cfg.motion_latent_len, d)) * 0.02,
                                  requires_grad=True)
        self.null_text = Tensor(rng.standard_normal((cfg.text_latent_len, d)) * 0.02,
                                requires_grad=True)
        self.t_embed = nn.TimestepEmbedding(d, rng)
        self.type_motion = Tensor(rng.standard_normal(d) * 0.02, requires_grad=True)
        self.type_text = Tensor(rng.standard_normal(d) * 0.02, requires_grad=True)
        self.blocks = [DpdBlock(cfg, rng, self.box) for _ in range(cfg.blocks)]
        half = (cfg.blocks - 1) // 2
        self.fuse_motion = [nn.Linear(2 * d, d, rng) for _ in range(half)]
        self.fuse_text = [nn.Linear(2 * d, d, rng) for _ in range(half)]
        self.out_motion = nn.Linear(d, cfg.motion_latent_dim, rng)
        self.out_text = nn.Linear(d, cfg.text_latent_dim, rng)

    def _entry(self, ctx: ModalityContext, batch: int, in_proj, pos, null):
        l = pos.data.shape[0]
        d = self.cfg.model_dim
        if ctx.kind == ABSENT:
            h = ad.reshape(null, (1, l, d)) + Tensor(np.zeros((batch, l, d)))
            t = np.full(batch, self.cfg.null_timestep)
            return h, t
        latent = ctx.latent if isinstance(ctx.latent, Tensor) else Tensor(ctx.latent)
        if latent.data.ndim != 3 or latent.data.shape[1] != l:
            raise ad.ShapeError(
                f"context latent must be (batch, {l}, dim), got {latent.data.shape}")
        h = in_proj(latent) + ad.reshape(pos, (1, l, d))
        if ctx.kind == CLEAN:
            t = np.zeros(batch, dtype=np.int64)
        else:
            t = np.asarray(ctx.timesteps, dtype=np.int64)
            if t.shape != (batch,):
                raise ad.ShapeError(f"timesteps must be ({batch},), got {t.shape}")
            if t.min() < 1 or t.max() > self.cfg.timesteps:
                raise ValueError(f"noisy timesteps must be in [1, {self.cfg.timesteps}]")
        return h, t

    def __call__(self, ctx_m: ModalityContext, ctx_s: ModalityContext):
        """Predict per-modality noise; returns (eps_motion, eps_text) tensors."""
        if ctx_m.kind == ABSENT and ctx_s.kind == ABSENT:
            raise ValueError("at least one modality must provide a latent")
        batch = ctx_m.batch_size() or ctx_s.batch_size()
        h_m, t_m = self._entry(ctx_m, batch, self.in_motion, self.pos_motion, self.null_motion)
        h_s, t_s = self._entry(ctx_s, batch, self.in_text, self.pos_text, self.null_text)
        t_m_emb = self.t_embed(t_m) + self.type_motion
        t_s_emb = self.t_embed(t_s) + self.type_text
        half = (self.cfg.blocks - 1) // 2
        skips_m, skips_s = [], []
        for i, block in enumerate(self.blocks):
            if i > half:
                k = i - half - 1
                h_m = self.fuse_motion[k](ad.concat([h_m, skips_m.pop()], axis=-1))
                h_s = self.fuse_text[k](ad.concat([h_s, skips_s.pop()], axis=-1))
            h_m, h_s = block(h_m, h_s, t_m_emb, t_s_emb)
            if i < half:
                skips_m.append(h_m)
                skips_s.append(h_s)
        return self.out_motion(h_m), self.out_text(h_s)

    def predict_noise(self, ctx_m: ModalityContext, ctx_s: ModalityContext):
        """Inference-path wrapper returning plain arrays."""
        eps_m, eps_s = self(ctx_m, ctx_s)
        return eps_m.data, eps_s.data

    def flops(self) -> int:
        """Forward cost for one call at batch 1, 2mnk matmul convention."""
        cfg = self.cfg
        n_m, n_s = cfg.motion_latent_len, cfg.text_latent_len
        total = self.in_motion.flops(n_m) + self.in_text.flops(n_s)
        total += 2 * self.t_embed.flops(1)
        total += sum(b.flops(n_m, n_s) for b in self.blocks)
        total += sum(f.flops(n_m) for f in self.fuse_motion)
        total += sum(f.flops(n_s) for f in self.fuse_text)
        total += self.out_motion.flops(n_m) + self.out_text.flops(n_s)
        return total
