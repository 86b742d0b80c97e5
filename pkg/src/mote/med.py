"""Motion autoencoder: variable-length feature clips <-> a few latent tokens.

A transformer VAE with attention linear in clip length.  Learned query
tokens cross-attend over the projected frame sequence and yield posterior
mean/log-variance; sinusoidal frame queries cross-attend back to the
latent tokens for reconstruction.  Frames never attend to each other, so
a training step costs O(F) rather than O(F^2).  Both stacks are three
blocks deep with a long skip from the first block's output into the last
block's input, fused by a linear layer on the concatenated features.

Inputs are z-scored features; normalization stats live with the corpus.
Padding uses an additive -1e30 attention bias, so padded frames cannot
influence the latent at all -- not even in the last bit.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor


@dataclass
class MedConfig:
    feature_dim: int = 8
    model_dim: int = 64
    heads: int = 8
    ffn_dim: int = 384
    latent_len: int = 4
    layers: int = 3
    max_frames: int = 128
    dropout: float = 0.0
    kl_weight: float = 1e-4

    def to_dict(self):
        return asdict(self)


def pad_clips(clips: list) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length clips into (B, Fmax, D) plus a validity mask."""
    feat = clips[0].shape[1]
    fmax = max(c.shape[0] for c in clips)
    batch = np.zeros((len(clips), fmax, feat))
    valid = np.zeros((len(clips), fmax), dtype=bool)
    for i, c in enumerate(clips):
        batch[i, : c.shape[0]] = c
        valid[i, : c.shape[0]] = True
    return batch, valid


class _SkipStack(nn.Module):
    """Three cross-attention blocks with a long skip from block 0 into
    block 2, fused by a linear layer and closed by a final layernorm.

    With pool=True the query tokens also self-attend (they pool a long
    memory and benefit from coordinating); otherwise each query is an
    independent readout of the memory.
    """

    def __init__(self, dim, heads, ffn, rng, box, dropout, pool: bool):
        maker = nn.PreNormCrossBlock if pool else nn.CrossFfnBlock
        self.blocks = [maker(dim, heads, ffn, rng, box, dropout) for _ in range(3)]
        self.fuse = nn.Linear(2 * dim, dim, rng)
        self.out_ln = nn.LayerNorm(dim)
        self.pool = pool

    def __call__(self, x, memory, memory_bias=None):
        kw = {"memory_bias": memory_bias}
        h0 = self.blocks[0](x, memory, **kw)
        h1 = self.blocks[1](h0, memory, **kw)
        h2 = self.fuse(ad.concat([h1, h0], axis=-1))
        return self.out_ln(self.blocks[2](h2, memory, **kw))


class MotionEncoderDecoder(nn.Module):
    def __init__(self, cfg: MedConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.box = nn.RngBox(seed)
        d = cfg.model_dim
        self.in_proj = nn.Linear(cfg.feature_dim, d, rng)
        self.enc_queries = Tensor(rng.standard_normal((2 * cfg.latent_len, d)) * 0.02,
                                  requires_grad=True)
        self.encoder = _SkipStack(d, cfg.heads, cfg.ffn_dim, rng, self.box, cfg.dropout, pool=True)
        self.mean_head = nn.Linear(d, d, rng)
        # bias -6 => posterior std e^-3 at init: reconstruction trains before
        # the sampling noise matters, and the tiny KL weight keeps it there
        self.logvar_head = nn.Linear(d, d, rng, init="zero")
        self.logvar_head.bias.data[:] = -6.0
        self.query_proj = nn.Linear(d, d, rng)
        # learned per-index queries on top of the sinusoidal ones: square-wave
        # features (gait toggles, zigzag legs) switch at fixed frame indices,
        # which a learned table resolves far faster than smooth harmonics
        self.dec_pos = Tensor(rng.standard_normal((cfg.max_frames + 1, d)) * 0.02,
                              requires_grad=True)
        self.decoder = _SkipStack(d, cfg.heads, cfg.ffn_dim, rng, self.box, cfg.dropout, pool=False)
        self.out_proj = nn.Linear(d, cfg.feature_dim, rng)
        self._pos = nn.position_table(cfg.max_frames + 1, d)

    def encode(self, batch: np.ndarray, valid: np.ndarray):
        """(B, F, feat) + validity -> posterior mean and logvar, (B, l, d) each."""
        b, f, _ = batch.shape
        l2 = 2 * self.cfg.latent_len
        frames = self.in_proj(Tensor(batch)) + Tensor(self._pos[:f])
        queries = ad.reshape(self.enc_queries, (1, l2, self.cfg.model_dim)) + Tensor(
            np.zeros((b, l2, self.cfg.model_dim)))
        bias = nn.key_padding_bias(valid)
        out = self.encoder(queries, memory=frames, memory_bias=bias)
        l = self.cfg.latent_len
        mean = self.mean_head(ad.slice_along(out, 1, 0, l))
        logvar = self.logvar_head(ad.slice_along(out, 1, l, l2))
        return mean, logvar

    def decode(self, latent, frames: int, valid: np.ndarray | None = None):
        """(B, l, d) latent tokens -> (B, frames, feat) reconstruction.

        Each frame is an independent readout of the latent, so padded
        positions simply produce unused rows; the mask only matters to the
        caller's loss.
        """
        b = latent.data.shape[0] if isinstance(latent, Tensor) else latent.shape[0]
        if not isinstance(latent, Tensor):
            latent = Tensor(latent)
        pos = self._pos[:frames]
        queries = self.query_proj(Tensor(np.broadcast_to(pos, (b,) + pos.shape).copy()))
        learned = ad.reshape(ad.slice_along(self.dec_pos, 0, 0, frames),
                             (1, frames, self.cfg.model_dim))
        out = self.decoder(queries + learned, memory=latent)
        return self.out_proj(out)

    def reparameterize(self, mean, logvar, rng):
        eps = rng.standard_normal(mean.data.shape)
        return mean + ad.exp(logvar * 0.5) * Tensor(eps)

    def encode_mean(self, clips: list) -> np.ndarray:
        """Deterministic latents for a list of raw (normalized) clips."""
        batch, valid = pad_clips(clips)
        mean, _ = self.encode(batch, valid)
        return mean.data


def kl_divergence(mean, logvar):
    """KL(q || N(0, I)) summed over latent entries, averaged over the batch."""
    b = mean.data.shape[0]
    term = mean * mean + ad.exp(logvar) - 1.0 - logvar
    return term.sum() * (0.5 / b)


def med_loss(model: MotionEncoderDecoder, clips: list, rng) -> tuple:
    """Masked reconstruction MSE plus weighted KL; returns (loss, parts)."""
    batch, valid = pad_clips(clips)
    mean, logvar = model.encode(batch, valid)
    z = model.reparameterize(mean, logvar, rng)
    recon = model.decode(z, batch.shape[1], valid)
    mask = valid[:, :, None].astype(np.float64)
    diff = (recon - Tensor(batch)) * Tensor(mask)
    denom = float(mask.sum()) * batch.shape[2]
    mse = (diff * diff).sum() / denom
    kl = kl_divergence(mean, logvar)
    loss = mse + kl * model.cfg.kl_weight
    return loss, {"recon": float(mse.data), "kl": float(kl.data)}


def reconstruction_rmse(model: MotionEncoderDecoder, clips: list, batch_size: int = 32):
    """Deterministic per-feature RMSE of mean-latent reconstructions."""
    sq_sum = np.zeros(model.cfg.feature_dim)
    count = 0
    for i in range(0, len(clips), batch_size):
        chunk = clips[i : i + batch_size]
        batch, valid = pad_clips(chunk)
        mean, _ = model.encode(batch, valid)
        recon = model.decode(mean, batch.shape[1], valid).data
        err = (recon - batch) ** 2
        sq_sum += err[valid].sum(axis=0)
        count += int(valid.sum())
    return np.sqrt(sq_sum / count)
