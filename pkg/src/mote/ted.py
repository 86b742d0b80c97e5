"""Text autoencoder: captions over a closed vocabulary <-> latent tokens.

The encoder prepends learned query tokens to the embedded caption and
reads the latent off the query positions — deterministic, no sampling.
The decoder is a small causal transformer whose sequence starts with the
projected latent tokens; during training the latent prefix is perturbed
with Gaussian noise so decoding stays reliable on the slightly off-manifold
latents a denoiser produces.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import data as dt
from . import nn
from .autodiff import Tensor


@dataclass
class TedConfig:
    vocab_size: int = 35
    model_dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    latent_len: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    max_len: int = 24
    dropout: float = 0.0
    noise_aug: float = 0.1

    def to_dict(self):
        return asdict(self)


def pad_tokens(token_lists: list) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id lists to (B, N) plus a validity mask."""
    n = max(len(t) for t in token_lists)
    ids = np.full((len(token_lists), n), dt.PAD, dtype=np.int64)
    valid = np.zeros((len(token_lists), n), dtype=bool)
    for i, t in enumerate(token_lists):
        ids[i, : len(t)] = t
        valid[i, : len(t)] = True
    return ids, valid


class TextEncoderDecoder(nn.Module):
    def __init__(self, cfg: TedConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.box = nn.RngBox(seed)
        d = cfg.model_dim
        self.tok_emb = Tensor(rng.standard_normal((cfg.vocab_size, d)) * 0.02,
                              requires_grad=True)
        self.enc_queries = Tensor(rng.standard_normal((cfg.latent_len, d)) * 0.02,
                                  requires_grad=True)
        self.enc_blocks = [
            nn.PreNormBlock(d, cfg.heads, cfg.ffn_dim, rng, self.box, cfg.dropout)
            for _ in range(cfg.enc_layers)
        ]
        self.enc_ln = nn.LayerNorm(d)
        self.lat_head = nn.Linear(d, d, rng)
        self.prefix_proj = nn.Linear(d, d, rng)
        self.dec_blocks = [
            nn.PreNormBlock(d, cfg.heads, cfg.ffn_dim, rng, self.box, cfg.dropout)
            for _ in range(cfg.dec_layers)
        ]
        self.dec_ln = nn.LayerNorm(d)
        self.lm_head = nn.Linear(d, cfg.vocab_size, rng)
        self._pos = nn.position_table(cfg.max_len + cfg.latent_len + 1, d)

    def encode(self, ids: np.ndarray, valid: np.ndarray) -> Tensor:
        """(B, N) token ids -> (B, l, d) latent tokens, deterministic."""
        b, n = ids.shape
        l = self.cfg.latent_len
        d = self.cfg.model_dim
        x = ad.embedding(self.tok_emb, ids) + Tensor(self._pos[:n])
        queries = ad.reshape(self.enc_queries, (1, l, d)) + Tensor(np.zeros((b, l, d)))
        seq = ad.concat([queries, x], axis=1)
        bias = nn.key_padding_bias(np.concatenate([np.ones((b, l), dtype=bool), valid], axis=1))
        for block in self.enc_blocks:
            seq = block(seq, bias)
        seq = self.enc_ln(seq)
        return self.lat_head(ad.slice_along(seq, 1, 0, l))

    def encode_captions(self, captions: list, index: dict) -> np.ndarray:
        ids, valid = pad_tokens([dt.tokenize(c, index) for c in captions])
        return self.encode(ids, valid).data

    def decode_logits(self, latent, input_ids: np.ndarray) -> Tensor:
        """Teacher-forced logits: position j predicts input_ids[:, j+1].

        Returns (B, N-1, vocab) for (B, N) inputs that start with BOS.
        """
        if not isinstance(latent, Tensor):
            latent = Tensor(latent)
        b, n = input_ids.shape
        l = self.cfg.latent_len
        prefix = self.prefix_proj(latent)
        x = ad.embedding(self.tok_emb, input_ids[:, :-1]) + Tensor(self._pos[: n - 1])
        seq = ad.concat([prefix, x], axis=1)
        out = seq
        bias = nn.causal_bias(l + n - 1)
        for block in self.dec_blocks:
            out = block(out, bias)
        out = self.dec_ln(out)
        # output above input token j (global position l+j) predicts token j+1
        return self.lm_head(ad.slice_along(out, 1, l, l + n - 1))

    def decode_text(self, latent: np.ndarray, vocab: list, mode: str = "greedy",
                    top_k: int = 5, seed: int = 0) -> list:
        """Autoregressive decode to strings; greedy or seeded top-k sampling."""
        if mode not in ("greedy", "top_k"):
            raise ValueError(f"unknown decode mode {mode!r}")
        latent = np.asarray(latent, dtype=np.float64)
        if latent.ndim == 2:
            latent = latent[None]
        b = latent.shape[0]
        rng = np.random.default_rng(seed)
        ids = np.full((b, 1), dt.BOS, dtype=np.int64)
        alive = np.ones(b, dtype=bool)
        for _ in range(self.cfg.max_len - 1):
            logits = self.decode_logits(latent, np.concatenate(
                [ids, np.zeros((b, 1), dtype=np.int64)], axis=1)).data[:, -1]
            if mode == "greedy":
                nxt = logits.argmax(axis=-1)
            else:
                nxt = np.empty(b, dtype=np.int64)
                for i in range(b):
                    top = np.argpartition(logits[i], -top_k)[-top_k:]
                    logp = logits[i, top] - logits[i, top].max()
                    p = np.exp(logp)
                    nxt[i] = rng.choice(top, p=p / p.sum())
            nxt = np.where(alive, nxt, dt.PAD)
            ids = np.concatenate([ids, nxt[:, None]], axis=1)
            alive &= nxt != dt.EOS
            if not alive.any():
                break
        return [dt.detokenize(row[1:], vocab) for row in ids]


def ted_loss(model: TextEncoderDecoder, token_lists: list, rng=None) -> tuple:
    """Caption round-trip cross entropy with optional latent noise."""
    ids, valid = pad_tokens(token_lists)
    latent = model.encode(ids, valid)
    if rng is not None and model.cfg.noise_aug > 0.0:
        latent = latent + Tensor(rng.standard_normal(latent.data.shape) * model.cfg.noise_aug)
    logits = model.decode_logits(latent, ids)
    loss = nn.cross_entropy(logits, ids[:, 1:], valid[:, 1:])
    return loss, {"ce": float(loss.data)}


def exact_match_rate(model: TextEncoderDecoder, captions: list, vocab: list,
                     batch_size: int = 64) -> float:
    """Fraction of captions reproduced exactly by encode -> greedy decode."""
    index = dt.vocab_index(vocab)
    hits = 0
    for i in range(0, len(captions), batch_size):
        chunk = captions[i : i + batch_size]
        latents = model.encode_captions(chunk, index)
        decoded = model.decode_text(latents, vocab)
        hits += sum(d == c for d, c in zip(decoded, chunk))
    return hits / len(captions)
