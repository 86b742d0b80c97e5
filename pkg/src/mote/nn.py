"""Neural-net building blocks on top of the autodiff engine.

Transformer pieces shared by the two stage-1 autoencoders and the
stage-2 denoiser: linear layers, post-norm encoder blocks, decoder-style
blocks with cross-attention, adaptive-layernorm blocks with zero-init
modulation, timestep/position embeddings, dropout, and parameter/FLOP
accounting.  Attention masking uses an additive -1e30 bias so masked
weights underflow to exactly 0.0 and padded content cannot leak.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MASK_VALUE = -1e30


class RngBox:
    """Mutable holder for the generator that feeds dropout masks."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def reseed(self, seed: int):
        self.rng = np.random.default_rng(seed)


class Module:
    """Base class: parameter discovery via attribute walk, train/eval flag."""

    training = False

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield (f"{prefix}{name}", value)
        for name, child in self._children():
            yield from child.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def set_training(self, flag: bool):
        self.training = bool(flag)
        for _, child in self._children():
            child.set_training(flag)
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def param_count(module: Module) -> int:
    return sum(p.data.size for p in module.parameters())


def load_state(module: Module, state: dict, strict: bool = True):
    """Copy arrays from ``state`` into the module's parameters by name."""
    params = dict(module.named_parameters())
    if strict:
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
    for name, p in params.items():
        if name in state:
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ad.ShapeError(
                    f"load_state: param {name!r} expects {p.data.shape}, got {arr.shape}"
                )
            p.data = arr.copy()


def state_dict(module: Module) -> dict:
    return {name: p.data for name, p in module.named_parameters()}


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, init="xavier"):
        if init == "xavier":
            std = np.sqrt(2.0 / (d_in + d_out))
            w = rng.standard_normal((d_in, d_out)) * std
        elif init == "zero":
            w = np.zeros((d_in, d_out))
        else:
            w = rng.standard_normal((d_in, d_out)) * float(init)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out

    def flops(self, n_tokens: int) -> int:
        return 2 * n_tokens * self.weight.data.shape[0] * self.weight.data.shape[1]


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.eps = eps
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, eps=self.eps) * self.gamma + self.beta


class Dropout(Module):
    def __init__(self, rate, box: RngBox):
        self.rate = float(rate)
        self.box = box

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training or self.rate == 0.0:
            return x
        keep = 1.0 - self.rate
        mask = (self.box.rng.random(x.data.shape) < keep) / keep
        return x * Tensor(mask)


def key_padding_bias(valid: np.ndarray) -> np.ndarray:
    """(B, Nk) boolean validity -> (B, 1, 1, Nk) additive attention bias."""
    bias = np.where(np.asarray(valid, dtype=bool), 0.0, MASK_VALUE)
    return bias[:, None, None, :]


def causal_bias(n: int) -> np.ndarray:
    """(1, 1, n, n) additive bias hiding future positions."""
    bias = np.triu(np.full((n, n), MASK_VALUE), k=1)
    return bias[None, None]


class MultiHeadAttention(Module):
    def __init__(self, dim, heads, rng, box: RngBox, dropout=0.0):
        if dim % heads:
            raise ad.ShapeError(f"attention: dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = Linear(dim, dim, rng)
        # a key bias shifts every score in a softmax row equally, so it can
        # never affect the weights; omit it rather than carry a null direction
        self.k_proj = Linear(dim, dim, rng, bias=False)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)
        self.drop = Dropout(dropout, box)

    def _split(self, x: Tensor, n: int, batch: int) -> Tensor:
        x = ad.reshape(x, (batch, n, self.heads, self.head_dim))
        return ad.transpose(x, (0, 2, 1, 3))

    def __call__(self, query: Tensor, memory: Tensor, bias: np.ndarray | None = None):
        batch, n_q = query.data.shape[0], query.data.shape[1]
        n_k = memory.data.shape[1]
        q = self._split(self.q_proj(query), n_q, batch)
        k = self._split(self.k_proj(memory), n_k, batch)
        v = self._split(self.v_proj(memory), n_k, batch)
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.head_dim))
        if bias is not None:
            scores = scores + Tensor(bias)
        weights = ad.softmax(scores, axis=-1)
        mixed = ad.matmul(weights, v)
        mixed = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (batch, n_q, self.dim))
        return self.drop(self.out_proj(mixed))

    def flops(self, n_q: int, n_k: int) -> int:
        proj = self.q_proj.flops(n_q) + self.k_proj.flops(n_k) + self.v_proj.flops(n_k)
        proj += self.out_proj.flops(n_q)
        return proj + 4 * n_q * n_k * self.dim


class FeedForward(Module):
    def __init__(self, dim, hidden, rng, box: RngBox, dropout=0.0):
        self.lin1 = Linear(dim, hidden, rng)
        self.lin2 = Linear(hidden, dim, rng)
        self.drop = Dropout(dropout, box)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(self.drop(ad.gelu(self.lin1(x))))

    def flops(self, n_tokens: int) -> int:
        return self.lin1.flops(n_tokens) + self.lin2.flops(n_tokens)


class PostNormBlock(Module):
    """Self-attention + FFN, each followed by residual add then layernorm."""

    def __init__(self, dim, heads, ffn, rng, box: RngBox, dropout=0.0):
        self.attn = MultiHeadAttention(dim, heads, rng, box, dropout)
        self.ln1 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn, rng, box, dropout)
        self.ln2 = LayerNorm(dim)

    def __call__(self, x: Tensor, bias: np.ndarray | None = None) -> Tensor:
        x = self.ln1(x + self.attn(x, x, bias))
        return self.ln2(x + self.ffn(x))

    def flops(self, n_tokens: int) -> int:
        return self.attn.flops(n_tokens, n_tokens) + self.ffn.flops(n_tokens)


class CrossAttnBlock(Module):
    """Decoder-style block: self-attention, cross-attention to a memory, FFN."""

    def __init__(self, dim, heads, ffn, rng, box: RngBox, dropout=0.0):
        self.self_attn = MultiHeadAttention(dim, heads, rng, box, dropout)
        self.ln1 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng, box, dropout)
        self.ln2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn, rng, box, dropout)
        self.ln3 = LayerNorm(dim)

    def __call__(self, x, memory, self_bias=None, memory_bias=None):
        x = self.ln1(x + self.self_attn(x, x, self_bias))
        x = self.ln2(x + self.cross_attn(x, memory, memory_bias))
        return self.ln3(x + self.ffn(x))

    def flops(self, n_tokens: int, n_memory: int) -> int:
        return (
            self.self_attn.flops(n_tokens, n_tokens)
            + self.cross_attn.flops(n_tokens, n_memory)
            + self.ffn.flops(n_tokens)
        )


class PreNormBlock(Module):
    """Self-attention + FFN with layernorm before each sublayer.

    The residual path stays unnormalized, so gradients reach early layers
    at full strength from step one; the stage-1 codecs use this because
    their training runs are short and have no warmup phase.
    """

    def __init__(self, dim, heads, ffn, rng, box: RngBox, dropout=0.0):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng, box, dropout)
        self.ln2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn, rng, box, dropout)

    def __call__(self, x: Tensor, bias: np.ndarray | None = None) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, bias)
        return x + self.ffn(self.ln2(x))

    def flops(self, n_tokens: int) -> int:
        return self.attn.flops(n_tokens, n_tokens) + self.ffn.flops(n_tokens)


class PreNormCrossBlock(Module):
    """Decoder-style pre-norm block: self-attention, cross-attention, FFN."""

    def __init__(self, dim, heads, ffn, rng, box: RngBox, dropout=0.0):
        self.ln1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng, box, dropout)
        self.ln2 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng, box, dropout)
        self.ln3 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn, rng, box, dropout)

    def __call__(self, x, memory, self_bias=None, memory_bias=None):
        h = self.ln1(x)
        x = x + self.self_attn(h, h, self_bias)
        h = self.ln2(x)
        x = x + self.cross_attn(h, memory, memory_bias)
        return x + self.ffn(self.ln3(x))

    def flops(self, n_tokens: int, n_memory: int) -> int:
        return (
            self.self_attn.flops(n_tokens, n_tokens)
            + self.cross_attn.flops(n_tokens, n_memory)
            + self.ffn.flops(n_tokens)
        )


class CrossFfnBlock(Module):
    """Pre-norm cross-attention + FFN, no self-attention.

    Query tokens read from a memory sequence and never talk to each other,
    so cost stays linear in the query count; used where queries are
    independent readouts (frame reconstruction, latent pooling).
    """

    def __init__(self, dim, heads, ffn, rng, box: RngBox, dropout=0.0):
        self.ln1 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng, box, dropout)
        self.ln2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn, rng, box, dropout)

    def __call__(self, x, memory, memory_bias=None):
        x = x + self.cross_attn(self.ln1(x), memory, memory_bias)
        return x + self.ffn(self.ln2(x))

    def flops(self, n_tokens: int, n_memory: int) -> int:
        return self.cross_attn.flops(n_tokens, n_memory) + self.ffn.flops(n_tokens)


class AdaLnBlock(Module):
    """Pre-norm block whose scale/shift/gate come from a conditioning vector.

    The modulation projection is zero-initialized, so a fresh block is an
    exact identity and the conditioning signal cannot reach the output
    until training moves the weights.
    """

    def __init__(self, dim, heads, ffn, rng, box: RngBox, dropout=0.0):
        self.attn = MultiHeadAttention(dim, heads, rng, box, dropout)
        self.ffn = FeedForward(dim, ffn, rng, box, dropout)
        self.modulation = Linear(dim, 6 * dim, rng, init="zero")
        self.dim = dim

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        mod = self.modulation(ad.silu(cond))  # (B, 6d)
        mod = ad.reshape(mod, (mod.data.shape[0], 1, 6 * self.dim))
        d = self.dim
        shift_a = ad.slice_along(mod, 2, 0, d)
        scale_a = ad.slice_along(mod, 2, d, 2 * d)
        gate_a = ad.slice_along(mod, 2, 2 * d, 3 * d)
        shift_f = ad.slice_along(mod, 2, 3 * d, 4 * d)
        scale_f = ad.slice_along(mod, 2, 4 * d, 5 * d)
        gate_f = ad.slice_along(mod, 2, 5 * d, 6 * d)
        h = ad.layer_norm(x) * (scale_a + 1.0) + shift_a
        x = x + gate_a * self.attn(h, h)
        h = ad.layer_norm(x) * (scale_f + 1.0) + shift_f
        return x + gate_f * self.ffn(h)

    def flops(self, n_tokens: int) -> int:
        return (
            self.attn.flops(n_tokens, n_tokens)
            + self.ffn.flops(n_tokens)
            + self.modulation.flops(1)
        )


def sinusoidal_features(values, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Interleaved sin/cos features: even columns sin, odd columns cos.

    Geometric frequency ladder from 1 down to 1/max_period; value 0 maps to
    all-zero sines and all-one cosines.
    """
    if dim % 2:
        raise ad.ShapeError(f"sinusoidal features need even dim, got {dim}")
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    angles = values[:, None] * freqs[None, :]
    out = np.empty((values.size, dim))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def position_table(n: int, dim: int) -> np.ndarray:
    """(n, dim) sinusoidal position encodings for positions 0..n-1."""
    return sinusoidal_features(np.arange(n), dim)


class TimestepEmbedding(Module):
    """Sinusoidal timestep features refined by a 2-layer MLP."""

    def __init__(self, dim, rng):
        self.dim = dim
        self.lin1 = Linear(dim, dim, rng)
        self.lin2 = Linear(dim, dim, rng)

    def __call__(self, t) -> Tensor:
        feats = Tensor(sinusoidal_features(t, self.dim))
        return self.lin2(ad.silu(self.lin1(feats)))

    def flops(self, n: int) -> int:
        return self.lin1.flops(n) + self.lin2.flops(n)


def cross_entropy(logits: Tensor, targets: np.ndarray, valid: np.ndarray | None = None):
    """Mean token-level cross entropy.

    logits (B, N, V); targets (B, N) int ids; valid optional (B, N) mask.
    """
    b, n, v = logits.data.shape
    logp = ad.log_softmax(logits, axis=-1)
    onehot = np.zeros((b, n, v))
    rows = np.repeat(np.arange(b), n)
    cols = np.tile(np.arange(n), b)
    onehot[rows, cols, targets.reshape(-1)] = 1.0
    picked = (logp * Tensor(onehot)).sum(axis=-1)
    if valid is None:
        return -picked.mean()
    mask = np.asarray(valid, dtype=np.float64)
    total = float(mask.sum())
    return -(picked * Tensor(mask)).sum() / total
