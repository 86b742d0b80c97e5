"""Optimization loops for both training stages.

Stage 1 fits the motion and text autoencoders on the raw corpus.  Stage 2
freezes them and fits the unified denoiser on their latent codes with two
terms: a joint term where both modalities are noisy, and a marginal term
where one modality is absent.  The marginal term is what trains the null
branches that guidance mixes in at sampling time.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from . import nn
from .autodiff import Graph, Tensor
from .med import MotionEncoderDecoder, med_loss
from .mtdm import ModalityContext, UnifiedDenoiser
from .optim import AdamW, cosine_lr
from .schedule import NoiseSchedule, q_sample
from .ted import TextEncoderDecoder, ted_loss


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch: int = 64          # desk default; reference setting is 128
    epochs: int = 100
    seed: int = 0
    joint_weight: float = 1.0
    cond_weight: float = 1.0
    checkpoint_every: int = 0   # 0 disables periodic snapshots

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch < 1 or self.epochs < 1:
            raise ValueError("batch and epochs must be at least 1")


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite; message carries replay info."""


@dataclass(frozen=True)
class Draws:
    """One step's noise draws, kept explicit so tests can replay them.

    Draw order from a generator is fixed: t_m, eps_m, t_s, eps_s.
    """

    t_m: np.ndarray
    eps_m: np.ndarray
    t_s: np.ndarray
    eps_s: np.ndarray

    def take(self, indices) -> "Draws":
        return Draws(self.t_m[indices], self.eps_m[indices],
                     self.t_s[indices], self.eps_s[indices])


def sample_timesteps(rng, batch: int, total: int) -> np.ndarray:
    """Uniform integer noise levels in [1, total], one per sample."""
    return rng.integers(1, total + 1, size=batch)


def sample_draws(rng, sched: NoiseSchedule, motion_shape, text_shape) -> Draws:
    if motion_shape[0] != text_shape[0]:
        raise ValueError("motion and text batches must be the same size")
    batch = motion_shape[0]
    t_m = sample_timesteps(rng, batch, sched.timesteps)
    eps_m = rng.standard_normal(motion_shape)
    t_s = sample_timesteps(rng, batch, sched.timesteps)
    eps_s = rng.standard_normal(text_shape)
    return Draws(t_m, eps_m, t_s, eps_s)


def joint_loss(model: UnifiedDenoiser, sched: NoiseSchedule,
               z_m0: np.ndarray, z_s0: np.ndarray, draws: Draws) -> Tensor:
    """Both modalities noisy at independent levels; predict both noises.

    Squared error is summed over tokens and channels of both heads, then
    averaged over the batch.
    """
    zt_m = q_sample(sched, z_m0, draws.t_m, draws.eps_m)
    zt_s = q_sample(sched, z_s0, draws.t_s, draws.eps_s)
    eps_m, eps_s = model(ModalityContext.noisy(zt_m, draws.t_m),
                         ModalityContext.noisy(zt_s, draws.t_s))
    d_m = eps_m - Tensor(draws.eps_m)
    d_s = eps_s - Tensor(draws.eps_s)
    batch = z_m0.shape[0]
    return ((d_m * d_m).sum() + (d_s * d_s).sum()) / batch


def cond_loss(model: UnifiedDenoiser, sched: NoiseSchedule,
              z_m0: np.ndarray, z_s0: np.ndarray, draws: Draws) -> Tensor:
    """Marginal term: denoise each modality with the other one absent.

    Same accounting as joint_loss, two forward passes.  Gradients reach the
    null embeddings, which is how the unconditional branch gets trained.
    """
    zt_m = q_sample(sched, z_m0, draws.t_m, draws.eps_m)
    zt_s = q_sample(sched, z_s0, draws.t_s, draws.eps_s)
    eps_m, _ = model(ModalityContext.noisy(zt_m, draws.t_m),
                     ModalityContext.absent())
    _, eps_s = model(ModalityContext.absent(),
                     ModalityContext.noisy(zt_s, draws.t_s))
    d_m = eps_m - Tensor(draws.eps_m)
    d_s = eps_s - Tensor(draws.eps_s)
    batch = z_m0.shape[0]
    return ((d_m * d_m).sum() + (d_s * d_s).sum()) / batch


def _check_finite(value: float, label: str, seed_key) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(
            f"{label} became non-finite ({value}); replay with rng seed {seed_key}")


def train_denoiser(model: UnifiedDenoiser, sched: NoiseSchedule,
                   z_m0: np.ndarray, z_s0: np.ndarray, cfg: TrainConfig,
                   log_file=None, checkpoint_fn=None) -> list[dict]:
    """Full stage-2 loop.  Returns one metrics dict per epoch.

    Batching and every noise draw are functions of (cfg.seed, epoch, step),
    so a run is reproducible from its config alone.
    """
    if len(z_m0) != len(z_s0):
        raise ValueError("latent arrays must pair up one to one")
    params = model.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    model.set_training(True)
    n = len(z_m0)
    history = []
    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
        order = np.random.default_rng((cfg.seed, epoch)).permutation(n)
        sums = {"joint": 0.0, "cond": 0.0}
        start = time.perf_counter()
        steps = 0
        for step, lo in enumerate(range(0, n, cfg.batch)):
            idx = order[lo : lo + cfg.batch]
            seed_key = (cfg.seed, epoch, step)
            rng = np.random.default_rng(seed_key)
            model.box.reseed(rng.integers(2**63))
            zm, zs = z_m0[idx], z_s0[idx]
            draws_j = sample_draws(rng, sched, zm.shape, zs.shape)
            draws_c = sample_draws(rng, sched, zm.shape, zs.shape)
            opt.zero_grad()
            with Graph() as g:
                lj = joint_loss(model, sched, zm, zs, draws_j)
                lc = cond_loss(model, sched, zm, zs, draws_c)
                loss = lj * cfg.joint_weight + lc * cfg.cond_weight
            _check_finite(float(loss.data), "training loss", seed_key)
            g.backward(loss)
            opt.step(lr)
            sums["joint"] += float(lj.data)
            sums["cond"] += float(lc.data)
            steps += 1
        record = {
            "epoch": epoch,
            "loss_joint": sums["joint"] / steps,
            "loss_cond": sums["cond"] / steps,
            "lr": lr,
            "wall_time": time.perf_counter() - start,
        }
        history.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()
        if checkpoint_fn and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            checkpoint_fn(model, epoch)
    model.set_training(False)
    return history


def _fit_stage1(model, items: list, loss_fn, cfg: TrainConfig,
                log_file=None, label: str = "loss",
                bucket: bool = False) -> list[dict]:
    """Shared stage-1 loop: shuffle, batch, backprop loss_fn over items.

    With bucket=True, items batch with length-sorted neighbors and only
    the batch order is shuffled per epoch; variable-length inputs then pad
    to a near-tight bound instead of the global maximum.
    """
    params = model.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    model.set_training(True)
    n = len(items)
    if bucket:
        by_len = sorted(range(n), key=lambda i: (len(items[i]), i))
        batches = [by_len[lo: lo + cfg.batch] for lo in range(0, n, cfg.batch)]
    history = []
    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
        epoch_rng = np.random.default_rng((cfg.seed, epoch))
        if bucket:
            plan = [batches[i] for i in epoch_rng.permutation(len(batches))]
        else:
            order = epoch_rng.permutation(n)
            plan = [order[lo: lo + cfg.batch] for lo in range(0, n, cfg.batch)]
        total = 0.0
        parts_sum: dict = {}
        start = time.perf_counter()
        steps = 0
        for step, idx in enumerate(plan):
            seed_key = (cfg.seed, epoch, step)
            rng = np.random.default_rng(seed_key)
            model.box.reseed(rng.integers(2**63))
            batch_items = [items[i] for i in idx]
            opt.zero_grad()
            with Graph() as g:
                loss, parts = loss_fn(model, batch_items, rng)
            _check_finite(float(loss.data), label, seed_key)
            g.backward(loss)
            opt.step(lr)
            total += float(loss.data)
            for k, v in parts.items():
                parts_sum[k] = parts_sum.get(k, 0.0) + v
            steps += 1
        record = {"epoch": epoch, label: total / steps, "lr": lr,
                  "wall_time": time.perf_counter() - start}
        for k, v in parts_sum.items():
            record[k] = v / steps
        history.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()
    model.set_training(False)
    return history


def train_med(model: MotionEncoderDecoder, clips: list, cfg: TrainConfig,
              log_file=None) -> list[dict]:
    return _fit_stage1(model, clips, med_loss, cfg, log_file, label="med_loss",
                       bucket=True)


def train_ted(model: TextEncoderDecoder, token_lists: list, cfg: TrainConfig,
              log_file=None) -> list[dict]:
    return _fit_stage1(model, token_lists, ted_loss, cfg, log_file, label="ted_loss")
