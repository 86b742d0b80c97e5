import io
import json

import numpy as np
import pytest

from mote import trainer
from mote.autodiff import Graph, Tensor
from mote.med import MedConfig, MotionEncoderDecoder, med_loss
from mote.mtdm import ModalityContext as MC
from mote.mtdm import MtdmConfig, UnifiedDenoiser
from mote.schedule import build_schedule, q_sample
from mote.ted import TedConfig, TextEncoderDecoder, ted_loss
from mote.trainer import (Draws, TrainConfig, TrainingDiverged, cond_loss,
                          joint_loss, sample_draws, sample_timesteps,
                          train_denoiser, train_med, train_ted)


def tiny_model(kind="in_context", seed=0):
    cfg = MtdmConfig(model_dim=16, heads=2, ffn_dim=32, blocks=3, interaction=kind,
                     motion_latent_len=2, text_latent_len=2, motion_latent_dim=4,
                     text_latent_dim=4, dropout=0.0, timesteps=40)
    return UnifiedDenoiser(cfg, seed=seed)


def tiny_sched():
    return build_schedule("scaled_linear", 40)


class ZeroDenoiser:
    """Predicts zero noise; used as a closed-form loss oracle."""

    def __call__(self, ctx_m, ctx_s):
        return Tensor(np.zeros_like(ctx_m.latent)), Tensor(np.zeros_like(ctx_s.latent))


class ContextRecorder(ZeroDenoiser):
    def __init__(self):
        self.calls = []

    def __call__(self, ctx_m, ctx_s):
        self.calls.append((ctx_m.kind, ctx_s.kind))
        return super().__call__(ctx_m, ctx_s)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch=0)


def test_sample_timesteps_range_and_coverage():
    rng = np.random.default_rng(0)
    t = sample_timesteps(rng, 5000, 7)
    assert t.min() == 1 and t.max() == 7
    assert set(np.unique(t)) == set(range(1, 8))


def test_draw_order_is_documented_order():
    sched = tiny_sched()
    rng1 = np.random.default_rng(3)
    d = sample_draws(rng1, sched, (4, 2, 4), (4, 2, 4))
    rng2 = np.random.default_rng(3)
    assert np.array_equal(d.t_m, rng2.integers(1, 41, size=4))
    assert np.array_equal(d.eps_m, rng2.standard_normal((4, 2, 4)))
    assert np.array_equal(d.t_s, rng2.integers(1, 41, size=4))
    assert np.array_equal(d.eps_s, rng2.standard_normal((4, 2, 4)))


def test_joint_loss_matches_direct_replay():
    # same draws pushed through predict_noise and raw numpy must reproduce
    # the loss value exactly
    model = tiny_model("cross_attention")
    sched = tiny_sched()
    rng = np.random.default_rng(1)
    z_m = rng.standard_normal((6, 2, 4))
    z_s = rng.standard_normal((6, 2, 4))
    draws = sample_draws(np.random.default_rng(2), sched, z_m.shape, z_s.shape)
    loss = joint_loss(model, sched, z_m, z_s, draws)
    zt_m = q_sample(sched, z_m, draws.t_m, draws.eps_m)
    zt_s = q_sample(sched, z_s, draws.t_s, draws.eps_s)
    em, es = model.predict_noise(MC.noisy(zt_m, draws.t_m), MC.noisy(zt_s, draws.t_s))
    dm, ds = em - draws.eps_m, es - draws.eps_s
    direct = ((dm * dm).sum() + (ds * ds).sum()) / 6
    assert np.isclose(float(loss.data), direct, rtol=1e-12)


def test_joint_loss_zero_for_oracle_denoiser():
    class Oracle:
        def __init__(self, draws):
            self.draws = draws

        def __call__(self, ctx_m, ctx_s):
            return Tensor(self.draws.eps_m), Tensor(self.draws.eps_s)

    sched = tiny_sched()
    rng = np.random.default_rng(4)
    z_m = rng.standard_normal((3, 2, 4))
    z_s = rng.standard_normal((3, 2, 4))
    draws = sample_draws(rng, sched, z_m.shape, z_s.shape)
    loss = joint_loss(Oracle(draws), sched, z_m, z_s, draws)
    assert float(loss.data) == 0.0


def test_joint_loss_magnitude_zero_model():
    # zero predictions make the per-sample loss a chi-square with 2*l*d dof
    sched = tiny_sched()
    rng = np.random.default_rng(5)
    batch, l, d = 256, 2, 4
    z_m = rng.standard_normal((batch, l, d))
    z_s = rng.standard_normal((batch, l, d))
    draws = sample_draws(rng, sched, z_m.shape, z_s.shape)
    loss = float(joint_loss(ZeroDenoiser(), sched, z_m, z_s, draws).data)
    dof = 2 * l * d
    sigma = np.sqrt(2.0 * dof / batch)
    assert abs(loss - dof) < 3 * sigma


def test_joint_loss_batch_order_invariant():
    model = tiny_model()
    sched = tiny_sched()
    rng = np.random.default_rng(6)
    z_m = rng.standard_normal((8, 2, 4))
    z_s = rng.standard_normal((8, 2, 4))
    draws = sample_draws(rng, sched, z_m.shape, z_s.shape)
    base = float(joint_loss(model, sched, z_m, z_s, draws).data)
    perm = rng.permutation(8)
    shuffled = float(joint_loss(model, sched, z_m[perm], z_s[perm], draws.take(perm)).data)
    assert np.isclose(base, shuffled, rtol=1e-12)


def test_cond_loss_context_pattern():
    rec = ContextRecorder()
    sched = tiny_sched()
    rng = np.random.default_rng(7)
    z = rng.standard_normal((2, 2, 4))
    draws = sample_draws(rng, sched, z.shape, z.shape)
    cond_loss(rec, sched, z, z, draws)
    assert rec.calls == [("noisy", "absent"), ("absent", "noisy")]


def test_cond_loss_trains_null_embeddings():
    model = tiny_model("in_context")
    sched = tiny_sched()
    rng = np.random.default_rng(8)
    z_m = rng.standard_normal((4, 2, 4))
    z_s = rng.standard_normal((4, 2, 4))
    draws = sample_draws(rng, sched, z_m.shape, z_s.shape)
    with Graph() as g:
        loss = cond_loss(model, sched, z_m, z_s, draws)
    g.backward(loss)
    assert np.linalg.norm(model.null_motion.grad) > 0
    assert np.linalg.norm(model.null_text.grad) > 0
    # the joint term never instantiates the null tokens
    model.zero_grad()
    with Graph() as g2:
        loss2 = joint_loss(model, sched, z_m, z_s, draws)
    g2.backward(loss2)
    assert model.null_motion.grad is None or np.linalg.norm(model.null_motion.grad) == 0


def test_train_denoiser_runs_logs_and_is_deterministic():
    sched = tiny_sched()
    rng = np.random.default_rng(9)
    z_m = rng.standard_normal((24, 2, 4))
    z_s = rng.standard_normal((24, 2, 4))
    cfg = TrainConfig(lr=3e-3, batch=8, epochs=4, seed=11)

    def run():
        model = tiny_model(seed=5)
        buf = io.StringIO()
        hist = train_denoiser(model, sched, z_m, z_s, cfg, log_file=buf)
        return model, hist, buf.getvalue()

    model_a, hist_a, log_a = run()
    model_b, hist_b, log_b = run()
    strip = lambda hist: [{k: v for k, v in h.items() if k != "wall_time"} for h in hist]
    assert strip(hist_a) == strip(hist_b)
    for pa, pb in zip(model_a.parameters(), model_b.parameters()):
        assert np.array_equal(pa.data, pb.data)
    lines = [json.loads(line) for line in log_a.strip().split("\n")]
    assert len(lines) == 4
    assert set(lines[0]) == {"epoch", "loss_joint", "loss_cond", "lr", "wall_time"}
    assert lines[0]["lr"] == pytest.approx(3e-3)
    total = [h["loss_joint"] + h["loss_cond"] for h in hist_a]
    assert total[-1] < total[0]


def test_train_denoiser_checkpoint_hook():
    sched = tiny_sched()
    rng = np.random.default_rng(10)
    z = rng.standard_normal((8, 2, 4))
    cfg = TrainConfig(lr=1e-3, batch=8, epochs=4, seed=0, checkpoint_every=2)
    seen = []
    train_denoiser(tiny_model(), sched, z, z, cfg,
                   checkpoint_fn=lambda model, epoch: seen.append(epoch))
    assert seen == [1, 3]


def test_train_denoiser_aborts_on_non_finite():
    sched = tiny_sched()
    rng = np.random.default_rng(12)
    z = rng.standard_normal((4, 2, 4))
    model = tiny_model()
    model.out_motion.weight.data[0, 0] = np.nan
    cfg = TrainConfig(lr=1e-3, batch=4, epochs=1, seed=3)
    with pytest.raises(TrainingDiverged, match=r"\(3, 0, 0\)"):
        train_denoiser(model, sched, z, z, cfg)


def test_frozen_zero_modulation_keeps_streams_insulated_through_training():
    # negative control: with the only cross-modal path pinned at zero, the
    # conditional output cannot depend on the condition even after training
    model = tiny_model("adaln")
    for block in model.blocks:
        for ada in (block.motion_ada, block.text_ada):
            ada.modulation.weight.requires_grad = False
            ada.modulation.bias.requires_grad = False
    sched = tiny_sched()
    rng = np.random.default_rng(13)
    z = rng.standard_normal((8, 2, 4))
    train_denoiser(model, sched, z, z, TrainConfig(lr=3e-3, batch=8, epochs=3, seed=1))
    z_m = rng.standard_normal((2, 2, 4))
    t = np.array([5, 9])
    a, _ = model.predict_noise(MC.noisy(z_m, t), MC.clean(rng.standard_normal((2, 2, 4))))
    b, _ = model.predict_noise(MC.noisy(z_m, t), MC.clean(rng.standard_normal((2, 2, 4))))
    assert np.array_equal(a, b)


def _mini_corpus():
    from mote import data

    specs = []
    for action in ("walk-line", "circle"):
        for direction in ("left", "right"):
            specs.append(data.MotionSpec(action=action, direction=direction,
                                         speed="medium", frames=32, seed=7))
    clips = [data.generate_clip(s) for s in specs]
    caps = [data.caption_for(s.action, s.direction, s.speed, template=0) for s in specs]
    return clips, caps


def test_train_med_reduces_loss():
    clips, _ = _mini_corpus()
    mean = np.concatenate(clips).mean(axis=0)
    std = np.concatenate(clips).std(axis=0) + 1e-6
    clips = [(c - mean) / std for c in clips]
    cfg = MedConfig(model_dim=32, heads=2, ffn_dim=64, latent_len=2, layers=3)
    model = MotionEncoderDecoder(cfg, seed=0)
    hist = train_med(model, clips, TrainConfig(lr=2e-3, batch=4, epochs=12, seed=0))
    assert hist[-1]["med_loss"] < 0.5 * hist[0]["med_loss"]
    assert {"recon", "kl"} <= set(hist[0])


def test_train_ted_cross_entropy_monotone_early():
    from mote import data

    _, caps = _mini_corpus()
    vocab = data.build_vocab()
    index = data.vocab_index(vocab)
    tokens = [data.tokenize(c, index) for c in caps]
    cfg = TedConfig(vocab_size=len(vocab), model_dim=32, heads=2, ffn_dim=64,
                    latent_len=2, enc_layers=2, dec_layers=2)
    model = TextEncoderDecoder(cfg, seed=0)
    hist = train_ted(model, tokens, TrainConfig(lr=2e-3, batch=4, epochs=10, seed=0))
    losses = [h["ted_loss"] for h in hist]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses
