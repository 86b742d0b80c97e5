import numpy as np
import pytest

from mote import autodiff as ad
from mote import nn
from mote.autodiff import Graph, Tensor


def make_box(seed=0):
    return nn.RngBox(seed)


def test_linear_param_count_and_shapes():
    rng = np.random.default_rng(0)
    lin = nn.Linear(16, 24, rng)
    assert nn.param_count(lin) == 16 * 24 + 24
    out = lin(Tensor(np.zeros((3, 5, 16))))
    assert out.data.shape == (3, 5, 24)


def test_padded_keys_cannot_leak():
    # changing content at masked key positions must not move the output bits
    rng = np.random.default_rng(1)
    attn = nn.MultiHeadAttention(16, 4, rng, make_box())
    x = rng.standard_normal((2, 6, 16))
    valid = np.ones((2, 6), dtype=bool)
    valid[:, 4:] = False
    bias = nn.key_padding_bias(valid)
    base = attn(Tensor(x), Tensor(x.copy()), bias).data
    poked = x.copy()
    poked[:, 4:, :] = 1e6
    out = attn(Tensor(x), Tensor(poked), bias).data
    assert np.array_equal(base, out)


def test_causal_bias_hides_future():
    rng = np.random.default_rng(2)
    attn = nn.MultiHeadAttention(16, 2, rng, make_box())
    x = rng.standard_normal((1, 5, 16))
    bias = nn.causal_bias(5)
    base = attn(Tensor(x), Tensor(x), bias).data
    poked = x.copy()
    poked[0, -1] += 10.0
    out = attn(Tensor(poked), Tensor(poked), bias).data
    assert np.array_equal(base[0, :4], out[0, :4])
    assert not np.allclose(base[0, 4], out[0, 4])


def test_attention_weights_rows_normalized():
    rng = np.random.default_rng(3)
    scores = rng.standard_normal((2, 3, 4, 6)) * 8.0
    w = ad.softmax(Tensor(scores)).data
    np.testing.assert_allclose(w.sum(axis=-1), np.ones((2, 3, 4)), atol=1e-12)


def test_adaln_block_zero_init_is_exact_identity():
    rng = np.random.default_rng(4)
    block = nn.AdaLnBlock(32, 4, 64, rng, make_box())
    x = rng.standard_normal((2, 5, 32))
    cond = rng.standard_normal((2, 32)) * 3.0
    out = block(Tensor(x), Tensor(cond)).data
    assert np.array_equal(out, x)
    # and the conditioning vector is unreachable until weights move
    out2 = block(Tensor(x), Tensor(-cond)).data
    assert np.array_equal(out, out2)


def test_adaln_block_responds_once_modulation_nonzero():
    rng = np.random.default_rng(5)
    block = nn.AdaLnBlock(32, 4, 64, rng, make_box())
    block.modulation.weight.data = rng.standard_normal((32, 192)) * 0.1
    x = rng.standard_normal((2, 5, 32))
    a = block(Tensor(x), Tensor(np.ones((2, 32)))).data
    b = block(Tensor(x), Tensor(-np.ones((2, 32)))).data
    assert not np.array_equal(a, b)


def test_dropout_eval_is_identity_train_is_seeded():
    box = make_box(9)
    drop = nn.Dropout(0.5, box)
    x = np.ones((4, 8))
    assert np.array_equal(drop(Tensor(x)).data, x)
    drop.set_training(True)
    box.reseed(123)
    a = drop(Tensor(x)).data
    box.reseed(123)
    b = drop(Tensor(x)).data
    assert np.array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 2.0}


def test_timestep_features_layout():
    feats = nn.sinusoidal_features([0], 16)
    np.testing.assert_array_equal(feats[0, 0::2], np.zeros(8))
    np.testing.assert_array_equal(feats[0, 1::2], np.ones(8))


def test_timestep_features_distinct_over_training_range():
    feats = nn.sinusoidal_features(np.arange(1001), 64)
    # exhaustive pairwise min distance must be strictly positive
    sq = (feats ** 2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * feats @ feats.T
    np.fill_diagonal(d2, np.inf)
    assert d2.min() > 1e-6


def test_timestep_embedding_shapes():
    rng = np.random.default_rng(6)
    emb = nn.TimestepEmbedding(32, rng)
    out = emb(np.array([0, 5, 999]))
    assert out.data.shape == (3, 32)


def test_state_dict_round_trip():
    rng = np.random.default_rng(7)
    block = nn.PostNormBlock(16, 2, 32, rng, make_box())
    state = {k: v.copy() for k, v in nn.state_dict(block).items()}
    for p in block.parameters():
        p.data = p.data + 1.0
    nn.load_state(block, state)
    for name, p in block.named_parameters():
        np.testing.assert_array_equal(p.data, state[name])
    with pytest.raises(KeyError):
        nn.load_state(block, {"nope": np.zeros(3)})


def test_post_norm_block_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    box = make_box()
    block = nn.PostNormBlock(8, 2, 16, rng, box)
    x = Tensor(rng.standard_normal((2, 3, 8)), requires_grad=True, name="x")
    with Graph() as g:
        out = block(x)
    leaves = [x] + block.parameters()
    weights = rng.standard_normal(out.data.shape)
    err = ad.check_gradients(leaves, out, g, weights)
    assert err < 1e-5


def test_cross_attn_block_gradients_match_finite_differences():
    rng = np.random.default_rng(9)
    block = nn.CrossAttnBlock(8, 2, 16, rng, make_box())
    x = Tensor(rng.standard_normal((2, 3, 8)), requires_grad=True, name="x")
    mem = Tensor(rng.standard_normal((2, 4, 8)), requires_grad=True, name="mem")
    with Graph() as g:
        out = block(x, mem)
    leaves = [x, mem] + block.parameters()
    err = ad.check_gradients(leaves, out, g, rng.standard_normal(out.data.shape))
    assert err < 1e-5


def test_adaln_block_gradients_match_finite_differences():
    rng = np.random.default_rng(10)
    block = nn.AdaLnBlock(8, 2, 16, rng, make_box())
    # move modulation off zero so its gradient path is exercised
    block.modulation.weight.data = rng.standard_normal((8, 48)) * 0.05
    x = Tensor(rng.standard_normal((2, 3, 8)), requires_grad=True, name="x")
    cond = Tensor(rng.standard_normal((2, 8)), requires_grad=True, name="cond")
    with Graph() as g:
        out = block(x, cond)
    leaves = [x, cond] + block.parameters()
    err = ad.check_gradients(leaves, out, g, rng.standard_normal(out.data.shape))
    assert err < 1e-5


def test_cross_entropy_uniform_logits():
    vocab = 11
    logits = Tensor(np.zeros((2, 3, vocab)))
    targets = np.array([[1, 2, 3], [4, 5, 6]])
    loss = nn.cross_entropy(logits, targets)
    np.testing.assert_allclose(loss.data, np.log(vocab), atol=1e-12)


def test_cross_entropy_respects_mask():
    logits = np.zeros((1, 2, 5))
    logits[0, 1, 0] = 50.0  # would dominate the loss if not masked out
    targets = np.array([[2, 4]])
    valid = np.array([[True, False]])
    loss = nn.cross_entropy(Tensor(logits), targets, valid)
    np.testing.assert_allclose(loss.data, np.log(5), atol=1e-12)


def test_perfect_logits_give_near_zero_loss():
    targets = np.array([[0, 3]])
    logits = np.full((1, 2, 4), -100.0)
    logits[0, 0, 0] = 100.0
    logits[0, 1, 3] = 100.0
    loss = nn.cross_entropy(Tensor(logits), targets)
    assert loss.data < 1e-8
