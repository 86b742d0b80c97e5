import numpy as np

from mote import optim
from mote.autodiff import Graph, Tensor


def test_adamw_minimizes_quadratic():
    x = Tensor(np.array([5.0, -3.0]), requires_grad=True, name="x")
    opt = optim.AdamW([x], lr=0.1, weight_decay=0.0)
    for _ in range(300):
        opt.zero_grad()
        with Graph() as g:
            loss = (x * x).sum()
        g.backward(loss)
        opt.step()
    assert np.abs(x.data).max() < 1e-3


def test_adamw_first_step_is_bias_corrected_sign_step():
    x = Tensor(np.array([1.0]), requires_grad=True)
    opt = optim.AdamW([x], lr=0.01, weight_decay=0.0)
    x.grad = np.array([4.0])
    opt.step()
    # m-hat / sqrt(v-hat) == g/|g| on the first step regardless of magnitude
    np.testing.assert_allclose(x.data, [1.0 - 0.01], atol=1e-10)


def test_weight_decay_is_decoupled():
    x = Tensor(np.array([2.0]), requires_grad=True)
    opt = optim.AdamW([x], lr=0.1, weight_decay=0.5)
    x.grad = np.array([0.0])
    opt.step()
    # zero gradient: only the decay term moves the weight
    np.testing.assert_allclose(x.data, [2.0 * (1.0 - 0.1 * 0.5)], atol=1e-12)


def test_paramless_grads_are_skipped():
    x = Tensor(np.array([1.0]), requires_grad=True)
    opt = optim.AdamW([x], lr=0.1)
    opt.step()  # no grad accumulated; nothing should move
    np.testing.assert_array_equal(x.data, [1.0])


def test_cosine_lr_curve():
    assert optim.cosine_lr(1e-3, 0, 100) == 1e-3
    np.testing.assert_allclose(optim.cosine_lr(1e-3, 50, 100), 5e-4, atol=1e-18)
    np.testing.assert_allclose(optim.cosine_lr(1e-3, 100, 100), 0.0, atol=1e-18)
    assert optim.cosine_lr(1e-3, 200, 100) == 0.0  # clamped past the end
