import numpy as np
import pytest

from stosca.baselines import SGD, Adagrad, Adam, RMSProp, adagrad_step, adam_step, make_optimizer, rmsprop_step, sgd_step


def test_sgd_examples():
    np.testing.assert_allclose(sgd_step([1.0], [2.0], 0.1), [0.8])
    np.testing.assert_array_equal(sgd_step([1.0, -3.0], [0.0, 0.0], 0.1), [1.0, -3.0])


@pytest.mark.parametrize("kind", ["sgd", "adagrad", "rmsprop", "adam"])
def test_zero_gradient_stream_leaves_w(kind):
    opt = make_optimizer(kind)
    w = np.array([0.3, -1.2, 5.0])
    for _ in range(50):
        w2 = opt.step(w, np.zeros(3))
        np.testing.assert_array_equal(w2, w)


def test_sgd_uses_quadratic_decay():
    opt = SGD(alpha0=0.1, eps=0.01)
    opt.step(np.zeros(1), np.ones(1))
    assert opt.alpha == pytest.approx(0.1 * (1 - 0.001))


def test_sgd_quadratic_bowl_monotone():
    """w <- w - a * 2c w on f = c w^2 contracts monotonically for a < 1/(2c)."""
    c = 2.0
    opt = SGD(alpha0=0.2, eps=0.01)
    w = np.array([3.0])
    prev = abs(w[0])
    for _ in range(100):
        w = opt.step(w, 2 * c * w)
        assert abs(w[0]) < prev
        prev = abs(w[0])


def test_adagrad_decay_rate():
    opt = Adagrad(lr=0.01)
    g = np.array([0.7, -2.0])
    w = np.zeros(2)
    steps = []
    for _ in range(100):
        w2 = adagrad_step(opt, w, g)
        steps.append(np.abs(w2 - w))
        w = w2
    ratio = steps[99] / steps[0]
    np.testing.assert_allclose(ratio, 1 / np.sqrt(100), rtol=0.05)


def test_adam_first_step_magnitude():
    opt = Adam()
    g = np.array([1e-3, -5.0, 20.0])
    w = adam_step(opt, np.zeros(3), g)
    np.testing.assert_allclose(w, -0.001 * np.sign(g), rtol=1e-4)


def test_rmsprop_first_step():
    opt = RMSProp(lr=0.01, gamma=0.9)
    g = np.array([2.0, -0.5])
    w = rmsprop_step(opt, np.zeros(2), g)
    np.testing.assert_allclose(w, -0.01 * g / np.sqrt(0.1 * g * g), rtol=1e-7)


def test_unknown_kind():
    with pytest.raises(ValueError):
        make_optimizer("lbfgs")
