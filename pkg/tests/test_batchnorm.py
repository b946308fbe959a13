import numpy as np
import pytest

from bnlab import tensor as T
from bnlab.batchnorm import (BatchNormState, BnInitScheme, DegenerateBatchError, UninitializedStatisticsError,
                             bn_forward, bn_forward_eval, bn_forward_train, bn_init)
from bnlab.rng import Prng
from conftest import fd_check, projected_loss


def state64(c, gamma=None, beta=None, momentum=0.1):
    st = bn_init(c, BnInitScheme.ONE_ZERO, dtype=np.float64)
    if gamma is not None:
        st.gamma.data = np.asarray(gamma, dtype=np.float64)
    if beta is not None:
        st.beta.data = np.asarray(beta, dtype=np.float64)
    st.stat_momentum = momentum
    return st


def naive_bn(x, gamma, beta, eps):
    """Per-feature loop using the textbook four steps."""
    out = np.empty_like(x)
    for c in range(x.shape[1]):
        v = x[:, c]
        mu = v.mean()
        var = ((v - mu) ** 2).mean()
        out[:, c] = gamma[c] * (v - mu) / np.sqrt(var + eps) + beta[c]
    return out


def test_train_matches_loop_oracle(rng):
    x = rng.standard_normal((16, 3, 4, 4)) * 3 + 1
    st = state64(3, rng.standard_normal(3), rng.standard_normal(3))
    got = bn_forward_train(T.Tensor(x), st).data
    np.testing.assert_allclose(got, naive_bn(x, st.gamma.data, st.beta.data, st.eps), atol=1e-12)


def test_train_output_moments(rng):
    gamma, beta = np.array([2.0, -0.5, 0.3]), np.array([0.1, -1.0, 4.0])
    st = state64(3, gamma, beta)
    y = bn_forward_train(T.Tensor(rng.standard_normal((256, 3)) * 5 - 2), st).data
    np.testing.assert_allclose(y.mean(axis=0), beta, atol=1e-5)
    np.testing.assert_allclose(y.std(axis=0), np.abs(gamma), atol=1e-3)


def test_constant_feature_gives_beta():
    st = state64(1, [3.0], [0.7])
    y = bn_forward_train(T.Tensor(np.full((8, 1), 5.0)), st).data
    np.testing.assert_allclose(y, 0.7)


def test_running_stats_ema():
    st = state64(1)
    x = np.array([[1.0], [3.0]])
    bn_forward_train(T.Tensor(x), st)
    assert st.running_mean[0] == pytest.approx(0.9 * 0 + 0.1 * 2.0)
    assert st.running_var[0] == pytest.approx(0.9 * 1 + 0.1 * 1.0)  # biased variance of [1, 3] is 1


def test_eval_after_one_step_momentum_one(rng):
    st = state64(4, rng.standard_normal(4), rng.standard_normal(4), momentum=1.0)
    x = rng.standard_normal((32, 4, 3, 3))
    y_train = bn_forward_train(T.Tensor(x), st).data
    st.mode = "eval"
    np.testing.assert_allclose(bn_forward(T.Tensor(x), st).data, y_train, atol=1e-5)


def test_eval_does_not_touch_stats(rng):
    st = state64(2)
    bn_forward_train(T.Tensor(rng.standard_normal((4, 2))), st)
    mean, var = st.running_mean.copy(), st.running_var.copy()
    st.mode = "eval"
    bn_forward_eval(T.Tensor(rng.standard_normal((4, 2)) + 10), st)
    np.testing.assert_array_equal(st.running_mean, mean)
    np.testing.assert_array_equal(st.running_var, var)


def test_eval_before_stats_raises():
    st = state64(2)
    st.mode = "eval"
    with pytest.raises(UninitializedStatisticsError):
        bn_forward(T.Tensor(np.ones((2, 2))), st)


def test_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        bn_forward_train(T.Tensor(np.ones((1, 3))), state64(3))


def test_single_example_4d_is_fine(rng):
    bn_forward_train(T.Tensor(rng.standard_normal((1, 2, 2, 2))), state64(2))


def test_feature_mismatch():
    with pytest.raises(T.ShapeError):
        bn_forward_train(T.Tensor(np.ones((4, 3))), state64(2))


def test_state_validation():
    with pytest.raises(ValueError):
        BatchNormState(T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), np.zeros(2), np.ones(2), eps=0.0)
    with pytest.raises(T.ShapeError):
        BatchNormState(T.Tensor(np.ones(2)), T.Tensor(np.zeros(3)), np.zeros(2), np.ones(2))


@pytest.mark.parametrize("scheme,lo,hi,beta", [
    ("uniform01_zero", 0.0, 1.0, 0.0), ("uniform_sym_zero", -1.0, 1.0, 0.0),
    ("one_zero", 1.0, 1.0, 0.0), ("one_one", 1.0, 1.0, 1.0)])
def test_init_schemes(scheme, lo, hi, beta):
    st = bn_init(5000, scheme, Prng(0))
    g = st.gamma.data
    assert g.min() >= lo and g.max() <= hi
    if lo != hi:
        assert g.max() < hi
        assert abs(g.mean() - (lo + hi) / 2) < 3 * (hi - lo) / np.sqrt(12 * 5000) + 1e-3
    np.testing.assert_array_equal(st.beta.data, beta)
    assert not st.stats_ready


def test_uniform_needs_rng():
    with pytest.raises(ValueError):
        bn_init(3, "uniform01_zero")


def test_fd_bn_train(rng):
    x = T.Tensor(rng.standard_normal((6, 3, 2, 2)))
    st = state64(3, rng.standard_normal(3), rng.standard_normal(3))
    proj = rng.standard_normal((6, 3, 2, 2))
    err = fd_check(lambda: projected_loss(bn_forward_train(x, st), proj), {"x": x, "gamma": st.gamma,
                                                                          "beta": st.beta}, 120)
    assert err < 1e-4


def test_fd_bn_eval(rng):
    x = T.Tensor(rng.standard_normal((5, 3)))
    st = state64(3, rng.standard_normal(3), rng.standard_normal(3))
    st.load_statistics(rng.standard_normal(3), rng.random(3) + 0.5)
    st.mode = "eval"
    proj = rng.standard_normal((5, 3))
    err = fd_check(lambda: projected_loss(bn_forward_eval(x, st), proj), {"x": x, "gamma": st.gamma,
                                                                         "beta": st.beta}, 120)
    assert err < 1e-4
