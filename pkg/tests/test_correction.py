import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minlp_l2o import correction as cr
from minlp_l2o import diffcore as dc
from minlp_l2o import netcore as nc

RC = cr.CorrectionConfig("RC")
LT = cr.CorrectionConfig("LT")


def _delta(n_x, n_xi, seed=0, zero=False):
    w = nc.init_mlp(nc.correction_net_spec(n_x + n_xi, n_x, 8), seed)
    if zero:
        for a in w.weights:
            a[:] = 0
    return w


def test_config_validation():
    with pytest.raises(ValueError):
        cr.CorrectionConfig("RC", tau=0)
    with pytest.raises(ValueError):
        cr.CorrectionConfig("XX")


def test_gumbel_sigmoid_values_and_slope():
    assert float(cr.gumbel_sigmoid(0.0, 0.0, 0.0, 1.0).value) == 0.5
    assert float(cr.gumbel_sigmoid(1.0, 0.0, 0.0, 1.0).value) == pytest.approx(0.731059, abs=1e-6)
    for tau in (0.5, 1.0, 2.0):
        h = dc.leaf(0.0)
        g = dc.backward(cr.gumbel_sigmoid(h, 0.0, 0.0, tau))[h]
        assert g == pytest.approx(0.25 / tau)


def test_rc_zero_delta_rounds_down():
    out = cr.rc_correct(np.array([2.7]), np.array([0.0]), _delta(1, 1, zero=True), RC, 0)
    assert out.v[0] == 0.5 and out.b[0] == 0 and out.x_hat.value[0] == 2.0


def test_rc_saturated_logit_rounds_up():
    out = cr.apply_rc(np.array([2.7]), np.array([10.0]), 0, RC)
    assert out.v[0] > 0.9999 and out.x_hat.value[0] == 3.0
    out = cr.apply_rc(np.array([3.0]), np.array([10.0]), 0, RC)
    assert out.x_hat.value[0] == 4.0


def test_rc_shifts_continuous_part():
    out = cr.apply_rc(np.array([0.25, 1.5]), np.array([0.5, -3.0]), 1, RC)
    np.testing.assert_array_equal(out.x_hat.value, [0.75, 1.0])


def test_lt_threshold_examples():
    logit = lambda t: np.log(t / (1 - t))  # noqa: E731
    assert cr.apply_lt(np.array([4.7]), np.array([logit(0.5)]), 0, LT).x_hat.value[0] == 5.0
    assert cr.apply_lt(np.array([4.7]), np.array([logit(0.9)]), 0, LT).x_hat.value[0] == 4.0


def test_lt_threshold_gradient():
    x = np.array([2.7])
    h = dc.leaf([0.3])
    out = cr.apply_lt(x, h, 0, LT)
    g = dc.backward(dc.sum(out.x_hat))[h][0]
    t = 1 / (1 + np.exp(-0.3))
    v = 1 / (1 + np.exp(-10 * (0.7 - t)))
    assert g == pytest.approx(-10 * v * (1 - v) * t * (1 - t))


def test_rs_round_examples():
    out = cr.rs_round(np.array([2.4, 2.5, 2.6]), 0)
    np.testing.assert_array_equal(out.x_hat.value, [2.0, 2.0, 3.0])


def test_rs_has_identity_gradient_and_rl_none():
    x = dc.leaf([2.4, 2.6])
    assert np.array_equal(dc.backward(dc.sum(cr.rs_round(x, 0).x_hat))[x], [1.0, 1.0])
    y = dc.leaf([2.4, 2.6])
    grads = dc.backward(dc.sum(cr.rs_round(y, 0, straight_through=False).x_hat) + dc.sum(y * 0))
    np.testing.assert_array_equal(grads[y], [0.0, 0.0])


def test_lt_with_zero_delta_equals_rs():
    x = np.random.default_rng(0).uniform(-5, 5, (200, 3))
    x[0, 0] = 1.5
    xi = np.zeros((200, 1))
    lt = cr.lt_correct(x, xi, _delta(3, 1, zero=True), LT, 0).x_hat.value
    np.testing.assert_array_equal(lt, cr.rs_round(x, 0).x_hat.value)


def test_rc_without_noise_is_deterministic():
    x = np.random.default_rng(0).normal(size=(10, 3))
    xi = np.ones((10, 2))
    d = _delta(3, 2, seed=4)
    a = cr.rc_correct(x, xi, d, RC, 1).x_hat.value
    np.testing.assert_array_equal(a, cr.rc_correct(x, xi, d, RC, 1).x_hat.value)


def test_noise_requires_rng():
    with pytest.raises(ValueError):
        cr.apply_rc(np.array([1.2]), np.array([0.0]), 0, cr.CorrectionConfig("RC", noise=True))


def test_dimension_mismatch():
    with pytest.raises(dc.ShapeError):
        cr.rc_correct(np.ones(3), np.ones(2), _delta(2, 2), RC, 0)


@pytest.mark.parametrize("method", ["RC", "LT"])
def test_delta_receives_gradient(method):
    d = _delta(2, 1, seed=1)
    nc.forward(d, np.random.default_rng(0).normal(size=(16, 3)), nc.TRAIN, np.random.default_rng(0))
    leaves = {k: dc.leaf(v) for k, v in d.params().items()}
    x = dc.leaf(np.random.default_rng(1).normal(size=(4, 2)))
    out = cr.correct(x, np.ones((4, 1)), d, cr.CorrectionConfig(method), 1, params=leaves)
    grads = dc.backward(dc.sum(dc.square(out.x_hat)))
    assert np.any(grads[leaves["W0"]] != 0)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(cr.METHODS), st.integers(0, 1000))
def test_integrality(method, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 10, (25, 4))
    d = _delta(4, 2, seed)
    cfg = cr.CorrectionConfig(method, noise=method == "RC")
    out = cr.correct(x, rng.normal(size=(25, 2)), d, cfg, 1, rng)
    z = out.x_hat.value[:, 1:]
    fl = np.floor(x[:, 1:])
    assert np.all(z == np.rint(z))
    assert np.all((z == fl) | (z == fl + 1))
    np.testing.assert_array_equal(z, fl + out.b)


def test_gumbel_noise_distribution():
    e = cr.gumbel_noise(np.random.default_rng(0), 200_000)
    assert e.mean() == pytest.approx(np.euler_gamma, abs=0.01)


def test_lipschitz_examples():
    assert cr.lipschitz_bound(RC, 1.0).l_phi == pytest.approx(0.0962, abs=1e-4)
    assert cr.lipschitz_bound(LT, 1.0).l_phi == 2.5
    assert cr.lipschitz_bound(RC, 0.0).l_phi == 0.0
    assert cr.lipschitz_bound(cr.CorrectionConfig("RC", tau=0.5), 1.0).l_phi == pytest.approx(4 * 0.0962, abs=1e-3)
    with pytest.raises(ValueError):
        cr.lipschitz_bound(cr.CorrectionConfig("RS"), 1.0)


def test_combined_lipschitz():
    est = cr.lipschitz_bound(LT, 2.0).with_constraints(g_g=3.0, l_g=1.0, g_phi=6.0, n_c_bar=2)
    assert est.total == 2 * (3.0 * 5.0 + 6.0 * 1.0)
    with pytest.raises(ValueError):
        cr.lipschitz_bound(LT, 2.0).total


@pytest.mark.parametrize("shape", [(5, 3), (20, 20), (1, 7), (64, 40)])
def test_spectral_norm_matches_svd(shape):
    m = np.random.default_rng(shape[0]).normal(size=shape)
    assert cr.spectral_norm(m) == pytest.approx(np.linalg.norm(m, 2), rel=1e-6)
    assert cr.spectral_norm(np.zeros(shape)) == 0.0


def test_network_bound_dominates_jacobian():
    d = _delta(3, 2, seed=2)
    nc.forward(d, np.random.default_rng(0).normal(size=(64, 5)), nc.TRAIN, np.random.default_rng(0))
    bound = cr.network_jacobian_bound(d)
    x0 = np.random.default_rng(5).normal(size=5)
    jac = np.stack([dc.backward(nc.forward(d, dc.build("slice", [x], index=(None, slice(None))))[0, i])[x]
                    for i in range(3) for x in [dc.leaf(x0)]])
    assert np.linalg.norm(jac, 2) <= bound
