import numpy as np
import pytest

from minlp_l2o import diffcore as dc
from minlp_l2o import netcore as nc


def test_init_shapes():
    w = nc.init_mlp(nc.MlpSpec((2, 4, 1)), seed=0)
    assert [a.shape for a in w.weights] == [(4, 2), (1, 4)]
    assert all(np.all(b == 0) for b in w.biases)


def test_init_bounds_and_batchnorm_defaults():
    spec = nc.correction_net_spec(6, 3, 16)
    w = nc.init_mlp(spec, 1)
    assert np.abs(w.weights[0]).max() <= np.sqrt(6 / 6)
    assert all(np.all(s == 1) for s in w.bn_scale) and all(np.all(t == 0) for t in w.bn_shift)
    assert len(w.running_var) == 3


def test_init_determinism():
    spec = nc.solution_mapping_spec(3, 2, 8)
    a, b, c = nc.init_mlp(spec, 5), nc.init_mlp(spec, 5), nc.init_mlp(spec, 6)
    assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
    assert any(not np.array_equal(x, y) for x, y in zip(a.weights, c.weights))


def test_layer_counts():
    assert nc.solution_mapping_spec(3, 2, 8).n_layers == 5
    d = nc.correction_net_spec(3, 2, 8)
    assert d.n_layers == 4 and d.batchnorm and d.dropout == 0.2


def test_zero_weights_give_zero_output():
    w = nc.init_mlp(nc.solution_mapping_spec(3, 2, 8), 0)
    for a in w.weights:
        a[:] = 0
    out = nc.forward(w, np.random.default_rng(0).normal(size=(4, 3)))
    np.testing.assert_array_equal(out.value, 0)


def test_eval_is_deterministic_and_rowwise():
    w = nc.init_mlp(nc.correction_net_spec(3, 2, 8), 0)
    x = np.random.default_rng(0).normal(size=(5, 3))
    a = nc.forward(w, x, nc.EVAL).value
    np.testing.assert_array_equal(a, nc.forward(w, x, nc.EVAL).value)
    np.testing.assert_allclose(nc.forward(w, x[2:3], nc.EVAL).value, a[2:3], rtol=1e-12, atol=1e-14)


def test_train_mode_needs_two_rows_with_batchnorm():
    w = nc.init_mlp(nc.correction_net_spec(3, 2, 8), 0)
    with pytest.raises(ValueError):
        nc.forward(w, np.ones((1, 3)), nc.TRAIN, np.random.default_rng(0))


def test_train_mode_updates_running_stats():
    w = nc.init_mlp(nc.correction_net_spec(3, 2, 8), 0)
    nc.forward(w, np.random.default_rng(0).normal(size=(16, 3)), nc.TRAIN, np.random.default_rng(1))
    assert not np.all(w.running_mean[0] == 0)
    assert np.all(w.running_var[0] > 0)


def test_input_width_checked():
    w = nc.init_mlp(nc.solution_mapping_spec(3, 2, 8), 0)
    with pytest.raises(dc.ShapeError):
        nc.forward(w, np.ones((2, 4)))


def test_input_gradient_matches_finite_differences():
    w = nc.init_mlp(nc.correction_net_spec(3, 2, 8), 0)
    nc.forward(w, np.random.default_rng(0).normal(size=(32, 3)), nc.TRAIN, np.random.default_rng(1))
    x0 = np.random.default_rng(2).normal(size=(2, 3))
    proj = np.random.default_rng(3).normal(size=(2, 2))
    assert dc.grad_check(lambda x: dc.sum(nc.forward(w, x, nc.EVAL) * proj), x0) <= 1e-5


def test_inverted_dropout_preserves_mean_for_linear_stack():
    spec = nc.MlpSpec((2, 64, 1), relu=False, dropout=0.2)
    w = nc.init_mlp(spec, 0)
    x = np.array([[0.3, -0.7]])
    ref = nc.forward(w, x, nc.EVAL).value[0, 0]
    rng = np.random.default_rng(0)
    batch = np.repeat(x, 20000, axis=0)
    mean = nc.forward(w, batch, nc.TRAIN, rng).value.mean()
    assert mean == pytest.approx(ref, abs=0.03)


def test_dropout_rate():
    spec = nc.MlpSpec((4, 1000, 1), dropout=0.2)
    w = nc.init_mlp(spec, 0)
    w.weights[0][:] = 0
    w.biases[0][:] = 1.0
    w.weights[1][:] = 1.0
    out = nc.forward(w, np.zeros((50, 4)), nc.TRAIN, np.random.default_rng(0)).value
    kept = out / 1.25 / 1000
    assert kept.mean() == pytest.approx(0.8, abs=0.01)


def test_arrays_round_trip():
    w = nc.init_mlp(nc.correction_net_spec(3, 2, 8), 0)
    back = nc.MlpWeights.from_arrays(w.spec, w.arrays())
    assert all(np.array_equal(a, b) for a, b in zip(w.weights, back.weights))
    bad = dict(w.arrays())
    bad["bn_var0"] = -np.ones(8)
    with pytest.raises(ValueError):
        nc.MlpWeights.from_arrays(w.spec, bad)


@pytest.mark.parametrize("family,n,width", [
    ("IQP", 20, 64), ("IQP", 1000, 2048), ("INP", 100, 256), ("IQP", 60, 128),
    ("MIRB", 2, 4), ("MIRB", 20, 16), ("MIRB", 10000, 1024), ("rb2d", 1, 4),
])
def test_hidden_widths(family, n, width):
    assert nc.hidden_width_for(family, n, n) == width


def test_mirb_widths_are_monotone_powers_of_two():
    widths = [nc.hidden_width_for("MIRB", n) for n in (2, 5, 20, 200, 2000, 10000, 20000)]
    assert widths == sorted(widths)
    assert all(w & (w - 1) == 0 for w in widths)
