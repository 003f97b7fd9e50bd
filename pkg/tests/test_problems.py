import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minlp_l2o import diffcore as dc
from minlp_l2o import problems as pb


def _mirb_fixed(p, q):
    return pb.CoefficientSet("MIRB", 2, 2, 4, 3, {"p": np.array(p, float), "Q": np.array(q, float)}, 0, 2, 4)


def test_iqp_shapes_and_ranges():
    c = pb.build_family("IQP", 2, 2, seed=0)
    q = c.arrays["Q"]
    assert q.shape == (2, 2)
    assert np.all(np.diag(q) >= 0) and np.all(np.diag(q) <= 0.01)
    assert np.count_nonzero(q - np.diag(np.diag(q))) == 0
    assert np.all((c.arrays["p"] >= 0) & (c.arrays["p"] <= 0.1))
    assert c.arrays["A"].shape == (2, 2)


def test_mirb_dims():
    c = pb.build_family("MIRB", 2, seed=0)
    assert c.arrays["p"].shape == (2,) and c.arrays["Q"].shape == (2,)
    assert (c.n_r, c.n_z, c.n_c, c.n_xi) == (2, 2, 4, 3)


def test_build_is_deterministic():
    assert pb.build_family("INP", 5, 3, 7) == pb.build_family("INP", 5, 3, 7)
    assert pb.build_family("INP", 5, 3, 7) != pb.build_family("INP", 5, 3, 8)


def test_unknown_family():
    with pytest.raises(ValueError):
        pb.build_family("LP", 2, 2)


def test_sampling_ranges():
    iqp = pb.build_family("IQP", 4, 3, 0)
    xi = pb.sample_instances(iqp, 500, 1)
    assert xi.shape == (500, 3) and np.all(np.abs(xi) <= 1)
    mirb = pb.build_family("MIRB", 2, seed=0)
    xi = pb.sample_instances(mirb, 500, 1)
    assert xi.shape == (500, 3)
    assert np.all((xi[:, 0] >= 1) & (xi[:, 0] <= 8))
    assert np.all((xi[:, 1:] >= 0.5) & (xi[:, 1:] <= 4.5))
    assert pb.sample_instances(mirb, 0, 1).shape == (0, 3)


def test_streams_are_independent():
    c = pb.build_family("IQP", 3, 3, 0)
    train = pb.sample_instances(c, 10, 0, pb.STREAM_TRAIN)
    test = pb.sample_instances(c, 10, 0, pb.STREAM_TEST)
    assert not np.array_equal(train, test)
    np.testing.assert_array_equal(test, pb.sample_instances(c, 10, 0, pb.STREAM_TEST))


def test_box_muller_moments():
    z = pb.normal(pb.make_rng(3), 0.0, 1.0, 200_000)
    assert abs(z.mean()) < 0.01 and abs(z.std() - 1.0) < 0.01


def test_objective_examples():
    iqp = pb.build_family("IQP", 3, 2, 0)
    assert float(pb.objective(iqp, np.zeros(2), np.zeros(3)).value) == 0.0
    mirb = _mirb_fixed([-1, -1], [-1, -1])
    assert float(pb.objective(mirb, [4, 2, 2], [2, 2, 4, 4]).value) == 0.0
    rb = pb.build_family("rb2d")
    assert float(pb.objective(rb, [3.83, 6.04], [0.0, 0.0]).value) == pytest.approx(14.6689)


def test_constraint_examples():
    iqp = pb.build_family("IQP", 2, 2, 0)
    np.testing.assert_allclose(pb.constraints(iqp, [0.3, -0.2], np.zeros(2)).value, [-0.3, 0.2])
    mirb = _mirb_fixed([-1, -1], [-1, -1])
    g = pb.constraints(mirb, [4, 2, 2], [2, 2, 4, 4]).value
    np.testing.assert_allclose(g, [0, -4, -4, -8])
    assert float(pb.violation(mirb, [4, 2, 2], [2, 2, 4, 4]).value) == 0.0


def test_inp_column_shift_identity():
    inp = pb.build_family("INP", 4, 3, 2)
    rng = np.random.default_rng(0)
    x = rng.normal(size=4)
    b = rng.uniform(-1, 1, 3)
    d = rng.uniform(-0.5, 0.5, 3)
    g_d = pb.constraints(inp, np.concatenate([b, d]), x).value
    g_0 = pb.constraints(inp, np.concatenate([b, np.zeros(3)]), x).value
    np.testing.assert_allclose(g_d - g_0, d * (x[0] - x[1]), atol=1e-14)
    iqp = pb.CoefficientSet("IQP", 0, 4, 3, 3, inp.arrays, 2, 4, 3)
    np.testing.assert_allclose(g_0, pb.constraints(iqp, b, x).value, atol=1e-15)


def test_violation_examples():
    iqp = pb.CoefficientSet("IQP", 0, 2, 2, 2, {"Q": np.zeros((2, 2)), "p": np.zeros(2), "A": np.eye(2)}, 0, 2, 2)
    assert float(pb.violation(iqp, [0.0, 1.0], [0.5, 0.0]).value) == 0.5
    assert float(pb.violation(iqp, [1.0, 2.0], [0.0, 0.0]).value) == 0.0


def test_violation_matches_clipped_sum():
    c = pb.build_family("IQP", 6, 5, 1)
    xi = pb.sample_instances(c, 20, 0)
    x = np.random.default_rng(1).normal(0, 5, (20, 6))
    g = xi * 0 + (x @ c.arrays["A"].T - xi)
    np.testing.assert_allclose(pb.violation(c, xi, x).value, np.clip(g, 0, None).sum(axis=1))


@pytest.mark.parametrize("family", ["IQP", "INP", "MIRB", "rb2d"])
def test_violation_zero_iff_feasible(family):
    c = pb.build_family(family, 3, 3, 0)
    xi = pb.sample_instances(c, 1000, 5)
    x = np.random.default_rng(2).normal(0, 3, (1000, c.n_x))
    v = pb.violation(c, xi, x).value
    g = pb.constraints(c, xi, x).value
    np.testing.assert_array_equal(v == 0, g.max(axis=1) <= 0)


@pytest.mark.parametrize("family", ["IQP", "INP", "MIRB", "rb2d"])
def test_gradients_match_finite_differences(family):
    c = pb.build_family(family, 3, 3, 0)
    xi = pb.sample_instances(c, 1, 5)[0]
    x0 = np.random.default_rng(3).normal(0, 2, c.n_x)
    w = np.random.default_rng(4).normal(size=c.n_c)
    assert dc.grad_check(lambda x: pb.objective(c, xi, x), x0) <= 1e-5
    assert dc.grad_check(lambda x: dc.sum(pb.constraints(c, xi, x) * w), x0) <= 1e-5


def test_feature_vector_packing():
    iqp = pb.build_family("IQP", 2, 2, 0)
    np.testing.assert_array_equal(pb.feature_vector(iqp, [0.1, -0.4]), [0.1, -0.4])
    assert pb.sample_instances(pb.build_family("INP", 2, 2, 0), 1, 0).shape[1] == 4
    assert pb.sample_instances(pb.build_family("MIRB", 2, seed=0), 1, 0).shape[1] == 3
    with pytest.raises(ValueError):
        pb.feature_vector(iqp, [0.1, 0.2, 0.3])


def test_dimension_mismatch():
    iqp = pb.build_family("IQP", 3, 2, 0)
    with pytest.raises(ValueError):
        pb.objective(iqp, [0.0, 0.0], np.zeros(4))


def test_mixed_integer_solution():
    s = pb.MixedIntegerSolution.from_vector([0.5, 2.0, -1.0], 1)
    np.testing.assert_array_equal(s.as_vector(), [0.5, 2.0, -1.0])
    with pytest.raises(ValueError):
        pb.MixedIntegerSolution([0.5], [1.5])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_seed_determines_instances(seed):
    c = pb.build_family("MIRB", 3, seed=seed)
    np.testing.assert_array_equal(pb.sample_instances(c, 5, seed), pb.sample_instances(c, 5, seed))
