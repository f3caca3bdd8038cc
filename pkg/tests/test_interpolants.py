import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alicfm.interpolants import (
    AliGenerator,
    ali_dt,
    ali_eval,
    ali_point_and_velocity,
    linear_ref,
    piecewise_ref,
    polyline_eval,
    spline_eval,
    spline_fit,
)

from oracles import natural_spline_dense, rel_err


def _constant_gen(dim: int, c) -> AliGenerator:
    """Generator whose correction is the constant ``c`` (zero weights, bias c)."""
    gen = AliGenerator(dim, hidden=(4,), rng=0)
    state = [np.zeros_like(p.data) for p in gen.params]
    state[-1] = np.asarray(c, dtype=np.float64)
    gen.net.load_state(state)
    return gen


# --- references ----------------------------------------------------------------


def test_linear_ref_examples():
    np.testing.assert_array_equal(linear_ref([0, 0], [2, 2], 0.5), [1, 1])
    np.testing.assert_array_equal(linear_ref([1, 0], [0, 1], 0.25), [0.75, 0.25])
    x0, x1 = np.array([[1.0, 2.0]]), np.array([[3.0, -4.0]])
    np.testing.assert_array_equal(linear_ref(x0, x1, 0.0), x0)
    np.testing.assert_array_equal(linear_ref(x0, x1, 1.0), x1)


def test_linear_ref_per_row_times():
    x0 = np.zeros((3, 1))
    x1 = np.ones((3, 1))
    np.testing.assert_allclose(linear_ref(x0, x1, [0.1, 0.5, 0.9])[:, 0], [0.1, 0.5, 0.9])


def test_piecewise_first_segment_example():
    assert piecewise_ref(0.0, 1.0, 0.0, 0.5, 0.25) == pytest.approx(0.5, abs=1e-15)


def test_piecewise_endpoints_and_knot():
    x0, xm, x1 = np.array([0.0, 1.0]), np.array([2.0, -1.0]), np.array([5.0, 3.0])
    np.testing.assert_allclose(piecewise_ref(x0, xm, x1, 0.3, 0.0), x0)
    np.testing.assert_allclose(piecewise_ref(x0, xm, x1, 0.3, 1.0), x1)
    np.testing.assert_allclose(piecewise_ref(x0, xm, x1, 0.3, 0.3), xm)


def test_piecewise_literal_form_breaks_continuity():
    left = piecewise_ref(0.0, 1.0, 0.0, 0.5, 0.5, form="literal")
    right = piecewise_ref(0.0, 1.0, 0.0, 0.5, 0.5 + 1e-12, form="literal")
    assert left == pytest.approx(1.0)
    assert right == pytest.approx(1.0, abs=1e-9)  # x1=0: the second case is (1-t) x_mid / (1-t_i)
    right = piecewise_ref(0.0, 1.0, 2.0, 0.5, 0.5 + 1e-12, form="literal")
    assert abs(right - left) > 1.0


@pytest.mark.parametrize("t_mid", [0.0, 1.0])
def test_piecewise_rejects_boundary_knot(t_mid):
    with pytest.raises(ValueError):
        piecewise_ref(0.0, 1.0, 0.0, t_mid, 0.5)


@settings(max_examples=50, deadline=None)
@given(
    st.floats(0.01, 0.99),
    st.lists(st.floats(-10, 10), min_size=6, max_size=6),
)
def test_piecewise_continuous_at_knot(t_mid, coords):
    x0, xm, x1 = (np.array(coords[k : k + 2]) for k in (0, 2, 4))
    eps = 1e-9
    below = piecewise_ref(x0, xm, x1, t_mid, t_mid - eps)
    above = piecewise_ref(x0, xm, x1, t_mid, t_mid + eps)
    np.testing.assert_allclose(below, above, atol=1e-6)


def test_polyline_through_tuples():
    pts = np.array([[[0.0], [1.0], [0.0]]])
    times = [0.0, 0.5, 1.0]
    pos, vel = polyline_eval(pts, times, [0.25])
    assert pos[0, 0] == pytest.approx(0.5)
    assert vel[0, 0] == pytest.approx(2.0)
    pos, vel = polyline_eval(pts, times, [0.75])
    assert vel[0, 0] == pytest.approx(-2.0)


# --- ALI generator ------------------------------------------------------------


def test_ali_endpoints_exact_for_random_generators():
    rng = np.random.default_rng(0)
    for seed in range(20):
        gen = AliGenerator(3, hidden=(8, 8), rng=seed)
        x0, x1 = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
        np.testing.assert_array_equal(ali_eval(gen, x0, x1, 0.0), x0)
        np.testing.assert_array_equal(ali_eval(gen, x0, x1, 1.0), x1)


def test_ali_endpoints_exact_with_time_noise():
    gen = AliGenerator(2, hidden=(8,), time_noise=0.1, rng=1)
    rng = np.random.default_rng(0)
    x0, x1 = rng.normal(size=(10, 2)), rng.normal(size=(10, 2))
    np.testing.assert_array_equal(ali_eval(gen, x0, x1, 0.0, train=True, rng=rng), x0)
    np.testing.assert_array_equal(ali_eval(gen, x0, x1, 1.0, train=True, rng=rng), x1)


def test_ali_constant_correction_midpoint():
    c = np.array([0.4, -2.0])
    gen = _constant_gen(2, c)
    x0, x1 = np.array([[0.0, 0.0]]), np.array([[2.0, 4.0]])
    np.testing.assert_allclose(ali_eval(gen, x0, x1, 0.5), [[1.0 + 0.1, 2.0 - 0.5]], atol=1e-15)


def test_ali_dt_zero_and_constant_corrections():
    x0, x1 = np.array([[0.0, 1.0], [2.0, 2.0]]), np.array([[1.0, 1.0], [-1.0, 0.0]])
    gen = _constant_gen(2, [0.0, 0.0])
    for t in (0.0, 0.3, 1.0):
        np.testing.assert_allclose(ali_dt(gen, x0, x1, t), x1 - x0, atol=1e-15)
    c = np.array([1.5, -0.5])
    gen = _constant_gen(2, c)
    for t in (0.0, 0.3, 1.0):
        np.testing.assert_allclose(ali_dt(gen, x0, x1, t), x1 - x0 + (1 - 2 * t) * c, atol=1e-14)


@pytest.mark.parametrize("embedding", [0, 2])
def test_ali_dt_matches_finite_differences(embedding):
    rng = np.random.default_rng(7)
    h = 1e-4
    for seed in range(10):
        gen = AliGenerator(2, hidden=(16, 16), time_embedding=embedding, rng=seed)
        x0, x1 = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
        t = rng.uniform(h, 1 - h, size=5)
        fd = (ali_eval(gen, x0, x1, t + h) - ali_eval(gen, x0, x1, t - h)) / (2 * h)
        assert rel_err(ali_dt(gen, x0, x1, t), fd) <= 1e-4


def test_point_and_velocity_agree_with_separate_calls():
    gen = AliGenerator(3, hidden=(8,), rng=2)
    rng = np.random.default_rng(0)
    x0, x1, t = rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), rng.uniform(size=4)
    g, v = ali_point_and_velocity(gen, x0, x1, t)
    np.testing.assert_allclose(g, ali_eval(gen, x0, x1, t), atol=1e-14)
    np.testing.assert_allclose(v, ali_dt(gen, x0, x1, t), atol=1e-14)


def test_ali_noiseless_evaluation_deterministic():
    gen = AliGenerator(2, hidden=(8,), time_noise=0.5, rng=0)
    x = np.ones((3, 2))
    np.testing.assert_array_equal(ali_eval(gen, x, -x, 0.4), ali_eval(gen, x, -x, 0.4))


def test_training_noise_requires_rng():
    gen = AliGenerator(2, hidden=(8,), time_noise=0.1)
    with pytest.raises(ValueError):
        ali_eval(gen, np.zeros((1, 2)), np.ones((1, 2)), 0.5, train=True)


# --- splines ------------------------------------------------------------------


def test_two_knot_spline_is_linear():
    a, b = np.array([1.0, -2.0]), np.array([3.0, 5.0])
    s = spline_fit(np.stack([a, b]), [0.0, 1.0])
    grid = np.linspace(0, 1, 101)
    for t in grid:
        assert np.max(np.abs(spline_eval(s, t)[0] - linear_ref(a, b, t))) <= 1e-12


def test_spline_on_a_line_stays_on_it():
    times = np.array([0.0, 0.2, 0.7, 1.0])
    vals = np.outer(times, [2.0, -1.0]) + [1.0, 0.5]
    s = spline_fit(vals, times)
    for t in np.linspace(0, 1, 37):
        np.testing.assert_allclose(spline_eval(s, t)[0], 2.0 * np.array([t, -0.5 * t]) + [1.0, 0.5], atol=1e-12)


def test_spline_matches_dense_oracle():
    times = np.array([0.0, 0.3, 0.55, 1.0])
    vals = (times**3 - 2 * times)[:, None]
    s = spline_fit(vals, times)
    for k, t in enumerate(times):
        assert spline_eval(s, t)[0, 0] == pytest.approx(vals[k, 0], abs=1e-14)
    for t in np.linspace(0, 1, 23):
        assert spline_eval(s, t)[0, 0] == pytest.approx(natural_spline_dense(times, vals[:, 0], t), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 8), st.integers(0, 10_000))
def test_spline_batch_matches_oracle_and_is_natural(K, seed):
    rng = np.random.default_rng(seed)
    times = np.sort(np.concatenate([[0.0, 1.0], rng.uniform(0.05, 0.95, K - 2)]))
    if np.min(np.diff(times)) < 1e-3:
        return
    vals = rng.normal(size=(3, K, 2))
    s = spline_fit(vals, times)
    t = rng.uniform(size=3)
    got = spline_eval(s, t)
    for r in range(3):
        for c in range(2):
            assert got[r, c] == pytest.approx(natural_spline_dense(times, vals[r, :, c], t[r]), abs=1e-10)
    np.testing.assert_allclose(spline_eval(s, 0.0, derivative=2), 0.0, atol=1e-12)
    np.testing.assert_allclose(spline_eval(s, 1.0, derivative=2), 0.0, atol=1e-12)


def test_spline_c2_at_interior_knots():
    rng = np.random.default_rng(3)
    times = np.array([0.0, 0.25, 0.4, 0.8, 1.0])
    s = spline_fit(rng.normal(size=(5, 2)), times)
    eps = 1e-10  # close enough that the smooth drift 2*eps*f'' stays far below 1e-6
    for tk in times[1:-1]:
        for der in (1, 2):
            left = spline_eval(s, tk - eps, derivative=der)
            right = spline_eval(s, tk + eps, derivative=der)
            assert np.max(np.abs(left - right)) <= 1e-6


def test_spline_derivative_matches_finite_difference():
    rng = np.random.default_rng(4)
    s = spline_fit(rng.normal(size=(2, 6, 3)), np.linspace(0, 1, 6))
    t, h = 0.37, 1e-6
    fd = (spline_eval(s, t + h) - spline_eval(s, t - h)) / (2 * h)
    assert rel_err(spline_eval(s, t, derivative=1), fd) <= 1e-7


def test_spline_rejects_duplicate_times():
    with pytest.raises(ValueError, match="duplicate"):
        spline_fit(np.zeros((3, 1)), [0.0, 0.5, 0.5])
