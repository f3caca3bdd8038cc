import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alicfm.coupling import project_onto_atoms
from alicfm.interpolants import AliGenerator, piecewise_ref
from alicfm.nd import Tape, Tensor
from alicfm.regularizers import (
    LandMetricSpec,
    RegulariserSpec,
    calibrate_lambda,
    land_metric,
    piecewise_cost_at,
    reg_linear,
    reg_piecewise,
    reg_second_derivative,
    weighted_sq_norm,
)


def _constant_gen(dim, c):
    gen = AliGenerator(dim, hidden=(4,), rng=0)
    state = [np.zeros_like(p.data) for p in gen.params]
    state[-1] = np.asarray(c, dtype=np.float64)
    gen.net.load_state(state)
    return gen


def _pairs(n=3, d=2, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, d)), rng.normal(size=(n, d))


# --- linear reference ---------------------------------------------------------


def test_reg_linear_zero_correction():
    x0, x1 = _pairs()
    assert reg_linear(_constant_gen(2, [0, 0]), x0, x1, 0.3).item() == 0.0


def test_reg_linear_constant_correction():
    c = np.array([1.0, -2.0])
    x0, x1 = _pairs()
    val = reg_linear(_constant_gen(2, c), x0, x1, 0.5).item()
    assert val == pytest.approx(0.25**2 * 5.0, rel=1e-14)


def test_reg_linear_matches_reversed_summation():
    gen = AliGenerator(2, hidden=(8,), rng=3)
    x0, x1 = _pairs(seed=5)
    t = 0.37
    g = gen(x0, x1, t).data
    ref = (1 - t) * x0 + t * x1
    total = 0.0
    for n in reversed(range(3)):
        for a in reversed(range(2)):
            total += (g[n, a] - ref[n, a]) ** 2
    assert reg_linear(gen, x0, x1, t).item() == pytest.approx(total / 3, abs=1e-12)


@pytest.mark.parametrize("t", [0.0, 1.0])
def test_reg_linear_rejects_end_times(t):
    x0, x1 = _pairs()
    with pytest.raises(ValueError):
        reg_linear(_constant_gen(2, [0, 0]), x0, x1, t)


# --- piecewise reference ------------------------------------------------------


def test_reg_piecewise_zero_on_chord():
    x0, x1 = _pairs(n=20)
    t_i = 0.4
    xm = (1 - t_i) * x0 + t_i * x1
    rng = np.random.default_rng(0)
    val = reg_piecewise(_constant_gen(2, [0, 0]), x0, xm, x1, t_i, rng).item()
    assert val == pytest.approx(0.0, abs=1e-28)


@pytest.mark.parametrize("t_i", [0.25, 0.5, 0.8])
def test_reg_piecewise_off_chord_monte_carlo(t_i):
    # deviation from the chord is a tent of height |delta|, so E|.|^2 = |delta|^2 / 3
    n = 100_000
    rng = np.random.default_rng(1)
    x0 = np.tile([0.5, -1.0], (n, 1))
    x1 = np.tile([2.0, 1.0], (n, 1))
    delta = np.array([0.3, -0.7])
    xm = (1 - t_i) * x0 + t_i * x1 + delta
    val = reg_piecewise(_constant_gen(2, [0, 0]), x0, xm, x1, t_i, rng).item()
    expected = float(delta @ delta) / 3.0
    assert abs(val - expected) <= 0.01 * expected


def test_reg_piecewise_seeded_is_bit_exact():
    gen = AliGenerator(2, hidden=(8,), rng=1)
    x0, x1 = _pairs(n=16)
    xm = np.zeros_like(x0)
    a = reg_piecewise(gen, x0, xm, x1, 0.5, np.random.default_rng(9)).item()
    b = reg_piecewise(gen, x0, xm, x1, 0.5, np.random.default_rng(9)).item()
    assert a == b


def test_piecewise_minimiser_is_constrained_projection():
    rng = np.random.default_rng(11)
    for _ in range(20):
        x0, xm, x1, atoms = (rng.normal(size=(4, 2)) for _ in range(4))
        t_i = rng.uniform(0.1, 0.9)
        t = rng.uniform(0.0, 1.0)
        ref = piecewise_ref(x0, xm, x1, t_i, t)
        best = min(
            piecewise_cost_at(atoms[list(perm)], x0, xm, x1, t_i, t)
            for perm in itertools.permutations(range(4))
        )
        proj = project_onto_atoms(ref, atoms)
        assert proj.cost == pytest.approx(best, rel=1e-12, abs=1e-12)
        assert piecewise_cost_at(proj.points, x0, xm, x1, t_i, t) == pytest.approx(best, rel=1e-12)


# --- second derivative --------------------------------------------------------


def test_second_derivative_zero_for_affine_paths():
    x0, x1 = _pairs()
    val = reg_second_derivative(_constant_gen(2, [0, 0]), x0, x1, np.random.default_rng(0)).item()
    assert val == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("h", [1e-1, 1e-2, 1e-3])
def test_second_derivative_exact_on_quadratic_paths(h):
    # constant correction c makes G quadratic in t with G'' = -2c
    c = np.array([0.5, -1.5])
    x0, x1 = _pairs()
    spec = RegulariserSpec(kind="second_derivative", h=h)
    val = reg_second_derivative(_constant_gen(2, c), x0, x1, np.random.default_rng(0), spec).item()
    assert val == pytest.approx(4.0 * float(c @ c), rel=1e-6 if h < 1e-2 else 1e-10)


def _exact_second_time_derivative(gen, x0, x1, t):
    tt = Tensor(np.full((1, 1), t))
    out = np.empty(gen.dim)
    for a in range(gen.dim):
        with Tape() as outer:
            outer.watch(tt)
            with Tape() as inner:
                inner.watch(tt)
                g = gen(x0, x1, tt)[:, a].sum()
            (dg,) = inner.gradient(g, [tt])
            s = dg.sum()
        (d2g,) = outer.gradient(s, [tt])
        out[a] = d2g.data[0, 0]
    return out


def test_second_derivative_matches_double_reverse_mode():
    gen = AliGenerator(2, hidden=(16, 16), rng=4)
    x0, x1 = _pairs(n=1, seed=2)
    spec = RegulariserSpec(kind="second_derivative", h=1e-3, mc_samples=3)
    val = reg_second_derivative(gen, x0, x1, np.random.default_rng(5), spec).item()
    ts = np.random.default_rng(5).uniform(1e-3, 1 - 1e-3, size=3)
    exact = np.mean([np.sum(_exact_second_time_derivative(gen, x0, x1, t) ** 2) for t in ts])
    assert abs(val - exact) <= 1e-3 * exact


def test_second_derivative_invariant_to_pair_order():
    gen = AliGenerator(2, hidden=(8,), rng=6)
    x0, x1 = _pairs(n=5)
    spec = RegulariserSpec(kind="second_derivative", mc_samples=1)
    # one shared time for every pair makes the estimate a mean over a set
    class FixedRng:
        def uniform(self, lo, hi, size):
            return np.full(size, 0.4)

    a = reg_second_derivative(gen, x0, x1, FixedRng(), spec).item()
    b = reg_second_derivative(gen, x0[::-1], x1[::-1], FixedRng(), spec).item()
    assert a == pytest.approx(b, rel=1e-13)


def test_second_derivative_rejects_tiny_step():
    with pytest.raises(ValueError, match="cancellation"):
        RegulariserSpec(kind="second_derivative", h=1e-6)
    with pytest.raises(ValueError):
        reg_second_derivative(
            _constant_gen(2, [0, 0]), *_pairs(), np.random.default_rng(0), RegulariserSpec(h=1e-7)
        )


def test_regularisers_record_generator_gradients():
    gen = AliGenerator(2, hidden=(8,), rng=0)
    x0, x1 = _pairs()
    with Tape() as tape:
        loss = reg_linear(gen, x0, x1, 0.5)
    grads = tape.gradient(loss, gen.params)
    assert any(np.any(g.data != 0) for g in grads)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000), st.sampled_from(["linear", "piecewise", "second_derivative"]))
def test_regularisers_non_negative(seed, kind):
    gen = AliGenerator(2, hidden=(8,), rng=seed)
    rng = np.random.default_rng(seed)
    x0, xm, x1 = rng.normal(size=(3, 6, 2))
    if kind == "linear":
        val = reg_linear(gen, x0, x1, 0.3)
    elif kind == "piecewise":
        val = reg_piecewise(gen, x0, xm, x1, 0.3, rng)
    else:
        val = reg_second_derivative(gen, x0, x1, rng)
    assert val.item() >= 0.0


# --- LAND metric ----------------------------------------------------------------


def test_land_metric_at_reference_point():
    x = np.array([[0.3, -0.2]])
    spec = LandMetricSpec(points=x, times=[0.5], eps=1e-3)
    np.testing.assert_array_equal(land_metric(x, 0.5, spec), np.full((1, 2), 1e3))


def test_land_metric_far_reference():
    spec = LandMetricSpec(points=[[1e3, 1e3]], times=[0.0], eps=1e-2)
    np.testing.assert_allclose(land_metric([[0.0, 0.0]], 0.0, spec), 100.0, atol=1e-9)


def test_land_metric_two_points_by_hand():
    g1, g2, eps = 0.4, 0.9, 0.01
    spec = LandMetricSpec(points=[[0.0, 0.0], [1.0, 0.5]], times=[0.2, 0.6], gamma1=g1, gamma2=g2, eps=eps)
    x, t = np.array([0.3, 0.1]), 0.5
    h = np.zeros(2)
    for xs, s in (([0.0, 0.0], 0.2), ([1.0, 0.5], 0.6)):
        dx = x - np.array(xs)
        w = math.exp(-(dx @ dx) / g1) * math.exp(-((t - s) ** 2) / g2)
        h += w * dx**2
    np.testing.assert_allclose(land_metric(x[None], t, spec)[0], 1.0 / (h + eps), rtol=1e-12)


def test_land_metric_subsample_cap():
    rng = np.random.default_rng(0)
    spec = LandMetricSpec(points=rng.normal(size=(5000, 2)), times=rng.uniform(size=5000), cap=100)
    assert spec.points.shape == (100, 2)


def test_land_spec_validation():
    with pytest.raises(ValueError):
        LandMetricSpec(points=np.zeros((0, 2)), times=[])
    with pytest.raises(ValueError):
        LandMetricSpec(points=[[0.0]], times=[0.0], gamma1=0.0)


def test_weighted_sq_norm_examples():
    v = np.array([[1.0, 1.0]])
    assert weighted_sq_norm(v, [[2.0, 3.0]]).data[0] == 5.0
    assert weighted_sq_norm(v, [[1.0, 1.0]]).data[0] == 2.0
    assert weighted_sq_norm(np.zeros((1, 2)), [[2.0, 3.0]]).data[0] == 0.0


def test_land_weighted_regulariser_runs():
    x0, x1 = _pairs(n=4)
    land = LandMetricSpec(points=np.vstack([x0, x1]), times=np.r_[np.zeros(4), np.ones(4)])
    spec = RegulariserSpec(kind="linear", norm="land", land=land)
    c = np.array([0.2, 0.1])
    val = reg_linear(_constant_gen(2, c), x0, x1, 0.5, spec).item()
    assert val > 0.0


def test_calibrate_lambda():
    assert calibrate_lambda(-1.4, 0.7) == pytest.approx(2.0)


def test_spec_validation():
    with pytest.raises(ValueError):
        RegulariserSpec(kind="bogus")
    with pytest.raises(ValueError):
        RegulariserSpec(lam=-1.0)
    with pytest.raises(ValueError):
        RegulariserSpec(norm="land")
