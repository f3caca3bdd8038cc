import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alicfm.data import (
    KnotSpec,
    MarginalDataset,
    denormalise,
    emd,
    evaluate_marginals,
    gen_gaussian_sequence,
    gen_knot,
    gen_loop_translation,
    knot_mean,
    knot_means,
    normalise,
    read_dataset_csv,
    write_dataset_csv,
)


# --- knot -----------------------------------------------------------------------


def test_knot_mean_circle_segment():
    np.testing.assert_allclose(knot_mean(0.25, 2), [-1.0, 0.0], atol=1e-15)


def test_knot_mean_first_strand_start():
    mu = knot_mean(-1.5, 1)
    assert mu[0] == -3.0
    assert mu[1] == pytest.approx(-0.5 * math.tanh(5 * (-0.5)) + 0.5, abs=1e-15)


def test_knot_mean_last_strand_end():
    mu = knot_mean(1.5, 3)
    assert mu[0] == 3.0
    assert mu[1] == pytest.approx(0.5 * math.tanh(2.5) + 0.5, abs=1e-15)


def test_knot_rejects_k_not_multiple_of_three():
    with pytest.raises(ValueError, match="multiple of 3"):
        KnotSpec(K=10)


def test_knot_shape_and_times():
    ds = gen_knot(KnotSpec(K=1200, n=10, sigma=0.1, seed=0))
    assert ds.K == 1200 and all(b.shape == (10, 2) for b in ds.batches)
    assert ds.times[0] == 0.0 and ds.times[-1] == 1.0
    np.testing.assert_allclose(np.diff(ds.times), 1 / 1199, rtol=1e-9)


def test_knot_segments_split_by_index():
    _, means = knot_means(6)
    tt = np.linspace(-1.5, 1.5, 6)
    expected = np.array([knot_mean(tt[k], 1 + k // 2) for k in range(6)])
    np.testing.assert_array_equal(means, expected)


def test_knot_zero_noise_sits_on_means():
    ds = gen_knot(KnotSpec(K=9, n=4, sigma=0.0))
    _, means = knot_means(9)
    for b, m in zip(ds.batches, means):
        np.testing.assert_array_equal(b, np.tile(m, (4, 1)))


def test_knot_seed_reproducible():
    a, b = gen_knot(KnotSpec(K=30, seed=4)), gen_knot(KnotSpec(K=30, seed=4))
    for x, y in zip(a.batches, b.batches):
        assert x.tobytes() == y.tobytes()


def test_knot_mean_path_jumps_at_segment_boundary():
    _, means = knot_means(1200)
    assert np.linalg.norm(means[400] - means[399]) > 0.5


# --- gaussian sequence ----------------------------------------------------------------


def test_gaussian_sequence_mean_within_clt_bound():
    n, s = 4000, 0.7
    ds = gen_gaussian_sequence([[0.0, 0.0]], scale=s, n=n, seed=3)
    assert np.all(np.abs(ds.batches[0].mean(axis=0)) <= 4 * s / math.sqrt(n))


def test_gaussian_sequence_deterministic():
    a = gen_gaussian_sequence([[1.0]], n=1, seed=9).batches[0]
    b = gen_gaussian_sequence([[1.0]], n=1, seed=9).batches[0]
    assert a.tobytes() == b.tobytes()


def test_identical_marginals_have_small_emd():
    ds = gen_gaussian_sequence([[0.0, 0.0], [0.0, 0.0]], scale=1.0, n=400, seed=0)
    assert emd(ds.batches[0], ds.batches[1]) < 0.3


def test_loop_translation_generator():
    ds = gen_loop_translation(K=5, n=8)
    assert ds.K == 5 and ds.dim == 2
    assert np.linalg.norm(ds.batches[-1].mean(axis=0) - [3.0, 0.0]) < 0.3


# --- dataset container and csv ------------------------------------------------------


def test_dataset_validation():
    with pytest.raises(ValueError):
        MarginalDataset([0.0, 0.5, 0.5, 1.0], [np.zeros((1, 2))] * 4)
    with pytest.raises(ValueError):
        MarginalDataset([0.1, 1.0], [np.zeros((1, 2))] * 2)
    with pytest.raises(ValueError):
        MarginalDataset([0.0, 1.0], [np.zeros((1, 2)), np.zeros((0, 2))])


def test_csv_round_trip_bit_faithful(tmp_path):
    rng = np.random.default_rng(0)
    ds = MarginalDataset([0.0, 1 / 3, 1.0], [rng.normal(size=(k + 2, 3)) * 10 ** rng.uniform(-5, 5) for k in range(3)])
    back = read_dataset_csv(write_dataset_csv(ds, tmp_path / "d.csv"))
    assert back.times.tobytes() == ds.times.tobytes()
    for a, b in zip(ds.batches, back.batches):
        assert a.tobytes() == b.tobytes()
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "t,x_1,x_2,x_3"


def test_knot_csv_has_twelve_thousand_rows(tmp_path):
    path = write_dataset_csv(gen_knot(), tmp_path / "knot.csv")
    assert len(path.read_text().splitlines()) == 12_001


def test_read_rejects_bad_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n0,1\n")
    with pytest.raises(ValueError):
        read_dataset_csv(p)


# --- normalisation --------------------------------------------------------------


def test_normalise_unit_box_unchanged():
    ds = MarginalDataset([0.0, 1.0], [[[0.0, 0.0]], [[1.0, 1.0]]])
    nd, rec = normalise(ds)
    for a, b in zip(ds.batches, nd.batches):
        np.testing.assert_array_equal(a, b)


def test_normalise_hand_example():
    ds = MarginalDataset([0.0, 1.0], [[[2.0, 5.0]], [[6.0, 5.0]]])
    nd, rec = normalise(ds)
    np.testing.assert_array_equal(nd.batches[0], [[0.0, 0.0]])
    np.testing.assert_array_equal(nd.batches[1], [[1.0, 0.0]])
    np.testing.assert_array_equal(rec.scale, [4.0, 1.0])
    np.testing.assert_array_equal(rec.shift, [2.0, 5.0])


def test_normalise_round_trip():
    ds = gen_knot(KnotSpec(K=12, n=5))
    back = denormalise(normalise(ds)[0])
    for a, b in zip(ds.batches, back.batches):
        np.testing.assert_allclose(a, b, atol=1e-12)


# --- emd ------------------------------------------------------------------------


def test_emd_identical_batches():
    x = np.random.default_rng(0).normal(size=(7, 2))
    assert emd(x, x) == 0.0


def test_emd_singletons():
    assert emd([[0.0]], [[3.0]]) == 3.0
    assert emd([[0.0]], [[3.0]], cost="sqeuclidean") == 9.0


@pytest.mark.parametrize("seed", range(5))
def test_emd_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    best = min(
        sum(np.linalg.norm(a[i] - b[p[i]]) for i in range(4)) / 4 for p in itertools.permutations(range(4))
    )
    assert abs(emd(a, b) - best) <= 1e-9


def test_emd_unequal_sizes_via_lp():
    # one point against two: every unit of mass must travel to both
    assert emd([[0.0]], [[1.0], [3.0]]) == pytest.approx(2.0, abs=1e-9)
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 2))
    doubled = np.vstack([a, a])
    assert emd(a, doubled) == pytest.approx(0.0, abs=1e-9)


def test_emd_rejects_empty():
    with pytest.raises(ValueError):
        emd(np.zeros((0, 2)), np.zeros((3, 2)))


def test_emd_cap_requires_fallback():
    x = np.zeros((5, 1))
    with pytest.raises(ValueError, match="cap"):
        emd(x, x + 1, cap=4)
    assert emd(x, x + 1, cap=4, fallback="sinkhorn") == pytest.approx(1.0, rel=1e-3)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_emd_symmetry_and_triangle(seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.normal(size=(3, 5, 2))
    assert emd(a, b) == emd(b, a)
    assert emd(a, c) <= emd(a, b) + emd(b, c) + 1e-9


# --- evaluation -----------------------------------------------------------------


def test_evaluate_reference_against_itself():
    ds = gen_knot(KnotSpec(K=6, n=5))
    table = evaluate_marginals({t: b for t, b in zip(ds.times, ds.batches)}, ds)
    np.testing.assert_array_equal(table.values, 0.0)
    assert table.mean == 0.0


def test_evaluate_single_time_equals_direct_emd():
    ds = gen_knot(KnotSpec(K=6, n=5))
    pred = np.random.default_rng(0).normal(size=(5, 2))
    table = evaluate_marginals({ds.times[2]: pred}, ds)
    assert table.values[0] == emd(pred, ds.batches[2])
    assert table.mean == table.values[0]


def test_evaluate_mean_is_row_mean():
    ds = gen_knot(KnotSpec(K=6, n=5))
    rng = np.random.default_rng(1)
    table = evaluate_marginals([(t, rng.normal(size=(5, 2))) for t in ds.times[1:4]], ds)
    assert table.mean == pytest.approx(np.mean([v for _, v in table.rows()]), abs=1e-15)


def test_evaluate_denormalises_predictions():
    ds = gen_knot(KnotSpec(K=6, n=5))
    nd, rec = normalise(ds)
    table = evaluate_marginals({t: b for t, b in zip(nd.times, nd.batches)}, ds, norm=rec)
    np.testing.assert_allclose(table.values, 0.0, atol=1e-12)


def test_evaluate_rejects_missing_time():
    ds = gen_knot(KnotSpec(K=6, n=5))
    with pytest.raises(ValueError, match="no marginal"):
        evaluate_marginals({0.123: ds.batches[0]}, ds)
