import math

import numpy as np
import pytest

from rmfnet.specinit import (
    band_limits_for,
    compute_band_schedule,
    direction_set,
    filter_bounds,
    init_filters,
    lattice_band_limits,
    lattice_split,
    sample_base_frequencies,
    sample_layer_frequencies,
)


@pytest.mark.parametrize('d_in, count', [(1, 1), (2, 4), (3, 13)])
def test_direction_set_one_vector_per_sign_class(d_in, count):
    directions = direction_set(d_in)
    assert directions.shape == (count, d_in)
    for vec in directions:
        nonzero = vec[vec != 0]
        assert nonzero[0] == 1
    assert len({tuple(-v) for v in directions} & {tuple(v) for v in directions}) == 0


def test_direction_set_in_2d():
    assert {tuple(v) for v in direction_set(2)} == {(0, 1), (1, 0), (1, 1), (1, -1)}


def test_direction_set_rejects_high_dimensions():
    with pytest.raises(ValueError):
        direction_set(4)


def test_band_schedule_reaches_b_max():
    schedule = compute_band_schedule(32.0, 3, 0.3, 2.0)
    assert schedule.growth == pytest.approx(3.3)
    assert len(schedule) == 3
    assert schedule[2] == pytest.approx(32.0)
    assert schedule[1] == pytest.approx(32.0 / 3.3)
    assert schedule[0] == pytest.approx(32.0 / 3.3 ** 2)


def test_band_schedule_examples():
    assert compute_band_schedule(64.0, 1, 0.3, 2.0).bands == (64.0,)
    schedule = compute_band_schedule(9.0, 2, 0.0, 2.0)
    assert schedule.bands == pytest.approx((3.0, 9.0), abs=1e-12)
    assert compute_band_schedule(128.0, 4, 0.3, 2.0)[0] == pytest.approx(3.5618, abs=1e-4)


def test_band_schedule_rejects_tiny_coarse_band():
    with pytest.raises(ValueError, match='band limit too small'):
        compute_band_schedule(4.0, 4, 0.3, 2.0)


@pytest.mark.parametrize('b_max, layers, lambda1, lambda2', [
    (0.0, 3, 0.3, 2.0),
    (32.0, 0, 0.3, 2.0),
    (32.0, 3, -0.1, 2.0),
    (32.0, 3, 0.3, 0.0),
])
def test_band_schedule_rejects_bad_arguments(b_max, layers, lambda1, lambda2):
    with pytest.raises(ValueError):
        compute_band_schedule(b_max, layers, lambda1, lambda2)


@pytest.mark.parametrize('b_max, layers, lambda1, lambda2, expected', [
    (16.0, 3, 0.3, 2.0, (1.0, 2.0, 4.0, 16.0)),
    (32.0, 3, 0.3, 2.0, (1.0, 2.0, 9.0, 32.0)),
    (27.0, 3, 0.0, 2.0, (1.0, 3.0, 9.0, 27.0)),
    (5.0, 1, 0.3, 2.0, (2.0, 5.0)),
])
def test_lattice_band_limits(b_max, layers, lambda1, lambda2, expected):
    assert band_limits_for(b_max, layers, lambda1, lambda2, quantize=True) == expected


def test_lattice_band_limits_reject_too_small_b_max():
    with pytest.raises(ValueError, match='whole-cycle'):
        lattice_band_limits((0.75, 1.5))
    assert band_limits_for(1.5, 1, 0.3, 2.0, quantize=False) == (0.75, 1.5)


def test_lattice_split():
    assert lattice_split(23.0, 0.3, 2.0) == (20, 3)
    assert lattice_split(6.0, 0.0, 2.0) == (6, 0)
    assert lattice_split(12.0, 0.3, 2.0) == (10, 2)


def test_base_frequencies_in_band(rng):
    omega, phi = sample_base_frequencies(2, 500, 3.0, rng)
    assert omega.shape == (500, 2)
    assert np.abs(omega).max() <= 3.0
    assert np.abs(phi).max() <= np.pi


@pytest.mark.parametrize('quantize', [False, True])
def test_base_frequency_statistics(quantize):
    omega, _ = sample_base_frequencies(2, 10_000, 4.0, np.random.default_rng(8), quantize=quantize)
    assert np.abs(omega).max() <= 4.0
    bound = 4.0 * omega.std(axis=0) / math.sqrt(len(omega))
    assert np.all(np.abs(omega.mean(axis=0)) <= bound)


def test_base_frequencies_are_reproducible():
    a, pa = sample_base_frequencies(2, 16, 4.0, np.random.default_rng(3))
    b, pb = sample_base_frequencies(2, 16, 4.0, np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(pa, pb)


def test_quantized_base_frequencies_are_whole_cycles():
    omega, _ = sample_base_frequencies(3, 200, 4.7, np.random.default_rng(5), quantize=True)
    np.testing.assert_array_equal(omega, np.round(omega))
    assert set(np.unique(omega)) == set(range(-4, 5))


def test_quantized_base_band_below_one_cycle_keeps_unit_frequencies():
    omega, _ = sample_base_frequencies(2, 200, 0.73, np.random.default_rng(5), quantize=True)
    assert set(np.unique(omega)) == {-1.0, 0.0, 1.0}


def test_shift_without_perturbation_is_exact():
    for quantize in (False, True):
        omega, _ = sample_layer_frequencies(2, 8, 5.0, 0.0, 2.0, np.random.default_rng(0),
                                            directions=np.array([[1, 0]]), quantize=quantize)
        np.testing.assert_array_equal(omega, np.tile([10.0, 0.0], (8, 1)))


@pytest.mark.parametrize('quantize', [False, True])
def test_shifted_clones_stay_in_annulus(rng, quantize):
    omega, _ = sample_layer_frequencies(2, 2000, 10.0, 0.3, 2.0, rng, quantize=quantize)
    norms = np.abs(omega).max(axis=1)
    assert norms.max() <= 23.0 + 1e-9
    assert norms.min() >= 17.0 - 1e-9


@pytest.mark.parametrize('d_in', [1, 2, 3])
def test_shifted_clones_match_filter_bounds(rng, d_in):
    b_prev, lambda1, lambda2 = 5.0, 0.3, 2.3
    omega, _ = sample_layer_frequencies(d_in, 400, b_prev, lambda1, lambda2, rng)
    norms = np.abs(omega).max(axis=1)
    band_limits = (2.5, b_prev, b_prev * (1 + lambda1 + lambda2))
    low, high = filter_bounds('shifted', 2, band_limits, lambda1, lambda2)
    assert low == pytest.approx((lambda2 - lambda1) * b_prev)
    assert high == pytest.approx((lambda2 + lambda1) * b_prev)
    assert norms.min() >= low - 1e-12
    assert norms.max() <= high + 1e-12


def test_directions_are_drawn_uniformly():
    omega, _ = sample_layer_frequencies(2, 10_000, 5.0, 0.0, 2.0, np.random.default_rng(6))
    directions = [tuple(v) for v in (omega / 10.0).astype(np.int64)]
    for r in direction_set(2):
        assert directions.count(tuple(r)) / len(directions) == pytest.approx(0.25, abs=0.02)


def test_shifted_clones_reject_empty_direction_set(rng):
    with pytest.raises(ValueError):
        sample_layer_frequencies(2, 4, 1.0, 0.3, 2.0, rng, directions=np.zeros((0, 2)))


@pytest.mark.parametrize('init', ['shifted', 'bacon'])
@pytest.mark.parametrize('quantize', [False, True])
def test_init_filters_shapes_and_band_limits(rng, init, quantize):
    filters, band_limits = init_filters(2, 16, 3, 32.0, 0.3, 2.0, rng, init=init, quantize=quantize)
    assert len(filters) == 4
    assert len(band_limits) == 4
    assert band_limits[-1] == pytest.approx(32.0)
    if not quantize:
        assert band_limits[0] == pytest.approx(band_limits[1] / 2.0)
    for i, (omega, phi) in enumerate(filters):
        assert omega.shape == (16, 2)
        assert phi.shape == (16,)
        low, high = filter_bounds(init, i, band_limits, 0.3, 2.0, quantize)
        norms = np.abs(omega).max(axis=1)
        assert norms.max() <= high + 1e-9
        assert norms.min() >= low - 1e-9
        if quantize:
            np.testing.assert_array_equal(omega, np.round(omega))


@pytest.mark.parametrize('seed', range(3))
@pytest.mark.parametrize('b_max', [16.0, 32.0])
def test_quantized_filters_reach_b_max(seed, b_max):
    filters, band_limits = init_filters(2, 64, 3, b_max, 0.3, 2.0, np.random.default_rng(seed))
    assert band_limits[-1] == math.floor(b_max)
    assert np.any(filters[0][0] != 0)
    assert np.any(filters[1][0] != 0)
    reach = sum(np.abs(omega).max() for omega, _ in filters)
    assert reach == math.floor(b_max)


def test_init_filters_rejects_unknown_scheme(rng):
    with pytest.raises(ValueError):
        init_filters(2, 4, 2, 8.0, 0.3, 2.0, rng, init='random')


def test_init_filters_is_reproducible():
    a, _ = init_filters(3, 8, 3, 12.0, 0.3, 2.0, np.random.default_rng(3), quantize=False)
    b, _ = init_filters(3, 8, 3, 12.0, 0.3, 2.0, np.random.default_rng(3), quantize=False)
    for (oa, pa), (ob, pb) in zip(a, b):
        np.testing.assert_array_equal(oa, ob)
        np.testing.assert_array_equal(pa, pb)
