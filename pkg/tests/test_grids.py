import numpy as np
import pytest

from ptvlidar.grids import (Field2D, block_mean, block_sum, coarse_shape,
                            check_compatible, make_grid, resample_up)


def test_make_grid_basic():
    g = make_grid(4, 8, 37.5, 5, 8e9, bin_s=300.0)
    assert g.n_time == 4
    assert g.n_range == 8
    assert g.n_freq == 5
    assert g.dr == 37.5
    assert g.range_centers[3] == 3 * 37.5
    assert g.freq_offsets[g.center_index] == 0.0
    assert g.n_subbins == 150
    assert g.shape() == (4, 8)


def test_make_grid_validation():
    with pytest.raises(ValueError):
        make_grid(0, 8, 37.5, 5, 8e9)
    with pytest.raises(ValueError):
        make_grid(4, 8, 37.5, 4, 8e9)   # even comb misses the laser line
    with pytest.raises(ValueError):
        make_grid(4, 8, -1.0, 5, 8e9)
    with pytest.raises(ValueError):
        make_grid(4, 8, 37.5, 5, 8e9, raw_bin_s=7.0, bin_s=300.0)


def test_coarse_shape_ceiling():
    assert coarse_shape((24, 80), (8, 4)) == (3, 20)
    assert coarse_shape((25, 81), (8, 4)) == (4, 21)
    assert coarse_shape((1, 1), (8, 4)) == (1, 1)


def test_resample_up_repeats_blocks():
    g = make_grid(4, 6, 37.5, 5, 8e9)
    vals = np.arange(6, dtype=float).reshape(2, 3)
    f = Field2D(vals, (2, 2))
    up = resample_up(f, g)
    assert up.shape == (4, 6)
    assert np.all(up[0:2, 0:2] == vals[0, 0])
    assert np.all(up[2:4, 4:6] == vals[1, 2])


def test_resample_up_block_sum_adjoint():
    # <resample_up(x), y> == <x, block_sum(y)> for all shapes
    rng = np.random.default_rng(0)
    for nt, nr, ft, fr in [(4, 6, 2, 2), (5, 7, 2, 3), (3, 4, 4, 4),
                           (6, 6, 1, 1)]:
        g = make_grid(nt, nr, 37.5, 5, 8e9)
        cs = coarse_shape((nt, nr), (ft, fr))
        x = rng.standard_normal(cs)
        y = rng.standard_normal((nt, nr))
        lhs = np.sum(resample_up(Field2D(x.copy(), (ft, fr)), g) * y)
        rhs = np.sum(x * block_sum(y, (ft, fr)))
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_block_mean_normalizes_partial_blocks():
    y = np.ones((5, 5))
    m = block_mean(y, (2, 2))
    assert m.shape == (3, 3)
    assert np.allclose(m, 1.0)   # partial edge blocks still average to 1


def test_check_compatible_rejects_mismatch():
    g = make_grid(4, 6, 37.5, 5, 8e9)
    bad = Field2D(np.zeros((9, 9)), (1, 1))
    with pytest.raises(ValueError):
        check_compatible(bad, g)
