import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import rope_matrix
from futurekv.errors import ConfigurationError, RangeError, ShapeError
from futurekv.rope3d import (
    RopeConfig,
    apply_rope,
    build_rope_tables,
    default_axis_pairs,
    grid_positions,
    rotate_time_axis_inplace,
    rotation_diff_opnorm,
    time_axis_opnorm,
)

TABLE32 = build_rope_tables(RopeConfig(32, max_positions=(128, 16, 16)))


@pytest.mark.parametrize(
    "head_dim, pairs", [(2, (1, 0, 0)), (4, (1, 1, 0)), (8, (2, 1, 1)), (32, (8, 4, 4)), (64, (16, 8, 8)), (80, (20, 10, 10))]
)
def test_default_split(head_dim, pairs):
    assert default_axis_pairs(head_dim) == pairs


def test_theta_zero_is_one_and_decreasing():
    cfg = RopeConfig(64)
    for axis in range(3):
        f = cfg.frequencies(axis)
        assert f[0] == 1.0
        assert np.all(np.diff(f) < 0)


@pytest.mark.parametrize("kwargs", [{"head_dim": 7}, {"head_dim": 8, "axis_pairs": (2, 2, 2)}, {"head_dim": 8, "base": 0.0},
                                    {"head_dim": 8, "max_positions": (0, 1, 1)}])
def test_bad_config(kwargs):
    with pytest.raises(ConfigurationError):
        RopeConfig(**kwargs)


def test_table_values_and_readonly():
    cfg = RopeConfig(16, max_positions=(10, 4, 4))
    tab = build_rope_tables(cfg)
    th = cfg.frequencies(0)
    np.testing.assert_array_equal(tab.cos[0][3], np.cos(3 * th))
    np.testing.assert_array_equal(tab.sin[0][3], np.sin(3 * th))
    with pytest.raises(ValueError):
        tab.cos[0][0, 0] = 2.0


def test_grid_positions_row_major():
    pos = grid_positions(5, 2, 3)
    assert pos.tolist() == [[5, 0, 0], [5, 0, 1], [5, 0, 2], [5, 1, 0], [5, 1, 1], [5, 1, 2]]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([8, 16, 32]))
def test_matches_explicit_rotation_matrix(seed, head_dim):
    rng = np.random.default_rng(seed)
    cfg = RopeConfig(head_dim, max_positions=(64, 8, 8))
    tab = build_rope_tables(cfg)
    N = 5
    pos = np.column_stack([rng.integers(0, 64, N), rng.integers(0, 8, N), rng.integers(0, 8, N)])
    x = rng.standard_normal((N, head_dim))
    got = apply_rope(x, pos, tab)
    want = np.stack([rope_matrix(pos[i], cfg.axis_pairs) @ x[i] for i in range(N)])
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_preserves_dtype_and_leading_axes(rng):
    x = rng.standard_normal((3, 2, 16, 32)).astype(np.float32)
    out = apply_rope(x, grid_positions(4, 4, 4), TABLE32)
    assert out.dtype == np.float32 and out.shape == x.shape
    assert out is not x


def test_out_of_range_and_shape_errors(rng):
    x = rng.standard_normal((16, 32))
    with pytest.raises(RangeError):
        apply_rope(x, grid_positions(128, 4, 4), TABLE32)
    with pytest.raises(ShapeError):
        apply_rope(x[:, :30], grid_positions(1, 4, 4), TABLE32)
    with pytest.raises(ShapeError):
        apply_rope(x, grid_positions(1, 2, 2), TABLE32)


def test_inplace_time_rotation_touches_only_time_channels(rng):
    cfg = TABLE32.config
    pre = rng.standard_normal((16, 32))
    k = apply_rope(pre, grid_positions(9, 4, 4), TABLE32)
    before = k.copy()
    out = rotate_time_axis_inplace(k, 9, 2, TABLE32)
    assert out is k
    spatial = np.r_[cfg.axis_slice(1), cfg.axis_slice(2)]
    np.testing.assert_array_equal(k[:, spatial], before[:, spatial])
    np.testing.assert_allclose(k, apply_rope(pre, grid_positions(2, 4, 4), TABLE32), atol=1e-12)


def test_inplace_zero_delta_is_noop(rng):
    k = rng.standard_normal((4, 32))
    before = k.copy()
    rotate_time_axis_inplace(k, 5, 5, TABLE32)
    np.testing.assert_array_equal(k, before)


def test_inplace_range_checks(rng):
    k = rng.standard_normal((4, 32))
    with pytest.raises(RangeError):
        rotate_time_axis_inplace(k, 0, 128, TABLE32)
    with pytest.raises(RangeError):
        rotate_time_axis_inplace(k, -1, 3, TABLE32)


@settings(max_examples=100, deadline=None)
@given(st.integers(-50, 50), st.floats(1e-4, 1.0))
def test_rotation_diff_opnorm_matches_svd(dp, theta):
    def R(a):
        return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])

    want = np.linalg.svd(R(dp * theta) - R(0.0), compute_uv=False)[0]
    assert abs(rotation_diff_opnorm(dp, theta) - want) < 1e-12


def test_time_axis_opnorm_is_max_over_time_frequencies():
    cfg = RopeConfig(32)
    norm, theta = time_axis_opnorm(3, cfg)
    assert theta in cfg.frequencies(0)
    assert norm == max(rotation_diff_opnorm(3, th) for th in cfg.frequencies(0))
    assert time_axis_opnorm(0, cfg)[0] == 0.0
