import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import dense_softmax
from futurekv.attention import (
    AttnBatchDims,
    dense_attention,
    kernel_memory_bound,
    mass_sum_error,
    per_key_scores,
    streaming_key_mass,
    streaming_lse,
    track_allocations,
)
from futurekv.errors import NumericError, ShapeError


def rand_qk(rng, lead, Q, T, d, scale=1.0):
    return rng.standard_normal((*lead, Q, d)) * scale, rng.standard_normal((*lead, T, d)) * scale


@settings(max_examples=40, deadline=None)
@given(
    st.integers(0, 2**31),
    st.integers(1, 40),
    st.integers(1, 40),
    st.sampled_from([2, 6, 8, 20, 32]),
    st.tuples(st.integers(1, 17), st.integers(1, 17)),
)
def test_streaming_matches_dense(seed, Q, T, d, tile):
    rng = np.random.default_rng(seed)
    q, k = rand_qk(rng, (2,), Q, T, d, scale=2.0)
    w, lse_ref = dense_softmax(q, k)
    lse = streaming_lse(q, k, tile)
    np.testing.assert_allclose(lse.values, lse_ref, rtol=1e-12, atol=1e-12)
    mass = streaming_key_mass(q, k, lse, tile)
    np.testing.assert_allclose(mass.values, w.sum(axis=-2), rtol=1e-10, atol=1e-12)
    assert mass_sum_error(mass, Q) < 1e-12


def test_padding_does_not_change_results(rng):
    q, k = rand_qk(rng, (), 19, 23, 80)
    a = per_key_scores(q, k, (8, 8), pad_pow2=True)
    b = per_key_scores(q, k, (8, 8), pad_pow2=False)
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-15)


def test_tile_invariance_tight(rng):
    q, k = rand_qk(rng, (2, 3), 50, 70, 16, scale=3.0)
    ref = per_key_scores(q, k, (128, 128))
    for tile in [(1, 1), (7, 5), (16, 64), (50, 70)]:
        np.testing.assert_allclose(per_key_scores(q, k, tile), ref, rtol=1e-12, atol=1e-15)


def test_fixed_tile_is_bitwise_deterministic(rng):
    q, k = rand_qk(rng, (2,), 33, 41, 32)
    a = per_key_scores(q, k, (8, 16))
    b = per_key_scores(q.copy(), k.copy(), (8, 16))
    assert a.tobytes() == b.tobytes()


def test_large_logits_stay_finite(rng):
    q, k = rand_qk(rng, (), 8, 8, 4, scale=60.0)
    lse = streaming_lse(q, k, (3, 3))
    assert np.all(np.isfinite(lse.values))
    mass = streaming_key_mass(q, k, lse, (3, 3))
    assert mass_sum_error(mass, 8) < 1e-10


def test_dense_attention_against_loops(rng):
    q, k = rand_qk(rng, (), 4, 6, 8)
    v = rng.standard_normal((6, 3))
    out, w = dense_attention(q, k, v)
    for i in range(4):
        s = np.array([q[i] @ k[j] / math.sqrt(8) for j in range(6)])
        p = np.exp(s - s.max())
        p /= p.sum()
        np.testing.assert_allclose(w[i], p, rtol=1e-12)
        np.testing.assert_allclose(out[i], p @ v, rtol=1e-12)


def test_dense_attention_rejects_non_finite(rng):
    q, k = rand_qk(rng, (), 2, 3, 4)
    q[0, 0] = np.nan
    with pytest.raises(NumericError):
        dense_attention(q, k, np.ones((3, 2)))


def test_shape_errors(rng):
    q, k = rand_qk(rng, (), 4, 5, 8)
    with pytest.raises(ShapeError):
        streaming_lse(q, k[:, :6])
    with pytest.raises(ShapeError):
        streaming_lse(q[None], k)
    lse = streaming_lse(q, k)
    with pytest.raises(ShapeError):
        streaming_key_mass(q[:3], k, lse)


def test_memory_tracking_small(rng):
    q, k = rand_qk(rng, (), 64, 96, 16)
    tile = (16, 32)
    with track_allocations() as tr:
        per_key_scores(q, k, tile)
    dims = AttnBatchDims.from_arrays(q, k)
    assert 0 < tr.peak <= kernel_memory_bound(dims, tile)
    assert tr.current == 0 and tr.staging_current == 0
    assert tr.staging_peak <= (tile[0] + tile[1]) * 16
    # tracker only sees allocations inside its own context
    with track_allocations() as other:
        pass
    assert other.peak == 0


def test_batch_dims_from_arrays():
    d = AttnBatchDims.from_arrays(np.zeros((2, 3, 5, 8)), np.zeros((2, 3, 7, 8)))
    assert (d.B, d.H, d.Q, d.T, d.d_h) == (2, 3, 5, 7, 8)
    with pytest.raises(ShapeError):
        AttnBatchDims(1, 1, 0, 1, 1)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 70), st.integers(1, 70), st.integers(1, 3), st.integers(1, 33), st.integers(1, 33),
       st.sampled_from([3, 8, 80]))
def test_aux_memory_within_twice_bound(Q, T, H, bq, bk, d):
    rng = np.random.default_rng(Q * 1000 + T)
    q, k = rand_qk(rng, (H,), Q, T, d)
    with track_allocations() as tr:
        per_key_scores(q, k, (bq, bk))
    dims = AttnBatchDims.from_arrays(q, k)
    assert tr.peak <= 2 * kernel_memory_bound(dims, (bq, bk))
    d_pad = 1 << (d - 1).bit_length()
    assert tr.staging_peak <= (bq + bk) * d_pad
    assert tr.current == 0
