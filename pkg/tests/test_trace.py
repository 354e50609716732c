import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from futurekv.errors import ConfigurationError, FormatError, VersionError
from futurekv.trace import (
    HEADER_SIZE,
    GenConfig,
    TraceHeader,
    generate_synthetic_trace,
    parse_header,
    read_trace,
    write_trace,
)


def small(seed=0, **kw):
    base = dict(seed=seed, num_frames=4, grid_h=2, grid_w=3, num_heads=2, head_dim=8, latent_dim=5)
    base.update(kw)
    return generate_synthetic_trace(GenConfig(**base))


def test_header_is_48_bytes_little_endian():
    h = TraceHeader(3, 6, 2, 8, 2, 3, flags=3, latent_dim=5, seed=2**40 + 1)
    raw = h.pack()
    assert HEADER_SIZE == 48 and len(raw) == 48
    assert raw[:4] == b"KVQT"
    assert struct.unpack_from("<I", raw, 4)[0] == 1
    assert struct.unpack_from("<Q", raw, 40)[0] == 2**40 + 1
    assert parse_header(raw) == h


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**63), st.booleans(), st.booleans())
def test_roundtrip_byte_identity(tmp_path_factory, seed, lat, proj):
    d = tmp_path_factory.mktemp("rt")
    tr = small(seed, with_latents=lat, with_projections=proj)
    write_trace(tr, d / "a.kvqt")
    back = read_trace(d / "a.kvqt")
    write_trace(back, d / "b.kvqt")
    assert (d / "a.kvqt").read_bytes() == (d / "b.kvqt").read_bytes()
    np.testing.assert_array_equal(back.q, tr.q)
    assert (back.latents is None) == (not lat) and (back.projections is None) == (not proj)
    size = (d / "a.kvqt").stat().st_size
    assert size == HEADER_SIZE + back.header.payload_size


def test_sidecar(tmp_path):
    write_trace(small(7), tmp_path / "t.kvqt")
    meta = json.loads((tmp_path / "t.json").read_text())
    assert meta["seed"] == 7 and meta["num_frames"] == 4


def test_generator_is_seeded():
    a, b, c = small(3), small(3), small(4)
    assert a.q.tobytes() == b.q.tobytes()
    assert a.q.tobytes() != c.q.tobytes()


def test_latent_steps_have_requested_norm():
    tr = small(1, num_frames=6, drift_eps=0.3, with_latents=True, with_projections=True)
    X = tr.latents.astype(np.float64)
    steps = np.linalg.norm(X[1:] - X[:-1], axis=(1, 2))
    np.testing.assert_allclose(steps, 0.3, rtol=1e-5)
    W = tr.projections.astype(np.float64)
    np.testing.assert_allclose(tr.q[2, 1], (X[2] @ W[0].T)[:, 8:16], rtol=1e-4, atol=1e-5)


@pytest.mark.parametrize("kw", [{"drift_eps": -1.0}, {"head_dim": 7}, {"num_frames": 0}])
def test_bad_gen_config(kw):
    with pytest.raises(ConfigurationError):
        GenConfig(**kw)


def corrupt(tmp_path, fn):
    write_trace(small(), tmp_path / "t.kvqt")
    data = bytearray((tmp_path / "t.kvqt").read_bytes())
    (tmp_path / "bad.kvqt").write_bytes(bytes(fn(data)))
    return tmp_path / "bad.kvqt"


def test_bad_magic(tmp_path):
    p = corrupt(tmp_path, lambda d: b"XXXX" + d[4:])
    with pytest.raises(FormatError, match="offset 0"):
        read_trace(p)


def test_bad_version(tmp_path):
    p = corrupt(tmp_path, lambda d: d[:4] + struct.pack("<I", 2) + d[8:])
    with pytest.raises(VersionError, match="offset 4"):
        read_trace(p)


@pytest.mark.parametrize("keep", [2, 20, 47, 48, 100])
def test_truncation(tmp_path, keep):
    p = corrupt(tmp_path, lambda d: d[:keep])
    with pytest.raises(FormatError) as exc:
        read_trace(p)
    if keep >= 4:
        assert exc.value.offset == keep


def test_trailing_bytes(tmp_path):
    p = corrupt(tmp_path, lambda d: d + b"\0\0\0\0")
    with pytest.raises(FormatError, match="trailing"):
        read_trace(p)


def test_inconsistent_grid(tmp_path):
    p = corrupt(tmp_path, lambda d: d[:24] + struct.pack("<I", 5) + d[28:])
    with pytest.raises(FormatError):
        read_trace(p)
