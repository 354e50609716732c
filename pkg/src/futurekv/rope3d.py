"""3D rotary position embedding over (t, y, x) with a contiguous channel layout.

Channels of a head are split into three rotary segments laid out as
``[time pairs | height pairs | width pairs]``; within a segment, channels
``(2k, 2k+1)`` form pair ``k`` rotated by ``position * theta_k`` with
``theta_k = base ** (-2k / (2n))`` for a segment of ``n`` pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, RangeError, ShapeError

AXES = ("t", "y", "x")


def default_axis_pairs(head_dim: int) -> tuple[int, int, int]:
    """2:1:1 split of the rotary pairs between time, height and width."""
    if head_dim <= 0 or head_dim % 2:
        raise ConfigurationError(f"head_dim must be a positive even integer, got {head_dim}")
    pairs = head_dim // 2
    n_t = (pairs + 1) // 2
    n_h = (pairs - n_t + 1) // 2
    return n_t, n_h, pairs - n_t - n_h


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    base: float = 10000.0
    axis_pairs: tuple[int, int, int] | None = None
    max_positions: tuple[int, int, int] = (1024, 64, 64)

    def __post_init__(self):
        if self.axis_pairs is None:
            object.__setattr__(self, "axis_pairs", default_axis_pairs(self.head_dim))
        pairs = tuple(int(n) for n in self.axis_pairs)
        object.__setattr__(self, "axis_pairs", pairs)
        object.__setattr__(self, "max_positions", tuple(int(m) for m in self.max_positions))
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ConfigurationError(f"head_dim must be a positive even integer, got {self.head_dim}")
        if len(pairs) != 3 or any(n < 0 for n in pairs) or 2 * sum(pairs) != self.head_dim:
            raise ConfigurationError(
                f"axis_pairs {pairs} inconsistent with head_dim {self.head_dim} "
                "(need 2*(n_t+n_h+n_w) == head_dim)"
            )
        if len(self.max_positions) != 3 or any(m <= 0 for m in self.max_positions):
            raise ConfigurationError(f"max_positions must be three positive bounds, got {self.max_positions}")
        if not self.base > 0:
            raise ConfigurationError(f"base must be positive, got {self.base}")

    def axis_slice(self, axis: int) -> slice:
        start = 2 * sum(self.axis_pairs[:axis])
        return slice(start, start + 2 * self.axis_pairs[axis])

    def frequencies(self, axis: int) -> np.ndarray:
        n = self.axis_pairs[axis]
        k = np.arange(n, dtype=np.float64)
        return self.base ** (-2.0 * k / (2.0 * n)) if n else np.zeros(0)


class Position3(NamedTuple):
    t: int
    y: int
    x: int


def grid_positions(t: int, grid_h: int, grid_w: int) -> np.ndarray:
    """Row-major (t, y, x) positions of one frame, shape ``(grid_h * grid_w, 3)``."""
    ys, xs = np.divmod(np.arange(grid_h * grid_w, dtype=np.int64), grid_w)
    return np.stack([np.full_like(ys, t), ys, xs], axis=1)


@dataclass(frozen=True)
class RotationTable:
    """cos/sin of ``position * theta_k`` per axis, shape ``(max_positions[axis], n_axis)``."""

    config: RopeConfig
    cos: tuple[np.ndarray, np.ndarray, np.ndarray]
    sin: tuple[np.ndarray, np.ndarray, np.ndarray]

    def check_positions(self, positions: np.ndarray) -> None:
        for axis in range(3):
            col = positions[:, axis]
            if col.size and (col.min() < 0 or col.max() >= self.config.max_positions[axis]):
                raise RangeError(
                    f"{AXES[axis]} position out of range [0, {self.config.max_positions[axis]}): "
                    f"{int(col.min())}..{int(col.max())}"
                )


def build_rope_tables(config: RopeConfig) -> RotationTable:
    cos, sin = [], []
    for axis in range(3):
        pos = np.arange(config.max_positions[axis], dtype=np.float64)
        angles = np.outer(pos, config.frequencies(axis))
        c, s = np.cos(angles), np.sin(angles)
        c.setflags(write=False)
        s.setflags(write=False)
        cos.append(c)
        sin.append(s)
    return RotationTable(config, tuple(cos), tuple(sin))


def _rotate_pairs(seg: np.ndarray, c: np.ndarray, s: np.ndarray, out: np.ndarray) -> None:
    x, y = seg[..., 0::2], seg[..., 1::2]
    out[..., 0::2] = x * c - y * s
    out[..., 1::2] = x * s + y * c


def apply_rope(vectors: np.ndarray, positions: np.ndarray, table: RotationTable) -> np.ndarray:
    """Rotate each token's channels by its own 3D position.

    Args:
        vectors: array of shape ``(..., N, head_dim)``; leading axes (heads,
            batch) share the same positions.
        positions: integer array of shape ``(N, 3)`` holding ``(t, y, x)``.
        table: precomputed rotation table.

    Returns:
        A new array with the dtype of ``vectors``.
    """
    config = table.config
    vectors = np.asarray(vectors)
    positions = np.asarray(positions, dtype=np.int64)
    if vectors.ndim < 2 or vectors.shape[-1] != config.head_dim:
        raise ShapeError(f"expected (..., N, {config.head_dim}) vectors, got {vectors.shape}")
    if positions.shape != (vectors.shape[-2], 3):
        raise ShapeError(f"positions shape {positions.shape} does not match {vectors.shape[-2]} tokens")
    table.check_positions(positions)
    dtype = vectors.dtype if np.issubdtype(vectors.dtype, np.floating) else np.float64
    vectors = vectors.astype(dtype, copy=False)
    out = np.empty_like(vectors)
    for axis in range(3):
        sl = config.axis_slice(axis)
        if sl.start == sl.stop:
            continue
        c = table.cos[axis][positions[:, axis]].astype(dtype)
        s = table.sin[axis][positions[:, axis]].astype(dtype)
        _rotate_pairs(vectors[..., sl], c, s, out[..., sl])
    return out


def rotate_time_axis_inplace(keys: np.ndarray, old_t: int, new_t: int, table: RotationTable) -> np.ndarray:
    """Re-rotate the time channels of keys encoded at ``old_t`` so they encode ``new_t``.

    Spatial channels are never written. ``keys`` has shape ``(..., head_dim)``
    and is modified in place; it is also returned for convenience.
    """
    config = table.config
    max_t = config.max_positions[0]
    for name, t in (("old_t", old_t), ("new_t", new_t)):
        if not 0 <= t < max_t:
            raise RangeError(f"{name}={t} outside time table range [0, {max_t})")
    if keys.shape[-1] != config.head_dim:
        raise ShapeError(f"expected trailing dim {config.head_dim}, got {keys.shape}")
    delta = int(new_t) - int(old_t)
    if delta == 0:
        return keys
    sl = config.axis_slice(0)
    c = table.cos[0][abs(delta)].astype(keys.dtype)
    s = (math.copysign(1.0, delta) * table.sin[0][abs(delta)]).astype(keys.dtype)
    seg = keys[..., sl].copy()
    _rotate_pairs(seg, c, s, keys[..., sl])
    return keys


def rotation_diff_opnorm(delta_p: float, theta: float) -> float:
    """Operator norm of ``R2(a) - R2(b)`` for a 2x2 rotation with ``a - b = delta_p * theta``."""
    return 2.0 * abs(math.sin(delta_p * theta / 2.0))


def time_axis_opnorm(delta_p: int, config: RopeConfig) -> tuple[float, float]:
    """Largest ``rotation_diff_opnorm`` over the time frequencies and the maximizing theta.

    The time block is block-diagonal, so its difference operator norm is the
    max over its 2x2 blocks.
    """
    freqs = config.frequencies(0)
    if freqs.size == 0:
        return 0.0, 0.0
    norms = [rotation_diff_opnorm(delta_p, float(th)) for th in freqs]
    k = int(np.argmax(norms))
    return norms[k], float(freqs[k])
