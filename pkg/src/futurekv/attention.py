"""Dense attention oracle and the two-pass streaming per-key attention-mass reduction.

Pass 1 streams key tiles and keeps a running max ``m`` and normalizer ``l``
per query to produce ``LSE = m + log(l)``. Pass 2 streams the keys again,
forms ``exp(s - LSE)`` tile by tile and reduces it over each query tile into
a per-key partial mass. The ``Q x T`` probability matrix is never allocated.

Arrays follow a ``(..., Q, d_h)`` / ``(..., T, d_h)`` convention: leading axes
(batch, heads) are flattened internally and restored on output.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, PreconditionError, ShapeError

DEFAULT_TILE = (128, 128)


@dataclass(frozen=True)
class AttnBatchDims:
    B: int
    H: int
    Q: int
    T: int
    d_h: int

    def __post_init__(self):
        if min(self.B, self.H, self.Q, self.T, self.d_h) <= 0:
            raise ShapeError(f"all attention dims must be positive: {self}")

    @classmethod
    def from_arrays(cls, q: np.ndarray, k: np.ndarray) -> "AttnBatchDims":
        lead = q.shape[:-2]
        B = int(lead[0]) if len(lead) >= 2 else 1
        H = int(np.prod(lead)) // B if lead else 1
        return cls(B, H, q.shape[-2], k.shape[-2], q.shape[-1])


@dataclass
class LseBuffer:
    values: np.ndarray  # (..., Q)


@dataclass
class KeyMassBuffer:
    values: np.ndarray  # (..., T)


@dataclass
class AllocationTracker:
    """Counts live scalars allocated by the streaming kernels.

    ``current``/``peak`` cover auxiliary buffers (LSE, running statistics,
    partial masses, score tiles). Copies of input tiles padded to the
    power-of-two head dim are counted separately as ``staging``.
    """

    current: int = 0
    peak: int = 0
    staging_current: int = 0
    staging_peak: int = 0
    events: list = field(default_factory=list)

    def alloc(self, n: int, label: str, staging: bool = False) -> None:
        if staging:
            self.staging_current += int(n)
            self.staging_peak = max(self.staging_peak, self.staging_current)
        else:
            self.current += int(n)
            self.peak = max(self.peak, self.current)
        self.events.append((label, int(n)))

    def free(self, n: int, staging: bool = False) -> None:
        if staging:
            self.staging_current -= int(n)
        else:
            self.current -= int(n)


_tracker: contextvars.ContextVar[AllocationTracker | None] = contextvars.ContextVar("_tracker", default=None)


@contextlib.contextmanager
def track_allocations():
    """Context manager yielding an :class:`AllocationTracker` for kernel calls inside it."""
    tracker = AllocationTracker()
    token = _tracker.set(tracker)
    try:
        yield tracker
    finally:
        _tracker.reset(token)


def _alloc(n: int, label: str, staging: bool = False) -> None:
    t = _tracker.get()
    if t is not None:
        t.alloc(n, label, staging)


def _free(n: int, staging: bool = False) -> None:
    t = _tracker.get()
    if t is not None:
        t.free(n, staging)


def kernel_memory_bound(dims: AttnBatchDims, tile: tuple[int, int]) -> int:
    """``B*H*Q + B*H*ceil(Q/B_Q)*T + B_Q*B_K`` scalars.

    Pass 2 peaks at exactly this with the LSE buffer live; pass 1 peaks at
    ``B*H*Q + 2*B_Q + B_Q*B_K``, so auxiliary memory never exceeds twice it.
    """
    bq, bk = tile
    bh = dims.B * dims.H
    return bh * dims.Q + bh * math.ceil(dims.Q / bq) * dims.T + bq * bk


def _check_pair(q: np.ndarray, k: np.ndarray) -> None:
    if q.ndim < 2 or k.ndim < 2:
        raise ShapeError(f"expected (..., n, d) arrays, got {q.shape} and {k.shape}")
    if q.shape[:-2] != k.shape[:-2] or q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query/key shapes disagree: {q.shape} vs {k.shape}")
    if q.shape[-2] == 0 or k.shape[-2] == 0:
        raise PreconditionError("attention needs at least one query and one key")
    if not (np.isfinite(q).all() and np.isfinite(k).all()):
        raise NumericError("non-finite values in attention inputs")


def _check_tile(tile) -> tuple[int, int]:
    bq, bk = int(tile[0]), int(tile[1])
    if bq < 1 or bk < 1:
        raise ShapeError(f"tile sizes must be >= 1, got {tile}")
    return bq, bk


def _padded_dim(d: int, pad_pow2: bool) -> int:
    return 1 << (d - 1).bit_length() if pad_pow2 else d


def _tile64(x: np.ndarray, start: int, stop: int, d_pad: int, label: str) -> np.ndarray:
    rows = x[start:stop]
    _alloc(rows.shape[0] * d_pad, label, staging=True)
    out = np.zeros((rows.shape[0], d_pad))
    out[:, : rows.shape[1]] = rows
    return out


def dense_attention(q_mod: np.ndarray, k_mod: np.ndarray, v: np.ndarray):
    """Full softmax attention in double precision.

    Returns:
        ``(output, weights)`` with shapes ``(..., Q, d_v)`` and ``(..., Q, T)``.
    """
    _check_pair(q_mod, k_mod)
    if v.shape[:-1] != k_mod.shape[:-1]:
        raise ShapeError(f"values {v.shape} do not match keys {k_mod.shape}")
    if not np.isfinite(v).all():
        raise NumericError("non-finite values in attention inputs")
    q = np.asarray(q_mod, dtype=np.float64)
    k = np.asarray(k_mod, dtype=np.float64)
    logits = q @ np.swapaxes(k, -1, -2) / math.sqrt(q.shape[-1])
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=-1, keepdims=True)
    return w @ np.asarray(v, dtype=np.float64), w


def streaming_lse(q_mod: np.ndarray, k_mod: np.ndarray, tile=DEFAULT_TILE, pad_pow2: bool = True) -> LseBuffer:
    """Pass 1: per-query log-sum-exp of the scaled logits, streamed over key tiles."""
    _check_pair(q_mod, k_mod)
    bq, bk = _check_tile(tile)
    lead = q_mod.shape[:-2]
    Q, d = q_mod.shape[-2:]
    T = k_mod.shape[-2]
    qf = q_mod.reshape(-1, Q, d)
    kf = k_mod.reshape(-1, T, d)
    d_pad = _padded_dim(d, pad_pow2)
    scale = 1.0 / math.sqrt(d)

    _alloc(qf.shape[0] * Q, "lse")
    lse = np.empty((qf.shape[0], Q))
    for bh in range(qf.shape[0]):
        for q0 in range(0, Q, bq):
            qt = _tile64(qf[bh], q0, q0 + bq, d_pad, "q_tile")
            nq = qt.shape[0]
            m = lse[bh, q0 : q0 + nq]  # running max lives in the output slice
            m[:] = -np.inf
            _alloc(2 * nq, "running_stats")  # normalizer and the per-tile new max
            l = np.zeros(nq)
            for k0 in range(0, T, bk):
                kt = _tile64(kf[bh], k0, k0 + bk, d_pad, "k_tile")
                _alloc(nq * kt.shape[0], "logit_tile")
                s = qt @ kt.T
                s *= scale
                m_new = np.maximum(m, s.max(axis=1))
                s -= m_new[:, None]
                np.exp(s, out=s)
                l *= np.exp(m - m_new)
                l += s.sum(axis=1)
                m[:] = m_new
                _free(nq * kt.shape[0])
                _free(kt.size, staging=True)
            m += np.log(l)
            _free(2 * nq)
            _free(qt.size, staging=True)
    return LseBuffer(lse.reshape(*lead, Q))


def streaming_key_mass(
    q_mod: np.ndarray, k_mod: np.ndarray, lse: LseBuffer, tile=DEFAULT_TILE, pad_pow2: bool = True
) -> KeyMassBuffer:
    """Pass 2: per-key softmax mass summed over all queries, ``sum_q exp(s_qt - LSE_q)``."""
    _check_pair(q_mod, k_mod)
    bq, bk = _check_tile(tile)
    lead = q_mod.shape[:-2]
    Q, d = q_mod.shape[-2:]
    T = k_mod.shape[-2]
    lse_v = np.asarray(lse.values, dtype=np.float64)
    if lse_v.shape != (*lead, Q):
        raise ShapeError(f"lse shape {lse_v.shape} does not match queries {q_mod.shape}")
    qf = q_mod.reshape(-1, Q, d)
    kf = k_mod.reshape(-1, T, d)
    lf = lse_v.reshape(-1, Q)
    d_pad = _padded_dim(d, pad_pow2)
    scale = 1.0 / math.sqrt(d)
    n_qt = math.ceil(Q / bq)

    _alloc(qf.shape[0] * n_qt * T, "partial_mass")
    partial = np.zeros((qf.shape[0], n_qt, T))
    for bh in range(qf.shape[0]):
        for qi, q0 in enumerate(range(0, Q, bq)):
            qt = _tile64(qf[bh], q0, q0 + bq, d_pad, "q_tile")
            lt = lf[bh, q0 : q0 + qt.shape[0], None]
            for k0 in range(0, T, bk):
                kt = _tile64(kf[bh], k0, k0 + bk, d_pad, "k_tile")
                _alloc(qt.shape[0] * kt.shape[0], "weight_tile")
                w = qt @ kt.T
                w *= scale
                w -= lt
                np.exp(w, out=w)
                partial[bh, qi, k0 : k0 + kt.shape[0]] = w.sum(axis=0)
                _free(qt.shape[0] * kt.shape[0])
                _free(kt.size, staging=True)
            _free(qt.size, staging=True)
    # fixed ascending query-tile order, reduced in place into the first slab
    mass = partial[:, 0]
    for qi in range(1, n_qt):
        mass += partial[:, qi]
    return KeyMassBuffer(mass.reshape(*lead, T))


def mass_sum_error(mass: KeyMassBuffer, n_queries: int) -> float:
    """Worst relative deviation of ``sum_t mass`` from the query count."""
    totals = np.asarray(mass.values).sum(axis=-1)
    return float(np.max(np.abs(totals - n_queries)) / n_queries)


def per_key_scores(q_mod: np.ndarray, k_mod: np.ndarray, tile=DEFAULT_TILE, pad_pow2: bool = True) -> np.ndarray:
    """Mean softmax weight each key receives over the query rows, shape ``(..., T)``."""
    lse = streaming_lse(q_mod, k_mod, tile, pad_pow2)
    mass = streaming_key_mass(q_mod, k_mod, lse, tile, pad_pow2)
    out = mass.values / q_mod.shape[-2]
    bh, Q = lse.values.size // q_mod.shape[-2], q_mod.shape[-2]
    _free(bh * Q + bh * math.ceil(Q / _check_tile(tile)[0]) * k_mod.shape[-2])
    return out
