"""Future query proxies, the future/history blended eviction score and cache rankings."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .attention import DEFAULT_TILE, per_key_scores
from .errors import ConfigurationError, PreconditionError, ShapeError
from .kv_cache import HeadCache
from .rope3d import RotationTable, apply_rope

MODES = ("future_aware", "history_only", "future_only", "sink_fifo", "full_cache")


@dataclass(frozen=True)
class PolicyConfig:
    lam: float = 0.5
    delta_max: int = 6
    window_w: int = 3
    mode: str = "future_aware"
    history_mode: str = "observed"   # or "strict" (divide by all steps so far)
    head_aggregation: str = "per_head"  # or "mean"
    frame_aggregate: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.delta_max < 1 or self.window_w < 1:
            raise ConfigurationError("delta_max and window_w must be >= 1")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown policy mode {self.mode!r}; expected one of {MODES}")
        if self.history_mode not in ("observed", "strict"):
            raise ConfigurationError(f"unknown history mode {self.history_mode!r}")
        if self.head_aggregation not in ("per_head", "mean"):
            raise ConfigurationError(f"unknown head aggregation {self.head_aggregation!r}")

    @property
    def uses_future(self) -> bool:
        return self.mode in ("future_aware", "future_only")


def update_canonical_mean(recent_pre_rope_q) -> np.ndarray:
    """Elementwise mean of a window of pre-RoPE query frames (token slot by token slot)."""
    frames = list(recent_pre_rope_q)
    if not frames:
        raise PreconditionError("canonical mean needs at least one query frame")
    shape = frames[0].shape
    if any(f.shape != shape for f in frames):
        raise ShapeError("all query frames in the window must share one shape")
    return np.mean(np.stack(frames).astype(np.float64), axis=0)


class QueryWindow:
    """Sliding window over the last ``w`` pre-RoPE query frames."""

    def __init__(self, w: int):
        self.frames: deque[np.ndarray] = deque(maxlen=w)

    def push(self, q: np.ndarray) -> None:
        self.frames.append(np.asarray(q))

    def mean(self) -> np.ndarray:
        return update_canonical_mean(self.frames)


@dataclass
class FutureProxies:
    per_token: np.ndarray  # (..., delta_max, N, head_dim)
    pooled: np.ndarray     # (..., delta_max, head_dim)
    t_now: int

    @property
    def delta_max(self) -> int:
        return self.per_token.shape[-3]


def build_future_proxies(
    q_bar: np.ndarray, t_now: int, delta_max: int, spatial: np.ndarray, table: RotationTable
) -> FutureProxies:
    """RoPE-modulate the canonical mean at times ``t_now + 1 .. t_now + delta_max``.

    Args:
        q_bar: canonical pre-RoPE queries, shape ``(..., N, head_dim)``.
        t_now: current (post-remap) time position.
        delta_max: look-ahead horizon.
        spatial: ``(N, 2)`` integer ``(y, x)`` coordinates of the token slots.
        table: rotation table.
    """
    spatial = np.asarray(spatial, dtype=np.int64)
    if spatial.shape != (q_bar.shape[-2], 2):
        raise ShapeError(f"spatial coords {spatial.shape} do not match {q_bar.shape[-2]} tokens")
    frames = []
    for delta in range(1, delta_max + 1):
        pos = np.column_stack([np.full(spatial.shape[0], t_now + delta, dtype=np.int64), spatial])
        frames.append(apply_rope(q_bar, pos, table))
    per_token = np.stack(frames, axis=-3)
    return FutureProxies(per_token, per_token.mean(axis=-2), t_now)


def future_masses(proxies: FutureProxies, keys: np.ndarray, tile=DEFAULT_TILE) -> np.ndarray:
    """Predicted per-key attention ``a_hat`` for each look-ahead offset, shape ``(..., delta_max, n)``.

    Each offset's full proxy frame is run as a query block against ``keys``
    through the streaming reduction, then averaged over the query rows.
    """
    if keys.shape[-2] == 0:
        raise PreconditionError("cannot score an empty cache")
    rows = [per_key_scores(proxies.per_token[..., d, :, :], keys, tile) for d in range(proxies.delta_max)]
    return np.stack(rows, axis=-2)


def future_importance(proxies: FutureProxies, keys: np.ndarray, tile=DEFAULT_TILE) -> np.ndarray:
    """Mean over look-ahead offsets of the predicted per-key attention."""
    return future_masses(proxies, keys, tile).mean(axis=-2)


@dataclass
class ScoreVector:
    future: np.ndarray
    history: np.ndarray
    combined: np.ndarray


def combined_score(future: np.ndarray, history: np.ndarray, lam: float) -> ScoreVector:
    future = np.asarray(future, dtype=np.float64)
    history = np.asarray(history, dtype=np.float64)
    if future.shape != history.shape:
        raise ShapeError(f"future {future.shape} and history {history.shape} scores are misaligned")
    return ScoreVector(future, history, lam * future + (1.0 - lam) * history)


def frame_mean_scores(score: np.ndarray, frame_t: np.ndarray) -> np.ndarray:
    """Replace every entry's score by the mean score of its frame."""
    out = np.empty_like(score, dtype=np.float64)
    for t in np.unique(frame_t):
        mask = frame_t == t
        out[mask] = score[mask].mean()
    return out


def rank_by_score(score: np.ndarray, orig_t: np.ndarray, token_index: np.ndarray) -> np.ndarray:
    """Descending score; ties prefer the later frame, then the smaller token index."""
    return np.lexsort((token_index, -orig_t, -np.asarray(score, dtype=np.float64)))


def policy_rank(cache: HeadCache, scores: ScoreVector | None, config: PolicyConfig, sink_frames: int = 1) -> np.ndarray:
    """Descending retention order of the cache rows under ``config.mode``."""
    orig_t = cache.orig_pos[:, 0]
    if config.mode == "full_cache":
        return np.arange(len(cache))
    if config.mode == "sink_fifo":
        sink = cache.sink_mask(sink_frames)
        return np.lexsort((cache.token_index, -orig_t, ~sink))
    if scores is None:
        raise PreconditionError(f"mode {config.mode!r} needs scores")
    component = {
        "future_aware": scores.combined,
        "history_only": scores.history,
        "future_only": scores.future,
    }[config.mode]
    if config.frame_aggregate:
        component = frame_mean_scores(component, orig_t)
    return rank_by_score(component, orig_t, cache.token_index)
