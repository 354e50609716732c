"""Per-head KV cache with position bookkeeping, history mass and budget enforcement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ProtocolError, RangeError, ShapeError
from .rope3d import RotationTable, rotate_time_axis_inplace


@dataclass(frozen=True)
class CacheBudget:
    max_tokens: int
    sink_frames: int = 1
    tokens_per_frame: int = 1

    def __post_init__(self):
        if self.max_tokens <= 0 or self.tokens_per_frame <= 0 or self.sink_frames < 0:
            raise ConfigurationError(f"invalid cache budget {self}")
        if self.max_tokens < self.sink_tokens:
            raise ConfigurationError(
                f"budget of {self.max_tokens} tokens cannot hold {self.sink_frames} sink frames "
                f"({self.sink_tokens} tokens)"
            )

    @classmethod
    def from_frames(cls, frames: int, tokens_per_frame: int, sink_frames: int = 1) -> "CacheBudget":
        return cls(frames * tokens_per_frame, sink_frames, tokens_per_frame)

    @property
    def sink_tokens(self) -> int:
        return self.sink_frames * self.tokens_per_frame


@dataclass(frozen=True)
class CacheEntry:
    id: int
    key: np.ndarray
    value: np.ndarray
    orig_pos: tuple[int, int, int]
    token_index: int
    cur_t: int
    birth_step: int
    hist_mass_sum: float
    hist_steps: int


class HeadCache:
    """Retained keys (RoPE-modulated) and values of one attention head.

    All per-entry state lives in parallel arrays ordered by insertion; rows
    keep that order through eviction, so row order equals id order.
    """

    def __init__(self, head_dim: int, value_dim: int | None = None, dtype=np.float64):
        self.head_dim = head_dim
        self.value_dim = head_dim if value_dim is None else value_dim
        self.dtype = np.dtype(dtype)
        self.ids = np.zeros(0, dtype=np.int64)
        self.keys = np.zeros((0, head_dim), dtype=self.dtype)
        self.values = np.zeros((0, self.value_dim), dtype=self.dtype)
        self.orig_pos = np.zeros((0, 3), dtype=np.int64)
        self.token_index = np.zeros(0, dtype=np.int64)
        self.cur_t = np.zeros(0, dtype=np.int64)
        self.birth_step = np.zeros(0, dtype=np.int64)
        self.hist_mass_sum = np.zeros(0, dtype=np.float64)
        self.hist_steps = np.zeros(0, dtype=np.int64)
        self._next_id = 0
        self._frames_seen: set[int] = set()

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def frame_times(self) -> np.ndarray:
        """Distinct currently-encoded frame times, ascending."""
        return np.unique(self.cur_t)

    def append_frame(self, k_mod: np.ndarray, v: np.ndarray, positions: np.ndarray, step: int | None = None) -> None:
        positions = np.asarray(positions, dtype=np.int64)
        n = positions.shape[0]
        if k_mod.shape != (n, self.head_dim) or v.shape != (n, self.value_dim) or positions.shape != (n, 3):
            raise ShapeError(
                f"frame shapes keys={k_mod.shape} values={v.shape} positions={positions.shape} "
                f"do not match head_dim={self.head_dim}, value_dim={self.value_dim}"
            )
        ts = np.unique(positions[:, 0])
        if ts.size != 1:
            raise ProtocolError(f"frame positions span several times: {ts.tolist()}")
        t = int(ts[0])
        if t in self._frames_seen:
            raise ProtocolError(f"frame t={t} already appended to this cache")
        self._frames_seen.add(t)
        new_ids = np.arange(self._next_id, self._next_id + n, dtype=np.int64)
        self._next_id += n
        self.ids = np.concatenate([self.ids, new_ids])
        self.keys = np.concatenate([self.keys, k_mod.astype(self.dtype)])
        self.values = np.concatenate([self.values, v.astype(self.dtype)])
        self.orig_pos = np.concatenate([self.orig_pos, positions])
        self.token_index = np.concatenate([self.token_index, np.arange(n, dtype=np.int64)])
        self.cur_t = np.concatenate([self.cur_t, positions[:, 0]])
        self.birth_step = np.concatenate([self.birth_step, np.full(n, t if step is None else step, dtype=np.int64)])
        self.hist_mass_sum = np.concatenate([self.hist_mass_sum, np.zeros(n)])
        self.hist_steps = np.concatenate([self.hist_steps, np.zeros(n, dtype=np.int64)])

    def update_history_mass(self, per_key_mass: np.ndarray) -> None:
        per_key_mass = np.asarray(per_key_mass, dtype=np.float64)
        if per_key_mass.shape != (len(self),):
            raise ShapeError(f"mass vector of shape {per_key_mass.shape} for a cache of {len(self)} entries")
        self.hist_mass_sum += per_key_mass
        self.hist_steps += 1

    def history_average(self, mode: str = "observed", total_steps: int | None = None) -> np.ndarray:
        """Average historical attention mass per entry.

        ``observed`` divides by the steps each entry was actually present for;
        ``strict`` divides every entry by ``total_steps`` since generation start.
        """
        if mode == "observed":
            return np.divide(
                self.hist_mass_sum, self.hist_steps, out=np.zeros(len(self)), where=self.hist_steps > 0
            )
        if mode == "strict":
            if not total_steps or total_steps < 1:
                raise ConfigurationError("strict history averaging needs total_steps >= 1")
            return self.hist_mass_sum / total_steps
        raise ConfigurationError(f"unknown history mode {mode!r}")

    def sink_mask(self, sink_frames: int) -> np.ndarray:
        return self.orig_pos[:, 0] < sink_frames

    def evict_to_budget(self, ranking: np.ndarray, budget: CacheBudget, max_tokens: int | None = None):
        """Split rows into retained and evicted sets without destroying anything.

        Sinks are always retained; remaining slots are filled in ``ranking``
        order. ``max_tokens`` overrides ``budget.max_tokens`` (the simulator
        reserves room for the incoming frame this way).

        Returns:
            ``(retained_rows, evicted_rows)``, both ascending row indices.
        """
        limit = budget.max_tokens if max_tokens is None else max_tokens
        ranking = np.asarray(ranking, dtype=np.int64)
        n = len(self)
        if ranking.shape != (n,) or not np.array_equal(np.sort(ranking), np.arange(n)):
            raise ShapeError("ranking must be a permutation of the cache rows")
        sink = self.sink_mask(budget.sink_frames)
        n_sink = int(sink.sum())
        if limit < n_sink:
            raise ConfigurationError(f"budget of {limit} tokens is smaller than the {n_sink} sink tokens")
        keep = sink.copy()
        ordered = ranking[~sink[ranking]]
        keep[ordered[: max(0, limit - n_sink)]] = True
        rows = np.arange(n)
        return rows[keep], rows[~keep]

    def retain(self, rows: np.ndarray) -> None:
        """Drop every row not listed in ``rows``; order is preserved."""
        rows = np.sort(np.asarray(rows, dtype=np.int64))
        for name in ("ids", "keys", "values", "orig_pos", "token_index", "cur_t",
                     "birth_step", "hist_mass_sum", "hist_steps"):
            setattr(self, name, getattr(self, name)[rows])

    def remap_positions_contiguous(self, current_t: int, table: RotationTable) -> dict[int, int]:
        """Renumber surviving frame times to the block ending just before ``current_t``.

        Keys are re-rotated on the time axis only. Returns the ``old -> new``
        time mapping (identity entries included).
        """
        times = self.frame_times
        if times.size == 0:
            return {}
        if times[-1] >= current_t:
            raise ProtocolError(f"cached time {int(times[-1])} is not before current_t={current_t}")
        start = current_t - times.size
        if start < 0:
            raise RangeError(f"{times.size} frames cannot fit before current_t={current_t}")
        mapping = {int(old): start + i for i, old in enumerate(times)}
        new_cur_t = self.cur_t.copy()
        for old, new in mapping.items():
            if old == new:
                continue
            rows = np.flatnonzero(self.cur_t == old)
            block = self.keys[rows]
            rotate_time_axis_inplace(block, old, new, table)
            self.keys[rows] = block
            new_cur_t[rows] = new
        self.cur_t = new_cur_t
        return mapping

    def entry(self, row: int) -> CacheEntry:
        return CacheEntry(
            id=int(self.ids[row]),
            key=self.keys[row].copy(),
            value=self.values[row].copy(),
            orig_pos=tuple(int(p) for p in self.orig_pos[row]),
            token_index=int(self.token_index[row]),
            cur_t=int(self.cur_t[row]),
            birth_step=int(self.birth_step[row]),
            hist_mass_sum=float(self.hist_mass_sum[row]),
            hist_steps=int(self.hist_steps[row]),
        )

    def copy(self) -> "HeadCache":
        other = HeadCache(self.head_dim, self.value_dim, self.dtype)
        for name, value in vars(self).items():
            setattr(other, name, value.copy() if isinstance(value, (np.ndarray, set)) else value)
        return other

    def to_debug_dict(self) -> dict:
        """JSON-ready dump of entry ids, positions and history masses (no tensors)."""
        return {
            "size": len(self),
            "entries": [
                {
                    "id": int(self.ids[r]),
                    "orig_pos": [int(p) for p in self.orig_pos[r]],
                    "cur_t": int(self.cur_t[r]),
                    "birth_step": int(self.birth_step[r]),
                    "hist_mass_sum": float(self.hist_mass_sum[r]),
                    "hist_steps": int(self.hist_steps[r]),
                }
                for r in range(len(self))
            ],
        }
