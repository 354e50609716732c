"""Merge evicted entries into retained ones by similarity of their future-query profiles.

A key's profile is its vector of scaled dot products with the pooled future
proxies. Each evicted entry routes to the retained entry with the most
similar profile (cosine) and is absorbed if that cosine reaches ``tau``.
Retained keys are never modified; only values are re-weighted.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError, ShapeError
from .kv_cache import HeadCache


def key_profiles(keys: np.ndarray, pooled_proxies: np.ndarray) -> np.ndarray:
    """``keys @ pooled.T / sqrt(d_h)``, shape ``(n, delta_max)``."""
    keys = np.asarray(keys, dtype=np.float64)
    pooled = np.asarray(pooled_proxies, dtype=np.float64)
    if keys.ndim != 2 or pooled.ndim != 2 or keys.shape[1] != pooled.shape[1]:
        raise ShapeError(f"keys {keys.shape} and pooled proxies {pooled.shape} disagree")
    return keys @ pooled.T / math.sqrt(keys.shape[1])


@dataclass
class MergePlan:
    assignments: dict[int, int]
    dropped: list[int]
    tau: float
    cosines: dict[int, float] = field(default_factory=dict)

    def groups(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = defaultdict(list)
        for j, i in sorted(self.assignments.items()):
            out[i].append(j)
        return dict(out)

    @property
    def evicted(self) -> list[int]:
        return sorted([*self.assignments, *self.dropped])

    def to_json(self) -> str:
        return json.dumps(
            {
                "tau": self.tau,
                "assignments": {str(j): i for j, i in sorted(self.assignments.items())},
                "dropped": sorted(self.dropped),
                "cosines": {str(j): c for j, c in sorted(self.cosines.items())},
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "MergePlan":
        doc = json.loads(text)
        return cls(
            assignments={int(j): int(i) for j, i in doc["assignments"].items()},
            dropped=[int(j) for j in doc["dropped"]],
            tau=float(doc["tau"]),
            cosines={int(j): float(c) for j, c in doc.get("cosines", {}).items()},
        )


def route_evicted(profiles: np.ndarray, retained_ids, evicted_ids, tau: float) -> MergePlan:
    """Nearest retained neighbour (by profile cosine) for each evicted entry.

    Ids are row indices into ``profiles``. Ties go to the smallest retained
    id; zero-norm profiles never match and are dropped.
    """
    retained = np.sort(np.asarray(retained_ids, dtype=np.int64))
    evicted = np.sort(np.asarray(evicted_ids, dtype=np.int64))
    if retained.size == 0:
        raise PreconditionError("merge routing needs a non-empty retained set")
    plan = MergePlan({}, [], float(tau))
    if evicted.size == 0:
        return plan
    profiles = np.asarray(profiles, dtype=np.float64)
    pr, pe = profiles[retained], profiles[evicted]
    nr, ne = np.linalg.norm(pr, axis=1), np.linalg.norm(pe, axis=1)
    ur = np.divide(pr, nr[:, None], out=np.zeros_like(pr), where=nr[:, None] > 0)
    ue = np.divide(pe, ne[:, None], out=np.zeros_like(pe), where=ne[:, None] > 0)
    cos = ue @ ur.T
    cos[:, nr == 0] = -np.inf
    best = np.argmax(cos, axis=1)
    for row, j in enumerate(evicted.tolist()):
        c = float(cos[row, best[row]])
        if ne[row] == 0 or not np.isfinite(c):
            plan.dropped.append(j)
            continue
        plan.cosines[j] = c
        if c >= tau:
            plan.assignments[j] = int(retained[best[row]])
        else:
            plan.dropped.append(j)
    return plan


def merged_values(values: np.ndarray, plan: MergePlan, future_masses: np.ndarray) -> dict[int, np.ndarray]:
    """New value vectors for every retained entry that absorbs at least one evicted entry.

    For each offset the retained value and its absorbed values are averaged
    with their predicted attention masses as weights; the per-offset results
    are then averaged over the horizon. An offset whose total mass is zero
    contributes the retained value unchanged.
    """
    values = np.asarray(values, dtype=np.float64)
    masses = np.asarray(future_masses, dtype=np.float64)
    if masses.ndim != 2 or masses.shape[1] != values.shape[0]:
        raise ShapeError(f"future masses {masses.shape} do not cover {values.shape[0]} entries")
    out = {}
    for i, js in plan.groups().items():
        a_i = masses[:, i]
        a_j = masses[:, js]
        num = a_i[:, None] * values[i] + a_j @ values[js]
        den = a_i + a_j.sum(axis=1)
        safe = den > 0
        terms = np.where(safe[:, None], num / np.where(safe, den, 1.0)[:, None], values[i])
        out[i] = terms.mean(axis=0)
    return out


def merge_values(cache: HeadCache, plan: MergePlan, future_masses: np.ndarray) -> dict[str, int]:
    """Apply ``plan`` to ``cache`` in place: re-weight absorbing values, destroy evicted rows."""
    for i, v in merged_values(cache.values, plan, future_masses).items():
        cache.values[i] = v.astype(cache.dtype)
    evicted = set(plan.evicted)
    cache.retain(np.array([r for r in range(len(cache)) if r not in evicted], dtype=np.int64))
    return {"merged": len(plan.assignments), "dropped": len(plan.dropped)}
