"""Simulate, score, evict, merge and remap over a trace against a full-cache oracle.

One decoded frame per step. At step ``t`` the frame sits at time position
``t``; after any eviction the surviving cached frames are remapped to the
contiguous block right before ``t``, so relative distances stay bounded by
the cache length.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attention import DEFAULT_TILE, dense_attention, per_key_scores
from .errors import ConfigurationError, FutureKVError
from .kv_cache import CacheBudget, HeadCache
from .merge import key_profiles, merge_values, route_evicted
from .policy import (
    FutureProxies,
    PolicyConfig,
    QueryWindow,
    ScoreVector,
    build_future_proxies,
    combined_score,
    future_masses,
    policy_rank,
)
from .rope3d import RopeConfig, apply_rope, build_rope_tables, grid_positions
from .trace import Trace, read_trace

CSV_COLUMNS = ("step", "cache_tokens", "evicted", "merged", "dropped", "out_rel_fro_err", "out_cosine", "score_spearman")


@dataclass(frozen=True)
class RunConfig:
    trace_path: str | None = None
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    budget_frames: int = 18
    sink_frames: int = 1
    rope_base: float = 10000.0
    axis_pairs: tuple[int, int, int] | None = None
    merge_tau: float = 0.95
    merge: bool = True
    remap: bool = True
    evict_every: int = 1
    tile: tuple[int, int] = DEFAULT_TILE
    report_path: str | None = None
    report_format: str = "json"
    seed: int = 0
    threads: int = 1
    shadow: bool = True
    spearman: bool = True

    def __post_init__(self):
        if self.report_format not in ("json", "csv"):
            raise ConfigurationError(f"unknown report format {self.report_format!r}")
        if self.evict_every < 1 or self.threads < 1:
            raise ConfigurationError("evict_every and threads must be >= 1")
        if self.budget_frames < 1 or self.sink_frames < 0:
            raise ConfigurationError("budget_frames must be >= 1 and sink_frames >= 0")

    def echo(self) -> dict:
        d = asdict(self)
        d.pop("threads")  # execution detail; reports must not depend on it
        return d


@dataclass
class StepMetrics:
    step: int
    cache_tokens: int
    evicted: int
    merged: int
    dropped: int
    out_rel_fro_err: float | None
    out_cosine: float | None
    score_spearman: float | None = None


@dataclass
class SimulationResult:
    metrics: list[StepMetrics]
    outputs: list[np.ndarray]          # compressed attention outputs per recorded step, (H, N, d_v)
    oracle_outputs: list[np.ndarray]   # empty when the shadow is disabled
    score_pairs: list[list[tuple[np.ndarray, np.ndarray]]]  # per step, per head: (predicted, realized)
    config: RunConfig

    def summary(self) -> dict:
        return summarize(self.metrics)


def fidelity_metrics(compressed: np.ndarray, oracle: np.ndarray) -> tuple[float, float]:
    """Relative Frobenius error and mean per-token cosine of ``compressed`` against ``oracle``.

    Both arrays have shape ``(..., d_v)``; cosine is averaged over every
    leading index (heads x tokens).
    """
    c = np.asarray(compressed, dtype=np.float64)
    o = np.asarray(oracle, dtype=np.float64)
    if c.shape != o.shape:
        raise ConfigurationError(f"output shapes differ: {c.shape} vs {o.shape}")
    denom = np.linalg.norm(o)
    diff = np.linalg.norm(c - o)
    err = 0.0 if diff == 0 else float(diff / denom) if denom > 0 else math.inf
    c2 = c.reshape(-1, c.shape[-1])
    o2 = o.reshape(-1, o.shape[-1])
    nc, no = np.linalg.norm(c2, axis=1), np.linalg.norm(o2, axis=1)
    dots = np.einsum("ij,ij->i", c2, o2)
    both = (nc > 0) & (no > 0)
    cos = np.where(both, dots / np.where(both, nc * no, 1.0), np.where((nc == 0) & (no == 0), 1.0, 0.0))
    return err, float(np.clip(cos, -1.0, 1.0).mean())


def summarize(metrics: list[StepMetrics]) -> dict:
    errs = np.array([m.out_rel_fro_err for m in metrics if m.out_rel_fro_err is not None], dtype=np.float64)
    coss = np.array([m.out_cosine for m in metrics if m.out_cosine is not None], dtype=np.float64)
    rhos = np.array([m.score_spearman for m in metrics if m.score_spearman is not None], dtype=np.float64)

    def stats(x: np.ndarray) -> dict | None:
        if x.size == 0:
            return None
        return {"mean": float(x.mean()), "median": float(np.median(x)), "max": float(x.max())}

    return {
        "steps": len(metrics),
        "out_rel_fro_err": stats(errs),
        "out_cosine": stats(coss),
        "score_spearman": stats(rhos),
        "max_cache_tokens": max((m.cache_tokens for m in metrics), default=0),
    }


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size)
    start = 0
    for end in [*np.flatnonzero(np.diff(xs) != 0) + 1, x.size]:
        ranks[order[start:end]] = 0.5 * (start + end - 1)
        start = end
    return ranks


def spearman(a: np.ndarray, b: np.ndarray) -> float | None:
    """Spearman rank correlation with average ranks for ties; ``None`` if undefined."""
    if a.size < 2:
        return None
    ra, rb = _average_ranks(np.asarray(a, float)), _average_ranks(np.asarray(b, float))
    ra -= ra.mean()
    rb -= rb.mean()
    den = math.sqrt(float(ra @ ra) * float(rb @ rb))
    return None if den == 0 else float(ra @ rb) / den


def spearman_null_threshold(score_pairs, n_perm: int = 200, quantile: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Observed mean Spearman over all (step, head) pairs and its shuffled-score null quantile.

    Each null replicate permutes every predicted vector independently and
    recomputes the same mean statistic.
    """
    pairs = [(p, r) for step in score_pairs for p, r in step if p.size >= 2]
    ranked = [(_average_ranks(p), _average_ranks(r)) for p, r in pairs]

    def stat(rs) -> float:
        vals = []
        for ra, rb in rs:
            ra, rb = ra - ra.mean(), rb - rb.mean()
            den = math.sqrt(float(ra @ ra) * float(rb @ rb))
            if den > 0:
                vals.append(float(ra @ rb) / den)
        return float(np.mean(vals)) if vals else float("nan")

    observed = stat(ranked)
    rng = np.random.default_rng(seed)
    null = [stat([(rng.permutation(ra), rb) for ra, rb in ranked]) for _ in range(n_perm)]
    return observed, float(np.quantile(null, quantile))


class _Head:
    def __init__(self, head_dim: int, w: int):
        self.cache = HeadCache(head_dim)
        self.window = QueryWindow(w)
        self.shadow_keys: list[np.ndarray] = []
        self.shadow_pre_keys: list[np.ndarray] = []
        self.shadow_values: list[np.ndarray] = []
        # per-step scratch
        self.proxies: FutureProxies | None = None
        self.masses: np.ndarray | None = None
        self.scores: ScoreVector | None = None


class Simulator:
    def __init__(self, run: RunConfig, trace: Trace):
        self.run = run
        self.trace = trace
        h = trace.header
        self.N = h.tokens_per_frame
        self.H = h.num_heads
        self.policy = run.policy
        self.budget = CacheBudget.from_frames(run.budget_frames, self.N, run.sink_frames)
        self.target = self.budget.max_tokens - run.evict_every * self.N
        if self.policy.mode != "full_cache" and self.target < self.budget.sink_tokens:
            raise ConfigurationError(
                f"budget of {run.budget_frames} frames leaves no room for {run.sink_frames} sink frames "
                f"plus {run.evict_every} incoming frame(s)"
            )
        rope = RopeConfig(
            h.head_dim, run.rope_base, run.axis_pairs,
            (h.num_frames + self.policy.delta_max + 1, h.grid_h, h.grid_w),
        )
        self.table = build_rope_tables(rope)
        self.spatial = trace.spatial()
        self.heads = [_Head(h.head_dim, self.policy.window_w) for _ in range(self.H)]
        self.pool = ThreadPoolExecutor(run.threads) if run.threads > 1 else None

    def _map(self, fn, items):
        if self.pool is None:
            return [fn(x) for x in items]
        return list(self.pool.map(fn, items))

    def _modulated(self, arr: np.ndarray, t: int, pos_t: int) -> np.ndarray:
        return apply_rope(arr[t].astype(np.float64), grid_positions(pos_t, self.trace.header.grid_h,
                                                                    self.trace.header.grid_w), self.table)

    def run_all(self) -> SimulationResult:
        metrics, outputs, oracles, pairs = [], [], [], []
        try:
            for t in range(self.trace.header.num_frames):
                rec = self.step(t)
                if rec is not None:
                    m, out, ora, sp = rec
                    metrics.append(m)
                    outputs.append(out)
                    if ora is not None:
                        oracles.append(ora)
                    pairs.append(sp)
        finally:
            if self.pool is not None:
                self.pool.shutdown()
        return SimulationResult(metrics, outputs, oracles, pairs, self.run)

    def step(self, t: int):
        tr, run, policy = self.trace, self.run, self.policy
        T = tr.header.num_frames
        pos = grid_positions(t, tr.header.grid_h, tr.header.grid_w)
        q_mod = self._modulated(tr.q, t, t)
        k_mod = self._modulated(tr.k, t, t)
        v = tr.v[t].astype(np.float64)
        had_cache = len(self.heads[0].cache) > 0
        check = t % run.evict_every == 0
        need_evict = (policy.mode != "full_cache" and check
                      and len(self.heads[0].cache) + run.evict_every * self.N > self.budget.max_tokens)
        horizon = min(policy.delta_max, T - 1 - t)
        want_future = had_cache and ((need_evict and policy.uses_future) or (run.spearman and horizon > 0))
        future_q = [self._modulated(tr.q, t + d, t + d) for d in range(1, horizon + 1)] if want_future else []

        def observe(h: int):
            st = self.heads[h]
            cache = st.cache
            out = ora = None
            pair = None
            st.window.push(tr.q[t, h].astype(np.float64))
            if had_cache:
                out, _ = dense_attention(q_mod[h], cache.keys, cache.values)
                if run.shadow:
                    ora, _ = dense_attention(q_mod[h], np.concatenate(st.shadow_keys),
                                             np.concatenate(st.shadow_values))
                cache.update_history_mass(per_key_scores(q_mod[h], cache.keys, run.tile))
                st.proxies = st.masses = st.scores = None
                if want_future:
                    st.proxies = build_future_proxies(st.window.mean(), t, policy.delta_max, self.spatial, self.table)
                    st.masses = future_masses(st.proxies, cache.keys, run.tile)
                    if run.spearman and horizon > 0:
                        realized = np.mean([per_key_scores(fq[h], cache.keys, run.tile) for fq in future_q], axis=0)
                        pair = (st.masses.mean(axis=0), realized)
                if need_evict and policy.mode != "sink_fifo":
                    future = st.masses.mean(axis=0) if st.masses is not None else np.zeros(len(cache))
                    history = cache.history_average(policy.history_mode, total_steps=t)
                    st.scores = combined_score(future, history, policy.lam)
            return out, ora, pair

        observed = self._map(observe, range(self.H))

        shared_scores = None
        if need_evict and policy.head_aggregation == "mean" and policy.mode != "sink_fifo" and had_cache:
            vecs = [self.heads[h].scores for h in range(self.H)]
            shared_scores = ScoreVector(*(np.mean([getattr(s, f) for s in vecs], axis=0)
                                          for f in ("future", "history", "combined")))

        def compress(h: int):
            st = self.heads[h]
            cache = st.cache
            evicted = merged = dropped = 0
            if need_evict and len(cache):
                scores = shared_scores if shared_scores is not None else st.scores
                ranking = policy_rank(cache, scores, policy, run.sink_frames)
                retained, ev = cache.evict_to_budget(ranking, self.budget, max_tokens=self.target)
                evicted = len(ev)
                if len(ev) and len(retained) and run.merge and policy.uses_future:
                    profiles = key_profiles(cache.keys, st.proxies.pooled)
                    plan = route_evicted(profiles, retained, ev, run.merge_tau)
                    counts = merge_values(cache, plan, st.masses)
                    merged, dropped = counts["merged"], counts["dropped"]
                else:
                    cache.retain(retained)
                    dropped = len(ev)
                if run.remap:
                    cache.remap_positions_contiguous(t, self.table)
            cache.append_frame(k_mod[h], v[h], pos, step=t)
            if run.shadow:
                st.shadow_keys.append(k_mod[h])
                st.shadow_pre_keys.append(tr.k[t, h].astype(np.float64))
                st.shadow_values.append(v[h])
            return evicted, merged, dropped

        counts = self._map(compress, range(self.H))
        if not had_cache:
            return None

        out = np.stack([o[0] for o in observed])
        ora = np.stack([o[1] for o in observed]) if run.shadow else None
        err, cos = fidelity_metrics(out, ora) if ora is not None else (None, None)
        pairs = [o[2] for o in observed if o[2] is not None]
        rhos = [spearman(p, r) for p, r in pairs]
        rhos = [r for r in rhos if r is not None]
        metrics = StepMetrics(
            step=t,
            cache_tokens=max(len(st.cache) for st in self.heads),
            evicted=sum(c[0] for c in counts),
            merged=sum(c[1] for c in counts),
            dropped=sum(c[2] for c in counts),
            out_rel_fro_err=err,
            out_cosine=cos,
            score_spearman=float(np.mean(rhos)) if rhos else None,
        )
        return metrics, out, ora, pairs


def simulate(run: RunConfig, trace: Trace | None = None) -> SimulationResult:
    """Run the full per-step loop; deterministic given ``(trace, run)``."""
    if trace is None:
        if run.trace_path is None:
            raise ConfigurationError("simulate needs a trace or run.trace_path")
        trace = read_trace(run.trace_path)
    if run.axis_pairs is not None and 2 * sum(run.axis_pairs) != trace.header.head_dim:
        raise ConfigurationError(f"axis_pairs {run.axis_pairs} do not match trace head_dim {trace.header.head_dim}")
    return Simulator(run, trace).run_all()


def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    return x


def render_report(result: SimulationResult, fmt: str = "json") -> str:
    if fmt == "json":
        doc = {
            "config": result.config.echo(),
            "steps": [asdict(m) for m in result.metrics],
            "summary": result.summary(),
        }
        return json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for m in result.metrics:
            row = asdict(m)
            writer.writerow(["" if row[c] is None else repr(row[c]) if isinstance(row[c], float) else row[c]
                             for c in CSV_COLUMNS])
        return buf.getvalue()
    raise ConfigurationError(f"unknown report format {fmt!r}")


def emit_report(result: SimulationResult, fmt: str, path) -> None:
    text = render_report(result, fmt)
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise FutureKVError(f"cannot write report to {path}: {exc}") from exc
