"""Query-drift bounds and cross-frame query distribution stability (normalized W1)."""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import NumericError, PreconditionError, ShapeError
from .rope3d import RopeConfig, apply_rope, build_rope_tables, grid_positions, time_axis_opnorm

DEFAULT_DIMS = (0, 5)


def operator_norm(W: np.ndarray, rtol: float = 1e-10, max_iter: int = 10000, seed: int = 0) -> float:
    """Largest singular value via power iteration on ``W.T @ W``.

    Raises:
        NumericError: if the Rayleigh quotient has not settled to ``rtol``
            within ``max_iter`` iterations.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.size == 0:
        raise PreconditionError(f"operator_norm needs a non-empty matrix, got shape {W.shape}")
    x = np.random.default_rng(seed).standard_normal(W.shape[1]) + 1.0
    x /= np.linalg.norm(x)
    lam = 0.0
    for it in range(1, max_iter + 1):
        y = W.T @ (W @ x)
        lam_new = float(x @ y)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        x = y / ny
        if it > 1 and abs(lam_new - lam) <= rtol * abs(lam_new):
            return float(np.linalg.norm(W @ x))
        lam = lam_new
    raise NumericError(
        f"power iteration did not converge in {max_iter} iterations "
        f"(last estimate {math.sqrt(max(lam, 0.0)):.12g}, last change {abs(lam_new - lam):.3g})"
    )


def drift_ratios(Q_t: np.ndarray, Q_s: np.ndarray, Qmod_t: np.ndarray, Qmod_s: np.ndarray) -> tuple[float, float]:
    """Relative Frobenius drift of pre-RoPE and RoPE-modulated queries from step t to s."""
    if not (Q_t.shape == Q_s.shape == Qmod_t.shape == Qmod_s.shape):
        raise ShapeError("drift_ratios needs four equally shaped query matrices")
    q_fro = np.linalg.norm(Q_t)
    qm_fro = np.linalg.norm(Qmod_t)
    if q_fro == 0 or qm_fro == 0:
        raise PreconditionError("reference query matrix has zero Frobenius norm")
    return float(np.linalg.norm(Q_s - Q_t) / q_fro), float(np.linalg.norm(Qmod_s - Qmod_t) / qm_fro)


def drift_bounds(epsilon: float, wq_opnorm: float, q_fro: float, delta_p: float, theta: float) -> tuple[float, float]:
    if not q_fro > 0:
        raise PreconditionError("q_fro must be positive")
    pre = wq_opnorm * epsilon / q_fro
    return pre, 2.0 * abs(math.sin(delta_p * theta / 2.0)) + pre


@dataclass
class DriftReport:
    rho_pre: float
    rho_post: float
    bound_pre: float
    bound_post: float
    epsilon: float
    wq_opnorm: float
    q_fro: float
    delta_p: int
    theta: float

    @property
    def slack_pre(self) -> float:
        return self.bound_pre - self.rho_pre

    @property
    def slack_post(self) -> float:
        return self.bound_post - self.rho_post

    def holds(self, tol: float = 1e-9) -> bool:
        return self.slack_pre >= -tol and self.slack_post >= -tol


def modulate_heads(Q: np.ndarray, t: int, grid: tuple[int, int], num_heads: int, table) -> np.ndarray:
    """Apply RoPE at frame time ``t`` to an ``(N, H*d_h)`` query matrix, head by head."""
    N = Q.shape[0]
    heads = Q.reshape(N, num_heads, -1).transpose(1, 0, 2)
    mod = apply_rope(heads, grid_positions(t, *grid), table)
    return mod.transpose(1, 0, 2).reshape(N, -1)


def drift_report(
    X_t: np.ndarray, X_s: np.ndarray, W_Q: np.ndarray, p_t: int, p_s: int,
    grid: tuple[int, int], num_heads: int, table, wq_opnorm: float | None = None,
) -> DriftReport:
    """Measure both drifts between two latent frames and evaluate their bounds.

    The bound's single frequency is taken as the time-axis frequency that
    maximizes ``2|sin(dp * theta / 2)|`` (the exact operator norm of the
    time-block difference).
    """
    Q_t, Q_s = X_t @ W_Q.T, X_s @ W_Q.T
    Qm_t = modulate_heads(Q_t, p_t, grid, num_heads, table)
    Qm_s = modulate_heads(Q_s, p_s, grid, num_heads, table)
    rho_pre, rho_post = drift_ratios(Q_t, Q_s, Qm_t, Qm_s)
    eps = float(np.linalg.norm(X_s - X_t))
    wq = operator_norm(W_Q) if wq_opnorm is None else wq_opnorm
    q_fro = float(np.linalg.norm(Q_t))
    delta_p = p_t - p_s
    _, theta = time_axis_opnorm(delta_p, table.config)
    bound_pre, bound_post = drift_bounds(eps, wq, q_fro, delta_p, theta)
    return DriftReport(rho_pre, rho_post, bound_pre, bound_post, eps, wq, q_fro, delta_p, theta)


def audit_bounds(trials: int, seed: int = 0) -> list[DriftReport]:
    """Randomized soundness audit of both drift bounds over varied shapes and offsets."""
    rng = np.random.default_rng(seed)
    reports = []
    tables: dict[int, object] = {}
    for _ in range(trials):
        head_dim = int(rng.choice([8, 16, 32, 64]))
        num_heads = int(rng.integers(1, 4))
        gh, gw = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        d = int(rng.integers(4, 48))
        if head_dim not in tables:
            tables[head_dim] = build_rope_tables(RopeConfig(head_dim, max_positions=(256, 8, 8)))
        table = tables[head_dim]
        N = gh * gw
        X_t = rng.standard_normal((N, d)) * rng.uniform(0.1, 3.0)
        X_s = X_t + rng.standard_normal((N, d)) * rng.uniform(0.0, 1.0) * rng.choice([0.0, 0.01, 0.1, 1.0])
        W_Q = rng.standard_normal((num_heads * head_dim, d)) / math.sqrt(d)
        p_t, p_s = int(rng.integers(0, 128)), int(rng.integers(0, 128))
        reports.append(drift_report(X_t, X_s, W_Q, p_t, p_s, (gh, gw), num_heads, table))
    return reports


def wasserstein1_1d(a: np.ndarray, b: np.ndarray) -> float:
    """Exact W1 between two equal-size empirical measures: mean gap of the sorted samples."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise PreconditionError("W1 needs non-empty samples")
    if a.size != b.size:
        raise ShapeError(f"W1 expects equal sample counts, got {a.size} and {b.size}")
    return float(np.mean(np.abs(np.sort(a) - np.sort(b))))


@dataclass
class W1Report:
    per_pair: np.ndarray
    mean_w1: float
    pooled_std: float
    normalized: float
    dim_index: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_pair"] = self.per_pair.tolist()
        return d


def normalized_pairwise_w1(frames, dim_index: int = 0) -> W1Report:
    """Mean W1 over unordered frame pairs divided by the population std of all samples."""
    frames = [np.asarray(f, dtype=np.float64).ravel() for f in frames]
    if len(frames) < 2:
        raise PreconditionError("need at least two frames")
    F = len(frames)
    per_pair = np.zeros((F, F))
    for i, j in itertools.combinations(range(F), 2):
        per_pair[i, j] = per_pair[j, i] = wasserstein1_1d(frames[i], frames[j])
    mean_w1 = float(per_pair[np.triu_indices(F, 1)].mean())
    pooled = float(np.concatenate(frames).std())
    normalized = 0.0 if mean_w1 == 0 else mean_w1 / pooled
    return W1Report(per_pair, mean_w1, pooled, normalized, dim_index)


def query_stability(trace, dims=DEFAULT_DIMS, rope: RopeConfig | None = None, frames=None) -> list[dict]:
    """Normalized pairwise W1 across frames for pre-RoPE and RoPE-modulated queries.

    Samples of one query dimension are taken over every token of every head.
    Returns one row per ``dim x kind``.
    """
    h = trace.header
    rope = rope or RopeConfig(h.head_dim, max_positions=(h.num_frames + 1, h.grid_h, h.grid_w))
    table = build_rope_tables(rope)
    idx = range(h.num_frames) if frames is None else frames
    pre, post = [], []
    for t in idx:
        q = trace.q[t].astype(np.float64)
        pre.append(q)
        post.append(apply_rope(q, grid_positions(t, h.grid_h, h.grid_w), table))
    rows = []
    for dim in dims:
        if not 0 <= dim < h.head_dim:
            raise ShapeError(f"query dim {dim} outside head_dim {h.head_dim}")
        for kind, qs in (("pre_rope", pre), ("post_rope", post)):
            rep = normalized_pairwise_w1([q[..., dim] for q in qs], dim)
            rows.append({"dim": dim, "kind": kind, "normalized_w1": rep.normalized,
                         "mean_w1": rep.mean_w1, "pooled_std": rep.pooled_std})
    return rows


def trace_drift_reports(trace, rope: RopeConfig | None = None) -> list[DriftReport]:
    """Bound checks between adjacent frames; needs stored latents and projections."""
    h = trace.header
    if trace.latents is None or trace.projections is None:
        raise PreconditionError("drift bounds need a trace with latents and projections")
    rope = rope or RopeConfig(h.head_dim, max_positions=(h.num_frames + 1, h.grid_h, h.grid_w))
    table = build_rope_tables(rope)
    W_Q = trace.projections[0].astype(np.float64)
    wq = operator_norm(W_Q)
    X = trace.latents.astype(np.float64)
    return [
        drift_report(X[t], X[t + 1], W_Q, t, t + 1, (h.grid_h, h.grid_w), h.num_heads, table, wq)
        for t in range(h.num_frames - 1)
    ]


def write_stability_report(path, w1_rows: list[dict], drift: list[DriftReport] | None = None) -> None:
    """JSON document, or CSV with one row per dim x kind when ``path`` ends in ``.csv``."""
    path = str(path)
    if path.endswith(".csv"):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["dim", "kind", "normalized_w1", "mean_w1", "pooled_std"])
            writer.writeheader()
            writer.writerows(w1_rows)
        return
    doc = {"w1": w1_rows}
    if drift is not None:
        doc["drift"] = [asdict(r) for r in drift]
        doc["bounds_hold"] = all(r.holds() for r in drift)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
