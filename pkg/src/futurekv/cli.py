"""Command-line entry point: ``futurekv {gen-trace,run,stability,verify-bounds,bench-kernel}``.

Exit codes: 0 success, 2 configuration error, 3 format error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time

import numpy as np

from .attention import dense_attention, per_key_scores
from .errors import ConfigurationError, FutureKVError
from .harness import RunConfig, emit_report, simulate
from .policy import PolicyConfig
from .stability import (
    DEFAULT_DIMS,
    audit_bounds,
    query_stability,
    trace_drift_reports,
    write_stability_report,
)
from .trace import GenConfig, generate_synthetic_trace, read_trace, write_trace

log = logging.getLogger("futurekv")

MODE_NAMES = {
    "full": "full_cache",
    "sink-fifo": "sink_fifo",
    "history": "history_only",
    "future": "future_only",
    "future-aware": "future_aware",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigurationError(message)


def _pair(text: str, sep: str = "x") -> tuple[int, int]:
    try:
        a, b = text.lower().split(sep)
        return int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected AxB, got {text!r}") from None


def _dims(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(d) for d in text.split(",") if d.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="futurekv", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-trace", help="write a seeded synthetic trace")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frames", type=int, required=True)
    g.add_argument("--tokens", type=int, required=True)
    g.add_argument("--heads", type=int, default=2)
    g.add_argument("--head-dim", type=int, default=32)
    g.add_argument("--grid", type=_pair, required=True, help="HxW, with H*W == --tokens")
    g.add_argument("--drift-eps", type=float, default=1.0)
    g.add_argument("--canonical-scale", type=float, default=1.0)
    g.add_argument("--latent-dim", type=int, default=64)
    g.add_argument("--out", required=True)
    g.add_argument("--with-latents", action="store_true")
    g.add_argument("--with-projections", action="store_true")

    r = sub.add_parser("run", help="simulate a cache policy over a trace")
    r.add_argument("--trace", required=True)
    r.add_argument("--mode", choices=sorted(MODE_NAMES), default="future-aware")
    r.add_argument("--lambda", dest="lam", type=float, default=0.5)
    r.add_argument("--delta-max", type=int, default=6)
    r.add_argument("--window", type=int, default=3)
    r.add_argument("--tau", type=float, default=0.95)
    r.add_argument("--budget-frames", type=int, default=18)
    r.add_argument("--sink-frames", type=int, default=1)
    r.add_argument("--report", required=True)
    r.add_argument("--format", choices=("json", "csv"), default="json")
    r.add_argument("--history-mode", choices=("observed", "strict"), default="observed")
    r.add_argument("--head-aggregation", choices=("per_head", "mean"), default="per_head")
    r.add_argument("--frame-aggregate", action="store_true")
    r.add_argument("--no-merge", action="store_true")
    r.add_argument("--no-remap", action="store_true")
    r.add_argument("--evict-every", type=int, default=1)
    r.add_argument("--tiles", type=_pair, default=(128, 128))
    r.add_argument("--threads", type=int, default=1)
    r.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("stability", help="normalized W1 stability and drift bounds on a trace")
    s.add_argument("--trace", required=True)
    s.add_argument("--dims", type=_dims, default=DEFAULT_DIMS)
    s.add_argument("--report", required=True)

    vb = sub.add_parser("verify-bounds", help="random-trial audit of the query drift bounds")
    vb.add_argument("--trials", type=int, default=1000)
    vb.add_argument("--seed", type=int, default=0)

    b = sub.add_parser("bench-kernel", help="time the streaming per-key reduction against the dense oracle")
    b.add_argument("--q", type=int, default=1024)
    b.add_argument("--t", type=int, default=1024)
    b.add_argument("--heads", type=int, default=1)
    b.add_argument("--head-dim", type=int, default=64)
    b.add_argument("--tiles", type=_pair, default=(128, 128))
    b.add_argument("--repeat", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    return p


def cmd_gen_trace(a) -> int:
    gh, gw = a.grid
    if gh * gw != a.tokens:
        raise ConfigurationError(f"--grid {gh}x{gw} does not match --tokens {a.tokens}")
    cfg = GenConfig(
        seed=a.seed, num_frames=a.frames, grid_h=gh, grid_w=gw, num_heads=a.heads, head_dim=a.head_dim,
        latent_dim=a.latent_dim, drift_eps=a.drift_eps, canonical_scale=a.canonical_scale,
        with_latents=a.with_latents, with_projections=a.with_projections,
    )
    write_trace(generate_synthetic_trace(cfg), a.out)
    print(f"wrote {a.out}")
    return 0


def cmd_run(a) -> int:
    policy = PolicyConfig(
        lam=a.lam, delta_max=a.delta_max, window_w=a.window, mode=MODE_NAMES[a.mode],
        history_mode=a.history_mode, head_aggregation=a.head_aggregation, frame_aggregate=a.frame_aggregate,
    )
    run = RunConfig(
        trace_path=a.trace, policy=policy, budget_frames=a.budget_frames, sink_frames=a.sink_frames,
        merge_tau=a.tau, merge=not a.no_merge, remap=not a.no_remap, evict_every=a.evict_every,
        tile=a.tiles, report_path=a.report, report_format=a.format, seed=a.seed, threads=a.threads,
    )
    result = simulate(run)
    emit_report(result, a.format, a.report)
    err = result.summary()["out_rel_fro_err"]
    if err is not None:
        print(f"{a.mode}: {len(result.metrics)} steps, median rel err {err['median']:.4g}, max {err['max']:.4g}")
    return 0


def cmd_stability(a) -> int:
    trace = read_trace(a.trace)
    rows = query_stability(trace, a.dims)
    drift = None
    if trace.projections is not None and trace.latents is not None:
        drift = trace_drift_reports(trace)
    else:
        log.warning("trace lacks latents/projections; skipping drift-bound checks")
    write_stability_report(a.report, rows, drift)
    for row in rows:
        print(f"dim {row['dim']:>3} {row['kind']:<9} normalized W1 = {row['normalized_w1']:.4f}")
    if drift is not None:
        ok = all(r.holds() for r in drift)
        print(f"drift bounds hold on {len(drift)} adjacent pairs: {ok}")
        return 0 if ok else 4
    return 0


def cmd_verify_bounds(a) -> int:
    reports = audit_bounds(a.trials, a.seed)
    bad = [r for r in reports if not r.holds()]
    min_pre = min(r.slack_pre for r in reports)
    min_post = min(r.slack_post for r in reports)
    print(f"{len(reports)} trials, {len(bad)} violations, min slack pre {min_pre:.3e}, post {min_post:.3e}")
    return 4 if bad else 0


def cmd_bench_kernel(a) -> int:
    rng = np.random.default_rng(a.seed)
    q = rng.standard_normal((a.heads, a.q, a.head_dim))
    k = rng.standard_normal((a.heads, a.t, a.head_dim))
    times = []
    for _ in range(a.repeat):
        t0 = time.perf_counter()
        scores = per_key_scores(q, k, a.tiles)
        times.append(time.perf_counter() - t0)
    _, w = dense_attention(q, k, np.zeros((a.heads, a.t, 1)))
    err = float(np.max(np.abs(scores - w.mean(axis=-2))))
    best = min(times)
    pairs = a.heads * a.q * a.t
    print(f"tiles {a.tiles[0]}x{a.tiles[1]}: best {best * 1e3:.2f} ms, {pairs / best / 1e6:.2f} M qk-pairs/s, "
          f"oracle max abs err {err:.3e}")
    return 0


COMMANDS = {
    "gen-trace": cmd_gen_trace,
    "run": cmd_run,
    "stability": cmd_stability,
    "verify-bounds": cmd_verify_bounds,
    "bench-kernel": cmd_bench_kernel,
}


def main(argv=None) -> int:
    try:
        a = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return COMMANDS[a.command](a)
    except FutureKVError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
