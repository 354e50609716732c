"""Future-aware KV-cache compression policies and an attention-trace simulator."""

from .attention import dense_attention, per_key_scores, streaming_key_mass, streaming_lse, track_allocations
from .errors import (
    ConfigurationError,
    FormatError,
    FutureKVError,
    NumericError,
    PreconditionError,
    ProtocolError,
    RangeError,
    ShapeError,
    VersionError,
)
from .harness import RunConfig, StepMetrics, emit_report, fidelity_metrics, simulate
from .kv_cache import CacheBudget, HeadCache
from .policy import PolicyConfig
from .rope3d import RopeConfig, apply_rope, build_rope_tables, rotate_time_axis_inplace, rotation_diff_opnorm
from .trace import GenConfig, Trace, generate_synthetic_trace, read_trace, write_trace

__version__ = "0.1.0"

__all__ = [
    "CacheBudget",
    "ConfigurationError",
    "FormatError",
    "FutureKVError",
    "GenConfig",
    "HeadCache",
    "NumericError",
    "PolicyConfig",
    "PreconditionError",
    "ProtocolError",
    "RangeError",
    "RopeConfig",
    "RunConfig",
    "ShapeError",
    "StepMetrics",
    "Trace",
    "VersionError",
    "apply_rope",
    "build_rope_tables",
    "dense_attention",
    "emit_report",
    "fidelity_metrics",
    "generate_synthetic_trace",
    "per_key_scores",
    "read_trace",
    "rotate_time_axis_inplace",
    "rotation_diff_opnorm",
    "simulate",
    "streaming_key_mass",
    "streaming_lse",
    "track_allocations",
    "write_trace",
]
