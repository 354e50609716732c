"""KVQT binary trace format and the seeded synthetic trace generator.

Layout (all little-endian)::

    offset  size  field
    0       4     magic "KVQT"
    4       4     version (u32) = 1
    8       4     num_frames (u32)
    12      4     tokens_per_frame (u32)
    16      4     num_heads (u32)
    20      4     head_dim (u32)
    24      4     grid_h (u32)
    28      4     grid_w (u32)          grid_h * grid_w == tokens_per_frame
    32      4     flags (u32)           bit 0 HAS_LATENTS, bit 1 HAS_PROJECTIONS
    36      4     latent_dim (u32)      0 when neither flag is set
    40      8     seed (u64)            generator seed, informational
    48      ...   per frame: Q, K, V as f32 [head][token][channel],
                  then latents f32 [token][latent] if HAS_LATENTS
    ...     ...   once, if HAS_PROJECTIONS: W_Q, W_K, W_V as f32
                  [num_heads*head_dim][latent_dim]

Positions are implicit: frame index from stream order, (y, x) row-major
over the grid. The generator uses numpy's Philox4x64 counter-based bit
generator seeded with ``seed``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError, VersionError

MAGIC = b"KVQT"
VERSION = 1
HAS_LATENTS = 1
HAS_PROJECTIONS = 2
_HEADER = struct.Struct("<4s9IQ")
HEADER_SIZE = _HEADER.size  # 48
_F32 = np.dtype("<f4")


@dataclass(frozen=True)
class TraceHeader:
    num_frames: int
    tokens_per_frame: int
    num_heads: int
    head_dim: int
    grid_h: int
    grid_w: int
    flags: int = 0
    latent_dim: int = 0
    seed: int = 0
    version: int = VERSION

    def validate(self) -> None:
        dims = (self.num_frames, self.tokens_per_frame, self.num_heads, self.head_dim, self.grid_h, self.grid_w)
        if min(dims) < 1:
            raise FormatError(f"all trace dims must be >= 1, got {dims}")
        if self.grid_h * self.grid_w != self.tokens_per_frame:
            raise FormatError(f"grid {self.grid_h}x{self.grid_w} != tokens_per_frame {self.tokens_per_frame}")
        if self.flags & ~(HAS_LATENTS | HAS_PROJECTIONS):
            raise FormatError(f"unknown flag bits {self.flags:#x}")
        if self.flags and self.latent_dim < 1:
            raise FormatError("latent/projection sections need latent_dim >= 1")

    @property
    def frame_scalars(self) -> int:
        n = 3 * self.num_heads * self.tokens_per_frame * self.head_dim
        if self.flags & HAS_LATENTS:
            n += self.tokens_per_frame * self.latent_dim
        return n

    @property
    def payload_size(self) -> int:
        n = self.num_frames * self.frame_scalars
        if self.flags & HAS_PROJECTIONS:
            n += 3 * self.num_heads * self.head_dim * self.latent_dim
        return 4 * n

    def pack(self) -> bytes:
        return _HEADER.pack(
            MAGIC, self.version, self.num_frames, self.tokens_per_frame, self.num_heads, self.head_dim,
            self.grid_h, self.grid_w, self.flags, self.latent_dim, self.seed,
        )


@dataclass
class Trace:
    header: TraceHeader
    q: np.ndarray  # (frames, heads, tokens, head_dim) float32, pre-RoPE
    k: np.ndarray
    v: np.ndarray
    latents: np.ndarray | None = None      # (frames, tokens, latent_dim)
    projections: np.ndarray | None = None  # (3, heads*head_dim, latent_dim): W_Q, W_K, W_V

    def spatial(self) -> np.ndarray:
        ys, xs = np.divmod(np.arange(self.header.tokens_per_frame), self.header.grid_w)
        return np.stack([ys, xs], axis=1)


def write_trace(trace: Trace, path, sidecar: bool = True) -> None:
    h = trace.header
    h.validate()
    shape = (h.num_frames, h.num_heads, h.tokens_per_frame, h.head_dim)
    for name in ("q", "k", "v"):
        if getattr(trace, name).shape != shape:
            raise ConfigurationError(f"trace.{name} has shape {getattr(trace, name).shape}, header says {shape}")
    parts = [h.pack()]
    for t in range(h.num_frames):
        for arr in (trace.q, trace.k, trace.v):
            parts.append(np.ascontiguousarray(arr[t], dtype=_F32).tobytes())
        if h.flags & HAS_LATENTS:
            parts.append(np.ascontiguousarray(trace.latents[t], dtype=_F32).tobytes())
    if h.flags & HAS_PROJECTIONS:
        parts.append(np.ascontiguousarray(trace.projections, dtype=_F32).tobytes())
    path = Path(path)
    path.write_bytes(b"".join(parts))
    if sidecar:
        path.with_suffix(".json").write_text(json.dumps(asdict(h), indent=2, sort_keys=True) + "\n")


def parse_header(data: bytes) -> TraceHeader:
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", offset=0)
    if len(data) < HEADER_SIZE:
        raise FormatError(f"truncated header: {len(data)} of {HEADER_SIZE} bytes", offset=len(data))
    _, version, *rest = _HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionError(f"unsupported trace version {version}, expected {VERSION}", offset=4)
    h = TraceHeader(*rest[:8], seed=rest[8], version=version)
    h.validate()
    return h


def read_trace(path) -> Trace:
    data = Path(path).read_bytes()
    h = parse_header(data)
    expected = HEADER_SIZE + h.payload_size
    if len(data) < expected:
        raise FormatError(f"truncated trace: expected {expected} bytes, got {len(data)}", offset=len(data))
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes after payload", offset=expected)
    F, H, N, D, L = h.num_frames, h.num_heads, h.tokens_per_frame, h.head_dim, h.latent_dim
    frames = np.frombuffer(data, dtype=_F32, count=F * h.frame_scalars, offset=HEADER_SIZE)
    frames = frames.reshape(F, h.frame_scalars)
    block = H * N * D
    q = frames[:, :block].reshape(F, H, N, D).copy()
    k = frames[:, block : 2 * block].reshape(F, H, N, D).copy()
    v = frames[:, 2 * block : 3 * block].reshape(F, H, N, D).copy()
    latents = frames[:, 3 * block :].reshape(F, N, L).copy() if h.flags & HAS_LATENTS else None
    projections = None
    if h.flags & HAS_PROJECTIONS:
        off = HEADER_SIZE + 4 * F * h.frame_scalars
        projections = np.frombuffer(data, dtype=_F32, offset=off).reshape(3, H * D, L).copy()
    return Trace(h, q, k, v, latents, projections)


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    num_frames: int = 24
    grid_h: int = 4
    grid_w: int = 4
    num_heads: int = 2
    head_dim: int = 32
    latent_dim: int = 64
    drift_eps: float = 1.0
    canonical_scale: float = 1.0
    with_latents: bool = False
    with_projections: bool = False

    def __post_init__(self):
        if self.drift_eps < 0:
            raise ConfigurationError(f"drift_eps must be >= 0, got {self.drift_eps}")
        if min(self.num_frames, self.grid_h, self.grid_w, self.num_heads, self.head_dim, self.latent_dim) < 1:
            raise ConfigurationError(f"all generator dims must be >= 1: {self}")
        if self.head_dim % 2:
            raise ConfigurationError("head_dim must be even")

    @property
    def tokens_per_frame(self) -> int:
        return self.grid_h * self.grid_w


def generate_latents(cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    """Random-walk latents: ``X^0 = X_base``, ``X^t = X^{t-1} + eps * eta_t`` with unit-Frobenius ``eta_t``.

    ``X_base`` is a shared canonical row scaled by ``canonical_scale`` plus
    unit Gaussian per-token content.
    """
    N, d = cfg.tokens_per_frame, cfg.latent_dim
    shared = rng.standard_normal(d)
    base = cfg.canonical_scale * shared + rng.standard_normal((N, d))
    X = np.empty((cfg.num_frames, N, d))
    X[0] = base
    for t in range(1, cfg.num_frames):
        eta = rng.standard_normal((N, d))
        X[t] = X[t - 1] + cfg.drift_eps * eta / np.linalg.norm(eta)
    return X


def generate_synthetic_trace(cfg: GenConfig) -> Trace:
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    H, D, d = cfg.num_heads, cfg.head_dim, cfg.latent_dim
    W = rng.standard_normal((3, H * D, d)) / math.sqrt(d)
    X = generate_latents(cfg, rng)
    F, N = cfg.num_frames, cfg.tokens_per_frame

    def heads(M: np.ndarray) -> np.ndarray:
        return (X @ M.T).reshape(F, N, H, D).transpose(0, 2, 1, 3).astype(_F32)

    flags = (HAS_LATENTS if cfg.with_latents else 0) | (HAS_PROJECTIONS if cfg.with_projections else 0)
    header = TraceHeader(F, N, H, D, cfg.grid_h, cfg.grid_w, flags, d if flags else 0, cfg.seed & (2**64 - 1))
    return Trace(
        header,
        heads(W[0]), heads(W[1]), heads(W[2]),
        X.astype(_F32) if cfg.with_latents else None,
        W.astype(_F32) if cfg.with_projections else None,
    )
