"""Attention activation traces: generation and binary round trip.

File layout (little-endian): magic "KVTR", then u32 fields version, layers,
heads, seq_len, head_dim, then for each (layer, head) in row-major order the
Q, K and V matrices as float32 row-major blocks.  Total size is
24 + layers * heads * 3 * seq_len * head_dim * 4 bytes.

Synthetic traces model the activation shapes the quantizer cares about: keys
are standard normal with a few channels scaled up uniformly across tokens
(channel-aligned outliers, optionally with a persistent per-channel mean),
queries are standard normal, and values are standard normal with optional
sparse per-entry spikes (outliers that are not channel-aligned, the structure
a post-rotation spreads out).  An optional sink overlay adds the
one-dominant-key geometry correction adapters are trained against.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .linalg import rng

TRACE_MAGIC = b"KVTR"
TRACE_VERSION = 1

_HEADER = struct.Struct("<4s5I")
HEADER_BYTES = _HEADER.size  # 24


class TraceFormatError(ValueError):
    pass


@dataclass
class AttentionTrace:
    """Raw per-head activations, each array (layers, heads, seq_len, head_dim)."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if not (self.q.shape == self.k.shape == self.v.shape) or self.q.ndim != 4:
            raise ValueError(f"Q/K/V must share a 4-D shape, got "
                             f"{self.q.shape} {self.k.shape} {self.v.shape}")

    @property
    def layers(self) -> int:
        return self.q.shape[0]

    @property
    def heads(self) -> int:
        return self.q.shape[1]

    @property
    def seq_len(self) -> int:
        return self.q.shape[2]

    @property
    def head_dim(self) -> int:
        return self.q.shape[3]

    def head(self, layer: int, head: int):
        """(Q, K, V) for one head as float64 matrices."""
        sel = (layer, head)
        return (self.q[sel].astype(np.float64), self.k[sel].astype(np.float64),
                self.v[sel].astype(np.float64))


def generate_synthetic_trace(*, layers: int = 1, heads: int = 1, seq_len: int = 256,
                             head_dim: int = 64, outlier_channels: int = 0,
                             outlier_gain: float = 1.0,
                             outlier_bias: float = 0.0,
                             value_spike_prob: float = 0.0,
                             value_spike_gain: float = 1.0,
                             value_channel_bias: float = 0.0,
                             sink_strength: float = 0.0,
                             sink_channels: int = 4,
                             register_gain: float = 200.0,
                             register_period: int = 128,
                             seed: int = 0) -> AttentionTrace:
    """Deterministic synthetic trace for a given seed.

    Each head draws its own outlier channel set.  Draw order is fixed (K,
    channel choice, Q, V, spike mask, sink blocks) so outputs are
    reproducible bytes.

    ``sink_strength`` > 0 overlays attention-sink structure: token 0 becomes
    a sink key every query favours, one huge register key opens each
    ``register_period`` chunk, and queries carry fixed biases on reserved
    channel blocks.  The register stretches the sink's channels so coarse
    group quantization flattens the sink key into the background, the kind
    of damage a trained correction has to undo.  Zero strength leaves the
    base distribution untouched.
    """
    if min(layers, heads, seq_len, head_dim) < 1:
        raise ValueError("layers, heads, seq_len and head_dim must be >= 1")
    if not 0 <= outlier_channels <= head_dim:
        raise ValueError(f"outlier_channels must be in [0, {head_dim}], "
                         f"got {outlier_channels}")
    if not 0.0 <= value_spike_prob <= 1.0:
        raise ValueError(f"value_spike_prob must be in [0, 1], got {value_spike_prob}")
    if sink_strength < 0.0:
        raise ValueError(f"sink_strength must be >= 0, got {sink_strength}")
    if sink_strength > 0.0:
        if sink_channels < 1 or 4 * sink_channels > head_dim:
            raise ValueError(f"sink mode needs 1 <= sink_channels <= head_dim/4, "
                             f"got {sink_channels} for head_dim {head_dim}")
        if register_period < 2:
            raise ValueError(f"register_period must be >= 2, got {register_period}")
        if register_gain <= 0.0:
            raise ValueError(f"register_gain must be > 0, got {register_gain}")
    g = rng(seed)
    shape = (layers, heads, seq_len, head_dim)
    k = g.standard_normal(shape, dtype=np.float32)
    if outlier_channels:
        for li in range(layers):
            for hi in range(heads):
                chans = g.choice(head_dim, size=outlier_channels, replace=False)
                if outlier_bias != 0.0:
                    # persistent two-level channels: magnitude ~gain with a
                    # per-token sign, a per-channel offset (bias, in gain
                    # units) whose sign flips at the sequence midpoint, and
                    # small jitter.  The bounded span is what channel grouping
                    # absorbs; any rotation smears it into heavier-tailed
                    # mixtures, and the mid-sequence flip keeps the offset
                    # out of the one rotated component a softmax would forgive.
                    flips = (g.integers(0, 2, size=(seq_len, outlier_channels))
                             * 2 - 1).astype(np.float32)
                    offs = (g.integers(0, 2, size=outlier_channels)
                            * 2 - 1).astype(np.float32)
                    half = np.ones(seq_len, dtype=np.float32)
                    half[seq_len // 2:] = -1.0
                    jitter = np.float32(0.15) * k[li, hi][:, chans]
                    k[li, hi][:, chans] = np.float32(outlier_gain) * \
                        (flips + np.float32(outlier_bias) * offs * half[:, None]
                         + jitter)
                else:
                    k[li, hi][:, chans] *= np.float32(outlier_gain)
    q = g.standard_normal(shape, dtype=np.float32)
    v = g.standard_normal(shape, dtype=np.float32)
    if value_spike_prob > 0.0:
        spikes = g.random(shape, dtype=np.float32) < value_spike_prob
        v[spikes] *= np.float32(value_spike_gain)
    if value_channel_bias != 0.0:
        # persistent per-channel value means, spread by a post-rotation but
        # concentrated into one huge coefficient by a pre-rotation
        for li in range(layers):
            for hi in range(heads):
                mu = g.standard_normal(head_dim).astype(np.float32)
                v[li, hi] += np.float32(value_channel_bias) * mu
    if sink_strength > 0.0:
        for li in range(layers):
            for hi in range(heads):
                _overlay_sink(q[li, hi], k[li, hi], g, sink_strength,
                              sink_channels, register_gain, register_period)
    return AttentionTrace(q=q, k=k, v=v)


def _overlay_sink(q: np.ndarray, k: np.ndarray, g, strength: float,
                  n_sink: int, register_gain: float, period: int):
    """Add sink/register structure to one head in place.

    Reserved blocks: ``pos`` holds the sink key's large component and the
    register spike, ``neg`` holds a second register spike that queries weigh
    negatively (keeps the register's own logit strongly negative), and
    ``bias`` pairs a fixed positive query weight with a negative key shift so
    every ordinary token scores far below the sink.  The sink's pos-block
    component is sized so its full-precision logit lands near +1 after the
    bias suppression, while the register spike forces the coarse grid to
    flatten that component away.
    """
    seq_len, d = k.shape
    root_d = np.float32(np.sqrt(d))
    strength = np.float32(strength)
    beta = np.float32(0.5) * strength        # query weight on pos/neg blocks
    mu = np.float32(2.0) * strength          # query weight on the bias block
    lam = np.float32(3.0) * strength         # key shift on the bias block
    perm = g.permutation(d)
    pos = perm[:n_sink]
    neg = perm[n_sink:2 * n_sink]
    bias = perm[2 * n_sink:4 * n_sink]
    registers = np.arange(1, seq_len, period)

    k[:, bias] -= lam
    # sink logit = beta*gamma*n_sink/sqrt(d) - mu*lam*2*n_sink/sqrt(d) = +1
    gamma = (np.float32(1.0) + mu * lam * np.float32(2 * n_sink) / root_d) \
        * root_d / (beta * np.float32(n_sink))
    k[0, pos] += gamma
    k[np.ix_(registers, pos)] = np.float32(register_gain)
    k[np.ix_(registers, neg)] = np.float32(1.25 * register_gain)

    q[:, pos] = beta
    q[:, neg] = -beta
    q[:, bias] = mu


def serialize_trace(trace: AttentionTrace) -> bytes:
    out = [_HEADER.pack(TRACE_MAGIC, TRACE_VERSION, trace.layers, trace.heads,
                        trace.seq_len, trace.head_dim)]
    for li in range(trace.layers):
        for hi in range(trace.heads):
            for arr in (trace.q, trace.k, trace.v):
                out.append(np.ascontiguousarray(arr[li, hi], dtype="<f4").tobytes())
    return b"".join(out)


def deserialize_trace(data: bytes) -> AttentionTrace:
    if len(data) < HEADER_BYTES:
        raise TraceFormatError(f"file too short for header: {len(data)} bytes")
    magic, version, layers, heads, seq_len, head_dim = _HEADER.unpack_from(data)
    if magic != TRACE_MAGIC:
        raise TraceFormatError(f"bad magic at byte 0: {magic!r}")
    if version != TRACE_VERSION:
        raise TraceFormatError(f"unsupported version {version} at byte 4")
    if min(layers, heads, seq_len, head_dim) < 1:
        raise TraceFormatError("header declares an empty trace")
    expect = layers * heads * 3 * seq_len * head_dim * 4
    if len(data) - HEADER_BYTES != expect:
        raise TraceFormatError(f"payload size mismatch at byte {HEADER_BYTES}: "
                               f"expected {expect} bytes, found {len(data) - HEADER_BYTES}")
    flat = np.frombuffer(data, dtype="<f4", offset=HEADER_BYTES)
    blocks = flat.reshape(layers, heads, 3, seq_len, head_dim)
    return AttentionTrace(q=np.ascontiguousarray(blocks[:, :, 0]),
                          k=np.ascontiguousarray(blocks[:, :, 1]),
                          v=np.ascontiguousarray(blocks[:, :, 2]))


def write_trace(trace: AttentionTrace, path):
    with open(path, "wb") as fh:
        fh.write(serialize_trace(trace))


def read_trace(path) -> AttentionTrace:
    with open(path, "rb") as fh:
        return deserialize_trace(fh.read())
