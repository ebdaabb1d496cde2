"""Streaming quantized KV cache with a full-precision residual window.

Appended tokens land in the residual window.  When the window holds
residual_window + group_size tokens, the oldest group_size tokens flush:

  * keys quantize channel-wise, one group spanning the chunk's tokens per
    channel (raw keys, no rotation),
  * values quantize token-wise, optionally after a Hadamard post-rotation
    (they are then stored rotated; consumers rotate the attention output
    back),
  * when an adapter is attached, the correction states accumulate
    S += v_q^T outer phi_k(k_err) and P += phi_k(k_err), token by token in
    append order, using the dequantized stored values.

So the most recent residual_window tokens are always full precision, flush
boundaries depend only on the prefix, and replaying an append sequence
reproduces the packed bytes exactly.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .adapter import CorrectionAdapter, phi_k
from .hadamard import hadamard_matrix, rotate
from .linalg import Matrix
from .quantize import QuantConfig, QuantizedTensor, quantize_tensor

CACHE_MAGIC = b"KVLC"
CACHE_VERSION = 1


@dataclass
class FootprintReport:
    """Serialized byte counts by component (header excluded)."""

    packed_codes: int
    scales_zeros: int
    residual: int
    correction_states: int

    @property
    def total(self) -> int:
        return self.packed_codes + self.scales_zeros + self.residual + self.correction_states


class KVCacheState:
    """Per-head cache: packed history chunks, residual window, adapter states."""

    def __init__(self, head_dim: int, *, bits: int = 2, group_size: int = 128,
                 residual_window: int = 128, rotate_values: bool = True):
        if head_dim < 1:
            raise ValueError(f"head_dim must be >= 1, got {head_dim}")
        if group_size < 1:
            raise ValueError(f"group_size must be >= 1, got {group_size}")
        if residual_window < 0:
            raise ValueError(f"residual_window must be >= 0, got {residual_window}")
        if rotate_values:
            hadamard_matrix(head_dim)  # fails early on non-power-of-two dims
        self.head_dim = head_dim
        self.group_size = group_size
        self.residual_window = residual_window
        self.config_k = QuantConfig(bits=bits, group_size=group_size, axis="channel")
        self.config_v = QuantConfig(bits=bits, group_size=group_size, axis="token",
                                    rotation="post" if rotate_values else "none")
        self.key_chunks: list[QuantizedTensor] = []
        self.value_rows: QuantizedTensor | None = None
        self._residual_k: list[np.ndarray] = []
        self._residual_v: list[np.ndarray] = []
        self.s_state: Matrix | None = None
        self.p_state: np.ndarray | None = None
        self.adapter_rank = 0
        self.tokens_total = 0

    # -- views ------------------------------------------------------------

    @property
    def values_rotated(self) -> bool:
        return self.config_v.rotation == "post"

    @property
    def quantized_tokens(self) -> int:
        return self.group_size * len(self.key_chunks)

    @property
    def residual_len(self) -> int:
        return len(self._residual_k)

    def residual_keys(self) -> Matrix:
        return np.asarray(self._residual_k, dtype=np.float64).reshape(-1, self.head_dim)

    def residual_values(self) -> Matrix:
        return np.asarray(self._residual_v, dtype=np.float64).reshape(-1, self.head_dim)

    def dequantized_keys(self, lo: int, hi: int) -> Matrix:
        """Dequantized key rows [lo, hi) of the quantized history."""
        self._check_range(lo, hi)
        g = self.group_size
        parts = []
        for ci in range(lo // g, (hi - 1) // g + 1):
            rows = self.key_chunks[ci].dequantize()
            parts.append(rows[max(lo - ci * g, 0): hi - ci * g])
        return np.concatenate(parts, axis=0)

    def dequantized_values(self, lo: int, hi: int) -> Matrix:
        """Dequantized value rows [lo, hi), in the stored (possibly rotated) basis."""
        self._check_range(lo, hi)
        full = self.value_rows.dequantize()
        return full[lo:hi]

    def _check_range(self, lo: int, hi: int):
        if not (0 <= lo < hi <= self.quantized_tokens):
            raise ValueError(f"token range [{lo}, {hi}) outside quantized "
                             f"history of {self.quantized_tokens}")

    # -- streaming --------------------------------------------------------

    def append(self, k_t, v_t, adapter: CorrectionAdapter | None = None):
        """Admit one token; flushes the oldest group when the window fills."""
        k_t = np.asarray(k_t, dtype=np.float64).reshape(-1)
        v_t = np.asarray(v_t, dtype=np.float64).reshape(-1)
        if k_t.shape != (self.head_dim,) or v_t.shape != (self.head_dim,):
            raise ValueError(f"token dims {k_t.shape}/{v_t.shape} != ({self.head_dim},)")
        self._residual_k.append(k_t)
        self._residual_v.append(v_t)
        self.tokens_total += 1
        if self.residual_len == self.residual_window + self.group_size:
            self.flush_group(adapter)

    def flush_group(self, adapter: CorrectionAdapter | None = None):
        """Quantize the oldest group_size residual tokens into the history."""
        g = self.group_size
        if self.residual_len < g:
            raise ValueError(f"need {g} residual tokens to flush, have {self.residual_len}")
        k_blk = np.asarray(self._residual_k[:g])
        v_blk = np.asarray(self._residual_v[:g])
        del self._residual_k[:g], self._residual_v[:g]

        chunk = quantize_tensor(k_blk, self.config_k)
        self.key_chunks.append(chunk)
        v_store = (rotate(v_blk, hadamard_matrix(self.head_dim), "post")
                   if self.values_rotated else v_blk)
        vq = quantize_tensor(v_store, self.config_v)
        self.value_rows = vq if self.value_rows is None else _concat_token_rows(
            self.value_rows, vq)

        if adapter is not None and adapter.enabled:
            if adapter.head_dim != self.head_dim:
                raise ValueError(f"adapter dim {adapter.head_dim} != cache dim {self.head_dim}")
            self._ensure_states(adapter.rank)
            k_err = k_blk - chunk.dequantize()
            v_q = vq.dequantize()
            for i in range(g):
                feat = phi_k(adapter, k_err[i])
                self.s_state += np.outer(v_q[i], feat)
                self.p_state += feat

    def _ensure_states(self, rank: int):
        if self.s_state is None:
            self.adapter_rank = rank
            self.s_state = np.zeros((self.head_dim, rank))
            self.p_state = np.zeros(rank)
        elif self.adapter_rank != rank:
            raise ValueError(f"adapter rank {rank} != cache state rank {self.adapter_rank}")


def _concat_token_rows(a: QuantizedTensor, b: QuantizedTensor) -> QuantizedTensor:
    # Token-axis rows pack independently, so concatenation is row stacking.
    return QuantizedTensor(
        codes=np.concatenate([a.codes, b.codes], axis=0),
        scales=np.concatenate([a.scales, b.scales], axis=0),
        zeros=np.concatenate([a.zeros, b.zeros], axis=0),
        rows=a.rows + b.rows, cols=a.cols, config=a.config)


def memory_footprint(cache: KVCacheState) -> FootprintReport:
    """Exact serialized byte counts: packed codes, 16-bit scales/zeros,
    16-bit residual window, 16-bit correction states."""
    code_bytes = 4 * sum(c.codes.size for c in cache.key_chunks)
    group_count = sum(c.scales.size for c in cache.key_chunks)
    if cache.value_rows is not None:
        code_bytes += 4 * cache.value_rows.codes.size
        group_count += cache.value_rows.scales.size
    states = 0
    if cache.s_state is not None:
        states = 2 * (cache.s_state.size + cache.p_state.size)
    return FootprintReport(
        packed_codes=code_bytes,
        scales_zeros=2 * 2 * group_count,
        residual=2 * 2 * cache.residual_len * cache.head_dim,
        correction_states=states,
    )


# -- serialization ---------------------------------------------------------
#
# Little-endian layout: magic "KVLC", then u32 fields (version, head_dim,
# adapter_rank, group_size, residual_window, bits, values_rotated,
# quantized_tokens, residual_len), then key chunk codes (u32) and value
# codes (u32), key scales/zeros and value scales/zeros (f16), residual keys
# then values (f16), s_state then p_state (f16).  The 16-bit fields make the
# on-disk form lossy by design; in-memory state stays 64-bit.

_HEADER = struct.Struct("<4s9I")


def serialize_cache(cache: KVCacheState) -> bytes:
    out = [_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, cache.head_dim,
                        cache.adapter_rank, cache.group_size,
                        cache.residual_window, cache.config_k.bits,
                        int(cache.values_rotated), cache.quantized_tokens,
                        cache.residual_len)]
    for chunk in cache.key_chunks:
        out.append(chunk.codes.astype("<u4").tobytes())
    if cache.value_rows is not None:
        out.append(cache.value_rows.codes.astype("<u4").tobytes())
    for chunk in cache.key_chunks:
        out.append(chunk.scales.astype("<f2").tobytes())
        out.append(chunk.zeros.astype("<f2").tobytes())
    if cache.value_rows is not None:
        out.append(cache.value_rows.scales.astype("<f2").tobytes())
        out.append(cache.value_rows.zeros.astype("<f2").tobytes())
    out.append(cache.residual_keys().astype("<f2").tobytes())
    out.append(cache.residual_values().astype("<f2").tobytes())
    if cache.s_state is not None:
        out.append(cache.s_state.astype("<f2").tobytes())
        out.append(cache.p_state.astype("<f2").tobytes())
    return b"".join(out)


class CacheFormatError(ValueError):
    pass


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int, dtype, shape):
        end = self.off + n
        if end > len(self.data):
            raise CacheFormatError(f"truncated cache file at byte {self.off}: "
                                   f"need {n} more bytes")
        arr = np.frombuffer(self.data[self.off:end], dtype=dtype).reshape(shape)
        self.off = end
        return arr


def deserialize_cache(data: bytes) -> KVCacheState:
    if data[:4] != CACHE_MAGIC:
        raise CacheFormatError(f"bad magic at byte 0: {data[:4]!r}")
    (_, version, d, rank, g, r, bits, rotated, n_q, n_res) = _HEADER.unpack_from(data)
    if version != CACHE_VERSION:
        raise CacheFormatError(f"unsupported cache version {version} at byte 4")
    cache = KVCacheState(d, bits=bits, group_size=g, residual_window=r,
                         rotate_values=bool(rotated))
    rd = _Reader(data)
    rd.off = _HEADER.size

    lanes = 32 // {2: 2, 3: 4, 4: 4, 8: 8}[bits]
    kw = -(-g // lanes)          # words per key-chunk column
    vw = -(-d // lanes)          # words per value row
    kg = -(-g // g)              # key groups per channel (1)
    vg = -(-d // g)              # value groups per row
    chunks = n_q // g
    code_shapes = [(kw, d)] * chunks
    key_codes = [rd.take(kw * d * 4, "<u4", s).astype(np.uint32) for s in code_shapes]
    v_codes = rd.take(chunks * g * vw * 4, "<u4", (chunks * g, vw)).astype(np.uint32) \
        if chunks else None
    key_meta = []
    for _ in range(chunks):
        scales = rd.take(kg * d * 2, "<f2", (kg, d)).astype(np.float64)
        zeros = rd.take(kg * d * 2, "<f2", (kg, d)).astype(np.float64)
        key_meta.append((scales, zeros))
    if chunks:
        v_scales = rd.take(chunks * g * vg * 2, "<f2", (chunks * g, vg)).astype(np.float64)
        v_zeros = rd.take(chunks * g * vg * 2, "<f2", (chunks * g, vg)).astype(np.float64)
        cache.value_rows = QuantizedTensor(v_codes, v_scales, v_zeros,
                                           chunks * g, d, cache.config_v)
    for codes, (scales, zeros) in zip(key_codes, key_meta):
        cache.key_chunks.append(QuantizedTensor(codes, scales, zeros, g, d,
                                                cache.config_k))
    res_k = rd.take(n_res * d * 2, "<f2", (n_res, d)).astype(np.float64)
    res_v = rd.take(n_res * d * 2, "<f2", (n_res, d)).astype(np.float64)
    cache._residual_k = list(res_k)
    cache._residual_v = list(res_v)
    if rank:
        cache.adapter_rank = rank
        cache.s_state = rd.take(d * rank * 2, "<f2", (d, rank)).astype(np.float64)
        cache.p_state = rd.take(rank * 2, "<f2", (rank,)).astype(np.float64)
    if rd.off != len(data):
        raise CacheFormatError(f"trailing bytes at byte {rd.off}")
    cache.tokens_total = n_q + n_res
    return cache


def write_cache(cache: KVCacheState, path):
    with open(path, "wb") as fh:
        fh.write(serialize_cache(cache))


def read_cache(path) -> KVCacheState:
    with open(path, "rb") as fh:
        return deserialize_cache(fh.read())
