"""Asymmetric group-wise integer quantization with bit-packed storage.

A group of G consecutive entries shares one (scale, zero) pair:

    zero  = min(group)
    scale = (max(group) - min(group)) / (2^bits - 1)
    code  = round((value - zero) / scale)      # round half to even
    value ~ scale * code + zero

Grouping runs along one of two axes of a matrix:

  * ``token``:   groups of G consecutive entries within each row,
  * ``channel``: groups of G consecutive entries within each column.

Codes are packed into little-endian lanes of 32-bit words along the grouped
axis, so a token-axis tensor stores ceil(cols/lanes) words per row and a
channel-axis tensor stores ceil(rows/lanes) words per column.  Code i of a
word occupies bits [bits*i, bits*(i+1)); trailing lanes of a final partial
word are zero.  Example at 2 bits: codes [3, 2, 1, 0] pack to 0x0000001B.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import Matrix

AXES = ("channel", "token")
ROTATIONS = ("none", "pre", "post")
# 16 is accepted as an explicit full-precision passthrough for pipeline code
# (no QuantizedTensor is ever built at 16 bits).
QUANT_BITS = (2, 3, 4, 8)

# Lane width used when packing; 3-bit codes ride in 4-bit lanes because 32 is
# not divisible by 3.
_LANE_BITS = {2: 2, 3: 4, 4: 4, 8: 8}


@dataclass(frozen=True)
class QuantConfig:
    """How one tensor is grouped, rotated and quantized."""

    bits: int = 2
    group_size: int = 128
    axis: str = "token"
    rotation: str = "none"

    def __post_init__(self):
        if self.bits not in QUANT_BITS + (16,):
            raise ValueError(f"bits must be one of {QUANT_BITS + (16,)}, got {self.bits}")
        if self.group_size < 1:
            raise ValueError(f"group_size must be >= 1, got {self.group_size}")
        if self.axis not in AXES:
            raise ValueError(f"axis must be one of {AXES}, got {self.axis!r}")
        if self.rotation not in ROTATIONS:
            raise ValueError(f"rotation must be one of {ROTATIONS}, got {self.rotation!r}")

    @property
    def is_passthrough(self) -> bool:
        return self.bits == 16

    def label(self) -> str:
        return f"{self.axis}/{self.rotation}"


def _lane_count(bits: int) -> int:
    return 32 // _LANE_BITS[bits]


def pack_codes(codes, bits: int) -> np.ndarray:
    """Pack integer codes into little-endian lanes of uint32 words.

    Accepts a 1-D stream or a 2-D array (each row packs independently, so
    every row starts on a word boundary).  Trailing lanes of a partial final
    word are zero.
    """
    if bits not in _LANE_BITS:
        raise ValueError(f"cannot pack {bits}-bit codes, supported: {sorted(_LANE_BITS)}")
    codes = np.asarray(codes)
    if codes.ndim not in (1, 2):
        raise ValueError(f"codes must be 1-D or 2-D, got shape {codes.shape}")
    if codes.size and (codes.min() < 0 or codes.max() > (1 << bits) - 1):
        raise ValueError(f"codes out of range for {bits} bits")

    lane_bits = _LANE_BITS[bits]
    lanes = _lane_count(bits)
    rows, n = (1, codes.shape[0]) if codes.ndim == 1 else codes.shape
    words = -(-n // lanes) if n else 0
    padded = np.zeros((rows, words * lanes), dtype=np.uint32)
    padded[:, :n] = codes.reshape(rows, n)
    shifts = (np.arange(lanes, dtype=np.uint32) * lane_bits)[np.newaxis, np.newaxis, :]
    packed = np.bitwise_or.reduce(padded.reshape(rows, words, lanes) << shifts, axis=2)
    return packed[0] if codes.ndim == 1 else packed


def unpack_codes(words, count: int, bits: int) -> np.ndarray:
    """Inverse of pack_codes; ``count`` is the logical length along the last axis."""
    if bits not in _LANE_BITS:
        raise ValueError(f"cannot unpack {bits}-bit codes, supported: {sorted(_LANE_BITS)}")
    words = np.asarray(words, dtype=np.uint32)
    if words.ndim not in (1, 2):
        raise ValueError(f"words must be 1-D or 2-D, got shape {words.shape}")
    lane_bits = _LANE_BITS[bits]
    lanes = _lane_count(bits)
    one_d = words.ndim == 1
    w = words.reshape(1, -1) if one_d else words
    if count > w.shape[1] * lanes:
        raise ValueError(f"count {count} exceeds capacity of {w.shape[1]} words")
    shifts = (np.arange(lanes, dtype=np.uint32) * lane_bits)[np.newaxis, np.newaxis, :]
    mask = np.uint32((1 << bits) - 1)
    codes = ((w[:, :, np.newaxis] >> shifts) & mask).reshape(w.shape[0], -1)[:, :count]
    codes = codes.astype(np.uint8)
    return codes[0] if one_d else codes


def quantize_group(values, bits: int):
    """Quantize one 1-D group; returns (codes, scale, zero).

    A degenerate group (max == min) stores scale 0 and all-zero codes, which
    dequantizes exactly to the constant value.
    """
    if bits not in QUANT_BITS:
        raise ValueError(f"bits must be one of {QUANT_BITS}, got {bits}")
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"group must be a non-empty 1-D array, got shape {v.shape}")
    zero = float(v.min())
    spread = float(v.max()) - zero
    max_code = (1 << bits) - 1
    if spread == 0.0:
        return np.zeros(v.shape, dtype=np.uint8), 0.0, zero
    scale = spread / max_code
    codes = np.clip(np.rint((v - zero) / scale), 0, max_code).astype(np.uint8)
    return codes, scale, zero


def dequantize_group(codes, scale: float, zero: float) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0):
        raise ValueError("codes must be unsigned")
    if scale < 0:
        raise ValueError(f"scale must be >= 0, got {scale}")
    return scale * codes.astype(np.float64) + zero


def expected_quant_mse(scale: float) -> float:
    """Uniform-error model of round-to-nearest: MSE = scale^2 / 12."""
    if scale < 0:
        raise ValueError(f"scale must be >= 0, got {scale}")
    return scale * scale / 12.0


@dataclass
class QuantizedTensor:
    """Packed codes plus per-group metadata for one matrix.

    Shapes by axis (r rows, c cols, L = lanes per word):
      token:   codes (r, ceil(c/L)),  scales/zeros (r, ceil(c/G))
      channel: codes (ceil(r/L), c),  scales/zeros (ceil(r/G), c)
    """

    codes: np.ndarray
    scales: np.ndarray
    zeros: np.ndarray
    rows: int
    cols: int
    config: QuantConfig

    @property
    def group_count(self) -> int:
        return self.scales.size

    def dequantize(self) -> Matrix:
        cfg = self.config
        if cfg.axis == "token":
            return _dequantize_rows(self.codes, self.scales, self.zeros,
                                    self.rows, self.cols, cfg)
        return _dequantize_rows(self.codes.T, self.scales.T, self.zeros.T,
                                self.cols, self.rows, cfg).T


def _group_lengths(n: int, g: int) -> np.ndarray:
    full, rem = divmod(n, g)
    lengths = [g] * full + ([rem] if rem else [])
    return np.asarray(lengths, dtype=np.int64)


def _quantize_rows(x: np.ndarray, cfg: QuantConfig):
    """Group-quantize along rows; returns (packed codes, scales, zeros)."""
    rows, cols = x.shape
    g = cfg.group_size
    max_code = (1 << cfg.bits) - 1
    bounds = np.arange(0, cols + g, g)[: -(-cols // g) + 1]
    scales = np.empty((rows, len(bounds) - 1), dtype=np.float64)
    zeros = np.empty_like(scales)
    codes = np.empty((rows, cols), dtype=np.uint8)
    for gi in range(len(bounds) - 1):
        chunk = x[:, bounds[gi]:bounds[gi + 1]]
        mn = chunk.min(axis=1)
        mx = chunk.max(axis=1)
        scale = (mx - mn) / max_code
        zeros[:, gi] = mn
        scales[:, gi] = scale
        safe = np.where(scale > 0, scale, 1.0)
        q = np.clip(np.rint((chunk - mn[:, None]) / safe[:, None]), 0, max_code)
        q[scale == 0] = 0
        codes[:, bounds[gi]:bounds[gi + 1]] = q.astype(np.uint8)
    return pack_codes(codes, cfg.bits), scales, zeros


def _dequantize_rows(words, scales, zeros, rows: int, cols: int, cfg: QuantConfig) -> Matrix:
    codes = unpack_codes(np.ascontiguousarray(words), cols, cfg.bits).astype(np.float64)
    reps = _group_lengths(cols, cfg.group_size)
    s = np.repeat(np.ascontiguousarray(scales), reps, axis=1)
    z = np.repeat(np.ascontiguousarray(zeros), reps, axis=1)
    return codes * s + z


def quantize_tensor(x: Matrix, config: QuantConfig) -> QuantizedTensor:
    """Quantize a matrix group-wise along the configured axis.

    Any rotation is the caller's job; this operation never rotates.  Short
    final groups keep their own scale/zero.
    """
    if config.is_passthrough:
        raise ValueError("bits=16 is a passthrough config; nothing to quantize")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.size == 0:
        raise ValueError(f"expected a non-empty matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("matrix contains non-finite entries")
    if config.axis == "token":
        codes, scales, zeros = _quantize_rows(x, config)
    else:
        codes, scales, zeros = _quantize_rows(np.ascontiguousarray(x.T), config)
        codes, scales, zeros = codes.T, scales.T, zeros.T
    return QuantizedTensor(np.ascontiguousarray(codes), np.ascontiguousarray(scales),
                           np.ascontiguousarray(zeros), x.shape[0], x.shape[1], config)
