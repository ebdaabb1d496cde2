"""Causal attention kernels: reference, quantized, corrected and blocked.

Reference paths run in float64.  The blocked decode path deliberately
accumulates in float32 to mimic kernel arithmetic; its result is compared
against the 64-bit dequantize-everything oracle in tests.

Corrected attention adds the adapter term f(q, k_err) to each unnormalized
weight and the summed corrections to the normalizer:

    Y_n = (sum_i exp(s_ni) v_i + phi_q(q_n) S_n) /
          (sum_i exp(s_ni)     + phi_q(q_n) P_n)

where S_n, P_n accumulate phi_k(k_err_i)^T v_i and phi_k(k_err_i) over the
quantized prefix.  The quadratic form evaluates every pair explicitly; the
recurrent form maintains (S, P) and is what the cache stores.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapter import CorrectionAdapter, phi_k, phi_q
from .hadamard import hadamard_matrix, rotate
from .linalg import Matrix, softmax_rows
from .quantize import QuantConfig, quantize_tensor

_NEG_INF = float("-inf")


@dataclass
class OpCounter:
    """Counts multiply-accumulates spent on correction terms."""

    macs: int = 0

    def add(self, n: int):
        self.macs += int(n)


@dataclass
class DecodePartial:
    """Per-block partial results of one blocked decode step."""

    y_partial: np.ndarray   # (blocks, d) float32, in the stored value basis
    block_max: np.ndarray   # (blocks,)
    block_sum: np.ndarray   # (blocks,)


def _causal_logits(q_mat: Matrix, k_mat: Matrix) -> Matrix:
    n, d = q_mat.shape
    logits = q_mat @ k_mat.T / np.sqrt(d)
    return np.where(np.arange(n)[np.newaxis, :] <= np.arange(n)[:, np.newaxis],
                    logits, _NEG_INF)


def attention_reference(q_mat: Matrix, k_mat: Matrix, v_mat: Matrix):
    """Full-precision causal attention; returns (weights, outputs)."""
    q_mat = np.asarray(q_mat, dtype=np.float64)
    k_mat = np.asarray(k_mat, dtype=np.float64)
    v_mat = np.asarray(v_mat, dtype=np.float64)
    if q_mat.shape != k_mat.shape or k_mat.shape != v_mat.shape:
        raise ValueError(f"Q/K/V shapes differ: {q_mat.shape} {k_mat.shape} {v_mat.shape}")
    a = softmax_rows(_causal_logits(q_mat, k_mat))
    return a, a @ v_mat


def quantize_roundtrip(x: Matrix, cfg: QuantConfig) -> Matrix:
    """Rotate per config, quantize, dequantize, rotate back.

    The result lives in the original basis, i.e. it is the matrix attention
    actually sees after storage.  bits=16 skips quantization entirely.
    """
    x = np.asarray(x, dtype=np.float64)
    if cfg.rotation == "pre":
        h = hadamard_matrix(x.shape[0])
        xr = rotate(x, h, "pre")
    elif cfg.rotation == "post":
        h = hadamard_matrix(x.shape[1])
        xr = rotate(x, h, "post")
    else:
        h, xr = None, x
    xq = xr if cfg.is_passthrough else quantize_tensor(xr, cfg).dequantize()
    if cfg.rotation == "pre":
        return h.matrix.T @ xq
    if cfg.rotation == "post":
        return xq @ h.matrix.T
    return xq


def attention_with_config(q_mat: Matrix, k_mat: Matrix, v_mat: Matrix,
                          cfg_k: QuantConfig, cfg_v: QuantConfig):
    """Causal attention over quantize-roundtripped keys and values."""
    k_hat = quantize_roundtrip(k_mat, cfg_k)
    v_hat = quantize_roundtrip(v_mat, cfg_v)
    return attention_reference(q_mat, k_hat, v_hat)


def corrected_attention_quadratic(q_mat: Matrix, k_quant: Matrix, k_err: Matrix,
                                  v_quant: Matrix, adapter: CorrectionAdapter | None,
                                  counter: OpCounter | None = None):
    """Corrected causal attention with every f(q_n, k_err_i) evaluated explicitly."""
    q_mat = np.asarray(q_mat, dtype=np.float64)
    k_quant = np.asarray(k_quant, dtype=np.float64)
    v_quant = np.asarray(v_quant, dtype=np.float64)
    n = q_mat.shape[0]
    mask = np.arange(n)[np.newaxis, :] <= np.arange(n)[:, np.newaxis]
    e = np.exp(np.where(mask, _causal_logits(q_mat, k_quant), _NEG_INF))
    if adapter is not None and adapter.enabled:
        k_err = np.asarray(k_err, dtype=np.float64)
        f = (phi_q(adapter, q_mat) @ phi_k(adapter, k_err).T) * mask
        if counter is not None:
            counter.add(mask.sum() * adapter.rank)
        e = e + f
    num = e @ v_quant
    den = e.sum(axis=1, keepdims=True)
    return num / den


def corrected_attention_recurrent(q_mat: Matrix, k_quant: Matrix, k_err: Matrix,
                                  v_quant: Matrix, adapter: CorrectionAdapter | None,
                                  counter: OpCounter | None = None):
    """Same outputs as the quadratic form, but corrections come from running

    states: after token n arrives, S += v_n^T-weighted key features and
    P += key features, so each query touches the states once instead of the
    whole prefix.  Correction cost is linear in sequence length.
    """
    q_mat = np.asarray(q_mat, dtype=np.float64)
    k_quant = np.asarray(k_quant, dtype=np.float64)
    v_quant = np.asarray(v_quant, dtype=np.float64)
    n, d = q_mat.shape
    use_adapter = adapter is not None and adapter.enabled
    rank = adapter.rank if use_adapter else 0
    s_state = np.zeros((d, rank))
    p_state = np.zeros(rank)
    inv_sqrt_d = 1.0 / np.sqrt(d)
    out = np.empty_like(q_mat)
    for t in range(n):
        if use_adapter:
            feat = phi_k(adapter, k_err[t])
            s_state += np.outer(v_quant[t], feat)
            p_state += feat
        e = np.exp(k_quant[: t + 1] @ q_mat[t] * inv_sqrt_d)
        num = e @ v_quant[: t + 1]
        den = e.sum()
        if use_adapter:
            fq = phi_q(adapter, q_mat[t])
            num = num + s_state @ fq
            den = den + p_state @ fq
            if counter is not None:
                # phi_k + state update + phi_q + two state contractions
                counter.add(4 * d * rank + 2 * rank)
        out[t] = num / den
    return out


def _reduce_blocks(quant_y, quant_m, quant_l, raw_y, raw_m, raw_l,
                   corr_num, corr_den, literal: bool):
    """Max-shifted reduction across blocks with correction folding.

    Quantized-block and residual-block partial sums are kept separate
    because they may live in different value bases; both share one max M.
    The literal mode adds the corrections without undoing the max shift
    (the arithmetic a shift-unaware kernel would produce); the default
    rescales so the result matches the unshifted corrected form.  When M is
    very negative the rescale factor exp(-M) would overflow, so the block
    side is scaled by exp(M) instead; its underflow to zero leaves the
    corrections, which dominate the true result there anyway.
    """
    d = corr_num.shape[0]
    all_m = np.asarray(quant_m + raw_m, dtype=np.float32)
    big_m = np.float32(all_m.max())
    w = np.exp(all_m - big_m)
    w_q, w_r = w[: len(quant_m)], w[len(quant_m):]

    num_q = np.zeros(d, dtype=np.float32)
    for wj, yj in zip(w_q, quant_y):
        num_q += wj * yj
    num_r = np.zeros(d, dtype=np.float32)
    for wj, yj in zip(w_r, raw_y):
        num_r += wj * yj
    den = np.float32(np.sum(w_q * np.asarray(quant_l, dtype=np.float32)) +
                     np.sum(w_r * np.asarray(raw_l, dtype=np.float32)))

    if corr_den == 0.0 and not np.any(corr_num):
        return num_q, num_r, den
    if literal:
        return num_q + corr_num, num_r, den + corr_den
    if big_m >= 0:
        s = np.exp(np.float32(-big_m))
        return num_q + s * corr_num, num_r, den + s * corr_den
    s = np.exp(big_m)
    return s * num_q + corr_num, s * num_r, np.float32(s * den) + corr_den


def decode_step_blocked(q, cache, adapter: CorrectionAdapter | None = None,
                        block_tokens: int | None = None,
                        literal_correction: bool = False,
                        return_partials: bool = False):
    """One decode step over a streamed cache, block by block.

    Quantized history is processed in blocks of ``block_tokens`` (default:
    the cache group size): dequantize, score, max-shift, partial-sum.  The
    residual window forms one extra full-precision block that never receives
    corrections.  Blocks reduce in ascending order with a shared max.  All
    block arithmetic is float32.

    When values are stored rotated, quantized-block partials live in the
    rotated basis and the residual partial in the raw basis; the rotated
    numerator is rotated back once at the end, which is equivalent and keeps
    the per-step cost at one d x d product.
    """
    q = np.asarray(q, dtype=np.float64)
    d = cache.head_dim
    if q.shape != (d,):
        raise ValueError(f"query shape {q.shape} != head dim ({d},)")
    if cache.tokens_total == 0:
        raise ValueError("cannot decode against an empty cache")
    block = cache.group_size if block_tokens is None else block_tokens
    if block < 1:
        raise ValueError(f"block_tokens must be >= 1, got {block}")

    use_adapter = adapter is not None and adapter.enabled and cache.s_state is not None
    if use_adapter:
        fq = phi_q(adapter, q)
        corr_num = (cache.s_state @ fq).astype(np.float32)
        corr_den = np.float32(cache.p_state @ fq)
    else:
        corr_num = np.zeros(d, dtype=np.float32)
        corr_den = np.float32(0.0)

    q32 = q.astype(np.float32)
    inv_sqrt_d = np.float32(1.0 / np.sqrt(d))
    n_q = cache.quantized_tokens

    rot_y, rot_m, rot_l = [], [], []
    for lo in range(0, n_q, block):
        hi = min(lo + block, n_q)
        k_blk = cache.dequantized_keys(lo, hi).astype(np.float32)
        v_blk = cache.dequantized_values(lo, hi).astype(np.float32)
        s = k_blk @ q32 * inv_sqrt_d
        m = np.float32(s.max())
        e = np.exp(s - m)
        rot_y.append(e @ v_blk)
        rot_m.append(m)
        rot_l.append(np.float32(e.sum()))

    raw_y, raw_m, raw_l = [], [], []
    if cache.residual_len:
        k_res = cache.residual_keys().astype(np.float32)
        v_res = cache.residual_values().astype(np.float32)
        s = k_res @ q32 * inv_sqrt_d
        m = np.float32(s.max())
        e = np.exp(s - m)
        raw_y.append(e @ v_res)
        raw_m.append(m)
        raw_l.append(np.float32(e.sum()))

    num_q, num_r, den = _reduce_blocks(rot_y, rot_m, rot_l, raw_y, raw_m, raw_l,
                                       corr_num, corr_den, literal_correction)
    if cache.values_rotated:
        h32 = hadamard_matrix(d).matrix.astype(np.float32)
        num = num_q @ h32.T + num_r
    else:
        num = num_q + num_r
    out = num / den

    if return_partials:
        partials = DecodePartial(
            y_partial=np.asarray(rot_y + raw_y, dtype=np.float32),
            block_max=np.asarray(rot_m + raw_m, dtype=np.float32),
            block_sum=np.asarray(rot_l + raw_l, dtype=np.float32),
        )
        return out.astype(np.float64), partials
    return out.astype(np.float64)
