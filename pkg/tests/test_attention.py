"""Attention kernels: reference, quantized configs, corrected and blocked paths."""
import numpy as np
import pytest

from quantkv.adapter import CorrectionAdapter, phi_q
from quantkv.attention import (OpCounter, attention_reference, attention_with_config,
                               corrected_attention_quadratic,
                               corrected_attention_recurrent, decode_step_blocked,
                               quantize_roundtrip)
from quantkv.cache import KVCacheState
from quantkv.hadamard import hadamard_matrix
from quantkv.linalg import rng
from quantkv.quantize import QuantConfig, quantize_tensor


def causal_attention_oracle(q_mat, k_mat, v_mat):
    """Per-position loop with explicit max-shifted softmax."""
    n, d = q_mat.shape
    weights = np.zeros((n, n))
    out = np.zeros((n, d))
    for t in range(n):
        logits = np.array([q_mat[t] @ k_mat[i] / np.sqrt(d) for i in range(t + 1)])
        e = np.exp(logits - logits.max())
        w = e / e.sum()
        weights[t, : t + 1] = w
        for i in range(t + 1):
            out[t] += w[i] * v_mat[i]
    return weights, out


def decode_oracle(q, cache, adapter=None):
    """64-bit dequantize-everything reference for one decode step."""
    d = cache.head_dim
    q = np.asarray(q, dtype=np.float64)
    num = np.zeros(d)
    den = 0.0
    n_q = cache.quantized_tokens
    if n_q:
        k_hat = cache.dequantized_keys(0, n_q)
        v_hat = cache.dequantized_values(0, n_q)
        e = np.exp(k_hat @ q / np.sqrt(d))
        part = e @ v_hat
        if adapter is not None and adapter.enabled and cache.s_state is not None:
            fq = phi_q(adapter, q)
            part = part + cache.s_state @ fq
            den += float(cache.p_state @ fq)
        if cache.values_rotated:
            part = part @ hadamard_matrix(d).matrix.T
        num += part
        den += float(e.sum())
    if cache.residual_len:
        e = np.exp(cache.residual_keys() @ q / np.sqrt(d))
        num += e @ cache.residual_values()
        den += float(e.sum())
    return num / den


def filled_cache(n, d, *, group_size, residual_window, adapter=None,
                 rotate_values=False, seed=0):
    g = rng(seed)
    k = g.standard_normal((n, d))
    v = g.standard_normal((n, d))
    cache = KVCacheState(d, group_size=group_size, residual_window=residual_window,
                         rotate_values=rotate_values)
    for t in range(n):
        cache.append(k[t], v[t], adapter)
    return cache, k, v


def test_reference_single_token():
    g = rng(0)
    q, k, v = (g.standard_normal((1, 4)) for _ in range(3))
    a, y = attention_reference(q, k, v)
    assert np.array_equal(a, [[1.0]])
    assert np.allclose(y, v, atol=1e-15)


def test_reference_identical_keys_uniform():
    g = rng(1)
    n, d = 6, 4
    k = np.tile(g.standard_normal(d), (n, 1))
    a, _ = attention_reference(g.standard_normal((n, d)), k,
                               g.standard_normal((n, d)))
    for t in range(n):
        assert np.allclose(a[t, : t + 1], 1.0 / (t + 1), atol=1e-12)
        assert np.all(a[t, t + 1:] == 0.0)


def test_reference_matches_per_position_oracle():
    for seed in range(8):
        g = rng(seed)
        n = int(g.integers(2, 13))
        q, k, v = (g.standard_normal((n, 5)) for _ in range(3))
        a, y = attention_reference(q, k, v)
        a_want, y_want = causal_attention_oracle(q, k, v)
        assert np.max(np.abs(a - a_want)) <= 1e-12
        assert np.max(np.abs(y - y_want)) <= 1e-12


def test_reference_shape_error():
    with pytest.raises(ValueError, match="shapes differ"):
        attention_reference(np.zeros((3, 4)), np.zeros((3, 4)), np.zeros((2, 4)))


def test_passthrough_config_is_reference_exact():
    g = rng(2)
    q, k, v = (g.standard_normal((16, 8)) for _ in range(3))
    cfg = QuantConfig(bits=16, group_size=8, axis="token")
    a_ref, y_ref = attention_reference(q, k, v)
    a_cfg, y_cfg = attention_with_config(q, k, v, cfg, cfg)
    assert np.array_equal(a_cfg, a_ref)
    assert np.array_equal(y_cfg, y_ref)


def test_passthrough_rotations_round_trip():
    g = rng(3)
    x = g.standard_normal((16, 8))
    for rotation in ("pre", "post"):
        cfg = QuantConfig(bits=16, group_size=8, axis="token", rotation=rotation)
        assert np.max(np.abs(quantize_roundtrip(x, cfg) - x)) <= 1e-12


def test_integer_grid_quantization_is_lossless():
    # every key channel and value row spans [0, 3], so scale is exactly 1
    # and 2-bit codes reproduce the entries bit for bit
    g = rng(4)
    n, d = 128, 64
    k = g.integers(0, 4, size=(n, d)).astype(np.float64)
    k[0, :] = 0.0
    k[1, :] = 3.0
    v = g.integers(0, 4, size=(n, d)).astype(np.float64)
    v[:, 0] = 0.0
    v[:, 1] = 3.0
    q = g.standard_normal((n, d))
    cfg_k = QuantConfig(bits=2, group_size=n, axis="channel")
    cfg_v = QuantConfig(bits=2, group_size=d, axis="token")
    assert np.array_equal(quantize_roundtrip(k, cfg_k), k)
    assert np.array_equal(quantize_roundtrip(v, cfg_v), v)
    a_cfg, y_cfg = attention_with_config(q, k, v, cfg_k, cfg_v)
    a_ref, y_ref = attention_reference(q, k, v)
    assert np.array_equal(a_cfg, a_ref)
    assert np.array_equal(y_cfg, y_ref)


def quantized_inputs(seed, n, d, bits=2):
    g = rng(seed)
    q = g.standard_normal((n, d))
    k = g.standard_normal((n, d))
    v = g.standard_normal((n, d))
    k_hat = quantize_tensor(k, QuantConfig(bits=bits, group_size=n,
                                           axis="channel")).dequantize()
    v_hat = quantize_tensor(v, QuantConfig(bits=bits, group_size=d,
                                           axis="token")).dequantize()
    return q, k_hat, k - k_hat, v_hat


def test_quadratic_without_adapter_matches_reference():
    q, k_hat, k_err, v_hat = quantized_inputs(0, 24, 8)
    _, want = attention_reference(q, k_hat, v_hat)
    for adapter in (None, CorrectionAdapter.initialize(8, 8, enabled=False)):
        got = corrected_attention_quadratic(q, k_hat, k_err, v_hat, adapter)
        assert np.max(np.abs(got - want)) <= 1e-12


def test_quadratic_zero_key_error_closed_form():
    # k_err == 0 makes every correction exactly 4/D, query independent
    q, k_hat, _, v_hat = quantized_inputs(1, 16, 8)
    adapter = CorrectionAdapter.initialize(8, 16, seed=5)
    got = corrected_attention_quadratic(q, k_hat, np.zeros_like(k_hat), v_hat, adapter)
    n = q.shape[0]
    mask = np.arange(n)[np.newaxis, :] <= np.arange(n)[:, np.newaxis]
    e = np.where(mask, np.exp(q @ k_hat.T / np.sqrt(8)), 0.0) + mask * (4.0 / 16.0)
    want = (e @ v_hat) / e.sum(axis=1, keepdims=True)
    assert np.max(np.abs(got - want)) <= 1e-12


def test_quadratic_matches_recurrent():
    for seed in range(10):
        g = rng(seed + 50)
        n = int(g.integers(2, 65))
        q, k_hat, k_err, v_hat = quantized_inputs(seed, n, 8)
        adapter = CorrectionAdapter.initialize(8, 8, seed=seed)
        quad = corrected_attention_quadratic(q, k_hat, k_err, v_hat, adapter)
        rec = corrected_attention_recurrent(q, k_hat, k_err, v_hat, adapter)
        assert np.max(np.abs(quad - rec)) <= 1e-10


def test_recurrent_first_output_is_first_value():
    q, k_hat, k_err, v_hat = quantized_inputs(2, 1, 4)
    adapter = CorrectionAdapter.initialize(4, 8, seed=0)
    out = corrected_attention_recurrent(q, k_hat, k_err, v_hat, adapter)
    assert np.max(np.abs(out[0] - v_hat[0])) <= 1e-12


def test_op_counters_exact():
    n, d, rank = 12, 8, 16
    q, k_hat, k_err, v_hat = quantized_inputs(3, n, d)
    adapter = CorrectionAdapter.initialize(d, rank, seed=1)

    counter = OpCounter()
    corrected_attention_quadratic(q, k_hat, k_err, v_hat, adapter, counter)
    assert counter.macs == n * (n + 1) // 2 * rank

    counter = OpCounter()
    corrected_attention_recurrent(q, k_hat, k_err, v_hat, adapter, counter)
    assert counter.macs == n * (4 * d * rank + 2 * rank)

    counter = OpCounter()
    corrected_attention_quadratic(q, k_hat, k_err, v_hat, None, counter)
    assert counter.macs == 0


def test_blocked_matches_oracle_single_chunk():
    cache, _, _ = filled_cache(32, 16, group_size=32, residual_window=0)
    assert cache.quantized_tokens == 32 and cache.residual_len == 0
    q = rng(9).standard_normal(16)
    got = decode_step_blocked(q, cache)
    assert np.max(np.abs(got - decode_oracle(q, cache))) <= 1e-4


def test_blocked_matches_oracle_with_residual_and_adapter():
    adapter = CorrectionAdapter.initialize(16, 8, seed=3)
    cache, _, _ = filled_cache(80, 16, group_size=32, residual_window=16,
                               adapter=adapter, seed=4)
    assert cache.quantized_tokens == 64 and cache.residual_len == 16
    q = rng(10).standard_normal(16)
    got = decode_step_blocked(q, cache, adapter)
    assert np.max(np.abs(got - decode_oracle(q, cache, adapter))) <= 1e-4


def test_blocked_partition_invariance():
    adapter = CorrectionAdapter.initialize(16, 8, seed=6)
    cache, _, _ = filled_cache(256, 16, group_size=64, residual_window=0,
                               adapter=adapter, seed=5)
    outs = [decode_step_blocked(rng(11).standard_normal(16), cache, adapter,
                                block_tokens=b) for b in (16, 32, 64)]
    for other in outs[1:]:
        assert np.allclose(outs[0], other, rtol=1e-5, atol=1e-6)


def test_blocked_rotated_values_match_recurrent_final_row():
    n, d = 256, 32
    adapter = CorrectionAdapter.initialize(d, 16, seed=7)
    cache, k, _ = filled_cache(n, d, group_size=64, residual_window=0,
                               adapter=adapter, rotate_values=True, seed=8)
    assert cache.quantized_tokens == n
    g = rng(12)
    q_mat = g.standard_normal((n, d))
    k_hat = cache.dequantized_keys(0, n)
    v_raw = cache.dequantized_values(0, n) @ hadamard_matrix(d).matrix.T
    rec = corrected_attention_recurrent(q_mat, k_hat, k - k_hat, v_raw, adapter)
    got = decode_step_blocked(q_mat[-1], cache, adapter)
    assert np.max(np.abs(got - rec[-1])) <= 1e-4


def test_blocked_literal_correction_differs():
    adapter = CorrectionAdapter.initialize(8, 8, seed=9)
    cache, _, _ = filled_cache(64, 8, group_size=32, residual_window=0,
                               adapter=adapter, seed=13)
    q = rng(14).standard_normal(8) * 3
    consistent = decode_step_blocked(q, cache, adapter)
    literal = decode_step_blocked(q, cache, adapter, literal_correction=True)
    assert np.max(np.abs(consistent - decode_oracle(q, cache, adapter))) <= 1e-4
    assert np.max(np.abs(literal - consistent)) > 1e-8


def test_blocked_extreme_logits_stay_finite():
    d = 8
    adapter = CorrectionAdapter.initialize(d, 8, seed=10)
    for attach in (None, adapter):
        cache = KVCacheState(d, group_size=8, residual_window=0)
        g = rng(15)
        for _ in range(16):
            cache.append(np.ones(d), g.standard_normal(d), attach)
        for sign in (300.0, -300.0):
            out = decode_step_blocked(np.full(d, sign), cache, attach)
            assert np.all(np.isfinite(out))


def test_blocked_validation_errors():
    cache, _, _ = filled_cache(32, 8, group_size=16, residual_window=0)
    with pytest.raises(ValueError, match="query shape"):
        decode_step_blocked(np.zeros(9), cache)
    with pytest.raises(ValueError, match="block_tokens"):
        decode_step_blocked(np.zeros(8), cache, block_tokens=0)
    empty = KVCacheState(8, group_size=16, residual_window=0)
    with pytest.raises(ValueError, match="empty cache"):
        decode_step_blocked(np.zeros(8), empty)


def test_blocked_return_partials():
    cache, _, _ = filled_cache(80, 8, group_size=16, residual_window=16, seed=16)
    assert cache.quantized_tokens == 64 and cache.residual_len == 16
    out, partials = decode_step_blocked(rng(17).standard_normal(8), cache,
                                        return_partials=True)
    # four quantized blocks of 16 plus one residual block
    assert partials.y_partial.shape == (5, 8)
    assert partials.block_max.shape == (5,)
    assert partials.block_sum.shape == (5,)
    assert partials.y_partial.dtype == np.float32
    assert np.all(np.isfinite(out))
