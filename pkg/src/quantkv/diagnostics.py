"""Quantization design-space diagnostics over traces.

All functions here return plain data (records, grids, scalars); figure
rendering lives with the CLI.  Error metrics compare against full-precision
attention: weight MSE averages over causal entries only, output MSE over all
entries of the output matrix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter import CorrectionAdapter
from .attention import (attention_reference, attention_with_config,
                        corrected_attention_quadratic, quantize_roundtrip)
from .hadamard import hadamard_matrix, rotate
from .linalg import Matrix
from .quantize import AXES, ROTATIONS, QuantConfig, quantize_tensor
from .traces import AttentionTrace

FP16_BITS = 16


def _causal_mse(a: Matrix, b: Matrix) -> float:
    n = a.shape[0]
    mask = np.arange(n)[np.newaxis, :] <= np.arange(n)[:, np.newaxis]
    return float(np.sum((a - b) ** 2 * mask) / mask.sum())


@dataclass
class ScaleStat:
    axis: str
    rotation: str
    mean_scale: float


def scale_factor_stats(k_mat: Matrix, variants, *, bits: int = 2,
                       group_size: int = 128) -> list[ScaleStat]:
    """Mean quantization scale of K under each (axis, rotation) variant."""
    k_mat = np.asarray(k_mat, dtype=np.float64)
    out = []
    for axis, rotation in variants:
        cfg = QuantConfig(bits=bits, group_size=group_size, axis=axis,
                          rotation=rotation)
        x = k_mat
        if rotation == "pre":
            x = rotate(x, hadamard_matrix(x.shape[0]), "pre")
        elif rotation == "post":
            x = rotate(x, hadamard_matrix(x.shape[1]), "post")
        qt = quantize_tensor(x, cfg)
        out.append(ScaleStat(axis, rotation, float(qt.scales.mean())))
    return out


@dataclass
class HeadError:
    layer: int
    head: int
    mse_weights: float
    mse_outputs: float


@dataclass
class ErrorReport:
    config_k: QuantConfig
    config_v: QuantConfig
    adapter_enabled: bool
    rows: list

    def mean_weight_mse(self) -> float:
        return float(np.mean([r.mse_weights for r in self.rows]))

    def mean_output_mse(self) -> float:
        return float(np.mean([r.mse_outputs for r in self.rows]))


def attention_error_report(trace: AttentionTrace, cfg_k: QuantConfig,
                           cfg_v: QuantConfig,
                           adapters: dict | None = None) -> ErrorReport:
    """Per-head attention error under a quantization config.

    ``adapters`` maps (layer, head) to a CorrectionAdapter; with adapters the
    corrected weights are evaluated over quantized keys and their raw-basis
    errors, otherwise plain softmax over the round-tripped operands.
    """
    rows = []
    for li in range(trace.layers):
        for hi in range(trace.heads):
            q, k, v = trace.head(li, hi)
            a_full, y_full = attention_reference(q, k, v)
            adapter = (adapters or {}).get((li, hi))
            if adapter is not None and adapter.enabled:
                k_hat = quantize_roundtrip(k, cfg_k)
                v_hat = quantize_roundtrip(v, cfg_v)
                a_hat = _corrected_rows(q, k_hat, k - k_hat, adapter)
                y_hat = corrected_attention_quadratic(q, k_hat, k - k_hat, v_hat, adapter)
            else:
                a_hat, y_hat = attention_with_config(q, k, v, cfg_k, cfg_v)
            rows.append(HeadError(li, hi, _causal_mse(a_full, a_hat),
                                  float(np.mean((y_full - y_hat) ** 2))))
    return ErrorReport(cfg_k, cfg_v, adapters is not None and len(adapters) > 0, rows)


def _corrected_rows(q_mat, k_hat, k_err, adapter) -> Matrix:
    from .adapter import phi_k, phi_q
    n, d = q_mat.shape
    mask = np.arange(n)[np.newaxis, :] <= np.arange(n)[:, np.newaxis]
    e = np.exp(np.where(mask, q_mat @ k_hat.T / np.sqrt(d), -np.inf))
    f = (phi_q(adapter, q_mat) @ phi_k(adapter, k_err).T) * mask
    num = e + f
    return num / num.sum(axis=1, keepdims=True)


@dataclass
class SweepCell:
    k_axis: str
    k_rotation: str
    v_axis: str
    v_rotation: str
    mse_output: float

    @property
    def key_label(self) -> str:
        return f"{self.k_axis}/{self.k_rotation}"

    @property
    def value_label(self) -> str:
        return f"{self.v_axis}/{self.v_rotation}"


def config_sweep(trace: AttentionTrace, *, bits: int = 2,
                 group_size: int = 128, threads: int = 1) -> list[SweepCell]:
    """Output MSE for the full (axis x rotation)^2 design grid.

    Cells average over every (layer, head).  Pre-rotation requires the trace
    seq_len to be a power of two.
    """
    combos = [(ka, kr, va, vr) for ka in AXES for kr in ROTATIONS
              for va in AXES for vr in ROTATIONS]

    def run(combo):
        ka, kr, va, vr = combo
        cfg_k = QuantConfig(bits=bits, group_size=group_size, axis=ka, rotation=kr)
        cfg_v = QuantConfig(bits=bits, group_size=group_size, axis=va, rotation=vr)
        errs = []
        for li in range(trace.layers):
            for hi in range(trace.heads):
                q, k, v = trace.head(li, hi)
                _, y_full = attention_reference(q, k, v)
                _, y_hat = attention_with_config(q, k, v, cfg_k, cfg_v)
                errs.append(float(np.mean((y_full - y_hat) ** 2)))
        return SweepCell(ka, kr, va, vr, float(np.mean(errs)))

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, combos))
    return [run(c) for c in combos]


def best_cell(cells) -> SweepCell:
    return min(cells, key=lambda c: c.mse_output)


@dataclass
class PrecisionReport:
    """Average stored bits per cached element, with the full tally."""

    bits_per_element: float
    components: dict  # bit totals: codes, metadata, residual, states
    assumptions: dict

    def lines(self):
        yield f"bits_per_element\t{self.bits_per_element:.6f}"
        for name, bits in self.components.items():
            yield f"component_bits\t{name}\t{bits}"
        for name, val in self.assumptions.items():
            yield f"assumption\t{name}\t{val}"


def average_precision(*, seq_len: int, head_dim: int, group_size: int = 128,
                      residual: int = 128, bits: int = 2,
                      metadata_bits: int = 16, adapter_rank: int = 0,
                      heads: int = 1, layers: int = 1) -> PrecisionReport:
    """Amortized bits per cached K/V element at a given sequence length.

    Counts packed codes, per-group scale+zero metadata, the full-precision
    residual window, and (when an adapter is attached) the 16-bit correction
    states, divided by the number of cached elements.  States and cache are
    both per head per layer, so those factors cancel; they are accepted for
    interface completeness.  The quantized region is taken as exactly
    seq_len - residual tokens (streaming reaches this when that count is a
    multiple of group_size).
    """
    if seq_len <= residual:
        raise ValueError(f"seq_len {seq_len} must exceed residual window {residual}")
    if bits not in (2, 3, 4, 8):
        raise ValueError(f"bits must be 2, 3, 4 or 8, got {bits}")
    n_q = seq_len - residual
    key_groups = -(-n_q // group_size) * head_dim
    value_groups = n_q * -(-head_dim // group_size)
    code_bits = 2 * n_q * head_dim * bits
    meta_bits = (key_groups + value_groups) * 2 * metadata_bits
    residual_bits = 2 * residual * head_dim * FP16_BITS
    state_bits = (head_dim * adapter_rank + adapter_rank) * FP16_BITS * heads * layers
    elements = 2 * seq_len * head_dim * heads * layers
    total = (code_bits + meta_bits + residual_bits) * heads * layers + state_bits
    return PrecisionReport(
        bits_per_element=total / elements,
        components={"codes": code_bits, "metadata": meta_bits,
                    "residual": residual_bits,
                    "states": state_bits // (heads * layers) if adapter_rank else 0},
        assumptions={"seq_len": seq_len, "head_dim": head_dim,
                     "group_size": group_size, "residual": residual,
                     "bits": bits, "metadata_bits": metadata_bits,
                     "residual_bits_per_value": FP16_BITS,
                     "adapter_rank": adapter_rank,
                     "quantized_tokens": n_q},
    )


@dataclass
class RankPoint:
    rank: int
    mse_weights: float
    mse_outputs: float
    params: int


def rank_ablation(trace: AttentionTrace, ranks, *, steps: int = 200,
                  lr: float = 0.01, batch: int = 64, seed: int = 0,
                  bits: int = 2, group_size: int = 128,
                  threads: int = 1) -> list[RankPoint]:
    """Train one adapter per rank with an identical budget and report errors."""
    from .adapter import TrainSettings, train_adapter

    cfg_k = QuantConfig(bits=bits, group_size=group_size, axis="channel")
    cfg_v = QuantConfig(bits=bits, group_size=group_size, axis="token", rotation="post")

    def run(rank):
        if rank < 2 or rank % 2:
            raise ValueError(f"rank must be an even integer >= 2, got {rank}")
        adapters = {}
        for li in range(trace.layers):
            for hi in range(trace.heads):
                q, k, v = trace.head(li, hi)
                settings = TrainSettings(rank=rank, steps=steps, lr=lr,
                                         batch=batch, seed=seed, bits=bits,
                                         group_size=group_size)
                adapters[(li, hi)], _ = train_adapter(q, k, v, settings)
        report = attention_error_report(trace, cfg_k, cfg_v, adapters)
        d = trace.head_dim
        return RankPoint(rank, report.mean_weight_mse(), report.mean_output_mse(),
                         4 * d * (rank // 2))

    ranks = list(ranks)
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, ranks))
    return [run(r) for r in ranks]
