"""Low-bit KV-cache quantization with Hadamard rotation and trainable
attention correction adapters."""

from .adapter import (CorrectionAdapter, TrainSettings, correction_term,
                      corrected_weights, feature_map, loss_and_grads,
                      read_adapter, train_adapter, write_adapter)
from .attention import (DecodePartial, OpCounter, attention_reference,
                        attention_with_config, corrected_attention_quadratic,
                        corrected_attention_recurrent, decode_step_blocked,
                        quantize_roundtrip)
from .cache import (FootprintReport, KVCacheState, memory_footprint,
                    read_cache, write_cache)
from .diagnostics import (attention_error_report, average_precision,
                          config_sweep, rank_ablation, scale_factor_stats)
from .hadamard import HadamardMatrix, hadamard_matrix, rotate
from .linalg import matmul, rng, softmax_rows
from .quantize import (QuantConfig, QuantizedTensor, dequantize_group,
                       expected_quant_mse, pack_codes, quantize_group,
                       quantize_tensor, unpack_codes)
from .traces import (AttentionTrace, generate_synthetic_trace, read_trace,
                     write_trace)

__version__ = "0.1.0"
