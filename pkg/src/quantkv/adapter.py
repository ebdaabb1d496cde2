"""Trainable correction adapters for quantized-key attention.

An adapter owns four weight matrices, each (d, D/2): one pair for queries
and one pair for key quantization errors.  The feature map concatenates two
softmaxes,

    phi(x; W1, W2) = [softmax(x @ W1), softmax(x @ W2)]   in R^D,

so every feature vector is positive and sums to exactly 2.  The additive
correction for a query q and a key error k_err is the inner product

    f(q, k_err) = phi_q(q) . phi_k(k_err)   in (0, 2].

Corrected attention weights replace softmax with

    w_i = (exp(q . k_q_i / sqrt(d)) + f(q, k_err_i)) / sum_j (exp_j + f_j)

and the training loss is the cross-entropy between full-precision attention
rows and corrected rows, averaged over query positions.  Gradients here are
analytic; tests check them against central finite differences.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .linalg import Matrix, rng, softmax_rows
from .quantize import QuantConfig, quantize_tensor

WEIGHT_NAMES = ("w1_q", "w2_q", "w1_k", "w2_k")

ADAPTER_MAGIC = b"KVLA"
ADAPTER_VERSION = 1


@dataclass
class CorrectionAdapter:
    w1_q: np.ndarray
    w2_q: np.ndarray
    w1_k: np.ndarray
    w2_k: np.ndarray
    enabled: bool = True

    def __post_init__(self):
        shapes = {name: getattr(self, name).shape for name in WEIGHT_NAMES}
        first = shapes["w1_q"]
        if any(s != first for s in shapes.values()):
            raise ValueError(f"weight shapes must agree, got {shapes}")
        if len(first) != 2:
            raise ValueError(f"weights must be matrices, got shape {first}")

    @property
    def head_dim(self) -> int:
        return self.w1_q.shape[0]

    @property
    def rank(self) -> int:
        """Feature dimension D (each softmax half has D/2 entries)."""
        return 2 * self.w1_q.shape[1]

    def weights(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in WEIGHT_NAMES}

    @classmethod
    def initialize(cls, head_dim: int, rank: int, seed: int = 0,
                   init_scale: float = 1.0, enabled: bool = True) -> "CorrectionAdapter":
        """Fresh adapter with N(0, (init_scale/sqrt(d))^2) weights."""
        if rank < 2 or rank % 2:
            raise ValueError(f"rank must be an even integer >= 2, got {rank}")
        if head_dim < 1:
            raise ValueError(f"head_dim must be >= 1, got {head_dim}")
        g = rng(seed)
        std = init_scale / np.sqrt(head_dim)
        mats = [g.standard_normal((head_dim, rank // 2)) * std for _ in range(4)]
        return cls(*mats, enabled=enabled)


def feature_map(x, w1: np.ndarray, w2: np.ndarray) -> np.ndarray:
    """Apply the two-softmax feature map to one vector or a stack of rows."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    rows = x[np.newaxis, :] if single else x
    if rows.shape[1] != w1.shape[0]:
        raise ValueError(f"feature input dim {rows.shape[1]} != weight dim {w1.shape[0]}")
    out = np.concatenate([softmax_rows(rows @ w1), softmax_rows(rows @ w2)], axis=1)
    return out[0] if single else out


def phi_q(adapter: CorrectionAdapter, x) -> np.ndarray:
    return feature_map(x, adapter.w1_q, adapter.w2_q)


def phi_k(adapter: CorrectionAdapter, x) -> np.ndarray:
    return feature_map(x, adapter.w1_k, adapter.w2_k)


def correction_term(q, k_err, adapter: CorrectionAdapter) -> float:
    """f(q, k_err) = phi_q(q) . phi_k(k_err); equals 4/D when k_err == 0."""
    return float(phi_q(adapter, q) @ phi_k(adapter, k_err))


def corrected_weights(q, k_quant: Matrix, k_err: Matrix,
                      adapter: CorrectionAdapter | None) -> np.ndarray:
    """Corrected attention row over a causal prefix of keys.

    Uses raw (unshifted) exponentials, as the correction is additive in that
    scale; callers with extreme logits should use the blocked decode path.
    """
    q = np.asarray(q, dtype=np.float64)
    k_quant = np.asarray(k_quant, dtype=np.float64)
    if q.ndim != 1 or k_quant.ndim != 2 or k_quant.shape[1] != q.shape[0]:
        raise ValueError(f"shape mismatch: q {q.shape} vs keys {k_quant.shape}")
    e = np.exp(k_quant @ q / np.sqrt(q.shape[0]))
    if adapter is not None and adapter.enabled:
        k_err = np.asarray(k_err, dtype=np.float64)
        if k_err.shape != k_quant.shape:
            raise ValueError(f"k_err shape {k_err.shape} != keys shape {k_quant.shape}")
        e = e + phi_k(adapter, k_err) @ phi_q(adapter, q)
    return e / e.sum()


def _softmax_backward(s: np.ndarray, grad: np.ndarray) -> np.ndarray:
    # Rows of s are softmax outputs; returns gradient wrt the logits.
    dot = np.sum(grad * s, axis=1, keepdims=True)
    return s * (grad - dot)


def loss_and_grads(batch, adapter: CorrectionAdapter):
    """Cross-entropy of corrected rows against full-precision rows.

    ``batch`` is a sequence of (a_full, q, k_quant, k_err) tuples, one per
    query position; a_full is that position's causal attention row.  Returns
    (loss, grads) where grads maps each weight name to d(loss)/d(weight) and
    loss is the mean over the batch.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    grads = {name: np.zeros_like(w) for name, w in adapter.weights().items()}
    total = 0.0
    inv_b = 1.0 / len(batch)
    for a_full, q, k_quant, k_err in batch:
        a = np.asarray(a_full, dtype=np.float64)
        q = np.asarray(q, dtype=np.float64)
        k_quant = np.asarray(k_quant, dtype=np.float64)
        k_err = np.asarray(k_err, dtype=np.float64)
        n, d = k_quant.shape
        if a.shape != (n,):
            raise ValueError(f"attention row shape {a.shape} != key count {n}")

        e = np.exp(k_quant @ q / np.sqrt(d))
        u = phi_q(adapter, q)                      # (D,)
        v = phi_k(adapter, k_err)                  # (n, D)
        f = v @ u                                  # (n,)
        num = e + f
        z = num.sum()
        w_hat = num / z
        total -= float(a @ np.log(w_hat)) * inv_b

        # d(loss)/d(f_j) = (1 - a_j / w_hat_j) / z, scaled by the batch mean.
        g = (1.0 - a / w_hat) / z * inv_b          # (n,)

        grad_u = g @ v                             # (D,)
        grad_v = np.outer(g, u)                    # (n, D)

        h = adapter.rank // 2
        dz1 = _softmax_backward(u[np.newaxis, :h], grad_u[np.newaxis, :h])[0]
        dz2 = _softmax_backward(u[np.newaxis, h:], grad_u[np.newaxis, h:])[0]
        grads["w1_q"] += np.outer(q, dz1)
        grads["w2_q"] += np.outer(q, dz2)

        dk1 = _softmax_backward(v[:, :h], grad_v[:, :h])
        dk2 = _softmax_backward(v[:, h:], grad_v[:, h:])
        grads["w1_k"] += k_err.T @ dk1
        grads["w2_k"] += k_err.T @ dk2
    return total, grads


def _batched_loss_and_grads(a_rows: Matrix, positions: np.ndarray, q_mat: Matrix,
                            k_quant: Matrix, k_err: Matrix, adapter: CorrectionAdapter):
    """Same objective as loss_and_grads for query positions sharing one key set.

    The key feature map is computed once and reused across the batch, which
    is what makes the trainer's inner loop cheap.  Equivalence with the
    per-item path is covered by tests.
    """
    n, d = k_quant.shape
    b = len(positions)
    inv_b = 1.0 / b
    h = adapter.rank // 2

    v = phi_k(adapter, k_err)                       # (n, D)
    qb = q_mat[positions]                           # (b, d)
    u = phi_q(adapter, qb)                          # (b, D)

    logits = qb @ k_quant.T / np.sqrt(d)            # (b, n)
    mask = np.arange(n)[np.newaxis, :] <= positions[:, np.newaxis]
    e = np.exp(np.where(mask, logits, -np.inf))     # exactly 0 off-mask
    f = (u @ v.T) * mask
    num = e + f
    z = num.sum(axis=1, keepdims=True)
    w_hat = num / z                                 # 0 off-mask, > 0 on-mask

    a = a_rows[positions] * mask
    safe_w = np.where(mask, w_hat, 1.0)
    loss = -float(np.sum(a * np.log(safe_w))) * inv_b

    g = np.where(mask, (1.0 - a / safe_w) / z, 0.0) * inv_b  # (b, n)

    grad_u = g @ v                                  # (b, D)
    grad_v = g.T @ u                                # (n, D)

    dz1 = _softmax_backward(u[:, :h], grad_u[:, :h])
    dz2 = _softmax_backward(u[:, h:], grad_u[:, h:])
    dk1 = _softmax_backward(v[:, :h], grad_v[:, :h])
    dk2 = _softmax_backward(v[:, h:], grad_v[:, h:])
    grads = {
        "w1_q": qb.T @ dz1,
        "w2_q": qb.T @ dz2,
        "w1_k": k_err.T @ dk1,
        "w2_k": k_err.T @ dk2,
    }
    return loss, grads


@dataclass
class AdamState:
    """Adam with bias correction; betas (0.9, 0.999), eps 1e-8."""

    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, adapter: CorrectionAdapter, grads: dict):
        self.step_count += 1
        t = self.step_count
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1 ** t)
            v_hat = self.v[name] / (1 - self.beta2 ** t)
            w = getattr(adapter, name)
            setattr(adapter, name, w - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))


@dataclass(frozen=True)
class TrainSettings:
    rank: int = 256
    steps: int = 200
    lr: float = 0.01
    batch: int = 64
    seed: int = 0
    bits: int = 2
    group_size: int = 128
    init_scale: float = 1.0


def train_adapter(q_mat: Matrix, k_mat: Matrix, v_mat: Matrix,
                  settings: TrainSettings):
    """Fit one adapter to one head's activations.

    Keys are quantized channel-wise in group_size-token chunks (the cache's
    flush layout), the full-precision attention rows are the targets, and
    Adam minimizes the corrected-row cross-entropy.  Returns the adapter and
    the per-step loss curve.
    """
    from .attention import attention_reference  # local import, avoids a cycle

    q_mat = np.asarray(q_mat, dtype=np.float64)
    k_mat = np.asarray(k_mat, dtype=np.float64)
    n, d = k_mat.shape
    k_hat = _quantize_keys_chunked(k_mat, settings.bits, settings.group_size)
    k_err = k_mat - k_hat
    a_full, _ = attention_reference(q_mat, k_mat, v_mat)

    adapter = CorrectionAdapter.initialize(d, settings.rank, seed=settings.seed,
                                           init_scale=settings.init_scale)
    opt = AdamState(lr=settings.lr)
    g = rng(settings.seed + 1)
    batch = min(settings.batch, n)
    losses = []
    for _ in range(settings.steps):
        if batch == n:
            positions = np.arange(n)
        else:
            positions = np.sort(g.choice(n, size=batch, replace=False))
        loss, grads = _batched_loss_and_grads(a_full, positions, q_mat,
                                              k_hat, k_err, adapter)
        losses.append(loss)
        opt.step(adapter, grads)
    return adapter, losses


def _quantize_keys_chunked(k_mat: Matrix, bits: int, group_size: int) -> Matrix:
    """Channel-wise key round trip, one chunk per group_size tokens."""
    cfg = QuantConfig(bits=bits, group_size=group_size, axis="channel")
    n = k_mat.shape[0]
    out = np.empty_like(k_mat)
    for lo in range(0, n, group_size):
        hi = min(lo + group_size, n)
        out[lo:hi] = quantize_tensor(k_mat[lo:hi], cfg).dequantize()
    return out


# -- serialization ---------------------------------------------------------
#
# Little-endian layout: magic "KVLA", u32 version, u32 head_dim, u32 rank,
# u32 enabled, then w1_q, w2_q, w1_k, w2_k as float32 row-major blocks of
# shape (head_dim, rank/2) each.

_ADAPTER_HEADER = struct.Struct("<4s4I")


class AdapterFormatError(ValueError):
    pass


def serialize_adapter(adapter: CorrectionAdapter) -> bytes:
    out = [_ADAPTER_HEADER.pack(ADAPTER_MAGIC, ADAPTER_VERSION,
                                adapter.head_dim, adapter.rank,
                                int(adapter.enabled))]
    for name in WEIGHT_NAMES:
        out.append(np.ascontiguousarray(getattr(adapter, name), dtype="<f4").tobytes())
    return b"".join(out)


def deserialize_adapter(data: bytes) -> CorrectionAdapter:
    if len(data) < _ADAPTER_HEADER.size:
        raise AdapterFormatError(f"file too short for header: {len(data)} bytes")
    magic, version, d, rank, enabled = _ADAPTER_HEADER.unpack_from(data)
    if magic != ADAPTER_MAGIC:
        raise AdapterFormatError(f"bad magic at byte 0: {magic!r}")
    if version != ADAPTER_VERSION:
        raise AdapterFormatError(f"unsupported version {version} at byte 4")
    half = rank // 2
    expect = 4 * d * half * 4
    if len(data) - _ADAPTER_HEADER.size != expect:
        raise AdapterFormatError(
            f"payload size mismatch at byte {_ADAPTER_HEADER.size}: "
            f"expected {expect} bytes, found {len(data) - _ADAPTER_HEADER.size}")
    mats = np.frombuffer(data, dtype="<f4", offset=_ADAPTER_HEADER.size)
    mats = mats.reshape(4, d, half).astype(np.float64)
    return CorrectionAdapter(*[np.ascontiguousarray(m) for m in mats],
                             enabled=bool(enabled))


def write_adapter(adapter: CorrectionAdapter, path):
    with open(path, "wb") as fh:
        fh.write(serialize_adapter(adapter))


def read_adapter(path) -> CorrectionAdapter:
    with open(path, "rb") as fh:
        return deserialize_adapter(fh.read())
