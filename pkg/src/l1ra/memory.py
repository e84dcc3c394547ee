"""Analytic peak-memory estimate for adapter fine-tuning, plus budget planning.

The estimate decomposes peak bytes into five contributions: model parameters
(frozen base, possibly quantized, plus adapters), steady state (gradients and
the two Adam moments for every trainable value), activations retained for the
backward pass, the loss head (logits plus a full-precision softmax copy), and
a safety margin standing in for everything else.

Two independent routes compute it: ``estimate_breakdown`` is closed-form
algebra, ``oracle_breakdown`` sums an explicit enumeration of every tensor
the training step would allocate.  The two must agree byte-for-byte; tests
hold them to that.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

# bytes per element of the full-precision softmax copy in the loss head
FULL_PRECISION_BYTES = 4.0


class InfeasibleMemoryError(ValueError):
    """Raised when the memory limit cannot fit even the rank-0 footprint."""

    def __init__(self, limit: float, rank0_bytes: float):
        self.limit = limit
        self.rank0_bytes = rank0_bytes
        super().__init__(
            f"memory limit {limit:.0f} B is below the rank-0 footprint "
            f"{rank0_bytes:.0f} B")


@dataclass
class ModelSpec:
    n_layers: int
    d_model: int
    d_ff: int
    n_heads: int
    n_kv_heads: int
    vocab_size: int
    base_dtype_bytes: float = 2.0     # fractional models quantized storage
    quant_block_overhead: float = 0.0  # bytes per base weight for quant constants
    adapter_dtype_bytes: float = 4.0
    optim_dtype_bytes: float = 4.0
    activation_dtype_bytes: float = 2.0

    def __post_init__(self):
        ints = (self.n_layers, self.d_model, self.d_ff, self.n_heads,
                self.n_kv_heads, self.vocab_size)
        if min(ints) < 1:
            raise ValueError("all model dimensions must be >= 1")
        if self.n_heads % self.n_kv_heads != 0:
            raise ValueError(
                f"n_kv_heads {self.n_kv_heads} must divide n_heads {self.n_heads}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        floats = (self.base_dtype_bytes, self.adapter_dtype_bytes,
                  self.optim_dtype_bytes, self.activation_dtype_bytes)
        if min(floats) <= 0 or self.quant_block_overhead < 0:
            raise ValueError("dtype byte sizes must be positive")

    @property
    def kv_dim(self) -> int:
        return self.d_model * self.n_kv_heads // self.n_heads


@dataclass
class TrainSpec:
    batch_size: int
    seq_len: int
    adapter_rank_per_site: int = 0
    gradient_checkpointing: bool = True
    safety_margin: float = 0.05

    def __post_init__(self):
        if self.batch_size < 1 or self.seq_len < 1:
            raise ValueError("batch_size and seq_len must be >= 1")
        if self.adapter_rank_per_site < 0:
            raise ValueError("adapter rank cannot be negative")
        if self.safety_margin < 0:
            raise ValueError("safety_margin cannot be negative")


@dataclass
class MemoryEstimate:
    params_bytes: float
    steady_state_bytes: float
    activation_bytes: float
    loss_bytes: float
    other_bytes: float

    @property
    def total_peak_bytes(self) -> float:
        return (self.params_bytes + self.steady_state_bytes +
                self.activation_bytes + self.loss_bytes + self.other_bytes)

    def as_dict(self) -> dict:
        return {
            "model_parameters_bytes": self.params_bytes,
            "steady_state_bytes": self.steady_state_bytes,
            "activation_bytes": self.activation_bytes,
            "loss_bytes": self.loss_bytes,
            "other_bytes": self.other_bytes,
            "total_peak_bytes": self.total_peak_bytes,
        }


# Adapter site shapes per layer: (d_in, d_out) factories over (d, kv, f).
_SITES = (
    ("q", lambda d, kv, f: (d, d)),
    ("k", lambda d, kv, f: (d, kv)),
    ("v", lambda d, kv, f: (d, kv)),
    ("o", lambda d, kv, f: (d, d)),
    ("up", lambda d, kv, f: (d, f)),
    ("gate", lambda d, kv, f: (d, f)),
    ("down", lambda d, kv, f: (f, d)),
)


def base_weight_count(m: ModelSpec) -> int:
    d, f, v, kv = m.d_model, m.d_ff, m.vocab_size, m.kv_dim
    per_layer = 2 * d * d + 2 * d * kv + 2 * d * f + f * d + 2 * d
    return v * d + m.n_layers * per_layer + d + d * v


def adapter_param_count(m: ModelSpec, r: int) -> int:
    d, f, kv = m.d_model, m.d_ff, m.kv_dim
    per_layer = sum(din * r + r + r * dout
                    for _, dims in _SITES for din, dout in [dims(d, kv, f)])
    return m.n_layers * per_layer


def _per_layer_activation_elements(m: ModelSpec, t: TrainSpec) -> int:
    """Element count of the tensors one layer keeps alive for backward."""
    b, s, r = t.batch_size, t.seq_len, t.adapter_rank_per_site
    d, f, kv = m.d_model, m.d_ff, m.kv_dim
    return b * s * (7 * d + 2 * kv + 4 * f + 14 * r) + b * m.n_heads * s * s


def estimate_breakdown(m: ModelSpec, t: TrainSpec) -> MemoryEstimate:
    """Closed-form five-way decomposition of predicted peak bytes."""
    b, s, r = t.batch_size, t.seq_len, t.adapter_rank_per_site
    trainable = adapter_param_count(m, r)

    params = (base_weight_count(m) * (m.base_dtype_bytes + m.quant_block_overhead)
              + trainable * m.adapter_dtype_bytes)
    steady = trainable * (m.adapter_dtype_bytes + 2.0 * m.optim_dtype_bytes)

    layer_set = _per_layer_activation_elements(m, t) * m.activation_dtype_bytes
    if t.gradient_checkpointing:
        stored = m.n_layers * b * s * m.d_model * m.activation_dtype_bytes
    else:
        stored = m.n_layers * layer_set
    activation = stored + layer_set  # plus the worst-layer working set

    logits = b * s * m.vocab_size
    loss = logits * m.activation_dtype_bytes + logits * FULL_PRECISION_BYTES

    other = t.safety_margin * (params + steady + activation + loss)
    return MemoryEstimate(params, steady, activation, loss, other)


def estimate_peak(m: ModelSpec, t: TrainSpec) -> float:
    return estimate_breakdown(m, t).total_peak_bytes


# ---------------------------------------------------------------------------
# enumeration oracle: lists every tensor a training step would allocate

@dataclass
class TensorAlloc:
    name: str
    category: str  # params | steady_state | activation | loss
    elements: int
    bytes_per_element: float

    @property
    def nbytes(self) -> float:
        return self.elements * self.bytes_per_element


def enumerate_allocations(m: ModelSpec, t: TrainSpec) -> list[TensorAlloc]:
    b, s, r = t.batch_size, t.seq_len, t.adapter_rank_per_site
    d, f, v, kv = m.d_model, m.d_ff, m.vocab_size, m.kv_dim
    base_b = m.base_dtype_bytes + m.quant_block_overhead
    out: list[TensorAlloc] = []

    def put(name, category, elements, bpe):
        out.append(TensorAlloc(name, category, elements, bpe))

    # base weights
    put("embed", "params", v * d, base_b)
    for L in range(m.n_layers):
        p = f"layer{L}."
        put(p + "norm1_gain", "params", d, base_b)
        put(p + "q", "params", d * d, base_b)
        put(p + "k", "params", d * kv, base_b)
        put(p + "v", "params", d * kv, base_b)
        put(p + "o", "params", d * d, base_b)
        put(p + "norm2_gain", "params", d, base_b)
        put(p + "up", "params", d * f, base_b)
        put(p + "gate", "params", d * f, base_b)
        put(p + "down", "params", f * d, base_b)
    put("final_norm_gain", "params", d, base_b)
    put("lm_head", "params", d * v, base_b)

    # adapters, their gradients and both Adam moments
    for L in range(m.n_layers):
        for kind, dims in _SITES:
            din, dout = dims(d, kv, f)
            name = f"layer{L}.{kind}."
            for part, n in (("A", din * r), ("c", r), ("B", r * dout)):
                put(name + part, "params", n, m.adapter_dtype_bytes)
                put(name + part + ".grad", "steady_state", n, m.adapter_dtype_bytes)
                put(name + part + ".adam_m", "steady_state", n, m.optim_dtype_bytes)
                put(name + part + ".adam_v", "steady_state", n, m.optim_dtype_bytes)

    # activations retained for backward
    def put_layer_set(tag):
        ab = m.activation_dtype_bytes
        put(tag + "input", "activation", b * s * d, ab)
        put(tag + "norm1_out", "activation", b * s * d, ab)
        put(tag + "q_out", "activation", b * s * d, ab)
        put(tag + "k_out", "activation", b * s * kv, ab)
        put(tag + "v_out", "activation", b * s * kv, ab)
        put(tag + "attn_probs", "activation", b * m.n_heads * s * s, ab)
        put(tag + "attn_ctx", "activation", b * s * d, ab)
        put(tag + "o_out", "activation", b * s * d, ab)
        put(tag + "norm2_out", "activation", b * s * d, ab)
        put(tag + "up_out", "activation", b * s * f, ab)
        put(tag + "gate_out", "activation", b * s * f, ab)
        put(tag + "silu_out", "activation", b * s * f, ab)
        put(tag + "ffn_prod", "activation", b * s * f, ab)
        put(tag + "down_out", "activation", b * s * d, ab)
        for kind, _dims in _SITES:
            put(tag + kind + ".xA", "activation", b * s * r, ab)
            put(tag + kind + ".gated", "activation", b * s * r, ab)

    if t.gradient_checkpointing:
        for L in range(m.n_layers):
            put(f"layer{L}.checkpoint", "activation", b * s * d,
                m.activation_dtype_bytes)
    else:
        for L in range(m.n_layers):
            put_layer_set(f"layer{L}.")
    put_layer_set("recompute.")  # worst-layer working set

    # loss head
    put("logits", "loss", b * s * v, m.activation_dtype_bytes)
    put("softmax_fp32", "loss", b * s * v, FULL_PRECISION_BYTES)
    return out


def oracle_breakdown(m: ModelSpec, t: TrainSpec) -> MemoryEstimate:
    """Sum the enumerated tensors per category; the independent check route."""
    totals = {"params": 0.0, "steady_state": 0.0, "activation": 0.0, "loss": 0.0}
    for alloc in enumerate_allocations(m, t):
        totals[alloc.category] += alloc.nbytes
    other = t.safety_margin * sum(totals.values())
    return MemoryEstimate(totals["params"], totals["steady_state"],
                          totals["activation"], totals["loss"], other)


# ---------------------------------------------------------------------------
# budget planning

def plan_rank_budget(m: ModelSpec, t: TrainSpec, memory_limit_bytes: float) -> int:
    """Largest per-site rank whose estimated peak fits the limit.

    The estimate is strictly increasing in rank, so a doubling search
    followed by bisection finds the boundary exactly.
    """
    def peak(r):
        return estimate_peak(m, replace(t, adapter_rank_per_site=r))

    if peak(0) > memory_limit_bytes:
        raise InfeasibleMemoryError(memory_limit_bytes, peak(0))
    if peak(1) > memory_limit_bytes:
        warnings.warn("memory limit only fits the rank-0 footprint")
        return 0
    hi = 1
    while peak(hi * 2) <= memory_limit_bytes:
        hi *= 2
    lo = hi  # peak(lo) feasible, peak(2*lo) not
    hi = 2 * hi
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if peak(mid) <= memory_limit_bytes:
            lo = mid
        else:
            hi = mid
    return lo


# ---------------------------------------------------------------------------
# JSON + text interfaces

def load_model_spec(path: str | Path) -> ModelSpec:
    return ModelSpec(**json.loads(Path(path).read_text()))


def load_train_spec(path: str | Path) -> TrainSpec:
    return TrainSpec(**json.loads(Path(path).read_text()))


_LABELS = (
    ("model parameters", "params_bytes"),
    ("steady state", "steady_state_bytes"),
    ("activation", "activation_bytes"),
    ("loss", "loss_bytes"),
    ("other", "other_bytes"),
)


def format_breakdown(est: MemoryEstimate) -> str:
    """Aligned text table, components in their canonical order plus the total."""
    rows = [(label, getattr(est, attr)) for label, attr in _LABELS]
    rows.append(("total peak", est.total_peak_bytes))
    width = max(len(label) for label, _ in rows)
    lines = [f"{label:<{width}}  {val:>18,.0f} B  ({val / 2**20:>10.2f} MiB)"
             for label, val in rows]
    return "\n".join(lines)
