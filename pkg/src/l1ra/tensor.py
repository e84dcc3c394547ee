"""Dense-array reverse-mode autodiff: tensors, a replayable gradient tape, and ops.

Everything is computed in numpy float64 by default (float32 available via
``set_default_dtype``).  Operations record their backward rule onto the
currently active ``Tape``; with no tape active they run forward-only, which
is how evaluation avoids keeping intermediates alive.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float64

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def set_default_dtype(dtype) -> None:
    global DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    DEFAULT_DTYPE = dtype


class Tensor:
    """Dense row-major array with an additively accumulated gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


class Tape:
    """Ordered record of backward rules for one forward pass.

    Replaying the records in reverse visits every recorded op exactly once;
    consuming the tape clears the records, which drops the last references
    to the recorded intermediates.
    """

    def __init__(self):
        self._records: list = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE.pop()

    def __len__(self) -> int:
        return len(self._records)

    def _add(self, fn) -> None:
        self._records.append(fn)


_ACTIVE: list[Tape] = []


def _current_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _result(data: np.ndarray, *inputs: Tensor) -> Tensor:
    tape = _current_tape()
    recording = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = recording
    out.grad = None
    out._tape = tape if recording else None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from a scalar loss."""
    if loss.data.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise RuntimeError("loss was not recorded on a live tape")
    if tape.consumed:
        raise RuntimeError("tape already consumed")
    loss.grad = np.ones_like(loss.data)
    for fn in reversed(tape._records):
        fn()
    tape._records.clear()
    tape.consumed = True


# ---------------------------------------------------------------------------
# primitive ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = _result(a.data @ b.data, a, b)
    if out._tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accum(a, g @ b.data.T)
            if b.requires_grad:
                _accum(b, a.data.T @ g)
        out._tape._add(bw)
    return out


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> bool:
    """Return True when b broadcasts along rows (b is 1-D over a's columns)."""
    if a.data.shape == b.data.shape:
        return False
    if a.data.ndim == 2 and b.data.shape == (a.data.shape[1],):
        return True
    raise ValueError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    rowcast = _binary_shapes(a, b, "add")
    out = _result(a.data + b.data, a, b)
    if out._tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accum(a, g)
            if b.requires_grad:
                _accum(b, g.sum(axis=0) if rowcast else g)
        out._tape._add(bw)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    rowcast = _binary_shapes(a, b, "sub")
    out = _result(a.data - b.data, a, b)
    if out._tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accum(a, g)
            if b.requires_grad:
                _accum(b, -(g.sum(axis=0) if rowcast else g))
        out._tape._add(bw)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    rowcast = _binary_shapes(a, b, "mul")
    out = _result(a.data * b.data, a, b)
    if out._tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accum(a, g * b.data)
            if b.requires_grad:
                gb = g * a.data
                _accum(b, gb.sum(axis=0) if rowcast else gb)
        out._tape._add(bw)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = _result(a.data * s, a)
    if out._tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            _accum(a, g * s)
        out._tape._add(bw)
    return out


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = _result(a.data * sig, a)
    if out._tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            _accum(a, g * sig * (1.0 + a.data * (1.0 - sig)))
        out._tape._add(bw)
    return out


def gelu(a: Tensor) -> Tensor:
    phi = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = _result(a.data * phi, a)
    if out._tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            dens = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
            _accum(a, g * (phi + a.data * dens))
        out._tape._add(bw)
    return out


def layer_norm(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Standardize each row to mean 0, variance 1 (no affine)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = _result(y, a)
    if out._tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            gm = g.mean(axis=-1, keepdims=True)
            gym = (g * y).mean(axis=-1, keepdims=True)
            _accum(a, (g - gm - y * gym) * inv)
        out._tape._add(bw)
    return out


def rms_norm(a: Tensor, eps: float = 1e-8) -> Tensor:
    """Divide each row by its root-mean-square (no centering, no affine)."""
    n = a.data.shape[-1]
    ms = (a.data * a.data).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    out = _result(a.data * inv, a)
    if out._tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            gx = (g * a.data).sum(axis=-1, keepdims=True)
            _accum(a, g * inv - a.data * (gx * inv**3 / n))
        out._tape._add(bw)
    return out


def softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row softmax; mask is an additive constant array (use -inf to exclude)."""
    z = a.data if mask is None else a.data + mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _result(y, a)
    if out._tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            dot = (g * y).sum(axis=-1, keepdims=True)
            _accum(a, (g - dot) * y)
        out._tape._add(bw)
    return out


def transpose(a: Tensor) -> Tensor:
    out = _result(a.data.T.copy(), a)
    if out._tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            _accum(a, g.T)
        out._tape._add(bw)
    return out


def _slice_op(a: Tensor, i0: int, i1: int, axis: int) -> Tensor:
    data = a.data[i0:i1].copy() if axis == 0 else a.data[:, i0:i1].copy()
    out = _result(data, a)
    if out._tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            if axis == 0:
                a.grad[i0:i1] += g
            else:
                a.grad[:, i0:i1] += g
        out._tape._add(bw)
    return out


def rows(a: Tensor, i0: int, i1: int) -> Tensor:
    return _slice_op(a, i0, i1, axis=0)


def cols(a: Tensor, j0: int, j1: int) -> Tensor:
    return _slice_op(a, j0, j1, axis=1)


def _concat_op(parts: list[Tensor], axis: int) -> Tensor:
    out = _result(np.concatenate([p.data for p in parts], axis=axis), *parts)
    if out._tape is not None:
        sizes = [p.data.shape[axis] for p in parts]
        def bw():
            g = out.grad
            if g is None:
                return
            off = 0
            for p, size in zip(parts, sizes):
                if p.requires_grad:
                    piece = g[off:off + size] if axis == 0 else g[:, off:off + size]
                    _accum(p, piece)
                off += size
        out._tape._add(bw)
    return out


def concat_rows(parts: list[Tensor]) -> Tensor:
    return _concat_op(parts, axis=0)


def concat_cols(parts: list[Tensor]) -> Tensor:
    return _concat_op(parts, axis=1)


def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    out = _result(table.data[idx], table)
    if out._tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, idx, g)
        out._tape._add(bw)
    return out


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; p == 0 is an exact identity (no op recorded)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return a
    mask = (rng.random(a.data.shape) >= p) / (1.0 - p)
    out = _result(a.data * mask, a)
    if out._tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            _accum(a, g * mask)
        out._tape._add(bw)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = _result(a.data.sum(), a)
    if out._tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            _accum(a, np.full_like(a.data, float(g)))
        out._tape._add(bw)
    return out


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = _result(a.data.mean(), a)
    if out._tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            _accum(a, np.full_like(a.data, float(g) / n))
        out._tape._add(bw)
    return out


def softmax_xent(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under row-softmax logits."""
    targets = np.asarray(targets, dtype=np.int64)
    n, v = logits.data.shape
    if targets.shape != (n,):
        raise ValueError(f"targets shape {targets.shape} does not match {n} logit rows")
    if targets.min() < 0 or targets.max() >= v:
        bad = targets[(targets < 0) | (targets >= v)][0]
        raise ValueError(f"target index {bad} out of range for vocab size {v}")
    zmax = logits.data.max(axis=-1, keepdims=True)
    e = np.exp(logits.data - zmax)
    lse = np.log(e.sum(axis=-1)) + zmax[:, 0]
    nll = (lse - logits.data[np.arange(n), targets]).mean()
    out = _result(np.asarray(nll), logits)
    if out._tape is not None:
        probs = e / e.sum(axis=-1, keepdims=True)
        def bw():
            g = out.grad
            if g is None:
                return
            gl = probs.copy()
            gl[np.arange(n), targets] -= 1.0
            _accum(logits, gl * (float(g) / n))
        out._tape._add(bw)
    return out


_UNARY_KINDS = {
    "silu": silu,
    "gelu": gelu,
    "layer_norm": layer_norm,
    "rms_norm": rms_norm,
    "softmax_rows": softmax_rows,
    "sum": sum_all,
    "mean": mean_all,
}
_BINARY_KINDS = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by kind name; covers the add/mul/scale/nonlinearity/norm family."""
    if kind == "scale":
        if not isinstance(b, (int, float)):
            raise ValueError("scale needs a numeric second argument")
        return scale(a, float(b))
    if kind in _BINARY_KINDS:
        if not isinstance(b, Tensor):
            raise ValueError(f"{kind} needs a Tensor second argument")
        return _BINARY_KINDS[kind](a, b)
    if kind in _UNARY_KINDS:
        if b is not None:
            raise ValueError(f"{kind} takes no second argument")
        return _UNARY_KINDS[kind](a)
    raise ValueError(f"unsupported elementwise kind {kind!r}")


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Worst relative error of backward grads vs central differences on f(x).

    The denominator is max(|analytic|, |numeric|, 1e-12) elementwise.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x.grad = None
    with Tape():
        out = f(x)
        if out.data.shape != ():
            raise ValueError(f"grad_check needs a scalar-valued f, got shape {out.shape}")
        backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x).data)
        flat[i] = orig - eps
        fm = float(f(x).data)
        flat[i] = orig
        num_flat[i] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float((np.abs(analytic - numeric) / denom).max())
