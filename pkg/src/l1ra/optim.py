"""Adam variant with decoupled elastic-net regularisation.

Two parameter groups: ordinary parameters get the usual Adam move (bias
corrected) followed by decoupled L2 decay scaled by the schedule; gate
vectors get the Adam move at a separate constant learning rate followed by
a decoupled L1 proximal step.  Keeping the L1 shrink outside the adaptive
rescaling is what lets gates hit exactly zero: the per-step shrink amount
is a constant lr_c * lam1, clamped at the zero crossing.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def soft_threshold(x, t: float):
    """sign(x) * max(|x| - t, 0); exact zero whenever |x| <= t."""
    if t < 0:
        raise ValueError(f"threshold must be non-negative, got {t}")
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


class _Moments:
    __slots__ = ("m", "v")

    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)


class AdamE:
    """Optimizer state plus the update rule; moments track parameter resizing."""

    def __init__(self, params: list[Tensor], gate_params: list[Tensor] = (),
                 lr: float = 1e-4, lr_c: float = 1e-2,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 lam1: float = 1e-3, lam2: float = 0.0):
        self.params = list(params)
        self.gate_params = list(gate_params)
        overlap = {id(p) for p in self.params} & {id(p) for p in self.gate_params}
        if overlap:
            raise ValueError("a parameter cannot be in both groups")
        self.lr = lr
        self.lr_c = lr_c
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.lam1 = lam1
        self.lam2 = lam2
        self.step_count = 0
        self._state: dict[int, _Moments] = {}

    def _moments(self, p: Tensor) -> _Moments:
        st = self._state.get(id(p))
        if st is None:
            st = _Moments(p.data.shape)
            self._state[id(p)] = st
        return st

    def step(self, schedule_scale: float = 1.0) -> None:
        """One update over all parameters; rejects non-finite gradients up front."""
        if not 0.0 <= schedule_scale <= 1.0:
            raise ValueError(f"schedule_scale must be in [0, 1], got {schedule_scale}")
        for p in self.params + self.gate_params:
            if p.grad is not None:
                if p.grad.shape != p.data.shape:
                    raise ValueError(
                        f"gradient shape {p.grad.shape} does not match "
                        f"parameter shape {p.data.shape}")
                if not np.isfinite(p.grad).all():
                    raise FloatingPointError("non-finite gradient; step rejected")

        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t

        for p in self.params:
            move = self._adam_move(p, bc1, bc2)
            p.data -= self.lr * schedule_scale * move
            if self.lam2 != 0.0:
                p.data -= self.lr * schedule_scale * self.lam2 * p.data

        for p in self.gate_params:
            move = self._adam_move(p, bc1, bc2)
            p.data -= self.lr_c * move
            if self.lam1 != 0.0:
                p.data = soft_threshold(p.data, self.lr_c * self.lam1)

    def _adam_move(self, p: Tensor, bc1: float, bc2: float) -> np.ndarray:
        st = self._moments(p)
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        st.m = self.beta1 * st.m + (1.0 - self.beta1) * g
        st.v = self.beta2 * st.v + (1.0 - self.beta2) * (g * g)
        return (st.m / bc1) / (np.sqrt(st.v / bc2) + self.eps)

    # -- resizing hooks used by the rank scheduler ---------------------------

    def prune_param_state(self, p: Tensor, keep: np.ndarray, axis: int) -> None:
        """Drop moment slices for removed indices, keeping alignment with p."""
        st = self._state.get(id(p))
        if st is not None:
            st.m = np.take(st.m, keep, axis=axis)
            st.v = np.take(st.v, keep, axis=axis)

    def extend_param_state(self, p: Tensor, n_new: int, axis: int) -> None:
        """Append zero moments for freshly added slices."""
        st = self._state.get(id(p))
        if st is not None:
            pad = [(0, 0)] * st.m.ndim
            pad[axis] = (0, n_new)
            st.m = np.pad(st.m, pad)
            st.v = np.pad(st.v, pad)
