"""Rank scheduling: prune zero-gated slices, reallocate spares, conserve budget.

A cycle runs every ``update_period`` optimizer steps.  Any adapter with at
least one exactly-zero gate component loses those slices (the zeros were
produced by the optimizer's clamped soft-threshold, so exact equality is the
right test).  Freed ranks are granted one at a time, round-robin, to the
unpruned adapters ordered by decreasing minimum gate value; the total of all
ranks plus the spare counter equals the initial budget after every cycle.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapters import L1raAdapter
from .optim import AdamE


@dataclass
class RankLogRecord:
    step: int
    layer: int
    kind: str
    rank: int
    min_c: float | None  # None when rank is 0


@dataclass
class SchedulerState:
    budget: int
    update_period: int
    carry_policy: str = "carry-over"  # or "discard"
    spare: int = 0
    history: list[RankLogRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.carry_policy not in ("carry-over", "discard"):
            raise ValueError(f"unknown carry policy {self.carry_policy!r}")
        if self.update_period < 1:
            raise ValueError(f"update_period must be >= 1, got {self.update_period}")


def _reset_grads(ad: L1raAdapter) -> None:
    for p in ad.parameters():
        p.grad = None


def prune(ad: L1raAdapter, optimizer: AdamE | None = None) -> int:
    """Remove every rank slice whose gate is exactly 0; returns the count removed.

    A columns, c entries, B rows and the optimizer moments are dropped in
    lockstep, so the adapter's forward function is unchanged.
    """
    zero = ad.c.data == 0.0
    n_pruned = int(zero.sum())
    if n_pruned == 0:
        return 0
    keep = np.flatnonzero(~zero)
    ad.A.data = np.take(ad.A.data, keep, axis=1)
    ad.c.data = np.take(ad.c.data, keep, axis=0)
    ad.B.data = np.take(ad.B.data, keep, axis=0)
    _reset_grads(ad)
    if optimizer is not None:
        optimizer.prune_param_state(ad.A, keep, axis=1)
        optimizer.prune_param_state(ad.c, keep, axis=0)
        optimizer.prune_param_state(ad.B, keep, axis=0)
    return n_pruned


def reallocation_order(unpruned: list[L1raAdapter]) -> list[L1raAdapter]:
    """Sort by decreasing min(c); ties broken by (layer, site kind) ascending."""
    for ad in unpruned:
        if ad.r < 1:
            raise ValueError(f"rank-0 adapter {ad.site_id} is not eligible for reallocation")
        if (ad.c.data == 0.0).any():
            raise ValueError(f"adapter {ad.site_id} still has zero gates; prune first")
    return sorted(unpruned,
                  key=lambda ad: (-float(ad.c.data.min()),
                                  ad.site_id.layer, ad.site_id.kind_index))


def reallocate(ad: L1raAdapter, seed, optimizer: AdamE | None = None) -> L1raAdapter:
    """Grant one rank: fresh Gaussian A column, zero B row, unit gate, then
    renormalize the gate vector to unit sum (skipped when the sum is ~0)."""
    if ad.r < 1:
        raise ValueError(f"rank-0 adapter {ad.site_id} cannot receive ranks")
    rng = np.random.default_rng(seed)
    new_col = rng.normal(0.0, ad.init_sigma, size=(ad.d_in, 1))
    ad.A.data = np.concatenate([ad.A.data, new_col], axis=1)
    ad.B.data = np.concatenate([ad.B.data, np.zeros((1, ad.d_out))], axis=0)
    ad.c.data = np.concatenate([ad.c.data, np.ones(1)])
    total = float(ad.c.data.sum())
    if abs(total) >= 1e-8:
        ad.c.data = ad.c.data / total
    _reset_grads(ad)
    if optimizer is not None:
        optimizer.extend_param_state(ad.A, 1, axis=1)
        optimizer.extend_param_state(ad.c, 1, axis=0)
        optimizer.extend_param_state(ad.B, 1, axis=0)
    return ad


def log_snapshot(adapters: list[L1raAdapter], state: SchedulerState, step: int) -> None:
    for ad in adapters:
        min_c = float(ad.c.data.min()) if ad.r > 0 else None
        state.history.append(
            RankLogRecord(step, ad.site_id.layer, ad.site_id.kind, ad.r, min_c))


def rank_update_cycle(adapters: list[L1raAdapter], state: SchedulerState,
                      step: int, seed, optimizer: AdamE | None = None) -> None:
    """One prune/reallocate cycle over all adapters; appends a history record
    per site and enforces exact budget conservation."""
    if step % state.update_period != 0:
        raise ValueError(
            f"cycle called at step {step}, not a multiple of {state.update_period}")
    rng = np.random.default_rng(seed)

    freed = 0
    unpruned: list[L1raAdapter] = []
    for ad in adapters:
        if ad.r > 0 and (ad.c.data == 0.0).any():
            freed += prune(ad, optimizer)
        elif ad.r >= 1:
            unpruned.append(ad)
        # rank-0 adapters stay out of the pool: min(c) is undefined for them

    parked = 0 if state.carry_policy == "carry-over" else state.spare
    pool = freed + (state.spare if state.carry_policy == "carry-over" else 0)

    if unpruned and pool > 0:
        order = reallocation_order(unpruned)
        while pool > 0:
            for ad in order:
                if pool <= 0:
                    break
                reallocate(ad, rng, optimizer)
                pool -= 1

    state.spare = parked + pool
    total = sum(ad.r for ad in adapters)
    if total + state.spare != state.budget:
        raise RuntimeError(
            f"rank budget violated: {total} ranks + {state.spare} spare != "
            f"{state.budget} budget")
    log_snapshot(adapters, state, step)


def export_history_csv(state: SchedulerState, path: str | Path) -> None:
    """Write the rank history as step,layer,site,rank,min_c rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "layer", "site", "rank", "min_c"])
        for rec in state.history:
            min_c = "" if rec.min_c is None else repr(rec.min_c)
            writer.writerow([rec.step, rec.layer, rec.kind, rec.rank, min_c])
