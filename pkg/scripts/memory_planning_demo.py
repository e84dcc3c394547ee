#!/usr/bin/env python3
"""Peak-memory estimates and rank planning for the bundled 8B-class spec.

Prints the five-way breakdown at the reference batch/sequence settings, a
batch-size sweep, and the largest feasible adapter rank for a few common
GPU memory sizes.

Usage:
    python scripts/memory_planning_demo.py
"""

import sys
from dataclasses import replace
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from l1ra.memory import (InfeasibleMemoryError, estimate_breakdown,
                         estimate_peak, format_breakdown, load_model_spec,
                         load_train_spec, plan_rank_budget)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def run() -> int:
    m = load_model_spec(CONFIGS / "model_spec_8b.json")
    t = load_train_spec(CONFIGS / "train_spec_8b.json")

    print(f"spec: {m.n_layers} layers, d_model {m.d_model}, "
          f"{m.base_dtype_bytes} B/weight base, rank {t.adapter_rank_per_site}")
    print(format_breakdown(estimate_breakdown(m, t)))

    print("\nbatch-size sweep (seq 1024, rank 16):")
    for b in (1, 2, 4, 8, 16):
        peak = estimate_peak(m, replace(t, batch_size=b))
        print(f"  batch {b:>2}: {peak / 2**30:8.2f} GiB")

    print("\nlargest feasible per-site rank by memory budget:")
    for gib in (8, 12, 16, 24, 48):
        try:
            r = plan_rank_budget(m, t, gib * 2**30)
            total = 7 * m.n_layers * r
            print(f"  {gib:>2} GiB: rank {r:>4}  (total budget {total})")
        except InfeasibleMemoryError as exc:
            print(f"  {gib:>2} GiB: infeasible "
                  f"(rank-0 footprint {exc.rank0_bytes / 2**30:.2f} GiB)")
    return 0


if __name__ == "__main__":
    sys.exit(run())
