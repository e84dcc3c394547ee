#!/usr/bin/env python3
"""Train the gated dynamic-rank run and the fixed-rank baseline side by side.

Both runs share the seed, corpus, budget and schedule; the only differences
are the gate vector training, the L1 shrinkage and the rank update cycle.
Writes both run directories plus the four rank-report artifacts and plots.

Usage:
    python scripts/compare_baseline.py --out /tmp/compare [--steps 600]
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from l1ra.cli import main as cli_main
from l1ra.model import ToyTransformerConfig
from l1ra.trainer import TrainConfig, train


def run(args) -> int:
    out = Path(args.out)
    base = dict(
        model=ToyTransformerConfig(n_layers=2, n_heads=4, d_model=64, d_ff=256,
                                   vocab_size=256, max_seq_len=48),
        seed=args.seed, steps=args.steps, batch_size=8, seq_len=48,
        eval_every=max(1, args.steps // 6), r_init=4, lr=1e-3, lr_c=1e-2,
        update_period=max(1, args.steps // 20), corpus_chars=120_000)

    gated = train(TrainConfig(**base, mode="l1ra", lam1=args.lam1), out / "l1ra")
    plain = train(TrainConfig(**base, mode="lora"), out / "lora")

    print(f"\n{'':14}{'gated':>10}{'baseline':>10}")
    print(f"{'val ppl':14}{gated.summary['final_val_ppl']:>10.4f}"
          f"{plain.summary['final_val_ppl']:>10.4f}")
    print(f"{'test ppl':14}{gated.summary['final_test_ppl']:>10.4f}"
          f"{plain.summary['final_test_ppl']:>10.4f}")
    print(f"{'total rank':14}{gated.summary['final_total_rank']:>10}"
          f"{plain.summary['final_total_rank']:>10}")
    print(f"{'spare':14}{gated.summary['spare']:>10}{plain.summary['spare']:>10}")
    print(f"{'runtime [s]':14}{gated.summary['runtime_s']:>10.1f}"
          f"{plain.summary['runtime_s']:>10.1f}")

    ranks = gated.summary["final_ranks"]
    print("\nfinal ranks per site (gated run):")
    for layer in range(base["model"].n_layers):
        row = {k.split(".")[1]: v for k, v in ranks.items()
               if k.startswith(f"layer{layer}.")}
        cells = "  ".join(f"{kind}={row[kind]}" for kind in
                          ("q", "k", "v", "o", "up", "gate", "down"))
        print(f"  layer {layer}: {cells}")

    return cli_main(["report", "--run", str(out / "l1ra"),
                     "--out", str(out / "report")])


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--steps", type=int, default=600)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lam1", type=float, default=1.0,
                    help="gate L1 coefficient; ~1.0 moves ranks within 600 steps")
    sys.exit(run(ap.parse_args()))
