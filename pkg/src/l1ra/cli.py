"""Command-line entry point: train, estimate, plan, report.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
Commands never mutate their input files.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from pathlib import Path

from . import memory, trainer

_BYTE_SUFFIXES = {"": 1, "B": 1, "KB": 1024, "MB": 1024**2,
                  "GB": 1024**3, "TB": 1024**4}


def parse_bytes(text: str) -> float:
    """Parse '2GB', '512MB', '1.5gb' or a bare count; powers of 1024."""
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+)\s*([KMGT]?i?B?)\s*", text,
                     flags=re.IGNORECASE)
    if not m:
        raise ValueError(f"cannot parse byte quantity {text!r}")
    suffix = m.group(2).upper().replace("IB", "B")
    if suffix not in _BYTE_SUFFIXES:
        raise ValueError(f"unknown byte suffix in {text!r}")
    return float(m.group(1)) * _BYTE_SUFFIXES[suffix]


def _load_specs(args) -> tuple[memory.ModelSpec, memory.TrainSpec]:
    return (memory.load_model_spec(args.model_spec),
            memory.load_train_spec(args.train_spec))


def cmd_train(args) -> int:
    cfg_path = Path(args.config)
    if not cfg_path.is_file():
        print(f"error: config file not found: {cfg_path}", file=sys.stderr)
        return 2
    try:
        cfg = trainer.TrainConfig.from_json(cfg_path)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.mode is not None:
            cfg = trainer.TrainConfig.from_dict(
                {**cfg.to_dict(), "mode": args.mode})
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        print(f"error: bad config {cfg_path}: {exc}", file=sys.stderr)
        return 2
    try:
        run = trainer.train(cfg, args.out)
    except trainer.TrainingDiverged as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return 1
    print(f"run written to {run.run_dir}")
    print(f"final val ppl {run.summary['final_val_ppl']:.4f}  "
          f"total rank {run.summary['final_total_rank']}  "
          f"spare {run.summary['spare']}")
    return 0


def cmd_estimate(args) -> int:
    try:
        mspec, tspec = _load_specs(args)
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        print(f"error: invalid spec: {exc}", file=sys.stderr)
        return 2
    est = memory.estimate_breakdown(mspec, tspec)
    if args.json:
        print(json.dumps(est.as_dict(), indent=2))
    else:
        print(memory.format_breakdown(est))
    return 0


def cmd_plan(args) -> int:
    try:
        mspec, tspec = _load_specs(args)
        limit = parse_bytes(args.memory_budget)
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return 2
    try:
        r = memory.plan_rank_budget(mspec, tspec, limit)
    except memory.InfeasibleMemoryError as exc:
        print(f"error: infeasible: {exc} (rank-0 footprint "
              f"{exc.rank0_bytes / 2**20:.2f} MiB)", file=sys.stderr)
        return 1
    total = 7 * mspec.n_layers * r
    print(f"max per-site rank: {r}")
    print(f"total rank budget (7 sites x {mspec.n_layers} layers): {total}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    ranks_csv = run_dir / "ranks.csv"
    if not ranks_csv.is_file():
        print(f"error: no ranks.csv under run dir {run_dir}", file=sys.stderr)
        return 2
    try:
        records = trainer.read_history_csv(ranks_csv)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out_dir = Path(args.out)
    written = trainer.export_rank_summaries(records, out_dir)
    written += _write_plots(records, out_dir)
    for path in written:
        print(f"wrote {path}")
    return 0


def _write_plots(records, out_dir: Path) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []

    header, rows = trainer.aggregate_kind_series(records)
    kinds = header[1:]
    steps = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    for j, kind in enumerate(kinds):
        ax.plot(steps, [r[1 + j] for r in rows], label=kind)
    ax.set_xlabel("step")
    ax.set_ylabel("mean rank across layers")
    ax.legend(ncol=4, fontsize=8)
    fig.tight_layout()
    path = out_dir / "rank_evolution.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    _, stats = trainer.aggregate_kind_final(records)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar([s[0] for s in stats], [s[1] for s in stats],
           yerr=[s[2] for s in stats], capsize=3)
    ax.set_ylabel("final mean rank")
    fig.tight_layout()
    path = out_dir / "final_distribution.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    grid_header, grid_rows = trainer.aggregate_layer_grid(records)
    mat = [[row[j] for j in range(1, len(grid_header))] for row in grid_rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    im = ax.imshow(mat, aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(grid_header) - 1), grid_header[1:])
    ax.set_yticks(range(len(grid_rows)), [f"layer {r[0]}" for r in grid_rows])
    fig.colorbar(im, ax=ax, label="final rank")
    fig.tight_layout()
    path = out_dir / "rank_grid.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)
    return written


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="l1ra",
        description="Dynamic-rank adapter training and memory planning")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="run a training experiment")
    p.add_argument("--config", required=True, help="TrainConfig JSON file")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--mode", choices=("l1ra", "lora"), default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("estimate", help="five-way peak-memory breakdown")
    p.add_argument("--model-spec", required=True)
    p.add_argument("--train-spec", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("plan", help="largest per-site rank fitting a memory budget")
    p.add_argument("--model-spec", required=True)
    p.add_argument("--train-spec", required=True)
    p.add_argument("--memory-budget", required=True,
                   help="bytes, with optional KB/MB/GB suffix (powers of 1024)")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("report", help="rank-history summaries and plots")
    p.add_argument("--run", required=True, help="training run directory")
    p.add_argument("--out", required=True, help="report output directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
