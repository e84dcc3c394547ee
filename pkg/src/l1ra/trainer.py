"""Training loop tying together model, optimizer and rank scheduler.

Runs are deterministic for a fixed config and seed: every random choice
(base init, adapter init, batch sampling, dropout, reallocation draws)
comes from its own stream derived from the run seed, so metrics and rank
history files are byte-identical across repeated invocations.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import ToyTransformer, ToyTransformerConfig
from .optim import AdamE
from .scheduler import (RankLogRecord, SchedulerState, export_history_csv,
                        log_snapshot, rank_update_cycle)
from .tensor import Tape


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# corpus

# word pools for the built-in synthetic grammar; byte-level entropy is low
# enough that a 2-layer toy model can learn it quickly
_SUBJECTS = ("the cat", "a dog", "the owl", "my fox", "that bird")
_VERBS = ("sees", "likes", "finds", "follows", "wants")
_OBJECTS = ("a star", "the moon", "some food", "its tail", "the river")


def synthetic_corpus(n_chars: int, seed) -> str:
    rng = np.random.default_rng(seed)
    parts: list[str] = []
    total = 0
    while total < n_chars:
        s = _SUBJECTS[rng.integers(len(_SUBJECTS))]
        v = _VERBS[rng.integers(len(_VERBS))]
        o = _OBJECTS[rng.integers(len(_OBJECTS))]
        sent = f"{s} {v} {o}. "
        parts.append(sent)
        total += len(sent)
    return "".join(parts)[:n_chars]


@dataclass
class Corpus:
    train: np.ndarray  # [n_windows, seq_len] uint8 token ids
    val: np.ndarray
    test: np.ndarray


def tokenize_corpus(source: str | bytes | Path, seq_len: int) -> Corpus:
    """Byte-level tokens chunked into fixed windows, split 90/5/5 by index."""
    if isinstance(source, Path):
        raw = source.read_bytes()
    elif isinstance(source, str):
        raw = source.encode("utf-8")
    else:
        raw = source
    if len(raw) == 0:
        raise ValueError("empty corpus")
    tokens = np.frombuffer(raw, dtype=np.uint8)
    n_windows = len(tokens) // seq_len
    if n_windows < 3:
        raise ValueError(
            f"corpus too small: {len(tokens)} tokens yields {n_windows} "
            f"windows of {seq_len}")
    windows = tokens[:n_windows * seq_len].reshape(n_windows, seq_len)
    n_val = max(1, n_windows // 20)
    n_test = max(1, n_windows // 20)
    n_train = n_windows - n_val - n_test
    if n_train < 1:
        raise ValueError("corpus too small to leave a training split")
    return Corpus(train=windows[:n_train],
                  val=windows[n_train:n_train + n_val],
                  test=windows[n_train + n_val:])


# ---------------------------------------------------------------------------
# config bundle

@dataclass
class TrainConfig:
    model: ToyTransformerConfig = field(default_factory=ToyTransformerConfig)
    mode: str = "l1ra"  # or "lora"
    seed: int = 0
    steps: int = 1000
    batch_size: int = 8
    seq_len: int = 48
    accum_steps: int = 1
    eval_every: int = 100
    eval_batch_size: int = 16

    r_init: int = 4
    alpha: float = 16.0
    dropout_p: float = 0.0

    lr: float = 1e-4
    lr_c: float = 1e-2
    lam1: float = 1e-3
    lam2: float = 0.0
    warmup_ratio: float = 0.05
    cosine: bool = True
    grad_clip: float = 1.0

    update_period: int | None = None  # None -> ceil(5% of steps)
    carry_policy: str = "carry-over"
    scheduler_enabled: bool = True
    train_gates: bool = True

    corpus_path: str | None = None  # None -> built-in synthetic grammar
    corpus_chars: int = 200_000
    corpus_seed: int = 1234

    def __post_init__(self):
        if self.mode not in ("l1ra", "lora"):
            raise ValueError(f"mode must be 'l1ra' or 'lora', got {self.mode!r}")
        if self.mode == "lora":
            self.train_gates = False
            self.scheduler_enabled = False
            self.lam1 = 0.0
        if self.seq_len > self.model.max_seq_len:
            raise ValueError(
                f"seq_len {self.seq_len} exceeds model max {self.model.max_seq_len}")

    def resolved_update_period(self) -> int:
        if self.update_period is not None:
            return self.update_period
        return max(1, math.ceil(0.05 * self.steps))

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        model = d.pop("model", {})
        if isinstance(model, dict):
            model = dict(model)
            if "site_kinds" in model:
                model["site_kinds"] = tuple(model["site_kinds"])
            model = ToyTransformerConfig(**model)
        return TrainConfig(model=model, **d)

    @staticmethod
    def from_json(path: str | Path) -> "TrainConfig":
        return TrainConfig.from_dict(json.loads(Path(path).read_text()))


def lr_schedule_scale(step: int, total_steps: int, warmup_ratio: float,
                      cosine: bool = True) -> float:
    """Linear warm-up to 1, then cosine decay to 0 (or flat when disabled)."""
    warm = max(1, round(warmup_ratio * total_steps))
    if step <= warm:
        return step / warm
    if not cosine:
        return 1.0
    progress = (step - warm) / max(1, total_steps - warm)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# evaluation

def evaluate_ppl(model: ToyTransformer, windows: np.ndarray,
                 batch_size: int = 16) -> float:
    """exp of the mean per-token NLL over the split; data term only."""
    if len(windows) == 0:
        raise ValueError("empty evaluation split")
    total_nll = 0.0
    total_tokens = 0
    for i in range(0, len(windows), batch_size):
        batch = windows[i:i + batch_size]
        loss, _ = model.forward_loss(batch, lam1=0.0, train_mode=False)
        n = batch.shape[0] * (batch.shape[1] - 1)
        total_nll += loss.item() * n
        total_tokens += n
    return math.exp(total_nll / total_tokens)


# ---------------------------------------------------------------------------
# the run

@dataclass
class TrainRun:
    run_dir: Path
    config: TrainConfig
    metrics: list[dict]
    step_losses: list[float]
    scheduler_state: SchedulerState
    model: ToyTransformer
    optimizer: AdamE
    corpus: Corpus
    summary: dict


def _global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return math.sqrt(total)


def _clip_grads(params, max_norm: float) -> None:
    norm = _global_grad_norm(params)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= factor


def _dump_divergence(run_dir: Path, step: int, losses: list[float],
                     model: ToyTransformer, state: SchedulerState) -> None:
    payload = {
        "step": step,
        "recent_losses": losses[-20:],
        "ranks": {str(ad.site_id): ad.r for ad in model.adapter_list()},
        "spare": state.spare,
    }
    (run_dir / "diverged_state.json").write_text(json.dumps(payload, indent=2))


def train(cfg: TrainConfig, run_dir: str | Path) -> TrainRun:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    t_start = time.monotonic()

    # independent seed streams so cadence changes never shift other draws
    seed = cfg.seed
    data_rng = np.random.default_rng([seed, 1])
    dropout_rng = np.random.default_rng([seed, 2])

    if cfg.corpus_path is not None:
        corpus = tokenize_corpus(Path(cfg.corpus_path), cfg.seq_len)
    else:
        corpus = tokenize_corpus(synthetic_corpus(cfg.corpus_chars, cfg.corpus_seed),
                                 cfg.seq_len)

    model = ToyTransformer.build(cfg.model, [seed, 0])
    base_hash_before = model.base_hash()
    model.attach_adapters([seed, 4], r_init=cfg.r_init, alpha=cfg.alpha,
                          dropout_p=cfg.dropout_p)
    adapters = model.adapter_list()
    budget = model.rank_budget()
    state = SchedulerState(budget=budget,
                           update_period=cfg.resolved_update_period(),
                           carry_policy=cfg.carry_policy)

    weight_params = [p for ad in adapters for p in (ad.A, ad.B)]
    gate_params = [ad.c for ad in adapters]
    if not cfg.train_gates:
        for c in gate_params:
            c.requires_grad = False
        gate_params = []
    opt = AdamE(weight_params, gate_params, lr=cfg.lr, lr_c=cfg.lr_c,
                lam1=cfg.lam1, lam2=cfg.lam2)

    log_snapshot(adapters, state, step=0)
    metrics: list[dict] = []
    step_losses: list[float] = []
    n_train = len(corpus.train)

    for step in range(1, cfg.steps + 1):
        micro_losses = []
        have_grads = False
        for _ in range(cfg.accum_steps):
            idx = data_rng.integers(0, n_train, size=cfg.batch_size)
            batch = corpus.train[idx]
            with Tape():
                loss, _pen = model.forward_loss(batch, lam1=cfg.lam1,
                                                train_mode=True, rng=dropout_rng)
                # fully pruned adapters leave nothing trainable in the graph
                if loss.requires_grad:
                    T.backward(T.scale(loss, 1.0 / cfg.accum_steps))
                    have_grads = True
            micro_losses.append(loss.item())
        data_loss = float(np.mean(micro_losses))
        step_losses.append(data_loss)
        if not math.isfinite(data_loss):
            _dump_divergence(run_dir, step, step_losses, model, state)
            raise TrainingDiverged(f"non-finite loss {data_loss} at step {step}; "
                                   f"state dumped to {run_dir}")

        trainable = weight_params + gate_params
        if have_grads:
            if cfg.grad_clip > 0:
                _clip_grads(trainable, cfg.grad_clip)
            opt.step(lr_schedule_scale(step, cfg.steps, cfg.warmup_ratio,
                                       cfg.cosine))
            for p in trainable:
                p.grad = None

        if cfg.scheduler_enabled and step % state.update_period == 0:
            rank_update_cycle(adapters, state, step,
                              seed=np.random.default_rng([seed, 5, step]),
                              optimizer=opt)

        if step % cfg.eval_every == 0 or step == cfg.steps:
            ppl = evaluate_ppl(model, corpus.val, cfg.eval_batch_size)
            total_rank = sum(ad.r for ad in adapters)
            l1_pen = cfg.lam1 * sum(float(np.abs(ad.c.data).sum())
                                    for ad in adapters)
            metrics.append({
                "step": step,
                "data_loss": data_loss,
                "ppl": ppl,
                "l1_penalty": l1_pen,
                "total_rank": total_rank,
                "spare": state.spare,
            })

    if model.base_hash() != base_hash_before:
        raise RuntimeError("frozen base weights changed during training")

    test_ppl = evaluate_ppl(model, corpus.test, cfg.eval_batch_size)
    summary = {
        "mode": cfg.mode,
        "steps": cfg.steps,
        "budget": budget,
        "final_total_rank": sum(ad.r for ad in adapters),
        "spare": state.spare,
        "final_val_ppl": metrics[-1]["ppl"] if metrics else None,
        "final_test_ppl": test_ppl,
        "final_ranks": {str(ad.site_id): ad.r for ad in adapters},
        "pruned_total": budget - min(r["total_rank"] + r["spare"]
                                     for r in metrics) if metrics else 0,
        "frozen_base_ok": True,
        "runtime_s": round(time.monotonic() - t_start, 3),
    }

    _write_run_files(run_dir, cfg, metrics, state, model, summary)
    return TrainRun(run_dir, cfg, metrics, step_losses, state, model, opt,
                    corpus, summary)


_METRIC_FIELDS = ("step", "data_loss", "ppl", "l1_penalty", "total_rank", "spare")


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _write_run_files(run_dir: Path, cfg: TrainConfig, metrics: list[dict],
                     state: SchedulerState, model: ToyTransformer,
                     summary: dict) -> None:
    from .adapters import save_adapters

    (run_dir / "config.json").write_text(
        json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    with open(run_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_METRIC_FIELDS)
        for row in metrics:
            writer.writerow([_fmt(row[k]) for k in _METRIC_FIELDS])
    export_history_csv(state, run_dir / "ranks.csv")
    save_adapters(model.adapter_list(), run_dir / "adapters.json")
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2))


# ---------------------------------------------------------------------------
# rank-history aggregation (the four report artifacts)

def read_history_csv(path: str | Path) -> list[RankLogRecord]:
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            min_c = None if row["min_c"] == "" else float(row["min_c"])
            records.append(RankLogRecord(int(row["step"]), int(row["layer"]),
                                         row["site"], int(row["rank"]), min_c))
    if not records:
        raise ValueError(f"no rank history in {path}")
    return records


def _kinds_in(records: list[RankLogRecord]) -> list[str]:
    from .adapters import SITE_KINDS
    present = {r.kind for r in records}
    return [k for k in SITE_KINDS if k in present]


def aggregate_kind_series(records: list[RankLogRecord]) -> tuple[list[str], list[list]]:
    """Per-step mean rank across layers for each site kind."""
    kinds = _kinds_in(records)
    steps = sorted({r.step for r in records})
    by = {}
    for r in records:
        by.setdefault((r.step, r.kind), []).append(r.rank)
    rows = [[s] + [float(np.mean(by[(s, k)])) for k in kinds] for s in steps]
    return ["step"] + kinds, rows


def aggregate_kind_final(records: list[RankLogRecord]) -> tuple[list[str], list[list]]:
    """End-of-history mean and (population) std of rank per site kind."""
    kinds = _kinds_in(records)
    last = max(r.step for r in records)
    rows = []
    for k in kinds:
        ranks = [r.rank for r in records if r.step == last and r.kind == k]
        rows.append([k, float(np.mean(ranks)), float(np.std(ranks))])
    return ["site", "mean_rank", "std_rank"], rows


def aggregate_layer_grid(records: list[RankLogRecord]) -> tuple[list[str], list[list]]:
    """Final rank for every (layer, kind) cell."""
    kinds = _kinds_in(records)
    last = max(r.step for r in records)
    final = {(r.layer, r.kind): r.rank for r in records if r.step == last}
    layers = sorted({r.layer for r in records})
    rows = [[L] + [final[(L, k)] for k in kinds] for L in layers]
    return ["layer"] + kinds, rows


def export_rank_summaries(records: list[RankLogRecord], out_dir: str | Path) -> list[Path]:
    """Write the four aggregation artifacts; returns the paths written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def write(name, header, rows):
        path = out_dir / name
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_fmt(v) for v in row])
        written.append(path)

    hist_rows = [[r.step, r.layer, r.kind, r.rank,
                  "" if r.min_c is None else repr(r.min_c)] for r in records]
    write("rank_history.csv", ["step", "layer", "site", "rank", "min_c"], hist_rows)
    write("kind_mean_series.csv", *aggregate_kind_series(records))
    write("kind_final_stats.csv", *aggregate_kind_final(records))
    write("final_rank_grid.csv", *aggregate_layer_grid(records))
    return written
