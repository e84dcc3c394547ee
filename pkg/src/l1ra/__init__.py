"""Budget-conserving dynamic-rank low-rank adapters and a peak-memory planner."""

from .adapters import (AdapterConfig, L1raAdapter, SiteId, forward_l1ra,
                       forward_lora, init_adapter, merge_delta)
from .memory import (MemoryEstimate, ModelSpec, TrainSpec, estimate_breakdown,
                     estimate_peak, plan_rank_budget)
from .model import ToyTransformer, ToyTransformerConfig, build_model
from .optim import AdamE, soft_threshold
from .scheduler import (SchedulerState, prune, rank_update_cycle, reallocate,
                        reallocation_order)
from .tensor import Tape, Tensor, backward, grad_check
from .trainer import TrainConfig, TrainRun, evaluate_ppl, tokenize_corpus, train

__all__ = [
    "AdapterConfig", "L1raAdapter", "SiteId", "forward_l1ra", "forward_lora",
    "init_adapter", "merge_delta", "MemoryEstimate", "ModelSpec", "TrainSpec",
    "estimate_breakdown", "estimate_peak", "plan_rank_budget", "ToyTransformer",
    "ToyTransformerConfig", "build_model", "AdamE", "soft_threshold",
    "SchedulerState", "prune", "rank_update_cycle", "reallocate",
    "reallocation_order", "Tape", "Tensor", "backward", "grad_check",
    "TrainConfig", "TrainRun", "evaluate_ppl", "tokenize_corpus", "train",
]
