"""Toy decoder-only transformer with per-layer adapter sites.

The layer mirrors the LLaMa shape so all seven projection kinds exist:
RMS-normed causal self-attention (q, k, v, o) and an RMS-normed
SiLU-gated feed-forward block (up, gate, down).  Base weights are frozen;
only attached adapters receive gradients.  The L1 penalty on the gate
vectors is reported as a diagnostic scalar and never enters backward --
its effect on training comes from the optimizer's decoupled shrinkage.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .adapters import (SITE_KINDS, AdapterConfig, L1raAdapter, SiteId,
                       forward_l1ra, init_adapter)
from .tensor import Tensor


@dataclass
class ToyTransformerConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int | None = None  # None -> 4 * d_model
    vocab_size: int = 256
    max_seq_len: int = 64
    tie_embeddings: bool = False
    site_kinds: tuple = SITE_KINDS

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        if min(self.n_layers, self.n_heads, self.d_model, self.d_ff,
               self.vocab_size, self.max_seq_len) < 1:
            raise ValueError("all model dimensions must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    def site_dims(self, kind: str) -> tuple[int, int]:
        if kind in ("q", "k", "v", "o"):
            return self.d_model, self.d_model
        if kind in ("up", "gate"):
            return self.d_model, self.d_ff
        if kind == "down":
            return self.d_ff, self.d_model
        raise ValueError(f"unknown site kind {kind!r}")


# init scale for the output head; large enough that an adapted model can
# drive near-deterministic predictions through the frozen readout
_HEAD_SIGMA = 0.2


class ToyTransformer:
    """Frozen base weights plus an optional adapter per projection site."""

    def __init__(self, cfg: ToyTransformerConfig, weights: dict[str, Tensor]):
        self.cfg = cfg
        self.weights = weights
        self.adapters: dict[SiteId, L1raAdapter] = {}

    # -- construction --------------------------------------------------------

    @staticmethod
    def build(cfg: ToyTransformerConfig, seed) -> "ToyTransformer":
        rng = np.random.default_rng(seed)
        d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
        w: dict[str, Tensor] = {}

        def base(name, arr):
            w[name] = Tensor(arr, requires_grad=False)

        base("embed", rng.normal(0.0, 1.0, size=(v, d)))
        base("pos", rng.normal(0.0, 0.1, size=(cfg.max_seq_len, d)))
        for layer in range(cfg.n_layers):
            p = f"layer{layer}."
            base(p + "norm1_gain", np.ones(d))
            for kind in ("q", "k", "v", "o"):
                base(p + kind, rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d)))
            base(p + "norm2_gain", np.ones(d))
            base(p + "up", rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, f)))
            base(p + "gate", rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, f)))
            base(p + "down", rng.normal(0.0, 1.0 / math.sqrt(f), size=(f, d)))
        base("final_norm_gain", np.ones(d))
        if not cfg.tie_embeddings:
            base("lm_head", rng.normal(0.0, _HEAD_SIGMA, size=(d, v)))
        return ToyTransformer(cfg, w)

    def sites(self) -> list[SiteId]:
        return [SiteId(layer, kind)
                for layer in range(self.cfg.n_layers)
                for kind in self.cfg.site_kinds]

    def attach_adapters(self, seed, r_init: int, alpha: float = 16.0,
                        dropout_p: float = 0.0, init_sigma: float | None = None) -> None:
        if self.adapters:
            raise RuntimeError("adapters already attached")
        rng = np.random.default_rng(seed)
        for site in self.sites():
            d_in, d_out = self.cfg.site_dims(site.kind)
            cfg = AdapterConfig(d_in=d_in, d_out=d_out, r_init=r_init, alpha=alpha,
                                dropout_p=dropout_p, init_sigma=init_sigma)
            self.adapters[site] = init_adapter(cfg, rng, site_id=site)

    def adapter_list(self) -> list[L1raAdapter]:
        return [self.adapters[s] for s in self.sites() if s in self.adapters]

    def rank_budget(self) -> int:
        return sum(ad.r for ad in self.adapter_list())

    def num_base_params(self) -> int:
        return sum(t.data.size for t in self.weights.values())

    def base_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(self.weights[name].data.tobytes())
        return h.hexdigest()

    # -- forward -------------------------------------------------------------

    def _site_forward(self, site: SiteId, x: Tensor, train_mode: bool,
                      rng: np.random.Generator | None) -> Tensor:
        W = self.weights[f"layer{site.layer}.{site.kind}"]
        ad = self.adapters.get(site)
        if ad is None:
            return T.matmul(x, W)
        return forward_l1ra(ad, x, W, train_mode=train_mode, rng=rng)

    def forward(self, tokens: np.ndarray, train_mode: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        """Logits for a [batch, time] int array, flattened to [batch*time, vocab]."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise ValueError(f"tokens must be 2-D [batch, time], got {tokens.shape}")
        bsz, tlen = tokens.shape
        if tlen > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {tlen} exceeds max {self.cfg.max_seq_len}")
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size:
            raise ValueError("token id out of range for vocab size "
                             f"{self.cfg.vocab_size}")
        d, heads = self.cfg.d_model, self.cfg.n_heads
        dh = d // heads
        inv_sqrt_dh = 1.0 / math.sqrt(dh)
        causal = np.triu(np.full((tlen, tlen), -np.inf), k=1)

        emb = T.gather_rows(self.weights["embed"], tokens.reshape(-1))
        pos = T.gather_rows(self.weights["pos"], np.tile(np.arange(tlen), bsz))
        x = T.add(emb, pos)

        for layer in range(self.cfg.n_layers):
            p = f"layer{layer}."
            n1 = T.mul(T.rms_norm(x), self.weights[p + "norm1_gain"])
            q = self._site_forward(SiteId(layer, "q"), n1, train_mode, rng)
            k = self._site_forward(SiteId(layer, "k"), n1, train_mode, rng)
            v = self._site_forward(SiteId(layer, "v"), n1, train_mode, rng)
            ctx_rows = []
            for b in range(bsz):
                qb = T.rows(q, b * tlen, (b + 1) * tlen)
                kb = T.rows(k, b * tlen, (b + 1) * tlen)
                vb = T.rows(v, b * tlen, (b + 1) * tlen)
                head_cols = []
                for h in range(heads):
                    qh = T.cols(qb, h * dh, (h + 1) * dh)
                    kh = T.cols(kb, h * dh, (h + 1) * dh)
                    vh = T.cols(vb, h * dh, (h + 1) * dh)
                    scores = T.scale(T.matmul(qh, T.transpose(kh)), inv_sqrt_dh)
                    probs = T.softmax_rows(scores, mask=causal)
                    head_cols.append(T.matmul(probs, vh))
                ctx_rows.append(T.concat_cols(head_cols))
            ctx = T.concat_rows(ctx_rows) if bsz > 1 else ctx_rows[0]
            x = T.add(x, self._site_forward(SiteId(layer, "o"), ctx, train_mode, rng))

            n2 = T.mul(T.rms_norm(x), self.weights[p + "norm2_gain"])
            up = self._site_forward(SiteId(layer, "up"), n2, train_mode, rng)
            gate = self._site_forward(SiteId(layer, "gate"), n2, train_mode, rng)
            ff = T.mul(T.silu(gate), up)
            x = T.add(x, self._site_forward(SiteId(layer, "down"), ff, train_mode, rng))

        final = T.mul(T.rms_norm(x), self.weights["final_norm_gain"])
        if self.cfg.tie_embeddings:
            return T.matmul(final, T.transpose(self.weights["embed"]))
        return T.matmul(final, self.weights["lm_head"])

    def forward_loss(self, tokens: np.ndarray, lam1: float = 0.0,
                     train_mode: bool = False,
                     rng: np.random.Generator | None = None) -> tuple[Tensor, float]:
        """Mean next-token NLL plus the (diagnostic-only) gate L1 penalty."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.shape[1] < 2:
            raise ValueError("need at least 2 tokens per row for next-token loss")
        logits = self.forward(tokens[:, :-1], train_mode=train_mode, rng=rng)
        data_loss = T.softmax_xent(logits, tokens[:, 1:].reshape(-1))
        penalty = 0.0
        if lam1 != 0.0:
            penalty = lam1 * sum(float(np.abs(ad.c.data).sum())
                                 for ad in self.adapter_list())
        return data_loss, penalty


def build_model(cfg: ToyTransformerConfig, seed) -> ToyTransformer:
    return ToyTransformer.build(cfg, seed)


def expected_base_param_count(cfg: ToyTransformerConfig) -> int:
    """Closed-form base parameter count; must match what build_model allocates."""
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    per_layer = 2 * d + 4 * d * d + 2 * d * f + f * d
    total = v * d + cfg.max_seq_len * d + cfg.n_layers * per_layer + d
    if not cfg.tie_embeddings:
        total += d * v
    return total
