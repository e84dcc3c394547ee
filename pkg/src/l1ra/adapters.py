"""Low-rank adapters: plain two-matrix form and the gated variant.

The gated adapter inserts a per-rank gate vector c between the down- and
up-projection factors, h = x W + s * (x A diag(c) B).  A gate component at
exactly zero makes its rank slice inert, which is what the rank scheduler
prunes on.  The plain form is the same code path with a constant all-ones
gate, so the two are bit-identical when c == 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

# The seven per-layer projection matrices that receive adapters, in tie-break
# order (used by the scheduler when two sites have equal minimum gate).
SITE_KINDS = ("q", "k", "v", "o", "up", "gate", "down")
_KIND_INDEX = {k: i for i, k in enumerate(SITE_KINDS)}


class SiteId(NamedTuple):
    layer: int
    kind: str

    @property
    def kind_index(self) -> int:
        return _KIND_INDEX[self.kind]

    def __str__(self) -> str:
        return f"layer{self.layer}.{self.kind}"


@dataclass
class AdapterConfig:
    d_in: int
    d_out: int
    r_init: int
    alpha: float = 16.0
    dropout_p: float = 0.0
    init_sigma: float | None = None  # None -> 1/sqrt(d_in)

    def __post_init__(self):
        if self.d_in < 1 or self.d_out < 1:
            raise ValueError(f"adapter dims must be >= 1, got {self.d_in}x{self.d_out}")
        if self.r_init < 1:
            raise ValueError(f"initial rank must be >= 1, got {self.r_init}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.init_sigma is None:
            self.init_sigma = 1.0 / np.sqrt(self.d_in)


class L1raAdapter:
    """One adapter site: factors A (d_in x r), gate c (r), B (r x d_out).

    The scale multiplier is fixed at alpha / r_init for the adapter's
    lifetime so pruning and reallocation never rescale the function.
    r == 0 is valid and contributes exactly zero delta.
    """

    def __init__(self, A: Tensor, c: Tensor, B: Tensor, scale: float,
                 site_id: SiteId, init_sigma: float, dropout_p: float = 0.0):
        self.A = A
        self.c = c
        self.B = B
        self.scale = scale
        self.site_id = site_id
        self.init_sigma = init_sigma
        self.dropout_p = dropout_p
        self._check_shapes()

    @property
    def r(self) -> int:
        return self.c.data.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.data.shape[0]

    @property
    def d_out(self) -> int:
        return self.B.data.shape[1]

    def _check_shapes(self) -> None:
        r = self.c.data.shape[0]
        if self.A.data.shape[1] != r or self.B.data.shape[0] != r:
            raise ValueError(
                f"inconsistent adapter shapes at {self.site_id}: "
                f"A {self.A.shape}, c {self.c.shape}, B {self.B.shape}")

    def parameters(self) -> list[Tensor]:
        return [self.A, self.c, self.B]

    def num_params(self) -> int:
        return self.A.data.size + self.c.data.size + self.B.data.size


def init_adapter(cfg: AdapterConfig, seed, site_id: SiteId = SiteId(0, "q")) -> L1raAdapter:
    """Fresh adapter: A ~ N(0, sigma^2), B = 0, c = 1, so the delta starts at zero."""
    rng = np.random.default_rng(seed)
    A = Tensor(rng.normal(0.0, cfg.init_sigma, size=(cfg.d_in, cfg.r_init)),
               requires_grad=True)
    c = Tensor(np.ones(cfg.r_init), requires_grad=True)
    B = Tensor(np.zeros((cfg.r_init, cfg.d_out)), requires_grad=True)
    return L1raAdapter(A, c, B, scale=cfg.alpha / cfg.r_init, site_id=site_id,
                       init_sigma=cfg.init_sigma, dropout_p=cfg.dropout_p)


def _gated_forward(x: Tensor, W: Tensor, A: Tensor, c: Tensor, B: Tensor,
                   scale: float, dropout_p: float, train_mode: bool,
                   rng: np.random.Generator | None) -> Tensor:
    base = T.matmul(x, W)
    if c.data.shape[0] == 0:
        return base
    xin = x
    if train_mode and dropout_p > 0.0:
        if rng is None:
            raise ValueError("dropout requires an rng in train mode")
        xin = T.dropout(x, dropout_p, rng)
    # (x A) * c broadcast over rows, then B; diag(c) is never materialized
    delta = T.matmul(T.mul(T.matmul(xin, A), c), B)
    return T.add(base, T.scale(delta, scale))


def forward_l1ra(ad: L1raAdapter, x: Tensor, W: Tensor, train_mode: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
    return _gated_forward(x, W, ad.A, ad.c, ad.B, ad.scale, ad.dropout_p,
                          train_mode, rng)


def forward_lora(A: Tensor, B: Tensor, x: Tensor, W: Tensor, scale: float = 1.0,
                 train_mode: bool = False, dropout_p: float = 0.0,
                 rng: np.random.Generator | None = None) -> Tensor:
    """Ungated baseline; delegates to the gated path with a constant ones gate."""
    ones = Tensor(np.ones(A.data.shape[1]))
    return _gated_forward(x, W, A, ones, B, scale, dropout_p, train_mode, rng)


def merge_delta(ad: L1raAdapter) -> np.ndarray:
    """Dense delta matrix scale * A diag(c) B; zero matrix when r == 0."""
    if ad.r == 0:
        return np.zeros((ad.d_in, ad.d_out))
    return ad.scale * ((ad.A.data * ad.c.data) @ ad.B.data)


# ---------------------------------------------------------------------------
# JSON checkpointing

def adapter_to_dict(ad: L1raAdapter) -> dict:
    return {
        "site_id": {"layer": ad.site_id.layer, "kind": ad.site_id.kind},
        "d_in": ad.d_in,
        "d_out": ad.d_out,
        "r": ad.r,
        "scale": ad.scale,
        "A": ad.A.data.reshape(-1).tolist(),
        "c": ad.c.data.tolist(),
        "B": ad.B.data.reshape(-1).tolist(),
        "init_sigma": ad.init_sigma,
        "dropout_p": ad.dropout_p,
    }


def adapter_from_dict(d: dict) -> L1raAdapter:
    site = SiteId(d["site_id"]["layer"], d["site_id"]["kind"])
    r, d_in, d_out = d["r"], d["d_in"], d["d_out"]
    A = Tensor(np.asarray(d["A"]).reshape(d_in, r), requires_grad=True)
    c = Tensor(np.asarray(d["c"]).reshape(r), requires_grad=True)
    B = Tensor(np.asarray(d["B"]).reshape(r, d_out), requires_grad=True)
    return L1raAdapter(A, c, B, scale=d["scale"], site_id=site,
                       init_sigma=d["init_sigma"], dropout_p=d.get("dropout_p", 0.0))


def save_adapters(adapters: list[L1raAdapter], path: str | Path) -> None:
    payload = [adapter_to_dict(ad) for ad in adapters]
    Path(path).write_text(json.dumps(payload, indent=1))


def load_adapters(path: str | Path) -> list[L1raAdapter]:
    payload = json.loads(Path(path).read_text())
    return [adapter_from_dict(d) for d in payload]
