"""Analytic FLOPs and parameter counts for rank configurations.

Counts are per single image. A multiply-accumulate is two FLOPs; the
element-wise charges (bias add, layer norm, GELU, softmax, ...) are the
per-element constants defined in :mod:`lowrank_nas.layers`, so the totals
here agree exactly with :func:`lowrank_nas.layers.count_flops` on a real
forward pass.
"""
from __future__ import annotations

from dataclasses import dataclass

from . import layers as L
from .vit import ModelConfig


@dataclass(frozen=True, order=True)
class CostReport:
    flops: int
    params: int


@dataclass(frozen=True)
class FlopsWindow:
    lower: int
    upper: int

    def __post_init__(self):
        if not 0 < self.lower <= self.upper:
            raise ValueError(f"need 0 < lower <= upper, got [{self.lower}, {self.upper}]")

    @classmethod
    def fraction_of(cls, reference_flops: int, lower: float, upper: float) -> "FlopsWindow":
        return cls(max(1, int(reference_flops * lower)), int(reference_flops * upper))


def satisfies(report: CostReport, window: FlopsWindow) -> bool:
    return window.lower <= report.flops <= window.upper


def breakeven_rank(m: int, n: int) -> float:
    """Rank at which a factorised ``m x n`` map costs the same as the dense one."""
    return m * n / (m + n)


def lowrank_is_cheaper(m: int, n: int, r: int) -> bool:
    return r * (m + n) < m * n


def linear_cost(m: int, n: int, tokens: int, rank: int | None = None) -> CostReport:
    """Cost of one linear slot over ``tokens`` rows; ``rank=None`` is the dense map."""
    macs = m * n if rank is None else rank * (m + n)
    return CostReport(flops=tokens * (2 * macs + L.BIAS_FLOPS * n), params=macs + n)


def _as_mapping(ranks) -> dict[str, int]:
    if ranks is None:
        return {}
    if hasattr(ranks, "as_dict"):
        return ranks.as_dict()
    return dict(ranks)


def block_cost(cfg: ModelConfig, block: int, ranks=None) -> CostReport:
    """Cost of transformer block ``block``; slots missing from ``ranks`` are dense."""
    ranks = _as_mapping(ranks)
    T, d, H = cfg.tokens, cfg.embed_dim, cfg.heads
    flops = 0
    params = 0
    for slot in cfg.slots():
        if slot.block != block:
            continue
        c = linear_cost(slot.m, slot.n, T, ranks.get(slot.slot_id))
        flops += c.flops
        params += c.params
    flops += 2 * T * d * L.LAYERNORM_FLOPS
    flops += 2 * T * d * L.RESIDUAL_FLOPS
    flops += T * cfg.hidden * L.GELU_FLOPS
    # scores and context matmuls, then scaling and softmax over H * T * T scores
    flops += 2 * (2 * T * T * d)
    flops += H * T * T * (L.SCALE_FLOPS + L.SOFTMAX_FLOPS)
    params += 4 * d
    return CostReport(flops, params)


def cost_of(cfg: ModelConfig, ranks=None) -> CostReport:
    """Whole-model cost. ``ranks`` maps slot ids to ranks (or is a RankConfig); ``None`` is dense.

    Raises ``KeyError`` for slot ids the model does not have.
    """
    ranks = _as_mapping(ranks)
    known = {s.slot_id for s in cfg.slots()}
    unknown = sorted(set(ranks) - known)
    if unknown:
        raise KeyError(f"unknown slot(s): {', '.join(unknown)}")
    T, d, C = cfg.tokens, cfg.embed_dim, cfg.classes
    embed = linear_cost(cfg.patch_dim, d, T)
    flops = embed.flops + T * d * L.BIAS_FLOPS  # + positional add
    params = embed.params + T * d
    for b in range(cfg.depth):
        c = block_cost(cfg, b, ranks)
        flops += c.flops
        params += c.params
    flops += T * d * (L.LAYERNORM_FLOPS + L.POOL_FLOPS)
    params += 2 * d
    head = linear_cost(d, C, 1)
    return CostReport(flops + head.flops, params + head.params)
