"""Block-by-block candidate filtering of the rank search space.

For each transformer block a *local* supernet is built in which only that
block's slots are choice blocks. It is trained briefly on a small proxy
subset, every local candidate is scored by ``M = lam * P - F`` (accuracy
against normalised block cost), and only the top-k survive. The global space
is the Cartesian product of the per-block survivors.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import layers as L
from .cost import block_cost
from .data import Dataset, DatasetSplit, iter_batches
from .supernet import (RankChoiceSet, RankConfig, SamplerDistribution, Supernet, build_supernet,
                       train_supernet)
from .vit import ROLES, Model


@dataclass(frozen=True)
class FilterConfig:
    lam: float = 2.0
    top_k: int = 8
    proxy_fraction: float = 0.1
    local_epochs: int = 10
    exhaustive_cap: int = 4096
    lr: float = 0.01
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not 0 < self.proxy_fraction <= 1:
            raise ValueError("proxy_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class PrecisionCostScore:
    block: int
    ranks: tuple[int, ...]
    P: float
    F: float
    M: float

    def sort_key(self):
        # higher M first, then cheaper, then lexicographically smaller rank vector
        return (-self.M, self.F, self.ranks)


def precision_cost_ratio(P: float, F: float, lam: float) -> float:
    return lam * P - F


def make_score(block: int, ranks: Sequence[int], P: float, F: float, lam: float) -> PrecisionCostScore:
    return PrecisionCostScore(block, tuple(int(r) for r in ranks), P, F, precision_cost_ratio(P, F, lam))


def rank_scores(scores: Iterable[PrecisionCostScore]) -> list[PrecisionCostScore]:
    return sorted(scores, key=PrecisionCostScore.sort_key)


def top_k(scores: Iterable[PrecisionCostScore], k: int) -> list[PrecisionCostScore]:
    return rank_scores(scores)[:k]


def build_local_supernet(model: Model, block: int,
                         choice_sets: Mapping[str, RankChoiceSet]) -> Supernet:
    """Supernet where only ``block``'s slots are choice blocks; everything else stays dense and frozen."""
    if not 0 <= block < model.cfg.depth:
        raise IndexError(f"block {block} outside [0, {model.cfg.depth})")
    prefix = f"blocks.{block}."
    local = {sid: cs for sid, cs in choice_sets.items() if sid.startswith(prefix)}
    if not local:
        raise ValueError(f"no choice sets given for block {block}")
    return build_supernet(model, local)


def normalized_block_cost(model: Model, block: int, ranks: Mapping[str, int]) -> float:
    return block_cost(model.cfg, block, ranks).flops / block_cost(model.cfg, block).flops


class _BlockScorer:
    """Accuracy of local candidates of one block.

    The block input is computed once. Inside the block, intermediate results
    are memoised on the rank prefix that determines them (``q,k,v`` ->
    attention, ``proj`` -> residual, ``fc1`` -> hidden), so candidates that
    share leading ranks share work when scored in lexicographic order.
    """

    def __init__(self, s: Supernet, block: int, dataset: Dataset, split: DatasetSplit):
        self.s = s
        self.block = block
        model = s.model
        pairs = list(iter_batches(dataset, split, len(split)))
        images, self.labels = pairs[0]
        self.x = model.run_blocks(model.embed(images), 0, block)
        pre = f"blocks.{block}."
        p = model.params
        self.slot = {role: model.slots[pre + role] for role in ROLES}
        self.ids = {role: pre + role for role in ROLES}
        self.h, _ = L.layernorm_fwd(self.x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        self.ln2 = (p[pre + "ln2.g"], p[pre + "ln2.b"])
        self._memo: dict[str, tuple] = {}

    def _cached(self, level, key, fn):
        hit = self._memo.get(level)
        if hit is not None and hit[0] == key:
            return hit[1]
        value = fn()
        self._memo[level] = (key, value)
        return value

    def accuracy(self, ranks: Mapping[str, int]) -> float:
        r = [ranks.get(self.ids[role]) for role in ROLES]
        model = self.s.model
        sl = self.slot

        def attend():
            q, k, v = (sl[role].forward(self.h, rank)[0] for role, rank in zip(("q", "k", "v"), r[:3]))
            return L.attention_fwd(q, k, v, model.cfg.heads)[0]

        def project():
            a = self._cached("attn", tuple(r[:3]), attend)
            x1 = self.x + sl["proj"].forward(a, r[3])[0]
            return x1, L.layernorm_fwd(x1, *self.ln2)[0]

        def expand():
            _, h2 = self._cached("proj", tuple(r[:4]), project)
            return L.gelu_fwd(sl["fc1"].forward(h2, r[4])[0])

        x1, _ = self._cached("proj", tuple(r[:4]), project)
        g = self._cached("fc1", tuple(r[:5]), expand)
        x2 = x1 + sl["fc2"].forward(g, r[5])[0]
        out = model.classify(model.run_blocks(x2, self.block + 1, None, ranks))
        return float((out.argmax(axis=1) == self.labels).mean())


def _candidate_vectors(s: Supernet, scorer: _BlockScorer, fc: FilterConfig, block: int,
                       model: Model) -> list[tuple[int, ...]]:
    sets = [s.blocks[sid].choice_set.ranks for sid in s.slot_ids]
    if math.prod(len(c) for c in sets) <= fc.exhaustive_cap:
        return list(itertools.product(*sets))
    # Marginal pass: score each slot's ranks with the other slots pinned at their maximum,
    # keep the best few per slot, and enumerate the product of those.
    keep_per_slot = max(1, int(math.floor(fc.exhaustive_cap ** (1.0 / len(sets)))))
    reduced = []
    top = [c[-1] for c in sets]
    for i, (sid, choices) in enumerate(zip(s.slot_ids, sets)):
        marginal = []
        for r in choices:
            vec = list(top)
            vec[i] = r
            ranks = dict(zip(s.slot_ids, vec))
            marginal.append(make_score(block, vec, scorer.accuracy(ranks),
                                       normalized_block_cost(model, block, ranks), fc.lam))
        best = top_k(marginal, keep_per_slot)
        reduced.append(sorted(sc.ranks[i] for sc in best))
    return list(itertools.product(*reduced))


def score_local(s: Supernet, block: int, dataset: Dataset, split: DatasetSplit,
                fc: FilterConfig) -> list[PrecisionCostScore]:
    """Score every local candidate of a trained local supernet, best first.

    ``P`` is accuracy on ``split``; ``F`` is the block's FLOPs relative to the
    dense block. Candidates are enumerated exhaustively when the local space
    has at most ``fc.exhaustive_cap`` members, otherwise through a per-slot
    marginal pre-selection.
    """
    if not s.trained:
        raise RuntimeError("local supernet must be trained before scoring")
    model = s.model
    scorer = _BlockScorer(s, block, dataset, split)
    scores = []
    for vec in _candidate_vectors(s, scorer, fc, block, model):
        ranks = dict(zip(s.slot_ids, vec))
        P = scorer.accuracy(ranks)
        F = normalized_block_cost(model, block, ranks)
        scores.append(make_score(block, vec, P, F, fc.lam))
    return rank_scores(scores)


@dataclass(frozen=True)
class RetainedSpace:
    """Per-block surviving candidates; the global space is their Cartesian product."""

    block_slots: tuple[tuple[str, ...], ...]
    survivors: tuple[tuple[tuple[int, ...], ...], ...]

    @property
    def size(self) -> int:
        return math.prod(len(s) for s in self.survivors)

    @property
    def slot_ids(self) -> tuple[str, ...]:
        return tuple(sid for slots in self.block_slots for sid in slots)

    def contains(self, config: RankConfig | Mapping[str, int]) -> bool:
        ranks = config.as_dict() if isinstance(config, RankConfig) else dict(config)
        if set(ranks) != set(self.slot_ids):
            return False
        return all(tuple(ranks[sid] for sid in slots) in set(surv)
                   for slots, surv in zip(self.block_slots, self.survivors))

    def configs(self) -> Iterable[RankConfig]:
        for combo in itertools.product(*self.survivors):
            ranks = [r for part in combo for r in part]
            yield RankConfig.from_ranks(self.slot_ids, ranks)

    def slot_ranks(self) -> dict[str, tuple[int, ...]]:
        """Per-slot projection: every rank that appears in some surviving block candidate."""
        out = {}
        for slots, surv in zip(self.block_slots, self.survivors):
            for i, sid in enumerate(slots):
                out[sid] = tuple(sorted({cand[i] for cand in surv}))
        return out

    def choice_sets(self, template: Mapping[str, RankChoiceSet]) -> dict[str, RankChoiceSet]:
        return {sid: template[sid].restrict(ranks) for sid, ranks in self.slot_ranks().items()}


def integrate(survivors: Mapping[int, tuple[Sequence[str], Sequence[Sequence[int]]]]) -> RetainedSpace:
    """Combine per-block survivors ``{block: (slot_ids, [rank vectors])}`` into a global space."""
    blocks = sorted(survivors)
    slots, kept = [], []
    for b in blocks:
        sids, cands = survivors[b]
        if not cands:
            raise ValueError(f"block {b} has no surviving candidates")
        slots.append(tuple(sids))
        kept.append(tuple(tuple(int(r) for r in c) for c in cands))
    return RetainedSpace(tuple(slots), tuple(kept))


def full_space(choice_sets: Mapping[str, RankChoiceSet], depth: int) -> RetainedSpace:
    """The unfiltered space expressed as a RetainedSpace."""
    per_block = {}
    for b in range(depth):
        sids = [sid for sid in choice_sets if sid.startswith(f"blocks.{b}.")]
        per_block[b] = (sids, list(itertools.product(*(choice_sets[s].ranks for s in sids))))
    return integrate(per_block)


@dataclass
class BlockFilterResult:
    block: int
    slot_ids: tuple[str, ...]
    scores: list[PrecisionCostScore]
    retained: list[PrecisionCostScore]

    def report_lines(self) -> list[str]:
        keep = {sc.ranks for sc in self.retained}
        return [
            f"block={sc.block} ranks={','.join(map(str, sc.ranks))} P={sc.P!r} F={sc.F!r} "
            f"M={sc.M!r} retained={int(sc.ranks in keep)}"
            for sc in self.scores
        ]


def filter_block(model: Model, block: int, choice_sets: Mapping[str, RankChoiceSet],
                 dataset: Dataset, proxy: DatasetSplit, score_split: DatasetSplit,
                 fc: FilterConfig, teacher: Model | None = None) -> BlockFilterResult:
    """Train a local supernet for ``block`` on ``proxy`` and keep its top-k candidates."""
    s = build_local_supernet(model, block, choice_sets)
    dist = SamplerDistribution.lowrank_aware(s.choice_sets)
    train_supernet(s, dataset, proxy, fc.local_epochs, dist, teacher if teacher is not None else model,
                   lr=fc.lr, batch_size=fc.batch_size, seed=fc.seed + block)
    scores = score_local(s, block, dataset, score_split, fc)
    return BlockFilterResult(block, s.slot_ids, scores, scores[:fc.top_k])


def filter_model(model: Model, choice_sets: Mapping[str, RankChoiceSet], dataset: Dataset,
                 proxy: DatasetSplit, score_split: DatasetSplit,
                 fc: FilterConfig) -> tuple[RetainedSpace, list[BlockFilterResult]]:
    """Filter every block in turn and integrate the survivors."""
    results = [filter_block(model, b, choice_sets, dataset, proxy, score_split, fc)
               for b in range(model.cfg.depth)]
    space = integrate({r.block: (r.slot_ids, [sc.ranks for sc in r.retained]) for r in results})
    return space, results


def checksum_frozen(model: Model, exclude: Iterable[str]) -> dict[str, bytes]:
    """Raw bytes of every tensor not listed in ``exclude``, for freeze checks."""
    exclude = set(exclude)
    return {k: np.ascontiguousarray(v).tobytes() for k, v in model.parameters().items() if k not in exclude}
