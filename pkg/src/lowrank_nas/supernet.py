"""Weight-sharing supernet over rank choices.

Every compressible slot becomes a choice block: one pair of super-factors
``U`` (m x R) and ``V`` (n x R), initialised from the SVD of the trained dense
weight. The rank-``r`` member of the block is the first ``r`` columns of both
factors, so smaller ranks are literally column prefixes of larger ones and
share parameters and gradient updates with them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

import numpy as np

from . import linalg
from .cost import breakeven_rank
from .data import Dataset, DatasetSplit, iter_batches
from .vit import SGD, LowRankLinear, Model, evaluate, train_step


@dataclass(frozen=True)
class RankChoiceSet:
    """Strictly increasing candidate ranks for one ``m x n`` slot.

    Ranks must be multiples of ``granularity`` and no larger than
    ``min(m, n)``. Ranks at or above the break-even rank ``mn/(m+n)`` are only
    accepted with ``allow_overcomplete`` and are reported by :attr:`overcomplete`.
    """

    ranks: tuple[int, ...]
    m: int
    n: int
    granularity: int = 1
    allow_overcomplete: bool = False

    def __post_init__(self):
        ranks = tuple(int(r) for r in self.ranks)
        object.__setattr__(self, "ranks", ranks)
        if not ranks:
            raise ValueError("empty rank choice set")
        if any(r < 1 for r in ranks) or any(a >= b for a, b in zip(ranks, ranks[1:])):
            raise ValueError(f"ranks must be positive and strictly increasing: {ranks}")
        if ranks[-1] > min(self.m, self.n):
            raise ValueError(f"rank {ranks[-1]} exceeds min(m, n) = {min(self.m, self.n)}")
        if any(r % self.granularity for r in ranks):
            raise ValueError(f"ranks {ranks} are not multiples of {self.granularity}")
        if self.overcomplete and not self.allow_overcomplete:
            raise ValueError(
                f"ranks {self.overcomplete} are not below the break-even rank "
                f"{breakeven_rank(self.m, self.n):.3f} for a {self.m}x{self.n} map")

    @classmethod
    def grid(cls, m: int, n: int, granularity: int = 4) -> "RankChoiceSet":
        """All multiples of ``granularity`` strictly below the break-even rank."""
        limit = breakeven_rank(m, n)
        ranks = tuple(r for r in range(granularity, min(m, n) + 1, granularity) if r < limit)
        return cls(ranks, m, n, granularity)

    @property
    def overcomplete(self) -> tuple[int, ...]:
        limit = breakeven_rank(self.m, self.n)
        return tuple(r for r in self.ranks if r >= limit)

    @property
    def max(self) -> int:
        return self.ranks[-1]

    def restrict(self, keep: Iterable[int]) -> "RankChoiceSet":
        keep = set(keep)
        return RankChoiceSet(tuple(r for r in self.ranks if r in keep), self.m, self.n,
                             self.granularity, self.allow_overcomplete)

    def __len__(self) -> int:
        return len(self.ranks)

    def __iter__(self) -> Iterator[int]:
        return iter(self.ranks)

    def __contains__(self, r) -> bool:
        return r in self.ranks


@dataclass(frozen=True)
class RankConfig:
    """One rank per choice block, in slot order."""

    entries: tuple[tuple[str, int], ...]

    @classmethod
    def from_mapping(cls, ranks: Mapping[str, int], order: Iterable[str] | None = None) -> "RankConfig":
        order = list(ranks) if order is None else list(order)
        return cls(tuple((sid, int(ranks[sid])) for sid in order))

    @classmethod
    def from_ranks(cls, slot_ids: Iterable[str], ranks: Iterable[int]) -> "RankConfig":
        slot_ids = list(slot_ids)
        ranks = [int(r) for r in ranks]
        if len(slot_ids) != len(ranks):
            raise ValueError(f"{len(ranks)} ranks given for {len(slot_ids)} slots")
        return cls(tuple(zip(slot_ids, ranks)))

    def as_dict(self) -> dict[str, int]:
        return dict(self.entries)

    @property
    def slot_ids(self) -> tuple[str, ...]:
        return tuple(sid for sid, _ in self.entries)

    @property
    def ranks(self) -> tuple[int, ...]:
        return tuple(r for _, r in self.entries)

    def __str__(self) -> str:
        return ",".join(str(r) for r in self.ranks)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class SamplerDistribution:
    """Independent per-slot distributions over rank choices."""

    slot_ids: tuple[str, ...]
    ranks: tuple[np.ndarray, ...]
    probs: tuple[np.ndarray, ...]
    _cdfs: tuple[np.ndarray, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_cdfs", tuple(np.cumsum(p) for p in self.probs))

    @classmethod
    def lowrank_aware(cls, choice_sets: Mapping[str, RankChoiceSet]) -> "SamplerDistribution":
        """``p(r)`` proportional to ``1/r``: smaller ranks are drawn more often."""
        ranks, probs = [], []
        for cs in choice_sets.values():
            r = np.asarray(cs.ranks, dtype=np.float64)
            w = 1.0 / r
            ranks.append(np.asarray(cs.ranks))
            probs.append(w / w.sum())
        return cls(tuple(choice_sets), tuple(ranks), tuple(probs))

    @classmethod
    def uniform(cls, choice_sets: Mapping[str, RankChoiceSet]) -> "SamplerDistribution":
        ranks = tuple(np.asarray(cs.ranks) for cs in choice_sets.values())
        probs = tuple(np.full(len(r), 1.0 / len(r)) for r in ranks)
        return cls(tuple(choice_sets), ranks, probs)

    @classmethod
    def named(cls, mode: str, choice_sets: Mapping[str, RankChoiceSet]) -> "SamplerDistribution":
        if mode == "lowrank":
            return cls.lowrank_aware(choice_sets)
        if mode == "uniform":
            return cls.uniform(choice_sets)
        raise ValueError(f"unknown sampling mode {mode!r} (expected 'lowrank' or 'uniform')")

    def pmf(self, slot_id: str) -> dict[int, float]:
        i = self.slot_ids.index(slot_id)
        return {int(r): float(p) for r, p in zip(self.ranks[i], self.probs[i])}

    def probability(self, config: RankConfig) -> float:
        """Joint probability of ``config``: the product of per-slot probabilities."""
        ranks = config.as_dict()
        prob = 1.0
        for sid, r, p in zip(self.slot_ids, self.ranks, self.probs):
            hit = np.flatnonzero(r == ranks[sid])
            prob *= float(p[hit[0]]) if hit.size else 0.0
        return prob

    def sample(self, rng: np.random.Generator) -> RankConfig:
        u = rng.random(len(self.slot_ids))
        picks = []
        for ui, r, cdf in zip(u, self.ranks, self._cdfs):
            j = min(int(np.searchsorted(cdf, ui, side="right")), r.shape[0] - 1)
            picks.append(int(r[j]))
        return RankConfig.from_ranks(self.slot_ids, picks)


def sample_path(dist: SamplerDistribution, rng: np.random.Generator) -> RankConfig:
    return dist.sample(rng)


class LowRankFactorPair(LowRankLinear):
    """A choice block: shared super-factors plus the ranks that may be selected from them."""

    def __init__(self, slot_id: str, U, V, b, choice_set: RankChoiceSet):
        super().__init__(U, V, b)
        if choice_set.max > self.width:
            raise ValueError(f"{slot_id}: largest choice {choice_set.max} exceeds factor width {self.width}")
        self.slot_id = slot_id
        self.choice_set = choice_set

    def view(self, rank: int) -> tuple[np.ndarray, np.ndarray]:
        """``(U[:, :rank], V[:, :rank])``; numpy views sharing storage with the super-factors."""
        return self.factors(rank)


class SubnetView:
    """One rank configuration of a supernet. Holds no weights of its own."""

    def __init__(self, supernet: "Supernet", config: RankConfig):
        self.supernet = supernet
        self.config = config
        self.ranks = config.as_dict()

    def factors(self, slot_id: str) -> tuple[np.ndarray, np.ndarray]:
        return self.supernet.blocks[slot_id].view(self.ranks[slot_id])

    def forward(self, images):
        return self.supernet.model.forward(images, ranks=self.ranks)

    def evaluate(self, dataset: Dataset, split: DatasetSplit, max_batches=None, batch_size=256) -> float:
        return evaluate(self.supernet.model, dataset, split, self.ranks, batch_size, max_batches)


class Supernet:
    """A model whose choice-block slots are :class:`LowRankFactorPair` instances.

    Only the choice blocks' factors and biases are trainable; every other
    tensor is frozen.
    """

    def __init__(self, model: Model):
        self.model = model
        self.blocks: dict[str, LowRankFactorPair] = {
            sid: s for sid, s in model.slots.items() if isinstance(s, LowRankFactorPair)
        }
        if not self.blocks:
            raise ValueError("model has no choice blocks")
        model.trainable = {f"{sid}.{k}" for sid in self.blocks for k in ("U", "V", "b")}
        self.trained = False

    @property
    def slot_ids(self) -> tuple[str, ...]:
        return tuple(self.blocks)

    @property
    def choice_sets(self) -> dict[str, RankChoiceSet]:
        return {sid: b.choice_set for sid, b in self.blocks.items()}

    @property
    def space_size(self) -> int:
        return math.prod(len(b.choice_set) for b in self.blocks.values())

    def config(self, ranks: Mapping[str, int] | Iterable[int]) -> RankConfig:
        if isinstance(ranks, Mapping):
            return RankConfig.from_mapping(ranks, self.slot_ids)
        return RankConfig.from_ranks(self.slot_ids, ranks)

    def max_config(self) -> RankConfig:
        return self.config([b.choice_set.max for b in self.blocks.values()])

    def full_config(self) -> RankConfig:
        """Every slot at its full factor width (lossless when width = min(m, n))."""
        return self.config([b.width for b in self.blocks.values()])

    def uniform_config(self, rank: int) -> RankConfig:
        return self.config([rank] * len(self.blocks))

    def check(self, config: RankConfig, strict: bool = True) -> None:
        """Validate ``config``; with ``strict=False`` any rank up to the factor width is allowed."""
        if set(config.slot_ids) != set(self.blocks) or len(config) != len(self.blocks):
            raise ValueError("rank config must cover every choice block exactly once")
        for sid, r in config.entries:
            block = self.blocks[sid]
            if strict and r not in block.choice_set:
                raise ValueError(f"{sid}: rank {r} not in choice set {block.choice_set.ranks}")
            if not 1 <= r <= block.width:
                raise ValueError(f"{sid}: rank {r} outside [1, {block.width}]")

    def activate(self, config: RankConfig, strict: bool = True) -> SubnetView:
        self.check(config, strict)
        return SubnetView(self, config)

    def weights_checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, arr in sorted(self.model.parameters().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def build_supernet(model: Model, choice_sets: Mapping[str, RankChoiceSet],
                   width: Mapping[str, int] | str | None = None) -> Supernet:
    """Factorise the slots named in ``choice_sets`` into SVD-initialised choice blocks.

    ``width`` sets how many columns the super-factors store: by default the
    largest choice of each slot; ``"full"`` keeps ``min(m, n)`` columns so the
    unconstrained factorisation stays reachable. The input model is not modified.
    """
    net = model.copy()
    net.trainable = None
    for sid, cs in choice_sets.items():
        dense = net.slots[sid]
        if not hasattr(dense, "W"):
            raise ValueError(f"slot {sid} is not dense")
        m, n = dense.W.shape
        if (cs.m, cs.n) != (m, n):
            raise ValueError(f"{sid}: choice set is for {cs.m}x{cs.n}, slot is {m}x{n}")
        if width == "full":
            w = min(m, n)
        elif isinstance(width, Mapping):
            w = width.get(sid, cs.max)
        else:
            w = cs.max
        if cs.max > min(m, n) or w > min(m, n):
            raise ValueError(f"{sid}: rank exceeds min(m, n) = {min(m, n)}")
        U, V = linalg.truncate(linalg.svd(dense.W), w)
        net.slots[sid] = LowRankFactorPair(sid, U, V, dense.b.copy(), cs)
    return Supernet(net)


def default_choice_sets(model: Model, granularity: int = 4,
                        blocks: Iterable[int] | None = None) -> dict[str, RankChoiceSet]:
    keep = None if blocks is None else set(blocks)
    return {
        s.slot_id: RankChoiceSet.grid(s.m, s.n, granularity)
        for s in model.slot_table()
        if keep is None or s.block in keep
    }


@dataclass(frozen=True)
class TraceRecord:
    step: int
    config: RankConfig
    loss: float

    def to_line(self) -> str:
        return f"step={self.step} config={self.config} loss={self.loss!r}"


def path_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1])))


def order_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def train_supernet(s: Supernet, dataset: Dataset, split: DatasetSplit, epochs: int,
                   dist: SamplerDistribution, teacher: Model | None, lr: float = 0.01,
                   batch_size: int = 32, seed: int = 0, on_step=None) -> list[TraceRecord]:
    """Single-path training: one sampled rank configuration per batch.

    Each step distils from ``teacher`` (half cross-entropy, half KL), and the
    gradients of the active column prefixes are applied to the shared
    super-factors. Columns beyond the sampled rank are left untouched.
    ``on_step(record)`` is called after every update if given.
    """
    steps_per_epoch = math.ceil(len(split) / batch_size)
    opt = SGD(lr, total_steps=epochs * steps_per_epoch)
    data_rng = order_rng(seed)
    rng = path_rng(seed)
    trace = []
    for _ in range(epochs):
        for images, labels in iter_batches(dataset, split, batch_size, data_rng):
            config = dist.sample(rng)
            s.check(config)
            step = opt.t
            loss = train_step(s.model, images, labels, opt, config.as_dict(), teacher, step)
            trace.append(TraceRecord(step, config, loss))
            if on_step is not None:
                on_step(trace[-1])
    s.trained = True
    return trace
