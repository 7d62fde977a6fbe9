"""Evolutionary search for the most accurate rank configuration inside a FLOPs window."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .cost import CostReport, FlopsWindow, cost_of, satisfies
from .data import Dataset, DatasetSplit
from .errors import InfeasibleWindowError
from .filtering import RetainedSpace
from .supernet import RankConfig, Supernet


@dataclass(frozen=True)
class EAConfig:
    population: int = 50
    generations: int = 20
    parent_fraction: float = 0.25
    mutation_prob: float = 0.1
    crossover_prob: float = 0.5
    seed: int = 0
    eval_batches: int | None = None  # None: the whole validation split
    retry_cap: int = 100
    probe_draws: int = 100_000

    def __post_init__(self):
        if self.population < 4:
            raise ValueError("population must be >= 4")
        if not 0 < self.parent_fraction < 1 or self.n_parents < 2:
            raise ValueError("parent_fraction * population must be >= 2")
        if not 0 <= self.mutation_prob <= 1 or not 0 <= self.crossover_prob <= 1:
            raise ValueError("probabilities must lie in [0, 1]")

    @property
    def n_parents(self) -> int:
        return int(self.parent_fraction * self.population)


@dataclass(frozen=True)
class Candidate:
    config: RankConfig
    fitness: float
    cost: CostReport

    def to_line(self, rank: int) -> str:
        return (f"rank={rank} config={self.config} acc={self.fitness!r} "
                f"flops={self.cost.flops} params={self.cost.params}")


@dataclass
class SearchResult:
    candidates: list[Candidate]
    history: list[tuple[int, float, float]] = field(default_factory=list)  # (generation, best, mean)

    @property
    def best(self) -> Candidate:
        return self.candidates[0]


def evaluate_config(s: Supernet, config: RankConfig, dataset: Dataset, val: DatasetSplit,
                    eval_batches: int | None = None,
                    space: Mapping[str, tuple[int, ...]] | None = None) -> float:
    """Validation accuracy of ``config`` using the supernet's shared weights (read only)."""
    if space is not None:
        for sid, r in config.entries:
            if r not in space[sid]:
                raise ValueError(f"{sid}: rank {r} not in the search space {space[sid]}")
        return s.activate(config, strict=False).evaluate(dataset, val, eval_batches)
    return s.activate(config).evaluate(dataset, val, eval_batches)


def _slot_space(s: Supernet, space) -> dict[str, tuple[int, ...]]:
    if space is None:
        return {sid: cs.ranks for sid, cs in s.choice_sets.items()}
    if isinstance(space, RetainedSpace):
        return space.slot_ranks()
    return {sid: tuple(space[sid]) for sid in s.slot_ids}


def search(s: Supernet, space: RetainedSpace | Mapping[str, tuple[int, ...]] | None,
           window: FlopsWindow, ea: EAConfig, dataset: Dataset, val: DatasetSplit) -> SearchResult:
    """Maximise validation accuracy over ``space`` subject to ``window``.

    Configurations are per-slot rank vectors. The initial population is drawn
    uniformly and filtered by rejection; each generation keeps the best
    ``parent_fraction`` as parents (elitism) and fills the rest with children
    made by per-slot uniform crossover and per-slot resampling mutation.
    Infeasible children are redrawn up to ``ea.retry_cap`` times before a
    parent is cloned instead.
    """
    choices = _slot_space(s, space)
    slot_ids = s.slot_ids
    options = [np.asarray(choices[sid]) for sid in slot_ids]
    cfg = s.model.cfg
    rng = np.random.Generator(np.random.PCG64(ea.seed))

    cost_cache: dict[tuple, CostReport] = {}
    fit_cache: dict[tuple, float] = {}

    def make(vec) -> RankConfig:
        return RankConfig.from_ranks(slot_ids, vec)

    def cost(vec) -> CostReport:
        key = tuple(vec)
        if key not in cost_cache:
            cost_cache[key] = cost_of(cfg, make(key))
        return cost_cache[key]

    def feasible(vec) -> bool:
        return satisfies(cost(vec), window)

    def fitness(vec) -> float:
        key = tuple(vec)
        if key not in fit_cache:
            fit_cache[key] = evaluate_config(s, make(key), dataset, val, ea.eval_batches, choices)
        return fit_cache[key]

    def random_vec():
        return tuple(int(o[rng.integers(o.shape[0])]) for o in options)

    population = []
    for _ in range(ea.probe_draws):
        vec = random_vec()
        if feasible(vec):
            population.append(vec)
            if len(population) == ea.population:
                break
    if not population:
        raise InfeasibleWindowError(
            f"infeasible window: no configuration with FLOPs in [{window.lower}, {window.upper}] "
            f"found in {ea.probe_draws} random draws")
    found = len(population)
    while len(population) < ea.population:
        population.append(population[len(population) % found])

    def ranked(pop):
        return sorted(pop, key=lambda v: (-fitness(v), cost(v).flops, v))

    history = []
    for gen in range(ea.generations + 1):
        scores = [fitness(v) for v in population]
        history.append((gen, max(scores), float(np.mean(scores))))
        if gen == ea.generations:
            break
        parents = ranked(population)[:ea.n_parents]
        children = []
        while len(children) < ea.population - len(parents):
            i, j = rng.choice(len(parents), size=2, replace=False)
            p1, p2 = parents[i], parents[j]
            child = None
            for _ in range(ea.retry_cap):
                take2 = rng.random(len(slot_ids)) < ea.crossover_prob
                vec = [b if t else a for a, b, t in zip(p1, p2, take2)]
                mutate = rng.random(len(slot_ids)) < ea.mutation_prob
                for k in np.flatnonzero(mutate):
                    vec[k] = int(options[k][rng.integers(options[k].shape[0])])
                if feasible(vec):
                    child = tuple(vec)
                    break
            children.append(p1 if child is None else child)
        population = parents + children

    final = []
    seen = set()
    for v in ranked(population):
        if v not in seen:
            seen.add(v)
            final.append(Candidate(make(v), fitness(v), cost(v)))
    return SearchResult(final, history)


def enumerate_best(s: Supernet, space, window: FlopsWindow, dataset: Dataset, val: DatasetSplit,
                   eval_batches: int | None = None) -> Candidate:
    """Exhaustive argmax over a small space; used to check the evolutionary search."""
    choices = _slot_space(s, space)
    best = None
    for vec in itertools.product(*(choices[sid] for sid in s.slot_ids)):
        config = RankConfig.from_ranks(s.slot_ids, vec)
        c = cost_of(s.model.cfg, config)
        if not satisfies(c, window):
            continue
        cand = Candidate(config, evaluate_config(s, config, dataset, val, eval_batches, choices), c)
        if best is None or (-cand.fitness, c.flops, vec) < (-best.fitness, best.cost.flops, best.config.ranks):
            best = cand
    if best is None:
        raise InfeasibleWindowError("no configuration in the space satisfies the window")
    return best
