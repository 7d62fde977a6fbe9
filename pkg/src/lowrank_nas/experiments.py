"""Desk-scale experiments built on the staged pipeline.

``uniform_comparison`` compares the searched non-uniform configuration with
uniform-rank configurations drawn from the same trained supernet.
``sampling_ablation`` compares low-rank-aware sampling with filtering at half
the epoch budget against uniform sampling without filtering at the full budget.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import pipeline
from .config import PipelineConfig
from .cost import cost_of
from .supernet import RankConfig, SamplerDistribution, Supernet, default_choice_sets, train_supernet
from .vit import evaluate


@dataclass(frozen=True)
class UniformPoint:
    rank: int
    flops: int
    acc: float


@dataclass(frozen=True)
class UniformComparison:
    dense_flops: int
    base_acc: float
    searched: RankConfig
    searched_flops: int
    searched_acc: float
    uniform: tuple[UniformPoint, ...]

    @property
    def best_uniform_at_or_above(self) -> UniformPoint | None:
        """Most accurate uniform config costing at least as much as the searched one."""
        pool = [u for u in self.uniform if u.flops >= self.searched_flops]
        return max(pool, key=lambda u: (u.acc, -u.flops)) if pool else None

    @property
    def accuracy_margin(self) -> float:
        ref = self.best_uniform_at_or_above
        return self.searched_acc - ref.acc if ref else float("inf")

    @property
    def flops_gap(self) -> float | None:
        """Extra FLOPs (fraction of dense) the cheapest uniform config needs to match the searched accuracy."""
        match = [u for u in self.uniform if u.acc >= self.searched_acc]
        if not match:
            return None
        return (min(u.flops for u in match) - self.searched_flops) / self.dense_flops

    def lines(self) -> list[str]:
        out = [f"searched config={self.searched} flops={self.searched_flops} "
               f"frac={self.searched_flops / self.dense_flops:.3f} acc={self.searched_acc:.4f}"]
        out += [f"uniform rank={u.rank} flops={u.flops} frac={u.flops / self.dense_flops:.3f} acc={u.acc:.4f}"
                for u in self.uniform]
        gap = self.flops_gap
        if gap is None:
            # no uniform config reaches the searched accuracy: report the largest one as a lower bound
            bound = (max(u.flops for u in self.uniform) - self.searched_flops) / self.dense_flops
            gap_text = f">{bound:+.3f}"
        else:
            gap_text = f"{gap:+.3f}"
        out.append(f"margin={self.accuracy_margin:+.4f} flops_gap={gap_text}")
        return out


def uniform_ranks(s: Supernet, granularity: int) -> list[int]:
    """Ranks valid in every slot's unconstrained grid (the uniform configurations of the search space)."""
    grids = default_choice_sets(s.model, granularity).values()
    common = set.intersection(*(set(cs.ranks) for cs in grids))
    return sorted(common)


def uniform_comparison(cfg: PipelineConfig, out: Path) -> UniformComparison:
    """Needs a completed pipeline run (through ``search``) in ``out``."""
    ds, splits = pipeline.load_data(out)
    val = splits["val"]
    base = ckpt.load_model(out / pipeline.BASE)
    s = ckpt.load_model(out / pipeline.SUPERNET)
    best = pipeline.resolve_config(s, "best", out)
    dense = cost_of(base.cfg).flops
    points = []
    for r in uniform_ranks(s, cfg["supernet.granularity"]):
        config = s.uniform_config(r)
        points.append(UniformPoint(r, cost_of(base.cfg, config).flops,
                                   s.activate(config, strict=False).evaluate(ds, val)))
    return UniformComparison(dense, evaluate(base, ds, val), best, cost_of(base.cfg, best).flops,
                             s.activate(best, strict=False).evaluate(ds, val), tuple(points))


@dataclass(frozen=True)
class AblationResult:
    ours_epochs: int
    baseline_epochs: int
    ours_mean: float
    baseline_mean: float
    n_configs: int

    @property
    def margin(self) -> float:
        return self.ours_mean - self.baseline_mean

    def lines(self) -> list[str]:
        return [f"ours (lowrank+filter, {self.ours_epochs} epochs) mean_acc={self.ours_mean:.4f}",
                f"baseline (uniform, unfiltered, {self.baseline_epochs} epochs) mean_acc={self.baseline_mean:.4f}",
                f"margin={self.margin:+.4f} over {self.n_configs} configs"]


def sample_configs(s: Supernet, space, n: int, seed: int) -> list[RankConfig]:
    """``n`` configurations drawn uniformly from a retained space (one survivor per block)."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 2])))
    out = []
    for _ in range(n):
        ranks = {}
        for sids, cands in zip(space.block_slots, space.survivors):
            pick = cands[int(rng.integers(len(cands)))]
            ranks.update(zip(sids, pick))
        out.append(s.config(ranks))
    return out


def sampling_ablation(cfg: PipelineConfig, out: Path, n_configs: int = 30) -> AblationResult:
    """Needs ``data``, ``base``, ``decomposed`` and the filter report in ``out``."""
    ds, splits = pipeline.load_data(out)
    teacher = ckpt.load_model(out / pipeline.BASE)
    epochs = cfg["supernet.epochs"]
    kw = dict(lr=cfg["supernet.lr"], batch_size=cfg["train.batch_size"], seed=cfg["seed"])

    ours = ckpt.load_model(out / pipeline.DECOMPOSED)
    space = pipeline.retained_space(out, ours)
    for sid, cs in space.choice_sets(ours.choice_sets).items():
        ours.blocks[sid].choice_set = cs
    ours_epochs = max(1, epochs // 2)
    train_supernet(ours, ds, splits["train"], ours_epochs, SamplerDistribution.lowrank_aware(ours.choice_sets),
                   teacher, **kw)

    baseline = ckpt.load_model(out / pipeline.DECOMPOSED)
    train_supernet(baseline, ds, splits["train"], epochs, SamplerDistribution.uniform(baseline.choice_sets),
                   teacher, **kw)

    configs = sample_configs(ours, space, n_configs, cfg["seed"])
    val = splits["val"]
    ours_mean = float(np.mean([ours.activate(c).evaluate(ds, val) for c in configs]))
    base_mean = float(np.mean([baseline.activate(c).evaluate(ds, val) for c in configs]))
    return AblationResult(ours_epochs, epochs, ours_mean, base_mean, n_configs)
