# A weight-sharing supernet over per-layer ranks
#
# One pair of super-factors per layer holds every rank choice at once: rank r
# is simply the first r columns. Training samples one rank per layer per batch,
# favouring small ranks because they share the fewest columns.

import numpy as np

from lowrank_nas.cost import cost_of
from lowrank_nas.data import DatasetSpec, generate, make_splits
from lowrank_nas.supernet import SamplerDistribution, build_supernet, default_choice_sets, train_supernet
from lowrank_nas.vit import ModelConfig, build_model, evaluate, fit

ds = generate(DatasetSpec(samples_per_class=200))
splits = make_splits(ds, seed=0)

# Train a small dense model first. It is both the source of the SVD
# initialisation and the distillation teacher.

base = build_model(ModelConfig())
fit(base, ds, splits["train"], 10, 0.05)
print("dense val accuracy:", evaluate(base, ds, splits["val"]))

choice_sets = default_choice_sets(base)
s = build_supernet(base, choice_sets)
print("rank choices for blocks.0.q:", choice_sets["blocks.0.q"].ranks)
print("rank choices for blocks.0.fc1:", choice_sets["blocks.0.fc1"].ranks)
print("search space size:", s.space_size)

# The sampling distribution is proportional to 1/r within each layer.

dist = SamplerDistribution.lowrank_aware(s.choice_sets)
print("pmf for blocks.0.fc1:", {r: round(p, 3) for r, p in dist.pmf("blocks.0.fc1").items()})

# Views of different ranks alias the same storage.

block = s.blocks["blocks.0.fc1"]
U4, _ = block.view(4)
U12, _ = block.view(12)
print("rank-4 view shares memory with rank-12 view:", np.shares_memory(U4, U12))

# Before training, the smallest subnet is noticeably worse than the widest.

small, wide = s.uniform_config(4), s.max_config()
print("before: rank 4 acc", s.activate(small).evaluate(ds, splits["val"]),
      "max rank acc", s.activate(wide).evaluate(ds, splits["val"]))

trace = train_supernet(s, ds, splits["train"], 4, dist, base)
print(f"{len(trace)} training steps, first loss {trace[0].loss:.3f}, last {trace[-1].loss:.3f}")

dense = cost_of(base.cfg).flops
for name, config in (("rank 4", small), ("max rank", wide)):
    acc = s.activate(config).evaluate(ds, splits["val"])
    frac = cost_of(base.cfg, config).flops / dense
    print(f"after: {name:8s} acc {acc:.4f} at {frac:.2f} of dense flops")
