# End-to-end desk run: filter, train, search, compare with uniform ranks
#
# Runs every pipeline stage into ./demo_run, then puts the searched
# non-uniform configuration next to the uniform ones taken from the same
# supernet. Takes about half a minute on one core.

import sys
from pathlib import Path

from lowrank_nas import pipeline
from lowrank_nas.cli import main
from lowrank_nas.config import load_config
from lowrank_nas.experiments import sampling_ablation, uniform_comparison

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_run")

# The CLI does the same thing with `lowrank-nas all --out demo_run`.

if main(["all", "--out", str(out), "--seed", "0"]) != 0:
    sys.exit("pipeline failed")

# The search report lists per-generation fitness followed by the ranked
# final population.

report = (out / pipeline.SEARCH_REPORT).read_text().splitlines()
print("\n".join(report[:3]), "\n...")

# Uniform ranks 4, 8 and 12 are valid in every layer. The searched config
# should be at least as accurate as any of them that costs as much.

cfg = load_config(out / "config.txt")
cmp = uniform_comparison(cfg, out)
print()
print("\n".join(cmp.lines()))

# Half the epochs with low-rank-aware sampling and filtering against the
# full budget with uniform sampling over the unfiltered space.

print()
print("\n".join(sampling_ablation(cfg, out).lines()))
