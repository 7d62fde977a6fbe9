"""Staged pipeline over an output directory.

Each stage reads the artifacts of earlier stages from ``out`` and writes its
own. Reports are line-delimited ``key=value`` records in a fixed field order.

=================  ==========================================  =========================
stage              reads                                       writes
=================  ==========================================  =========================
gen-data           --                                          data.flra
train-base         data.flra                                   base.flra, base_trace.txt
decompose          base.flra                                   decomposed.flra
filter             data.flra, base.flra                        filter_report.txt
train-supernet     data.flra, base.flra, decomposed.flra,      supernet.flra,
                   filter_report.txt (if filtering enabled)    supernet_trace.txt
search             data.flra, supernet.flra                    search_report.txt
eval               data.flra, supernet.flra or decomposed      --
export             supernet.flra or decomposed.flra            export.flra
report             filter_report.txt and/or search_report.txt  --
=================  ==========================================  =========================
"""
from __future__ import annotations

import math
import os
from pathlib import Path

from . import checkpoint as ckpt
from .config import PipelineConfig
from .cost import FlopsWindow, cost_of
from .data import generate, make_splits
from .errors import ConfigError, DependencyError
from .filtering import RetainedSpace, filter_model, integrate
from .search import search
from .supernet import (RankConfig, SamplerDistribution, Supernet, build_supernet, default_choice_sets,
                       train_supernet)
from .vit import LowRankLinear, build_model, evaluate, fit

DATA = "data.flra"
BASE = "base.flra"
BASE_TRACE = "base_trace.txt"
DECOMPOSED = "decomposed.flra"
FILTER_REPORT = "filter_report.txt"
SUPERNET = "supernet.flra"
SUPERNET_TRACE = "supernet_trace.txt"
SEARCH_REPORT = "search_report.txt"
EXPORT = "export.flra"


def _need(out: Path, name: str) -> Path:
    path = out / name
    if not path.exists():
        raise DependencyError(f"missing prerequisite artifact {path}", path=str(path))
    return path


def _write_lines(path: Path, lines) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    os.replace(tmp, path)


def parse_records(path: Path) -> list[dict[str, str]]:
    """Read a ``key=value key=value`` report into dicts (values are strings)."""
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            records.append(dict(field.split("=", 1) for field in line.split()))
    return records


def load_data(out: Path):
    return ckpt.dataset_from_tensors(ckpt.load_checkpoint(_need(out, DATA)))


# ---------------------------------------------------------------- stages


def gen_data(cfg: PipelineConfig, out: Path) -> str:
    ds = generate(cfg.dataset_spec())
    splits = make_splits(ds, cfg["data.val_fraction"], cfg["filter.proxy_fraction"], cfg["seed"])
    ckpt.save_checkpoint(ckpt.dataset_tensors(ds, splits), out / DATA)
    return (f"gen-data: {len(ds)} samples, {ds.spec.classes} classes, train={len(splits['train'])} "
            f"val={len(splits['val'])} proxy={len(splits['proxy'])} -> {DATA}")


def train_base(cfg: PipelineConfig, out: Path) -> str:
    ds, splits = load_data(out)
    model = build_model(cfg.model_config())
    trace = fit(model, ds, splits["train"], cfg["train.base_epochs"], cfg["train.base_lr"],
                cfg["train.batch_size"], cfg["seed"])
    ckpt.save_model(model, out / BASE)
    # reload so every later stage sees the stored single-precision weights
    model = ckpt.load_model(out / BASE)
    _write_lines(out / BASE_TRACE, (f"epoch={i + 1} loss={v!r}" for i, v in enumerate(trace)))
    acc = evaluate(model, ds, splits["val"])
    return f"train-base: val_acc={acc!r} flops={cost_of(model.cfg).flops} -> {BASE}"


def decompose(cfg: PipelineConfig, out: Path) -> str:
    base = ckpt.load_model(_need(out, BASE))
    choice_sets = default_choice_sets(base, cfg["supernet.granularity"])
    s = build_supernet(base, choice_sets, width="full")
    ckpt.save_model(s, out / DECOMPOSED)
    return f"decompose: {len(choice_sets)} choice blocks, |space|={s.space_size} -> {DECOMPOSED}"


def run_filter(cfg: PipelineConfig, out: Path) -> str:
    ds, splits = load_data(out)
    base = ckpt.load_model(_need(out, BASE))
    choice_sets = default_choice_sets(base, cfg["supernet.granularity"])
    space, results = filter_model(base, choice_sets, ds, splits["proxy"], splits["val"], cfg.filter_config())
    lines = [line for r in results for line in r.report_lines()]
    _write_lines(out / FILTER_REPORT, lines)
    return f"filter: retained {space.size} global configs -> {FILTER_REPORT}"


def retained_space(out: Path, supernet: Supernet) -> RetainedSpace:
    """Rebuild the retained space from ``filter_report.txt``."""
    per_block: dict[int, tuple[list[str], list[tuple[int, ...]]]] = {}
    for rec in parse_records(_need(out, FILTER_REPORT)):
        if rec["retained"] != "1":
            continue
        b = int(rec["block"])
        sids = [sid for sid in supernet.slot_ids if sid.startswith(f"blocks.{b}.")]
        per_block.setdefault(b, (sids, []))[1].append(tuple(int(r) for r in rec["ranks"].split(",")))
    return integrate(per_block)


def train_supernet_stage(cfg: PipelineConfig, out: Path) -> str:
    ds, splits = load_data(out)
    teacher = ckpt.load_model(_need(out, BASE))
    s = ckpt.load_model(_need(out, DECOMPOSED))
    if cfg["filter.enabled"]:
        space = retained_space(out, s)
        for sid, cs in space.choice_sets(s.choice_sets).items():
            s.blocks[sid].choice_set = cs
    dist = SamplerDistribution.named(cfg["supernet.sampling"], s.choice_sets)
    trace = train_supernet(s, ds, splits["train"], cfg["supernet.epochs"], dist, teacher,
                           lr=cfg["supernet.lr"], batch_size=cfg["train.batch_size"], seed=cfg["seed"])
    ckpt.save_model(s, out / SUPERNET)
    _write_lines(out / SUPERNET_TRACE, (rec.to_line() for rec in trace))
    return (f"train-supernet: {len(trace)} steps, sampling={cfg['supernet.sampling']}, "
            f"final_loss={trace[-1].loss!r} -> {SUPERNET}")


def window_for(cfg: PipelineConfig) -> FlopsWindow:
    dense = cost_of(cfg.model_config()).flops
    return FlopsWindow.fraction_of(dense, cfg["window.lower"], cfg["window.upper"])


def run_search(cfg: PipelineConfig, out: Path) -> str:
    ds, splits = load_data(out)
    s = ckpt.load_model(_need(out, SUPERNET))
    window = window_for(cfg)
    result = search(s, None, window, cfg.ea_config(), ds, splits["val"])
    lines = [f"gen={g} best={b!r} mean={m!r}" for g, b, m in result.history]
    lines += [c.to_line(i + 1) for i, c in enumerate(result.candidates)]
    _write_lines(out / SEARCH_REPORT, lines)
    best = result.best
    return (f"search: best config={best.config} acc={best.fitness!r} flops={best.cost.flops} "
            f"window=[{window.lower},{window.upper}] -> {SEARCH_REPORT}")


def _evaluation_supernet(out: Path) -> Supernet:
    if (out / SUPERNET).exists():
        return ckpt.load_model(out / SUPERNET)
    return ckpt.load_model(_need(out, DECOMPOSED))


def resolve_config(s: Supernet, spec: str, out: Path | None = None) -> RankConfig:
    """``full`` | ``max`` | ``uniform:R`` | ``best`` (from the search report) | comma-separated ranks."""
    if spec == "full":
        return s.full_config()
    if spec == "max":
        return s.max_config()
    if spec.startswith("uniform:"):
        spec = ",".join([spec.split(":", 1)[1]] * len(s.slot_ids))
    if spec == "best":
        for rec in parse_records(_need(out, SEARCH_REPORT)):
            if rec.get("rank") == "1":
                return s.config(int(r) for r in rec["config"].split(","))
        raise DependencyError(f"{out / SEARCH_REPORT} holds no ranked candidates")
    try:
        config = s.config(int(r) for r in spec.split(","))
        s.check(config, strict=False)
    except ValueError as exc:
        raise ConfigError(f"bad --rank-config {spec!r}: {exc}", key="rank-config") from None
    return config


def run_eval(cfg: PipelineConfig, out: Path, spec: str) -> str:
    ds, splits = load_data(out)
    s = _evaluation_supernet(out)
    config = resolve_config(s, spec, out)
    acc = s.activate(config, strict=False).evaluate(ds, splits["val"])
    c = cost_of(s.model.cfg, config)
    return f"eval: config={config} acc={acc!r} flops={c.flops} params={c.params}"


def export(cfg: PipelineConfig, out: Path, spec: str, name: str = EXPORT) -> str:
    """Write a standalone low-rank model holding only the selected column prefixes."""
    s = _evaluation_supernet(out)
    config = resolve_config(s, spec, out)
    s.check(config, strict=False)
    model = s.model.copy()
    for sid, r in config.entries:
        block = model.slots[sid]
        U, V = block.factors(r)
        model.slots[sid] = LowRankLinear(U.copy(), V.copy(), block.b.copy())
    model.trainable = None
    ckpt.save_model(model, out / name)
    c = cost_of(model.cfg, config)
    return f"export: config={config} flops={c.flops} params={c.params} -> {name}"


def pareto(points):
    """Non-dominated ``(flops, acc, label)`` points, cheapest first."""
    front = []
    best = -math.inf
    for flops, acc, label in sorted(points, key=lambda p: (p[0], -p[1])):
        if acc > best:
            front.append((flops, acc, label))
            best = acc
    return front


def report(cfg: PipelineConfig, out: Path) -> str:
    lines = []
    have = False
    if (out / FILTER_REPORT).exists():
        have = True
        recs = parse_records(out / FILTER_REPORT)
        for b in sorted({r["block"] for r in recs}, key=int):
            kept = [r for r in recs if r["block"] == b and r["retained"] == "1"]
            total = sum(1 for r in recs if r["block"] == b)
            lines.append(f"filter block {b}: kept {len(kept)} of {total}")
            for r in kept:
                lines.append(f"  ranks={r['ranks']:<24} P={float(r['P']):.4f} F={float(r['F']):.4f} "
                             f"M={float(r['M']):.4f}")
    if (out / SEARCH_REPORT).exists():
        have = True
        recs = parse_records(out / SEARCH_REPORT)
        gens = [r for r in recs if "gen" in r]
        cands = [r for r in recs if "rank" in r]
        if gens:
            lines.append(f"search: {len(gens) - 1} generations, best {float(gens[0]['best']):.4f} -> "
                         f"{float(gens[-1]['best']):.4f}")
        front = pareto([(int(r["flops"]), float(r["acc"]), r["config"]) for r in cands])
        lines.append("pareto (flops vs accuracy):")
        lines.append(f"  {'flops':>8}  {'acc':>7}  config")
        for flops, acc, label in front:
            lines.append(f"  {flops:>8}  {acc:>7.4f}  {label}")
    if not have:
        raise DependencyError(f"no reports found in {out} (run filter or search first)", path=str(out))
    return "\n".join(lines)


STAGES = {
    "gen-data": gen_data,
    "train-base": train_base,
    "decompose": decompose,
    "filter": run_filter,
    "train-supernet": train_supernet_stage,
    "search": run_search,
    "report": report,
}


def run_all(cfg: PipelineConfig, out: Path) -> list[str]:
    """Every stage in order (filtering only when enabled)."""
    out.mkdir(parents=True, exist_ok=True)
    order = ["gen-data", "train-base", "decompose"]
    if cfg["filter.enabled"]:
        order.append("filter")
    order += ["train-supernet", "search"]
    return [STAGES[name](cfg, out) for name in order]

