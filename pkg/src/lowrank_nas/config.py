"""Flat ``key = value`` pipeline configuration.

Every key is ``section.field`` (plus the top-level ``seed``). Lines starting
with ``#`` and blank lines are ignored. Unknown keys and unparsable values
raise :class:`~lowrank_nas.errors.ConfigError` naming the key.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

from .errors import ConfigError

# key -> (type, default, description)
KEYS: dict[str, tuple[type, object, str]] = {
    "seed": (int, 0, "seed for data, splits, initialisation, sampling and search"),
    "model.image_side": (int, 8, "image side in pixels"),
    "model.patch_side": (int, 4, "patch side in pixels"),
    "model.embed_dim": (int, 32, "token width"),
    "model.depth": (int, 2, "number of transformer blocks"),
    "model.heads": (int, 4, "attention heads"),
    "model.mlp_ratio": (float, 2.0, "MLP hidden width / token width"),
    "model.classes": (int, 4, "number of classes"),
    "data.samples_per_class": (int, 500, "samples generated per class"),
    "data.noise_sigma": (float, 1.5, "std of per-pixel Gaussian noise"),
    "data.val_fraction": (float, 0.2, "stratified validation fraction"),
    "train.base_epochs": (int, 20, "epochs for the dense base model"),
    "train.base_lr": (float, 0.05, "initial learning rate for base training"),
    "train.batch_size": (int, 32, "minibatch size for every training stage"),
    "supernet.granularity": (int, 4, "ranks are multiples of this"),
    "supernet.epochs": (int, 10, "supernet training epochs"),
    "supernet.lr": (float, 0.01, "initial learning rate for supernet training"),
    "supernet.sampling": (str, "lowrank", "path sampling: lowrank (p ~ 1/r) or uniform"),
    "filter.enabled": (bool, True, "run candidate filtering before supernet training"),
    "filter.lambda": (float, 2.0, "accuracy weight in M = lambda * P - F"),
    "filter.top_k": (int, 8, "local candidates kept per block"),
    "filter.proxy_fraction": (float, 0.1, "stratified fraction of train used for local supernets"),
    "filter.local_epochs": (int, 10, "local supernet training epochs"),
    "filter.exhaustive_cap": (int, 4096, "largest local space scored exhaustively"),
    "ea.population": (int, 50, "population size"),
    "ea.generations": (int, 20, "generations"),
    "ea.parent_fraction": (float, 0.25, "fraction of the population kept as parents"),
    "ea.mutation_prob": (float, 0.1, "per-slot mutation probability"),
    "ea.crossover_prob": (float, 0.5, "per-slot crossover probability"),
    "ea.eval_batches": (int, 0, "validation batches per fitness evaluation (0 = all)"),
    "window.lower": (float, 0.4, "lower FLOPs bound as a fraction of the dense model"),
    "window.upper": (float, 0.5, "upper FLOPs bound as a fraction of the dense model"),
}


def _parse(key: str, raw: str):
    typ = KEYS[key][0]
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for {key} (expected {typ.__name__})", key=key) from None


@dataclass(frozen=True)
class PipelineConfig:
    values: Mapping[str, object] = field(default_factory=lambda: {k: v[1] for k, v in KEYS.items()})

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, overrides: Mapping[str, object]) -> "PipelineConfig":
        merged = dict(self.values)
        for key, value in overrides.items():
            if key not in KEYS:
                raise ConfigError(f"unknown config key {key!r}", key=key)
            merged[key] = _parse(key, value) if isinstance(value, str) else value
        cfg = replace(self, values=merged)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self["supernet.sampling"] not in ("lowrank", "uniform"):
            raise ConfigError("supernet.sampling must be 'lowrank' or 'uniform'", key="supernet.sampling")
        if not 0 < self["window.lower"] <= self["window.upper"]:
            raise ConfigError("need 0 < window.lower <= window.upper", key="window.lower")
        for key in ("train.base_epochs", "supernet.epochs", "train.batch_size", "filter.top_k",
                    "supernet.granularity", "data.samples_per_class"):
            if self[key] < 1:
                raise ConfigError(f"{key} must be >= 1", key=key)
        if self["filter.local_epochs"] < 0 or self["ea.eval_batches"] < 0:
            raise ConfigError("epoch and batch counts must be >= 0", key="filter.local_epochs")
        if self["filter.lambda"] < 0:
            raise ConfigError("filter.lambda must be >= 0", key="filter.lambda")
        # surface sub-config errors with the key that caused them
        self.model_config().validate()
        try:
            self.ea_config()
            self.filter_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_text(self) -> str:
        lines = []
        for key in KEYS:
            value = self.values[key]
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    # ------------------------------------------------------------ sub-configs

    def model_config(self):
        from .vit import ModelConfig

        return ModelConfig(
            image_side=self["model.image_side"], patch_side=self["model.patch_side"],
            embed_dim=self["model.embed_dim"], depth=self["model.depth"], heads=self["model.heads"],
            mlp_ratio=self["model.mlp_ratio"], classes=self["model.classes"], seed=self["seed"])

    def dataset_spec(self):
        from .data import DatasetSpec

        return DatasetSpec(
            classes=self["model.classes"], samples_per_class=self["data.samples_per_class"],
            image_side=self["model.image_side"], patch_side=self["model.patch_side"],
            noise_sigma=self["data.noise_sigma"], seed=self["seed"])

    def filter_config(self):
        from .filtering import FilterConfig

        return FilterConfig(
            lam=self["filter.lambda"], top_k=self["filter.top_k"],
            proxy_fraction=self["filter.proxy_fraction"], local_epochs=self["filter.local_epochs"],
            exhaustive_cap=self["filter.exhaustive_cap"], lr=self["supernet.lr"],
            batch_size=self["train.batch_size"], seed=self["seed"])

    def ea_config(self):
        from .search import EAConfig

        return EAConfig(
            population=self["ea.population"], generations=self["ea.generations"],
            parent_fraction=self["ea.parent_fraction"], mutation_prob=self["ea.mutation_prob"],
            crossover_prob=self["ea.crossover_prob"], seed=self["seed"],
            eval_batches=self["ea.eval_batches"] or None)


def parse_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}", key=key)
        out[key] = value
    return out


def load_config(path=None, overrides: Mapping[str, object] | None = None) -> PipelineConfig:
    """Defaults, then the file at ``path`` (if any), then ``overrides``."""
    values: dict[str, object] = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_text(fh.read()))
    values.update(overrides or {})
    return PipelineConfig().with_overrides(values)


def describe_keys() -> str:
    return "\n".join(f"  {k:<24} {v[2]} (default {v[1]})" for k, v in KEYS.items())

