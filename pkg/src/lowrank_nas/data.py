"""Seeded synthetic image-classification data and train/val/proxy splits."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

ROLES = ("train", "val", "proxy")


@dataclass(frozen=True)
class DatasetSpec:
    """Recipe for :func:`generate`; the same spec always yields the same bytes."""

    classes: int = 4
    samples_per_class: int = 500
    image_side: int = 8
    patch_side: int = 4
    noise_sigma: float = 1.5
    seed: int = 0

    def validate(self) -> None:
        if self.classes < 1:
            raise ConfigError("data.classes must be >= 1", key="data.classes")
        if self.samples_per_class < 1:
            raise ConfigError("data.samples_per_class must be >= 1", key="data.samples_per_class")
        if self.image_side < 1 or self.patch_side < 1 or self.image_side % self.patch_side:
            raise ConfigError("image side must be a positive multiple of the patch side",
                              key="data.image_side")
        if self.noise_sigma < 0:
            raise ConfigError("data.noise_sigma must be >= 0", key="data.noise_sigma")


@dataclass
class Dataset:
    images: np.ndarray  # (N, side, side) float64
    labels: np.ndarray  # (N,) int64
    templates: np.ndarray  # (classes, side, side)
    spec: DatasetSpec

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True)
class DatasetSplit:
    role: str
    indices: np.ndarray
    seed: int

    def __len__(self) -> int:
        return self.indices.shape[0]


def _templates(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    # Each class tiles its image with patches drawn from a shared bank of +-1 patterns,
    # so classes differ by which pattern sits where rather than by global intensity.
    per_side = spec.image_side // spec.patch_side
    n_patches = per_side * per_side
    bank = rng.choice([-1.0, 1.0], size=(2 * n_patches, spec.patch_side, spec.patch_side))
    templates = np.empty((spec.classes, spec.image_side, spec.image_side))
    seen = set()
    for c in range(spec.classes):
        while True:
            picks = tuple(int(i) for i in rng.integers(0, bank.shape[0], size=n_patches))
            if picks not in seen or len(seen) >= bank.shape[0] ** n_patches:
                seen.add(picks)
                break
        for p, idx in enumerate(picks):
            r, col = divmod(p, per_side)
            templates[c,
                      r * spec.patch_side:(r + 1) * spec.patch_side,
                      col * spec.patch_side:(col + 1) * spec.patch_side] = bank[idx]
    return templates


def generate(spec: DatasetSpec) -> Dataset:
    """Template-plus-Gaussian-noise images; sample ``i`` has label ``i % classes``."""
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    templates = _templates(spec, rng)
    n = spec.classes * spec.samples_per_class
    labels = np.arange(n, dtype=np.int64) % spec.classes
    noise = rng.standard_normal((n, spec.image_side, spec.image_side)) * spec.noise_sigma
    images = templates[labels] + noise
    return Dataset(images=images, labels=labels, templates=templates, spec=spec)


def _stratified_pick(labels: np.ndarray, pool: np.ndarray, fraction: float,
                     rng: np.random.Generator) -> np.ndarray:
    picked = []
    for c in np.unique(labels[pool]):
        members = pool[labels[pool] == c]
        members = members[rng.permutation(members.shape[0])]
        take = max(1, int(round(fraction * members.shape[0])))
        picked.append(members[:take])
    return np.sort(np.concatenate(picked))


def make_splits(dataset: Dataset, val_fraction: float = 0.2, proxy_fraction: float = 0.1,
                seed: int = 0) -> dict[str, DatasetSplit]:
    """Disjoint class-stratified train/val splits plus a stratified proxy subset of train."""
    if not 0 < val_fraction < 1:
        raise ConfigError("val_fraction must lie in (0, 1)", key="data.val_fraction")
    if not 0 < proxy_fraction <= 1:
        raise ConfigError("proxy_fraction must lie in (0, 1]", key="filter.proxy_fraction")
    rng = np.random.Generator(np.random.PCG64(seed))
    everything = np.arange(len(dataset))
    val = _stratified_pick(dataset.labels, everything, val_fraction, rng)
    train = np.setdiff1d(everything, val)
    proxy = _stratified_pick(dataset.labels, train, proxy_fraction, rng)
    return {
        "train": DatasetSplit("train", train, seed),
        "val": DatasetSplit("val", val, seed),
        "proxy": DatasetSplit("proxy", proxy, seed),
    }


def iter_batches(dataset: Dataset, split: DatasetSplit, batch_size: int,
                 rng: np.random.Generator | None = None, max_batches: int | None = None):
    """Yield ``(images, labels)`` batches; shuffled when ``rng`` is given, else in index order."""
    if len(split) == 0:
        raise ValueError(f"split {split.role!r} is empty")
    idx = split.indices
    if rng is not None:
        idx = idx[rng.permutation(idx.shape[0])]
    for n, start in enumerate(range(0, idx.shape[0], batch_size)):
        if max_batches is not None and n >= max_batches:
            return
        chunk = idx[start:start + batch_size]
        yield dataset.images[chunk], dataset.labels[chunk]


def nearest_template_accuracy(dataset: Dataset) -> float:
    """Accuracy of assigning each image to the closest class template."""
    flat = dataset.images.reshape(len(dataset), -1)
    tmpl = dataset.templates.reshape(dataset.templates.shape[0], -1)
    d = ((flat[:, None, :] - tmpl[None, :, :]) ** 2).sum(axis=-1)
    return float((d.argmin(axis=1) == dataset.labels).mean())
