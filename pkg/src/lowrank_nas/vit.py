"""A desk-scale vision transformer with swappable linear slots.

Images are single-channel ``(batch, side, side)`` arrays. The network is
patch embedding -> ``depth`` pre-norm transformer blocks -> final layer norm
-> mean pooling over tokens -> linear classifier. Inside each block the six
linear maps ``q, k, v, proj, fc1, fc2`` are *slots*: each holds either a
:class:`DenseLinear` or a :class:`LowRankLinear` and is the unit that rank
search operates on.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from . import layers as L
from .data import Dataset, DatasetSplit, iter_batches
from .errors import ConfigError, NumericError, ShapeError

ROLES = ("q", "k", "v", "proj", "fc1", "fc2")


@dataclass(frozen=True)
class ModelConfig:
    image_side: int = 8
    patch_side: int = 4
    embed_dim: int = 32
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0
    classes: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.patch_side < 1 or self.image_side < 1 or self.image_side % self.patch_side:
            raise ConfigError("model.image_side must be a positive multiple of model.patch_side",
                              key="model.image_side")
        if self.heads < 1 or self.embed_dim < 1 or self.embed_dim % self.heads:
            raise ConfigError("model.embed_dim must be divisible by model.heads",
                              key="model.embed_dim")
        if self.depth < 1:
            raise ConfigError("model.depth must be >= 1", key="model.depth")
        if self.classes < 2:
            raise ConfigError("model.classes must be >= 2", key="model.classes")
        if self.hidden < 1:
            raise ConfigError("model.mlp_ratio gives an empty hidden layer", key="model.mlp_ratio")

    @property
    def tokens(self) -> int:
        return (self.image_side // self.patch_side) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_side * self.patch_side

    @property
    def hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def slots(self) -> list["LinearSlot"]:
        d, h = self.embed_dim, self.hidden
        dims = {"q": (d, d), "k": (d, d), "v": (d, d), "proj": (d, d), "fc1": (d, h), "fc2": (h, d)}
        return [LinearSlot(i, role, *dims[role]) for i in range(self.depth) for role in ROLES]


@dataclass(frozen=True)
class LinearSlot:
    """A compressible linear map ``R^m -> R^n`` inside transformer block ``block``."""

    block: int
    role: str
    m: int
    n: int

    @property
    def slot_id(self) -> str:
        return f"blocks.{self.block}.{self.role}"


class DenseLinear:
    kind = "dense"

    def __init__(self, W: np.ndarray, b: np.ndarray):
        self.W = W
        self.b = b

    @property
    def shape(self) -> tuple[int, int]:
        return self.W.shape

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}

    def n_params(self, rank=None) -> int:
        return self.W.size + self.b.size

    def forward(self, x, rank=None):
        return L.linear_fwd(x, self.W, self.b), x

    def backward(self, cache, dy):
        dx, dW, db = L.linear_bwd(cache, self.W, dy)
        return dx, {"W": dW, "b": db}


class LowRankLinear:
    """``y = (x @ U[:, :r]) @ V[:, :r].T + b`` with factors stored at full ``width``.

    A rank-``r`` forward reads only the first ``r`` columns; the returned
    gradients are shaped like those column prefixes.
    """

    kind = "lowrank"

    def __init__(self, U: np.ndarray, V: np.ndarray, b: np.ndarray):
        if U.shape[1] != V.shape[1]:
            raise ShapeError(f"factor widths differ: U{U.shape}, V{V.shape}")
        self.U = U
        self.V = V
        self.b = b

    @property
    def shape(self) -> tuple[int, int]:
        return self.U.shape[0], self.V.shape[0]

    @property
    def width(self) -> int:
        return self.U.shape[1]

    def factors(self, rank=None) -> tuple[np.ndarray, np.ndarray]:
        r = self.width if rank is None else rank
        if not 1 <= r <= self.width:
            raise ValueError(f"rank {r} outside [1, {self.width}]")
        return self.U[:, :r], self.V[:, :r]

    def params(self) -> dict[str, np.ndarray]:
        return {"U": self.U, "V": self.V, "b": self.b}

    def n_params(self, rank=None) -> int:
        r = self.width if rank is None else rank
        m, n = self.shape
        return r * (m + n) + n

    def forward(self, x, rank=None):
        U, V = self.factors(rank)
        y, h = L.lowrank_linear_fwd(x, U, V, self.b)
        return y, (x, h, U.shape[1])

    def backward(self, cache, dy):
        x, h, r = cache
        U, V = self.factors(r)
        dx, dU, dV, db = L.lowrank_linear_bwd(x, U, V, h, dy)
        return dx, {"U": dU, "V": dV, "b": db}


def patchify(images: np.ndarray, patch_side: int) -> np.ndarray:
    """``(B, S, S)`` -> ``(B, tokens, patch_side**2)`` with patches in row-major order."""
    B, S, S2 = images.shape
    if S != S2 or S % patch_side:
        raise ShapeError(f"images {images.shape} do not tile into {patch_side}-pixel patches")
    g = S // patch_side
    x = images.reshape(B, g, patch_side, g, patch_side).transpose(0, 1, 3, 2, 4)
    return x.reshape(B, g * g, patch_side * patch_side)


class Model:
    """Parameters plus slot layers; forward and manual backward.

    ``params`` holds every non-slot tensor by name (``patch.W``, ``pos``,
    ``blocks.0.ln1.g``, ``norm.b``, ``head.W`` ...). Slot tensors are named
    ``<slot_id>.<W|U|V|b>``. ``trainable`` restricts which names receive
    gradients; ``None`` means all.
    """

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray],
                 slots: dict[str, DenseLinear | LowRankLinear]):
        self.cfg = cfg
        self.params = params
        self.slots = slots
        self.trainable: set[str] | None = None
        self._tape = None

    # ------------------------------------------------------------ bookkeeping

    def slot_table(self) -> list[LinearSlot]:
        return self.cfg.slots()

    def parameters(self) -> dict[str, np.ndarray]:
        """Every tensor by name, slot factors at full storage width."""
        out = dict(self.params)
        for sid, layer in self.slots.items():
            for k, v in layer.params().items():
                out[f"{sid}.{k}"] = v
        return out

    def n_params(self, ranks: Mapping[str, int] | None = None) -> int:
        ranks = ranks or {}
        total = sum(v.size for v in self.params.values())
        for sid, layer in self.slots.items():
            total += layer.n_params(ranks.get(sid))
        return total

    def copy(self) -> "Model":
        clone = copy.deepcopy(self)
        clone._tape = None
        return clone

    def _rank(self, ranks, sid):
        return None if ranks is None else ranks.get(sid)

    # ------------------------------------------------------------ forward

    def embed(self, images, tape=None):
        patches = patchify(images, self.cfg.patch_side)
        x = L.linear_fwd(patches, self.params["patch.W"], self.params["patch.b"])
        x = x + self.params["pos"]
        L.charge(x.size, L.BIAS_FLOPS)
        if tape is not None:
            tape["patches"] = patches
        return x

    def block_forward(self, i, x, ranks=None, tape=None):
        p = self.params
        pre = f"blocks.{i}."
        s = {role: self.slots[pre + role] for role in ROLES}
        r = {role: self._rank(ranks, pre + role) for role in ROLES}

        h, c_ln1 = L.layernorm_fwd(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        q, c_q = s["q"].forward(h, r["q"])
        k, c_k = s["k"].forward(h, r["k"])
        v, c_v = s["v"].forward(h, r["v"])
        a, c_att = L.attention_fwd(q, k, v, self.cfg.heads)
        o, c_proj = s["proj"].forward(a, r["proj"])
        x1 = x + o
        L.charge(x1.size, L.RESIDUAL_FLOPS)

        h2, c_ln2 = L.layernorm_fwd(x1, p[pre + "ln2.g"], p[pre + "ln2.b"])
        f, c_fc1 = s["fc1"].forward(h2, r["fc1"])
        g = L.gelu_fwd(f)
        o2, c_fc2 = s["fc2"].forward(g, r["fc2"])
        x2 = x1 + o2
        L.charge(x2.size, L.RESIDUAL_FLOPS)

        if tape is not None:
            tape[f"block{i}"] = (c_ln1, c_q, c_k, c_v, c_att, c_proj, c_ln2, c_fc1, f, c_fc2)
        return x2

    def run_blocks(self, x, start=0, stop=None, ranks=None, tape=None):
        stop = self.cfg.depth if stop is None else stop
        for i in range(start, stop):
            x = self.block_forward(i, x, ranks, tape)
        return x

    def classify(self, x, tape=None):
        p = self.params
        h, c_norm = L.layernorm_fwd(x, p["norm.g"], p["norm.b"])
        pooled = h.mean(axis=1)
        L.charge(h.size, L.POOL_FLOPS)
        logits = L.linear_fwd(pooled, p["head.W"], p["head.b"])
        if tape is not None:
            tape["norm"] = c_norm
            tape["pooled"] = pooled
            tape["tokens"] = h.shape[1]
        return logits

    def forward(self, images, ranks: Mapping[str, int] | None = None, keep: bool = False):
        """Logits for ``images``. ``ranks`` overrides the rank of low-rank slots by slot id.

        With ``keep=True`` the intermediate values needed by :meth:`backward` are retained.
        """
        tape = {"ranks": ranks} if keep else None
        x = self.embed(images, tape)
        x = self.run_blocks(x, ranks=ranks, tape=tape)
        logits = self.classify(x, tape)
        self._tape = tape
        return logits

    # ------------------------------------------------------------ backward

    def backward(self, dlogits) -> dict[str, np.ndarray]:
        """Gradients of the loss w.r.t. trainable tensors, given ``dloss/dlogits``.

        Slot factor gradients cover only the column prefix used in the forward pass.
        """
        tape = self._tape
        if tape is None:
            raise RuntimeError("backward() needs a preceding forward(..., keep=True)")
        self._tape = None
        p = self.params
        grads: dict[str, np.ndarray] = {}

        dpooled, grads["head.W"], grads["head.b"] = L.linear_bwd(tape["pooled"], p["head.W"], dlogits)
        T = tape["tokens"]
        dh = np.repeat(dpooled[:, None, :], T, axis=1) / T
        dx, grads["norm.g"], grads["norm.b"] = L.layernorm_bwd(tape["norm"], dh)

        for i in reversed(range(self.cfg.depth)):
            dx = self._block_backward(i, tape[f"block{i}"], dx, grads)

        grads["pos"] = dx.sum(axis=0)
        _, grads["patch.W"], grads["patch.b"] = L.linear_bwd(tape["patches"], p["patch.W"], dx)
        if self.trainable is not None:
            grads = {k: v for k, v in grads.items() if k in self.trainable}
        return grads

    def _block_backward(self, i, cache, dx2, grads):
        c_ln1, c_q, c_k, c_v, c_att, c_proj, c_ln2, c_fc1, f, c_fc2 = cache
        pre = f"blocks.{i}."
        s = {role: self.slots[pre + role] for role in ROLES}

        def put(role, g):
            for k, v in g.items():
                grads[f"{pre}{role}.{k}"] = v

        dg, g = s["fc2"].backward(c_fc2, dx2)
        put("fc2", g)
        df = L.gelu_bwd(f, dg)
        dh2, g = s["fc1"].backward(c_fc1, df)
        put("fc1", g)
        dln2, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = L.layernorm_bwd(c_ln2, dh2)
        dx1 = dx2 + dln2

        da, g = s["proj"].backward(c_proj, dx1)
        put("proj", g)
        dq, dk, dv = L.attention_bwd(c_att, da)
        dh = 0.0
        for role, d, c in (("q", dq, c_q), ("k", dk, c_k), ("v", dv, c_v)):
            dpart, g = s[role].backward(c, d)
            put(role, g)
            dh = dh + dpart
        dln1, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = L.layernorm_bwd(c_ln1, dh)
        return dx1 + dln1


def build_model(cfg: ModelConfig) -> Model:
    """Dense model initialised deterministically from ``cfg.seed``."""
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    d = cfg.embed_dim

    def normal(shape, std):
        return rng.standard_normal(shape) * std

    params = {
        "patch.W": normal((cfg.patch_dim, d), 1.0 / math.sqrt(cfg.patch_dim)),
        "patch.b": np.zeros(d),
        "pos": normal((cfg.tokens, d), 0.1),
    }
    slots = {}
    for slot in cfg.slots():
        if slot.role == "q":
            pre = f"blocks.{slot.block}."
            params[pre + "ln1.g"] = np.ones(d)
            params[pre + "ln1.b"] = np.zeros(d)
            params[pre + "ln2.g"] = np.ones(d)
            params[pre + "ln2.b"] = np.zeros(d)
        slots[slot.slot_id] = DenseLinear(normal((slot.m, slot.n), 1.0 / math.sqrt(slot.m)),
                                          np.zeros(slot.n))
    params["norm.g"] = np.ones(d)
    params["norm.b"] = np.zeros(d)
    params["head.W"] = normal((d, cfg.classes), 1.0 / math.sqrt(d))
    params["head.b"] = np.zeros(cfg.classes)
    return Model(cfg, params, slots)


class SGD:
    """SGD with momentum and a cosine-decayed learning rate.

    Gradients may be smaller than their parameters; they update the leading
    block (the column prefix for low-rank factors) and leave the rest of both
    the parameter and its momentum buffer untouched.
    """

    def __init__(self, lr: float, momentum: float = 0.9, total_steps: int | None = None):
        self.base_lr = lr
        self.momentum = momentum
        self.total_steps = total_steps
        self.t = 0
        self.buffers: dict[str, np.ndarray] = {}

    @property
    def lr(self) -> float:
        if not self.total_steps:
            return self.base_lr
        frac = min(self.t, self.total_steps) / self.total_steps
        return 0.5 * self.base_lr * (1.0 + math.cos(math.pi * frac))

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        lr = self.lr
        for name in sorted(grads):
            g = grads[name]
            p = params[name]
            buf = self.buffers.get(name)
            if buf is None:
                buf = self.buffers[name] = np.zeros_like(p)
            sl = tuple(slice(0, s) for s in g.shape)
            buf[sl] = self.momentum * buf[sl] + g
            p[sl] -= lr * buf[sl]
        self.t += 1


def train_step(model: Model, images, labels, optimizer: SGD, ranks=None, teacher: Model | None = None,
               step: int | None = None) -> float:
    """One forward/backward/update; distils from ``teacher`` when given."""
    logits = model.forward(images, ranks=ranks, keep=True)
    if teacher is None:
        loss, dlogits = L.cross_entropy(logits, labels)
    else:
        loss, dlogits = L.distill_loss(logits, labels, teacher.forward(images))
    if not math.isfinite(loss):
        raise NumericError(f"loss became {loss} at step {step}", step=step)
    optimizer.step(model.parameters(), model.backward(dlogits))
    return loss


def train_epoch(model: Model, dataset: Dataset, split: DatasetSplit, optimizer: SGD,
                batch_size: int = 32, rng: np.random.Generator | None = None,
                teacher: Model | None = None, ranks=None) -> list[float]:
    """One pass over ``split`` in ``rng``-shuffled order; returns the per-batch losses."""
    losses = []
    for images, labels in iter_batches(dataset, split, batch_size, rng):
        losses.append(train_step(model, images, labels, optimizer, ranks, teacher, optimizer.t))
    return losses


def predict(model: Model, images, ranks=None) -> np.ndarray:
    return model.forward(images, ranks=ranks).argmax(axis=1)


def evaluate(model: Model, dataset: Dataset, split: DatasetSplit, ranks=None,
             batch_size: int = 256, max_batches: int | None = None) -> float:
    """Fraction of correctly classified samples of ``split`` (batches in index order)."""
    correct = 0
    total = 0
    for images, labels in iter_batches(dataset, split, batch_size, max_batches=max_batches):
        correct += int((predict(model, images, ranks) == labels).sum())
        total += labels.shape[0]
    if total == 0:
        raise ValueError("nothing to evaluate")
    return correct / total


def fit(model: Model, dataset: Dataset, split: DatasetSplit, epochs: int, lr: float,
        batch_size: int = 32, seed: int = 0, teacher: Model | None = None) -> list[float]:
    """Train for ``epochs`` with cosine-decayed momentum SGD; returns per-epoch mean loss."""
    steps_per_epoch = math.ceil(len(split) / batch_size)
    opt = SGD(lr, total_steps=epochs * steps_per_epoch)
    rng = np.random.Generator(np.random.PCG64(seed))
    trace = []
    for _ in range(epochs):
        losses = train_epoch(model, dataset, split, opt, batch_size, rng, teacher)
        trace.append(float(np.mean(losses)))
    return trace


def iter_slot_ids(cfg: ModelConfig, blocks: Iterable[int] | None = None) -> list[str]:
    keep = None if blocks is None else set(blocks)
    return [s.slot_id for s in cfg.slots() if keep is None or s.block in keep]
