"""Binary tensor container used for model, supernet and dataset files.

Layout (all integers little-endian ``uint32`` unless noted)::

    b"FLRA"  version  count
    count x { name_len  name(utf-8)  dtype(uint8: 0=float32, 1=int32)  ndim  dims...  data }

Float tensors are stored in single precision, integer tensors as int32.
There is no compression and no padding.
"""
from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

from .errors import BadMagicError, ShapeTableError, TruncatedFileError, VersionMismatchError

MAGIC = b"FLRA"
VERSION = 1
MAX_NDIM = 8
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}


def _code_for(arr: np.ndarray) -> int:
    return 1 if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_ else 0


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _code_for(arr)
        raw = np.asarray(arr, dtype=_DTYPES[code], order="C")
        if code == 1 and not np.array_equal(raw, arr):
            raise ValueError(f"{name}: integer values do not fit in int32")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BI", code, raw.ndim))
        parts.append(struct.pack(f"<{raw.ndim}I", *raw.shape))
        parts.append(raw.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"file ends inside {what} (offset {self.pos}, need {n} bytes)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(buf: bytes) -> dict[str, np.ndarray]:
    """Parse a container. Nothing is returned unless the whole buffer is valid."""
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"not a checkpoint: magic {buf[:4]!r} != {MAGIC!r}")
    r.pos = 4
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this reader handles {VERSION}")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = r.unpack("<I", f"name length of tensor {i}")
        try:
            name = r.take(name_len, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ShapeTableError(f"tensor {i}: name is not valid UTF-8") from exc
        code, ndim = r.unpack("<BI", f"header of {name!r}")
        if code not in _DTYPES:
            raise ShapeTableError(f"{name!r}: unknown dtype code {code}")
        if ndim > MAX_NDIM:
            raise ShapeTableError(f"{name!r}: {ndim} dimensions exceeds the limit of {MAX_NDIM}")
        dims = r.unpack(f"<{ndim}I", f"dims of {name!r}")
        if name in out:
            raise ShapeTableError(f"duplicate tensor name {name!r}")
        dtype = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        data = r.take(nbytes, f"data of {name!r}")
        out[name] = np.frombuffer(data, dtype=dtype).reshape(dims).copy()
    if r.pos != len(buf):
        raise ShapeTableError(f"{len(buf) - r.pos} bytes follow the declared {count} tensors")
    return out


def save_checkpoint(tensors: Mapping[str, np.ndarray], path) -> None:
    data = dumps(tensors)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())


# ---------------------------------------------------------------- model <-> tensors


def model_tensors(model) -> dict[str, np.ndarray]:
    """Flatten a :class:`~lowrank_nas.vit.Model` (dense, low-rank or supernet) into named tensors."""
    from .supernet import LowRankFactorPair

    cfg = model.cfg
    out = {
        "meta.model": np.array([cfg.image_side, cfg.patch_side, cfg.embed_dim, cfg.depth, cfg.heads,
                                cfg.mlp_ratio, cfg.classes, cfg.seed], dtype=np.float64),
    }
    for name, arr in model.parameters().items():
        out[name] = arr
    for sid, slot in model.slots.items():
        if isinstance(slot, LowRankFactorPair):
            cs = slot.choice_set
            out[f"{sid}.choices"] = np.array(cs.ranks, dtype=np.int64)
            out[f"{sid}.choice_meta"] = np.array([cs.granularity, int(cs.allow_overcomplete)], dtype=np.int64)
    return out


def model_from_tensors(tensors: Mapping[str, np.ndarray]):
    """Rebuild a model; returns a Supernet when any slot carries a rank choice set."""
    from .supernet import LowRankFactorPair, RankChoiceSet, Supernet
    from .vit import DenseLinear, LowRankLinear, Model, ModelConfig

    try:
        meta = tensors["meta.model"]
    except KeyError as exc:
        raise ShapeTableError("checkpoint has no 'meta.model' tensor") from exc
    cfg = ModelConfig(image_side=int(meta[0]), patch_side=int(meta[1]), embed_dim=int(meta[2]),
                      depth=int(meta[3]), heads=int(meta[4]), mlp_ratio=float(meta[5]),
                      classes=int(meta[6]), seed=int(meta[7]))
    f64 = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
    slot_ids = {s.slot_id for s in cfg.slots()}
    params = {}
    for name, arr in f64.items():
        if name.startswith("meta.") or name.rsplit(".", 1)[0] in slot_ids:
            continue
        params[name] = arr
    slots = {}
    is_supernet = False
    for s in cfg.slots():
        sid = s.slot_id
        if f"{sid}.W" in f64:
            slot = DenseLinear(f64[f"{sid}.W"], f64[f"{sid}.b"])
        elif f"{sid}.U" in f64:
            U, V, b = f64[f"{sid}.U"], f64[f"{sid}.V"], f64[f"{sid}.b"]
            if f"{sid}.choices" in tensors:
                g, allow = (int(x) for x in tensors[f"{sid}.choice_meta"])
                cs = RankChoiceSet(tuple(int(r) for r in tensors[f"{sid}.choices"]), s.m, s.n, g, bool(allow))
                slot = LowRankFactorPair(sid, U, V, b, cs)
                is_supernet = True
            else:
                slot = LowRankLinear(U, V, b)
        else:
            raise ShapeTableError(f"checkpoint has no weights for slot {sid}")
        if slot.shape != (s.m, s.n):
            raise ShapeTableError(f"{sid}: stored shape {slot.shape} != expected {(s.m, s.n)}")
        slots[sid] = slot
    model = Model(cfg, params, slots)
    return Supernet(model) if is_supernet else model


def save_model(model, path) -> None:
    """Save a Model or Supernet."""
    save_checkpoint(model_tensors(getattr(model, "model", model)), path)


def load_model(path):
    return model_from_tensors(load_checkpoint(path))


def dataset_tensors(dataset, splits=None) -> dict[str, np.ndarray]:
    spec = dataset.spec
    out = {
        "meta.data": np.array([spec.classes, spec.samples_per_class, spec.image_side, spec.patch_side,
                               spec.noise_sigma, spec.seed], dtype=np.float64),
        "data.images": dataset.images,
        "data.labels": dataset.labels.astype(np.int64),
        "data.templates": dataset.templates,
    }
    for role, split in (splits or {}).items():
        out[f"split.{role}"] = split.indices.astype(np.int64)
    return out


def dataset_from_tensors(tensors):
    from .data import Dataset, DatasetSpec, DatasetSplit

    meta = tensors["meta.data"]
    spec = DatasetSpec(classes=int(meta[0]), samples_per_class=int(meta[1]), image_side=int(meta[2]),
                       patch_side=int(meta[3]), noise_sigma=float(meta[4]), seed=int(meta[5]))
    ds = Dataset(images=tensors["data.images"].astype(np.float64),
                 labels=tensors["data.labels"].astype(np.int64),
                 templates=tensors["data.templates"].astype(np.float64), spec=spec)
    splits = {
        name.split(".", 1)[1]: DatasetSplit(name.split(".", 1)[1], arr.astype(np.int64), spec.seed)
        for name, arr in tensors.items() if name.startswith("split.")
    }
    return ds, splits
