"""Binary model checkpoints.

Layout of a file::

    b"SOMACKPT"                 8-byte magic
    uint32 LE                   container version (1)
    uint64 LE                   header length in bytes
    header                      UTF-8 JSON
    tensor data                 little-endian float32, in header order

The header carries ``net_config``, ``label_names``, ``head_activation``,
``tensors`` (list of ``{"name", "shape"}``), ``meta`` (training metadata such
as epoch, learning rate and seeds) and ``config_hash``. When optimiser state
is saved, ``adam.m.<name>`` and ``adam.v.<name>`` tensors follow the
parameters and ``meta["adam_step"]`` holds the step count.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .net import NetConfig, param_shapes

MAGIC = b"SOMACKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def config_hash(obj) -> str:
    """sha256 of a canonical JSON rendering."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class Checkpoint:
    cfg: NetConfig
    params: dict
    label_names: list
    meta: dict = field(default_factory=dict)
    adam_m: Optional[dict] = None
    adam_v: Optional[dict] = None

    @property
    def config_hash(self) -> str:
        return self.meta.get("config_hash", "")


def save(path, cfg: NetConfig, params: dict, label_names, meta: Optional[dict] = None,
         adam_m: Optional[dict] = None, adam_v: Optional[dict] = None) -> None:
    if len(label_names) != cfg.n_labels:
        raise CheckpointError("label names do not match the network's label count")
    shapes = param_shapes(cfg)
    if set(shapes) != set(params):
        raise CheckpointError("parameter set does not match the network config")
    names = list(shapes)
    tensors = [(n, ad._val(params[n])) for n in names]
    if adam_m is not None and adam_v is not None:
        tensors += [("adam.m." + n, np.asarray(adam_m[n])) for n in names]
        tensors += [("adam.v." + n, np.asarray(adam_v[n])) for n in names]
    meta = dict(meta or {})
    header = {
        "net_config": cfg.to_json(),
        "label_names": list(label_names),
        "head_activation": cfg.head_activation,
        "tensors": [{"name": n, "shape": list(v.shape)} for n, v in tensors],
        "meta": meta,
        "config_hash": meta.get("config_hash", config_hash(cfg.to_json())),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(blob)))
        fh.write(blob)
        for _, v in tensors:
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(data[start: start + hlen])
    offset = start + hlen
    arrays = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        end = offset + 4 * count
        if end > len(data):
            raise CheckpointError(f"{path} is truncated")
        arrays[t["name"]] = np.frombuffer(data[offset:end], dtype="<f4").astype(np.float64).reshape(t["shape"])
        offset = end
    if offset != len(data):
        raise CheckpointError(f"{path} has trailing bytes")
    cfg = NetConfig(**header["net_config"])
    names = list(param_shapes(cfg))
    missing = [n for n in names if n not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {missing[:3]}")
    params = {n: ad.param(arrays[n].copy()) for n in names}
    m = v = None
    if "adam.m." + names[0] in arrays:
        m = {n: arrays["adam.m." + n].copy() for n in names}
        v = {n: arrays["adam.v." + n].copy() for n in names}
    meta = dict(header.get("meta", {}))
    meta.setdefault("config_hash", header.get("config_hash", ""))
    return Checkpoint(cfg, params, header["label_names"], meta, m, v)
