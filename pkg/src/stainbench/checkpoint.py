"""Checkpoint container.

Byte layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"STNBCKPT"
    8       4     uint32 format version (currently 1)
    12      8     uint64 header length H
    20      H     UTF-8 JSON header, keys sorted, no whitespace
    20+H    ...   tensor payload: raw little-endian arrays, C order, back to back

The header holds ``model`` (ModelSpec fields), ``train_config`` (TrainConfig
fields or null), ``epoch`` (completed epochs), ``extra`` (free-form JSON) and
``tensors``: a list of ``{name, dtype, shape, offset, nbytes}`` with offsets
relative to the start of the payload. Parameters are stored under
``param/<name>``; SGD momentum buffers under ``velocity/<name>``.

Nothing time- or host-dependent is written, so equal states give equal bytes.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import ModelSpec, build_model
from .optim import TrainConfig

MAGIC = b"STNBCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: dict
    train_config: TrainConfig | None = None
    epoch: int = 0
    velocity: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def model(self):
        model = build_model(self.spec)
        model.params = {k: v.copy() for k, v in self.params.items()}
        return model


def save_checkpoint(path, model, train_config: TrainConfig | None = None, epoch: int = 0,
                    velocity: dict | None = None, extra: dict | None = None) -> None:
    tensors = [(f"param/{k}", v) for k, v in model.params.items()]
    tensors += [(f"velocity/{k}", v) for k, v in (velocity or {}).items()]
    table, chunks, offset = [], [], 0
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr)
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        table.append({"name": name, "dtype": arr.dtype.newbyteorder("<").str,
                      "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {"model": model.spec.to_dict(),
              "train_config": train_config.to_dict() if train_config else None,
              "epoch": int(epoch), "extra": extra or {}, "tensors": table}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes)
        for chunk in chunks:
            fh.write(chunk)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a stainbench checkpoint")
    if len(raw) < 20:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[20:20 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    missing = {"model", "train_config", "epoch", "extra", "tensors"} - set(header)
    if missing:
        raise CheckpointError(f"{path}: header missing {sorted(missing)}")
    base = 20 + hlen
    params, velocity = {}, {}
    for t in header["tensors"]:
        start = base + t["offset"]
        if start + t["nbytes"] > len(raw):
            raise CheckpointError(f"{path}: truncated tensor {t['name']}")
        arr = np.frombuffer(raw, dtype=np.dtype(t["dtype"]), count=int(np.prod(t["shape"], dtype=np.int64)),
                            offset=start).reshape(t["shape"]).astype(np.dtype(t["dtype"]).newbyteorder("="))
        kind, name = t["name"].split("/", 1)
        (params if kind == "param" else velocity)[name] = arr
    cfg = header["train_config"]
    return Checkpoint(spec=ModelSpec.from_dict(header["model"]), params=params,
                      train_config=TrainConfig.from_dict(cfg) if cfg else None,
                      epoch=header["epoch"], velocity=velocity, extra=header["extra"])


def load_model(path):
    return load_checkpoint(path).model()
