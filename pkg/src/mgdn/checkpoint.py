"""Binary checkpoint format.

Layout (little-endian):
    b"MGDN" | u32 version | u32 n + config text | u32 n + meta text |
    u32 record count | records | u32 CRC-32 of everything before it

Each record is u32 name length, UTF-8 name, u32 ndim, ndim x u32 extents and
the float64 values. Records hold parameters followed by the Adam moments
("adam.m/<name>", "adam.v/<name>"). Text blocks are canonical key-sorted
key=value lines, so save -> load -> save is byte-identical.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .config import model_config_from_text, parse_text, to_text
from .params import ParamStore
from .tensor import Tensor
from .train import OptimConfig, TrainState

MAGIC = b"MGDN"
VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


def _block(text: str) -> bytes:
    raw = text.encode("utf-8")
    return _U32.pack(len(raw)) + raw


def _record(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    head = _U32.pack(len(nb)) + nb + _U32.pack(arr.ndim) + b"".join(_U32.pack(d) for d in arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _meta(state: TrainState) -> dict:
    o = state.optim
    return {
        "step": state.step,
        "seed": state.seed,
        "rng": json.dumps(state.rng.bit_generator.state, sort_keys=True),
        "lr": o.lr, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps, "crop": o.crop,
        "decay_steps": o.decay_steps,
    }


def dumps(state: TrainState) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION), _block(to_text(state.config.to_dict())),
             _block(to_text(_meta(state)))]
    records = [(k, t.data) for k, t in state.params.items()]
    records += [(f"adam.m/{k}", state.m[k]) for k in state.params]
    records += [(f"adam.v/{k}", state.v[k]) for k in state.params]
    parts.append(_U32.pack(len(records)))
    parts.extend(_record(n, a) for n, a in records)
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body))


def save_checkpoint(path, state: TrainState) -> None:
    Path(path).write_bytes(dumps(state))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def loads(blob: bytes, expect_config=None) -> TrainState:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError(f"not a checkpoint: bad magic {blob[:4]!r}")
    body, crc = blob[:-4], _U32.unpack(blob[-4:])[0]
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt")
    r = _Reader(body)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version}, this build reads {VERSION}")
    config = model_config_from_text(r.text())
    if expect_config is not None and expect_config.to_dict() != config.to_dict():
        raise CheckpointError("checkpoint config does not match:\n  checkpoint: "
                              f"{to_text(config.to_dict())!r}\n  expected:   "
                              f"{to_text(expect_config.to_dict())!r}")
    meta = parse_text(r.text())
    arrays = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u32()))
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} trailing bytes after records")

    params = ParamStore()
    for name, a in arrays.items():
        if not name.startswith("adam."):
            params[name] = Tensor(a, requires_grad=True, name=name)
    m = {k: arrays[f"adam.m/{k}"] for k in params}
    v = {k: arrays[f"adam.v/{k}"] for k in params}
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(meta["rng"])
    optim = OptimConfig(lr=float(meta["lr"]), beta1=float(meta["beta1"]),
                        beta2=float(meta["beta2"]), eps=float(meta["eps"]),
                        crop=int(meta["crop"]), decay_steps=int(meta["decay_steps"]))
    return TrainState(config, optim, params, m, v, int(meta["step"]), rng, int(meta["seed"]))


def load_checkpoint(path, expect_config=None) -> TrainState:
    return loads(Path(path).read_bytes(), expect_config)
