"""Versioned binary checkpoints for model parameters and optimizer state.

Layout (all integers little-endian):

    magic         8 bytes   b"DFSVCKPT"
    version       uint32    currently 1
    n_layers      uint32
    width         uint32
    task          uint8     0 = tsp, 1 = mis
    branch        uint8     0 = discrete, 1 = continuous
    flags         uint8     bit 0: optimizer/train state present
    pad           uint8
    tensors       raw float64, canonical param_shapes order
    bn stats      raw float64, canonical bn_stat_shapes order
    [train state] step uint64, epoch uint64,
                  first moments then second moments (canonical order),
                  rng: 16-byte PCG64 state, 16-byte increment,
                  uint32 has_uint32, uint32 uinteger
    checksum      8 bytes   blake2b-64 of everything above

A load verifies the checksum before touching any payload, so truncated or
corrupted files are rejected without producing partial state.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Optional

import numpy as np

from .denoiser import DenoiserParams, bn_stat_shapes, param_shapes

MAGIC = b"DFSVCKPT"
VERSION = 1
_TASKS = ("tsp", "mis")
_BRANCHES = ("discrete", "continuous")
_FLAG_TRAIN_STATE = 1


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


class ChecksumError(CheckpointError):
    """Checksum mismatch (truncation or corruption)."""


class VersionError(CheckpointError):
    """Unsupported checkpoint version."""


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def _pack_tensors(ordered: dict) -> bytes:
    chunks = []
    for value in ordered.values():
        chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return b"".join(chunks)


def _unpack_tensors(buf: memoryview, offset: int, shapes: dict
                    ) -> tuple[dict, int]:
    out = {}
    for key, shape in shapes.items():
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(buf):
            raise CheckpointError("checkpoint payload ended early")
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
        out[key] = arr.astype(np.float64).reshape(shape).copy()
        offset += nbytes
    return out, offset


def _pack_rng(rng: np.random.Generator) -> bytes:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise CheckpointError("only PCG64 generators can be checkpointed")
    return (
        int(st["state"]["state"]).to_bytes(16, "little")
        + int(st["state"]["inc"]).to_bytes(16, "little")
        + struct.pack("<II", int(st["has_uint32"]), int(st["uinteger"]))
    )


def _unpack_rng(buf: memoryview, offset: int
                ) -> tuple[np.random.Generator, int]:
    if offset + 40 > len(buf):
        raise CheckpointError("checkpoint payload ended early")
    state = int.from_bytes(bytes(buf[offset:offset + 16]), "little")
    inc = int.from_bytes(bytes(buf[offset + 16:offset + 32]), "little")
    has_uint32, uinteger = struct.unpack_from("<II", buf, offset + 32)
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": state, "inc": inc},
        "has_uint32": int(has_uint32),
        "uinteger": int(uinteger),
    }
    return rng, offset + 40


def save_checkpoint(path, params: DenoiserParams, *,
                    step: int = 0, epoch: int = 0,
                    adam_m: Optional[dict] = None,
                    adam_v: Optional[dict] = None,
                    rng: Optional[np.random.Generator] = None) -> None:
    """Write a checkpoint; optimizer state is included iff all of
    (adam_m, adam_v, rng) are given."""
    with_train = adam_m is not None and adam_v is not None and rng is not None
    flags = _FLAG_TRAIN_STATE if with_train else 0
    header = MAGIC + struct.pack(
        "<IIIBBBB", VERSION, params.n_layers, params.width,
        _TASKS.index(params.task), _BRANCHES.index(params.branch), flags, 0)
    body = [header, _pack_tensors(params.tensors), _pack_tensors(params.bn_stats)]
    if with_train:
        body.append(struct.pack("<QQ", step, epoch))
        body.append(_pack_tensors(adam_m))
        body.append(_pack_tensors(adam_v))
        body.append(_pack_rng(rng))
    payload = b"".join(body)
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(_checksum(payload))


def load_checkpoint(path) -> dict:
    """Read a checkpoint into a dict.

    Keys: ``params`` always; ``step``, ``epoch``, ``adam_m``, ``adam_v``,
    ``rng`` when the file carries optimizer state.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 16 + 8:
        raise ChecksumError(f"{path}: file too short to be a checkpoint")
    payload, stored = raw[:-8], raw[-8:]
    if _checksum(payload) != stored:
        raise ChecksumError(f"{path}: checksum mismatch (truncated or corrupt)")
    if payload[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version, n_layers, width, task_id, branch_id, flags, _ = struct.unpack_from(
        "<IIIBBBB", payload, 8)
    if version != VERSION:
        raise VersionError(f"{path}: checkpoint version {version} is not "
                           f"supported (expected {VERSION})")
    if task_id >= len(_TASKS) or branch_id >= len(_BRANCHES):
        raise CheckpointError(f"{path}: unknown task/branch codes")
    task, branch = _TASKS[task_id], _BRANCHES[branch_id]

    buf = memoryview(payload)
    offset = 8 + 16
    tensors, offset = _unpack_tensors(
        buf, offset, param_shapes(task, branch, n_layers, width))
    bn_stats, offset = _unpack_tensors(
        buf, offset, bn_stat_shapes(n_layers, width))
    out = {
        "params": DenoiserParams(task=task, branch=branch, n_layers=n_layers,
                                 width=width, tensors=tensors,
                                 bn_stats=bn_stats)
    }
    if flags & _FLAG_TRAIN_STATE:
        if offset + 16 > len(buf):
            raise CheckpointError("checkpoint payload ended early")
        step, epoch = struct.unpack_from("<QQ", buf, offset)
        offset += 16
        shapes = param_shapes(task, branch, n_layers, width)
        adam_m, offset = _unpack_tensors(buf, offset, shapes)
        adam_v, offset = _unpack_tensors(buf, offset, shapes)
        rng, offset = _unpack_rng(buf, offset)
        out.update(step=int(step), epoch=int(epoch), adam_m=adam_m,
                   adam_v=adam_v, rng=rng)
    if offset != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - offset} trailing bytes")
    return out
