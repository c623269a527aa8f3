"""Binary tensor container shared by checkpoints, calibration sets and traces.

Layout (little-endian)::

    b"SMOE" | version u32 | header_len u64 | JSON header | zero pad to 8 | payload

The header lists every tensor as ``{"name", "dtype": "f32", "shape", "offset"}``
with offsets relative to the payload start. Payloads are row-major float32.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .model import ROLES, ExpertWeights, FactoredExpert, LowRankFactor, ModelConfig, MoELayer, MoEStack

MAGIC = b"SMOE"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(Exception):
    """Base class for container load failures."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class LengthMismatchError(CheckpointError):
    """Header-declared tensor sizes disagree with the payload actually present."""


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_container(meta: dict, tensors: list[tuple[str, np.ndarray]]) -> bytes:
    """Serialize ``tensors`` (name, 2-D array) plus extra header keys ``meta``."""
    entries, chunks, offset = [], [], 0
    for name, arr in tensors:
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise ValueError(f"tensor {name!r} must be 2-D")
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "dtype": "f32", "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = dict(meta)
    header["tensors"] = entries
    hbytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    pad = (-(_PREFIX.size + len(hbytes))) % 8
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"\x00" * pad + b"".join(chunks)


def decode_container(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a container into ``(header, {name: float64 array})``."""
    if len(buf) < _PREFIX.size:
        if buf[:4] != MAGIC[: len(buf)]:
            raise BadMagicError("bad magic")
        raise TruncatedFileError("file shorter than fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported version {version}, expected {VERSION}")
    start = _PREFIX.size + hlen
    if len(buf) < start:
        raise TruncatedFileError("file ends inside the JSON header")
    try:
        header = json.loads(buf[_PREFIX.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    payload_start = start + (-start) % 8
    payload = buf[payload_start:]

    tensors, expected = {}, 0
    for t in header.get("tensors", []):
        if t.get("dtype") != "f32":
            raise CheckpointError(f"unsupported dtype {t.get('dtype')!r}")
        rows, cols = (int(s) for s in t["shape"])
        nbytes = rows * cols * 4
        if t["offset"] != expected:
            raise LengthMismatchError(f"tensor {t['name']!r} offset {t['offset']} != {expected}")
        expected += nbytes
        if expected > len(payload):
            raise LengthMismatchError(f"payload too short for tensor {t['name']!r}")
        arr = np.frombuffer(payload, dtype="<f4", count=rows * cols, offset=t["offset"])
        tensors[t["name"]] = arr.reshape(rows, cols).astype(np.float64)
    if expected != len(payload):
        raise LengthMismatchError(f"header declares {expected} payload bytes, file has {len(payload)}")
    return header, tensors


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_container(Path(path).read_bytes())


def write_container(path, meta: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    atomic_write_bytes(path, encode_container(meta, tensors))


def model_tensors(model: MoEStack) -> list[tuple[str, np.ndarray]]:
    out = []
    for i, layer in enumerate(model.layers):
        out.append((f"layer.{i}.router", layer.router))
        for j, e in enumerate(layer.experts):
            for role in ROLES:
                w = getattr(e, role)
                if isinstance(w, LowRankFactor):
                    out.append((f"layer.{i}.expert.{j}.{role}.left", w.left))
                    out.append((f"layer.{i}.expert.{j}.{role}.right", w.right))
                else:
                    out.append((f"layer.{i}.expert.{j}.{role}", w))
    return out


def encode_checkpoint(model: MoEStack) -> bytes:
    meta = {
        "config": model.config.to_dict(),
        "expert_maps": [layer.expert_map.tolist() for layer in model.layers],
    }
    return encode_container(meta, model_tensors(model))


def save_checkpoint(model: MoEStack, path) -> None:
    atomic_write_bytes(path, encode_checkpoint(model))


def decode_checkpoint(buf: bytes) -> MoEStack:
    header, tensors = decode_container(buf)
    try:
        config = ModelConfig.from_dict(header["config"])
        maps = header["expert_maps"]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"not a model checkpoint: missing {exc}") from exc
    layers = []
    for i in range(config.n_layers):
        emap = np.asarray(maps[i], dtype=np.int64)
        experts = []
        for j in range(int(emap.max()) + 1):
            roles = {}
            for role in ROLES:
                key = f"layer.{i}.expert.{j}.{role}"
                if key in tensors:
                    roles[role] = tensors[key]
                elif key + ".left" in tensors:
                    roles[role] = LowRankFactor(tensors[key + ".left"], tensors[key + ".right"])
                else:
                    raise CheckpointError(f"missing tensor {key}")
            if isinstance(roles["gate"], LowRankFactor):
                experts.append(FactoredExpert(**roles))
            else:
                experts.append(ExpertWeights(**roles))
        layers.append(MoELayer(router=tensors[f"layer.{i}.router"], experts=experts, expert_map=emap))
    return MoEStack(config=config, layers=layers)


def load_checkpoint(path) -> MoEStack:
    return decode_checkpoint(Path(path).read_bytes())
