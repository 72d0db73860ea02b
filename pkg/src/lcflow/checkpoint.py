"""Binary checkpoint format shared by adapters and base models.

Layout (all integers little-endian unsigned 32-bit unless noted)::

    b"LCF1"
    header length, header bytes (UTF-8 JSON, sorted keys)
    for each tensor in sorted-name order:
        name length, name bytes (UTF-8)
        dtype code (u8, 1 = float32), rank (u8), dims
        raw float32 values, row-major

A file must end exactly after its last tensor.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"LCF1"
FLOAT32 = 1


class CheckpointError(ValueError):
    pass


def encode(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", len(head)), head]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode()
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<BB", FLOAT32, arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    return b"".join(parts)


def decode(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic; not an LCF1 checkpoint")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError("checkpoint truncated")
        out = blob[pos:pos + n]
        pos += n
        return out

    (hlen,) = struct.unpack("<I", take(4))
    try:
        header = json.loads(take(hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from None
    tensors: dict[str, np.ndarray] = {}
    while pos < len(blob):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        code, rank = struct.unpack("<BB", take(2))
        if code != FLOAT32:
            raise CheckpointError(f"unsupported dtype code {code} for {name}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    return header, tensors


def save(path: str | Path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(header, tensors))


def load(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())


# ------------------------------------------------------------ adapters


def adapter_to_record(adapter, meta: dict | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    header = {"kind": adapter.kind, "config": adapter.config.to_dict(),
              "layers": list(adapter.layers), "meta": meta or {}}
    return header, {k: v.data for k, v in adapter.params.items()}


def adapter_from_record(header: dict, tensors: dict[str, np.ndarray]):
    from .c2c import C2CAdapter, C2CConfig, pipeline_shapes
    from .lcf import LcfAdapter, LcfConfig, layer_param_shapes, pool_param_shapes

    kind = header.get("kind")
    if kind == "lcf":
        cfg = LcfConfig.from_dict(header["config"])
        expected = {}
        for i in header["layers"]:
            expected.update({f"layers.{i}.{n}": s for n, s in layer_param_shapes(cfg).items()})
            if cfg.pool:
                expected.update({f"pool.{i}.{n}": s for n, s in pool_param_shapes(cfg).items()})
        cls = LcfAdapter
    elif kind == "c2c":
        cfg = C2CConfig.from_dict(header["config"])
        expected = {f"layers.{i}.{t}.{n}": s for i in header["layers"] for t in ("k", "v")
                    for n, s in pipeline_shapes(cfg).items()}
        cls = C2CAdapter
    else:
        raise CheckpointError(f"unknown adapter kind {kind!r}")
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))[:3]
        extra = sorted(set(tensors) - set(expected))[:3]
        raise CheckpointError(f"tensor set mismatch (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if tuple(tensors[name].shape) != tuple(shape):
            raise CheckpointError(f"{name}: dims {tensors[name].shape} != expected {shape}")
    params = {k: Tensor(v, requires_grad=True) for k, v in tensors.items()}
    return cls(cfg, params, header["layers"])


def save_adapter(path: str | Path, adapter, meta: dict | None = None) -> None:
    save(path, *adapter_to_record(adapter, meta))


def load_adapter(path: str | Path):
    return adapter_from_record(*load(path))


# ------------------------------------------------------------ base models


def save_model(path: str | Path, model) -> None:
    header = {"kind": "toy_lm", "geometry": model.geometry.to_dict()}
    save(path, header, {k: v.data for k, v in model.params.items()})


def load_model(path: str | Path):
    from .toy_lm import ModelGeometry, ToyLM

    header, tensors = load(path)
    if header.get("kind") != "toy_lm":
        raise CheckpointError("not a base-model checkpoint")
    return ToyLM(ModelGeometry(**header["geometry"]), {k: Tensor(v) for k, v in tensors.items()})
