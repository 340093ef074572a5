"""MDST checkpoint files.

Layout, all integers little-endian::

    b"MDST" | version u32 | tensor count u32
    per tensor: name length u16 | UTF-8 name | rank u8 | dims u64 * rank | float32 data
"""

from __future__ import annotations

import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from .errors import WorkbenchError
from .model import ModelConfig, ParamRegistry, param_layout
from .tensor import Tensor

MAGIC = b"MDST"
VERSION = 1


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise WorkbenchError("bad-checkpoint", "missing MDST magic")
    if len(blob) < 12:
        raise WorkbenchError("bad-checkpoint", "truncated header")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise WorkbenchError("bad-checkpoint", f"unsupported version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}Q", blob, off)
            off += 8 * rank
            n = int(np.prod(dims, dtype=np.int64))
            if off + 4 * n > len(blob):
                raise WorkbenchError("bad-checkpoint", f"truncated tensor {name}")
            out[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)
            off += 4 * n
    except struct.error as exc:
        raise WorkbenchError("bad-checkpoint", str(exc)) from exc
    if off != len(blob):
        raise WorkbenchError("bad-checkpoint", "trailing bytes")
    return out


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(tensors))
    tmp.replace(path)


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise WorkbenchError("io", str(exc)) from exc
    return loads(blob)


def save_registry(path: str | Path, params: ParamRegistry) -> None:
    save_tensors(path, {name: t.data for name, t in params.items()})


def load_registry(path: str | Path, config: ModelConfig) -> ParamRegistry:
    """Load a checkpoint and check it against ``config``'s layout."""
    tensors = load_tensors(path)
    reg = ParamRegistry(config)
    layout = param_layout(config)
    expected = {name for name, _, _ in layout}
    if set(tensors) != expected:
        missing = sorted(expected - set(tensors))
        extra = sorted(set(tensors) - expected)
        raise WorkbenchError("registry-mismatch", f"missing {missing[:3]}, unexpected {extra[:3]}")
    for name, shape, classes in layout:
        arr = tensors[name]
        if arr.shape != shape:
            raise WorkbenchError("registry-mismatch", f"{name}: {arr.shape} != {shape}")
        reg.add(name, Tensor(arr, requires_grad=True), classes)
    return reg
