"""Single-file checkpoint serialization.

Layout: 5-byte magic "MGRW1", a little-endian u32 header length, a JSON
header holding the config, metadata (step, cumulative_flops,
growth_history) and a tensor index sorted by name, then the concatenated
row-major little-endian float32 payload. Byte output is deterministic for
a given checkpoint; writes are atomic (temp file + rename).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .checkpoint import Checkpoint, ModelConfig, param_shapes
from .errors import CorruptionError, FormatError, UnsupportedError

MAGIC = b"MGRW1"
DTYPE = "f32"


def _header_bytes(ckpt: Checkpoint) -> tuple[bytes, list[str]]:
    names = sorted(ckpt.params)
    index = []
    offset = 0
    for name in names:
        arr = ckpt.params[name]
        length = arr.size * 4
        index.append({
            "name": name,
            "dtype": DTYPE,
            "shape": list(arr.shape),
            "byte_offset": offset,
            "byte_length": length,
        })
        offset += length
    header = {
        "config": ckpt.config.to_dict(),
        "metadata": {
            "step": ckpt.step,
            "cumulative_flops": ckpt.flops,
            "growth_history": ckpt.growth_history,
        },
        "tensors": index,
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"), names


def save(ckpt: Checkpoint, path) -> None:
    """Write the checkpoint to path atomically."""
    header, names = _header_bytes(ckpt)
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            for name in names:
                fh.write(np.ascontiguousarray(ckpt.params[name], dtype="<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_parts(path) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        raw = fh.read(4)
        if len(raw) != 4:
            raise CorruptionError("truncated header length")
        (hlen,) = struct.unpack("<I", raw)
        header = fh.read(hlen)
        if len(header) != hlen:
            raise CorruptionError("truncated header")
        payload = fh.read()
    try:
        return json.loads(header.decode("utf-8")), payload
    except ValueError as exc:
        raise FormatError(f"header is not valid JSON: {exc}") from exc


def read_header(path) -> dict:
    """Parse just the JSON header of a checkpoint file."""
    return _read_parts(path)[0]


def load(path) -> Checkpoint:
    """Reconstruct a checkpoint, validating the index against the payload
    and the config-implied tensor set."""
    header, payload = _read_parts(path)

    for key in ("config", "metadata", "tensors"):
        if key not in header:
            raise FormatError(f"header missing {key!r}")
    cfg = ModelConfig.from_dict(header["config"])
    meta = header["metadata"]
    index = header["tensors"]

    expected = param_shapes(cfg)
    seen = [entry.get("name") for entry in index]
    if sorted(seen) != sorted(expected):
        raise FormatError("tensor index does not match the config-implied tensor set")

    params = {}
    cursor = 0
    for entry in index:
        name = entry["name"]
        if entry.get("dtype") != DTYPE:
            raise UnsupportedError(f"tensor {name} has unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(int(s) for s in entry["shape"])
        if shape != expected[name]:
            raise CorruptionError(f"tensor {name} has shape {shape}, config implies {expected[name]}")
        offset = int(entry["byte_offset"])
        length = int(entry["byte_length"])
        if offset != cursor:
            raise CorruptionError(f"tensor {name} offset {offset} is not contiguous "
                                  f"(expected {cursor})")
        if length != int(np.prod(shape)) * 4:
            raise CorruptionError(f"tensor {name} length {length} does not match shape {shape}")
        if offset + length > len(payload):
            raise CorruptionError(f"payload truncated inside tensor {name}")
        params[name] = np.frombuffer(payload, dtype="<f4", count=length // 4,
                                     offset=offset).reshape(shape).astype(np.float32)
        cursor = offset + length
    if cursor != len(payload):
        raise CorruptionError(f"payload has {len(payload) - cursor} trailing bytes")

    return Checkpoint(
        config=cfg,
        params=params,
        step=int(meta["step"]),
        flops=int(meta["cumulative_flops"]),
        growth_history=list(meta.get("growth_history", [])),
    )
