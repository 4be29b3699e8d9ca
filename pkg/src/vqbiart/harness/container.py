"""On-disk formats.

Checkpoint container (all integers little-endian)::

    b"VQBCKPT\\0"  u32 version  u64 header_len  header(JSON, UTF-8)  tensor blob

The header is ``{"meta": ..., "tensors": [{name, dtype, shape, offset, nbytes}]}``
serialized with sorted keys, and the blob holds each tensor's raw
little-endian bytes at its offset. Identical state therefore always
produces identical bytes.

Index-grid container, one or more records back to back::

    b"VQIG"  u16 version  u32 height  u32 width  u32 d_Z   u32[height*width] row-major
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch

from ..errors import require

CKPT_MAGIC = b"VQBCKPT\0"
CKPT_VERSION = 1
GRID_MAGIC = b"VQIG"
GRID_VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_FROM_NAME = {v: k for k, v in _DTYPES.items()}


def save_container(path: str | Path, meta: dict, tensors: dict[str, torch.Tensor]) -> None:
    Path(path).write_bytes(dumps_container(meta, tensors))


def dumps_container(meta: dict, tensors: dict[str, torch.Tensor]) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        require(t.dtype in _DTYPES, f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        entries.append(
            {"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    return CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(header)) + header + b"".join(blobs)


def load_container(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    require(data[:8] == CKPT_MAGIC, f"{path} is not a checkpoint container")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    require(version == CKPT_VERSION, f"unsupported checkpoint version {version}")
    start = 8 + 12
    header = json.loads(data[start : start + hlen])
    blob = memoryview(data)[start + hlen :]
    tensors = {}
    for e in header["tensors"]:
        arr = np.frombuffer(blob[e["offset"] : e["offset"] + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    return header["meta"], tensors


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def state_sha256(state: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for k in sorted(state):
        h.update(k.encode())
        h.update(state[k].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# optimizer state_dicts are nested; tensors go to the blob, everything else to JSON


def flatten_optimizer(sd: dict, prefix: str = "optim") -> tuple[dict, dict[str, torch.Tensor]]:
    tensors: dict[str, torch.Tensor] = {}
    state_meta: dict[str, dict[str, Any]] = {}
    for pid, st in sd["state"].items():
        entry = {}
        for k, v in st.items():
            if torch.is_tensor(v):
                key = f"{prefix}/state/{pid}/{k}"
                tensors[key] = v
                entry[k] = {"tensor": key}
            else:
                entry[k] = {"value": v}
        state_meta[str(pid)] = entry
    return {"state": state_meta, "param_groups": sd["param_groups"]}, tensors


def unflatten_optimizer(meta: dict, tensors: dict[str, torch.Tensor]) -> dict:
    state = {}
    for pid, entry in meta["state"].items():
        state[int(pid)] = {k: tensors[v["tensor"]] if "tensor" in v else v["value"] for k, v in entry.items()}
    return {"state": state, "param_groups": meta["param_groups"]}


@dataclass
class IndexGrid:
    indices: np.ndarray  # [height, width] uint32
    d_z: int

    @property
    def height(self) -> int:
        return int(self.indices.shape[0])

    @property
    def width(self) -> int:
        return int(self.indices.shape[1])


def dumps_grids(grids: list[IndexGrid]) -> bytes:
    out = bytearray()
    for g in grids:
        idx = np.asarray(g.indices)
        require(idx.ndim == 2, "index grid must be 2-D")
        require(idx.size == 0 or (idx.min() >= 0 and idx.max() < g.d_z), "grid index outside [0, d_Z)")
        out += GRID_MAGIC + struct.pack("<HIII", GRID_VERSION, idx.shape[0], idx.shape[1], g.d_z)
        out += idx.astype("<u4").tobytes()
    return bytes(out)


def loads_grids(data: bytes) -> list[IndexGrid]:
    grids = []
    pos = 0
    hsize = 4 + struct.calcsize("<HIII")
    while pos < len(data):
        require(data[pos : pos + 4] == GRID_MAGIC, f"bad index-grid magic at byte {pos}")
        version, h, w, d_z = struct.unpack_from("<HIII", data, pos + 4)
        require(version == GRID_VERSION, f"unsupported index-grid version {version}")
        pos += hsize
        n = h * w * 4
        require(pos + n <= len(data), "truncated index-grid record")
        idx = np.frombuffer(data[pos : pos + n], dtype="<u4").reshape(h, w).astype(np.int64)
        require(idx.size == 0 or idx.max() < d_z, "grid index outside [0, d_Z)")
        grids.append(IndexGrid(idx, d_z))
        pos += n
    return grids


def save_grids(path: str | Path, grids: list[IndexGrid]) -> None:
    Path(path).write_bytes(dumps_grids(grids))


def load_grids(path: str | Path) -> list[IndexGrid]:
    return loads_grids(Path(path).read_bytes())
