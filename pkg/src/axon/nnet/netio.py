"""Checkpoint container: named f32 tensors, bit-exact round trip.

Layout (little-endian): magic "VNET", version u32, param count u32, then per
parameter: name length u16, UTF-8 name, rank u8, dims u32[rank], f32 payload
in C order.
"""
from __future__ import annotations

import struct

import numpy as np

from ..voxcore import VoxIOError
from .layers import Module

_MAGIC = b"VNET"
_VERSION = 1


def save_state(state: dict[str, np.ndarray], path) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", _MAGIC, _VERSION, len(state)))
        for name, arr in state.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype=np.float64)
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes(order="C"))


def load_state(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise VoxIOError(f"{path}: truncated header")
    magic, version, count = struct.unpack("<4sII", blob[:12])
    if magic != _MAGIC:
        raise VoxIOError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise VoxIOError(f"{path}: unknown version {version}")
    pos = 12
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=pos)
            pos += 4 * n
        except (struct.error, ValueError) as exc:
            raise VoxIOError(f"{path}: truncated at parameter {len(state)}") from exc
        if arr.size != n:
            raise VoxIOError(f"{path}: truncated payload for {name!r}")
        state[name] = arr.astype(np.float64).reshape(dims)
    return state


def save_net(net: Module, path) -> None:
    save_state(net.state_dict(), path)


def load_net(net: Module, path, strict: bool = True) -> None:
    net.load_state_dict(load_state(path), strict=strict)
