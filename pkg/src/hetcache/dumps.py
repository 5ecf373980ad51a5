"""Binary dumps of latents, masks and weights.

Record layout (all little-endian)::

    b"HTCL"  magic
    u16      format version
    u8       dtype tag  (0 = f32, 1 = u8 mask, 2 = f64)
    u8       rank
    u32 * rank  dims
    payload  prod(dims) elements, C order

A file holds one or more records back to back; weight snapshots use one
record per tensor in :meth:`ToyDitWeights.named_arrays` order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import InvalidInputError
from .latents import EditMask, TokenGrid
from .toydit import ToyDitConfig, ToyDitWeights

MAGIC = b"HTCL"
FORMAT_VERSION = 1

_TAGS = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<f8")}
_TAG_OF = {"f32": 0, "u8": 1, "f64": 2}
_PREFIX = struct.Struct("<4sHBB")


@dataclass(frozen=True)
class DumpHeader:
    version: int
    dtype_tag: int
    dims: tuple[int, ...]

    @property
    def dtype_name(self) -> str:
        return {v: k for k, v in _TAG_OF.items()}[self.dtype_tag]

    @property
    def payload_bytes(self) -> int:
        return int(np.prod(self.dims, dtype=np.int64)) * _TAGS[self.dtype_tag].itemsize


def write_record(fp: BinaryIO, array: np.ndarray, dtype: str) -> None:
    if dtype not in _TAG_OF:
        raise InvalidInputError(f"unknown dump dtype {dtype!r}")
    tag = _TAG_OF[dtype]
    arr = np.ascontiguousarray(array, dtype=_TAGS[tag])
    if arr.ndim > 255:
        raise InvalidInputError("rank too large for dump header")
    fp.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, tag, arr.ndim))
    fp.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fp.write(arr.tobytes(order="C"))


def read_header(fp: BinaryIO) -> DumpHeader | None:
    raw = fp.read(_PREFIX.size)
    if not raw:
        return None
    if len(raw) < _PREFIX.size:
        raise InvalidInputError("truncated dump header")
    magic, version, tag, rank = _PREFIX.unpack(raw)
    if magic != MAGIC:
        raise InvalidInputError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise InvalidInputError(f"unsupported dump version {version}")
    if tag not in _TAGS:
        raise InvalidInputError(f"unknown dtype tag {tag}")
    dims_raw = fp.read(4 * rank)
    if len(dims_raw) < 4 * rank:
        raise InvalidInputError("truncated dump dims")
    return DumpHeader(version, tag, struct.unpack(f"<{rank}I", dims_raw))


def read_record(fp: BinaryIO) -> tuple[DumpHeader, np.ndarray] | None:
    header = read_header(fp)
    if header is None:
        return None
    payload = fp.read(header.payload_bytes)
    if len(payload) != header.payload_bytes:
        raise InvalidInputError("truncated dump payload")
    arr = np.frombuffer(payload, dtype=_TAGS[header.dtype_tag]).reshape(header.dims)
    return header, arr


def read_all(path) -> list[tuple[DumpHeader, np.ndarray]]:
    out = []
    with open(path, "rb") as fp:
        while (rec := read_record(fp)) is not None:
            out.append(rec)
    return out


def inspect(path) -> list[DumpHeader]:
    """Headers of every record, skipping payloads."""
    headers = []
    with open(path, "rb") as fp:
        while (h := read_header(fp)) is not None:
            fp.seek(h.payload_bytes, 1)
            headers.append(h)
    return headers


def _single(path) -> tuple[DumpHeader, np.ndarray]:
    recs = read_all(path)
    if len(recs) != 1:
        raise InvalidInputError(f"{path}: expected one record, found {len(recs)}")
    return recs[0]


def save_latents(path, grid: TokenGrid, dtype: str = "f64") -> None:
    if dtype not in ("f32", "f64"):
        raise InvalidInputError("latents are dumped as f32 or f64")
    with open(path, "wb") as fp:
        write_record(fp, grid.data, dtype)


def load_latents(path) -> TokenGrid:
    header, arr = _single(path)
    if header.dtype_tag == 1 or len(header.dims) != 4:
        raise InvalidInputError(f"{path}: not a latent dump")
    return TokenGrid(arr.astype(np.float64))


def save_mask(path, mask: EditMask) -> None:
    with open(path, "wb") as fp:
        write_record(fp, mask.flags.astype(np.uint8), "u8")


def load_mask(path) -> EditMask:
    header, arr = _single(path)
    if header.dtype_tag != 1 or len(header.dims) != 3:
        raise InvalidInputError(f"{path}: not a mask dump")
    return EditMask(arr.copy())


def save_weights(path, weights: ToyDitWeights) -> None:
    with open(path, "wb") as fp:
        for _, arr in weights.named_arrays():
            write_record(fp, arr, "f64")


def load_weights(path, cfg: ToyDitConfig) -> ToyDitWeights:
    arrays = [arr.copy() for h, arr in read_all(path)]
    return ToyDitWeights.from_arrays(arrays, cfg.blocks)


def describe(path) -> str:
    lines = []
    for i, h in enumerate(inspect(Path(path))):
        dims = "x".join(str(d) for d in h.dims)
        lines.append(f"record {i}: version={h.version} dtype={h.dtype_name} rank={len(h.dims)} dims={dims}")
    return "\n".join(lines)
