"""Binary checkpoint container for named parameter collections.

Layout (all integers little-endian):

    magic    4 bytes  b"SPGN"
    version  u32      currently 1
    config   u32 length + UTF-8 text (key = value lines with [section] headers)
    records  live parameters, then the EMA shadow, in the same order and the
             same record format:
                 name    u32 length + UTF-8 bytes
                 dtype   u8 (0 = float32, 1 = float64)
                 rank    u8
                 extents rank * u32
                 data    raw little-endian element bytes, C order
    crc      u32 CRC-32 of every preceding byte

The two record sections have identical name sequences; models trained without
an EMA store a copy of the live weights as the shadow. A reader walks records
until 4 bytes before EOF, verifies the CRC, and splits the records in half.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from ..numerics import Tensor

MAGIC = b"SPGN"
VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def _as_array(w) -> np.ndarray:
    return w.data if isinstance(w, Tensor) else np.asarray(w)


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    if arr.dtype not in _DTYPE_TAGS:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for parameter {name!r}")
    nb = name.encode("utf-8")
    parts = [struct.pack("<I", len(nb)), nb, struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim)]
    parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    parts.append(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


def save_checkpoint(
    path,
    config_text: str,
    params: Mapping[str, object],
    ema_shadow: Mapping[str, object] | None = None,
) -> None:
    """Write weights (and EMA shadow; live weights are reused when absent)."""
    shadow = ema_shadow if ema_shadow is not None else params
    if list(shadow.keys()) != list(params.keys()):
        raise CheckpointError("EMA shadow names must match parameter names in order")
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    cfg = config_text.encode("utf-8")
    blob += struct.pack("<I", len(cfg))
    blob += cfg
    for name, w in params.items():
        blob += _pack_record(name, _as_array(w))
    for name, w in shadow.items():
        blob += _pack_record(name, _as_array(w))
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path):
    """Read a checkpoint: (config_text, params dict, ema dict), CRC-verified."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    stored_crc = struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError(f"{path}: CRC mismatch, file is corrupted")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (cfg_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    config_text = raw[off : off + cfg_len].decode("utf-8")
    off += cfg_len

    records: list[tuple[str, np.ndarray]] = []
    end = len(raw) - 4
    while off < end:
        (name_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        tag, rank = struct.unpack_from("<BB", raw, off)
        off += 2
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype tag {tag} in record {name!r}")
        shape = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        dtype = _TAG_DTYPES[tag]
        count = int(np.prod(shape)) if rank else 1
        nbytes = count * dtype.itemsize
        if off + nbytes > end:
            raise CheckpointError(f"{path}: truncated record {name!r}")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off).reshape(shape)
        records.append((name, arr.astype(dtype.newbyteorder("="))))
        off += nbytes
    if off != end:
        raise CheckpointError(f"{path}: trailing bytes after records")
    if len(records) % 2:
        raise CheckpointError(f"{path}: odd record count {len(records)}")
    half = len(records) // 2
    live = records[:half]
    ema = records[half:]
    if [n for n, _ in live] != [n for n, _ in ema]:
        raise CheckpointError(f"{path}: EMA record names do not mirror the live weights")
    return config_text, dict(live), dict(ema)
