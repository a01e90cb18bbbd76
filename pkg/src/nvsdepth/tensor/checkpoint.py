"""Binary checkpoint format.

Layout (little-endian)::

    b"NVSD" | u32 version | u32 header_len | header (utf-8 key=value lines)
    u32 n_params | n_params records
    u8 has_adam | [u64 step | u32 n | m records | u32 n | v records]

A record is ``u32 name_len | name | u8 dtype (0=f32, 1=f64) | u32 rank |
u32 dims[rank] | raw values``.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from ..errors import IngestionError
from .adam import AdamState

MAGIC = b"NVSD"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def _write_records(buf, arrays: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        nb = name.encode("utf-8")
        code = _CODES[arr.dtype]
        buf.write(struct.pack("<I", len(nb)) + nb)
        buf.write(struct.pack("<BI", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def _read(buf, fmt, path):
    size = struct.calcsize(fmt)
    raw = buf.read(size)
    if len(raw) != size:
        raise IngestionError(path, "truncated checkpoint")
    return struct.unpack(fmt, raw)


def _read_records(buf, path) -> dict[str, np.ndarray]:
    (count,) = _read(buf, "<I", path)
    out = {}
    for _ in range(count):
        (nlen,) = _read(buf, "<I", path)
        name = buf.read(nlen).decode("utf-8")
        code, rank = _read(buf, "<BI", path)
        if code not in _DTYPES:
            raise IngestionError(path, f"unknown dtype code {code} for {name!r}")
        dims = _read(buf, f"<{rank}I", path) if rank else ()
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        raw = buf.read(nbytes)
        if len(raw) != nbytes:
            raise IngestionError(path, f"truncated values for {name!r}")
        out[name] = np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    return out


def encode_header(header: dict[str, str]) -> str:
    return "".join(f"{k}={v}\n" for k, v in header.items())


def parse_header(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def save_checkpoint(path, params: dict[str, np.ndarray], header: dict[str, str] | None = None,
                    adam: AdamState | None = None) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<I", VERSION))
    hb = encode_header(header or {}).encode("utf-8")
    buf.write(struct.pack("<I", len(hb)) + hb)
    _write_records(buf, params)
    if adam is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01" + struct.pack("<Q", adam.step))
        _write_records(buf, {k: adam.m[k] for k in params if k in adam.m})
        _write_records(buf, {k: adam.v[k] for k in params if k in adam.v})
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Return ``(header, params, adam_state_or_None)``."""
    path = Path(path)
    if not path.is_file():
        raise IngestionError(path, "checkpoint not found")
    buf = io.BytesIO(path.read_bytes())
    if buf.read(4) != MAGIC:
        raise IngestionError(path, "bad magic, not an NVSD checkpoint")
    (version,) = _read(buf, "<I", path)
    if version != VERSION:
        raise IngestionError(path, f"unsupported checkpoint version {version}")
    (hlen,) = _read(buf, "<I", path)
    header = parse_header(buf.read(hlen).decode("utf-8"))
    params = _read_records(buf, path)
    flag = buf.read(1)
    adam = None
    if flag == b"\x01":
        (step,) = _read(buf, "<Q", path)
        m = _read_records(buf, path)
        v = _read_records(buf, path)
        adam = AdamState(step=step, m=m, v=v)
    elif flag != b"\x00":
        raise IngestionError(path, "missing optimizer-state flag")
    return header, params, adam
