"""Small file formats: PGM/PPM images, CSV vectors and IDX arrays."""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .errors import ContractViolation, FMPSError

__all__ = [
    "FormatError",
    "read_pgm",
    "write_pgm",
    "write_ppm",
    "read_csv_vectors",
    "write_csv_vectors",
    "read_idx",
    "write_idx",
    "load_array",
]


class FormatError(FMPSError, ValueError):
    pass


def _to_bytes(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, img) -> None:
    """Binary graymap (P5); values are clipped to [0, 1] then scaled to 0..255."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ContractViolation(f"graymap needs a 2-D array, got shape {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + _to_bytes(img).tobytes())


def write_ppm(path, rgb) -> None:
    """Binary pixmap (P6) from an (H, W, 3) array in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ContractViolation(f"pixmap needs shape (H, W, 3), got {rgb.shape}")
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + _to_bytes(rgb).tobytes())


def _header_tokens(raw: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("image header ended early")
        tokens.append(raw[start:pos].decode("ascii"))
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Read a P2 or P5 graymap into floats in [0, 1]."""
    raw = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _header_tokens(raw, 4)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise FormatError(f"{path}: malformed graymap header") from None
    if magic == "P5":
        if maxval > 255:
            raise FormatError(f"{path}: 16-bit graymaps are not supported")
        body = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos) if len(raw) >= pos + w * h else None
        if body is None:
            raise FormatError(f"{path}: pixel data truncated")
        vals = body.astype(np.float64)
    elif magic == "P2":
        vals = np.array(raw[pos - 1 :].split(), dtype=np.float64)
        if vals.size != w * h:
            raise FormatError(f"{path}: expected {w * h} pixels, found {vals.size}")
    else:
        raise FormatError(f"{path}: not a graymap (magic {magic!r})")
    return vals.reshape(h, w) / maxval


def read_csv_vectors(path) -> np.ndarray:
    """Rows of comma-separated numbers; a non-numeric first row is treated as a header."""
    rows = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if i == 0:
                    continue
                raise FormatError(f"{path}:{i + 1}: non-numeric value in {row}") from None
    if not rows:
        raise FormatError(f"{path}: no data rows")
    if len({len(r) for r in rows}) != 1:
        raise FormatError(f"{path}: rows have differing lengths")
    arr = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: NaN or Inf in data")
    return arr


def write_csv_vectors(path, rows, header=None) -> None:
    rows = np.asarray(rows, dtype=np.float64)
    rows = rows.reshape(len(rows), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) for v in r])


def load_array(path) -> np.ndarray:
    """Load a condition or mask: graymaps by extension, otherwise CSV (a single row is squeezed)."""
    p = Path(path)
    if p.suffix.lower() in (".pgm", ".pnm"):
        return read_pgm(p)
    arr = read_csv_vectors(p)
    return arr[0] if len(arr) == 1 else arr


# IDX: two zero bytes, a type code, the number of dimensions, big-endian u32 sizes, payload.
_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise FormatError(f"{path}: not an IDX file")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_TYPES:
        raise FormatError(f"{path}: unknown IDX type code 0x{code:02x}")
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    dtype = _IDX_TYPES[code]
    count = int(np.prod(dims)) if dims else 1
    offset = 4 + 4 * ndim
    if len(raw) != offset + count * dtype.itemsize:
        raise FormatError(f"{path}: payload size does not match dims {dims}")
    return np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, arr) -> None:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ContractViolation("only unsigned-byte IDX files are written")
    header = bytes([0, 0, 0x08, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())
