"""Minimal image codecs: PPM (P6), PGM (P5) and 8-bit RGB PNG.

Keeps the pipeline free of mandatory third-party codecs; synthetic data is
emitted as PPM, real datasets may arrive as PNG.
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    """Unreadable or unsupported image file."""


def _read_pnm_header(buf: bytes, magic: bytes):
    """Parse 'P6'/'P5' headers, skipping whitespace and # comments."""
    if not buf.startswith(magic):
        raise ImageFormatError(f"expected {magic.decode()} header")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        fields.append(buf[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise ImageFormatError("malformed PNM header") from exc
    if maxval != 255:
        raise ImageFormatError("only maxval 255 is supported")
    return w, h, pos


def read_ppm(path) -> np.ndarray:
    """P6 file -> float array (H, W, 3) in [0, 1]."""
    buf = Path(path).read_bytes()
    w, h, pos = _read_pnm_header(buf, b"P6")
    need = w * h * 3
    raw = buf[pos:pos + need]
    if len(raw) != need:
        raise ImageFormatError(f"truncated PPM payload in {path}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def write_ppm(path, img: np.ndarray) -> None:
    """Float [0,1] or uint8 (H, W, 3) -> P6 file."""
    arr = _to_u8(img, 3)
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())


def read_pgm(path) -> np.ndarray:
    """P5 file -> float array (H, W) in [0, 1]."""
    buf = Path(path).read_bytes()
    w, h, pos = _read_pnm_header(buf, b"P5")
    need = w * h
    raw = buf[pos:pos + need]
    if len(raw) != need:
        raise ImageFormatError(f"truncated PGM payload in {path}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def write_pgm(path, img: np.ndarray) -> None:
    arr = _to_u8(img, None)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())


def _to_u8(img: np.ndarray, channels) -> np.ndarray:
    arr = np.asarray(img)
    if channels is not None and (arr.ndim != 3 or arr.shape[2] != channels):
        raise ImageFormatError(f"expected (H, W, {channels}) image")
    if channels is None and arr.ndim != 2:
        raise ImageFormatError("expected (H, W) image")
    if arr.dtype == np.uint8:
        return arr
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


# --- PNG: 8-bit RGB (color type 2), no interlace ---

_PNG_SIG = b"\x89PNG\r\n\x1a\n"


def read_png(path) -> np.ndarray:
    """8-bit RGB PNG -> float array (H, W, 3) in [0, 1]."""
    buf = Path(path).read_bytes()
    if not buf.startswith(_PNG_SIG):
        raise ImageFormatError("not a PNG file")
    pos = 8
    width = height = None
    idat = bytearray()
    while pos < len(buf):
        length, ctype = struct.unpack(">I4s", buf[pos:pos + 8])
        data = buf[pos + 8:pos + 8 + length]
        pos += 12 + length
        if ctype == b"IHDR":
            width, height, depth, color, comp, filt, interlace = \
                struct.unpack(">IIBBBBB", data)
            if depth != 8 or color != 2:
                raise ImageFormatError("only 8-bit RGB PNG is supported")
            if interlace != 0:
                raise ImageFormatError("interlaced PNG is not supported")
        elif ctype == b"IDAT":
            idat.extend(data)
        elif ctype == b"IEND":
            break
    if width is None:
        raise ImageFormatError("missing IHDR")
    raw = zlib.decompress(bytes(idat))
    stride = width * 3
    if len(raw) != height * (stride + 1):
        raise ImageFormatError("PNG payload size mismatch")
    out = np.empty((height, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.uint8)
    for y in range(height):
        ftype = raw[y * (stride + 1)]
        line = np.frombuffer(raw, dtype=np.uint8,
                             count=stride, offset=y * (stride + 1) + 1)
        out[y] = _unfilter(ftype, line, prev)
        prev = out[y]
    return out.reshape(height, width, 3).astype(np.float64) / 255.0


def _unfilter(ftype: int, line: np.ndarray, prev: np.ndarray) -> np.ndarray:
    bpp = 3
    cur = line.astype(np.int32)
    up = prev.astype(np.int32)
    if ftype == 0:
        return line.copy()
    if ftype == 2:
        return ((cur + up) & 0xFF).astype(np.uint8)
    out = np.zeros(line.size, dtype=np.int32)
    if ftype == 1:
        for i in range(line.size):
            left = out[i - bpp] if i >= bpp else 0
            out[i] = (cur[i] + left) & 0xFF
    elif ftype == 3:
        for i in range(line.size):
            left = out[i - bpp] if i >= bpp else 0
            out[i] = (cur[i] + (left + up[i]) // 2) & 0xFF
    elif ftype == 4:
        for i in range(line.size):
            left = out[i - bpp] if i >= bpp else 0
            upleft = up[i - bpp] if i >= bpp else 0
            out[i] = (cur[i] + _paeth(left, int(up[i]), upleft)) & 0xFF
    else:
        raise ImageFormatError(f"unknown PNG filter type {ftype}")
    return out.astype(np.uint8)


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    if pb <= pc:
        return b
    return c


def write_png(path, img: np.ndarray) -> None:
    """Write an (H, W, 3) image as 8-bit RGB PNG (filter 0 rows)."""
    arr = _to_u8(img, 3)
    h, w, _ = arr.shape
    raw = bytearray()
    for y in range(h):
        raw.append(0)
        raw.extend(arr[y].tobytes())
    payload = zlib.compress(bytes(raw), 6)

    def chunk(ctype: bytes, data: bytes) -> bytes:
        return (struct.pack(">I", len(data)) + ctype + data
                + struct.pack(">I", zlib.crc32(ctype + data) & 0xFFFFFFFF))

    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    with open(path, "wb") as fh:
        fh.write(_PNG_SIG)
        fh.write(chunk(b"IHDR", ihdr))
        fh.write(chunk(b"IDAT", payload))
        fh.write(chunk(b"IEND", b""))
