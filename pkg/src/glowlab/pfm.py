"""PFM image IO plus a minimal PNG writer for previews.

PFM stores float32 scanlines bottom-to-top; a negative scale marks
little-endian payloads. Round trips are bit-exact. The PNG writer exists
only for human-viewable previews and 16-bit linear exports; no metric ever
reads a PNG.
"""

from __future__ import annotations

import os
import struct
import zlib

import numpy as np


class PfmFormatError(ValueError):
    pass


def _read_token(fh) -> bytes:
    """Whitespace-delimited header token."""
    tok = b""
    while True:
        c = fh.read(1)
        if not c:
            raise PfmFormatError("unexpected end of file in header")
        if c in b" \t\r\n":
            if tok:
                return tok
            continue
        tok += c


def read_pfm(path: str) -> np.ndarray:
    """Read a PFM file into (H, W, 3) or (H, W) float32, row 0 at the top."""
    with open(path, "rb") as fh:
        magic = _read_token(fh)
        if magic == b"PF":
            channels = 3
        elif magic == b"Pf":
            channels = 1
        else:
            raise PfmFormatError(f"bad PFM magic {magic!r}")
        try:
            width = int(_read_token(fh))
            height = int(_read_token(fh))
            scale = float(_read_token(fh))
        except ValueError as exc:
            raise PfmFormatError("malformed PFM dimensions/scale") from exc
        if width <= 0 or height <= 0 or scale == 0.0:
            raise PfmFormatError("invalid PFM dimensions or scale")
        count = width * height * channels
        payload = fh.read(4 * count)
        if len(payload) != 4 * count:
            raise PfmFormatError("truncated PFM payload")
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(payload, dtype=dtype).astype("<f4")
    shape = (height, width, channels) if channels == 3 else (height, width)
    return data.reshape(shape)[::-1].copy()


def write_pfm(path: str, image: np.ndarray):
    """Write float32 PFM (little-endian); input rows are top-to-bottom."""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] == 3:
        magic = b"PF"
    elif image.ndim == 2:
        magic = b"Pf"
    else:
        raise PfmFormatError("image must be (H, W, 3) or (H, W)")
    data = image[::-1].astype("<f4").tobytes()
    header = magic + b"\n" + f"{image.shape[1]} {image.shape[0]}\n".encode() \
        + b"-1.0\n"
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# PNG writing (filter-0 scanlines, fixed zlib level: byte-deterministic)


def _png_chunk(tag: bytes, payload: bytes) -> bytes:
    return (struct.pack(">I", len(payload)) + tag + payload
            + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF))


def _write_png(path: str, array: np.ndarray, bit_depth: int):
    h, w = array.shape[:2]
    ihdr = struct.pack(">IIBBBBB", w, h, bit_depth, 2, 0, 0, 0)
    if bit_depth == 8:
        rows = array.astype(">u1")
    else:
        rows = array.astype(">u2")
    raw = b"".join(b"\x00" + rows[y].tobytes() for y in range(h))
    idat = zlib.compress(raw, 6)
    blob = (b"\x89PNG\r\n\x1a\n" + _png_chunk(b"IHDR", ihdr)
            + _png_chunk(b"IDAT", idat) + _png_chunk(b"IEND", b""))
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def write_png_preview(path: str, hdr_image: np.ndarray, gamma: float = 2.2):
    """8-bit tonemapped preview: clip to [0,1] then apply the gamma curve."""
    img = np.clip(np.asarray(hdr_image, dtype=np.float64), 0.0, 1.0)
    img = img ** (1.0 / gamma)
    _write_png(path, np.round(img * 255.0).astype(np.uint8), 8)


def write_png16_linear(path: str, hdr_image: np.ndarray):
    """16-bit linear-response PNG (no gamma), values clipped to [0, 1]."""
    img = np.clip(np.asarray(hdr_image, dtype=np.float64), 0.0, 1.0)
    _write_png(path, np.round(img * 65535.0).astype(np.uint16), 16)
