"""Binary PGM/PPM (8-bit) and WMF1 float image files.

WMF1 layout: ``b"WMF1"``, little-endian u32 width, height, channels, then
``width*height*channels`` little-endian float64 samples, row-major and
channel-interleaved.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .image import Image

WMF_MAGIC = b"WMF1"
_WMF_HEADER = struct.Struct("<4sIII")


class ImageFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _pnm_tokens(buf: bytes, count: int) -> tuple[list[int], list[int], int]:
    """Read ``count`` integer header fields after the magic.

    Returns the values, their byte offsets, and the offset of the pixel data.
    """
    pos = 2
    values, starts = [], []
    n = len(buf)
    while len(values) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError("malformed header: expected integer", start)
        values.append(int(buf[start:pos]))
        starts.append(start)
    if pos >= n or not buf[pos : pos + 1].isspace():
        raise ImageFormatError("malformed header: missing whitespace before data", pos)
    return values, starts, pos + 1


def decode_bytes(buf: bytes) -> Image:
    if buf[:4] == WMF_MAGIC:
        if len(buf) < _WMF_HEADER.size:
            raise ImageFormatError("truncated WMF1 header", len(buf))
        _, w, h, c = _WMF_HEADER.unpack_from(buf, 0)
        if w == 0 or h == 0:
            raise ImageFormatError("zero image dimension", 4)
        if c not in (1, 3):
            raise ImageFormatError(f"unsupported channel count {c}", 12)
        need = w * h * c * 8
        have = len(buf) - _WMF_HEADER.size
        if have < need:
            raise ImageFormatError(
                f"truncated data: need {need} bytes, have {have}", len(buf)
            )
        data = np.frombuffer(buf, dtype="<f8", count=w * h * c, offset=_WMF_HEADER.size)
        return Image.from_flat(data.astype(np.float64), w, h, c)

    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unrecognized magic {buf[:4]!r}", 0)
    channels = 1 if magic == b"P5" else 3
    (w, h, maxval), starts, offset = _pnm_tokens(buf, 3)
    if w == 0 or h == 0:
        raise ImageFormatError("zero image dimension", starts[0] if w == 0 else starts[1])
    if maxval != 255:
        raise ImageFormatError(f"unsupported depth maxval={maxval}", starts[2])
    need = w * h * channels
    if len(buf) - offset < need:
        raise ImageFormatError(
            f"truncated data: need {need} bytes, have {len(buf) - offset}", len(buf)
        )
    raw = np.frombuffer(buf, dtype=np.uint8, count=need, offset=offset)
    return Image.from_flat(raw.astype(np.float64) / 255.0, w, h, channels)


def encode_pnm(img: Image) -> bytes:
    """8-bit export; the only place samples are clamped to [0, 1]."""
    magic = b"P5" if img.channels == 1 else b"P6"
    q = np.rint(np.clip(img.flat(), 0.0, 1.0) * 255.0).astype(np.uint8)
    return magic + f"\n{img.width} {img.height}\n255\n".encode("ascii") + q.tobytes()


def encode_wmf(img: Image) -> bytes:
    header = _WMF_HEADER.pack(WMF_MAGIC, img.width, img.height, img.channels)
    return header + img.flat().astype("<f8").tobytes()


def load_image(path) -> Image:
    with open(path, "rb") as fh:
        return decode_bytes(fh.read())


def save_image(img: Image, path) -> None:
    """Write by extension: ``.pgm``/``.ppm``/``.pnm`` as 8-bit, anything else as WMF1."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext in (".pgm", ".ppm", ".pnm"):
        if ext == ".pgm" and img.channels != 1:
            raise ValueError("PGM requires a single-channel image")
        if ext == ".ppm" and img.channels != 3:
            raise ValueError("PPM requires a three-channel image")
        payload = encode_pnm(img)
    else:
        payload = encode_wmf(img)
    with open(path, "wb") as fh:
        fh.write(payload)
