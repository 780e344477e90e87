"""8-bit sRGB image I/O and image<->tensor layout conversion.

Two file formats, both implemented here on top of the standard library:
PNG (8-bit RGB, plus RGBA with the alpha dropped) and binary PPM (P6) as the
dependency-free fallback. 16-bit, palette, grayscale and interlaced PNGs are
rejected with a decode error rather than silently converted.

Pixel codes pass through untransformed: byte b maps to b/255 on load, and
saving quantizes with round-half-up after clamping to [0, 1], so a
load->save->load round trip is exact.
"""

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DecodeError, ShapeError
from .tensor import Tensor

_PNG_SIG = b"\x89PNG\r\n\x1a\n"


@dataclass
class ImageRGB:
    """H x W x 3 float32 image, sRGB-encoded, values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ShapeError(f"ImageRGB needs (H, W, 3) pixels, got {px.shape}")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def quantize(values: np.ndarray) -> np.ndarray:
    """Clamp to [0,1] and map to bytes with round-half-up (deterministic)."""
    v = np.clip(values, 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# PNG


def _png_chunks(buf: bytes):
    pos = 8
    n = len(buf)
    while pos < n:
        if pos + 8 > n:
            raise DecodeError(f"truncated chunk header at byte {pos}")
        (length,) = struct.unpack(">I", buf[pos : pos + 4])
        ctype = buf[pos + 4 : pos + 8]
        data_end = pos + 8 + length
        if data_end + 4 > n:
            raise DecodeError(f"truncated {ctype!r} chunk at byte {pos}")
        data = buf[pos + 8 : data_end]
        (crc,) = struct.unpack(">I", buf[data_end : data_end + 4])
        if zlib.crc32(ctype + data) & 0xFFFFFFFF != crc:
            raise DecodeError(f"CRC mismatch in {ctype!r} chunk at byte {pos}")
        yield ctype, data, pos
        pos = data_end + 4
        if ctype == b"IEND":
            return
    raise DecodeError("missing IEND chunk")


def _unfilter_scanlines(raw: bytes, width: int, height: int, bpp: int) -> np.ndarray:
    stride = width * bpp
    expected = (stride + 1) * height
    if len(raw) != expected:
        raise DecodeError(
            f"decompressed pixel data is {len(raw)} bytes, expected {expected}"
        )
    out = np.zeros((height, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.int32)
    for y in range(height):
        off = y * (stride + 1)
        ftype = raw[off]
        line = np.frombuffer(raw, dtype=np.uint8, count=stride, offset=off + 1)
        if ftype == 0:
            recon = line.astype(np.int32)
        elif ftype == 1:  # Sub: cumulative sum along each bpp lane
            lanes = line.reshape(width, bpp).astype(np.int64)
            recon = (np.cumsum(lanes, axis=0) % 256).astype(np.int32).reshape(stride)
        elif ftype == 2:  # Up
            recon = (line.astype(np.int32) + prev) % 256
        elif ftype in (3, 4):  # Average / Paeth: sequential left dependency
            recon = np.zeros(stride, dtype=np.int32)
            for x in range(stride):
                a = int(recon[x - bpp]) if x >= bpp else 0
                b = int(prev[x])
                if ftype == 3:
                    recon[x] = (int(line[x]) + (a + b) // 2) % 256
                else:
                    c = int(prev[x - bpp]) if x >= bpp else 0
                    p = a + b - c
                    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                    if pa <= pb and pa <= pc:
                        pred = a
                    elif pb <= pc:
                        pred = b
                    else:
                        pred = c
                    recon[x] = (int(line[x]) + pred) % 256
        else:
            raise DecodeError(f"unknown filter type {ftype} on scanline {y}")
        out[y] = recon.astype(np.uint8)
        prev = recon
    return out.reshape(height, width, bpp)


def _decode_png(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:8] != _PNG_SIG:
        raise DecodeError("bad PNG signature at byte 0")
    header = None
    idat = []
    for ctype, data, pos in _png_chunks(buf):
        if ctype == b"IHDR":
            if header is not None:
                raise DecodeError(f"duplicate IHDR at byte {pos}")
            if len(data) != 13:
                raise DecodeError(f"IHDR length {len(data)} at byte {pos}")
            header = struct.unpack(">IIBBBBB", data)
        elif ctype == b"IDAT":
            if header is None:
                raise DecodeError(f"IDAT before IHDR at byte {pos}")
            idat.append(data)
    if header is None:
        raise DecodeError("missing IHDR chunk")
    width, height, depth, color, compression, filt, interlace = header
    if width == 0 or height == 0:
        raise DecodeError(f"zero-sized image {width}x{height}")
    if depth != 8:
        raise DecodeError(f"{depth}-bit PNG not supported (8-bit only)")
    if color not in (2, 6):
        raise DecodeError(f"color type {color} not supported (RGB/RGBA only)")
    if compression != 0 or filt != 0:
        raise DecodeError("nonstandard compression/filter method")
    if interlace != 0:
        raise DecodeError("interlaced (Adam7) PNG not supported")
    if not idat:
        raise DecodeError("no IDAT chunks")
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as e:
        raise DecodeError(f"corrupt IDAT stream: {e}") from None
    bpp = 3 if color == 2 else 4
    px = _unfilter_scanlines(raw, width, height, bpp)
    return px[:, :, :3]  # drop alpha when present


def _encode_png(codes: np.ndarray) -> bytes:
    height, width, _ = codes.shape

    def chunk(ctype: bytes, data: bytes) -> bytes:
        return (
            struct.pack(">I", len(data))
            + ctype
            + data
            + struct.pack(">I", zlib.crc32(ctype + data) & 0xFFFFFFFF)
        )

    ihdr = struct.pack(">IIBBBBB", width, height, 8, 2, 0, 0, 0)
    rows = codes.reshape(height, width * 3)
    raw = b"".join(b"\x00" + rows[y].tobytes() for y in range(height))
    return (
        _PNG_SIG
        + chunk(b"IHDR", ihdr)
        + chunk(b"IDAT", zlib.compress(raw, 6))
        + chunk(b"IEND", b"")
    )


# ---------------------------------------------------------------------------
# PPM (binary P6, maxval 255)


def _decode_ppm(buf: bytes) -> np.ndarray:
    pos = 0

    def token():
        nonlocal pos
        while pos < len(buf):
            ch = buf[pos : pos + 1]
            if ch == b"#":  # comment to end of line
                while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DecodeError(f"truncated PPM header at byte {start}")
        return buf[start:pos]

    if token() != b"P6":
        raise DecodeError("not a binary PPM (P6) file")
    try:
        width, height, maxval = int(token()), int(token()), int(token())
    except ValueError:
        raise DecodeError(f"malformed PPM header near byte {pos}") from None
    if maxval != 255:
        raise DecodeError(f"PPM maxval {maxval} not supported (255 only)")
    pos += 1  # single whitespace after maxval
    need = width * height * 3
    if len(buf) - pos < need:
        raise DecodeError(f"PPM pixel data truncated at byte {len(buf)}")
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return px.reshape(height, width, 3)


def _encode_ppm(codes: np.ndarray) -> bytes:
    height, width, _ = codes.shape
    return f"P6\n{width} {height}\n255\n".encode("ascii") + codes.tobytes()


# ---------------------------------------------------------------------------
# public API


def load_image(path) -> ImageRGB:
    """Load a PNG or PPM file (sniffed by magic bytes) as floats in [0, 1]."""
    buf = Path(path).read_bytes()
    if buf[:8] == _PNG_SIG:
        codes = _decode_png(buf)
    elif buf[:2] == b"P6":
        codes = _decode_ppm(buf)
    else:
        raise DecodeError(f"{path}: unrecognized image format at byte 0")
    return ImageRGB(codes.astype(np.float32) / 255.0)


def save_image(img: ImageRGB, path) -> None:
    """Write PNG or PPM depending on the file extension."""
    path = Path(path)
    codes = quantize(img.pixels)
    suffix = path.suffix.lower()
    if suffix == ".png":
        data = _encode_png(codes)
    elif suffix == ".ppm":
        data = _encode_ppm(codes)
    else:
        raise ValueError(f"unsupported image extension {suffix!r} (use .png or .ppm)")
    path.write_bytes(data)


def image_to_tensor(img: ImageRGB) -> Tensor:
    """(H, W, 3) image -> (1, 3, H, W) float32 tensor."""
    return Tensor(np.transpose(img.pixels, (2, 0, 1))[None])


def tensor_to_image(t: Tensor) -> ImageRGB:
    """(1, 3, H, W) tensor -> image, clamping values into [0, 1]."""
    if t.ndim != 4 or t.shape[0] != 1 or t.shape[1] != 3:
        raise ShapeError(f"expected tensor shape (1, 3, H, W), got {t.shape}")
    px = np.clip(np.transpose(t.data[0], (1, 2, 0)), 0.0, 1.0)
    return ImageRGB(px)
