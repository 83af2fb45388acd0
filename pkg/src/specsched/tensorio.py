"""Image and tensor I/O.

Images are read from NetPBM files (PGM ``P2``/``P5``, PPM ``P3``/``P6``) and
mapped affinely to the range [-1, 1]. Intermediate arrays are stored in a
small raw container::

    b"SPECTNSR" | u32 rank | u32 dim * rank | float32 payload (little-endian)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"SPECTNSR"
SUPPORTED_MAXVALS = (255, 65535)


class FormatError(ValueError):
    """Raised when a file cannot be parsed; the message names the bad field."""


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """Square ``H x W x C`` real image, nominally in [-1, 1]."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise ValueError(f"image must be HxWxC, got shape {data.shape}")
        h, w, c = data.shape
        if h < 1 or w < 1:
            raise ValueError("image must be non-empty")
        if h != w:
            raise ValueError(f"non-square image: {h}x{w}")
        if c not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {c}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def side(self) -> int:
        return self.data.shape[0]

    def channel(self, index: int) -> np.ndarray:
        return self.data[:, :, index]

    def __eq__(self, other):
        if not isinstance(other, ImageTensor):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))


def normalize(values, maxval: int) -> np.ndarray:
    """Map integer intensities in [0, maxval] to [-1, 1]."""
    return np.asarray(values, dtype=np.float64) * (2.0 / maxval) - 1.0


def denormalize(values, maxval: int = 255) -> np.ndarray:
    """Inverse of :func:`normalize`, rounded and clipped to valid intensities."""
    v = (np.asarray(values, dtype=np.float64) + 1.0) * (maxval / 2.0)
    return np.clip(np.rint(v), 0, maxval).astype(np.uint16 if maxval > 255 else np.uint8)


# NetPBM ---------------------------------------------------------------------

_PNM_CHANNELS = {b"P2": 1, b"P5": 1, b"P3": 3, b"P6": 3}


def _read_header(buf: bytes):
    """Return (magic, width, height, maxval, offset of raster)."""
    magic = buf[:2]
    if magic not in _PNM_CHANNELS:
        raise FormatError(f"magic: unsupported NetPBM magic {magic!r}")
    pos = 2
    tokens = []
    while len(tokens) < 3:
        # whitespace and comments may appear anywhere in the header
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            name = ("width", "height", "maxval")[len(tokens)]
            raise FormatError(f"{name}: header truncated")
        tokens.append(buf[start:pos])
    names = ("width", "height", "maxval")
    values = []
    for name, tok in zip(names, tokens):
        try:
            values.append(int(tok))
        except ValueError:
            raise FormatError(f"{name}: not an integer ({tok!r})") from None
        if values[-1] <= 0:
            raise FormatError(f"{name}: must be positive, got {values[-1]}")
    # exactly one whitespace byte separates the header from a binary raster
    pos += 1
    width, height, maxval = values
    return magic, width, height, maxval, pos


def read_pnm(path) -> tuple[np.ndarray, int]:
    """Read a NetPBM file into an integer array ``(H, W, C)`` and its maxval."""
    buf = Path(path).read_bytes()
    magic, width, height, maxval, offset = _read_header(buf)
    if maxval not in SUPPORTED_MAXVALS:
        raise FormatError(f"maxval: unsupported value {maxval} (expected 255 or 65535)")
    channels = _PNM_CHANNELS[magic]
    count = width * height * channels
    if magic in (b"P5", b"P6"):
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = buf[offset : offset + count * dtype.itemsize]
        if len(raw) != count * dtype.itemsize:
            raise FormatError(f"raster: expected {count} samples, file is truncated")
        pixels = np.frombuffer(raw, dtype=dtype).astype(np.int64)
    else:
        try:
            pixels = np.array(buf[offset - 1 :].split(), dtype=np.int64)
        except ValueError:
            raise FormatError("raster: non-integer sample in ASCII raster") from None
        if pixels.size < count:
            raise FormatError(f"raster: expected {count} samples, found {pixels.size}")
        pixels = pixels[:count]
    if pixels.max(initial=0) > maxval:
        raise FormatError(f"raster: sample exceeds maxval {maxval}")
    return pixels.reshape(height, width, channels), maxval


def load_image(path) -> ImageTensor:
    """Load a square PGM/PPM image normalized to [-1, 1]."""
    pixels, maxval = read_pnm(path)
    h, w, _ = pixels.shape
    if h != w:
        raise FormatError(f"width/height: non-square image ({w}x{h})")
    return ImageTensor(normalize(pixels, maxval))


def write_pnm(path, pixels: np.ndarray, maxval: int = 255, binary: bool = True) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    h, w, c = pixels.shape
    if c not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {c}")
    if maxval not in SUPPORTED_MAXVALS:
        raise ValueError(f"unsupported maxval {maxval}")
    magic = {(1, True): "P5", (3, True): "P6", (1, False): "P2", (3, False): "P3"}[(c, binary)]
    header = f"{magic}\n{w} {h}\n{maxval}\n".encode("ascii")
    if binary:
        dtype = ">u2" if maxval > 255 else "u1"
        body = pixels.astype(dtype).tobytes()
    else:
        rows = (" ".join(str(int(v)) for v in row.ravel()) for row in pixels)
        body = ("\n".join(rows) + "\n").encode("ascii")
    Path(path).write_bytes(header + body)


def save_image(t: ImageTensor, path, maxval: int = 255, binary: bool = True) -> None:
    """Write ``t`` as PGM (1 channel) or PPM (3 channels), clipping to [-1, 1]."""
    write_pnm(path, denormalize(t.data, maxval), maxval=maxval, binary=binary)


# Raw tensor container ---------------------------------------------------------


def save_array(arr, path) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def load_array(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[: len(MAGIC)] != MAGIC:
        raise FormatError(f"magic: expected {MAGIC!r}, got {buf[:len(MAGIC)]!r}")
    pos = len(MAGIC)
    if len(buf) < pos + 4:
        raise FormatError("rank: header truncated")
    (rank,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + 4 * rank:
        raise FormatError("shape: header truncated")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    if len(buf) - pos != expected:
        raise FormatError(
            f"payload length: expected {expected} bytes for shape {list(shape)}, got {len(buf) - pos}"
        )
    return np.frombuffer(buf, dtype="<f4", offset=pos).reshape(shape).astype(np.float32)


def save_tensor(t: ImageTensor, path) -> None:
    """Store ``t`` as float32; exact for float32-representable data."""
    save_array(t.data, path)


def load_tensor(path) -> ImageTensor:
    return ImageTensor(load_array(path))
