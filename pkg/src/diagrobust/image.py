"""Raster images, the PNG boundary, and seeded random streams.

Every kernel in the package consumes an :class:`Image` (8-bit RGB, row-major)
and, when stochastic, a :class:`RandomStream` derived from a
``(master_seed, question_id, view_index)`` lineage.

The generator is SplitMix64 (Steele, Lea & Flood 2014). Its output is a pure
function of ``(seed, position)``, so a block of ``n`` draws is produced with
vectorised uint64 arithmetic and is bit-identical on every platform. The
lineage seed is the 64-bit BLAKE2b digest of the length-prefixed lineage
tuple, which makes streams independent of evaluation order.
"""
from __future__ import annotations

import hashlib
import io
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

__all__ = [
    "Image",
    "PngDecodeError",
    "RandomStream",
    "decode_png",
    "derive_stream",
    "encode_png",
    "read_png",
    "write_png",
]

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_PNG_COMPRESS_LEVEL = 6

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_LINEAGE_PERSON = b"diagrobust.rs"


class PngDecodeError(ValueError):
    """Raised for byte strings that are not a well-formed PNG."""


@dataclass(frozen=True, eq=False)
class Image:
    """Immutable 8-bit RGB raster, shape ``(height, width, 3)``."""

    array: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.array)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected an (H, W, 3) array, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("width and height must be >= 1")
        if arr.dtype != np.uint8:
            raise TypeError(f"expected uint8 pixels, got {arr.dtype}")
        arr = np.array(arr, dtype=np.uint8, copy=True, order="C")
        arr.setflags(write=False)
        object.__setattr__(self, "array", arr)

    @classmethod
    def from_pixels(cls, width: int, height: int, pixels) -> "Image":
        """Build from a flat row-major sequence of ``width*height*3`` channel values."""
        flat = np.asarray(pixels, dtype=np.int64).reshape(-1)
        if flat.size != width * height * 3:
            raise ValueError(
                f"pixel buffer has {flat.size} values, expected {width * height * 3}"
            )
        if flat.size and (flat.min() < 0 or flat.max() > 255):
            raise ValueError("channel values must lie in [0, 255]")
        return cls(flat.astype(np.uint8).reshape(height, width, 3))

    @classmethod
    def filled(cls, width: int, height: int, color=(255, 255, 255)) -> "Image":
        arr = np.empty((height, width, 3), dtype=np.uint8)
        arr[...] = np.asarray(color, dtype=np.uint8)
        return cls(arr)

    @property
    def width(self) -> int:
        return self.array.shape[1]

    @property
    def height(self) -> int:
        return self.array.shape[0]

    @property
    def pixels(self) -> bytes:
        return self.array.tobytes()

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.array.shape == other.array.shape and bool(
            np.array_equal(self.array, other.array)
        )

    def __hash__(self):
        return hash((self.array.shape, self.array.tobytes()))

    def __repr__(self):
        return f"Image(width={self.width}, height={self.height})"


# PNG codec ------------------------------------------------------------------


def _chunk(kind: bytes, data: bytes) -> bytes:
    crc = zlib.crc32(kind + data) & 0xFFFFFFFF
    return struct.pack(">I", len(data)) + kind + data + struct.pack(">I", crc)


def encode_png(img: Image) -> bytes:
    """Encode as an 8-bit RGB PNG with fixed settings (filter 0, zlib level 6).

    The output depends only on the pixel values, so equal images always give
    equal bytes.
    """
    h, w = img.height, img.width
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    raw = np.zeros((h, w * 3 + 1), dtype=np.uint8)
    raw[:, 1:] = img.array.reshape(h, w * 3)
    idat = zlib.compress(raw.tobytes(), _PNG_COMPRESS_LEVEL)
    return PNG_SIGNATURE + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", idat) + _chunk(b"IEND", b"")


def _check_structure(data: bytes) -> None:
    if len(data) < len(PNG_SIGNATURE) or data[:8] != PNG_SIGNATURE:
        raise PngDecodeError("bad PNG signature at byte offset 0")
    pos = 8
    seen_ihdr = seen_idat = False
    while True:
        if pos + 8 > len(data):
            raise PngDecodeError(f"truncated chunk header at byte offset {pos}")
        (length,) = struct.unpack(">I", data[pos : pos + 4])
        kind = data[pos + 4 : pos + 8]
        name = kind.decode("latin-1")
        end = pos + 12 + length
        if end > len(data):
            raise PngDecodeError(f"chunk {name!r} at byte offset {pos} runs past end of data")
        body = data[pos + 8 : pos + 8 + length]
        (crc,) = struct.unpack(">I", data[pos + 8 + length : end])
        if zlib.crc32(kind + body) & 0xFFFFFFFF != crc:
            raise PngDecodeError(f"CRC mismatch in chunk {name!r} at byte offset {pos}")
        if pos == 8 and kind != b"IHDR":
            raise PngDecodeError(f"first chunk is {name!r}, expected 'IHDR' (byte offset 8)")
        seen_ihdr |= kind == b"IHDR"
        seen_idat |= kind == b"IDAT"
        if kind == b"IEND":
            break
        pos = end
    if not (seen_ihdr and seen_idat):
        raise PngDecodeError("PNG has no 'IDAT' chunk")


def _composite_over_white(rgba: np.ndarray) -> np.ndarray:
    rgb = rgba[..., :3].astype(np.uint32)
    a = rgba[..., 3:4].astype(np.uint32)
    out = (rgb * a + 255 * (255 - a) + 127) // 255
    return out.astype(np.uint8)


def decode_png(data: bytes) -> Image:
    """Decode a PNG into RGB; alpha is composited over white.

    Raises :class:`PngDecodeError` naming the offending chunk or byte offset.
    """
    data = bytes(data)
    _check_structure(data)
    try:
        pim = PILImage.open(io.BytesIO(data), formats=["PNG"])
        pim.load()
    except Exception as exc:  # Pillow raises a zoo of types here
        raise PngDecodeError(f"undecodable image data in chunk 'IDAT': {exc}") from exc

    mode = pim.mode
    if mode.startswith("I"):
        wide = np.asarray(pim, dtype=np.int64)
        if mode == "I":
            wide = wide >> 8 if wide.max(initial=0) > 255 else wide
        else:
            wide = (wide * 255 + 32767) // 65535
        gray = np.clip(wide, 0, 255).astype(np.uint8)
        return Image(np.repeat(gray[..., None], 3, axis=2))
    has_alpha = "A" in mode or "a" in mode or "transparency" in pim.info
    if has_alpha:
        return Image(_composite_over_white(np.asarray(pim.convert("RGBA"))))
    return Image(np.asarray(pim.convert("RGB")))


def read_png(path) -> Image:
    return decode_png(Path(path).read_bytes())


def write_png(img: Image, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_png(img))


# Random streams ---------------------------------------------------------------


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def lineage_seed(master_seed: int, question_id: str, view_index: int) -> int:
    """64-bit BLAKE2b digest of ``master_seed ‖ len(qid) ‖ qid ‖ view_index``."""
    qid = question_id.encode("utf-8")
    payload = (
        struct.pack("<Q", master_seed & 0xFFFFFFFFFFFFFFFF)
        + struct.pack("<I", len(qid))
        + qid
        + struct.pack("<Q", view_index)
    )
    digest = hashlib.blake2b(payload, digest_size=8, person=_LINEAGE_PERSON).digest()
    return int.from_bytes(digest, "little")


@dataclass
class RandomStream:
    """SplitMix64 stream. Single owner; do not share across threads."""

    seed: int
    lineage: tuple | None = None
    position: int = field(default=0)

    def next_u64(self, n: int | None = None):
        count = 1 if n is None else int(n)
        steps = np.arange(self.position + 1, self.position + 1 + count, dtype=np.uint64)
        with np.errstate(over="ignore"):
            state = np.uint64(self.seed) + _GAMMA * steps
        self.position += count
        out = _mix(state)
        return int(out[0]) if n is None else out

    def random(self, n: int | None = None):
        """Uniform doubles on [0, 1) from the top 53 bits."""
        bits = self.next_u64(1 if n is None else n)
        u = (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return float(u[0]) if n is None else u

    def uniform(self, low: float, high: float, n: int | None = None):
        u = self.random(n)
        return low + (high - low) * u

    def integers(self, upper: int, n: int | None = None):
        """Uniform integers in ``[0, upper)``."""
        if upper < 1:
            raise ValueError("upper must be >= 1")
        u = self.random(1 if n is None else n)
        k = np.minimum(np.floor(u * upper).astype(np.int64), upper - 1)
        return int(k[0]) if n is None else k

    def normal(self, size) -> np.ndarray:
        """Standard normal draws (Box-Muller), shaped like ``size``."""
        shape = (size,) if isinstance(size, int) else tuple(size)
        count = int(np.prod(shape))
        pairs = (count + 1) // 2
        u = self.random(2 * pairs)
        radius = np.sqrt(-2.0 * np.log1p(-u[:pairs]))
        theta = 2.0 * np.pi * u[pairs:]
        z = np.concatenate([radius * np.cos(theta), radius * np.sin(theta)])
        return z[:count].reshape(shape)

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of ``range(n)``."""
        items = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integers(i + 1)
            items[i], items[j] = items[j], items[i]
        return items


def derive_stream(master_seed: int, question_id: str, view_index: int) -> RandomStream:
    """Stream for one (question, view); a pure function of its arguments."""
    seed = lineage_seed(master_seed, question_id, view_index)
    return RandomStream(seed=seed, lineage=(master_seed, question_id, view_index))
