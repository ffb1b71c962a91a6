"""Image containers and codecs.

Grayscale 8-bit images are the native unit of the texture engine; binary PGM
(P5, maxval 255) is parsed and written natively. PNG (and color input in
general) is handled through Pillow at the service boundary and converted to
luminance before it reaches feature extraction.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import InputError

INDEX_SIZE = 128       # images are resampled to this square size before feature extraction
THUMBNAIL_MAX = 96     # longest side of a result-list thumbnail


@dataclass(frozen=True)
class GrayImage:
    """8-bit luminance raster. ``pixels`` is a (height, width) uint8 array."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise InputError(f"image must be at least 1x1, got {self.width}x{self.height}")
        if self.pixels.shape != (self.height, self.width):
            raise InputError(
                f"pixel grid {self.pixels.shape} does not match {self.height}x{self.width}"
            )
        if self.pixels.dtype != np.uint8:
            raise InputError(f"pixels must be uint8, got {self.pixels.dtype}")

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "GrayImage":
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise InputError(f"expected a 2-D array, got shape {arr.shape}")
        return cls(width=arr.shape[1], height=arr.shape[0], pixels=arr.astype(np.uint8))


def read_pgm(data: bytes) -> GrayImage:
    """Parse a binary PGM (P5) with maxval 255."""
    if not data.startswith(b"P5"):
        raise InputError("not a binary PGM (missing P5 magic)")
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise InputError(f"malformed PGM header token {token!r}")
        fields.append(int(token))
    width, height, maxval = fields
    if maxval != 255:
        raise InputError(f"only maxval 255 PGM supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    raster = data[pos:pos + width * height]
    if len(raster) != width * height:
        raise InputError("PGM raster truncated")
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    return GrayImage(width=width, height=height, pixels=pixels.copy())


def write_pgm(img: GrayImage) -> bytes:
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.pixels.tobytes()


def decode_raster(data: bytes) -> np.ndarray:
    """Decode PGM or PNG bytes into a uint8 array: (h, w) gray or (h, w, 3) color."""
    if data.startswith(b"P5"):
        return read_pgm(data).pixels
    try:
        with Image.open(io.BytesIO(data)) as im:
            if im.mode in ("L", "I;16", "I"):
                return np.asarray(im.convert("L"), dtype=np.uint8)
            if im.mode == "RGBA":
                im = im.convert("RGB")
            if im.mode != "RGB":
                im = im.convert("RGB")
            return np.asarray(im, dtype=np.uint8)
    except InputError:
        raise
    except Exception as exc:
        raise InputError(f"cannot decode image: {exc}") from exc


def decode_gray(data: bytes) -> GrayImage:
    """Decode any supported format and reduce color to ITU-R 601 luminance."""
    arr = decode_raster(data)
    if arr.ndim == 3:
        arr = np.asarray(
            Image.fromarray(arr).convert("L"), dtype=np.uint8
        )
    return GrayImage.from_array(arr)


def resize_gray(img: GrayImage, width: int, height: int) -> GrayImage:
    """Bilinear resample to an exact target size."""
    if (img.width, img.height) == (width, height):
        return img
    pil = Image.fromarray(img.pixels, mode="L").resize((width, height), Image.BILINEAR)
    return GrayImage.from_array(np.asarray(pil, dtype=np.uint8))


def prepare_for_indexing(data: bytes, size: int = INDEX_SIZE) -> GrayImage:
    """Decode to luminance and resample to the canonical indexing size."""
    return resize_gray(decode_gray(data), size, size)


def encode_png(arr: np.ndarray) -> bytes:
    """Lossless PNG encoding of a gray (h, w) or color (h, w, 3) uint8 array."""
    mode = "L" if arr.ndim == 2 else "RGB"
    buf = io.BytesIO()
    Image.fromarray(arr.astype(np.uint8), mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def make_thumbnail(data: bytes, max_side: int = THUMBNAIL_MAX) -> bytes:
    """PNG thumbnail with longest side <= max_side, aspect preserved, never upscaled."""
    arr = decode_raster(data)
    im = Image.fromarray(arr, mode="L" if arr.ndim == 2 else "RGB")
    im.thumbnail((max_side, max_side), Image.BILINEAR)
    buf = io.BytesIO()
    im.save(buf, format="PNG")
    return buf.getvalue()


def png_dimensions(data: bytes) -> tuple[int, int]:
    """(width, height) of an encoded image, used by tests and the thumbnail contract."""
    with Image.open(io.BytesIO(data)) as im:
        return im.size
