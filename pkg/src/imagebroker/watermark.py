"""Purchaser-identity watermarking via least-significant-bit embedding.

Bit layout, MSB first per byte, one bit per sample LSB in row-major scan
order (channels in storage order within a pixel for color rasters):

    magic "WM01" (4 bytes) | length (u16 BE) | identity UTF-8 | CRC-32 of identity

The CRC uses the 0xEDB88320 polynomial (same as zlib). Extraction is total:
anything that fails the magic, length or checksum reads as "no watermark".
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import CapacityError

MAGIC = b"WM01"


def _payload_bits(identity: str) -> np.ndarray:
    ident = identity.encode("utf-8")
    if len(ident) > 0xFFFF:
        raise CapacityError(f"identity of {len(ident)} bytes exceeds the 16-bit length field")
    payload = MAGIC + struct.pack(">H", len(ident)) + ident
    payload += struct.pack(">I", zlib.crc32(ident) & 0xFFFFFFFF)
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))
    return bits


def capacity_bits(raster: np.ndarray) -> int:
    return int(np.prod(raster.shape))


def embed(raster: np.ndarray, identity: str) -> np.ndarray:
    """Return a copy of the raster with the identity written into sample LSBs.

    Raises CapacityError (before touching anything) when the payload does not
    fit; all non-LSB bits are preserved exactly.
    """
    if raster.dtype != np.uint8:
        raise CapacityError(f"watermarking expects uint8 samples, got {raster.dtype}")
    bits = _payload_bits(identity)
    if bits.size > capacity_bits(raster):
        raise CapacityError(
            f"payload of {bits.size} bits exceeds image capacity of {capacity_bits(raster)}"
        )
    out = raster.copy()
    flat = out.reshape(-1)
    flat[:bits.size] = (flat[:bits.size] & 0xFE) | bits
    return out


def extract(raster: np.ndarray) -> str | None:
    """Read back an embedded identity, or None when no valid mark is present."""
    flat = np.asarray(raster).reshape(-1)
    if flat.size < 8 * (len(MAGIC) + 2 + 4):
        return None
    lsbs = (flat & 1).astype(np.uint8)
    header = np.packbits(lsbs[: 8 * (len(MAGIC) + 2)]).tobytes()
    if header[:4] != MAGIC:
        return None
    (length,) = struct.unpack(">H", header[4:6])
    total_bits = 8 * (len(MAGIC) + 2 + length + 4)
    if total_bits > flat.size:
        return None
    body = np.packbits(lsbs[8 * (len(MAGIC) + 2): total_bits]).tobytes()
    ident, crc_bytes = body[:length], body[length:length + 4]
    (crc,) = struct.unpack(">I", crc_bytes)
    if crc != (zlib.crc32(ident) & 0xFFFFFFFF):
        return None
    try:
        return ident.decode("utf-8")
    except UnicodeDecodeError:
        return None
