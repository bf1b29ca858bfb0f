"""B-bit uniform feature quantisation and the packed uplink payload.

Wire format of one payload (little-endian header, 8 bytes)::

    0xAC 0xFB | version u8 | B u8 | feature_dim u32 | codeword bits

Codewords are written MSB-first, back to back, and the last byte is padded
with zero bits.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction
from typing import BinaryIO, Iterator, Union

import numpy as np

from .errors import BitCountError, ConfigurationError, DataError, FormatError, TruncatedError, VersionError

MAGIC = b"\xac\xfb"
VERSION = 1
MAX_BITS = 16
_HEADER = struct.Struct("<2sBBI")
HEADER_SIZE = _HEADER.size


def _check_bits(bits: int):
    if not isinstance(bits, (int, np.integer)) or bits < 1:
        raise ConfigurationError(f"quantisation bits must be a positive integer, got {bits!r}")
    if bits > MAX_BITS:
        raise ConfigurationError(f"quantisation bits must be <= {MAX_BITS}, got {bits}")


def quantize(x, bits: int) -> np.ndarray:
    """``floor(x * 2**bits)`` clamped to ``[0, 2**bits - 1]``, as uint16 codewords."""
    _check_bits(bits)
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise DataError("cannot quantise non-finite values")
    levels = 1 << bits
    # scaling by a power of two is exact, so floor sees the true product
    codes = np.floor(x.astype(np.float64) * levels)
    return np.clip(codes, 0, levels - 1).astype(np.uint16)


def dequantize(codes, bits: int) -> np.ndarray:
    """Bin midpoints ``(code + 0.5) / 2**bits`` as float32."""
    _check_bits(bits)
    codes = np.asarray(codes)
    levels = 1 << bits
    if codes.size and (codes.min() < 0 or codes.max() >= levels):
        raise DataError(f"codeword out of range for {bits}-bit quantiser")
    return ((codes.astype(np.float64) + 0.5) / levels).astype(np.float32)


def ste_gradient(upstream):
    """Gradient through quantise/dequantise: passed along unchanged."""
    return upstream


def feedback_bits(na: int, nt: int, eta: Union[Fraction, float], bits: int) -> int:
    """Number of uplink bits, ``2 * na * nt * eta * bits``."""
    dim = Fraction(eta) * 2 * na * nt
    if dim.denominator != 1:
        raise ConfigurationError(f"eta={eta} gives a non-integer feature length {dim}")
    return int(dim) * bits


@dataclass(frozen=True)
class FeedbackPayload:
    bits: int
    feature_dim: int
    body: bytes
    version: int = VERSION

    @property
    def n_bits(self) -> int:
        """Payload bits excluding header and padding."""
        return self.feature_dim * self.bits

    def to_bytes(self) -> bytes:
        return _HEADER.pack(MAGIC, self.version, self.bits, self.feature_dim) + self.body

    @classmethod
    def from_bytes(cls, raw: bytes) -> "FeedbackPayload":
        payload, used = _parse(raw, 0)
        if used != len(raw):
            raise BitCountError(f"payload has {len(raw) - used} trailing bytes")
        return payload


def _body_len(feature_dim: int, bits: int) -> int:
    return (feature_dim * bits + 7) // 8


def _parse(raw: bytes, offset: int):
    if len(raw) - offset < HEADER_SIZE:
        raise TruncatedError("payload shorter than its 8-byte header")
    magic, version, bits, dim = _HEADER.unpack_from(raw, offset)
    if magic != MAGIC:
        raise FormatError(f"bad payload magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"unsupported payload version {version}")
    _check_bits(bits)
    n = _body_len(dim, bits)
    start = offset + HEADER_SIZE
    body = bytes(raw[start:start + n])
    if len(body) != n:
        raise BitCountError(f"payload body has {len(body)} bytes, header implies {n}")
    return FeedbackPayload(bits, dim, body, version), start + n


def pack(codes, bits: int) -> FeedbackPayload:
    _check_bits(bits)
    codes = np.asarray(codes).reshape(-1)
    levels = 1 << bits
    if codes.size and (codes.min() < 0 or codes.max() >= levels):
        raise DataError(f"codeword out of range for {bits}-bit payload")
    shifts = np.arange(bits - 1, -1, -1, dtype=np.uint32)
    bit_matrix = (codes.astype(np.uint32)[:, None] >> shifts) & 1
    body = np.packbits(bit_matrix.astype(np.uint8).reshape(-1), bitorder="big").tobytes()
    return FeedbackPayload(bits, int(codes.size), body)


def unpack(payload: FeedbackPayload) -> np.ndarray:
    bits, dim = payload.bits, payload.feature_dim
    if payload.version != VERSION:
        raise VersionError(f"unsupported payload version {payload.version}")
    if len(payload.body) != _body_len(dim, bits):
        raise BitCountError(
            f"payload body has {len(payload.body)} bytes, expected {_body_len(dim, bits)}")
    flat = np.unpackbits(np.frombuffer(payload.body, dtype=np.uint8), bitorder="big")
    if flat[dim * bits:].any():
        raise BitCountError("non-zero padding bits after the last codeword")
    matrix = flat[:dim * bits].reshape(dim, bits).astype(np.uint32)
    weights = (1 << np.arange(bits - 1, -1, -1, dtype=np.uint32))
    return (matrix @ weights).astype(np.uint16)


def write_payloads(stream: BinaryIO, payloads) -> int:
    n = 0
    for p in payloads:
        stream.write(p.to_bytes())
        n += 1
    return n


def read_payloads(raw: bytes) -> Iterator[FeedbackPayload]:
    """Iterate over back-to-back payloads in a byte string."""
    offset = 0
    while offset < len(raw):
        payload, offset = _parse(raw, offset)
        yield payload
