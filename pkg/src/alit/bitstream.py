"""Fixed-width packing of latent token indices.

Layout (big-endian header fields)::

    magic  b"ALTB"      4 bytes
    version             u8
    K (codebook size)   u32
    m (token count)     u32
    payload             m * ceil(log2 K) bits, MSB first, zero-padded to a byte
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"ALTB"
VERSION = 1
_HEADER = struct.Struct(">4sBII")
HEADER_SIZE = _HEADER.size


class BitstreamError(ValueError):
    pass


def bits_per_index(K: int) -> int:
    if K < 2:
        raise BitstreamError(f"codebook size must be >= 2, got {K}")
    return (K - 1).bit_length()


def payload_bytes(m: int, K: int) -> int:
    return (m * bits_per_index(K) + 7) // 8


def pack_indices(indices, K: int) -> bytes:
    width = bits_per_index(K)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= K):
        raise BitstreamError(f"index out of range [0, {K})")
    shifts = np.arange(width - 1, -1, -1)
    bits = ((idx[:, None] >> shifts) & 1).astype(np.uint8).reshape(-1)
    return np.packbits(bits).tobytes()


def unpack_indices(payload: bytes, m: int, K: int) -> np.ndarray:
    width = bits_per_index(K)
    nbits = m * width
    if len(payload) != (nbits + 7) // 8:
        raise BitstreamError(f"payload is {len(payload)} bytes, expected {(nbits + 7) // 8}")
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))
    if bits[nbits:].any():
        raise BitstreamError("nonzero padding bits")
    weights = 1 << np.arange(width - 1, -1, -1, dtype=np.int64)
    return (bits[:nbits].reshape(m, width).astype(np.int64) * weights).sum(axis=1)


def encode_bitstream(indices, K: int) -> bytes:
    idx = np.asarray(indices).reshape(-1)
    return _HEADER.pack(MAGIC, VERSION, K, idx.size) + pack_indices(idx, K)


def decode_bitstream(data: bytes) -> tuple[np.ndarray, int]:
    if len(data) < HEADER_SIZE:
        raise BitstreamError("truncated header")
    magic, version, K, m = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BitstreamError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BitstreamError(f"unsupported bitstream version {version}")
    if K < 2:
        raise BitstreamError(f"corrupted header: codebook size {K}")
    idx = unpack_indices(data[HEADER_SIZE:], m, K)
    if idx.size and idx.max() >= K:
        raise BitstreamError(f"decoded index {int(idx.max())} >= K={K}")
    return idx, K
