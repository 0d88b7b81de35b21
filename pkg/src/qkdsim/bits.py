"""Helpers for bit strings held as ``uint8`` numpy arrays of 0/1 values."""

import numpy as np


def as_bits(values) -> np.ndarray:
    if isinstance(values, str):
        return np.frombuffer(values.encode(), dtype=np.uint8) - ord("0")
    arr = np.asarray(values, dtype=np.uint8)
    if arr.ndim != 1:
        raise ValueError("bit strings are one-dimensional")
    if arr.size and arr.max() > 1:
        raise ValueError("bit values must be 0 or 1")
    return arr


def bits_to_str(bits) -> str:
    return "".join("1" if b else "0" for b in bits)


def pack_bits(bits) -> bytes:
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()


def unpack_bits(data: bytes, n: int) -> np.ndarray:
    out = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
    if out.size < n:
        raise ValueError(f"need {n} bits, got {out.size}")
    return out[:n].copy()


def bits_to_bytes(bits) -> bytes:
    """Pack a bit string whose length is a multiple of 8."""
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.size % 8:
        raise ValueError("bit length must be a multiple of 8")
    return pack_bits(bits)


def bytes_to_bits(data: bytes) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8))


def bits_to_int(bits) -> int:
    """Little-endian: bit ``j`` of the result is ``bits[j]``."""
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.size == 0:
        return 0
    return int.from_bytes(np.packbits(bits, bitorder="little").tobytes(), "little")


def int_to_bits(value: int, n: int) -> np.ndarray:
    raw = value.to_bytes((n + 7) // 8, "little")
    return np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")[:n].copy()


def xor_bits(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    return a ^ b
