"""Privacy amplification by Toeplitz hashing over GF(2).

For an ``n``-bit input and ``m``-bit output the hash is fixed by a seed of
``n + m - 1`` bits, and ``T[i][j] = seed[i - j + n - 1]``. The seed is public;
it only needs to reach the peer unmodified.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

from .bits import as_bits, bits_to_int, pack_bits, unpack_bits
from .errors import InsufficientMaterial


@dataclass(frozen=True)
class AmplificationParams:
    seed: np.ndarray
    output_len: int
    security_margin: int = 64

    @property
    def input_len(self) -> int:
        return len(self.seed) - self.output_len + 1


def binary_entropy(p: float) -> float:
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -p * math.log2(p) - (1 - p) * math.log2(1 - p)


def output_length(reconciled_len: int, leaked_bits: int, qber: float, margin: int = 64) -> int:
    """Final key length after subtracting disclosed parities, the error-rate
    entropy term and a fixed safety margin."""
    if reconciled_len <= leaked_bits + margin:
        raise InsufficientMaterial(
            leaked_bits + margin + 1 - reconciled_len,
            f"reconciled key of {reconciled_len} bits cannot cover {leaked_bits} leaked + {margin} margin",
        )
    n = reconciled_len - leaked_bits - math.ceil(reconciled_len * binary_entropy(qber)) - margin
    if n <= 0:
        raise InsufficientMaterial(1 - n, f"no key left after amplification ({n} bits)")
    return n


def make_params(input_len: int, output_len: int, rng, margin: int = 64) -> AmplificationParams:
    if output_len < 1 or input_len < 1:
        raise ValueError("lengths must be positive")
    seed = rng.integers(0, 2, size=input_len + output_len - 1, dtype=np.uint8)
    return AmplificationParams(seed, output_len, margin)


def toeplitz_hash(key, params: AmplificationParams) -> np.ndarray:
    key = as_bits(key)
    n, m = key.size, params.output_len
    if m < 1:
        raise ValueError("output_len must be >= 1")
    if len(params.seed) != n + m - 1:
        raise ValueError(f"seed length {len(params.seed)} != {n} + {m} - 1")
    # Row i of T read as an integer (bit j = T[i][j]) is a window of the
    # reversed seed starting at m - 1 - i.
    reversed_seed = bits_to_int(as_bits(params.seed)[::-1])
    k = bits_to_int(key)
    mask = (1 << n) - 1
    out = np.empty(m, dtype=np.uint8)
    for i in range(m):
        out[i] = ((reversed_seed >> (m - 1 - i)) & mask & k).bit_count() & 1
    return out


def encode_pa_seed(params: AmplificationParams) -> bytes:
    return struct.pack(">I", params.output_len) + pack_bits(params.seed)


def decode_pa_seed(payload: bytes, input_len: int, margin: int = 64) -> AmplificationParams:
    if len(payload) < 4:
        raise ValueError("malformed pa-seed payload")
    (m,) = struct.unpack_from(">I", payload)
    seed = unpack_bits(payload[4:], input_len + m - 1)
    return AmplificationParams(seed, m, margin)

