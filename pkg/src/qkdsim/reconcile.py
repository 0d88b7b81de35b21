"""Cascade error reconciliation.

Bob corrects his sifted key against Alice's by exchanging block parities.
Pass 0 uses the key in natural order; later passes use a shuffled order
derived from a seed both sides already know, so permutations cost no
messages. Every parity Alice discloses is counted in ``leaked_bits``, as is
the final whole-key verification digest.

After each correction the blocks containing the flipped bit in every earlier
pass change parity, and any that become odd are searched again (backtracking).
"""

import hashlib
import math
import struct
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .bits import as_bits, pack_bits, unpack_bits
from .rng import make_rng


@dataclass(frozen=True)
class CascadeConfig:
    passes: int = 4
    initial_block_factor: float = 0.73
    max_block: int = 4096
    shuffle_seed: int = 0
    digest_bits: int = 128
    # block sizing treats any estimate below this as this value
    qber_floor: float = 0.01

    def __post_init__(self):
        if self.passes < 1:
            raise ValueError("passes must be >= 1")
        if self.initial_block_factor <= 0:
            raise ValueError("initial_block_factor must be positive")
        if self.max_block < 4:
            raise ValueError("max_block must be >= 4")
        if self.digest_bits % 8 or not 8 <= self.digest_bits <= 512:
            raise ValueError("digest_bits must be a whole number of bytes, at most 512 bits")


@dataclass
class ReconciliationResult:
    corrected_key: np.ndarray
    leaked_bits: int
    rounds: int
    verified: bool
    corrections: int = 0
    block_sizes: tuple = ()


class ParityOracle(Protocol):
    """Bob's view of Alice during reconciliation."""

    def parities(self, pass_index: int, intervals: list[tuple[int, int]]) -> list[int]: ...

    def reference_digest(self) -> bytes: ...


def block_parity(key, start: int, stop: int) -> int:
    """XOR of ``key[start:stop]``."""
    if not 0 <= start <= stop <= len(key):
        raise ValueError(f"interval [{start}, {stop}) outside key of length {len(key)}")
    return int(np.count_nonzero(np.asarray(key[start:stop])) & 1)


def block_schedule(qber_estimate: float, n: int, config: CascadeConfig) -> list[int]:
    """Block size for each pass."""
    if qber_estimate == 0:
        return [min(config.max_block, n)]
    k1 = math.ceil(config.initial_block_factor / max(qber_estimate, config.qber_floor))
    k1 = min(max(k1, 4), config.max_block)
    return [max(1, min(k1 << p, config.max_block, n)) for p in range(config.passes)]


def pass_permutation(shuffle_seed: int, pass_index: int, n: int) -> np.ndarray:
    if pass_index == 0:
        return np.arange(n)
    return make_rng(shuffle_seed, "cascade-pass", pass_index).permutation(n)


def key_digest(bits, shuffle_seed: int, digest_bits: int = 128) -> bytes:
    key = hashlib.sha256(b"cascade-verify" + shuffle_seed.to_bytes(8, "big")).digest()
    h = hashlib.blake2b(key=key, digest_size=digest_bits // 8)
    h.update(struct.pack(">Q", len(bits)))
    h.update(pack_bits(bits))
    return h.digest()


class LocalParityOracle:
    """Alice's side answering directly from her key; records every query."""

    def __init__(self, alice_key, config: CascadeConfig):
        self.key = as_bits(alice_key)
        self.config = config
        self._perms = {}
        self.queries = []
        self.digests_sent = 0

    def _perm(self, pass_index):
        if pass_index not in self._perms:
            self._perms[pass_index] = pass_permutation(self.config.shuffle_seed, pass_index, self.key.size)
        return self._perms[pass_index]

    def parities(self, pass_index, intervals):
        perm = self._perm(pass_index)
        self.queries.append((pass_index, list(intervals)))
        out = []
        for start, length in intervals:
            if start < 0 or length < 1 or start + length > self.key.size:
                raise ValueError(f"bad interval ({start}, {length})")
            out.append(int(np.count_nonzero(self.key[perm[start:start + length]]) & 1))
        return out

    def reference_digest(self):
        self.digests_sent += 1
        return key_digest(self.key, self.config.shuffle_seed, self.config.digest_bits)

    @property
    def disclosed_bits(self):
        return sum(len(iv) for _, iv in self.queries) + self.digests_sent * self.config.digest_bits


def cascade(bob_key, qber_estimate: float, oracle: ParityOracle, config: CascadeConfig = CascadeConfig()) -> ReconciliationResult:
    key = as_bits(bob_key).copy()
    n = key.size
    if n == 0:
        raise ValueError("key must be nonempty")
    if not 0 <= qber_estimate < 0.5:
        raise ValueError(f"qber_estimate must lie in [0, 0.5), got {qber_estimate}")

    sizes = block_schedule(qber_estimate, n, config)
    perms, inverse, alice_top = [], [], []
    leaked = 0
    exchanges = 0
    corrections = 0

    def ask(pass_index, intervals):
        nonlocal leaked, exchanges
        reply = oracle.parities(pass_index, intervals)
        if len(reply) != len(intervals):
            raise ValueError("parity reply length does not match request")
        leaked += len(intervals)
        exchanges += 1
        return reply

    def bob_parity(p, start, length):
        return int(np.count_nonzero(key[perms[p][start:start + length]]) & 1)

    def block_bounds(p, b):
        start = b * sizes[p]
        return start, min(sizes[p], n - start)

    def locate(p, start, length):
        while length > 1:
            half = (length + 1) // 2
            if ask(p, [(start, half)])[0] != bob_parity(p, start, half):
                length = half
            else:
                start += half
                length -= half
        return int(perms[p][start])

    for p, k in enumerate(sizes):
        perm = pass_permutation(config.shuffle_seed, p, n)
        perms.append(perm)
        inv = np.empty(n, dtype=np.int64)
        inv[perm] = np.arange(n)
        inverse.append(inv)

        starts = list(range(0, n, k))
        blocks = [(s, min(k, n - s)) for s in starts]
        top = np.array(ask(p, blocks), dtype=np.uint8)
        alice_top.append(top)
        mine = np.add.reduceat(key[perm].astype(np.int64), starts) & 1
        pending = [(p, int(b)) for b in np.flatnonzero(mine != top)][::-1]

        while pending:
            q, b = pending.pop()
            start, length = block_bounds(q, b)
            if bob_parity(q, start, length) == alice_top[q][b]:
                continue
            pos = locate(q, start, length)
            key[pos] ^= 1
            corrections += 1
            for r in range(p + 1):
                rb = int(inverse[r][pos]) // sizes[r]
                if (r, rb) == (q, b):
                    continue
                rs, rl = block_bounds(r, rb)
                if bob_parity(r, rs, rl) != alice_top[r][rb]:
                    pending.append((r, rb))

    reference = oracle.reference_digest()
    leaked += config.digest_bits
    exchanges += 1
    verified = reference == key_digest(key, config.shuffle_seed, config.digest_bits)
    return ReconciliationResult(
        corrected_key=key,
        leaked_bits=leaked,
        rounds=2 * exchanges,
        verified=verified,
        corrections=corrections,
        block_sizes=tuple(sizes),
    )


# parity-request / parity-reply payloads


def encode_parity_request(pass_index: int, intervals) -> bytes:
    out = bytearray(struct.pack(">I", pass_index))
    for start, length in intervals:
        out += struct.pack(">II", start, length)
    return bytes(out)


def decode_parity_request(payload: bytes):
    if len(payload) < 4 or (len(payload) - 4) % 8:
        raise ValueError("malformed parity request")
    (pass_index,) = struct.unpack_from(">I", payload)
    intervals = [struct.unpack_from(">II", payload, off) for off in range(4, len(payload), 8)]
    return pass_index, intervals


def encode_parity_reply(parities) -> bytes:
    return pack_bits(parities)


def decode_parity_reply(payload: bytes, count: int) -> list[int]:
    return unpack_bits(payload, count).tolist()
