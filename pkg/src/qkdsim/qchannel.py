"""Simulated quantum channel: Alice's random encoding, an optional
intercept-resend eavesdropper, and Bob's random-basis measurement.

Bases are 0 (rectilinear) and 1 (diagonal). Lost photons are never reported
as detections; detector dark counts are folded into ``flip_prob``.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .rng import make_rng

RECTILINEAR = 0
DIAGONAL = 1


class PhotonRecord(NamedTuple):
    index: int
    basis: int
    bit: int


class DetectionRecord(NamedTuple):
    index: int
    basis: int
    bit: int


@dataclass(frozen=True)
class ChannelParams:
    loss_prob: float = 0.0
    flip_prob: float = 0.0
    eve_prob: float = 0.0

    def __post_init__(self):
        for name in ("loss_prob", "flip_prob", "eve_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")


def encode_batch(count: int, rng_seed: int) -> list[PhotonRecord]:
    """Alice's photon database for one transmission batch."""
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = make_rng(rng_seed, "encode")
    bases = rng.integers(0, 2, size=count, dtype=np.uint8)
    bits = rng.integers(0, 2, size=count, dtype=np.uint8)
    return list(map(PhotonRecord, range(count), bases.tolist(), bits.tolist()))


def records_to_arrays(records):
    """Split a record list into (index, basis, bit) arrays."""
    n = len(records)
    if n == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.astype(np.uint8), empty.astype(np.uint8)
    arr = np.array(records, dtype=np.int64).reshape(n, 3)
    return arr[:, 0], arr[:, 1].astype(np.uint8), arr[:, 2].astype(np.uint8)


def transmit(photons: list[PhotonRecord], params: ChannelParams, rng_seed: int) -> list[DetectionRecord]:
    """Send ``photons`` through the channel and return Bob's detections.

    All random draws are made up front as whole arrays so that the outcome for
    a given photon depends only on the seed and its position in the batch.
    """
    if not photons:
        raise ValueError("photons must be nonempty")
    idx, basis, bit = records_to_arrays(photons)
    n = idx.size
    rng = make_rng(rng_seed, "transmit")
    lost = rng.random(n) < params.loss_prob
    attacked = rng.random(n) < params.eve_prob
    eve_basis = rng.integers(0, 2, size=n, dtype=np.uint8)
    eve_guess = rng.integers(0, 2, size=n, dtype=np.uint8)
    bob_basis = rng.integers(0, 2, size=n, dtype=np.uint8)
    bob_guess = rng.integers(0, 2, size=n, dtype=np.uint8)
    flipped = (rng.random(n) < params.flip_prob).astype(np.uint8)

    # intercept-resend: Eve measures, then re-prepares in her own basis
    eve_bit = np.where(eve_basis == basis, bit, eve_guess)
    arriving_basis = np.where(attacked, eve_basis, basis)
    arriving_bit = np.where(attacked, eve_bit, bit)

    bob_bit = np.where(bob_basis == arriving_basis, arriving_bit ^ flipped, bob_guess)

    keep = ~lost
    return list(map(DetectionRecord, idx[keep].tolist(), bob_basis[keep].tolist(), bob_bit[keep].tolist()))
