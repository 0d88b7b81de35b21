"""BB84 session driver: transmit, sift, estimate QBER, reconcile, amplify.

Every classical exchange goes through a :class:`ClassicalChannel`, so each
message is framed and MAC-verified. A session either appends bitwise
identical key blocks at both endpoints or raises and stores nothing.
"""

import logging
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from . import amplify
from .bits import pack_bits, unpack_bits
from .classical import ClassicalChannel, MsgType, decode_transcript
from .clock import SimClock
from .errors import EavesdropSuspected, InsufficientMaterial, ProtocolError, QkdError, ReconciliationFailure
from .keystore import LinkKeyStore
from .qchannel import ChannelParams, DetectionRecord, PhotonRecord, encode_batch, records_to_arrays, transmit
from .reconcile import (
    CascadeConfig,
    LocalParityOracle,
    cascade,
    decode_parity_reply,
    decode_parity_request,
    encode_parity_reply,
    encode_parity_request,
)
from .rng import derive_seed, make_rng

log = logging.getLogger(__name__)

MIN_SIFTED = 64
ALICE = "alice"
BOB = "bob"


@dataclass(frozen=True)
class SiftAnnouncement:
    """Bob's detected indices and measurement bases; never bit values."""

    indices: np.ndarray
    bases: np.ndarray

    @property
    def entries(self):
        return list(zip(self.indices.tolist(), self.bases.tolist()))

    @classmethod
    def from_detections(cls, detections: list[DetectionRecord]):
        idx, basis, _ = records_to_arrays(detections)
        return cls(idx, basis)


@dataclass(frozen=True)
class SiftRetainList:
    indices: np.ndarray


@dataclass
class SiftedKey:
    bits: np.ndarray
    source_indices: np.ndarray

    def __post_init__(self):
        if len(self.bits) != len(self.source_indices):
            raise ValueError("bits and source_indices differ in length")

    def __len__(self):
        return len(self.bits)


_ANNOUNCE_DTYPE = np.dtype([("index", ">u4"), ("basis", "u1")])


def encode_announcement(a: SiftAnnouncement) -> bytes:
    rec = np.empty(len(a.indices), dtype=_ANNOUNCE_DTYPE)
    rec["index"] = a.indices
    rec["basis"] = a.bases
    return rec.tobytes()


def decode_announcement(payload: bytes) -> SiftAnnouncement:
    if len(payload) % _ANNOUNCE_DTYPE.itemsize:
        raise ProtocolError("malformed sift announcement")
    rec = np.frombuffer(payload, dtype=_ANNOUNCE_DTYPE)
    return SiftAnnouncement(rec["index"].astype(np.int64), rec["basis"].astype(np.uint8))


def encode_retain(r: SiftRetainList) -> bytes:
    return np.asarray(r.indices, dtype=">u4").tobytes()


def decode_retain(payload: bytes) -> SiftRetainList:
    if len(payload) % 4:
        raise ProtocolError("malformed retain list")
    return SiftRetainList(np.frombuffer(payload, dtype=">u4").astype(np.int64))


def _positions(known: np.ndarray, wanted: np.ndarray, what: str) -> np.ndarray:
    """Positions of ``wanted`` indices inside the sorted index array ``known``."""
    pos = np.searchsorted(known, wanted)
    bad = (pos >= known.size) | (known[np.minimum(pos, known.size - 1)] != wanted) if known.size else wanted == wanted
    if np.any(bad):
        first = int(np.asarray(wanted)[np.flatnonzero(bad)[0]])
        raise ProtocolError(f"{what}: index {first} unknown (peers desynchronized)")
    return pos


def sift(alice_db: list[PhotonRecord], announcement: SiftAnnouncement) -> tuple[SiftedKey, SiftRetainList]:
    idx, basis, bit = records_to_arrays(alice_db)
    if announcement.indices.size and np.any(np.diff(announcement.indices) <= 0):
        raise ProtocolError("announced indices not strictly increasing")
    pos = _positions(idx, announcement.indices, "sift")
    match = basis[pos] == announcement.bases
    kept = announcement.indices[match]
    return SiftedKey(bit[pos[match]], kept), SiftRetainList(kept)


def apply_retain(bob_detections: list[DetectionRecord], retain: SiftRetainList) -> SiftedKey:
    idx, _, bit = records_to_arrays(bob_detections)
    pos = _positions(idx, retain.indices, "retain")
    return SiftedKey(bit[pos], np.asarray(retain.indices, dtype=np.int64))


def sample_positions(n: int, sample_fraction: float, rng_seed: int) -> np.ndarray:
    size = max(1, min(n, round(sample_fraction * n)))
    return np.sort(make_rng(rng_seed, "qber-sample").choice(n, size=size, replace=False))


def _drop(key: SiftedKey, positions) -> SiftedKey:
    keep = np.ones(len(key), dtype=bool)
    keep[positions] = False
    return SiftedKey(key.bits[keep], key.source_indices[keep])


def estimate_qber(alice_key: SiftedKey, bob_key: SiftedKey, sample_fraction: float, rng_seed: int, min_length: int = MIN_SIFTED):
    """Disclose a seeded random sample, measure mismatches, discard the sample.

    Returns ``(qber_estimate, alice_trimmed, bob_trimmed)``.
    """
    if len(alice_key) != len(bob_key):
        raise ProtocolError("sifted keys differ in length")
    if not 0 < sample_fraction < 1:
        raise ValueError("sample_fraction must lie in (0, 1)")
    if len(alice_key) < min_length:
        raise InsufficientMaterial(min_length - len(alice_key), f"sifted key of {len(alice_key)} bits is below {min_length}")
    pos = sample_positions(len(alice_key), sample_fraction, rng_seed)
    errors = np.count_nonzero(alice_key.bits[pos] != bob_key.bits[pos])
    return errors / pos.size, _drop(alice_key, pos), _drop(bob_key, pos)


@dataclass(frozen=True)
class SessionPolicy:
    photons: int = 100_000
    sample_fraction: float = 0.1
    abort_threshold: float = 0.11
    min_sifted: int = MIN_SIFTED
    passes: int = 4
    max_block: int = 4096
    security_margin: int = 64
    timeout_s: float = 5.0


class StaticMacKeys:
    """Both ends MAC the classical channel with one fixed key."""

    source = "static"

    def __init__(self, key: bytes):
        self.key = key

    def keys_for_session(self, session_id: int):
        return self.key, self.key, self.source


@dataclass
class QkdLink:
    """A point-to-point QKD link: Alice's and Bob's stores plus channel state."""

    link_id: str
    alice_store: LinkKeyStore
    bob_store: LinkKeyStore
    params: ChannelParams = field(default_factory=ChannelParams)
    mac_keys: object = None
    clock: SimClock = field(default_factory=SimClock)
    operational: bool = True
    sessions_run: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    pending_faults: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.mac_keys is None:
            self.mac_keys = StaticMacKeys(b"link-psk:" + self.link_id.encode())


@dataclass
class SessionReport:
    link_id: str
    session_id: int
    status: str = "running"
    reason: str = ""
    mac_source: str = ""
    photons: int = 0
    detected: int = 0
    sifted: int = 0
    sample_size: int = 0
    qber: float = float("nan")
    reconciled: int = 0
    leaked_bits: int = 0
    cascade_rounds: int = 0
    corrections: int = 0
    final_len: int = 0
    block_id: int = -1
    transcript: bytes = field(default=b"", repr=False)


class ChannelParityOracle:
    """Bob's Cascade oracle that reaches Alice through the classical channel."""

    def __init__(self, channel: ClassicalChannel, alice: LocalParityOracle):
        self.channel = channel
        self.alice = alice

    def parities(self, pass_index, intervals):
        request = self.channel.send(BOB, MsgType.PARITY_REQUEST, encode_parity_request(pass_index, intervals))
        p, ivs = decode_parity_request(request)
        reply = self.channel.send(ALICE, MsgType.PARITY_REPLY, encode_parity_reply(self.alice.parities(p, ivs)))
        return decode_parity_reply(reply, len(intervals))

    def reference_digest(self):
        return self.channel.send(ALICE, MsgType.VERIFY_DIGEST, self.alice.reference_digest())


def session_id_for(link_id: str, number: int) -> int:
    return derive_seed(0, "session", link_id, number) >> 1


def leaked_bits_from_transcript(data: bytes, digest_bits: int = 128) -> int:
    """Count key information disclosed in a session transcript.

    Each parity-request interval is answered by one parity bit; each 16-byte
    verify-digest frame from Alice discloses ``digest_bits``.
    """
    total = 0
    for msg in decode_transcript(data):
        if msg.msg_type == MsgType.PARITY_REQUEST:
            total += len(decode_parity_request(msg.payload)[1])
        elif msg.msg_type == MsgType.VERIFY_DIGEST and len(msg.payload) == digest_bits // 8:
            total += digest_bits
    return total


def run_link_session(link: QkdLink, policy: SessionPolicy = SessionPolicy(), seed: int = 0, faults=()) -> SessionReport:
    """Run one full BB84 session on ``link``.

    On success both stores receive the same new block and the report is
    returned. On failure the raised :class:`QkdError` carries the partial
    report as ``exc.report`` and neither store changes.

    ``faults`` is a sequence of ``(kind, msg_type)`` with kind ``"tamper"`` or
    ``"stall"``, armed on the session's classical channel.
    """
    with link.lock:
        number = link.sessions_run
        link.sessions_run += 1
        sid = session_id_for(link.link_id, number)
        report = SessionReport(link.link_id, sid, photons=policy.photons)
        try:
            if not link.operational:
                raise ProtocolError(f"link {link.link_id} is not operational")
            _run(link, policy, derive_seed(seed, link.link_id, number), report, list(faults) + link.pending_faults)
        except QkdError as exc:
            report.status = exc.status
            report.reason = str(exc)
            exc.report = report
            log.info("link %s session %d aborted: %s", link.link_id, number, exc)
            raise
        finally:
            link.pending_faults.clear()
        report.status = "ok"
        return report


def _run(link, policy, seed, report, faults):
    alice_mac, bob_mac, source = link.mac_keys.keys_for_session(report.session_id)
    report.mac_source = source
    channel = ClassicalChannel(report.session_id, {ALICE: alice_mac, BOB: bob_mac}, link.clock, policy.timeout_s)
    for kind, msg_type in faults:
        (channel.tamper_next if kind == "tamper" else channel.stall_next)(msg_type)
    try:
        final = _exchange(link, policy, seed, report, channel)
    finally:
        report.transcript = channel.transcript_bytes()
    block_a = link.alice_store.append(final)
    block_b = link.bob_store.append(final)
    if block_a.block_id != block_b.block_id:
        raise ProtocolError(f"block id mismatch {block_a.block_id} != {block_b.block_id}")
    report.block_id = block_a.block_id
    report.final_len = int(final.size)


def _exchange(link, policy, seed, report, channel):
    # quantum transmission
    alice_db = encode_batch(policy.photons, derive_seed(seed, "alice"))
    detections = transmit(alice_db, link.params, derive_seed(seed, "channel"))
    report.detected = len(detections)

    # sifting
    wire = channel.send(BOB, MsgType.SIFT_ANNOUNCE, encode_announcement(SiftAnnouncement.from_detections(detections)))
    alice_key, retain = sift(alice_db, decode_announcement(wire))
    wire = channel.send(ALICE, MsgType.SIFT_RETAIN, encode_retain(retain))
    bob_key = apply_retain(detections, decode_retain(wire))
    report.sifted = len(alice_key)

    # QBER estimation on a disclosed sample
    if len(alice_key) < policy.min_sifted:
        raise InsufficientMaterial(policy.min_sifted - len(alice_key), f"sifted key of {len(alice_key)} bits is below {policy.min_sifted}")
    sample_seed = derive_seed(seed, "qber")
    pos = sample_positions(len(alice_key), policy.sample_fraction, sample_seed)
    wire = channel.send(ALICE, MsgType.QBER_SAMPLE, struct.pack(">QI", sample_seed, pos.size) + pack_bits(alice_key.bits[pos]))
    got_seed, count = struct.unpack_from(">QI", wire)
    bob_pos = sample_positions(len(bob_key), policy.sample_fraction, got_seed)
    if bob_pos.size != count:
        raise ProtocolError("QBER sample size disagrees between peers")
    bob_view = np.count_nonzero(unpack_bits(wire[12:], count) != bob_key.bits[bob_pos]) / count
    wire = channel.send(BOB, MsgType.QBER_SAMPLE, pack_bits(bob_key.bits[bob_pos]))
    alice_view = np.count_nonzero(unpack_bits(wire, count) != alice_key.bits[pos]) / count
    qber, alice_key, bob_key = estimate_qber(alice_key, bob_key, policy.sample_fraction, got_seed, policy.min_sifted)
    if not alice_view == bob_view == qber:
        raise ProtocolError("peers disagree on the QBER estimate")
    report.sample_size = int(pos.size)
    report.qber = qber
    if qber > policy.abort_threshold:
        raise EavesdropSuspected(qber, policy.abort_threshold)

    # reconciliation
    config = CascadeConfig(passes=policy.passes, max_block=policy.max_block, shuffle_seed=report.session_id)
    oracle = ChannelParityOracle(channel, LocalParityOracle(alice_key.bits, config))
    result = cascade(bob_key.bits, qber, oracle, config)
    channel.send(BOB, MsgType.VERIFY_DIGEST, b"\x01" if result.verified else b"\x00")
    report.reconciled = int(result.corrected_key.size)
    report.leaked_bits = result.leaked_bits
    report.cascade_rounds = result.rounds
    report.corrections = result.corrections
    if not result.verified:
        raise ReconciliationFailure("verification digest mismatch after final Cascade pass")

    # privacy amplification
    n = result.corrected_key.size
    m = amplify.output_length(n, result.leaked_bits, qber, policy.security_margin)
    params = amplify.make_params(n, m, make_rng(seed, "pa-seed"), policy.security_margin)
    wire = channel.send(ALICE, MsgType.PA_SEED, amplify.encode_pa_seed(params))
    bob_params = amplify.decode_pa_seed(wire, n, policy.security_margin)
    alice_final = amplify.toeplitz_hash(alice_key.bits, params)
    bob_final = amplify.toeplitz_hash(result.corrected_key, bob_params)
    if not np.array_equal(alice_final, bob_final):
        raise ReconciliationFailure("final keys differ after amplification")
    return alice_final

