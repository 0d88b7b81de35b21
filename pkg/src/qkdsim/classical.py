"""Integrity-protected classical channel between two QKD endpoints.

Wire form of one message::

    msg_type (1) | session_id (8, big-endian) | payload length (4, big-endian)
    | payload | mac (16)

The MAC is HMAC-SHA256 truncated to 128 bits, computed over session id,
message type, a per-direction sequence number and the payload. The sequence
number is implicit (both ends count), so replayed or reordered frames fail
verification just like tampered ones.
"""

import enum
import hashlib
import hmac
import logging
import struct
from dataclasses import dataclass, field

from .clock import SimClock, seconds_to_ms
from .errors import MacFailure, ProtocolError, ProtocolTimeout

log = logging.getLogger(__name__)

MAC_LEN = 16
HEADER = struct.Struct(">BQI")


class MsgType(enum.IntEnum):
    SIFT_ANNOUNCE = 1
    SIFT_RETAIN = 2
    QBER_SAMPLE = 3
    PARITY_REQUEST = 4
    PARITY_REPLY = 5
    PA_SEED = 6
    SYNC_DIGEST = 7
    RELAY_KEY = 8
    VERIFY_DIGEST = 9
    # handshake messages of the secure-channel protocol share the framing
    SA_INIT = 0x10
    SA_RESP = 0x11
    AUTH_I = 0x12
    AUTH_R = 0x13
    REKEY = 0x14
    RECORD = 0x15


def compute_mac(key: bytes, session_id: int, msg_type: int, seq: int, payload: bytes) -> bytes:
    h = hmac.new(key, digestmod=hashlib.sha256)
    h.update(struct.pack(">QBQI", session_id, msg_type, seq, len(payload)))
    h.update(payload)
    return h.digest()[:MAC_LEN]


@dataclass(frozen=True)
class ClassicalMessage:
    msg_type: MsgType
    session_id: int
    payload: bytes
    mac: bytes = bytes(MAC_LEN)

    def encode(self) -> bytes:
        return HEADER.pack(int(self.msg_type), self.session_id, len(self.payload)) + self.payload + self.mac

    @classmethod
    def decode(cls, data: bytes) -> "ClassicalMessage":
        msg, rest = cls.decode_prefix(data)
        if rest:
            raise ProtocolError(f"{len(rest)} trailing bytes after frame")
        return msg

    @classmethod
    def decode_prefix(cls, data: bytes):
        """Decode one frame from the front of ``data``; return (message, remainder)."""
        if len(data) < HEADER.size + MAC_LEN:
            raise ProtocolError("truncated frame")
        tag, session_id, length = HEADER.unpack_from(data)
        try:
            msg_type = MsgType(tag)
        except ValueError:
            raise ProtocolError(f"unknown message type {tag}") from None
        end = HEADER.size + length
        if len(data) < end + MAC_LEN:
            raise ProtocolError("truncated frame")
        msg = cls(msg_type, session_id, bytes(data[HEADER.size:end]), bytes(data[end:end + MAC_LEN]))
        return msg, data[end + MAC_LEN:]


def decode_transcript(data: bytes) -> list[ClassicalMessage]:
    out = []
    while data:
        msg, data = ClassicalMessage.decode_prefix(data)
        out.append(msg)
    return out


@dataclass
class _Fault:
    kind: str  # "tamper" or "stall"
    msg_type: MsgType | None
    bit: int = 0
    fired: bool = False


@dataclass
class ClassicalChannel:
    """Reliable, ordered, in-process message passing between two named ends.

    Each end holds its own MAC key. ``send`` frames and MACs the payload with
    the sender's key, applies any armed fault, then verifies on the receiving
    side and returns the payload as the receiver sees it.
    """

    session_id: int
    keys: dict
    clock: SimClock = field(default_factory=SimClock)
    timeout_s: float = 5.0
    transcript: list = field(default_factory=list)
    _seq: dict = field(default_factory=dict)
    _faults: list = field(default_factory=list)

    @property
    def ends(self):
        return tuple(self.keys)

    def peer_of(self, end):
        a, b = self.ends
        return b if end == a else a

    def tamper_next(self, msg_type: MsgType | None = None, bit: int = 0):
        """Flip payload bit ``bit`` of the next message of ``msg_type`` (any type if None)."""
        self._faults.append(_Fault("tamper", msg_type, bit))

    def stall_next(self, msg_type: MsgType | None = None):
        """Drop the next message of ``msg_type``; the receiver times out."""
        self._faults.append(_Fault("stall", msg_type))

    def _pending_fault(self, msg_type):
        for f in self._faults:
            if not f.fired and (f.msg_type is None or f.msg_type == msg_type):
                return f
        return None

    def send(self, sender, msg_type: MsgType, payload: bytes) -> bytes:
        if sender not in self.keys:
            raise ValueError(f"unknown channel end {sender!r}")
        receiver = self.peer_of(sender)
        seq = self._seq.get(sender, 0)
        self._seq[sender] = seq + 1
        mac = compute_mac(self.keys[sender], self.session_id, msg_type, seq, payload)
        wire = ClassicalMessage(msg_type, self.session_id, payload, mac).encode()

        fault = self._pending_fault(msg_type)
        if fault is not None:
            fault.fired = True
            if fault.kind == "stall":
                self.clock.advance(seconds_to_ms(self.timeout_s))
                log.info("session %d: %s from %s stalled", self.session_id, msg_type.name, sender)
                raise ProtocolTimeout(f"{msg_type.name} not received within {self.timeout_s}s")
            wire = _flip_payload_bit(wire, fault.bit)
            log.info("session %d: %s from %s tampered", self.session_id, msg_type.name, sender)

        self.transcript.append((sender, wire))
        received = ClassicalMessage.decode(wire)
        expected = compute_mac(self.keys[receiver], self.session_id, received.msg_type, seq, received.payload)
        if received.msg_type != msg_type or not hmac.compare_digest(expected, received.mac):
            raise MacFailure(f"{msg_type.name} from {sender} failed MAC verification")
        return received.payload

    def transcript_bytes(self) -> bytes:
        return b"".join(wire for _, wire in self.transcript)

    def dump(self, path):
        with open(path, "wb") as fh:
            fh.write(self.transcript_bytes())


def _flip_payload_bit(wire: bytes, bit: int) -> bytes:
    length = HEADER.unpack_from(wire)[2]
    body = bytearray(wire)
    if length == 0:
        # nothing to flip in the payload; corrupt the tag instead
        body[-1] ^= 1
        return bytes(body)
    bit %= length * 8
    body[HEADER.size + bit // 8] ^= 0x80 >> (bit % 8)
    return bytes(body)
