import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qkdsim.classical import ClassicalChannel, ClassicalMessage, MsgType, compute_mac, decode_transcript
from qkdsim.clock import SimClock
from qkdsim.errors import MacFailure, ProtocolError, ProtocolTimeout

KEYS = {"alice": b"k" * 32, "bob": b"k" * 32}


@settings(max_examples=50)
@given(
    t=st.sampled_from(list(MsgType)),
    sid=st.integers(0, 2**64 - 1),
    payload=st.binary(max_size=200),
    mac=st.binary(min_size=16, max_size=16),
)
def test_frame_roundtrip(t, sid, payload, mac):
    msg = ClassicalMessage(t, sid, payload, mac)
    wire = msg.encode()
    assert len(wire) == 1 + 8 + 4 + len(payload) + 16
    assert wire[0] == int(t)
    assert int.from_bytes(wire[1:9], "big") == sid
    assert ClassicalMessage.decode(wire) == msg


def test_decode_rejects_garbage():
    with pytest.raises(ProtocolError):
        ClassicalMessage.decode(b"\x01" * 10)
    wire = ClassicalMessage(MsgType.PA_SEED, 1, b"abc").encode()
    with pytest.raises(ProtocolError):
        ClassicalMessage.decode(wire + b"x")
    with pytest.raises(ProtocolError):
        ClassicalMessage.decode(b"\xee" + wire[1:])


def test_send_verifies_and_records():
    ch = ClassicalChannel(7, dict(KEYS))
    assert ch.send("alice", MsgType.SIFT_RETAIN, b"hello") == b"hello"
    assert ch.send("bob", MsgType.PARITY_REQUEST, b"") == b""
    msgs = decode_transcript(ch.transcript_bytes())
    assert [m.msg_type for m in msgs] == [MsgType.SIFT_RETAIN, MsgType.PARITY_REQUEST]
    assert msgs[0].mac == compute_mac(KEYS["alice"], 7, MsgType.SIFT_RETAIN, 0, b"hello")


def test_mac_depends_on_sequence():
    assert compute_mac(b"k", 1, 2, 0, b"x") != compute_mac(b"k", 1, 2, 1, b"x")


@settings(max_examples=40)
@given(payload=st.binary(min_size=1, max_size=64), bit=st.integers(0, 10_000))
def test_any_single_bit_tamper_detected(payload, bit):
    ch = ClassicalChannel(1, dict(KEYS))
    ch.tamper_next(MsgType.QBER_SAMPLE, bit)
    with pytest.raises(MacFailure):
        ch.send("alice", MsgType.QBER_SAMPLE, payload)


def test_tamper_waits_for_matching_type():
    ch = ClassicalChannel(1, dict(KEYS))
    ch.tamper_next(MsgType.PA_SEED)
    ch.send("alice", MsgType.SIFT_RETAIN, b"ok")
    with pytest.raises(MacFailure):
        ch.send("alice", MsgType.PA_SEED, b"seed")


def test_key_mismatch_fails():
    ch = ClassicalChannel(1, {"alice": b"a" * 32, "bob": b"b" * 32})
    with pytest.raises(MacFailure):
        ch.send("alice", MsgType.SIFT_RETAIN, b"x")


def test_stall_times_out_on_simulated_clock():
    clock = SimClock()
    ch = ClassicalChannel(1, dict(KEYS), clock, timeout_s=5.0)
    ch.stall_next(MsgType.PARITY_REPLY)
    with pytest.raises(ProtocolTimeout):
        ch.send("alice", MsgType.PARITY_REPLY, b"\x00")
    assert clock.now_ms == 5000


def test_dump(tmp_path):
    ch = ClassicalChannel(3, dict(KEYS))
    ch.send("alice", MsgType.SIFT_RETAIN, b"abc")
    path = tmp_path / "t.bin"
    ch.dump(path)
    assert path.read_bytes() == ch.transcript_bytes()
