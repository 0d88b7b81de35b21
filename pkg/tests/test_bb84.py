import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_link
from qkdsim.bb84 import (
    SessionPolicy,
    SiftAnnouncement,
    SiftedKey,
    SiftRetainList,
    apply_retain,
    decode_announcement,
    decode_retain,
    encode_announcement,
    encode_retain,
    estimate_qber,
    leaked_bits_from_transcript,
    run_link_session,
    sample_positions,
    sift,
)
from qkdsim.classical import MsgType, decode_transcript
from qkdsim.errors import (
    EavesdropSuspected,
    InsufficientMaterial,
    MacFailure,
    ProtocolError,
    ProtocolTimeout,
    ReconciliationFailure,
)
from qkdsim.qchannel import ChannelParams, DetectionRecord, PhotonRecord, encode_batch, transmit

SMALL = SessionPolicy(photons=4000)


def test_sift_tiny_example():
    alice = [PhotonRecord(0, 0, 1), PhotonRecord(1, 1, 0), PhotonRecord(2, 0, 0), PhotonRecord(3, 1, 1)]
    bob = [DetectionRecord(0, 0, 1), DetectionRecord(2, 1, 1), DetectionRecord(3, 1, 1)]
    key, retain = sift(alice, SiftAnnouncement.from_detections(bob))
    assert list(retain.indices) == [0, 3]
    assert list(key.bits) == [1, 1]
    assert list(apply_retain(bob, retain).bits) == [1, 1]


def test_sift_unknown_index_is_protocol_error():
    alice = [PhotonRecord(0, 0, 1)]
    with pytest.raises(ProtocolError):
        sift(alice, SiftAnnouncement(np.array([5]), np.array([0], dtype=np.uint8)))
    with pytest.raises(ProtocolError):
        apply_retain([DetectionRecord(0, 0, 1)], SiftRetainList(np.array([1])))


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 500), seed=st.integers(0, 2**31))
def test_announcement_and_retain_codecs(n, seed):
    dets = transmit(encode_batch(n, seed), ChannelParams(loss_prob=0.3), seed)
    ann = SiftAnnouncement.from_detections(dets)
    back = decode_announcement(encode_announcement(ann))
    assert np.array_equal(back.indices, ann.indices) and np.array_equal(back.bases, ann.bases)
    r = SiftRetainList(ann.indices[::2])
    assert np.array_equal(decode_retain(encode_retain(r)).indices, r.indices)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 2000), seed=st.integers(0, 2**31))
def test_sifted_keys_agree_on_clean_channel(n, seed):
    alice = encode_batch(n, seed)
    dets = transmit(alice, ChannelParams(), seed)
    a, retain = sift(alice, SiftAnnouncement.from_detections(dets))
    b = apply_retain(dets, retain)
    assert np.array_equal(a.bits, b.bits)
    assert np.array_equal(a.source_indices, b.source_indices)


def test_sift_yield_within_3_sigma():
    n, loss = 100_000, 0.2
    alice = encode_batch(n, 1)
    dets = transmit(alice, ChannelParams(loss_prob=loss), 2)
    key, _ = sift(alice, SiftAnnouncement.from_detections(dets))
    p = 0.5 * (1 - loss)
    assert abs(len(key) - n * p) <= 3 * math.sqrt(n * p * (1 - p))


def test_sample_disclosed_bits_are_discarded():
    rng = np.random.default_rng(0)
    bits = rng.integers(0, 2, 1000, dtype=np.uint8)
    a = SiftedKey(bits, np.arange(1000))
    b = SiftedKey(bits.copy(), np.arange(1000))
    q, ta, tb = estimate_qber(a, b, 0.1, 42)
    pos = sample_positions(1000, 0.1, 42)
    assert q == 0.0 and len(ta) == 900 and len(tb) == 900
    assert not set(pos) & set(ta.source_indices.tolist())


def test_estimate_qber_counts_errors():
    bits = np.zeros(1000, dtype=np.uint8)
    flipped = np.ones(1000, dtype=np.uint8)
    q, _, _ = estimate_qber(SiftedKey(bits, np.arange(1000)), SiftedKey(flipped, np.arange(1000)), 0.2, 1)
    assert q == 1.0


def test_short_sifted_key_is_insufficient():
    k = SiftedKey(np.zeros(10, dtype=np.uint8), np.arange(10))
    with pytest.raises(InsufficientMaterial) as e:
        estimate_qber(k, k, 0.1, 1)
    assert e.value.shortfall == 54


def test_session_success_fills_both_stores():
    link = make_link(loss=0.1, flip=0.01)
    rep = run_link_session(link, SMALL, seed=1)
    assert rep.status == "ok" and rep.final_len > 0
    a, b = link.alice_store.blocks, link.bob_store.blocks
    assert len(a) == len(b) == 1 and np.array_equal(a[0].bits, b[0].bits)
    assert rep.leaked_bits == leaked_bits_from_transcript(rep.transcript)
    assert rep.sample_size == round(0.1 * rep.sifted)


def test_eve_aborts_and_leaves_stores_untouched():
    link = make_link(eve=1.0)
    with pytest.raises(EavesdropSuspected) as e:
        run_link_session(link, SessionPolicy(photons=20_000), seed=3)
    assert e.value.report.qber > 0.11
    assert link.alice_store.blocks == [] and link.bob_store.blocks == []


@pytest.mark.parametrize("mt", [MsgType.SIFT_ANNOUNCE, MsgType.SIFT_RETAIN, MsgType.QBER_SAMPLE,
                                MsgType.PARITY_REQUEST, MsgType.PARITY_REPLY, MsgType.PA_SEED])
def test_tampered_message_aborts(mt):
    link = make_link(flip=0.02)
    with pytest.raises(MacFailure) as e:
        run_link_session(link, SMALL, seed=4, faults=[("tamper", mt)])
    assert e.value.report.status == "mac-failure"
    assert link.alice_store.blocks == []


def test_stalled_message_times_out():
    link = make_link()
    with pytest.raises(ProtocolTimeout):
        run_link_session(link, SMALL, seed=5, faults=[("stall", MsgType.PA_SEED)])
    assert link.clock.now_ms == 5000


def test_transcript_is_well_formed():
    link = make_link(flip=0.03)
    rep = run_link_session(link, SMALL, seed=6)
    types = [m.msg_type for m in decode_transcript(rep.transcript)]
    assert types[:4] == [MsgType.SIFT_ANNOUNCE, MsgType.SIFT_RETAIN, MsgType.QBER_SAMPLE, MsgType.QBER_SAMPLE]
    assert types[-1] == MsgType.PA_SEED


def test_randomized_sessions_identical_or_no_key():
    ok = 0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        link = make_link(loss=rng.uniform(0, 0.5), flip=rng.uniform(0, 0.06), eve=rng.choice([0.0, 0.0, 0.3, 1.0]))
        try:
            run_link_session(link, SessionPolicy(photons=2000), seed=trial)
        except (EavesdropSuspected, InsufficientMaterial, ReconciliationFailure):
            assert link.alice_store.blocks == link.bob_store.blocks == []
            continue
        ok += 1
        assert np.array_equal(link.alice_store.blocks[0].bits, link.bob_store.blocks[0].bits)
    assert ok > 30


def test_session_is_deterministic():
    reps = [run_link_session(make_link(flip=0.02), SMALL, seed=9) for _ in range(2)]
    assert reps[0].transcript == reps[1].transcript
