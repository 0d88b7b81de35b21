import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qkdsim.qchannel import ChannelParams, encode_batch, records_to_arrays, transmit


def within_3sigma(count, n, p):
    return abs(count - n * p) <= 3 * math.sqrt(n * p * (1 - p))


def test_encode_batch_rejects_empty():
    with pytest.raises(ValueError):
        encode_batch(0, 1)


def test_params_validated():
    with pytest.raises(ValueError):
        ChannelParams(loss_prob=1.5)
    with pytest.raises(ValueError):
        ChannelParams(eve_prob=-0.1)


def test_single_photon_lossless_noiseless():
    photons = encode_batch(1, 3)
    (det,) = transmit(photons, ChannelParams(), 3)
    assert det.index == 0
    if det.basis == photons[0].basis:
        assert det.bit == photons[0].bit


def test_total_loss_detects_nothing():
    assert transmit(encode_batch(500, 1), ChannelParams(loss_prob=1.0), 1) == []


def test_encode_is_uniform():
    idx, basis, bit = records_to_arrays(encode_batch(50_000, 9))
    assert list(idx[:3]) == [0, 1, 2]
    assert within_3sigma(int(basis.sum()), 50_000, 0.5)
    assert within_3sigma(int(bit.sum()), 50_000, 0.5)


@pytest.mark.parametrize("loss", [0.0, 0.2, 0.5, 0.9])
def test_detection_rate_binomial(loss):
    n = 40_000
    dets = transmit(encode_batch(n, 5), ChannelParams(loss_prob=loss), 6)
    assert within_3sigma(len(dets), n, 1 - loss) if loss else len(dets) == n


def eve_error_oracle():
    # enumerate Alice basis, Eve basis, Bob basis (each uniform); keep matched
    # Alice/Bob bases; Eve in the wrong basis randomizes the bit Bob reads
    err = total = 0
    for a, e, b in itertools.product((0, 1), repeat=3):
        if a != b:
            continue
        total += 1
        err += 0.5 if e != a else 0.0
    return err / total


def test_eve_oracle_is_quarter():
    assert eve_error_oracle() == 0.25


@pytest.mark.parametrize("eve,flip", [(1.0, 0.0), (0.0, 0.05), (0.5, 0.0)])
def test_matched_basis_error_rate(eve, flip):
    n = 60_000
    photons = encode_batch(n, 11)
    dets = transmit(photons, ChannelParams(flip_prob=flip, eve_prob=eve), 12)
    _, a_basis, a_bit = records_to_arrays(photons)
    idx, b_basis, b_bit = records_to_arrays(dets)
    match = a_basis[idx] == b_basis
    errors = int(np.count_nonzero(a_bit[idx][match] != b_bit[match]))
    # Eve's errors and flips compose: p = e/4 (1-f) + (1 - e/4) f
    pe = eve * eve_error_oracle()
    p = pe * (1 - flip) + (1 - pe) * flip
    assert within_3sigma(errors, int(match.sum()), p)


@settings(max_examples=30, deadline=None)
@given(
    n=st.integers(1, 300),
    seed=st.integers(0, 2**32),
    loss=st.floats(0, 1),
    flip=st.floats(0, 1),
    eve=st.floats(0, 1),
)
def test_transmit_shape_and_determinism(n, seed, loss, flip, eve):
    photons = encode_batch(n, seed)
    params = ChannelParams(loss, flip, eve)
    a = transmit(photons, params, seed)
    assert a == transmit(photons, params, seed)
    idx = [d.index for d in a]
    assert idx == sorted(set(idx)) and all(0 <= i < n for i in idx)
    assert all(d.basis in (0, 1) and d.bit in (0, 1) for d in a)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 300), seed=st.integers(0, 2**32))
def test_clean_channel_matched_bases_agree(n, seed):
    photons = encode_batch(n, seed)
    for d in transmit(photons, ChannelParams(), seed + 1):
        if d.basis == photons[d.index].basis:
            assert d.bit == photons[d.index].bit
