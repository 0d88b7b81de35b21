import sys

import numpy as np
import pytest

from qkdsim.bb84 import QkdLink
from qkdsim.clock import SimClock
from qkdsim.keystore import LinkKeyStore
from qkdsim.qchannel import ChannelParams


def make_link(link_id="L", loss=0.0, flip=0.0, eve=0.0, clock=None, **kw):
    return QkdLink(
        link_id,
        LinkKeyStore(link_id, "alice"),
        LinkKeyStore(link_id, "bob"),
        ChannelParams(loss, flip, eve),
        clock=clock or SimClock(),
        **kw,
    )


def random_bits(rng, n):
    return rng.integers(0, 2, size=n, dtype=np.uint8)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(acceptance.RESULTS):
            terminalreporter.write_line(acceptance.RESULTS[n])
