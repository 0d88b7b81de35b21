"""Synchronized key store for one endpoint of a QKD link.

Final keys from BB84 sessions arrive as immutable ``KeyBlock``s. The store
demultiplexes them into named ``KeyStream``s: each block is dealt whole to one
stream, round-robin over open streams in ``stream_id`` order. Dealing happens
only when a block is appended or a stream is opened, never on consumption, so
two endpoints that see the same appends and opens in the same order assign
identical bits to identical streams no matter how their consumers interleave.

Served bits are destroyed: no bit is handed out twice, across all streams and
across recovery events.

Thread safety: every operation takes the store's lock, so consumers on
distinct streams and the producer appending blocks may run on different
threads. ``wait_available`` blocks a real thread until a producer appends
enough material for one stream.
"""

import enum
import hashlib
import logging
import os
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .bits import as_bits, pack_bits, unpack_bits
from .classical import MsgType
from .errors import InsufficientMaterial, SyncError

log = logging.getLogger(__name__)

DIGEST_LEN = 16
DEFAULT_DIGEST_INTERVAL = 4096
SYNC_PAYLOAD = struct.Struct(">QQI16s")


class BlockStatus(enum.Enum):
    AVAILABLE = "available"
    PARTIAL = "partially-consumed"
    EXHAUSTED = "exhausted"
    QUARANTINED = "quarantined"


@dataclass(eq=False)
class KeyBlock:
    block_id: int
    link_id: str
    bits: np.ndarray
    status: BlockStatus = BlockStatus.AVAILABLE
    owner: str | None = None
    consumed: int = 0

    def __len__(self):
        return len(self.bits)


def _stream_digest(link_id, stream_id):
    key = hashlib.sha256(f"stream-digest\x1f{link_id}\x1f{stream_id}".encode()).digest()
    return hashlib.blake2b(key=key, digest_size=DIGEST_LEN)


@dataclass(eq=False)
class KeyStream:
    stream_id: str
    link_id: str
    store: "LinkKeyStore" = field(repr=False)
    blocks: list = field(default_factory=list)
    position: int = 0
    offset: int = 0
    served_total: int = 0
    since_sync: int = 0
    desynchronized: bool = False
    served_log: list = field(default_factory=list, repr=False)
    _digest: object = field(default=None, repr=False)

    def __post_init__(self):
        self._digest = _stream_digest(self.link_id, self.stream_id)

    @property
    def cursor(self) -> tuple[int, int]:
        """(block_id, bit offset) of the next bit this stream will serve."""
        with self.store.lock:
            if self.position < len(self.blocks):
                return self.blocks[self.position], self.offset
            return self.store.next_unallocated_id(), 0

    @property
    def consumed_digest(self) -> bytes:
        return self._digest.copy().digest()

    @property
    def sync_due(self) -> bool:
        return self.since_sync >= self.store.digest_interval

    def available(self) -> int:
        return self.store.available(self)

    def consume(self, n: int) -> np.ndarray:
        return self.store.consume(self, n)


class LinkKeyStore:
    """One endpoint's key database for one link."""

    def __init__(self, link_id: str, endpoint: str = "", digest_interval: int = DEFAULT_DIGEST_INTERVAL):
        self.link_id = link_id
        self.endpoint = endpoint
        self.digest_interval = digest_interval
        self.blocks: list[KeyBlock] = []
        self.streams: dict[str, KeyStream] = {}
        self.lock = threading.RLock()
        self._arrived = threading.Condition(self.lock)
        self._pending: list[int] = []
        self._last_dealt: str | None = None
        self.events: list[str] = []

    # -- producer side -------------------------------------------------

    def append(self, bits) -> KeyBlock:
        bits = as_bits(bits).copy()
        if bits.size == 0:
            raise ValueError("empty key block")
        bits.flags.writeable = False
        with self.lock:
            block = KeyBlock(len(self.blocks), self.link_id, bits)
            self.blocks.append(block)
            self._pending.append(block.block_id)
            self._deal()
            self._arrived.notify_all()
            return block

    @property
    def total_bits(self) -> int:
        with self.lock:
            return sum(len(b) for b in self.blocks)

    def next_unallocated_id(self) -> int:
        with self.lock:
            return self._pending[0] if self._pending else len(self.blocks)

    def _next_stream_after(self, stream_id):
        order = sorted(self.streams)
        for sid in order:
            if stream_id is None or sid > stream_id:
                return sid
        return order[0]

    def _assign(self, block_id, stream_id):
        self.blocks[block_id].owner = stream_id
        self.streams[stream_id].blocks.append(block_id)
        self._last_dealt = stream_id

    def _deal(self):
        while self._pending and self.streams:
            self._assign(self._pending.pop(0), self._next_stream_after(self._last_dealt))

    def quarantine(self, block_id: int, reason: str = ""):
        with self.lock:
            self.blocks[block_id].status = BlockStatus.QUARANTINED
            self.events.append(f"quarantine block={block_id} {reason}".rstrip())

    # -- consumer side -------------------------------------------------

    def open_stream(self, stream_id: str) -> KeyStream:
        with self.lock:
            if stream_id in self.streams:
                raise ValueError(f"stream {stream_id!r} already open on link {self.link_id}")
            stream = KeyStream(stream_id, self.link_id, self)
            self.streams[stream_id] = stream
            if self._pending:
                self._assign(self._pending.pop(0), stream_id)
            self._deal()
            return stream

    def stream(self, stream_id: str) -> KeyStream:
        return self.streams[stream_id]

    def available(self, stream: KeyStream) -> int:
        with self.lock:
            total = 0
            for i, bid in enumerate(stream.blocks[stream.position:]):
                block = self.blocks[bid]
                if block.status is BlockStatus.QUARANTINED:
                    break
                total += len(block) - (stream.offset if i == 0 else 0)
            return total

    def _walk(self, stream, n):
        """Yield (block, start, stop) spans covering the next ``n`` bits."""
        pos, off = stream.position, stream.offset
        while n > 0:
            block = self.blocks[stream.blocks[pos]]
            if block.status is BlockStatus.QUARANTINED:
                raise SyncError(f"stream {stream.stream_id} reached quarantined block {block.block_id}")
            take = min(n, len(block) - off)
            yield block, off, off + take
            n -= take
            off += take
            if off == len(block):
                pos, off = pos + 1, 0

    def _advance(self, stream, spans):
        for block, start, stop in spans:
            block.consumed = max(block.consumed, stop)
            if block.status is not BlockStatus.QUARANTINED:
                block.status = BlockStatus.EXHAUSTED if stop == len(block) else BlockStatus.PARTIAL
            if stop == len(block):
                stream.position += 1
                stream.offset = 0
            else:
                stream.offset = stop

    def consume(self, stream: KeyStream, n: int) -> np.ndarray:
        if n < 0:
            raise ValueError("n must be nonnegative")
        with self.lock:
            if stream.store is not self or self.streams.get(stream.stream_id) is not stream:
                raise ValueError("stream does not belong to this store")
            if stream.desynchronized:
                raise SyncError(f"stream {stream.stream_id} is desynchronized; recover first")
            if n == 0:
                return np.zeros(0, dtype=np.uint8)
            have = self.available(stream)
            if have < n:
                self._check_quarantine_ahead(stream, have)
                raise InsufficientMaterial(n - have)
            spans = list(self._walk(stream, n))
            out = np.concatenate([block.bits[a:b] for block, a, b in spans])
            self._advance(stream, spans)
            stream.served_log.extend((block.block_id, a, b) for block, a, b in spans)
            stream._digest.update(out.tobytes())
            stream.served_total += n
            stream.since_sync += n
            return out

    def _check_quarantine_ahead(self, stream, have):
        # material blocked behind a quarantined block is a sync problem, not a shortage
        if have == 0 and stream.position < len(stream.blocks):
            block = self.blocks[stream.blocks[stream.position]]
            if block.status is BlockStatus.QUARANTINED:
                raise SyncError(f"stream {stream.stream_id} reached quarantined block {block.block_id}")

    def wait_available(self, stream: KeyStream, n: int, timeout: float | None = None) -> bool:
        """Block the calling thread until ``n`` bits are available on ``stream``."""
        with self._arrived:
            return self._arrived.wait_for(lambda: self.available(stream) >= n, timeout)

    # -- synchronization -----------------------------------------------

    def sync_payload(self, stream: KeyStream) -> bytes:
        """Payload of the sync-digest message describing ``stream``'s position."""
        block_id, offset = stream.cursor
        with self.lock:
            return SYNC_PAYLOAD.pack(stream.served_total, block_id, offset, stream.consumed_digest)

    def sync_check(self, stream: KeyStream, remote_payload: bytes) -> str:
        with self.lock:
            ok = remote_payload == self.sync_payload(stream)
            stream.since_sync = 0
            if not ok:
                stream.desynchronized = True
                self.events.append(f"desync stream={stream.stream_id} at={stream.cursor}")
                log.info("%s/%s: stream %s desynchronized", self.link_id, self.endpoint, stream.stream_id)
                return "desynchronized"
            return "ok"

    def recover(self, stream: KeyStream) -> KeyStream:
        """Drop the rest of the current block and restart at the next block boundary."""
        with self.lock:
            if not stream.desynchronized:
                raise ValueError(f"stream {stream.stream_id} is synchronized; nothing to recover")
            if stream.position + 1 >= len(stream.blocks):
                raise InsufficientMaterial(1, f"no block after the current one on stream {stream.stream_id}")
            current = self.blocks[stream.blocks[stream.position]]
            current.status = BlockStatus.QUARANTINED
            stream.position += 1
            stream.offset = 0
            stream._digest = _stream_digest(self.link_id, stream.stream_id)
            stream.served_total = 0
            stream.since_sync = 0
            stream.desynchronized = False
            self.events.append(f"recover stream={stream.stream_id} resume_block={stream.blocks[stream.position]}")
            return stream

    def inject_skew(self, stream: KeyStream, n: int):
        """Fault injection: silently advance ``stream``'s cursor by ``n`` bits."""
        with self.lock:
            spans = list(self._walk(stream, n))
            self._advance(stream, spans)
            stream.served_log.extend((block.block_id, a, b) for block, a, b in spans)
            self.events.append(f"skew stream={stream.stream_id} bits={n}")

    # -- persistence ---------------------------------------------------

    def save(self, path, tag_key: bytes = b""):
        """Append every block not yet in ``path``; existing records are kept."""
        have = sum(1 for _ in iter_block_file(path, tag_key, verify=False)) if os.path.exists(path) else 0
        with self.lock, open(path, "ab") as fh:
            for block in self.blocks[have:]:
                fh.write(encode_block_record(block.block_id, block.bits, tag_key))

    @classmethod
    def load(cls, path, link_id: str, endpoint: str = "", tag_key: bytes = b"", **kwargs) -> "LinkKeyStore":
        store = cls(link_id, endpoint, **kwargs)
        for block_id, bits, valid in iter_block_file(path, tag_key):
            if block_id != len(store.blocks):
                raise ValueError(f"block file gap: expected id {len(store.blocks)}, got {block_id}")
            block = store.append(bits)
            if not valid:
                store.quarantine(block.block_id, "bad integrity tag")
        return store


class KeyStore:
    """All link stores held by one node."""

    def __init__(self, node_id: str):
        self.node_id = node_id
        self.links: dict[str, LinkKeyStore] = {}

    def add_link(self, link_id: str, **kwargs) -> LinkKeyStore:
        if link_id in self.links:
            raise ValueError(f"link {link_id} already present")
        self.links[link_id] = LinkKeyStore(link_id, self.node_id, **kwargs)
        return self.links[link_id]

    def __getitem__(self, link_id) -> LinkKeyStore:
        try:
            return self.links[link_id]
        except KeyError:
            raise KeyError(f"node {self.node_id} has no link {link_id}") from None

    def open_stream(self, link_id: str, stream_id: str) -> KeyStream:
        return self[link_id].open_stream(stream_id)


def open_stream(store: LinkKeyStore, stream_id: str) -> KeyStream:
    return store.open_stream(stream_id)


def consume(stream: KeyStream, n: int) -> np.ndarray:
    return stream.store.consume(stream, n)


def sync_check(stream: KeyStream, remote_payload: bytes) -> str:
    return stream.store.sync_check(stream, remote_payload)


def recover(stream: KeyStream) -> KeyStream:
    return stream.store.recover(stream)


def exchange_sync(local: KeyStream, remote: KeyStream, channel, local_end, remote_end) -> tuple[str, str]:
    """Swap sync-digest messages over ``channel`` and check both sides."""
    to_remote = channel.send(local_end, MsgType.SYNC_DIGEST, local.store.sync_payload(local))
    to_local = channel.send(remote_end, MsgType.SYNC_DIGEST, remote.store.sync_payload(remote))
    return sync_check(local, to_local), sync_check(remote, to_remote)


# block file: block_id (8) | bit length (4) | packed bits | tag (16)

_RECORD_HEAD = struct.Struct(">QI")


def _tag(tag_key, head, packed):
    h = hashlib.blake2b(key=tag_key, digest_size=16)
    h.update(head)
    h.update(packed)
    return h.digest()


def encode_block_record(block_id: int, bits, tag_key: bytes = b"") -> bytes:
    bits = as_bits(bits)
    head = _RECORD_HEAD.pack(block_id, bits.size)
    packed = pack_bits(bits)
    return head + packed + _tag(tag_key, head, packed)


def iter_block_file(path, tag_key: bytes = b"", verify: bool = True):
    """Yield (block_id, bits, tag_ok) for each record in a block file."""
    with open(path, "rb") as fh:
        data = fh.read()
    off = 0
    while off < len(data):
        if len(data) - off < _RECORD_HEAD.size:
            raise ValueError("truncated block record header")
        head = data[off:off + _RECORD_HEAD.size]
        block_id, nbits = _RECORD_HEAD.unpack(head)
        nbytes = (nbits + 7) // 8
        end = off + _RECORD_HEAD.size + nbytes
        if end + 16 > len(data):
            raise ValueError("truncated block record")
        packed = data[off + _RECORD_HEAD.size:end]
        tag = data[end:end + 16]
        ok = (not verify) or _tag(tag_key, head, packed) == tag
        yield block_id, unpack_bits(packed, nbits), ok
        off = end + 16


class StreamKeySource:
    """Key source backed by one endpoint's stream (``take``/``available``)."""

    def __init__(self, stream: KeyStream):
        self.stream = stream

    def available(self) -> int:
        return self.stream.available()

    def take(self, n: int) -> np.ndarray:
        return self.stream.consume(n)
