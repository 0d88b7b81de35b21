"""QKD sub-network: topology, routing, and multi-hop key relay through
trusted nodes.

Relay follows the trusted-node scheme: the end-to-end key is served from the
first link's relay stream (so it starts out shared by the source and the first
intermediate). Each later hop one-time-pads the carried key with fresh key
from that hop's link, sends it as a MAC'd relay-key message, and the next node
strips the pad with its own copy of the same link key.

Accounting for an ``n``-bit key over an ``h``-hop path: ``n`` bits are served
from the first link to form the key, and relaying consumes ``n * (h - 1)``
further link-key bits, ``n`` from each later link (at both of its endpoints).
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .bb84 import QkdLink, SessionPolicy, run_link_session
from .bits import as_bits, pack_bits, unpack_bits
from .classical import ClassicalChannel, MsgType
from .clock import SimClock, seconds_to_ms
from .errors import InsufficientMaterial, NoRoute, ProtocolError, UntrustedPath
from .keystore import KeyStore, KeyStream
from .qchannel import ChannelParams
from .rng import derive_seed

log = logging.getLogger(__name__)

RELAY_STREAM = "relay"


@dataclass(frozen=True)
class Node:
    node_id: str
    trusted: bool = True


@dataclass
class Link:
    link_id: str
    a: str
    b: str
    operational: bool = True
    switched: bool = False
    switch_delay_s: float = 0.0

    def other(self, node):
        if node == self.a:
            return self.b
        if node == self.b:
            return self.a
        raise ValueError(f"node {node} is not on link {self.link_id}")


class Topology:
    def __init__(self):
        self.nodes: dict[str, Node] = {}
        self.links: dict[str, Link] = {}

    def add_node(self, node_id: str, trusted: bool = True) -> Node:
        if node_id in self.nodes:
            raise ValueError(f"duplicate node {node_id}")
        self.nodes[node_id] = Node(node_id, trusted)
        return self.nodes[node_id]

    def add_link(self, link_id, a, b, operational=True, switched=False, switch_delay_s=0.0) -> Link:
        if link_id in self.links:
            raise ValueError(f"duplicate link {link_id}")
        for n in (a, b):
            if n not in self.nodes:
                raise ValueError(f"link {link_id} references unknown node {n}")
        if a == b:
            raise ValueError(f"link {link_id} is a self-loop")
        pair = {a, b}
        for other in self.links.values():
            if {other.a, other.b} == pair:
                raise ValueError(f"nodes {a} and {b} already joined by link {other.link_id}")
        self.links[link_id] = Link(link_id, a, b, operational, switched, switch_delay_s)
        return self.links[link_id]

    def incident(self, node_id):
        return [l for l in self.links.values() if node_id in (l.a, l.b)]

    @classmethod
    def parse(cls, text: str, source: str = "<topology>") -> "Topology":
        """Parse the line-oriented topology format::

            node <id> trusted|untrusted
            link <id> <nodeA> <nodeB> up|down static|switched <delay_s>

        ``#`` starts a comment.
        """
        topo = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            words = line.split()
            try:
                if words[0] == "node" and len(words) == 3:
                    if words[2] not in ("trusted", "untrusted"):
                        raise ValueError(f"expected trusted|untrusted, got {words[2]!r}")
                    topo.add_node(words[1], words[2] == "trusted")
                elif words[0] == "link" and len(words) == 7:
                    _, lid, a, b, state, kind, delay = words
                    if state not in ("up", "down"):
                        raise ValueError(f"expected up|down, got {state!r}")
                    if kind not in ("static", "switched"):
                        raise ValueError(f"expected static|switched, got {kind!r}")
                    topo.add_link(lid, a, b, state == "up", kind == "switched", float(delay))
                else:
                    raise ValueError(f"unrecognized directive {line!r}")
            except ValueError as exc:
                raise ValueError(f"{source}:{lineno}: {exc}") from None
        return topo

    @classmethod
    def load(cls, path) -> "Topology":
        with open(path) as fh:
            return cls.parse(fh.read(), str(path))


@dataclass(frozen=True)
class Path:
    nodes: tuple
    hops: tuple

    @property
    def kind(self) -> str:
        return "direct" if len(self.hops) == 1 else "multi-hop"

    @property
    def intermediates(self) -> list:
        return list(self.nodes[1:-1])

    @property
    def src(self):
        return self.nodes[0]

    @property
    def dst(self):
        return self.nodes[-1]


def route(topology: Topology, src: str, dst: str) -> Path:
    """Fewest-hop path over operational links; ties go to the lexicographically
    smallest sequence of link ids."""
    for n in (src, dst):
        if n not in topology.nodes:
            raise KeyError(f"unknown node {n}")
    if src == dst:
        raise ValueError("src and dst must differ")
    # best[v] = (link id sequence, node sequence); level-by-level BFS keeps
    # the smallest sequence among equally short paths.
    best = {src: ((), (src,))}
    frontier = [src]
    while frontier and dst not in best:
        candidates = {}
        for u in frontier:
            links_u, nodes_u = best[u]
            for link in topology.incident(u):
                if not link.operational:
                    continue
                v = link.other(u)
                if v in best:
                    continue
                cand = (links_u + (link.link_id,), nodes_u + (v,))
                if v not in candidates or cand[0] < candidates[v][0]:
                    candidates[v] = cand
        best.update(candidates)
        frontier = sorted(candidates)
    if dst not in best:
        raise NoRoute(f"no operational QKD path from {src} to {dst}")
    hops, nodes = best[dst]
    return Path(nodes, hops)


@dataclass(frozen=True)
class ConnectionInfo:
    possible: bool
    kind: str | None = None
    intermediates: tuple = ()
    setup_delay_s: float = 0.0
    requires_trust: bool = False
    all_trusted: bool = True
    path: Path | None = None


def connection_info(topology: Topology, src: str, dst: str) -> ConnectionInfo:
    """What an application needs before choosing quantum keying: is there an
    operational path, is it direct, whose trust does it require, and how long
    switched links take to set up."""
    try:
        path = route(topology, src, dst)
    except (NoRoute, KeyError, ValueError):
        return ConnectionInfo(False)
    delay = sum(topology.links[l].switch_delay_s for l in path.hops if topology.links[l].switched)
    inter = tuple(path.intermediates)
    return ConnectionInfo(
        possible=True,
        kind=path.kind,
        intermediates=inter,
        setup_delay_s=delay,
        requires_trust=bool(inter),
        all_trusted=all(topology.nodes[n].trusted for n in inter),
        path=path,
    )


@dataclass
class RelayResult:
    relay_id: int
    path: Path
    delivered: np.ndarray | None = None
    hop_ciphertexts: list = field(default_factory=list)
    consumed: dict = field(default_factory=dict)
    messages: int = 0
    status: str = "ok"
    transcript: bytes = b""


class QkdNetwork:
    """A topology with live links: per-node key stores, BB84 links, relay."""

    def __init__(self, topology: Topology, clock: SimClock | None = None, mac_keys=None, channel_params=None):
        self.topology = topology
        self.clock = clock or SimClock()
        self.stores = {n: KeyStore(n) for n in topology.nodes}
        self.links: dict[str, QkdLink] = {}
        self.burned: list[tuple] = []
        self.relays_run = 0
        self._setup_done: set = set()
        for lid, link in topology.links.items():
            params = (channel_params or {}).get(lid, ChannelParams())
            self.links[lid] = QkdLink(
                lid,
                self.stores[link.a].add_link(lid),
                self.stores[link.b].add_link(lid),
                params,
                (mac_keys or {}).get(lid),
                self.clock,
                link.operational,
            )

    def store(self, node: str, link_id: str):
        return self.stores[node][link_id]

    def run_session(self, link_id: str, policy: SessionPolicy = SessionPolicy(), seed: int = 0, faults=()):
        link = self.topology.links[link_id]
        if link.switched and link_id not in self._setup_done:
            self.clock.advance(seconds_to_ms(link.switch_delay_s))
            self._setup_done.add(link_id)
        return run_link_session(self.links[link_id], policy, seed, faults)

    def route(self, src, dst) -> Path:
        return route(self.topology, src, dst)

    def connection_info(self, src, dst) -> ConnectionInfo:
        return connection_info(self.topology, src, dst)

    def relay_stream(self, node: str, link_id: str) -> KeyStream:
        """The relay stream at ``node``'s end of ``link_id``; opening it opens
        both ends together so their allocations stay aligned."""
        link = self.topology.links[link_id]
        for end in (link.a, link.b):
            store = self.store(end, link_id)
            if RELAY_STREAM not in store.streams:
                store.open_stream(RELAY_STREAM)
        return self.store(node, link_id).stream(RELAY_STREAM)

    def _check_trust(self, path):
        bad = [n for n in path.intermediates if not self.topology.nodes[n].trusted]
        if bad:
            raise UntrustedPath(f"path {'-'.join(path.nodes)} crosses untrusted node(s) {', '.join(bad)}")

    def source_key(self, path: Path, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Serve ``n`` bits from the first link's relay stream at both of its ends."""
        first = path.hops[0]
        a = self.relay_stream(path.nodes[0], first)
        b = self.relay_stream(path.nodes[1], first)
        if a.available() < n or b.available() < n:
            raise InsufficientMaterial(n - min(a.available(), b.available()))
        return a.consume(n), b.consume(n)

    def relay_key(self, key_a, path: Path) -> RelayResult:
        """Carry ``key_a`` (held by ``path.nodes[1]``) to ``path.dst`` hop by hop.

        Accounting: every hop after the first spends n bits of its link key
        (the same n bits at both of its ends), so one relay costs n*(h-1)
        link-key bits. ``consumed`` records them per (link, node) end. The
        first link's n bits that became ``key_a`` are charged by
        :meth:`end_to_end_key`, not here.
        """
        key_a = as_bits(key_a)
        n = key_a.size
        relay_id = self.relays_run
        self.relays_run += 1
        result = RelayResult(relay_id, path)
        self._check_trust(path)
        carried = key_a
        transcript = []
        try:
            for i in range(1, len(path.hops)):
                lid, sender, receiver = path.hops[i], path.nodes[i], path.nodes[i + 1]
                tx_stream = self.relay_stream(sender, lid)
                rx_stream = self.relay_stream(receiver, lid)
                pad = self._consume(tx_stream, n, result, sender)
                ciphertext = carried ^ pad
                channel = self._hop_channel(lid, relay_id, sender, receiver)
                try:
                    wire = channel.send(sender, MsgType.RELAY_KEY, n.to_bytes(4, "big") + pack_bits(ciphertext))
                finally:
                    transcript.append(channel.transcript_bytes())
                result.messages += 1
                result.hop_ciphertexts.append(ciphertext)
                received = unpack_bits(wire[4:], int.from_bytes(wire[:4], "big"))
                carried = received ^ self._consume(rx_stream, n, result, receiver)
        except (InsufficientMaterial, ProtocolError) as exc:
            result.status = exc.status
            for (link_id, node), bits in result.consumed.items():
                self.burned.append((relay_id, link_id, node, bits))
            log.warning("relay %d aborted (%s); burned %s", relay_id, exc, result.consumed)
            exc.relay = result
            raise
        finally:
            result.transcript = b"".join(transcript)
        result.delivered = carried
        return result

    def _consume(self, stream, n, result, node):
        bits = stream.consume(n)
        key = (stream.link_id, node)
        result.consumed[key] = result.consumed.get(key, 0) + n
        return bits

    def _hop_channel(self, link_id, relay_id, sender, receiver):
        session_id = derive_seed(0, "relay", link_id, relay_id) >> 1
        k_a, k_b, _ = self.links[link_id].mac_keys.keys_for_session(session_id)
        link = self.topology.links[link_id]
        keys = {link.a: k_a, link.b: k_b}
        return ClassicalChannel(session_id, {sender: keys[sender], receiver: keys[receiver]}, self.clock)

    def end_to_end_key(self, src: str, dst: str, n: int):
        """Return ``(key at src, key at dst, RelayResult or None)``."""
        path = self.route(src, dst)
        self._check_trust(path)
        at_src, at_next = self.source_key(path, n)
        if path.kind == "direct":
            return at_src, at_next, None
        sourced = {(path.hops[0], path.nodes[0]): n, (path.hops[0], path.nodes[1]): n}
        try:
            result = self.relay_key(at_next, path)
        except (InsufficientMaterial, ProtocolError) as exc:
            for (lid, node), bits in sourced.items():
                self.burned.append((exc.relay.relay_id, lid, node, bits))
            exc.relay.consumed = {**sourced, **exc.relay.consumed}
            raise
        result.consumed = {**sourced, **result.consumed}
        return at_src, result.delivered, result

    def relayable(self, src: str, dst: str) -> int:
        """Largest key ``end_to_end_key(src, dst, n)`` could deliver right now."""
        path = self.route(src, dst)
        return min(
            self.relay_stream(node, lid).available()
            for i, lid in enumerate(path.hops)
            for node in path.nodes[i : i + 2]
        )


class RelayPool:
    """End-to-end key for one node pair, refilled by relay in fixed chunks.

    ``source_for(node)`` returns a key source for that end. When either end
    runs short, one relay fills both ends' buffers, so the two ends always
    draw identical bit sequences.
    """

    def __init__(self, net: QkdNetwork, a: str, b: str, chunk: int = 1024):
        self.net, self.ends, self.chunk = net, (a, b), chunk
        self.buffers = {a: np.zeros(0, np.uint8), b: np.zeros(0, np.uint8)}

    def _refill(self, need):
        n = max(need, min(self.chunk, self.net.relayable(*self.ends)))
        at_a, at_b, _ = self.net.end_to_end_key(self.ends[0], self.ends[1], n)
        a, b = self.ends
        self.buffers[a] = np.concatenate([self.buffers[a], at_a])
        self.buffers[b] = np.concatenate([self.buffers[b], at_b])

    def source_for(self, node):
        if node not in self.buffers:
            raise KeyError(f"{node} is not an end of this pool")
        return _PoolEnd(self, node)


class _PoolEnd:
    def __init__(self, pool: RelayPool, node: str):
        self.pool, self.node = pool, node

    def available(self) -> int:
        return self.pool.buffers[self.node].size + self.pool.net.relayable(*self.pool.ends)

    def take(self, n: int) -> np.ndarray:
        buf = self.pool.buffers[self.node]
        if buf.size < n:
            self.pool._refill(n - buf.size)
            buf = self.pool.buffers[self.node]
        self.pool.buffers[self.node] = buf[n:]
        return buf[:n]
