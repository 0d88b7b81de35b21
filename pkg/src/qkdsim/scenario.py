"""Scenario files: parsing, deterministic execution, and the key=value report.

A scenario is a line-oriented script. ``#`` starts a comment; options are
``key=value`` words after the positional arguments. See
``scenarios/fig2.scn`` for a commented example. Commands::

    topology <file>                          topology file, relative to the scenario
    seed <n>                                 default run seed (--seed overrides)
    policy key=value ...                     BB84 session defaults (photons, sample,
                                             threshold, passes, max_block, margin)
    channel <link> loss=.. flip=.. eve=..    quantum channel parameters
    bootstrap <link> psk=<text> [threshold=4096]
    qkd-session <link> [count=N] [photons=N]
    open-stream <link> <stream>
    consume <link> <stream> <bits>           at both ends of the link
    sync-check <link> <stream>
    recover <link> <stream>
    relay <src> <dst> <bits>
    handshake <name> <src> <dst> suites=A,classical [responder=...]
              [exhaustion=fail|block|fallback] [timeout=5] [rekey-records=N]
              [stream=<id>] [psk=<text>] [responder-psk=<text>] [delay=<s>]
    send-record <name> i2r|r2i <nbytes> [count=N]
    inject-fault <kind> ...                  tamper <link> <msg-type> |
                                             stall <link> <msg-type> |
                                             skew <link> <stream> <node> <bits> |
                                             tamper-handshake <name> <msg-type> |
                                             tamper-record <name>
    wait <ms>

Any step may carry ``expect=<status>``; the step then counts as passing only
if it fails with that status. A step failing without a matching ``expect``
makes the run exit nonzero.
"""

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .bb84 import SessionPolicy
from .classical import ClassicalChannel, MsgType
from .clock import SimClock
from .errors import QkdError
from .keystore import StreamKeySource, exchange_sync
from .qchannel import ChannelParams
from .qnet import QkdNetwork, RelayPool, Topology
from .rng import derive_seed
from .securechan import (
    SUITES_BY_NAME,
    ExhaustionPolicy,
    Peer,
    RekeyPolicy,
    Wire,
    bootstrap_bb84_protection,
    establish,
)

log = logging.getLogger(__name__)

# type, session_id, length: fault bits are offset past it to land in the payload
HEADER_LEN = 13


class ScenarioError(ValueError):
    def __init__(self, source, lineno, message):
        super().__init__(f"{source}:{lineno}: {message}")
        self.lineno = lineno


@dataclass
class Command:
    lineno: int
    name: str
    args: list
    opts: dict


# name -> (min positional, max positional)
ARITY = {
    "topology": (1, 1),
    "seed": (1, 1),
    "policy": (0, 0),
    "channel": (1, 1),
    "bootstrap": (1, 1),
    "qkd-session": (1, 1),
    "open-stream": (2, 2),
    "consume": (3, 3),
    "sync-check": (2, 2),
    "recover": (2, 2),
    "relay": (3, 3),
    "handshake": (3, 3),
    "send-record": (3, 3),
    "inject-fault": (2, 5),
    "wait": (1, 1),
}

FAULT_ARITY = {"tamper": 3, "stall": 3, "skew": 5, "tamper-handshake": 3, "tamper-record": 2}
EXHAUSTION_MODES = {"fail": "fail", "block": "block-with-timeout", "fallback": "fallback-classical"}


@dataclass
class Scenario:
    source: str
    topology: Topology
    commands: list
    seed: int = 0
    policy: SessionPolicy = field(default_factory=SessionPolicy)
    channels: dict = field(default_factory=dict)


def _msg_type(word, source, lineno):
    try:
        return MsgType[word.upper().replace("-", "_")]
    except KeyError:
        raise ScenarioError(source, lineno, f"unknown message type {word!r}") from None


def parse_scenario(text: str, source: str = "<scenario>", base_dir: str = ".") -> Scenario:
    commands, topology, seed = [], None, 0
    policy_opts, channels = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        words = line.split()
        name = words[0]
        args = [w for w in words[1:] if "=" not in w]
        opts = dict(w.split("=", 1) for w in words[1:] if "=" in w)
        if name not in ARITY:
            raise ScenarioError(source, lineno, f"unknown command {name!r}")
        lo, hi = ARITY[name]
        if not lo <= len(args) <= hi:
            raise ScenarioError(source, lineno, f"{name} takes {lo}..{hi} arguments, got {len(args)}")
        cmd = Command(lineno, name, args, opts)
        try:
            if name == "topology":
                path = args[0] if os.path.isabs(args[0]) else os.path.join(base_dir, args[0])
                topology = Topology.load(path)
            elif name == "seed":
                seed = int(args[0])
            elif name == "policy":
                policy_opts.update(opts)
                _policy(policy_opts, source, lineno)
            elif name == "channel":
                channels[args[0]] = ChannelParams(
                    float(opts.get("loss", 0)), float(opts.get("flip", 0)), float(opts.get("eve", 0))
                )
                commands.append(cmd)
            else:
                commands.append(cmd)
        except (OSError, ValueError) as exc:
            raise ScenarioError(source, lineno, str(exc)) from None
    if topology is None:
        topology = Topology()
    scn = Scenario(source, topology, commands, seed, _policy(policy_opts, source, 0), channels)
    for cmd in commands:
        _validate(scn, cmd)
    return scn


def _policy(opts, source, lineno):
    names = {
        "photons": ("photons", int),
        "sample": ("sample_fraction", float),
        "threshold": ("abort_threshold", float),
        "passes": ("passes", int),
        "max_block": ("max_block", int),
        "margin": ("security_margin", int),
        "timeout": ("timeout_s", float),
    }
    kwargs = {}
    for key, value in opts.items():
        if key not in names:
            raise ScenarioError(source, lineno, f"unknown policy option {key!r}")
        attr, conv = names[key]
        kwargs[attr] = conv(value)
    return SessionPolicy(**kwargs)


def _validate(scn, cmd):
    topo = scn.topology

    def need_link(lid):
        if lid not in topo.links:
            raise ScenarioError(scn.source, cmd.lineno, f"unknown link {lid!r}")

    def need_node(nid):
        if nid not in topo.nodes:
            raise ScenarioError(scn.source, cmd.lineno, f"unknown node {nid!r}")

    n, a = cmd.name, cmd.args
    if n in ("channel", "bootstrap", "qkd-session", "open-stream", "consume", "sync-check", "recover"):
        need_link(a[0])
    if n in ("relay", "handshake"):
        for node in (a[:2] if n == "relay" else a[1:3]):
            need_node(node)
    if n == "handshake":
        for key in ("suites", "responder"):
            for s in cmd.opts.get(key, "classical").split(","):
                if s not in SUITES_BY_NAME:
                    raise ScenarioError(scn.source, cmd.lineno, f"unknown suite {s!r}")
        if cmd.opts.get("exhaustion", "fail") not in EXHAUSTION_MODES:
            raise ScenarioError(scn.source, cmd.lineno, f"unknown exhaustion mode {cmd.opts['exhaustion']!r}")
    if n == "send-record" and a[1] not in ("i2r", "r2i"):
        raise ScenarioError(scn.source, cmd.lineno, "direction must be i2r or r2i")
    if n == "inject-fault":
        kind = a[0]
        if kind not in FAULT_ARITY:
            raise ScenarioError(scn.source, cmd.lineno, f"unknown fault kind {kind!r}")
        if len(a) != FAULT_ARITY[kind]:
            raise ScenarioError(scn.source, cmd.lineno, f"fault {kind} takes {FAULT_ARITY[kind] - 1} arguments")
        if kind in ("tamper", "stall", "skew"):
            need_link(a[1])
        if kind in ("tamper", "stall", "tamper-handshake"):
            _msg_type(a[2], scn.source, cmd.lineno)
        if kind == "skew":
            need_node(a[3])
    for key in ("bits", "count", "photons"):
        if key in cmd.opts and not cmd.opts[key].isdigit():
            raise ScenarioError(scn.source, cmd.lineno, f"{key} must be a nonnegative integer")
    try:
        if n in ("consume", "relay"):
            int(a[2])
        if n == "send-record":
            int(a[2])
        if n == "wait":
            int(a[0])
    except ValueError:
        raise ScenarioError(scn.source, cmd.lineno, "expected an integer argument") from None


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        text = fh.read()
    return parse_scenario(text, os.path.basename(path), os.path.dirname(os.path.abspath(path)))


class Report:
    """Ordered sections of key=value lines."""

    def __init__(self):
        self.sections: list[tuple[str, list]] = []

    def section(self, header):
        body = []
        self.sections.append((header, body))
        return body

    def render(self) -> str:
        out = []
        for header, body in self.sections:
            out.append(f"[{header}]")
            out.extend(f"{k}={_fmt(v)}" for k, v in body)
            out.append("")
        return "\n".join(out)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "nan" if v != v else f"{v:.6f}"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def parse_report(text: str) -> list[tuple[str, dict]]:
    sections = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            sections.append((line[1:-1], {}))
        elif "=" in line and sections:
            k, v = line.split("=", 1)
            sections[-1][1][k] = v
        else:
            raise ValueError(f"malformed report line {line!r}")
    return sections


class Runner:
    def __init__(self, scenario: Scenario, seed: int | None = None, transcript_dir: str | None = None):
        self.scn = scenario
        self.seed = scenario.seed if seed is None else seed
        self.clock = SimClock()
        self.net = QkdNetwork(scenario.topology, self.clock, channel_params=dict(scenario.channels))
        self.transcript_dir = transcript_dir
        self.connections = {}
        self.pools = {}
        self.handshake_faults = {}
        self.record_faults = {}
        self.faults = []
        self.pending_link_faults = {}
        self.steps = []
        self.session_rows = []
        self.relay_rows = []
        self.providers = {}

    # helpers
    def _link_ends(self, lid):
        link = self.scn.topology.links[lid]
        return link.a, link.b

    def _stream_pair(self, lid, sid, open_missing=False):
        a, b = self._link_ends(lid)
        sa, sb = self.net.store(a, lid), self.net.store(b, lid)
        if open_missing and sid not in sa.streams:
            sa.open_stream(sid)
            sb.open_stream(sid)
        return sa.stream(sid), sb.stream(sid)

    def _write_transcript(self, name, data):
        if self.transcript_dir and data:
            os.makedirs(self.transcript_dir, exist_ok=True)
            with open(os.path.join(self.transcript_dir, name + ".bin"), "wb") as fh:
                fh.write(data)

    def _fault_outcome(self, step, outcome):
        for f in self.faults:
            if f["step"] is None and step.index > f["created"] and f["match"](step):
                f["step"], f["outcome"] = step.index, outcome

    def run(self) -> tuple[int, str]:
        for index, cmd in enumerate(self.scn.commands):
            step = _Step(index, cmd)
            expect = cmd.opts.get("expect")
            try:
                detail = getattr(self, "_do_" + cmd.name.replace("-", "_"))(cmd, step) or ""
                step.outcome = "ok"
                step.detail = detail
            except QkdError as exc:
                step.outcome = exc.status
                step.detail = str(exc)
            except (KeyError, ValueError) as exc:
                step.outcome = "error"
                step.detail = str(exc).strip("'\"")
            step.expected = expect if expect is not None else "ok"
            step.failed = step.outcome != step.expected
            self._fault_outcome(step, step.outcome)
            self.steps.append(step)
            log.info("step %d %s -> %s", index, cmd.name, step.outcome)
        report = self._report()
        failed = any(s.failed for s in self.steps)
        return (1 if failed else 0), report.render()

    # commands
    def _do_channel(self, cmd, step):
        self.net.links[cmd.args[0]].params = self.scn.channels[cmd.args[0]]

    def _do_bootstrap(self, cmd, step):
        lid = cmd.args[0]
        provider = bootstrap_bb84_protection(self.net.links[lid], cmd.opts.get("psk", "psk").encode(), int(cmd.opts.get("threshold", 4096)))
        self.providers[lid] = provider

    def _do_qkd_session(self, cmd, step):
        lid = cmd.args[0]
        policy = self.scn.policy
        if "photons" in cmd.opts:
            policy = SessionPolicy(**{**policy.__dict__, "photons": int(cmd.opts["photons"])})
        count = int(cmd.opts.get("count", 1))
        finals = []
        for _ in range(count):
            faults = self.pending_link_faults.pop(lid, [])
            try:
                rep = self.net.run_session(lid, policy, derive_seed(self.seed, "qkd", lid), faults)
                self._session_row(rep)
                finals.append(rep.final_len)
            except QkdError as exc:
                self._session_row(exc.report)
                raise
        return f"final_bits={sum(finals)}"

    def _session_row(self, rep):
        number = len([r for r in self.session_rows if r["link"] == rep.link_id])
        self._write_transcript(f"session-{rep.link_id}-{number}", rep.transcript)
        self.session_rows.append({
            "link": rep.link_id,
            "number": number,
            "status": rep.status,
            "reason": rep.reason,
            "mac_source": rep.mac_source,
            "photons": rep.photons,
            "detected": rep.detected,
            "sifted": rep.sifted,
            "sample": rep.sample_size,
            "qber": rep.qber,
            "reconciled": rep.reconciled,
            "leaked_bits": rep.leaked_bits,
            "cascade_rounds": rep.cascade_rounds,
            "final": rep.final_len,
            "block_id": rep.block_id,
        })

    def _do_open_stream(self, cmd, step):
        lid, sid = cmd.args
        a, b = self._link_ends(lid)
        self.net.store(a, lid).open_stream(sid)
        self.net.store(b, lid).open_stream(sid)

    def _do_consume(self, cmd, step):
        sa, sb = self._stream_pair(cmd.args[0], cmd.args[1])
        n = int(cmd.args[2])
        x = sa.consume(n)
        y = sb.consume(n)
        return f"match={str(bool(np.array_equal(x, y))).lower()}"

    def _do_sync_check(self, cmd, step):
        lid, sid = cmd.args
        sa, sb = self._stream_pair(lid, sid)
        a, b = self._link_ends(lid)
        k = derive_seed(self.seed, "sync", lid).to_bytes(8, "big")
        channel = ClassicalChannel(derive_seed(self.seed, "sync-session", lid) >> 1, {a: k, b: k}, self.clock)
        ra, rb = exchange_sync(sa, sb, channel, a, b)
        if "desynchronized" in (ra, rb):
            raise _Desync(f"{lid}/{sid} desynchronized ({a}:{ra} {b}:{rb})")
        return "ok"

    def _do_recover(self, cmd, step):
        sa, sb = self._stream_pair(*cmd.args)
        sa.store.recover(sa)
        sb.store.recover(sb)
        return f"cursor={sa.cursor[0]}:{sa.cursor[1]}"

    def _do_relay(self, cmd, step):
        src, dst, n = cmd.args[0], cmd.args[1], int(cmd.args[2])
        row = {"src": src, "dst": dst, "bits": n}
        self.relay_rows.append(row)
        info = self.net.connection_info(src, dst)
        row.update(kind=info.kind or "none", intermediates=list(info.intermediates), setup_delay_s=info.setup_delay_s)
        try:
            at_src, at_dst, result = self.net.end_to_end_key(src, dst, n)
        except QkdError as exc:
            row.update(status=exc.status, reason=str(exc))
            relay = getattr(exc, "relay", None)
            if relay is not None:
                row["consumed"] = _consumed(relay.consumed)
                row["burned_bits"] = sum(relay.consumed.values())
            raise
        row.update(status="ok", delivered_match=bool(np.array_equal(at_src, at_dst)))
        if result is not None:
            row["messages"] = result.messages
            row["consumed"] = _consumed(result.consumed)
            self._write_transcript(f"relay-{result.relay_id}", result.transcript)
        return f"delivered_match={str(row['delivered_match']).lower()}"

    def _key_sources(self, cmd, src, dst):
        info = self.net.connection_info(src, dst)
        if not info.possible:
            return info, None, None
        if info.kind == "direct":
            lid = info.path.hops[0]
            sid = cmd.opts.get("stream", "app-" + cmd.args[0])
            s_src, s_dst = self._stream_pair(lid, sid, open_missing=True)
            if self.scn.topology.links[lid].a != src:
                s_src, s_dst = s_dst, s_src
            return info, StreamKeySource(s_src), StreamKeySource(s_dst)
        pool = self.pools.setdefault((src, dst), RelayPool(self.net, src, dst))
        return info, pool.source_for(src), pool.source_for(dst)

    def _do_handshake(self, cmd, step):
        name, src, dst = cmd.args
        info, k_src, k_dst = self._key_sources(cmd, src, dst)
        suites = [SUITES_BY_NAME[s] for s in cmd.opts.get("suites", "classical").split(",")]
        prefs = [SUITES_BY_NAME[s] for s in cmd.opts.get("responder", cmd.opts.get("suites", "classical")).split(",")]
        psk = cmd.opts.get("psk", "scenario-psk").encode()
        r_psk = cmd.opts.get("responder-psk", cmd.opts.get("psk", "scenario-psk")).encode()
        policy = ExhaustionPolicy(EXHAUSTION_MODES[cmd.opts.get("exhaustion", "fail")], float(cmd.opts.get("timeout", 5)))
        rekey = RekeyPolicy(max_records=int(cmd.opts["rekey-records"])) if "rekey-records" in cmd.opts else None
        row = {"name": name, "src": src, "dst": dst, "route": info.kind or "none"}
        self.connections[name] = row
        sid = derive_seed(self.seed, "handshake", name) >> 1
        wire = Wire(sid)
        for msg_type in self.handshake_faults.pop(name, []):
            wire.tamper_next(msg_type, bit=8 * HEADER_LEN)
        try:
            conn = establish(
                Peer(src, psk, suites, k_src),
                Peer(dst, r_psk, prefs, k_dst),
                info,
                exhaustion=policy,
                rekey_policy=rekey,
                clock=self.clock,
                seed=self.seed,
                session_id=sid,
                timeout_s=float(cmd.opts.get("timeout", 5)),
                responder_delay_s=float(cmd.opts.get("delay", 0)),
                wire=wire,
            )
        except QkdError as exc:
            row.update(status=exc.status, reason=str(exc))
            self._write_transcript(f"handshake-{name}", b"".join(w for _, w in wire.transcript))
            raise
        row.update(status="ok", conn=conn)
        return f"suite={conn.suite.name}"

    def _do_send_record(self, cmd, step):
        name, direction, nbytes = cmd.args[0], cmd.args[1], int(cmd.args[2])
        row = self.connections.get(name)
        if row is None or "conn" not in row:
            raise KeyError(f"no established handshake {name!r}")
        conn = row["conn"]
        count = int(cmd.opts.get("count", 1))
        rng = np.random.Generator(np.random.PCG64(derive_seed(self.seed, "records", name, step.index)))
        if self.record_faults.pop(name, False):
            conn.handshake.wire.tamper_next(MsgType.RECORD, bit=8 * (HEADER_LEN + 8))
        ok = 0
        for _ in range(count):
            msg = rng.bytes(nbytes)
            if conn.send(msg, direction) != msg:
                raise QkdError("record round trip mismatch")
            ok += 1
        row["records"] = row.get("records", 0) + ok
        return f"records={ok}"

    def _do_inject_fault(self, cmd, step):
        kind, args = cmd.args[0], cmd.args[1:]
        desc = " ".join(cmd.args)
        if kind in ("tamper", "stall"):
            lid, mt = args[0], _msg_type(args[1], self.scn.source, cmd.lineno)
            self.pending_link_faults.setdefault(lid, []).append((kind, mt))
            match = lambda s, lid=lid: s.cmd.name == "qkd-session" and s.cmd.args[0] == lid  # noqa: E731
        elif kind == "skew":
            lid, sid, node, bits = args
            store = self.net.store(node, lid)
            store.inject_skew(store.stream(sid), int(bits))
            match = lambda s, lid=lid, sid=sid: s.cmd.name == "sync-check" and s.cmd.args == [lid, sid]  # noqa: E731
        elif kind == "tamper-handshake":
            name = args[0]
            self.handshake_faults.setdefault(name, []).append(_msg_type(args[1], self.scn.source, cmd.lineno))
            match = lambda s, name=name: s.cmd.name == "handshake" and s.cmd.args[0] == name  # noqa: E731
        else:
            name = args[0]
            self.record_faults[name] = True
            match = lambda s, name=name: s.cmd.name == "send-record" and s.cmd.args[0] == name  # noqa: E731
        self.faults.append({"kind": kind, "spec": desc, "created": step.index, "step": None, "outcome": "pending", "match": match})
        return "armed"

    def _do_wait(self, cmd, step):
        self.clock.advance(int(cmd.args[0]))

    # report
    def _report(self) -> Report:
        rep = Report()
        run = rep.section("run")
        run += [
            ("scenario", self.scn.source),
            ("seed", self.seed),
            ("steps", len(self.steps)),
            ("failed_steps", sum(s.failed for s in self.steps)),
            ("sim_time_ms", self.clock.now_ms),
        ]
        for s in self.steps:
            body = rep.section(f"step {s.index}")
            body += [("line", s.cmd.lineno), ("command", " ".join([s.cmd.name] + s.cmd.args)), ("outcome", s.outcome),
                     ("expected", s.expected), ("failed", s.failed)]
            if s.detail:
                body.append(("detail", s.detail))
        for row in self.session_rows:
            body = rep.section(f"session {row['link']}#{row['number']}")
            body += [(k, v) for k, v in row.items() if k not in ("link", "number")] + [("link", row["link"])]
        for lid in sorted(self.scn.topology.links):
            a, b = self._link_ends(lid)
            sa, sb = self.net.store(a, lid), self.net.store(b, lid)
            link_rows = [r for r in self.session_rows if r["link"] == lid]
            ok_rows = [r for r in link_rows if r["status"] == "ok"]
            body = rep.section(f"link {lid}")
            body += [
                ("sessions", len(link_rows)),
                ("sessions_ok", len(ok_rows)),
                ("qber_last", link_rows[-1]["qber"] if link_rows else float("nan")),
                ("sifted_total", sum(r["sifted"] for r in link_rows)),
                ("reconciled_total", sum(r["reconciled"] for r in ok_rows)),
                ("leaked_total", sum(r["leaked_bits"] for r in ok_rows)),
                ("final_total", sum(r["final"] for r in ok_rows)),
                ("blocks", len(sa.blocks)),
                ("stores_identical", len(sa.blocks) == len(sb.blocks)
                 and all(np.array_equal(x.bits, y.bits) for x, y in zip(sa.blocks, sb.blocks))),
            ]
            if lid in self.providers:
                body.append(("mac_source", self.providers[lid].source))
                body.append(("mac_switches", len(self.providers[lid].events)))
            for sid in sorted(sa.streams):
                st_a, st_b = sa.stream(sid), sb.stream(sid)
                sbody = rep.section(f"stream {lid}/{sid}")
                sbody += [
                    ("served_bits", sum(b - a for _, a, b in st_a.served_log)),
                    ("available_bits", st_a.available()),
                    ("cursor", f"{st_a.cursor[0]}:{st_a.cursor[1]}"),
                    ("blocks", len(st_a.blocks)),
                    ("synchronized", st_a.cursor == st_b.cursor and st_a.consumed_digest == st_b.consumed_digest),
                ]
        for i, row in enumerate(self.relay_rows):
            body = rep.section(f"relay {i}")
            body += list(row.items())
        if self.net.burned:
            body = rep.section("burned")
            body += [(f"relay{r}.{lid}.{node}", bits) for r, lid, node, bits in self.net.burned]
        for name in sorted(self.connections):
            row = self.connections[name]
            body = rep.section(f"handshake {name}")
            body += [("src", row["src"]), ("dst", row["dst"]), ("route", row["route"]), ("status", row["status"])]
            if "reason" in row:
                body.append(("reason", row["reason"]))
            conn = row.get("conn")
            if conn is not None:
                body += [
                    ("suite", conn.suite.name),
                    ("keys_match", conn.initiator.keys == conn.responder.keys),
                    ("records", row.get("records", 0)),
                    ("plaintext_bits", conn.plaintext_bits_total),
                    ("otp_bits", conn.otp_bits_total),
                    ("rekeys", conn.rekeys),
                    ("waits", conn.waits),
                ]
                body += [(f"event{i}", e) for i, e in enumerate(conn.events)]
        for i, f in enumerate(self.faults):
            body = rep.section(f"fault {i}")
            by = f["step"]
            body += [("kind", f["kind"]), ("spec", f["spec"]), ("step", "none" if by is None else by),
                     ("outcome", f["outcome"]), ("detected", by is not None and f["outcome"] != "ok")]
        return rep


class _Desync(QkdError):
    status = "desynchronized"


@dataclass
class _Step:
    index: int
    cmd: Command
    outcome: str = ""
    detail: str = ""
    expected: str = "ok"
    failed: bool = False


def _consumed(d):
    return [f"{lid}@{node}:{bits}" for (lid, node), bits in sorted(d.items())]


def run_scenario(scenario: Scenario, seed: int | None = None, transcript_dir: str | None = None) -> tuple[int, str]:
    return Runner(scenario, seed, transcript_dir).run()


def format_stats(report_text: str) -> str:
    sections = parse_report(report_text)
    run = dict(next((b for h, b in sections if h == "run"), {}))
    sessions = [(h.split(" ", 1)[1], b) for h, b in sections if h.startswith("session ")]
    handshakes = [(h.split(" ", 1)[1], b) for h, b in sections if h.startswith("handshake ")]
    relays = [b for h, b in sections if h.startswith("relay ")]
    lines = [
        f"scenario={run.get('scenario', '?')} seed={run.get('seed', '?')} steps={run.get('steps', 0)} "
        f"failed={run.get('failed_steps', 0)} sessions={len(sessions)} relays={len(relays)} handshakes={len(handshakes)}"
    ]
    if sessions:
        cols = ("session", "status", "qber", "sifted", "reconciled", "leaked", "final", "reason")
        rows = [
            (name, b.get("status", ""), b.get("qber", ""), b.get("sifted", ""), b.get("reconciled", ""),
             b.get("leaked_bits", ""), b.get("final", ""), b.get("reason", ""))
            for name, b in sessions
        ]
        lines += _table(cols, rows)
    if handshakes:
        cols = ("handshake", "route", "status", "suite", "records", "reason")
        rows = [(n, b.get("route", ""), b.get("status", ""), b.get("suite", ""), b.get("records", ""), b.get("reason", ""))
                for n, b in handshakes]
        lines += _table(cols, rows)
    return "\n".join(lines) + "\n"


def _table(cols, rows):
    widths = [max(len(str(c)), *(len(str(r[i])) for r in rows)) for i, c in enumerate(cols)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    return ["", fmt.format(*cols).rstrip(), fmt.format(*("-" * w for w in widths)).rstrip()] + [
        fmt.format(*map(str, r)).rstrip() for r in rows
    ]
