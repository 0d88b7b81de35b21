"""Miniature IKE/TLS-style secure channel that consumes quantum key material.

Not wire-compatible with IKE or TLS. It keeps their shape: one round trip to
propose and select a ciphersuite while swapping nonces and randoms, a prf
chain from a shared secret to session keys, then a round trip in which each
peer MACs the transcript plus the other's nonce under a pre-shared key.

Quantum material can enter in three places:

* option A (``quantum-shared-secret``): 256 quantum bits replace the
  Diffie-Hellman shared secret; everything downstream is unchanged.
* option B (``quantum-direct-keys``): the encryption and MAC keys are taken
  straight from the key stream; the prf chain is kept only for authentication.
* option C (``quantum-otp``): records are one-time-padded with fresh stream
  bits equal to their length and MAC'd with stream-sourced MAC keys.

``classical-stub`` uses a toy finite-field exchange with a 61-bit modulus. It
is NOT secure and exists so that fallback paths run end to end.
"""

import enum
import hashlib
import hmac
import logging
import struct
from dataclasses import dataclass, field

from .bits import bits_to_bytes
from .classical import ClassicalMessage, MsgType
from .clock import SimClock, seconds_to_ms
from .errors import AuthFailure, InsufficientMaterial, NegotiationFailure, ProtocolError, ProtocolTimeout, RecordError
from .rng import make_rng

log = logging.getLogger(__name__)

PRF_LEN = 32
KEY_LEN = 32
TAG_LEN = 16
NONCE_LEN = 32
RANDOM_LEN = 32
QUANTUM_SECRET_BITS = 256

# toy group for classical-stub: Mersenne prime 2^61 - 1, far too small to be secure
STUB_P = (1 << 61) - 1
STUB_G = 3


class Kex(enum.Enum):
    CLASSICAL_STUB = "classical-stub"
    QUANTUM_SHARED_SECRET = "quantum-shared-secret"
    QUANTUM_DIRECT_KEYS = "quantum-direct-keys"
    QUANTUM_OTP = "quantum-otp"


class Cipher(enum.Enum):
    BLOCK_STUB = "block-cipher-stub"
    ONE_TIME_PAD = "one-time-pad"


class MacAlg(enum.Enum):
    HMAC_SHA256 = "keyed-hash-mac"
    BLAKE2B = "keyed-hash-mac-b"


class PrfAlg(enum.Enum):
    HMAC_SHA256 = "keyed-hash-prf"


class Auth(enum.Enum):
    PSK = "pre-shared-key"


class Flavor(enum.Enum):
    IKE = "ike"
    TLS = "tls"


def _code(enum_cls, member):
    return list(enum_cls).index(member)


@dataclass(frozen=True)
class Ciphersuite:
    kex: Kex
    cipher: Cipher = Cipher.BLOCK_STUB
    mac_alg: MacAlg = MacAlg.HMAC_SHA256
    prf_alg: PrfAlg = PrfAlg.HMAC_SHA256
    auth: Auth = Auth.PSK
    flavor: Flavor = Flavor.IKE

    def __post_init__(self):
        if (self.kex is Kex.QUANTUM_OTP) != (self.cipher is Cipher.ONE_TIME_PAD):
            raise ValueError("one-time-pad cipher goes with quantum-otp key exchange and only with it")

    @property
    def quantum(self) -> bool:
        return self.kex is not Kex.CLASSICAL_STUB

    @property
    def name(self) -> str:
        return "/".join(m.value for m in (self.kex, self.cipher, self.mac_alg, self.flavor))

    _ORDER = ((Kex, "kex"), (Cipher, "cipher"), (MacAlg, "mac_alg"), (PrfAlg, "prf_alg"), (Auth, "auth"), (Flavor, "flavor"))

    def encode(self) -> bytes:
        return bytes(_code(cls, getattr(self, attr)) for cls, attr in self._ORDER)

    @classmethod
    def decode(cls, data: bytes) -> "Ciphersuite":
        if len(data) != len(cls._ORDER):
            raise ProtocolError("bad ciphersuite encoding")
        try:
            members = {attr: list(ecls)[b] for (ecls, attr), b in zip(cls._ORDER, data)}
            return cls(**members)
        except (IndexError, ValueError) as exc:
            raise ProtocolError(f"bad ciphersuite encoding: {exc}") from None


SUITE_LEN = len(Ciphersuite._ORDER)

CLASSICAL = Ciphersuite(Kex.CLASSICAL_STUB)
OPTION_A = Ciphersuite(Kex.QUANTUM_SHARED_SECRET)
OPTION_B = Ciphersuite(Kex.QUANTUM_DIRECT_KEYS)
OPTION_C = Ciphersuite(Kex.QUANTUM_OTP, Cipher.ONE_TIME_PAD)

SUITES_BY_NAME = {
    "classical": CLASSICAL,
    "A": OPTION_A,
    "B": OPTION_B,
    "C": OPTION_C,
    "classical-tls": Ciphersuite(Kex.CLASSICAL_STUB, flavor=Flavor.TLS),
    "A-tls": Ciphersuite(Kex.QUANTUM_SHARED_SECRET, flavor=Flavor.TLS),
    "classical-b2": Ciphersuite(Kex.CLASSICAL_STUB, mac_alg=MacAlg.BLAKE2B),
    "C-b2": Ciphersuite(Kex.QUANTUM_OTP, Cipher.ONE_TIME_PAD, MacAlg.BLAKE2B),
}


@dataclass(frozen=True)
class ExhaustionPolicy:
    mode: str = "fail"  # fail | block-with-timeout | fallback-classical
    timeout_s: float = 5.0
    poll_s: float = 0.1

    def __post_init__(self):
        if self.mode not in ("fail", "block-with-timeout", "fallback-classical"):
            raise ValueError(f"unknown exhaustion mode {self.mode!r}")
        if self.mode == "block-with-timeout" and self.timeout_s <= 0:
            raise ValueError("block-with-timeout needs a positive timeout")


@dataclass(frozen=True)
class RekeyPolicy:
    max_records: int | None = None
    max_bytes: int | None = None

    def due(self, records: int, nbytes: int) -> bool:
        return (self.max_records is not None and records >= self.max_records) or (
            self.max_bytes is not None and nbytes >= self.max_bytes
        )


# -- prf chain ---------------------------------------------------------------


def prf(key: bytes, data: bytes) -> bytes:
    return hmac.new(key, data, hashlib.sha256).digest()


def prf_plus(key: bytes, seed: bytes, length: int, label: bytes = b"") -> bytes:
    """Counter-mode expansion: ``T_i = prf(key, T_{i-1} | label | seed | i)``."""
    out = b""
    block = b""
    i = 1
    while len(out) < length:
        if i > 255:
            raise ValueError("prf_plus output limit exceeded")
        block = prf(key, block + label + seed + bytes([i]))
        out += block
        i += 1
    return out[:length]


def mac(alg: MacAlg, key: bytes, data: bytes) -> bytes:
    if alg is MacAlg.HMAC_SHA256:
        return hmac.new(key, data, hashlib.sha256).digest()[:TAG_LEN]
    return hashlib.blake2b(data, key=key[:64], digest_size=TAG_LEN).digest()


@dataclass(frozen=True)
class SessionKeys:
    skeyseed: bytes
    enc_key_i2r: bytes | None
    enc_key_r2i: bytes | None
    mac_key_i2r: bytes
    mac_key_r2i: bytes


def derive_keys(
    suite: Ciphersuite,
    shared_secret: bytes,
    randoms: bytes,
    nonces: bytes,
    key_len: int = KEY_LEN,
    quantum_keys: bytes = b"",
    psk: bytes = b"",
) -> SessionKeys:
    """Session keys for ``suite``.

    Classical and option A run the full chain from ``shared_secret``. Options B
    and C take their keys from ``quantum_keys`` (enc+mac for B, mac only for C)
    and still derive ``skeyseed``, keyed from ``psk``, for authentication.
    """
    if suite.kex in (Kex.CLASSICAL_STUB, Kex.QUANTUM_SHARED_SECRET):
        if not shared_secret:
            raise ValueError(f"{suite.kex.value} requires a shared secret")
        secret = shared_secret
    else:
        secret = psk
    if suite.flavor is Flavor.IKE:
        skeyseed = prf(randoms + nonces, secret)
        expand = lambda n: prf_plus(skeyseed, randoms + nonces, n)  # noqa: E731
    else:
        skeyseed = prf(secret, b"master secret" + randoms + nonces)
        expand = lambda n: prf_plus(skeyseed, randoms + nonces[NONCE_LEN:] + nonces[:NONCE_LEN], n, b"key expansion")  # noqa: E731

    if suite.kex in (Kex.CLASSICAL_STUB, Kex.QUANTUM_SHARED_SECRET):
        m = expand(4 * key_len)
        parts = [m[i * key_len:(i + 1) * key_len] for i in range(4)]
    elif suite.kex is Kex.QUANTUM_DIRECT_KEYS:
        if len(quantum_keys) < 4 * key_len:
            raise ValueError("option B needs four keys of quantum material")
        parts = [quantum_keys[i * key_len:(i + 1) * key_len] for i in range(4)]
    else:
        if len(quantum_keys) < 2 * key_len:
            raise ValueError("option C needs two MAC keys of quantum material")
        parts = [None, None, quantum_keys[:key_len], quantum_keys[key_len:2 * key_len]]
    return SessionKeys(skeyseed, *parts)


def quantum_bits_needed(suite: Ciphersuite, key_len: int = KEY_LEN) -> int:
    return {
        Kex.CLASSICAL_STUB: 0,
        Kex.QUANTUM_SHARED_SECRET: QUANTUM_SECRET_BITS,
        Kex.QUANTUM_DIRECT_KEYS: 4 * key_len * 8,
        Kex.QUANTUM_OTP: 2 * key_len * 8,
    }[suite.kex]


# -- negotiation ---------------------------------------------------------------


def filter_proposals(proposals, conn_info) -> list[Ciphersuite]:
    """Drop quantum suites when no operational QKD path exists."""
    possible = conn_info is not None and conn_info.possible
    return [s for s in proposals if possible or not s.quantum]


def negotiate(proposals, responder_prefs, conn_info) -> tuple[Ciphersuite, list[Ciphersuite]]:
    """Return ``(agreed suite, proposal list as sent on the wire)``."""
    if not proposals:
        raise ValueError("proposal list is empty")
    offered = filter_proposals(proposals, conn_info)
    allowed = filter_proposals(responder_prefs, conn_info)
    for suite in allowed:
        if suite in offered:
            return suite, offered
    raise NegotiationFailure("no mutually acceptable ciphersuite")


def _encode_init(nonce, random, suites, dh_pub):
    return nonce + random + bytes([len(suites)]) + b"".join(s.encode() for s in suites) + struct.pack(">Q", dh_pub)


def _decode_init(p):
    if len(p) < NONCE_LEN + RANDOM_LEN + 1:
        raise ProtocolError("short SA_INIT")
    nonce, random = p[:NONCE_LEN], p[NONCE_LEN:NONCE_LEN + RANDOM_LEN]
    k = p[NONCE_LEN + RANDOM_LEN]
    off = NONCE_LEN + RANDOM_LEN + 1
    if len(p) != off + k * SUITE_LEN + 8:
        raise ProtocolError("malformed SA_INIT")
    suites = [Ciphersuite.decode(p[off + i * SUITE_LEN:off + (i + 1) * SUITE_LEN]) for i in range(k)]
    (dh_pub,) = struct.unpack_from(">Q", p, off + k * SUITE_LEN)
    return nonce, random, suites, dh_pub


def _encode_resp(nonce, random, suite, dh_pub):
    return nonce + random + suite.encode() + struct.pack(">Q", dh_pub)


def _decode_resp(p):
    if len(p) != NONCE_LEN + RANDOM_LEN + SUITE_LEN + 8:
        raise ProtocolError("malformed SA_RESP")
    off = NONCE_LEN + RANDOM_LEN
    (dh_pub,) = struct.unpack_from(">Q", p, off + SUITE_LEN)
    return p[:NONCE_LEN], p[NONCE_LEN:off], Ciphersuite.decode(p[off:off + SUITE_LEN]), dh_pub


# -- peers and the wire ----------------------------------------------------------


@dataclass
class Peer:
    """One side's configuration: identity, psk, suite lists and key source."""

    name: str
    psk: bytes
    suites: list = field(default_factory=lambda: [CLASSICAL])
    key_source: object = None


class Wire:
    """In-process transport between initiator and responder.

    Records every frame as sent, and can flip one bit of a chosen frame before
    it is delivered (``tamper``) to exercise tamper detection.
    """

    def __init__(self, session_id: int):
        self.session_id = session_id
        self.transcript: list[tuple[str, bytes]] = []
        self._tamper: list[tuple[MsgType | None, int]] = []

    def tamper_next(self, msg_type: MsgType | None = None, bit: int = 0):
        self._tamper.append((msg_type, bit))

    def deliver(self, sender: str, msg_type: MsgType, payload: bytes, tag: bytes = bytes(TAG_LEN)) -> bytes:
        wire = ClassicalMessage(msg_type, self.session_id, payload, tag).encode()
        self.transcript.append((sender, wire))
        for i, (want, bit) in enumerate(self._tamper):
            if want is None or want == msg_type:
                del self._tamper[i]
                body = bytearray(wire)
                pos = (bit // 8) % len(wire)
                body[pos] ^= 0x80 >> (bit % 8)
                wire = bytes(body)
                log.info("tampered %s frame byte %d", msg_type.name, pos)
                break
        return wire

    def dump(self, path):
        with open(path, "wb") as fh:
            fh.write(b"".join(w for _, w in self.transcript))

    def payloads(self, msg_type: MsgType):
        return [ClassicalMessage.decode(w).payload for _, w in self.transcript if w[0] == msg_type]


def _unwrap(wire: bytes, msg_type: MsgType, session_id: int) -> ClassicalMessage:
    # handshake and record frames carry their integrity in the payload; the
    # frame MAC slot is reserved and must stay zero
    msg = ClassicalMessage.decode(wire)
    if msg.msg_type != msg_type:
        raise ProtocolError(f"expected {msg_type.name}, got {msg.msg_type.name}")
    if msg.session_id != session_id:
        raise ProtocolError(f"frame for session {msg.session_id}, expected {session_id}")
    if any(msg.mac):
        raise ProtocolError("nonzero reserved MAC field")
    return msg


# -- sessions --------------------------------------------------------------------


@dataclass
class EndpointSession:
    """Record-layer state at one peer."""

    role: str  # "initiator" | "responder"
    suite: Ciphersuite
    keys: SessionKeys
    nonces: bytes
    randoms: bytes
    key_source: object = None
    seq_out: int = 0
    seq_in: int = 0
    records: int = 0
    bytes_out: int = 0
    pad_bits_used: int = 0
    epoch: int = 0

    @property
    def _out(self):
        return "i2r" if self.role == "initiator" else "r2i"

    @property
    def _in(self):
        return "r2i" if self.role == "initiator" else "i2r"

    def _key(self, kind, direction):
        return getattr(self.keys, f"{kind}_key_{direction}")

    def _stub_stream(self, key, seq, n):
        return prf_plus(key, struct.pack(">Q", seq), n, b"stub-ctr")

    def _tag(self, direction, seq, ciphertext):
        header = direction.encode() + struct.pack(">QQ", self.epoch, seq)
        return mac(self.suite.mac_alg, self._key("mac", direction), header + ciphertext)

    def protect_record(self, plaintext: bytes) -> bytes:
        seq = self.seq_out
        if seq >= 1 << 64:
            raise RecordError("sequence number space exhausted; rekey")
        if self.suite.cipher is Cipher.ONE_TIME_PAD:
            pad = bits_to_bytes(self.key_source.take(8 * len(plaintext)))
            self.pad_bits_used += 8 * len(plaintext)
        else:
            pad = self._stub_stream(self._key("enc", self._out), seq, len(plaintext))
        ciphertext = bytes(a ^ b for a, b in zip(plaintext, pad))
        tag = self._tag(self._out, seq, ciphertext)
        self.seq_out += 1
        self.records += 1
        self.bytes_out += len(plaintext)
        return struct.pack(">Q", seq) + ciphertext + tag

    def unprotect_record(self, record: bytes) -> bytes:
        if len(record) < 8 + TAG_LEN:
            raise RecordError("short record")
        (seq,) = struct.unpack_from(">Q", record)
        ciphertext, tag = record[8:-TAG_LEN], record[-TAG_LEN:]
        if seq != self.seq_in:
            raise RecordError(f"unexpected sequence number {seq} (want {self.seq_in}): replay or reorder")
        if not hmac.compare_digest(tag, self._tag(self._in, seq, ciphertext)):
            raise RecordError("record MAC verification failed")
        if self.suite.cipher is Cipher.ONE_TIME_PAD:
            pad = bits_to_bytes(self.key_source.take(8 * len(ciphertext)))
            self.pad_bits_used += 8 * len(ciphertext)
        else:
            pad = self._stub_stream(self._key("enc", self._in), seq, len(ciphertext))
        self.seq_in += 1
        return bytes(a ^ b for a, b in zip(ciphertext, pad))


def protect_record(session: EndpointSession, plaintext: bytes) -> bytes:
    return session.protect_record(plaintext)


def unprotect_record(session: EndpointSession, record: bytes) -> bytes:
    return session.unprotect_record(record)


def _take_bytes(source, nbits):
    return bits_to_bytes(source.take(nbits))


def _auth_tag(psk, skeyseed, transcript, peer_nonce, role):
    auth_key = prf(psk, b"auth" + skeyseed)
    return prf(auth_key, transcript + peer_nonce + role)[:TAG_LEN]


def authenticate(psk: bytes, skeyseed: bytes, transcript: bytes, peer_nonce: bytes, role: bytes, tag: bytes):
    """Verify a peer's authentication tag over our view of the transcript."""
    if not hmac.compare_digest(tag, _auth_tag(psk, skeyseed, transcript, peer_nonce, role)):
        raise AuthFailure(f"{role.decode()} authentication failed")
    return "ok"


@dataclass
class Handshake:
    """Drives one negotiate/derive/authenticate exchange between two peers."""

    initiator: Peer
    responder: Peer
    conn_info: object
    clock: SimClock = field(default_factory=SimClock)
    seed: int = 0
    session_id: int = 1
    timeout_s: float = 5.0
    responder_delay_s: float = 0.0
    wire: Wire = None
    epoch: int = 0

    def __post_init__(self):
        if self.wire is None:
            self.wire = Wire(self.session_id)

    def _fresh(self, who, what, n):
        return make_rng(self.seed, self.session_id, self.epoch, who, what).bytes(n)

    def _dh_priv(self, who):
        return int(make_rng(self.seed, self.session_id, self.epoch, who, "dh").integers(2, STUB_P - 2))

    def run(self, rekey_of: "SecureConnection | None" = None) -> "SecureConnection":
        ini, res = self.initiator, self.responder
        init_view, resp_view = [], []

        # round trip 1: proposal, selection, nonces, randoms
        proposals = filter_proposals(ini.suites, self.conn_info)
        if not proposals:
            raise NegotiationFailure("nothing left to propose once quantum suites are filtered out")
        i_nonce, i_random = self._fresh("I", "nonce", NONCE_LEN), self._fresh("I", "random", RANDOM_LEN)
        i_priv = self._dh_priv("I")
        i_pub = pow(STUB_G, i_priv, STUB_P)
        payload = _encode_init(i_nonce, i_random, proposals, i_pub)
        sent = self.wire.deliver(ini.name, MsgType.SA_INIT, payload)
        init_view.append(ClassicalMessage(MsgType.SA_INIT, self.session_id, payload).encode())
        resp_view.append(sent)
        try:
            r_i_nonce, r_i_random, offered, r_i_pub = _decode_init(_unwrap(sent, MsgType.SA_INIT, self.session_id).payload)
        except ProtocolError as exc:
            raise NegotiationFailure(f"responder rejected proposal: {exc}") from None

        if self.responder_delay_s > self.timeout_s:
            self.clock.advance(seconds_to_ms(self.timeout_s))
            raise NegotiationFailure(f"no SA_RESP within {self.timeout_s}s")
        self.clock.advance(seconds_to_ms(self.responder_delay_s))
        suite, _ = negotiate(offered, res.suites, self.conn_info)
        r_nonce, r_random = self._fresh("R", "nonce", NONCE_LEN), self._fresh("R", "random", RANDOM_LEN)
        r_priv = self._dh_priv("R")
        r_pub = pow(STUB_G, r_priv, STUB_P)
        payload = _encode_resp(r_nonce, r_random, suite, r_pub)
        sent = self.wire.deliver(res.name, MsgType.SA_RESP, payload)
        resp_view.append(ClassicalMessage(MsgType.SA_RESP, self.session_id, payload).encode())
        init_view.append(sent)
        try:
            i_r_nonce, i_r_random, i_suite, i_r_pub = _decode_resp(_unwrap(sent, MsgType.SA_RESP, self.session_id).payload)
        except ProtocolError as exc:
            raise NegotiationFailure(f"initiator rejected selection: {exc}") from None
        if i_suite not in proposals:
            raise NegotiationFailure("responder selected a suite that was never proposed")

        # both sides derive from their own view of the exchange; check both
        # sources first so a shortfall never consumes bits at just one end
        need = quantum_bits_needed(suite)
        if need:
            for peer in (ini, res):
                if peer.key_source is None:
                    raise NegotiationFailure(f"{peer.name} has no quantum key source")
            missing = max(need - ini.key_source.available(), need - res.key_source.available())
            if missing > 0:
                raise InsufficientMaterial(missing, f"{suite.kex.value} needs {need} bits; short by {missing}")
        i_keys = self._derive(i_suite, ini, i_nonce, i_r_nonce, i_random, i_r_random, pow(i_r_pub, i_priv, STUB_P))
        r_keys = self._derive(suite, res, r_i_nonce, r_nonce, r_i_random, r_random, pow(r_i_pub, r_priv, STUB_P))

        # round trip 2: authentication over each side's transcript view
        tag_i = _auth_tag(ini.psk, i_keys.skeyseed, b"".join(init_view), i_r_nonce, b"I")
        got = self._auth_payload(ini.name, MsgType.AUTH_I, tag_i)
        authenticate(res.psk, r_keys.skeyseed, b"".join(resp_view), r_nonce, b"I", got)
        tag_r = _auth_tag(res.psk, r_keys.skeyseed, b"".join(resp_view), r_i_nonce, b"R")
        got = self._auth_payload(res.name, MsgType.AUTH_R, tag_r)
        authenticate(ini.psk, i_keys.skeyseed, b"".join(init_view), i_nonce, b"R", got)

        i_sess = EndpointSession("initiator", i_suite, i_keys, i_nonce + i_r_nonce, i_random + i_r_random, ini.key_source, epoch=self.epoch)
        r_sess = EndpointSession("responder", suite, r_keys, r_i_nonce + r_nonce, r_i_random + r_random, res.key_source, epoch=self.epoch)
        if rekey_of is not None:
            rekey_of.initiator, rekey_of.responder = i_sess, r_sess
            return rekey_of
        return SecureConnection(self, i_sess, r_sess)

    def _auth_payload(self, sender, msg_type, tag):
        try:
            return _unwrap(self.wire.deliver(sender, msg_type, tag), msg_type, self.session_id).payload
        except ProtocolError as exc:
            raise AuthFailure(f"{msg_type.name} rejected: {exc}") from None

    def _derive(self, suite, peer, i_nonce, r_nonce, i_random, r_random, dh_secret):
        randoms = i_random + r_random + suite.encode()
        nonces = i_nonce + r_nonce
        need = quantum_bits_needed(suite)
        material = b""
        if need:
            material = _take_bytes(peer.key_source, need)
        if suite.kex is Kex.CLASSICAL_STUB:
            return derive_keys(suite, dh_secret.to_bytes(8, "big"), randoms, nonces, psk=peer.psk)
        if suite.kex is Kex.QUANTUM_SHARED_SECRET:
            return derive_keys(suite, material, randoms, nonces, psk=peer.psk)
        return derive_keys(suite, b"", randoms, nonces, quantum_keys=material, psk=peer.psk)


def handshake(initiator: Peer, responder: Peer, conn_info, **kwargs) -> "SecureConnection":
    return Handshake(initiator, responder, conn_info, **kwargs).run()


@dataclass
class SecureConnection:
    """Both ends of an established session plus the policies that govern it.

    ``send`` protects at one end and unprotects at the other. Key-material
    shortfalls are handled here according to ``exhaustion``; blocking only
    polls this connection's own key sources, advancing simulated time, and
    calls ``producer(clock)`` between polls so scripted refills can land.
    """

    handshake: Handshake
    initiator: EndpointSession
    responder: EndpointSession
    exhaustion: ExhaustionPolicy = field(default_factory=ExhaustionPolicy)
    rekey_policy: RekeyPolicy = field(default_factory=RekeyPolicy)
    producer: object = None
    events: list = field(default_factory=list)
    waits: int = 0
    rekeys: int = 0
    otp_bits_total: int = 0
    plaintext_bits_total: int = 0

    @property
    def suite(self) -> Ciphersuite:
        return self.initiator.suite

    def _ends(self, direction):
        if direction == "i2r":
            return self.initiator, self.responder
        if direction == "r2i":
            return self.responder, self.initiator
        raise ValueError(f"direction must be i2r or r2i, got {direction!r}")

    def _sources(self):
        return [s for s in (self.initiator.key_source, self.responder.key_source) if s is not None]

    def _ensure_material(self, nbits, what):
        """Apply the exhaustion policy until ``nbits`` are available at both ends.

        Returns False if the connection fell back to the classical suite.
        """
        def short():
            return max(0, max(nbits - s.available() for s in self._sources()))

        missing = short()
        if missing == 0:
            return True
        mode = self.exhaustion.mode
        if mode == "fail":
            raise InsufficientMaterial(missing, f"{what}: short by {missing} bits")
        if mode == "block-with-timeout":
            waited = 0
            limit = seconds_to_ms(self.exhaustion.timeout_s)
            step = max(1, seconds_to_ms(self.exhaustion.poll_s))
            while short():
                if waited >= limit:
                    self.events.append(f"exhaustion-timeout what={what} waited_ms={waited}")
                    raise ProtocolTimeout(f"{what}: key material did not arrive within {self.exhaustion.timeout_s}s")
                self.handshake.clock.advance(step)
                waited += step
                self.waits += 1
                if self.producer is not None:
                    self.producer(self.handshake.clock)
            self.events.append(f"exhaustion-wait what={what} waited_ms={waited}")
            return True
        self.fallback(f"{what} short by {missing} bits")
        return False

    def fallback(self, reason: str):
        old = self.suite.name
        hs = self.handshake
        hs.epoch += 1
        hs.initiator = Peer(hs.initiator.name, hs.initiator.psk, [CLASSICAL], hs.initiator.key_source)
        hs.responder = Peer(hs.responder.name, hs.responder.psk, [CLASSICAL], hs.responder.key_source)
        hs.run(rekey_of=self)
        msg = f"downgrade from={old} to={self.suite.name} reason={reason}"
        self.events.append(msg)
        log.warning(msg)

    def send(self, plaintext: bytes, direction: str = "i2r") -> bytes:
        if self.suite.cipher is Cipher.ONE_TIME_PAD:
            self._ensure_material(8 * len(plaintext), "one-time pad")
        sender, receiver = self._ends(direction)
        name = self.handshake.initiator.name if sender is self.initiator else self.handshake.responder.name
        record = sender.protect_record(plaintext)
        wire = self.handshake.wire.deliver(name, MsgType.RECORD, record)
        try:
            received = receiver.unprotect_record(_unwrap(wire, MsgType.RECORD, self.handshake.session_id).payload)
        except ProtocolError as exc:
            raise RecordError(f"record rejected: {exc}") from None
        if sender.suite.cipher is Cipher.ONE_TIME_PAD:
            self.otp_bits_total += 8 * len(plaintext)
        self.plaintext_bits_total += 8 * len(plaintext)
        if self.rekey_policy.due(self.initiator.records + self.responder.records,
                                 self.initiator.bytes_out + self.responder.bytes_out):
            self.rekey()
        return received

    def rekey(self) -> SessionKeys:
        """Fresh nonces and, for quantum suites, fresh key material."""
        need = quantum_bits_needed(self.suite)
        if need and not self._ensure_material(need, "rekey"):
            return self.initiator.keys
        hs = self.handshake
        hs.epoch += 1
        suite = self.suite
        hs.initiator = Peer(hs.initiator.name, hs.initiator.psk, [suite], hs.initiator.key_source)
        hs.responder = Peer(hs.responder.name, hs.responder.psk, [suite], hs.responder.key_source)
        hs.run(rekey_of=self)
        self.rekeys += 1
        self.events.append(f"rekey epoch={hs.epoch} suite={suite.name}")
        return self.initiator.keys


def establish(initiator: Peer, responder: Peer, conn_info, *, exhaustion=None, rekey_policy=None, producer=None, **kwargs) -> SecureConnection:
    """Handshake, applying the exhaustion policy to the initial key draw too."""
    hs = Handshake(initiator, responder, conn_info, **kwargs)
    exhaustion = exhaustion or ExhaustionPolicy()
    waited = 0
    while True:
        try:
            conn = hs.run()
            break
        except InsufficientMaterial as exc:
            if exhaustion.mode == "fail":
                raise
            if exhaustion.mode == "fallback-classical":
                hs.epoch += 1
                hs.initiator = Peer(initiator.name, initiator.psk, [CLASSICAL], initiator.key_source)
                hs.responder = Peer(responder.name, responder.psk, [CLASSICAL], responder.key_source)
                conn = hs.run()
                conn.events.append(f"downgrade from=quantum to={CLASSICAL.name} reason={exc}")
                log.warning("handshake %d fell back to %s: %s", hs.session_id, CLASSICAL.name, exc)
                break
            if waited >= seconds_to_ms(exhaustion.timeout_s):
                raise ProtocolTimeout(f"initial key material did not arrive within {exhaustion.timeout_s}s") from exc
            step = max(1, seconds_to_ms(exhaustion.poll_s))
            hs.clock.advance(step)
            waited += step
            hs.epoch += 1
            if producer is not None:
                producer(hs.clock)
    conn.exhaustion = exhaustion
    conn.rekey_policy = rekey_policy or RekeyPolicy()
    conn.producer = producer
    return conn


# -- protecting the BB84 classical channel -----------------------------------------


class Bb84MacProvider:
    """MAC keys for a link's classical channel.

    Keys come from a prf chain over the link's pre-shared key until the link
    store has accumulated ``threshold`` bits; after that each session draws a
    fresh key from a dedicated maintenance stream at both ends. If that stream
    runs dry, sessions fall back to the psk chain (and switch back once
    material returns). Source changes are logged in ``events``.
    """

    STREAM = "maintenance"

    def __init__(self, link, psk: bytes, threshold: int = 4096, key_bits: int = 256):
        self.link = link
        self.psk = psk
        self.threshold = threshold
        self.key_bits = key_bits
        self.source = "psk"
        self.events: list[str] = []

    def _streams(self):
        ends = []
        for store in (self.link.alice_store, self.link.bob_store):
            if self.STREAM not in store.streams:
                store.open_stream(self.STREAM)
            ends.append(store.stream(self.STREAM))
        return ends

    def _switch(self, source, session_id, why):
        if source != self.source:
            msg = f"link={self.link.link_id} session={session_id} mac-source {self.source}->{source} ({why})"
            self.events.append(msg)
            log.info(msg)
            self.source = source

    def keys_for_session(self, session_id: int):
        if self.link.alice_store.total_bits >= self.threshold:
            a, b = self._streams()
            if a.available() >= self.key_bits and b.available() >= self.key_bits:
                self._switch("quantum", session_id, "threshold reached")
                return bits_to_bytes(a.consume(self.key_bits)), bits_to_bytes(b.consume(self.key_bits)), "quantum"
            self._switch("psk", session_id, "maintenance stream exhausted")
        key = prf(self.psk, b"bb84-mac" + self.link.link_id.encode() + struct.pack(">Q", session_id))
        return key, key, "psk"


def bootstrap_bb84_protection(link, psk: bytes, threshold: int = 4096) -> Bb84MacProvider:
    provider = Bb84MacProvider(link, psk, threshold)
    link.mac_keys = provider
    return provider

