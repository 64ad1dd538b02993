"""Authenticated channels over unreliable datagrams.

The handshake keeps the server stateless until the initiator proves it can
receive traffic at its claimed address: the first hello is answered with a
self-authenticating cookie and forgotten. Only a valid cookie echo makes
the server allocate anything, verify the peer certificate, and sign the
transcript. Session traffic is sealed with per-direction keys derived from
an ephemeral agreement, so recorded traffic stays opaque even if every
long-term key leaks later.

Nothing in this module touches a socket or a clock; callers feed frames
and the current time in, and get reply frames and delivered payloads out.
The same endpoint classes run under the simulator and the UDP runtime.
"""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass, field
from random import Random

from . import ca as ca_mod
from . import crypto, wire
from .admission import AccessController, CTX_HANDSHAKE
from .ca import Certificate, CertStatus, RevocationList
from .crypto import CipherProfile, SymmetricKey


class ChannelError(Exception):
    pass


class HandshakeFailure(ChannelError):
    pass


COOKIE_POLICY_ALWAYS = "always"
COOKIE_POLICY_AUTO = "auto"
COOKIE_POLICY_OFF = "off"

MODE_NORMAL = "normal"
MODE_COOKIE_REQUIRED = "cookie_required"
MODE_SHED = "shed"

DIR_C2S = 0
DIR_S2C = 1
_DIR_LABEL = {DIR_C2S: b"c2s\x00", DIR_S2C: b"s2c\x00"}

NONCE_LEN = 16
SESSION_ID_LEN = 8
COOKIE_MAC_LEN = 16


@dataclass(frozen=True)
class ChannelConfig:
    profile: CipherProfile
    cookie_policy: str = COOKIE_POLICY_ALWAYS
    cookie_unit: int = 8  # ticks (or ms buckets) per cookie secret rotation
    h1_per_unit: int = 100  # hello rate that forces cookies under "auto"
    h2_per_unit: int = 1000  # hello rate that sheds unknown-source handshakes
    replay_window: int = 64
    pending_timeout_units: int = 2


@dataclass
class ChannelIdentity:
    subject_id: str
    certificate: Certificate
    sign_secret: bytes


@dataclass
class Delivery:
    session_id: bytes
    peer_id: str
    payload: bytes


@dataclass
class FrameResult:
    replies: list[bytes] = field(default_factory=list)
    delivered: list[Delivery] = field(default_factory=list)
    established: bytes | None = None  # session id on handshake completion


# ---------------------------------------------------------------------------
# Cookies


class CookieMinter:
    """Stateless return-routability cookies under rotating unit secrets.

    A cookie binds (address, client nonce, time unit) with a truncated MAC.
    The secret for a unit is derived from one long-lived master, so nothing
    per-client is stored; verification accepts the current and the previous
    unit to ride out rotation edges.
    """

    def __init__(self, master: bytes, unit_length: int):
        self._master = master
        self.unit_length = unit_length

    def unit(self, now: int) -> int:
        return now // self.unit_length

    def _secret(self, unit: int) -> bytes:
        return hmac.new(self._master, wire.u64(unit), hashlib.sha256).digest()

    def _mac(self, unit: int, address: str, nonce: bytes) -> bytes:
        material = address.encode() + nonce + wire.u64(unit)
        return hmac.new(self._secret(unit), material, hashlib.sha256).digest()[:COOKIE_MAC_LEN]

    def mint(self, address: str, nonce: bytes, now: int) -> bytes:
        unit = self.unit(now)
        return b"".join(
            [
                wire.encode_tlv(0x01, wire.u64(unit)),
                wire.encode_tlv(0x02, address.encode()),
                wire.encode_tlv(0x03, nonce),
                wire.encode_tlv(0x04, self._mac(unit, address, nonce)),
            ]
        )

    def verify(self, blob: bytes, address: str, nonce: bytes, now: int) -> bool:
        try:
            unit_raw, addr_raw, nonce_raw, mac = wire.decode_fields(blob, [0x01, 0x02, 0x03, 0x04])
        except wire.WireError:
            return False
        unit = wire.read_u64(unit_raw)
        if unit not in (self.unit(now), self.unit(now) - 1):
            return False
        if addr_raw.decode(errors="replace") != address or nonce_raw != nonce:
            return False
        return hmac.compare_digest(mac, self._mac(unit, address, nonce))


# ---------------------------------------------------------------------------
# Anti-replay


class ReplayWindow:
    """Sliding acceptance window over record counters: a counter is taken
    at most once, and anything older than the window is refused outright."""

    def __init__(self, size: int = 64):
        self.size = size
        self.highest = -1
        self.mask = 0  # bit i set = (highest - i) already seen

    def accept(self, counter: int) -> bool:
        if counter < 0:
            return False
        if counter > self.highest:
            shift = counter - self.highest
            self.mask = ((self.mask << shift) | 1) & ((1 << self.size) - 1)
            self.highest = counter
            return True
        offset = self.highest - counter
        if offset >= self.size:
            return False
        bit = 1 << offset
        if self.mask & bit:
            return False
        self.mask |= bit
        return True


# ---------------------------------------------------------------------------
# Transcript and keys


def _transcript_hash(
    client_cert: bytes,
    client_eph: bytes,
    client_nonce: bytes,
    server_cert: bytes,
    server_eph: bytes,
    server_nonce: bytes,
    session_id: bytes,
) -> bytes:
    return crypto.hash_bytes(
        b"".join(
            [client_cert, client_eph, client_nonce, server_cert, server_eph, server_nonce, session_id]
        )
    )


def _derive_session_keys(
    profile: CipherProfile, eph_secret, peer_eph_public: bytes, transcript: bytes, session_id: bytes
) -> tuple[SymmetricKey, SymmetricKey]:
    shared = crypto.dh(profile, eph_secret, peer_eph_public)
    master = crypto.kdf_derive(shared, salt=transcript, info=b"master", out_len=crypto.AEAD_KEY_LEN)
    c2s = crypto.kdf_derive(master, salt=b"", info=b"c2s", out_len=crypto.AEAD_KEY_LEN)
    s2c = crypto.kdf_derive(master, salt=b"", info=b"s2c", out_len=crypto.AEAD_KEY_LEN)
    return (
        SymmetricKey(c2s, b"c2s" + session_id),
        SymmetricKey(s2c, b"s2c" + session_id),
    )


def _record_nonce(direction: int, counter: int) -> bytes:
    return _DIR_LABEL[direction] + wire.u64(counter)


def _record_aad(session_id: bytes, direction: int, counter: int) -> bytes:
    return session_id + wire.u64(counter) + _DIR_LABEL[direction]


def encode_record(session_id: bytes, direction: int, counter: int, ciphertext: bytes) -> bytes:
    body = b"".join(
        [
            wire.encode_tlv(0x01, session_id),
            wire.encode_tlv(0x02, wire.u8(direction)),
            wire.encode_tlv(0x03, wire.u64(counter)),
            wire.encode_tlv(0x04, ciphertext),
        ]
    )
    return wire.encode_tlv(wire.FRAME_RECORD, body)


def decode_record(frame: bytes) -> tuple[bytes, int, int, bytes]:
    tag, body, _ = wire.decode_tlv(frame)
    if tag != wire.FRAME_RECORD:
        raise wire.WireError(f"not a record frame: {tag:#x}")
    sid, direction, counter, ct = wire.decode_fields(body, [0x01, 0x02, 0x03, 0x04])
    return sid, wire.read_u8(direction), wire.read_u64(counter), ct


class Session:
    """Established channel state for one peer and one direction pair."""

    def __init__(
        self,
        session_id: bytes,
        peer_id: str,
        peer_cert: Certificate,
        send_key: SymmetricKey,
        recv_key: SymmetricKey,
        send_dir: int,
        window: int,
    ):
        self.session_id = session_id
        self.peer_id = peer_id
        self.peer_cert = peer_cert
        self.send_key = send_key
        self.recv_key = recv_key
        self.send_dir = send_dir
        self.recv_dir = DIR_S2C if send_dir == DIR_C2S else DIR_C2S
        self.send_counter = 0
        self.replay = ReplayWindow(window)

    def seal(self, payload: bytes) -> bytes:
        counter = self.send_counter
        self.send_counter += 1
        ct = crypto.aead_seal(
            self.send_key,
            _record_nonce(self.send_dir, counter),
            payload,
            _record_aad(self.session_id, self.send_dir, counter),
        )
        return encode_record(self.session_id, self.send_dir, counter, ct)

    def open(self, direction: int, counter: int, ciphertext: bytes) -> bytes | None:
        """Payload bytes, or None for anything unacceptable (wrong direction,
        replayed counter, forged ciphertext). Window state only advances on
        successful authentication."""
        if direction != self.recv_dir:
            return None
        probe = ReplayWindow(self.replay.size)
        probe.highest, probe.mask = self.replay.highest, self.replay.mask
        if not probe.accept(counter):
            return None
        try:
            payload = crypto.aead_open(
                self.recv_key,
                _record_nonce(direction, counter),
                ciphertext,
                _record_aad(self.session_id, direction, counter),
            )
        except crypto.AuthenticationFailure:
            return None
        self.replay.highest, self.replay.mask = probe.highest, probe.mask
        return payload

    def close(self) -> None:
        self.send_key.zeroize()
        self.recv_key.zeroize()


# ---------------------------------------------------------------------------
# Hello bodies


def _encode_hello(tag: int, cert: bytes, eph: bytes, nonce: bytes, cookie: bytes | None = None) -> bytes:
    parts = [
        wire.encode_tlv(0x01, cert),
        wire.encode_tlv(0x02, eph),
        wire.encode_tlv(0x03, nonce),
    ]
    if cookie is not None:
        parts.append(wire.encode_tlv(0x04, cookie))
    return wire.encode_tlv(tag, b"".join(parts))


def _decode_hello(body: bytes, with_cookie: bool) -> tuple[bytes, bytes, bytes, bytes | None]:
    tags = [0x01, 0x02, 0x03] + ([0x04] if with_cookie else [])
    fields = wire.decode_fields(body, tags)
    cert, eph, nonce = fields[0], fields[1], fields[2]
    if len(nonce) != NONCE_LEN:
        raise wire.WireError("bad nonce length")
    return cert, eph, nonce, (fields[3] if with_cookie else None)


# ---------------------------------------------------------------------------
# Server endpoint


@dataclass
class _Pending:
    peer_id: str
    peer_cert: Certificate
    transcript: bytes
    server_sig: bytes
    session_id: bytes
    send_key: SymmetricKey
    recv_key: SymmetricKey
    server_hello: bytes  # cached for duplicate hellos on lossy links
    created_unit: int


class ServerEndpoint:
    def __init__(
        self,
        config: ChannelConfig,
        identity: ChannelIdentity,
        gate: AccessController,
        rng: Random,
    ):
        self.config = config
        self.identity = identity
        self.gate = gate
        self.rng = rng
        self.minter = CookieMinter(rng.randbytes(32), config.cookie_unit)
        self.sessions: dict[bytes, Session] = {}
        self.pending: dict[tuple[str, bytes], _Pending] = {}
        self.address_of: dict[bytes, str] = {}
        self._known_addresses: set[str] = set()
        self._hello_unit = -1
        self._hello_count = 0
        self.metrics = {
            "hello1": 0,
            "cookies_sent": 0,
            "bad_cookie": 0,
            "established": 0,
            "shed_drops": 0,
            "replay_drops": 0,
            "record_drops": 0,
            "records_in": 0,
            "malformed": 0,
        }

    # -- flood posture -------------------------------------------------------

    def _note_hello(self, now: int) -> None:
        unit = now // self.config.cookie_unit
        if unit != self._hello_unit:
            self._hello_unit = unit
            self._hello_count = 0
        self._hello_count += 1
        self.metrics["hello1"] += 1

    def mode(self, now: int) -> str:
        if self.config.cookie_policy == COOKIE_POLICY_OFF:
            return MODE_NORMAL  # deliberately naive posture
        if self._hello_unit == now // self.config.cookie_unit:
            if self._hello_count >= self.config.h2_per_unit:
                return MODE_SHED
            if self._hello_count >= self.config.h1_per_unit:
                return MODE_COOKIE_REQUIRED
        return MODE_NORMAL

    def _cookie_required(self, now: int) -> bool:
        policy = self.config.cookie_policy
        if policy == COOKIE_POLICY_OFF:
            return False
        if policy == COOKIE_POLICY_ALWAYS:
            return True
        return self.mode(now) != MODE_NORMAL

    # -- frame handling ------------------------------------------------------

    def on_frame(self, frame: bytes, address: str, now: int) -> FrameResult:
        result = FrameResult()
        try:
            tag, body, _ = wire.decode_tlv(frame)
        except wire.WireError:
            self.metrics["malformed"] += 1
            self.gate.blacklist.report(address, "malformed", now)
            return result
        try:
            if tag == wire.FRAME_HELLO1:
                self._on_hello1(body, address, now, result)
            elif tag == wire.FRAME_HELLO2:
                self._on_hello2(body, address, now, result)
            elif tag == wire.FRAME_FINISH:
                self._on_finish(body, address, now, result)
            elif tag == wire.FRAME_RECORD:
                self._on_record(body, address, now, result)
            # anything else: not ours, drop silently
        except wire.WireError:
            self.metrics["malformed"] += 1
            self.gate.blacklist.report(address, "malformed", now)
        self._expire_pending(now)
        return result

    def _shedding(self, address: str, now: int) -> bool:
        return self.mode(now) == MODE_SHED and address not in self._known_addresses

    def _on_hello1(self, body: bytes, address: str, now: int, result: FrameResult) -> None:
        self._note_hello(now)
        if self._shedding(address, now):
            self.metrics["shed_drops"] += 1
            return
        cert, eph, nonce, _ = _decode_hello(body, with_cookie=False)
        if self._cookie_required(now):
            cookie = self.minter.mint(address, nonce, now)
            body_out = wire.encode_tlv(0x01, cookie) + wire.encode_tlv(0x02, nonce)
            result.replies.append(wire.encode_tlv(wire.FRAME_COOKIE, body_out))
            self.metrics["cookies_sent"] += 1
            return
        # cookie-less postures accept the first hello as the real thing
        self._accept_hello(cert, eph, nonce, address, now, result)

    def _on_hello2(self, body: bytes, address: str, now: int, result: FrameResult) -> None:
        self._note_hello(now)
        if self._shedding(address, now):
            self.metrics["shed_drops"] += 1
            return
        cert, eph, nonce, cookie = _decode_hello(body, with_cookie=True)
        if self._cookie_required(now):
            if cookie is None or not self.minter.verify(cookie, address, nonce, now):
                self.metrics["bad_cookie"] += 1
                self.gate.blacklist.report(address, "bad_cookie", now)
                return  # silent drop
        self._accept_hello(cert, eph, nonce, address, now, result)

    def _accept_hello(
        self, cert_bytes: bytes, client_eph: bytes, nonce: bytes, address: str, now: int, result: FrameResult
    ) -> None:
        slot = (address, nonce)
        cached = self.pending.get(slot)
        if cached is not None:
            result.replies.append(cached.server_hello)
            return
        try:
            peer_cert = Certificate.decode(cert_bytes)
        except (wire.WireError, ValueError):
            self.metrics["malformed"] += 1
            self.gate.blacklist.report(address, "malformed", now)
            return
        decision = self.gate.admit(peer_cert, CTX_HANDSHAKE, now, source_key=address)
        if not decision.allowed:
            return
        profile = self.config.profile
        eph_pair = crypto.generate_keypair(profile, crypto.KeyRole.KEY_AGREEMENT, self.rng)
        server_nonce = self.rng.randbytes(NONCE_LEN)
        session_id = self.rng.randbytes(SESSION_ID_LEN)
        server_cert_bytes = self.identity.certificate.encode()
        transcript = _transcript_hash(
            cert_bytes, client_eph, nonce, server_cert_bytes, eph_pair.public, server_nonce, session_id
        )
        try:
            c2s, s2c = _derive_session_keys(profile, eph_pair.secret, client_eph, transcript, session_id)
        except crypto.CryptoError:
            self.metrics["malformed"] += 1
            self.gate.blacklist.report(address, "malformed", now)
            return
        sig = crypto.sign(self.identity.sign_secret, crypto.DOMAIN_HANDSHAKE, transcript)
        body_out = b"".join(
            [
                wire.encode_tlv(0x01, server_cert_bytes),
                wire.encode_tlv(0x02, eph_pair.public),
                wire.encode_tlv(0x03, server_nonce),
                wire.encode_tlv(0x04, session_id),
                wire.encode_tlv(0x05, sig),
            ]
        )
        server_hello = wire.encode_tlv(wire.FRAME_SERVER_HELLO, body_out)
        self.pending[slot] = _Pending(
            peer_id=peer_cert.subject_id,
            peer_cert=peer_cert,
            transcript=transcript,
            server_sig=sig,
            session_id=session_id,
            send_key=s2c,
            recv_key=c2s,
            server_hello=server_hello,
            created_unit=now // self.config.cookie_unit,
        )
        result.replies.append(server_hello)

    def _on_finish(self, body: bytes, address: str, now: int, result: FrameResult) -> None:
        sid, sig = wire.decode_fields(body, [0x01, 0x02])
        for slot, pend in list(self.pending.items()):
            if pend.session_id != sid or slot[0] != address:
                continue
            confirm = crypto.hash_bytes(pend.transcript + pend.server_sig)
            try:
                ok = crypto.verify(
                    pend.peer_cert.sign_public, crypto.DOMAIN_HANDSHAKE, confirm, sig
                )
            except crypto.MalformedSignature:
                ok = False
            if not ok:
                self.gate.blacklist.report(address, "bad_signature", now)
                return
            session = Session(
                session_id=sid,
                peer_id=pend.peer_id,
                peer_cert=pend.peer_cert,
                send_key=pend.send_key,
                recv_key=pend.recv_key,
                send_dir=DIR_S2C,
                window=self.config.replay_window,
            )
            self.sessions[sid] = session
            self.address_of[sid] = address
            self._known_addresses.add(address)
            del self.pending[slot]
            self.metrics["established"] += 1
            result.established = sid
            return
        # unknown finish: silence

    def _on_record(self, body: bytes, address: str, now: int, result: FrameResult) -> None:
        sid, direction, counter, ct = wire.decode_fields(body, [0x01, 0x02, 0x03, 0x04])
        self.metrics["records_in"] += 1
        session = self.sessions.get(sid)
        if session is None:
            self.metrics["record_drops"] += 1
            return
        payload = session.open(wire.read_u8(direction), wire.read_u64(counter), ct)
        if payload is None:
            self.metrics["replay_drops"] += 1
            return
        self.address_of[sid] = address
        result.delivered.append(Delivery(sid, session.peer_id, payload))

    def _expire_pending(self, now: int) -> None:
        unit = now // self.config.cookie_unit
        horizon = self.config.pending_timeout_units
        for slot, pend in list(self.pending.items()):
            if unit - pend.created_unit > horizon:
                pend.send_key.zeroize()
                pend.recv_key.zeroize()
                del self.pending[slot]

    def seal_to(self, session_id: bytes, payload: bytes) -> bytes:
        session = self.sessions.get(session_id)
        if session is None:
            raise ChannelError("no such session")
        return session.seal(payload)

    def close_session(self, session_id: bytes) -> None:
        session = self.sessions.pop(session_id, None)
        if session is not None:
            session.close()
        self.address_of.pop(session_id, None)


# ---------------------------------------------------------------------------
# Client endpoint


class ClientChannel:
    """Initiator side. Drives hello -> cookie -> hello -> finish and then
    seals records. Ephemeral secrets are discarded the moment session keys
    exist."""

    def __init__(
        self,
        config: ChannelConfig,
        identity: ChannelIdentity,
        root_public: bytes,
        rng: Random,
        expected_peer: str | None = None,
        crl: RevocationList | None = None,
    ):
        self.config = config
        self.identity = identity
        self.root_public = root_public
        self.rng = rng
        self.expected_peer = expected_peer
        self.crl = crl
        self.session: Session | None = None
        self._eph_secret: int | None = None
        self._eph_public: bytes | None = None
        self._nonce: bytes | None = None
        self._hello_body: bytes | None = None
        self.failure: str | None = None

    @property
    def established(self) -> bool:
        return self.session is not None

    def start(self, now: int) -> bytes:
        profile = self.config.profile
        eph = crypto.generate_keypair(profile, crypto.KeyRole.KEY_AGREEMENT, self.rng)
        self._eph_secret = int.from_bytes(eph.secret, "big")
        self._eph_public = eph.public
        self._nonce = self.rng.randbytes(NONCE_LEN)
        cert_bytes = self.identity.certificate.encode()
        self._hello_body = (
            wire.encode_tlv(0x01, cert_bytes)
            + wire.encode_tlv(0x02, eph.public)
            + wire.encode_tlv(0x03, self._nonce)
        )
        return wire.encode_tlv(wire.FRAME_HELLO1, self._hello_body)

    def on_frame(self, frame: bytes, now: int) -> FrameResult:
        result = FrameResult()
        try:
            tag, body, _ = wire.decode_tlv(frame)
            if tag == wire.FRAME_COOKIE:
                self._on_cookie(body, result)
            elif tag == wire.FRAME_SERVER_HELLO:
                self._on_server_hello(body, now, result)
            elif tag == wire.FRAME_RECORD:
                self._on_record(body, result)
        except wire.WireError:
            pass
        return result

    def _on_cookie(self, body: bytes, result: FrameResult) -> None:
        if self._hello_body is None or self.established:
            return
        cookie, echoed = wire.decode_fields(body, [0x01, 0x02])
        if echoed != self._nonce:
            return
        result.replies.append(
            wire.encode_tlv(wire.FRAME_HELLO2, self._hello_body + wire.encode_tlv(0x04, cookie))
        )

    def _on_server_hello(self, body: bytes, now: int, result: FrameResult) -> None:
        if self.established or self._eph_secret is None:
            return
        cert_bytes, server_eph, server_nonce, session_id, sig = wire.decode_fields(
            body, [0x01, 0x02, 0x03, 0x04, 0x05]
        )
        try:
            server_cert = Certificate.decode(cert_bytes)
        except (wire.WireError, ValueError):
            self.failure = "bad_server_cert"
            return
        status = ca_mod.verify_certificate(server_cert, self.root_public, self.crl, now)
        if status != CertStatus.VALID:
            self.failure = f"server_cert_{status.value}"
            return
        if self.expected_peer is not None and server_cert.subject_id != self.expected_peer:
            self.failure = "peer_mismatch"
            return
        transcript = _transcript_hash(
            self.identity.certificate.encode(),
            self._eph_public,
            self._nonce,
            cert_bytes,
            server_eph,
            server_nonce,
            session_id,
        )
        try:
            if not crypto.verify(server_cert.sign_public, crypto.DOMAIN_HANDSHAKE, transcript, sig):
                self.failure = "bad_transcript_signature"
                return
        except crypto.MalformedSignature:
            self.failure = "bad_transcript_signature"
            return
        try:
            c2s, s2c = _derive_session_keys(
                self.config.profile, self._eph_secret, server_eph, transcript, session_id
            )
        except crypto.CryptoError:
            self.failure = "bad_server_ephemeral"
            return
        confirm = crypto.hash_bytes(transcript + sig)
        finish_sig = crypto.sign(self.identity.sign_secret, crypto.DOMAIN_HANDSHAKE, confirm)
        self.session = Session(
            session_id=session_id,
            peer_id=server_cert.subject_id,
            peer_cert=server_cert,
            send_key=c2s,
            recv_key=s2c,
            send_dir=DIR_C2S,
            window=self.config.replay_window,
        )
        # forward secrecy: the ephemeral exponent dies here
        self._eph_secret = None
        self._hello_body = None
        body_out = wire.encode_tlv(0x01, session_id) + wire.encode_tlv(0x02, finish_sig)
        result.replies.append(wire.encode_tlv(wire.FRAME_FINISH, body_out))
        result.established = session_id

    def _on_record(self, body: bytes, result: FrameResult) -> None:
        if self.session is None:
            return
        sid, direction, counter, ct = wire.decode_fields(body, [0x01, 0x02, 0x03, 0x04])
        if sid != self.session.session_id:
            return
        payload = self.session.open(wire.read_u8(direction), wire.read_u64(counter), ct)
        if payload is not None:
            result.delivered.append(Delivery(sid, self.session.peer_id, payload))

    def seal(self, payload: bytes) -> bytes:
        if self.session is None:
            raise ChannelError("channel not established")
        return self.session.seal(payload)

    def close(self) -> None:
        if self.session is not None:
            self.session.close()
            self.session = None
