"""Replicated state machine with consensus-ordered membership.

Ordering runs in three phases. The view leader assigns a sequence number
and broadcasts a proposal; every replica echoes a write vote carrying the
proposal it saw (so conflicting leader messages become portable evidence);
once a quorum of matching writes exists the replicas exchange accepts and
execute in sequence order.

Membership is itself replicated data: joins, leaves, and evictions are
ordered commands, and each one defines a sequence barrier. Messages at or
below the barrier are judged against the old member set, anything strictly
after it against the new one, on every replica identically. A membership
command is always followed by a key rollover before ordinary traffic
resumes, so the epoch that admitted a member never outlives its departure.

Replicas are sans-IO: frames and ticks go in, addressed frames come out.
The same class runs under the deterministic simulator and the socket
runtime.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import IntEnum
from random import Random

from . import crypto, groupkey, kvapp, wire
from .admission import (
    AccessController,
    CrlFreshness,
    CTX_CLIENT_REQUEST,
    CTX_CONSENSUS,
    CTX_DIRECTORY,
)
from .ca import Certificate, RevocationList, Role
from .crypto import CipherProfile
from .groupkey import GroupKeyManager, RekeyProposal, TgdhTree


class BftError(Exception):
    pass


class MsgType(IntEnum):
    PROPOSE = 1
    WRITE = 2
    ACCEPT = 3
    VIEW_CHANGE = 4
    NEW_VIEW = 5
    MEMBERSHIP_OP = 6
    REKEY = 7
    CLIENT_REQ = 8
    CLIENT_REPLY = 9
    CRL_UPDATE = 10
    STATE_REQ = 11
    STATE_RESP = 12


_DOMAIN_FOR = {
    MsgType.PROPOSE: crypto.DOMAIN_CONSENSUS,
    MsgType.WRITE: crypto.DOMAIN_CONSENSUS,
    MsgType.ACCEPT: crypto.DOMAIN_CONSENSUS,
    MsgType.VIEW_CHANGE: crypto.DOMAIN_CONSENSUS,
    MsgType.NEW_VIEW: crypto.DOMAIN_CONSENSUS,
    MsgType.MEMBERSHIP_OP: crypto.DOMAIN_MEMBERSHIP,
    MsgType.REKEY: crypto.DOMAIN_MEMBERSHIP,
    MsgType.CLIENT_REQ: crypto.DOMAIN_CONSENSUS,
    MsgType.CLIENT_REPLY: crypto.DOMAIN_CONSENSUS,
    MsgType.CRL_UPDATE: crypto.DOMAIN_CRL,
    MsgType.STATE_REQ: crypto.DOMAIN_CONSENSUS,
    MsgType.STATE_RESP: crypto.DOMAIN_CONSENSUS,
}


# ---------------------------------------------------------------------------
# Envelope


@dataclass
class SignedEnvelope:
    msg_type: MsgType
    sender_id: str
    view: int
    sequence: int
    epoch: int
    payload: bytes
    signature: bytes = b""
    verified: bool = field(default=False, compare=False)

    def _core(self) -> bytes:
        return b"".join(
            (
                wire.encode_tlv(0x01, wire.u8(int(self.msg_type))),
                wire.encode_tlv(0x02, self.sender_id.encode()),
                wire.encode_tlv(0x03, wire.u64(self.view)),
                wire.encode_tlv(0x04, wire.u64(self.sequence)),
                wire.encode_tlv(0x05, wire.u64(self.epoch)),
                wire.encode_tlv(0x06, self.payload),
            )
        )

    def sign(self, secret: bytes) -> "SignedEnvelope":
        self.signature = crypto.sign(secret, _DOMAIN_FOR[self.msg_type], self._core())
        return self

    def verify(self, public: bytes) -> bool:
        try:
            ok = crypto.verify(
                public, _DOMAIN_FOR[self.msg_type], self._core(), self.signature
            )
        except crypto.MalformedSignature:
            ok = False
        self.verified = ok
        return ok

    @property
    def digest(self) -> bytes:
        return hashlib.sha256(self.payload).digest()

    def encode(self) -> bytes:
        return wire.encode_tlv(
            wire.FRAME_ENVELOPE, self._core() + wire.encode_tlv(0x07, self.signature)
        )

    @classmethod
    def decode(cls, frame: bytes) -> "SignedEnvelope":
        tag, body, _ = wire.decode_tlv(frame)
        if tag != wire.FRAME_ENVELOPE:
            raise wire.WireError(f"not an envelope frame: {tag:#x}")
        fields = wire.decode_fields(body, [0x01, 0x02, 0x03, 0x04, 0x05, 0x06, 0x07])
        return cls(
            msg_type=MsgType(wire.read_u8(fields[0])),
            sender_id=fields[1].decode(),
            view=wire.read_u64(fields[2]),
            sequence=wire.read_u64(fields[3]),
            epoch=wire.read_u64(fields[4]),
            payload=fields[5],
            signature=fields[6],
        )


# ---------------------------------------------------------------------------
# Ordered commands


CMD_APP = 1
CMD_MEMBERSHIP = 2
CMD_REKEY = 3
CMD_NOOP = 4

OP_JOIN = 1
OP_LEAVE = 2
OP_EVICT = 3

REASON_VOLUNTARY = 1
REASON_REVOKED = 2
REASON_EQUIVOCATION = 3


def encode_command(kind: int, body: bytes) -> bytes:
    return wire.encode_tlv(0x01, wire.u8(kind)) + wire.encode_tlv(0x02, body)


def decode_command(payload: bytes) -> tuple[int, bytes]:
    kind, body = wire.decode_fields(payload, [0x01, 0x02])
    return wire.read_u8(kind), body


def seal_command(kind: int, body: bytes, key, seq: int, epoch: int, rng: Random) -> bytes:
    """The command kind stays readable so replicas can enforce ordering rules
    on sealed traffic; only the body is hidden. The nonce rides inside the
    blob so a view change can re-propose the identical bytes."""
    nonce = rng.randbytes(crypto.AEAD_NONCE_LEN)
    aad = wire.u64(seq) + wire.u64(epoch)
    ct = crypto.aead_seal(key, nonce, body, aad)
    blob = wire.encode_tlv(0x01, nonce) + wire.encode_tlv(0x02, ct)
    return encode_command(kind, blob)


def unseal_command_body(blob: bytes, key, seq: int, epoch: int) -> bytes:
    nonce, ct = wire.decode_fields(blob, [0x01, 0x02])
    aad = wire.u64(seq) + wire.u64(epoch)
    return crypto.aead_open(key, nonce, ct, aad)


def encode_membership_op(
    op: int,
    member_id: str,
    cert_bytes: bytes = b"",
    reason: int = 0,
    evidence: bytes = b"",
    blinded_leaf: bytes = b"",
) -> bytes:
    return b"".join(
        (
            wire.encode_tlv(0x01, wire.u8(op)),
            wire.encode_tlv(0x02, member_id.encode()),
            wire.encode_tlv(0x03, cert_bytes),
            wire.encode_tlv(0x04, wire.u8(reason)),
            wire.encode_tlv(0x05, evidence),
            wire.encode_tlv(0x06, blinded_leaf),
        )
    )


def decode_membership_op(body: bytes) -> tuple[int, str, bytes, int, bytes, bytes]:
    f = wire.decode_fields(body, [0x01, 0x02, 0x03, 0x04, 0x05, 0x06])
    return wire.read_u8(f[0]), f[1].decode(), f[2], wire.read_u8(f[3]), f[4], f[5]


def encode_evidence(frame_a: bytes, frame_b: bytes) -> bytes:
    return wire.encode_tlv(0x01, frame_a) + wire.encode_tlv(0x02, frame_b)


def decode_evidence(blob: bytes) -> tuple[bytes, bytes]:
    a, b = wire.decode_fields(blob, [0x01, 0x02])
    return a, b


def check_evidence(blob: bytes, sign_public: bytes) -> tuple[bool, str]:
    """Two envelopes from the same signer, same slot, different payload
    digests. Verifiable offline by anyone who holds the signer's public key;
    no trust in the reporter is needed."""
    try:
        frame_a, frame_b = decode_evidence(blob)
        env_a = SignedEnvelope.decode(frame_a)
        env_b = SignedEnvelope.decode(frame_b)
    except (wire.WireError, ValueError):
        return False, "undecodable evidence"
    slot_a = (env_a.sender_id, env_a.msg_type, env_a.view, env_a.sequence)
    slot_b = (env_b.sender_id, env_b.msg_type, env_b.view, env_b.sequence)
    if slot_a != slot_b:
        return False, "envelopes are for different slots"
    if env_a.digest == env_b.digest:
        return False, "payloads do not conflict"
    if not env_a.verify(sign_public) or not env_b.verify(sign_public):
        return False, "signature check failed"
    return True, "ok"


# Phase payloads


def encode_write_payload(digest: bytes, propose_frame: bytes) -> bytes:
    return wire.encode_tlv(0x01, digest) + wire.encode_tlv(0x02, propose_frame)


def decode_write_payload(payload: bytes) -> tuple[bytes, bytes]:
    digest, frame = wire.decode_fields(payload, [0x01, 0x02])
    return digest, frame


def encode_accept_payload(digest: bytes) -> bytes:
    return wire.encode_tlv(0x01, digest)


def decode_accept_payload(payload: bytes) -> bytes:
    (digest,) = wire.decode_fields(payload, [0x01])
    return digest


def encode_write_certificate(
    seq: int, view: int, digest: bytes, write_frames: list[bytes]
) -> bytes:
    parts = [
        wire.encode_tlv(0x01, wire.u64(seq)),
        wire.encode_tlv(0x02, wire.u64(view)),
        wire.encode_tlv(0x03, digest),
    ]
    parts.extend(wire.encode_tlv(0x04, f) for f in write_frames)
    return b"".join(parts)


def decode_write_certificate(blob: bytes) -> tuple[int, int, bytes, list[bytes]]:
    seq = view = None
    digest = b""
    frames = []
    for tag, value in wire.decode_all(blob):
        if tag == 0x01:
            seq = wire.read_u64(value)
        elif tag == 0x02:
            view = wire.read_u64(value)
        elif tag == 0x03:
            digest = value
        elif tag == 0x04:
            frames.append(value)
    if seq is None or view is None:
        raise wire.WireError("incomplete write certificate")
    return seq, view, digest, frames


def encode_view_change_payload(last_executed: int, certificates: list[bytes]) -> bytes:
    parts = [wire.encode_tlv(0x01, wire.u64(last_executed))]
    parts.extend(wire.encode_tlv(0x02, c) for c in certificates)
    return b"".join(parts)


def decode_view_change_payload(payload: bytes) -> tuple[int, list[bytes]]:
    last_executed = None
    certs = []
    for tag, value in wire.decode_all(payload):
        if tag == 0x01:
            last_executed = wire.read_u64(value)
        elif tag == 0x02:
            certs.append(value)
    if last_executed is None:
        raise wire.WireError("view change without progress marker")
    return last_executed, certs


def encode_new_view_payload(vc_frames: list[bytes], propose_frames: list[bytes]) -> bytes:
    parts = [wire.encode_tlv(0x01, f) for f in vc_frames]
    parts.extend(wire.encode_tlv(0x02, f) for f in propose_frames)
    return b"".join(parts)


def decode_new_view_payload(payload: bytes) -> tuple[list[bytes], list[bytes]]:
    vcs, proposes = [], []
    for tag, value in wire.decode_all(payload):
        if tag == 0x01:
            vcs.append(value)
        elif tag == 0x02:
            proposes.append(value)
    return vcs, proposes


def encode_forwarded_request(client_frame: bytes, client_cert: bytes) -> bytes:
    return wire.encode_tlv(0x01, client_frame) + wire.encode_tlv(0x02, client_cert)


def decode_forwarded_request(payload: bytes) -> tuple[bytes, bytes]:
    frame, cert = wire.decode_fields(payload, [0x01, 0x02])
    return frame, cert


def encode_client_reply(client_id: str, counter: int, result: bytes, seq: int) -> bytes:
    return b"".join(
        (
            wire.encode_tlv(0x01, client_id.encode()),
            wire.encode_tlv(0x02, wire.u64(counter)),
            wire.encode_tlv(0x03, result),
            wire.encode_tlv(0x04, wire.u64(seq)),
        )
    )


def decode_client_reply(payload: bytes) -> tuple[str, int, bytes, int]:
    f = wire.decode_fields(payload, [0x01, 0x02, 0x03, 0x04])
    return f[0].decode(), wire.read_u64(f[1]), f[2], wire.read_u64(f[3])


# Rekey coordination messages (to and from the leader, outside the ordered log)

REKEY_CONTRIB = 1
REKEY_MERGE = 2
REKEY_SPONSOR = 3


def encode_rekey_msg(
    kind: int, delta: list[tuple[int, bytes]], proposal_bytes: bytes = b""
) -> bytes:
    parts = [wire.encode_tlv(0x01, wire.u8(kind))]
    for index, blinded in delta:
        parts.append(wire.encode_tlv(0x02, wire.u32(index)))
        parts.append(wire.encode_tlv(0x03, blinded))
    parts.append(wire.encode_tlv(0x04, proposal_bytes))
    return b"".join(parts)


def decode_rekey_msg(payload: bytes) -> tuple[int, list[tuple[int, bytes]], bytes]:
    kind = None
    delta: list[tuple[int, bytes]] = []
    pending_index: int | None = None
    proposal = b""
    for tag, value in wire.decode_all(payload):
        if tag == 0x01:
            kind = wire.read_u8(value)
        elif tag == 0x02:
            pending_index = wire.read_u32(value)
        elif tag == 0x03:
            if pending_index is None:
                raise wire.WireError("delta value without index")
            delta.append((pending_index, value))
            pending_index = None
        elif tag == 0x04:
            proposal = value
    if kind is None:
        raise wire.WireError("rekey message without kind")
    return kind, delta, proposal


def _encode_pairs(pairs: list[tuple[int, bytes]]) -> bytes:
    return b"".join(
        wire.encode_tlv(0x01, wire.u32(index)) + wire.encode_tlv(0x02, value)
        for index, value in pairs
    )


def _decode_pairs(blob: bytes) -> list[tuple[int, bytes]]:
    pairs = []
    pending: int | None = None
    for tag, value in wire.decode_all(blob):
        if tag == 0x01:
            pending = wire.read_u32(value)
        elif tag == 0x02:
            if pending is None:
                raise wire.WireError("pair value without index")
            pairs.append((pending, value))
            pending = None
    return pairs


# ---------------------------------------------------------------------------
# Membership eras


@dataclass(frozen=True)
class Member:
    member_id: str
    certificate: Certificate

    @property
    def sign_public(self) -> bytes:
        return self.certificate.sign_public

    @property
    def ka_public(self) -> bytes:
        return self.certificate.ka_public


@dataclass
class Era:
    barrier: int  # governs sequences strictly greater than this
    members: dict[str, Member]

    def fault_budget(self) -> int:
        return (len(self.members) - 1) // 3

    def quorum(self) -> int:
        return len(self.members) - self.fault_budget()


class MembershipLog:
    """Consensus-ordered membership history, indexed by sequence number."""

    def __init__(self, genesis: list[Certificate]):
        members = {c.subject_id: Member(c.subject_id, c) for c in genesis}
        self.eras: list[Era] = [Era(barrier=0, members=members)]
        # every identity ever admitted, kept for judging old-era traffic
        self.directory: dict[str, Member] = dict(members)

    def era_for(self, seq: int) -> Era:
        chosen = self.eras[0]
        for era in self.eras:
            if era.barrier < seq:
                chosen = era
        return chosen

    def current(self) -> Era:
        return self.eras[-1]

    def apply_join(self, seq: int, member: Member) -> None:
        members = dict(self.current().members)
        members[member.member_id] = member
        self.eras.append(Era(barrier=seq, members=members))
        self.directory[member.member_id] = member

    def apply_removal(self, seq: int, member_id: str) -> None:
        members = dict(self.current().members)
        members.pop(member_id, None)
        self.eras.append(Era(barrier=seq, members=members))

    def encode(self) -> bytes:
        parts = []
        for era in self.eras:
            blob = [wire.encode_tlv(0x01, wire.u64(era.barrier))]
            for mid in sorted(era.members):
                blob.append(wire.encode_tlv(0x02, era.members[mid].certificate.encode()))
            parts.append(wire.encode_tlv(0x10, b"".join(blob)))
        return b"".join(parts)

    @classmethod
    def decode(cls, data: bytes) -> "MembershipLog":
        log = cls.__new__(cls)
        log.eras = []
        log.directory = {}
        for tag, blob in wire.decode_all(data):
            if tag != 0x10:
                continue
            barrier = None
            members = {}
            for t, v in wire.decode_all(blob):
                if t == 0x01:
                    barrier = wire.read_u64(v)
                elif t == 0x02:
                    cert = Certificate.decode(v)
                    members[cert.subject_id] = Member(cert.subject_id, cert)
            if barrier is None:
                raise wire.WireError("era without barrier")
            log.eras.append(Era(barrier=barrier, members=members))
            log.directory.update(members)
        if not log.eras:
            raise wire.WireError("empty membership log")
        return log


# ---------------------------------------------------------------------------
# Replica


PHASE_IDLE = 0
PHASE_PROPOSED = 1
PHASE_WRITTEN = 2
PHASE_ACCEPTED = 3
PHASE_EXECUTED = 4


@dataclass
class Instance:
    seq: int
    view: int = 0
    digest: bytes = b""
    propose_frame: bytes = b""
    propose_env: SignedEnvelope | None = None
    writes: dict[str, bytes] = field(default_factory=dict)  # sender -> write frame
    accepts: dict[str, bytes] = field(default_factory=dict)  # sender -> digest
    # highest view seen per sender, so a reordered stale frame can never
    # replace a newer vote in the two maps above
    writes_view: dict[str, int] = field(default_factory=dict)
    accepts_view: dict[str, int] = field(default_factory=dict)
    phase: int = PHASE_IDLE
    # votes are per (sequence, view): a re-proposal under a later view
    # needs a fresh write and a fresh accept from every participant
    write_view: int = -1
    accept_view: int = -1


@dataclass
class Outbound:
    to: str  # member or client id; "*" broadcasts
    frame: bytes
    client: bool = False


@dataclass
class ReplicaConfig:
    my_id: str
    profile: CipherProfile
    rekey_mode: str = groupkey.MODE_LEADER_SEALED
    encrypt_consensus: bool = True
    base_timeout: int = 10
    min_fault_budget: int = 1
    max_inflight: int = 8
    state_gap_threshold: int = 5
    rekey_policy: groupkey.RekeyPolicy | None = None


@dataclass
class Disposition:
    now: int
    sender: str
    view: int
    seq: int
    msg_type: str
    verdict: str  # "ok" | "drop"
    reason: str

    def line(self) -> str:
        return (
            f"t={self.now} from={self.sender} view={self.view} seq={self.seq} "
            f"type={self.msg_type} verdict={self.verdict} reason={self.reason}"
        )


_SNAP_LABEL = b"snap"
_FWD_LABEL = b"fwd"


class Replica:
    def __init__(
        self,
        config: ReplicaConfig,
        certificate: Certificate,
        sign_secret: bytes,
        ka_secret: bytes,
        genesis: list[Certificate],
        root_public: bytes,
        gate: AccessController,
        rng: Random,
    ):
        self.config = config
        self.my_id = config.my_id
        self.certificate = certificate
        self.sign_secret = sign_secret
        self.root_public = root_public
        self.gate = gate
        self.rng = rng

        self.membership = MembershipLog(genesis)
        self.view = 0
        self.last_executed = 0
        self.instances: dict[int, Instance] = {}
        self.app = kvapp.KvApp()
        self.client_dedup: dict[str, tuple[int, bytes, int]] = {}

        self.gkm = GroupKeyManager(
            config.profile,
            self.my_id,
            ka_secret,
            mode=config.rekey_mode,
            policy=config.rekey_policy,
        )
        for mid in sorted(self.membership.current().members):
            member = self.membership.current().members[mid]
            self.gkm.member_joined(mid, member.ka_public, member.ka_public)
        if config.rekey_mode == groupkey.MODE_TGDH:
            self.gkm.use_longterm_leaf()

        # nothing but the first key rollover (or filler) may be ordered
        # until epoch 1 exists
        self.rekey_due: str | None = "genesis"
        self.expected_sponsor: str | None = None
        self.pending_sponsor_proposal = b""
        self.my_sponsorship_pending = False
        self.genesis_rekey_sent = False

        self.propose_queue: list[bytes] = []  # plaintext command payloads
        self.next_propose_seq = 1

        self.progress_deadline: int | None = None
        self.vc_target: int | None = None
        self.vc_deadline: int | None = None
        self.backoff = 0
        self.vc_votes: dict[int, dict[str, bytes]] = {}

        self.seen_slots: dict[tuple, tuple[bytes, bytes]] = {}
        self.evidence_log: list[tuple[str, bytes]] = []
        self.dispositions: list[Disposition] = []
        # (sequence, command digest) per locally executed slot, for external
        # agreement checks; catch-up via snapshot leaves gaps by design
        self.execution_log: list[tuple[int, bytes]] = []
        self.forwarded: dict[tuple[str, int], tuple[int, bytes]] = {}
        self.halted = False
        self.metrics = {
            "executed": 0,
            "proposals_sent": 0,
            "view_changes": 0,
            "rekeys_applied": 0,
            "evidence_found": 0,
            "evictions_blocked": 0,
            "rekey_msgs": 0,
            "state_snapshots_served": 0,
            "state_adopted": 0,
        }

        self._pending_outbound: list[Outbound] = []
        self._deferred: dict[int, tuple[bytes, str]] = {}  # seq -> (frame, source)
        self._defer_deadline: int | None = None
        self._state_votes: dict[tuple, set[str]] | None = None
        self._latest_rekey = b""
        self._last_new_view = b""
        self._nv_seen = -1
        self._last_crl_seq = -1
        self._genesis_kicked = False
        self._join_pending = False
        self._join_next_poll = 0
        self._join_leaf_ready = False

    # -- identity helpers

    def era_now(self) -> Era:
        return self.membership.era_for(self.last_executed + 1)

    def leader_of(self, view: int) -> str:
        ids = sorted(self.era_now().members)
        return ids[view % len(ids)]

    def is_leader(self) -> bool:
        return self.leader_of(self.view) == self.my_id

    def _make(
        self,
        msg_type: MsgType,
        payload: bytes,
        view: int | None = None,
        seq: int = 0,
        epoch: int = 0,
    ) -> SignedEnvelope:
        return SignedEnvelope(
            msg_type=msg_type,
            sender_id=self.my_id,
            view=self.view if view is None else view,
            sequence=seq,
            epoch=epoch,
            payload=payload,
        ).sign(self.sign_secret)

    def _note(
        self,
        now: int,
        env: SignedEnvelope | None,
        verdict: str,
        reason: str,
        sender: str = "?",
        msg_type: str = "?",
    ) -> None:
        if env is not None:
            sender, msg_type = env.sender_id, env.msg_type.name
            view, seq = env.view, env.sequence
        else:
            view = seq = 0
        self.dispositions.append(
            Disposition(now, sender, view, seq, msg_type, verdict, reason)
        )

    def _group_key_by_epoch(self, epoch: int):
        for entry in (self.gkm.epoch, self.gkm.previous):
            if entry is not None and entry.epoch == epoch and not entry.key.zeroized:
                return entry.key
        return None

    # -- public entry points

    def on_frame(self, frame: bytes, source: str, now: int) -> list[Outbound]:
        """Envelope from another replica (or a trust-center push)."""
        if self.halted:
            return []
        try:
            env = SignedEnvelope.decode(frame)
        except (wire.WireError, ValueError):
            self.gate.blacklist.report(source, "malformed", now)
            self._note(now, None, "drop", "malformed", sender=source)
            return []
        out = self._dispatch(env, frame, source, now)
        return self._finish(out, now)

    def ingest_crl(self, crl_bytes: bytes, now: int) -> list[Outbound]:
        """Feed a revocation list obtained out of band (a directory push or a
        startup fetch). The list authenticates itself, so no envelope is
        required around it."""
        if self.halted:
            return []
        env = self._make(MsgType.CRL_UPDATE, crl_bytes)
        out = self._on_crl_update(env, now)
        return self._finish(out, now)

    def on_client_payload(
        self, payload: bytes, client_cert: Certificate, now: int
    ) -> list[Outbound]:
        """Client request delivered over an established channel."""
        if self.halted:
            return []
        try:
            env = SignedEnvelope.decode(payload)
        except (wire.WireError, ValueError):
            self.gate.blacklist.report(client_cert.subject_id, "malformed", now)
            return []
        if env.msg_type != MsgType.CLIENT_REQ or env.sender_id != client_cert.subject_id:
            self._note(now, env, "drop", "sender_mismatch")
            return []
        decision = self.gate.admit(
            client_cert, CTX_CLIENT_REQUEST, now, source_key=env.sender_id
        )
        if not decision.allowed:
            self._note(now, env, "drop", f"admission:{decision.reason}")
            return []
        if not env.verify(client_cert.sign_public):
            self.gate.blacklist.report(env.sender_id, "bad_signature", now)
            self._note(now, env, "drop", "bad_signature")
            return []
        self._note(now, env, "ok", "client_request")
        out = self._handle_client_request(env, payload, client_cert, now)
        return self._finish(out, now)

    def tick(self, now: int) -> list[Outbound]:
        if self.halted:
            return []
        out: list[Outbound] = []
        if self.rekey_due == "genesis" and not self._genesis_kicked:
            out.extend(self._genesis_kickoff(now))
        if self._join_pending and now >= self._join_next_poll:
            self._join_next_poll = now + self.config.base_timeout
            if (
                self.my_id in self.membership.current().members
                and self.gkm.epoch is not None
            ):
                self._join_pending = False
            else:
                out.extend(self._join_request_outbound())
                out.extend(self.request_state(now))
        if self.progress_deadline is not None and now >= self.progress_deadline:
            if self._work_outstanding():
                out.extend(self._start_view_change(self.view + 1, now))
            else:
                self.progress_deadline = None
        if (
            self.vc_deadline is not None
            and now >= self.vc_deadline
            and self.vc_target is not None
            and self.vc_target > self.view
        ):
            out.extend(self._start_view_change(self.vc_target + 1, now))
        for key, (deadline, pair) in list(self.forwarded.items()):
            if now < deadline:
                continue
            # the leader sat on it (or changed); push the request again
            self.forwarded[key] = (now + self.config.base_timeout, pair)
            if self.is_leader():
                self._queue_command(encode_command(CMD_APP, pair))
            else:
                out.extend(self._forward_to_leader(pair, None, now))
            self._arm_progress(now)
        if (
            self._deferred
            and self._defer_deadline is not None
            and now >= self._defer_deadline
            and self._state_votes is None
        ):
            # proposals keep failing validation; we are probably behind
            self._defer_deadline = now + self.config.base_timeout
            out.extend(self.request_state(now))
        if self.is_leader():
            if (
                self.rekey_due is None
                and self.gkm.epoch is not None
                and self.gkm.rekey_policy_tick(now)
            ):
                self.rekey_due = "interval"
            out.extend(self._drain(now))
            out.extend(self._maybe_start_rekey(now))
        return self._finish(out, now)

    def _finish(self, out: list[Outbound], now: int) -> list[Outbound]:
        out.extend(self._take_pending())
        out.extend(self._flush_deferred(now))
        out.extend(self._take_pending())
        return out

    def _take_pending(self) -> list[Outbound]:
        pending, self._pending_outbound = self._pending_outbound, []
        return pending

    def _flush_deferred(self, now: int) -> list[Outbound]:
        """Retry proposals that failed timing-dependent validation; executing
        the predecessor command or adopting a view usually unblocks them."""
        out: list[Outbound] = []
        for _ in range(8):
            if not self._deferred:
                break
            before = (self.last_executed, self.view, len(self._deferred))
            for seq in sorted(self._deferred):
                entry = self._deferred.pop(seq, None)
                if entry is None or seq <= self.last_executed:
                    continue
                frame, source = entry
                try:
                    env = SignedEnvelope.decode(frame)
                except (wire.WireError, ValueError):
                    continue
                out.extend(self._dispatch(env, frame, source, now))
            if (self.last_executed, self.view, len(self._deferred)) == before:
                break
        if not self._deferred:
            self._defer_deadline = None
        return out

    # -- validation core

    _GOVERNED = {MsgType.PROPOSE, MsgType.WRITE, MsgType.ACCEPT}

    def _dispatch(
        self, env: SignedEnvelope, frame: bytes, source: str, now: int
    ) -> list[Outbound]:
        if env.msg_type == MsgType.CRL_UPDATE:
            # the list inside carries its own issuer signature
            return self._on_crl_update(env, now)
        if env.msg_type == MsgType.STATE_RESP:
            # a cold joiner may not know any current member yet, so the
            # response authenticates itself with the responder's certificate
            return self._on_state_resp(env, frame, now)

        member = self.membership.directory.get(env.sender_id)
        if member is None:
            if env.msg_type == MsgType.MEMBERSHIP_OP:
                return self._on_membership_op_from_outsider(env, now)
            self._note(now, env, "drop", "unknown_sender")
            return []

        decision = self.gate.admit(member.certificate, CTX_CONSENSUS, now, source_key=source)
        if not decision.allowed:
            self._note(now, env, "drop", f"admission:{decision.reason}")
            return []
        if not env.verify(member.sign_public):
            self.gate.blacklist.report(source, "bad_signature", now)
            self._note(now, env, "drop", "bad_signature")
            return []

        out: list[Outbound] = []
        if env.msg_type in self._GOVERNED:
            era = self.membership.era_for(env.sequence)
            if env.sender_id not in era.members:
                self._note(now, env, "drop", "outside_membership_barrier")
                return []
            self._track_slot(env, frame, now)
            if (
                env.sequence > self.last_executed + self.config.state_gap_threshold
                and self._state_votes is None
                and not self._join_pending
            ):
                out.extend(self.request_state(now))
        elif env.msg_type in (MsgType.VIEW_CHANGE, MsgType.NEW_VIEW):
            if env.sender_id not in self.era_now().members:
                self._note(now, env, "drop", "outside_membership_barrier")
                return []

        self._note(now, env, "ok", env.msg_type.name.lower())
        handler = {
            MsgType.PROPOSE: self._on_propose,
            MsgType.WRITE: self._on_write,
            MsgType.ACCEPT: self._on_accept,
            MsgType.VIEW_CHANGE: self._on_view_change,
            MsgType.NEW_VIEW: self._on_new_view,
            MsgType.MEMBERSHIP_OP: self._on_membership_op,
            MsgType.REKEY: self._on_rekey_msg,
            MsgType.CLIENT_REQ: self._on_forwarded_request,
            MsgType.STATE_REQ: self._on_state_req,
            MsgType.CLIENT_REPLY: lambda e, f, n: [],
        }[env.msg_type]
        out.extend(handler(env, frame, now))
        return out

    def _track_slot(self, env: SignedEnvelope, frame: bytes, now: int) -> None:
        """Remember one frame per (sender, type, view, seq). A second frame
        with a different digest is equivocation, and the two frames together
        are self-contained proof."""
        slot = (env.sender_id, int(env.msg_type), env.view, env.sequence)
        seen = self.seen_slots.get(slot)
        if seen is None:
            self.seen_slots[slot] = (env.digest, frame)
            return
        digest, old_frame = seen
        if digest != env.digest:
            self._found_equivocation(env.sender_id, old_frame, frame, now)

    def _found_equivocation(
        self, culprit: str, frame_a: bytes, frame_b: bytes, now: int
    ) -> None:
        if any(c == culprit for c, _ in self.evidence_log):
            return
        evidence = encode_evidence(frame_a, frame_b)
        self.evidence_log.append((culprit, evidence))
        self.metrics["evidence_found"] += 1
        self.gate.blacklist.report(culprit, "equivocation", now)
        member = self.membership.directory.get(culprit)
        if member is not None:
            self.gate.blacklist.report(
                f"serial:{member.certificate.serial.hex()}", "equivocation", now
            )
        self._pending_outbound.extend(self._eviction_outbounds(now))

    def _eviction_outbounds(self, now: int) -> list[Outbound]:
        """Push recorded evidence toward an ordered eviction, respecting the
        minimum group size the fault budget needs."""
        out: list[Outbound] = []
        era = self.era_now()
        for culprit, evidence in self.evidence_log:
            if culprit not in era.members:
                continue
            if len(era.members) - 1 < 3 * self.config.min_fault_budget + 1:
                self.metrics["evictions_blocked"] += 1
                self._note(
                    now, None, "drop", "eviction_blocked_quorum_bound",
                    sender=culprit, msg_type="EVICTION",
                )
                continue
            op = encode_membership_op(
                OP_EVICT, culprit, reason=REASON_EQUIVOCATION, evidence=evidence
            )
            if self.is_leader():
                if not self._queued_or_inflight_for(culprit):
                    self._queue_command(encode_command(CMD_MEMBERSHIP, op), front=True)
                    out.extend(self._drain(now))
            else:
                env = self._make(MsgType.MEMBERSHIP_OP, op)
                out.append(Outbound(to=self.leader_of(self.view), frame=env.encode()))
                self._arm_progress(now)
        return out

    def _queued_or_inflight_for(self, member_id: str) -> bool:
        needle = member_id.encode()
        for payload in self.propose_queue:
            kind, body = decode_command(payload)
            if kind == CMD_MEMBERSHIP and needle in body:
                return True
        return self._membership_in_flight()

    # -- client requests

    def _handle_client_request(
        self, env: SignedEnvelope, payload: bytes, client_cert: Certificate, now: int
    ) -> list[Outbound]:
        cached = self.client_dedup.get(env.sender_id)
        if cached is not None and env.sequence < cached[0]:
            return []
        if cached is not None and env.sequence == cached[0]:
            counter, result, seq = cached
            reply = self._make(
                MsgType.CLIENT_REPLY,
                encode_client_reply(env.sender_id, counter, result, seq),
            )
            return [Outbound(to=env.sender_id, frame=reply.encode(), client=True)]
        pair = encode_forwarded_request(payload, client_cert.encode())
        if self.is_leader():
            self._queue_command(encode_command(CMD_APP, pair))
            return self._drain(now)
        # keep the plaintext pair so the request can be re-forwarded to
        # whichever leader is current when the timer fires
        self.forwarded[(env.sender_id, env.sequence)] = (
            now + self.config.base_timeout,
            pair,
        )
        self._arm_progress(now)
        return self._forward_to_leader(pair, env, now)

    def _forward_to_leader(
        self, pair: bytes, client_env: SignedEnvelope | None, now: int
    ) -> list[Outbound]:
        fwd_epoch = 0
        body = pair
        if self.config.encrypt_consensus:
            entry = self.gkm.epoch
            if entry is None:
                if client_env is not None:
                    self._note(now, client_env, "drop", "no_epoch_for_forwarding")
                return []
            nonce = self.rng.randbytes(crypto.AEAD_NONCE_LEN)
            ct = crypto.aead_seal(
                entry.key, nonce, pair, _FWD_LABEL + wire.u64(entry.epoch)
            )
            body = wire.encode_tlv(0x01, nonce) + wire.encode_tlv(0x02, ct)
            fwd_epoch = entry.epoch
        forward = self._make(MsgType.CLIENT_REQ, body, epoch=fwd_epoch)
        return [Outbound(to=self.leader_of(self.view), frame=forward.encode())]

    def _on_forwarded_request(
        self, env: SignedEnvelope, frame: bytes, now: int
    ) -> list[Outbound]:
        payload = env.payload
        if env.epoch != 0:
            key = self._group_key_by_epoch(env.epoch)
            if key is None:
                self._note(now, env, "drop", "unknown_forward_epoch")
                return []
            try:
                nonce, ct = wire.decode_fields(payload, [0x01, 0x02])
                payload = crypto.aead_open(key, nonce, ct, _FWD_LABEL + wire.u64(env.epoch))
            except (wire.WireError, crypto.AuthenticationFailure):
                self._note(now, env, "drop", "forward_unseal_failed")
                return []
        elif self.config.encrypt_consensus and self.gkm.epoch is not None:
            self._note(now, env, "drop", "plaintext_forward_refused")
            return []
        try:
            client_frame, cert_bytes = decode_forwarded_request(payload)
            client_env = SignedEnvelope.decode(client_frame)
            client_cert = Certificate.decode(cert_bytes)
        except (wire.WireError, ValueError):
            self.gate.blacklist.report(env.sender_id, "malformed", now)
            return []
        if (
            client_env.msg_type != MsgType.CLIENT_REQ
            or client_env.sender_id != client_cert.subject_id
        ):
            self._note(now, client_env, "drop", "sender_mismatch")
            return []
        decision = self.gate.admit(
            client_cert, CTX_CLIENT_REQUEST, now, source_key=client_env.sender_id
        )
        if not decision.allowed:
            self._note(now, client_env, "drop", f"admission:{decision.reason}")
            return []
        if not client_env.verify(client_cert.sign_public):
            self._note(now, client_env, "drop", "bad_signature")
            return []
        if not self.is_leader():
            return []
        cached = self.client_dedup.get(client_env.sender_id)
        if cached is not None and client_env.sequence <= cached[0]:
            return []
        self._queue_command(encode_command(CMD_APP, payload))
        return self._drain(now)

    # -- proposing

    def _queue_command(self, command_payload: bytes, front: bool = False) -> None:
        if front:
            self.propose_queue.insert(0, command_payload)
        else:
            self.propose_queue.append(command_payload)

    def _drain(self, now: int) -> list[Outbound]:
        """Propose as much queued work as the ordering rules currently allow."""
        out: list[Outbound] = []
        if not self.is_leader():
            return out
        while self.propose_queue:
            if self.next_propose_seq - (self.last_executed + 1) >= self.config.max_inflight:
                break
            payload = self._next_allowed_command()
            if payload is None:
                break
            out.extend(self._propose(payload, now))
        return out

    def _next_allowed_command(self) -> bytes | None:
        """Honour the barrier pattern: while a rollover is due only the
        rollover itself may be ordered, and membership changes never stack."""
        for i, payload in enumerate(self.propose_queue):
            kind, _ = decode_command(payload)
            if self.rekey_due is not None:
                if kind == CMD_REKEY:
                    return self.propose_queue.pop(i)
                continue
            if kind == CMD_REKEY:
                continue
            if kind == CMD_MEMBERSHIP and self._membership_in_flight():
                continue
            return self.propose_queue.pop(i)
        return None

    def _membership_in_flight(self) -> bool:
        for seq in range(self.last_executed + 1, self.next_propose_seq):
            inst = self.instances.get(seq)
            env = inst.propose_env if inst else None
            if env is None or env.epoch != 0:
                continue
            try:
                kind, _ = decode_command(env.payload)
            except wire.WireError:
                continue
            if kind in (CMD_MEMBERSHIP, CMD_REKEY):
                return True
        return False

    def _rekey_already_proposed(self) -> bool:
        for seq in range(self.last_executed + 1, self.next_propose_seq):
            inst = self.instances.get(seq)
            env = inst.propose_env if inst else None
            if env is None or env.epoch != 0:
                continue
            try:
                kind, _ = decode_command(env.payload)
            except wire.WireError:
                continue
            if kind == CMD_REKEY:
                return True
        return False

    def _propose(self, command_payload: bytes, now: int) -> list[Outbound]:
        seq = self.next_propose_seq
        self.next_propose_seq += 1
        kind, body = decode_command(command_payload)
        epoch = 0
        payload = command_payload
        if kind == CMD_APP and self.config.encrypt_consensus:
            entry = self.gkm.key_for_sequence(seq)
            if entry is not None:
                payload = seal_command(kind, body, entry.key, seq, entry.epoch, self.rng)
                epoch = entry.epoch
                self.gkm.sent_under_epoch += 1
        env = self._make(MsgType.PROPOSE, payload, seq=seq, epoch=epoch)
        self.metrics["proposals_sent"] += 1
        frame = env.encode()
        out = [Outbound(to="*", frame=frame)]
        out.extend(self._dispatch(env, frame, self.my_id, now))
        self._arm_progress(now)
        return out

    # -- ordering phases

    def _instance(self, seq: int) -> Instance:
        inst = self.instances.get(seq)
        if inst is None:
            inst = Instance(seq=seq)
            self.instances[seq] = inst
        return inst

    def _validate_propose(self, env: SignedEnvelope, now: int) -> str | None:
        if env.sequence <= self.last_executed:
            return "already_executed"
        if env.view != self.view:
            return "wrong_view"
        if env.sender_id != self.leader_of(env.view):
            return "propose_not_from_leader"
        try:
            kind, body = decode_command(env.payload)
        except wire.WireError:
            return "undecodable_command"
        if self.rekey_due is not None and kind not in (CMD_REKEY, CMD_NOOP):
            return "rekey_pattern_violation"
        if kind == CMD_APP:
            expected = 0
            if self.config.encrypt_consensus:
                entry = self.gkm.key_for_sequence(env.sequence)
                expected = entry.epoch if entry is not None else 0
            if env.epoch != expected:
                return "wrong_epoch"
        elif env.epoch != 0:
            return "wrong_epoch"
        if kind == CMD_MEMBERSHIP:
            return self._validate_membership_command(body, now)
        if kind == CMD_REKEY:
            return self._validate_rekey_command(body, env.sender_id)
        return None

    def _validate_membership_command(self, body: bytes, now: int) -> str | None:
        try:
            op, member_id, cert_bytes, reason, evidence, _ = decode_membership_op(body)
        except wire.WireError:
            return "undecodable_membership_op"
        if op == OP_JOIN:
            try:
                cert = Certificate.decode(cert_bytes)
            except (wire.WireError, ValueError):
                return "bad_join_certificate"
            if cert.subject_id != member_id:
                return "join_subject_mismatch"
            if not crypto.verify(
                self.root_public,
                crypto.DOMAIN_MEMBERSHIP,
                cert.core_bytes(),
                cert.issuer_signature,
            ):
                return "bad_join_certificate"
            return None
        member = self.membership.directory.get(member_id)
        if member is None:
            return "unknown_member"
        if op == OP_LEAVE and reason == REASON_VOLUNTARY:
            try:
                request = SignedEnvelope.decode(evidence)
            except (wire.WireError, ValueError):
                return "missing_leave_request"
            if (
                request.sender_id != member_id
                or request.msg_type != MsgType.MEMBERSHIP_OP
                or not request.verify(member.sign_public)
            ):
                return "bad_leave_request"
            return None
        if op == OP_LEAVE and reason == REASON_REVOKED:
            # vote yes only if our own revocation view supports it, or we
            # cannot claim a fresh view of our own
            cache = self.gate.crl_cache
            crl = cache.current
            visible = crl is not None and member.certificate.serial in crl.revoked_serials()
            if not visible and cache.freshness(now) == CrlFreshness.FRESH:
                return "revocation_not_visible"
            return None
        if op == OP_EVICT:
            ok, _why = check_evidence(evidence, member.sign_public)
            if not ok:
                return "bad_evidence"
            era = self.membership.current()
            if (
                member_id in era.members
                and len(era.members) - 1 < 3 * self.config.min_fault_budget + 1
            ):
                return "eviction_blocked_quorum_bound"
            return None
        return "unknown_membership_op"

    def _validate_rekey_command(self, body: bytes, sender_id: str) -> str | None:
        try:
            proposal = RekeyProposal.decode(body)
        except (wire.WireError, ValueError):
            return "undecodable_rekey"
        if proposal.mode != self.config.rekey_mode:
            return "rekey_mode_mismatch"
        member = self.membership.directory.get(proposal.proposer_id)
        if member is None:
            return "unknown_rekey_proposer"
        try:
            if not proposal.verify(member.sign_public):
                return "bad_rekey_signature"
        except crypto.MalformedSignature:
            return "bad_rekey_signature"
        if proposal.proposer_id != sender_id and proposal.proposer_id != (
            self.expected_sponsor or ""
        ):
            return "wrong_rekey_proposer"
        return None

    def _on_propose(self, env: SignedEnvelope, frame: bytes, now: int) -> list[Outbound]:
        inst = self._instance(env.sequence)
        if inst.phase >= PHASE_PROPOSED and inst.digest == env.digest:
            return []
        reason = self._validate_propose(env, now)
        if reason is not None:
            if (
                reason != "already_executed"
                and env.sequence > self.last_executed
                and env.view >= self.view
            ):
                self._deferred[env.sequence] = (frame, env.sender_id)
                if self._defer_deadline is None:
                    self._defer_deadline = now + self.config.base_timeout
            self._note(now, env, "drop", reason)
            return []
        inst.view = env.view
        inst.digest = env.digest
        inst.propose_frame = frame
        inst.propose_env = env
        # a genuinely new (view, digest) restarts the vote count; the stale
        # frames left in the maps fail the per-view matching filters
        inst.phase = PHASE_PROPOSED
        out: list[Outbound] = []
        if inst.write_view < env.view:
            inst.write_view = env.view
            write = self._make(
                MsgType.WRITE,
                encode_write_payload(env.digest, frame),
                view=env.view,
                seq=env.sequence,
            )
            wframe = write.encode()
            out.append(Outbound(to="*", frame=wframe))
            out.extend(self._dispatch(write, wframe, self.my_id, now))
        self._arm_progress(now)
        return out

    def _on_write(self, env: SignedEnvelope, frame: bytes, now: int) -> list[Outbound]:
        try:
            digest, propose_frame = decode_write_payload(env.payload)
        except wire.WireError:
            self.gate.blacklist.report(env.sender_id, "malformed", now)
            return []
        inst = self._instance(env.sequence)
        out: list[Outbound] = []
        if inst.phase < PHASE_PROPOSED and propose_frame:
            # adopt the embedded proposal if we never saw it directly
            try:
                p_env = SignedEnvelope.decode(propose_frame)
                if (
                    p_env.msg_type == MsgType.PROPOSE
                    and p_env.sequence == env.sequence
                    and p_env.digest == digest
                ):
                    leader = self.membership.directory.get(p_env.sender_id)
                    if leader is not None and p_env.verify(leader.sign_public):
                        self._track_slot(p_env, propose_frame, now)
                        out.extend(self._on_propose(p_env, propose_frame, now))
            except (wire.WireError, ValueError):
                pass
        elif inst.propose_frame and propose_frame and propose_frame != inst.propose_frame:
            # a second leader-signed proposal for the slot: conflict check
            try:
                p_env = SignedEnvelope.decode(propose_frame)
                leader = self.membership.directory.get(p_env.sender_id)
                if (
                    leader is not None
                    and p_env.msg_type == MsgType.PROPOSE
                    and p_env.view == inst.view
                    and p_env.sequence == env.sequence
                    and p_env.digest != inst.digest
                    and p_env.verify(leader.sign_public)
                ):
                    self._found_equivocation(
                        p_env.sender_id, inst.propose_frame, propose_frame, now
                    )
            except (wire.WireError, ValueError):
                pass
        if env.view >= inst.writes_view.get(env.sender_id, -1):
            inst.writes[env.sender_id] = frame
            inst.writes_view[env.sender_id] = env.view
        out.extend(self._maybe_advance(inst, now))
        return out

    def _on_accept(self, env: SignedEnvelope, frame: bytes, now: int) -> list[Outbound]:
        try:
            digest = decode_accept_payload(env.payload)
        except wire.WireError:
            self.gate.blacklist.report(env.sender_id, "malformed", now)
            return []
        inst = self._instance(env.sequence)
        if env.view >= inst.accepts_view.get(env.sender_id, -1):
            inst.accepts[env.sender_id] = digest
            inst.accepts_view[env.sender_id] = env.view
        return self._maybe_advance(inst, now)

    def _matching_writes(self, inst: Instance) -> list[bytes]:
        frames = []
        for sender in sorted(inst.writes):
            frame = inst.writes[sender]
            try:
                w = SignedEnvelope.decode(frame)
                d, _ = decode_write_payload(w.payload)
            except (wire.WireError, ValueError):
                continue
            if d == inst.digest and w.view == inst.view:
                frames.append(frame)
        return frames

    def _maybe_advance(self, inst: Instance, now: int) -> list[Outbound]:
        out: list[Outbound] = []
        if inst.phase < PHASE_PROPOSED:
            return out
        quorum = self.membership.era_for(inst.seq).quorum()
        if inst.phase == PHASE_PROPOSED and len(self._matching_writes(inst)) >= quorum:
            inst.phase = PHASE_WRITTEN
            if inst.accept_view < inst.view:
                inst.accept_view = inst.view
                accept = self._make(
                    MsgType.ACCEPT,
                    encode_accept_payload(inst.digest),
                    view=inst.view,
                    seq=inst.seq,
                )
                aframe = accept.encode()
                out.append(Outbound(to="*", frame=aframe))
                out.extend(self._dispatch(accept, aframe, self.my_id, now))
        if inst.phase == PHASE_WRITTEN:
            matching = [s for s, d in inst.accepts.items() if d == inst.digest]
            if len(matching) >= quorum:
                inst.phase = PHASE_ACCEPTED
        out.extend(self._execute_ready(now))
        return out

    # -- execution

    def _execute_ready(self, now: int) -> list[Outbound]:
        out: list[Outbound] = []
        executed_any = False
        while True:
            inst = self.instances.get(self.last_executed + 1)
            if inst is None or inst.phase != PHASE_ACCEPTED:
                break
            before = self.last_executed
            out.extend(self._execute(inst, now))
            if self.last_executed == before:
                break  # stalled (e.g. missing epoch key); wait for help
            executed_any = True
        if executed_any:
            if not self._join_pending:
                self._state_votes = None
            for s in [s for s in self.instances if s <= self.last_executed - 16]:
                del self.instances[s]
            for s in [s for s in self.seen_slots if s[3] <= self.last_executed - 64]:
                del self.seen_slots[s]
        if self.progress_deadline is not None:
            if not self._work_outstanding():
                self.progress_deadline = None
                self.backoff = 0
            elif executed_any:
                self._arm_progress(now, rearm=True)
        return out

    def _work_outstanding(self) -> bool:
        if self.propose_queue or self.forwarded or self.rekey_due is not None:
            return True
        for seq, inst in self.instances.items():
            if seq > self.last_executed and PHASE_PROPOSED <= inst.phase < PHASE_EXECUTED:
                return True
        # Unserved eviction evidence keeps the pressure on: the culprit may
        # be the leader, and only a view change puts someone else in charge
        # of ordering the removal. Skip it when the quorum bound blocks
        # eviction anyway, or the cluster would churn views forever.
        era = self.era_now()
        if len(era.members) - 1 >= 3 * self.config.min_fault_budget + 1:
            for culprit, _ in self.evidence_log:
                if culprit in era.members:
                    return True
        return False

    def _execute(self, inst: Instance, now: int) -> list[Outbound]:
        env = inst.propose_env
        assert env is not None and env.verified
        out: list[Outbound] = []
        kind, body = decode_command(env.payload)
        if env.epoch != 0:
            entry = self.gkm.key_for_sequence(inst.seq)
            if entry is None or entry.epoch != env.epoch:
                self._note(now, env, "drop", "missing_epoch_key")
                if self._state_votes is None:
                    out.extend(self.request_state(now))
                return out
            try:
                body = unseal_command_body(body, entry.key, inst.seq, env.epoch)
            except (wire.WireError, crypto.AuthenticationFailure):
                # every holder of this epoch key fails the same way, so the
                # slot burns as a no-op and the log keeps moving
                self._note(now, env, "drop", "unseal_failed")
                kind = CMD_NOOP
        inst.phase = PHASE_EXECUTED
        self.last_executed = inst.seq
        self.metrics["executed"] += 1
        self.execution_log.append((inst.seq, env.digest))
        if kind == CMD_APP:
            out.extend(self._execute_app(body, inst.seq))
        elif kind == CMD_MEMBERSHIP:
            out.extend(self._execute_membership(body, inst.seq, now))
        elif kind == CMD_REKEY:
            self._execute_rekey(body, inst.seq, now)
        self.gkm.collect_previous(self.last_executed)
        if self.is_leader():
            out.extend(self._drain(now))
            out.extend(self._maybe_start_rekey(now))
        return out

    def _execute_app(self, body: bytes, seq: int) -> list[Outbound]:
        try:
            client_frame, cert_bytes = decode_forwarded_request(body)
            client_env = SignedEnvelope.decode(client_frame)
            client_cert = Certificate.decode(cert_bytes)
        except (wire.WireError, ValueError):
            return []
        # deterministic re-check: certificate lineage and request signature
        # only; never clocks or revocation views that can differ per replica
        if client_cert.subject_id != client_env.sender_id:
            return []
        if not crypto.verify(
            self.root_public,
            crypto.DOMAIN_MEMBERSHIP,
            client_cert.core_bytes(),
            client_cert.issuer_signature,
        ):
            return []
        if not client_env.verify(client_cert.sign_public):
            return []
        cached = self.client_dedup.get(client_env.sender_id)
        if cached is not None and client_env.sequence <= cached[0]:
            counter, result, seq_hit = cached
        else:
            result = self.app.execute(client_env.payload)
            counter, seq_hit = client_env.sequence, seq
            self.client_dedup[client_env.sender_id] = (counter, result, seq)
        self.forwarded.pop((client_env.sender_id, client_env.sequence), None)
        reply = self._make(
            MsgType.CLIENT_REPLY,
            encode_client_reply(client_env.sender_id, counter, result, seq_hit),
        )
        return [Outbound(to=client_env.sender_id, frame=reply.encode(), client=True)]

    def _execute_membership(self, body: bytes, seq: int, now: int) -> list[Outbound]:
        try:
            op, member_id, cert_bytes, reason, _evidence, blinded_leaf = (
                decode_membership_op(body)
            )
        except wire.WireError:
            return []
        out: list[Outbound] = []
        self.pending_sponsor_proposal = b""
        self.my_sponsorship_pending = False
        sponsor = None
        if op == OP_JOIN:
            if member_id in self.membership.current().members:
                return []
            try:
                cert = Certificate.decode(cert_bytes)
            except (wire.WireError, ValueError):
                return []
            if cert.subject_id != member_id:
                return []
            self.membership.apply_join(seq, Member(member_id, cert))
            if member_id != self.my_id:
                sponsor = self.gkm.member_joined(
                    member_id, cert.ka_public, blinded_leaf or cert.ka_public
                )
            self.rekey_due = "join"
        elif op in (OP_LEAVE, OP_EVICT):
            era = self.membership.current()
            if member_id not in era.members:
                return []
            if op == OP_EVICT:
                if len(era.members) - 1 < 3 * self.config.min_fault_budget + 1:
                    self.metrics["evictions_blocked"] += 1
                    self._note(
                        now, None, "drop", "eviction_blocked_quorum_bound",
                        sender=member_id, msg_type="EVICTION",
                    )
                    return []
                member = era.members[member_id]
                self.gate.blacklist.report(member_id, "equivocation", now)
                self.gate.blacklist.report(
                    f"serial:{member.certificate.serial.hex()}", "equivocation", now
                )
            self.membership.apply_removal(seq, member_id)
            self.rekey_due = "leave" if op == OP_LEAVE else "eviction"
            if member_id == self.my_id:
                self.halted = True
                return out
            sponsor = self.gkm.member_left(member_id)
        else:
            return []
        if self.config.rekey_mode == groupkey.MODE_TGDH:
            self.expected_sponsor = sponsor
        else:
            self.expected_sponsor = None
        if sponsor == self.my_id:
            self.my_sponsorship_pending = True
            out.extend(self._send_sponsor_delta(now))
        if self.is_leader():
            out.extend(self._maybe_start_rekey(now))
        else:
            self._arm_progress(now)  # the rollover must follow promptly
        return out

    def _execute_rekey(self, body: bytes, seq: int, now: int) -> None:
        try:
            proposal = RekeyProposal.decode(body)
        except (wire.WireError, ValueError):
            return
        try:
            self.gkm.apply_rekey(proposal, activation_seq=seq, now=now)
        except groupkey.GroupKeyError as exc:
            self._note(
                now, None, "drop", f"rekey_failed:{type(exc).__name__}",
                sender=proposal.proposer_id, msg_type="REKEY",
            )
            return
        self.rekey_due = None
        self.expected_sponsor = None
        self.my_sponsorship_pending = False
        self.pending_sponsor_proposal = b""
        self._latest_rekey = body
        self.metrics["rekeys_applied"] += 1

    # -- rekey coordination

    def _maybe_start_rekey(self, now: int) -> list[Outbound]:
        """Leader side: order the due rollover as soon as material exists."""
        out: list[Outbound] = []
        if self.rekey_due is None or not self.is_leader():
            return out
        if any(decode_command(p)[0] == CMD_REKEY for p in self.propose_queue):
            return self._drain(now)
        if self._rekey_already_proposed():
            return out
        if self.config.rekey_mode == groupkey.MODE_LEADER_SEALED:
            proposal = self.gkm.leader_rekey(self.rng).sign(self.sign_secret)
            self._queue_command(encode_command(CMD_REKEY, proposal.encode()), front=True)
            return self._drain(now)
        if self.rekey_due == "genesis":
            if self.gkm.tree.fully_blinded() and not self.genesis_rekey_sent:
                proposal = self.gkm.genesis_blind_proposal(
                    [self.gkm.tree.blinded_map()]
                ).sign(self.sign_secret)
                self.genesis_rekey_sent = True
                self._queue_command(
                    encode_command(CMD_REKEY, proposal.encode()), front=True
                )
                return self._drain(now)
            return self._broadcast_merge()
        if self.rekey_due == "interval" and not self.pending_sponsor_proposal:
            # for periodic rollovers the leader refreshes its own path
            proposal = self.gkm.sponsor_rekey(self.rng).sign(self.sign_secret)
            self.pending_sponsor_proposal = proposal.encode()
        if self.pending_sponsor_proposal:
            self._queue_command(
                encode_command(CMD_REKEY, self.pending_sponsor_proposal), front=True
            )
            self.pending_sponsor_proposal = b""
            return self._drain(now)
        return out

    def _broadcast_merge(self) -> list[Outbound]:
        delta = self.gkm.tree.blinded_map()
        env = self._make(MsgType.REKEY, encode_rekey_msg(REKEY_MERGE, delta))
        self.metrics["rekey_msgs"] += 1
        return [Outbound(to="*", frame=env.encode())]

    def _send_contrib(self) -> list[Outbound]:
        delta = self.gkm.my_partial_path_blinds()
        env = self._make(MsgType.REKEY, encode_rekey_msg(REKEY_CONTRIB, delta))
        self.metrics["rekey_msgs"] += 1
        return [Outbound(to=self.leader_of(self.view), frame=env.encode())]

    def _send_sponsor_delta(self, now: int) -> list[Outbound]:
        """Generate the sponsor proposal once per episode and (re)send it;
        regenerating would fork the leaf secret out from under whichever
        copy ends up ordered."""
        if not self.pending_sponsor_proposal:
            proposal = self.gkm.sponsor_rekey(self.rng).sign(self.sign_secret)
            self.pending_sponsor_proposal = proposal.encode()
        self.metrics["rekey_msgs"] += 1
        if self.is_leader():
            return self._maybe_start_rekey(now)
        env = self._make(
            MsgType.REKEY,
            encode_rekey_msg(REKEY_SPONSOR, [], self.pending_sponsor_proposal),
        )
        return [Outbound(to=self.leader_of(self.view), frame=env.encode())]

    def _on_rekey_msg(self, env: SignedEnvelope, frame: bytes, now: int) -> list[Outbound]:
        try:
            kind, delta, proposal_bytes = decode_rekey_msg(env.payload)
        except wire.WireError:
            self.gate.blacklist.report(env.sender_id, "malformed", now)
            return []
        out: list[Outbound] = []
        if kind == REKEY_CONTRIB and self.is_leader():
            before = self.gkm.tree.blinded_map()
            try:
                self.gkm.tree.apply_delta(delta)
            except groupkey.BadProposal:
                return []
            out.extend(self._maybe_start_rekey(now))
            if not self.gkm.tree.fully_blinded() and self.gkm.tree.blinded_map() != before:
                out.extend(self._broadcast_merge())
        elif kind == REKEY_MERGE:
            try:
                self.gkm.tree.apply_delta(delta)
            except groupkey.BadProposal:
                return []
            if self.gkm.my_leaf_secret is not None and not self.is_leader():
                # reply with as much of our path as is now computable; the
                # final round tells the leader the tree converged
                out.extend(self._send_contrib())
        elif kind == REKEY_SPONSOR and self.is_leader():
            try:
                proposal = RekeyProposal.decode(proposal_bytes)
            except (wire.WireError, ValueError):
                return []
            member = self.membership.directory.get(proposal.proposer_id)
            if member is None:
                return []
            try:
                if not proposal.verify(member.sign_public):
                    return []
            except crypto.MalformedSignature:
                return []
            if self.expected_sponsor and proposal.proposer_id != self.expected_sponsor:
                return []
            self.pending_sponsor_proposal = proposal_bytes
            out.extend(self._maybe_start_rekey(now))
        return out

    def _genesis_kickoff(self, now: int) -> list[Outbound]:
        self._genesis_kicked = True
        self._arm_progress(now)
        if self.config.rekey_mode == groupkey.MODE_TGDH:
            self.gkm.my_partial_path_blinds()  # refresh our own slice first
            if self.is_leader():
                return self._maybe_start_rekey(now)
            return self._send_contrib()
        if self.is_leader():
            return self._maybe_start_rekey(now)
        return []

    # -- membership requests

    def _on_membership_op_from_outsider(
        self, env: SignedEnvelope, now: int
    ) -> list[Outbound]:
        """A join request is the one thing a non-member may send."""
        try:
            op, member_id, cert_bytes, _reason, _evidence, _blinded = (
                decode_membership_op(env.payload)
            )
            cert = Certificate.decode(cert_bytes)
        except (wire.WireError, ValueError):
            self._note(now, env, "drop", "malformed")
            return []
        if op != OP_JOIN or member_id != env.sender_id or cert.subject_id != member_id:
            self._note(now, env, "drop", "outsider_not_joining")
            return []
        decision = self.gate.admit(cert, CTX_DIRECTORY, now, source_key=member_id)
        if not decision.allowed:
            self._note(now, env, "drop", f"admission:{decision.reason}")
            return []
        if not env.verify(cert.sign_public):
            self._note(now, env, "drop", "bad_signature")
            return []
        self._note(now, env, "ok", "join_request")
        if not self.is_leader():
            return []
        if member_id in self.membership.current().members:
            return []
        if self._queued_or_inflight_for(member_id):
            return []
        self._queue_command(encode_command(CMD_MEMBERSHIP, env.payload))
        return self._drain(now)

    def _on_membership_op(self, env: SignedEnvelope, frame: bytes, now: int) -> list[Outbound]:
        try:
            op, member_id, cert_bytes, reason, evidence, _blinded = (
                decode_membership_op(env.payload)
            )
        except wire.WireError:
            self.gate.blacklist.report(env.sender_id, "malformed", now)
            return []
        if not self.is_leader():
            return []
        if op == OP_LEAVE and reason == REASON_VOLUNTARY:
            if env.sender_id != member_id:
                self._note(now, env, "drop", "leave_for_someone_else")
                return []
            if member_id not in self.membership.current().members:
                return []
            if self._queued_or_inflight_for(member_id):
                return []
            # embed the signed request so every replica can re-check intent
            body = encode_membership_op(
                OP_LEAVE, member_id, reason=REASON_VOLUNTARY, evidence=frame
            )
            self._queue_command(encode_command(CMD_MEMBERSHIP, body))
            return self._drain(now)
        if op == OP_EVICT:
            member = self.membership.directory.get(member_id)
            if member is None or member_id not in self.membership.current().members:
                return []
            ok, why = check_evidence(evidence, member.sign_public)
            if not ok:
                self._note(now, env, "drop", f"bad_evidence:{why}")
                return []
            era = self.membership.current()
            if len(era.members) - 1 < 3 * self.config.min_fault_budget + 1:
                self.metrics["evictions_blocked"] += 1
                self._note(now, env, "drop", "eviction_blocked_quorum_bound")
                return []
            if self._queued_or_inflight_for(member_id):
                return []
            body = encode_membership_op(
                OP_EVICT, member_id, reason=REASON_EQUIVOCATION, evidence=evidence
            )
            self._queue_command(encode_command(CMD_MEMBERSHIP, body))
            return self._drain(now)
        if op == OP_JOIN:
            # a member relaying a newcomer's request
            try:
                cert = Certificate.decode(cert_bytes)
            except (wire.WireError, ValueError):
                return []
            if cert.subject_id != member_id:
                return []
            decision = self.gate.admit(cert, CTX_DIRECTORY, now, source_key=member_id)
            if not decision.allowed:
                self._note(now, env, "drop", f"admission:{decision.reason}")
                return []
            if member_id in self.membership.current().members:
                return []
            if self._queued_or_inflight_for(member_id):
                return []
            self._queue_command(encode_command(CMD_MEMBERSHIP, env.payload))
            return self._drain(now)
        return []

    def request_leave(self, now: int) -> list[Outbound]:
        """Ask the current leader to order our departure."""
        op = encode_membership_op(OP_LEAVE, self.my_id, reason=REASON_VOLUNTARY)
        env = self._make(MsgType.MEMBERSHIP_OP, op)
        if self.is_leader():
            body = encode_membership_op(
                OP_LEAVE, self.my_id, reason=REASON_VOLUNTARY, evidence=env.encode()
            )
            self._queue_command(encode_command(CMD_MEMBERSHIP, body))
            return self._finish(self._drain(now), now)
        self._arm_progress(now)
        return [Outbound(to=self.leader_of(self.view), frame=env.encode())]

    def propose_removal_for_revocation(self, member_id: str, now: int) -> list[Outbound]:
        """Leader: order removal of a member whose certificate was revoked."""
        if not self.is_leader() or member_id not in self.membership.current().members:
            return []
        if self._queued_or_inflight_for(member_id):
            return []
        body = encode_membership_op(OP_LEAVE, member_id, reason=REASON_REVOKED)
        self._queue_command(encode_command(CMD_MEMBERSHIP, body))
        return self._drain(now)

    def begin_join(self, now: int) -> list[Outbound]:
        """Run by a newcomer: request admission, then poll for state until
        the ordered join and the follow-up rollover both land."""
        self._join_pending = True
        self._join_next_poll = now + self.config.base_timeout
        self.rekey_due = None
        self._genesis_kicked = True  # not our genesis
        return self._join_request_outbound()

    def _join_request_outbound(self) -> list[Outbound]:
        blinded = b""
        if self.config.rekey_mode == groupkey.MODE_TGDH:
            if not self._join_leaf_ready:
                self.gkm.new_leaf_secret(self.rng)
                self._join_leaf_ready = True
            blinded = self.gkm.blinded_leaf()
        op = encode_membership_op(
            OP_JOIN, self.my_id, self.certificate.encode(), blinded_leaf=blinded
        )
        env = self._make(MsgType.MEMBERSHIP_OP, op)
        return [Outbound(to="*", frame=env.encode())]

    # -- revocation data

    def _on_crl_update(self, env: SignedEnvelope, now: int) -> list[Outbound]:
        try:
            crl = RevocationList.decode(env.payload)
        except (wire.WireError, ValueError):
            return []
        if not self.gate.crl_cache.install(crl, now, root_public=self.root_public):
            return []
        out: list[Outbound] = []
        if crl.sequence > self._last_crl_seq:
            self._last_crl_seq = crl.sequence
            gossip = self._make(MsgType.CRL_UPDATE, env.payload)
            out.append(Outbound(to="*", frame=gossip.encode()))
            if self.is_leader():
                revoked = crl.revoked_serials()
                for mid in sorted(self.membership.current().members):
                    member = self.membership.current().members[mid]
                    if member.certificate.serial in revoked:
                        out.extend(self.propose_removal_for_revocation(mid, now))
        return out

    # -- view changes

    def _arm_progress(self, now: int, rearm: bool = False) -> None:
        if rearm or self.progress_deadline is None:
            self.progress_deadline = now + self.config.base_timeout * (2 ** self.backoff)

    def _start_view_change(self, target: int, now: int) -> list[Outbound]:
        if self.vc_target is not None and target <= self.vc_target:
            target = self.vc_target + 1
        self.vc_target = target
        self.backoff = min(self.backoff + 1, 10)
        self.vc_deadline = now + self.config.base_timeout * (2 ** self.backoff)
        self.progress_deadline = None
        self.genesis_rekey_sent = False
        self.metrics["view_changes"] += 1
        certs = []
        for seq in sorted(self.instances):
            inst = self.instances[seq]
            if seq > self.last_executed and inst.phase >= PHASE_WRITTEN:
                certs.append(
                    encode_write_certificate(
                        seq, inst.view, inst.digest, self._matching_writes(inst)
                    )
                )
        env = self._make(
            MsgType.VIEW_CHANGE,
            encode_view_change_payload(self.last_executed, certs),
            view=target,
            seq=self.last_executed,
        )
        frame = env.encode()
        out = [Outbound(to="*", frame=frame)]
        out.extend(self._on_view_change(env, frame, now))
        return out

    def _on_view_change(self, env: SignedEnvelope, frame: bytes, now: int) -> list[Outbound]:
        target = env.view
        if target <= self.view:
            return []
        votes = self.vc_votes.setdefault(target, {})
        votes[env.sender_id] = frame
        era = self.era_now()
        out: list[Outbound] = []
        if (
            (self.vc_target is None or self.vc_target < target)
            and len(votes) > era.fault_budget()
            and env.sender_id != self.my_id
        ):
            # enough peers gave up on the current leader; join them
            out.extend(self._start_view_change(target, now))
            # joining may have completed the quorum and emitted already
            votes = self.vc_votes.get(target, {})
        if (
            self.leader_of(target) == self.my_id
            and target > self.view
            and len(votes) >= era.quorum()
        ):
            out.extend(self._emit_new_view(target, now))
        return out

    def _plan_from_view_changes(
        self, vc_frames: list[bytes]
    ) -> tuple[int, dict[int, bytes]]:
        """Deterministic re-proposal plan: for every sequence past the best
        progress marker, the payload certified at the highest view. The new
        leader and its followers derive this from the same frames."""
        best_executed = 0
        chosen: dict[int, tuple[int, bytes]] = {}
        for frame in vc_frames:
            try:
                env = SignedEnvelope.decode(frame)
                last_executed, certs = decode_view_change_payload(env.payload)
            except (wire.WireError, ValueError):
                continue
            best_executed = max(best_executed, last_executed)
            for blob in certs:
                try:
                    seq, view, digest, writes = decode_write_certificate(blob)
                except wire.WireError:
                    continue
                era = self.membership.era_for(seq)
                senders: set[str] = set()
                propose_frame: bytes | None = None
                for wf in writes:
                    try:
                        w = SignedEnvelope.decode(wf)
                        d, pf = decode_write_payload(w.payload)
                    except (wire.WireError, ValueError):
                        continue
                    member = era.members.get(w.sender_id)
                    if (
                        member is None
                        or w.msg_type != MsgType.WRITE
                        or w.sequence != seq
                        or w.view != view
                        or d != digest
                    ):
                        continue
                    if not w.verify(member.sign_public):
                        continue
                    senders.add(w.sender_id)
                    if propose_frame is None:
                        propose_frame = pf
                if len(senders) < era.quorum() or propose_frame is None:
                    continue
                held = chosen.get(seq)
                if held is None or view > held[0]:
                    chosen[seq] = (view, propose_frame)
        plan = {seq: f for seq, (v, f) in chosen.items() if seq > best_executed}
        return best_executed, plan

    def _emit_new_view(self, target: int, now: int) -> list[Outbound]:
        votes = self.vc_votes.get(target, {})
        vc_frames = [votes[s] for s in sorted(votes)]
        best_executed, plan = self._plan_from_view_changes(vc_frames)
        proposes: list[bytes] = []
        if plan:
            high = max(plan)
            for seq in range(max(best_executed, self.last_executed) + 1, high + 1):
                original = plan.get(seq)
                payload, epoch = encode_command(CMD_NOOP, b""), 0
                if original is not None:
                    try:
                        old = SignedEnvelope.decode(original)
                        payload, epoch = old.payload, old.epoch
                    except (wire.WireError, ValueError):
                        pass
                env = self._make(MsgType.PROPOSE, payload, view=target, seq=seq, epoch=epoch)
                proposes.append(env.encode())
        self.view = target
        self.vc_target = None
        self.vc_deadline = None
        self.vc_votes = {t: v for t, v in self.vc_votes.items() if t > target}
        self.next_propose_seq = (max(plan) if plan else self.last_executed) + 1
        nv = self._make(
            MsgType.NEW_VIEW, encode_new_view_payload(vc_frames, proposes), view=target
        )
        self._last_new_view = nv.encode()
        self._nv_seen = target
        out = [Outbound(to="*", frame=self._last_new_view)]
        for pframe in proposes:
            penv = SignedEnvelope.decode(pframe)
            self._reset_instance_for(penv.sequence)
            out.extend(self._dispatch(penv, pframe, self.my_id, now))
        out.extend(self._eviction_outbounds(now))
        out.extend(self._drain(now))
        out.extend(self._maybe_start_rekey(now))
        self._arm_progress(now, rearm=True)
        return out

    def _reset_instance_for(self, seq: int) -> None:
        """A re-proposal under a new view starts the vote slate afresh."""
        if seq > self.last_executed:
            self.instances[seq] = Instance(seq=seq)

    def _on_new_view(self, env: SignedEnvelope, frame: bytes, now: int) -> list[Outbound]:
        target = env.view
        if target < self.view or target <= self._nv_seen:
            return []
        if env.sender_id != self.leader_of(target):
            self._note(now, env, "drop", "new_view_not_from_leader")
            return []
        try:
            vc_frames, proposes = decode_new_view_payload(env.payload)
        except wire.WireError:
            return []
        era = self.era_now()
        valid_senders = set()
        for vf in vc_frames:
            try:
                vc = SignedEnvelope.decode(vf)
            except (wire.WireError, ValueError):
                continue
            member = era.members.get(vc.sender_id)
            if member is None or vc.view != target or vc.msg_type != MsgType.VIEW_CHANGE:
                continue
            if vc.verify(member.sign_public):
                valid_senders.add(vc.sender_id)
        if len(valid_senders) < era.quorum():
            self._note(now, env, "drop", "new_view_without_quorum")
            return []
        best_executed, plan = self._plan_from_view_changes(vc_frames)
        expected: dict[int, bytes] = {}
        for seq, pframe in plan.items():
            try:
                expected[seq] = SignedEnvelope.decode(pframe).digest
            except (wire.WireError, ValueError):
                continue
        out: list[Outbound] = []
        self.view = target
        self.vc_target = None
        self.vc_deadline = None
        self.vc_votes = {t: v for t, v in self.vc_votes.items() if t > target}
        self._last_new_view = frame
        self._nv_seen = target
        for pframe in proposes:
            try:
                penv = SignedEnvelope.decode(pframe)
            except (wire.WireError, ValueError):
                continue
            want = expected.get(penv.sequence)
            if want is not None and penv.digest != want:
                self._note(now, penv, "drop", "new_view_reproposal_mismatch")
                continue
            if want is None:
                try:
                    kind, _ = decode_command(penv.payload)
                except wire.WireError:
                    continue
                if kind != CMD_NOOP:
                    self._note(now, penv, "drop", "new_view_gap_not_noop")
                    continue
            leader = self.membership.directory.get(penv.sender_id)
            if leader is None or not penv.verify(leader.sign_public):
                continue
            self._reset_instance_for(penv.sequence)
            self._track_slot(penv, pframe, now)
            out.extend(self._on_propose(penv, pframe, now))
        self._arm_progress(now, rearm=True)
        if self.my_sponsorship_pending and self.rekey_due is not None:
            out.extend(self._send_sponsor_delta(now))
        if self.rekey_due == "genesis" and self.config.rekey_mode == groupkey.MODE_TGDH:
            out.extend(self._send_contrib())
        out.extend(self._eviction_outbounds(now))
        return out

    # -- state transfer

    def snapshot(self) -> bytes:
        """Point-in-time state for catch-up. Application data and cached
        results travel sealed under the current epoch when consensus traffic
        is encrypted; key material itself never leaves the replica."""
        dedup = []
        for cid in sorted(self.client_dedup):
            counter, result, seq = self.client_dedup[cid]
            dedup.append(
                wire.encode_tlv(
                    0x20,
                    wire.encode_tlv(0x01, cid.encode())
                    + wire.encode_tlv(0x02, wire.u64(counter))
                    + wire.encode_tlv(0x03, result)
                    + wire.encode_tlv(0x04, wire.u64(seq)),
                )
            )
        inner = wire.encode_tlv(0x01, self.app.encode_state()) + wire.encode_tlv(
            0x02, b"".join(dedup)
        )
        sealed = 0
        entry = self.gkm.epoch
        if self.config.encrypt_consensus and entry is not None:
            # deterministic nonce: equal states seal to equal bytes, so
            # responses from honest replicas stay comparable
            material = (
                _SNAP_LABEL
                + wire.u64(self.last_executed)
                + wire.u64(entry.epoch)
                + entry.membership
            )
            nonce = hashlib.sha256(material).digest()[: crypto.AEAD_NONCE_LEN]
            aad = _SNAP_LABEL + wire.u64(entry.epoch) + wire.u64(self.last_executed)
            inner = crypto.aead_seal(entry.key, nonce, inner, aad)
            sealed = 1
        tree_map = b""
        if self.config.rekey_mode == groupkey.MODE_TGDH:
            tree_map = _encode_pairs(self.gkm.tree.blinded_map())
        return b"".join(
            (
                wire.encode_tlv(0x01, wire.u64(self.last_executed)),
                wire.encode_tlv(0x02, wire.u8(sealed)),
                wire.encode_tlv(0x03, inner),
                wire.encode_tlv(0x04, self.membership.encode()),
                wire.encode_tlv(0x05, self._latest_rekey),
                wire.encode_tlv(
                    0x06, wire.u64(self.gkm.epoch.epoch if self.gkm.epoch else 0)
                ),
                wire.encode_tlv(
                    0x07,
                    wire.u64(self.gkm.epoch.activation_seq if self.gkm.epoch else 0),
                ),
                wire.encode_tlv(0x08, tree_map),
            )
        )

    def request_state(self, now: int) -> list[Outbound]:
        self._state_votes = {}
        env = self._make(MsgType.STATE_REQ, wire.u64(self.last_executed))
        return [Outbound(to="*", frame=env.encode())]

    def _on_state_req(self, env: SignedEnvelope, frame: bytes, now: int) -> list[Outbound]:
        out = []
        if self._last_new_view:
            # a requester may also be missing the view transition; the frame
            # carries its own quorum proof so relaying it is always safe
            out.append(Outbound(to=env.sender_id, frame=self._last_new_view))
        body = wire.encode_tlv(0x01, self.snapshot()) + wire.encode_tlv(
            0x02, self.certificate.encode()
        )
        resp = self._make(MsgType.STATE_RESP, body, seq=self.last_executed)
        self.metrics["state_snapshots_served"] += 1
        out.append(Outbound(to=env.sender_id, frame=resp.encode()))
        return out

    def _on_state_resp(self, env: SignedEnvelope, frame: bytes, now: int) -> list[Outbound]:
        """Count matching snapshots. The sender is validated against the root
        and against the membership log inside the snapshot it vouches for,
        never against our own directory: a joiner provisioned with only the
        genesis roster must still be able to accept state from members that
        joined after genesis."""
        if self._state_votes is None or env.sequence <= self.last_executed:
            self._note(now, env, "drop", "state_not_wanted")
            return []
        try:
            snap, cert_bytes = wire.decode_fields(env.payload, [0x01, 0x02])
            cert = Certificate.decode(cert_bytes)
        except (wire.WireError, ValueError):
            self._note(now, env, "drop", "malformed_state_resp")
            return []
        if (
            cert.subject_id != env.sender_id
            or cert.role != Role.REPLICA
            or not crypto.verify(
                self.root_public,
                crypto.DOMAIN_MEMBERSHIP,
                cert.core_bytes(),
                cert.issuer_signature,
            )
        ):
            self._note(now, env, "drop", "state_resp_bad_cert")
            return []
        crl = self.gate.crl_cache.current
        if crl is not None and cert.serial in crl.revoked_serials():
            self._note(now, env, "drop", "state_resp_revoked")
            return []
        if not env.verify(cert.sign_public):
            self.gate.blacklist.report(env.sender_id, "bad_signature", now)
            self._note(now, env, "drop", "bad_signature")
            return []
        era = self._snapshot_era(snap)
        if era is None:
            self._note(now, env, "drop", "malformed_state_resp")
            return []
        if env.sender_id not in era.members:
            self._note(now, env, "drop", "state_resp_outsider")
            return []
        key = (env.sequence, hashlib.sha256(snap).digest())
        if key not in self._state_votes and len(self._state_votes) >= 16:
            self._note(now, env, "drop", "state_resp_overflow")
            return []
        self._note(now, env, "ok", "state_resp")
        votes = self._state_votes.setdefault(key, set())
        votes.add(env.sender_id)
        # a colluding set large enough to forge a snapshot would have to
        # exceed the fault budget of our era or of the era it claims
        threshold = max(self.era_now().fault_budget(), era.fault_budget()) + 1
        if len(votes) < threshold:
            return []
        self._state_votes = None
        if self._adopt_snapshot(snap, now):
            return self._execute_ready(now)
        return []

    def _snapshot_era(self, snap: bytes):
        try:
            fields = wire.decode_fields(
                snap, [0x01, 0x02, 0x03, 0x04, 0x05, 0x06, 0x07, 0x08]
            )
            log = MembershipLog.decode(fields[3])
        except (wire.WireError, ValueError):
            return None
        return log.current()

    def _rebuild_tree(self) -> None:
        """Replay the era history to recover the tree shape, then overlay the
        published blinds. Genesis leaves were blinded from long-term keys, so
        certificate values are the right placeholders everywhere."""
        tree = TgdhTree()
        eras = self.membership.eras
        for mid in sorted(eras[0].members):
            tree.join(mid, eras[0].members[mid].ka_public)
        for prev, cur in zip(eras, eras[1:]):
            for mid in sorted(set(prev.members) - set(cur.members)):
                tree.leave(mid)
            for mid in sorted(set(cur.members) - set(prev.members)):
                tree.join(mid, cur.members[mid].ka_public)
        self.gkm.tree = tree

    def _adopt_snapshot(self, snap: bytes, now: int) -> bool:
        try:
            f = wire.decode_fields(
                snap, [0x01, 0x02, 0x03, 0x04, 0x05, 0x06, 0x07, 0x08]
            )
            last_executed = wire.read_u64(f[0])
            sealed = wire.read_u8(f[1])
            inner = f[2]
            log = MembershipLog.decode(f[3])
            rekey_bytes = f[4]
            epoch_number = wire.read_u64(f[5])
            activation = wire.read_u64(f[6])
            tree_map = _decode_pairs(f[7])
        except (wire.WireError, ValueError):
            return False
        if last_executed <= self.last_executed:
            return False
        self.membership = log
        current = log.current()
        self.gkm.set_members({mid: m.ka_public for mid, m in current.members.items()})
        if self.config.rekey_mode == groupkey.MODE_TGDH:
            self._rebuild_tree()
            try:
                self.gkm.tree.apply_delta(tree_map)
            except groupkey.BadProposal:
                return False
        if rekey_bytes and self.my_id in current.members:
            try:
                proposal = RekeyProposal.decode(rekey_bytes)
                have = self.gkm.epoch.epoch if self.gkm.epoch else 0
                if proposal.epoch > have:
                    self.gkm.apply_rekey(proposal, activation_seq=activation, now=now)
            except (wire.WireError, ValueError, groupkey.GroupKeyError):
                pass
        if epoch_number > 0:
            self.gkm.adopt_epoch_floor(epoch_number - 1)
        if sealed:
            entry = self.gkm.epoch
            if entry is None or entry.epoch != epoch_number:
                return False  # no key yet; keep polling
            material = (
                _SNAP_LABEL
                + wire.u64(last_executed)
                + wire.u64(epoch_number)
                + entry.membership
            )
            nonce = hashlib.sha256(material).digest()[: crypto.AEAD_NONCE_LEN]
            aad = _SNAP_LABEL + wire.u64(epoch_number) + wire.u64(last_executed)
            try:
                inner = crypto.aead_open(entry.key, nonce, inner, aad)
            except crypto.AuthenticationFailure:
                return False
        try:
            app_blob, dedup_blob = wire.decode_fields(inner, [0x01, 0x02])
            self.app.load_state(app_blob)
        except wire.WireError:
            return False
        self.client_dedup = {}
        for tag, blob in wire.decode_all(dedup_blob):
            if tag != 0x20:
                continue
            d = wire.decode_fields(blob, [0x01, 0x02, 0x03, 0x04])
            self.client_dedup[d[0].decode()] = (
                wire.read_u64(d[1]),
                d[2],
                wire.read_u64(d[3]),
            )
        self.last_executed = last_executed
        self._latest_rekey = rekey_bytes
        self.next_propose_seq = max(self.next_propose_seq, last_executed + 1)
        self.instances = {s: i for s, i in self.instances.items() if s > last_executed}
        self._deferred = {s: v for s, v in self._deferred.items() if s > last_executed}
        mid_pattern = current.barrier == last_executed and last_executed > 0
        if (
            self.gkm.epoch is not None
            and self.gkm.epoch.membership == self.gkm.membership()
            and not mid_pattern
        ):
            self.rekey_due = None
        else:
            self.rekey_due = "catchup"
        self._genesis_kicked = True
        if (
            self._join_pending
            and self.my_id in current.members
            and self.gkm.epoch is not None
        ):
            self._join_pending = False
        self.metrics["state_adopted"] += 1
        return True
