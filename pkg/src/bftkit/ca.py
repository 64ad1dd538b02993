"""Combined registration/certification authority: issues certificates against
proof-of-possession CSRs, maintains an append-only revocation list, and
persists every mutation to a write-ahead log before acknowledging it.

State is a pure function of the log, so a crash-restart rebuilds the same
authority. Time is always an explicit argument: logical ticks under the
simulator, wall-clock seconds under the socket runtime.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from enum import Enum
from random import Random

from . import crypto, wire
from .crypto import (
    DOMAIN_CRL,
    DOMAIN_MEMBERSHIP,
    CipherProfile,
    KeyPair,
    KeyRole,
)


class CaError(Exception):
    pass


class BadProofOfPossession(CaError):
    pass


class RoleNotPermitted(CaError):
    pass


class DuplicateSubjectForRole(CaError):
    pass


class UnknownSerial(CaError):
    pass


class PersistenceFailure(CaError):
    """The write-ahead log could not be made durable; mutations are refused."""


class Role(Enum):
    REPLICA = "replica"
    CLIENT = "client"
    TRUST_CENTER = "trust-center"


class RevocationReason(Enum):
    COMPROMISED = 1
    REMOVED = 2
    MISBEHAVIOR = 3


class CertStatus(Enum):
    VALID = "valid"
    EXPIRED = "expired"
    REVOKED = "revoked"
    BAD_SIGNATURE = "bad_signature"


@dataclass(frozen=True)
class Csr:
    subject_id: str
    sign_public: bytes
    ka_public: bytes
    role: Role
    proof_of_possession: bytes

    def signed_bytes(self) -> bytes:
        return csr_signed_bytes(self.subject_id, self.sign_public, self.ka_public, self.role)

    def encode(self) -> bytes:
        return b"".join(
            (
                wire.encode_tlv(0x01, self.subject_id.encode()),
                wire.encode_tlv(0x02, self.sign_public),
                wire.encode_tlv(0x03, self.ka_public),
                wire.encode_tlv(0x04, self.role.value.encode()),
                wire.encode_tlv(0x05, self.proof_of_possession),
            )
        )

    @classmethod
    def decode(cls, data: bytes) -> "Csr":
        subject, sign_pub, ka_pub, role, pop = wire.decode_fields(
            data, [0x01, 0x02, 0x03, 0x04, 0x05]
        )
        return cls(subject.decode(), sign_pub, ka_pub, Role(role.decode()), pop)


def csr_signed_bytes(subject_id: str, sign_public: bytes, ka_public: bytes, role: Role) -> bytes:
    return subject_id.encode() + sign_public + ka_public + role.value.encode()


def make_csr(subject_id: str, sign_pair: KeyPair, ka_pair: KeyPair, role: Role) -> Csr:
    pop = crypto.sign(
        sign_pair.secret,
        DOMAIN_MEMBERSHIP,
        csr_signed_bytes(subject_id, sign_pair.public, ka_pair.public, role),
    )
    return Csr(subject_id, sign_pair.public, ka_pair.public, role, pop)


@dataclass(frozen=True)
class Certificate:
    serial: bytes  # 8 bytes
    subject_id: str
    sign_public: bytes
    ka_public: bytes
    role: Role
    not_before: int
    not_after: int
    issuer_id: str
    issuer_signature: bytes

    def core_bytes(self) -> bytes:
        return b"".join(
            (
                wire.encode_tlv(0x01, self.serial),
                wire.encode_tlv(0x02, self.subject_id.encode()),
                wire.encode_tlv(0x03, self.sign_public),
                wire.encode_tlv(0x04, self.ka_public),
                wire.encode_tlv(0x05, self.role.value.encode()),
                wire.encode_tlv(0x06, wire.u64(self.not_before)),
                wire.encode_tlv(0x07, wire.u64(self.not_after)),
                wire.encode_tlv(0x08, self.issuer_id.encode()),
            )
        )

    def encode(self) -> bytes:
        return self.core_bytes() + wire.encode_tlv(0x09, self.issuer_signature)

    @classmethod
    def decode(cls, data: bytes) -> "Certificate":
        fields = wire.decode_fields(data, [0x01, 0x02, 0x03, 0x04, 0x05, 0x06, 0x07, 0x08, 0x09])
        return cls(
            serial=fields[0],
            subject_id=fields[1].decode(),
            sign_public=fields[2],
            ka_public=fields[3],
            role=Role(fields[4].decode()),
            not_before=wire.read_u64(fields[5]),
            not_after=wire.read_u64(fields[6]),
            issuer_id=fields[7].decode(),
            issuer_signature=fields[8],
        )

    def digest(self) -> bytes:
        return crypto.hash_bytes(self.encode())


@dataclass(frozen=True)
class RevocationList:
    sequence: int
    issued_at: int
    issuer_id: str
    entries: tuple[tuple[bytes, RevocationReason], ...]  # sorted by serial
    issuer_signature: bytes

    def core_bytes(self) -> bytes:
        blob = b"".join(serial + bytes([reason.value]) for serial, reason in self.entries)
        return b"".join(
            (
                wire.encode_tlv(0x01, wire.u64(self.sequence)),
                wire.encode_tlv(0x02, wire.u64(self.issued_at)),
                wire.encode_tlv(0x03, self.issuer_id.encode()),
                wire.encode_tlv(0x04, blob),
            )
        )

    def encode(self) -> bytes:
        return self.core_bytes() + wire.encode_tlv(0x05, self.issuer_signature)

    @classmethod
    def decode(cls, data: bytes) -> "RevocationList":
        seq, issued, issuer, blob, sig = wire.decode_fields(data, [0x01, 0x02, 0x03, 0x04, 0x05])
        if len(blob) % 9 != 0:
            raise wire.WireError("revocation entries must be 9 bytes each")
        entries = tuple(
            (blob[i : i + 8], RevocationReason(blob[i + 8]))
            for i in range(0, len(blob), 9)
        )
        return cls(wire.read_u64(seq), wire.read_u64(issued), issuer.decode(), entries, sig)

    def revoked_serials(self) -> set[bytes]:
        return {serial for serial, _ in self.entries}


def verify_crl(crl: RevocationList, root_public: bytes) -> bool:
    return crypto.verify(root_public, DOMAIN_CRL, crl.core_bytes(), crl.issuer_signature)


def verify_certificate(
    cert: Certificate,
    root_public: bytes,
    crl: RevocationList | None,
    now: int,
) -> CertStatus:
    """Classify a certificate. BadSignature dominates Revoked dominates Expired."""
    if not crypto.verify(root_public, DOMAIN_MEMBERSHIP, cert.core_bytes(), cert.issuer_signature):
        return CertStatus.BAD_SIGNATURE
    if crl is not None and cert.serial in crl.revoked_serials():
        return CertStatus.REVOKED
    if now < cert.not_before or now >= cert.not_after:
        return CertStatus.EXPIRED
    return CertStatus.VALID


# ---------------------------------------------------------------------------
# Persistence


class Storage:
    """Append-only record log. append() must be durable when it returns."""

    def append(self, record: bytes) -> None:
        raise NotImplementedError

    def load(self) -> list[bytes]:
        raise NotImplementedError


class MemoryStorage(Storage):
    def __init__(self):
        self.records: list[bytes] = []
        self.fail_appends = False  # test hook: simulate a dead disk

    def append(self, record: bytes) -> None:
        if self.fail_appends:
            raise OSError("storage unavailable")
        self.records.append(record)

    def load(self) -> list[bytes]:
        return list(self.records)


class FileStorage(Storage):
    """Length-prefixed records in one file, fsync'd per append."""

    def __init__(self, path: str):
        self.path = path

    def append(self, record: bytes) -> None:
        with open(self.path, "ab") as fh:
            fh.write(wire.u32(len(record)) + record)
            fh.flush()
            os.fsync(fh.fileno())

    def load(self) -> list[bytes]:
        records = []
        if not os.path.exists(self.path):
            return records
        with open(self.path, "rb") as fh:
            data = fh.read()
        offset = 0
        while offset + 4 <= len(data):
            length = wire.read_u32(data[offset : offset + 4])
            end = offset + 4 + length
            if end > len(data):
                break  # torn tail from a crash mid-write; ignore
            records.append(data[offset + 4 : end])
            offset = end
        return records


RECORD_INIT = 0x01
RECORD_ISSUE = 0x02
RECORD_REVOKE = 0x03


@dataclass
class CaState:
    profile: CipherProfile
    issuer_id: str
    root_pair: KeyPair
    root_cert: Certificate
    allowed_roles: set[Role]
    default_validity: int
    storage: Storage
    issued: dict[bytes, Certificate] = field(default_factory=dict)
    revoked: dict[bytes, RevocationReason] = field(default_factory=dict)
    crl_sequence: int = 0
    next_serial: int = 1
    read_only: bool = False

    @property
    def root_public(self) -> bytes:
        return self.root_pair.public


def _sign_cert(core: bytes, root_secret: bytes) -> bytes:
    return crypto.sign(root_secret, DOMAIN_MEMBERSHIP, core)


def _make_root_cert(issuer_id: str, pair: KeyPair, ka_public: bytes, now: int, validity: int) -> Certificate:
    partial = Certificate(
        serial=wire.u64(0),
        subject_id=issuer_id,
        sign_public=pair.public,
        ka_public=ka_public,
        role=Role.TRUST_CENTER,
        not_before=now,
        not_after=now + validity,
        issuer_id=issuer_id,
        issuer_signature=b"",
    )
    sig = _sign_cert(partial.core_bytes(), pair.secret)
    return Certificate(**{**partial.__dict__, "issuer_signature": sig})


def ca_init(
    profile: CipherProfile,
    rng: Random,
    storage: Storage,
    issuer_id: str = "tc",
    allowed_roles: set[Role] | None = None,
    default_validity: int = 10**6,
    now: int = 0,
) -> CaState:
    """Create a fresh authority and durably record its root material."""
    root_pair = crypto.generate_keypair(profile, KeyRole.SIGNING, rng)
    ka_pair = crypto.generate_keypair(profile, KeyRole.KEY_AGREEMENT, rng)
    root_cert = _make_root_cert(issuer_id, root_pair, ka_pair.public, now, default_validity * 100)
    ca = CaState(
        profile=profile,
        issuer_id=issuer_id,
        root_pair=root_pair,
        root_cert=root_cert,
        allowed_roles=allowed_roles or {Role.REPLICA, Role.CLIENT},
        default_validity=default_validity,
        storage=storage,
    )
    payload = b"".join(
        (
            wire.encode_tlv(0x01, issuer_id.encode()),
            wire.encode_tlv(0x02, root_pair.secret),
            wire.encode_tlv(0x03, root_cert.encode()),
            wire.encode_tlv(0x04, wire.u64(default_validity)),
            wire.encode_tlv(0x05, ",".join(sorted(r.value for r in ca.allowed_roles)).encode()),
        )
    )
    _persist(ca, wire.encode_tlv(RECORD_INIT, payload))
    return ca


def ca_load(profile: CipherProfile, storage: Storage) -> CaState:
    """Rebuild authority state by replaying the write-ahead log."""
    records = storage.load()
    if not records:
        raise CaError("storage holds no authority state")
    ca: CaState | None = None
    for record in records:
        tag, value, _ = wire.decode_tlv(record)
        if tag == RECORD_INIT:
            issuer, secret, cert_bytes, validity, roles = wire.decode_fields(
                value, [0x01, 0x02, 0x03, 0x04, 0x05]
            )
            root_cert = Certificate.decode(cert_bytes)
            pair = KeyPair(
                role=KeyRole.SIGNING,
                secret=secret,
                public=crypto.signing_public_from_secret(secret),
            )
            ca = CaState(
                profile=profile,
                issuer_id=issuer.decode(),
                root_pair=pair,
                root_cert=root_cert,
                allowed_roles={Role(r) for r in roles.decode().split(",")},
                default_validity=wire.read_u64(validity),
                storage=storage,
            )
        elif tag == RECORD_ISSUE:
            assert ca is not None
            cert = Certificate.decode(value)
            ca.issued[cert.serial] = cert
            ca.next_serial = max(ca.next_serial, wire.read_u64(cert.serial) + 1)
        elif tag == RECORD_REVOKE:
            assert ca is not None
            serial, reason, _at = wire.decode_fields(value, [0x01, 0x02, 0x03])
            ca.revoked.setdefault(serial, RevocationReason(wire.read_u8(reason)))
            ca.crl_sequence += 1
    if ca is None:
        raise CaError("log is missing its init record")
    return ca


def _persist(ca: CaState, record: bytes) -> None:
    if ca.read_only:
        raise PersistenceFailure("authority is read-only after a storage failure")
    try:
        ca.storage.append(record)
    except OSError as exc:
        ca.read_only = True
        raise PersistenceFailure(str(exc)) from exc


def issue_certificate(ca: CaState, csr: Csr, now: int, validity: int | None = None) -> Certificate:
    if csr.role not in ca.allowed_roles:
        raise RoleNotPermitted(f"role {csr.role.value} not in the allowed set")
    if not crypto.verify(csr.sign_public, DOMAIN_MEMBERSHIP, csr.signed_bytes(), csr.proof_of_possession):
        raise BadProofOfPossession("CSR proof-of-possession failed")
    for cert in ca.issued.values():
        if (
            cert.subject_id == csr.subject_id
            and cert.role == csr.role
            and cert.serial not in ca.revoked
            and now < cert.not_after
        ):
            raise DuplicateSubjectForRole(
                f"{csr.subject_id} already holds an active {csr.role.value} certificate"
            )
    serial = wire.u64(ca.next_serial)
    partial = Certificate(
        serial=serial,
        subject_id=csr.subject_id,
        sign_public=csr.sign_public,
        ka_public=csr.ka_public,
        role=csr.role,
        not_before=now,
        not_after=now + (validity if validity is not None else ca.default_validity),
        issuer_id=ca.issuer_id,
        issuer_signature=b"",
    )
    cert = Certificate(
        **{**partial.__dict__, "issuer_signature": _sign_cert(partial.core_bytes(), ca.root_pair.secret)}
    )
    _persist(ca, wire.encode_tlv(RECORD_ISSUE, cert.encode()))
    ca.issued[serial] = cert
    ca.next_serial += 1
    return cert


def revoke(ca: CaState, serial: bytes, reason: RevocationReason, now: int) -> RevocationList:
    """Revoke a serial. Re-revocation keeps the set unchanged but still
    advances the CRL sequence and re-publishes."""
    if serial not in ca.issued and serial != ca.root_cert.serial:
        raise UnknownSerial(f"serial {serial.hex()} was never issued")
    record = b"".join(
        (
            wire.encode_tlv(0x01, serial),
            wire.encode_tlv(0x02, wire.u8(reason.value)),
            wire.encode_tlv(0x03, wire.u64(now)),
        )
    )
    _persist(ca, wire.encode_tlv(RECORD_REVOKE, record))
    ca.revoked.setdefault(serial, reason)
    ca.crl_sequence += 1
    return current_crl(ca, now)


def current_crl(ca: CaState, now: int) -> RevocationList:
    entries = tuple(sorted(ca.revoked.items(), key=lambda item: item[0]))
    partial = RevocationList(
        sequence=ca.crl_sequence,
        issued_at=now,
        issuer_id=ca.issuer_id,
        entries=entries,
        issuer_signature=b"",
    )
    sig = crypto.sign(ca.root_pair.secret, DOMAIN_CRL, partial.core_bytes())
    return RevocationList(ca.crl_sequence, now, ca.issuer_id, entries, sig)


# ---------------------------------------------------------------------------
# Service layer

STATUS_OK = 0
STATUS_BAD_POP = 1
STATUS_ROLE_NOT_PERMITTED = 2
STATUS_DUPLICATE_SUBJECT = 3
STATUS_PERSISTENCE = 4
STATUS_MALFORMED = 5
STATUS_READ_ONLY = 6

_ERROR_STATUS = {
    BadProofOfPossession: STATUS_BAD_POP,
    RoleNotPermitted: STATUS_ROLE_NOT_PERMITTED,
    DuplicateSubjectForRole: STATUS_DUPLICATE_SUBJECT,
    PersistenceFailure: STATUS_PERSISTENCE,
}


def serve(ca: CaState, frame: bytes, now: int) -> bytes:
    """Handle one request frame, returning a signed response frame.

    Mutations hit the write-ahead log before the response is built; after a
    persistence failure the authority keeps answering reads but refuses writes.
    """
    try:
        tag, value, _ = wire.decode_tlv(frame)
    except wire.WireError:
        return _response(ca, 0, STATUS_MALFORMED, b"")
    if tag == wire.FRAME_TC_SUBMIT_CSR:
        if ca.read_only:
            return _response(ca, tag, STATUS_READ_ONLY, b"")
        try:
            cert = issue_certificate(ca, Csr.decode(value), now)
            return _response(ca, tag, STATUS_OK, cert.encode())
        except wire.WireError:
            return _response(ca, tag, STATUS_MALFORMED, b"")
        except CaError as exc:
            return _response(ca, tag, _ERROR_STATUS.get(type(exc), STATUS_MALFORMED), b"")
    if tag == wire.FRAME_TC_FETCH_CRL:
        return _response(ca, tag, STATUS_OK, current_crl(ca, now).encode())
    if tag == wire.FRAME_TC_FETCH_ROOT:
        return _response(ca, tag, STATUS_OK, ca.root_cert.encode())
    return _response(ca, tag, STATUS_MALFORMED, b"")


def _response(ca: CaState, req_type: int, status: int, payload: bytes) -> bytes:
    body = (
        wire.encode_tlv(0x01, wire.u8(req_type))
        + wire.encode_tlv(0x02, wire.u8(status))
        + wire.encode_tlv(0x03, payload)
    )
    sig = crypto.sign(ca.root_pair.secret, DOMAIN_MEMBERSHIP, body)
    return wire.encode_tlv(wire.FRAME_TC_RESPONSE, body + wire.encode_tlv(0x04, sig))


def parse_response(frame: bytes, root_public: bytes | None = None) -> tuple[int, int, bytes]:
    """Decode (req_type, status, payload); verifies the signature when the
    caller already knows the root."""
    tag, value, _ = wire.decode_tlv(frame)
    if tag != wire.FRAME_TC_RESPONSE:
        raise wire.WireError(f"not a trust-center response: 0x{tag:02x}")
    req_type, status, payload, sig = wire.decode_fields(value, [0x01, 0x02, 0x03, 0x04])
    if root_public is not None:
        body = (
            wire.encode_tlv(0x01, req_type)
            + wire.encode_tlv(0x02, status)
            + wire.encode_tlv(0x03, payload)
        )
        if not crypto.verify(root_public, DOMAIN_MEMBERSHIP, body, sig):
            raise CaError("response signature invalid")
    return wire.read_u8(req_type), wire.read_u8(status), payload


def make_push_frame(ca: CaState, now: int) -> bytes:
    return wire.encode_tlv(wire.FRAME_TC_PUSH_CRL, current_crl(ca, now).encode())
