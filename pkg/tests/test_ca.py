"""Trust-center tests: issuance, revocation, classification precedence, the
write-ahead log, and the service layer."""

from random import Random

import pytest
from hypothesis import given, settings, strategies as st

from bftkit import ca as tc
from bftkit import crypto, wire
from bftkit.ca import (
    CertStatus,
    Csr,
    FileStorage,
    MemoryStorage,
    RevocationReason,
    Role,
    ca_init,
    ca_load,
    current_crl,
    issue_certificate,
    make_csr,
    revoke,
    serve,
    verify_certificate,
)
from bftkit.crypto import KeyRole, PROFILE_TEST_SMALL as SMALL


def subject_keys(seed):
    rng = Random(seed)
    sign = crypto.generate_keypair(SMALL, KeyRole.SIGNING, rng)
    ka = crypto.generate_keypair(SMALL, KeyRole.KEY_AGREEMENT, rng)
    return sign, ka


@pytest.fixture
def authority():
    return ca_init(SMALL, Random(1), MemoryStorage(), default_validity=1000)


class TestIssuance:
    def test_issue_then_valid(self, authority):
        sign, ka = subject_keys(10)
        cert = issue_certificate(authority, make_csr("r0", sign, ka, Role.REPLICA), now=5)
        crl = current_crl(authority, 5)
        assert verify_certificate(cert, authority.root_public, crl, 5) is CertStatus.VALID

    def test_serials_are_unique_and_sequential(self, authority):
        serials = []
        for i in range(5):
            sign, ka = subject_keys(20 + i)
            cert = issue_certificate(authority, make_csr(f"n{i}", sign, ka, Role.REPLICA), now=0)
            serials.append(cert.serial)
        assert len(set(serials)) == 5
        assert all(len(s) == 8 for s in serials)

    def test_bad_proof_of_possession(self, authority):
        sign, ka = subject_keys(11)
        other, _ = subject_keys(12)
        csr = Csr(
            subject_id="mallory",
            sign_public=sign.public,
            ka_public=ka.public,
            role=Role.REPLICA,
            proof_of_possession=crypto.sign(
                other.secret,
                crypto.DOMAIN_MEMBERSHIP,
                tc.csr_signed_bytes("mallory", sign.public, ka.public, Role.REPLICA),
            ),
        )
        with pytest.raises(tc.BadProofOfPossession):
            issue_certificate(authority, csr, now=0)

    def test_role_not_permitted(self):
        authority = ca_init(SMALL, Random(1), MemoryStorage(), allowed_roles={Role.CLIENT})
        sign, ka = subject_keys(13)
        with pytest.raises(tc.RoleNotPermitted):
            issue_certificate(authority, make_csr("r0", sign, ka, Role.REPLICA), now=0)

    def test_duplicate_subject_for_role(self, authority):
        sign, ka = subject_keys(14)
        issue_certificate(authority, make_csr("r0", sign, ka, Role.REPLICA), now=0)
        with pytest.raises(tc.DuplicateSubjectForRole):
            issue_certificate(authority, make_csr("r0", sign, ka, Role.REPLICA), now=1)

    def test_same_subject_other_role_allowed(self, authority):
        sign, ka = subject_keys(15)
        issue_certificate(authority, make_csr("n0", sign, ka, Role.REPLICA), now=0)
        issue_certificate(authority, make_csr("n0", sign, ka, Role.CLIENT), now=0)

    def test_reissue_after_revocation_allowed(self, authority):
        sign, ka = subject_keys(16)
        cert = issue_certificate(authority, make_csr("r0", sign, ka, Role.REPLICA), now=0)
        revoke(authority, cert.serial, RevocationReason.COMPROMISED, now=1)
        issue_certificate(authority, make_csr("r0", sign, ka, Role.REPLICA), now=2)

    def test_reissue_after_expiry_allowed(self, authority):
        sign, ka = subject_keys(17)
        issue_certificate(authority, make_csr("r0", sign, ka, Role.REPLICA), now=0, validity=10)
        issue_certificate(authority, make_csr("r0", sign, ka, Role.REPLICA), now=11)

    def test_certificate_roundtrip(self, authority):
        sign, ka = subject_keys(18)
        cert = issue_certificate(authority, make_csr("r0", sign, ka, Role.REPLICA), now=0)
        assert tc.Certificate.decode(cert.encode()) == cert


class TestClassification:
    def test_revoked(self, authority):
        sign, ka = subject_keys(30)
        cert = issue_certificate(authority, make_csr("r0", sign, ka, Role.REPLICA), now=0)
        crl = revoke(authority, cert.serial, RevocationReason.MISBEHAVIOR, now=1)
        assert verify_certificate(cert, authority.root_public, crl, 1) is CertStatus.REVOKED

    def test_expired(self, authority):
        sign, ka = subject_keys(31)
        cert = issue_certificate(authority, make_csr("r0", sign, ka, Role.REPLICA), now=0, validity=100)
        crl = current_crl(authority, 100)
        assert verify_certificate(cert, authority.root_public, crl, 100) is CertStatus.EXPIRED
        assert verify_certificate(cert, authority.root_public, crl, 99) is CertStatus.VALID

    def test_not_yet_valid_is_expired_class(self, authority):
        sign, ka = subject_keys(32)
        cert = issue_certificate(authority, make_csr("r0", sign, ka, Role.REPLICA), now=50)
        crl = current_crl(authority, 0)
        assert verify_certificate(cert, authority.root_public, crl, 10) is CertStatus.EXPIRED

    def test_truth_table(self, authority):
        """Exhaustive signature x validity x revocation classification."""
        for sig_ok in (True, False):
            for within_window in (True, False):
                for revoked_flag in (True, False):
                    a = ca_init(SMALL, Random(2), MemoryStorage(), default_validity=100)
                    sign, ka = subject_keys(33)
                    cert = issue_certificate(a, make_csr("s", sign, ka, Role.REPLICA), now=0)
                    if revoked_flag:
                        revoke(a, cert.serial, RevocationReason.COMPROMISED, now=1)
                    if not sig_ok:
                        broken = bytearray(cert.issuer_signature)
                        broken[0] ^= 0xFF
                        cert = tc.Certificate(
                            **{**cert.__dict__, "issuer_signature": bytes(broken)}
                        )
                    now = 50 if within_window else 200
                    got = verify_certificate(cert, a.root_public, current_crl(a, now), now)
                    if not sig_ok:
                        expected = CertStatus.BAD_SIGNATURE
                    elif revoked_flag:
                        expected = CertStatus.REVOKED
                    elif not within_window:
                        expected = CertStatus.EXPIRED
                    else:
                        expected = CertStatus.VALID
                    assert got is expected, (sig_ok, within_window, revoked_flag)

    def test_wrong_root_is_bad_signature(self, authority):
        sign, ka = subject_keys(34)
        cert = issue_certificate(authority, make_csr("r0", sign, ka, Role.REPLICA), now=0)
        other = ca_init(SMALL, Random(99), MemoryStorage())
        status = verify_certificate(cert, other.root_public, None, 0)
        assert status is CertStatus.BAD_SIGNATURE


class TestRevocation:
    def test_unknown_serial(self, authority):
        with pytest.raises(tc.UnknownSerial):
            revoke(authority, wire.u64(777), RevocationReason.REMOVED, now=0)

    def test_idempotent_set_but_sequence_advances(self, authority):
        sign, ka = subject_keys(40)
        cert = issue_certificate(authority, make_csr("r0", sign, ka, Role.REPLICA), now=0)
        crl1 = revoke(authority, cert.serial, RevocationReason.COMPROMISED, now=1)
        crl2 = revoke(authority, cert.serial, RevocationReason.REMOVED, now=2)
        assert crl1.revoked_serials() == crl2.revoked_serials()
        assert crl2.sequence == crl1.sequence + 1
        # first reason wins; the set is append-only
        assert dict(crl2.entries)[cert.serial] is RevocationReason.COMPROMISED

    def test_crl_signature_verifies(self, authority):
        crl = current_crl(authority, 7)
        assert tc.verify_crl(crl, authority.root_public)
        assert not tc.verify_crl(crl, subject_keys(3)[0].public)

    def test_crl_roundtrip(self, authority):
        sign, ka = subject_keys(41)
        cert = issue_certificate(authority, make_csr("r0", sign, ka, Role.REPLICA), now=0)
        crl = revoke(authority, cert.serial, RevocationReason.MISBEHAVIOR, now=3)
        assert tc.RevocationList.decode(crl.encode()) == crl

    @given(st.lists(st.sampled_from(["issue", "revoke"]), min_size=1, max_size=30))
    @settings(max_examples=40, deadline=None)
    def test_monotone_sequence_append_only_set(self, ops):
        """Any interleaving keeps crl_sequence strictly increasing and the
        revoked set append-only."""
        authority = ca_init(SMALL, Random(5), MemoryStorage())
        issued = []
        last_seq = 0
        last_set: set = set()
        n = 0
        for op in ops:
            if op == "issue" or not issued:
                sign, ka = subject_keys(1000 + n)
                issued.append(
                    issue_certificate(authority, make_csr(f"s{n}", sign, ka, Role.REPLICA), now=0)
                )
                n += 1
            else:
                crl = revoke(authority, issued[n % len(issued)].serial, RevocationReason.REMOVED, now=0)
                assert crl.sequence > last_seq
                assert crl.revoked_serials() >= last_set
                last_seq = crl.sequence
                last_set = crl.revoked_serials()


class TestPersistence:
    def test_crash_restart_preserves_state(self, tmp_path):
        """Issue three, revoke one, drop the object, reload from disk."""
        path = str(tmp_path / "ca.log")
        authority = ca_init(SMALL, Random(1), FileStorage(path), default_validity=1000)
        certs = []
        for i in range(3):
            sign, ka = subject_keys(50 + i)
            certs.append(
                issue_certificate(authority, make_csr(f"r{i}", sign, ka, Role.REPLICA), now=0)
            )
        crl_before = revoke(authority, certs[1].serial, RevocationReason.COMPROMISED, now=1)
        root_before = authority.root_public

        reloaded = ca_load(SMALL, FileStorage(path))
        assert reloaded.root_public == root_before
        crl_after = current_crl(reloaded, 1)
        assert crl_after.sequence == crl_before.sequence
        assert crl_after.revoked_serials() == crl_before.revoked_serials()
        for i, cert in enumerate(certs):
            expected = CertStatus.REVOKED if i == 1 else CertStatus.VALID
            assert verify_certificate(cert, reloaded.root_public, crl_after, 2) is expected

    def test_restart_continues_serials(self, tmp_path):
        path = str(tmp_path / "ca.log")
        authority = ca_init(SMALL, Random(1), FileStorage(path))
        sign, ka = subject_keys(60)
        first = issue_certificate(authority, make_csr("a", sign, ka, Role.REPLICA), now=0)
        reloaded = ca_load(SMALL, FileStorage(path))
        sign2, ka2 = subject_keys(61)
        second = issue_certificate(reloaded, make_csr("b", sign2, ka2, Role.REPLICA), now=0)
        assert wire.read_u64(second.serial) == wire.read_u64(first.serial) + 1

    def test_persistence_failure_blocks_mutations_serves_reads(self, authority):
        sign, ka = subject_keys(62)
        cert = issue_certificate(authority, make_csr("r0", sign, ka, Role.REPLICA), now=0)
        authority.storage.fail_appends = True
        sign2, ka2 = subject_keys(63)
        with pytest.raises(tc.PersistenceFailure):
            issue_certificate(authority, make_csr("r1", sign2, ka2, Role.REPLICA), now=0)
        with pytest.raises(tc.PersistenceFailure):
            revoke(authority, cert.serial, RevocationReason.REMOVED, now=0)
        # reads still work, and the read-only latch holds even if the disk heals
        assert current_crl(authority, 1).sequence == 0
        authority.storage.fail_appends = False
        with pytest.raises(tc.PersistenceFailure):
            issue_certificate(authority, make_csr("r1", sign2, ka2, Role.REPLICA), now=0)

    def test_torn_tail_ignored(self, tmp_path):
        path = str(tmp_path / "ca.log")
        authority = ca_init(SMALL, Random(1), FileStorage(path))
        with open(path, "ab") as fh:
            fh.write(wire.u32(100) + b"partial")
        reloaded = ca_load(SMALL, FileStorage(path))
        assert reloaded.root_public == authority.root_public


class TestService:
    def test_submit_csr_roundtrip(self, authority):
        sign, ka = subject_keys(70)
        frame = wire.encode_tlv(
            wire.FRAME_TC_SUBMIT_CSR, make_csr("r0", sign, ka, Role.REPLICA).encode()
        )
        req, status, payload = tc.parse_response(
            serve(authority, frame, now=0), authority.root_public
        )
        assert (req, status) == (wire.FRAME_TC_SUBMIT_CSR, tc.STATUS_OK)
        cert = tc.Certificate.decode(payload)
        assert cert.subject_id == "r0"
        assert verify_certificate(cert, authority.root_public, None, 0) is CertStatus.VALID

    def test_fetch_crl_and_root(self, authority):
        _, status, payload = tc.parse_response(
            serve(authority, wire.encode_tlv(wire.FRAME_TC_FETCH_CRL, b""), 0),
            authority.root_public,
        )
        assert status == tc.STATUS_OK
        assert tc.RevocationList.decode(payload).sequence == 0
        _, status, payload = tc.parse_response(
            serve(authority, wire.encode_tlv(wire.FRAME_TC_FETCH_ROOT, b""), 0),
            authority.root_public,
        )
        assert status == tc.STATUS_OK
        assert tc.Certificate.decode(payload) == authority.root_cert

    def test_response_signature_checked(self, authority):
        frame = serve(authority, wire.encode_tlv(wire.FRAME_TC_FETCH_CRL, b""), 0)
        tampered = bytearray(frame)
        tampered[-1] ^= 0x01
        with pytest.raises(tc.CaError, match="signature"):
            tc.parse_response(bytes(tampered), authority.root_public)

    def test_malformed_frame_gets_error_status(self, authority):
        _, status, _ = tc.parse_response(serve(authority, b"\x01\x00", 0))
        assert status == tc.STATUS_MALFORMED

    def test_duplicate_subject_status(self, authority):
        sign, ka = subject_keys(71)
        frame = wire.encode_tlv(
            wire.FRAME_TC_SUBMIT_CSR, make_csr("r0", sign, ka, Role.REPLICA).encode()
        )
        serve(authority, frame, 0)
        _, status, _ = tc.parse_response(serve(authority, frame, 0))
        assert status == tc.STATUS_DUPLICATE_SUBJECT

    def test_read_only_authority_still_serves_crl(self, authority):
        authority.storage.fail_appends = True
        sign, ka = subject_keys(72)
        frame = wire.encode_tlv(
            wire.FRAME_TC_SUBMIT_CSR, make_csr("rx", sign, ka, Role.REPLICA).encode()
        )
        _, status, _ = tc.parse_response(serve(authority, frame, 0))
        assert status == tc.STATUS_PERSISTENCE
        _, status, _ = tc.parse_response(
            serve(authority, wire.encode_tlv(wire.FRAME_TC_FETCH_CRL, b""), 0)
        )
        assert status == tc.STATUS_OK

    def test_push_frame_carries_current_crl(self, authority):
        sign, ka = subject_keys(73)
        cert = issue_certificate(authority, make_csr("r0", sign, ka, Role.REPLICA), now=0)
        revoke(authority, cert.serial, RevocationReason.COMPROMISED, now=1)
        tag, value, _ = wire.decode_tlv(tc.make_push_frame(authority, 1))
        assert tag == wire.FRAME_TC_PUSH_CRL
        assert cert.serial in tc.RevocationList.decode(value).revoked_serials()
