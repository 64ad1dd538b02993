"""Admission gate tests: exhaustive precedence table, revocation-data aging,
offense scoring, and token bucket behaviour."""

import dataclasses
from itertools import product
from random import Random

import pytest
from hypothesis import given, strategies as st

from bftkit import admission, ca, crypto
from bftkit.admission import (
    AccessController,
    Blacklist,
    CrlCache,
    CrlFreshness,
    RateLimiter,
    TokenBucket,
    CTX_HANDSHAKE,
    CTX_CONSENSUS,
)
from bftkit.ca import MemoryStorage, Role
from bftkit.crypto import KeyRole, PROFILE_TEST_SMALL as SMALL


WINDOW = 10


def make_authority():
    return ca.ca_init(SMALL, Random(0), MemoryStorage(), now=0)


def issue_member(authority, name="alice", role=Role.CLIENT, seed=1, now=0):
    rng = Random(seed)
    sign_pair = crypto.generate_keypair(SMALL, KeyRole.SIGNING, rng)
    ka_pair = crypto.generate_keypair(SMALL, KeyRole.KEY_AGREEMENT, rng)
    csr = ca.make_csr(name, sign_pair, ka_pair, role)
    return ca.issue_certificate(authority, csr, now=now)


def controller_for(authority, now=0, **kwargs):
    cache = CrlCache(WINDOW)
    cache.install(ca.current_crl(authority, now), now)
    return AccessController(
        root_public=authority.root_pair.public, crl_cache=cache, **kwargs
    )


class TestPrecedenceTable:
    """Every combination of failing factors resolves to the documented
    first-failure reason. 32 combinations, one fresh gate each."""

    @staticmethod
    def expected_reason(bad_sig, revoked, blacklisted, rate_empty, policy_block):
        if bad_sig:
            return admission.REASON_BAD_SIGNATURE
        if revoked:
            return admission.REASON_REVOKED
        if blacklisted:
            return admission.REASON_BLACKLISTED
        if rate_empty:
            return admission.REASON_RATE_LIMITED
        if policy_block:
            return admission.REASON_POLICY
        return admission.REASON_OK

    def test_all_32_combinations(self):
        for combo in product([False, True], repeat=5):
            bad_sig, revoked, blacklisted, rate_empty, policy_block = combo
            authority = make_authority()
            cert = issue_member(authority)
            if revoked:
                ca.revoke(authority, cert.serial, ca.RevocationReason.COMPROMISED, now=0)
            policy = (lambda c, ctx: "blocked") if policy_block else None
            gate = controller_for(authority, policy=policy)
            if bad_sig:
                cert = dataclasses.replace(cert, issuer_signature=b"\xee" * 64)
            if blacklisted:
                gate.blacklist.report("addr", "equivocation", 0)
            if rate_empty:
                bucket = gate.limiter.bucket("addr", CTX_HANDSHAKE, 0)
                assert bucket.try_take(0, bucket.capacity)
            decision = gate.admit(cert, CTX_HANDSHAKE, now=0, source_key="addr")
            want = self.expected_reason(*combo)
            assert decision.reason == want, f"combo {combo}"
            assert decision.allowed == (want == admission.REASON_OK)

    def test_expiry_precedence_seams(self):
        authority = make_authority()
        cert = issue_member(authority, now=0)
        expired_at = cert.not_after + 5

        gate = controller_for(authority)
        gate.crl_cache.install(ca.current_crl(authority, expired_at), expired_at)
        assert gate.admit(cert, CTX_HANDSHAKE, expired_at).reason == admission.REASON_EXPIRED

        # revocation outranks expiry
        ca.revoke(authority, cert.serial, ca.RevocationReason.REMOVED, now=0)
        gate2 = controller_for(authority, now=expired_at)
        assert gate2.admit(cert, CTX_HANDSHAKE, expired_at).reason == admission.REASON_REVOKED

        # a bad signature outranks both
        bad = dataclasses.replace(cert, issuer_signature=b"\x00" * 64)
        assert gate2.admit(bad, CTX_HANDSHAKE, expired_at).reason == admission.REASON_BAD_SIGNATURE

        # expiry outranks the blacklist (fresh cert; the first one is revoked now)
        other = issue_member(authority, "bob", seed=9, now=0)
        gate3 = controller_for(authority, now=expired_at)
        gate3.blacklist.report("addr", "equivocation", expired_at)
        d = gate3.admit(other, CTX_HANDSHAKE, expired_at, source_key="addr")
        assert d.reason == admission.REASON_EXPIRED

    def test_no_certificate(self):
        gate = controller_for(make_authority())
        d = gate.admit(None, CTX_HANDSHAKE, 0, source_key="addr")
        assert not d.allowed and d.reason == admission.REASON_NO_CERTIFICATE

    def test_garbage_certificate_counts_as_bad_signature(self):
        authority = make_authority()
        cert = issue_member(authority)
        mangled = dataclasses.replace(cert, issuer_signature=b"\x01\x02")
        gate = controller_for(authority)
        assert gate.admit(mangled, CTX_HANDSHAKE, 0).reason == admission.REASON_BAD_SIGNATURE

    def test_exactly_one_verify_per_admit(self):
        authority = make_authority()
        cert = issue_member(authority)
        gate = controller_for(authority)
        gate.blacklist.report("addr", "equivocation", 0)
        gate.admit(cert, CTX_HANDSHAKE, 0, source_key="addr")
        assert gate.verify_calls == 1
        for _ in range(9):
            gate.admit(cert, CTX_HANDSHAKE, 0, source_key="addr")
        assert gate.verify_calls == 10

    def test_denied_admit_spends_no_token(self):
        authority = make_authority()
        cert = issue_member(authority)
        gate = controller_for(authority)
        for _ in range(10):
            gate.blacklist.report("addr", "bad_signature", 0)
        assert gate.blacklist.is_blocked("addr", 0)
        for _ in range(60):
            assert gate.admit(cert, CTX_HANDSHAKE, 0, source_key="addr").reason == admission.REASON_BLACKLISTED
        # one tick later the score has decayed below the block threshold
        results = [gate.admit(cert, CTX_HANDSHAKE, 1, source_key="addr") for _ in range(60)]
        allowed = [r for r in results if r.allowed]
        assert len(allowed) == 50  # full handshake burst, untouched by the denials
        assert all(r.reason == admission.REASON_RATE_LIMITED for r in results[50:])

    def test_bad_signature_accrues_offense_on_serial_too(self):
        authority = make_authority()
        cert = issue_member(authority)
        bad = dataclasses.replace(cert, issuer_signature=b"\xaa" * 64)
        gate = controller_for(authority)
        for _ in range(10):
            gate.admit(bad, CTX_HANDSHAKE, 0, source_key="addr")
        assert gate.blacklist.is_blocked("addr", 0)
        assert gate.blacklist.is_blocked(f"serial:{cert.serial.hex()}", 0)

    def test_role_policy(self):
        authority = make_authority()
        client_cert = issue_member(authority, "c1", Role.CLIENT, seed=3)
        replica_cert = issue_member(authority, "r1", Role.REPLICA, seed=4)
        policy = admission.role_policy({CTX_CONSENSUS: {Role.REPLICA}})
        gate = controller_for(authority, policy=policy)
        assert gate.admit(replica_cert, CTX_CONSENSUS, 0).allowed
        assert gate.admit(client_cert, CTX_CONSENSUS, 0).reason == admission.REASON_POLICY
        assert gate.admit(client_cert, CTX_HANDSHAKE, 0).allowed  # unlisted context


class TestCrlCache:
    def test_freshness_boundaries(self):
        authority = make_authority()
        cache = CrlCache(WINDOW)
        assert cache.freshness(0) == CrlFreshness.EXPIRED  # nothing installed yet
        cache.install(ca.current_crl(authority, 0), now=0)
        assert cache.freshness(WINDOW) == CrlFreshness.FRESH
        assert cache.freshness(WINDOW + 1) == CrlFreshness.STALE
        assert cache.freshness(3 * WINDOW) == CrlFreshness.STALE
        assert cache.freshness(3 * WINDOW + 1) == CrlFreshness.EXPIRED

    def test_grace_flip(self):
        """Stale data is honoured through the grace period then fails closed."""
        authority = make_authority()
        cert = issue_member(authority)
        gate = controller_for(authority)
        d_fresh = gate.admit(cert, CTX_HANDSHAKE, WINDOW)
        assert d_fresh.allowed and not d_fresh.stale_crl
        d_stale = gate.admit(cert, CTX_HANDSHAKE, WINDOW + 1)
        assert d_stale.allowed and d_stale.stale_crl
        d_edge = gate.admit(cert, CTX_HANDSHAKE, 3 * WINDOW)
        assert d_edge.allowed and d_edge.stale_crl
        d_closed = gate.admit(cert, CTX_HANDSHAKE, 3 * WINDOW + 1)
        assert not d_closed.allowed
        assert d_closed.reason == admission.REASON_CRL_UNAVAILABLE

    def test_refresh_restores_service(self):
        authority = make_authority()
        cert = issue_member(authority)
        gate = controller_for(authority)
        far = 3 * WINDOW + 50
        assert not gate.admit(cert, CTX_HANDSHAKE, far).allowed
        gate.crl_cache.install(ca.current_crl(authority, far), now=far)
        assert gate.admit(cert, CTX_HANDSHAKE, far).allowed

    def test_sequence_monotonic(self):
        authority = make_authority()
        cert = issue_member(authority)
        crl0 = ca.current_crl(authority, 0)
        ca.revoke(authority, cert.serial, ca.RevocationReason.COMPROMISED, 0)
        crl1 = ca.current_crl(authority, 0)
        cache = CrlCache(WINDOW)
        assert cache.install(crl1, now=0)
        assert not cache.install(crl0, now=5)  # regression rejected
        assert cache.current is crl1
        assert cache.last_refreshed == 0  # rejected fetch does not refresh
        assert cache.install(crl1, now=7)  # same sequence refreshes the clock
        assert cache.last_refreshed == 7

    def test_install_checks_signature(self):
        authority = make_authority()
        crl = ca.current_crl(authority, 0)
        forged = dataclasses.replace(crl, issuer_signature=b"\x99" * 64)
        cache = CrlCache(WINDOW)
        assert not cache.install(forged, now=0, root_public=authority.root_pair.public)
        assert cache.install(crl, now=0, root_public=authority.root_pair.public)

    def test_bad_signature_reported_even_without_crl(self):
        authority = make_authority()
        cert = issue_member(authority)
        bad = dataclasses.replace(cert, issuer_signature=b"\xbb" * 64)
        gate = AccessController(
            root_public=authority.root_pair.public, crl_cache=CrlCache(WINDOW)
        )
        assert gate.admit(bad, CTX_HANDSHAKE, 0).reason == admission.REASON_BAD_SIGNATURE
        assert gate.admit(cert, CTX_HANDSHAKE, 0).reason == admission.REASON_CRL_UNAVAILABLE


class TestBlacklist:
    def test_offense_weights(self):
        bl = Blacklist()
        assert bl.report("k", "bad_cookie", 0) == 1
        assert bl.report("k", "malformed", 0) == 6
        assert bl.report("k", "bad_signature", 0) == 16

    def test_block_at_threshold(self):
        bl = Blacklist()
        for i in range(9):
            bl.report("k", "bad_signature", 0)
            assert not bl.is_blocked("k", 0)
        bl.report("k", "bad_signature", 0)
        assert bl.is_blocked("k", 0)

    def test_linear_decay_unblocks(self):
        bl = Blacklist()
        for _ in range(10):
            bl.report("k", "bad_signature", 0)
        assert bl.is_blocked("k", 0)
        assert bl.score("k", 40) == 60
        assert not bl.is_blocked("k", 1)
        assert bl.score("k", 200) == 0

    def test_equivocation_is_permanent(self):
        bl = Blacklist()
        bl.report("k", "equivocation", 0)
        assert bl.is_blocked("k", 10**9)

    def test_unknown_kind(self):
        with pytest.raises(admission.AdmissionError, match="unknown offense"):
            Blacklist().report("k", "tardiness", 0)

    def test_decay_applies_between_reports(self):
        bl = Blacklist(decay_per_unit=2.0)
        bl.report("k", "bad_signature", 0)
        assert bl.report("k", "bad_signature", 3) == 14  # 10 - 6 decay + 10

    def test_blocked_keys_listing(self):
        bl = Blacklist()
        bl.report("b", "equivocation", 0)
        bl.report("a", "equivocation", 0)
        bl.report("c", "bad_cookie", 0)
        assert bl.blocked_keys(0) == ["a", "b"]


class TestTokenBucket:
    def test_burst_then_exactly_one_rejection(self):
        bucket = TokenBucket(50, 10)
        results = [bucket.try_take(0) for _ in range(51)]
        assert results.count(True) == 50
        assert results[-1] is False

    def test_refill_rate(self):
        bucket = TokenBucket(50, 10)
        assert bucket.try_take(0, 50)
        assert not bucket.try_take(0)
        taken = [bucket.try_take(1) for _ in range(11)]
        assert taken.count(True) == 10

    def test_never_exceeds_capacity(self):
        bucket = TokenBucket(5, 100)
        bucket.try_take(0)
        assert bucket.peek(1000) == 5

    @given(
        st.lists(
            st.tuples(st.integers(min_value=0, max_value=5), st.integers(min_value=1, max_value=4)),
            max_size=50,
        )
    )
    def test_throughput_bound(self, ops):
        """Successful takes can never exceed capacity plus refilled volume."""
        bucket = TokenBucket(20, 3)
        now = 0
        granted = 0
        for advance, amount in ops:
            now += advance
            if bucket.try_take(now, amount):
                granted += amount
            assert 0 <= bucket.level <= 20
        assert granted <= 20 + 3 * now

    def test_contexts_are_isolated(self):
        limiter = RateLimiter()
        for _ in range(50):
            assert limiter.try_take("k", CTX_HANDSHAKE, 0)
        assert not limiter.try_take("k", CTX_HANDSHAKE, 0)
        assert limiter.try_take("k", CTX_CONSENSUS, 0)
        assert limiter.try_take("other", CTX_HANDSHAKE, 0)


class TestAudit:
    def test_line_format(self):
        authority = make_authority()
        cert = issue_member(authority)
        gate = controller_for(authority)
        d = gate.admit(cert, CTX_HANDSHAKE, 5, source_key="addr1")
        assert d.line() == "t=5 ctx=handshake key=addr1 subject=alice decision=allow reason=ok stale=0"
        d2 = gate.admit(None, CTX_HANDSHAKE, 6)
        assert d2.line() == "t=6 ctx=handshake key=- subject=- decision=deny reason=no_certificate stale=0"

    def test_sink_receives_every_decision(self):
        authority = make_authority()
        cert = issue_member(authority)
        lines = []
        gate = controller_for(authority, audit_sink=lines.append)
        gate.admit(cert, CTX_HANDSHAKE, 0)
        gate.admit(None, CTX_HANDSHAKE, 1)
        assert len(lines) == 2 and len(gate.audit) == 2
        assert lines == [d.line() for d in gate.audit]
