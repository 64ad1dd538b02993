"""Admission control: every inbound identity passes one gate.

The gate runs a fixed sequence of checks (certificate status, revocation
data freshness, blacklist, rate limit, policy) and emits one auditable
decision per call. Earlier checks win: a bad signature is reported as a
bad signature even when the sender is also rate limited, and a denial at
one stage never consumes resources at a later stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

from . import ca as ca_mod
from .ca import Certificate, CertStatus, RevocationList, verify_certificate


class AdmissionError(Exception):
    pass


# Denial reasons, in precedence order.
REASON_NO_CERTIFICATE = "no_certificate"
REASON_BAD_SIGNATURE = "bad_signature"
REASON_CRL_UNAVAILABLE = "crl_unavailable"
REASON_REVOKED = "revoked"
REASON_EXPIRED = "expired"
REASON_BLACKLISTED = "blacklisted"
REASON_RATE_LIMITED = "rate_limited"
REASON_POLICY = "policy"
REASON_OK = "ok"

# Rate limit contexts. Handshakes are the scarcest resource; consensus
# traffic between authenticated replicas gets far more headroom.
CTX_HANDSHAKE = "handshake"
CTX_CLIENT_REQUEST = "client_request"
CTX_CONSENSUS = "consensus"
CTX_DIRECTORY = "directory"

CONTEXT_LIMITS: dict[str, tuple[int, int]] = {
    # context -> (burst capacity, refill per time unit)
    CTX_HANDSHAKE: (50, 10),
    CTX_CLIENT_REQUEST: (200, 50),
    CTX_CONSENSUS: (2000, 500),
    CTX_DIRECTORY: (20, 5),
}
DEFAULT_LIMIT = (100, 20)


# ---------------------------------------------------------------------------
# Revocation data cache


class CrlFreshness:
    FRESH = "fresh"
    STALE = "stale"
    EXPIRED = "expired"


class CrlCache:
    """Latest revocation list plus an age-based trust policy.

    Within the freshness window decisions are normal. Past it, but within
    the grace period, the cached list is still used and decisions carry a
    stale mark. Past the grace period the cache fails closed.
    """

    def __init__(self, freshness_window: int, grace_windows: int = 3):
        if freshness_window <= 0:
            raise ValueError("freshness_window must be positive")
        self.freshness_window = freshness_window
        self.grace_windows = grace_windows
        self.current: RevocationList | None = None
        self.last_refreshed: int | None = None

    def install(self, crl: RevocationList, now: int, root_public: bytes | None = None) -> bool:
        """Adopt a list if it is current. Re-seeing the same sequence still
        refreshes the clock (proof the issuer is alive); an older sequence
        is rejected outright."""
        if root_public is not None and not ca_mod.verify_crl(crl, root_public):
            return False
        if self.current is not None and crl.sequence < self.current.sequence:
            return False
        if self.current is None or crl.sequence > self.current.sequence:
            self.current = crl
        self.last_refreshed = now
        return True

    def freshness(self, now: int) -> str:
        if self.last_refreshed is None:
            return CrlFreshness.EXPIRED
        age = now - self.last_refreshed
        if age <= self.freshness_window:
            return CrlFreshness.FRESH
        if age <= self.freshness_window * self.grace_windows:
            return CrlFreshness.STALE
        return CrlFreshness.EXPIRED


# ---------------------------------------------------------------------------
# Offense tracking


OFFENSE_SCORES = {
    "bad_signature": 10,
    "malformed": 5,
    "bad_cookie": 1,
    "equivocation": None,  # permanent
}


class Blacklist:
    """Offense scores with linear decay; blocking kicks in at a threshold.

    Equivocation is unforgivable: the entry is marked permanent and never
    decays. Everything else cools off at decay_per_unit points per tick.
    """

    def __init__(self, block_threshold: int = 100, decay_per_unit: float = 1.0):
        self.block_threshold = block_threshold
        self.decay_per_unit = decay_per_unit
        self._entries: dict[str, tuple[float, int, bool]] = {}  # score, last, permanent

    def _decayed(self, key: str, now: int) -> tuple[float, bool]:
        entry = self._entries.get(key)
        if entry is None:
            return 0.0, False
        score, last, permanent = entry
        if permanent:
            return score, True
        return max(0.0, score - self.decay_per_unit * (now - last)), False

    def report(self, key: str, kind: str, now: int) -> float:
        if kind not in OFFENSE_SCORES:
            raise AdmissionError(f"unknown offense kind: {kind}")
        score, permanent = self._decayed(key, now)
        points = OFFENSE_SCORES[kind]
        if points is None:
            score = max(score, float(self.block_threshold))
            permanent = True
        else:
            score += points
        self._entries[key] = (score, now, permanent)
        return score

    def score(self, key: str, now: int) -> float:
        return self._decayed(key, now)[0]

    def is_blocked(self, key: str, now: int) -> bool:
        score, permanent = self._decayed(key, now)
        return permanent or score >= self.block_threshold

    def blocked_keys(self, now: int) -> list[str]:
        return sorted(k for k in self._entries if self.is_blocked(k, now))


# ---------------------------------------------------------------------------
# Rate limiting


class TokenBucket:
    def __init__(self, capacity: int, refill_per_unit: int, now: int = 0):
        self.capacity = capacity
        self.refill_per_unit = refill_per_unit
        self.level = Fraction(capacity)
        self.last = now

    def _refill(self, now: int) -> None:
        if now > self.last:
            self.level = min(
                Fraction(self.capacity), self.level + Fraction(self.refill_per_unit) * (now - self.last)
            )
            self.last = now

    def peek(self, now: int) -> Fraction:
        self._refill(now)
        return self.level

    def try_take(self, now: int, amount: int = 1) -> bool:
        self._refill(now)
        if self.level >= amount:
            self.level -= amount
            return True
        return False


class RateLimiter:
    """Per (key, context) token buckets with per-context defaults."""

    def __init__(self, limits: dict[str, tuple[int, int]] | None = None):
        self.limits = dict(CONTEXT_LIMITS)
        if limits:
            self.limits.update(limits)
        self._buckets: dict[tuple[str, str], TokenBucket] = {}

    def bucket(self, key: str, context: str, now: int) -> TokenBucket:
        slot = (key, context)
        bucket = self._buckets.get(slot)
        if bucket is None:
            capacity, refill = self.limits.get(context, DEFAULT_LIMIT)
            bucket = TokenBucket(capacity, refill, now)
            self._buckets[slot] = bucket
        return bucket

    def try_take(self, key: str, context: str, now: int, amount: int = 1) -> bool:
        return self.bucket(key, context, now).try_take(now, amount)


# ---------------------------------------------------------------------------
# The gate


@dataclass
class Decision:
    timestamp: int
    context: str
    key: str
    subject: str
    allowed: bool
    reason: str
    stale_crl: bool = False

    def line(self) -> str:
        verdict = "allow" if self.allowed else "deny"
        stale = 1 if self.stale_crl else 0
        return (
            f"t={self.timestamp} ctx={self.context} key={self.key} "
            f"subject={self.subject} decision={verdict} reason={self.reason} stale={stale}"
        )


PolicyFn = Callable[[Certificate, str], str | None]


@dataclass
class AccessController:
    root_public: bytes
    crl_cache: CrlCache
    blacklist: Blacklist = field(default_factory=Blacklist)
    limiter: RateLimiter = field(default_factory=RateLimiter)
    policy: PolicyFn | None = None
    audit_sink: Callable[[str], None] | None = None
    verify_calls: int = 0
    audit: list[Decision] = field(default_factory=list)

    def _record(self, decision: Decision) -> Decision:
        self.audit.append(decision)
        if self.audit_sink is not None:
            self.audit_sink(decision.line())
        return decision

    def admit(
        self,
        cert: Certificate | None,
        context: str,
        now: int,
        source_key: str | None = None,
    ) -> Decision:
        """One decision per call; total over any input, never raises.

        Check order is fixed: certificate signature, revocation-data
        availability, revocation, expiry, blacklist, rate limit, policy.
        The first failing check names the denial and later stages are not
        touched (in particular no token is spent on a denied call)."""
        subject = cert.subject_id if cert is not None else "-"
        key = source_key if source_key is not None else subject

        def deny(reason: str, stale: bool = False) -> Decision:
            return self._record(
                Decision(now, context, key, subject, False, reason, stale)
            )

        if cert is None:
            return deny(REASON_NO_CERTIFICATE)

        freshness = self.crl_cache.freshness(now)
        stale = freshness == CrlFreshness.STALE
        crl = self.crl_cache.current

        self.verify_calls += 1
        try:
            status = verify_certificate(cert, self.root_public, crl, now)
        except Exception:
            status = CertStatus.BAD_SIGNATURE

        if status == CertStatus.BAD_SIGNATURE:
            self.blacklist.report(key, "bad_signature", now)
            if key != subject:
                self.blacklist.report(f"serial:{cert.serial.hex()}", "bad_signature", now)
            return deny(REASON_BAD_SIGNATURE, stale)
        if freshness == CrlFreshness.EXPIRED:
            return deny(REASON_CRL_UNAVAILABLE)
        if status == CertStatus.REVOKED:
            return deny(REASON_REVOKED, stale)
        if status == CertStatus.EXPIRED:
            return deny(REASON_EXPIRED, stale)

        serial_key = f"serial:{cert.serial.hex()}"
        if self.blacklist.is_blocked(key, now) or self.blacklist.is_blocked(serial_key, now):
            return deny(REASON_BLACKLISTED, stale)

        if not self.limiter.try_take(key, context, now):
            return deny(REASON_RATE_LIMITED, stale)

        if self.policy is not None:
            verdict = self.policy(cert, context)
            if verdict is not None:
                return deny(REASON_POLICY, stale)

        return self._record(Decision(now, context, key, subject, True, REASON_OK, stale))


def role_policy(allowed: dict[str, set]) -> PolicyFn:
    """Policy requiring the certificate role to be allowed for the context."""

    def check(cert: Certificate, context: str) -> str | None:
        roles = allowed.get(context)
        if roles is None:
            return None
        return None if cert.role in roles else "role"

    return check
