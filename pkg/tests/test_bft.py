"""Tests for the ordering machine: phases, membership barriers, rekey
pattern, equivocation evidence, view changes, and state catch-up.

A small in-memory network drives the sans-IO replicas. Every frame that
crosses between replicas is recorded, which lets the confidentiality tests
scan actual wire bytes.
"""

import hashlib
from random import Random

import pytest
from hypothesis import given, settings, strategies as st

from bftkit import bft, ca, crypto, groupkey, kvapp, wire
from bftkit.admission import AccessController, CrlCache
from bftkit.bft import (
    CMD_APP,
    CMD_MEMBERSHIP,
    CMD_NOOP,
    CMD_REKEY,
    MembershipLog,
    Member,
    MsgType,
    OP_EVICT,
    OP_JOIN,
    OP_LEAVE,
    REASON_EQUIVOCATION,
    REASON_REVOKED,
    REASON_VOLUNTARY,
    Replica,
    ReplicaConfig,
    SignedEnvelope,
    check_evidence,
    decode_client_reply,
    decode_command,
    decode_membership_op,
    decode_write_certificate,
    encode_command,
    encode_evidence,
    encode_membership_op,
    encode_write_certificate,
)
from bftkit.ca import MemoryStorage, Role
from bftkit.crypto import KeyRole, PROFILE_TEST_SMALL as SMALL


class Net:
    """In-memory cluster: synchronous cascade delivery, integer time."""

    def __init__(self, n=4, mode=groupkey.MODE_LEADER_SEALED, encrypt=True, seed=7,
                 min_fault_budget=1):
        self.rng = Random(seed)
        self.authority = ca.ca_init(SMALL, self.rng, MemoryStorage(), now=0)
        self.root = self.authority.root_pair.public
        self.mode = mode
        self.encrypt = encrypt
        self.min_fault_budget = min_fault_budget
        self.keys = {}
        self.certs = {}
        self.clients = {}
        self.genesis = [self.issue(f"r{i}", Role.REPLICA) for i in range(n)]
        self.replicas: dict[str, Replica] = {}
        for i in range(n):
            self.spawn(f"r{i}")
        self.dead: set[str] = set()
        self.drop = None  # optional fn(src, dst, frame) -> bool
        self.client_inbox: list[tuple[str, bytes]] = []
        self.wire_log: list[tuple[str, str, bytes]] = []
        self.now = 0

    def issue(self, subject, role):
        sign = crypto.generate_keypair(SMALL, KeyRole.SIGNING, self.rng)
        ka = crypto.generate_keypair(SMALL, KeyRole.KEY_AGREEMENT, self.rng)
        csr = ca.make_csr(subject, sign, ka, role)
        cert = ca.issue_certificate(self.authority, csr, now=0)
        self.keys[subject] = (sign, ka)
        self.certs[subject] = cert
        return cert

    def spawn(self, rid):
        sign, ka = self.keys[rid]
        cfg = ReplicaConfig(
            my_id=rid,
            profile=SMALL,
            rekey_mode=self.mode,
            encrypt_consensus=self.encrypt,
            min_fault_budget=self.min_fault_budget,
        )
        gate = AccessController(
            root_public=self.root, crl_cache=CrlCache(freshness_window=10**6)
        )
        gate.crl_cache.install(
            ca.current_crl(self.authority, now=0), 0, root_public=self.root
        )
        self.replicas[rid] = Replica(
            cfg, self.certs[rid], sign.secret, ka.secret,
            list(self.genesis), self.root, gate, Random(1000 + len(self.replicas)),
        )
        return self.replicas[rid]

    def deliver(self, src, outs):
        queue = [(src, o) for o in outs]
        guard = 0
        while queue:
            guard += 1
            assert guard < 200_000, "message storm"
            s, ob = queue.pop(0)
            if s in self.dead:
                continue
            if ob.client:
                self.client_inbox.append((ob.to, ob.frame))
                continue
            if ob.to == "*":
                targets = [r for r in self.replicas if r != s]
            else:
                targets = [ob.to]
            for t in targets:
                if t not in self.replicas or t in self.dead:
                    continue
                if self.drop is not None and self.drop(s, t, ob.frame):
                    continue
                self.wire_log.append((s, t, ob.frame))
                more = self.replicas[t].on_frame(ob.frame, s, self.now)
                queue.extend((t, m) for m in more)

    def step(self):
        self.now += 1
        for rid in sorted(self.replicas):
            if rid in self.dead:
                continue
            self.deliver(rid, self.replicas[rid].tick(self.now))

    def run(self, steps):
        for _ in range(steps):
            self.step()

    # client traffic

    def make_client(self, cid):
        self.clients[cid] = self.issue(cid, Role.CLIENT)
        return self.clients[cid]

    def client_op(self, via, cid, counter, op_bytes):
        cert = self.clients[cid]
        sign, _ = self.keys[cid]
        env = SignedEnvelope(MsgType.CLIENT_REQ, cid, 0, counter, 0, op_bytes)
        env.sign(sign.secret)
        targets = sorted(self.live()) if via == "*" else [via]
        for t in targets:
            outs = self.replicas[t].on_client_payload(env.encode(), cert, self.now)
            self.deliver(t, outs)

    def put(self, via, cid, counter, key, value):
        self.client_op(via, cid, counter, kvapp.encode_op(kvapp.OP_PUT, key, value))

    def get(self, via, cid, counter, key):
        self.client_op(via, cid, counter, kvapp.encode_op(kvapp.OP_GET, key))

    def raw_replies(self, cid):
        out = []
        for to, frame in self.client_inbox:
            if to != cid:
                continue
            env = SignedEnvelope.decode(frame)
            out.append(decode_client_reply(env.payload))
        return out

    def replies(self, cid):
        """One entry per counter; replicas must agree on the result."""
        by_counter = {}
        for tup in self.raw_replies(cid):
            prev = by_counter.setdefault(tup[1], tup)
            assert prev[2] == tup[2], "replicas disagree on a reply"
        return [by_counter[c] for c in sorted(by_counter)]

    # inspection

    def live(self):
        return {r: rep for r, rep in self.replicas.items() if r not in self.dead}

    def app_digests(self):
        return {rid: rep.app.digest() for rid, rep in self.live().items()}

    def epochs(self):
        return {
            rid: (rep.gkm.epoch.epoch if rep.gkm.epoch else None)
            for rid, rep in self.live().items()
        }

    def craft(self, sender, msg_type, payload, view=0, seq=0, epoch=0):
        sign, _ = self.keys[sender]
        env = SignedEnvelope(msg_type, sender, view, seq, epoch, payload)
        return env.sign(sign.secret).encode()


@pytest.fixture
def net():
    n = Net()
    n.run(3)
    assert all(e == 1 for e in n.epochs().values())
    return n


def wait_for(net, predicate, limit=120):
    for _ in range(limit):
        if predicate():
            return True
        net.step()
    return predicate()


class TestEnvelope:
    """Signed envelope encoding and verification."""

    def test_roundtrip(self):
        rng = Random(3)
        pair = crypto.generate_keypair(SMALL, KeyRole.SIGNING, rng)
        env = SignedEnvelope(MsgType.WRITE, "r1", 4, 17, 2, b"payload")
        env.sign(pair.secret)
        back = SignedEnvelope.decode(env.encode())
        assert back == env
        assert back.verify(pair.public)
        assert back.verified

    def test_tampered_payload_fails(self):
        rng = Random(3)
        pair = crypto.generate_keypair(SMALL, KeyRole.SIGNING, rng)
        env = SignedEnvelope(MsgType.WRITE, "r1", 0, 1, 0, b"original")
        env.sign(pair.secret)
        back = SignedEnvelope.decode(env.encode())
        back.payload = b"tampered"
        assert not back.verify(pair.public)

    def test_wrong_key_fails(self):
        rng = Random(3)
        a = crypto.generate_keypair(SMALL, KeyRole.SIGNING, rng)
        b = crypto.generate_keypair(SMALL, KeyRole.SIGNING, rng)
        env = SignedEnvelope(MsgType.ACCEPT, "r1", 0, 1, 0, b"x").sign(a.secret)
        assert not env.verify(b.public)

    def test_non_envelope_frame_rejected(self):
        with pytest.raises(wire.WireError, match="not an envelope"):
            SignedEnvelope.decode(wire.encode_tlv(0x55, b"junk"))


class TestEvidence:
    """Conflict evidence must be self-contained and offline-checkable."""

    def _pair(self, payload_a=b"a", payload_b=b"b", view=0, seq=5):
        rng = Random(9)
        key = crypto.generate_keypair(SMALL, KeyRole.SIGNING, rng)
        fa = SignedEnvelope(MsgType.PROPOSE, "r0", view, seq, 0, payload_a)
        fb = SignedEnvelope(MsgType.PROPOSE, "r0", view, seq, 0, payload_b)
        return key, fa.sign(key.secret).encode(), fb.sign(key.secret).encode()

    def test_conflicting_pair_accepted(self):
        key, fa, fb = self._pair()
        ok, why = check_evidence(encode_evidence(fa, fb), key.public)
        assert ok
        assert why == "ok"

    def test_different_slots_rejected(self):
        rng = Random(9)
        key = crypto.generate_keypair(SMALL, KeyRole.SIGNING, rng)
        fa = SignedEnvelope(MsgType.PROPOSE, "r0", 0, 5, 0, b"a").sign(key.secret)
        fb = SignedEnvelope(MsgType.PROPOSE, "r0", 0, 6, 0, b"b").sign(key.secret)
        ok, why = check_evidence(
            encode_evidence(fa.encode(), fb.encode()), key.public
        )
        assert not ok
        assert "different slots" in why

    def test_same_payload_rejected(self):
        key, fa, fb = self._pair(payload_a=b"same", payload_b=b"same")
        ok, why = check_evidence(encode_evidence(fa, fb), key.public)
        assert not ok
        assert "conflict" in why

    def test_signature_must_match_accused(self):
        key, fa, fb = self._pair()
        rng = Random(10)
        other = crypto.generate_keypair(SMALL, KeyRole.SIGNING, rng)
        ok, why = check_evidence(encode_evidence(fa, fb), other.public)
        assert not ok
        assert "signature" in why

    def test_garbage_rejected(self):
        rng = Random(9)
        key = crypto.generate_keypair(SMALL, KeyRole.SIGNING, rng)
        ok, why = check_evidence(b"\x01\x02junk", key.public)
        assert not ok


class TestMembershipLog:
    """Era boundaries: a barrier governs strictly greater sequences."""

    def _log(self):
        net = Net(n=4)
        return MembershipLog(net.genesis), net

    def test_barrier_is_exclusive(self):
        log, net = self._log()
        log.apply_removal(5, "r3")
        assert "r3" in log.era_for(5).members
        assert "r3" not in log.era_for(6).members

    def test_join_takes_effect_after_barrier(self):
        log, net = self._log()
        cert = net.issue("r9", Role.REPLICA)
        log.apply_join(7, Member("r9", cert))
        assert "r9" not in log.era_for(7).members
        assert "r9" in log.era_for(8).members
        assert "r9" in log.directory

    def test_departed_member_stays_in_directory(self):
        log, _ = self._log()
        log.apply_removal(3, "r1")
        assert "r1" in log.directory

    def test_roundtrip(self):
        log, net = self._log()
        log.apply_removal(4, "r2")
        cert = net.issue("r7", Role.REPLICA)
        log.apply_join(9, Member("r7", cert))
        back = MembershipLog.decode(log.encode())
        assert [e.barrier for e in back.eras] == [0, 4, 9]
        assert sorted(back.current().members) == sorted(log.current().members)
        assert sorted(back.directory) == sorted(log.directory)

    @pytest.mark.parametrize(
        "n,quorum,budget", [(4, 3, 1), (5, 4, 1), (6, 5, 1), (7, 5, 2), (10, 7, 3)]
    )
    def test_quorum_sizes(self, n, quorum, budget):
        ids = [f"m{i}" for i in range(n)]
        era = bft.Era(barrier=0, members=dict.fromkeys(ids, None))
        assert era.fault_budget() == budget
        assert era.quorum() == quorum


class TestGenesis:
    """First epoch must exist before any application traffic is ordered."""

    @pytest.mark.parametrize("mode", [groupkey.MODE_LEADER_SEALED, groupkey.MODE_TGDH])
    def test_epoch_one_everywhere(self, mode):
        net = Net(mode=mode)
        net.run(4)
        assert all(e == 1 for e in net.epochs().values())
        keys = {rep.gkm.epoch.key.data for rep in net.replicas.values()}
        assert len(keys) == 1

    def test_app_ordered_only_after_rollover(self):
        net = Net()
        net.make_client("alice")
        net.put("r0", "alice", 1, b"k", b"v")  # before genesis converges
        net.run(6)
        replies = net.replies("alice")
        assert replies and replies[0][1] == 1
        # the rollover holds sequence 1; the app command lands after it
        assert replies[0][3] > 1

    def test_app_proposal_during_rollover_refused(self):
        net = Net()  # rekey still due everywhere
        body = bft.encode_forwarded_request(b"fake", b"fake")
        frame = net.craft(
            "r0", MsgType.PROPOSE, encode_command(CMD_APP, body), view=0, seq=1
        )
        net.deliver("r0", [bft.Outbound(to="r1", frame=frame)])
        reasons = [d.reason for d in net.replicas["r1"].dispositions]
        assert "rekey_pattern_violation" in reasons


class TestOrdering:
    """Happy-path ordering, replies, and duplicate suppression."""

    def test_put_get_through_follower(self, net):
        net.make_client("alice")
        net.put("r2", "alice", 1, b"name", b"ada")
        wait_for(net, lambda: len(net.replies("alice")) >= 1)
        net.get("r2", "alice", 2, b"name")
        wait_for(net, lambda: len(net.replies("alice")) >= 2)
        replies = net.replies("alice")
        status, value = kvapp.decode_result(replies[1][2])
        assert status == kvapp.STATUS_OK
        assert value == b"ada"
        assert len(set(net.app_digests().values())) == 1

    def test_duplicate_counter_replays_cached_reply(self, net):
        net.make_client("bob")
        net.put("r1", "bob", 1, b"x", b"1")
        wait_for(net, lambda: len(net.replies("bob")) >= 1)
        executed = {r: rep.metrics["executed"] for r, rep in net.replicas.items()}
        before = len(net.raw_replies("bob"))
        net.put("r1", "bob", 1, b"x", b"1")
        net.run(2)
        assert len(net.raw_replies("bob")) > before
        assert len({t[2] for t in net.raw_replies("bob")}) == 1
        assert {r: rep.metrics["executed"] for r, rep in net.replicas.items()} == executed

    def test_all_replicas_converge(self, net):
        net.make_client("carol")
        for i in range(1, 6):
            net.put("r0", "carol", i, f"k{i}".encode(), f"v{i}".encode())
        wait_for(net, lambda: len(net.replies("carol")) >= 5)
        assert len(set(net.app_digests().values())) == 1
        assert len(set(r.last_executed for r in net.replicas.values())) == 1


class TestSealedTraffic:
    """With consensus encryption on, replica links never carry app plaintext."""

    MARKER = b"CANARY-7f3a9d-DO-NOT-LEAK"

    def _run_ops(self, encrypt):
        net = Net(encrypt=encrypt)
        net.run(3)
        net.make_client("alice")
        net.put("r2", "alice", 1, b"secret-key", self.MARKER)
        wait_for(net, lambda: len(net.replies("alice")) >= 1)
        # force a snapshot exchange as well
        net.deliver("r3", net.replicas["r3"].request_state(net.now))
        net.run(2)
        return net

    def test_marker_absent_when_encrypted(self):
        net = self._run_ops(encrypt=True)
        leaked = [
            (s, t) for s, t, frame in net.wire_log if self.MARKER in frame
        ]
        assert leaked == []
        status, value = kvapp.decode_result(net.replies("alice")[0][2])
        assert status == kvapp.STATUS_OK

    def test_marker_visible_without_encryption(self):
        net = self._run_ops(encrypt=False)
        assert any(self.MARKER in frame for _, _, frame in net.wire_log)

    def test_plaintext_forward_refused_when_encrypting(self, net):
        # a well-signed but unsealed forwarded request must not be accepted
        pair = bft.encode_forwarded_request(b"frame", b"cert")
        frame = net.craft("r2", MsgType.CLIENT_REQ, pair, view=0, epoch=0)
        leader = net.replicas["r0"]
        net.deliver("r2", [bft.Outbound(to="r0", frame=frame)])
        assert any(
            d.reason == "plaintext_forward_refused" for d in leader.dispositions
        )


class TestSealCommand:
    """Sealed command bodies bind sequence and epoch."""

    def _key(self):
        return crypto.SymmetricKey(b"\x42" * 32, b"test-context")

    def test_roundtrip(self):
        key = self._key()
        sealed = bft.seal_command(CMD_APP, b"body", key, 9, 2, Random(0))
        kind, blob = decode_command(sealed)
        assert kind == CMD_APP
        assert bft.unseal_command_body(blob, key, 9, 2) == b"body"

    def test_wrong_sequence_rejected(self):
        key = self._key()
        sealed = bft.seal_command(CMD_APP, b"body", key, 9, 2, Random(0))
        _, blob = decode_command(sealed)
        with pytest.raises(crypto.AuthenticationFailure):
            bft.unseal_command_body(blob, key, 10, 2)

    def test_wrong_epoch_rejected(self):
        key = self._key()
        sealed = bft.seal_command(CMD_APP, b"body", key, 9, 2, Random(0))
        _, blob = decode_command(sealed)
        with pytest.raises(crypto.AuthenticationFailure):
            bft.unseal_command_body(blob, key, 9, 3)


class TestJoin:
    """A newcomer is admitted by ordered command and keyed by the rollover."""

    @pytest.mark.parametrize("mode", [groupkey.MODE_LEADER_SEALED, groupkey.MODE_TGDH])
    def test_join_then_participate(self, mode):
        net = Net(mode=mode)
        net.run(3)
        net.make_client("alice")
        net.put("r0", "alice", 1, b"pre", b"join")
        wait_for(net, lambda: len(net.replies("alice")) >= 1)

        net.issue("r4", Role.REPLICA)
        joiner = net.spawn("r4")
        net.deliver("r4", joiner.begin_join(net.now))
        ok = wait_for(
            net,
            lambda: "r4" in net.replicas["r0"].membership.current().members
            and joiner.gkm.epoch is not None
            and joiner.last_executed == net.replicas["r0"].last_executed,
        )
        assert ok, (joiner.rekey_due, joiner.last_executed, joiner.gkm.epoch)
        assert joiner.gkm.epoch.epoch == net.replicas["r0"].gkm.epoch.epoch
        assert joiner.app.digest() == net.replicas["r0"].app.digest()

        # the new member carries quorum weight for later traffic
        net.put("r4", "alice", 2, b"post", b"join")
        wait_for(net, lambda: len(net.replies("alice")) >= 2)
        assert len(set(net.app_digests().values())) == 1

    def test_join_barrier_position(self, net):
        net.issue("r4", Role.REPLICA)
        joiner = net.spawn("r4")
        net.deliver("r4", joiner.begin_join(net.now))
        wait_for(
            net, lambda: "r4" in net.replicas["r0"].membership.current().members
        )
        log = net.replicas["r0"].membership
        barrier = log.current().barrier
        assert "r4" not in log.era_for(barrier).members
        assert "r4" in log.era_for(barrier + 1).members


class TestLeave:
    """Orderly departure: barrier semantics and the forced rollover."""

    def test_voluntary_leave_rekeys(self, net):
        before = net.replicas["r0"].gkm.epoch.epoch
        net.deliver("r3", net.replicas["r3"].request_leave(net.now))
        ok = wait_for(
            net,
            lambda: "r3" not in net.replicas["r0"].membership.current().members
            and net.replicas["r0"].gkm.epoch.epoch > before
            and net.replicas["r0"].rekey_due is None,
        )
        assert ok
        assert net.replicas["r3"].halted

    def test_departed_member_barrier_probe(self, net):
        net.deliver("r3", net.replicas["r3"].request_leave(net.now))
        wait_for(
            net, lambda: "r3" not in net.replicas["r0"].membership.current().members
        )
        r0 = net.replicas["r0"]
        barrier = r0.membership.current().barrier

        # a benign duplicate of the vote r3 already cast inside its era
        digest = r0.instances[barrier].digest
        view = r0.instances[barrier].view
        before = net.craft(
            "r3", MsgType.ACCEPT, bft.encode_accept_payload(digest),
            view=view, seq=barrier,
        )
        r0.on_frame(before, "r3", net.now)
        assert r0.dispositions[-1].verdict == "ok"

        after = net.craft(
            "r3", MsgType.ACCEPT, bft.encode_accept_payload(b"\x00" * 32),
            view=0, seq=barrier + 1,
        )
        r0.on_frame(after, "r3", net.now)
        assert r0.dispositions[-1].verdict == "drop"
        assert r0.dispositions[-1].reason == "outside_membership_barrier"

    def test_leave_command_needs_signed_request(self, net):
        # a forged leave body without the member's own request must be refused
        body = encode_membership_op(OP_LEAVE, "r3", reason=REASON_VOLUNTARY)
        reason = net.replicas["r1"]._validate_membership_command(body, net.now)
        assert reason == "missing_leave_request"


class TestEviction:
    """Equivocation evidence leads to eviction, bounded by group size."""

    def _equivocate(self, net, culprit="r0", seq=None):
        leader = net.replicas[culprit]
        seq = seq or (leader.last_executed + 1)
        fa = net.craft(
            culprit, MsgType.PROPOSE, encode_command(CMD_NOOP, b"one"),
            view=leader.view, seq=seq,
        )
        fb = net.craft(
            culprit, MsgType.PROPOSE, encode_command(CMD_NOOP, b"two"),
            view=leader.view, seq=seq,
        )
        for target in sorted(net.replicas):
            if target == culprit:
                continue
            net.deliver(culprit, [bft.Outbound(to=target, frame=fa)])
            net.deliver(culprit, [bft.Outbound(to=target, frame=fb)])

    def test_evidence_recorded_and_blacklisted(self, net):
        self._equivocate(net)
        r1 = net.replicas["r1"]
        assert r1.metrics["evidence_found"] == 1
        culprit, evidence = r1.evidence_log[0]
        assert culprit == "r0"
        ok, why = check_evidence(evidence, net.certs["r0"].sign_public)
        assert ok, why
        probe = net.craft("r0", MsgType.ACCEPT, bft.encode_accept_payload(b"\x00" * 32),
                          view=0, seq=r1.last_executed)
        r1.on_frame(probe, "r0", net.now)
        assert r1.dispositions[-1].reason.startswith("admission:")

    def test_eviction_blocked_at_four_members(self, net):
        self._equivocate(net)
        net.run(60)
        assert "r0" in net.replicas["r1"].membership.current().members
        assert any(
            rep.metrics["evictions_blocked"] > 0 for rep in net.replicas.values()
        )
        # liveness survives: the silenced culprit forces a view change
        net.make_client("dana")
        net.put("*", "dana", 1, b"after", b"equivocation")
        ok = wait_for(net, lambda: len(net.replies("dana")) >= 1, limit=200)
        assert ok
        live = {r: rep for r, rep in net.replicas.items() if r != "r0"}
        assert len({rep.app.digest() for rep in live.values()}) == 1

    def test_eviction_proceeds_at_five_members(self):
        net = Net(n=5)
        net.run(3)
        self._equivocate(net)
        ok = wait_for(
            net,
            lambda: "r0" not in net.replicas["r1"].membership.current().members,
            limit=200,
        )
        assert ok
        r1 = net.replicas["r1"]
        assert r1.rekey_due is None or wait_for(net, lambda: r1.rekey_due is None)
        net.make_client("erin")
        net.put("r1", "erin", 1, b"post", b"eviction")
        assert wait_for(net, lambda: len(net.replies("erin")) >= 1)

    def test_eviction_command_requires_valid_evidence(self, net):
        body = encode_membership_op(
            OP_EVICT, "r3", reason=REASON_EQUIVOCATION, evidence=b"nonsense"
        )
        reason = net.replicas["r1"]._validate_membership_command(body, net.now)
        assert reason == "bad_evidence"


class TestViewChange:
    """Leader failure: progress resumes under the next view."""

    def test_leader_crash_recovers(self, net):
        net.dead.add("r0")
        net.make_client("alice")
        net.put("*", "alice", 1, b"k", b"v")
        ok = wait_for(net, lambda: len(net.replies("alice")) >= 1, limit=200)
        assert ok
        live = net.live()
        assert all(rep.view >= 1 for rep in live.values())
        assert len({rep.app.digest() for rep in live.values()}) == 1

    def test_certified_payload_survives_view_change(self, net):
        # stall between write and accept, then crash the leader
        def drop_accepts(src, dst, frame):
            return SignedEnvelope.decode(frame).msg_type == MsgType.ACCEPT

        net.drop = drop_accepts
        net.make_client("bob")
        net.put("r0", "bob", 1, b"persist", b"me")
        stuck = [
            rep.instances[rep.last_executed + 1].phase
            for rep in net.replicas.values()
        ]
        assert all(p == bft.PHASE_WRITTEN for p in stuck)
        net.dead.add("r0")
        net.drop = None
        ok = wait_for(net, lambda: len(net.replies("bob")) >= 1, limit=200)
        assert ok
        status, value = kvapp.decode_result(net.replies("bob")[0][2])
        assert status == kvapp.STATUS_OK
        for rep in net.live().values():
            s, v = kvapp.decode_result(rep.app.execute(kvapp.encode_op(kvapp.OP_GET, b"persist")))
            assert v == b"me"

    def test_new_view_needs_quorum_of_view_changes(self, net):
        r2 = net.replicas["r2"]
        vc = net.craft(
            "r1", MsgType.VIEW_CHANGE, bft.encode_view_change_payload(0, []), view=1
        )
        nv = net.craft(
            "r1", MsgType.NEW_VIEW, bft.encode_new_view_payload([vc], []), view=1
        )
        r2.on_frame(nv, "r1", net.now)
        assert r2.view == 0
        assert any(d.reason == "new_view_without_quorum" for d in r2.dispositions)


class TestRevocation:
    """CRL-driven removal with the dual vote rule."""

    def _revoke(self, net, victim="r3"):
        serial = net.certs[victim].serial
        crl = ca.revoke(
            net.authority, serial, ca.RevocationReason.COMPROMISED, now=net.now
        )
        return crl.encode()

    def test_revoked_member_removed_and_rekeyed(self, net):
        before = net.replicas["r0"].gkm.epoch.epoch
        crl_bytes = self._revoke(net)
        net.deliver("r0", net.replicas["r0"].ingest_crl(crl_bytes, net.now))
        ok = wait_for(
            net,
            lambda: "r3" not in net.replicas["r0"].membership.current().members
            and net.replicas["r0"].gkm.epoch.epoch > before,
        )
        assert ok
        for rid in ("r0", "r1", "r2"):
            assert "r3" not in net.replicas[rid].membership.current().members
        assert net.replicas["r3"].halted

    def test_followers_refuse_unseen_revocation(self, net):
        crl_bytes = self._revoke(net)

        def drop_crl_gossip(src, dst, frame):
            return SignedEnvelope.decode(frame).msg_type == MsgType.CRL_UPDATE

        net.drop = drop_crl_gossip
        net.deliver("r0", net.replicas["r0"].ingest_crl(crl_bytes, net.now))
        net.run(2)
        refused = [
            d
            for rep in (net.replicas[r] for r in ("r1", "r2", "r3"))
            for d in rep.dispositions
            if d.reason == "revocation_not_visible"
        ]
        assert refused
        assert "r3" in net.replicas["r1"].membership.current().members
        # once the list reaches everyone, the held proposal goes through
        net.drop = None
        for rid in ("r1", "r2", "r3"):
            net.deliver(rid, net.replicas[rid].ingest_crl(crl_bytes, net.now))
        ok = wait_for(
            net,
            lambda: "r3" not in net.replicas["r0"].membership.current().members,
        )
        assert ok

    def test_stale_cache_votes_yes(self, net):
        # a follower that cannot claim a fresh view must not block removal
        r1 = net.replicas["r1"]
        r1.gate.crl_cache.freshness_window = 0  # everything is stale now
        body = encode_membership_op(OP_LEAVE, "r3", reason=REASON_REVOKED)
        assert r1._validate_membership_command(body, net.now + 1) is None


class TestStateTransfer:
    """A lagging replica catches up from matching snapshots."""

    def test_partitioned_replica_heals(self, net):
        net.make_client("alice")

        def isolate_r3(src, dst, frame):
            return "r3" in (src, dst)

        net.drop = isolate_r3
        for i in range(1, 9):
            net.put("r0", "alice", i, f"k{i}".encode(), f"v{i}".encode())
            net.run(1)
        wait_for(net, lambda: len(net.replies("alice")) >= 8)
        assert net.replicas["r3"].last_executed < net.replicas["r0"].last_executed

        net.drop = None
        net.put("r0", "alice", 9, b"k9", b"v9")
        ok = wait_for(
            net,
            lambda: net.replicas["r3"].last_executed
            == net.replicas["r0"].last_executed,
            limit=200,
        )
        assert ok
        assert net.replicas["r3"].metrics["state_adopted"] >= 1
        assert len(set(net.app_digests().values())) == 1

    def test_snapshots_are_byte_identical(self, net):
        net.make_client("alice")
        net.put("r0", "alice", 1, b"k", b"v")
        wait_for(net, lambda: len(net.replies("alice")) >= 1)
        snaps = {rep.snapshot() for rep in net.replicas.values()}
        assert len(snaps) == 1

    def test_single_response_is_not_adopted(self, net):
        r3 = net.replicas["r3"]
        body = wire.encode_tlv(0x01, net.replicas["r0"].snapshot()) + wire.encode_tlv(
            0x02, net.replicas["r1"].certificate.encode()
        )
        r3._state_votes = {}
        resp = net.craft("r1", MsgType.STATE_RESP, body, seq=99)
        r3.on_frame(resp, "r1", net.now)
        assert r3.metrics["state_adopted"] == 0

    def test_response_from_non_member_of_claimed_era_ignored(self, net):
        """A departed or fabricated responder cannot vouch for a snapshot
        whose own roster does not list it."""
        r3 = net.replicas["r3"]
        snap = net.replicas["r0"].snapshot()
        outsider_sign, outsider_ka = net.new_identity("zz")
        body = wire.encode_tlv(0x01, snap) + wire.encode_tlv(
            0x02, net.certs["zz"].encode()
        )
        r3._state_votes = {}
        env = SignedEnvelope(MsgType.STATE_RESP, "zz", 0, 99, 0, body)
        env.sign(outsider_sign.secret)
        r3.on_frame(env.encode(), "zz", net.now)
        assert r3.dispositions[-1].reason == "state_resp_outsider"
        assert r3._state_votes == {}


class TestIntervalRekey:
    """Policy-driven rollovers advance the epoch without membership change."""

    @pytest.mark.parametrize("mode", [groupkey.MODE_LEADER_SEALED, groupkey.MODE_TGDH])
    def test_age_triggers_rollover(self, mode):
        net = Net(mode=mode)
        for rep in net.replicas.values():
            rep.gkm.policy = groupkey.RekeyPolicy(max_age=20)
        net.run(3)
        assert all(e == 1 for e in net.epochs().values())
        ok = wait_for(net, lambda: all(e >= 2 for e in net.epochs().values()), limit=80)
        assert ok, net.epochs()


class TestDispositions:
    """Every inbound envelope leaves an audit line with a verdict."""

    def test_ok_and_drop_lines(self, net):
        r1 = net.replicas["r1"]
        count = len(r1.dispositions)
        frame = net.craft("r2", MsgType.STATE_REQ, wire.u64(0))
        r1.on_frame(frame, "r2", net.now)
        assert len(r1.dispositions) == count + 1
        assert r1.dispositions[-1].verdict == "ok"
        line = r1.dispositions[-1].line()
        assert "from=r2" in line and "verdict=ok" in line

    def test_bad_signature_noted_and_scored(self, net):
        r1 = net.replicas["r1"]
        env = SignedEnvelope(MsgType.STATE_REQ, "r2", 0, 0, 0, b"", b"\x00" * 64)
        r1.on_frame(env.encode(), "r2", net.now)
        assert r1.dispositions[-1].reason == "bad_signature"

    def test_malformed_frame_noted(self, net):
        r1 = net.replicas["r1"]
        r1.on_frame(b"\xff\x00garbage", "r2", net.now)
        assert r1.dispositions[-1].reason == "malformed"

    def test_admission_called_once_per_envelope(self, net):
        r1 = net.replicas["r1"]
        calls = []
        original = r1.gate.admit

        def counting_admit(*args, **kwargs):
            calls.append(args)
            return original(*args, **kwargs)

        r1.gate.admit = counting_admit
        frame = net.craft("r2", MsgType.STATE_REQ, wire.u64(0))
        r1.on_frame(frame, "r2", net.now)
        assert len(calls) == 1


class TestWireHelpers:
    """Codec invariants for the consensus payloads."""

    @given(
        op=st.sampled_from([OP_JOIN, OP_LEAVE, OP_EVICT]),
        member_id=st.text(min_size=1, max_size=16),
        cert=st.binary(max_size=64),
        reason=st.integers(min_value=0, max_value=255),
        evidence=st.binary(max_size=64),
        leaf=st.binary(max_size=33),
    )
    @settings(max_examples=60, deadline=None)
    def test_membership_op_roundtrip(self, op, member_id, cert, reason, evidence, leaf):
        body = encode_membership_op(op, member_id, cert, reason, evidence, leaf)
        assert decode_membership_op(body) == (op, member_id, cert, reason, evidence, leaf)

    @given(
        seq=st.integers(min_value=0, max_value=2**63),
        view=st.integers(min_value=0, max_value=2**63),
        digest=st.binary(min_size=32, max_size=32),
        frames=st.lists(st.binary(min_size=1, max_size=40), max_size=5),
    )
    @settings(max_examples=60, deadline=None)
    def test_write_certificate_roundtrip(self, seq, view, digest, frames):
        blob = encode_write_certificate(seq, view, digest, frames)
        assert decode_write_certificate(blob) == (seq, view, digest, frames)

    @given(kind=st.integers(min_value=1, max_value=4), body=st.binary(max_size=128))
    @settings(max_examples=60, deadline=None)
    def test_command_roundtrip(self, kind, body):
        assert decode_command(encode_command(kind, body)) == (kind, body)

    def test_client_reply_roundtrip(self):
        blob = bft.encode_client_reply("alice", 7, b"result", 42)
        assert decode_client_reply(blob) == ("alice", 7, b"result", 42)
