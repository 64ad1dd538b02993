"""Deterministic discrete-event network simulator.

Hosts replicas, a trust center, channel-attached clients, flood sources,
and scripted faults on a seeded virtual network. Identical (scenario, seed)
pairs produce identical delivery schedules and byte-identical run reports,
so every property check here is reproducible on any machine.

Protocol code never sees a wall clock or ambient randomness: time is the
event loop's logical tick and every node gets its own seeded generator.
"""

from __future__ import annotations

import hashlib
import heapq
import json
from dataclasses import dataclass, field, replace
from random import Random

from . import ca as ca_mod
from . import channel as channel_mod
from . import crypto, groupkey, kvapp, wire
from .admission import AccessController, CrlCache, CTX_CLIENT_REQUEST
from .bft import (
    CMD_APP,
    CMD_NOOP,
    MsgType,
    Outbound,
    Replica,
    ReplicaConfig,
    SignedEnvelope,
    decode_client_reply,
    decode_command,
    encode_command,
    unseal_command_body,
)
from .ca import CaState, MemoryStorage, Role
from .channel import ChannelConfig, ChannelIdentity, ClientChannel, ServerEndpoint
from .crypto import PROFILE_TEST_SMALL


class SimError(Exception):
    pass


class ScenarioInvalid(SimError):
    pass


class ExceedsFaultBudget(SimError):
    pass


KIND_DELIVER = "deliver"
KIND_TIMER = "timer"
KIND_ACTION = "scenario_action"

BEHAVIOR_EQUIVOCATE = "equivocate"
BEHAVIOR_SILENT = "silent"
BEHAVIOR_FORGE = "forge_signatures"
BEHAVIOR_REPLAY = "replay_old"
BEHAVIORS = (BEHAVIOR_EQUIVOCATE, BEHAVIOR_SILENT, BEHAVIOR_FORGE, BEHAVIOR_REPLAY)

_CHANNEL_TAGS = {
    wire.FRAME_HELLO1,
    wire.FRAME_COOKIE,
    wire.FRAME_HELLO2,
    wire.FRAME_SERVER_HELLO,
    wire.FRAME_FINISH,
    wire.FRAME_RECORD,
}

ACTION_KINDS = {
    "crash",
    "partition",
    "heal",
    "byzantine",
    "flood",
    "revoke",
    "join",
    "leave",
    "client_load",
    "probe_admission",
}


@dataclass(frozen=True)
class LinkModel:
    """Shared behavior of every virtual link."""

    base_latency: int = 1
    jitter: int = 0
    drop_per_mille: int = 0  # packet loss probability in 1/1000 units

    def to_dict(self) -> dict:
        return {
            "base_latency": self.base_latency,
            "jitter": self.jitter,
            "drop_per_mille": self.drop_per_mille,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "LinkModel":
        return cls(
            base_latency=int(raw.get("base_latency", 1)),
            jitter=int(raw.get("jitter", 0)),
            drop_per_mille=int(raw.get("drop_per_mille", 0)),
        )


@dataclass
class Scenario:
    """A declarative script: topology, a timeline of actions, and the named
    property checks to evaluate when the run ends."""

    name: str
    seed: int = 0
    replicas: int = 4
    clients: int = 0
    f: int = 1
    mode: str = groupkey.MODE_LEADER_SEALED
    encrypt_consensus: bool = True
    duration: int = 120
    link: LinkModel = field(default_factory=LinkModel)
    cookie_policy: str = channel_mod.COOKIE_POLICY_ALWAYS
    freshness_window: int = 100_000
    crl_push_period: int = 0  # 0: only the startup install
    labels: tuple[str, ...] = ()
    params: dict = field(default_factory=dict)
    timeline: list[dict] = field(default_factory=list)
    assertions: list[str] = field(default_factory=list)

    def validate(self) -> None:
        def bad(msg: str) -> None:
            raise ScenarioInvalid(f"{self.name or '<unnamed>'}: {msg}")

        if not self.name:
            bad("name must be non-empty")
        if self.replicas < 1:
            bad("replicas must be >= 1")
        if self.f < 0:
            bad("f must be >= 0")
        if self.f > 0 and self.replicas < 3 * self.f + 1 and "beyond_f" not in self.labels:
            bad(f"replicas={self.replicas} cannot tolerate f={self.f}")
        if self.duration < 1:
            bad("duration must be >= 1")
        if self.mode not in (groupkey.MODE_LEADER_SEALED, groupkey.MODE_TGDH):
            bad(f"unknown group-key mode {self.mode!r}")
        known_nodes = {f"r{i}" for i in range(self.replicas)}
        known_clients = {f"c{i}" for i in range(self.clients)}
        for entry in self.timeline:
            if "at" not in entry or "kind" not in entry:
                bad(f"timeline entry missing at/kind: {entry!r}")
            if not isinstance(entry["at"], int) or entry["at"] < 0:
                bad(f"timeline entry has bad tick: {entry!r}")
            kind = entry["kind"]
            if kind not in ACTION_KINDS:
                bad(f"unknown action kind {kind!r}")
            if kind == "byzantine":
                if entry.get("behavior") not in BEHAVIORS:
                    bad(f"unknown byzantine behavior {entry.get('behavior')!r}")
                if entry.get("node") not in known_nodes:
                    bad(f"byzantine action names unknown node {entry.get('node')!r}")
            if kind in ("crash", "leave", "revoke", "probe_admission"):
                node = entry.get("node")
                if node != "tc" and node not in known_nodes and kind == "crash":
                    bad(f"{kind} names unknown node {node!r}")
            if kind == "join":
                node = entry.get("node", "")
                if node in known_nodes:
                    bad(f"join target {node!r} already exists")
                known_nodes.add(node)
            if kind == "client_load" and entry.get("client") not in known_clients:
                bad(f"client_load names unknown client {entry.get('client')!r}")
        for name in self.assertions:
            if name not in ASSERTIONS:
                bad(f"unknown assertion {name!r}")

    def byzantine_nodes(self) -> list[str]:
        seen = []
        for entry in self.timeline:
            if entry.get("kind") == "byzantine" and entry["node"] not in seen:
                seen.append(entry["node"])
        return seen

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "replicas": self.replicas,
            "clients": self.clients,
            "f": self.f,
            "mode": self.mode,
            "encrypt_consensus": self.encrypt_consensus,
            "duration": self.duration,
            "link": self.link.to_dict(),
            "cookie_policy": self.cookie_policy,
            "freshness_window": self.freshness_window,
            "crl_push_period": self.crl_push_period,
            "labels": list(self.labels),
            "params": self.params,
            "timeline": self.timeline,
            "assertions": self.assertions,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "Scenario":
        try:
            return cls(
                name=raw["name"],
                seed=int(raw.get("seed", 0)),
                replicas=int(raw.get("replicas", 4)),
                clients=int(raw.get("clients", 0)),
                f=int(raw.get("f", 1)),
                mode=raw.get("mode", groupkey.MODE_LEADER_SEALED),
                encrypt_consensus=bool(raw.get("encrypt_consensus", True)),
                duration=int(raw.get("duration", 120)),
                link=LinkModel.from_dict(raw.get("link", {})),
                cookie_policy=raw.get("cookie_policy", channel_mod.COOKIE_POLICY_ALWAYS),
                freshness_window=int(raw.get("freshness_window", 100_000)),
                crl_push_period=int(raw.get("crl_push_period", 0)),
                labels=tuple(raw.get("labels", ())),
                params=dict(raw.get("params", {})),
                timeline=list(raw.get("timeline", [])),
                assertions=list(raw.get("assertions", [])),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioInvalid(f"cannot parse scenario: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ScenarioInvalid(f"scenario file is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ScenarioInvalid("scenario file must hold a JSON object")
        return cls.from_dict(raw)


@dataclass
class RunReport:
    scenario: str
    seed: int
    ticks: int
    events: int
    event_log_digest: str
    assertions: list[tuple[str, bool, str]]
    metrics: dict[str, int]

    def ok(self) -> bool:
        return all(passed for _, passed, _ in self.assertions)

    def render(self) -> str:
        lines = [
            "run-report",
            f"scenario: {self.scenario}",
            f"seed: {self.seed}",
            f"ticks: {self.ticks}",
            f"events: {self.events}",
            f"event-log-digest: {self.event_log_digest}",
            "assertions:",
        ]
        for name, passed, detail in self.assertions:
            verdict = "PASS" if passed else "FAIL"
            lines.append(f"  {name}: {verdict} ({detail})")
        lines.append("metrics:")
        width = max((len(k) for k in self.metrics), default=0)
        for key in sorted(self.metrics):
            lines.append(f"  {key.ljust(width)}  {self.metrics[key]}")
        lines.append(f"verdict: {'PASS' if self.ok() else 'FAIL'}")
        return "\n".join(lines) + "\n"

    def report_digest(self) -> str:
        return hashlib.sha256(self.render().encode()).hexdigest()


# ---------------------------------------------------------------------------
# Hosted endpoints


class _ReplicaNode:
    def __init__(self, node_id: str, replica: Replica, server: ServerEndpoint):
        self.node_id = node_id
        self.replica = replica
        self.server = server
        self.crashed = False
        self.behavior: str | None = None
        self._rng: Random | None = None  # byzantine mutations
        self._equivocation_variants: dict[tuple[int, int], bytes] = {}
        self._sent_history: list[tuple[str, bytes]] = []


class _ClientNode:
    """Closed-loop client: one outstanding operation, strictly increasing
    counters. The single-entry reply cache on the replicas assumes exactly
    this discipline, so the simulator honors it."""

    def __init__(self, client_id: str, rng: Random):
        self.client_id = client_id
        self.rng = rng
        self.channels: dict[str, ClientChannel] = {}
        self.next_retry: dict[str, int] = {}
        self.sent = 0
        self.queue: list[tuple[int, bytes]] = []  # (counter, signed request)
        self.head_counter = 0
        self.last_send = -(10**9)
        self.results: dict[int, dict[str, bytes]] = {}
        self.acked: set[int] = set()


class Simulation:
    """One run of one scenario. Build, call run(), read the report."""

    def __init__(self, scenario: Scenario, seed: int | None = None):
        scenario.validate()
        if seed is not None and seed != scenario.seed:
            scenario = replace(scenario, seed=seed)
        self.scenario = scenario
        self.seed = scenario.seed
        byz = scenario.byzantine_nodes()
        if len(byz) > scenario.f and "beyond_f" not in scenario.labels:
            raise ExceedsFaultBudget(
                f"{len(byz)} byzantine replicas exceed the declared f={scenario.f}"
            )

        self.now = 0
        self._tiebreak = 0
        self._heap: list[tuple[int, int, str, str, object]] = []
        self._log = hashlib.sha256()
        self._events = 0
        self.captures: list[tuple[int, str, str, bytes]] = []
        self.metrics: dict[str, int] = {
            "net_frames": 0,
            "net_drops": 0,
            "net_partition_drops": 0,
            "ops_sent": 0,
            "ops_acked": 0,
            "flood_hellos": 0,
            "pending_max": 0,
            "flood_pending_max": 0,
            "flood_sessions": 0,
        }
        self.probe_log: list[tuple[int, bool, bool, str]] = []
        self.revocations: list[tuple[int, str, bytes]] = []
        self._crl_seen_at: dict[tuple[str, bytes], int] = {}
        self.departed_key_spy: dict[str, tuple[int, bytes]] = {}
        self._departure_tick: dict[str, int] = {}
        self._partition: list[set[str]] = []
        self._floods: list[dict] = []
        self._flood_counter = 0

        self._rng_net = Random(f"{self.seed}:net")
        self._rng_ca = Random(f"{self.seed}:ca")

        self.authority: CaState = ca_mod.ca_init(
            PROFILE_TEST_SMALL, self._rng_ca, MemoryStorage(), now=0
        )
        self.root_public = self.authority.root_pair.public
        self.keys: dict[str, tuple[crypto.KeyPair, crypto.KeyPair]] = {}
        self.certs: dict[str, ca_mod.Certificate] = {}
        self.tc_crashed = False

        genesis = [
            self._issue(f"r{i}", Role.REPLICA) for i in range(scenario.replicas)
        ]
        self.genesis = genesis
        self.replica_nodes: dict[str, _ReplicaNode] = {}
        for i in range(scenario.replicas):
            self._spawn_replica(f"r{i}")
        self.client_nodes: dict[str, _ClientNode] = {}
        for i in range(scenario.clients):
            cid = f"c{i}"
            self._issue(cid, Role.CLIENT)
            self.client_nodes[cid] = _ClientNode(cid, Random(f"{self.seed}:client:{cid}"))

    # -- construction helpers

    def _issue(self, subject: str, role: Role) -> ca_mod.Certificate:
        sign = crypto.generate_keypair(PROFILE_TEST_SMALL, crypto.KeyRole.SIGNING, self._rng_ca)
        ka = crypto.generate_keypair(
            PROFILE_TEST_SMALL, crypto.KeyRole.KEY_AGREEMENT, self._rng_ca
        )
        csr = ca_mod.make_csr(subject, sign, ka, role)
        cert = ca_mod.issue_certificate(self.authority, csr, now=self.now)
        self.keys[subject] = (sign, ka)
        self.certs[subject] = cert
        return cert

    def _spawn_replica(self, rid: str) -> _ReplicaNode:
        sc = self.scenario
        sign, ka = self.keys[rid]
        cert = self.certs[rid]
        gate = AccessController(
            root_public=self.root_public,
            crl_cache=CrlCache(freshness_window=sc.freshness_window),
        )
        gate.crl_cache.install(
            ca_mod.current_crl(self.authority, now=self.now), self.now,
            root_public=self.root_public,
        )
        replica = Replica(
            ReplicaConfig(
                my_id=rid,
                profile=PROFILE_TEST_SMALL,
                rekey_mode=sc.mode,
                encrypt_consensus=sc.encrypt_consensus,
            ),
            cert,
            sign.secret,
            ka.secret,
            list(self.genesis),
            self.root_public,
            gate,
            Random(f"{self.seed}:replica:{rid}"),
        )
        server = ServerEndpoint(
            ChannelConfig(profile=PROFILE_TEST_SMALL, cookie_policy=sc.cookie_policy),
            ChannelIdentity(rid, cert, sign.secret),
            gate,
            Random(f"{self.seed}:server:{rid}"),
        )
        node = _ReplicaNode(rid, replica, server)
        self.replica_nodes[rid] = node
        return node

    # -- event plumbing

    def _push(self, time: int, kind: str, target: str, payload: object) -> None:
        self._tiebreak += 1
        heapq.heappush(self._heap, (time, self._tiebreak, kind, target, payload))

    def _log_event(self, time: int, tiebreak: int, kind: str, target: str, payload: object) -> None:
        if kind == KIND_DELIVER:
            src, frame = payload  # type: ignore[misc]
            tail = hashlib.sha256(frame).hexdigest()[:16]
            extra = f"{src}>{tail}"
        elif kind == KIND_ACTION:
            extra = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        else:
            extra = "-"
        line = f"{time}|{tiebreak}|{kind}|{target}|{extra}\n"
        self._log.update(line.encode())
        self._events += 1

    def _send(self, src: str, dst: str, frame: bytes) -> None:
        """Put a frame on the wire; capture happens at transmit time."""
        if self._severed(src, dst):
            self.metrics["net_partition_drops"] += 1
            return
        self.captures.append((self.now, src, dst, frame))
        self.metrics["net_frames"] += 1
        link = self.scenario.link
        if link.drop_per_mille and self._rng_net.randrange(1000) < link.drop_per_mille:
            self.metrics["net_drops"] += 1
            return
        latency = link.base_latency
        if link.jitter:
            latency += self._rng_net.randint(0, link.jitter)
        self._push(self.now + max(1, latency), KIND_DELIVER, dst, (src, frame))

    def _severed(self, a: str, b: str) -> bool:
        if not self._partition:
            return False

        def group_of(x: str) -> int:
            for idx, grp in enumerate(self._partition):
                if x in grp:
                    return idx
            return len(self._partition)  # implicit remainder group

        return group_of(a) != group_of(b)

    # -- byzantine interception

    def inject_byzantine(self, node_id: str, behavior: str) -> None:
        if behavior not in BEHAVIORS:
            raise ScenarioInvalid(f"unknown byzantine behavior {behavior!r}")
        node = self.replica_nodes.get(node_id)
        if node is None:
            raise ScenarioInvalid(f"unknown replica {node_id!r}")
        active = {n.node_id for n in self.replica_nodes.values() if n.behavior}
        active.add(node_id)
        if len(active) > self.scenario.f and "beyond_f" not in self.scenario.labels:
            raise ExceedsFaultBudget(
                f"{len(active)} byzantine replicas exceed the declared f={self.scenario.f}"
            )
        node.behavior = behavior
        node._rng = Random(f"{self.seed}:byzantine:{node_id}")

    def _apply_behavior(
        self, node: _ReplicaNode, pairs: list[tuple[str, bytes]]
    ) -> list[tuple[str, bytes]]:
        if node.behavior is None:
            return pairs
        rng = node._rng
        assert rng is not None
        if node.behavior == BEHAVIOR_SILENT:
            return []
        if node.behavior == BEHAVIOR_FORGE:
            mutated = []
            for dst, frame in pairs:
                try:
                    env = SignedEnvelope.decode(frame)
                except (wire.WireError, ValueError):
                    mutated.append((dst, frame))
                    continue
                env.signature = rng.randbytes(len(env.signature) or crypto.SIG_LEN)
                mutated.append((dst, env.encode()))
            return mutated
        if node.behavior == BEHAVIOR_REPLAY:
            out = list(pairs)
            node._sent_history.extend(pairs)
            del node._sent_history[:-256]
            if node._sent_history and rng.random() < 0.5:
                out.append(node._sent_history[rng.randrange(len(node._sent_history))])
            return out
        # equivocate: conflicting proposals to disjoint halves of the peers
        by_frame: dict[bytes, list[str]] = {}
        order: list[bytes] = []
        for dst, frame in pairs:
            if frame not in by_frame:
                by_frame[frame] = []
                order.append(frame)
            by_frame[frame].append(dst)
        out = []
        for frame in order:
            targets = by_frame[frame]
            variant = self._equivocation_variant(node, frame)
            if variant is None or len(targets) < 2:
                out.extend((dst, frame) for dst in targets)
                continue
            half = len(targets) // 2
            ordered = sorted(targets)
            out.extend((dst, frame) for dst in ordered[:half])
            out.extend((dst, variant) for dst in ordered[half:])
        return out

    def _equivocation_variant(self, node: _ReplicaNode, frame: bytes) -> bytes | None:
        try:
            env = SignedEnvelope.decode(frame)
        except (wire.WireError, ValueError):
            return None
        if env.msg_type != MsgType.PROPOSE:
            return None
        key = (env.view, env.sequence)
        cached = node._equivocation_variants.get(key)
        if cached is not None:
            return cached
        rng = node._rng
        assert rng is not None
        twin = SignedEnvelope(
            MsgType.PROPOSE,
            node.node_id,
            env.view,
            env.sequence,
            0,
            encode_command(CMD_NOOP, rng.randbytes(8)),
        )
        twin.sign(self.keys[node.node_id][0].secret)
        variant = twin.encode()
        node._equivocation_variants[key] = variant
        return variant

    # -- outbound routing

    def _route_replica_outs(self, node: _ReplicaNode, outs: list[Outbound]) -> None:
        if node.crashed:
            return
        pairs: list[tuple[str, bytes]] = []
        client_outs: list[tuple[str, bytes]] = []
        for ob in outs:
            if ob.client:
                client_outs.append((ob.to, ob.frame))
                continue
            if ob.to == "*":
                for rid in sorted(self.replica_nodes):
                    if rid != node.node_id:
                        pairs.append((rid, ob.frame))
            else:
                pairs.append((ob.to, ob.frame))
        pairs = self._apply_behavior(node, pairs)
        if node.behavior == BEHAVIOR_SILENT:
            client_outs = []
        for dst, frame in pairs:
            self._send(node.node_id, dst, frame)
        for cid, frame in client_outs:
            self._send_client_reply(node, cid, frame)

    def _send_client_reply(self, node: _ReplicaNode, cid: str, frame: bytes) -> None:
        for sid in sorted(node.server.sessions):
            session = node.server.sessions[sid]
            if session.peer_id != cid:
                continue
            record = node.server.seal_to(sid, frame)
            address = node.server.address_of.get(sid, cid)
            self._send(node.node_id, address, record)
            return
        # no live session for that client on this replica; the reply is lost

    # -- inbound dispatch

    def _deliver(self, dst: str, src: str, frame: bytes) -> None:
        if dst in self.replica_nodes:
            self._deliver_replica(self.replica_nodes[dst], src, frame)
        elif dst in self.client_nodes:
            self._deliver_client(self.client_nodes[dst], src, frame)
        # tc and flood addresses accept no inbound traffic

    def _deliver_replica(self, node: _ReplicaNode, src: str, frame: bytes) -> None:
        if node.crashed:
            return
        try:
            tag, body, _ = wire.decode_tlv(frame)
        except wire.WireError:
            return
        if tag == wire.FRAME_ENVELOPE:
            outs = node.replica.on_frame(frame, src, self.now)
            self._route_replica_outs(node, outs)
        elif tag in _CHANNEL_TAGS:
            result = node.server.on_frame(frame, src, self.now)
            for reply in result.replies:
                self._send(node.node_id, src, reply)
            for delivery in result.delivered:
                session = node.server.sessions.get(delivery.session_id)
                if session is None:
                    continue
                outs = node.replica.on_client_payload(
                    delivery.payload, session.peer_cert, self.now
                )
                self._route_replica_outs(node, outs)
        elif tag == wire.FRAME_TC_PUSH_CRL:
            outs = node.replica.ingest_crl(body, self.now)
            self._route_replica_outs(node, outs)

    def _deliver_client(self, client: _ClientNode, src: str, frame: bytes) -> None:
        chan = client.channels.get(src)
        if chan is None:
            return
        result = chan.on_frame(frame, self.now)
        for reply in result.replies:
            self._send(client.client_id, src, reply)
        for delivery in result.delivered:
            self._client_reply(client, src, delivery.payload)

    def _client_reply(self, client: _ClientNode, rid: str, payload: bytes) -> None:
        try:
            env = SignedEnvelope.decode(payload)
        except (wire.WireError, ValueError):
            return
        chan = client.channels.get(rid)
        if chan is None or chan.session is None:
            return
        if env.msg_type != MsgType.CLIENT_REPLY:
            return
        if not env.verify(chan.session.peer_cert.sign_public):
            return
        try:
            cid, counter, result, _seq = decode_client_reply(env.payload)
        except wire.WireError:
            return
        if cid != client.client_id:
            return
        votes = client.results.setdefault(counter, {})
        votes[rid] = result
        if counter in client.acked:
            return
        matching: dict[bytes, int] = {}
        for val in votes.values():
            matching[val] = matching.get(val, 0) + 1
        if max(matching.values()) >= self.scenario.f + 1:
            client.acked.add(counter)
            self.metrics["ops_acked"] += 1

    # -- per-tick housekeeping

    def _tick(self) -> None:
        self._emit_floods()
        for rid in sorted(self.replica_nodes):
            node = self.replica_nodes[rid]
            if node.crashed:
                continue
            outs = node.replica.tick(self.now)
            self._route_replica_outs(node, outs)
        for cid in sorted(self.client_nodes):
            self._client_maintenance(self.client_nodes[cid])
        if self.scenario.crl_push_period and not self.tc_crashed:
            if self.now % self.scenario.crl_push_period == 0 and self.now > 0:
                self._push_crl()
        self._sample()

    def _client_maintenance(self, client: _ClientNode) -> None:
        for rid in sorted(self.replica_nodes):
            node = self.replica_nodes[rid]
            if node.crashed:
                continue
            chan = client.channels.get(rid)
            if chan is not None and chan.established:
                continue
            due = client.next_retry.get(rid, 0)
            if self.now < due:
                continue
            client.next_retry[rid] = self.now + 8
            sign, _ = self.keys[client.client_id]
            chan = ClientChannel(
                ChannelConfig(
                    profile=PROFILE_TEST_SMALL,
                    cookie_policy=self.scenario.cookie_policy,
                ),
                ChannelIdentity(client.client_id, self.certs[client.client_id], sign.secret),
                self.root_public,
                Random(f"{self.seed}:chan:{client.client_id}:{rid}:{self.now}"),
                expected_peer=rid,
            )
            client.channels[rid] = chan
            self._send(client.client_id, rid, chan.start(self.now))
        self._client_pump(client)

    def _client_pump(self, client: _ClientNode) -> None:
        while client.queue and client.queue[0][0] in client.acked:
            client.queue.pop(0)
        if not client.queue:
            return
        counter, payload = client.queue[0]
        fresh = counter != client.head_counter
        if not fresh and self.now - client.last_send < 12:
            return
        client.head_counter = counter
        client.last_send = self.now
        for rid in sorted(client.channels):
            chan = client.channels[rid]
            if chan.established:
                self._send(client.client_id, rid, chan.seal(payload))

    def _emit_floods(self) -> None:
        for flood in self._floods:
            if not (flood["from"] <= self.now < flood["until"]):
                continue
            target = flood["target"]
            cert_bytes = flood["cert"]
            rng: Random = flood["rng"]
            for _ in range(flood["rate"]):
                if flood["emitted"] >= flood["sources"]:
                    break
                addr = f"z{flood['emitted']}"
                flood["emitted"] += 1
                body = (
                    wire.encode_tlv(0x01, cert_bytes)
                    + wire.encode_tlv(0x02, flood["eph"])
                    + wire.encode_tlv(0x03, rng.randbytes(channel_mod.NONCE_LEN))
                )
                self._send(addr, target, wire.encode_tlv(wire.FRAME_HELLO1, body))
                self.metrics["flood_hellos"] += 1

    def _push_crl(self) -> None:
        crl_bytes = ca_mod.current_crl(self.authority, now=self.now).encode()
        frame = wire.encode_tlv(wire.FRAME_TC_PUSH_CRL, crl_bytes)
        for rid in sorted(self.replica_nodes):
            self._send("tc", rid, frame)

    def _sample(self) -> None:
        for rid in sorted(self.replica_nodes):
            node = self.replica_nodes[rid]
            pending = len(node.server.pending)
            if pending > self.metrics["pending_max"]:
                self.metrics["pending_max"] = pending
            flood_pending = sum(
                1 for (addr, _n) in node.server.pending if addr.startswith("z")
            )
            if flood_pending > self.metrics["flood_pending_max"]:
                self.metrics["flood_pending_max"] = flood_pending
            flood_sessions = sum(
                1 for addr in node.server.address_of.values() if addr.startswith("z")
            )
            if flood_sessions > self.metrics["flood_sessions"]:
                self.metrics["flood_sessions"] = flood_sessions
        for tick, victim, serial in self.revocations:
            for rid in sorted(self.replica_nodes):
                key = (rid, serial)
                if key in self._crl_seen_at:
                    continue
                node = self.replica_nodes[rid]
                crl = node.replica.gate.crl_cache.current
                if crl is not None and serial in crl.revoked_serials():
                    self._crl_seen_at[key] = self.now

    # -- scripted actions

    def _act(self, action: dict) -> None:
        kind = action["kind"]
        if kind == "crash":
            node = action["node"]
            if node == "tc":
                self.tc_crashed = True
            elif node in self.replica_nodes:
                self.replica_nodes[node].crashed = True
        elif kind == "partition":
            self._partition = [set(group) for group in action["groups"]]
        elif kind == "heal":
            self._partition = []
        elif kind == "byzantine":
            self.inject_byzantine(action["node"], action["behavior"])
        elif kind == "flood":
            self._flood_counter += 1
            rng = Random(f"{self.seed}:flood:{self._flood_counter}")
            # a spoofing attacker replays a stolen-but-valid certificate and a
            # well-formed group element; only the source addresses are fake
            eph = crypto.generate_keypair(
                PROFILE_TEST_SMALL, crypto.KeyRole.KEY_AGREEMENT, rng
            ).public
            self._floods.append(
                {
                    "target": action.get("target", "r0"),
                    "sources": int(action.get("sources", 1000)),
                    "rate": int(action.get("rate", 100)),
                    "from": self.now,
                    "until": self.now + int(action.get("duration", 20)),
                    "emitted": 0,
                    "cert": self.certs[action.get("borrow_cert", "c0")].encode(),
                    "eph": eph,
                    "rng": rng,
                }
            )
        elif kind == "revoke":
            victim = action["node"]
            serial = self.certs[victim].serial
            ca_mod.revoke(
                self.authority, serial, ca_mod.RevocationReason.COMPROMISED, now=self.now
            )
            self.revocations.append((self.now, victim, serial))
            if not self.tc_crashed:
                self._push_crl()
        elif kind == "join":
            self._act_join(action["node"])
        elif kind == "leave":
            self._act_leave(action["node"])
        elif kind == "client_load":
            self._act_client_load(action)
        elif kind == "probe_admission":
            self._act_probe(action)

    def _act_join(self, node_id: str) -> None:
        self._issue(node_id, Role.REPLICA)
        node = self._spawn_replica(node_id)
        outs = node.replica.begin_join(self.now)
        self._route_replica_outs(node, outs)

    def _act_leave(self, node_id: str) -> None:
        node = self.replica_nodes.get(node_id)
        if node is None or node.crashed:
            return
        entry = node.replica.gkm.epoch
        if entry is not None:
            self.departed_key_spy[node_id] = (entry.epoch, bytes(entry.key.data))
        self._departure_tick[node_id] = self.now
        outs = node.replica.request_leave(self.now)
        self._route_replica_outs(node, outs)

    def _act_client_load(self, action: dict) -> None:
        client = self.client_nodes[action["client"]]
        count = int(action.get("count", 1))
        period = int(action.get("period", 2))
        for k in range(count):
            self._push(
                self.now + k * period,
                KIND_ACTION,
                client.client_id,
                {"kind": "_client_op", "client": client.client_id},
            )

    def _act_client_op(self, action: dict) -> None:
        client = self.client_nodes[action["client"]]
        client.sent += 1
        self.metrics["ops_sent"] += 1
        counter = client.sent
        marker = bytes.fromhex(self.scenario.params.get("marker", ""))
        value = marker if marker else client.rng.randbytes(12)
        op = kvapp.encode_op(
            kvapp.OP_PUT, f"{client.client_id}-{counter}".encode(), value
        )
        env = SignedEnvelope(MsgType.CLIENT_REQ, client.client_id, 0, counter, 0, op)
        env.sign(self.keys[client.client_id][0].secret)
        client.queue.append((counter, env.encode()))
        self._client_pump(client)

    def _act_probe(self, action: dict) -> None:
        node = self.replica_nodes[action["node"]]
        probe_cert = self.certs[action.get("cert_of", "c0")]
        decision = node.replica.gate.admit(
            probe_cert, CTX_CLIENT_REQUEST, self.now, source_key="probe"
        )
        self.probe_log.append(
            (self.now, decision.allowed, decision.stale_crl, decision.reason)
        )

    # -- the loop

    def run(self) -> RunReport:
        for tick in range(self.scenario.duration + 1):
            self._push(tick, KIND_TIMER, "*", None)
        for entry in self.scenario.timeline:
            self._push(entry["at"], KIND_ACTION, entry.get("node", "*"), dict(entry))
        while self._heap:
            time, tiebreak, kind, target, payload = heapq.heappop(self._heap)
            self.now = time
            self._log_event(time, tiebreak, kind, target, payload)
            if kind == KIND_TIMER:
                self._tick()
            elif kind == KIND_DELIVER:
                src, frame = payload  # type: ignore[misc]
                self._deliver(target, src, frame)
            elif kind == KIND_ACTION:
                assert isinstance(payload, dict)
                if payload["kind"] == "_client_op":
                    self._act_client_op(payload)
                else:
                    self._act(payload)
        results = [
            (name, *ASSERTIONS[name](self)) for name in self.scenario.assertions
        ]
        self._merge_metrics()
        return RunReport(
            scenario=self.scenario.name,
            seed=self.seed,
            ticks=self.scenario.duration,
            events=self._events,
            event_log_digest=self._log.hexdigest(),
            assertions=results,
            metrics=dict(sorted(self.metrics.items())),
        )

    def _merge_metrics(self) -> None:
        executed = 0
        view_max = 0
        evidence = 0
        rekeys = 0
        for rid in sorted(self.replica_nodes):
            rep = self.replica_nodes[rid].replica
            executed = max(executed, rep.metrics["executed"])
            view_max = max(view_max, rep.view)
            evidence += rep.metrics["evidence_found"]
            rekeys = max(rekeys, rep.metrics["rekeys_applied"])
        self.metrics["executed_max"] = executed
        self.metrics["view_max"] = view_max
        self.metrics["evidence_total"] = evidence
        self.metrics["rekeys_max"] = rekeys
        self.metrics["captured_frames"] = len(self.captures)

    # -- assertion helpers

    def honest_replicas(self) -> list[_ReplicaNode]:
        return [
            node
            for rid, node in sorted(self.replica_nodes.items())
            if node.behavior is None
        ]

    def settled_replicas(self) -> list[_ReplicaNode]:
        return [
            node
            for node in self.honest_replicas()
            if not node.crashed and not node.replica.halted
        ]

    def capture_frames(self, src: str | None = None, dst: str | None = None) -> list[bytes]:
        return [
            frame
            for _t, s, d, frame in self.captures
            if (src is None or s == src) and (dst is None or d == dst)
        ]


# ---------------------------------------------------------------------------
# Assertion registry

ASSERTIONS: dict[str, object] = {}


def _assertion(name: str):
    def wrap(fn):
        ASSERTIONS[name] = fn
        return fn

    return wrap


@_assertion("agreement")
def _assert_agreement(sim: Simulation) -> tuple[bool, str]:
    """No two honest replicas executed different commands at one sequence."""
    chosen: dict[int, tuple[str, bytes]] = {}
    checked = 0
    for node in sim.honest_replicas():
        for seq, digest in node.replica.execution_log:
            checked += 1
            prev = chosen.get(seq)
            if prev is None:
                chosen[seq] = (node.node_id, digest)
            elif prev[1] != digest:
                return False, f"divergence at seq {seq}: {prev[0]} vs {node.node_id}"
    return True, f"{checked} executions over {len(chosen)} sequences agree"


@_assertion("convergence")
def _assert_convergence(sim: Simulation) -> tuple[bool, str]:
    nodes = sim.settled_replicas()
    digests = {node.replica.app.digest() for node in nodes}
    if len(digests) != 1:
        return False, f"{len(digests)} distinct app states across {len(nodes)} replicas"
    heights = {node.replica.last_executed for node in nodes}
    if len(heights) != 1:
        return False, f"replicas stopped at different heights {sorted(heights)}"
    return True, f"{len(nodes)} replicas share one state at height {heights.pop()}"


@_assertion("liveness")
def _assert_liveness(sim: Simulation) -> tuple[bool, str]:
    sent = sim.metrics["ops_sent"]
    acked = sim.metrics["ops_acked"]
    need = sim.scenario.params.get("min_ack_ratio", 1.0)
    if sent == 0:
        return False, "no operations were sent"
    ok = acked >= sent * need
    return ok, f"{acked}/{sent} operations acknowledged"


@_assertion("view_advanced")
def _assert_view_advanced(sim: Simulation) -> tuple[bool, str]:
    views = {node.node_id: node.replica.view for node in sim.settled_replicas()}
    top = max(views.values(), default=0)
    return top >= 1, f"highest view {top}"


@_assertion("evidence_logged")
def _assert_evidence(sim: Simulation) -> tuple[bool, str]:
    total = sum(
        node.replica.metrics["evidence_found"] for node in sim.honest_replicas()
    )
    return total >= 1, f"{total} conflict proofs recorded"


@_assertion("eviction_completed")
def _assert_eviction_completed(sim: Simulation) -> tuple[bool, str]:
    culprit = sim.scenario.params.get("culprit", "")
    for node in sim.settled_replicas():
        if culprit in node.replica.membership.current().members:
            return False, f"{culprit} still a member at {node.node_id}"
    return True, f"{culprit} removed everywhere"


@_assertion("eviction_blocked")
def _assert_eviction_blocked(sim: Simulation) -> tuple[bool, str]:
    culprit = sim.scenario.params.get("culprit", "")
    blocked = sum(
        node.replica.metrics["evictions_blocked"] for node in sim.honest_replicas()
    )
    still_member = all(
        culprit in node.replica.membership.current().members
        for node in sim.settled_replicas()
    )
    ok = blocked >= 1 and still_member
    return ok, f"blocked {blocked} times, culprit membership retained: {still_member}"


@_assertion("epoch_advanced")
def _assert_epoch_advanced(sim: Simulation) -> tuple[bool, str]:
    floor = int(sim.scenario.params.get("min_epoch", 2))
    epochs = {}
    for node in sim.settled_replicas():
        entry = node.replica.gkm.epoch
        epochs[node.node_id] = entry.epoch if entry else 0
    low = min(epochs.values(), default=0)
    return low >= floor, f"lowest epoch {low}, required {floor}"


@_assertion("epochs_consistent")
def _assert_epochs_consistent(sim: Simulation) -> tuple[bool, str]:
    keys = set()
    for node in sim.settled_replicas():
        entry = node.replica.gkm.epoch
        if entry is None:
            return False, f"{node.node_id} holds no epoch"
        keys.add((entry.epoch, entry.key.data))
    return len(keys) == 1, f"{len(keys)} distinct (epoch, key) pairs"


@_assertion("marker_absent")
def _assert_marker_absent(sim: Simulation) -> tuple[bool, str]:
    marker = bytes.fromhex(sim.scenario.params["marker"])
    hits = sum(1 for _t, _s, _d, frame in sim.captures if marker in frame)
    return hits == 0, f"marker found in {hits} of {len(sim.captures)} frames"


@_assertion("marker_present")
def _assert_marker_present(sim: Simulation) -> tuple[bool, str]:
    marker = bytes.fromhex(sim.scenario.params["marker"])
    hits = sum(1 for _t, _s, _d, frame in sim.captures if marker in frame)
    return hits > 0, f"marker found in {hits} frames (control case)"


@_assertion("pfs_departed")
def _assert_pfs_departed(sim: Simulation) -> tuple[bool, str]:
    """The key material a departed member held opens none of the traffic
    sealed after its removal."""
    leaver = sim.scenario.params.get("leaver", "")
    spy = sim.departed_key_spy.get(leaver)
    gone_at = sim._departure_tick.get(leaver)
    if spy is None or gone_at is None:
        return False, f"no key material captured for {leaver}"
    old_epoch, key_bytes = spy
    attempts = 0
    opened = 0
    for t, _s, _d, frame in sim.captures:
        if t <= gone_at:
            continue
        try:
            env = SignedEnvelope.decode(frame)
        except (wire.WireError, ValueError):
            continue
        if env.msg_type != MsgType.PROPOSE or env.epoch <= old_epoch:
            continue
        try:
            kind, blob = decode_command(env.payload)
        except wire.WireError:
            continue
        if kind != CMD_APP:
            continue
        attempts += 1
        try:
            unseal_command_body(blob, key_bytes, env.sequence, env.epoch)
            opened += 1
        except (wire.WireError, crypto.AuthenticationFailure, crypto.CryptoError):
            pass
    if attempts == 0:
        return False, "no post-departure ciphertexts to attack"
    return opened == 0, f"opened {opened} of {attempts} post-departure ciphertexts"


@_assertion("flood_no_state")
def _assert_flood_no_state(sim: Simulation) -> tuple[bool, str]:
    pending = sim.metrics["flood_pending_max"]
    sessions = sim.metrics["flood_sessions"]
    ok = pending == 0 and sessions == 0
    return ok, f"flood pending max {pending}, flood sessions {sessions}"


@_assertion("honest_success")
def _assert_honest_success(sim: Simulation) -> tuple[bool, str]:
    sent = sim.metrics["ops_sent"]
    acked = sim.metrics["ops_acked"]
    if sent == 0:
        return False, "no honest operations were sent"
    ratio = acked / sent
    return ratio >= 0.9, f"{acked}/{sent} honest operations succeeded"


@_assertion("pending_grew")
def _assert_pending_grew(sim: Simulation) -> tuple[bool, str]:
    floor = int(sim.scenario.params.get("pending_min", 1000))
    peak = sim.metrics["flood_pending_max"]
    return peak >= floor, f"half-open table peaked at {peak} (control requires >= {floor})"


@_assertion("revocation_latency")
def _assert_revocation_latency(sim: Simulation) -> tuple[bool, str]:
    if not sim.revocations:
        return False, "no revocation was scripted"
    link = sim.scenario.link
    push_delay = link.base_latency + link.jitter + 1
    bound = sim.scenario.freshness_window + push_delay
    worst = -1
    for tick, victim, serial in sim.revocations:
        for rid in sorted(sim.replica_nodes):
            node = sim.replica_nodes[rid]
            if node.crashed:
                continue
            seen = sim._crl_seen_at.get((rid, serial))
            if seen is None:
                return False, f"{rid} never saw the revocation of {victim}"
            worst = max(worst, seen - tick)
    return worst <= bound, f"worst enforcement latency {worst} ticks (bound {bound})"


@_assertion("barrier_boundary")
def _assert_barrier_boundary(sim: Simulation) -> tuple[bool, str]:
    """The departed identity's envelopes pass at the barrier sequence and are
    refused one past it."""
    departed = sim.scenario.params.get("departed", "")
    sign = sim.keys[departed][0]
    witness = None
    for node in sim.settled_replicas():
        if departed not in node.replica.membership.current().members:
            witness = node
            break
    if witness is None:
        return False, f"{departed} was never removed"
    log = witness.replica.membership
    barrier = None
    for era in log.eras:
        if departed not in era.members:
            barrier = era.barrier
            break
    if barrier is None:
        return False, "no era without the departed member"
    from .bft import encode_accept_payload

    inst = witness.replica.instances.get(barrier)
    digest = inst.digest if inst is not None and inst.digest else b"\x00" * 32
    view = inst.view if inst is not None else 0

    def probe(seq: int) -> str:
        env = SignedEnvelope(
            MsgType.ACCEPT, departed, view, seq, 0, encode_accept_payload(digest)
        )
        env.sign(sign.secret)
        witness.replica.on_frame(env.encode(), departed, sim.now)
        return witness.replica.dispositions[-1].reason

    at_barrier = probe(barrier)
    past_barrier = probe(barrier + 1)
    ok = at_barrier != "outside_membership_barrier" and (
        past_barrier == "outside_membership_barrier"
    )
    return ok, f"at barrier: {at_barrier}; past barrier: {past_barrier}"


@_assertion("grace_flip")
def _assert_grace_flip(sim: Simulation) -> tuple[bool, str]:
    stale_allowed = [p for p in sim.probe_log if p[1] and p[2]]
    denied = [p for p in sim.probe_log if not p[1] and p[3] == "crl_unavailable"]
    ok = bool(stale_allowed) and bool(denied)
    if not ok:
        return False, f"probes: {sim.probe_log!r}"
    return True, (
        f"stale-but-allowed at t={stale_allowed[0][0]}, denied at t={denied[0][0]}"
    )


def run(scenario: Scenario, seed: int | None = None) -> RunReport:
    """Build and run one scenario; the module-level convenience entry."""
    return Simulation(scenario, seed=seed).run()
