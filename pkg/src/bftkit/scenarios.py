"""Bundled simulation scenarios.

Each builder returns a ready-to-run Scenario with its property checks wired
up. The registry feeds the command line (`sim list-scenarios`, `sim run`),
and the test suite runs every entry, so the bundle doubles as a regression
net for the whole stack.
"""

from __future__ import annotations

import json
from pathlib import Path
from random import Random
from typing import Callable

from . import channel as channel_mod
from . import groupkey
from .sim import Scenario, ScenarioInvalid

_REGISTRY: dict[str, Callable[[], Scenario]] = {}


def _bundled(fn: Callable[[], Scenario]) -> Callable[[], Scenario]:
    name = fn.__name__.replace("_scenario", "").replace("_", "-")
    _REGISTRY[name] = fn
    return fn


def names() -> list[str]:
    return sorted(_REGISTRY)


def build(name: str, seed: int | None = None) -> Scenario:
    try:
        scenario = _REGISTRY[name]()
    except KeyError:
        raise ScenarioInvalid(f"unknown scenario {name!r}") from None
    if seed is not None:
        scenario.seed = seed
    return scenario


def load_file(path: str | Path) -> Scenario:
    """Read a scenario description from a JSON file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ScenarioInvalid(f"cannot read {path}: {exc}") from exc
    return Scenario.from_json(text)


# a recognizable 16-byte plaintext for the wire-capture scans
_MARKER = "f00dfeedfacebead0badc0dedeadbeef"


def _ops(client: str, at: int, count: int, period: int = 8) -> dict:
    return {
        "at": at,
        "kind": "client_load",
        "client": client,
        "count": count,
        "period": period,
    }


@_bundled
def smoke_scenario() -> Scenario:
    """Four healthy replicas, one client, nothing goes wrong."""
    return Scenario(
        name="smoke",
        seed=1,
        replicas=4,
        clients=1,
        duration=200,
        timeline=[_ops("c0", 10, 10)],
        assertions=["agreement", "convergence", "liveness"],
    )


@_bundled
def leader_crash_scenario() -> Scenario:
    """The view-0 leader dies mid-stream; the view change must keep every
    operation alive."""
    return Scenario(
        name="leader-crash",
        seed=3,
        replicas=4,
        clients=1,
        duration=400,
        timeline=[
            _ops("c0", 10, 6, period=10),
            {"at": 40, "kind": "crash", "node": "r0"},
        ],
        assertions=["agreement", "convergence", "liveness", "view_advanced"],
    )


@_bundled
def join_rekey_scenario() -> Scenario:
    return Scenario(
        name="join-rekey",
        seed=5,
        replicas=4,
        clients=1,
        duration=400,
        timeline=[
            _ops("c0", 10, 5, period=10),
            {"at": 60, "kind": "join", "node": "r4"},
            _ops("c0", 180, 5, period=10),
        ],
        params={"min_epoch": 2},
        assertions=[
            "agreement",
            "convergence",
            "liveness",
            "epoch_advanced",
            "epochs_consistent",
        ],
    )


def _leave_pfs(name: str, seed: int, mode: str) -> Scenario:
    return Scenario(
        name=name,
        seed=seed,
        replicas=5,
        clients=1,
        mode=mode,
        duration=500,
        timeline=[
            _ops("c0", 10, 4, period=10),
            {"at": 80, "kind": "leave", "node": "r4"},
            _ops("c0", 200, 8, period=10),
        ],
        params={"min_epoch": 2, "leaver": "r4", "departed": "r4"},
        assertions=[
            "agreement",
            "convergence",
            "liveness",
            "epoch_advanced",
            "epochs_consistent",
            "pfs_departed",
            "barrier_boundary",
        ],
    )


@_bundled
def leave_rekey_pfs_scenario() -> Scenario:
    """A member departs; its old key must open none of the later traffic and
    its signatures must die exactly at the membership barrier."""
    return _leave_pfs("leave-rekey-pfs", 7, groupkey.MODE_LEADER_SEALED)


@_bundled
def leave_rekey_pfs_tree_scenario() -> Scenario:
    """Same departure story under the contributory key mode."""
    return _leave_pfs("leave-rekey-pfs-tree", 8, groupkey.MODE_TREE)


@_bundled
def equivocate_evict_scenario() -> Scenario:
    """A two-faced leader leaves signed proof; with five members the group
    can afford to expel it."""
    return Scenario(
        name="equivocate-evict",
        seed=11,
        replicas=5,
        clients=1,
        duration=600,
        timeline=[
            {"at": 20, "kind": "byzantine", "node": "r0", "behavior": "equivocate"},
            _ops("c0", 30, 8, period=12),
        ],
        params={"culprit": "r0", "min_epoch": 2, "min_ack_ratio": 0.9},
        assertions=[
            "agreement",
            "convergence",
            "liveness",
            "evidence_logged",
            "eviction_completed",
            "epoch_advanced",
        ],
    )


@_bundled
def equivocate_blocked_scenario() -> Scenario:
    """Equivocation at the minimum group size: evidence is kept but the
    eviction stays parked, because shrinking below the fault bound would be
    worse than living with a proven liar."""
    return Scenario(
        name="equivocate-blocked",
        seed=13,
        replicas=4,
        clients=1,
        duration=600,
        timeline=[
            {"at": 20, "kind": "byzantine", "node": "r0", "behavior": "equivocate"},
            _ops("c0", 30, 8, period=12),
        ],
        params={"culprit": "r0", "min_ack_ratio": 0.9},
        assertions=[
            "agreement",
            "convergence",
            "liveness",
            "evidence_logged",
            "eviction_blocked",
        ],
    )


def _follower_fault(name: str, seed: int, behavior: str) -> Scenario:
    return Scenario(
        name=name,
        seed=seed,
        replicas=4,
        clients=1,
        duration=400,
        timeline=[
            {"at": 20, "kind": "byzantine", "node": "r3", "behavior": behavior},
            _ops("c0", 30, 8, period=10),
        ],
        assertions=["agreement", "convergence", "liveness"],
    )


@_bundled
def silent_follower_scenario() -> Scenario:
    return _follower_fault("silent-follower", 17, "silent")


@_bundled
def forge_follower_scenario() -> Scenario:
    return _follower_fault("forge-follower", 19, "forge_signatures")


@_bundled
def replay_follower_scenario() -> Scenario:
    return _follower_fault("replay-follower", 23, "replay_old")


@_bundled
def revoke_mid_run_scenario() -> Scenario:
    """The authority revokes a replica mid-run; everyone must see the CRL
    inside the freshness window and the group then votes the holder out."""
    return Scenario(
        name="revoke-mid-run",
        seed=29,
        replicas=5,
        clients=1,
        duration=600,
        crl_push_period=25,
        timeline=[
            _ops("c0", 10, 4, period=10),
            {"at": 80, "kind": "revoke", "node": "r4"},
            _ops("c0", 200, 4, period=10),
        ],
        params={"culprit": "r4", "min_epoch": 2, "min_ack_ratio": 0.9},
        assertions=[
            "agreement",
            "convergence",
            "liveness",
            "revocation_latency",
            "eviction_completed",
            "epoch_advanced",
        ],
    )


@_bundled
def syn_flood_scenario() -> Scenario:
    """Two thousand spoofed sources hammer one replica while a real client
    works; the cookie exchange must leave the attacker holding nothing."""
    return Scenario(
        name="syn-flood",
        seed=31,
        replicas=4,
        clients=1,
        duration=300,
        cookie_policy=channel_mod.COOKIE_POLICY_ALWAYS,
        timeline=[
            _ops("c0", 10, 6, period=10),
            {
                "at": 50,
                "kind": "flood",
                "target": "r0",
                "sources": 2000,
                "rate": 200,
                "duration": 10,
            },
        ],
        assertions=["flood_no_state", "honest_success", "agreement", "convergence"],
    )


@_bundled
def syn_flood_no_cookie_scenario() -> Scenario:
    """Control run with the cookie exchange disabled: the same flood must
    visibly fill the half-open table, or the protected run proves nothing."""
    return Scenario(
        name="syn-flood-no-cookie",
        seed=31,
        replicas=4,
        clients=1,
        duration=300,
        cookie_policy=channel_mod.COOKIE_POLICY_OFF,
        timeline=[
            _ops("c0", 10, 6, period=10),
            {
                "at": 50,
                "kind": "flood",
                "target": "r0",
                "sources": 2000,
                "rate": 200,
                "duration": 10,
            },
        ],
        params={"pending_min": 1000},
        assertions=["pending_grew", "honest_success"],
    )


@_bundled
def ca_outage_scenario() -> Scenario:
    """The trust center goes dark. Admission rides the stale CRL through the
    grace window, then fails closed."""
    return Scenario(
        name="ca-outage",
        seed=37,
        replicas=4,
        clients=1,
        duration=250,
        freshness_window=40,
        crl_push_period=50,
        timeline=[
            _ops("c0", 10, 4, period=10),
            {"at": 60, "kind": "crash", "node": "tc"},
            {"at": 120, "kind": "probe_admission", "node": "r1", "cert_of": "c0"},
            {"at": 185, "kind": "probe_admission", "node": "r1", "cert_of": "c0"},
        ],
        assertions=["grace_flip", "agreement", "convergence", "liveness"],
    )


@_bundled
def partition_heal_scenario() -> Scenario:
    """A clean split leaves no side with quorum; progress resumes after the
    network heals."""
    return Scenario(
        name="partition-heal",
        seed=41,
        replicas=4,
        clients=1,
        duration=500,
        timeline=[
            _ops("c0", 10, 3, period=10),
            {"at": 60, "kind": "partition", "groups": [["r0", "r1"], ["r2", "r3", "c0"]]},
            _ops("c0", 80, 3, period=10),
            {"at": 160, "kind": "heal"},
            _ops("c0", 260, 3, period=10),
        ],
        assertions=["agreement", "convergence", "liveness"],
    )


@_bundled
def marker_sealed_scenario() -> Scenario:
    """With consensus payload sealing on, a known plaintext marker must never
    show up in any captured frame."""
    return Scenario(
        name="marker-sealed",
        seed=43,
        replicas=4,
        clients=1,
        encrypt_consensus=True,
        duration=200,
        timeline=[_ops("c0", 10, 6, period=10)],
        params={"marker": _MARKER},
        assertions=["agreement", "liveness", "marker_absent"],
    )


@_bundled
def marker_plain_scenario() -> Scenario:
    """Control run with sealing off: the marker must be visible, proving the
    sealed run's negative scan actually looks in the right place."""
    return Scenario(
        name="marker-plain",
        seed=43,
        replicas=4,
        clients=1,
        encrypt_consensus=False,
        duration=200,
        timeline=[_ops("c0", 10, 6, period=10)],
        params={"marker": _MARKER},
        assertions=["agreement", "liveness", "marker_present"],
    )


@_bundled
def churn_soak_scenario() -> Scenario:
    """Two hundred scripted joins and leaves, group size wandering between
    four and eight, with client traffic running throughout."""
    rng = Random("churn-soak:1")
    timeline: list[dict] = [_ops("c0", 10, 12, period=40)]
    members = ["r0", "r1", "r2", "r3"]
    next_id = 4
    at = 40
    for _ in range(200):
        can_join = len(members) < 8
        can_leave = len(members) > 4
        if can_join and (not can_leave or rng.random() < 0.5):
            node = f"r{next_id}"
            next_id += 1
            timeline.append({"at": at, "kind": "join", "node": node})
            members.append(node)
        else:
            node = rng.choice([m for m in members if m != "r0"])
            timeline.append({"at": at, "kind": "leave", "node": node})
            members.remove(node)
        at += 60
    return Scenario(
        name="churn-soak",
        seed=47,
        replicas=4,
        clients=1,
        duration=at + 400,
        timeline=timeline,
        assertions=["agreement", "convergence", "liveness", "epochs_consistent"],
    )


def render_listing() -> str:
    """One line per bundled scenario, for the command line."""
    lines = []
    for name in names():
        sc = _REGISTRY[name]()
        lines.append(
            f"{name:24s} replicas={sc.replicas} clients={sc.clients} "
            f"duration={sc.duration} checks={len(sc.assertions)}"
        )
    return "\n".join(lines)


def dump_json(name: str) -> str:
    """Serialize one bundled scenario, handy as a starting point for custom
    files."""
    return json.dumps(json.loads(build(name).to_json()), indent=2)
