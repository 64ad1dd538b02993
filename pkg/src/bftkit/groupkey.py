"""Group key management in two interchangeable modes.

``leader_sealed``: the proposer draws a fresh epoch secret and seals one copy
per member under a wrap key derived from an ephemeral DH exchange against the
member's long-term key-agreement key.

``tgdh``: a binary key tree where each member holds one leaf secret and the
tree's public blinded keys. Joins insert at the shallowest-rightmost leaf
(ties broken toward the rightmost in in-order position), leaves promote the
sibling subtree, and the sponsor (rightmost leaf of the affected sibling
subtree) renews its own leaf secret and republishes its path's blinded keys.

Both modes end in the same place: an epoch key derived from the shared secret
with the membership hash as salt. Epoch keys never leave the process; only
sealed copies and blinded elements cross the wire. Proposals are applied in
consensus order by the caller, which supplies the activation sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from random import Random

from . import crypto, wire
from .crypto import CipherProfile, SymmetricKey


class GroupKeyError(Exception):
    pass


class DuplicateMember(GroupKeyError):
    pass


class UnknownMember(GroupKeyError):
    pass


class StalePath(GroupKeyError):
    """A blinded key needed for the root computation is stale or missing."""


class EpochRegression(GroupKeyError):
    pass


class SealedCopyMissing(GroupKeyError):
    pass


class MissingCertificate(GroupKeyError):
    """No key-agreement key known for a member that needs a sealed copy."""


class BadProposal(GroupKeyError):
    pass


MODE_LEADER_SEALED = "leader_sealed"
MODE_TGDH = "tgdh"

_ZERO_NONCE = b"\x00" * crypto.AEAD_NONCE_LEN


def membership_hash(member_ids) -> bytes:
    return crypto.hash_bytes(b"\x00".join(m.encode() for m in sorted(member_ids)))


# ---------------------------------------------------------------------------
# TGDH tree


class TreeNode:
    __slots__ = ("member_id", "blinded", "stale", "left", "right", "parent")

    def __init__(self, member_id=None, blinded=None):
        self.member_id: str | None = member_id
        self.blinded: bytes | None = blinded
        self.stale: bool = False
        self.left: TreeNode | None = None
        self.right: TreeNode | None = None
        self.parent: TreeNode | None = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


class TgdhTree:
    """Shape-deterministic binary key tree. Mutations go through join/leave so
    that every member replaying the same ordered history gets the same shape,
    and therefore the same level-order node indices for deltas."""

    def __init__(self):
        self.root: TreeNode | None = None
        self._leaves: dict[str, TreeNode] = {}

    def __len__(self) -> int:
        return len(self._leaves)

    def members(self) -> list[str]:
        return sorted(self._leaves)

    # -- shape -------------------------------------------------------------

    def join(self, member_id: str, blinded_leaf: bytes) -> str:
        """Insert a leaf; returns the sponsor (owner of the displaced leaf).
        The new internal node and every ancestor go stale until the sponsor
        republishes its path."""
        if member_id in self._leaves:
            raise DuplicateMember(member_id)
        leaf = TreeNode(member_id=member_id, blinded=blinded_leaf)
        self._leaves[member_id] = leaf
        if self.root is None:
            self.root = leaf
            return member_id
        spot = self._insertion_leaf()
        parent = TreeNode()
        self._replace(spot, parent)
        parent.left = spot
        parent.right = leaf
        spot.parent = parent
        leaf.parent = parent
        node = parent
        while node is not None:
            node.stale = True
            node.blinded = None
            node = node.parent
        return self._rightmost_leaf(spot).member_id

    def leave(self, member_id: str) -> str | None:
        """Remove a leaf, promoting its sibling subtree. Returns the sponsor
        (rightmost leaf of the promoted subtree), or None if the tree emptied."""
        leaf = self._leaves.pop(member_id, None)
        if leaf is None:
            raise UnknownMember(member_id)
        parent = leaf.parent
        if parent is None:
            self.root = None
            return None
        sibling = parent.left if parent.right is leaf else parent.right
        self._replace(parent, sibling)
        node = sibling.parent
        while node is not None:
            node.stale = True
            node.blinded = None
            node = node.parent
        return self._rightmost_leaf(sibling).member_id

    def _replace(self, old: TreeNode, new: TreeNode) -> None:
        grand = old.parent
        new.parent = grand
        if grand is None:
            self.root = new
        elif grand.left is old:
            grand.left = new
        else:
            grand.right = new

    def _insertion_leaf(self) -> TreeNode:
        """Rightmost leaf among those at minimal depth."""
        best = None
        best_key = None
        for position, (leaf, depth) in enumerate(self._leaves_in_order()):
            key = (depth, -position)
            if best_key is None or key < best_key:
                best, best_key = leaf, key
        return best

    def _leaves_in_order(self):
        out = []

        def walk(node, depth):
            if node is None:
                return
            if node.is_leaf:
                out.append((node, depth))
            else:
                walk(node.left, depth + 1)
                walk(node.right, depth + 1)

        walk(self.root, 0)
        return out

    def _rightmost_leaf(self, node: TreeNode) -> TreeNode:
        while not node.is_leaf:
            node = node.right
        return node

    # -- indexing ----------------------------------------------------------

    def level_order(self) -> list[TreeNode]:
        if self.root is None:
            return []
        order = [self.root]
        i = 0
        while i < len(order):
            node = order[i]
            i += 1
            if not node.is_leaf:
                order.append(node.left)
                order.append(node.right)
        return order

    def shape_signature(self) -> bytes:
        """Canonical shape+membership digest, for agreement assertions."""
        parts = []
        for node in self.level_order():
            parts.append(node.member_id.encode() if node.is_leaf else b"*")
        return crypto.hash_bytes(b"|".join(parts))

    def blinded_map(self) -> list[tuple[int, bytes]]:
        """All non-stale blinded keys as (level-order index, value) pairs."""
        out = []
        for index, node in enumerate(self.level_order()):
            if node.blinded is not None and not node.stale:
                out.append((index, node.blinded))
        return out

    def apply_delta(self, delta: list[tuple[int, bytes]]) -> None:
        order = self.level_order()
        for index, blinded in delta:
            if index >= len(order):
                raise BadProposal(f"delta index {index} outside tree")
            order[index].blinded = blinded
            order[index].stale = False

    # -- secrets -----------------------------------------------------------

    def fully_blinded(self) -> bool:
        """True once every node carries a current blinded key."""
        return all(n.blinded is not None and not n.stale for n in self.level_order())

    def path_blinds(
        self,
        profile: CipherProfile,
        member_id: str,
        leaf_secret: int,
        partial: bool = False,
    ) -> list[tuple[int, bytes]]:
        """Blinded keys for every node from the member's leaf to the root,
        computed from the leaf secret and the copath blinds. Also refreshes
        the stored values, clearing stale marks along the path.

        With partial=True the walk stops quietly at the first missing copath
        blind instead of raising; at startup the tree has no internal blinds
        at all, so members contribute what they can and converge over a few
        merge rounds."""
        group = profile.dh_group
        leaf = self._leaves.get(member_id)
        if leaf is None:
            raise UnknownMember(member_id)
        order = self.level_order()
        index_of = {id(node): i for i, node in enumerate(order)}
        delta = []
        secret = leaf_secret
        node = leaf
        blinded = group.encode(group.exp(group.generator, secret))
        leaf.blinded = blinded
        leaf.stale = False
        delta.append((index_of[id(leaf)], blinded))
        while node.parent is not None:
            parent = node.parent
            sibling = parent.left if parent.right is node else parent.right
            if sibling.blinded is None or sibling.stale:
                if partial:
                    break
                raise StalePath(f"blinded key missing at copath of {member_id}")
            shared = crypto.dh(profile, secret, sibling.blinded)
            secret = group.scalar_from_element(shared)
            blinded = group.encode(group.exp(group.generator, secret))
            parent.blinded = blinded
            parent.stale = False
            delta.append((index_of[id(parent)], blinded))
            node = parent
        return delta

    def compute_root(self, profile: CipherProfile, member_id: str, leaf_secret: int) -> bytes:
        """Root secret bytes from this member's leaf secret and copath blinds."""
        group = profile.dh_group
        leaf = self._leaves.get(member_id)
        if leaf is None:
            raise UnknownMember(member_id)
        if leaf.parent is None:
            return leaf_secret.to_bytes(group.element_size, "big")
        secret = leaf_secret
        node = leaf
        shared = b""
        while node.parent is not None:
            parent = node.parent
            sibling = parent.left if parent.right is node else parent.right
            if sibling.blinded is None or sibling.stale:
                raise StalePath(f"blinded key missing at copath of {member_id}")
            shared = crypto.dh(profile, secret, sibling.blinded)
            secret = group.scalar_from_element(shared)
            node = parent
        return shared


# ---------------------------------------------------------------------------
# Epochs and proposals


@dataclass
class GroupKeyEpoch:
    epoch: int
    mode: str
    membership: bytes  # membership hash the key was derived under
    key: SymmetricKey
    created_at: int
    activation_seq: int = 0


def derive_epoch_key(secret: bytes, epoch: int, membership: bytes, mode: str) -> SymmetricKey:
    raw = crypto.kdf_derive(
        secret, salt=membership, info=b"epoch:%d" % epoch, out_len=crypto.AEAD_KEY_LEN
    )
    context = b"epoch" + wire.u64(epoch) + membership + mode.encode()
    return SymmetricKey(raw, context)


@dataclass
class RekeyProposal:
    epoch: int
    mode: str
    proposer_id: str
    membership: bytes
    leader_eph_public: bytes = b""
    sealed_copies: tuple[tuple[str, bytes], ...] = ()  # sorted by member id
    tree_delta: tuple[tuple[int, bytes], ...] = ()
    sponsor_id: str = ""
    signature: bytes = b""

    def core_bytes(self) -> bytes:
        copies = b"".join(
            wire.encode_tlv(0x01, member.encode()) + wire.encode_tlv(0x02, blob)
            for member, blob in self.sealed_copies
        )
        delta = b"".join(
            wire.encode_tlv(0x03, wire.u32(index)) + wire.encode_tlv(0x04, blinded)
            for index, blinded in self.tree_delta
        )
        return b"".join(
            (
                wire.encode_tlv(0x01, wire.u64(self.epoch)),
                wire.encode_tlv(0x02, self.mode.encode()),
                wire.encode_tlv(0x03, self.proposer_id.encode()),
                wire.encode_tlv(0x04, self.membership),
                wire.encode_tlv(0x05, self.leader_eph_public),
                wire.encode_tlv(0x06, copies),
                wire.encode_tlv(0x07, delta),
                wire.encode_tlv(0x08, self.sponsor_id.encode()),
            )
        )

    def encode(self) -> bytes:
        return self.core_bytes() + wire.encode_tlv(0x09, self.signature)

    @classmethod
    def decode(cls, data: bytes) -> "RekeyProposal":
        f = wire.decode_fields(data, [0x01, 0x02, 0x03, 0x04, 0x05, 0x06, 0x07, 0x08, 0x09])
        copies = []
        for pair in _chunk_pairs(wire.decode_all(f[5]), 0x01, 0x02):
            copies.append((pair[0].decode(), pair[1]))
        delta = []
        for pair in _chunk_pairs(wire.decode_all(f[6]), 0x03, 0x04):
            delta.append((wire.read_u32(pair[0]), pair[1]))
        return cls(
            epoch=wire.read_u64(f[0]),
            mode=f[1].decode(),
            proposer_id=f[2].decode(),
            membership=f[3],
            leader_eph_public=f[4],
            sealed_copies=tuple(copies),
            tree_delta=tuple(delta),
            sponsor_id=f[7].decode(),
            signature=f[8],
        )

    def sign(self, secret: bytes) -> "RekeyProposal":
        sig = crypto.sign(secret, crypto.DOMAIN_MEMBERSHIP, self.core_bytes())
        self.signature = sig
        return self

    def verify(self, public: bytes) -> bool:
        return crypto.verify(public, crypto.DOMAIN_MEMBERSHIP, self.core_bytes(), self.signature)


def _chunk_pairs(items, tag_a, tag_b):
    if len(items) % 2 != 0:
        raise wire.WireError("dangling pair element")
    for i in range(0, len(items), 2):
        if items[i][0] != tag_a or items[i + 1][0] != tag_b:
            raise wire.WireError("unexpected pair tags")
        yield items[i][1], items[i + 1][1]


def _wrap_key(profile: CipherProfile, shared: bytes, epoch: int, member_id: str, membership: bytes) -> bytes:
    return crypto.kdf_derive(
        shared,
        salt=membership,
        info=b"wrap:" + wire.u64(epoch) + member_id.encode(),
        out_len=crypto.AEAD_KEY_LEN,
    )


def _copy_aad(epoch: int, member_id: str, membership: bytes) -> bytes:
    return wire.u64(epoch) + member_id.encode() + membership


# ---------------------------------------------------------------------------
# Per-member manager


@dataclass
class RekeyPolicy:
    max_messages: int = 2**20
    max_age: int = 10**6


class GroupKeyManager:
    """One member's view of the group key: current epoch, the previous epoch
    retained until its barrier drains, and in tgdh mode the key tree plus this
    member's leaf secret."""

    def __init__(
        self,
        profile: CipherProfile,
        my_id: str,
        ka_secret: bytes,
        mode: str = MODE_LEADER_SEALED,
        policy: RekeyPolicy | None = None,
    ):
        if mode not in (MODE_LEADER_SEALED, MODE_TGDH):
            raise GroupKeyError(f"unknown mode: {mode}")
        self.profile = profile
        self.my_id = my_id
        self.ka_secret = ka_secret
        self.mode = mode
        self.policy = policy or RekeyPolicy()
        self.members: dict[str, bytes] = {}  # member id -> ka public
        self.tree = TgdhTree()
        self.my_leaf_secret: int | None = None
        self.epoch: GroupKeyEpoch | None = None
        self.previous: GroupKeyEpoch | None = None
        self.epoch_floor = 0  # highest epoch number known from catch-up
        self.sent_under_epoch = 0
        self.epoch_started_at = 0

    # -- membership --------------------------------------------------------

    def set_members(self, members: dict[str, bytes]) -> None:
        self.members = dict(members)

    def member_joined(self, member_id: str, ka_public: bytes, blinded_leaf: bytes = b"") -> str | None:
        """Track a consensus-ordered join. In tgdh mode mutates the tree and
        returns the sponsor whose path refresh the group now waits for."""
        if member_id in self.members:
            raise DuplicateMember(member_id)
        self.members[member_id] = ka_public
        if self.mode == MODE_TGDH:
            return self.tree.join(member_id, blinded_leaf or ka_public)
        return None

    def member_left(self, member_id: str) -> str | None:
        if member_id not in self.members:
            raise UnknownMember(member_id)
        del self.members[member_id]
        if self.mode == MODE_TGDH:
            return self.tree.leave(member_id)
        return None

    def membership(self) -> bytes:
        return membership_hash(self.members)

    # -- tgdh leaf ---------------------------------------------------------

    def new_leaf_secret(self, rng: Random) -> int:
        group = self.profile.dh_group
        self.my_leaf_secret = rng.randrange(2, group.order - 1)
        return self.my_leaf_secret

    def blinded_leaf(self) -> bytes:
        group = self.profile.dh_group
        if self.my_leaf_secret is None:
            raise GroupKeyError("no leaf secret generated yet")
        return group.encode(group.exp(group.generator, self.my_leaf_secret))

    def use_longterm_leaf(self) -> None:
        """Genesis bootstrap: the long-term KA scalar doubles as leaf secret."""
        self.my_leaf_secret = int.from_bytes(self.ka_secret, "big")

    def my_path_blinds(self) -> list[tuple[int, bytes]]:
        if self.my_leaf_secret is None:
            raise GroupKeyError("no leaf secret")
        return self.tree.path_blinds(self.profile, self.my_id, self.my_leaf_secret)

    def my_partial_path_blinds(self) -> list[tuple[int, bytes]]:
        """Like my_path_blinds but stops at the first gap. Genesis merging
        interleaves these until the tree is fully blinded."""
        if self.my_leaf_secret is None:
            raise GroupKeyError("no leaf secret")
        return self.tree.path_blinds(
            self.profile, self.my_id, self.my_leaf_secret, partial=True
        )

    # -- proposals ---------------------------------------------------------

    def adopt_epoch_floor(self, epoch: int) -> None:
        """Record the group's current epoch number learned during catch-up,
        so later proposals and regression checks count from it. The key
        itself still arrives only through a sealed copy or tree delta."""
        self.epoch_floor = max(self.epoch_floor, epoch)

    def next_epoch(self) -> int:
        return max(self.epoch.epoch if self.epoch else 0, self.epoch_floor) + 1

    def leader_rekey(self, rng: Random) -> RekeyProposal:
        """Fresh sealed-secret proposal for the current membership."""
        mh = self.membership()
        epoch = self.next_epoch()
        secret = rng.randbytes(32)
        eph = crypto.generate_keypair(self.profile, crypto.KeyRole.KEY_AGREEMENT, rng)
        copies = []
        for member in sorted(self.members):
            ka_public = self.members[member]
            if not ka_public:
                raise MissingCertificate(member)
            shared = crypto.dh(self.profile, eph.secret, ka_public)
            wrap = _wrap_key(self.profile, shared, epoch, member, mh)
            copies.append(
                (member, crypto.aead_seal(wrap, _ZERO_NONCE, secret, _copy_aad(epoch, member, mh)))
            )
        return RekeyProposal(
            epoch=epoch,
            mode=MODE_LEADER_SEALED,
            proposer_id=self.my_id,
            membership=mh,
            leader_eph_public=eph.public,
            sealed_copies=tuple(copies),
        )

    def sponsor_rekey(self, rng: Random) -> RekeyProposal:
        """Renew own leaf secret and republish the path (tgdh mode)."""
        self.new_leaf_secret(rng)
        delta = self.my_path_blinds()
        return RekeyProposal(
            epoch=self.next_epoch(),
            mode=MODE_TGDH,
            proposer_id=self.my_id,
            membership=self.membership(),
            tree_delta=tuple(delta),
            sponsor_id=self.my_id,
        )

    def genesis_blind_proposal(self, contributions: list[list[tuple[int, bytes]]]) -> RekeyProposal:
        """Merge members' path-blind contributions into the epoch-1 proposal."""
        merged: dict[int, bytes] = {}
        for delta in contributions:
            for index, blinded in delta:
                merged[index] = blinded
        return RekeyProposal(
            epoch=self.next_epoch(),
            mode=MODE_TGDH,
            proposer_id=self.my_id,
            membership=self.membership(),
            tree_delta=tuple(sorted(merged.items())),
            sponsor_id=self.my_id,
        )

    # -- application -------------------------------------------------------

    def apply_rekey(self, proposal: RekeyProposal, activation_seq: int, now: int = 0) -> GroupKeyEpoch:
        """Install an ordered proposal. The previous epoch is retained for
        in-flight traffic at or below the activation barrier; anything older
        is zeroized immediately."""
        current = max(self.epoch.epoch if self.epoch else 0, self.epoch_floor)
        if proposal.epoch <= current:
            raise EpochRegression(f"epoch {proposal.epoch} <= current {current}")
        if proposal.mode != self.mode:
            raise BadProposal(f"proposal mode {proposal.mode} != manager mode {self.mode}")
        mh = self.membership()
        if proposal.membership != mh:
            raise BadProposal("proposal membership does not match ordered membership")
        if proposal.mode == MODE_LEADER_SEALED:
            blob = dict(proposal.sealed_copies).get(self.my_id)
            if blob is None:
                raise SealedCopyMissing(self.my_id)
            shared = crypto.dh(self.profile, self.ka_secret, proposal.leader_eph_public)
            wrap = _wrap_key(self.profile, shared, proposal.epoch, self.my_id, mh)
            secret = crypto.aead_open(
                wrap, _ZERO_NONCE, blob, _copy_aad(proposal.epoch, self.my_id, mh)
            )
        else:
            self.tree.apply_delta(list(proposal.tree_delta))
            if self.my_leaf_secret is None:
                raise GroupKeyError("no leaf secret to compute the root with")
            secret = self.tree.compute_root(self.profile, self.my_id, self.my_leaf_secret)
        key = derive_epoch_key(secret, proposal.epoch, mh, proposal.mode)
        if self.previous is not None:
            self.previous.key.zeroize()
        self.previous = self.epoch
        self.epoch = GroupKeyEpoch(
            epoch=proposal.epoch,
            mode=proposal.mode,
            membership=mh,
            key=key,
            created_at=now,
            activation_seq=activation_seq,
        )
        self.sent_under_epoch = 0
        self.epoch_started_at = now
        return self.epoch

    def collect_previous(self, last_executed_seq: int) -> None:
        """Erase the retained epoch once everything at or below the barrier
        has executed."""
        if (
            self.previous is not None
            and self.epoch is not None
            and last_executed_seq >= self.epoch.activation_seq
        ):
            self.previous.key.zeroize()
            self.previous = None

    def key_for_sequence(self, seq: int) -> GroupKeyEpoch | None:
        """Epoch governing a sequence: the current epoch for seq beyond its
        activation, the retained previous epoch for older in-flight traffic."""
        if self.epoch is None:
            return None
        if seq > self.epoch.activation_seq:
            return self.epoch
        if self.previous is not None and not self.previous.key.zeroized:
            return self.previous
        return None

    def rekey_policy_tick(self, now: int, trigger: str = "interval") -> bool:
        """True when a rekey should be initiated now."""
        if trigger in ("join", "leave", "eviction", "manual"):
            return True
        if self.epoch is None:
            return False
        if self.sent_under_epoch >= self.policy.max_messages:
            return True
        return now - self.epoch_started_at >= self.policy.max_age
