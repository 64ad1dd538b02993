"""Pluggable cipher suite: DH over a safe-prime group, Ed25519 signatures,
ChaCha20-Poly1305 AEAD, and HKDF-SHA256.

Two profiles exist. ``prod`` uses the RFC 3526 2048-bit MODP group; ``test-small``
uses a 64-bit safe prime and is insecure by design, so constructing it requires
an explicit ``allow_insecure`` opt-in. Both profiles satisfy the same algebra,
which is what lets the protocol test suite run against the small group.

All randomness comes from a caller-supplied ``random.Random``; nothing in this
module reads an ambient entropy source, so identical seeds give identical keys.
"""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass
from enum import Enum
from random import Random

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives import serialization


class CryptoError(Exception):
    pass


class InvalidGroupElement(CryptoError):
    """Peer value is not a member of the prime-order subgroup."""


class MalformedSignature(CryptoError):
    """Signature bytes are structurally invalid (wrong length)."""


class AuthenticationFailure(CryptoError):
    """AEAD tag check failed."""


class OutputTooLong(CryptoError):
    """Requested KDF output exceeds 255 hash blocks."""


class KeyZeroized(CryptoError):
    """A zeroized symmetric key was used."""


class ProfileNotPermitted(CryptoError):
    """test-small requested without the insecure-profile opt-in."""


# Domain-separation prefix bytes, one per signed message category. The byte is
# prepended to the signed bytes so a signature from one category can never
# validate in another.
DOMAIN_CONSENSUS = 0x01
DOMAIN_MEMBERSHIP = 0x02
DOMAIN_HANDSHAKE = 0x03
DOMAIN_CRL = 0x04

HASH_LEN = 32
AEAD_KEY_LEN = 32
AEAD_NONCE_LEN = 12
AEAD_TAG_LEN = 16
SIG_LEN = 64


def hash_bytes(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def key_id_for(context: bytes) -> bytes:
    """Key ids are the first 8 bytes of the hash of the public derivation context."""
    return hash_bytes(context)[:8]


class KeyRole(Enum):
    SIGNING = "signing"
    KEY_AGREEMENT = "key_agreement"


@dataclass(frozen=True)
class DhGroup:
    name: str
    prime: int
    generator: int
    order: int  # order of the subgroup the generator spans
    element_size: int  # fixed element width in bytes

    def encode(self, element: int) -> bytes:
        return element.to_bytes(self.element_size, "big")

    def decode(self, data: bytes) -> int:
        if len(data) != self.element_size:
            raise InvalidGroupElement(
                f"element must be {self.element_size} bytes, got {len(data)}"
            )
        return int.from_bytes(data, "big")

    def exp(self, base: int, scalar: int) -> int:
        """Raw group exponentiation with no membership check on the base."""
        return pow(base, scalar, self.prime)

    def is_member(self, element: int) -> bool:
        """True for elements of the prime-order subgroup, excluding the identity."""
        if not 2 <= element <= self.prime - 2:
            return False
        return pow(element, self.order, self.prime) == 1

    def scalar_from_element(self, element_bytes: bytes) -> int:
        """Map a DH output onto the scalar range so it can chain as an exponent."""
        return 2 + int.from_bytes(element_bytes, "big") % (self.order - 2)


# RFC 3526 group 14. p is a safe prime with p % 8 == 7, so 2 generates the
# subgroup of order (p-1)/2.
_MODP_2048 = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74"
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437"
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05"
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB"
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718"
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF",
    16,
)

PROD_GROUP = DhGroup(
    name="modp2048",
    prime=_MODP_2048,
    generator=2,
    order=(_MODP_2048 - 1) // 2,
    element_size=256,
)

# Largest 64-bit safe prime; 4 is a square, hence generates the order-q subgroup.
_SMALL_PRIME = 0xFFFFFFFFFFFFFA43

TEST_SMALL_GROUP = DhGroup(
    name="modp64",
    prime=_SMALL_PRIME,
    generator=4,
    order=(_SMALL_PRIME - 1) // 2,
    element_size=8,
)


@dataclass(frozen=True)
class CipherProfile:
    name: str
    dh_group: DhGroup
    sig_scheme: str = "ed25519"
    aead_scheme: str = "chacha20poly1305"
    kdf_scheme: str = "hkdf-sha256"
    hash_scheme: str = "sha256"


PROFILE_PROD = CipherProfile(name="prod", dh_group=PROD_GROUP)
PROFILE_TEST_SMALL = CipherProfile(name="test-small", dh_group=TEST_SMALL_GROUP)


def get_profile(name: str, allow_insecure: bool = False) -> CipherProfile:
    if name == "prod":
        return PROFILE_PROD
    if name == "test-small":
        if not allow_insecure:
            raise ProfileNotPermitted(
                "test-small is insecure by design; pass allow_insecure=True"
            )
        return PROFILE_TEST_SMALL
    raise CryptoError(f"unknown cipher profile: {name}")


@dataclass
class KeyPair:
    """Secret/public pair for one role. The secret is deliberately excluded
    from every serializer in the package; only the keystore writes it, and it
    does so by reaching for .secret explicitly."""

    role: KeyRole
    secret: bytes
    public: bytes


class SymmetricKey:
    """32-byte key with an id derived from the public derivation context.

    zeroize() overwrites the material; further use raises KeyZeroized. The
    flag stays observable so tests can assert erasure actually happened.
    """

    __slots__ = ("_buf", "key_id", "zeroized")

    def __init__(self, key: bytes, context: bytes):
        if len(key) != AEAD_KEY_LEN:
            raise ValueError(f"key must be {AEAD_KEY_LEN} bytes")
        self._buf = bytearray(key)
        self.key_id = key_id_for(context)
        self.zeroized = False

    @property
    def data(self) -> bytes:
        if self.zeroized:
            raise KeyZeroized("symmetric key was zeroized")
        return bytes(self._buf)

    def zeroize(self) -> None:
        for i in range(len(self._buf)):
            self._buf[i] = 0
        self.zeroized = True

    def __repr__(self) -> str:  # never leak key bytes into logs
        return f"SymmetricKey(id={self.key_id.hex()}, zeroized={self.zeroized})"


def generate_keypair(profile: CipherProfile, role: KeyRole, rng: Random) -> KeyPair:
    """Deterministic given the rng seed; public is derivable from secret."""
    if role is KeyRole.SIGNING:
        seed = rng.randbytes(32)
        priv = Ed25519PrivateKey.from_private_bytes(seed)
        pub = priv.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        return KeyPair(role=role, secret=seed, public=pub)
    group = profile.dh_group
    scalar = rng.randrange(2, group.order - 1)
    public = group.exp(group.generator, scalar)
    return KeyPair(
        role=role,
        secret=scalar.to_bytes(group.element_size, "big"),
        public=group.encode(public),
    )


def signing_public_from_secret(secret: bytes) -> bytes:
    priv = Ed25519PrivateKey.from_private_bytes(secret)
    return priv.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )


def ka_public_from_secret(profile: CipherProfile, secret: bytes) -> bytes:
    group = profile.dh_group
    return group.encode(group.exp(group.generator, int.from_bytes(secret, "big")))


def dh(profile: CipherProfile, secret: bytes | int, peer_public: bytes) -> bytes:
    """Shared group element from our scalar and the peer's public element.

    The peer value is membership-checked first: the identity, the order-2
    element, and anything outside the subgroup raise InvalidGroupElement.
    """
    group = profile.dh_group
    element = group.decode(peer_public)
    if not group.is_member(element):
        raise InvalidGroupElement("peer public value failed subgroup membership")
    scalar = secret if isinstance(secret, int) else int.from_bytes(secret, "big")
    return group.encode(group.exp(element, scalar))


def sign(secret: bytes, domain: int, message: bytes) -> bytes:
    priv = Ed25519PrivateKey.from_private_bytes(secret)
    return priv.sign(bytes([domain]) + message)


def verify(public: bytes, domain: int, message: bytes, signature: bytes) -> bool:
    if len(signature) != SIG_LEN:
        raise MalformedSignature(f"signature must be {SIG_LEN} bytes")
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(
            signature, bytes([domain]) + message
        )
        return True
    except (InvalidSignature, ValueError):
        return False


def aead_seal(key: "bytes | SymmetricKey", nonce: bytes, plaintext: bytes, aad: bytes) -> bytes:
    if isinstance(key, SymmetricKey):
        key = key.data  # raises KeyZeroized if already wiped
    if len(key) != AEAD_KEY_LEN:
        raise ValueError(f"key must be {AEAD_KEY_LEN} bytes")
    if len(nonce) != AEAD_NONCE_LEN:
        raise ValueError(f"nonce must be {AEAD_NONCE_LEN} bytes")
    return ChaCha20Poly1305(key).encrypt(nonce, plaintext, aad)


def aead_open(key: "bytes | SymmetricKey", nonce: bytes, ciphertext: bytes, aad: bytes) -> bytes:
    if isinstance(key, SymmetricKey):
        key = key.data
    if len(key) != AEAD_KEY_LEN:
        raise ValueError(f"key must be {AEAD_KEY_LEN} bytes")
    if len(nonce) != AEAD_NONCE_LEN:
        raise ValueError(f"nonce must be {AEAD_NONCE_LEN} bytes")
    if len(ciphertext) < AEAD_TAG_LEN:
        raise AuthenticationFailure("ciphertext shorter than tag")
    try:
        return ChaCha20Poly1305(key).decrypt(nonce, ciphertext, aad)
    except Exception as exc:
        raise AuthenticationFailure("AEAD open failed") from exc


def kdf_derive(ikm: bytes, salt: bytes, info: bytes, out_len: int) -> bytes:
    """HKDF-SHA256 extract-then-expand."""
    if out_len > 255 * HASH_LEN:
        raise OutputTooLong(f"cannot expand to {out_len} bytes")
    if not salt:
        salt = b"\x00" * HASH_LEN
    prk = hmac.new(salt, ikm, hashlib.sha256).digest()
    okm = b""
    block = b""
    counter = 1
    while len(okm) < out_len:
        block = hmac.new(prk, block + info + bytes([counter]), hashlib.sha256).digest()
        okm += block
        counter += 1
    return okm[:out_len]


def derive_key(ikm: bytes, salt: bytes, info: bytes, context: bytes) -> SymmetricKey:
    """kdf_derive to a SymmetricKey whose id is bound to the public context."""
    return SymmetricKey(kdf_derive(ikm, salt, info, AEAD_KEY_LEN), context)
