"""Decentralized multi-client functional encryption for inner products.

DDH instantiation with label hashing: party ``i`` holds ``s_i = (s_i1, s_i2)``
in ``Z_q^2`` and encrypts coordinate ``k`` of ``x_i`` under label ``l`` as::

    ct_ik = u1^s_i1 * u2^s_i2 * g^x_ik      with (u1, u2) = H(l || k)

A functional key for weights ``y`` is ``dk = sum_i y_i s_i (mod q)``. Each
party contributes ``d_i = y_i s_i + z_i(tag)`` where the zero shares ``z_i``
come from pairwise PRF seeds and cancel across the federation, so nobody
but the full set of parties can produce ``dk``. Decryption computes::

    prod_i ct_ik^y_i / (u1^dk1 * u2^dk2) = g^(sum_i y_i x_ik)

and recovers the exponent with a bounded discrete log.
"""
from __future__ import annotations

import base64
import hashlib
import json
import random
import secrets
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import gmpy2

from . import group as gm
from .errors import (
    LabelMismatch,
    MissingFragment,
    MixedFusionTag,
    ParticipantMismatch,
    PayloadOutOfRange,
    PreconditionError,
    WeightVectorLengthMismatch,
)
from .group import GroupParams


@dataclass(frozen=True)
class PublicParams:
    group: GroupParams
    n: int
    payload_bound: int
    max_weight_scale: int
    dlog_bound: int

    def to_json(self) -> dict:
        return {
            "group": self.group.to_json(),
            "n": self.n,
            "payload_bound": self.payload_bound,
            "max_weight_scale": self.max_weight_scale,
            "dlog_bound": self.dlog_bound,
        }

    @classmethod
    def from_json(cls, obj: dict, *, allow_insecure: bool | None = None) -> "PublicParams":
        return cls(
            group=GroupParams.from_json(obj["group"], allow_insecure=allow_insecure),
            n=int(obj["n"]),
            payload_bound=int(obj["payload_bound"]),
            max_weight_scale=int(obj["max_weight_scale"]),
            dlog_bound=int(obj["dlog_bound"]),
        )


@dataclass(frozen=True)
class PartySecretKey:
    party_id: int
    s: tuple[int, int] = field(repr=False)
    pairwise_seeds: Mapping[int, bytes] = field(repr=False)


@dataclass(frozen=True)
class Ciphertext:
    party_id: int
    label: bytes
    coords: tuple

    def to_json(self) -> dict:
        return {
            "party": self.party_id,
            "label": base64.b64encode(self.label).decode("ascii"),
            "coords": [str(c) for c in self.coords],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Ciphertext":
        return cls(
            party_id=int(obj["party"]),
            label=base64.b64decode(obj["label"]),
            coords=tuple(gmpy2.mpz(c) for c in obj["coords"]),
        )


@dataclass(frozen=True)
class PartialDecryptionKey:
    party_id: int
    fusion_tag: bytes
    d: tuple[int, int]

    def to_json(self) -> dict:
        return {
            "party": self.party_id,
            "tag": base64.b64encode(self.fusion_tag).decode("ascii"),
            "d": [str(self.d[0]), str(self.d[1])],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PartialDecryptionKey":
        return cls(
            party_id=int(obj["party"]),
            fusion_tag=base64.b64decode(obj["tag"]),
            d=(int(obj["d"][0]), int(obj["d"][1])),
        )


@dataclass(frozen=True)
class FunctionalDecryptionKey:
    fusion_tag: bytes
    dk: tuple[int, int]

    @property
    def key_id(self) -> str:
        h = hashlib.sha256(self.fusion_tag + f"|{self.dk[0]}|{self.dk[1]}".encode())
        return h.hexdigest()[:16]


def setup(
    bits: int,
    n: int,
    payload_bound: int,
    max_weight_scale: int = 1,
    *,
    group: GroupParams | None = None,
    seed: int | None = None,
    allow_insecure: bool | None = None,
) -> PublicParams:
    """Public parameters for ``n`` parties.

    ``dlog_bound = n * payload_bound * max_weight_scale`` bounds every
    decryptable inner product. Pass ``group`` to reuse existing parameters.
    """
    if n < 2:
        raise PreconditionError("a federation needs at least 2 parties")
    if payload_bound < 1 or max_weight_scale < 1:
        raise PreconditionError("payload_bound and max_weight_scale must be >= 1")
    if group is None:
        if bits == gm.PRODUCTION_BITS and seed is None:
            group = gm.modp_group()
        else:
            group = gm.setup_group(bits, seed, allow_insecure=allow_insecure)
    dlog_bound = n * payload_bound * max_weight_scale
    if 2 * dlog_bound + 1 > group.q:
        raise PreconditionError(
            f"dlog bound {dlog_bound} does not fit a group of order {group.q}; use a larger lambda"
        )
    return PublicParams(
        group=group, n=n, payload_bound=payload_bound,
        max_weight_scale=max_weight_scale, dlog_bound=dlog_bound,
    )


# --- key establishment -------------------------------------------------------

def _rng(rng):
    return rng if rng is not None else secrets.SystemRandom()


def dh_keypair(pp: PublicParams, rng=None) -> tuple[int, gmpy2.mpz]:
    grp = pp.group
    a = _rng(rng).randrange(1, int(grp.q))
    return a, gmpy2.powmod(grp.g, a, grp.p)


def pairwise_seed(pp: PublicParams, own_id: int, own_secret: int, peer_id: int, peer_public) -> bytes:
    """Symmetric 32-byte seed from a Diffie-Hellman share."""
    peer_public = gmpy2.mpz(peer_public)
    if not gm.is_member(pp.group, peer_public) or peer_public == 1:
        raise PreconditionError(f"public share of party {peer_id} is not a subgroup element")
    shared = gmpy2.powmod(peer_public, own_secret, pp.group.p)
    lo, hi = sorted((own_id, peer_id))
    return hashlib.sha256(f"detrust-seed|{lo}|{hi}|{shared}".encode()).digest()


def secret_scalars(pp: PublicParams, rng=None) -> tuple[int, int]:
    r = _rng(rng)
    q = int(pp.group.q)
    return r.randrange(q), r.randrange(q)


def keygen_ceremony(pp: PublicParams, rng=None, *, mode: str = "dealer") -> list[PartySecretKey]:
    """Produce ``n`` secret keys with symmetric pairwise seeds.

    ``mode="dealer"`` samples every seed directly (in-process simulation);
    ``mode="dh"`` derives them from Diffie-Hellman shares the way deployed
    parties do after the key server publishes the share directory.
    """
    r = _rng(rng)
    ids = range(1, pp.n + 1)
    scalars = {i: secret_scalars(pp, r) for i in ids}
    seeds: dict[int, dict[int, bytes]] = {i: {} for i in ids}
    if mode == "dealer":
        for i in ids:
            for j in ids:
                if i < j:
                    k = bytes(r.getrandbits(8) for _ in range(32))
                    seeds[i][j] = seeds[j][i] = k
    elif mode == "dh":
        shares = {i: dh_keypair(pp, r) for i in ids}
        for i in ids:
            for j in ids:
                if i != j:
                    seeds[i][j] = pairwise_seed(pp, i, shares[i][0], j, shares[j][1])
    else:
        raise PreconditionError(f"unknown ceremony mode {mode!r}")
    return [PartySecretKey(party_id=i, s=scalars[i], pairwise_seeds=seeds[i]) for i in ids]


# --- zero shares -------------------------------------------------------------

def _prf(seed: bytes, tag: bytes, component: int, q) -> int:
    nbytes = (int(q).bit_length() + 128 + 7) // 8
    data = b"detrust-prf|" + seed + bytes([component]) + len(tag).to_bytes(8, "big") + tag
    return int.from_bytes(hashlib.shake_256(data).digest(nbytes), "big") % int(q)


def zero_share(pp: PublicParams, sk: PartySecretKey, fusion_tag: bytes) -> tuple[int, int]:
    q = int(pp.group.q)
    z = [0, 0]
    for j, seed in sk.pairwise_seeds.items():
        sign = 1 if sk.party_id > j else -1
        for c in (0, 1):
            z[c] += sign * _prf(seed, fusion_tag, c, q)
    return z[0] % q, z[1] % q


def make_fusion_tag(round_index: int, weights: Sequence[int], session: bytes = b"") -> bytes:
    """Canonical tag binding a key fragment to one round and one weight vector."""
    return json.dumps(
        {"round": int(round_index), "session": session.hex(), "weights": [int(w) for w in weights]},
        sort_keys=True, separators=(",", ":"),
    ).encode()


def round_label(round_index: int, session: bytes = b"") -> bytes:
    return b"detrust-round|" + session + b"|" + str(int(round_index)).encode()


def _coord_label(label: bytes, k: int) -> bytes:
    return len(label).to_bytes(4, "big") + label + k.to_bytes(8, "big")


# --- the six algorithms (Setup and KeyGen above) -----------------------------

def encrypt(pp: PublicParams, sk: PartySecretKey, x: Sequence[int], label: bytes) -> Ciphertext:
    grp = pp.group
    p = grp.p
    s1, s2 = sk.s
    coords = []
    for k, xk in enumerate(x):
        xk = int(xk)
        if abs(xk) > pp.payload_bound:
            raise PayloadOutOfRange(f"coordinate {k} = {xk} exceeds payload bound {pp.payload_bound}")
        u1, u2 = gm.hash_to_group(grp, _coord_label(label, k))
        c = gmpy2.powmod(u1, s1, p) * gmpy2.powmod(u2, s2, p) % p
        coords.append(c * gm.gpow(grp, grp.g, xk) % p)
    return Ciphertext(party_id=sk.party_id, label=label, coords=tuple(coords))


def key_der_share(pp: PublicParams, sk: PartySecretKey, y: Sequence[int], fusion_tag: bytes) -> PartialDecryptionKey:
    if len(y) != pp.n:
        raise WeightVectorLengthMismatch(f"expected {pp.n} weights, got {len(y)}")
    q = int(pp.group.q)
    yi = int(y[sk.party_id - 1])
    z1, z2 = zero_share(pp, sk, fusion_tag)
    d = ((yi * sk.s[0] + z1) % q, (yi * sk.s[1] + z2) % q)
    return PartialDecryptionKey(party_id=sk.party_id, fusion_tag=fusion_tag, d=d)


def key_der_comb(pp: PublicParams, fragments: Iterable[PartialDecryptionKey]) -> FunctionalDecryptionKey:
    fragments = list(fragments)
    by_party: dict[int, PartialDecryptionKey] = {}
    for f in fragments:
        if f.party_id in by_party:
            raise PreconditionError(f"duplicate fragment from party {f.party_id}")
        by_party[f.party_id] = f
    missing = set(range(1, pp.n + 1)) - set(by_party)
    if missing:
        raise MissingFragment(missing)
    if len(by_party) != pp.n:
        raise PreconditionError(f"fragments from unknown parties {sorted(set(by_party) - set(range(1, pp.n + 1)))}")
    tags = {f.fusion_tag for f in fragments}
    if len(tags) != 1:
        raise MixedFusionTag(f"{len(tags)} distinct fusion tags among fragments")
    q = int(pp.group.q)
    dk = (sum(f.d[0] for f in fragments) % q, sum(f.d[1] for f in fragments) % q)
    return FunctionalDecryptionKey(fusion_tag=tags.pop(), dk=dk)


def decrypt(
    pp: PublicParams,
    dk: FunctionalDecryptionKey,
    cts: Sequence[Ciphertext],
    y: Sequence[int],
    label: bytes,
) -> list[int]:
    """Recover ``sum_i y_i x_i`` coordinate-wise.

    Raises :class:`~detrust_fl.errors.DlogNotFound` when the ciphertexts,
    label and key are inconsistent.
    """
    if len(y) != pp.n:
        raise WeightVectorLengthMismatch(f"expected {pp.n} weights, got {len(y)}")
    bad = sorted({ct.party_id for ct in cts if ct.label != label})
    if bad:
        raise LabelMismatch(f"ciphertexts from parties {bad} carry a different label")
    support = {i + 1 for i, w in enumerate(y) if int(w) != 0}
    present = [ct.party_id for ct in cts]
    if len(set(present)) != len(present) or set(present) != support:
        raise ParticipantMismatch(f"ciphertexts from {sorted(present)} but weight support is {sorted(support)}")
    dims = {len(ct.coords) for ct in cts}
    if len(dims) > 1:
        raise PreconditionError("ciphertexts have different dimensions")
    if not cts:
        return []
    grp = pp.group
    p, q = grp.p, int(grp.q)
    dk1, dk2 = dk.dk
    out = []
    for k in range(dims.pop()):
        acc = gmpy2.mpz(1)
        for ct in cts:
            acc = acc * gmpy2.powmod(ct.coords[k], int(y[ct.party_id - 1]) % q, p) % p
        u1, u2 = gm.hash_to_group(grp, _coord_label(label, k))
        mask = gmpy2.powmod(u1, dk1, p) * gmpy2.powmod(u2, dk2, p) % p
        out.append(gm.dlog_bounded(grp, acc * gmpy2.invert(mask, p) % p, pp.dlog_bound))
    return out


def seeded_rng(*parts) -> random.Random:
    """Deterministic RNG for simulations; never use for deployed keys."""
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return random.Random(int.from_bytes(digest, "big"))
