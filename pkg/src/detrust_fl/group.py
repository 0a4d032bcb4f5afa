"""Prime-order group arithmetic over the quadratic residues of a safe prime.

Elements are ``gmpy2.mpz`` values in ``[1, p-1]`` satisfying ``e^q = 1 (mod p)``
where ``p = 2q + 1``. Exponents live in ``Z_q``.
"""
from __future__ import annotations

import functools
import hashlib
import json
import math
import os
import random
import secrets
import time
from dataclasses import dataclass

import gmpy2

from .errors import DlogNotFound, PreconditionError, SetupError

INSECURE_ENV = "DETRUST_INSECURE_SMALL_GROUP"
PRODUCTION_BITS = 2048

# RFC 3526 group 14: p is a safe prime and 2 is a quadratic residue mod p.
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


@dataclass(frozen=True)
class GroupParams:
    p: gmpy2.mpz
    q: gmpy2.mpz
    g: gmpy2.mpz
    bits: int

    @property
    def insecure(self) -> bool:
        return self.bits < PRODUCTION_BITS

    def to_json(self) -> dict:
        return {"p": str(self.p), "q": str(self.q), "g": str(self.g), "lambda": self.bits}

    @classmethod
    def from_json(cls, obj: dict | str, *, allow_insecure: bool | None = None) -> "GroupParams":
        if isinstance(obj, str):
            obj = json.loads(obj)
        params = cls(
            p=gmpy2.mpz(obj["p"]),
            q=gmpy2.mpz(obj["q"]),
            g=gmpy2.mpz(obj["g"]),
            bits=int(obj["lambda"]),
        )
        validate_group(params, allow_insecure=allow_insecure)
        return params


def insecure_allowed(flag: bool | None = None) -> bool:
    if flag is not None:
        return flag
    return os.environ.get(INSECURE_ENV, "") not in ("", "0", "false", "False")


def validate_group(params: GroupParams, *, allow_insecure: bool | None = None) -> None:
    """Raise :class:`SetupError` unless ``params`` describe a valid QR subgroup."""
    p, q, g = params.p, params.q, params.g
    if p != 2 * q + 1:
        raise SetupError("p must equal 2q + 1")
    if not (gmpy2.is_prime(p, 40) and gmpy2.is_prime(q, 40)):
        raise SetupError("p and q must both be prime")
    if not 1 < g < p or gmpy2.powmod(g, q, p) != 1:
        raise SetupError("g must generate the order-q subgroup")
    if params.bits != p.bit_length():
        raise SetupError(f"declared lambda={params.bits} but p has {p.bit_length()} bits")
    if params.insecure and not insecure_allowed(allow_insecure):
        raise SetupError(
            f"{params.bits}-bit group is below the {PRODUCTION_BITS}-bit production "
            f"profile; pass allow_insecure=True or set {INSECURE_ENV}=1"
        )


def modp_group() -> GroupParams:
    """The 2048-bit MODP group with generator 2 (production default)."""
    p = gmpy2.mpz(_MODP_2048)
    return GroupParams(p=p, q=(p - 1) // 2, g=gmpy2.mpz(2), bits=PRODUCTION_BITS)


def setup_group(
    bits: int,
    seed: int | None = None,
    *,
    allow_insecure: bool | None = None,
    timeout: float = 120.0,
) -> GroupParams:
    """Generate a fresh safe-prime group with a ``bits``-bit modulus.

    With ``seed`` the output is reproducible; otherwise candidates come from
    the OS CSPRNG.
    """
    if bits < 16:
        raise PreconditionError("lambda must be at least 16 bits")
    if bits < PRODUCTION_BITS and not insecure_allowed(allow_insecure):
        raise SetupError(
            f"{bits}-bit group requested; set {INSECURE_ENV}=1 or allow_insecure=True"
        )
    if seed is not None:
        return _seeded_group(bits, seed, timeout)
    return _generate(bits, secrets.SystemRandom(), timeout)


@functools.lru_cache(maxsize=32)
def _seeded_group(bits: int, seed: int, timeout: float) -> GroupParams:
    return _generate(bits, random.Random(seed), timeout)


def _generate(bits: int, rng: random.Random, timeout: float) -> GroupParams:
    deadline = time.monotonic() + timeout
    lo = 1 << (bits - 2)
    while True:
        if time.monotonic() > deadline:
            raise SetupError(f"no {bits}-bit safe prime found within {timeout}s")
        # q odd with top bit set, so p = 2q+1 has exactly `bits` bits
        q = gmpy2.mpz(rng.getrandbits(bits - 1) | lo | 1)
        # q = 1 (mod 3) makes p divisible by 3
        if q % 3 == 1:
            continue
        if not gmpy2.is_prime(q, 25):
            continue
        p = 2 * q + 1
        if not gmpy2.is_prime(p, 25):
            continue
        while True:
            h = gmpy2.mpz(rng.randrange(2, int(p) - 1))
            g = gmpy2.powmod(h, 2, p)
            if g != 1:
                return GroupParams(p=p, q=q, g=g, bits=bits)


def is_member(params: GroupParams, e) -> bool:
    return 0 < e < params.p and gmpy2.powmod(e, params.q, params.p) == 1


def gpow(params: GroupParams, base, x: int) -> gmpy2.mpz:
    """``base^x mod p`` for any integer ``x``; negative ``x`` inverts."""
    if x < 0:
        return gmpy2.invert(gmpy2.powmod(base, -x, params.p), params.p)
    return gmpy2.powmod(base, x, params.p)


def _expand(data: bytes, nbytes: int) -> int:
    return int.from_bytes(hashlib.shake_256(data).digest(nbytes), "big")


@functools.lru_cache(maxsize=1 << 16)
def hash_to_group(params: GroupParams, label: bytes) -> tuple[gmpy2.mpz, gmpy2.mpz]:
    """Map ``label`` to two subgroup elements with unknown discrete logs.

    Each element is the square of a hashed candidate in ``[2, p-2]``; the two
    outputs use separate domain tags.
    """
    p = params.p
    nbytes = (p.bit_length() + 128 + 7) // 8
    out = []
    for tag in (b"u1", b"u2"):
        counter = 0
        while True:
            data = b"detrust-h2g|" + tag + len(label).to_bytes(8, "big") + label + counter.to_bytes(4, "big")
            c = gmpy2.mpz(_expand(data, nbytes)) % p
            if 2 <= c <= p - 2:
                out.append(gmpy2.powmod(c, 2, p))
                break
            counter += 1
    return out[0], out[1]


@functools.lru_cache(maxsize=16)
def _bsgs_table(params: GroupParams, bound: int):
    p = params.p
    width = math.isqrt(2 * bound) + 1  # ceil(sqrt(2B+1)) or one more
    baby = {}
    e = gmpy2.mpz(1)
    for i in range(width):
        baby.setdefault(e, i)
        e = e * params.g % p
    giant = gpow(params, params.g, -width)
    shift = gpow(params, params.g, bound)
    return width, baby, giant, shift


def dlog_bounded(params: GroupParams, target, bound: int) -> int:
    """Return ``x`` in ``[-bound, bound]`` with ``g^x = target``.

    Baby-step giant-step over the shifted range ``x + bound in [0, 2*bound]``.
    The baby-step table is cached per ``(params, bound)``. If the range wraps
    the group order the representative in ``[0, bound]`` is preferred.
    """
    if bound < 1:
        raise PreconditionError("bound must be >= 1")
    width, baby, giant, shift = _bsgs_table(params, bound)
    p = params.p
    gamma = gmpy2.mpz(target) * shift % p
    span = 2 * bound
    for j in range(width):
        i = baby.get(gamma)
        if i is not None:
            t = j * width + i
            if t > span:
                break
            x = t - bound
            if x < 0 and 2 * bound + 1 > params.q:
                alt = x % int(params.q)
                if alt <= bound:
                    x = alt
            return x
        gamma = gamma * giant % p
    raise DlogNotFound(f"no exponent in [-{bound}, {bound}]")
