"""Textbook RSA: keygen, encrypt/decrypt, sign/verify, and the
multiplicative homomorphism the client relies on.

WARNING: this is deliberately *unpadded* RSA.  It is NOT semantically
secure -- identical plaintexts give identical ciphertexts, and small
plaintexts are trivially attackable.  Padding would destroy the
multiplicative homomorphism E(m1)*E(m2) = E(m1*m2 mod N), which is the
property the protocol simulation exercises, so we keep the textbook
form and say so loudly.  Do not use this module to protect real data.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

__all__ = [
    "RsaKeyPair",
    "Ciphertext",
    "KeyGenerationError",
    "KeyMismatchError",
    "keygen",
    "encrypt",
    "decrypt",
    "sign",
    "verify",
    "homomorphic_multiply",
    "save_keypair",
    "load_keypair",
]

MILLER_RABIN_ROUNDS = 40
PRODUCTION_MIN_BITS = 2048  # documented default; tests use small keys


class KeyGenerationError(RuntimeError):
    pass


class KeyMismatchError(ValueError):
    pass


def egcd(a, b):
    """Extended Euclid: returns (g, x, y) with a*x + b*y = g = gcd(a, b)."""
    x0, x1, y0, y1 = 1, 0, 0, 1
    while b:
        q, a, b = a // b, b, a % b
        x0, x1 = x1, x0 - q * x1
        y0, y1 = y1, y0 - q * y1
    return a, x0, y0


def modinv(a, m):
    g, x, _ = egcd(a, m)
    if g != 1:
        raise ValueError(f"{a} has no inverse mod {m}")
    return x % m


def is_probable_prime(n, rng, rounds=MILLER_RABIN_ROUNDS):
    """Miller-Rabin with ``rounds`` random bases."""
    if n < 2:
        return False
    for p in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        if n % p == 0:
            return n == p
    d, r = n - 1, 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for _ in range(rounds):
        a = rng.randrange(2, n - 1)
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = pow(x, 2, n)
            if x == n - 1:
                break
        else:
            return False
    return True


def _random_prime(bits, rng, max_tries=100_000):
    """Random prime with exactly ``bits`` bits and the top two bits set
    (so products of two such primes have full bit length)."""
    for _ in range(max_tries):
        cand = rng.getrandbits(bits) | (0b11 << (bits - 2)) | 1
        if is_probable_prime(cand, rng):
            return cand
    raise KeyGenerationError(f"no {bits}-bit prime found in {max_tries} tries")


@dataclass(frozen=True)
class RsaKeyPair:
    p: int
    q: int
    n: int
    phi: int
    e: int
    d: int

    @classmethod
    def from_primes(cls, p, q, e=None):
        """Build a key pair from known primes (test hook; no primality check
        beyond p != q)."""
        if p == q:
            raise ValueError("p and q must differ")
        n = p * q
        phi = (p - 1) * (q - 1)
        if e is None:
            e = _pick_exponent(phi)
        g, _, _ = egcd(e, phi)
        if not (0 < e < phi) or g != 1:
            raise ValueError(f"e={e} invalid for phi={phi}")
        return cls(p=p, q=q, n=n, phi=phi, e=e, d=modinv(e, phi))

    @property
    def public(self):
        return (self.e, self.n)

    @property
    def private(self):
        return (self.d, self.n)


def _pick_exponent(phi):
    """Smallest odd e >= 3 coprime with phi."""
    e = 3
    while e < phi:
        if egcd(e, phi)[0] == 1:
            return e
        e += 2
    raise KeyGenerationError("no valid public exponent below phi")


def keygen(bits, seed, e=None):
    """Deterministic RSA key pair with an exactly ``bits``-bit modulus.

    ``bits`` >= 16 is accepted for tests; production use should pass
    at least PRODUCTION_MIN_BITS.
    """
    if bits < 16:
        raise ValueError(f"modulus size must be >= 16 bits, got {bits}")
    rng = random.Random(seed)
    pbits = (bits + 1) // 2
    qbits = bits // 2
    for _ in range(1000):
        p = _random_prime(pbits, rng)
        q = _random_prime(qbits, rng)
        if p == q:
            continue
        n = p * q
        if n.bit_length() == bits:
            return RsaKeyPair.from_primes(p, q, e=e)
    raise KeyGenerationError(f"could not build a {bits}-bit modulus")


@dataclass(frozen=True)
class Ciphertext:
    value: int
    modulus: int

    def __post_init__(self):
        if not 0 <= self.value < self.modulus:
            raise ValueError("ciphertext value out of range [0, N)")


def encrypt(m, pub):
    e, n = pub
    if not 0 <= m < n:
        raise ValueError(f"plaintext {m} outside [0, {n}); no chunking is provided")
    return Ciphertext(pow(m, e, n), n)


def decrypt(c, priv):
    d, n = priv
    if c.modulus != n:
        raise KeyMismatchError(f"ciphertext modulus {c.modulus} != key modulus {n}")
    return pow(c.value, d, n)


def sign(m, priv):
    d, n = priv
    if not 0 <= m < n:
        raise ValueError(f"message {m} outside [0, {n})")
    return Ciphertext(pow(m, d, n), n)


def verify(sig, m, pub):
    e, n = pub
    if sig.modulus != n:
        raise KeyMismatchError(f"signature modulus {sig.modulus} != key modulus {n}")
    return pow(sig.value, e, n) == m % n


def homomorphic_multiply(c1, c2):
    """E(m1) * E(m2) mod N, which decrypts to m1*m2 mod N."""
    if c1.modulus != c2.modulus:
        raise KeyMismatchError("ciphertexts under different moduli")
    return Ciphertext((c1.value * c2.value) % c1.modulus, c1.modulus)


# ---------------------------------------------------------------------------
# key serialization: decimal integers, one "field value" line each
# ---------------------------------------------------------------------------

def save_keypair(path, key, include_private=True):
    lines = [f"N {key.n}", f"e {key.e}"]
    if include_private:
        lines.append(f"d {key.d}")
        lines.append(f"p {key.p}")
        lines.append(f"q {key.q}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_keypair(path):
    """Returns an RsaKeyPair when private fields are present, else (e, N)."""
    fields = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            name, value = line.split()
            fields[name] = int(value)
    if "p" in fields and "q" in fields:
        return RsaKeyPair.from_primes(fields["p"], fields["q"], e=fields["e"])
    return (fields["e"], fields["N"])
