"""CKKS over the RNS ring: key generation, encoding, encryption and the
evaluation subset used by encrypted aggregation (add, plaintext multiply,
rescale).

Ciphertexts and keys live in the NTT domain; plaintexts are produced in the
coefficient domain and transformed on demand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import lattice as lt
from .audit import AUDIT
from .errors import (
    CapacityError,
    IncompatibleParamsError,
    LevelExhaustedError,
    LevelMismatchError,
    ScaleMismatchError,
)
from .lattice import RingParams, RnsPolynomial

ERROR_SIGMA = 3.19
MAX_INPUT_MAGNITUDE = 2.0**20
SCALE_TOLERANCE = 2.0**-40


@dataclass(frozen=True)
class CkksParams:
    ring: RingParams
    scale_bits: int = 52
    max_depth: int = 2
    security_bits: int = 128

    def __post_init__(self):
        rescaling_primes = len(self.ring.moduli) - 1
        if self.max_depth > rescaling_primes:
            raise ValueError(
                f"max_depth={self.max_depth} needs {self.max_depth} rescaling primes, "
                f"chain has {rescaling_primes}"
            )
        if self.ring.security_bits != self.security_bits:
            raise ValueError(
                f"ring validated for {self.ring.security_bits}-bit security, "
                f"parameters request {self.security_bits}"
            )

    @classmethod
    def create(cls, slot_count: int = 8192, scale_bits: int = 52, max_depth: int = 2,
               base_bits: int = 60, security_bits: int = 128) -> CkksParams:
        """Build the chain: one base prime above 2**base_bits, then
        ``max_depth`` rescaling primes just above 2**scale_bits."""
        n = 2 * slot_count
        base = lt.find_ntt_primes(base_bits, n, 1)
        rescaling = lt.find_ntt_primes(scale_bits, n, max_depth, exclude=base)
        ring = RingParams(n, base + rescaling, security_bits=security_bits)
        return cls(ring, scale_bits, max_depth, security_bits)

    @property
    def slot_count(self) -> int:
        return self.ring.ring_degree // 2

    @property
    def ring_degree(self) -> int:
        return self.ring.ring_degree

    @property
    def scale(self) -> float:
        return 2.0**self.scale_bits

    @property
    def top_level(self) -> int:
        return self.ring.max_level

    def describe(self) -> dict:
        return {
            "ring_degree": self.ring_degree,
            "slot_count": self.slot_count,
            "scale_bits": self.scale_bits,
            "max_depth": self.max_depth,
            "security_bits": self.security_bits,
            "moduli": list(self.ring.moduli),
            "modulus_bits": [q.bit_length() for q in self.ring.moduli],
            "total_modulus_bits": self.ring.total_bits,
            "security_bound_bits": lt.SECURITY_TABLE_128.get(self.ring_degree),
        }


class SecretKey:
    """Ternary secret ``s`` in the NTT domain. Deliberately has no byte
    encoding and refuses to be pickled."""

    __slots__ = ("_s",)

    def __init__(self, s: RnsPolynomial):
        self._s = s

    @property
    def poly(self) -> RnsPolynomial:
        return self._s

    def at_level(self, level: int) -> RnsPolynomial:
        s = self._s
        return RnsPolynomial(s.params, s.residues[: level + 1], True)

    def __reduce__(self):
        raise TypeError("secret keys cannot be serialized")

    def __repr__(self):
        return f"SecretKey(N={self._s.params.ring_degree}, <hidden>)"


@dataclass(frozen=True)
class PublicKey:
    b: RnsPolynomial
    a: RnsPolynomial


@dataclass(frozen=True)
class KeyPair:
    public_key: PublicKey
    secret_key: SecretKey


@dataclass(frozen=True)
class Plaintext:
    poly: RnsPolynomial
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("plaintext scale must be positive")

    @property
    def level(self) -> int:
        return self.poly.level


@dataclass(frozen=True)
class Ciphertext:
    c0: RnsPolynomial
    c1: RnsPolynomial
    scale: float

    def __post_init__(self):
        if self.c0.params != self.c1.params:
            raise IncompatibleParamsError("ciphertext components use different rings")
        if self.c0.level != self.c1.level or self.c0.is_ntt != self.c1.is_ntt:
            raise ValueError("ciphertext components differ in level or domain")

    @property
    def level(self) -> int:
        return self.c0.level

    @property
    def params(self) -> RingParams:
        return self.c0.params

    @property
    def slot_count(self) -> int:
        return self.c0.params.ring_degree // 2


def keygen(params: CkksParams, rng: np.random.Generator) -> KeyPair:
    ring = params.ring
    s = lt.ntt_forward(lt.sample_ternary_secret(ring, rng))
    a = lt.sample_uniform(ring, rng, is_ntt=True)
    e = lt.ntt_forward(lt.sample_gaussian_error(ring, rng, ERROR_SIGMA))
    b = lt.ring_sub(e, lt.ring_mul(a, s))
    return KeyPair(PublicKey(b, a), SecretKey(s))


@lru_cache(maxsize=8)
def _embedding_tables(n: int):
    two_n = 2 * n
    powers = np.empty(n // 2, dtype=np.int64)
    acc = 1
    for j in range(n // 2):
        powers[j] = acc
        acc = acc * 5 % two_n
    slot_idx = (powers - 1) // 2
    conj_idx = (two_n - powers - 1) // 2
    twist = np.exp(1j * np.pi * np.arange(n) / n)
    return slot_idx, conj_idx, twist


def _float_to_ints(x: np.ndarray) -> np.ndarray:
    if np.max(np.abs(x), initial=0.0) < 2.0**62:
        return x.astype(np.int64)
    return np.array([int(v) for v in x], dtype=object)


def encode(values, params: CkksParams, scale: float | None = None,
           level: int | None = None) -> Plaintext:
    """Pack up to ``slot_count`` reals into one plaintext polynomial.

    The vector is zero-padded, extended conjugate-symmetrically, mapped back
    through the canonical embedding, scaled and rounded to integers.
    """
    z = np.asarray(values, dtype=np.float64).ravel()
    slots = params.slot_count
    if z.size > slots:
        raise CapacityError(f"{z.size} values exceed {slots} slots")
    if not np.all(np.isfinite(z)):
        raise ValueError("cannot encode non-finite values")
    if z.size and np.max(np.abs(z)) > MAX_INPUT_MAGNITUDE:
        raise ValueError(f"encoded values must satisfy |v| <= 2^20")
    scale = params.scale if scale is None else float(scale)
    level = params.top_level if level is None else level
    n = params.ring_degree
    slot_idx, conj_idx, twist = _embedding_tables(n)
    evals = np.zeros(n, dtype=np.complex128)
    evals[slot_idx[: z.size]] = z
    evals[conj_idx[: z.size]] = z
    coeffs = (np.fft.fft(evals) / n * np.conj(twist)).real
    rounded = np.round(coeffs * scale)
    bound = params.ring.modulus(level) / 2.0
    if np.max(np.abs(rounded), initial=0.0) >= bound:
        raise ValueError("scaled values overflow the modulus at this level")
    poly = RnsPolynomial.from_signed(params.ring, _float_to_ints(rounded), level)
    return Plaintext(poly, scale)


def decode(pt: Plaintext) -> np.ndarray:
    """Evaluate the plaintext at the slot roots and divide by its scale."""
    poly = lt.to_coeff(pt.poly)
    n = poly.params.ring_degree
    slot_idx, _, twist = _embedding_tables(n)
    coeffs = lt.to_centered_float(poly) / pt.scale
    evals = np.fft.ifft(coeffs * twist) * n
    return evals[slot_idx].real.copy()


def encrypt(pk: PublicKey, pt: Plaintext, rng: np.random.Generator) -> Ciphertext:
    ring = pk.a.params
    if pt.poly.params != ring:
        raise IncompatibleParamsError("plaintext and key use different rings")
    if pt.level != ring.max_level:
        raise LevelMismatchError(f"encryption needs a top-level plaintext, got level {pt.level}")
    v = lt.ntt_forward(lt.sample_ternary_secret(ring, rng))
    e0 = lt.sample_gaussian_error(ring, rng, ERROR_SIGMA)
    e1 = lt.sample_gaussian_error(ring, rng, ERROR_SIGMA)
    m_plus_e0 = lt.ring_add(lt.to_coeff(pt.poly), e0)
    c0 = lt.ring_add(lt.ring_mul(v, pk.b), lt.ntt_forward(m_plus_e0))
    c1 = lt.ring_add(lt.ring_mul(v, pk.a), lt.ntt_forward(e1))
    return Ciphertext(c0, c1, pt.scale)


def decrypt(sk: SecretKey, ct: Ciphertext) -> Plaintext:
    AUDIT.record()
    s = sk.at_level(ct.level)
    m = lt.ring_add(lt.to_ntt(ct.c0), lt.ring_mul(ct.c1, s))
    return Plaintext(lt.ntt_inverse(m), ct.scale)


def _scales_match(a: float, b: float) -> bool:
    return abs(a - b) <= SCALE_TOLERANCE * max(abs(a), abs(b))


def add_ct(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    if a.params != b.params:
        raise IncompatibleParamsError("ciphertexts use different rings")
    if a.level != b.level:
        raise LevelMismatchError(f"level {a.level} vs level {b.level}")
    if not _scales_match(a.scale, b.scale):
        raise ScaleMismatchError(f"scale {a.scale!r} vs {b.scale!r}")
    c0 = lt.ring_add(lt.to_ntt(a.c0), lt.to_ntt(b.c0))
    c1 = lt.ring_add(lt.to_ntt(a.c1), lt.to_ntt(b.c1))
    return Ciphertext(c0, c1, a.scale)


def mul_plain(ct: Ciphertext, pt: Plaintext) -> Ciphertext:
    """Slotwise product with a plaintext; the result scale is the product of
    both scales. Raises LevelExhaustedError when that scale would leave no
    headroom below the current modulus."""
    if pt.poly.params != ct.params:
        raise IncompatibleParamsError("plaintext and ciphertext use different rings")
    if pt.level != ct.level:
        raise LevelMismatchError(f"plaintext level {pt.level} vs ciphertext level {ct.level}")
    new_scale = ct.scale * pt.scale
    if math.log2(new_scale) > math.log2(ct.params.modulus(ct.level)) - 2:
        raise LevelExhaustedError(
            f"scale 2^{math.log2(new_scale):.1f} does not fit level {ct.level}; rescale first"
        )
    m = lt.to_ntt(pt.poly)
    return Ciphertext(lt.ring_mul(ct.c0, m), lt.ring_mul(ct.c1, m), new_scale)


def rescale(ct: Ciphertext) -> Ciphertext:
    if ct.level == 0:
        raise LevelExhaustedError("ciphertext is at level 0; no modulus left to drop")
    q_last = ct.params.moduli[ct.level]
    c0 = lt.ntt_forward(lt.drop_last_modulus(lt.to_coeff(ct.c0)))
    c1 = lt.ntt_forward(lt.drop_last_modulus(lt.to_coeff(ct.c1)))
    return Ciphertext(c0, c1, ct.scale / q_last)
