"""Residue-number-system arithmetic over Z_Q[X]/(X^N + 1).

A polynomial is stored as a ``(levels, N)`` uint64 array: row ``i`` holds the
coefficients (or NTT evaluations) modulo the ``i``-th prime of the chain. A
polynomial at level ``l`` uses the chain prefix ``q_0 .. q_l``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .backend import kernels
from .errors import (
    DomainError,
    IncompatibleParamsError,
    LevelExhaustedError,
    SecurityError,
)

# Maximum log2(Q) for 128-bit classical security with a ternary secret
# (homomorphic encryption standard parameter tables).
SECURITY_TABLE_128 = {
    1024: 27,
    2048: 54,
    4096: 109,
    8192: 218,
    16384: 438,
    32768: 881,
}

MAX_MODULUS_BITS = 61

_MR_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41)


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin, valid for every n < 3.3e24."""
    if n < 2:
        return False
    for p in _MR_BASES:
        if n % p == 0:
            return n == p
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in _MR_BASES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def find_ntt_primes(bits: int, ring_degree: int, count: int, exclude=()) -> list[int]:
    """The ``count`` smallest primes above ``2**bits`` that are 1 mod 2N."""
    step = 2 * ring_degree
    candidate = (2**bits // step + 1) * step + 1
    found = []
    while len(found) < count:
        if candidate not in exclude and is_prime(candidate):
            found.append(candidate)
        candidate += step
    return found


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n, dtype=np.int64)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _powers(base: int, count: int, q: int) -> np.ndarray:
    out = [1] * count
    for i in range(1, count):
        out[i] = out[i - 1] * base % q
    return np.array(out, dtype=np.uint64)


@dataclass(frozen=True)
class PrimeTable:
    q: int
    mu: int
    k: int
    psi: int
    psi_rev: np.ndarray
    psi_inv_rev: np.ndarray
    n_inv: int
    psi_rev_shoup: np.ndarray
    psi_inv_rev_shoup: np.ndarray
    n_inv_shoup: int


@lru_cache(maxsize=None)
def prime_table(q: int, n: int) -> PrimeTable:
    k = q.bit_length()
    mu = 2 ** (2 * k) // q
    exponent = (q - 1) // (2 * n)
    g = 2
    while True:
        psi = pow(g, exponent, q)
        if pow(psi, n, q) == q - 1:
            break
        g += 1
    rev = _bit_reverse(n)
    psi_rev = _powers(psi, n, q)[rev]
    psi_inv_rev = _powers(pow(psi, -1, q), n, q)[rev]
    n_inv = pow(n, -1, q)
    return PrimeTable(q, mu, k, psi, np.ascontiguousarray(psi_rev),
                      np.ascontiguousarray(psi_inv_rev), n_inv,
                      _shoup(psi_rev, q), _shoup(psi_inv_rev, q), (n_inv << 64) // q)


def _shoup(values: np.ndarray, q: int) -> np.ndarray:
    return np.array([(int(w) << 64) // q for w in values], dtype=np.uint64)


class RingParams:
    """Ring degree plus an NTT-friendly modulus chain q_0 .. q_L.

    ``security_bits=None`` skips the security-table check; it exists for toy
    rings in tests (e.g. N=8, q=17) that no table covers.
    """

    def __init__(self, ring_degree: int, moduli, security_bits: int | None = 128):
        n = int(ring_degree)
        moduli = tuple(int(q) for q in moduli)
        if n < 2 or n & (n - 1):
            raise ValueError(f"ring degree must be a power of two, got {n}")
        if not moduli:
            raise ValueError("modulus chain is empty")
        if len(set(moduli)) != len(moduli):
            raise ValueError("modulus chain primes must be distinct")
        for q in moduli:
            if q.bit_length() > MAX_MODULUS_BITS:
                raise ValueError(f"modulus {q} exceeds {MAX_MODULUS_BITS} bits")
            if q % (2 * n) != 1:
                raise ValueError(f"modulus {q} is not 1 mod 2N={2 * n}")
            if not is_prime(q):
                raise ValueError(f"modulus {q} is not prime")
        self.total_bits = sum(q.bit_length() for q in moduli)
        if security_bits is not None:
            if security_bits != 128:
                raise SecurityError(f"only the 128-bit table is available, got {security_bits}")
            bound = SECURITY_TABLE_128.get(n)
            if bound is None:
                raise SecurityError(f"no 128-bit security entry for N={n}")
            if self.total_bits > bound:
                raise SecurityError(
                    f"modulus chain has {self.total_bits} bits; N={n} allows at most {bound}"
                )
        self.ring_degree = n
        self.moduli = moduli
        self.security_bits = security_bits
        tables = [prime_table(q, n) for q in moduli]
        self.tables = tables
        self._qs = np.array(moduli, dtype=np.uint64)
        self._mus = np.array([t.mu for t in tables], dtype=np.uint64)
        self._ks = np.array([t.k for t in tables], dtype=np.int64)
        self._psi_rev = np.ascontiguousarray(np.stack([t.psi_rev for t in tables]))
        self._psi_inv_rev = np.ascontiguousarray(np.stack([t.psi_inv_rev for t in tables]))
        self._n_invs = np.array([t.n_inv for t in tables], dtype=np.uint64)
        self._psi_rev_shoup = np.ascontiguousarray(np.stack([t.psi_rev_shoup for t in tables]))
        self._psi_inv_rev_shoup = np.ascontiguousarray(
            np.stack([t.psi_inv_rev_shoup for t in tables]))
        self._n_invs_shoup = np.array([t.n_inv_shoup for t in tables], dtype=np.uint64)

    @property
    def max_level(self) -> int:
        return len(self.moduli) - 1

    def modulus(self, level: int) -> int:
        out = 1
        for q in self.moduli[: level + 1]:
            out *= q
        return out

    def kernel_args(self, rows: int):
        return self._qs[:rows], self._mus[:rows], self._ks[:rows]

    def __eq__(self, other):
        if not isinstance(other, RingParams):
            return NotImplemented
        return self.ring_degree == other.ring_degree and self.moduli == other.moduli

    def __hash__(self):
        return hash((self.ring_degree, self.moduli))

    def __repr__(self):
        return f"RingParams(N={self.ring_degree}, moduli={self.moduli})"


class RnsPolynomial:
    __slots__ = ("params", "residues", "is_ntt")

    def __init__(self, params: RingParams, residues: np.ndarray, is_ntt: bool = False):
        residues = np.ascontiguousarray(residues, dtype=np.uint64)
        if residues.ndim != 2 or residues.shape[1] != params.ring_degree:
            raise ValueError(
                f"residues must have shape (levels, {params.ring_degree}), got {residues.shape}"
            )
        if not 1 <= residues.shape[0] <= len(params.moduli):
            raise ValueError(f"{residues.shape[0]} residue rows for a {len(params.moduli)}-prime chain")
        self.params = params
        self.residues = residues
        self.is_ntt = bool(is_ntt)

    @property
    def level(self) -> int:
        return self.residues.shape[0] - 1

    @property
    def moduli(self) -> tuple[int, ...]:
        return self.params.moduli[: self.residues.shape[0]]

    def copy(self) -> RnsPolynomial:
        return RnsPolynomial(self.params, self.residues.copy(), self.is_ntt)

    def __eq__(self, other):
        if not isinstance(other, RnsPolynomial):
            return NotImplemented
        return (
            self.params == other.params
            and self.is_ntt == other.is_ntt
            and np.array_equal(self.residues, other.residues)
        )

    def __repr__(self):
        domain = "ntt" if self.is_ntt else "coeff"
        return f"RnsPolynomial(N={self.params.ring_degree}, level={self.level}, {domain})"

    @classmethod
    def zero(cls, params: RingParams, level: int | None = None, is_ntt: bool = False):
        rows = (params.max_level if level is None else level) + 1
        return cls(params, np.zeros((rows, params.ring_degree), dtype=np.uint64), is_ntt)

    @classmethod
    def from_signed(cls, params: RingParams, coeffs, level: int | None = None):
        """Coefficient-domain polynomial from signed integers.

        ``coeffs`` may be an int64 array or an object array of Python ints of
        any size; each is reduced modulo every prime of the chain prefix.
        """
        rows = (params.max_level if level is None else level) + 1
        coeffs = np.asarray(coeffs)
        if coeffs.shape != (params.ring_degree,):
            raise ValueError(f"expected {params.ring_degree} coefficients, got {coeffs.shape}")
        out = np.empty((rows, params.ring_degree), dtype=np.uint64)
        if coeffs.dtype == object:
            for i, q in enumerate(params.moduli[:rows]):
                out[i] = (coeffs % q).astype(np.uint64)
        else:
            coeffs = coeffs.astype(np.int64)
            for i, q in enumerate(params.moduli[:rows]):
                out[i] = np.mod(coeffs, np.int64(q)).astype(np.uint64)
        return cls(params, out, False)


def _check_pair(a: RnsPolynomial, b: RnsPolynomial) -> None:
    if a.params != b.params:
        raise IncompatibleParamsError(f"{a.params!r} vs {b.params!r}")
    if a.residues.shape != b.residues.shape:
        raise IncompatibleParamsError(f"level {a.level} vs level {b.level}")


def ntt_forward(p: RnsPolynomial) -> RnsPolynomial:
    if p.is_ntt:
        raise DomainError("ntt_forward expects a coefficient-domain polynomial")
    out = p.residues.copy()
    rows = out.shape[0]
    pr = p.params
    kernels.ntt_forward_rows(out, pr._qs[:rows], pr._psi_rev[:rows], pr._psi_rev_shoup[:rows])
    return RnsPolynomial(p.params, out, True)


def ntt_inverse(p: RnsPolynomial) -> RnsPolynomial:
    if not p.is_ntt:
        raise DomainError("ntt_inverse expects an evaluation-domain polynomial")
    rows = p.residues.shape[0]
    out = p.residues.copy()
    pr = p.params
    kernels.ntt_inverse_rows(out, pr._qs[:rows], pr._psi_inv_rev[:rows], pr._psi_inv_rev_shoup[:rows],
                             pr._n_invs[:rows], pr._n_invs_shoup[:rows])
    return RnsPolynomial(p.params, out, False)


def to_ntt(p: RnsPolynomial) -> RnsPolynomial:
    return p if p.is_ntt else ntt_forward(p)


def to_coeff(p: RnsPolynomial) -> RnsPolynomial:
    return ntt_inverse(p) if p.is_ntt else p


def _qcol(p: RnsPolynomial) -> np.ndarray:
    return p.params._qs[: p.residues.shape[0], None]


def ring_add(a: RnsPolynomial, b: RnsPolynomial) -> RnsPolynomial:
    _check_pair(a, b)
    if a.is_ntt != b.is_ntt:
        raise DomainError("ring_add operands are in different domains")
    q = _qcol(a)
    s = a.residues + b.residues
    return RnsPolynomial(a.params, np.where(s >= q, s - q, s), a.is_ntt)


def ring_sub(a: RnsPolynomial, b: RnsPolynomial) -> RnsPolynomial:
    _check_pair(a, b)
    if a.is_ntt != b.is_ntt:
        raise DomainError("ring_sub operands are in different domains")
    q = _qcol(a)
    x, y = a.residues, b.residues
    return RnsPolynomial(a.params, np.where(x >= y, x - y, x + q - y), a.is_ntt)


def ring_neg(a: RnsPolynomial) -> RnsPolynomial:
    q = _qcol(a)
    x = a.residues
    return RnsPolynomial(a.params, np.where(x == 0, x, q - x), a.is_ntt)


def ring_mul(a: RnsPolynomial, b: RnsPolynomial) -> RnsPolynomial:
    """Negacyclic product. Coefficient-domain operands are transformed first;
    the result is always in the NTT domain."""
    _check_pair(a, b)
    a, b = to_ntt(a), to_ntt(b)
    out = np.empty_like(a.residues)
    qs, mus, ks = a.params.kernel_args(out.shape[0])
    kernels.mul_rows(a.residues, b.residues, out, qs, mus, ks)
    return RnsPolynomial(a.params, out, True)


def mul_scalar(a: RnsPolynomial, c: int) -> RnsPolynomial:
    """Multiply by an integer constant (valid in either domain)."""
    rows = a.residues.shape[0]
    cs = np.array([c % q for q in a.moduli], dtype=np.uint64)
    out = np.empty_like(a.residues)
    qs, mus, ks = a.params.kernel_args(rows)
    kernels.mul_scalar_rows(a.residues, cs, out, qs, mus, ks)
    return RnsPolynomial(a.params, out, a.is_ntt)


def drop_last_modulus(p: RnsPolynomial) -> RnsPolynomial:
    """Divide by the last prime q_L with rounding and drop it from the chain.

    Computes floor((p + floor(q_L/2)) / q_L) residue-wise, i.e. round(p / q_L)
    for odd q_L.
    """
    if p.is_ntt:
        raise DomainError("drop_last_modulus expects a coefficient-domain polynomial")
    rows = p.residues.shape[0]
    if rows < 2:
        raise LevelExhaustedError("cannot drop the last remaining modulus")
    q_last = p.moduli[-1]
    half = q_last // 2
    top = p.residues[-1] + np.uint64(half)
    top = np.where(top >= np.uint64(q_last), top - np.uint64(q_last), top)
    diff = np.empty((rows - 1, p.params.ring_degree), dtype=np.uint64)
    for i, q in enumerate(p.moduli[:-1]):
        qq = np.uint64(q)
        x = p.residues[i] + np.uint64(half % q)
        x = np.where(x >= qq, x - qq, x)
        t = top % qq
        diff[i] = np.where(x >= t, x - t, x + qq - t)
    inv = np.array([pow(q_last, -1, q) for q in p.moduli[:-1]], dtype=np.uint64)
    out = np.empty_like(diff)
    qs, mus, ks = p.params.kernel_args(rows - 1)
    kernels.mul_scalar_rows(diff, inv, out, qs, mus, ks)
    return RnsPolynomial(p.params, out, False)


def to_centered_float(p: RnsPolynomial) -> np.ndarray:
    """Coefficients as float64, lifted to the balanced range around zero.

    Uses balanced mixed-radix digits so small values come out exactly and
    large ones keep double precision without big-integer arithmetic.
    """
    if p.is_ntt:
        raise DomainError("to_centered_float expects a coefficient-domain polynomial")
    moduli = p.moduli
    digits = []
    for i, q in enumerate(moduli):
        qq = np.uint64(q)
        r = p.residues[i].copy()
        radix = 1
        for j, d in enumerate(digits):
            term = _mulmod_row(np.mod(d, np.int64(q)).astype(np.uint64), radix % q, q)
            r = np.where(r >= term, r - term, r + qq - term)
            radix *= moduli[j]
        if i:
            r = _mulmod_row(r, pow(radix, -1, q), q)
        signed = r.astype(np.int64)
        digits.append(np.where(r > np.uint64(q // 2), signed - np.int64(q), signed))
    value = digits[-1].astype(np.float64)
    for j in range(len(digits) - 2, -1, -1):
        value = digits[j].astype(np.float64) + float(moduli[j]) * value
    return value


def _mulmod_row(a: np.ndarray, c: int, q: int) -> np.ndarray:
    """``a * c mod q`` for a single residue row through the active kernels."""
    a = np.ascontiguousarray(a, dtype=np.uint64).reshape(1, -1)
    out = np.empty_like(a)
    table = prime_table_for(q)
    kernels.mul_scalar_rows(a, np.array([c % q], dtype=np.uint64), out,
                            np.array([q], dtype=np.uint64),
                            np.array([table[0]], dtype=np.uint64),
                            np.array([table[1]], dtype=np.int64))
    return out[0]


@lru_cache(maxsize=None)
def prime_table_for(q: int) -> tuple[int, int]:
    k = q.bit_length()
    return 2 ** (2 * k) // q, k


def sample_uniform(params: RingParams, rng: np.random.Generator, level: int | None = None,
                   is_ntt: bool = True) -> RnsPolynomial:
    rows = (params.max_level if level is None else level) + 1
    out = np.empty((rows, params.ring_degree), dtype=np.uint64)
    for i, q in enumerate(params.moduli[:rows]):
        out[i] = rng.integers(0, q, size=params.ring_degree, dtype=np.uint64)
    return RnsPolynomial(params, out, is_ntt)


def sample_ternary_secret(params: RingParams, rng: np.random.Generator) -> RnsPolynomial:
    coeffs = rng.integers(-1, 2, size=params.ring_degree, dtype=np.int64)
    return RnsPolynomial.from_signed(params, coeffs)


@lru_cache(maxsize=16)
def _gaussian_table(sigma: float) -> tuple[np.ndarray, np.ndarray]:
    bound = int(np.floor(6.0 * sigma))
    support = np.arange(-bound, bound + 1, dtype=np.int64)
    weights = np.exp(-(support.astype(np.float64) ** 2) / (2.0 * sigma * sigma))
    return support, weights / weights.sum()


def sample_gaussian_coeffs(n: int, rng: np.random.Generator, sigma: float = 3.19) -> np.ndarray:
    """Centered discrete Gaussian samples with the tail cut at 6 sigma."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    support, probs = _gaussian_table(float(sigma))
    return rng.choice(support, size=n, p=probs)


def sample_gaussian_error(params: RingParams, rng: np.random.Generator,
                          sigma: float = 3.19) -> RnsPolynomial:
    return RnsPolynomial.from_signed(params, sample_gaussian_coeffs(params.ring_degree, rng, sigma))
