"""Negacyclic polynomial arithmetic over an RNS modulus chain.

Elements of Z_q[X]/(X^N + 1), q = q_0 * ... * q_L, are held as an (L+1, N)
uint64 array of residues, one row ("limb") per prime. Every prime satisfies
q = 1 (mod 2N) so each limb has a negacyclic NTT.

Modular products are computed in 64-bit lanes by splitting one operand into
chunks small enough that no intermediate exceeds 2^63; there is no constant
time guarantee anywhere in this module.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

MAX_PRIME_BITS = 60
_MR_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


class RingError(Exception):
    pass


class NoSuchPrime(RingError):
    pass


class BadDegree(RingError):
    pass


class DomainMismatch(RingError):
    pass


class ParamMismatch(RingError):
    pass


class BadGaloisElement(RingError):
    pass


class ChainExhausted(RingError):
    pass


class Domain(enum.Enum):
    COEFF = "coeff"
    EVAL = "eval"


class SampleKind(enum.Enum):
    TERNARY = "ternary"
    GAUSSIAN = "gaussian"
    UNIFORM = "uniform"


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin, exact for n < 3.3e24."""
    if n < 2:
        return False
    for p in _MR_BASES:
        if n % p == 0:
            return n == p
    d, r = n - 1, 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for a in _MR_BASES:
        x = pow(a, d, n)
        if x == 1 or x == n - 1:
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def _find_psi(q: int, degree: int) -> int:
    # smallest base whose (q-1)/2N power has order exactly 2N
    exp = (q - 1) // (2 * degree)
    for base in range(2, q):
        psi = pow(base, exp, q)
        if pow(psi, degree, q) == q - 1:
            return psi
    raise NoSuchPrime(f"no primitive {2 * degree}-th root mod {q}")


@dataclass(frozen=True)
class PrimeModulus:
    q: int
    bit_len: int
    psi: int
    degree: int

    @classmethod
    def create(cls, q: int, degree: int) -> "PrimeModulus":
        if not _is_power_of_two(degree) or degree < 2:
            raise BadDegree(f"degree {degree} is not a power of two")
        if (q - 1) % (2 * degree) or not is_prime(q):
            raise NoSuchPrime(f"{q} is not an NTT-friendly prime for N={degree}")
        return cls(q=q, bit_len=q.bit_length(), psi=_find_psi(q, degree), degree=degree)


def find_primes(bit_lens: Sequence[int], degree: int) -> tuple[PrimeModulus, ...]:
    """Smallest primes of the given bit lengths with q = 1 mod 2N, in order.

    Primes already chosen earlier in the list are skipped, so repeated bit
    lengths yield distinct primes.
    """
    if not _is_power_of_two(degree) or degree < 2:
        raise BadDegree(f"degree {degree} is not a power of two")
    return _find_primes(tuple(bit_lens), degree)


@functools.lru_cache(maxsize=None)
def _find_primes(bit_lens: tuple[int, ...], degree: int) -> tuple[PrimeModulus, ...]:
    two_n = 2 * degree
    min_bits = math.ceil(math.log2(two_n)) + 1
    chosen: list[int] = []
    for bits in bit_lens:
        if bits < min_bits or bits > MAX_PRIME_BITS:
            raise NoSuchPrime(f"bit length {bits} outside [{min_bits}, {MAX_PRIME_BITS}] for N={degree}")
        lo, hi = 1 << (bits - 1), 1 << bits
        q = lo + 1 + (-lo) % two_n  # first value = 1 mod 2N at or above lo + 1
        while q < hi and (q in chosen or not is_prime(q)):
            q += two_n
        if q >= hi:
            raise NoSuchPrime(f"no {bits}-bit prime = 1 mod {two_n} left")
        chosen.append(q)
    return tuple(PrimeModulus.create(q, degree) for q in chosen)


# ---------------------------------------------------------------------------
# vectorised modular helpers; `q` must broadcast against the operands


def _qcol(moduli: Sequence[PrimeModulus], extra_dims: int = 0) -> np.ndarray:
    q = np.array([m.q for m in moduli], dtype=np.uint64)
    return q.reshape((len(moduli),) + (1,) * (1 + extra_dims))


def _mulmod(a: np.ndarray, b: np.ndarray, q: np.ndarray, qbits: int) -> np.ndarray:
    if 2 * qbits <= 63:
        return (a * b) % q
    s = 62 - qbits
    mask = np.uint64((1 << s) - 1)
    shift = np.uint64(s)
    r = None
    for c in reversed(range(math.ceil(qbits / s))):
        chunk = (b >> np.uint64(c * s)) & mask
        r = (a * chunk) % q if r is None else ((r << shift) + a * chunk) % q
    return r


def _maxbits(moduli: Sequence[PrimeModulus]) -> int:
    return max(m.bit_len for m in moduli)


@functools.lru_cache(maxsize=None)
def _tables(q: int, psi: int, degree: int):
    n = degree
    psi_pows = [pow(psi, j, q) for j in range(n)]
    psi_inv = pow(psi, -1, q)
    n_inv = pow(n, -1, q)
    ipsi = [pow(psi_inv, j, q) * n_inv % q for j in range(n)]
    omega = psi * psi % q
    omega_inv = pow(omega, -1, q)
    fwd, inv = [], []
    m = 1
    while m < n:
        step = n // (2 * m)
        w = pow(omega, step, q)
        wi = pow(omega_inv, step, q)
        fwd.append([pow(w, j, q) for j in range(m)])
        inv.append([pow(wi, j, q) for j in range(m)])
        m *= 2
    return psi_pows, ipsi, fwd, inv


@functools.lru_cache(maxsize=None)
def _stacked_tables(moduli: tuple[PrimeModulus, ...]):
    per = [_tables(m.q, m.psi, m.degree) for m in moduli]
    psi_pows = np.array([t[0] for t in per], dtype=np.uint64)
    ipsi = np.array([t[1] for t in per], dtype=np.uint64)
    stages = len(per[0][2])
    fwd = [np.array([t[2][s] for t in per], dtype=np.uint64)[:, None, :] for s in range(stages)]
    inv = [np.array([t[3][s] for t in per], dtype=np.uint64)[:, None, :] for s in range(stages)]
    return psi_pows, ipsi, fwd, inv


@functools.lru_cache(maxsize=None)
def _bitrev(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _cyclic_ntt(a: np.ndarray, stage_tw, q: np.ndarray, qbits: int) -> np.ndarray:
    # iterative radix-2 DIT over the last axis, input permuted to bit-reversed order
    lead = a.shape[:-1]
    n = a.shape[-1]
    a = a[..., _bitrev(n)]
    q3 = q[..., None]
    m = 1
    for tw in stage_tw:
        blk = a.reshape(lead + (n // (2 * m), 2, m))
        u = blk[..., 0, :]
        v = _mulmod(blk[..., 1, :], tw, q3, qbits)
        a = np.stack(((u + v) % q3, (u + q3 - v) % q3), axis=-2).reshape(lead + (n,))
        m *= 2
    return a


def ntt_array(arr: np.ndarray, moduli: tuple[PrimeModulus, ...]) -> np.ndarray:
    """Forward negacyclic NTT on an array shaped (..., L, N)."""
    psi_pows, _, fwd, _ = _stacked_tables(moduli)
    q = _qcol(moduli)
    qbits = _maxbits(moduli)
    return _cyclic_ntt(_mulmod(arr, psi_pows, q, qbits), fwd, q, qbits)


def intt_array(arr: np.ndarray, moduli: tuple[PrimeModulus, ...]) -> np.ndarray:
    _, ipsi, _, inv = _stacked_tables(moduli)
    q = _qcol(moduli)
    qbits = _maxbits(moduli)
    return _mulmod(_cyclic_ntt(arr, inv, q, qbits), ipsi, q, qbits)


# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RingPoly:
    limbs: np.ndarray
    moduli: tuple[PrimeModulus, ...]
    domain: Domain = Domain.COEFF

    def __post_init__(self):
        limbs = np.ascontiguousarray(self.limbs, dtype=np.uint64)
        if limbs.ndim != 2 or limbs.shape[0] != len(self.moduli):
            raise ParamMismatch(f"limb array {limbs.shape} does not match {len(self.moduli)} primes")
        degree = self.moduli[0].degree
        if limbs.shape[1] != degree or any(m.degree != degree for m in self.moduli):
            raise ParamMismatch("limb length differs from ring degree")
        limbs.flags.writeable = False
        object.__setattr__(self, "limbs", limbs)

    @property
    def degree(self) -> int:
        return self.limbs.shape[1]

    @property
    def num_limbs(self) -> int:
        return self.limbs.shape[0]

    def __eq__(self, other):
        if not isinstance(other, RingPoly):
            return NotImplemented
        return (
            self.moduli == other.moduli
            and self.domain == other.domain
            and np.array_equal(self.limbs, other.limbs)
        )

    __hash__ = None

    def __add__(self, other: "RingPoly") -> "RingPoly":
        return poly_add(self, other)

    def __sub__(self, other: "RingPoly") -> "RingPoly":
        return poly_sub(self, other)

    def __neg__(self) -> "RingPoly":
        return poly_neg(self)

    def __mul__(self, other: "RingPoly") -> "RingPoly":
        return poly_mul(self, other)

    def __repr__(self) -> str:
        qs = ",".join(str(m.bit_len) for m in self.moduli)
        return f"RingPoly(N={self.degree}, bits=[{qs}], {self.domain.value})"


def _check_pair(a: RingPoly, b: RingPoly) -> None:
    if a.moduli != b.moduli:
        raise ParamMismatch("operands live over different modulus chains")
    if a.domain != b.domain:
        raise DomainMismatch(f"{a.domain.value} vs {b.domain.value}")


def from_ints(values, moduli: Sequence[PrimeModulus], domain: Domain = Domain.COEFF) -> RingPoly:
    """Reduce signed integer coefficients (int64 or Python ints) into every limb."""
    moduli = tuple(moduli)
    values = np.asarray(values)
    if values.dtype == object:
        limbs = np.stack([np.mod(values, m.q).astype(np.uint64) for m in moduli])
    else:
        values = values.astype(np.int64)
        limbs = np.stack([np.mod(values, np.int64(m.q)).astype(np.uint64) for m in moduli])
    return RingPoly(limbs, moduli, domain)


def zero(moduli: Sequence[PrimeModulus], domain: Domain = Domain.COEFF) -> RingPoly:
    moduli = tuple(moduli)
    return RingPoly(np.zeros((len(moduli), moduli[0].degree), dtype=np.uint64), moduli, domain)


def monomial(power: int, moduli: Sequence[PrimeModulus], coeff: int = 1) -> RingPoly:
    """coeff * X^power, reduced with X^N = -1."""
    degree = moduli[0].degree
    values = np.zeros(degree, dtype=object)
    k, j = divmod(power, degree)
    values[j] = coeff if k % 2 == 0 else -coeff
    return from_ints(values, moduli)


def ntt(p: RingPoly) -> RingPoly:
    if p.domain is not Domain.COEFF:
        raise DomainMismatch("ntt expects a COEFF-domain polynomial")
    return RingPoly(ntt_array(p.limbs, p.moduli), p.moduli, Domain.EVAL)


def intt(p: RingPoly) -> RingPoly:
    if p.domain is not Domain.EVAL:
        raise DomainMismatch("intt expects an EVAL-domain polynomial")
    return RingPoly(intt_array(p.limbs, p.moduli), p.moduli, Domain.COEFF)


def to_domain(p: RingPoly, domain: Domain) -> RingPoly:
    if p.domain is domain:
        return p
    return ntt(p) if domain is Domain.EVAL else intt(p)


def poly_add(a: RingPoly, b: RingPoly) -> RingPoly:
    _check_pair(a, b)
    return RingPoly((a.limbs + b.limbs) % _qcol(a.moduli), a.moduli, a.domain)


def poly_sub(a: RingPoly, b: RingPoly) -> RingPoly:
    _check_pair(a, b)
    q = _qcol(a.moduli)
    return RingPoly((a.limbs + q - b.limbs) % q, a.moduli, a.domain)


def poly_neg(a: RingPoly) -> RingPoly:
    q = _qcol(a.moduli)
    return RingPoly((q - a.limbs) % q, a.moduli, a.domain)


def poly_mul(a: RingPoly, b: RingPoly) -> RingPoly:
    """Negacyclic product. COEFF inputs are transformed and the result returned in COEFF."""
    _check_pair(a, b)
    q = _qcol(a.moduli)
    bits = _maxbits(a.moduli)
    if a.domain is Domain.EVAL:
        return RingPoly(_mulmod(a.limbs, b.limbs, q, bits), a.moduli, Domain.EVAL)
    prod = _mulmod(ntt_array(a.limbs, a.moduli), ntt_array(b.limbs, b.moduli), q, bits)
    return RingPoly(intt_array(prod, a.moduli), a.moduli, Domain.COEFF)


def poly_scalar_mul(a: RingPoly, c: int) -> RingPoly:
    """Multiply by an integer constant (reduced separately per limb)."""
    cs = np.array([c % m.q for m in a.moduli], dtype=np.uint64)[:, None]
    return RingPoly(_mulmod(a.limbs, cs, _qcol(a.moduli), _maxbits(a.moduli)), a.moduli, a.domain)


@functools.lru_cache(maxsize=None)
def _automorphism_map(degree: int, g: int):
    j = np.arange(degree, dtype=np.int64)
    t = (g * j) % (2 * degree)
    return t % degree, t >= degree


def galois_element_valid(g: int, degree: int) -> bool:
    return 1 <= g < 2 * degree and math.gcd(g, 2 * degree) == 1


def apply_automorphism(p: RingPoly, g: int) -> RingPoly:
    """X -> X^g on a COEFF polynomial."""
    if p.domain is not Domain.COEFF:
        raise DomainMismatch("automorphisms are applied in the COEFF domain")
    if not galois_element_valid(g, p.degree):
        raise BadGaloisElement(f"{g} is not a unit in [1, {2 * p.degree})")
    dest, neg = _automorphism_map(p.degree, g)
    q = _qcol(p.moduli)
    src = np.where(neg, (q - p.limbs) % q, p.limbs)
    out = np.empty_like(src)
    out[:, dest] = src
    return RingPoly(out, p.moduli, Domain.COEFF)


def sample_gaussian_ints(degree: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Rounded centred normal with a 6-sigma tail cut."""
    x = rng.normal(0.0, sigma, degree)
    bad = np.abs(x) > 6 * sigma
    while bad.any():
        x[bad] = rng.normal(0.0, sigma, int(bad.sum()))
        bad = np.abs(x) > 6 * sigma
    return np.rint(x).astype(np.int64)


def sample(
    kind: SampleKind,
    moduli: Sequence[PrimeModulus],
    rng: np.random.Generator,
    sigma: float = 3.2,
) -> RingPoly:
    moduli = tuple(moduli)
    degree = moduli[0].degree
    if kind is SampleKind.TERNARY:
        return from_ints(rng.integers(-1, 2, degree), moduli)
    if kind is SampleKind.GAUSSIAN:
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        return from_ints(sample_gaussian_ints(degree, sigma, rng), moduli)
    if kind is SampleKind.UNIFORM:
        limbs = np.stack([rng.integers(0, m.q, degree, dtype=np.uint64) for m in moduli])
        return RingPoly(limbs, moduli)
    raise ValueError(f"unknown sample kind {kind}")


def keep_limbs(p: RingPoly, count: int) -> RingPoly:
    """Restrict to the first `count` primes (no division; exact only for small values)."""
    if count == p.num_limbs:
        return p
    if not 1 <= count <= p.num_limbs:
        raise ChainExhausted(f"cannot keep {count} of {p.num_limbs} limbs")
    return RingPoly(p.limbs[:count], p.moduli[:count], p.domain)


def rescale_last(p: RingPoly) -> RingPoly:
    """Divide by the last prime with rounding and drop its limb."""
    if p.domain is not Domain.COEFF:
        raise DomainMismatch("rescale works on COEFF polynomials")
    if p.num_limbs < 2:
        raise ChainExhausted("rescale needs at least two primes")
    last = p.moduli[-1]
    cl = p.limbs[-1].astype(np.int64)
    cl = np.where(cl > last.q // 2, cl - np.int64(last.q), cl)
    rest = p.moduli[:-1]
    out = np.empty((len(rest), p.degree), dtype=np.uint64)
    for i, m in enumerate(rest):
        qi = np.uint64(m.q)
        clm = np.mod(cl, np.int64(m.q)).astype(np.uint64)
        diff = (p.limbs[i] + qi - clm) % qi
        inv = np.uint64(pow(last.q, -1, m.q))
        out[i] = _mulmod(diff, inv, qi, m.bit_len)
    return RingPoly(out, rest, Domain.COEFF)


def modulus_product(moduli: Sequence[PrimeModulus]) -> int:
    return math.prod(m.q for m in moduli)


def crt_lift(p: RingPoly) -> np.ndarray:
    """Centred integer coefficients in (-Q/2, Q/2] as an object array of Python ints."""
    if p.domain is not Domain.COEFF:
        p = intt(p)
    big_q = modulus_product(p.moduli)
    acc = np.zeros(p.degree, dtype=object)
    for limb, m in zip(p.limbs, p.moduli):
        q_hat = big_q // m.q
        acc = acc + limb.astype(object) * (q_hat * pow(q_hat, -1, m.q) % big_q)
    acc = acc % big_q
    half = big_q // 2
    return np.where(acc > half, acc - big_q, acc)
