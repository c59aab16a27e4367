"""Educational CKKS: canonical-embedding encoder, symmetric RLWE encryption,
and the evaluator subset needed for encrypted linear scoring.

Conventions fixed here:

* decryption is ``c0 + c1 * s``;
* slot ``j`` is the evaluation at ``zeta^(3^j)``, so the automorphism
  ``X -> X^(3^r)`` rotates the slot vector left by ``r``;
* key switching uses digit decomposition of every RNS limb with base
  ``2^ks_base_log`` and no auxiliary prime. Its noise is roughly
  ``2^17`` in coefficient units at the demo parameters, so rotations should
  run at a scale of 2^40 or more (as the linear-scoring pipeline does).
"""

from __future__ import annotations

import functools
import hashlib
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import ring
from .ring import Domain, PrimeModulus, RingPoly, SampleKind

# max total modulus bits for 128-bit classical security, by ring degree
SECURITY_TABLE = {1024: 27, 2048: 54, 4096: 109, 8192: 218, 16384: 438}
SCALE_RTOL = 2.0**-40
MAX_ABS_VALUE = 2.0**20
ENCODE_HEADROOM_BITS = 10
DEFAULT_FLOOD_BITS = 10
# 6-sigma slot perturbation allowed from flooding, in message units
FLOOD_BUDGET = 2.5e-2
ROTATION_GENERATOR = 3


class CkksError(Exception):
    pass


class ScaleOverflow(CkksError):
    pass


class TooManyValues(CkksError):
    pass


class ScaleMismatch(CkksError):
    pass


class LevelMismatch(CkksError):
    pass


class MissingGaloisKey(CkksError):
    pass


class BadStep(CkksError):
    pass


class FloodOverflow(CkksError):
    pass


class InsecureParams(CkksError):
    pass


ParamMismatch = ring.ParamMismatch
ChainExhausted = ring.ChainExhausted


@dataclass(frozen=True)
class CkksParams:
    degree: int = 4096
    prime_bit_lens: tuple[int, ...] = (37, 37, 35)
    scale_log2: int = 20
    sigma: float = 3.2
    ks_base_log: int = 8
    allow_reduced: bool = field(default=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "prime_bit_lens", tuple(int(b) for b in self.prime_bit_lens))
        if not self.prime_bit_lens:
            raise ValueError("need at least one prime")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not 1 <= self.ks_base_log <= 30:
            raise ValueError("ks_base_log must be in [1, 30]")
        ring.find_primes(self.prime_bit_lens, self.degree)  # validates degree and bit lengths
        if self.security_level != "standard" and not self.allow_reduced:
            raise InsecureParams(
                f"{self.total_bits} modulus bits at N={self.degree} exceed the 128-bit table "
                f"({SECURITY_TABLE.get(self.degree)}); pass allow_reduced=True to opt in"
            )

    @property
    def primes(self) -> tuple[PrimeModulus, ...]:
        return ring.find_primes(self.prime_bit_lens, self.degree)

    @property
    def slot_count(self) -> int:
        return self.degree // 2

    @property
    def max_level(self) -> int:
        return len(self.prime_bit_lens) - 1

    @property
    def default_scale(self) -> float:
        return 2.0**self.scale_log2

    @property
    def total_bits(self) -> int:
        return sum(self.prime_bit_lens)

    @property
    def security_level(self) -> str:
        limit = SECURITY_TABLE.get(self.degree)
        return "standard" if limit is not None and self.total_bits <= limit else "reduced"

    def moduli(self, level: int) -> tuple[PrimeModulus, ...]:
        return self.primes[: level + 1]

    def canonical_bytes(self) -> bytes:
        out = struct.pack("<IB", self.degree, len(self.prime_bit_lens))
        out += bytes(self.prime_bit_lens)
        out += b"".join(struct.pack("<Q", m.q) for m in self.primes)
        out += struct.pack("<idB", self.scale_log2, self.sigma, self.ks_base_log)
        return out

    @classmethod
    def from_canonical_bytes(cls, data: bytes, allow_reduced: bool = True) -> "CkksParams":
        degree, count = struct.unpack_from("<IB", data, 0)
        pos = 5
        bits = tuple(data[pos : pos + count])
        pos += count
        primes = struct.unpack_from(f"<{count}Q", data, pos)
        pos += 8 * count
        scale_log2, sigma, ks_base_log = struct.unpack_from("<idB", data, pos)
        if pos + struct.calcsize("<idB") != len(data):
            raise ValueError("trailing bytes in params encoding")
        params = cls(degree, bits, scale_log2, sigma, ks_base_log, allow_reduced=allow_reduced)
        if tuple(m.q for m in params.primes) != primes:
            raise ParamMismatch("encoded primes differ from the deterministic prime search")
        return params

    @functools.cached_property
    def digest(self) -> bytes:
        return hashlib.sha256(b"hetrade-params/1" + self.canonical_bytes()).digest()


@dataclass(frozen=True)
class Plaintext:
    poly: RingPoly
    scale: float
    level: int

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.poly.num_limbs != self.level + 1:
            raise LevelMismatch("plaintext limbs disagree with its level")


@dataclass(frozen=True)
class Ciphertext:
    c0: RingPoly
    c1: RingPoly
    scale: float
    level: int
    digest: bytes

    def __post_init__(self):
        if self.c0.moduli != self.c1.moduli or self.c0.domain != self.c1.domain:
            raise ParamMismatch("ciphertext components disagree")
        if self.c0.num_limbs != self.level + 1:
            raise LevelMismatch("ciphertext limbs disagree with its level")


@dataclass(frozen=True, eq=False)
class SecretKey:
    s: RingPoly
    digest: bytes
    _eval_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def at_level(self, level: int) -> RingPoly:
        if level not in self._eval_cache:
            self._eval_cache[level] = ring.ntt(ring.keep_limbs(self.s, level + 1))
        return self._eval_cache[level]


@dataclass(frozen=True, eq=False)
class GaloisKey:
    element: int
    # (digits, limbs, N), EVAL domain; digit order is prime-major
    b: np.ndarray
    a: np.ndarray


@dataclass(frozen=True, eq=False)
class GaloisKeys:
    digest: bytes
    base_log: int
    keys: dict[int, GaloisKey]

    @property
    def steps(self) -> tuple[int, ...]:
        return tuple(sorted(self.keys))

    def __contains__(self, step: int) -> bool:
        return step in self.keys


# ---------------------------------------------------------------------------
# encoding


@functools.lru_cache(maxsize=None)
def _slot_positions(degree: int):
    two_n = 2 * degree
    n = degree // 2
    powers = np.array([pow(ROTATION_GENERATOR, j, two_n) for j in range(n)], dtype=np.int64)
    pos = (powers - 1) // 2
    conj_pos = (two_n - powers - 1) // 2
    twist = np.exp(1j * np.pi * np.arange(degree) / degree)
    return pos, conj_pos, twist


def galois_element(steps: int, degree: int) -> int:
    return pow(ROTATION_GENERATOR, steps, 2 * degree)


def embed_inverse(values: np.ndarray, degree: int) -> np.ndarray:
    """Real coefficient vector whose canonical embedding is `values` (zero-padded)."""
    pos, conj_pos, twist = _slot_positions(degree)
    z = np.zeros(degree // 2, dtype=np.complex128)
    z[: len(values)] = values
    spectrum = np.zeros(degree, dtype=np.complex128)
    spectrum[pos] = z
    spectrum[conj_pos] = np.conj(z)
    return np.real(np.fft.fft(spectrum) / degree / twist)


def embed(coeffs: np.ndarray, degree: int) -> np.ndarray:
    pos, _, twist = _slot_positions(degree)
    spectrum = np.fft.ifft(np.asarray(coeffs, dtype=np.float64) * twist) * degree
    return spectrum[pos]


def _round_to_ints(x: np.ndarray) -> np.ndarray:
    r = np.rint(x)
    if np.max(np.abs(r), initial=0.0) < 2.0**62:
        return r.astype(np.int64)
    return np.array([int(v) for v in r], dtype=object)


def encode(params: CkksParams, values: Sequence[float], scale: Optional[float] = None, level: Optional[int] = None) -> Plaintext:
    scale = params.default_scale if scale is None else float(scale)
    level = params.max_level if level is None else level
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or len(values) > params.slot_count:
        raise TooManyValues(f"{values.size} values for {params.slot_count} slots")
    peak = float(np.max(np.abs(values), initial=0.0))
    if peak > MAX_ABS_VALUE:
        raise ScaleOverflow(f"|value| {peak} exceeds the encoder cap 2^20")
    moduli = params.moduli(level)
    log_q = math.log2(ring.modulus_product(moduli))
    if peak > 0 and math.log2(scale * peak) + ENCODE_HEADROOM_BITS > log_q:
        raise ScaleOverflow(f"scale*max|v| = 2^{math.log2(scale * peak):.1f} leaves < {ENCODE_HEADROOM_BITS} bits under 2^{log_q:.1f}")
    coeffs = _round_to_ints(embed_inverse(values, params.degree) * scale)
    return Plaintext(ring.from_ints(coeffs, moduli), scale, level)


def decode(pt: Plaintext) -> np.ndarray:
    coeffs = ring.crt_lift(pt.poly).astype(np.float64)
    return np.real(embed(coeffs / pt.scale, pt.poly.degree))


# ---------------------------------------------------------------------------
# keys and encryption


def keygen(params: CkksParams, rng: np.random.Generator) -> SecretKey:
    s = ring.sample(SampleKind.TERNARY, params.primes, rng)
    return SecretKey(s, params.digest)


def _digit_layout(moduli: Sequence[PrimeModulus], base_log: int) -> list[tuple[int, int]]:
    return [(i, t) for i, m in enumerate(moduli) for t in range(math.ceil(m.bit_len / base_log))]


def galois_keygen(params: CkksParams, sk: SecretKey, steps: Iterable[int], rng: np.random.Generator) -> GaloisKeys:
    if sk.digest != params.digest:
        raise ParamMismatch("secret key belongs to other parameters")
    moduli = params.primes
    layout = _digit_layout(moduli, params.ks_base_log)
    n_dig, n_limbs, degree = len(layout), len(moduli), params.degree
    q = ring._qcol(moduli)
    bits = ring._maxbits(moduli)
    s_eval = sk.at_level(params.max_level).limbs
    keys = {}
    for step in sorted(set(int(s) for s in steps)):
        if not 1 <= step < params.slot_count:
            raise BadStep(f"rotation step {step} outside [1, {params.slot_count})")
        g = galois_element(step, degree)
        sg_eval = ring.ntt(ring.apply_automorphism(sk.s, g)).limbs
        a = np.stack([ring.sample(SampleKind.UNIFORM, moduli, rng).limbs for _ in range(n_dig)])
        e = np.stack([ring.sample(SampleKind.GAUSSIAN, moduli, rng, params.sigma).limbs for _ in range(n_dig)])
        e_eval = ring.ntt_array(e, moduli)
        b = (e_eval + q - ring._mulmod(a, s_eval, q, bits)) % q
        for d, (i, t) in enumerate(layout):
            mi = moduli[i]
            gadget = np.uint64(pow(2, t * params.ks_base_log, mi.q))
            b[d, i] = (b[d, i] + ring._mulmod(sg_eval[i], gadget, np.uint64(mi.q), mi.bit_len)) % np.uint64(mi.q)
        b.flags.writeable = False
        a.flags.writeable = False
        keys[step] = GaloisKey(g, b, a)
    return GaloisKeys(params.digest, params.ks_base_log, keys)


def encrypt_symmetric(params: CkksParams, pt: Plaintext, sk: SecretKey, rng: np.random.Generator) -> Ciphertext:
    if sk.digest != params.digest:
        raise ParamMismatch("secret key belongs to other parameters")
    if pt.level > params.max_level:
        raise LevelMismatch("plaintext level above the chain")
    moduli = params.moduli(pt.level)
    c1 = ring.sample(SampleKind.UNIFORM, moduli, rng)
    e = ring.sample(SampleKind.GAUSSIAN, moduli, rng, params.sigma)
    c1s = ring.intt(ring.ntt(c1) * sk.at_level(pt.level))
    c0 = pt.poly + e - c1s
    return Ciphertext(c0, c1, pt.scale, pt.level, params.digest)


def decrypt(ct: Ciphertext, sk: SecretKey) -> Plaintext:
    if ct.digest != sk.digest:
        raise ParamMismatch("ciphertext and key were made under different parameters")
    c1s = ring.intt(ring.ntt(ct.c1) * sk.at_level(ct.level))
    return Plaintext(ct.c0 + c1s, ct.scale, ct.level)


# ---------------------------------------------------------------------------
# evaluator


def _scales_match(a: float, b: float) -> bool:
    return abs(a - b) <= SCALE_RTOL * max(abs(a), abs(b))


def add(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    if a.digest != b.digest:
        raise ParamMismatch("ciphertexts from different parameter sets")
    if a.level != b.level:
        raise LevelMismatch(f"levels {a.level} and {b.level}")
    if not _scales_match(a.scale, b.scale):
        raise ScaleMismatch(f"scales {a.scale} and {b.scale}")
    return Ciphertext(a.c0 + b.c0, a.c1 + b.c1, a.scale, a.level, a.digest)


def multiply_plain(ct: Ciphertext, pt: Plaintext) -> Ciphertext:
    if pt.level != ct.level:
        raise LevelMismatch(f"ciphertext level {ct.level}, plaintext level {pt.level}")
    p = ring.ntt(pt.poly)
    c0 = ring.intt(ring.ntt(ct.c0) * p)
    c1 = ring.intt(ring.ntt(ct.c1) * p)
    return Ciphertext(c0, c1, ct.scale * pt.scale, ct.level, ct.digest)


def _key_switch_rotated(c0g: RingPoly, c1g: RingPoly, key: GaloisKey, base_log: int) -> tuple[RingPoly, RingPoly]:
    moduli = c1g.moduli
    layout = _digit_layout(moduli, base_log)
    nd = len(layout)
    mask = np.uint64((1 << base_log) - 1)
    digits = np.stack([(c1g.limbs[i] >> np.uint64(t * base_log)) & mask for i, t in layout])
    # digits are < 2^base_log, below every prime, so the same residues serve all limbs
    lifted = np.broadcast_to(digits[:, None, :], (nd, len(moduli), c1g.degree))
    d_eval = ring.ntt_array(np.ascontiguousarray(lifted), moduli)
    q = ring._qcol(moduli)
    bits = ring._maxbits(moduli)
    kb = key.b[:nd, : len(moduli)]
    ka = key.a[:nd, : len(moduli)]
    acc_b = ring.zero(moduli, Domain.EVAL).limbs
    acc_a = acc_b
    for d in range(nd):
        acc_b = (acc_b + ring._mulmod(d_eval[d], kb[d], q, bits)) % q
        acc_a = (acc_a + ring._mulmod(d_eval[d], ka[d], q, bits)) % q
    new_c0 = c0g + RingPoly(ring.intt_array(acc_b, moduli), moduli)
    new_c1 = RingPoly(ring.intt_array(acc_a, moduli), moduli)
    return new_c0, new_c1


def rotate_vector(ct: Ciphertext, steps: int, gk: GaloisKeys) -> Ciphertext:
    """Left-rotate the slot vector by `steps` using a matching Galois key."""
    if gk.digest != ct.digest:
        raise ParamMismatch("Galois keys were made under different parameters")
    slots = ct.c0.degree // 2
    step = steps % slots
    if step not in gk.keys:
        raise MissingGaloisKey(f"no Galois key for rotation {steps}")
    key = gk.keys[step]
    c0g = ring.apply_automorphism(ct.c0, key.element)
    c1g = ring.apply_automorphism(ct.c1, key.element)
    c0, c1 = _key_switch_rotated(c0g, c1g, key, gk.base_log)
    return Ciphertext(c0, c1, ct.scale, ct.level, ct.digest)


def rescale_to_next(ct: Ciphertext) -> Ciphertext:
    if ct.level < 1:
        raise ChainExhausted("ciphertext is at the last level")
    dropped = ct.c0.moduli[-1].q
    return Ciphertext(
        ring.rescale_last(ct.c0), ring.rescale_last(ct.c1), ct.scale / dropped, ct.level - 1, ct.digest
    )


def flood_error_bound(params: CkksParams, scale: float, flood_bits: int) -> float:
    """Six-sigma per-slot perturbation caused by flooding at `scale`."""
    return 6 * params.sigma * 2.0**flood_bits * math.sqrt(params.degree / 2) / scale


def noise_flood(
    params: CkksParams,
    ct: Ciphertext,
    flood_bits: int,
    rng: np.random.Generator,
    budget: float = FLOOD_BUDGET,
) -> Ciphertext:
    """Add the noiseful trivial encryption of zero (e, 0), std(e) = sigma * 2^flood_bits.

    There is no public key in the protocol, so c1 is left as is; flooding
    only hides the decryption noise produced by the evaluation circuit.
    """
    if flood_bits < 0:
        raise ValueError("flood_bits must be non-negative")
    bound = flood_error_bound(params, ct.scale, flood_bits)
    if bound > budget:
        raise FloodOverflow(
            f"flood_bits={flood_bits} perturbs slots by up to {bound:.3g} at scale 2^{math.log2(ct.scale):.1f}; "
            f"budget is {budget:g}"
        )
    e = ring.sample_gaussian_ints(params.degree, params.sigma * 2.0**flood_bits, rng)
    return Ciphertext(ct.c0 + ring.from_ints(e, ct.c0.moduli), ct.c1, ct.scale, ct.level, ct.digest)


def max_flood_bits(params: CkksParams, scale: float, budget: float = FLOOD_BUDGET) -> int:
    fb = -1
    while flood_error_bound(params, scale, fb + 1) <= budget:
        fb += 1
    return fb


def estimate_noise(ct: Ciphertext, sk: SecretKey, reference: Plaintext) -> float:
    """log2 of the largest coefficient deviation of Dec(ct) from `reference`."""
    dec = decrypt(ct, sk)
    if reference.level != dec.level:
        raise LevelMismatch("reference plaintext at another level")
    dev = ring.crt_lift(dec.poly - reference.poly)
    peak = max(abs(int(v)) for v in dev)
    return -math.inf if peak == 0 else math.log2(peak)
