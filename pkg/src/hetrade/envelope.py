"""Binary envelope shared by every artifact that crosses the wire or disk.

Layout (little-endian)::

    magic   4  b"HETM"
    version 1  0x01
    kind    1  see KIND_*
    digest 32  SHA-256 of the canonical parameter encoding
    length  8  payload length
    payload

Polynomials are written prime-major, coefficient-minor, 8 bytes per
coefficient. Scales are written as ``mantissa * 2**exponent`` with an 8-byte
unsigned mantissa and a 4-byte signed exponent.
"""

from __future__ import annotations

import math
import struct
from typing import Optional

import numpy as np

from .ckks import Ciphertext, CkksParams, GaloisKey, GaloisKeys
from .inference import LinearModel
from .ring import RingPoly

MAGIC = b"HETM"
VERSION = 1
KIND_PARAMS = 0x01
KIND_GALOIS = 0x02
KIND_CIPHERTEXT = 0x03
KIND_MODEL = 0x04
KIND_MESSAGE = 0x05
_PINNED_KINDS = {KIND_GALOIS, KIND_CIPHERTEXT, KIND_MESSAGE}
HEADER = struct.Struct("<4sBB32sQ")
NO_DIGEST = bytes(32)


class EnvelopeError(Exception):
    pass


class BadMagic(EnvelopeError):
    pass


class BadVersion(EnvelopeError):
    pass


class KindMismatch(EnvelopeError):
    pass


class DigestMismatch(EnvelopeError):
    pass


class Truncated(EnvelopeError):
    pass


def pack(kind: int, digest: bytes, payload: bytes) -> bytes:
    if len(digest) != 32:
        raise ValueError("digest must be 32 bytes")
    return HEADER.pack(MAGIC, VERSION, kind, digest, len(payload)) + payload


def unpack(data: bytes, expected_kind: int, expected_digest: Optional[bytes] = None) -> tuple[bytes, bytes]:
    """Validate the header and return (digest, payload)."""
    if len(data) < HEADER.size:
        raise Truncated(f"{len(data)} bytes is shorter than the {HEADER.size}-byte header")
    magic, version, kind, digest, length = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(repr(magic))
    if version != VERSION:
        raise BadVersion(str(version))
    if kind != expected_kind:
        raise KindMismatch(f"got kind {kind:#04x}, expected {expected_kind:#04x}")
    if len(data) - HEADER.size < length:
        raise Truncated(f"payload has {len(data) - HEADER.size} of {length} bytes")
    if len(data) - HEADER.size > length:
        raise Truncated(f"{len(data) - HEADER.size - length} trailing bytes after payload")
    if expected_digest is not None and kind in _PINNED_KINDS and digest != expected_digest:
        raise DigestMismatch("envelope digest does not match the session parameters")
    return digest, bytes(data[HEADER.size :])


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise Truncated(f"payload ends at {len(self.buf)}, need {self.pos + n}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def u64_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<u8").astype(np.uint64)

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise Truncated(f"{len(self.buf) - self.pos} unparsed payload bytes")


def pack_scale(scale: float) -> bytes:
    m, e = math.frexp(scale)
    return struct.pack("<Qi", int(m * 2**53), e - 53)


def unpack_scale(mantissa: int, exponent: int) -> float:
    return math.ldexp(float(mantissa), exponent)


def _u64(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<u8").tobytes()


def _reduce(arr: np.ndarray, params: CkksParams, nlimbs: int) -> np.ndarray:
    q = np.array([m.q for m in params.primes[:nlimbs]], dtype=np.uint64)[:, None]
    return arr % q


# ---------------------------------------------------------------------------


def serialize_params(params: CkksParams) -> bytes:
    return pack(KIND_PARAMS, params.digest, params.canonical_bytes())


def deserialize_params(data: bytes) -> CkksParams:
    digest, payload = unpack(data, KIND_PARAMS)
    params = CkksParams.from_canonical_bytes(payload, allow_reduced=True)
    if params.digest != digest:
        raise DigestMismatch("params payload does not hash to the envelope digest")
    return params


def serialize_ciphertext(ct: Ciphertext) -> bytes:
    payload = struct.pack("<I", ct.level) + pack_scale(ct.scale) + _u64(ct.c0.limbs) + _u64(ct.c1.limbs)
    return pack(KIND_CIPHERTEXT, ct.digest, payload)


def deserialize_ciphertext(data: bytes, params: CkksParams) -> Ciphertext:
    _, payload = unpack(data, KIND_CIPHERTEXT, params.digest)
    r = _Reader(payload)
    (level,) = r.unpack("<I")
    if level > params.max_level:
        raise EnvelopeError(f"ciphertext level {level} above chain top {params.max_level}")
    scale = unpack_scale(*r.unpack("<Qi"))
    n = level + 1
    moduli = params.moduli(level)
    polys = []
    for _ in range(2):
        limbs = r.u64_array(n * params.degree).reshape(n, params.degree)
        polys.append(RingPoly(_reduce(limbs, params, n), moduli))
    r.done()
    return Ciphertext(polys[0], polys[1], scale, level, params.digest)


def serialize_galois_keys(gk: GaloisKeys) -> bytes:
    parts = [struct.pack("<BI", gk.base_log, len(gk.keys))]
    for step in gk.steps:
        key = gk.keys[step]
        nd, nl, _ = key.b.shape
        parts.append(struct.pack("<IIII", step, key.element, nd, nl))
        parts.append(_u64(key.b))
        parts.append(_u64(key.a))
    return pack(KIND_GALOIS, gk.digest, b"".join(parts))


def deserialize_galois_keys(data: bytes, params: CkksParams) -> GaloisKeys:
    _, payload = unpack(data, KIND_GALOIS, params.digest)
    r = _Reader(payload)
    base_log, count = r.unpack("<BI")
    keys = {}
    for _ in range(count):
        step, element, nd, nl = r.unpack("<IIII")
        if nl != len(params.primes):
            raise EnvelopeError(f"Galois key over {nl} primes, params have {len(params.primes)}")
        arrays = []
        for _ in range(2):
            arr = r.u64_array(nd * nl * params.degree).reshape(nd, nl, params.degree)
            arr = np.stack([_reduce(a, params, nl) for a in arr]) if nd else arr
            arr.flags.writeable = False
            arrays.append(arr)
        keys[step] = GaloisKey(element, arrays[0], arrays[1])
    r.done()
    return GaloisKeys(params.digest, base_log, keys)


def serialize_model(model: LinearModel, digest: bytes = NO_DIGEST) -> bytes:
    return pack(KIND_MODEL, digest, struct.pack("<I", model.block_size) + model.to_text().encode("utf-8"))


def deserialize_model(data: bytes) -> LinearModel:
    _, payload = unpack(data, KIND_MODEL)
    r = _Reader(payload)
    (block,) = r.unpack("<I")
    return LinearModel.from_text(payload[r.pos :].decode("utf-8"), block_size=block)


def serialize(obj, digest: bytes = NO_DIGEST) -> bytes:
    if isinstance(obj, CkksParams):
        return serialize_params(obj)
    if isinstance(obj, Ciphertext):
        return serialize_ciphertext(obj)
    if isinstance(obj, GaloisKeys):
        return serialize_galois_keys(obj)
    if isinstance(obj, LinearModel):
        return serialize_model(obj, digest)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def deserialize(data: bytes, kind: int, params: Optional[CkksParams] = None):
    if kind == KIND_PARAMS:
        return deserialize_params(data)
    if kind == KIND_MODEL:
        return deserialize_model(data)
    if params is None:
        raise ValueError("params are required to parse keys and ciphertexts")
    if kind == KIND_CIPHERTEXT:
        return deserialize_ciphertext(data, params)
    if kind == KIND_GALOIS:
        return deserialize_galois_keys(data, params)
    raise KindMismatch(f"no decoder for kind {kind:#04x}")
