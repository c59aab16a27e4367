import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hetrade import ckks, envelope
from hetrade.inference import LinearModel


@pytest.fixture(scope="module")
def fresh_ct(params, secret_key):
    pt = ckks.encode(params, [25, 120, 80, 156, 67, 136, 1, 0])
    return ckks.encrypt_symmetric(params, pt, secret_key, np.random.default_rng(3))


def test_header_layout(params, fresh_ct):
    data = envelope.serialize_ciphertext(fresh_ct)
    assert data[:4] == b"HETM"
    assert data[4] == 1 and data[5] == envelope.KIND_CIPHERTEXT
    assert data[6:38] == params.digest
    assert struct.unpack_from("<Q", data, 38)[0] == len(data) - 46


def test_ciphertext_size_arithmetic(fresh_ct):
    # magic/version/kind 6, digest 32, length 8; payload = level 4 + scale 12 + two 3x4096 u64 polys
    data = envelope.serialize_ciphertext(fresh_ct)
    assert envelope.HEADER.size == 6 + 32 + 8
    assert len(data) == 6 + 32 + 8 + 16 + 2 * 3 * 4096 * 8


def test_ciphertext_roundtrip_byte_identical(params, secret_key, fresh_ct):
    data = envelope.serialize_ciphertext(fresh_ct)
    back = envelope.deserialize_ciphertext(data, params)
    assert envelope.serialize_ciphertext(back) == data
    assert back.scale == fresh_ct.scale and back.level == fresh_ct.level
    assert back.c0 == fresh_ct.c0 and back.c1 == fresh_ct.c1


def test_rescaled_ciphertext_roundtrip(params, fresh_ct):
    ct = ckks.rescale_to_next(ckks.multiply_plain(fresh_ct, ckks.encode(params, [1.0])))
    data = envelope.serialize_ciphertext(ct)
    back = envelope.deserialize_ciphertext(data, params)
    assert back.scale == ct.scale and back.level == 1
    assert envelope.serialize_ciphertext(back) == data


@given(st.floats(min_value=1e-300, max_value=1e300, allow_nan=False, allow_infinity=False))
def test_scale_encoding_exact(scale):
    m, e = struct.unpack("<Qi", envelope.pack_scale(scale))
    assert envelope.unpack_scale(m, e) == scale


def test_payload_flip_parses_but_decrypts_to_garbage(params, secret_key, fresh_ct):
    data = bytearray(envelope.serialize_ciphertext(fresh_ct))
    data[46 + 16 + 5] ^= 0xFF  # inside c0 limb 0, coefficient 0
    back = envelope.deserialize_ciphertext(bytes(data), params)
    slots = ckks.decode(ckks.decrypt(back, secret_key))
    want = ckks.decode(ckks.decrypt(fresh_ct, secret_key))
    assert np.max(np.abs(slots - want)) > 1.0


def test_digest_flip_raises(params, fresh_ct):
    data = bytearray(envelope.serialize_ciphertext(fresh_ct))
    data[10] ^= 0x01
    with pytest.raises(envelope.DigestMismatch):
        envelope.deserialize_ciphertext(bytes(data), params)


def test_header_guards(params, fresh_ct):
    good = envelope.serialize_ciphertext(fresh_ct)
    with pytest.raises(envelope.BadMagic):
        envelope.deserialize_ciphertext(b"XXXX" + good[4:], params)
    with pytest.raises(envelope.BadVersion):
        envelope.deserialize_ciphertext(good[:4] + b"\x02" + good[5:], params)
    with pytest.raises(envelope.KindMismatch):
        envelope.deserialize_galois_keys(good, params)
    with pytest.raises(envelope.Truncated):
        envelope.deserialize_ciphertext(good[:-1], params)
    with pytest.raises(envelope.Truncated):
        envelope.deserialize_ciphertext(good + b"\x00", params)
    with pytest.raises(envelope.Truncated):
        envelope.deserialize_ciphertext(good[:20], params)


def test_params_roundtrip(params):
    data = envelope.serialize_params(params)
    back = envelope.deserialize_params(data)
    assert back == params and back.digest == params.digest
    assert envelope.serialize_params(back) == data
    tampered = bytearray(data)
    tampered[-1] ^= 1  # ks_base_log byte: still valid params, wrong digest
    with pytest.raises(envelope.DigestMismatch):
        envelope.deserialize_params(bytes(tampered))


def test_galois_keys_roundtrip(params, secret_key):
    gk = ckks.galois_keygen(params, secret_key, {1, 2, 4}, np.random.default_rng(0))
    data = envelope.serialize_galois_keys(gk)
    back = envelope.deserialize_galois_keys(data, params)
    assert envelope.serialize_galois_keys(back) == data
    assert sorted(back.keys) == [1, 2, 4]
    for s in (1, 2, 4):
        assert np.array_equal(back.keys[s].b, gk.keys[s].b)
        assert back.keys[s].element == gk.keys[s].element


def test_model_roundtrip():
    m = LinearModel.appendix()
    data = envelope.serialize_model(m)
    assert envelope.deserialize_model(data) == m
    assert envelope.serialize_model(envelope.deserialize_model(data)) == data


def test_generic_dispatch(params, fresh_ct):
    for obj, kind in ((params, envelope.KIND_PARAMS), (fresh_ct, envelope.KIND_CIPHERTEXT), (LinearModel.appendix(), envelope.KIND_MODEL)):
        data = envelope.serialize(obj)
        assert envelope.serialize(envelope.deserialize(data, kind, params)) == data
    with pytest.raises(TypeError):
        envelope.serialize(object())
