import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hetrade import ckks
from hetrade.extraction import random_model
from hetrade.inference import (
    APPENDIX_LABELS,
    APPENDIX_RECORDS,
    BadModel,
    BadRecordLength,
    LinearModel,
    TooManyRecords,
    block_scores,
    block_size_for,
    encode_model,
    encrypted_linear_eval,
    make_mask,
    oracle_linear,
    pack_records,
    predict_label,
    rotate_sum_plain,
    rotation_steps,
)

ORACLE_SCORES = (-3.736, 1.206)  # hand-summed inner products of the appendix data


def run_eval(params, sk, gk, model, records, rng, use_mask=True):
    batch = pack_records(records, model.block_size, params.slot_count, model.num_features)
    ct = ckks.encrypt_symmetric(params, ckks.encode(params, batch.slot_vector), sk, rng)
    out = encrypted_linear_eval(params, ct, model, gk, num_blocks=len(records), use_mask=use_mask)
    return ckks.decode(ckks.decrypt(out, sk))


# --- model ------------------------------------------------------------------------


def test_appendix_model():
    m = LinearModel.appendix()
    assert m.feature_names == ("age", "sys", "dia", "cholesterol", "height", "weight")
    assert m.block_size == 8 and m.num_features == 6


@pytest.mark.parametrize("d,block", [(1, 4), (2, 4), (6, 8), (7, 16), (14, 16), (15, 32)])
def test_block_size_for(d, block):
    assert block_size_for(d) == block


def test_model_validation():
    with pytest.raises(BadModel):
        LinearModel((1.0, 2.0), 0.0)
    with pytest.raises(BadModel):
        LinearModel.with_features([1.0] * 6, 0.0, block_size=7)
    with pytest.raises(BadModel):
        LinearModel.with_features([1.0] * 7, 0.0, block_size=8)
    with pytest.raises(BadModel):
        LinearModel.with_features([float("nan")] * 6, 0.0)
    with pytest.raises(BadModel):
        LinearModel.with_features([1.0], float("inf"))


def test_model_text_roundtrip():
    m = LinearModel.appendix()
    text = m.to_text()
    assert text.splitlines()[0] == "feature age 0.072"
    assert text.splitlines()[-1] == "bias -5.329"
    assert LinearModel.from_text(text) == m


@given(
    weights=st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=12),
    bias=st.floats(-1e6, 1e6, allow_nan=False),
)
def test_model_text_roundtrip_property(weights, bias):
    m = LinearModel.with_features(weights, bias)
    assert LinearModel.from_text(m.to_text()) == m


@pytest.mark.parametrize("text", ["", "bias 1\n", "feature a 1\n", "feature a x\nbias 1\n", "bias 1\nfeature a 1\n", "weight a 1\nbias 0\n"])
def test_model_text_rejects(text):
    with pytest.raises(BadModel):
        LinearModel.from_text(text)


# --- packing -------------------------------------------------------------------------


def test_pack_appendix_layout():
    batch = pack_records(APPENDIX_RECORDS, 8, 2048)
    assert list(batch.slot_vector[:16]) == [25, 120, 80, 156, 67, 136, 1, 0, 56, 141, 100, 428, 65, 171, 1, 0]
    assert not batch.slot_vector[16:].any()


def test_pack_capacity():
    rec = [(1.0,) * 6] * 256
    assert pack_records(rec, 8, 2048).num_records * 8 == 2048
    with pytest.raises(TooManyRecords):
        pack_records(rec + [(1.0,) * 6], 8, 2048)


def test_pack_errors():
    with pytest.raises(BadRecordLength):
        pack_records([(1, 2, 3), (1, 2)], 8, 2048)
    with pytest.raises(BadRecordLength):
        pack_records([(1,) * 7], 8, 2048)


def test_encode_model_and_mask():
    w = encode_model(LinearModel.appendix(), 2)
    assert list(w[:8]) == [0.072, 0.013, -0.029, 0.008, -0.053, 0.021, -5.329, 0]
    assert list(w[8:]) == list(w[:8])
    mask = make_mask(8, 2, 16)
    assert list(mask) == [1, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0]
    with pytest.raises(TooManyRecords):
        make_mask(8, 3, 16)


def test_rotation_steps():
    assert rotation_steps(8) == (1, 2, 4)
    assert rotation_steps(1) == ()
    assert rotation_steps(16) == (1, 2, 4, 8)


# --- plaintext oracle ------------------------------------------------------------------


def test_oracle_scores_and_labels():
    m = LinearModel.appendix()
    scores = [oracle_linear(r, m) for r in APPENDIX_RECORDS]
    assert scores == pytest.approx(ORACLE_SCORES, abs=1e-12)
    assert tuple(predict_label(s) for s in scores) == APPENDIX_LABELS


def test_predict_label_boundary():
    assert predict_label(-3.736) == 0
    assert predict_label(1.206) == 1
    assert predict_label(0.0) == 1


@given(
    vec=st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=32, max_size=32),
    block=st.sampled_from([1, 2, 4, 8, 16, 32]),
)
def test_rotate_sum_matches_window_sums(vec, block):
    got = rotate_sum_plain(np.array(vec), block)
    n = len(vec)
    for j in range(n):
        want = sum(vec[(j + t) % n] for t in range(block))
        assert got[j] == pytest.approx(want, abs=1e-6)


# --- encrypted evaluation ---------------------------------------------------------------


def test_encrypted_appendix(params, secret_key, galois_keys, rng):
    slots = run_eval(params, secret_key, galois_keys, LinearModel.appendix(), APPENDIX_RECORDS, rng)
    scores = block_scores(slots, 8, 2)
    assert np.max(np.abs(scores - ORACLE_SCORES)) <= 5e-2
    assert tuple(predict_label(s) for s in scores) == APPENDIX_LABELS
    rest = np.delete(slots, [0, 8])
    assert np.max(np.abs(rest)) <= 5e-2


def test_zero_record_returns_bias(params, secret_key, galois_keys, rng):
    slots = run_eval(params, secret_key, galois_keys, LinearModel.appendix(), [(0,) * 6], rng)
    assert abs(slots[0] - (-5.329)) <= 5e-2


def test_unmasked_eval_keeps_partial_sums(params, secret_key, galois_keys, rng):
    slots = run_eval(params, secret_key, galois_keys, LinearModel.appendix(), APPENDIX_RECORDS, rng, use_mask=False)
    assert abs(slots[0] - ORACLE_SCORES[0]) <= 5e-2
    # slot 1 holds a partial window sum, which the mask would have hidden
    assert abs(slots[1]) > 1


def test_full_batch(params, secret_key, galois_keys):
    rng = np.random.default_rng(64)
    model = random_model(6, rng)
    records = [tuple(float(v) for v in rng.uniform(0, 500, 6)) for _ in range(256)]
    slots = run_eval(params, secret_key, galois_keys, model, records, rng)
    want = np.array([oracle_linear(r, model) for r in records])
    assert np.max(np.abs(block_scores(slots, 8, 256) - want)) <= 5e-2
    off = np.ones(2048, bool)
    off[::8] = False
    assert np.max(np.abs(slots[off])) <= 5e-2


def test_sixteen_slot_blocks(params, secret_key, rng):
    model = LinearModel.with_features([0.01 * j for j in range(10)], 1.5)
    gk = ckks.galois_keygen(params, secret_key, rotation_steps(16), rng)
    records = [tuple(range(10)), tuple(range(10, 20))]
    slots = run_eval(params, secret_key, gk, model, records, rng)
    want = [oracle_linear(r, model) for r in records]
    assert np.max(np.abs(block_scores(slots, 16, 2) - want)) <= 5e-2


def test_too_many_blocks(params, secret_key, galois_keys, rng):
    ct = ckks.encrypt_symmetric(params, ckks.encode(params, [0.0]), secret_key, rng)
    with pytest.raises(TooManyRecords):
        encrypted_linear_eval(params, ct, LinearModel.appendix(), galois_keys, num_blocks=257)
