from fractions import Fraction

import numpy as np
import pytest

from hetrade import ckks
from hetrade.extraction import (
    RECOVERY_TOLERANCE,
    ProtocolOracle,
    attack_linear,
    binding_defense,
    evaluate_defense,
    max_weight_error,
    probe_records,
    random_model,
)
from hetrade.inference import LinearModel
from hetrade.protocol import TradeTerms


@pytest.fixture(scope="module")
def params():
    return ckks.CkksParams()


def test_probe_layout():
    probes = probe_records(3, 100)
    assert probes == [(0, 0, 0), (100, 0, 0), (0, 100, 0), (0, 0, 100)]


def test_batched_single_query_recovers_appendix_model(params):
    model = LinearModel.appendix()
    oracle = ProtocolOracle(model, params, TradeTerms(max_queries=1, record_cap=256), seed=3)
    t = attack_linear(oracle, 6)
    assert t.succeeded and t.failure is None
    assert t.queries == 1 and t.query_cost == 1
    assert len(t.probes) == 7 == len(t.responses)
    assert max_weight_error(t.recovered, model) <= RECOVERY_TOLERANCE


def test_budget_blocks_unbatched_attack(params):
    oracle = ProtocolOracle(LinearModel.appendix(), params, TradeTerms(max_queries=4, record_cap=1), seed=4)
    t = attack_linear(oracle, 6)
    assert t.failure == "BUDGET" and t.recovered is None
    assert len(t.probes) == 4 and t.queries == 4
    assert t.query_cost == 1 + 2 + 4 + 8


def test_zero_model_recovered_as_zero(params):
    zero = LinearModel.with_features([0.0] * 6, 0.0)
    t = attack_linear(ProtocolOracle(zero, params, TradeTerms(max_queries=1), seed=5), 6)
    assert max(abs(w) for w in t.recovered.weights + (t.recovered.bias,)) <= RECOVERY_TOLERANCE


def test_partial_batches_count_as_queries(params):
    oracle = ProtocolOracle(LinearModel.appendix(), params, TradeTerms(max_queries=3, record_cap=3), seed=6)
    t = attack_linear(oracle, 6)
    assert t.queries == 3 and t.succeeded  # 3 + 3 + 1 probes
    assert t.query_cost == 7


@pytest.mark.parametrize(
    "d,k,cap,binding,loophole",
    [(6, 3, 1, "budget", False), (6, 7, 1, "budget", False), (6, 1, 256, "record_cap", True), (6, 1, 6, "budget", False), (6, 2, 4, "record_cap", True)],
)
def test_binding_defense(d, k, cap, binding, loophole):
    assert binding_defense(d, k, cap) == (binding, loophole)


def test_defense_holds_when_capacity_short(params):
    r = evaluate_defense(6, 3, 1, trials=2, rng=np.random.default_rng(0), params=params)
    assert r.successes == 0 and r.success_rate == 0.0
    assert r.mean_queries == 3 and r.mean_cost == 7


def test_defense_capacity_equal_to_d_fails(params):
    # 6 probe records for 7 unknowns: underdetermined, so the harness must fail
    r = evaluate_defense(6, 2, 3, trials=1, rng=np.random.default_rng(1), params=params)
    assert r.successes == 0


def test_defense_breaks_when_budget_generous(params):
    r = evaluate_defense(6, 7, 1, trials=1, rng=np.random.default_rng(2), params=params)
    assert r.success_rate == 1.0 and r.max_error <= RECOVERY_TOLERANCE
    assert r.mean_cost == 2**7 - 1
    assert r.binding_defense == "budget" and not r.batching_loophole


def test_both_query_interpretations(params):
    # one batched ciphertext is one query: a single query extracts the model
    per_ciphertext = evaluate_defense(6, 1, 256, trials=1, rng=np.random.default_rng(3), params=params)
    assert per_ciphertext.success_rate == 1.0 and per_ciphertext.mean_cost == 1
    assert per_ciphertext.batching_loophole and per_ciphertext.binding_defense == "record_cap"
    # one record is one query: the same budget stops it
    per_record = evaluate_defense(6, 1, 1, trials=1, rng=np.random.default_rng(3), params=params)
    assert per_record.success_rate == 0.0


def test_report_text(params):
    r = evaluate_defense(6, 1, 256, trials=1, rng=np.random.default_rng(4), params=params)
    kv = dict(line.split("=", 1) for line in r.to_text().splitlines())
    assert kv["binding_defense"] == "record_cap" and kv["batching_loophole"] == "1"
    assert kv["probe_capacity"] == "256" and kv["probes_needed"] == "7"
    assert Fraction(kv["mean_cost"]) == 1


def test_cost_under_custom_pricing(params):
    r = evaluate_defense(2, 3, 1, trials=1, rng=np.random.default_rng(5), params=params, price_base=Fraction(3), price_growth=Fraction(3, 2))
    assert r.success_rate == 1.0
    assert r.mean_cost == Fraction(3) * ((Fraction(3, 2)) ** 3 - 1) / (Fraction(3, 2) - 1)


def test_random_model_range():
    rng = np.random.default_rng(0)
    for _ in range(50):
        m = random_model(6, rng)
        assert all(abs(w) <= 0.1 for w in m.weights) and abs(m.bias) <= 10
