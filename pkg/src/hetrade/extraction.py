"""Equation-solving extraction of a linear model through legitimate test queries.

The attacker sends the zero record (its score is the bias) and scaled unit
records ``probe_scale * e_j`` (score minus bias, divided by the scale, is
``w_j``). That is d+1 probe records, so the seller's defences hold exactly
when the total probe capacity ``max_queries * record_cap`` is at most d.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from . import protocol
from .ckks import CkksParams
from .inference import LinearModel
from .protocol import BudgetExceeded, TradeTerms

RECOVERY_TOLERANCE = 2e-2
DEFAULT_PROBE_SCALE = 100.0


class ProtocolOracle:
    """Runs each batch of records through a full buyer/seller round trip."""

    def __init__(self, model: LinearModel, params: CkksParams, terms: TradeTerms, seed: int = 0, flood_bits: Optional[int] = None):
        rng = np.random.default_rng(seed)
        kwargs = {} if flood_bits is None else {"flood_bits": flood_bits}
        self.seller, ann = protocol.seller_create(model, params, terms, rng=rng, **kwargs)
        self.buyer = protocol.buyer_create(rng=np.random.default_rng(seed + 1))
        verdict = protocol.buyer_check_params(self.buyer, ann)
        if not verdict.accepted:
            raise protocol.ProtocolError(verdict.reason)
        self.record_cap = terms.record_cap
        self.cost = Fraction(0)
        self.queries = 0

    def __call__(self, records: Sequence[Sequence[float]]) -> list[float]:
        query = protocol.buyer_prepare_query(self.buyer, records)
        result = protocol.seller_handle_query(self.seller, query)
        report = protocol.buyer_check_result(self.buyer, result)
        self.cost += result.price
        self.queries += 1
        return list(report.scores)


@dataclass
class AttackTranscript:
    probes: list = field(default_factory=list)
    responses: list = field(default_factory=list)
    recovered: Optional[LinearModel] = None
    failure: Optional[str] = None
    query_cost: Fraction = Fraction(0)
    queries: int = 0

    @property
    def succeeded(self) -> bool:
        return self.recovered is not None


def probe_records(d: int, probe_scale: float = DEFAULT_PROBE_SCALE) -> list[tuple[float, ...]]:
    probes = [tuple(0.0 for _ in range(d))]
    for j in range(d):
        probes.append(tuple(probe_scale if i == j else 0.0 for i in range(d)))
    return probes


def attack_linear(oracle: ProtocolOracle, d: int, probe_scale: float = DEFAULT_PROBE_SCALE) -> AttackTranscript:
    """Solve for bias and weights with d+1 probes, batching up to the record cap."""
    transcript = AttackTranscript()
    pending = probe_records(d, probe_scale)
    cap = max(1, oracle.record_cap)
    while pending:
        batch, rest = pending[:cap], pending[cap:]
        try:
            scores = oracle(batch)
        except BudgetExceeded:
            transcript.failure = "BUDGET"
            break
        transcript.probes.extend(batch)
        transcript.responses.extend(scores)
        pending = rest
    transcript.query_cost = oracle.cost
    transcript.queries = oracle.queries
    if transcript.failure is None:
        bias = transcript.responses[0]
        weights = [(s - bias) / probe_scale for s in transcript.responses[1 : d + 1]]
        transcript.recovered = LinearModel.with_features(weights, bias)
    return transcript


def max_weight_error(a: LinearModel, b: LinearModel) -> float:
    return float(np.max(np.abs(np.array(a.weights + (a.bias,)) - np.array(b.weights + (b.bias,)))))


def random_model(d: int, rng: np.random.Generator) -> LinearModel:
    """Weights and bias on the same order as the demo health-score model."""
    return LinearModel.with_features(rng.uniform(-0.1, 0.1, d).round(4), round(float(rng.uniform(-10, 10)), 3))


@dataclass
class DefenseReport:
    d: int
    max_queries: int
    record_cap: int
    trials: int
    successes: int
    mean_queries: float
    mean_cost: Fraction
    max_error: float
    binding_defense: str
    batching_loophole: bool

    @property
    def success_rate(self) -> float:
        return self.successes / self.trials if self.trials else 0.0

    @property
    def capacity(self) -> int:
        return self.max_queries * self.record_cap

    def to_text(self) -> str:
        rows = [
            ("d", self.d),
            ("max_queries", self.max_queries),
            ("record_cap", self.record_cap),
            ("probe_capacity", self.capacity),
            ("probes_needed", self.d + 1),
            ("trials", self.trials),
            ("successes", self.successes),
            ("success_rate", repr(self.success_rate)),
            ("mean_queries", repr(self.mean_queries)),
            ("mean_cost", self.mean_cost),
            ("max_weight_error", repr(self.max_error)),
            ("binding_defense", self.binding_defense),
            ("batching_loophole", int(self.batching_loophole)),
        ]
        return "".join(f"{k}={v}\n" for k, v in rows)


def binding_defense(d: int, k: int, record_cap: int) -> tuple[str, bool]:
    """Which limit decides the outcome, and whether batching defeats the query budget.

    When k alone would stop the attack but k * record_cap does not, the
    record cap is the binding defence and the batching loophole is open.
    """
    loophole = k < d + 1 <= k * record_cap
    return ("record_cap", True) if loophole else ("budget", False)


def evaluate_defense(
    d: int,
    k: int,
    record_cap: int,
    trials: int,
    rng: np.random.Generator,
    params: Optional[CkksParams] = None,
    price_base: Fraction = Fraction(1),
    price_growth: Fraction = Fraction(2),
    probe_scale: float = DEFAULT_PROBE_SCALE,
) -> DefenseReport:
    params = params or CkksParams()
    terms = TradeTerms(max_queries=k, record_cap=record_cap, price_base=price_base, price_growth=price_growth)
    successes, total_q, total_cost, worst = 0, 0, Fraction(0), 0.0
    for _ in range(trials):
        model = random_model(d, rng)
        oracle = ProtocolOracle(model, params, terms, seed=int(rng.integers(2**31)))
        t = attack_linear(oracle, d, probe_scale)
        total_q += t.queries
        total_cost += t.query_cost
        if t.succeeded:
            err = max_weight_error(t.recovered, model)
            worst = max(worst, err)
            successes += err <= RECOVERY_TOLERANCE
    binding, loophole = binding_defense(d, k, record_cap)
    return DefenseReport(
        d, k, record_cap, trials, successes,
        total_q / trials if trials else 0.0,
        total_cost / trials if trials else Fraction(0),
        worst, binding, loophole,
    )
