"""Seller/buyer state machines for trading a model under homomorphic test queries.

Message flow (A = seller, B = buyer)::

    A: announce params + encoding + terms      -> B checks security, keygens
    B: encrypted records + Galois keys         -> A scores them, floods noise
    A: encrypted scores                        -> B decrypts, checks quality
       (B may query again while the budget lasts)
    B: payment                                 -> A delivers the model
    B: rescores retained records with the delivered model and compares

Each session is single threaded. Every call validates the current state and
raises StateError for anything out of order.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from . import ckks, envelope
from .ckks import CkksParams
from .envelope import DigestMismatch
from .inference import (
    BadModel,
    BadRecordLength,
    LinearModel,
    block_scores,
    encrypted_linear_eval,
    oracle_linear,
    pack_records,
    predict_label,
    rotation_steps,
)

DEFAULT_TOLERANCE = 0.1


class ProtocolError(Exception):
    pass


class StateError(ProtocolError):
    pass


class BudgetExceeded(ProtocolError):
    pass


class RecordCapExceeded(ProtocolError):
    pass


class PriceDeclined(ProtocolError):
    pass


class SellerState(enum.Enum):
    INIT = "INIT"
    ANNOUNCED = "ANNOUNCED"
    SERVING = "SERVING"
    AWAIT_PAYMENT = "AWAIT_PAYMENT"
    DELIVERED = "DELIVERED"


class BuyerState(enum.Enum):
    AWAIT_PARAMS = "AWAIT_PARAMS"
    KEYED = "KEYED"
    QUERIED = "QUERIED"
    CHECKED = "CHECKED"
    PAID = "PAID"
    VERIFIED = "VERIFIED"


class Verdict(enum.Enum):
    HONEST = "HONEST"
    CHEATED = "CHEATED"


# operation -> states it may be called from
SELLER_ALLOWED = {
    "announce": {SellerState.INIT},
    "handle_query": {SellerState.ANNOUNCED, SellerState.AWAIT_PAYMENT},
    "deliver": {SellerState.AWAIT_PAYMENT},
}
BUYER_ALLOWED = {
    "check_params": {BuyerState.AWAIT_PARAMS},
    "prepare_query": {BuyerState.KEYED, BuyerState.CHECKED},
    "check_result": {BuyerState.QUERIED},
    "pay": {BuyerState.CHECKED},
    "verify_delivery": {BuyerState.PAID},
}


def _require(state, allowed_table, op: str) -> None:
    if state not in allowed_table[op]:
        allowed = ", ".join(sorted(s.value for s in allowed_table[op]))
        raise StateError(f"{op} not allowed in state {state.value} (needs {allowed})")


# ---------------------------------------------------------------------------
# budget and pricing


@dataclass
class QueryBudget:
    max_queries: int
    price_base: Fraction = Fraction(1)
    price_growth: Fraction = Fraction(2)
    spent: int = 0

    def __post_init__(self):
        self.price_base = Fraction(self.price_base)
        self.price_growth = Fraction(self.price_growth)
        if self.max_queries < 0:
            raise ValueError("max_queries must be non-negative")
        if self.price_growth < 1:
            raise ValueError("price_growth must be >= 1")

    def price(self, i: int) -> Fraction:
        """Charge for the (i+1)-th query."""
        return self.price_base * self.price_growth**i

    @property
    def remaining(self) -> int:
        return self.max_queries - self.spent

    def charge(self) -> Fraction:
        if self.spent >= self.max_queries:
            raise BudgetExceeded(f"all {self.max_queries} queries used")
        p = self.price(self.spent)
        self.spent += 1
        return p

    def cumulative(self, q: int) -> Fraction:
        if self.price_growth == 1:
            return self.price_base * q
        return self.price_base * (self.price_growth**q - 1) / (self.price_growth - 1)


@dataclass(frozen=True)
class TradeTerms:
    max_queries: int = 4
    record_cap: int = 256
    price_base: Fraction = Fraction(1)
    price_growth: Fraction = Fraction(2)
    model_price: Fraction = Fraction(100)

    def __post_init__(self):
        for name in ("price_base", "price_growth", "model_price"):
            object.__setattr__(self, name, Fraction(getattr(self, name)))
        if self.record_cap < 1:
            raise ValueError("record_cap must be at least 1")

    def budget(self) -> QueryBudget:
        return QueryBudget(self.max_queries, self.price_base, self.price_growth)


# ---------------------------------------------------------------------------
# messages


@dataclass(frozen=True)
class EncodingSpec:
    feature_names: tuple[str, ...]
    block_size: int
    masked: bool = True

    @property
    def galois_steps(self) -> tuple[int, ...]:
        return rotation_steps(self.block_size)


@dataclass(frozen=True)
class ParamsAnnouncement:
    params: CkksParams
    encoding: EncodingSpec
    terms: TradeTerms
    session_id: str
    digest: bytes

    def to_text(self) -> str:
        p, e, t = self.params, self.encoding, self.terms
        rows = [
            ("n", p.degree),
            ("prime_bits", ",".join(map(str, p.prime_bit_lens))),
            ("scale_log2", p.scale_log2),
            ("sigma", repr(p.sigma)),
            ("ks_base_log", p.ks_base_log),
            ("block", e.block_size),
            ("features", ",".join(e.feature_names)),
            ("mask", int(e.masked)),
            ("max_queries", t.max_queries),
            ("record_cap", t.record_cap),
            ("price_base", t.price_base),
            ("price_growth", t.price_growth),
            ("model_price", t.model_price),
            ("session", self.session_id),
            ("digest", self.digest.hex()),
        ]
        return "".join(f"{k}={v}\n" for k, v in rows)

    @classmethod
    def from_text(cls, text: str) -> "ParamsAnnouncement":
        kv = {}
        for line in text.splitlines():
            if line.strip():
                k, _, v = line.partition("=")
                kv[k.strip()] = v.strip()
        try:
            params = CkksParams(
                degree=int(kv["n"]),
                prime_bit_lens=tuple(int(b) for b in kv["prime_bits"].split(",")),
                scale_log2=int(kv["scale_log2"]),
                sigma=float(kv["sigma"]),
                ks_base_log=int(kv["ks_base_log"]),
                allow_reduced=True,
            )
            encoding = EncodingSpec(tuple(kv["features"].split(",")), int(kv["block"]), bool(int(kv["mask"])))
            terms = TradeTerms(
                int(kv["max_queries"]),
                int(kv["record_cap"]),
                Fraction(kv["price_base"]),
                Fraction(kv["price_growth"]),
                Fraction(kv["model_price"]),
            )
            digest = bytes.fromhex(kv["digest"])
            session = kv["session"]
        except (KeyError, ValueError) as exc:
            raise ProtocolError(f"malformed announcement: {exc}") from exc
        return cls(params, encoding, terms, session, digest)


@dataclass(frozen=True)
class TestQuery:
    __test__ = False  # not a pytest class

    galois_keys: bytes
    ciphertext: bytes
    record_count: int
    digest: bytes


@dataclass(frozen=True)
class EvalResult:
    ciphertext: bytes
    query_index: int
    flood_bits: int
    price: Fraction


@dataclass(frozen=True)
class Refusal:
    reason: str


@dataclass(frozen=True)
class PaymentNotice:
    amount: Fraction
    session_id: str


@dataclass(frozen=True)
class ModelDelivery:
    model: LinearModel
    session_id: str


@dataclass(frozen=True)
class CheckReport:
    scores: tuple[float, ...]
    labels: tuple[int, ...]
    accuracy: Optional[Fraction] = None


@dataclass(frozen=True)
class VerificationReport:
    deviations: tuple[float, ...]
    tolerance: float
    verdict: Verdict

    @property
    def max_deviation(self) -> float:
        return max(self.deviations, default=0.0)

    def to_text(self) -> str:
        return (
            f"verdict={self.verdict.value}\n"
            f"tolerance={self.tolerance!r}\n"
            f"max_deviation={self.max_deviation!r}\n"
            f"records={len(self.deviations)}\n"
            f"deviations={','.join(repr(d) for d in self.deviations)}\n"
        )


# ---------------------------------------------------------------------------
# wire encoding of protocol messages (envelope kind 0x05)

MSG_ANNOUNCE = 2
MSG_QUERY = 4
MSG_RESULT = 5
MSG_REFUSAL = 6
MSG_PAYMENT = 7
MSG_DELIVERY = 8
MSG_ABORT = 9


@dataclass(frozen=True)
class Abort:
    reason: str


def _blob(b: bytes) -> bytes:
    return struct.pack("<Q", len(b)) + b


def _read_blob(r: "envelope._Reader") -> bytes:
    (n,) = r.unpack("<Q")
    return r.take(n)


def encode_message(msg, digest: bytes) -> bytes:
    if isinstance(msg, ParamsAnnouncement):
        body = bytes([MSG_ANNOUNCE]) + _blob(msg.to_text().encode())
    elif isinstance(msg, TestQuery):
        body = bytes([MSG_QUERY]) + struct.pack("<I", msg.record_count) + _blob(msg.galois_keys) + _blob(msg.ciphertext)
    elif isinstance(msg, EvalResult):
        body = (
            bytes([MSG_RESULT])
            + struct.pack("<II", msg.query_index, msg.flood_bits)
            + _blob(str(msg.price).encode())
            + _blob(msg.ciphertext)
        )
    elif isinstance(msg, Refusal):
        body = bytes([MSG_REFUSAL]) + _blob(msg.reason.encode())
    elif isinstance(msg, PaymentNotice):
        body = bytes([MSG_PAYMENT]) + _blob(str(msg.amount).encode()) + _blob(msg.session_id.encode())
    elif isinstance(msg, ModelDelivery):
        body = bytes([MSG_DELIVERY]) + _blob(msg.session_id.encode()) + _blob(envelope.serialize_model(msg.model, digest))
    elif isinstance(msg, Abort):
        body = bytes([MSG_ABORT]) + _blob(msg.reason.encode())
    else:
        raise TypeError(f"not a protocol message: {type(msg).__name__}")
    return envelope.pack(envelope.KIND_MESSAGE, digest, body)


def decode_message(data: bytes, digest: Optional[bytes] = None):
    """Parse a message envelope. Pass the session digest once it is known."""
    got, payload = envelope.unpack(data, envelope.KIND_MESSAGE, digest)
    r = envelope._Reader(payload)
    (mtype,) = r.unpack("<B")
    if mtype == MSG_ANNOUNCE:
        msg = ParamsAnnouncement.from_text(_read_blob(r).decode())
        if msg.digest != got:
            raise DigestMismatch("announcement body and envelope disagree on the digest")
    elif mtype == MSG_QUERY:
        (count,) = r.unpack("<I")
        gk = _read_blob(r)
        msg = TestQuery(gk, _read_blob(r), count, got)
    elif mtype == MSG_RESULT:
        index, flood = r.unpack("<II")
        price = Fraction(_read_blob(r).decode())
        msg = EvalResult(_read_blob(r), index, flood, price)
    elif mtype == MSG_REFUSAL:
        msg = Refusal(_read_blob(r).decode())
    elif mtype == MSG_PAYMENT:
        amount = Fraction(_read_blob(r).decode())
        msg = PaymentNotice(amount, _read_blob(r).decode())
    elif mtype == MSG_DELIVERY:
        sid = _read_blob(r).decode()
        msg = ModelDelivery(envelope.deserialize_model(_read_blob(r)), sid)
    elif mtype == MSG_ABORT:
        msg = Abort(_read_blob(r).decode())
    else:
        raise ProtocolError(f"unknown message type {mtype}")
    r.done()
    return msg


# ---------------------------------------------------------------------------
# seller


@dataclass
class SellerSession:
    model: LinearModel
    params: CkksParams
    terms: TradeTerms
    rng: np.random.Generator
    flood_bits: int = ckks.DEFAULT_FLOOD_BITS
    state: SellerState = SellerState.INIT
    session_id: str = ""
    budget: QueryBudget = field(init=False)
    revenue: Fraction = Fraction(0)

    def __post_init__(self):
        self.budget = self.terms.budget()

    @property
    def encoding(self) -> EncodingSpec:
        return EncodingSpec(self.model.feature_names, self.model.block_size)


def seller_create(
    model: LinearModel,
    params: CkksParams,
    terms: TradeTerms = TradeTerms(),
    rng: Optional[np.random.Generator] = None,
    flood_bits: int = ckks.DEFAULT_FLOOD_BITS,
) -> tuple[SellerSession, ParamsAnnouncement]:
    rng = rng if rng is not None else np.random.default_rng()
    if not isinstance(model, LinearModel):
        raise BadModel("seller needs a LinearModel")
    if params.slot_count % model.block_size:
        raise BadModel(f"block size {model.block_size} does not divide {params.slot_count} slots")
    if terms.record_cap > params.slot_count // model.block_size:
        raise BadModel(f"record cap {terms.record_cap} exceeds ciphertext capacity")
    session = SellerSession(model, params, terms, rng, flood_bits)
    _require(session.state, SELLER_ALLOWED, "announce")
    session.session_id = rng.bytes(8).hex()
    session.state = SellerState.ANNOUNCED
    ann = ParamsAnnouncement(params, session.encoding, terms, session.session_id, params.digest)
    return session, ann


def seller_handle_query(session: SellerSession, query: TestQuery) -> EvalResult:
    _require(session.state, SELLER_ALLOWED, "handle_query")
    if query.digest != session.params.digest:
        raise DigestMismatch("query was prepared under different parameters")
    if session.budget.remaining <= 0:
        raise BudgetExceeded(f"query limit of {session.budget.max_queries} reached")
    if query.record_count < 1:
        raise BadRecordLength("a query must carry at least one record")
    if query.record_count > session.terms.record_cap:
        raise RecordCapExceeded(f"{query.record_count} records exceed the cap of {session.terms.record_cap}")
    params = session.params
    ct = envelope.deserialize_ciphertext(query.ciphertext, params)
    gk = envelope.deserialize_galois_keys(query.galois_keys, params)
    previous = session.state
    session.state = SellerState.SERVING
    try:
        # the mask only exposes the declared blocks, so understating the count gains nothing
        out = encrypted_linear_eval(params, ct, session.model, gk, num_blocks=query.record_count)
        out = ckks.noise_flood(params, out, session.flood_bits, session.rng)
    except Exception:
        session.state = previous
        raise
    price = session.budget.charge()
    session.revenue += price
    session.state = SellerState.AWAIT_PAYMENT
    return EvalResult(envelope.serialize_ciphertext(out), session.budget.spent, session.flood_bits, price)


def seller_deliver(
    session: SellerSession,
    notice: PaymentNotice,
    delivered_model: Optional[LinearModel] = None,
) -> ModelDelivery:
    """Release the model after payment. `delivered_model` lets tests stage a dishonest seller."""
    _require(session.state, SELLER_ALLOWED, "deliver")
    if notice.session_id != session.session_id:
        raise ProtocolError("payment is for another session")
    if notice.amount < session.terms.model_price:
        raise ProtocolError(f"payment {notice.amount} below the price {session.terms.model_price}")
    session.revenue += notice.amount
    session.state = SellerState.DELIVERED
    return ModelDelivery(delivered_model or session.model, session.session_id)


# ---------------------------------------------------------------------------
# buyer


@dataclass(frozen=True)
class ParamsVerdict:
    accepted: bool
    security: str
    reason: str


def check_security(params: CkksParams, policy: str = "standard") -> ParamsVerdict:
    if policy not in ("standard", "reduced-ok"):
        raise ValueError(f"unknown security policy {policy!r}")
    limit = ckks.SECURITY_TABLE.get(params.degree)
    if params.security_level == "standard":
        return ParamsVerdict(True, "standard", f"{params.total_bits} bits <= {limit} at N={params.degree}")
    reason = f"{params.total_bits} modulus bits exceed the 128-bit limit {limit} at N={params.degree}"
    if policy == "reduced-ok":
        return ParamsVerdict(True, "reduced", reason + " (reduced security accepted by policy)")
    return ParamsVerdict(False, "reduced", reason)


@dataclass
class BuyerSession:
    rng: np.random.Generator
    policy: str = "standard"
    max_price: Optional[Fraction] = None
    state: BuyerState = BuyerState.AWAIT_PARAMS
    announcement: Optional[ParamsAnnouncement] = None
    secret_key: Optional[ckks.SecretKey] = None
    galois_keys: Optional[bytes] = None
    queries_sent: int = 0
    amount_paid: Fraction = Fraction(0)
    pending_records: tuple = ()
    records: list = field(default_factory=list)
    scores: list = field(default_factory=list)

    @property
    def params(self) -> CkksParams:
        return self.announcement.params

    @property
    def digest(self) -> bytes:
        return self.announcement.digest

    def next_query_price(self) -> Fraction:
        t = self.announcement.terms
        return t.price_base * t.price_growth**self.queries_sent


def buyer_create(rng=None, policy: str = "standard", max_price=None) -> BuyerSession:
    rng = rng if rng is not None else np.random.default_rng()
    return BuyerSession(rng, policy, None if max_price is None else Fraction(max_price))


def buyer_check_params(session: BuyerSession, ann: ParamsAnnouncement) -> ParamsVerdict:
    """Vet the announced parameters and, if acceptable, generate the secret key."""
    _require(session.state, BUYER_ALLOWED, "check_params")
    if ann.digest != ann.params.digest:
        raise DigestMismatch("announced digest does not match the announced parameters")
    if ann.encoding.block_size < len(ann.encoding.feature_names) + 2:
        raise ProtocolError("encoding block too small for the announced features")
    verdict = check_security(ann.params, session.policy)
    if verdict.accepted:
        session.announcement = ann
        session.secret_key = ckks.keygen(ann.params, session.rng)
        session.state = BuyerState.KEYED
    return verdict


def buyer_prepare_query(session: BuyerSession, records: Sequence[Sequence[float]]) -> TestQuery:
    _require(session.state, BUYER_ALLOWED, "prepare_query")
    enc, terms = session.announcement.encoding, session.announcement.terms
    if not records:
        raise BadRecordLength("no records to query")
    if len(records) > terms.record_cap:
        raise RecordCapExceeded(f"{len(records)} records exceed the cap of {terms.record_cap}")
    if session.queries_sent >= terms.max_queries:
        raise BudgetExceeded(f"the seller allows only {terms.max_queries} queries")
    price = session.next_query_price()
    if session.max_price is not None and price > session.max_price:
        raise PriceDeclined(f"query price {price} above the limit {session.max_price}")
    params = session.params
    batch = pack_records(records, enc.block_size, params.slot_count, len(enc.feature_names))
    pt = ckks.encode(params, batch.slot_vector)
    ct = ckks.encrypt_symmetric(params, pt, session.secret_key, session.rng)
    if session.galois_keys is None:
        gk = ckks.galois_keygen(params, session.secret_key, enc.galois_steps, session.rng)
        session.galois_keys = envelope.serialize_galois_keys(gk)
    session.pending_records = batch.records
    session.queries_sent += 1
    session.state = BuyerState.QUERIED
    return TestQuery(session.galois_keys, envelope.serialize_ciphertext(ct), len(batch.records), params.digest)


def buyer_check_result(
    session: BuyerSession,
    result: EvalResult,
    expected_labels: Optional[Sequence[int]] = None,
) -> CheckReport:
    _require(session.state, BUYER_ALLOWED, "check_result")
    ct = envelope.deserialize_ciphertext(result.ciphertext, session.params)
    slots = ckks.decode(ckks.decrypt(ct, session.secret_key))
    count = len(session.pending_records)
    scores = tuple(float(s) for s in block_scores(slots, session.announcement.encoding.block_size, count))
    labels = tuple(predict_label(s) for s in scores)
    accuracy = None
    if expected_labels is not None:
        if len(expected_labels) != count:
            raise BadRecordLength(f"{len(expected_labels)} labels for {count} records")
        accuracy = Fraction(sum(int(a == b) for a, b in zip(labels, expected_labels)), count)
    session.records.extend(session.pending_records)
    session.scores.extend(scores)
    session.pending_records = ()
    session.amount_paid += result.price
    session.state = BuyerState.CHECKED
    return CheckReport(scores, labels, accuracy)


def buyer_pay(session: BuyerSession) -> PaymentNotice:
    _require(session.state, BUYER_ALLOWED, "pay")
    amount = session.announcement.terms.model_price
    session.amount_paid += amount
    session.state = BuyerState.PAID
    return PaymentNotice(amount, session.announcement.session_id)


def buyer_verify_delivery(
    session: BuyerSession,
    delivery: ModelDelivery,
    tolerance: float = DEFAULT_TOLERANCE,
) -> VerificationReport:
    """Rescore the retained records with the delivered model and compare."""
    _require(session.state, BUYER_ALLOWED, "verify_delivery")
    if not (math.isfinite(tolerance) and tolerance > 0):
        raise ValueError(f"tolerance must be finite and positive, got {tolerance}")
    if delivery.session_id != session.announcement.session_id:
        raise ProtocolError("delivery belongs to another session")
    model = delivery.model
    if model.feature_names != session.announcement.encoding.feature_names:
        deviations = tuple(math.inf for _ in session.scores)
    else:
        deviations = tuple(abs(s - oracle_linear(r, model)) for r, s in zip(session.records, session.scores))
    verdict = Verdict.HONEST if max(deviations, default=0.0) <= tolerance else Verdict.CHEATED
    session.state = BuyerState.VERIFIED
    return VerificationReport(deviations, tolerance, verdict)


# ---------------------------------------------------------------------------
# compatibility criteria


class ModelKind(enum.Enum):
    LINEAR = "LINEAR"
    MULTICLASS = "MULTICLASS"
    NEURAL = "NEURAL"


@dataclass(frozen=True)
class CompatibilityVerdict:
    passed: bool
    ratio: float
    required: int
    margin: float


def compatible_check(d: int, k: int, kind: ModelKind = ModelKind.LINEAR, c: int = 1, margin: float = 1.0) -> CompatibilityVerdict:
    """Is the model large enough that k queries cannot pin it down?

    `ratio` is d over the extraction threshold (k+1, c(k+1) or 100k); the
    check passes when it strictly exceeds `margin`.
    """
    if kind is ModelKind.LINEAR:
        required = k + 1
    elif kind is ModelKind.MULTICLASS:
        required = c * (k + 1)
    else:
        required = 100 * k
    ratio = d / required if required else math.inf
    return CompatibilityVerdict(ratio > margin, ratio, required, margin)
