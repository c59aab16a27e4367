"""Command line entry points: ``demo``, ``seller``, ``buyer``, ``extraction``.

Exit codes: 0 ok, 2 protocol violation, 3 verification CHEATED, 4 transport,
5 config, 6 declined by policy. Every failure prints one line to stderr that
starts with an upper-case reason tag followed by a colon.
"""

from __future__ import annotations

import argparse
import csv
import sys
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import ckks, envelope, extraction, protocol
from .demo import run_demo
from .inference import APPENDIX_LABELS, APPENDIX_RECORDS, InferenceError, LinearModel
from .protocol import (
    Abort,
    EvalResult,
    ModelDelivery,
    ParamsAnnouncement,
    PaymentNotice,
    Refusal,
    TestQuery,
    Verdict,
)
from .transport import DEFAULT_TIMEOUT, DirTransport, SocketTransport, TransportError, parse_address

EXIT_OK = 0
EXIT_PROTOCOL = 2
EXIT_CHEATED = 3
EXIT_TRANSPORT = 4
EXIT_CONFIG = 5
EXIT_DECLINED = 6


class Failure(Exception):
    def __init__(self, code: int, tag: str, message: str):
        super().__init__(message)
        self.code = code
        self.tag = tag


def _fail(code: int, tag: str, message: str) -> Failure:
    return Failure(code, tag, message)


def _classify(exc: BaseException, step: str) -> Failure:
    where = f"step {step}: " if step else ""
    name = type(exc).__name__
    if isinstance(exc, Failure):
        return exc
    if isinstance(exc, (TransportError, TimeoutError, ConnectionError)):
        return _fail(EXIT_TRANSPORT, "TRANSPORT_ERROR", f"{where}{exc}")
    if isinstance(exc, (ckks.FloodOverflow, ckks.InsecureParams, InferenceError, ValueError, OSError)):
        return _fail(EXIT_CONFIG, "CONFIG_ERROR", f"{where}{name}: {exc}")
    if isinstance(exc, (protocol.ProtocolError, envelope.EnvelopeError, ckks.CkksError)):
        return _fail(EXIT_PROTOCOL, "PROTOCOL_VIOLATION", f"{where}{name}: {exc}")
    return _fail(EXIT_PROTOCOL, "PROTOCOL_VIOLATION", f"{where}{name}: {exc}")


# ---------------------------------------------------------------------------


def _open_transport(args, role: str):
    t = _connect_transport(args, role)
    if args.transcript:
        t.record_dir = Path(args.transcript)
        t.record_dir.mkdir(parents=True, exist_ok=True)
    return t


def _connect_transport(args, role: str):
    if args.dir:
        t = DirTransport(args.dir, timeout=args.timeout)
        if role == "seller" and t.has_messages():
            raise _fail(EXIT_CONFIG, "CONFIG_ERROR", f"{args.dir} already holds msg-* files; use a fresh directory")
        return t
    if role == "seller":
        if not args.listen:
            raise _fail(EXIT_CONFIG, "CONFIG_ERROR", "seller needs --dir or --listen")
        host, port = parse_address(args.listen)
        return SocketTransport.listen(host, port, args.timeout, ready_file=args.port_file)
    if not args.connect:
        raise _fail(EXIT_CONFIG, "CONFIG_ERROR", "buyer needs --dir or --connect")
    host, port = parse_address(args.connect)
    return SocketTransport.connect(host, port, args.timeout)


def _params_from_args(args) -> ckks.CkksParams:
    bits = tuple(int(b) for b in args.prime_bits.split(","))
    return ckks.CkksParams(args.degree, bits, args.scale_log2, allow_reduced=args.security == "reduced-ok")


def seller_main(args) -> int:
    step = "1"
    transport = None
    try:
        params = _params_from_args(args)
        model = LinearModel.appendix()
        if args.model:
            model = LinearModel.from_text(Path(args.model).read_text())
        result_scale = params.default_scale**3 / params.primes[params.max_level].q
        bound = ckks.flood_error_bound(params, result_scale, args.flood_bits)
        if bound > ckks.FLOOD_BUDGET:
            raise ckks.FloodOverflow(f"flood_bits={args.flood_bits} moves result slots by up to {bound:.3g}")
        terms = protocol.TradeTerms(
            args.queries, args.record_cap, Fraction(args.price_base), Fraction(args.price_growth), Fraction(args.model_price)
        )
        rng = np.random.default_rng(args.seed)
        session, ann = protocol.seller_create(model, params, terms, rng=rng, flood_bits=args.flood_bits)
        transport = _open_transport(args, "seller")
        step = "2"
        transport.send("msg-02-params", protocol.encode_message(ann, ann.digest))
        print(f"announced session {ann.session_id}: N={params.degree} bits={list(params.prime_bit_lens)} k={terms.max_queries}")
        while True:
            step = "4"
            _, raw = transport.recv()
            msg = protocol.decode_message(raw, ann.digest)
            if isinstance(msg, TestQuery):
                step = "5"
                try:
                    res = protocol.seller_handle_query(session, msg)
                except (protocol.BudgetExceeded, protocol.RecordCapExceeded) as exc:
                    print(f"refused query: {exc}")
                    transport.send(f"msg-05-refusal-{session.budget.spent + 1}", protocol.encode_message(Refusal(str(exc)), ann.digest))
                    continue
                transport.send(f"msg-05-result-{res.query_index}", protocol.encode_message(res, ann.digest))
                print(f"served query {res.query_index} ({msg.record_count} records) for {res.price}")
            elif isinstance(msg, PaymentNotice):
                step = "8"
                delivered = model.perturbed(0, args.cheat) if args.cheat else None
                delivery = protocol.seller_deliver(session, msg, delivered)
                transport.send("msg-08-delivery", protocol.encode_message(delivery, ann.digest))
                print(f"payment {msg.amount} received; model delivered{' (perturbed)' if args.cheat else ''}")
                return EXIT_OK
            elif isinstance(msg, Abort):
                raise _fail(EXIT_DECLINED, "DECLINED", f"buyer aborted: {msg.reason}")
            else:
                raise protocol.StateError(f"unexpected {type(msg).__name__} from buyer")
    except BaseException as exc:  # noqa: BLE001 - every path must map to an exit code
        if isinstance(exc, KeyboardInterrupt):
            raise
        f = _classify(exc, step)
        print(f"{f.tag}: {f}", file=sys.stderr)
        return f.code
    finally:
        if transport is not None:
            transport.close()


def _load_records(path: Optional[str]):
    if not path:
        return [list(r) for r in APPENDIX_RECORDS], list(APPENDIX_LABELS)
    records, labels = [], []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            records.append([float(v) for v in row[:-1]])
            labels.append(int(row[-1]))
    return records, labels


def buyer_main(args) -> int:
    step = "2"
    transport = None
    try:
        if not args.tolerance > 0 or args.tolerance == float("inf"):
            raise ValueError(f"--tolerance must be finite and positive, got {args.tolerance}")
        records, labels = _load_records(args.records)
        max_price = Fraction(args.max_price) if args.max_price is not None else None
        session = protocol.buyer_create(np.random.default_rng(args.seed), args.security, max_price)
        transport = _open_transport(args, "buyer")
        _, raw = transport.recv()
        ann = protocol.decode_message(raw)
        if not isinstance(ann, ParamsAnnouncement):
            raise protocol.StateError(f"expected parameters, got {type(ann).__name__}")
        step = "3"
        verdict = protocol.buyer_check_params(session, ann)
        print(f"params: {verdict.security} ({verdict.reason})")
        if not verdict.accepted:
            transport.send("msg-03-abort", protocol.encode_message(Abort(verdict.reason), ann.digest))
            raise _fail(EXIT_DECLINED, "DECLINED", f"insufficient security: {verdict.reason}")
        step = "4"
        try:
            query = protocol.buyer_prepare_query(session, records)
        except Exception as exc:
            transport.send("msg-04-abort", protocol.encode_message(Abort(str(exc)), ann.digest))
            if isinstance(exc, protocol.PriceDeclined):
                raise _fail(EXIT_DECLINED, "DECLINED", str(exc)) from None
            raise
        transport.send(f"msg-04-query-{session.queries_sent}", protocol.encode_message(query, ann.digest))
        _, raw = transport.recv()
        res = protocol.decode_message(raw, ann.digest)
        step = "6"
        if isinstance(res, Refusal):
            raise protocol.BudgetExceeded(f"seller refused the query: {res.reason}")
        if not isinstance(res, EvalResult):
            raise protocol.StateError(f"expected a result, got {type(res).__name__}")
        report = protocol.buyer_check_result(session, res, labels)
        print("scores: " + ", ".join(f"{s:.4f}" for s in report.scores))
        print("labels: " + ", ".join(map(str, report.labels)) + f"  (expected {', '.join(map(str, labels))})")
        print(f"accuracy: {report.accuracy}  query price: {res.price}")
        step = "7"
        notice = protocol.buyer_pay(session)
        transport.send("msg-07-payment", protocol.encode_message(notice, ann.digest))
        _, raw = transport.recv()
        delivery = protocol.decode_message(raw, ann.digest)
        step = "9"
        if not isinstance(delivery, ModelDelivery):
            raise protocol.StateError(f"expected the model, got {type(delivery).__name__}")
        vr = protocol.buyer_verify_delivery(session, delivery, args.tolerance)
        text = vr.to_text()
        sys.stdout.write(text)
        if args.report:
            Path(args.report).write_text(text)
        if vr.verdict is Verdict.CHEATED:
            print(f"CHEATED: max deviation {vr.max_deviation:.4f} exceeds tolerance {vr.tolerance:g}", file=sys.stderr)
            return EXIT_CHEATED
        return EXIT_OK
    except BaseException as exc:  # noqa: BLE001
        if isinstance(exc, KeyboardInterrupt):
            raise
        f = _classify(exc, step)
        print(f"{f.tag}: {f}", file=sys.stderr)
        return f.code
    finally:
        if transport is not None:
            transport.close()


def demo_main(args) -> int:
    try:
        if not (args.tolerance > 0 and args.tolerance != float("inf")):
            raise ValueError("--tolerance must be finite and positive")
        flood = None if args.no_flood else args.flood_bits
        result = run_demo(args.seed, args.workdir, flood, args.tolerance, pause=not args.no_pause)
    except BaseException as exc:  # noqa: BLE001
        if isinstance(exc, KeyboardInterrupt):
            raise
        f = _classify(exc, "")
        print(f"{f.tag}: {f}", file=sys.stderr)
        return f.code
    if not result.ok:
        print(f"MISMATCH: decrypted {result.decrypted} vs true {result.true}", file=sys.stderr)
        return EXIT_PROTOCOL
    return EXIT_OK


def extraction_main(args) -> int:
    try:
        report = extraction.evaluate_defense(
            args.features, args.queries, args.record_cap, args.trials, np.random.default_rng(args.seed),
            price_base=Fraction(args.price_base), price_growth=Fraction(args.price_growth),
        )
    except BaseException as exc:  # noqa: BLE001
        if isinstance(exc, KeyboardInterrupt):
            raise
        f = _classify(exc, "")
        print(f"{f.tag}: {f}", file=sys.stderr)
        return f.code
    text = report.to_text()
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--timeout", type=float, default=DEFAULT_TIMEOUT)
    p.add_argument("--security", choices=("standard", "reduced-ok"), default="standard")
    p.add_argument("--tolerance", type=float, default=protocol.DEFAULT_TOLERANCE)
    p.add_argument("--dir", help="exchange envelopes as files in this directory")
    p.add_argument("--transcript", help="also save every envelope this side sends into this directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetrade", description="Model trading over homomorphic test queries")
    sub = parser.add_subparsers(dest="command", required=True)

    d = sub.add_parser("demo", help="replay the whole trade in one process")
    d.add_argument("--seed", type=int, default=None)
    d.add_argument("--workdir", default=None)
    d.add_argument("--flood-bits", type=int, default=ckks.DEFAULT_FLOOD_BITS)
    d.add_argument("--no-flood", action="store_true")
    d.add_argument("--tolerance", type=float, default=protocol.DEFAULT_TOLERANCE)
    d.add_argument("--no-pause", action="store_true")
    d.set_defaults(func=demo_main)

    s = sub.add_parser("seller", help="company A: announce, serve queries, deliver")
    _add_common(s)
    s.add_argument("--listen", help="HOST:PORT to accept the buyer on")
    s.add_argument("--port-file", help="write the bound port here once listening")
    s.add_argument("--queries", type=int, default=4)
    s.add_argument("--record-cap", type=int, default=256)
    s.add_argument("--flood-bits", type=int, default=ckks.DEFAULT_FLOOD_BITS)
    s.add_argument("--cheat", type=float, default=0.0, help="add this to the first delivered weight")
    s.add_argument("--model", help="model text file (feature/bias lines)")
    s.add_argument("--degree", type=int, default=4096)
    s.add_argument("--prime-bits", default="37,37,35")
    s.add_argument("--scale-log2", type=int, default=20)
    s.add_argument("--price-base", default="1")
    s.add_argument("--price-growth", default="2")
    s.add_argument("--model-price", default="100")
    s.add_argument("--no-pause", action="store_true", help="accepted for symmetry; the seller never pauses")
    s.set_defaults(func=seller_main)

    b = sub.add_parser("buyer", help="company B: vet params, query, pay, verify")
    _add_common(b)
    b.add_argument("--connect", help="HOST:PORT of the seller")
    b.add_argument("--max-price", default=None, help="refuse queries priced above this")
    b.add_argument("--records", help="CSV of feature values with the label in the last column")
    b.add_argument("--report", help="write the verification report here")
    b.add_argument("--no-pause", action="store_true", help="accepted for symmetry; the buyer never pauses")
    b.set_defaults(func=buyer_main)

    x = sub.add_parser("extraction", help="run the equation-solving attack against the query limits")
    x.add_argument("--features", type=int, default=6)
    x.add_argument("--queries", type=int, default=4)
    x.add_argument("--record-cap", type=int, default=1)
    x.add_argument("--trials", type=int, default=5)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--price-base", default="1")
    x.add_argument("--price-growth", default="2")
    x.add_argument("--out", help="also write the key=value report here")
    x.set_defaults(func=extraction_main)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
