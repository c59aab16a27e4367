"""Single-process replay of the trade: seller and buyer steps 1-11 with timings."""

from __future__ import annotations

import math
import sys
import tempfile
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, TextIO

import numpy as np

from . import ckks, envelope
from .inference import (
    APPENDIX_LABELS,
    APPENDIX_RECORDS,
    LinearModel,
    block_scores,
    encode_model,
    make_mask,
    oracle_linear,
    pack_records,
    predict_label,
    rotation_steps,
)

STEPS = (
    ("1", "A", "Parameter Setting"),
    ("2", "A", "Send B parameters & data encoding format"),
    ("3", "B", "Key Generation"),
    ("4", "B", "Encode & Encrypt Test Data"),
    ("5", "B", "Send A Evaluation Keys & Encrypted Test Data"),
    ("6", "A", "Compute the ML Algorithm Homomorphically on the Encrypted Test Data"),
    ("6-1", "A", "Encode the Model Weights"),
    ("6-2", "A", "Perform Plaintext-Ciphertext Mult."),
    ("6-3", "A", "Perform Rotate-sum"),
    ("6-4", "A", "Multiply a Masking Vector to Minimize Side-information"),
    ("6-5", "A", "Flood the Result Noise"),
    ("7", "A", "Send B the Result"),
    ("8", "B", "Decrypt the Result & Check the Quality of the Model"),
    ("9", "B", "If the Quality seems Okay, Send Money to A."),
    ("10", "A", "Send the Model to B"),
    ("11", "B", "Compute the true result and check if A really gave a promised model"),
)


@dataclass
class DemoScript:
    out: TextIO = sys.stdout
    pause: Callable[[], None] = lambda: None
    timings: dict = field(default_factory=dict)
    _party: Optional[str] = None
    _index: int = 0

    def step(self, step_id: str) -> None:
        expected = STEPS[self._index][0]
        if step_id != expected:
            raise RuntimeError(f"demo step {step_id} out of order, expected {expected}")
        _, party, title = STEPS[self._index]
        self._index += 1
        self.pause()
        if party != self._party:
            self.out.write(f"\n============Company {party}============\n")
            self._party = party
        self.out.write(f"\nStep {step_id}. {title}\n\n")

    @contextmanager
    def stopwatch(self, name: str):
        start = time.perf_counter()
        yield
        ms = (time.perf_counter() - start) * 1000.0
        self.timings[name] = ms
        self.out.write(f"{name}: {ms:.0f} milliseconds\n")

    def say(self, text: str) -> None:
        self.out.write(text + "\n")


@dataclass
class DemoResult:
    decrypted: tuple[float, ...]
    true: tuple[float, ...]
    labels: tuple[int, ...]
    ok: bool
    timings: dict


def _stdin_pause() -> None:
    try:
        input()
    except EOFError:
        pass


def run_demo(
    seed: Optional[int] = None,
    workdir=None,
    flood_bits: Optional[int] = ckks.DEFAULT_FLOOD_BITS,
    tolerance: float = 0.1,
    pause: bool = False,
    out: TextIO = sys.stdout,
    params: Optional[ckks.CkksParams] = None,
) -> DemoResult:
    """Run the full demo. Raises FloodOverflow before any work if flooding cannot fit."""
    params = params or ckks.CkksParams()
    model = LinearModel.appendix()
    block = model.block_size
    nblocks = len(APPENDIX_RECORDS)
    result_scale = params.default_scale**3 / params.primes[params.max_level].q
    if flood_bits is not None:
        bound = ckks.flood_error_bound(params, result_scale, flood_bits)
        if bound > ckks.FLOOD_BUDGET:
            raise ckks.FloodOverflow(
                f"flood_bits={flood_bits} would move result slots by up to {bound:.3g} (budget {ckks.FLOOD_BUDGET:g})"
            )
    if workdir is None:
        workdir = tempfile.mkdtemp(prefix="hetrade-demo-")
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    script = DemoScript(out, _stdin_pause if pause else (lambda: None))

    script.step("1")
    script.say(f"| poly_modulus_degree: {params.degree}")
    script.say(f"| coeff_modulus size: {params.total_bits} ({' + '.join(map(str, params.prime_bit_lens))}) bits")
    script.say(f"| primes: {', '.join(str(m.q) for m in params.primes)}")
    script.say(f"| security: {params.security_level}")
    (workdir / "params.bin").write_bytes(envelope.serialize_params(params))

    script.step("2")
    script.say(f' "Input format: {{{", ".join(model.feature_names)} }}"')

    script.step("3")
    sk = ckks.keygen(params, rng)
    script.say(" Secret key is generated! ")
    with script.stopwatch(" GaloisKeys creation/save time"):
        gk = ckks.galois_keygen(params, sk, rotation_steps(block), rng)
        (workdir / "test.galk").write_bytes(envelope.serialize_galois_keys(gk))
    script.say(" Galois key is generated! ")

    script.step("4")
    script.say(f' "Test data : {", ".join("{" + ", ".join(map(str, r)) + " }" for r in APPENDIX_RECORDS)}"')
    batch = pack_records(APPENDIX_RECORDS, block, block * nblocks)
    scale = params.default_scale
    with script.stopwatch("Encoding time"):
        pt = ckks.encode(params, batch.slot_vector, scale)
    with script.stopwatch("Encryption time"):
        ct = ckks.encrypt_symmetric(params, pt, sk, rng)
        (workdir / "test.ct").write_bytes(envelope.serialize_ciphertext(ct))

    script.step("5")
    script.say(f" wrote {workdir / 'test.galk'} and {workdir / 'test.ct'}")

    script.step("6")
    ct = envelope.deserialize_ciphertext((workdir / "test.ct").read_bytes(), params)
    script.step("6-1")
    weight_pt = ckks.encode(params, encode_model(model, nblocks), scale)
    script.step("6-2")
    with script.stopwatch("Multiply-plain time"):
        ct = ckks.multiply_plain(ct, weight_pt)
    script.step("6-3")
    gk = envelope.deserialize_galois_keys((workdir / "test.galk").read_bytes(), params)
    with script.stopwatch("Sum-the-slots time"):
        for i in rotation_steps(block):
            ct = ckks.add(ct, ckks.rotate_vector(ct, i, gk))
    script.step("6-4")
    mask_pt = ckks.encode(params, make_mask(block, nblocks, block * nblocks), scale)
    ct = ckks.rescale_to_next(ckks.multiply_plain(ct, mask_pt))
    script.step("6-5")
    if flood_bits is None:
        script.say(" flooding disabled")
    else:
        ct = ckks.noise_flood(params, ct, flood_bits, rng)
        script.say(f" added Gaussian noise of std sigma*2^{flood_bits}")
    script.step("7")
    result_bytes = envelope.serialize_ciphertext(ct)
    script.say(f" result ciphertext: {len(result_bytes)} bytes")

    script.step("8")
    ct = envelope.deserialize_ciphertext(result_bytes, params)
    with script.stopwatch("Decryption time"):
        pt_result = ckks.decrypt(ct, sk)
    slots = ckks.decode(pt_result)
    decrypted = tuple(float(v) for v in block_scores(slots, block, nblocks))
    script.say(f"Results: {decrypted[0]:.6g}   &   {decrypted[1]:.6g}")
    script.say(f"True Labels: {APPENDIX_LABELS[0]}   &   {APPENDIX_LABELS[1]}")
    labels = tuple(predict_label(s) for s in decrypted)

    script.step("9")
    script.step("10")
    script.step("11")
    true = tuple(oracle_linear(r, model) for r in APPENDIX_RECORDS)
    script.say(f"Decrypted Result: {decrypted[0]:.6g}   &   {decrypted[1]:.6g}")
    script.say(f"True Result: {true[0]:.6g}   &   {true[1]:.6g}")
    ok = all(abs(a - b) <= tolerance for a, b in zip(decrypted, true)) and math.isfinite(tolerance)
    script.say(f"Predicted Labels: {labels[0]}   &   {labels[1]}")
    script.say(f"match within {tolerance:g}: {'yes' if ok else 'NO'}")
    return DemoResult(decrypted, true, labels, ok, dict(script.timings))
