"""Encrypted linear scoring with block packing and rotate-sum.

Each record occupies one power-of-two block of slots laid out as
``[x_1 .. x_d, 1, 0 ...]``; the model is laid out the same way as
``[w_1 .. w_d, bias, 0 ...]`` so one slotwise product followed by a
block-wide rotate-sum leaves ``w.x + bias`` in the first slot of every block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ckks
from .ckks import Ciphertext, CkksParams, GaloisKeys

DEFAULT_FEATURES = ("age", "sys", "dia", "cholesterol", "height", "weight")
DEFAULT_BLOCK = 8

# demo data: two health records, a logistic-regression score model, labels
APPENDIX_RECORDS = ((25, 120, 80, 156, 67, 136), (56, 141, 100, 428, 65, 171))
APPENDIX_WEIGHTS = (0.072, 0.013, -0.029, 0.008, -0.053, 0.021)
APPENDIX_BIAS = -5.329
APPENDIX_LABELS = (0, 1)


class InferenceError(Exception):
    pass


class BadModel(InferenceError):
    pass


class TooManyRecords(InferenceError):
    pass


class BadRecordLength(InferenceError):
    pass


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def block_size_for(num_features: int) -> int:
    """Smallest power of two with room for the features, the constant slot and a pad."""
    return 1 << math.ceil(math.log2(num_features + 2))


@dataclass(frozen=True)
class LinearModel:
    weights: tuple[float, ...]
    bias: float
    feature_names: tuple[str, ...] = DEFAULT_FEATURES
    block_size: int = DEFAULT_BLOCK

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "bias", float(self.bias))
        if len(self.feature_names) != len(self.weights):
            raise BadModel(f"{len(self.weights)} weights for {len(self.feature_names)} features")
        if not _is_power_of_two(self.block_size):
            raise BadModel(f"block size {self.block_size} is not a power of two")
        if self.block_size < len(self.weights) + 2:
            raise BadModel(f"block size {self.block_size} too small for {len(self.weights)} features")
        if not all(math.isfinite(w) for w in self.weights + (self.bias,)):
            raise BadModel("non-finite model coefficient")
        for name in self.feature_names:
            if not name or any(ch.isspace() for ch in name):
                raise BadModel(f"bad feature name {name!r}")

    @property
    def num_features(self) -> int:
        return len(self.weights)

    @classmethod
    def appendix(cls) -> "LinearModel":
        return cls(APPENDIX_WEIGHTS, APPENDIX_BIAS)

    @classmethod
    def with_features(cls, weights: Sequence[float], bias: float, block_size: Optional[int] = None) -> "LinearModel":
        d = len(weights)
        names = DEFAULT_FEATURES if d == len(DEFAULT_FEATURES) else tuple(f"x{j}" for j in range(d))
        return cls(tuple(weights), bias, names, block_size or block_size_for(d))

    def perturbed(self, index: int, delta: float) -> "LinearModel":
        w = list(self.weights)
        w[index] += delta
        return LinearModel(tuple(w), self.bias, self.feature_names, self.block_size)

    def to_text(self) -> str:
        lines = [f"feature {n} {w!r}" for n, w in zip(self.feature_names, self.weights)]
        lines.append(f"bias {self.bias!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, block_size: Optional[int] = None) -> "LinearModel":
        names, weights, bias = [], [], None
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                if parts[0] == "feature" and len(parts) == 3 and bias is None:
                    names.append(parts[1])
                    weights.append(float(parts[2]))
                    continue
                if parts[0] == "bias" and len(parts) == 2 and bias is None:
                    bias = float(parts[1])
                    continue
            except ValueError:
                pass
            raise BadModel(f"line {lineno}: cannot parse {raw!r}")
        if bias is None or not weights:
            raise BadModel("model text needs feature lines followed by a bias line")
        return cls(tuple(weights), bias, tuple(names), block_size or block_size_for(len(weights)))


@dataclass(frozen=True)
class PackedBatch:
    records: tuple[tuple[float, ...], ...]
    block_size: int
    slot_vector: np.ndarray

    @property
    def num_records(self) -> int:
        return len(self.records)


def pack_records(
    records: Sequence[Sequence[float]],
    block_size: int,
    slot_count: int,
    num_features: Optional[int] = None,
) -> PackedBatch:
    records = tuple(tuple(float(v) for v in r) for r in records)
    d = num_features if num_features is not None else (len(records[0]) if records else 0)
    if block_size < d + 2 or not _is_power_of_two(block_size):
        raise BadRecordLength(f"block size {block_size} cannot hold {d} features")
    if len(records) > slot_count // block_size:
        raise TooManyRecords(f"{len(records)} records exceed {slot_count // block_size} blocks")
    vec = np.zeros(slot_count)
    for b, rec in enumerate(records):
        if len(rec) != d:
            raise BadRecordLength(f"record {b} has {len(rec)} values, expected {d}")
        base = b * block_size
        vec[base : base + d] = rec
        vec[base + d] = 1.0
    return PackedBatch(records, block_size, vec)


def encode_model(model: LinearModel, num_blocks: int) -> np.ndarray:
    block = np.zeros(model.block_size)
    block[: model.num_features] = model.weights
    block[model.num_features] = model.bias
    return np.tile(block, num_blocks)


def make_mask(block_size: int, num_blocks: int, slot_count: int) -> np.ndarray:
    if num_blocks * block_size > slot_count:
        raise TooManyRecords(f"{num_blocks} blocks of {block_size} exceed {slot_count} slots")
    mask = np.zeros(slot_count)
    mask[: num_blocks * block_size : block_size] = 1.0
    return mask


def rotation_steps(block_size: int) -> tuple[int, ...]:
    """Doubling schedule 1, 2, 4, ..., block_size/2."""
    steps, i = [], 1
    while i < block_size:
        steps.append(i)
        i <<= 1
    return tuple(steps)


def rotate_sum_plain(vec: np.ndarray, block_size: int) -> np.ndarray:
    """Plaintext replay of the rotate-and-add schedule (left rotations, wrapping)."""
    out = np.asarray(vec, dtype=np.float64)
    for i in rotation_steps(block_size):
        out = out + np.roll(out, -i)
    return out


def encrypted_linear_eval(
    params: CkksParams,
    ct: Ciphertext,
    model: LinearModel,
    gk: GaloisKeys,
    num_blocks: Optional[int] = None,
    use_mask: bool = True,
) -> Ciphertext:
    """Score every packed record: multiply, rotate-sum, mask, rescale once."""
    capacity = params.slot_count // model.block_size
    num_blocks = capacity if num_blocks is None else num_blocks
    if not 0 <= num_blocks <= capacity:
        raise TooManyRecords(f"{num_blocks} blocks exceed capacity {capacity}")
    weights = ckks.encode(params, encode_model(model, num_blocks), level=ct.level)
    acc = ckks.multiply_plain(ct, weights)
    for i in rotation_steps(model.block_size):
        acc = ckks.add(acc, ckks.rotate_vector(acc, i, gk))
    mask = make_mask(model.block_size, num_blocks, params.slot_count) if use_mask else np.ones(params.slot_count)
    acc = ckks.multiply_plain(acc, ckks.encode(params, mask, level=acc.level))
    return ckks.rescale_to_next(acc)


def oracle_linear(record: Sequence[float], model: LinearModel) -> float:
    if len(record) != model.num_features:
        raise BadRecordLength(f"record has {len(record)} values, model {model.num_features}")
    return math.fsum([w * float(x) for w, x in zip(model.weights, record)] + [model.bias])


def predict_label(score: float) -> int:
    """Sigmoid threshold at 1/2; a score of exactly 0 maps to 1."""
    return 1 if score >= 0 else 0


def block_scores(slots: np.ndarray, block_size: int, count: int) -> np.ndarray:
    return np.asarray(slots)[: count * block_size : block_size][:count]
