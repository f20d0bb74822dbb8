"""Transformer-encoder predictor: embeddings, single-head self-attention,
feedforward output, and the best-fit-ratio metric.

The sequence has L = w + p positions: w past (u, y) rows embedded by the
first embedding, p future inputs embedded by the second.  Layer
normalization, dropout, and positional encodings are deliberately absent.
The attention score matrix P carries the 1/sqrt(d_k) scaling, so downstream
convexifications can treat P = Q K^T / sqrt(d_k) as one symbol.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

WEIGHTS_FORMAT = "tfe-v1"


class ShapeError(ValueError):
    """Raised when an array does not match the configured model shapes."""


class DegenerateReferenceError(ValueError):
    """Raised by bfr() when the reference signal is constant."""


@dataclass(frozen=True)
class TfeConfig:
    w: int    # past window length
    p: int    # prediction horizon
    d_k: int  # key dimensionality

    def __post_init__(self):
        if self.w < 1 or self.p < 1 or self.d_k < 1:
            raise ShapeError("w, p and d_k must all be >= 1")

    @property
    def L(self) -> int:
        """Sequence length used throughout the model."""
        return self.w + self.p


# (field name, shape expression) for every learned array
_WEIGHT_SHAPES = {
    "w_em1": lambda c: (c.d_k, 2),
    "b_em1": lambda c: (c.d_k,),
    "w_em2": lambda c: (c.d_k, 1),
    "b_em2": lambda c: (c.d_k,),
    "w_q": lambda c: (c.d_k, c.d_k),
    "b_q": lambda c: (c.d_k,),
    "w_k": lambda c: (c.d_k, c.d_k),
    "b_k": lambda c: (c.d_k,),
    "w_v": lambda c: (c.d_k, c.d_k),
    "b_v": lambda c: (c.d_k,),
    "w_l1": lambda c: (1, c.d_k),
    "b_l1": lambda c: (1,),
    "w_l2": lambda c: (c.p, c.p + c.w),
    "b_l2": lambda c: (c.p,),
}


@dataclass
class TfeWeights:
    """All learned matrices and biases of the predictor."""

    w_em1: np.ndarray
    b_em1: np.ndarray
    w_em2: np.ndarray
    b_em2: np.ndarray
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_l1: np.ndarray
    b_l1: np.ndarray
    w_l2: np.ndarray
    b_l2: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.asarray(getattr(self, f.name), dtype=float))

    def validate(self, config: TfeConfig):
        for name, shape_of in _WEIGHT_SHAPES.items():
            arr = getattr(self, name)
            expect = shape_of(config)
            if arr.shape != expect:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {expect}")
            if not np.all(np.isfinite(arr)):
                raise ShapeError(f"{name} contains non-finite entries")
        return self

    def copy(self) -> "TfeWeights":
        return TfeWeights(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def names(self):
        return [f.name for f in fields(self)]


@dataclass
class TfeActivations:
    """Cached internal tensors of one forward pass (P is the scaled score)."""

    z1: np.ndarray  # (L, d_k)
    q: np.ndarray   # (L, d_k)
    k: np.ndarray   # (L, d_k)
    v: np.ndarray   # (L, d_k)
    p: np.ndarray   # (L, L) scaled scores Q K^T / sqrt(d_k)
    r: np.ndarray   # (L, L) row-wise softmax of p
    z2: np.ndarray  # (L, d_k) = r @ v
    y: np.ndarray   # (p,)


def softmax_rows(p: np.ndarray) -> np.ndarray:
    """Numerically stable row-wise softmax (max-shifted exponents)."""
    shifted = p - p.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def embed(x_p: np.ndarray, u: np.ndarray, weights: TfeWeights, config: TfeConfig) -> np.ndarray:
    """First stage: stack the past-data and future-input embeddings into Z1."""
    x_p = np.asarray(x_p, dtype=float)
    u = np.asarray(u, dtype=float)
    if x_p.shape != (config.w, 2):
        raise ShapeError(f"X_p has shape {x_p.shape}, expected {(config.w, 2)}")
    if u.shape != (config.p,):
        raise ShapeError(f"U has shape {u.shape}, expected {(config.p,)}")
    top = x_p @ weights.w_em1.T + weights.b_em1
    bottom = u[:, None] @ weights.w_em2.T + weights.b_em2
    return np.vstack([top, bottom])


def attention(z1: np.ndarray, weights: TfeWeights, config: TfeConfig):
    """Self-attention stage: returns (P, R, Z2) with P already 1/sqrt(d_k)-scaled."""
    if z1.shape != (config.L, config.d_k):
        raise ShapeError(f"Z1 has shape {z1.shape}, expected {(config.L, config.d_k)}")
    q = z1 @ weights.w_q.T + weights.b_q
    k = z1 @ weights.w_k.T + weights.b_k
    v = z1 @ weights.w_v.T + weights.b_v
    p = (q @ k.T) / np.sqrt(config.d_k)
    for name, arr in (("Q", q), ("K", k), ("V", v), ("P", p)):
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values in attention stage {name}")
    r = softmax_rows(p)
    z2 = r @ v
    return p, r, z2


def output(z1: np.ndarray, z2: np.ndarray, weights: TfeWeights) -> np.ndarray:
    """Feedforward output stage: length-p prediction, affine in (Z1 + Z2).

    The scalar bias b_l1 is broadcast over all L positions of the inner
    d_k -> 1 projection.
    """
    if z1.shape != z2.shape:
        raise ShapeError("Z1 and Z2 must have identical shapes")
    h = (z1 + z2) @ weights.w_l1[0] + weights.b_l1[0]
    return weights.w_l2 @ h + weights.b_l2


def forward(x_p, u, weights: TfeWeights, config: TfeConfig):
    """Full forward pass; returns the prediction and the activation cache."""
    z1 = embed(x_p, u, weights, config)
    q = z1 @ weights.w_q.T + weights.b_q
    k = z1 @ weights.w_k.T + weights.b_k
    v = z1 @ weights.w_v.T + weights.b_v
    p = (q @ k.T) / np.sqrt(config.d_k)
    if not np.all(np.isfinite(p)):
        raise FloatingPointError("non-finite values in attention stage P")
    r = softmax_rows(p)
    z2 = r @ v
    y = output(z1, z2, weights)
    return y, TfeActivations(z1, q, k, v, p, r, z2, y)


def bfr(y_pred, y_true) -> float:
    """Best fit ratio: max(0, 1 - ||Y - Y_true|| / ||Y_true - mean(Y_true)||)."""
    y_pred = np.asarray(y_pred, dtype=float)
    y_true = np.asarray(y_true, dtype=float)
    if y_pred.shape != y_true.shape:
        raise ShapeError("predicted and true outputs must have equal length")
    denom = np.linalg.norm(y_true - y_true.mean())
    if denom == 0.0:
        raise DegenerateReferenceError("constant reference signal: BFR denominator is zero")
    return max(0.0, 1.0 - np.linalg.norm(y_pred - y_true) / denom)


def save_weights(path, weights: TfeWeights, config: TfeConfig):
    """Write weights as a tfe-v1 JSON document with a shape manifest."""
    weights.validate(config)
    doc = {
        "format": WEIGHTS_FORMAT,
        "config": {"w": config.w, "p": config.p, "d_k": config.d_k},
        "shapes": {name: list(getattr(weights, name).shape) for name in weights.names()},
        "arrays": {name: getattr(weights, name).tolist() for name in weights.names()},
    }
    Path(path).write_text(json.dumps(doc))


def load_weights(path):
    """Load a tfe-v1 weight file; refuses on format or shape mismatch."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != WEIGHTS_FORMAT:
        raise ValueError(f"unsupported weight file format: {doc.get('format')!r}")
    config = TfeConfig(**doc["config"])
    arrays = {}
    for name, shape_of in _WEIGHT_SHAPES.items():
        if name not in doc["arrays"]:
            raise ShapeError(f"weight file is missing array {name!r}")
        arr = np.asarray(doc["arrays"][name], dtype=float)
        if list(arr.shape) != doc["shapes"].get(name):
            raise ShapeError(f"array {name!r} does not match its shape manifest entry")
        if arr.shape != shape_of(config):
            raise ShapeError(f"array {name!r} has shape {arr.shape}, expected {shape_of(config)}")
        arrays[name] = arr
    return TfeWeights(**arrays).validate(config), config
