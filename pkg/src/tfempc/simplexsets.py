"""Scaled/translated standard simplexes used as internal-variable uncertainty sets.

A set C(alpha, beta) = {x : -alpha <= x, 1^T x <= beta} is the standard
simplex scaled by sigma = beta + 1^T alpha and translated to -alpha.  Matrix
variables are flattened row-major: n = L*L for the score/softmax matrices and
n = L*d_k for the value-mix matrix.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class EmptySimplexError(ValueError):
    pass


@dataclass(frozen=True)
class Simplex:
    alpha: np.ndarray  # translation, length n
    beta: float        # scale offset

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=float).ravel())
        object.__setattr__(self, "beta", float(self.beta))

    @property
    def n(self) -> int:
        return self.alpha.size

    @property
    def scale(self) -> float:
        """sigma = beta + 1^T alpha; the simplex is nonempty iff sigma >= 0."""
        return self.beta + float(self.alpha.sum())

    @property
    def is_empty(self) -> bool:
        return self.scale < 0

    def vertices(self) -> np.ndarray:
        """(n+1, n) array: -alpha plus the n scaled unit offsets.

        Every vertex coordinate is affine in (alpha, beta).
        """
        if self.is_empty:
            raise EmptySimplexError("simplex with beta + 1^T alpha < 0 is empty")
        base = -self.alpha
        return np.vstack([base, base + self.scale * np.eye(self.n)])

    def contains(self, x, tol: float = 1e-12) -> bool:
        x = np.asarray(x, dtype=float).ravel()
        if x.size != self.n:
            raise ValueError(f"point has dimension {x.size}, simplex has {self.n}")
        return bool(np.all(x >= -self.alpha - tol) and x.sum() <= self.beta + tol)

    def diameter(self) -> float:
        """Largest pairwise vertex distance (0 for a singleton)."""
        v = self.vertices()
        diff = v[:, None, :] - v[None, :, :]
        return float(np.sqrt((diff * diff).sum(-1)).max())


def singleton_for(point) -> Simplex:
    """The degenerate simplex C(alpha, beta) = {point}."""
    point = np.asarray(point, dtype=float).ravel()
    return Simplex(-point, float(point.sum()))


def flatten_matrix(m) -> np.ndarray:
    """Row-major matrix-to-vector convention used for P, R and S."""
    return np.asarray(m, dtype=float).ravel(order="C")


def unflatten_matrix(x, shape) -> np.ndarray:
    return np.asarray(x, dtype=float).reshape(shape, order="C")


def dump_vertices_csv(path, simplex: Simplex):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(simplex.n)])
        for v in simplex.vertices():
            writer.writerow([repr(float(val)) for val in v])
