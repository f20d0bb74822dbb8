"""Difference-of-convex decompositions and linearized bounds for the three
attention stages.

Stage 1 bounds the scaled score matrix P = Q K^T / sqrt(d_k) entrywise using
the bilinear identity x^T y = ||x+y||^2/4 - ||x-y||^2/4 with one convex part
linearized at the current iterate.  Stage 2 bounds the row-wise softmax using
the Jacobian linearization of log-sum-exp.  Stage 3 bounds S = R V with the
same bilinear split applied to rows of R against columns of V.

All lower bounds are concave and all upper bounds convex in their arguments;
every bound is tight at the linearization point and valid globally.  The
1/sqrt(d_k) scaling is folded into the query side (scaled W_Q, b_Q), so the
stage-1 formulas apply to the scaled P verbatim.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .simplexsets import Simplex
from .tfe import TfeConfig, TfeWeights, forward, softmax_rows


class InconsistentLinearizationError(ValueError):
    pass


@dataclass
class LinearizationPoint:
    """The iterate (Z1^k, P^k, R^k, S^k) anchoring all DC bounds."""

    z1: np.ndarray  # (L, d_k)
    p: np.ndarray   # (L, L) scaled scores
    r: np.ndarray   # (L, L)
    s: np.ndarray   # (L, d_k) = R^k V(Z1^k)

    def validate(self, weights: TfeWeights, config: TfeConfig, tol: float = 1e-9):
        q = (self.z1 @ weights.w_q.T + weights.b_q) / np.sqrt(config.d_k)
        k = self.z1 @ weights.w_k.T + weights.b_k
        p = q @ k.T
        if np.max(np.abs(p - self.p)) > tol:
            raise InconsistentLinearizationError("P_k does not match P(Z1_k)")
        r = softmax_rows(self.p)
        if np.max(np.abs(r - self.r)) > tol:
            raise InconsistentLinearizationError("R_k does not match softmax(P_k)")
        v = self.z1 @ weights.w_v.T + weights.b_v
        if np.max(np.abs(self.r @ v - self.s)) > tol:
            raise InconsistentLinearizationError("S_k does not match R_k V(Z1_k)")
        return self


def linearize_at(x_p, u, weights: TfeWeights, config: TfeConfig) -> LinearizationPoint:
    """Evaluate the model and package the activations as a linearization point."""
    _, acts = forward(x_p, u, weights, config)
    return LinearizationPoint(acts.z1, acts.p, acts.r, acts.z2)


def bilinear_dc(x, y):
    """Exact DC split of the inner product: p1 - p2 = x^T y.

    p1 = ||x+y||^2/4 and p2 = ||x-y||^2/4 are the convex quadratics with
    minimum curvature achieving this.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError("x and y must have equal shapes")
    p1 = 0.25 * np.sum((x + y) ** 2, axis=-1)
    p2 = 0.25 * np.sum((x - y) ** 2, axis=-1)
    return p1, p2


def scaled_query_weights(weights: TfeWeights, config: TfeConfig):
    """Query weights with the 1/sqrt(d_k) score scaling absorbed."""
    s = 1.0 / np.sqrt(config.d_k)
    return s * weights.w_q, s * weights.b_q


def value_matrix(z1, weights: TfeWeights):
    """V(Z1) = Z1 W_V^T + 1 b_V^T."""
    return z1 @ weights.w_v.T + weights.b_v


class Stage1Bounds:
    """Entrywise concave-lower / convex-upper bounds on the scaled scores P(Z1).

    Structured pieces exposed for subproblem assembly:
      qk_sum[i,j,:]  = q_i(Z1^k) + k_j(Z1^k)        (lower-bound gradient carrier)
      qk_dif[i,j,:]  = q_i(Z1^k) - k_j(Z1^k)        (upper-bound gradient carrier)
    with q the scaled query.  The lower bound subtracts the convex quadratic
    ||q_i(Z1) - k_j(Z1)||^2/4; the upper bound adds ||q_i(Z1) + k_j(Z1)||^2/4.
    """

    def __init__(self, lin: LinearizationPoint, weights: TfeWeights, config: TfeConfig,
                 check: bool = True):
        if check:
            lin.validate(weights, config)
        self.lin = lin
        self.config = config
        self.w_q_s, self.b_q_s = scaled_query_weights(weights, config)
        self.w_k, self.b_k = weights.w_k, weights.b_k
        self.qk = lin.z1 @ self.w_q_s.T + self.b_q_s   # scaled queries at Z1^k, (L, d_k)
        self.kk = lin.z1 @ self.w_k.T + weights.b_k    # keys at Z1^k, (L, d_k)
        self.qk_sum = self.qk[:, None, :] + self.kk[None, :, :]  # (L, L, d_k)
        self.qk_dif = self.qk[:, None, :] - self.kk[None, :, :]
        self.p1_k = 0.25 * np.sum(self.qk_sum ** 2, axis=-1)     # (L, L)
        self.p2_k = 0.25 * np.sum(self.qk_dif ** 2, axis=-1)

    def _qk_at(self, z1):
        return z1 @ self.w_q_s.T + self.b_q_s, z1 @ self.w_k.T + self.b_k

    def lower(self, z1) -> np.ndarray:
        """Concave lower bound on P, evaluated entrywise at Z1."""
        q, k = self._qk_at(np.asarray(z1, dtype=float))
        dq = q - self.qk
        dk = k - self.kk
        dif = q[:, None, :] - k[None, :, :]
        lin_term = np.einsum("ijd,id->ij", self.qk_sum, dq) + \
            np.einsum("ijd,jd->ij", self.qk_sum, dk)
        return self.p1_k - 0.25 * np.sum(dif ** 2, axis=-1) + 0.5 * lin_term

    def upper(self, z1) -> np.ndarray:
        """Convex upper bound on P, evaluated entrywise at Z1."""
        q, k = self._qk_at(np.asarray(z1, dtype=float))
        dq = q - self.qk
        dk = k - self.kk
        summ = q[:, None, :] + k[None, :, :]
        lin_term = -np.einsum("ijd,id->ij", self.qk_dif, dq) + \
            np.einsum("ijd,jd->ij", self.qk_dif, dk)
        return 0.25 * np.sum(summ ** 2, axis=-1) - self.p2_k + 0.5 * lin_term

    def coeffs(self, i: int, j: int, kind: str):
        """Structured coefficients of one entry bound as a function of Z1.

        Returns (const, lin_i, lin_j, quad_rows_i, quad_rows_j, quad_offset,
        quad_weight): the bound equals
            const + lin_i . z1_i + lin_j . z1_j
                  + quad_weight * || quad_rows_i z1_i + quad_rows_j z1_j + quad_offset ||^2
        """
        if kind == "lower":
            g = self.qk_sum[i, j]
            lin_i = 0.5 * self.w_q_s.T @ g
            lin_j = 0.5 * self.w_k.T @ g
            const = self.p1_k[i, j] - lin_i @ self.lin.z1[i] - lin_j @ self.lin.z1[j]
            return const, lin_i, lin_j, self.w_q_s, -self.w_k, self.b_q_s - self.b_k, -0.25
        if kind == "upper":
            g = self.qk_dif[i, j]
            lin_i = -0.5 * self.w_q_s.T @ g
            lin_j = 0.5 * self.w_k.T @ g
            const = -self.p2_k[i, j] - lin_i @ self.lin.z1[i] - lin_j @ self.lin.z1[j]
            return const, lin_i, lin_j, self.w_q_s, self.w_k, self.b_q_s + self.b_k, 0.25
        raise ValueError("kind must be 'lower' or 'upper'")

    def eval_coeffs(self, i: int, j: int, kind: str, z1) -> float:
        const, lin_i, lin_j, rows_i, rows_j, off, w = self.coeffs(i, j, kind)
        z1 = np.asarray(z1, dtype=float)
        quad = rows_i @ z1[i] + rows_j @ z1[j] + off
        return float(const + lin_i @ z1[i] + lin_j @ z1[j] + w * quad @ quad)


class Stage2Bounds:
    """Row-wise softmax bounds from the log-sum-exp Jacobian linearization.

    For row n the exponent form rho_{n,j}(p) = p_j - LSE(P^k_n)
    - g^k_n . (p - P^k_n) is affine in p with g^k_n = softmax(P^k_n); then
        upper R_{n,i}(p) = exp(rho_{n,i}(p))            (convex)
        lower R_{n,i}(p) = 1 - sum_{j != i} exp(rho_{n,j}(p))   (concave)
    The sum runs over j != i (the printed lemma's "j != 1" is read as a typo).
    """

    def __init__(self, lin: LinearizationPoint):
        self.lin = lin
        self.L = lin.p.shape[0]
        pk = lin.p
        mx = pk.max(axis=1, keepdims=True)
        # max-shifted LSE per row keeps every exponent below overflow
        self.lse_k = (mx[:, 0] + np.log(np.exp(pk - mx).sum(axis=1)))  # (L,)
        self.g_k = softmax_rows(pk)                                    # (L, L)
        # rho offset: -lse_k + g_k . P^k_n per row
        self.rho_off = -self.lse_k + np.einsum("nj,nj->n", self.g_k, pk)  # (L,)

    def rho(self, n: int, p_row) -> np.ndarray:
        """Affine exponents rho_{n,j}(p) for all j; p_row may be (..., L)."""
        p_row = np.asarray(p_row, dtype=float)
        return p_row - (p_row @ self.g_k[n])[..., None] + self.rho_off[n]

    def rho_coeffs(self, n: int):
        """(coeff matrix (L, L), offset (L,)): rho_{n,j}(p) = coeff[j] . p + off[j]."""
        coeff = np.eye(self.L) - self.g_k[n][None, :].repeat(self.L, axis=0)
        return coeff, np.full(self.L, self.rho_off[n])

    def upper_entry(self, n: int, p_row, i: int) -> float:
        return float(np.exp(self.rho(n, p_row))[..., i])

    def lower_entry(self, n: int, p_row, i: int) -> float:
        e = np.exp(self.rho(n, p_row))
        return float(1.0 - (e.sum(axis=-1) - e[..., i]))

    def upper_rows(self, p_mat) -> np.ndarray:
        """Upper bound for every entry; row n uses row n of p_mat."""
        p_mat = np.asarray(p_mat, dtype=float)
        rho = p_mat - np.einsum("nj,nj->n", p_mat, self.g_k)[:, None] + self.rho_off[:, None]
        return np.exp(rho)

    def lower_rows(self, p_mat) -> np.ndarray:
        e = self.upper_rows(p_mat)
        return 1.0 - (e.sum(axis=1, keepdims=True) - e)


class Stage3Bounds:
    """Bounds on S(R, Z1) = R V(Z1), jointly in (R, Z1).

    Entry (i, j) pairs row i of R with column j of V; the bilinear split and
    its linearization at (R^k, Z1^k) give a concave lower / convex upper pair
    tight at the linearization point.  Carrier tensors:
      rv_sum[i,j,:] = r^k_i + v^k_j   (lower)
      rv_dif[i,j,:] = r^k_i - v^k_j   (upper)
    """

    def __init__(self, lin: LinearizationPoint, weights: TfeWeights,
                 config: TfeConfig | None = None, check: bool = True):
        if check and config is not None:
            lin.validate(weights, config)
        self.lin = lin
        self.w_v, self.b_v = weights.w_v, weights.b_v
        self.vk = value_matrix(lin.z1, weights)            # (L, d_k)
        self.rk = lin.r                                    # (L, L)
        self.L, self.d_k = self.vk.shape
        # rv_sum/rv_dif have shape (L rows of R, d_k columns of V, L)
        self.rv_sum = self.rk[:, None, :] + self.vk.T[None, :, :]
        self.rv_dif = self.rk[:, None, :] - self.vk.T[None, :, :]
        self.p1_k = 0.25 * np.sum(self.rv_sum ** 2, axis=-1)
        self.p2_k = 0.25 * np.sum(self.rv_dif ** 2, axis=-1)

    def lower(self, r_mat, z1) -> np.ndarray:
        r_mat = np.asarray(r_mat, dtype=float)
        v = np.asarray(z1, dtype=float) @ self.w_v.T + self.b_v
        dr = r_mat - self.rk
        dv = v - self.vk
        dif = r_mat[:, None, :] - v.T[None, :, :]
        lin_term = np.einsum("ijl,il->ij", self.rv_sum, dr) + \
            np.einsum("ijl,lj->ij", self.rv_sum, dv)
        return self.p1_k - 0.25 * np.sum(dif ** 2, axis=-1) + 0.5 * lin_term

    def upper(self, r_mat, z1) -> np.ndarray:
        r_mat = np.asarray(r_mat, dtype=float)
        v = np.asarray(z1, dtype=float) @ self.w_v.T + self.b_v
        dr = r_mat - self.rk
        dv = v - self.vk
        summ = r_mat[:, None, :] + v.T[None, :, :]
        lin_term = -np.einsum("ijl,il->ij", self.rv_dif, dr) + \
            np.einsum("ijl,lj->ij", self.rv_dif, dv)
        return 0.25 * np.sum(summ ** 2, axis=-1) - self.p2_k + 0.5 * lin_term


def p_bounds(lin: LinearizationPoint, weights: TfeWeights, config: TfeConfig, z1):
    """Entrywise (lower, upper) bounds on P at Z1; valid for all Z1."""
    b = Stage1Bounds(lin, weights, config)
    return b.lower(z1), b.upper(z1)


def softmax_upper(lin: LinearizationPoint, p_row, n: int, i: int) -> float:
    """Convex upper bound on the softmax entry (n, i) evaluated at row p_row."""
    return Stage2Bounds(lin).upper_entry(n, p_row, i)


def softmax_lower(lin: LinearizationPoint, p_row, n: int, i: int) -> float:
    """Concave lower bound on the softmax entry (n, i) evaluated at row p_row."""
    return Stage2Bounds(lin).lower_entry(n, p_row, i)


def softmax_box(lin: LinearizationPoint, simplex: Simplex):
    """Certified per-entry softmax intervals over a simplex of score matrices.

    The interval endpoints are the vertex extremes of the concave lower and
    convex upper bounds, so they contain the exact softmax over the whole
    simplex; they are clamped to the softmax range [0, 1].  Entry (n, i)
    depends only on row n of the matrix, so only the n+1 distinct row values
    at the vertices are evaluated.
    """
    bounds = Stage2Bounds(lin)
    L = bounds.L
    if simplex.n != L * L:
        raise ValueError(f"simplex dimension {simplex.n} does not match L^2 = {L * L}")
    if simplex.is_empty:
        raise ValueError("empty simplex")
    base = (-simplex.alpha).reshape(L, L)
    sigma = simplex.scale
    lo = np.empty((L, L))
    hi = np.empty((L, L))
    for n in range(L):
        # distinct row-n values over all vertices: the base row and L shifts
        rows = np.vstack([base[n], base[n] + sigma * np.eye(L)])
        e = np.exp(bounds.rho(n, rows))          # (L+1, L)
        uppers = e
        lowers = 1.0 - (e.sum(axis=1, keepdims=True) - e)
        lo[n] = np.clip(lowers.min(axis=0), 0.0, 1.0)
        hi[n] = np.clip(uppers.max(axis=0), 0.0, 1.0)
    return lo, hi


def s_bounds(lin: LinearizationPoint, weights: TfeWeights, r_mat, z1,
             config: TfeConfig | None = None):
    """Entrywise (lower, upper) bounds on S(R, Z1) = R V(Z1)."""
    b = Stage3Bounds(lin, weights, config, check=config is not None)
    return b.lower(r_mat, z1), b.upper(r_mat, z1)


def dump_bounds_csv(path, entries):
    """Write per-stage bound traces: rows of (stage, i, j, lower, exact, upper)."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "i", "j", "lower", "exact", "upper"])
        for stage, i, j, lo, exact, hi in entries:
            writer.writerow([stage, i, j, repr(float(lo)), repr(float(exact)), repr(float(hi))])
