"""Convex-concave iteration for the attention-based predictor.

Each iteration linearizes the predictor at the current input sequence, builds
a convex subproblem from the stage bounds, and solves it with the in-house
barrier solver.  The subproblem minimizes the worst-case tracking cost over a
simplex of admissible value-mix realizations, with stage-linking constraints
propagating uncertainty score -> softmax -> value mix.

Finite reformulation notes (the printed problem quantifies constraints over
whole simplexes):
  * every stage bound is convex (upper) or concave (lower) in the set
    variable, so constraints need only be enforced at simplex vertices;
  * softmax and value-mix bounds for matrix row n depend only on row n of
    their argument, so the n^2+1 vertices collapse to n+1 distinct row values;
  * the summed upper-bound constraints are split exactly with per-row
    epigraph auxiliaries (tau for stage 2, eta for stage 3), keeping every
    constraint local to one matrix row.
The previous iterate remains feasible by construction (singleton simplexes at
the linearization values), which gives the monotone objective property.

Variable vector layout: [U(N), alpha1(L^2), beta1, sigma1, alpha2(L^2),
beta2, sigma2, alpha3(L*d_k), beta3, sigma3, tau(L), eta(L), t], with three
affine equalities sigma_i = beta_i + 1^T alpha_i.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import convexsolver as cvx
from .dcbounds import LinearizationPoint, Stage1Bounds, Stage2Bounds, Stage3Bounds
from .tfe import TfeConfig, TfeWeights, forward, softmax_rows


class CcpError(RuntimeError):
    pass


@dataclass(frozen=True)
class CcpConfig:
    epsilon: float = 1e-3      # termination tolerance on ||U_k - U_{k-1}||
    k_max: int = 15            # iteration cap
    lam: float = 8.0           # control-increment weighting
    u_min: float = 0.0
    u_max: float = 12.0
    entrywise_upper: bool = False  # also cap upper bounds entrywise (variant)
    nudge: float = 1e-5        # relative interior margin for the start point
    gap_tol: float = 1e-9
    max_outer: int = 50
    max_inner: int = 100

    def __post_init__(self):
        if self.epsilon <= 0 or self.k_max < 1 or self.lam < 0:
            raise ValueError("epsilon > 0, k_max >= 1 and lam >= 0 required")
        if self.u_max <= self.u_min:
            raise ValueError("empty input box")


@dataclass
class VarMap:
    """Index layout of the subproblem variable vector."""

    n_u: int
    L: int
    d_k: int

    def __post_init__(self):
        L, dk = self.L, self.d_k
        pos = 0

        def take(k):
            nonlocal pos
            sl = slice(pos, pos + k)
            pos += k
            return sl

        self.u = take(self.n_u)
        self.a1 = take(L * L)
        self.b1 = pos
        pos += 1
        self.s1 = pos
        pos += 1
        self.a2 = take(L * L)
        self.b2 = pos
        pos += 1
        self.s2 = pos
        pos += 1
        self.a3 = take(L * dk)
        self.b3 = pos
        pos += 1
        self.s3 = pos
        pos += 1
        self.tau = take(L)
        self.eta = take(L)
        self.t = pos
        pos += 1
        self.n = pos

    def a1_row(self, n):
        return np.arange(self.a1.start + n * self.L, self.a1.start + (n + 1) * self.L)

    def a2_row(self, n):
        return np.arange(self.a2.start + n * self.L, self.a2.start + (n + 1) * self.L)

    def a3_row(self, i):
        return np.arange(self.a3.start + i * self.d_k, self.a3.start + (i + 1) * self.d_k)


@dataclass
class SubproblemSpec:
    """Assembled convex subproblem plus the data needed to start and trace it."""

    program: cvx.ConvexProgram
    varmap: VarMap
    start: np.ndarray
    lin: LinearizationPoint
    config: CcpConfig
    tfe_config: TfeConfig
    y_ref: np.ndarray
    u_prev_first: float
    s3_vertex_count: int     # vertex count of the value-mix simplex (epigraph block)
    stage1: Stage1Bounds = None
    stage2: Stage2Bounds = None
    stage3: Stage3Bounds = None
    tail: tuple | None = None

    def fallback_objective(self) -> float:
        """Cost carried by the strictly feasible start (previous iterate)."""
        return float(self.start[self.varmap.t])


@dataclass
class CcpIteration:
    k: int
    objective: float
    norm_du: float
    width_p: float
    width_r: float
    width_s: float
    status: str


@dataclass
class CcpTrace:
    iterations: list = field(default_factory=list)
    converged: bool = False
    termination: str = ""

    @property
    def objectives(self):
        return [it.objective for it in self.iterations]

    def monotone(self, tol: float = 1e-8) -> bool:
        js = self.objectives
        return all(b <= a + tol for a, b in zip(js, js[1:]))

    def to_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iter", "J", "normdU", "widthP", "widthR", "widthS", "status"])
            for it in self.iterations:
                writer.writerow([it.k, repr(float(it.objective)), repr(float(it.norm_du)),
                                 repr(float(it.width_p)), repr(float(it.width_r)),
                                 repr(float(it.width_s)), it.status])


@dataclass
class CcpResult:
    u: np.ndarray
    y: np.ndarray
    trace: CcpTrace


def linearize(x_p, u_seq, weights: TfeWeights, config: TfeConfig) -> LinearizationPoint:
    """Evaluate the model at the current input sequence (first p entries)."""
    u_seq = np.asarray(u_seq, dtype=float)
    _, acts = forward(x_p, u_seq[:config.p], weights, config)
    return LinearizationPoint(acts.z1, acts.p, acts.r, acts.z2)


def _z1_of(u_head, lin, weights, cfg):
    """Z1 as a function of the first p inputs (top rows fixed by the history)."""
    z1 = lin.z1.copy()
    z1[cfg.w:] = np.asarray(u_head)[:, None] * weights.w_em2[:, 0] + weights.b_em2
    return z1


def assemble_subproblem(lin: LinearizationPoint, weights: TfeWeights,
                        tfe_config: TfeConfig, y_ref, u_prev_first: float,
                        config: CcpConfig, u_k=None, tail=None,
                        check_lin: bool = True) -> SubproblemSpec:
    """Build the convex subproblem at one linearization point.

    y_ref has length N >= p; when N > p a `tail` pair (tail prediction at u_k,
    jacobian (N-p, N)) supplies the linearized horizon extension.  u_k is the
    current iterate (defaults to the inputs implied by lin, zero-padded).
    """
    cfg, ccp = tfe_config, config
    L, dk, w, p = cfg.L, cfg.d_k, cfg.w, cfg.p
    y_ref = np.asarray(y_ref, dtype=float)
    N = y_ref.size
    if N < p:
        raise CcpError(f"reference window has length {N}, expected >= p = {p}")
    if N > p and tail is None:
        raise CcpError("horizon longer than p requires a tail linearization")
    if check_lin:
        lin.validate(weights, cfg)
    if u_k is None:
        u_k = np.concatenate([
            (lin.z1[w:, 0] - weights.b_em2[0]) / weights.w_em2[0, 0],
            np.zeros(N - p)])
    u_k = np.asarray(u_k, dtype=float)

    vm = VarMap(N, L, dk)
    s1 = Stage1Bounds(lin, weights, cfg, check=False)
    s2 = Stage2Bounds(lin)
    s3 = Stage3Bounds(lin, weights, check=False)

    w_em2 = weights.w_em2[:, 0]
    aq = s1.w_q_s @ w_em2          # scaled-query direction per future input
    ak = s1.w_k @ w_em2
    u_head_k = u_k[:p]
    # U-independent parts of the scaled queries / keys
    qconst = s1.qk.copy()
    kconst = s1.kk.copy()
    qconst[w:] -= np.outer(u_head_k, aq)
    kconst[w:] -= np.outer(u_head_k, ak)
    u_col = np.full(L, 0, dtype=np.intp)       # variable index of u feeding row l
    u_col[w:] = np.arange(p)

    blocks = []

    # ---- stage 1, entrywise lower bounds -------------------------------------
    ii, jj = np.meshgrid(np.arange(L), np.arange(L), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    has_i = ii >= w
    has_j = jj >= w
    cols = np.zeros((L * L, 3), dtype=np.intp)
    cols[:, 0] = u_col[ii]
    cols[:, 1] = u_col[jj]
    cols[:, 2] = vm.a1.start + ii * L + jj
    M = np.zeros((L * L, 1, dk, 3))
    M[has_i, 0, :, 0] = aq
    M[has_j, 0, :, 1] = -ak
    m0 = (qconst[ii] - kconst[jj])[:, None, :]
    gA = np.where(has_i, s1.qk_sum[ii, jj] @ aq * 0.5, 0.0)
    gB = np.where(has_j, s1.qk_sum[ii, jj] @ ak * 0.5, 0.0)
    a = np.zeros((L * L, 1, 3))
    a[:, 0, 0] = -gA
    a[:, 0, 1] = -gB
    a[:, 0, 2] = -1.0
    b = (-s1.p1_k[ii, jj] + gA * u_k[u_col[ii]] + gB * u_k[u_col[jj]])
    blocks.append(cvx.QuadBlock(cols=cols, M=M, m0=m0,
                                w=np.full((L * L, 1, dk), 0.25),
                                a=a, b=b[:, None], name="s1_lower"))

    # ---- stage 1, summed upper bound ------------------------------------------
    cols1u = np.concatenate([np.arange(p), [vm.b1]]).astype(np.intp)
    Mu = np.zeros((1, 1, L * L * dk, p + 1))
    rows = Mu[0, 0].reshape(L * L, dk, p + 1)
    for flat in range(L * L):
        i, j = divmod(flat, L)
        if i >= w:
            rows[flat, :, u_col[i]] += aq
        if j >= w:
            rows[flat, :, u_col[j]] += ak
    m0u = (qconst[ii] + kconst[jj]).reshape(1, 1, L * L * dk)
    gA2 = np.where(has_i, -(s1.qk_dif[ii, jj] @ aq) * 0.5, 0.0)
    gB2 = np.where(has_j, (s1.qk_dif[ii, jj] @ ak) * 0.5, 0.0)
    au = np.zeros((1, 1, p + 1))
    np.add.at(au[0, 0], u_col[ii], gA2)
    np.add.at(au[0, 0], u_col[jj], gB2)
    au[0, 0, p] = -1.0
    bu = float(np.sum(-s1.p2_k[ii, jj] - gA2 * u_k[u_col[ii]] - gB2 * u_k[u_col[jj]]))
    blocks.append(cvx.QuadBlock(cols=cols1u[None], M=Mu, m0=m0u,
                                w=np.full((1, 1, L * L * dk), 0.25),
                                a=au, b=np.array([[bu]]), name="s1_upper"))

    # ---- stage 2 exponent data -------------------------------------------------
    # rho_{n,j}(p_row) = p_row[j] - g^k_n . p_row + off_n; row values at the
    # score-simplex vertices are -alpha1_row (base) and base + sigma1 e_c.
    g_k = s2.g_k
    off = s2.rho_off
    a1_rows = np.stack([vm.a1_row(n) for n in range(L)])
    a2_rows = np.stack([vm.a2_row(n) for n in range(L)])
    eyeL = np.eye(L)

    G2 = L * (L + 1)
    d2 = 2 * L + 1
    cols2 = np.zeros((G2, d2), dtype=np.intp)
    E2 = np.zeros((G2, L, d2))
    e02 = np.zeros((G2, L))
    W2 = np.zeros((G2, L, L))
    a2 = np.zeros((G2, L, d2))
    b2 = np.full((G2, L), -1.0)
    for n in range(L):
        coeff_a1 = g_k[n][None, :] - eyeL          # (form j, alpha1-row coord)
        for v in range(L + 1):
            g = n * (L + 1) + v
            cols2[g, :L] = a1_rows[n]
            cols2[g, L] = vm.s1
            cols2[g, L + 1:] = a2_rows[n]
            E2[g, :, :L] = coeff_a1
            if v > 0:
                E2[g, :, L] = eyeL[:, v - 1] - g_k[n, v - 1]
            e02[g] = off[n]
            W2[g] = 1.0 - eyeL
            a2[g, :, L + 1:] = -eyeL
    blocks.append(cvx.ExpBlock(cols=cols2, E=E2, e0=e02, W=W2, a=a2, b=b2,
                               name="s2_lower"))

    # tau definitions: per-row upper-bound sums at the base vertex
    cols2t = np.zeros((L, L + 2), dtype=np.intp)
    E2t = np.zeros((L, L, L + 2))
    a2t = np.zeros((L, 1, L + 2))
    for n in range(L):
        cols2t[n, :L] = a1_rows[n]
        cols2t[n, L] = vm.s1
        cols2t[n, L + 1] = vm.tau.start + n
        E2t[n, :, :L] = g_k[n][None, :] - eyeL
        a2t[n, 0, L + 1] = -1.0
    blocks.append(cvx.ExpBlock(cols=cols2t, E=E2t, e0=np.tile(off[:, None], (1, L)),
                               W=np.ones((L, 1, L)), a=a2t, b=np.zeros((L, 1)),
                               name="s2_tau"))

    # summed upper bound at shifted vertices:
    # sum(tau) - tau_n + T_n(shift c) <= beta2
    d2u = 2 * L + 2
    cols2u = np.zeros((L, d2u), dtype=np.intp)
    E2u = np.zeros((L, L * L, d2u))
    e02u = np.zeros((L, L * L))
    W2u = np.zeros((L, L, L * L))
    a2u = np.zeros((L, L, d2u))
    for n in range(L):
        cols2u[n, :L] = a1_rows[n]
        cols2u[n, L] = vm.s1
        cols2u[n, L + 1:2 * L + 1] = vm.tau.start + np.arange(L)
        cols2u[n, 2 * L + 1] = vm.b2
        coeff_a1 = g_k[n][None, :] - eyeL
        for c in range(L):
            sl = slice(c * L, (c + 1) * L)
            E2u[n, sl, :L] = coeff_a1
            E2u[n, sl, L] = eyeL[:, c] - g_k[n, c]
            e02u[n, sl] = off[n]
            W2u[n, c, sl] = 1.0
        a2u[n, :, L + 1:2 * L + 1] = 1.0
        a2u[n, :, L + 1 + n] = 0.0
        a2u[n, :, 2 * L + 1] = -1.0
    blocks.append(cvx.ExpBlock(cols=cols2u, E=E2u, e0=e02u, W=W2u, a=a2u,
                               b=np.zeros((L, L)), name="s2_upper"))

    if ccp.entrywise_upper:
        # variant: cap each softmax upper bound by the coordinatewise maximum
        # of its simplex, sigma2 - alpha2_{n,i}, in addition to the sum form
        d2e = d2 + 1
        cols2e = np.zeros((G2, d2e), dtype=np.intp)
        cols2e[:, :d2] = cols2
        cols2e[:, d2] = vm.s2
        a2e = np.zeros((G2, L, d2e))
        a2e[:, :, L + 1:2 * L + 1] = np.broadcast_to(eyeL, (G2, L, L))
        a2e[:, :, d2] = -1.0
        blocks.append(cvx.ExpBlock(cols=cols2e,
                                   E=np.concatenate([E2, np.zeros((G2, L, 1))], axis=2),
                                   e0=e02, W=np.broadcast_to(eyeL, (G2, L, L)).copy(),
                                   a=a2e, b=np.zeros((G2, L)),
                                   name="s2_upper_entrywise"))

    # ---- stage 3 data ------------------------------------------------------------
    gamma = weights.w_v @ w_em2                 # value-column direction per input
    vbase = s3.vk.copy()                        # U-independent part of V columns
    vbase[w:] -= np.outer(u_head_k, gamma)
    rk = lin.r
    eyeP = np.eye(p)

    d3 = L + 1 + p + dk
    cols3 = np.zeros((L, d3), dtype=np.intp)
    C3 = (L + 1) * dk
    M3 = np.zeros((L, C3, L, d3))
    m03 = np.zeros((L, C3, L))
    a3 = np.zeros((L, C3, d3))
    b3 = np.zeros((L, C3))
    for i in range(L):
        cols3[i, :L] = a2_rows[i]
        cols3[i, L] = vm.s2
        cols3[i, L + 1:L + 1 + p] = np.arange(p)
        cols3[i, L + 1 + p:] = vm.a3_row(i)
        for v in range(L + 1):
            for j in range(dk):
                c = v * dk + j
                M3[i, c, :, :L] = -eyeL
                if v > 0:
                    M3[i, c, :, L] = eyeL[:, v - 1]
                M3[i, c, w:, L + 1:L + 1 + p] = -gamma[j] * eyeP
                m03[i, c] = -vbase[:, j]
                rv = s3.rv_sum[i, j]
                a3[i, c, :L] = 0.5 * rv
                if v > 0:
                    a3[i, c, L] = -0.5 * rv[v - 1]
                a3[i, c, L + 1:L + 1 + p] = -0.5 * rv[w:] * gamma[j]
                a3[i, c, L + 1 + p + j] = -1.0
                b3[i, c] = (-s3.p1_k[i, j] + 0.5 * rv @ rk[i]
                            + 0.5 * np.sum(rv[w:] * gamma[j] * u_head_k))
    blocks.append(cvx.QuadBlock(cols=cols3, M=M3, m0=m03,
                                w=np.full((L, C3, L), 0.25), a=a3, b=b3,
                                name="s3_lower"))

    # eta definitions: per-row upper-bound sums at the base vertex
    rvd_sum = s3.rv_dif.sum(axis=1)             # (L rows, L)
    rvd_u = np.einsum("ijl,j->il", s3.rv_dif[:, :, w:], gamma)  # (L, p)
    d3e = L + 1 + p + 1
    cols3e = np.zeros((L, d3e), dtype=np.intp)
    M3e = np.zeros((L, 1, L * dk, d3e))
    m03e = np.zeros((L, 1, L * dk))
    a3e = np.zeros((L, 1, d3e))
    b3e = np.zeros((L, 1))
    for i in range(L):
        cols3e[i, :L] = a2_rows[i]
        cols3e[i, L] = vm.s2
        cols3e[i, L + 1:L + 1 + p] = np.arange(p)
        cols3e[i, L + 1 + p] = vm.eta.start + i
        for j in range(dk):
            sl = slice(j * L, (j + 1) * L)
            M3e[i, 0, sl, :L] = -eyeL
            M3e[i, 0, sl, L + 1:L + 1 + p][w:, :] = gamma[j] * eyeP
            m03e[i, 0, sl] = vbase[:, j]
        a3e[i, 0, :L] = 0.5 * rvd_sum[i]
        a3e[i, 0, L + 1:L + 1 + p] = 0.5 * rvd_u[i]
        a3e[i, 0, L + 1 + p] = -1.0
        b3e[i, 0] = float(-np.sum(s3.p2_k[i]) + 0.5 * rvd_sum[i] @ rk[i]
                          - 0.5 * rvd_u[i] @ u_head_k)
    blocks.append(cvx.QuadBlock(cols=cols3e, M=M3e, m0=m03e,
                                w=np.full((L, 1, L * dk), 0.25), a=a3e, b=b3e,
                                name="s3_eta"))

    # summed upper bound at shifted vertices:
    # sum(eta) - eta_n + h_n(shifted row c, U) <= beta3
    d3u = L + 1 + p + L + 1
    cols3u = np.zeros((L, d3u), dtype=np.intp)
    M3u = np.zeros((L, L, L * dk, d3u))
    m03u = np.zeros((L, L, L * dk))
    a3u = np.zeros((L, L, d3u))
    b3u = np.zeros((L, L))
    for nn in range(L):
        cols3u[nn, :L] = a2_rows[nn]
        cols3u[nn, L] = vm.s2
        cols3u[nn, L + 1:L + 1 + p] = np.arange(p)
        cols3u[nn, L + 1 + p:2 * L + 1 + p] = vm.eta.start + np.arange(L)
        cols3u[nn, 2 * L + 1 + p] = vm.b3
        for c in range(L):
            for j in range(dk):
                sl = slice(j * L, (j + 1) * L)
                M3u[nn, c, sl, :L] = -eyeL
                M3u[nn, c, sl, L] = eyeL[:, c]
                M3u[nn, c, sl, L + 1:L + 1 + p][w:, :] = gamma[j] * eyeP
                m03u[nn, c, sl] = vbase[:, j]
            a3u[nn, c, :L] = 0.5 * rvd_sum[nn]
            a3u[nn, c, L] = -0.5 * rvd_sum[nn][c]
            a3u[nn, c, L + 1:L + 1 + p] = 0.5 * rvd_u[nn]
            a3u[nn, c, L + 1 + p:2 * L + 1 + p] = 1.0
            a3u[nn, c, L + 1 + p + nn] = 0.0
            a3u[nn, c, 2 * L + 1 + p] = -1.0
            b3u[nn, c] = float(-np.sum(s3.p2_k[nn]) + 0.5 * rvd_sum[nn] @ rk[nn]
                               - 0.5 * rvd_u[nn] @ u_head_k)
    blocks.append(cvx.QuadBlock(cols=cols3u, M=M3u, m0=m03u,
                                w=np.full((L, L, L * dk), 0.25), a=a3u, b=b3u,
                                name="s3_upper"))

    # ---- epigraph of the worst-case tracking cost --------------------------------
    w_l1 = weights.w_l1[0]
    w_l2 = weights.w_l2
    c_u = float(w_em2 @ w_l1)                   # output coupling per future input
    h_base = np.empty(L)
    h_base[:w] = lin.z1[:w] @ w_l1 + weights.b_l1[0]
    h_base[w:] = weights.b_em2 @ w_l1 + weights.b_l1[0]
    y_base = w_l2 @ h_base + weights.b_l2       # head prediction at U = 0, s = 0
    n3 = L * dk
    depi = N + n3 + 2
    colsE = np.concatenate([np.arange(N), np.arange(vm.a3.start, vm.a3.stop),
                            [vm.s3, vm.t]]).astype(np.intp)
    CE = n3 + 1
    n_rows = 2 * N
    ME = np.zeros((1, CE, n_rows, depi))
    m0E = np.zeros((1, CE, n_rows))
    aE = np.zeros((1, CE, depi))
    aE[0, :, depi - 1] = -1.0
    s_coeff = -np.einsum("ml,j->mlj", w_l2, w_l1).reshape(p, n3)
    for cvtx in range(CE):
        ME[0, cvtx, :p, :p] = w_l2[:, w:] * c_u
        ME[0, cvtx, :p, N:N + n3] = s_coeff
        if cvtx > 0:
            r_idx, c_idx = divmod(cvtx - 1, dk)
            ME[0, cvtx, :p, N + n3] = w_l2[:, r_idx] * w_l1[c_idx]
        m0E[0, cvtx, :p] = y_base - y_ref[:p]
    if N > p:
        y_tail_k, jac_tail = tail
        y_tail_k = np.asarray(y_tail_k, dtype=float)
        jac_tail = np.asarray(jac_tail, dtype=float)
        if y_tail_k.shape != (N - p,) or jac_tail.shape != (N - p, N):
            raise CcpError("tail linearization has inconsistent shapes")
        for cvtx in range(CE):
            ME[0, cvtx, p:N, :N] = jac_tail
            m0E[0, cvtx, p:N] = y_tail_k - jac_tail @ u_k - y_ref[p:]
    sq_lam = np.sqrt(ccp.lam)
    for cvtx in range(CE):
        ME[0, cvtx, N:2 * N, :N] = sq_lam * np.eye(N)
        ME[0, cvtx, N + 1:2 * N, :N - 1] -= sq_lam * np.eye(N - 1)
        m0E[0, cvtx, N] = -sq_lam * u_prev_first
    blocks.append(cvx.QuadBlock(cols=colsE[None], M=ME, m0=m0E,
                                w=np.ones((1, CE, n_rows)), a=aE,
                                b=np.zeros((1, CE)), name="epigraph"))

    # ---- simple affine constraints -------------------------------------------------
    n = vm.n
    n_aff = 2 * N + 5
    A_aff = np.zeros((n_aff, n))
    b_aff = np.zeros(n_aff)
    A_aff[:N, :N] = -np.eye(N)
    b_aff[:N] = ccp.u_min
    A_aff[N:2 * N, :N] = np.eye(N)
    b_aff[N:2 * N] = -ccp.u_max
    for k_, idx in enumerate((vm.s1, vm.s2, vm.s3)):
        A_aff[2 * N + k_, idx] = -1.0
    A_aff[2 * N + 3, vm.tau] = 1.0      # base vertex of the summed stage-2 upper
    A_aff[2 * N + 3, vm.b2] = -1.0
    A_aff[2 * N + 4, vm.eta] = 1.0      # base vertex of the summed stage-3 upper
    A_aff[2 * N + 4, vm.b3] = -1.0
    blocks.append(cvx.affine_block(A_aff, b_aff, name="bounds"))

    # equalities sigma_i = beta_i + 1^T alpha_i
    a_eq = np.zeros((3, n))
    for k_, (a_sl, b_i, s_i) in enumerate([(vm.a1, vm.b1, vm.s1),
                                           (vm.a2, vm.b2, vm.s2),
                                           (vm.a3, vm.b3, vm.s3)]):
        a_eq[k_, a_sl] = 1.0
        a_eq[k_, b_i] = 1.0
        a_eq[k_, s_i] = -1.0

    obj_lin = np.zeros(n)
    obj_lin[vm.t] = 1.0
    program = cvx.ConvexProgram(n, obj_lin=obj_lin, blocks=blocks,
                                a_eq=a_eq, b_eq=np.zeros(3))
    spec = SubproblemSpec(program=program, varmap=vm, start=np.zeros(n), lin=lin,
                          config=ccp, tfe_config=cfg, y_ref=y_ref,
                          u_prev_first=float(u_prev_first),
                          s3_vertex_count=n3 + 1, stage1=s1, stage2=s2, stage3=s3,
                          tail=tail)
    spec.start = _feasible_start(spec, weights, u_k)
    return spec


def _feasible_start(spec: SubproblemSpec, weights: TfeWeights, u_k):
    """Strictly feasible start: the previous iterate with singleton simplexes
    inflated by small margins (the exact singleton sits on the boundary)."""
    vm, cfg, ccp = spec.varmap, spec.tfe_config, spec.config
    L, dk, w, p = cfg.L, cfg.d_k, cfg.w, cfg.p
    s1, s2, s3 = spec.stage1, spec.stage2, spec.stage3
    N = vm.n_u
    for attempt in range(4):
        nudge = ccp.nudge * (10.0 ** attempt)
        z = np.zeros(vm.n)
        du = nudge * (ccp.u_max - ccp.u_min)
        u_s = np.clip(u_k, ccp.u_min + du, ccp.u_max - du)
        z[vm.u] = u_s
        z1_s = _z1_of(u_s[:p], spec.lin, weights, cfg)

        d1 = nudge * (1.0 + float(np.max(np.abs(spec.lin.p))))
        z[vm.a1] = (-s1.lower(z1_s) + d1).ravel()
        z[vm.b1] = float(s1.upper(z1_s).sum()) + d1
        z[vm.s1] = z[vm.b1] + z[vm.a1].sum()
        sigma1 = z[vm.s1]

        base1 = (-z[vm.a1]).reshape(L, L)
        low_min = np.empty((L, L))
        tau_val = np.empty(L)
        shift_sums = np.empty((L, L))
        for nrow in range(L):
            rows = np.vstack([base1[nrow], base1[nrow] + sigma1 * np.eye(L)])
            e = np.exp(s2.rho(nrow, rows))
            lows = 1.0 - (e.sum(axis=1, keepdims=True) - e)
            low_min[nrow] = lows.min(axis=0)
            sums = e.sum(axis=1)
            tau_val[nrow] = sums[0]
            shift_sums[nrow] = sums[1:]
        d2 = nudge * (1.0 + float(np.max(np.abs(shift_sums))))
        z[vm.a2] = (-low_min + d2).ravel()
        z[vm.tau] = tau_val + d2
        vertex_lhs = z[vm.tau].sum() - z[vm.tau][:, None] + shift_sums
        z[vm.b2] = max(float(z[vm.tau].sum()), float(vertex_lhs.max())) + d2
        z[vm.s2] = z[vm.b2] + z[vm.a2].sum()
        sigma2 = z[vm.s2]

        base2 = (-z[vm.a2]).reshape(L, L)
        low3_min = np.full((L, dk), np.inf)
        h_vals = np.empty((L + 1, L))
        for v in range(L + 1):
            r_mat = base2.copy()
            if v > 0:
                r_mat[:, v - 1] += sigma2
            low3_min = np.minimum(low3_min, s3.lower(r_mat, z1_s))
            h_vals[v] = s3.upper(r_mat, z1_s).sum(axis=1)
        d3 = nudge * (1.0 + float(np.max(np.abs(h_vals))))
        z[vm.a3] = (-low3_min + d3).ravel()
        z[vm.eta] = h_vals[0] + d3
        vertex3 = z[vm.eta].sum() - z[vm.eta][:, None] + h_vals[1:].T
        z[vm.b3] = max(float(z[vm.eta].sum()), float(vertex3.max())) + d3
        z[vm.s3] = z[vm.b3] + z[vm.a3].sum()
        sigma3 = z[vm.s3]

        w_l1 = weights.w_l1[0]
        base3 = (-z[vm.a3]).reshape(L, dk)
        h_vec = z1_s @ w_l1 + weights.b_l1[0] + base3 @ w_l1
        y_head = weights.w_l2 @ h_vec + weights.b_l2
        worst = float(np.sum((y_head - spec.y_ref[:p]) ** 2))
        for r_idx in range(L):
            for c_idx in range(dk):
                y_v = y_head + sigma3 * w_l1[c_idx] * weights.w_l2[:, r_idx]
                worst = max(worst, float(np.sum((y_v - spec.y_ref[:p]) ** 2)))
        track_tail = 0.0
        if N > p:
            y_tail_k, jac_tail = spec.tail
            y_tail = np.asarray(y_tail_k) + np.asarray(jac_tail) @ (u_s - u_k)
            track_tail = float(np.sum((y_tail - spec.y_ref[p:]) ** 2))
        du_vec = np.diff(np.concatenate([[spec.u_prev_first], u_s]))
        dt = nudge * (1.0 + worst)
        z[vm.t] = worst + track_tail + ccp.lam * float(du_vec @ du_vec) + dt

        g, _ = spec.program.constraint_values(z)
        if np.all(np.isfinite(g)) and float(np.max(g)) < 0.0:
            return z
    raise CcpError("could not construct a strictly feasible start point")


def _bound_widths(spec: SubproblemSpec, weights: TfeWeights, u_new):
    """Max upper-lower gaps of the three stage bounds at the new iterate."""
    cfg = spec.tfe_config
    z1 = _z1_of(np.asarray(u_new)[:cfg.p], spec.lin, weights, cfg)
    q = z1 @ spec.stage1.w_q_s.T + spec.stage1.b_q_s
    k = z1 @ spec.stage1.w_k.T + spec.stage1.b_k
    p_new = q @ k.T
    width_p = float(np.max(spec.stage1.upper(z1) - spec.stage1.lower(z1)))
    width_r = float(np.max(spec.stage2.upper_rows(p_new) - spec.stage2.lower_rows(p_new)))
    r_new = softmax_rows(p_new)
    width_s = float(np.max(spec.stage3.upper(r_new, z1) - spec.stage3.lower(r_new, z1)))
    return width_p, width_r, width_s


def ccp_solve(u0, x_p, weights: TfeWeights, tfe_config: TfeConfig, y_ref,
              u_prev_first: float, config: CcpConfig | None = None,
              tail_fn=None, solver_options: cvx.SolverOptions | None = None) -> CcpResult:
    """Run the convex-concave iteration from an initial input sequence.

    y_ref may be longer than the prediction window; tail_fn(u) must then
    return (tail prediction, tail jacobian), re-linearized every iteration.
    """
    ccp = config or CcpConfig()
    y_ref = np.asarray(y_ref, dtype=float)
    N = y_ref.size
    u = np.clip(np.asarray(u0, dtype=float).copy(), ccp.u_min, ccp.u_max)
    if u.shape != (N,):
        raise CcpError(f"initial guess has shape {u.shape}, expected {(N,)}")
    opts = solver_options or cvx.SolverOptions(gap_tol=ccp.gap_tol,
                                               max_outer=ccp.max_outer,
                                               max_inner=ccp.max_inner)
    trace = CcpTrace()
    prev_obj = np.inf
    for k in range(ccp.k_max):
        lin = linearize(x_p, u, weights, tfe_config)
        tail = tail_fn(u) if (tail_fn is not None and N > tfe_config.p) else None
        spec = assemble_subproblem(lin, weights, tfe_config, y_ref, u_prev_first,
                                   ccp, u_k=u, tail=tail, check_lin=False)
        res = cvx.solve(spec.program, spec.start, opts)
        if res.status in ("infeasible_detected", "numerical_failure"):
            trace.iterations.append(CcpIteration(
                k, prev_obj if np.isfinite(prev_obj) else spec.fallback_objective(),
                0.0, np.nan, np.nan, np.nan, "solver_failure"))
            trace.termination = "solver_failure"
            break
        obj = res.objective
        if obj > prev_obj + 1e-9:
            # a loose solve would break the descent property; keep the iterate
            trace.iterations.append(CcpIteration(k, prev_obj, 0.0, np.nan, np.nan,
                                                 np.nan, "nonmonotone_reject"))
            trace.termination = "nonmonotone_reject"
            break
        u_new = res.x[spec.varmap.u]
        norm_du = float(np.linalg.norm(u_new - u))
        width_p, width_r, width_s = _bound_widths(spec, weights, u_new)
        trace.iterations.append(CcpIteration(k, obj, norm_du, width_p, width_r,
                                             width_s, res.status))
        u = u_new
        prev_obj = obj
        if norm_du <= ccp.epsilon:
            trace.converged = True
            trace.termination = "tolerance"
            break
    else:
        trace.termination = "k_max"
    y, _ = forward(x_p, u[:tfe_config.p], weights, tfe_config)
    return CcpResult(u=u, y=y, trace=trace)
