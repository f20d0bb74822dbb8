"""Log-barrier interior-point solver for the smooth convex programs produced
by the CCP subproblem assembler.

Supported constraint classes (verified structurally at assembly):
  * affine inequalities,
  * convex quadratics  sum_r w_r (m_r . z + c_r)^2 + a . z + b <= 0  (w >= 0),
  * sum-of-exp-of-affine <= affine (+ optional nonnegative multiple of the
    log of a single positive variable).

Constraints are held in batched families: a family groups constraints that
share one local variable layout, stored as dense tensors over (group,
constraint, row, local-dim) with per-group global column indices.  Barrier
gradient/Hessian assembly is then fully vectorized and the global Hessian
stays a plain dense matrix.

The solve is standard path-following: damped Newton centering with a
backtracking line search, barrier weight divided by a fixed factor per stage
until the duality-gap proxy (constraint count times barrier weight) reaches
the requested tolerance.  There is no phase-1: callers supply a strictly
feasible start.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

_EXP_GUARD = 500.0  # exponents above this mark the point infeasible


class SolverError(RuntimeError):
    pass


class AssemblyError(ValueError):
    pass


@dataclass
class QuadBlock:
    """Batched quadratic (affine when n_rows == 0) inequality family.

    Constraint (g, c):
        sum_r w[g,c,r] * (M[g,c,r] . z[cols[g]] + m0[g,c,r])^2
        + a[g,c] . z[cols[g]] + b[g,c] <= 0
    """

    cols: np.ndarray  # (G, d) int
    M: np.ndarray     # (G, C, R, d)
    m0: np.ndarray    # (G, C, R)
    w: np.ndarray     # (G, C, R), nonnegative
    a: np.ndarray     # (G, C, d)
    b: np.ndarray     # (G, C)
    name: str = "quad"

    def __post_init__(self):
        self.cols = np.asarray(self.cols, dtype=np.intp)
        for attr in ("M", "m0", "w", "a", "b"):
            setattr(self, attr, np.asarray(getattr(self, attr), dtype=float))
        G, d = self.cols.shape
        C = self.b.shape[1]
        R = self.M.shape[2]
        if self.M.shape != (G, C, R, d) or self.m0.shape != (G, C, R) \
                or self.w.shape != (G, C, R) or self.a.shape != (G, C, d) \
                or self.b.shape != (G, C):
            raise AssemblyError(f"inconsistent shapes in quad family {self.name!r}")
        if R and np.any(self.w < 0):
            raise AssemblyError(f"negative quadratic row weight in family {self.name!r}")

    @property
    def m(self) -> int:
        return self.b.shape[0] * self.b.shape[1]

    def values(self, z):
        zl = z[self.cols]                                   # (G, d)
        r = np.einsum("gcrd,gd->gcr", self.M, zl) + self.m0
        val = (self.w * r * r).sum(axis=2) + np.einsum("gcd,gd->gc", self.a, zl) + self.b
        return val.ravel(), (zl, r)

    def local_grads(self, cache):
        zl, r = cache
        return 2.0 * np.einsum("gcr,gcrd->gcd", self.w * r, self.M) + self.a

    def accumulate(self, cache, s1, s2, grad_out, hess_entries, z=None):
        """Add sum_i s1_i grad(g_i) to grad_out and collect Hessian pieces
        sum_i [s2_i grad(g_i) grad(g_i)^T + s1_i hess(g_i)] as flat entries."""
        G, C = self.b.shape
        s1 = s1.reshape(G, C)
        s2 = s2.reshape(G, C)
        gl = self.local_grads(cache)
        np.add.at(grad_out, self.cols.ravel(),
                  np.einsum("gc,gcd->gd", s1, gl).ravel())
        h = np.einsum("gc,gcd,gce->gde", s2, gl, gl)
        if self.M.shape[2]:
            h += np.einsum("gcr,gcrd,gcre->gde", 2.0 * self.w * s1[:, :, None],
                           self.M, self.M)
        n = grad_out.size
        idx = self.cols[:, :, None] * n + self.cols[:, None, :]
        hess_entries.append((idx.ravel(), h.ravel()))

    def jacobian_rows(self, z):
        _, cache = self.values(z)
        G, C = self.b.shape
        d = self.cols.shape[1]
        gl = self.local_grads(cache).reshape(self.m, d)
        cols = np.broadcast_to(self.cols[:, None, :], (G, C, d)).reshape(self.m, d)
        return gl, cols


@dataclass
class ExpBlock:
    """Batched sum-of-exponentials family with shared per-group forms.

    Constraint (g, c):
        sum_f W[g,c,f] * exp(E[g,f] . z[cols[g]] + e0[g,f])
        + a[g,c] . z[cols[g]] + b[g,c] - log_c[g,c] * ln(z[log_idx[g,c]]) <= 0
    with W >= 0 and log_c >= 0 (log_idx < 0 disables the log term).
    """

    cols: np.ndarray   # (G, d) int
    E: np.ndarray      # (G, F, d)
    e0: np.ndarray     # (G, F)
    W: np.ndarray      # (G, C, F), nonnegative
    a: np.ndarray      # (G, C, d)
    b: np.ndarray      # (G, C)
    log_c: np.ndarray | None = None    # (G, C), nonnegative
    log_idx: np.ndarray | None = None  # (G, C) int
    name: str = "expsum"

    def __post_init__(self):
        self.cols = np.asarray(self.cols, dtype=np.intp)
        for attr in ("E", "e0", "W", "a", "b"):
            setattr(self, attr, np.asarray(getattr(self, attr), dtype=float))
        G, d = self.cols.shape
        F = self.E.shape[1]
        C = self.b.shape[1]
        if self.E.shape != (G, F, d) or self.e0.shape != (G, F) \
                or self.W.shape != (G, C, F) or self.a.shape != (G, C, d) \
                or self.b.shape != (G, C):
            raise AssemblyError(f"inconsistent shapes in exp family {self.name!r}")
        if np.any(self.W < 0):
            raise AssemblyError(f"negative exp term weight in family {self.name!r}")
        if self.log_c is not None:
            self.log_c = np.asarray(self.log_c, dtype=float)
            self.log_idx = np.asarray(self.log_idx, dtype=np.intp)
            if np.any(self.log_c < 0):
                raise AssemblyError(f"negative log coefficient in family {self.name!r}")

    @property
    def m(self) -> int:
        return self.b.shape[0] * self.b.shape[1]

    def values(self, z):
        zl = z[self.cols]
        t = np.einsum("gfd,gd->gf", self.E, zl) + self.e0
        if np.any(t > _EXP_GUARD):
            return np.full(self.m, np.inf), (zl, None)
        v = np.exp(t)
        val = np.einsum("gcf,gf->gc", self.W, v) + \
            np.einsum("gcd,gd->gc", self.a, zl) + self.b
        if self.log_c is not None:
            zlog = z[self.log_idx]
            if np.any(zlog[self.log_c > 0] <= 0.0):
                return np.full(self.m, np.inf), (zl, None)
            safe = np.where(zlog > 0, zlog, 1.0)
            val = val - self.log_c * np.log(safe)
        return val.ravel(), (zl, v)

    def local_grads(self, cache):
        zl, v = cache
        return np.einsum("gcf,gf,gfd->gcd", self.W, v, self.E) + self.a

    def accumulate(self, cache, s1, s2, grad_out, hess_entries, z=None):
        G, C = self.b.shape
        s1 = s1.reshape(G, C)
        s2 = s2.reshape(G, C)
        gl = self.local_grads(cache)
        n = grad_out.size
        _, v = cache
        if self.log_c is None:
            np.add.at(grad_out, self.cols.ravel(),
                      np.einsum("gc,gcd->gd", s1, gl).ravel())
            h = np.einsum("gc,gcd,gce->gde", s2, gl, gl)
        else:
            # fold the log-term gradient into per-constraint rows first
            zlog = z[self.log_idx]
            lg = -self.log_c / np.where(zlog > 0, zlog, 1.0)   # (G, C)
            np.add.at(grad_out, self.cols.ravel(),
                      np.einsum("gc,gcd->gd", s1, gl).ravel())
            np.add.at(grad_out, self.log_idx.ravel(), (s1 * lg).ravel())
            h = np.einsum("gc,gcd,gce->gde", s2, gl, gl)
            cross = np.einsum("gc,gcd->gcd", s2 * lg, gl)
            flat = (self.log_idx[:, :, None] * n + self.cols[:, None, :]).ravel()
            hess_entries.append((flat, cross.ravel()))
            flat_t = (np.swapaxes(self.cols[:, None, :], 1, 2) * 0).ravel()  # placeholder
            flat_t = (self.cols[:, None, :] * n + self.log_idx[:, :, None]).ravel()
            hess_entries.append((flat_t, cross.ravel()))
            diag = s2 * lg * lg + s1 * self.log_c / np.where(zlog > 0, zlog, 1.0) ** 2
            hess_entries.append(((self.log_idx * n + self.log_idx).ravel(), diag.ravel()))
        omega = np.einsum("gc,gcf->gf", s1, self.W) * v
        h += np.einsum("gf,gfd,gfe->gde", omega, self.E, self.E)
        idx = self.cols[:, :, None] * n + self.cols[:, None, :]
        hess_entries.append((idx.ravel(), h.ravel()))

    def jacobian_rows(self, z):
        _, cache = self.values(z)
        G, C = self.b.shape
        d = self.cols.shape[1]
        gl = self.local_grads(cache).reshape(self.m, d)
        cols = np.broadcast_to(self.cols[:, None, :], (G, C, d)).reshape(self.m, d)
        return gl, cols


def affine_block(A, b, name="affine"):
    """A z + b <= 0 over the full variable vector."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    m, n = A.shape
    return QuadBlock(cols=np.arange(n)[None, :], M=np.zeros((1, m, 0, n)),
                     m0=np.zeros((1, m, 0)), w=np.zeros((1, m, 0)),
                     a=A[None], b=b[None], name=name)


def quad_block_single(M, m0, w, a, b, n, name="quad"):
    """One quadratic constraint over the full variable vector."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    R = M.shape[0]
    w_arr = np.asarray(w, dtype=float)
    if w_arr.ndim == 0:
        w_arr = np.full(R, float(w_arr))
    return QuadBlock(cols=np.arange(n)[None, :], M=M[None, None],
                     m0=np.asarray(m0, dtype=float).reshape(1, 1, R),
                     w=w_arr.reshape(1, 1, R),
                     a=np.asarray(a, dtype=float).reshape(1, 1, n),
                     b=np.array([[float(b)]]), name=name)


def expsum_block_single(E, e0, a, b, n, log_c=0.0, log_idx=-1, name="expsum"):
    """One sum-of-exp-of-affine constraint over the full variable vector."""
    E = np.atleast_2d(np.asarray(E, dtype=float))
    F = E.shape[0]
    use_log = float(log_c) > 0.0
    return ExpBlock(cols=np.arange(n)[None, :], E=E[None],
                    e0=np.asarray(e0, dtype=float).reshape(1, F),
                    W=np.ones((1, 1, F)),
                    a=np.asarray(a, dtype=float).reshape(1, 1, n),
                    b=np.array([[float(b)]]),
                    log_c=np.array([[float(log_c)]]) if use_log else None,
                    log_idx=np.array([[int(log_idx)]]) if use_log else None,
                    name=name)


@dataclass
class ConvexProgram:
    """min 0.5 z^T Q z + q . z + c  s.t.  A_eq z = b_eq and block constraints <= 0."""

    n: int
    obj_quad: np.ndarray | None = None
    obj_lin: np.ndarray | None = None
    obj_const: float = 0.0
    blocks: list = field(default_factory=list)
    a_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None

    def __post_init__(self):
        if self.obj_lin is None:
            self.obj_lin = np.zeros(self.n)
        self.obj_lin = np.asarray(self.obj_lin, dtype=float)
        if self.obj_quad is not None:
            self.obj_quad = np.asarray(self.obj_quad, dtype=float)
            if self.obj_quad.shape != (self.n, self.n):
                raise AssemblyError("objective Hessian has wrong shape")
            sym = 0.5 * (self.obj_quad + self.obj_quad.T)
            if np.min(scipy.linalg.eigvalsh(sym)) < -1e-10:
                raise AssemblyError("objective Hessian is not PSD")
            self.obj_quad = sym
        if self.a_eq is not None:
            self.a_eq = np.atleast_2d(np.asarray(self.a_eq, dtype=float))
            self.b_eq = np.atleast_1d(np.asarray(self.b_eq, dtype=float))

    @property
    def m(self) -> int:
        return sum(blk.m for blk in self.blocks)

    def objective(self, z) -> float:
        val = float(self.obj_lin @ z) + self.obj_const
        if self.obj_quad is not None:
            val += 0.5 * float(z @ self.obj_quad @ z)
        return val

    def objective_grad(self, z):
        g = self.obj_lin.copy()
        if self.obj_quad is not None:
            g += self.obj_quad @ z
        return g

    def constraint_values(self, z):
        vals, caches = [], []
        for blk in self.blocks:
            v, cache = blk.values(z)
            vals.append(v)
            caches.append(cache)
        return (np.concatenate(vals) if vals else np.zeros(0)), caches

    def jacobian(self, z):
        """Dense (m, n) constraint Jacobian, for diagnostics and KKT residuals."""
        J = np.zeros((self.m, self.n))
        row = 0
        for blk in self.blocks:
            gl, cols = blk.jacobian_rows(z)
            for i in range(blk.m):
                np.add.at(J[row + i], cols[i], gl[i])
            if isinstance(blk, ExpBlock) and blk.log_c is not None:
                lc = blk.log_c.ravel()
                li = blk.log_idx.ravel()
                for i in range(blk.m):
                    if lc[i] > 0:
                        J[row + i, li[i]] -= lc[i] / z[li[i]]
            row += blk.m
        return J


@dataclass
class SolverOptions:
    mu0: float = 1e-1
    mu_factor: float = 10.0
    gap_tol: float = 1e-8        # stop once m * mu <= gap_tol
    newton_tol: float = 1e-9     # final-stage Newton decrement^2 / 2
    max_outer: int = 50
    max_inner: int = 100
    armijo: float = 1e-4
    track_history: bool = False


@dataclass
class SolveResult:
    x: np.ndarray
    objective: float
    status: str          # optimal | max_iter | infeasible_detected | numerical_failure
    stationarity: float
    primal_infeasibility: float
    complementarity: float
    gap: float
    newton_steps: int
    multipliers: np.ndarray
    eq_multipliers: np.ndarray | None
    history: list = field(default_factory=list)


def _assemble_hessian(n, base, hess_entries):
    H = np.zeros(n * n)
    for idx, vals in hess_entries:
        H += np.bincount(idx, weights=vals, minlength=n * n)
    H = H.reshape(n, n)
    if base is not None:
        H += base
    return H


def _newton_direction(H, grad, a_eq):
    reg = 0.0
    scale = max(float(np.max(np.abs(H))), 1.0)
    for _ in range(10):
        try:
            Hreg = H if reg == 0.0 else H + reg * np.eye(H.shape[0])
            chol = scipy.linalg.cho_factor(Hreg, lower=True, check_finite=False)
            if a_eq is None:
                return scipy.linalg.cho_solve(chol, -grad, check_finite=False), None
            rhs = np.column_stack([grad, a_eq.T])
            sol = scipy.linalg.cho_solve(chol, rhs, check_finite=False)
            hg, hat = sol[:, 0], sol[:, 1:]
            S = a_eq @ hat
            nu = np.linalg.solve(S, -(a_eq @ hg))
            dz = -(hg + hat @ nu)
            return dz, nu
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            reg = 1e-12 * scale if reg == 0.0 else reg * 100.0
    raise SolverError("Newton system factorization failed")


def solve(prog: ConvexProgram, x0, options: SolverOptions | None = None) -> SolveResult:
    """Barrier path-following from a strictly feasible start point."""
    opts = options or SolverOptions()
    z = np.asarray(x0, dtype=float).copy()
    if z.shape != (prog.n,):
        raise SolverError(f"start point has shape {z.shape}, expected {(prog.n,)}")
    m = prog.m
    g0, _ = prog.constraint_values(z)
    eq_res = 0.0
    if prog.a_eq is not None:
        eq_res = float(np.max(np.abs(prog.a_eq @ z - prog.b_eq)))
    feas_bad = m > 0 and (not np.all(np.isfinite(g0)) or float(np.max(g0)) >= 0.0)
    if feas_bad or eq_res > 1e-9:
        worst = float(np.max(g0)) if m else 0.0
        return SolveResult(z, prog.objective(z), "infeasible_detected", np.inf,
                           max(worst, eq_res), np.inf, np.inf, 0, np.zeros(m), None)

    mu = opts.mu0 if m else opts.gap_tol
    nu = None
    newton_steps = 0
    history: list = []
    status = "optimal"
    final_mu = opts.gap_tol / max(m, 1)

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        outer = 0
        while True:
            inner_tol = opts.newton_tol if (m == 0 or mu <= final_mu * 1.000001) \
                else max(opts.newton_tol, 1e-8)
            converged_inner = False
            for _ in range(opts.max_inner):
                g, caches = prog.constraint_values(z)
                grad = prog.objective_grad(z)
                hess_entries: list = []
                if m:
                    s = 1.0 / (-g)
                    row = 0
                    for blk, cache in zip(prog.blocks, caches):
                        sl = s[row:row + blk.m]
                        blk.accumulate(cache, mu * sl, mu * sl * sl, grad,
                                       hess_entries, z=z)
                        row += blk.m
                H = _assemble_hessian(prog.n, prog.obj_quad, hess_entries)
                newton_steps += 1
                dz, nu = _newton_direction(H, grad, prog.a_eq)
                decrement = float(-grad @ dz)
                if not np.isfinite(decrement) or decrement < 0:
                    decrement = float(dz @ (H @ dz))
                if 0.5 * decrement <= inner_tol:
                    converged_inner = True
                    break
                f_cur = prog.objective(z) - (mu * float(np.sum(np.log(-g))) if m else 0.0)
                t = 1.0
                accepted = False
                for _ in range(60):
                    z_try = z + t * dz
                    g_try, _ = prog.constraint_values(z_try)
                    if m == 0 or (np.all(np.isfinite(g_try)) and float(np.max(g_try)) < 0.0):
                        f_try = prog.objective(z_try) - \
                            (mu * float(np.sum(np.log(-g_try))) if m else 0.0)
                        if f_try <= f_cur - opts.armijo * t * decrement:
                            z = z_try
                            accepted = True
                            if opts.track_history:
                                history.append((mu, f_try))
                            break
                    t *= 0.5
                if not accepted:
                    if 0.5 * decrement <= 1e-6:
                        converged_inner = True
                        break
                    return SolveResult(z, prog.objective(z), "numerical_failure",
                                       np.inf, 0.0, np.inf, mu * m, newton_steps,
                                       mu / (-g) if m else np.zeros(0), nu, history)
            if not converged_inner:
                status = "max_iter"
            if m == 0 or mu * m <= opts.gap_tol:
                break
            outer += 1
            if outer >= opts.max_outer:
                status = "max_iter"
                break
            mu = max(mu / opts.mu_factor, final_mu)

    # Polish: a few damped Newton steps at the final barrier weight, then a
    # primal-dual multiplier readout (refined with the final Newton direction)
    # so the reported stationarity reflects the true KKT quality of the center.
    lam = np.zeros(0)
    if m:
        def _direction_at(point):
            g_loc, caches_loc = prog.constraint_values(point)
            s_loc = 1.0 / (-g_loc)
            grad_loc = prog.objective_grad(point)
            entries = []
            row_loc = 0
            for blk, cache in zip(prog.blocks, caches_loc):
                sl = s_loc[row_loc:row_loc + blk.m]
                blk.accumulate(cache, mu * sl, mu * sl * sl, grad_loc, entries, z=point)
                row_loc += blk.m
            H_loc = _assemble_hessian(prog.n, prog.obj_quad, entries)
            d, nu_loc = _newton_direction(H_loc, grad_loc, prog.a_eq)
            return d, nu_loc, max(float(-grad_loc @ d), 0.0), s_loc

        dz = np.zeros(prog.n)
        s = None
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            try:
                for _ in range(5):
                    dz, nu_p, decrement, s = _direction_at(z)
                    if nu_p is not None:
                        nu = nu_p
                    if 0.5 * decrement <= 1e-16:
                        break
                    t = 1.0
                    for _ in range(30):
                        z_try = z + t * dz
                        g_try, _ = prog.constraint_values(z_try)
                        if np.all(np.isfinite(g_try)) and float(np.max(g_try)) < 0.0:
                            z = z_try
                            newton_steps += 1
                            break
                        t *= 0.5
                    else:
                        break
                else:
                    dz, nu_p, _, s = _direction_at(z)
                    if nu_p is not None:
                        nu = nu_p
            except SolverError:
                dz = np.zeros(prog.n)
        g, _ = prog.constraint_values(z)
        s = 1.0 / (-g)
        J = prog.jacobian(z)
        lam = np.maximum(mu * s * (1.0 + s * (J @ dz)), 0.0)
    stat, primal, comp = kkt_residuals(prog, z, lam, nu)
    if status == "optimal" and (stat > 1e-6 or primal > 1e-9 or comp > 1e-6):
        status = "max_iter"
    return SolveResult(z, prog.objective(z), status, stat, primal, comp,
                       mu * m if m else 0.0, newton_steps, lam, nu, history)


def kkt_residuals(prog: ConvexProgram, x, lam, nu=None):
    """(stationarity, primal feasibility, complementarity) norms at a point."""
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    grad = prog.objective_grad(x)
    if prog.m:
        J = prog.jacobian(x)
        grad = grad + J.T @ lam
    if prog.a_eq is not None and nu is not None:
        grad = grad + prog.a_eq.T @ np.asarray(nu, dtype=float)
    g, _ = prog.constraint_values(x)
    primal = float(max(np.max(g, initial=-np.inf), 0.0)) if prog.m else 0.0
    if prog.a_eq is not None:
        primal = max(primal, float(np.max(np.abs(prog.a_eq @ x - prog.b_eq))))
    comp = float(np.max(np.abs(lam * g))) if prog.m else 0.0
    return float(np.linalg.norm(grad)), primal, comp


def dump_program(prog: ConvexProgram, path):
    """Plain-text canonical form; full detail only for small programs."""
    lines = [f"variables: {prog.n}", f"constraints: {prog.m}",
             f"objective: quad={'yes' if prog.obj_quad is not None else 'no'} "
             f"const={prog.obj_const!r}"]
    small = prog.n <= 20 and prog.m <= 50
    if small:
        if prog.obj_quad is not None:
            lines.append("Q = " + np.array2string(prog.obj_quad, precision=12))
        lines.append("q = " + np.array2string(prog.obj_lin, precision=12))
    for blk in prog.blocks:
        kind = "expsum" if isinstance(blk, ExpBlock) else \
            ("affine" if blk.M.shape[2] == 0 else "quad")
        lines.append(f"block {blk.name!r}: kind={kind} count={blk.m}")
        if small:
            lines.append("  cols = " + np.array2string(blk.cols))
            if isinstance(blk, ExpBlock):
                lines.append("  E = " + np.array2string(blk.E, precision=12))
                lines.append("  e0 = " + np.array2string(blk.e0, precision=12))
                lines.append("  W = " + np.array2string(blk.W, precision=12))
            elif blk.M.shape[2]:
                lines.append("  M = " + np.array2string(blk.M, precision=12))
            lines.append("  a = " + np.array2string(blk.a, precision=12))
            lines.append("  b = " + np.array2string(blk.b, precision=12))
    if prog.a_eq is not None:
        lines.append(f"equalities: {prog.a_eq.shape[0]}")
        if small:
            lines.append("  A = " + np.array2string(prog.a_eq, precision=12))
            lines.append("  b = " + np.array2string(prog.b_eq, precision=12))
    Path(path).write_text("\n".join(lines) + "\n")
