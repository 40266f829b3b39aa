"""Primal-dual interior-point solver for the multi-stage complementarity program.

Outer loop: a homotopy on the complementarity relaxation delta (the bounds of
the product rows), driven from delta_init down to delta_final.  Inner loop: a
slack-based primal-dual interior-point method with a monotone barrier
schedule, an l1 merit line search with fraction-to-boundary safeguards, and a
Gauss-Newton / damped-BFGS stage Hessian kept positive definite.

Each Newton system is condensed to (primal, equality-dual) form: the variable
and slack bound blocks are eliminated analytically, leaving a symmetric
quasi-definite matrix that is block-tridiagonal in the stage index.  It is
factorized by forward block elimination whose cost is linear in the number of
stages; a dense factorization of the identical system exists only as a test
oracle.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .program import MultistageNlp
from .qp import QpError, StageQp, solve_qp

logger = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class EvaluationError(SolverError):
    """A user evaluator returned NaN/Inf; names the stage and constraint family."""

    def __init__(self, stage: int, family: str):
        super().__init__(f"non-finite value from evaluator at stage {stage}: {family}")
        self.stage = stage
        self.family = family


@dataclass
class SolverOptions:
    delta_init: float = 1e-1
    delta_factor: float = 0.1
    delta_final: float = 1e-6
    mu_init: float = 1e-1
    mu_factor: float = 0.2
    mu_floor: float = 1e-9
    kappa_eps: float = 10.0
    ftb: float = 0.995  # fraction-to-boundary floor
    kkt_tol: float = 1e-8
    stat_tol: float = 1e-5  # scaled stationarity; MPCC corners leave multipliers degenerate
    max_inner: int = 120
    max_total: int = 1500
    reg_floor: float = 1e-8
    reg_dual: float = 1e-8
    hessian: str = "newton"  # "newton" | "hybrid" | "gauss_newton"
    line_search: str = "residual"  # "residual" | "merit"
    bound_push: float = 1e-2
    armijo: float = 1e-4
    min_alpha: float = 1e-12
    bfgs_reset_norm: float = 1e6

    def __post_init__(self):
        if self.delta_final <= 0 or self.kkt_tol <= 0 or self.mu_floor <= 0:
            raise SolverError("delta_final, kkt_tol and mu_floor must be > 0")
        if not 0.0 < self.ftb < 1.0:
            raise SolverError("fraction-to-boundary parameter must lie in (0, 1)")
        if self.hessian not in ("newton", "hybrid", "gauss_newton"):
            raise SolverError(f"unknown hessian mode {self.hessian!r}")
        if self.line_search not in ("residual", "merit"):
            raise SolverError(f"unknown line search mode {self.line_search!r}")

    @staticmethod
    def from_json(source) -> "SolverOptions":
        if isinstance(source, (str, Path)):
            with open(source) as f:
                doc = json.load(f)
        else:
            doc = dict(source)
        doc.pop("format_version", None)
        known = set(SolverOptions.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise SolverError(f"unknown solver options: {sorted(unknown)}")
        return SolverOptions(**doc)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class SolverReport:
    status: str = "max-iters"
    outer_iters: int = 0
    inner_iters: int = 0
    kkt_stationarity: float = np.inf
    kkt_primal: float = np.inf
    kkt_complementarity: float = np.inf
    max_gap_force_product: float = np.inf
    max_restitution: float = np.inf
    max_friction_product_v: float = np.inf
    max_friction_product_force: float = np.inf
    min_gap: float = -np.inf
    objective: float = np.inf
    delta_reached: float = np.inf
    retries: int = 0
    timings_ms: dict = field(default_factory=dict)
    iteration_log: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out.pop("iteration_log")
        return out


@dataclass
class Iterate:
    """Primal-dual point: variables, slacks, and all multiplier classes."""

    z: np.ndarray            # (N, n_z)
    s: np.ndarray            # (N, n_h)
    y_def: np.ndarray        # (N-1, n_x) defect duals
    y_eq: list               # per stage (m_e,) stage-equality duals
    nu: np.ndarray           # (N, n_h) duals of h(z) - s = 0
    wl: np.ndarray           # (N, n_z) lower variable-bound duals
    wu: np.ndarray
    sl: np.ndarray           # (N, n_h) lower slack-bound duals
    su: np.ndarray

    def copy(self) -> "Iterate":
        return Iterate(
            z=self.z.copy(), s=self.s.copy(), y_def=self.y_def.copy(),
            y_eq=[y.copy() for y in self.y_eq], nu=self.nu.copy(),
            wl=self.wl.copy(), wu=self.wu.copy(), sl=self.sl.copy(), su=self.su.copy(),
        )


@dataclass
class _Evals:
    f: np.ndarray        # (N,)
    g: np.ndarray | None
    c: np.ndarray        # (N, n_x) transition outputs (last row unused)
    c_jac: np.ndarray | None
    h: np.ndarray        # (N, n_h)
    h_jac: np.ndarray | None
    h_hess: np.ndarray | None = None  # (N, n_h, n_z, n_z)


class _Problem:
    """Program plus current relaxation bounds and bound masks."""

    def __init__(self, nlp: MultistageNlp, opts: SolverOptions):
        self.nlp = nlp
        self.opts = opts
        self.n = nlp.n_stages
        self.n_z = nlp.n_z
        self.n_x = nlp.n_x
        self.n_h = nlp.n_h
        self.e_sel = nlp.transition_selector
        self.zl = nlp.z_lower
        self.zu = nlp.z_upper
        self.has_zl = np.isfinite(self.zl)
        self.has_zu = np.isfinite(self.zu)
        self.delta = None
        self.set_delta(opts.delta_init)

    def set_delta(self, delta: float) -> None:
        """Move the relaxation bounds and rescale the relaxed rows to O(1).

        Relaxed product rows are divided by delta inside the solver so their
        boxes become [-1, 1] / (-inf, 1]; slack and dual dynamics then stay
        well scaled as delta shrinks to delta_final.
        """
        self.delta = delta
        hl, hu = self.nlp.ineq_bounds(delta)
        relaxed = self.nlp.h_relax_lower | self.nlp.h_relax_upper
        self.row_scale = np.where(relaxed, 1.0 / delta, 1.0)
        self.hl = hl * self.row_scale
        self.hu = hu * self.row_scale
        self.has_hl = np.isfinite(self.hl)
        self.has_hu = np.isfinite(self.hu)

    def eval_all(self, z: np.ndarray, order: int) -> _Evals:
        n, n_z, n_x, n_h = self.n, self.n_z, self.n_x, self.n_h
        f = np.zeros(n)
        g = np.zeros((n, n_z)) if order else None
        c = np.zeros((n, n_x))
        cj = np.zeros((n, n_x, n_z)) if order else None
        h = np.zeros((n, n_h))
        hj = np.zeros((n, n_h, n_z)) if order else None
        hh = np.zeros((n, n_h, n_z, n_z)) if order >= 2 else None
        for k in range(n):
            ev = self.nlp.stage_eval(k, z[k], order)
            if not np.isfinite(ev.f):
                raise EvaluationError(k, "cost")
            f[k] = ev.f
            if ev.c is not None and n_x:
                if not np.all(np.isfinite(ev.c)):
                    raise EvaluationError(k, "state transition")
                c[k] = ev.c
            if n_h:
                if not np.all(np.isfinite(ev.h)):
                    bad = int(np.flatnonzero(~np.isfinite(ev.h))[0])
                    raise EvaluationError(k, self.nlp.h_labels[bad])
                h[k] = ev.h * self.row_scale
            if order:
                if not np.all(np.isfinite(ev.g)):
                    raise EvaluationError(k, "cost gradient")
                g[k] = ev.g
                if ev.c_jac is not None and n_x:
                    if not np.all(np.isfinite(ev.c_jac)):
                        raise EvaluationError(k, "state transition jacobian")
                    cj[k] = ev.c_jac
                if n_h:
                    if not np.all(np.isfinite(ev.h_jac)):
                        raise EvaluationError(k, "inequality jacobian")
                    hj[k] = ev.h_jac * self.row_scale[:, None]
            if order >= 2 and n_h and ev.h_hess is not None:
                if not np.all(np.isfinite(ev.h_hess)):
                    raise EvaluationError(k, "inequality curvature")
                hh[k] = ev.h_hess * self.row_scale[:, None, None]
        return _Evals(f=f, g=g, c=c, c_jac=cj, h=h, h_jac=hj, h_hess=hh)

    # -- residuals ---------------------------------------------------------

    def primal_residuals(self, it: Iterate, ev: _Evals):
        n = self.n
        r_def = np.zeros((max(n - 1, 0), self.n_x))
        for k in range(n - 1):
            r_def[k] = ev.c[k] - self.e_sel @ it.z[k + 1]
        r_eq = [self.nlp.eq_matrix[k] @ it.z[k] - self.nlp.eq_rhs[k] for k in range(n)]
        r_h = ev.h - it.s
        return r_def, r_eq, r_h

    def stationarity(self, it: Iterate, ev: _Evals):
        n = self.n
        r_z = ev.g.copy()
        for k in range(n):
            if k < n - 1:
                r_z[k] += ev.c_jac[k].T @ it.y_def[k]
            if k > 0:
                r_z[k] -= self.e_sel.T @ it.y_def[k - 1]
            if self.nlp.eq_matrix[k].shape[0]:
                r_z[k] += self.nlp.eq_matrix[k].T @ it.y_eq[k]
            if self.n_h:
                r_z[k] += ev.h_jac[k].T @ it.nu[k]
        r_z += -it.wl + it.wu
        r_s = -it.nu - it.sl + it.su
        return r_z, r_s

    def complementarity(self, it: Iterate, mu: float) -> float:
        worst = 0.0
        for slack, dual, mask in self._bound_triples(it):
            if mask.any():
                worst = max(worst, float(np.abs(slack[mask] * dual[mask] - mu).max()))
        return worst

    def _bound_triples(self, it: Iterate):
        return (
            (it.z - self.zl, it.wl, self.has_zl),
            (self.zu - it.z, it.wu, self.has_zu),
            (it.s - self.hl, it.sl, self.has_hl),
            (self.hu - it.s, it.su, self.has_hu),
        )

    def dual_scaling(self, it: Iterate) -> tuple[float, float]:
        """IPOPT-style scalings for the stationarity and complementarity tests."""
        s_max = 100.0
        bound_total = sum(
            float(dual[mask].sum()) for _, dual, mask in self._bound_triples(it)
        )
        bound_count = int(sum(mask.sum() for _, _, mask in self._bound_triples(it)))
        total = (
            float(np.abs(it.y_def).sum())
            + sum(float(np.abs(y).sum()) for y in it.y_eq)
            + float(np.abs(it.nu).sum())
            + bound_total
        )
        count = it.y_def.size + sum(y.size for y in it.y_eq) + it.nu.size + bound_count
        s_d = max(s_max, total / max(count, 1)) / s_max
        s_c = max(s_max, bound_total / max(bound_count, 1)) / s_max
        return s_d, s_c

    def error(self, it: Iterate, ev: _Evals, mu: float) -> dict:
        r_def, r_eq, r_h = self.primal_residuals(it, ev)
        r_z, r_s = self.stationarity(it, ev)
        s_d, s_c = self.dual_scaling(it)
        prim = max(
            float(np.abs(r_def).max()) if r_def.size else 0.0,
            max((float(np.abs(r).max()) for r in r_eq if r.size), default=0.0),
            float(np.abs(r_h).max()) if r_h.size else 0.0,
        )
        stat = max(
            float(np.abs(r_z).max()),
            float(np.abs(r_s).max()) if r_s.size else 0.0,
        )
        comp = self.complementarity(it, mu)
        return {
            "stationarity": stat,
            "primal": prim,
            "complementarity": comp,
            "scaled": max(stat / s_d, prim, comp / s_c),
            "s_d": s_d,
            "s_c": s_c,
        }


# ---------------------------------------------------------------------------
# Newton system
# ---------------------------------------------------------------------------


def _sigma_terms(it: Iterate, prob: _Problem, mu: float):
    """Diagonal barrier curvatures and mu-perturbed gradient pieces."""
    sig_z = np.zeros_like(it.z)
    grad_mu_z = np.zeros_like(it.z)
    m = prob.has_zl
    sig_z[m] += it.wl[m] / (it.z[m] - prob.zl[m])
    grad_mu_z[m] -= mu / (it.z[m] - prob.zl[m])
    m = prob.has_zu
    sig_z[m] += it.wu[m] / (prob.zu[m] - it.z[m])
    grad_mu_z[m] += mu / (prob.zu[m] - it.z[m])

    sig_s = np.zeros_like(it.s)
    r_smu = it.nu.copy()
    m = prob.has_hl
    sig_s[m] += it.sl[m] / (it.s[m] - prob.hl[m])
    r_smu[m] += mu / (it.s[m] - prob.hl[m])
    m = prob.has_hu
    sig_s[m] += it.su[m] / (prob.hu[m] - it.s[m])
    r_smu[m] -= mu / (prob.hu[m] - it.s[m])
    return sig_z, grad_mu_z, sig_s, r_smu


@dataclass
class _Direction:
    dz: np.ndarray
    ds: np.ndarray
    dy_def: np.ndarray
    dy_eq: list
    dnu: np.ndarray
    dwl: np.ndarray
    dwu: np.ndarray
    dsl: np.ndarray
    dsu: np.ndarray


def _condensed_pieces(prob: _Problem, it: Iterate, ev: _Evals, hess, mu, reg_primal):
    """Per-stage condensed Hessian blocks and right-hand sides."""
    n, n_z = prob.n, prob.n_z
    sig_z, grad_mu_z, sig_s, r_smu = _sigma_terms(it, prob, mu)
    r_def, r_eq, r_h = prob.primal_residuals(it, ev)
    h_blocks, rhs_z = [], []
    for k in range(n):
        hk = hess[k] + np.diag(sig_z[k]) + reg_primal * np.eye(n_z)
        base = ev.g[k].copy()
        if k < n - 1:
            base += ev.c_jac[k].T @ it.y_def[k]
        if k > 0:
            base -= prob.e_sel.T @ it.y_def[k - 1]
        if prob.nlp.eq_matrix[k].shape[0]:
            base += prob.nlp.eq_matrix[k].T @ it.y_eq[k]
        rz = -(base + grad_mu_z[k])
        if prob.n_h:
            jh = ev.h_jac[k]
            hk = hk + jh.T @ (sig_s[k][:, None] * jh)
            base_h = jh.T @ it.nu[k]
            rz = rz - base_h - jh.T @ (sig_s[k] * r_h[k] - r_smu[k])
        h_blocks.append(hk)
        rhs_z.append(rz)
    return h_blocks, rhs_z, (sig_s, r_smu, r_def, r_eq, r_h)


def _recover_direction(prob, it, ev, dz, dy_eq, dy_def, pieces, mu) -> _Direction:
    sig_s, r_smu, r_def, r_eq, r_h = pieces
    if prob.n_h:
        jh_dz = np.einsum("khz,kz->kh", ev.h_jac, dz)
        dnu = sig_s * (jh_dz + r_h) - r_smu
        inv_sig = np.where(sig_s > 0, 1.0 / np.where(sig_s > 0, sig_s, 1.0), 0.0)
        ds = inv_sig * (dnu + r_smu)
    else:
        dnu = np.zeros_like(it.nu)
        ds = np.zeros_like(it.s)

    dwl = np.zeros_like(it.wl)
    dwu = np.zeros_like(it.wu)
    m = prob.has_zl
    dwl[m] = (mu - (it.z[m] - prob.zl[m]) * it.wl[m] - it.wl[m] * dz[m]) / (
        it.z[m] - prob.zl[m]
    )
    m = prob.has_zu
    dwu[m] = (mu - (prob.zu[m] - it.z[m]) * it.wu[m] + it.wu[m] * dz[m]) / (
        prob.zu[m] - it.z[m]
    )
    dsl = np.zeros_like(it.sl)
    dsu = np.zeros_like(it.su)
    m = prob.has_hl
    dsl[m] = (mu - (it.s[m] - prob.hl[m]) * it.sl[m] - it.sl[m] * ds[m]) / (
        it.s[m] - prob.hl[m]
    )
    m = prob.has_hu
    dsu[m] = (mu - (prob.hu[m] - it.s[m]) * it.su[m] + it.su[m] * ds[m]) / (
        prob.hu[m] - it.s[m]
    )
    return _Direction(dz, ds, dy_def, dy_eq, dnu, dwl, dwu, dsl, dsu)


def _build_and_solve_kkt(
    prob: _Problem,
    it: Iterate,
    ev: _Evals,
    hess: list[np.ndarray],
    mu: float,
    reg_primal: float,
    reg_dual: float,
) -> _Direction:
    """Condensed block-tridiagonal Newton solve, linear in the stage count."""
    n, n_z, n_x = prob.n, prob.n_z, prob.n_x
    h_blocks, rhs_z, pieces = _condensed_pieces(prob, it, ev, hess, mu, reg_primal)
    _, _, r_def, r_eq, _ = pieces

    # block layout per stage: [z | stage-equality duals | defect duals]
    m_e = [prob.nlp.eq_matrix[k].shape[0] for k in range(n)]
    m_d = [n_x if k < n - 1 else 0 for k in range(n)]
    sizes = [n_z + m_e[k] + m_d[k] for k in range(n)]

    diag, rhs = [], []
    for k in range(n):
        sz = sizes[k]
        a = np.zeros((sz, sz))
        r = np.zeros(sz)
        a[:n_z, :n_z] = h_blocks[k]
        r[:n_z] = rhs_z[k]
        ofs = n_z
        if m_e[k]:
            g_mat = prob.nlp.eq_matrix[k]
            a[ofs : ofs + m_e[k], :n_z] = g_mat
            a[:n_z, ofs : ofs + m_e[k]] = g_mat.T
            a[ofs : ofs + m_e[k], ofs : ofs + m_e[k]] = -reg_dual * np.eye(m_e[k])
            r[ofs : ofs + m_e[k]] = -r_eq[k]
            ofs += m_e[k]
        if m_d[k]:
            c_mat = ev.c_jac[k]
            a[ofs : ofs + n_x, :n_z] = c_mat
            a[:n_z, ofs : ofs + n_x] = c_mat.T
            a[ofs : ofs + n_x, ofs : ofs + n_x] = -reg_dual * np.eye(n_x)
            r[ofs : ofs + n_x] = -r_def[k]
        diag.append(a)
        rhs.append(r)

    def coupling(k: int) -> np.ndarray:
        # defect row k (in block k) meets z_{k+1} through -E
        b = np.zeros((sizes[k + 1], sizes[k]))
        b[:n_z, n_z + m_e[k] :] = -prob.e_sel.T
        return b

    lu_factors = []
    couplings = [coupling(k) for k in range(n - 1)]
    gains = []
    try:
        lu_factors.append(scipy.linalg.lu_factor(diag[0]))
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise SolverError(f"singular KKT pivot block at stage 0: {exc}")
    for k in range(n - 1):
        b = couplings[k]
        lk = scipy.linalg.lu_solve(lu_factors[k], b.T, trans=1).T
        gains.append(lk)
        u_next = diag[k + 1] - lk @ b.T
        try:
            lu_factors.append(scipy.linalg.lu_factor(u_next))
        except (scipy.linalg.LinAlgError, ValueError) as exc:
            raise SolverError(f"singular KKT pivot block at stage {k + 1}: {exc}")

    def block_solve(rhs_blocks):
        fwd = [None] * n
        fwd[0] = rhs_blocks[0]
        for kk in range(n - 1):
            fwd[kk + 1] = rhs_blocks[kk + 1] - gains[kk] @ fwd[kk]
        out = [None] * n
        out[n - 1] = scipy.linalg.lu_solve(lu_factors[n - 1], fwd[n - 1])
        for kk in range(n - 2, -1, -1):
            out[kk] = scipy.linalg.lu_solve(
                lu_factors[kk], fwd[kk] - couplings[kk].T @ out[kk + 1]
            )
        return out

    sol = block_solve(rhs)
    # refine away the dual-regularization perturbation (the factorization is
    # of K + reg; the refinement targets the system with exact dual blocks)
    for _ in range(2):
        resid = [np.zeros(sizes[k]) for k in range(n)]
        for k in range(n):
            resid[k][n_z:] = -reg_dual * sol[k][n_z:]
        corr = block_solve(resid)
        sol = [s + c for s, c in zip(sol, corr)]
    if not all(np.all(np.isfinite(x)) for x in sol):
        raise SolverError("non-finite Newton direction")

    dz = np.zeros_like(it.z)
    dy_eq = []
    dy_def = np.zeros_like(it.y_def)
    for k in range(n):
        x = sol[k]
        dz[k] = x[:n_z]
        dy_eq.append(x[n_z : n_z + m_e[k]].copy())
        if m_d[k]:
            dy_def[k] = x[n_z + m_e[k] :]
    return _recover_direction(prob, it, ev, dz, dy_eq, dy_def, pieces, mu)


def dense_reference_step(
    nlp: MultistageNlp, it: Iterate, mu: float, delta: float,
    opts: SolverOptions | None = None,
):
    """Dense factorization of the identical condensed KKT system (test oracle).

    Also returns the assembled matrix so tests can inspect its stage sparsity.
    """
    opts = opts or SolverOptions()
    prob = _Problem(nlp, opts)
    prob.set_delta(delta)
    ev = prob.eval_all(it.z, order=1)
    hess = [nlp.cost_hessian(k) + 1e-6 * np.eye(nlp.n_z) for k in range(nlp.n_stages)]
    n, n_z, n_x = prob.n, prob.n_z, prob.n_x
    h_blocks, rhs_z, pieces = _condensed_pieces(prob, it, ev, hess, mu, opts.reg_floor)
    _, _, r_def, r_eq, _ = pieces

    m_e = [nlp.eq_matrix[k].shape[0] for k in range(n)]
    n_prim = n * n_z
    dim = n_prim + sum(m_e) + (n - 1) * n_x
    kkt = np.zeros((dim, dim))
    rhs = np.zeros(dim)
    for k in range(n):
        sl_ = slice(k * n_z, (k + 1) * n_z)
        kkt[sl_, sl_] = h_blocks[k]
        rhs[sl_] = rhs_z[k]
    ofs = n_prim
    for k in range(n):
        if not m_e[k]:
            continue
        rows = slice(ofs, ofs + m_e[k])
        cols = slice(k * n_z, (k + 1) * n_z)
        kkt[rows, cols] = nlp.eq_matrix[k]
        kkt[cols, rows] = nlp.eq_matrix[k].T
        kkt[rows, rows] = -opts.reg_dual * np.eye(m_e[k])
        rhs[rows] = -r_eq[k]
        ofs += m_e[k]
    for k in range(n - 1):
        rows = slice(ofs, ofs + n_x)
        cols = slice(k * n_z, (k + 1) * n_z)
        cols_next = slice((k + 1) * n_z, (k + 2) * n_z)
        kkt[rows, cols] = ev.c_jac[k]
        kkt[cols, rows] = ev.c_jac[k].T
        kkt[rows, cols_next] = -prob.e_sel
        kkt[cols_next, rows] = -prob.e_sel.T
        kkt[rows, rows] = -opts.reg_dual * np.eye(n_x)
        rhs[rows] = -r_def[k]
        ofs += n_x

    sol = scipy.linalg.solve(kkt, rhs)
    for _ in range(2):
        resid = np.zeros_like(rhs)
        resid[n_prim:] = -opts.reg_dual * sol[n_prim:]
        sol = sol + scipy.linalg.solve(kkt, resid)
    dz = sol[:n_prim].reshape(n, n_z)
    duals = sol[n_prim:]
    dy_eq = []
    ofs = 0
    for k in range(n):
        dy_eq.append(duals[ofs : ofs + m_e[k]].copy())
        ofs += m_e[k]
    dy_def = duals[ofs:].reshape(max(n - 1, 0), n_x) if n > 1 else np.zeros((0, n_x))
    direction = _recover_direction(prob, it, ev, dz, dy_eq, dy_def, pieces, mu)
    return direction, kkt


# ---------------------------------------------------------------------------
# Line search pieces
# ---------------------------------------------------------------------------


def _barrier_value(prob: _Problem, it: Iterate, ev: _Evals, mu: float) -> float:
    val = float(ev.f.sum())
    for slack, _, mask in prob._bound_triples(it):
        if mask.any():
            sm = slack[mask]
            if np.any(sm <= 0):
                return np.inf
            val -= mu * float(np.log(sm).sum())
    return val


def _infeasibility(prob: _Problem, it: Iterate, ev: _Evals) -> float:
    r_def, r_eq, r_h = prob.primal_residuals(it, ev)
    total = float(np.abs(r_def).sum()) + float(np.abs(r_h).sum())
    total += sum(float(np.abs(r).sum()) for r in r_eq)
    return total


def _max_step(values, deltas, lower, upper, has_l, has_u, tau: float) -> float:
    """Largest alpha keeping values + alpha*deltas tau-interior to the box."""
    alpha = 1.0
    m = has_l & (deltas < 0)
    if m.any():
        alpha = min(alpha, float((-tau * (values[m] - lower[m]) / deltas[m]).min()))
    m = has_u & (deltas > 0)
    if m.any():
        alpha = min(alpha, float((tau * (upper[m] - values[m]) / deltas[m]).min()))
    return alpha


def _dual_max_step(dual, ddual, mask, tau: float) -> float:
    alpha = 1.0
    m = mask & (ddual < 0)
    if m.any():
        alpha = min(alpha, float((-tau * dual[m] / ddual[m]).min()))
    return alpha


def _project_bound_duals(prob: _Problem, it: Iterate, mu: float) -> None:
    """Keep bound duals within a wide multiple of the central path."""
    kappa = 1e10
    for slack, dual, mask in prob._bound_triples(it):
        sm = np.where(mask, np.maximum(slack, 1e-300), 1.0)
        lo = mu / (kappa * sm)
        hi = kappa * mu / sm
        np.copyto(dual, np.where(mask, np.clip(dual, lo, hi), 0.0))


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def initial_iterate(
    nlp: MultistageNlp, z0: np.ndarray, mu: float, delta: float,
    opts: SolverOptions | None = None,
) -> Iterate:
    """Interior push of a primal guess plus centered duals."""
    opts = opts or SolverOptions()
    prob = _Problem(nlp, opts)
    prob.set_delta(delta)
    z = np.array(z0, dtype=float)
    if z.shape != (prob.n, prob.n_z):
        raise SolverError(
            f"initial trajectory has shape {z.shape}, expected {(prob.n, prob.n_z)}"
        )

    zl, zu = prob.zl, prob.zu
    push = opts.bound_push

    def _pushed(bound, other, sign):
        width = np.where(np.isfinite(other - bound), np.abs(other - bound), np.inf)
        margin = np.minimum(push * np.maximum(1.0, np.abs(bound)), 0.5 * width)
        return bound + sign * margin

    m = prob.has_zl
    z[m] = np.maximum(z[m], _pushed(zl[m], zu[m], +1.0))
    m = prob.has_zu
    z[m] = np.minimum(z[m], _pushed(zu[m], zl[m], -1.0))

    ev = prob.eval_all(z, order=0)
    s = ev.h.copy()
    hl, hu = prob.hl, prob.hu
    m = prob.has_hl
    s[m] = np.maximum(s[m], np.minimum(_pushed(hl[m], hu[m], +1.0), hl[m] + 1.0))
    m = prob.has_hu
    s[m] = np.minimum(s[m], np.maximum(_pushed(hu[m], hl[m], -1.0), hu[m] - 1.0))

    it = Iterate(
        z=z,
        s=s,
        y_def=np.zeros((max(prob.n - 1, 0), prob.n_x)),
        y_eq=[np.zeros(nlp.eq_matrix[k].shape[0]) for k in range(prob.n)],
        nu=np.zeros_like(s),
        wl=np.zeros_like(z),
        wu=np.zeros_like(z),
        sl=np.zeros_like(s),
        su=np.zeros_like(s),
    )
    m = prob.has_zl
    it.wl[m] = mu / (z[m] - zl[m])
    m = prob.has_zu
    it.wu[m] = mu / (zu[m] - z[m])
    m = prob.has_hl
    it.sl[m] = mu / (s[m] - hl[m])
    m = prob.has_hu
    it.su[m] = mu / (hu[m] - s[m])
    return it


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def kkt_residual(nlp: MultistageNlp, iterate: Iterate, mu: float, delta: float,
                 opts: SolverOptions | None = None) -> dict:
    """Stationarity / primal / complementarity norms at an iterate."""
    prob = _Problem(nlp, opts or SolverOptions())
    prob.set_delta(delta)
    ev = prob.eval_all(iterate.z, order=1)
    return prob.error(iterate, ev, mu)


def newton_step(nlp: MultistageNlp, iterate: Iterate, mu: float, delta: float,
                opts: SolverOptions | None = None) -> _Direction:
    """One structure-exploiting Newton direction at the given barrier weight."""
    opts = opts or SolverOptions()
    prob = _Problem(nlp, opts)
    prob.set_delta(delta)
    ev = prob.eval_all(iterate.z, order=1)
    hess = [nlp.cost_hessian(k) + 1e-6 * np.eye(nlp.n_z) for k in range(nlp.n_stages)]
    return _build_and_solve_kkt(prob, iterate, ev, hess, mu, opts.reg_floor, opts.reg_dual)


@dataclass
class HomotopyState:
    delta: float
    mu: float
    stage: int = 0
    finished: bool = False
    retried: bool = False
    reg_scale: float = 1.0


def update_homotopy(state: HomotopyState, opts: SolverOptions, inner_converged: bool) -> HomotopyState:
    """Advance the relaxation schedule after one inner solve.

    On success the relaxation shrinks geometrically (never below delta_final)
    and the barrier weight restarts proportionally; once the final relaxation
    is solved the homotopy reports finished.  On an inner failure the same
    relaxation is retried once with doubled regularization before aborting.
    """
    if inner_converged:
        if state.delta <= opts.delta_final * (1 + 1e-12):
            return HomotopyState(
                delta=state.delta, mu=state.mu, stage=state.stage, finished=True
            )
        new_delta = max(state.delta * opts.delta_factor, opts.delta_final)
        new_mu = max(opts.mu_init * (new_delta / opts.delta_init), opts.mu_floor)
        return HomotopyState(delta=new_delta, mu=new_mu, stage=state.stage + 1)
    if not state.retried:
        return HomotopyState(
            delta=state.delta, mu=state.mu, stage=state.stage,
            retried=True, reg_scale=2.0 * state.reg_scale,
        )
    return HomotopyState(
        delta=state.delta, mu=state.mu, stage=state.stage,
        finished=True, retried=True, reg_scale=state.reg_scale,
    )


def homotopy_schedule(opts: SolverOptions) -> list[float]:
    out = [opts.delta_init]
    while out[-1] > opts.delta_final * (1 + 1e-12):
        out.append(max(out[-1] * opts.delta_factor, opts.delta_final))
    return out


# ---------------------------------------------------------------------------
# Main solve loop
# ---------------------------------------------------------------------------


def _project_pd(mat: np.ndarray, floor: float) -> np.ndarray:
    """Symmetric positive-definite projection by eigenvalue clamping."""
    sym = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(sym)
    if vals[0] >= floor:
        return sym
    return (vecs * np.clip(vals, floor, None)) @ vecs.T


class _SolveState:
    def __init__(self, prob, it, ev, cost_h, opts, report, timings):
        self.prob = prob
        self.it = it
        self.ev = ev
        self.cost_h = cost_h
        self.opts = opts
        self.report = report
        self.timings = timings
        self.bfgs = [np.zeros((prob.n_z, prob.n_z)) for _ in range(prob.n)]
        self.total_iters = 0
        self.merit_rho = 1.0
        self.reg_primal = opts.reg_floor
        self.trust_radius = 10.0
        self.stall_count = 0
        self.best = it.copy()
        self.best_err = np.inf
        self.failure: str | None = None

    @property
    def eval_order(self) -> int:
        return 1 if self.opts.hessian == "gauss_newton" else 2

    def hessians(self):
        """Per-stage Lagrangian Hessian model.

        "newton": cost Hessian plus the dual-weighted analytic curvature of
        the stage inequality rows (exact for the complementarity products),
        left unprojected so the KKT matrix matches the Jacobian of the
        primal-dual residual map.  "hybrid": the same plus a damped-BFGS
        estimate of the transition-map curvature, projected positive definite.
        "gauss_newton": cost Hessian only.
        """
        ridge = 1e-6
        out = []
        for k in range(self.prob.n):
            hk = self.cost_h[k] + ridge * np.eye(self.prob.n_z)
            if self.opts.hessian != "gauss_newton":
                if self.prob.n_h and self.ev.h_hess is not None:
                    curv = np.einsum("i,ijk->jk", self.it.nu[k], self.ev.h_hess[k])
                    hk = hk + curv
                if self.opts.hessian == "hybrid":
                    hk = _project_pd(hk + self.bfgs[k], 1e-8)
            out.append(hk)
        return out

    def reset_curvature(self):
        for b in self.bfgs:
            b[:] = 0.0


def _step_iterate(it: Iterate, d: _Direction, alpha: float, alpha_dual: float) -> Iterate:
    return Iterate(
        z=it.z + alpha * d.dz,
        s=it.s + alpha * d.ds,
        y_def=it.y_def + alpha * d.dy_def,
        y_eq=[y + alpha * dy for y, dy in zip(it.y_eq, d.dy_eq)],
        nu=it.nu + alpha * d.dnu,
        wl=it.wl + alpha_dual * d.dwl,
        wu=it.wu + alpha_dual * d.dwu,
        sl=it.sl + alpha_dual * d.dsl,
        su=it.su + alpha_dual * d.dsu,
    )


def _raw_error(err: dict) -> float:
    return max(err["stationarity"], err["primal"], err["complementarity"])


def _theta_l1(prob: _Problem, z: np.ndarray, ev: _Evals) -> float:
    """l1 infeasibility of a primal point: defects, equalities, row-box violation."""
    total = 0.0
    for k in range(prob.n - 1):
        total += float(np.abs(ev.c[k] - prob.e_sel @ z[k + 1]).sum())
    for k in range(prob.n):
        g_mat = prob.nlp.eq_matrix[k]
        if g_mat.shape[0]:
            total += float(np.abs(g_mat @ z[k] - prob.nlp.eq_rhs[k]).sum())
    if prob.n_h:
        viol = np.maximum(prob.hl - ev.h, 0.0, where=prob.has_hl, out=np.zeros_like(ev.h))
        viol += np.maximum(ev.h - prob.hu, 0.0, where=prob.has_hu, out=np.zeros_like(ev.h))
        total += float(viol.sum())
    return total


def _synthetic_iterate(prob: _Problem, z: np.ndarray, ev: _Evals,
                       qp_sol=None, prev: Iterate | None = None) -> Iterate:
    """NLP-level iterate from a primal point plus the latest QP multipliers."""
    s = ev.h.copy()
    m = prob.has_hl
    s[m] = np.maximum(s[m], prob.hl[m])
    m = prob.has_hu
    s[m] = np.minimum(s[m], prob.hu[m])
    if qp_sol is not None:
        nu = qp_sol.y_h
        y_def = qp_sol.y_def
        y_eq = qp_sol.y_eq
        wl = np.where(prob.has_zl, qp_sol.d_dual_lo, 0.0)
        wu = np.where(prob.has_zu, qp_sol.d_dual_hi, 0.0)
    elif prev is not None:
        nu, y_def, y_eq, wl, wu = prev.nu, prev.y_def, prev.y_eq, prev.wl, prev.wu
    else:
        nu = np.zeros_like(s)
        y_def = np.zeros((max(prob.n - 1, 0), prob.n_x))
        y_eq = [np.zeros(prob.nlp.eq_matrix[k].shape[0]) for k in range(prob.n)]
        wl = np.zeros_like(z)
        wu = np.zeros_like(z)
    return Iterate(
        z=z, s=s, y_def=y_def, y_eq=y_eq, nu=nu,
        wl=wl, wu=wu, sl=np.maximum(-nu, 0.0), su=np.maximum(nu, 0.0),
    )


def _sqp_stage(st: _SolveState, outer: int, delta: float, tol: float, budget: int) -> bool:
    """SQP iterations at fixed relaxation delta.

    Each iteration solves one elastic l1 subproblem with the interior-point
    QP engine (fresh multipliers every time), then backtracks on the exact
    l1 merit.  Returns True once the stationarity/feasibility error meets tol.
    """
    prob, opts = st.prob, st.opts
    n, n_z = prob.n, prob.n_z
    for sqp_iter in range(budget):
        if st.total_iters >= opts.max_total:
            return False
        theta0 = _theta_l1(prob, st.it.z, st.ev)
        err = prob.error(st.it, st.ev, 0.0)
        if np.isfinite(err["scaled"]) and err["scaled"] < st.best_err:
            st.best_err = err["scaled"]
            st.best = st.it.copy()
        stat_ok = err["stationarity"] / err["s_d"] <= max(opts.stat_tol, tol)
        if err["primal"] <= tol and err["complementarity"] / err["s_c"] <= 10 * tol and stat_ok:
            return True

        # Hessian model: PD-projected cost + row curvature + defect BFGS
        hess = []
        for k in range(n):
            hk = st.cost_h[k] + 1e-8 * np.eye(n_z)
            if opts.hessian != "gauss_newton" and prob.n_h and st.ev.h_hess is not None:
                hk = hk + np.einsum("i,ijk->jk", st.it.nu[k], st.ev.h_hess[k])
            if opts.hessian == "hybrid":
                hk = hk + st.bfgs[k]
            hess.append(_project_pd(hk, 1e-8) + st.reg_primal * np.eye(n_z))

        r_def = np.zeros((max(n - 1, 0), prob.n_x))
        for k in range(n - 1):
            r_def[k] = st.ev.c[k] - prob.e_sel @ st.it.z[k + 1]
        r_eq = [prob.nlp.eq_matrix[k] @ st.it.z[k] - prob.nlp.eq_rhs[k] for k in range(n)]

        qp = StageQp(
            n_stages=n, n_z=n_z, n_h=prob.n_h, n_x=prob.n_x,
            e_sel=prob.e_sel,
            hess=hess,
            grad=st.ev.g,
            h_jac=st.ev.h_jac if prob.n_h else None,
            h_val=st.ev.h if prob.n_h else None,
            hl=prob.hl if prob.n_h else None,
            hu=prob.hu if prob.n_h else None,
            eq_mat=prob.nlp.eq_matrix,
            r_eq=r_eq,
            c_jac=st.ev.c_jac,
            r_def=r_def,
            dl=np.maximum(prob.zl - st.it.z, -st.trust_radius),
            du=np.minimum(prob.zu - st.it.z, st.trust_radius),
            rho=st.merit_rho,
        )

        t0 = time.perf_counter()
        sol = None
        for _ in range(3):
            try:
                cand = solve_qp(qp, tol=1e-10, max_iters=60)
            except QpError:
                st.reg_primal = max(st.reg_primal * 100.0, 1e-6)
                break
            if cand.status != "optimal" and (sol is None or cand.residual > 1e-5):
                # unconverged subproblem: accept only a decent approximation
                if cand.residual > 1e-5:
                    sol = None
                    st.reg_primal = max(st.reg_primal * 10.0, 1e-7)
                    st.trust_radius = max(0.25 * st.trust_radius, 1e-3)
                    break
            sol = cand
            dual_inf = max(
                float(np.abs(sol.y_def).max(initial=0.0)),
                max((float(np.abs(y).max(initial=0.0)) for y in sol.y_eq), default=0.0),
                float(np.abs(sol.y_h).max(initial=0.0)),
            )
            if sol.elastic_l1 <= max(1e-10, 1e-3 * theta0) or st.merit_rho >= 1e8:
                if st.merit_rho < 1.2 * dual_inf:
                    st.merit_rho = min(max(2.0 * st.merit_rho, 1.2 * dual_inf), 1e8)
                break
            if sol.status != "optimal":
                break
            st.merit_rho = min(st.merit_rho * 10.0, 1e8)
            qp.rho = st.merit_rho
        st.timings["factorize"] += time.perf_counter() - t0
        st.total_iters += 1
        if sol is None:
            if st.reg_primal > 1e8:
                st.failure = "restoration-failure"
                return False
            continue

        d = sol.d
        step_inf = float(np.abs(d).max(initial=0.0))

        # penalty large enough that the model predicts real feasibility gain
        gd = float(np.sum(st.ev.g * d))
        quad = sum(float(d[k] @ hess[k] @ d[k]) for k in range(n))
        closable = theta0 - sol.elastic_l1
        if closable > 1e-12:
            needed = (gd + 0.5 * quad) / (0.5 * closable)
            if st.merit_rho < needed:
                st.merit_rho = min(max(2.0 * st.merit_rho, 1.1 * needed), 1e8)
        pred = -(gd + 0.5 * quad) + st.merit_rho * closable
        merit0 = float(st.ev.f.sum()) + st.merit_rho * theta0

        # exact l1 merit line search (Armijo against the model decrease)
        alpha = 1.0
        accepted = False
        ev_trial = None
        merit_t = merit0
        t0 = time.perf_counter()
        while alpha >= opts.min_alpha:
            z_trial = st.it.z + alpha * d
            try:
                ev_trial = prob.eval_all(z_trial, order=0)
            except EvaluationError:
                alpha *= 0.5
                continue
            merit_t = float(ev_trial.f.sum()) + st.merit_rho * _theta_l1(
                prob, z_trial, ev_trial
            )
            if merit_t <= merit0 - opts.armijo * alpha * max(pred, 0.0) + 1e-15 * abs(merit0):
                accepted = True
                break
            alpha *= 0.5
        st.timings["line_search"] += time.perf_counter() - t0

        if not accepted:
            st.reg_primal = min(max(st.reg_primal * 100.0, 1e-6), 1e9)
            st.trust_radius = max(0.25 * st.trust_radius, 1e-4)
            st.reset_curvature()
            if st.reg_primal >= 1e9:
                st.failure = "restoration-failure"
                return False
            continue

        # trust region driven by the achieved-versus-predicted merit decrease
        ared = merit0 - merit_t
        ratio = ared / max(alpha * pred, 1e-300) if pred > 0 else 1.0
        if ratio < 0.1:
            st.trust_radius = max(0.25 * st.trust_radius, 1e-4)
        elif ratio > 0.7 and alpha >= 0.99:
            st.trust_radius = min(2.0 * st.trust_radius, 50.0)
        if ared <= 1e-12 * max(1.0, abs(merit0)):
            st.stall_count += 1
            if st.stall_count == 8:
                st.reg_primal = min(max(st.reg_primal * 100.0, 1e-6), 1e9)
                st.trust_radius = max(0.25 * st.trust_radius, 1e-4)
                st.reset_curvature()
            elif st.stall_count > 24:
                st.failure = "restoration-failure"
                return False
        else:
            st.stall_count = 0

        old_z = st.it.z.copy()
        old_ev = st.ev
        z_new = st.it.z + alpha * d
        t0 = time.perf_counter()
        ev_new = prob.eval_all(z_new, order=st.eval_order)
        st.timings["evaluate"] += time.perf_counter() - t0
        st.it = _synthetic_iterate(prob, z_new, ev_new, qp_sol=sol)
        st.ev = ev_new
        if opts.hessian == "hybrid":
            _bfgs_update(st.bfgs, prob, old_z, old_ev, st.it, st.ev, opts)
        st.reg_primal = max(opts.reg_floor, st.reg_primal * 0.3)

        if st.total_iters % 5 == 0 or sqp_iter <= 2 or alpha < 1.0:
            st.report.iteration_log.append(
                f"outer={outer} delta={delta:.1e} iter={st.total_iters} "
                f"obj={float(st.ev.f.sum()):.6e} theta={theta0:.3e} "
                f"stat={err['stationarity']:.3e} step={step_inf:.2e} "
                f"alpha={alpha:.2e} rho={st.merit_rho:.1e} tr={st.trust_radius:.1e} "
                f"qp={sol.iterations}"
            )
    return False


def _run_barrier_stage(st: _SolveState, outer: int, delta: float, mu_start: float,
                       mu_end: float, tol: float, budget: int) -> bool:
    """Drive the barrier problem at fixed delta from mu_start down to mu_end.

    Returns True when the mu_end barrier problem is solved and the mu=0
    residuals meet tol.
    """
    prob, opts = st.prob, st.opts
    mu = mu_start
    iters = 0
    stalls = 0
    while iters < budget and st.total_iters < opts.max_total:
        it = st.it
        err = prob.error(it, st.ev, mu)
        if np.isfinite(err["scaled"]) and err["scaled"] < st.best_err:
            st.best_err = err["scaled"]
            st.best = it.copy()

        if err["scaled"] <= opts.kappa_eps * mu:
            if mu <= mu_end * (1 + 1e-12):
                if prob.error(it, st.ev, 0.0)["scaled"] <= tol:
                    return True
                if mu <= opts.mu_floor * (1 + 1e-12):
                    return False  # barrier exhausted below the floor
            mu = max(mu * opts.mu_factor, opts.mu_floor)
            _project_bound_duals(prob, it, mu)
            continue

        try:
            t0 = time.perf_counter()
            direction = _build_and_solve_kkt(
                prob, it, st.ev, st.hessians(), mu, st.reg_primal, opts.reg_dual
            )
            st.timings["factorize"] += time.perf_counter() - t0
        except SolverError:
            st.reg_primal = max(st.reg_primal * 100.0, 1e-6)
            st.reset_curvature()
            iters += 1
            st.total_iters += 1
            if st.reg_primal > 1e8:
                st.failure = "restoration-failure"
                return False
            continue

        tau = max(opts.ftb, 1.0 - mu)
        a_z = _max_step(it.z, direction.dz, prob.zl, prob.zu, prob.has_zl, prob.has_zu, tau)
        a_s = _max_step(it.s, direction.ds, prob.hl, prob.hu, prob.has_hl, prob.has_hu, tau)
        a_du = min(
            _dual_max_step(it.wl, direction.dwl, prob.has_zl, tau),
            _dual_max_step(it.wu, direction.dwu, prob.has_zu, tau),
            _dual_max_step(it.sl, direction.dsl, prob.has_hl, tau),
            _dual_max_step(it.su, direction.dsu, prob.has_hu, tau),
        )

        t0 = time.perf_counter()
        if opts.line_search == "residual":
            accepted, alpha, trial, ev_trial = _residual_line_search(
                st, direction, mu, min(a_z, a_s, a_du), _raw_error(err)
            )
        else:
            accepted, alpha, trial, ev_trial = _merit_line_search(
                st, direction, mu, min(a_z, a_s), a_du
            )
        st.timings["line_search"] += time.perf_counter() - t0

        iters += 1
        st.total_iters += 1
        if not accepted:
            stalls += 1
            st.reg_primal = min(max(st.reg_primal * 100.0, 1e-6), 1e9)
            st.reset_curvature()
            if st.reg_primal >= 1e9 or stalls > 12:
                st.failure = "restoration-failure"
                return False
            continue
        stalls = 0

        old_z = st.it.z.copy()
        old_ev = st.ev
        st.it = trial
        _project_bound_duals(prob, st.it, mu)
        if ev_trial is not None and (st.eval_order < 2 or ev_trial.h_hess is not None):
            st.ev = ev_trial
        else:
            t0 = time.perf_counter()
            st.ev = prob.eval_all(st.it.z, order=st.eval_order)
            st.timings["evaluate"] += time.perf_counter() - t0

        if opts.hessian == "hybrid":
            _bfgs_update(st.bfgs, prob, old_z, old_ev, st.it, st.ev, opts)
        st.reg_primal = max(opts.reg_floor, st.reg_primal * 0.1)

        if st.total_iters % 5 == 0 or iters <= 2:
            st.report.iteration_log.append(
                f"outer={outer} delta={delta:.1e} iter={st.total_iters} mu={mu:.2e} "
                f"obj={float(st.ev.f.sum()):.6e} stat={err['stationarity']:.3e} "
                f"prim={err['primal']:.3e} comp={err['complementarity']:.3e} "
                f"alpha={alpha:.2e}"
            )
    return False


def _residual_line_search(st: _SolveState, d: _Direction, mu: float,
                          alpha_max: float, err0: float):
    """Backtrack on the full primal-dual residual norm.

    All variable classes move with one step length, capped by the fraction-to-
    boundary rule; a step is accepted when it decreases the KKT residual of
    the barrier problem, which rules out dual wind-up by construction.
    """
    prob, opts = st.prob, st.opts
    alpha = alpha_max
    while alpha >= opts.min_alpha:
        trial = _step_iterate(st.it, d, alpha, alpha)
        try:
            t0 = time.perf_counter()
            ev_t = prob.eval_all(trial.z, order=st.eval_order)
            st.timings["evaluate"] += time.perf_counter() - t0
        except EvaluationError:
            alpha *= 0.5
            continue
        err_t = _raw_error(prob.error(trial, ev_t, mu))
        if err_t <= (1.0 - opts.armijo * alpha) * err0:
            return True, alpha, trial, ev_t
        alpha *= 0.5
    return False, 0.0, None, None


def _merit_line_search(st: _SolveState, d: _Direction, mu: float,
                       alpha_max: float, alpha_dual: float):
    """Classic l1 exact-penalty backtracking on (z, s); duals step separately."""
    prob, opts = st.prob, st.opts
    it = st.it
    dual_scale = max(
        float(np.abs(it.y_def + d.dy_def).max()) if it.y_def.size else 0.0,
        max(
            (float(np.abs(y + dy).max()) for y, dy in zip(it.y_eq, d.dy_eq) if y.size),
            default=0.0,
        ),
        float(np.abs(it.nu + d.dnu).max()) if it.nu.size else 0.0,
    )
    st.merit_rho = max(st.merit_rho, 1.5 * dual_scale + 0.1)

    phi0 = _barrier_value(prob, it, st.ev, mu)
    theta0 = _infeasibility(prob, it, st.ev)
    _, grad_mu_z, _, _ = _sigma_terms(it, prob, mu)
    grad_dot = float(np.sum((st.ev.g + grad_mu_z) * d.dz))
    m = prob.has_hl
    if m.any():
        grad_dot -= mu * float(np.sum(d.ds[m] / (it.s[m] - prob.hl[m])))
    m = prob.has_hu
    if m.any():
        grad_dot += mu * float(np.sum(d.ds[m] / (prob.hu[m] - it.s[m])))
    d_merit = grad_dot - st.merit_rho * theta0
    merit_0 = phi0 + st.merit_rho * theta0

    alpha = alpha_max
    while alpha >= opts.min_alpha:
        trial = _step_iterate(it, d, alpha, alpha_dual)
        try:
            t0 = time.perf_counter()
            ev_t = prob.eval_all(trial.z, order=0)
            st.timings["evaluate"] += time.perf_counter() - t0
        except EvaluationError:
            alpha *= 0.5
            continue
        merit_t = _barrier_value(prob, trial, ev_t, mu) + st.merit_rho * _infeasibility(
            prob, trial, ev_t
        )
        if merit_t <= merit_0 + opts.armijo * alpha * min(d_merit, 0.0) + 1e-12 * abs(merit_0):
            return True, alpha, trial, None
        alpha *= 0.5
    return False, 0.0, None, None


def solve(
    nlp: MultistageNlp,
    opts: SolverOptions | None = None,
    init: np.ndarray | None = None,
) -> tuple[np.ndarray, SolverReport]:
    """Homotopy + interior point solve; returns (trajectory, report)."""
    opts = opts or SolverOptions()
    report = SolverReport()
    t_start = time.perf_counter()
    timings = {"evaluate": 0.0, "factorize": 0.0, "line_search": 0.0}

    prob = _Problem(nlp, opts)
    if init is None:
        init = np.zeros((nlp.n_stages, nlp.n_z))
    schedule = homotopy_schedule(opts)
    it = initial_iterate(nlp, init, opts.mu_init, schedule[0], opts)
    cost_h = [nlp.cost_hessian(k) for k in range(nlp.n_stages)]

    st = _SolveState(prob, it, None, cost_h, opts, report, timings)
    t0 = time.perf_counter()
    st.ev = prob.eval_all(it.z, order=st.eval_order)
    timings["evaluate"] += time.perf_counter() - t0
    st.it = _synthetic_iterate(prob, it.z, st.ev)
    status = "max-iters"

    for outer, delta in enumerate(schedule):
        final_stage = delta <= opts.delta_final * (1 + 1e-12)
        old_scale = prob.row_scale.copy()
        prob.set_delta(delta)
        tol = opts.kkt_tol if final_stage else max(1e-5, opts.kkt_tol)

        if outer > 0:
            # carry the multiplier estimates into the new row scaling
            ratio = old_scale / prob.row_scale
            st.it.nu *= ratio
            st.it.sl = np.maximum(-st.it.nu, 0.0)
            st.it.su = np.maximum(st.it.nu, 0.0)
            t0 = time.perf_counter()
            st.ev = prob.eval_all(st.it.z, order=st.eval_order)
            timings["evaluate"] += time.perf_counter() - t0
            st.it = _synthetic_iterate(prob, st.it.z, st.ev, prev=st.it)

        ok = _sqp_stage(st, outer, delta, tol, opts.max_inner)
        report.outer_iters = outer + 1
        if not ok and st.failure is None:
            # one retry with doubled regularization before aborting
            report.retries += 1
            st.reg_primal = max(2.0 * st.reg_primal, 2.0 * opts.reg_floor)
            st.reset_curvature()
            ok = _sqp_stage(st, outer, delta, tol, opts.max_inner // 2)
        if not ok:
            status = st.failure or "max-iters"
            break
        if final_stage:
            status = "converged"
            break

    report.inner_iters = st.total_iters

    # recompute the final residuals fresh from the returned iterate
    final_it = st.it if status == "converged" else st.best
    prob.set_delta(opts.delta_final)
    ev_final = prob.eval_all(final_it.z, order=1)
    err_final = prob.error(final_it, ev_final, 0.0)
    report.kkt_stationarity = err_final["stationarity"]
    report.kkt_primal = err_final["primal"]
    report.kkt_complementarity = err_final["complementarity"]
    report.objective = float(ev_final.f.sum())
    report.delta_reached = prob.delta

    labels = nlp.h_labels
    h = ev_final.h / prob.row_scale  # physical units for reporting

    def _maxabs(name: str) -> float:
        if name in labels and h.size:
            return float(np.abs(h[:, labels.index(name)]).max())
        return 0.0

    report.max_gap_force_product = _maxabs("gap_force_product")
    report.max_restitution = _maxabs("restitution")
    report.max_friction_product_v = _maxabs("friction_product_v")
    report.max_friction_product_force = _maxabs("friction_product_force")
    report.min_gap = (
        float(h[:, labels.index("gap")].min()) if "gap" in labels and h.size else 0.0
    )

    if status == "converged":
        # never a silent success: bounds and primal feasibility rechecked fresh
        viol = max(
            float(np.maximum(prob.zl - final_it.z, 0.0).max(initial=0.0)),
            float(np.maximum(final_it.z - prob.zu, 0.0).max(initial=0.0)),
        )
        if viol > 1e-12 or report.kkt_primal > 10 * opts.kkt_tol:
            status = "max-iters"
    report.status = status
    timings["total"] = time.perf_counter() - t_start
    report.timings_ms = {k: 1e3 * v for k, v in timings.items()}
    for line in report.iteration_log:
        logger.debug("%s", line)
    return final_it.z.copy(), report


def _bfgs_update(bfgs, prob: _Problem, old_z, old_ev, it: Iterate, ev: _Evals,
                 opts: SolverOptions) -> None:
    """Damped per-stage BFGS on the transition-map curvature.

    The inequality rows carry exact analytic curvature already, so the secant
    pairs measure only the defect terms of the stage Lagrangian.
    """
    n = prob.n
    for k in range(n - 1):
        s_vec = it.z[k] - old_z[k]
        sn = float(np.linalg.norm(s_vec))
        if sn < 1e-12 or sn > 1e3:
            continue
        y_vec = (ev.c_jac[k] - old_ev.c_jac[k]).T @ it.y_def[k]
        b = bfgs[k]
        bs = b @ s_vec + 1e-6 * s_vec  # include the base ridge in the metric
        sbs = float(s_vec @ bs)
        sy = float(s_vec @ y_vec)
        if sy < 0.2 * sbs:
            theta = 0.8 * sbs / (sbs - sy) if sbs > sy else 1.0
            y_vec = theta * y_vec + (1.0 - theta) * bs
            sy = float(s_vec @ y_vec)
        if sy <= 1e-12:
            continue
        b += np.outer(y_vec, y_vec) / sy - np.outer(bs, bs) / max(sbs, 1e-12)
        if np.linalg.norm(b, ord="fro") > opts.bfgs_reset_norm:
            b[:] = 0.0
