"""Stage-structured convex QP solver (Mehrotra predictor-corrector).

Solves the elastic l1 subproblems of the outer SQP iteration:

    min  sum_k  1/2 d_k' B_k d_k + g_k' d_k + rho * 1'(elastics_k)
    s.t. J_k d_k - s_k + p_k - n_k = -h0_k          (stage rows)
         G_k d_k + e_k - f_k       = -req_k         (stage equalities)
         C_k d_k - E d_{k+1} + a_k - b_k = -rdef_k  (transition defects)
         d_k in [dl_k, du_k],  s_k in [hl_k, hu_k],  elastics >= 0

The elastic variables make every subproblem feasible; at the solution of a
consistent linearization they vanish.  All constraint rows touch one stage
(defects reach d_{k+1} through the constant selector E), so each primal-dual
Newton system is symmetric block-tridiagonal in the stage index and is
factorized by forward block elimination, linear in the number of stages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg


class QpError(RuntimeError):
    pass


@dataclass
class StageQp:
    """One SQP subproblem in stage-separable form."""

    n_stages: int
    n_z: int
    n_h: int
    n_x: int
    e_sel: np.ndarray               # (n_x, n_z)
    hess: list                      # B_k, (n_z, n_z) positive definite
    grad: np.ndarray                # (N, n_z)
    h_jac: np.ndarray | None        # (N, n_h, n_z)
    h_val: np.ndarray | None        # (N, n_h) current row values
    hl: np.ndarray | None           # (N, n_h)
    hu: np.ndarray | None
    eq_mat: list                    # per stage (m_e, n_z)
    r_eq: list                      # per stage (m_e,)
    c_jac: np.ndarray | None        # (N, n_x, n_z)
    r_def: np.ndarray               # (N-1, n_x)
    dl: np.ndarray                  # (N, n_z) step box
    du: np.ndarray
    rho: float


@dataclass
class QpSolution:
    status: str                     # "optimal" | "max-iters"
    d: np.ndarray                   # (N, n_z) step
    s: np.ndarray                   # (N, n_h) row values after the step
    y_h: np.ndarray                 # (N, n_h) row duals (nu convention)
    y_eq: list                      # per stage (m_e,)
    y_def: np.ndarray               # (N-1, n_x)
    d_dual_lo: np.ndarray           # (N, n_z) step-box duals
    d_dual_hi: np.ndarray
    elastic_l1: float               # total elastic mass at the solution
    iterations: int
    residual: float
    mu: float


class _Layout:
    """Per-stage variable/row offsets of the elastic QP."""

    def __init__(self, qp: StageQp, k: int):
        n_z, n_h, n_x = qp.n_z, qp.n_h, qp.n_x
        m_e = qp.eq_mat[k].shape[0]
        has_def = k < qp.n_stages - 1
        self.k = k
        self.m_e = m_e
        self.has_def = has_def
        ofs = 0
        self.d = slice(ofs, ofs + n_z); ofs += n_z
        self.s = slice(ofs, ofs + n_h); ofs += n_h
        self.p = slice(ofs, ofs + n_h); ofs += n_h
        self.n = slice(ofs, ofs + n_h); ofs += n_h
        nd = n_x if has_def else 0
        self.a = slice(ofs, ofs + nd); ofs += nd
        self.b = slice(ofs, ofs + nd); ofs += nd
        self.e = slice(ofs, ofs + m_e); ofs += m_e
        self.f = slice(ofs, ofs + m_e); ofs += m_e
        self.width = ofs
        ofs = 0
        self.row_h = slice(ofs, ofs + n_h); ofs += n_h
        self.row_eq = slice(ofs, ofs + m_e); ofs += m_e
        self.row_def = slice(ofs, ofs + nd); ofs += nd
        self.rows = ofs


def _build_stage(qp: StageQp, lay: _Layout):
    """Constant pieces of stage k: A_k, rhs_k, cost, boxes, row scaling.

    Each constraint row is equilibrated to unit infinity norm; the elastic
    columns are scaled along with the row so they still absorb one unit of
    scaled violation per unit of penalty.
    """
    k = lay.k
    n_h, n_x = qp.n_h, qp.n_x
    a_mat = np.zeros((lay.rows, lay.width))
    rhs = np.zeros(lay.rows)
    if n_h:
        a_mat[lay.row_h, lay.d] = qp.h_jac[k]
        a_mat[lay.row_h, lay.s] = -np.eye(n_h)
        a_mat[lay.row_h, lay.p] = np.eye(n_h)
        a_mat[lay.row_h, lay.n] = -np.eye(n_h)
        rhs[lay.row_h] = -qp.h_val[k]
    if lay.m_e:
        a_mat[lay.row_eq, lay.d] = qp.eq_mat[k]
        a_mat[lay.row_eq, lay.e] = np.eye(lay.m_e)
        a_mat[lay.row_eq, lay.f] = -np.eye(lay.m_e)
        rhs[lay.row_eq] = -qp.r_eq[k]
    if lay.has_def:
        a_mat[lay.row_def, lay.d] = qp.c_jac[k]
        a_mat[lay.row_def, lay.a] = np.eye(n_x)
        a_mat[lay.row_def, lay.b] = -np.eye(n_x)
        rhs[lay.row_def] = -qp.r_def[k]

    row_norm = np.maximum(np.abs(a_mat).max(axis=1), 1.0)
    a_mat /= row_norm[:, None]
    rhs /= row_norm

    cost = np.zeros(lay.width)
    cost[lay.d] = qp.grad[k]
    for sl in (lay.p, lay.n, lay.a, lay.b, lay.e, lay.f):
        cost[sl] = qp.rho

    lo = np.full(lay.width, 0.0)
    hi = np.full(lay.width, np.inf)
    lo[lay.d] = qp.dl[k]
    hi[lay.d] = qp.du[k]
    if n_h:
        lo[lay.s] = qp.hl[k]
        hi[lay.s] = qp.hu[k]
    return a_mat, rhs, cost, lo, hi, row_norm


def _interior_start(lo, hi, preferred):
    """Strictly interior point of a box, biased toward `preferred`."""
    x = preferred.copy()
    width = hi - lo
    fin_l = np.isfinite(lo)
    fin_u = np.isfinite(hi)
    both = fin_l & fin_u
    margin = np.where(both, np.minimum(0.1 * width, 1.0), 1.0)
    m = fin_l
    x[m] = np.maximum(x[m], (lo + margin)[m])
    m = fin_u
    x[m] = np.minimum(x[m], (hi - margin)[m])
    tiny = both & (width < 1e-12)
    x[tiny] = 0.5 * (lo[tiny] + hi[tiny])
    return x


def solve_qp(qp: StageQp, tol: float = 1e-9, max_iters: int = 60) -> QpSolution:
    """Primal-dual predictor-corrector on the elastic stage QP."""
    n = qp.n_stages
    lays = [_Layout(qp, k) for k in range(n)]
    stages = [_build_stage(qp, lay) for lay in lays]
    widths = [lay.width for lay in lays]
    rows = [lay.rows for lay in lays]
    row_norms = [s[5] for s in stages]

    # coupling: defect rows of stage k hit the d-part of stage k+1 through -E,
    # equilibrated with the same row scaling as the stage matrix
    def coupling_rows(k):
        c = np.zeros((rows[k], widths[k + 1]))
        if lays[k].has_def:
            c[lays[k].row_def, lays[k + 1].d] = -qp.e_sel
            c[lays[k].row_def] /= row_norms[k][lays[k].row_def, None]
        return c

    couplings = [coupling_rows(k) for k in range(n - 1)]

    x = []
    y = [np.zeros(rows[k]) for k in range(n)]
    zl = []
    zu = []
    fin_l = []
    fin_u = []
    for k in range(n):
        _, _, _, lo, hi, _ = stages[k]
        pref = np.zeros(widths[k])
        if qp.n_h:
            pref[lays[k].s] = qp.h_val[k]
        pref[lays[k].p] = 1.0
        pref[lays[k].n] = 1.0
        if lays[k].has_def:
            pref[lays[k].a] = 1.0
            pref[lays[k].b] = 1.0
        pref[lays[k].e] = 1.0
        pref[lays[k].f] = 1.0
        x.append(_interior_start(lo, hi, pref))
        fl = np.isfinite(lo)
        fu = np.isfinite(hi)
        fin_l.append(fl)
        fin_u.append(fu)
        zl.append(np.where(fl, 1.0, 0.0))
        zu.append(np.where(fu, 1.0, 0.0))

    n_comp = sum(int(fin_l[k].sum() + fin_u[k].sum()) for k in range(n))
    reg_p = 1e-10
    reg_d = 1e-10

    def residuals():
        r_d = []
        r_p = []
        gap = 0.0
        for k in range(n):
            a_mat, rhs, cost, lo, hi, _ = stages[k]
            rd = cost.copy()
            rd[lays[k].d] += qp.hess[k] @ x[k][lays[k].d]
            rd += a_mat.T @ y[k]
            if k > 0 and lays[k - 1].has_def:
                rd += couplings[k - 1].T[:, lays[k - 1].row_def] @ y[k - 1][lays[k - 1].row_def]
            rd -= zl[k]
            rd += zu[k]
            r_d.append(rd)
            rp = a_mat @ x[k] - rhs
            if k < n - 1:
                rp += couplings[k] @ x[k + 1]
            r_p.append(rp)
            m = fin_l[k]
            gap += float(((x[k][m] - lo[m]) * zl[k][m]).sum())
            m = fin_u[k]
            gap += float(((hi[m] - x[k][m]) * zu[k][m]).sum())
        mu = gap / max(n_comp, 1)
        return r_d, r_p, mu

    def sigma_terms():
        sig = []
        for k in range(n):
            _, _, _, lo, hi, _ = stages[k]
            s_k = np.zeros(widths[k])
            m = fin_l[k]
            s_k[m] += np.minimum(zl[k][m] / np.maximum(x[k][m] - lo[m], 1e-30), 1e14)
            m = fin_u[k]
            s_k[m] += np.minimum(zu[k][m] / np.maximum(hi[m] - x[k][m], 1e-30), 1e14)
            sig.append(s_k)
        return sig

    def factorize(sig_list):
        diag = []
        for k in range(n):
            a_mat, _, _, _, _, _ = stages[k]
            w, m = widths[k], rows[k]
            blk = np.zeros((w + m, w + m))
            blk[:w, :w] = np.diag(sig_list[k] + reg_p)
            dsl = lays[k].d
            blk[dsl, dsl] = qp.hess[k] + np.diag((sig_list[k] + reg_p)[dsl])
            blk[:w, w:] = a_mat.T
            blk[w:, :w] = a_mat
            blk[w:, w:] = -reg_d * np.eye(m)
            diag.append(blk)

        def block_coupling(k):
            b = np.zeros((widths[k + 1] + rows[k + 1], widths[k] + rows[k]))
            b[: widths[k + 1], widths[k]:] = couplings[k].T
            return b

        bcs = [block_coupling(k) for k in range(n - 1)]
        lus = []
        gains = []
        try:
            lus.append(scipy.linalg.lu_factor(diag[0]))
        except (scipy.linalg.LinAlgError, ValueError) as exc:
            raise QpError(f"singular stage block 0: {exc}")
        for k in range(n - 1):
            lk = scipy.linalg.lu_solve(lus[k], bcs[k].T, trans=1).T
            gains.append(lk)
            nxt = diag[k + 1] - lk @ bcs[k].T
            try:
                lus.append(scipy.linalg.lu_factor(nxt))
            except (scipy.linalg.LinAlgError, ValueError) as exc:
                raise QpError(f"singular stage block {k + 1}: {exc}")

        def apply(rhs_list):
            fwd = [None] * n
            fwd[0] = rhs_list[0]
            for kk in range(n - 1):
                fwd[kk + 1] = rhs_list[kk + 1] - gains[kk] @ fwd[kk]
            out = [None] * n
            out[n - 1] = scipy.linalg.lu_solve(lus[n - 1], fwd[n - 1])
            for kk in range(n - 2, -1, -1):
                out[kk] = scipy.linalg.lu_solve(
                    lus[kk], fwd[kk] - bcs[kk].T @ out[kk + 1]
                )
            for kk in range(2):
                resid = []
                for k2 in range(n):
                    w2 = widths[k2]
                    rr = np.zeros(w2 + rows[k2])
                    rr[:w2] = reg_p * out[k2][:w2]
                    rr[w2:] = -reg_d * out[k2][w2:]
                    resid.append(rr)
                corr = apply_once(resid)
                out = [s + c for s, c in zip(out, corr)]
            return out

        def apply_once(rhs_list):
            fwd = [None] * n
            fwd[0] = rhs_list[0]
            for kk in range(n - 1):
                fwd[kk + 1] = rhs_list[kk + 1] - gains[kk] @ fwd[kk]
            out = [None] * n
            out[n - 1] = scipy.linalg.lu_solve(lus[n - 1], fwd[n - 1])
            for kk in range(n - 2, -1, -1):
                out[kk] = scipy.linalg.lu_solve(
                    lus[kk], fwd[kk] - bcs[kk].T @ out[kk + 1]
                )
            return out

        return apply

    def newton_rhs(r_d, r_p, rc_lo, rc_hi):
        rhs_blocks = []
        for k in range(n):
            _, _, _, lo, hi, _ = stages[k]
            w = widths[k]
            rb = np.zeros(w + rows[k])
            lo_term = np.zeros(w)
            m = fin_l[k]
            lo_term[m] = rc_lo[k][m] / np.maximum(x[k][m] - lo[m], 1e-30)
            hi_term = np.zeros(w)
            m = fin_u[k]
            hi_term[m] = rc_hi[k][m] / np.maximum(hi[m] - x[k][m], 1e-30)
            rb[:w] = -r_d[k] + lo_term - hi_term
            rb[w:] = -r_p[k]
            rhs_blocks.append(rb)
        return rhs_blocks

    def complementarity_targets(mu_target, dxa=None, dzl_a=None, dzu_a=None):
        rc_lo = []
        rc_hi = []
        for k in range(n):
            _, _, _, lo, hi, _ = stages[k]
            cl = np.zeros(widths[k])
            ch = np.zeros(widths[k])
            m = fin_l[k]
            cl[m] = mu_target - (x[k][m] - lo[m]) * zl[k][m]
            m = fin_u[k]
            ch[m] = mu_target - (hi[m] - x[k][m]) * zu[k][m]
            if dxa is not None:
                cap = 10.0 * max(mu_target, 1e-16)
                m = fin_l[k]
                cl[m] -= np.clip(dxa[k][m] * dzl_a[k][m], -cap, cap)
                m = fin_u[k]
                ch[m] -= np.clip(-dxa[k][m] * dzu_a[k][m], -cap, cap)
            rc_lo.append(cl)
            rc_hi.append(ch)
        return rc_lo, rc_hi

    def recover_bound_steps(sol, rc_lo, rc_hi):
        dx = [sol[k][: widths[k]] for k in range(n)]
        dy = [sol[k][widths[k]:] for k in range(n)]
        dzl = []
        dzu = []
        for k in range(n):
            _, _, _, lo, hi, _ = stages[k]
            dl_ = np.zeros(widths[k])
            du_ = np.zeros(widths[k])
            m = fin_l[k]
            dl_[m] = (rc_lo[k][m] - zl[k][m] * dx[k][m]) / np.maximum(
                x[k][m] - lo[m], 1e-30
            )
            m = fin_u[k]
            du_[m] = (rc_hi[k][m] + zu[k][m] * dx[k][m]) / np.maximum(
                hi[m] - x[k][m], 1e-30
            )
            dzl.append(dl_)
            dzu.append(du_)
        return dx, dy, dzl, dzu

    def max_alpha(dx, dzl, dzu, tau):
        a_p = 1.0
        a_d = 1.0
        for k in range(n):
            _, _, _, lo, hi, _ = stages[k]
            m = fin_l[k] & (dx[k] < 0)
            if m.any():
                a_p = min(a_p, float((-tau * (x[k][m] - lo[m]) / dx[k][m]).min()))
            m = fin_u[k] & (dx[k] > 0)
            if m.any():
                a_p = min(a_p, float((tau * (hi[m] - x[k][m]) / dx[k][m]).min()))
            m = fin_l[k] & (dzl[k] < 0)
            if m.any():
                a_d = min(a_d, float((-tau * zl[k][m] / dzl[k][m]).min()))
            m = fin_u[k] & (dzu[k] < 0)
            if m.any():
                a_d = min(a_d, float((-tau * zu[k][m] / dzu[k][m]).min()))
        return a_p, a_d

    scale = 1.0 + max(
        float(np.abs(qp.grad).max(initial=0.0)),
        max((float(np.abs(s[1]).max(initial=0.0)) for s in stages), default=0.0),
    )
    status = "max-iters"
    it_count = 0
    best = None
    best_metric = np.inf
    mu = np.inf
    resid = np.inf
    for it in range(max_iters):
        it_count = it
        r_d, r_p, mu = residuals()
        resid = max(
            max(float(np.abs(r).max(initial=0.0)) for r in r_d),
            max(float(np.abs(r).max(initial=0.0)) for r in r_p),
        )
        metric = resid + mu
        if np.isfinite(metric) and metric < best_metric:
            best_metric = metric
            best = ([v.copy() for v in x], [v.copy() for v in y],
                    [v.copy() for v in zl], [v.copy() for v in zu], resid, mu)
        if resid <= tol * scale and mu <= tol * scale:
            status = "optimal"
            break
        if not np.isfinite(metric) or metric > 1e4 * max(best_metric, 1e-12):
            break  # diverging: fall back to the best recorded iterate

        sig = sigma_terms()
        try:
            apply = factorize(sig)
        except QpError:
            break
        # predictor
        rc_lo, rc_hi = complementarity_targets(0.0)
        sol = apply(newton_rhs(r_d, r_p, rc_lo, rc_hi))
        dx_a, dy_a, dzl_a, dzu_a = recover_bound_steps(sol, rc_lo, rc_hi)
        a_p, a_d = max_alpha(dx_a, dzl_a, dzu_a, tau=1.0)
        gap_aff = 0.0
        for k in range(n):
            _, _, _, lo, hi, _ = stages[k]
            m = fin_l[k]
            gap_aff += float(
                ((x[k][m] + a_p * dx_a[k][m] - lo[m]) * (zl[k][m] + a_d * dzl_a[k][m])).sum()
            )
            m = fin_u[k]
            gap_aff += float(
                ((hi[m] - x[k][m] - a_p * dx_a[k][m]) * (zu[k][m] + a_d * dzu_a[k][m])).sum()
            )
        mu_aff = gap_aff / max(n_comp, 1)
        sigma_c = (max(mu_aff, 0.0) / max(mu, 1e-300)) ** 3 if mu > 0 else 0.1
        sigma_c = min(max(sigma_c, 1e-6), 0.9)

        # corrector with the same factorization
        rc_lo, rc_hi = complementarity_targets(sigma_c * mu, dx_a, dzl_a, dzu_a)
        sol = apply(newton_rhs(r_d, r_p, rc_lo, rc_hi))
        dx, dy, dzl, dzu = recover_bound_steps(sol, rc_lo, rc_hi)
        a_p, a_d = max_alpha(dx, dzl, dzu, tau=min(0.995, 0.9 + 0.09 * (1 - min(mu, 1.0))))
        a_p = min(1.0, a_p)
        a_d = min(1.0, a_d)
        for k in range(n):
            x[k] = x[k] + a_p * dx[k]
            y[k] = y[k] + a_d * dy[k]
            zl[k] = zl[k] + a_d * dzl[k]
            zu[k] = zu[k] + a_d * dzu[k]

    if status != "optimal" and best is not None:
        x, y, zl, zu, resid, mu = best

    d = np.stack([x[k][lays[k].d] for k in range(n)])
    s = (
        np.stack([x[k][lays[k].s] for k in range(n)])
        if qp.n_h
        else np.zeros((n, 0))
    )
    # duals are reported against the unequilibrated rows
    y_phys = [y[k] / row_norms[k] for k in range(n)]
    y_h = (
        np.stack([y_phys[k][lays[k].row_h] for k in range(n)])
        if qp.n_h
        else np.zeros((n, 0))
    )
    y_eq = [y_phys[k][lays[k].row_eq].copy() for k in range(n)]
    y_def = (
        np.stack([y_phys[k][lays[k].row_def] for k in range(n - 1)])
        if n > 1
        else np.zeros((0, qp.n_x))
    )
    d_lo = np.stack([zl[k][lays[k].d] for k in range(n)])
    d_hi = np.stack([zu[k][lays[k].d] for k in range(n)])
    elastic = 0.0
    for k in range(n):
        for sl in (lays[k].p, lays[k].n, lays[k].a, lays[k].b, lays[k].e, lays[k].f):
            elastic += float(x[k][sl].sum())
    return QpSolution(
        status=status, d=d, s=s, y_h=y_h, y_eq=y_eq, y_def=y_def,
        d_dual_lo=d_lo, d_dual_hi=d_hi, elastic_l1=elastic,
        iterations=it_count, residual=resid, mu=mu,
    )
