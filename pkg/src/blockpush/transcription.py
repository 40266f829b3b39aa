"""Transcribes the pushing task into a multi-stage complementarity program.

Stage vector: z_k = [tau, q, u, lambda, F_f].  The state transition is one
semi-implicit Euler step driven by joint torques, the normal contact force
lambda through the gap Jacobian, and the ground friction force F_f acting on
the object against the assigned push direction.  Per stage the program
carries: the gap nonnegativity and the gap-force complementarity product, the
impact (restitution) residual made stage-local by substituting the transition
map, the static-friction complementarity triple, the contact-patch activation
rows, and the end-effector ground clearance.  All constraint Jacobians are
analytic; finite-difference agreement is enforced in the tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .dynamics import (
    DynPoint,
    GeneralizedState,
    ModelSpec,
    contact_patch_residuals,
    dyn_point,
    ee_kinematics,
    gap_point,
)
from .program import MultistageNlp, StageEval

TASK_FORMAT_VERSION = 1


class TranscriptionError(ValueError):
    """Raised for invalid tasks or trivially infeasible programs."""


@dataclass(frozen=True)
class TaskSpec:
    """Boundary conditions, horizon, weights, and bounds of one push task."""

    q_r_init: np.ndarray
    q_o_init: np.ndarray
    horizon: float
    n_stages: int
    delta_l: float
    heading: float = 0.0  # desired block yaw (3-dof object only)
    restitution: float = 0.0
    weight_r: np.ndarray | None = None
    weight_q: np.ndarray | None = None
    tau_max: float = 40.0
    qd_max: float = 12.0

    def __post_init__(self):
        object.__setattr__(self, "q_r_init", np.asarray(self.q_r_init, dtype=float))
        object.__setattr__(self, "q_o_init", np.asarray(self.q_o_init, dtype=float))
        if self.horizon <= 0:
            raise TranscriptionError(f"horizon_s: must be > 0, got {self.horizon}")
        if self.n_stages < 2:
            raise TranscriptionError(f"n_stages: must be >= 2, got {self.n_stages}")
        if not 0.0 <= self.restitution <= 1.0:
            raise TranscriptionError("restitution: must be within [0, 1]")
        if self.tau_max <= 0 or self.qd_max <= 0:
            raise TranscriptionError("bounds: tau_max_Nm and qd_max_radps must be > 0")

    @property
    def dt(self) -> float:
        return self.horizon / (self.n_stages - 1)

    def weights(self, n_r: int) -> tuple[np.ndarray, np.ndarray]:
        r = np.eye(n_r) if self.weight_r is None else np.atleast_2d(self.weight_r)
        q = np.eye(n_r) if self.weight_q is None else np.atleast_2d(self.weight_q)
        for name, w in (("R", r), ("Q", q)):
            if w.shape != (n_r, n_r):
                raise TranscriptionError(f"weights.{name}: expected {n_r}x{n_r}")
            if np.linalg.eigvalsh(0.5 * (w + w.T)).min() < -1e-12:
                raise TranscriptionError(f"weights.{name}: must be positive semidefinite")
        return r, q

    def initial_state(self, model: ModelSpec) -> tuple[np.ndarray, np.ndarray]:
        q0 = np.concatenate([self.q_r_init, self.q_o_init])
        if q0.shape != (model.n_q,):
            raise TranscriptionError(
                f"initial state dimension {q0.shape[0]} does not match model ({model.n_q})"
            )
        return q0, np.zeros(model.n_q)

    def object_target(self, model: ModelSpec) -> np.ndarray:
        """Terminal object position coordinates implied by delta_L."""
        if model.n_qo == 0:
            return np.zeros(0)
        if model.n_qo == 1:
            return np.array([self.q_o_init[0] + self.delta_l])
        n = model.push_dir
        return self.q_o_init[:2] + self.delta_l * n[:2]


def load_task(source) -> TaskSpec:
    if isinstance(source, (str, Path)):
        with open(source) as f:
            doc = json.load(f)
    else:
        doc = source
    version = doc.get("format_version")
    if version != TASK_FORMAT_VERSION:
        raise TranscriptionError(
            f"format_version: expected {TASK_FORMAT_VERSION}, got {version!r}"
        )
    weights = doc.get("weights", {})
    bounds = doc.get("bounds", {})

    def _mat(raw):
        if raw is None:
            return None
        arr = np.asarray(raw, dtype=float)
        return np.diag(arr) if arr.ndim == 1 else arr

    return TaskSpec(
        q_r_init=doc["q_r_init_rad"],
        q_o_init=doc.get("object_init", []),
        horizon=float(doc["horizon_s"]),
        n_stages=int(doc["n_stages"]),
        delta_l=float(doc.get("delta_L_m", 0.0)),
        heading=float(doc.get("heading_rad", 0.0)),
        restitution=float(doc.get("restitution", 0.0)),
        weight_r=_mat(weights.get("R")),
        weight_q=_mat(weights.get("Q")),
        tau_max=float(bounds.get("tau_max_Nm", 40.0)),
        qd_max=float(bounds.get("qd_max_radps", 12.0)),
    )


def task_to_dict(task: TaskSpec, model: ModelSpec) -> dict:
    r, q = task.weights(model.n_r)
    return {
        "format_version": TASK_FORMAT_VERSION,
        "q_r_init_rad": task.q_r_init.tolist(),
        "object_init": task.q_o_init.tolist(),
        "horizon_s": task.horizon,
        "n_stages": task.n_stages,
        "delta_L_m": task.delta_l,
        "heading_rad": task.heading,
        "restitution": task.restitution,
        "weights": {"R": r.tolist(), "Q": q.tolist()},
        "bounds": {"tau_max_Nm": task.tau_max, "qd_max_radps": task.qd_max},
    }


# ---------------------------------------------------------------------------
# Stage vector layout
# ---------------------------------------------------------------------------


class StageLayout(NamedTuple):
    n_r: int
    n_q: int

    @property
    def n_z(self) -> int:
        return self.n_r + 2 * self.n_q + 2

    @property
    def tau(self) -> slice:
        return slice(0, self.n_r)

    @property
    def q(self) -> slice:
        return slice(self.n_r, self.n_r + self.n_q)

    @property
    def u(self) -> slice:
        return slice(self.n_r + self.n_q, self.n_r + 2 * self.n_q)

    @property
    def lam(self) -> int:
        return self.n_r + 2 * self.n_q

    @property
    def ff(self) -> int:
        return self.n_r + 2 * self.n_q + 1

    @property
    def state(self) -> slice:
        """The x = (q, u) part."""
        return slice(self.n_r, self.n_r + 2 * self.n_q)

    def selector(self) -> np.ndarray:
        e = np.zeros((2 * self.n_q, self.n_z))
        e[:, self.state] = np.eye(2 * self.n_q)
        return e

    def pack(self, tau, q, u, lam=0.0, ff=0.0) -> np.ndarray:
        z = np.zeros(self.n_z)
        z[self.tau] = tau
        z[self.q] = q
        z[self.u] = u
        z[self.lam] = lam
        z[self.ff] = ff
        return z


def layout_for(model: ModelSpec) -> StageLayout:
    return StageLayout(model.n_r, model.n_q)


@dataclass(frozen=True)
class Percussion:
    """Time-integrated contact forces over one step."""

    p_n: float
    p_f: np.ndarray

    @staticmethod
    def from_stage(model: ModelSpec, z: np.ndarray, dt: float) -> "Percussion":
        lay = layout_for(model)
        return Percussion(
            p_n=dt * float(z[lay.lam]),
            p_f=-dt * float(z[lay.ff]) * model.push_dir,
        )


# ---------------------------------------------------------------------------
# Stage operations
# ---------------------------------------------------------------------------


def _friction_direction(model: ModelSpec) -> np.ndarray:
    """Generalized force of a unit force along +push_dir on the object."""
    vec = np.zeros(model.n_q)
    vec[model.n_r :] = model.motion_direction
    return vec


def state_transition(model: ModelSpec, z: np.ndarray, dt: float, with_jacobian: bool = False):
    """One semi-implicit Euler step of the stage vector's state.

    Returns (q_next, u_next) and, when requested, their Jacobians with respect
    to the full stage vector.
    """
    if dt <= 0:
        raise TranscriptionError(f"dt must be > 0, got {dt}")
    lay = layout_for(model)
    if z.shape != (lay.n_z,):
        raise TranscriptionError(f"stage vector has shape {z.shape}, expected ({lay.n_z},)")
    point = dyn_point(model, z[lay.q], z[lay.u], order=1 if with_jacobian else 0)
    return _transition_from_point(model, point, z, dt, with_jacobian)


def _transition_from_point(
    model: ModelSpec, point: DynPoint, z: np.ndarray, dt: float, with_jacobian: bool
):
    lay = layout_for(model)
    n_r, n_q, n_z = lay.n_r, lay.n_q, lay.n_z
    tau = z[lay.tau]
    u = z[lay.u]
    lam = z[lay.lam]
    ff = z[lay.ff]
    fdir = _friction_direction(model)

    w = np.zeros(n_q)
    w[:n_r] = tau
    w = w - point.h + point.j_n * lam - fdir * ff
    u_next = u + dt * (point.m_inv @ w)
    q_next = point.q + dt * u_next
    if not with_jacobian:
        return (q_next, u_next), None

    minv = point.m_inv
    ju = np.zeros((n_q, n_z))
    # d u_next / d tau
    ju[:, lay.tau] = dt * minv[:, :n_r]
    # d u_next / d q: product rule through M^{-1}, h, and J_N
    dw_dq = -point.dh_dq + lam * point.h_phi
    dminv_w = -np.einsum("ia,abk,b->ik", minv, point.dm, minv @ w)
    ju[:, lay.q] = dt * (dminv_w + minv @ dw_dq)
    # d u_next / d u
    ju[:, lay.u] = np.eye(n_q) + dt * (minv @ (-point.dh_du))
    ju[:, lay.lam] = dt * (minv @ point.j_n)
    ju[:, lay.ff] = dt * (minv @ (-fdir))

    jq = np.zeros((n_q, n_z))
    jq[:, lay.q] = np.eye(n_q)
    jq = jq + dt * ju
    return (q_next, u_next), (jq, ju)


def contact_complementarity(model: ModelSpec, z: np.ndarray, dt: float | None = None):
    """(gap, lambda, gap*lambda); feasible iff gap >= 0, lambda >= 0, product <= delta."""
    lay = layout_for(model)
    point = dyn_point(model, z[lay.q], z[lay.u], order=0)
    lam = float(z[lay.lam])
    return point.phi, lam, point.phi * lam


def restitution_residual(model: ModelSpec, z: np.ndarray, dt: float, eps: float):
    """dt * lambda * (gap_rate(next) + eps * gap_rate(now)), zero at feasibility."""
    lay = layout_for(model)
    point = dyn_point(model, z[lay.q], z[lay.u], order=0)
    (q_next, u_next), _ = _transition_from_point(model, point, z, dt, False)
    next_point = gap_point(model, q_next)
    gamma_next = float(next_point.j_n @ u_next)
    gamma_now = float(point.j_n @ z[lay.u])
    return dt * float(z[lay.lam]) * (gamma_next + eps * gamma_now)


class FrictionResiduals(NamedTuple):
    v_dir: float
    margin: float  # F_s - F_f
    product_v: float  # v_dir * (F_s - F_f)
    product_force: float  # (F_s - F_f) * (lambda - F_f)


def friction_residuals(model: ModelSpec, z: np.ndarray) -> FrictionResiduals:
    """Static Coulomb complementarity pieces for the object-ground contact."""
    lay = layout_for(model)
    u_o = z[lay.u][model.n_r :]
    v_dir = float(model.motion_direction @ u_o)
    fs = model.breakaway_force
    ff = float(z[lay.ff])
    lam = float(z[lay.lam])
    margin = fs - ff
    return FrictionResiduals(v_dir, margin, v_dir * margin, margin * (lam - ff))


def stage_cost(z: np.ndarray, task: TaskSpec, model: ModelSpec, dt: float | None = None):
    """Normalized effort cost and its exact gradient."""
    lay = layout_for(model)
    r, qw = task.weights(model.n_r)
    dt = task.dt if dt is None else dt
    tau = z[lay.tau]
    u_r = z[lay.u][: model.n_r]
    val = dt * (tau @ r @ tau / task.tau_max**2 + u_r @ qw @ u_r / task.qd_max**2)
    grad = np.zeros(lay.n_z)
    grad[lay.tau] = dt * (r + r.T) @ tau / task.tau_max**2
    grad[lay.u.start : lay.u.start + model.n_r] = dt * (qw + qw.T) @ u_r / task.qd_max**2
    return float(val), grad


# ---------------------------------------------------------------------------
# Full stage evaluation for the solver
# ---------------------------------------------------------------------------


class StageEvaluator:
    """Bound to (model, task): residuals and analytic Jacobians of one stage."""

    def __init__(self, model: ModelSpec, task: TaskSpec):
        self.model = model
        self.task = task
        self.lay = layout_for(model)
        self.dt = task.dt
        self.eps = task.restitution
        self.fdir = _friction_direction(model)
        self.w_r, self.w_q = task.weights(model.n_r)
        self.labels = stage_inequality_labels(model)
        self._hess = self._build_cost_hessian()

    def _build_cost_hessian(self) -> np.ndarray:
        lay, model, task = self.lay, self.model, self.task
        h = np.zeros((lay.n_z, lay.n_z))
        h[lay.tau, lay.tau] = self.dt * (self.w_r + self.w_r.T) / task.tau_max**2
        s = lay.u.start
        h[s : s + model.n_r, s : s + model.n_r] = (
            self.dt * (self.w_q + self.w_q.T) / task.qd_max**2
        )
        return h

    def cost_hessian(self, k: int) -> np.ndarray:
        return self._hess

    def _cost(self, z: np.ndarray, with_grad: bool):
        lay, model, task = self.lay, self.model, self.task
        tau = z[lay.tau]
        u_r = z[lay.u][: model.n_r]
        r, qw = self.w_r, self.w_q
        val = self.dt * (
            tau @ r @ tau / task.tau_max**2 + u_r @ qw @ u_r / task.qd_max**2
        )
        if not with_grad:
            return float(val), None
        grad = np.zeros(lay.n_z)
        grad[lay.tau] = self.dt * (r + r.T) @ tau / task.tau_max**2
        grad[lay.u.start : lay.u.start + model.n_r] = (
            self.dt * (qw + qw.T) @ u_r / task.qd_max**2
        )
        return float(val), grad

    def __call__(self, k: int, z: np.ndarray, order: int) -> StageEval:
        model, lay, dt = self.model, self.lay, self.dt
        jac = order >= 1
        point = dyn_point(model, z[lay.q], z[lay.u], order=1 if jac else 0)
        (q_next, u_next), trans_jac = _transition_from_point(model, point, z, dt, jac)
        next_point = gap_point(model, q_next, order=1 if jac else 0)

        f, g = self._cost(z, jac)
        c = np.concatenate([q_next, u_next])
        c_jac = np.vstack(trans_jac) if jac else None

        h_rows, h_jac, h_hess = self._inequalities(
            z, point, next_point, u_next, trans_jac, order
        )
        return StageEval(
            f=f, g=g, c=c, c_jac=c_jac, h=h_rows, h_jac=h_jac, h_hess=h_hess
        )

    def _inequalities(self, z, point, next_point, u_next, trans_jac, order):
        model, lay, dt, eps = self.model, self.lay, self.dt, self.eps
        n_r, n_z = model.n_r, lay.n_z
        lam = float(z[lay.lam])
        ff = float(z[lay.ff])
        u = z[lay.u]
        fs = model.breakaway_force
        jac = order >= 1
        hess = order >= 2

        rows: list[float] = []
        jacs: list[np.ndarray] = []
        hesses: list[np.ndarray] = []

        def add(value, row_jac=None, row_hess=None):
            rows.append(value)
            if jac:
                jacs.append(row_jac if row_jac is not None else np.zeros(n_z))
            if hess:
                hesses.append(row_hess if row_hess is not None else np.zeros((n_z, n_z)))

        def sym_cross(idx, vec):
            out = np.zeros((n_z, n_z))
            out[idx, :] += vec
            out[:, idx] += vec
            return out

        # gap
        j_phi = hp_full = None
        if jac:
            j_phi = np.zeros(n_z)
            j_phi[lay.q] = point.j_n
        if hess:
            hp_full = np.zeros((n_z, n_z))
            hp_full[lay.q, lay.q] = point.h_phi
        add(point.phi, j_phi, hp_full)

        # gap-force product
        j_prod = h_prod = None
        if jac:
            j_prod = lam * j_phi.copy()
            j_prod[lay.lam] += point.phi
        if hess:
            h_prod = lam * hp_full + sym_cross(lay.lam, j_phi)
        add(point.phi * lam, j_prod, h_prod)

        # restitution, made stage-local through the transition map
        gamma_next = float(next_point.j_n @ u_next)
        gamma_now = float(point.j_n @ u)
        restit = dt * lam * (gamma_next + eps * gamma_now)
        j_restit = h_restit = None
        if jac:
            jq_next, ju_next = trans_jac
            dgn = u_next @ next_point.h_phi @ jq_next + next_point.j_n @ ju_next
            dg0 = np.zeros(n_z)
            dg0[lay.q] = u @ point.h_phi
            dg0[lay.u] += point.j_n
            dgamma = dgn + eps * dg0
            j_restit = dt * lam * dgamma
            j_restit[lay.lam] += dt * (gamma_next + eps * gamma_now)
        if hess:
            # exact force/rate cross curvature; the gap-rate second derivative
            # through the transition map is dropped (Gauss-Newton treatment)
            h_restit = dt * sym_cross(lay.lam, dgamma)
            cross0 = np.zeros((n_z, n_z))
            cross0[lay.q, lay.u] = point.h_phi
            h_restit += dt * lam * eps * (cross0 + cross0.T)
        add(restit, j_restit, h_restit)

        # friction complementarity family (absent for a fixed wall)
        if model.n_qo >= 1:
            md = model.motion_direction
            v_dir = float(md @ u[n_r:])
            margin = fs - ff
            j_v = None
            if jac:
                j_v = np.zeros(n_z)
                j_v[lay.u.start + n_r : lay.u.stop] = md
            add(v_dir, j_v)

            j_margin = None
            if jac:
                j_margin = np.zeros(n_z)
                j_margin[lay.ff] = -1.0
            add(margin, j_margin)

            j_pv = h_pv = None
            if jac:
                j_pv = margin * j_v
                j_pv[lay.ff] += -v_dir
            if hess:
                h_pv = sym_cross(lay.ff, -j_v)
            add(v_dir * margin, j_pv, h_pv)

            j_pf = h_pf = None
            if jac:
                j_pf = np.zeros(n_z)
                j_pf[lay.lam] = margin
                j_pf[lay.ff] = -(lam - ff) - margin
            if hess:
                h_pf = np.zeros((n_z, n_z))
                h_pf[lay.lam, lay.ff] = -1.0
                h_pf[lay.ff, lay.lam] = -1.0
                h_pf[lay.ff, lay.ff] = 2.0
            add(margin * (lam - ff), j_pf, h_pf)

        # contact patch: force only on the physical block face
        qr = slice(lay.q.start, lay.q.start + n_r)
        j_patch = h_patch = None
        if jac:
            j_patch = np.zeros(n_z)
            j_patch[qr] = -lam * point.j_e[2]
            j_patch[lay.lam] = model.block_h - point.p_e[2]
        if hess:
            h_patch = np.zeros((n_z, n_z))
            h_patch[qr, qr] = -lam * point.p_e2[2]
            cross = np.zeros(n_z)
            cross[qr] = -point.j_e[2]
            h_patch += sym_cross(lay.lam, cross)
        add(lam * (model.block_h - point.p_e[2]), j_patch, h_patch)

        if model.n_qo == 3:
            y_o = point.r_obj[:, 1]
            x_o = point.r_obj[:, 0]
            d_vec = point.p_obj - point.p_e
            a = float(y_o @ d_vec)
            val = lam * ((0.5 * model.block_w) ** 2 - a**2)
            j_lat = h_lat = None
            da = None
            if jac:
                da = np.zeros(n_z)
                da[qr] = -(y_o @ point.j_e)
                da[lay.q.start + n_r] = y_o[0]
                da[lay.q.start + n_r + 1] = y_o[1]
                da[lay.q.start + n_r + 2] = -float(x_o @ d_vec)
                j_lat = -2.0 * lam * a * da
                j_lat[lay.lam] += (0.5 * model.block_w) ** 2 - a**2
            if hess:
                d2a = np.zeros((n_z, n_z))
                d2a[qr, qr] = -np.einsum("x,xij->ij", y_o, point.p_e2)
                it = lay.q.start + n_r + 2
                row = np.zeros(n_z)
                row[qr] = x_o @ point.j_e  # d/dtheta of -y_o @ J_e
                row[lay.q.start + n_r] = -x_o[0]
                row[lay.q.start + n_r + 1] = -x_o[1]
                xp = np.array([-x_o[1], x_o[0], 0.0])  # d x_o / d theta
                row[it] = -float(xp @ d_vec)
                d2a[it, :] += row
                d2a[:, it] += row
                d2a[it, it] -= row[it]  # added twice on the diagonal
                h_lat = -2.0 * lam * (np.outer(da, da) + a * d2a)
                h_lat += sym_cross(lay.lam, -2.0 * a * da)
            add(val, j_lat, h_lat)

        # ground clearance of the end-effector
        if model.clearance_min is not None:
            j_clr = h_clr = None
            if jac:
                j_clr = np.zeros(n_z)
                j_clr[qr] = point.j_e[2]
            if hess:
                h_clr = np.zeros((n_z, n_z))
                h_clr[qr, qr] = point.p_e2[2]
            add(point.p_e[2], j_clr, h_clr)

        h = np.array(rows)
        return (
            h,
            np.vstack(jacs) if jac else None,
            np.stack(hesses) if hess else None,
        )


def stage_inequality_labels(model: ModelSpec) -> list[str]:
    labels = ["gap", "gap_force_product", "restitution"]
    if model.n_qo >= 1:
        labels += ["v_dir", "friction_margin", "friction_product_v", "friction_product_force"]
    labels += ["patch_height"]
    if model.n_qo == 3:
        labels += ["patch_width"]
    if model.clearance_min is not None:
        labels += ["ee_clearance"]
    return labels


def stage_inequality_bounds(
    model: ModelSpec, clearance: float | None
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(lower, upper, relax_lower_mask, relax_upper_mask) per stage row.

    Product rows whose nonnegativity is already implied by their factors (gap
    and force for gap*lambda, speed and margin for v*margin) are bounded above
    only; an explicit zero lower bound would place the natural solution corner
    exactly on the relaxation boundary and destroy strict interiority.  The
    sign-indefinite rows (restitution, margin*(lambda - F_f)) get symmetric
    [-delta, delta] boxes for the same reason.
    """
    inf = np.inf
    lower, upper, rl, ru = [], [], [], []

    def row(lo, hi, relax_lo=False, relax_hi=False):
        lower.append(lo)
        upper.append(hi)
        rl.append(relax_lo)
        ru.append(relax_hi)

    row(0.0, inf)  # gap
    row(-inf, 0.0, relax_hi=True)  # gap-force product <= delta
    row(0.0, 0.0, relax_lo=True, relax_hi=True)  # restitution in [-delta, delta]
    if model.n_qo >= 1:
        row(0.0, inf)  # v_dir
        row(0.0, inf)  # friction margin
        row(-inf, 0.0, relax_hi=True)  # v * margin <= delta
        row(0.0, 0.0, relax_lo=True, relax_hi=True)  # margin * (lambda - F_f)
    row(0.0, inf)  # patch height
    if model.n_qo == 3:
        row(0.0, inf)  # patch width
    if clearance is not None:
        row(clearance, inf)
    return (np.array(lower), np.array(upper), np.array(rl, bool), np.array(ru, bool))


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------


def _reach(model: ModelSpec) -> float:
    reach = float(
        sum(np.linalg.norm(j.offset) for j in model.chain.joints)
        + np.linalg.norm(model.ee_offset)
    )
    for j in model.chain.joints:
        if j.kind == "prismatic" and np.isfinite(j.q_min) and np.isfinite(j.q_max):
            reach += max(abs(j.q_min), abs(j.q_max))
    return reach


def assemble(model: ModelSpec, task: TaskSpec) -> MultistageNlp:
    """Build the multi-stage program for one model/task pair."""
    lay = layout_for(model)
    n, n_z, n_q, n_r = task.n_stages, lay.n_z, model.n_q, model.n_r
    q0, u0 = task.initial_state(model)

    if model.n_qo == 0 and abs(task.delta_l) > 0:
        raise TranscriptionError("delta_L_m: must be 0 for a fixed (0-dof) object")
    max_travel = task.qd_max * _reach(model) * task.horizon
    if model.n_qo >= 1 and (task.delta_l < 0 or (task.delta_l > 0 and task.delta_l >= max_travel)):
        raise TranscriptionError(
            f"delta_L_m={task.delta_l} cannot be reached: the end-effector speed bound "
            f"limits the block displacement to < {max_travel:.3f} m over the horizon"
        )

    evaluator = StageEvaluator(model, task)

    # variable bounds
    zl = np.full((n, n_z), -np.inf)
    zu = np.full((n, n_z), np.inf)
    zl[:, lay.tau] = -task.tau_max
    zu[:, lay.tau] = task.tau_max
    for i, joint in enumerate(model.chain.joints):
        zl[:, lay.q.start + i] = joint.q_min
        zu[:, lay.q.start + i] = joint.q_max
    zl[:, lay.u.start : lay.u.start + n_r] = -task.qd_max
    zu[:, lay.u.start : lay.u.start + n_r] = task.qd_max
    zl[:, lay.lam] = 0.0
    zl[:, lay.ff] = 0.0
    if model.n_qo == 0:
        zu[:, lay.ff] = 0.0 + 1.0  # inert variable, kept boxed for conditioning

    # stage-local equality rows: initial state, terminal condition, heading pins
    eq_mat: list[np.ndarray] = []
    eq_rhs: list[np.ndarray] = []
    for k in range(n):
        rows = []
        rhs = []
        if k == 0:
            sel = np.zeros((2 * n_q, n_z))
            sel[:, lay.state] = np.eye(2 * n_q)
            rows.append(sel)
            rhs.append(np.concatenate([q0, u0]))
        if model.n_qo == 3 and 0 < k:
            pin = np.zeros((1, n_z))
            pin[0, lay.q.start + n_r + 2] = 1.0
            rows.append(pin)
            rhs.append(np.array([task.heading]))
        if k == n - 1:
            target = task.object_target(model)
            m_pos = len(target)
            sel = np.zeros((m_pos + n_q, n_z))
            for i in range(m_pos):
                sel[i, lay.q.start + n_r + i] = 1.0
            sel[m_pos:, lay.u] = np.eye(n_q)
            rows.append(sel)
            rhs.append(np.concatenate([target, np.zeros(n_q)]))
        if rows:
            eq_mat.append(np.vstack(rows))
            eq_rhs.append(np.concatenate(rhs))
        else:
            eq_mat.append(np.zeros((0, n_z)))
            eq_rhs.append(np.zeros(0))

    hl, hu, rl, ru = stage_inequality_bounds(model, model.clearance_min)
    hl_stages = np.tile(hl, (n, 1))
    hu_stages = np.tile(hu, (n, 1))
    if model.n_qo >= 1:
        # the boundary equalities pin the velocities to zero at the first and
        # last stage, so the v_dir row sits identically on its bound there; an
        # interior method needs that vacuous wall removed
        i_v = evaluator.labels.index("v_dir")
        hl_stages[0, i_v] = -np.inf
        hl_stages[n - 1, i_v] = -np.inf
    return MultistageNlp(
        n_stages=n,
        n_z=n_z,
        n_x=2 * n_q,
        stage_eval=evaluator,
        cost_hessian=evaluator.cost_hessian,
        transition_selector=lay.selector(),
        eq_matrix=eq_mat,
        eq_rhs=eq_rhs,
        z_lower=zl,
        z_upper=zu,
        h_lower_base=hl_stages,
        h_upper_base=hu_stages,
        h_relax_lower=rl,
        h_relax_upper=ru,
        h_labels=evaluator.labels,
        meta={
            "model": model.name,
            "dt_s": task.dt,
            "delta_L_m": task.delta_l,
            "restitution": task.restitution,
        },
    )


def initial_guess(model: ModelSpec, task: TaskSpec) -> np.ndarray:
    """Linear state interpolation toward a plausible push pose, zero forces."""
    lay = layout_for(model)
    n = task.n_stages
    q0, _ = task.initial_state(model)

    q_r_end = _push_pose(model, task)
    q_o_end = np.zeros(model.n_qo)
    if model.n_qo == 1:
        q_o_end[0] = task.object_target(model)[0]
    elif model.n_qo == 3:
        q_o_end[:2] = task.object_target(model)
        q_o_end[2] = task.heading
    q_end = np.concatenate([q_r_end, q_o_end])

    traj = np.zeros((n, lay.n_z))
    for k in range(n):
        frac = k / (n - 1)
        traj[k, lay.q] = (1 - frac) * q0 + frac * q_end
    return traj


def _push_pose(model: ModelSpec, task: TaskSpec) -> np.ndarray:
    """Joint positions placing the end-effector at the initial contact point.

    A few damped Gauss-Newton steps on the position error; falls back to the
    initial configuration when the target is out of reach.
    """
    rot, p_obj = model.object_pose(task.q_o_init)
    x_o = rot[:, 0]
    target = p_obj - (0.5 * model.block_d + model.ee_radius) * x_o
    target[2] = min(max(target[2], 0.5 * model.block_h), model.block_h)
    if model.clearance_min is not None:
        target[2] = max(target[2], model.clearance_min + model.ee_radius)

    q = task.q_r_init.copy()
    for _ in range(60):
        pos, jac = ee_kinematics(model, q)
        err = target - pos
        if np.linalg.norm(err) < 1e-10:
            break
        step, *_ = np.linalg.lstsq(jac, err, rcond=None)
        q = q + 0.5 * step
    q = np.clip(
        q,
        [j.q_min for j in model.chain.joints],
        [j.q_max for j in model.chain.joints],
    )
    pos, _ = ee_kinematics(model, q)
    if np.linalg.norm(pos - target) > 0.05:
        return task.q_r_init.copy()
    return q


# ---------------------------------------------------------------------------
# Independent residual report (used to recheck solver output)
# ---------------------------------------------------------------------------


def residual_report(model: ModelSpec, task: TaskSpec, traj: np.ndarray) -> dict:
    """Recompute all constraint residuals of a trajectory from the raw stage ops."""
    lay = layout_for(model)
    n = task.n_stages
    dt = task.dt
    q0, u0 = task.initial_state(model)

    defect = 0.0
    min_gap = np.inf
    max_prod = 0.0
    max_restit = 0.0
    min_v = np.inf
    max_pv = 0.0
    max_pf = 0.0
    min_patch = np.inf
    min_clear = np.inf
    bound_violation = 0.0

    for k in range(n):
        z = traj[k]
        if k + 1 < n:
            (q_next, u_next), _ = state_transition(model, z, dt)
            x_next = np.concatenate([q_next, u_next])
            defect = max(defect, float(np.abs(x_next - traj[k + 1][lay.state]).max()))
        phi, lam, prod = contact_complementarity(model, z, dt)
        min_gap = min(min_gap, phi)
        max_prod = max(max_prod, abs(prod))
        max_restit = max(max_restit, abs(restitution_residual(model, z, dt, task.restitution)))
        if model.n_qo >= 1:
            fr = friction_residuals(model, z)
            min_v = min(min_v, fr.v_dir)
            max_pv = max(max_pv, abs(fr.product_v))
            max_pf = max(max_pf, abs(fr.product_force))
        state = GeneralizedState(q=z[lay.q], u=z[lay.u])
        patch = contact_patch_residuals(model, state, lam)
        if patch.size:
            min_patch = min(min_patch, float(patch.min()))
        if model.clearance_min is not None:
            pos, _ = ee_kinematics(model, z[lay.q][: model.n_r])
            min_clear = min(min_clear, float(pos[2]))
        bound_violation = max(
            bound_violation,
            float(np.maximum(0.0, -lam)),
            float(np.maximum(0.0, np.abs(z[lay.tau]) - task.tau_max).max()),
        )

    init_err = float(np.abs(traj[0][lay.state] - np.concatenate([q0, u0])).max())
    term = task.object_target(model)
    if model.n_qo >= 1:
        pos_err = float(
            np.abs(traj[-1][lay.q][model.n_r : model.n_r + len(term)] - term).max()
        )
    else:
        pos_err = 0.0
    vel_err = float(np.abs(traj[-1][lay.u]).max())

    return {
        "max_defect": defect,
        "min_gap_m": float(min_gap),
        "max_gap_force_product": float(max_prod),
        "max_restitution": float(max_restit),
        "min_v_dir": float(min_v) if model.n_qo >= 1 else 0.0,
        "max_friction_product_v": float(max_pv),
        "max_friction_product_force": float(max_pf),
        "min_patch_residual": float(min_patch) if np.isfinite(min_patch) else 0.0,
        "min_ee_height_m": float(min_clear) if np.isfinite(min_clear) else 0.0,
        "max_bound_violation": bound_violation,
        "initial_state_error": init_err,
        "terminal_position_error": pos_err,
        "terminal_velocity_error": vel_err,
    }
