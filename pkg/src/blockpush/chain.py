"""Serial-chain rigid-body kinematics and dynamics with exact derivatives.

A chain is a fixed-base sequence of revolute or prismatic joints.  Every link
transform is a product T_l(q) = X_0(q_0) ... X_l(q_l) in which q_j appears in
exactly one factor, so any mixed partial derivative of T_l is the same product
with each differentiated factor replaced by its own q-derivative.  For a
revolute joint d/dq Rot(a, q) = Rot(a, q) [a]x, hence the m-th derivative of a
local factor is the factor itself right-multiplied by [a]x^m; for a prismatic
joint the first derivative is a constant translation generator and higher ones
vanish.  This yields all partials of link poses up to third order with one
batched 4x4 matrix product per link, which is what the analytic constraint
Jacobians downstream are assembled from.

Mass matrices are computed by a composite-rigid-body recursion and bias forces
by a recursive Newton-Euler sweep, both expressed with 6D vectors anchored at
the world origin so no inter-link transforms are needed.  The Lagrangian
tensor route (mass matrix from link Jacobians, Coriolis terms from Christoffel
symbols) duplicates those values by independent math and additionally provides
dM/dq, dh/dq, dh/du for the optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np

REVOLUTE = "revolute"
PRISMATIC = "prismatic"


def skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def axis_rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    k = skew(axis)
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def rpy_rotation(rpy: np.ndarray) -> np.ndarray:
    """Fixed-frame roll-pitch-yaw, R = Rz(yaw) Ry(pitch) Rx(roll)."""
    r, p, y = rpy
    rx = axis_rotation(np.array([1.0, 0.0, 0.0]), r)
    ry = axis_rotation(np.array([0.0, 1.0, 0.0]), p)
    rz = axis_rotation(np.array([0.0, 0.0, 1.0]), y)
    return rz @ ry @ rx


def _homog(rot: np.ndarray, trans: np.ndarray) -> np.ndarray:
    t = np.eye(4)
    t[:3, :3] = rot
    t[:3, 3] = trans
    return t


@dataclass(frozen=True)
class Joint:
    """One joint plus the link body it moves.

    axis is a unit vector in the local joint frame; offset/rpy place the joint
    frame in the parent frame; mass/com/inertia describe the moved link, with
    com and inertia (about the com) expressed in the joint frame.
    """

    kind: str
    axis: np.ndarray
    offset: np.ndarray
    rpy: np.ndarray
    mass: float
    com: np.ndarray
    inertia: np.ndarray
    damping: float = 0.0
    q_min: float = -np.inf
    q_max: float = np.inf

    def __post_init__(self):
        if self.kind not in (REVOLUTE, PRISMATIC):
            raise ValueError(f"unknown joint kind {self.kind!r}")
        for name in ("axis", "offset", "rpy", "com", "inertia"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))


def _multisets(n: int, order: int) -> list[tuple[int, ...]]:
    out: list[tuple[int, ...]] = []
    for size in range(order + 1):
        out.extend(combinations_with_replacement(range(n), size))
    return out


@dataclass
class _DerivPlan:
    """Static bookkeeping for the batched derivative recursion."""

    order: int
    alphas: list[tuple[int, ...]]
    index: dict[tuple[int, ...], int]
    # per link: (alpha ids, parent alpha ids, local factor powers)
    steps: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=list)
    single: np.ndarray | None = None
    pair: np.ndarray | None = None
    triple: np.ndarray | None = None


def _build_plan(n: int, order: int) -> _DerivPlan:
    alphas = _multisets(n, order)
    index = {a: i for i, a in enumerate(alphas)}
    plan = _DerivPlan(order=order, alphas=alphas, index=index)
    for link in range(n):
        aid, pid, pow_ = [], [], []
        for a in alphas:
            if a and a[-1] > link:  # a joint past this link: derivative is zero
                continue
            parent = tuple(x for x in a if x != link)
            aid.append(index[a])
            pid.append(index[parent])
            pow_.append(len(a) - len(parent))
        plan.steps.append(
            (np.array(aid, int), np.array(pid, int), np.array(pow_, int))
        )
    if order >= 1:
        plan.single = np.array([index[(i,)] for i in range(n)])
    if order >= 2:
        plan.pair = np.array(
            [[index[tuple(sorted((i, j)))] for j in range(n)] for i in range(n)]
        )
    if order >= 3:
        plan.triple = np.array(
            [
                [
                    [index[tuple(sorted((i, j, k)))] for k in range(n)]
                    for j in range(n)
                ]
                for i in range(n)
            ]
        )
    return plan


class SerialChain:
    """Fixed-base serial chain with derivative, CRBA, and RNEA routines."""

    def __init__(self, joints: list[Joint]):
        if not joints:
            raise ValueError("chain needs at least one joint")
        self.joints = list(joints)
        self.n = len(joints)
        self._plans: dict[int, _DerivPlan] = {}
        self.damping = np.array([j.damping for j in joints])
        self._fixed = [_homog(rpy_rotation(j.rpy), j.offset) for j in joints]

    def plan(self, order: int) -> _DerivPlan:
        if order not in self._plans:
            self._plans[order] = _build_plan(self.n, order)
        return self._plans[order]

    def _local_factors(self, j: Joint, fixed: np.ndarray, q: float, order: int):
        """X and its q-derivatives, shape (order+1, 4, 4)."""
        out = np.zeros((order + 1, 4, 4))
        if j.kind == REVOLUTE:
            out[0] = fixed @ _homog(axis_rotation(j.axis, q), np.zeros(3))
            k4 = np.zeros((4, 4))
            k4[:3, :3] = skew(j.axis)
            for m in range(1, order + 1):
                out[m] = out[m - 1] @ k4
        else:
            out[0] = fixed @ _homog(np.eye(3), j.axis * q)
            if order >= 1:
                gen = np.zeros((4, 4))
                gen[:3, 3] = j.axis
                out[1] = fixed @ gen
        return out

    def fk_derivs(self, q: np.ndarray, order: int = 0) -> np.ndarray:
        """All link transforms and their mixed partials.

        Returns an array of shape (n, n_alpha, 4, 4); entry [l, i] is the
        partial of T_l with respect to the multiset plan(order).alphas[i]
        (the empty multiset being the transform itself).
        """
        q = np.asarray(q, dtype=float)
        if q.shape != (self.n,):
            raise ValueError(f"expected q of shape ({self.n},), got {q.shape}")
        plan = self.plan(order)
        na = len(plan.alphas)
        out = np.zeros((self.n, na, 4, 4))
        prev = np.zeros((na, 4, 4))
        prev[0] = np.eye(4)
        for link, (aid, pid, pow_) in enumerate(plan.steps):
            locs = self._local_factors(
                self.joints[link], self._fixed[link], q[link], order
            )
            out[link, aid] = np.matmul(prev[pid], locs[pow_])
            prev = out[link]
        return out

    def point_derivs(
        self, fkd: np.ndarray, link: int, point_local: np.ndarray
    ) -> np.ndarray:
        """World position of a link-fixed point and all its partials, (n_alpha, 3)."""
        ph = np.append(np.asarray(point_local, dtype=float), 1.0)
        return fkd[link, :, :3, :] @ ph

    def world_axes(self, fkd: np.ndarray) -> np.ndarray:
        """World direction of each joint axis, (n, 3)."""
        return np.einsum(
            "lij,lj->li",
            fkd[np.arange(self.n), 0, :3, :3],
            np.stack([j.axis for j in self.joints]),
        )

    def joint_origins(self, fkd: np.ndarray) -> np.ndarray:
        return fkd[np.arange(self.n), 0, :3, 3]

    # ------------------------------------------------------------------
    # 6D dynamics, all quantities anchored at the world origin.
    # A motion vector is [omega; v_O]; a force vector is [n_O; f].
    # ------------------------------------------------------------------

    def _spatial_inertias(self, fkd: np.ndarray) -> np.ndarray:
        """Per-link 6x6 spatial inertias about the world origin."""
        out = np.zeros((self.n, 6, 6))
        for l, j in enumerate(self.joints):
            rot = fkd[l, 0, :3, :3]
            c = rot @ j.com + fkd[l, 0, :3, 3]
            iw = rot @ j.inertia @ rot.T
            cx = skew(c)
            out[l, :3, :3] = iw + j.mass * (cx @ cx.T)
            out[l, :3, 3:] = j.mass * cx
            out[l, 3:, :3] = j.mass * cx.T
            out[l, 3:, 3:] = j.mass * np.eye(3)
        return out

    def _motion_subspaces(self, fkd: np.ndarray) -> np.ndarray:
        """Joint motion subspace columns S_i at the world origin, (n, 6)."""
        axes = self.world_axes(fkd)
        origins = self.joint_origins(fkd)
        out = np.zeros((self.n, 6))
        for i, j in enumerate(self.joints):
            if j.kind == REVOLUTE:
                out[i, :3] = axes[i]
                out[i, 3:] = np.cross(origins[i], axes[i])
            else:
                out[i, 3:] = axes[i]
        return out

    def mass_matrix(self, q: np.ndarray) -> np.ndarray:
        """Joint-space mass matrix by the composite-rigid-body recursion."""
        fkd = self.fk_derivs(q, order=0)
        inertias = self._spatial_inertias(fkd)
        s = self._motion_subspaces(fkd)
        m = np.zeros((self.n, self.n))
        composite = np.zeros((6, 6))
        for l in range(self.n - 1, -1, -1):
            composite = composite + inertias[l]
            f = composite @ s[l]
            m[l, l] = s[l] @ f
            for i in range(l - 1, -1, -1):
                m[i, l] = s[i] @ f
                m[l, i] = m[i, l]
        return m

    def bias_forces(
        self, q: np.ndarray, u: np.ndarray, gravity: np.ndarray
    ) -> np.ndarray:
        """h(q, u): Coriolis/centrifugal + gravity + viscous damping.

        Recursive Newton-Euler with zero joint accelerations; gravity enters as
        the usual fictitious base acceleration.
        """
        u = np.asarray(u, dtype=float)
        fkd = self.fk_derivs(q, order=0)
        inertias = self._spatial_inertias(fkd)
        s = self._motion_subspaces(fkd)
        a = np.concatenate([np.zeros(3), -np.asarray(gravity, dtype=float)])
        v = np.zeros(6)
        forces = np.zeros((self.n, 6))
        for l in range(self.n):
            v = v + s[l] * u[l]
            a = a + _crm(v) @ (s[l] * u[l])
            forces[l] = inertias[l] @ a + _crf(v) @ (inertias[l] @ v)
        tau = np.zeros(self.n)
        fc = np.zeros(6)
        for l in range(self.n - 1, -1, -1):
            fc = fc + forces[l]
            tau[l] = s[l] @ fc
        return tau + self.damping * u

    # ------------------------------------------------------------------
    # Lagrangian tensor route, used for analytic optimizer derivatives.
    # ------------------------------------------------------------------

    def lagrangian_tensors(
        self, q: np.ndarray, u: np.ndarray, gravity: np.ndarray, order: int = 1
    ):
        """Mass matrix, bias vector, and their q/u derivatives in one pass.

        Returns (M, h) for order 0 and (M, h, dM, dh_dq, dh_du) for order 1,
        with dM[i, j, k] = dM_ij/dq_k.  Order 1 needs third derivatives of the
        link poses because dh/dq differentiates the Christoffel symbols.
        """
        u = np.asarray(u, dtype=float)
        g = np.asarray(gravity, dtype=float)
        n = self.n
        fk_order = 2 + order
        fkd = self.fk_derivs(q, order=fk_order)
        plan = self.plan(fk_order)
        single, pair, triple = plan.single, plan.pair, plan.triple

        m0 = np.zeros((n, n))
        dm = np.zeros((n, n, n))
        d2m = np.zeros((n, n, n, n)) if order >= 1 else None
        grav = np.zeros(n)
        dgrav = np.zeros((n, n)) if order >= 1 else None

        rots = fkd[:, :, :3, :3]
        for l, joint in enumerate(self.joints):
            p = self.point_derivs(fkd, l, joint.com)  # (n_alpha, 3)
            jv = p[single].T  # (3, n)
            djv = p[pair].transpose(2, 0, 1)  # (3, i, k)
            m0 += joint.mass * (jv.T @ jv)
            dm += joint.mass * (
                np.einsum("xik,xj->ijk", djv, jv) + np.einsum("xi,xjk->ijk", jv, djv)
            )
            grav -= joint.mass * (jv.T @ g)
            if order >= 1:
                d2jv = p[triple].transpose(3, 0, 1, 2)  # (3, i, k, l)
                d2m += joint.mass * (
                    np.einsum("xikl,xj->ijkl", d2jv, jv)
                    + np.einsum("xik,xjl->ijkl", djv, djv)
                    + np.einsum("xil,xjk->ijkl", djv, djv)
                    + np.einsum("xi,xjkl->ijkl", jv, d2jv)
                )
                dgrav -= joint.mass * np.einsum("xik,x->ik", djv, g)

            # angular part: column i of Jw is the world axis of revolute joint i <= l
            jw = np.zeros((3, n))
            djw = np.zeros((3, n, n))
            d2jw = np.zeros((3, n, n, n)) if order >= 1 else None
            for i in range(l + 1):
                ji = self.joints[i]
                if ji.kind != REVOLUTE:
                    continue
                jw[:, i] = rots[i, 0] @ ji.axis
                djw[:, i, :] = np.einsum("kxy,y->xk", rots[i][single], ji.axis)
                if order >= 1:
                    d2jw[:, i, :, :] = np.einsum(
                        "klxy,y->xkl", rots[i][pair], ji.axis
                    )
            rl = rots[l, 0]
            ib = joint.inertia
            iw = rl @ ib @ rl.T
            dr = rots[l][single]  # (k, 3, 3)
            diw = np.einsum("kxy,yz->kxz", dr, ib @ rl.T)
            diw = diw + diw.transpose(0, 2, 1)
            m0 += jw.T @ iw @ jw
            dm += (
                np.einsum("xik,xy,yj->ijk", djw, iw, jw)
                + np.einsum("xi,xy,yjk->ijk", jw, iw, djw)
                + np.einsum("xi,kxy,yj->ijk", jw, diw, jw)
            )
            if order >= 1:
                d2r = rots[l][pair]  # (k, l, 3, 3)
                d2iw = (
                    np.einsum("klxy,yz->klxz", d2r, ib @ rl.T)
                    + np.einsum("kxy,lzy->klxz", dr @ ib, dr)
                    + np.einsum("lxy,kzy->klxz", dr @ ib, dr)
                    + np.einsum("xy,klzy->klxz", rl @ ib, d2r)
                )
                d2m += (
                    np.einsum("xikl,xy,yj->ijkl", d2jw, iw, jw)
                    + np.einsum("xik,xy,yjl->ijkl", djw, iw, djw)
                    + np.einsum("xik,lxy,yj->ijkl", djw, diw, jw)
                    + np.einsum("xil,xy,yjk->ijkl", djw, iw, djw)
                    + np.einsum("xi,xy,yjkl->ijkl", jw, iw, d2jw)
                    + np.einsum("xi,lxy,yjk->ijkl", jw, diw, djw)
                    + np.einsum("xil,kxy,yj->ijkl", djw, diw, jw)
                    + np.einsum("xi,kxy,yjl->ijkl", jw, diw, djw)
                    + np.einsum("xi,klxy,yj->ijkl", jw, d2iw, jw)
                )

        # Christoffel symbols of the first kind (symmetric in the last two slots)
        gamma = 0.5 * (dm + dm.transpose(0, 2, 1) - dm.transpose(2, 1, 0))
        cor = np.einsum("ijk,j,k->i", gamma, u, u)
        h = cor + grav + self.damping * u
        if order == 0:
            return m0, h
        dgamma = 0.5 * (
            d2m + d2m.transpose(0, 2, 1, 3) - d2m.transpose(2, 1, 0, 3)
        )
        dh_dq = np.einsum("ijkl,j,k->il", dgamma, u, u) + dgrav
        dh_du = 2.0 * np.einsum("ijk,k->ij", gamma, u) + np.diag(self.damping)
        return m0, h, dm, dh_dq, dh_du


def _crm(v: np.ndarray) -> np.ndarray:
    """Spatial motion cross product matrix (motion x motion)."""
    out = np.zeros((6, 6))
    out[:3, :3] = skew(v[:3])
    out[3:, 3:] = skew(v[:3])
    out[3:, :3] = skew(v[3:])
    return out


def _crf(v: np.ndarray) -> np.ndarray:
    """Spatial force cross product matrix (motion x force)."""
    return -_crm(v).T
