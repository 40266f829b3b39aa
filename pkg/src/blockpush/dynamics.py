"""Robot-plus-object model: domain types, JSON IO, and contact geometry.

The system couples a fully actuated serial-chain robot with a non-actuated
object (a block sliding on the ground, or a fixed wall for toy setups).  The
generalized coordinates are q = (q_r, q_o) and the mass matrix is block
diagonal: a configuration-dependent robot block and a constant object block.

Contact is a single sphere-on-face pair: the gap is the distance from the
end-effector sphere center to the virtual face plane through the block center
(normal along the object frame x-axis), minus the sphere radius and half the
block depth, so the gap is zero exactly at surface touch and negative on
penetration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .chain import PRISMATIC, REVOLUTE, Joint, SerialChain

MODEL_FORMAT_VERSION = 1


class ModelError(ValueError):
    """Raised for invalid model files or dimension contract violations."""


@dataclass(frozen=True)
class GeneralizedState:
    """Stacked positions and velocities, partitioned as (q_r, q_o, u_r, u_o)."""

    q: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        object.__setattr__(self, "u", np.asarray(self.u, dtype=float))
        if self.q.shape != self.u.shape or self.q.ndim != 1:
            raise ModelError(
                f"state dimensions inconsistent: q {self.q.shape}, u {self.u.shape}"
            )


@dataclass(frozen=True)
class ContactKinematics:
    gap: float
    normal_jacobian: np.ndarray  # dphi/dq, shape (n_q,)
    ee_position: np.ndarray
    object_rotation: np.ndarray  # R^I_O
    object_position: np.ndarray  # r_o (block center)


@dataclass(frozen=True)
class ModelSpec:
    """Robot chain, object, contact geometry, and friction parameters."""

    chain: SerialChain
    ee_offset: np.ndarray
    ee_radius: float
    n_qo: int  # 0 = fixed wall, 1 = block on a line, 3 = planar block (x, y, yaw)
    obj_mass: float
    obj_inertia: float
    obj_origin: np.ndarray
    block_w: float
    block_h: float
    block_d: float
    mu_s: float
    normal_load: float | None  # None: mu_s * obj_mass * |g|
    push_dir: np.ndarray
    gravity: np.ndarray
    clearance_min: float | None = None
    name: str = "model"

    def __post_init__(self):
        for field_ in ("ee_offset", "obj_origin", "push_dir", "gravity"):
            object.__setattr__(self, field_, np.asarray(getattr(self, field_), dtype=float))
        object.__setattr__(self, "_fixed_rot", None)

    # -- shape helpers ---------------------------------------------------

    @property
    def n_r(self) -> int:
        return self.chain.n

    @property
    def n_q(self) -> int:
        return self.n_r + self.n_qo

    def split(self, vec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return vec[: self.n_r], vec[self.n_r :]

    def check_state(self, state: GeneralizedState) -> None:
        if state.q.shape != (self.n_q,):
            raise ModelError(
                f"state has dimension {state.q.shape[0]}, model needs {self.n_q}"
            )

    # -- derived quantities ----------------------------------------------

    @property
    def ground_normal_load(self) -> float:
        if self.normal_load is not None:
            return self.normal_load
        return self.obj_mass * float(np.linalg.norm(self.gravity))

    @property
    def breakaway_force(self) -> float:
        return self.mu_s * self.ground_normal_load

    @property
    def object_mass_matrix(self) -> np.ndarray:
        if self.n_qo == 0:
            return np.zeros((0, 0))
        if self.n_qo == 1:
            return np.array([[self.obj_mass]])
        return np.diag([self.obj_mass, self.obj_mass, self.obj_inertia])

    @property
    def motion_direction(self) -> np.ndarray:
        """Coefficients of v_dir = n^T u_o in the object velocity coordinates."""
        if self.n_qo == 0:
            return np.zeros(0)
        if self.n_qo == 1:
            return np.array([1.0])
        return np.array([self.push_dir[0], self.push_dir[1], 0.0])

    def object_pose(self, q_o: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(R^I_O, r_o) for the object at generalized position q_o."""
        if self.n_qo == 3:
            theta = q_o[2]
            c, s = np.cos(theta), np.sin(theta)
            rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
            pos = np.array([q_o[0], q_o[1], self.obj_origin[2]])
            return rot, pos
        rot = self._fixed_object_rotation()
        if self.n_qo == 1:
            return rot, self.obj_origin + q_o[0] * self.push_dir
        return rot, self.obj_origin.copy()

    def _fixed_object_rotation(self) -> np.ndarray:
        if self._fixed_rot is not None:
            return self._fixed_rot
        x = self.push_dir
        helper = np.array([0.0, 0.0, 1.0])
        if abs(x @ helper) > 0.99:
            helper = np.array([1.0, 0.0, 0.0])
        y = np.cross(helper, x)
        y = y / np.linalg.norm(y)
        z = np.cross(x, y)
        rot = np.column_stack([x, y, z])
        object.__setattr__(self, "_fixed_rot", rot)
        return rot

    def rescaled(
        self,
        mu_scale: float = 1.0,
        object_mass_scale: float = 1.0,
        robot_mass_scale: float = 1.0,
    ) -> "ModelSpec":
        """Perturbed copy for robustness sweeps."""
        chain = self.chain
        if robot_mass_scale != 1.0:
            joints = [
                Joint(
                    kind=j.kind,
                    axis=j.axis,
                    offset=j.offset,
                    rpy=j.rpy,
                    mass=j.mass * robot_mass_scale,
                    com=j.com,
                    inertia=j.inertia * robot_mass_scale,
                    damping=j.damping,
                    q_min=j.q_min,
                    q_max=j.q_max,
                )
                for j in self.chain.joints
            ]
            chain = SerialChain(joints)
        return replace(
            self,
            chain=chain,
            mu_s=self.mu_s * mu_scale,
            obj_mass=self.obj_mass * object_mass_scale,
            obj_inertia=self.obj_inertia * object_mass_scale,
        )


# ---------------------------------------------------------------------------
# Core operations
# ---------------------------------------------------------------------------


def mass_matrix(model: ModelSpec, q: np.ndarray) -> np.ndarray:
    """Block-diagonal generalized mass matrix M(q)."""
    q = np.asarray(q, dtype=float)
    if q.shape != (model.n_q,):
        raise ModelError(f"q has dimension {q.shape}, model needs ({model.n_q},)")
    out = np.zeros((model.n_q, model.n_q))
    n_r = model.n_r
    out[:n_r, :n_r] = model.chain.mass_matrix(q[:n_r])
    out[n_r:, n_r:] = model.object_mass_matrix
    return out


def bias_forces(model: ModelSpec, state: GeneralizedState) -> np.ndarray:
    """h(q, u): robot Coriolis/gravity/damping; the object block is zero.

    The block slides on level ground, so gravity is orthogonal to its freedoms
    and dry friction is applied explicitly as a generalized force elsewhere.
    """
    model.check_state(state)
    n_r = model.n_r
    out = np.zeros(model.n_q)
    out[:n_r] = model.chain.bias_forces(state.q[:n_r], state.u[:n_r], model.gravity)
    return out


def ee_kinematics(model: ModelSpec, q_r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """End-effector sphere center and its analytic Jacobian (3 x n_r)."""
    q_r = np.asarray(q_r, dtype=float)
    if q_r.shape != (model.n_r,):
        raise ModelError(f"q_r has dimension {q_r.shape}, model needs ({model.n_r},)")
    fkd = model.chain.fk_derivs(q_r, order=1)
    p = model.chain.point_derivs(fkd, model.n_r - 1, model.ee_offset)
    plan = model.chain.plan(1)
    return p[0], p[plan.single].T


def contact_kinematics(model: ModelSpec, state: GeneralizedState) -> ContactKinematics:
    """Gap function and normal Jacobian for the sphere-on-face contact."""
    model.check_state(state)
    point = dyn_point(model, state.q, state.u, order=0)
    return ContactKinematics(
        gap=point.phi,
        normal_jacobian=point.j_n,
        ee_position=point.p_e,
        object_rotation=point.r_obj,
        object_position=point.p_obj,
    )


def contact_patch_residuals(
    model: ModelSpec, state: GeneralizedState, lam: float
) -> np.ndarray:
    """Force-activated face-patch conditions; feasible iff all entries >= 0."""
    model.check_state(state)
    point = dyn_point(model, state.q, state.u, order=0)
    return patch_residuals_from_point(model, point, lam)


def patch_residuals_from_point(model: ModelSpec, point: "DynPoint", lam: float):
    res = [lam * (model.block_h - point.p_e[2])]
    if model.n_qo == 3:
        y_o = point.r_obj[:, 1]
        a = y_o @ (point.p_obj - point.p_e)
        res.append(lam * ((0.5 * model.block_w) ** 2 - a**2))
    return np.array(res)


# ---------------------------------------------------------------------------
# Evaluation bundle shared by the transcription and the simulator
# ---------------------------------------------------------------------------


@dataclass
class GapPoint:
    """Contact geometry at one configuration (no mass/bias quantities)."""

    q: np.ndarray
    phi: float
    j_n: np.ndarray
    p_e: np.ndarray
    j_e: np.ndarray
    r_obj: np.ndarray
    p_obj: np.ndarray
    h_phi: np.ndarray | None = None
    p_e2: np.ndarray | None = None


@dataclass
class DynPoint(GapPoint):
    """Gap geometry plus mass matrix and bias at one (q, u)."""

    u: np.ndarray = None
    m: np.ndarray = None
    m_inv: np.ndarray = None
    h: np.ndarray = None
    dm: np.ndarray | None = None
    dh_dq: np.ndarray | None = None
    dh_du: np.ndarray | None = None


def gap_point(model: ModelSpec, q: np.ndarray, order: int = 0) -> GapPoint:
    """Gap, normal Jacobian, end-effector kinematics; order 1 adds Hessians."""
    q = np.asarray(q, dtype=float)
    n_r, n_q, n_qo = model.n_r, model.n_q, model.n_qo
    if q.shape != (n_q,):
        raise ModelError(f"q has dimension {q.shape}, model needs ({n_q},)")
    q_r, q_o = model.split(q)
    chain = model.chain
    fkd = chain.fk_derivs(q_r, order=1 + order)
    plan = chain.plan(1 + order)
    p_derivs = chain.point_derivs(fkd, n_r - 1, model.ee_offset)
    p_e = p_derivs[0]
    j_e = p_derivs[plan.single].T
    p_e2 = p_derivs[plan.pair].transpose(2, 0, 1) if order >= 1 else None

    r_obj, p_obj = model.object_pose(q_o)
    x_o = r_obj[:, 0]
    d_vec = p_obj - p_e
    phi = float(x_o @ d_vec) - model.ee_radius - 0.5 * model.block_d

    j_n = np.zeros(n_q)
    j_n[:n_r] = -(x_o @ j_e)
    if n_qo == 1:
        j_n[n_r] = float(x_o @ model.push_dir)
    elif n_qo == 3:
        theta = q_o[2]
        x_op = np.array([-np.sin(theta), np.cos(theta), 0.0])
        j_n[n_r] = x_o[0]
        j_n[n_r + 1] = x_o[1]
        j_n[n_r + 2] = float(x_op @ d_vec)

    h_phi = None
    if order >= 1:
        h_phi = np.zeros((n_q, n_q))
        h_phi[:n_r, :n_r] = -np.einsum("x,xij->ij", x_o, p_e2)
        if n_qo == 3:
            theta = q_o[2]
            x_op = np.array([-np.sin(theta), np.cos(theta), 0.0])
            x_opp = np.array([-np.cos(theta), -np.sin(theta), 0.0])
            it = n_r + 2
            h_phi[it, :n_r] = -(x_op @ j_e)
            h_phi[:n_r, it] = h_phi[it, :n_r]
            h_phi[it, it] = float(x_opp @ d_vec)
            h_phi[it, n_r] = x_op[0]
            h_phi[n_r, it] = x_op[0]
            h_phi[it, n_r + 1] = x_op[1]
            h_phi[n_r + 1, it] = x_op[1]

    return GapPoint(
        q=q, phi=phi, j_n=j_n, p_e=p_e, j_e=j_e, r_obj=r_obj, p_obj=p_obj,
        h_phi=h_phi, p_e2=p_e2,
    )


def dyn_point(model: ModelSpec, q: np.ndarray, u: np.ndarray, order: int = 0) -> DynPoint:
    """Evaluate dynamics and contact geometry, optionally with derivatives.

    order 0: values needed to evaluate constraints (M, h, gap, Jacobian rows),
    computed by the composite-rigid-body and Newton-Euler recursions.
    order 1: adds dM/dq, dh/dq, dh/du (Lagrangian tensor route) and the gap
    Hessian for the analytic constraint Jacobians.
    """
    u = np.asarray(u, dtype=float)
    gp = gap_point(model, q, order=order)
    n_r, n_q = model.n_r, model.n_q
    q_r = gp.q[:n_r]
    u_r = u[:n_r]
    chain = model.chain

    dm_r = dh_dq_r = dh_du_r = None
    if order == 0:
        m_r = chain.mass_matrix(q_r)
        h_r = chain.bias_forces(q_r, u_r, model.gravity)
    else:
        m_r, h_r, dm_r, dh_dq_r, dh_du_r = chain.lagrangian_tensors(
            q_r, u_r, model.gravity, order=1
        )

    m = np.zeros((n_q, n_q))
    m[:n_r, :n_r] = m_r
    m[n_r:, n_r:] = model.object_mass_matrix
    h = np.zeros(n_q)
    h[:n_r] = h_r
    m_inv = np.linalg.inv(m)

    point = DynPoint(
        q=gp.q, phi=gp.phi, j_n=gp.j_n, p_e=gp.p_e, j_e=gp.j_e,
        r_obj=gp.r_obj, p_obj=gp.p_obj, h_phi=gp.h_phi, p_e2=gp.p_e2,
        u=u, m=m, m_inv=m_inv, h=h,
    )
    if order == 0:
        return point

    dm = np.zeros((n_q, n_q, n_q))
    dm[:n_r, :n_r, :n_r] = dm_r
    dh_dq = np.zeros((n_q, n_q))
    dh_dq[:n_r, :n_r] = dh_dq_r
    dh_du = np.zeros((n_q, n_q))
    dh_du[:n_r, :n_r] = dh_du_r
    point.dm = dm
    point.dh_dq = dh_dq
    point.dh_du = dh_du
    return point


# ---------------------------------------------------------------------------
# JSON model files
# ---------------------------------------------------------------------------

_REQUIRED_JOINT_FIELDS = ("axis", "offset_m", "mass_kg", "com_m", "inertia_kgm2")


def _as_inertia(raw, path: str) -> np.ndarray:
    arr = np.asarray(raw, dtype=float)
    if arr.shape == (3,):
        arr = np.diag(arr)
    if arr.shape != (3, 3):
        raise ModelError(f"{path}: inertia_kgm2 must be a 3-vector or 3x3 matrix")
    if np.linalg.norm(arr - arr.T) > 1e-12 or np.linalg.eigvalsh(arr).min() < -1e-12:
        raise ModelError(f"{path}: inertia_kgm2 must be symmetric positive semidefinite")
    return arr


def load_model(source) -> ModelSpec:
    """Build a validated ModelSpec from a JSON file path or a parsed dict."""
    if isinstance(source, (str, Path)):
        with open(source) as f:
            doc = json.load(f)
    else:
        doc = source

    version = doc.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ModelError(f"format_version: expected {MODEL_FORMAT_VERSION}, got {version!r}")

    joints = []
    raw_joints = doc.get("robot", [])
    if not raw_joints:
        raise ModelError("robot: needs at least one joint")
    for i, rj in enumerate(raw_joints):
        path = f"robot[{i}]"
        for key in _REQUIRED_JOINT_FIELDS:
            if key not in rj:
                raise ModelError(f"{path}.{key}: missing")
        kind = rj.get("type", REVOLUTE)
        axis = np.asarray(rj["axis"], dtype=float)
        if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise ModelError(f"{path}.axis: must be a unit vector")
        mass = float(rj["mass_kg"])
        if mass <= 0:
            raise ModelError(f"{path}.mass_kg: must be > 0, got {mass}")
        damping = float(rj.get("damping_Nms", 0.0))
        if damping < 0:
            raise ModelError(f"{path}.damping_Nms: must be >= 0")
        joints.append(
            Joint(
                kind=kind,
                axis=axis,
                offset=rj["offset_m"],
                rpy=rj.get("rpy_rad", [0.0, 0.0, 0.0]),
                mass=mass,
                com=rj["com_m"],
                inertia=_as_inertia(rj["inertia_kgm2"], path),
                damping=damping,
                q_min=float(rj.get("q_min_rad", -np.inf)),
                q_max=float(rj.get("q_max_rad", np.inf)),
            )
        )

    ee = doc.get("ee", {})
    obj = doc.get("object", {})
    block = doc.get("block", {})
    fric = doc.get("friction", {})

    n_qo = int(obj.get("n_dof", 1))
    if n_qo not in (0, 1, 3):
        raise ModelError(f"object.n_dof: must be 0, 1 or 3, got {n_qo}")
    obj_mass = float(obj.get("mass_kg", 0.0))
    if n_qo > 0 and obj_mass <= 0:
        raise ModelError(f"object.mass_kg: must be > 0, got {obj_mass}")
    obj_inertia = float(obj.get("inertia_kgm2", 0.0))
    if n_qo == 3 and obj_inertia <= 0:
        raise ModelError("object.inertia_kgm2: must be > 0 for a 3-dof object")

    push_dir = np.asarray(doc.get("push_dir", [1.0, 0.0, 0.0]), dtype=float)
    if abs(np.linalg.norm(push_dir) - 1.0) > 1e-12:
        raise ModelError("push_dir: must be a unit vector (within 1e-12)")
    if n_qo >= 1 and abs(push_dir[2]) > 1e-9:
        raise ModelError("push_dir: must be horizontal for a sliding object")

    block_w = float(block.get("block_w_m", 0.0))
    block_h = float(block.get("block_h_m", 0.0))
    block_d = float(block.get("block_d_m", 0.0))
    if block_w <= 0 or block_h <= 0 or block_d <= 0:
        raise ModelError("block: block_w_m, block_h_m, block_d_m must all be > 0")

    mu_s = float(fric.get("mu_s", 0.0))
    if mu_s < 0:
        raise ModelError(f"friction.mu_s: must be >= 0, got {mu_s}")
    normal_load = fric.get("normal_load_N")
    if normal_load is not None:
        normal_load = float(normal_load)
        if normal_load < 0:
            raise ModelError("friction.normal_load_N: must be >= 0")

    radius = float(ee.get("radius_m", 0.0))
    if radius < 0:
        raise ModelError("ee.radius_m: must be >= 0")

    origin = np.asarray(obj.get("origin_m", [0.0, 0.0, 0.5 * block_h]), dtype=float)
    if n_qo >= 1 and abs(origin[2] - 0.5 * block_h) > 1e-9:
        raise ModelError(
            "object.origin_m: sliding block must rest on the ground plane "
            f"(origin z must equal block_h_m/2 = {0.5 * block_h})"
        )

    clearance = doc.get("clearance_min_m")
    model = ModelSpec(
        chain=SerialChain(joints),
        ee_offset=np.asarray(ee.get("offset_m", [0.0, 0.0, 0.0]), dtype=float),
        ee_radius=radius,
        n_qo=n_qo,
        obj_mass=obj_mass,
        obj_inertia=obj_inertia,
        obj_origin=origin,
        block_w=block_w,
        block_h=block_h,
        block_d=block_d,
        mu_s=mu_s,
        normal_load=normal_load,
        push_dir=push_dir,
        gravity=np.asarray(doc.get("gravity_mps2", [0.0, 0.0, -9.81]), dtype=float),
        clearance_min=None if clearance is None else float(clearance),
        name=doc.get("name", "model"),
    )
    return model


def model_to_dict(model: ModelSpec) -> dict:
    joints = []
    for j in model.chain.joints:
        joints.append(
            {
                "type": j.kind,
                "axis": j.axis.tolist(),
                "offset_m": j.offset.tolist(),
                "rpy_rad": j.rpy.tolist(),
                "mass_kg": j.mass,
                "com_m": j.com.tolist(),
                "inertia_kgm2": j.inertia.tolist(),
                "damping_Nms": j.damping,
                "q_min_rad": j.q_min,
                "q_max_rad": j.q_max,
            }
        )
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "name": model.name,
        "gravity_mps2": model.gravity.tolist(),
        "robot": joints,
        "ee": {"offset_m": model.ee_offset.tolist(), "radius_m": model.ee_radius},
        "object": {
            "n_dof": model.n_qo,
            "mass_kg": model.obj_mass,
            "inertia_kgm2": model.obj_inertia,
            "origin_m": model.obj_origin.tolist(),
        },
        "block": {
            "block_w_m": model.block_w,
            "block_h_m": model.block_h,
            "block_d_m": model.block_d,
        },
        "friction": {"mu_s": model.mu_s, "normal_load_N": model.normal_load},
        "push_dir": model.push_dir.tolist(),
        "clearance_min_m": model.clearance_min,
    }
