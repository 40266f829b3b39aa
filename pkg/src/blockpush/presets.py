"""Packaged default models and tasks."""

from __future__ import annotations

import json
from importlib import resources

import numpy as np

from .chain import Joint, SerialChain
from .dynamics import ModelSpec, load_model
from .transcription import TaskSpec


def _data(name: str) -> dict:
    with resources.files("blockpush.data").joinpath(name).open() as f:
        return json.load(f)


def planar_model() -> ModelSpec:
    """Three-link arm in the vertical plane pushing a block along a line."""
    return load_model(_data("planar_block.json"))


def spatial_model() -> ModelSpec:
    """Five-dof arm pushing a planar block (x, y, yaw); placeholder inertias."""
    return load_model(_data("spatial_block.json"))


def planar_task(delta_l: float = 0.4, n_stages: int = 40, horizon: float = 1.5) -> TaskSpec:
    """Default block-push task; the arm starts folded above and behind the block."""
    return TaskSpec(
        q_r_init=np.array([1.8, -1.5, -0.3]),
        q_o_init=np.array([0.65]),
        horizon=horizon,
        n_stages=n_stages,
        delta_l=delta_l,
        weight_r=np.eye(3),
        weight_q=np.diag([1.0, 1.0, 4.0]),
        tau_max=40.0,
        qd_max=12.0,
    )


def pusher_toy_model(mu_s: float = 0.3) -> ModelSpec:
    """One-dof prismatic pusher and a unit-mass block on a line."""
    chain = SerialChain(
        [
            Joint(
                kind="prismatic",
                axis=[1.0, 0.0, 0.0],
                offset=[0.0, 0.0, 0.0],
                rpy=[0.0, 0.0, 0.0],
                mass=1.0,
                com=[0.0, 0.0, 0.0],
                inertia=np.zeros((3, 3)),
                damping=0.0,
                q_min=-5.0,
                q_max=5.0,
            )
        ]
    )
    return ModelSpec(
        chain=chain,
        ee_offset=np.zeros(3),
        ee_radius=0.0,
        n_qo=1,
        obj_mass=1.0,
        obj_inertia=0.0,
        obj_origin=np.array([0.0, 0.0, 0.05]),
        block_w=0.1,
        block_h=0.1,
        block_d=0.1,
        mu_s=mu_s,
        normal_load=None,
        push_dir=np.array([1.0, 0.0, 0.0]),
        gravity=np.array([0.0, 0.0, -9.81]),
        clearance_min=None,
        name="pusher-toy",
    )


def pusher_toy_task(delta_l: float = 0.2, n_stages: int = 20, horizon: float = 1.0) -> TaskSpec:
    return TaskSpec(
        q_r_init=np.array([0.0]),
        q_o_init=np.array([0.4]),
        horizon=horizon,
        n_stages=n_stages,
        delta_l=delta_l,
        weight_r=np.eye(1),
        weight_q=np.eye(1),
        tau_max=40.0,
        qd_max=12.0,
    )


def wall_toy_model() -> ModelSpec:
    """One-dof prismatic particle in front of a fixed wall (0-dof object)."""
    chain = SerialChain(
        [
            Joint(
                kind="prismatic",
                axis=[1.0, 0.0, 0.0],
                offset=[0.0, 0.0, 0.0],
                rpy=[0.0, 0.0, 0.0],
                mass=1.0,
                com=[0.0, 0.0, 0.0],
                inertia=np.zeros((3, 3)),
                q_min=-5.0,
                q_max=5.0,
            )
        ]
    )
    return ModelSpec(
        chain=chain,
        ee_offset=np.zeros(3),
        ee_radius=0.0,
        n_qo=0,
        obj_mass=0.0,
        obj_inertia=0.0,
        obj_origin=np.array([0.55, 0.0, 0.05]),
        block_w=0.1,
        block_h=0.1,
        block_d=0.1,
        mu_s=0.0,
        normal_load=0.0,
        push_dir=np.array([1.0, 0.0, 0.0]),
        gravity=np.array([0.0, 0.0, -9.81]),
        clearance_min=None,
        name="wall-toy",
    )
