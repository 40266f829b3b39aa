"""Stage operations, analytic Jacobians, and program assembly."""

import numpy as np
import pytest

from blockpush import presets
from blockpush.dynamics import ModelSpec
from blockpush.chain import Joint, SerialChain
from blockpush.transcription import (
    StageEvaluator,
    TaskSpec,
    TranscriptionError,
    assemble,
    contact_complementarity,
    friction_residuals,
    initial_guess,
    layout_for,
    restitution_residual,
    stage_cost,
    state_transition,
)


def vertical_particle_model():
    """1-dof particle falling along z toward a far-away wall."""
    chain = SerialChain(
        [
            Joint(
                kind="prismatic",
                axis=[0.0, 0.0, 1.0],
                offset=[0.0, 0.0, 0.0],
                rpy=[0.0, 0.0, 0.0],
                mass=1.0,
                com=[0.0, 0.0, 0.0],
                inertia=np.zeros((3, 3)),
                q_min=-100,
                q_max=100,
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
        obj_origin=np.array([0.0, 0.0, 100.0]),
        block_w=0.1,
        block_h=0.1,
        block_d=0.1,
        mu_s=0.0,
        normal_load=0.0,
        push_dir=np.array([0.0, 0.0, 1.0]),
        gravity=np.array([0.0, 0.0, -9.81]),
        clearance_min=None,
        name="falling-particle",
    )


def random_stage_vectors(model, rng, count):
    lay = layout_for(model)
    out = []
    for _ in range(count):
        z = rng.uniform(-1.0, 1.0, lay.n_z)
        z[lay.q] = rng.uniform(-1.2, 1.2, model.n_q)
        z[lay.u] = rng.uniform(-2.0, 2.0, model.n_q)
        z[lay.lam] = rng.uniform(0.0, 60.0)
        z[lay.ff] = rng.uniform(0.0, 3.0)
        out.append(z)
    return out


class TestStateTransition:
    def test_force_free_drift(self):
        model = presets.pusher_toy_model()
        lay = layout_for(model)
        z = lay.pack(tau=[0.0], q=[0.1, 0.5], u=[0.7, -0.2])
        (q1, u1), _ = state_transition(model, z, 0.05)
        np.testing.assert_allclose(u1, [0.7, -0.2], atol=1e-14)
        np.testing.assert_allclose(q1, [0.1 + 0.05 * 0.7, 0.5 - 0.05 * 0.2], atol=1e-14)

    def test_semi_implicit_gravity_step(self):
        model = vertical_particle_model()
        lay = layout_for(model)
        z = lay.pack(tau=[0.0], q=[2.0], u=[0.0])
        dt = 0.1
        (q1, u1), _ = state_transition(model, z, dt)
        assert u1[0] == pytest.approx(-9.81 * dt, abs=1e-12)
        # defining property of the semi-implicit scheme: position uses u_{k+1}
        assert q1[0] == pytest.approx(2.0 + dt * u1[0], abs=1e-12)

    def test_impulse_on_unit_block(self):
        model = presets.pusher_toy_model()
        lay = layout_for(model)
        dt = 0.03846
        z = lay.pack(tau=[0.0], q=[0.0, 0.4], u=[0.0, 0.0], lam=50.0)
        (q1, u1), _ = state_transition(model, z, dt)
        assert u1[1] == pytest.approx(dt * 50.0 / 1.0, abs=1e-12)
        assert u1[1] == pytest.approx(1.923, abs=1e-3)

    def test_jacobians_match_fd(self):
        for model in (presets.planar_model(), presets.pusher_toy_model()):
            lay = layout_for(model)
            rng = np.random.default_rng(31)
            dt = 0.04
            for z in random_stage_vectors(model, rng, 25):
                (_, _), (jq, ju) = state_transition(model, z, dt, with_jacobian=True)
                eps = 1e-6
                for j in range(lay.n_z):
                    d = np.zeros(lay.n_z)
                    d[j] = eps
                    (qp, up), _ = state_transition(model, z + d, dt)
                    (qm, um), _ = state_transition(model, z - d, dt)
                    fd_q = (qp - qm) / (2 * eps)
                    fd_u = (up - um) / (2 * eps)
                    scale = max(1.0, np.abs(fd_q).max(), np.abs(fd_u).max())
                    assert np.abs(jq[:, j] - fd_q).max() / scale <= 1e-5
                    assert np.abs(ju[:, j] - fd_u).max() / scale <= 1e-5

    def test_rejects_bad_dt(self):
        model = presets.pusher_toy_model()
        lay = layout_for(model)
        with pytest.raises(TranscriptionError):
            state_transition(model, np.zeros(lay.n_z), 0.0)


class TestComplementarityOps:
    def test_contact_complementarity_values(self):
        model = presets.pusher_toy_model()
        lay = layout_for(model)
        # gap 0.3: ee at 0.5, block center 0.85 (face at 0.8)
        z = lay.pack(tau=[0.0], q=[0.5, 0.85], u=[0.0, 0.0], lam=0.0)
        phi, lam, prod = contact_complementarity(model, z, 0.05)
        assert (phi, lam, prod) == pytest.approx((0.3, 0.0, 0.0))
        z[lay.lam] = 50.0
        phi, lam, prod = contact_complementarity(model, z, 0.05)
        assert prod == pytest.approx(15.0)
        z[lay.q.start] = 0.8  # touching
        phi, lam, prod = contact_complementarity(model, z, 0.05)
        assert prod == pytest.approx(0.0, abs=1e-12)

    def test_restitution_zero_when_no_force(self):
        model = presets.planar_model()
        rng = np.random.default_rng(32)
        for z in random_stage_vectors(model, rng, 50):
            z[layout_for(model).lam] = 0.0
            assert restitution_residual(model, z, 0.04, 0.0) == 0.0

    def test_restitution_zero_at_matched_velocity(self):
        """Inelastic impact: the force that zeroes the post-step gap rate."""
        model = presets.pusher_toy_model()
        lay = layout_for(model)
        dt = 0.05
        # pusher at the face, approaching at 1 m/s; block at rest
        z = lay.pack(tau=[0.0], q=[0.8, 0.85], u=[1.0, 0.0], lam=0.0, ff=0.0)
        # J_N = [-1, 1]; u1 = [1 - dt*lam, dt*lam]; gap rate zero at lam = 1/(2*dt)
        lam_star = 1.0 / (2 * dt)
        z[lay.lam] = lam_star
        assert restitution_residual(model, z, dt, 0.0) == pytest.approx(0.0, abs=1e-12)
        # and the residual is nonzero away from the solution
        z[lay.lam] = 0.5 * lam_star
        assert abs(restitution_residual(model, z, dt, 0.0)) > 1e-3

    def test_particle_wall_restitution_oracle(self):
        """1-dof particle against a fixed wall: analytic impulsive force."""
        model = presets.wall_toy_model()
        lay = layout_for(model)
        dt = 0.05
        # wall face at 0.5; particle touching it, moving +1 (J_N = [-1])
        z = lay.pack(tau=[0.0], q=[0.5], u=[1.0], lam=0.0)
        # u1 = 1 - dt*lam; gap rate after step = -(1 - dt*lam); zero at lam = 1/dt
        z[lay.lam] = 1.0 / dt
        assert restitution_residual(model, z, dt, 0.0) == pytest.approx(0.0, abs=1e-12)

    def test_friction_branches(self):
        from dataclasses import replace

        model = replace(presets.pusher_toy_model(mu_s=0.3), normal_load=10.0)  # F_s = 3.0
        lay = layout_for(model)
        # sliding: v > 0 requires F_f = F_s
        z = lay.pack(tau=[0.0], q=[0.0, 0.4], u=[0.0, 0.2], lam=0.0, ff=3.0)
        fr = friction_residuals(model, z)
        assert fr.v_dir == pytest.approx(0.2)
        assert fr.margin == pytest.approx(0.0)
        assert fr.product_v == pytest.approx(0.0)
        assert fr.product_force == pytest.approx(0.0)
        # sticking below breakaway: F_f = lambda
        z = lay.pack(tau=[0.0], q=[0.0, 0.4], u=[0.0, 0.0], lam=1.5, ff=1.5)
        fr = friction_residuals(model, z)
        assert fr.product_v == pytest.approx(0.0)
        assert fr.product_force == pytest.approx(0.0)
        assert fr.margin == pytest.approx(1.5)
        # boundary case: everything at the breakaway force
        z = lay.pack(tau=[0.0], q=[0.0, 0.4], u=[0.0, 0.0], lam=3.0, ff=3.0)
        fr = friction_residuals(model, z)
        assert (fr.product_v, fr.product_force, fr.margin) == pytest.approx((0.0, 0.0, 0.0))


class TestStageCost:
    def test_zero_at_rest(self):
        model = presets.planar_model()
        task = presets.planar_task()
        lay = layout_for(model)
        z = np.zeros(lay.n_z)
        val, _ = stage_cost(z, task, model)
        assert val == 0.0

    def test_normalization_at_torque_bound(self):
        model = presets.pusher_toy_model()
        task = TaskSpec(
            q_r_init=[0.0], q_o_init=[0.4], horizon=1.0, n_stages=21,
            delta_l=0.2, weight_r=np.eye(1), weight_q=np.zeros((1, 1)),
            tau_max=40.0, qd_max=12.0,
        )
        lay = layout_for(model)
        z = lay.pack(tau=[40.0], q=[0, 0.4], u=[0, 0])
        val, _ = stage_cost(z, task, model)
        assert val == pytest.approx(task.dt * 1.0)

    def test_gradient_matches_fd(self):
        model = presets.planar_model()
        task = presets.planar_task()
        lay = layout_for(model)
        rng = np.random.default_rng(33)
        eps = 1e-7
        for z in random_stage_vectors(model, rng, 100):
            _, grad = stage_cost(z, task, model)
            for j in range(lay.n_z):
                d = np.zeros(lay.n_z)
                d[j] = eps
                vp, _ = stage_cost(z + d, task, model)
                vm, _ = stage_cost(z - d, task, model)
                fd = (vp - vm) / (2 * eps)
                assert abs(grad[j] - fd) <= 1e-7 * max(1.0, abs(fd))

    def test_permutation_invariance_for_isotropic_weights(self):
        model = presets.planar_model()
        task = TaskSpec(
            q_r_init=[1.8, -1.5, -0.3], q_o_init=[0.65], horizon=1.5, n_stages=40,
            delta_l=0.4, weight_r=2.0 * np.eye(3), weight_q=3.0 * np.eye(3),
        )
        lay = layout_for(model)
        rng = np.random.default_rng(34)
        z = random_stage_vectors(model, rng, 1)[0]
        val, _ = stage_cost(z, task, model)
        perm = [2, 0, 1]
        zp = z.copy()
        zp[lay.tau] = z[lay.tau][perm]
        u = z[lay.u].copy()
        u[:3] = u[perm]
        zp[lay.u] = u
        vp, _ = stage_cost(zp, task, model)
        assert vp == pytest.approx(val, rel=1e-14)


class TestStageEvaluatorJacobians:
    @pytest.mark.parametrize(
        "model_task",
        [
            (presets.planar_model(), presets.planar_task()),
            (presets.pusher_toy_model(), presets.pusher_toy_task()),
            (
                presets.spatial_model(),
                TaskSpec(
                    q_r_init=[0.0, 1.2, -1.0, -0.4, 0.0],
                    q_o_init=[0.6, 0.0, 0.0],
                    horizon=1.5,
                    n_stages=10,
                    delta_l=0.3,
                ),
            ),
        ],
        ids=["planar", "toy", "spatial"],
    )
    def test_all_rows_match_fd(self, model_task):
        model, task = model_task
        evaluator = StageEvaluator(model, task)
        lay = layout_for(model)
        rng = np.random.default_rng(35)
        samples = 40 if model.n_qo != 3 else 15
        # the heavy spatial arm amplifies round-off in the reference through
        # M^{-1}, so it gets a larger central-difference step
        eps = 1e-6 if model.n_qo != 3 else 1e-5
        for z in random_stage_vectors(model, rng, samples):
            ev = evaluator(0, z, order=1)
            for j in range(lay.n_z):
                d = np.zeros(lay.n_z)
                d[j] = eps
                evp = evaluator(0, z + d, order=0)
                evm = evaluator(0, z - d, order=0)
                fd_c = (evp.c - evm.c) / (2 * eps)
                fd_h = (evp.h - evm.h) / (2 * eps)
                scale_c = np.maximum(1.0, np.abs(fd_c))
                scale_h = np.maximum(1.0, np.abs(fd_h))
                assert (np.abs(ev.c_jac[:, j] - fd_c) / scale_c).max() <= 1e-5
                assert (np.abs(ev.h_jac[:, j] - fd_h) / scale_h).max() <= 1e-5


class TestAssemble:
    def test_planar_dimensions(self):
        nlp = assemble(presets.planar_model(), presets.planar_task())
        desc = nlp.describe()
        assert desc["n_z"] == 13
        assert desc["total_variables"] == 520
        assert desc["defect_equalities"] == 8 * 39
        # boundary: full initial state (8) + terminal block pos/velocities (5)
        assert desc["boundary_and_stage_equalities"] == 13

    def test_degenerate_two_stage_horizon(self):
        model = presets.pusher_toy_model()
        task = presets.pusher_toy_task(delta_l=0.0, n_stages=2, horizon=0.1)
        nlp = assemble(model, task)
        assert nlp.describe()["defect_equalities"] == nlp.n_x

    def test_unreachable_displacement_rejected(self):
        model = presets.pusher_toy_model()
        with pytest.raises(TranscriptionError, match="delta_L"):
            assemble(model, presets.pusher_toy_task(delta_l=500.0))

    def test_initial_guess_shape_and_boundaries(self):
        model = presets.planar_model()
        task = presets.planar_task()
        lay = layout_for(model)
        guess = initial_guess(model, task)
        assert guess.shape == (40, lay.n_z)
        np.testing.assert_allclose(
            guess[0, lay.q], np.concatenate([task.q_r_init, task.q_o_init])
        )
        assert guess[-1, lay.q][-1] == pytest.approx(1.05)
        assert np.all(guess[:, lay.lam] == 0.0)

    def test_relaxation_moves_only_flagged_bounds(self):
        nlp = assemble(presets.planar_model(), presets.planar_task())
        hl, hu = nlp.ineq_bounds(0.5)
        labels = nlp.h_labels
        i_prod = labels.index("gap_force_product")
        i_rest = labels.index("restitution")
        i_gap = labels.index("gap")
        assert hu[0, i_prod] == 0.5 and hl[0, i_prod] == 0.0
        assert hu[0, i_rest] == 0.5 and hl[0, i_rest] == -0.5
        assert hu[0, i_gap] == np.inf and hl[0, i_gap] == 0.0
