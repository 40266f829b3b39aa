"""Chain kinematics/dynamics against closed-form and finite-difference oracles."""

import numpy as np
import pytest

from blockpush.chain import (
    Joint,
    SerialChain,
    axis_rotation,
)

LIFT_AXIS = np.array([0.0, -1.0, 0.0])  # positive angle raises the link tip (+z)


def planar_joint(offset_x, mass, com_x, inertia_yy, damping=0.0):
    return Joint(
        kind="revolute",
        axis=LIFT_AXIS,
        offset=[offset_x, 0.0, 0.0],
        rpy=[0.0, 0.0, 0.0],
        mass=mass,
        com=[com_x, 0.0, 0.0],
        inertia=np.diag([0.0, inertia_yy, 0.0]),
        damping=damping,
    )


def two_link_params(rng):
    m1, m2 = rng.uniform(0.5, 3.0, 2)
    l1 = rng.uniform(0.2, 0.8)
    r1, r2 = rng.uniform(0.1, 0.5, 2)
    i1, i2 = rng.uniform(0.001, 0.05, 2)
    d1, d2 = rng.uniform(0.0, 0.3, 2)
    return m1, m2, l1, r1, r2, i1, i2, d1, d2


def two_link_chain(params):
    m1, m2, l1, r1, r2, i1, i2, d1, d2 = params
    return SerialChain(
        [
            planar_joint(0.0, m1, r1, i1, d1),
            planar_joint(l1, m2, r2, i2, d2),
        ]
    )


def two_link_closed_form(params, q, u, g=9.81):
    """Hand-derived planar two-link mass matrix and bias vector.

    Angles are measured from the horizontal +x axis; positive angles raise the
    links; gravity acts along -z.  Standard textbook expressions.
    """
    m1, m2, l1, r1, r2, i1, i2, d1, d2 = params
    q1, q2 = q
    u1, u2 = u
    c2, s2 = np.cos(q2), np.sin(q2)
    m11 = i1 + i2 + m1 * r1**2 + m2 * (l1**2 + r2**2 + 2 * l1 * r2 * c2)
    m12 = i2 + m2 * (r2**2 + l1 * r2 * c2)
    m22 = i2 + m2 * r2**2
    mass = np.array([[m11, m12], [m12, m22]])
    cor = np.array(
        [
            -m2 * l1 * r2 * s2 * (2 * u1 * u2 + u2**2),
            m2 * l1 * r2 * s2 * u1**2,
        ]
    )
    grav = g * np.array(
        [
            (m1 * r1 + m2 * l1) * np.cos(q1) + m2 * r2 * np.cos(q1 + q2),
            m2 * r2 * np.cos(q1 + q2),
        ]
    )
    return mass, cor + grav + np.array([d1 * u1, d2 * u2])


GRAVITY = np.array([0.0, 0.0, -9.81])


class TestTwoLinkOracle:
    def test_mass_matrix_matches_closed_form(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            params = two_link_params(rng)
            chain = two_link_chain(params)
            for _ in range(40):
                q = rng.uniform(-np.pi, np.pi, 2)
                m_ref, _ = two_link_closed_form(params, q, np.zeros(2))
                np.testing.assert_allclose(chain.mass_matrix(q), m_ref, atol=1e-10)

    def test_bias_matches_closed_form(self):
        rng = np.random.default_rng(8)
        for _ in range(25):
            params = two_link_params(rng)
            chain = two_link_chain(params)
            for _ in range(40):
                q = rng.uniform(-np.pi, np.pi, 2)
                u = rng.uniform(-3.0, 3.0, 2)
                _, h_ref = two_link_closed_form(params, q, u)
                np.testing.assert_allclose(
                    chain.bias_forces(q, u, GRAVITY), h_ref, atol=1e-10
                )

    def test_lagrangian_route_agrees_with_recursions(self):
        rng = np.random.default_rng(9)
        params = two_link_params(rng)
        chain = two_link_chain(params)
        for _ in range(50):
            q = rng.uniform(-np.pi, np.pi, 2)
            u = rng.uniform(-3.0, 3.0, 2)
            m_lag, h_lag = chain.lagrangian_tensors(q, u, GRAVITY, order=0)
            np.testing.assert_allclose(m_lag, chain.mass_matrix(q), atol=1e-12)
            np.testing.assert_allclose(
                h_lag, chain.bias_forces(q, u, GRAVITY), atol=1e-11
            )


class TestSimpleCases:
    def test_point_mass_pendulum_inertia(self):
        chain = SerialChain([planar_joint(0.0, 1.0, 1.0, 0.0)])
        np.testing.assert_allclose(chain.mass_matrix([0.3]), [[1.0]], atol=1e-14)

    def test_horizontal_pendulum_gravity_torque(self):
        chain = SerialChain([planar_joint(0.0, 1.0, 1.0, 0.0)])
        h = chain.bias_forces([0.0], [0.0], GRAVITY)
        np.testing.assert_allclose(h, [9.81], atol=1e-12)

    def test_zero_gravity_zero_velocity_bias_vanishes(self):
        chain = SerialChain([planar_joint(0.0, 1.0, 1.0, 0.0), planar_joint(0.4, 2.0, 0.2, 0.01)])
        h = chain.bias_forces([0.7, -0.3], [0.0, 0.0], np.zeros(3))
        np.testing.assert_allclose(h, np.zeros(2), atol=1e-14)

    def test_prismatic_particle(self):
        chain = SerialChain(
            [
                Joint(
                    kind="prismatic",
                    axis=[1.0, 0.0, 0.0],
                    offset=[0.0, 0.0, 0.0],
                    rpy=[0.0, 0.0, 0.0],
                    mass=1.5,
                    com=[0.0, 0.0, 0.0],
                    inertia=np.zeros((3, 3)),
                )
            ]
        )
        np.testing.assert_allclose(chain.mass_matrix([0.2]), [[1.5]], atol=1e-14)
        # horizontal slide: gravity orthogonal to the axis contributes nothing
        np.testing.assert_allclose(
            chain.bias_forces([0.2], [1.0], GRAVITY), [0.0], atol=1e-13
        )


def spatial_test_chain():
    """A 5-dof chain mixing axes, offsets, and a prismatic joint."""
    return SerialChain(
        [
            Joint("revolute", [0, 0, 1], [0, 0, 0.2], [0, 0, 0], 2.0, [0.05, 0, 0.1],
                  np.diag([0.02, 0.03, 0.01]), 0.1),
            Joint("revolute", [0, -1, 0], [0.1, 0, 0.1], [0.1, 0, 0], 1.5, [0.15, 0, 0],
                  np.diag([0.01, 0.02, 0.02]), 0.2),
            Joint("revolute", [0, -1, 0], [0.3, 0, 0], [0, 0.05, 0], 1.2, [0.12, 0.02, 0],
                  np.diag([0.015, 0.01, 0.012]), 0.15),
            Joint("prismatic", [1, 0, 0], [0.25, 0, 0], [0, 0, 0.2], 0.8, [0.0, 0, 0.05],
                  np.diag([0.005, 0.005, 0.004]), 0.05),
            Joint("revolute", [1, 0, 0], [0.1, 0, 0], [0, 0, 0], 0.5, [0.05, 0, 0],
                  np.diag([0.002, 0.003, 0.003]), 0.02),
        ]
    )


class TestDerivativeEngine:
    def test_fk_first_derivatives_match_fd(self):
        chain = spatial_test_chain()
        rng = np.random.default_rng(12)
        plan = chain.plan(1)
        for _ in range(10):
            q = rng.uniform(-1.5, 1.5, 5)
            fkd = chain.fk_derivs(q, order=1)
            eps = 1e-6
            for j in range(5):
                dq = np.zeros(5)
                dq[j] = eps
                tp = chain.fk_derivs(q + dq, order=0)
                tm = chain.fk_derivs(q - dq, order=0)
                fd = (tp[:, 0] - tm[:, 0]) / (2 * eps)
                np.testing.assert_allclose(
                    fkd[:, plan.index[(j,)]], fd, atol=5e-9
                )

    def test_fk_second_derivatives_match_fd(self):
        chain = spatial_test_chain()
        rng = np.random.default_rng(13)
        plan2 = chain.plan(2)
        q = rng.uniform(-1.2, 1.2, 5)
        fkd2 = chain.fk_derivs(q, order=2)
        eps = 1e-5
        for j in range(5):
            for k in range(j, 5):
                dj = np.zeros(5)
                dk = np.zeros(5)
                dj[j] = eps
                dk[k] = eps
                plan1 = chain.plan(1)
                fp = chain.fk_derivs(q + dk, order=1)[:, plan1.index[(j,)]]
                fm = chain.fk_derivs(q - dk, order=1)[:, plan1.index[(j,)]]
                fd = (fp - fm) / (2 * eps)
                np.testing.assert_allclose(
                    fkd2[:, plan2.index[tuple(sorted((j, k)))]], fd, atol=2e-7
                )

    def test_mass_matrix_derivative_matches_fd(self):
        chain = spatial_test_chain()
        rng = np.random.default_rng(14)
        for _ in range(5):
            q = rng.uniform(-1.2, 1.2, 5)
            u = rng.uniform(-2, 2, 5)
            _, _, dm, _, _ = chain.lagrangian_tensors(q, u, GRAVITY, order=1)
            eps = 1e-6
            for k in range(5):
                dq = np.zeros(5)
                dq[k] = eps
                mp = chain.mass_matrix(q + dq)
                mm = chain.mass_matrix(q - dq)
                np.testing.assert_allclose(dm[:, :, k], (mp - mm) / (2 * eps), atol=5e-8)

    def test_bias_derivatives_match_fd(self):
        chain = spatial_test_chain()
        rng = np.random.default_rng(15)
        for _ in range(5):
            q = rng.uniform(-1.2, 1.2, 5)
            u = rng.uniform(-2, 2, 5)
            _, h0, _, dh_dq, dh_du = chain.lagrangian_tensors(q, u, GRAVITY, order=1)
            np.testing.assert_allclose(h0, chain.bias_forces(q, u, GRAVITY), atol=1e-11)
            eps = 1e-6
            for k in range(5):
                d = np.zeros(5)
                d[k] = eps
                fd_q = (
                    chain.bias_forces(q + d, u, GRAVITY)
                    - chain.bias_forces(q - d, u, GRAVITY)
                ) / (2 * eps)
                fd_u = (
                    chain.bias_forces(q, u + d, GRAVITY)
                    - chain.bias_forces(q, u - d, GRAVITY)
                ) / (2 * eps)
                np.testing.assert_allclose(dh_dq[:, k], fd_q, atol=5e-7)
                np.testing.assert_allclose(dh_du[:, k], fd_u, atol=5e-8)


class TestMassMatrixProperties:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_symmetric_positive_definite(self, seed):
        chain = spatial_test_chain()
        rng = np.random.default_rng(seed)
        for _ in range(50):
            q = rng.uniform(-2.0, 2.0, 5)
            m = chain.mass_matrix(q)
            assert np.linalg.norm(m - m.T) <= 1e-12
            assert np.linalg.eigvalsh(m).min() > 0

    def test_energy_balance_under_integration(self):
        """dE/dt = u^T tau - u^T D u, checked by fine RK4 integration."""
        rng = np.random.default_rng(21)
        params = two_link_params(rng)
        chain = two_link_chain(params)
        tau = np.array([0.4, -0.2])
        damping = chain.damping.copy()

        def accel(q, u):
            m = chain.mass_matrix(q)
            h = chain.bias_forces(q, u, GRAVITY)
            return np.linalg.solve(m, tau - h)

        def energy(q, u):
            m = chain.mass_matrix(q)
            kin = 0.5 * u @ m @ u
            # potential energy of both links
            fkd = chain.fk_derivs(q, order=0)
            pot = 0.0
            for l, joint in enumerate(chain.joints):
                c = fkd[l, 0, :3, :3] @ joint.com + fkd[l, 0, :3, 3]
                pot -= joint.mass * GRAVITY @ c
            return kin + pot

        q = np.array([0.3, -0.5])
        u = np.array([0.2, 0.1])
        dt = 1e-4
        work = 0.0
        e0 = energy(q, u)
        for _ in range(2000):
            # RK4 on (q, u), trapezoid on the power integral
            p1 = u @ tau - u @ (damping * u)
            k1q, k1u = u, accel(q, u)
            k2q, k2u = u + 0.5 * dt * k1u, accel(q + 0.5 * dt * k1q, u + 0.5 * dt * k1u)
            k3q, k3u = u + 0.5 * dt * k2u, accel(q + 0.5 * dt * k2q, u + 0.5 * dt * k2u)
            k4q, k4u = u + dt * k3u, accel(q + dt * k3q, u + dt * k3u)
            q = q + dt * (k1q + 2 * k2q + 2 * k3q + k4q) / 6
            u = u + dt * (k1u + 2 * k2u + 2 * k3u + k4u) / 6
            p2 = u @ tau - u @ (damping * u)
            work += 0.5 * dt * (p1 + p2)
        drift = energy(q, u) - e0 - work
        assert abs(drift) < 1e-6
