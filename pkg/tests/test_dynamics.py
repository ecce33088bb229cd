import numpy as np
import pytest

from shipmpc.dynamics import (
    ControlAction,
    ModelConfig,
    NonFiniteStateError,
    VesselState,
    continuous_rhs,
    rhs_array,
    rk4_step_array,
    rk4_step_batch,
    rk4_step_generic,
    rk4_step_jacobian_batch,
    rk4_step_with_jacobian,
    rotation_matrix,
    sample_disturbance,
    step,
    thruster_matrix,
)


def model(default_config):
    return default_config.model


class TestRotationMatrix:
    def test_zero_heading_is_identity(self):
        assert np.allclose(rotation_matrix(0.0), np.eye(3))

    def test_quarter_turn(self):
        expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        assert np.allclose(rotation_matrix(np.pi / 2), expected, atol=1e-15)

    def test_orthogonal_unit_determinant(self):
        j = rotation_matrix(0.7)
        assert np.max(np.abs(j.T @ j - np.eye(3))) <= 1e-12
        assert abs(np.linalg.det(j) - 1.0) <= 1e-12

    def test_orthogonality_many_angles(self, rng):
        for psi in rng.uniform(-20, 20, size=1000):
            j = rotation_matrix(psi)
            assert np.max(np.abs(j.T @ j - np.eye(3))) <= 1e-12
            assert abs(np.linalg.det(j) - 1.0) <= 1e-12


class TestThrusterMatrix:
    def test_zero_azimuth_columns(self, default_config):
        cfg = model(default_config)
        t = thruster_matrix(np.array([np.pi / 2, 0.0, 0.0]), cfg)
        assert np.allclose(t[:, 1], [1.0, 0.0, -cfg.ly2])
        assert np.allclose(t[:, 2], [1.0, 0.0, -cfg.ly3])

    def test_lateral_azimuth_columns(self, default_config):
        cfg = model(default_config)
        t = thruster_matrix(np.array([np.pi / 2, np.pi / 2, np.pi / 2]), cfg)
        assert np.allclose(t[:, 1], [0.0, 1.0, cfg.lx2])
        assert np.allclose(t[:, 2], [0.0, 1.0, cfg.lx3])

    def test_tunnel_column_constant(self, default_config):
        cfg = model(default_config)
        t = thruster_matrix(np.array([np.pi / 2, 0.3, -0.4]), cfg)
        assert np.allclose(t[:, 0], [0.0, 1.0, cfg.lx1])

    def test_force_recomposition_oracle(self, default_config, rng):
        # independent scalar loop: per-thruster force and moment contributions
        cfg = model(default_config)
        for _ in range(25):
            alpha = np.array([np.pi / 2, *rng.uniform(-2.9, 2.9, 2)])
            f = rng.uniform(-50, 50, 3)
            tau = thruster_matrix(alpha, cfg) @ f
            directions = [
                (0.0, 1.0, cfg.lx1),
                (np.cos(alpha[1]), np.sin(alpha[1]),
                 cfg.lx2 * np.sin(alpha[1]) - cfg.ly2 * np.cos(alpha[1])),
                (np.cos(alpha[2]), np.sin(alpha[2]),
                 cfg.lx3 * np.sin(alpha[2]) - cfg.ly3 * np.cos(alpha[2])),
            ]
            expect = np.zeros(3)
            for fp, (cx, cy, cn) in zip(f, directions):
                expect += fp * np.array([cx, cy, cn])
            assert np.allclose(tau, expect, atol=1e-12)

    def test_mirrored_azimuths_cancel_yaw(self, default_config):
        # symmetric lever arms, equal forces, opposite angles: yaw terms cancel
        cfg = model(default_config)
        assert cfg.ly2 == -cfg.ly3 and cfg.lx2 == cfg.lx3
        a = 0.6
        t = thruster_matrix(np.array([np.pi / 2, a, -a]), cfg)
        f = np.array([0.0, 10.0, 10.0])
        tau = t @ f
        assert abs(tau[2]) <= 1e-12


class TestContinuousRhs:
    def test_equilibrium(self, default_config):
        state = VesselState(1.0, 2.0, 0.5, 0.0, 0.0, 0.0)
        action = ControlAction(0.0, 0.0, 0.0, 0.2, -0.2)
        xdot = continuous_rhs(state, action, np.zeros(3), model(default_config))
        assert np.allclose(xdot, 0.0)

    def test_unforced_straight_motion(self, default_config):
        cfg = model(default_config)
        undamped = ModelConfig(
            mass_matrix=cfg.mass_matrix,
            damping_matrix=np.zeros((3, 3)),
            lx1=cfg.lx1, lx2=cfg.lx2, lx3=cfg.lx3, ly2=cfg.ly2, ly3=cfg.ly3,
            dt=cfg.dt, disturbance_std=0.0,
            f1_min=cfg.f1_min, f1_max=cfg.f1_max,
            f23_min=cfg.f23_min, f23_max=cfg.f23_max,
            alpha_max=cfg.alpha_max, vessel_radius=cfg.vessel_radius,
        )
        state = VesselState(0.0, 0.0, 0.0, 1.0, 0.0, 0.0)
        action = ControlAction(0.0, 0.0, 0.0, 0.0, 0.0)
        xdot = continuous_rhs(state, action, np.zeros(3), undamped)
        assert np.allclose(xdot, [1.0, 0.0, 0.0, 0.0, 0.0, 0.0], atol=1e-14)

    def test_finite_difference_of_independent_integrator(self, default_config, rng):
        # independent Euler micro-integrator; central-difference its trajectory
        cfg = model(default_config)
        for _ in range(10):
            x = rng.uniform(-1, 1, 6)
            u5 = np.array([*rng.uniform(-20, 20, 1), *rng.uniform(0, 20, 2),
                           *rng.uniform(-1.5, 1.5, 2)])
            tau = rng.uniform(-0.5, 0.5, 3)

            def euler_state(t, n_sub=4000):
                xs = x.copy()
                h = t / n_sub
                for _ in range(n_sub):
                    xs = xs + h * rhs_array(xs, u5, tau, cfg)
                return xs

            h = 1e-3
            fd = (euler_state(h) - euler_state(-h)) / (2 * h)
            assert np.allclose(rhs_array(x, u5, tau, cfg), fd, rtol=1e-5, atol=1e-6)


class TestStep:
    def test_fixed_point(self, default_config):
        state = VesselState(3.0, -1.0, 0.7, 0.0, 0.0, 0.0)
        action = ControlAction(0.0, 0.0, 0.0, 0.1, -0.1)
        nxt = step(state, action, np.zeros(3), model(default_config))
        assert np.allclose(nxt.as_array(), state.as_array(), atol=1e-14)

    def test_rk4_order_by_step_doubling(self, default_config):
        # fourth-order global error: halving dt cuts the Richardson gap ~16x
        cfg = model(default_config)
        state = np.array([0.0, 0.0, 0.3, 0.5, 0.05, 0.02])
        u5 = np.array([5.0, 10.0, 8.0, 0.3, -0.2])
        tau = np.array([0.1, -0.05, 0.02])

        def integrate(dt, n):
            c = ModelConfig(
                mass_matrix=cfg.mass_matrix, damping_matrix=cfg.damping_matrix,
                lx1=cfg.lx1, lx2=cfg.lx2, lx3=cfg.lx3, ly2=cfg.ly2, ly3=cfg.ly3,
                dt=dt, disturbance_std=0.0,
                f1_min=cfg.f1_min, f1_max=cfg.f1_max,
                f23_min=cfg.f23_min, f23_max=cfg.f23_max,
                alpha_max=cfg.alpha_max, vessel_radius=cfg.vessel_radius,
            )
            x = state.copy()
            for _ in range(n):
                x = rk4_step_array(x, u5, tau, c)
            return x

        total = 2.0
        err_ate = np.linalg.norm(integrate(total / 8, 8) - integrate(total / 16, 16))
        err_fine = np.linalg.norm(integrate(total / 16, 16) - integrate(total / 32, 32))
        ratio = err_ate / err_fine
        assert 10.0 < ratio < 40.0

    def test_deterministic_with_injected_disturbance(self, default_config):
        cfg = model(default_config)
        state = VesselState(0.0, 0.0, 0.8, 0.4, 0.0, 0.0)
        action = ControlAction(3.0, 12.0, 9.0, 0.4, -0.3)
        tau = np.array([0.01, -0.02, 0.005])
        a = step(state, action, tau, cfg).as_array()
        b = step(state, action, tau, cfg).as_array()
        assert np.array_equal(a, b)

    def test_zero_std_sampling_is_deterministic(self, default_config):
        cfg = model(default_config)
        zero = ModelConfig(
            mass_matrix=cfg.mass_matrix, damping_matrix=cfg.damping_matrix,
            lx1=cfg.lx1, lx2=cfg.lx2, lx3=cfg.lx3, ly2=cfg.ly2, ly3=cfg.ly3,
            dt=cfg.dt, disturbance_std=0.0,
            f1_min=cfg.f1_min, f1_max=cfg.f1_max,
            f23_min=cfg.f23_min, f23_max=cfg.f23_max,
            alpha_max=cfg.alpha_max, vessel_radius=cfg.vessel_radius,
        )
        state = VesselState(0.0, 0.0, 0.8, 0.4, 0.0, 0.0)
        action = ControlAction(3.0, 12.0, 9.0, 0.4, -0.3)
        a = step(state, action, np.random.default_rng(0), zero).as_array()
        b = step(state, action, np.random.default_rng(99), zero).as_array()
        assert np.array_equal(a, b)

    def test_damped_free_motion_dissipates_energy(self, default_config, rng):
        # unit mass, positive definite damping: 0.5 nu'nu never increases
        cfg = model(default_config)
        damped = ModelConfig(
            mass_matrix=np.eye(3),
            damping_matrix=np.diag([0.8, 1.1, 0.6]),
            lx1=cfg.lx1, lx2=cfg.lx2, lx3=cfg.lx3, ly2=cfg.ly2, ly3=cfg.ly3,
            dt=0.5, disturbance_std=0.0,
            f1_min=cfg.f1_min, f1_max=cfg.f1_max,
            f23_min=cfg.f23_min, f23_max=cfg.f23_max,
            alpha_max=cfg.alpha_max, vessel_radius=cfg.vessel_radius,
        )
        action = ControlAction(0.0, 0.0, 0.0, 0.0, 0.0)
        for _ in range(100):
            state = VesselState(*rng.uniform(-1, 1, 3), *rng.uniform(-0.8, 0.8, 3))
            before = 0.5 * state.velocity @ state.velocity
            nxt = step(state, action, np.zeros(3), damped)
            after = 0.5 * nxt.velocity @ nxt.velocity
            assert after <= before + 1e-12

    def test_nonfinite_state_raises(self, default_config):
        state = VesselState(0.0, 0.0, 0.0, np.nan, 0.0, 0.0)
        action = ControlAction(0.0, 0.0, 0.0, 0.0, 0.0)
        with pytest.raises(NonFiniteStateError):
            step(state, action, np.zeros(3), model(default_config))


class TestBatchAndGenericConsistency:
    def test_batch_matches_scalar(self, default_config, rng):
        cfg = model(default_config)
        xs = rng.uniform(-1, 1, (7, 6))
        us = np.column_stack([
            rng.uniform(-20, 20, 7), rng.uniform(0, 30, (7, 2)),
            rng.uniform(-1.5, 1.5, (7, 2)),
        ])
        hm = us[:, [0, 1, 2, 3, 4]]
        tau = rng.uniform(-0.2, 0.2, (7, 3))
        batch = rk4_step_batch(xs, hm, tau, cfg)
        vals, a_b, b_b, g_b = rk4_step_jacobian_batch(xs, hm, tau, cfg)
        for i in range(7):
            ref, a_r, b_r, g_r = rk4_step_with_jacobian(xs[i], hm[i], tau[i], cfg)
            assert np.allclose(batch[i], ref, atol=1e-13)
            assert np.allclose(vals[i], ref, atol=1e-13)
            assert np.allclose(a_b[i], a_r, atol=1e-12)
            assert np.allclose(b_b[i], b_r, atol=1e-12)
            assert np.allclose(g_b[i], g_r, atol=1e-12)

    def test_generic_matches_array(self, default_config, rng):
        cfg = model(default_config)
        for _ in range(10):
            x = rng.uniform(-1, 1, 6)
            u = np.array([*rng.uniform(-10, 10, 3), *rng.uniform(-1, 1, 2)])
            tau = rng.uniform(-0.1, 0.1, 3)
            gen = np.array(rk4_step_generic(list(x), list(u), list(tau), cfg))
            assert np.allclose(gen, rk4_step_array(x, u, tau, cfg), atol=1e-13)

    def test_jacobians_match_finite_differences(self, default_config, rng):
        cfg = model(default_config)
        x = rng.uniform(-0.5, 0.5, 6)
        u = np.array([4.0, 12.0, 7.0, 0.4, -0.5])
        tau = np.array([0.02, -0.03, 0.01])
        _, a_mat, b_mat, g_mat = rk4_step_with_jacobian(x, u, tau, cfg)
        h = 1e-6

        def fd(fun, base, j):
            e = np.zeros_like(base)
            e[j] = h
            return (fun(base + e) - fun(base - e)) / (2 * h)

        for j in range(6):
            col = fd(lambda xx: rk4_step_array(xx, u, tau, cfg), x, j)
            assert np.allclose(a_mat[:, j], col, rtol=1e-6, atol=1e-9)
        for j in range(5):
            col = fd(lambda uu: rk4_step_array(x, uu, tau, cfg), u, j)
            assert np.allclose(b_mat[:, j], col, rtol=1e-6, atol=1e-9)
        for j in range(3):
            col = fd(lambda tt: rk4_step_array(x, u, tt, cfg), tau, j)
            assert np.allclose(g_mat[:, j], col, rtol=1e-6, atol=1e-9)


class TestActionHelpers:
    def test_clipping_and_bounds(self, default_config):
        cfg = model(default_config)
        raw = ControlAction(f1=500.0, f2=-5.0, f3=300.0, alpha2=4.0, alpha3=-4.0)
        assert not raw.satisfies_bounds(cfg)
        clipped = raw.clipped(cfg)
        assert clipped.satisfies_bounds(cfg)
        assert clipped.f1 == cfg.f1_max
        assert clipped.f2 == cfg.f23_min
        assert clipped.alpha2 == cfg.alpha_max

    def test_round_trip(self):
        a = ControlAction(1.0, 2.0, 3.0, 0.5, -0.5)
        b = ControlAction.from_array(a.as_array())
        assert a == b

    def test_disturbance_sampling_shape_and_scale(self, default_config, rng):
        cfg = model(default_config)
        draws = np.array([sample_disturbance(rng, cfg) for _ in range(4000)])
        assert draws.shape == (4000, 3)
        assert np.allclose(draws.std(axis=0), cfg.disturbance_std, rtol=0.1)
