import dataclasses

import numpy as np
import pytest

from shipmpc.dynamics import ControlAction, VesselState
from shipmpc.mission import (
    MissionConfig,
    Obstacle,
    dock_distance,
    docking_cost,
    in_docking_region,
    mission_complete,
    obstacle_g,
    obstacle_penalty,
    pose_difference,
    reference_point,
    reference_sequence,
    singularity_penalty,
    stage_cost,
    thruster_det,
    tracking_error,
    wrap_angle,
)


def state_at(x, y, psi=0.0, u=0.0, v=0.0, r=0.0):
    return VesselState(x, y, psi, u, v, r)


class TestWrapAngle:
    @pytest.mark.parametrize(
        "angle,expected",
        [(0.0, 0.0), (np.pi, np.pi), (-np.pi, np.pi), (3 * np.pi / 2, -np.pi / 2),
         (2 * np.pi, 0.0), (-5 * np.pi / 2, -np.pi / 2)],
    )
    def test_values(self, angle, expected):
        assert wrap_angle(angle) == pytest.approx(expected, abs=1e-12)

    def test_range(self, rng):
        for a in rng.uniform(-50, 50, 500):
            w = wrap_angle(a)
            assert -np.pi < w <= np.pi
            assert abs((a - w) % (2 * np.pi)) < 1e-9 or abs(
                (a - w) % (2 * np.pi) - 2 * np.pi
            ) < 1e-9


class TestReferencePath:
    def test_point_on_path_projects_to_itself(self, default_config):
        mission = default_config.mission
        wp = mission.waypoints
        mid = 0.5 * (wp[0] + wp[1])
        assert np.allclose(reference_point(state_at(*mid), mission), mid, atol=1e-12)
        assert tracking_error(state_at(*mid), mission) == pytest.approx(0.0, abs=1e-15)

    def test_equidistant_tie_goes_to_lower_segment(self):
        # symmetric V-path: the apex belongs to both segments; tie resolves
        # onto segment 0's point
        mission = MissionConfig(
            waypoints=np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]]),
            obstacles=[],
            eta_d=np.array([2.0, 0.0, 0.0]),
            d_switch=1.0, d_safe=1.0, d_error=0.5,
            obstacle_weights=np.array([]),
            rho=1.0, epsilon=1e-3,
            w_diag=np.ones(3),
            reference_speed=0.5, reference_ramp=0.0,
            initial_pose=np.zeros(3), initial_velocity=np.zeros(3),
        )
        probe = state_at(1.0, 2.0)
        p = reference_point(probe, mission)
        assert np.allclose(p, [1.0, 1.0])

    def test_projection_matches_dense_sampling(self, default_config, rng):
        mission = default_config.mission
        wp = mission.waypoints
        lengths = np.linalg.norm(np.diff(wp, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(lengths)])

        def path_point(s):
            idx = min(np.searchsorted(cum, s, side="right") - 1, len(wp) - 2)
            t = (s - cum[idx]) / lengths[idx]
            return wp[idx] + t * (wp[idx + 1] - wp[idx])

        samples = np.array([path_point(s) for s in np.linspace(0, cum[-1], 10_000)])
        for _ in range(40):
            pos = rng.uniform(-5, 30, 2)
            best = np.min(np.linalg.norm(samples - pos, axis=1))
            got = np.linalg.norm(reference_point(state_at(*pos), default_config.mission) - pos)
            assert got <= best + 1e-6

    def test_reference_sequence_advances_and_clamps(self, default_config):
        mission = default_config.mission
        seq = reference_sequence(state_at(0.0, 0.0), mission, 400, 0.5)
        deltas = np.linalg.norm(np.diff(seq, axis=0), axis=1)
        assert np.all(deltas <= mission.reference_speed * 0.5 + 1e-9)
        assert np.allclose(seq[-1], mission.waypoints[-1], atol=1e-9)

    def test_reference_ramp_slows_near_end(self, scaled_config):
        mission = scaled_config.mission
        seq = reference_sequence(state_at(9.0, 7.2), mission, 20, 0.5)
        steps = np.linalg.norm(np.diff(seq, axis=0), axis=1)
        nonzero = steps[steps > 1e-12]
        assert len(nonzero) >= 2
        assert nonzero[-1] < nonzero[0]


class TestTrackingError:
    def test_lateral_offset_squared(self, default_config):
        mission = default_config.mission
        wp = mission.waypoints
        direction = wp[1] - wp[0]
        normal = np.array([-direction[1], direction[0]]) / np.linalg.norm(direction)
        base = 0.5 * (wp[0] + wp[1])
        probe = base + 3.0 * normal
        assert tracking_error(state_at(*probe), mission) == pytest.approx(9.0, rel=1e-9)

    def test_matches_norm_oracle(self, default_config, rng):
        mission = default_config.mission
        for _ in range(20):
            pos = rng.uniform(-3, 28, 2)
            ref = reference_point(state_at(*pos), mission)
            assert tracking_error(state_at(*pos), mission) == pytest.approx(
                float((pos - ref) @ (pos - ref)), rel=1e-12
            )


class TestObstacleTerms:
    def test_g_at_center_boundary_and_far(self):
        obs = Obstacle(2.0, 3.0, 1.5)
        r_o = 1.0
        combined = obs.radius + r_o
        assert obstacle_g(state_at(2.0, 3.0), obs, r_o) == pytest.approx(1.0)
        assert obstacle_g(state_at(2.0 + combined, 3.0), obs, r_o) == pytest.approx(
            0.0, abs=1e-12
        )
        assert obstacle_g(state_at(2.0 + 2 * combined, 3.0), obs, r_o) == pytest.approx(
            -3.0, rel=1e-12
        )

    def test_penalty_zero_when_clear(self, default_config):
        mission = default_config.mission
        far = state_at(-50.0, -50.0)
        assert obstacle_penalty(far, mission, default_config.model.vessel_radius) == 0.0

    def test_single_obstacle_arithmetic(self):
        mission = MissionConfig(
            waypoints=np.array([[0.0, 0.0], [10.0, 0.0]]),
            obstacles=[Obstacle(0.0, 0.0, 1.0)],
            eta_d=np.array([10.0, 0.0, 0.0]),
            d_switch=1.0, d_safe=1.0, d_error=0.5,
            obstacle_weights=np.array([5.0]),
            rho=1.0, epsilon=1e-3, w_diag=np.ones(3),
            reference_speed=0.5, reference_ramp=0.0,
            initial_pose=np.zeros(3), initial_velocity=np.zeros(3),
        )
        # choose a position where g = 0.2: 1 - d^2/4 = 0.2 -> d^2 = 3.2
        d = np.sqrt(3.2)
        val = obstacle_penalty(state_at(d, 0.0), mission, 1.0)
        assert val == pytest.approx(5.0 * (0.2 + 1.0), rel=1e-12)

    def test_penalty_matches_hand_summed_loop(self, default_config, rng):
        mission = default_config.mission
        r_o = default_config.model.vessel_radius
        for _ in range(30):
            pos = rng.uniform(0, 26, 2)
            total = 0.0
            for c, obs in zip(mission.obstacle_weights, mission.obstacles):
                g = 1.0 - ((pos[0] - obs.ox) ** 2 + (pos[1] - obs.oy) ** 2) / (
                    obs.radius + r_o
                ) ** 2
                total += c * max(0.0, g + mission.d_safe)
            assert obstacle_penalty(state_at(*pos), mission, r_o) == pytest.approx(
                total, rel=1e-12, abs=1e-12
            )

    def test_penalty_continuity_across_hinge(self, default_config):
        mission = default_config.mission
        r_o = default_config.model.vessel_radius
        obs = mission.obstacles[0]
        # radius where g + d_safe = 0
        d_star = (obs.radius + r_o) * np.sqrt(1.0 + mission.d_safe)
        c_max = np.max(mission.obstacle_weights)
        for eps in (-1e-6, 1e-6):
            a = obstacle_penalty(
                state_at(obs.ox + d_star + eps, obs.oy), mission, r_o
            )
            b = obstacle_penalty(
                state_at(obs.ox + d_star - eps, obs.oy), mission, r_o
            )
            assert abs(a - b) <= 1e-4 * c_max


class TestSingularityPenalty:
    def test_singular_configuration_saturates(self, default_config):
        # both azimuths lateral: thruster matrix rank-deficient, penalty
        # approaches rho / epsilon
        mission = default_config.mission
        model = default_config.model
        alpha = np.array([np.pi / 2, np.pi / 2, np.pi / 2])
        assert thruster_det(alpha, model) == pytest.approx(0.0, abs=1e-14)
        val = singularity_penalty(alpha, mission, model)
        assert val == pytest.approx(mission.rho / mission.epsilon, rel=1e-9)
        assert val == pytest.approx(1000.0, rel=1e-9)

    def test_generic_configuration_finite_positive(self, default_config):
        mission = default_config.mission
        val = singularity_penalty(
            np.array([np.pi / 2, -0.4, 0.5]), mission, default_config.model
        )
        assert 0.0 < val < mission.rho / mission.epsilon

    def test_determinant_matches_cofactor_oracle(self, default_config, rng):
        from shipmpc.dynamics import thruster_matrix

        model = default_config.model

        def cofactor_det(m):
            return (
                m[0, 0] * (m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1])
                - m[0, 1] * (m[1, 0] * m[2, 2] - m[1, 2] * m[2, 0])
                + m[0, 2] * (m[1, 0] * m[2, 1] - m[1, 1] * m[2, 0])
            )

        mission = default_config.mission
        w_inv = np.diag(1.0 / mission.w_diag)
        for _ in range(20):
            alpha = np.array([np.pi / 2, *rng.uniform(-2.9, 2.9, 2)])
            t = thruster_matrix(alpha, model)
            expected = mission.rho / (mission.epsilon + cofactor_det(t @ w_inv @ t.T))
            assert singularity_penalty(alpha, mission, model) == pytest.approx(
                expected, rel=1e-12
            )
            assert thruster_det(alpha, model) == pytest.approx(
                cofactor_det(t), rel=1e-10, abs=1e-12
            )


class TestDockingCost:
    def test_zero_at_dock(self, default_config):
        mission = default_config.mission
        state = VesselState(*mission.eta_d, 0.0, 0.0, 0.0)
        action = ControlAction(0.0, 0.0, 0.0, 0.3, -0.3)
        assert docking_cost(state, action, mission) == pytest.approx(0.0, abs=1e-15)

    def test_arithmetic(self, default_config):
        mission = default_config.mission
        state = VesselState(
            mission.eta_d[0] + 1.0, mission.eta_d[1], mission.eta_d[2], 0.1, 0.0, 0.0
        )
        action = ControlAction(1.0, 0.0, 0.0, 0.0, 0.0)
        assert docking_cost(state, action, mission) == pytest.approx(2.01, rel=1e-12)

    def test_heading_wraps(self, default_config):
        mission = default_config.mission
        state = VesselState(
            mission.eta_d[0], mission.eta_d[1], mission.eta_d[2] + 2 * np.pi,
            0.0, 0.0, 0.0,
        )
        action = ControlAction(0.0, 0.0, 0.0, 0.0, 0.0)
        assert docking_cost(state, action, mission) == pytest.approx(0.0, abs=1e-12)

    def test_matches_naive_loop(self, default_config, rng):
        mission = default_config.mission
        for _ in range(20):
            s = VesselState(*rng.uniform(-5, 30, 2), rng.uniform(-7, 7),
                            *rng.uniform(-1, 1, 3))
            a = ControlAction(*rng.uniform(-30, 30, 3), *rng.uniform(-2, 2, 2))
            e = pose_difference(s.pose, mission.eta_d)
            total = sum(x * x for x in e)
            total += sum(x * x for x in (s.u, s.v, s.r))
            total += sum(x * x for x in (a.f1, a.f2, a.f3))
            assert docking_cost(s, a, mission) == pytest.approx(total, rel=1e-12)


class TestStageCost:
    def test_far_state_uses_tracking_branch(self, default_config):
        # squared dock distance 100 > 20 selects the tracking branch
        mission = default_config.mission
        model = default_config.model
        direction = np.array([1.0, 0.0])
        pos = mission.eta_d[:2] - 10.0 * direction
        state = VesselState(pos[0], pos[1], mission.eta_d[2], 0.6, 0.0, 0.0)
        assert not in_docking_region(state, mission)
        action = ControlAction(5.0, 10.0, 10.0, 0.4, -0.4)
        expected = (
            tracking_error(state, mission)
            + obstacle_penalty(state, mission, model.vessel_radius)
            + singularity_penalty(action.angles, mission, model)
        )
        assert stage_cost(state, action, mission, model) == pytest.approx(expected)

    def test_near_state_uses_docking_branch(self, default_config):
        mission = default_config.mission
        model = default_config.model
        pos = mission.eta_d[:2] - np.array([2.0, 0.0])
        state = VesselState(pos[0], pos[1], mission.eta_d[2], 0.1, 0.0, 0.0)
        assert in_docking_region(state, mission)
        action = ControlAction(1.0, 2.0, 3.0, 0.4, -0.4)
        expected = docking_cost(state, action, mission) + singularity_penalty(
            action.angles, mission, model
        )
        assert stage_cost(state, action, mission, model) == pytest.approx(expected)

    def test_boundary_is_inclusive_for_docking(self, default_config):
        # exactly representable squared distance: offsets (4, 2) give 20.0
        mission = dataclasses.replace(default_config.mission, d_switch=20.0)
        state = VesselState(
            mission.eta_d[0] - 4.0, mission.eta_d[1] - 2.0, mission.eta_d[2],
            0.0, 0.0, 0.0,
        )
        assert (
            pose_difference(state.pose, mission.eta_d)
            @ pose_difference(state.pose, mission.eta_d)
            == 20.0
        )
        assert in_docking_region(state, mission)
        just_outside = VesselState(
            mission.eta_d[0] - 4.0 - 1e-9, mission.eta_d[1] - 2.0, mission.eta_d[2],
            0.0, 0.0, 0.0,
        )
        assert not in_docking_region(just_outside, mission)

    def test_nonnegative_everywhere(self, default_config, rng):
        mission = default_config.mission
        model = default_config.model
        for _ in range(100):
            s = VesselState(*rng.uniform(-10, 35, 2), rng.uniform(-7, 7),
                            *rng.uniform(-1, 1, 3))
            a = ControlAction(
                rng.uniform(model.f1_min, model.f1_max),
                *rng.uniform(model.f23_min, model.f23_max, 2),
                *rng.uniform(-model.alpha_max, model.alpha_max, 2),
            )
            assert stage_cost(s, a, mission, model) >= 0.0

    def test_tracking_branch_ignores_velocity_and_force(self, default_config):
        mission = default_config.mission
        model = default_config.model
        state_a = VesselState(0.0, 0.0, 0.3, 0.5, 0.1, 0.05)
        state_b = VesselState(0.0, 0.0, 0.3, -0.9, 0.4, -0.2)
        act_a = ControlAction(10.0, 50.0, 20.0, 0.3, -0.3)
        act_b = ControlAction(-30.0, 5.0, 90.0, 0.3, -0.3)
        assert not in_docking_region(state_a, mission)
        assert stage_cost(state_a, act_a, mission, model) == pytest.approx(
            stage_cost(state_b, act_b, mission, model)
        )

    def test_docking_branch_ignores_obstacles(self, default_config):
        mission = default_config.mission
        model = default_config.model
        near = VesselState(
            mission.eta_d[0] - 1.0, mission.eta_d[1], mission.eta_d[2], 0.1, 0.0, 0.0
        )
        action = ControlAction(1.0, 1.0, 1.0, 0.2, -0.2)
        moved = dataclasses.replace(
            mission,
            obstacles=[Obstacle(near.x, near.y + 0.5, 2.0)],
            obstacle_weights=np.array([100.0]),
        )
        assert stage_cost(near, action, mission, model) == pytest.approx(
            stage_cost(near, action, moved, model)
        )

    def test_termination_uses_plain_norm(self, default_config):
        mission = default_config.mission
        state = VesselState(
            mission.eta_d[0] - 0.4, mission.eta_d[1], mission.eta_d[2], 0.2, 0.0, 0.0
        )
        assert dock_distance(state, mission) == pytest.approx(0.4)
        assert mission_complete(state, mission)
        outside = VesselState(
            mission.eta_d[0] - 0.6, mission.eta_d[1], mission.eta_d[2], 0.2, 0.0, 0.0
        )
        assert not mission_complete(outside, mission)
