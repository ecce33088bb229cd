"""Freight mission definition: reference path, obstacle field, and stage cost.

The per-step cost is piecewise: far from the dock it penalizes squared
cross-track error plus obstacle proximity, near the dock it switches to a
full docking cost on pose, velocity, and thruster force.  A singular-thruster
penalty is active in both branches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from shipmpc.dynamics import ControlAction, ModelConfig, VesselState, thruster_matrix


def wrap_angle(a: float) -> float:
    """Wrap an angle difference to (-pi, pi]."""
    w = -((-a + np.pi) % (2.0 * np.pi) - np.pi)
    return float(w)


def pose_difference(pose: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Pose error with the heading component wrapped to (-pi, pi]."""
    d = np.asarray(pose, dtype=float) - np.asarray(target, dtype=float)
    return np.array([d[0], d[1], wrap_angle(d[2])])


@dataclass(frozen=True)
class Obstacle:
    """Circular obstacle with center (ox, oy) and radius."""

    ox: float
    oy: float
    radius: float

    def __post_init__(self) -> None:
        if self.radius <= 0.0:
            raise ValueError("obstacle radius must be positive")


@dataclass
class MissionConfig:
    """Reference path, obstacles, dock pose, and stage-cost constants.

    ``waypoints`` define a piecewise-linear reference path; ``eta_d`` is the
    docking pose in radians.  ``d_switch`` compares against the squared pose
    distance to the dock, while episode termination uses the plain Euclidean
    norm against ``d_error``.  ``reference_speed`` is the nominal along-path
    speed used to lay out reference points over a prediction horizon.
    """

    waypoints: np.ndarray
    obstacles: list[Obstacle]
    eta_d: np.ndarray
    d_switch: float
    d_safe: float
    d_error: float
    obstacle_weights: np.ndarray
    rho: float
    epsilon: float
    w_diag: np.ndarray
    reference_speed: float
    reference_ramp: float
    initial_pose: np.ndarray
    initial_velocity: np.ndarray
    _seg_lengths: np.ndarray = field(init=False, repr=False, compare=False)
    _cum_lengths: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.waypoints = np.asarray(self.waypoints, dtype=float)
        self.eta_d = np.asarray(self.eta_d, dtype=float)
        self.obstacle_weights = np.asarray(self.obstacle_weights, dtype=float)
        self.w_diag = np.asarray(self.w_diag, dtype=float)
        self.initial_pose = np.asarray(self.initial_pose, dtype=float)
        self.initial_velocity = np.asarray(self.initial_velocity, dtype=float)
        self.validate()
        deltas = np.diff(self.waypoints, axis=0)
        self._seg_lengths = np.linalg.norm(deltas, axis=1)
        self._cum_lengths = np.concatenate([[0.0], np.cumsum(self._seg_lengths)])

    def validate(self) -> None:
        if self.waypoints.ndim != 2 or self.waypoints.shape[1] != 2:
            raise ValueError("waypoints must have shape (n, 2)")
        if len(self.waypoints) < 1:
            raise ValueError("reference path needs at least one waypoint")
        if self.eta_d.shape != (3,):
            raise ValueError("eta_d must have shape (3,)")
        if min(self.d_switch, self.d_safe, self.d_error) <= 0.0:
            raise ValueError("d_switch, d_safe, d_error must be positive")
        if len(self.obstacle_weights) != len(self.obstacles):
            raise ValueError("one penalty weight per obstacle required")
        if len(self.obstacles) and np.any(self.obstacle_weights <= 0.0):
            raise ValueError("obstacle penalty weights must be positive")
        if self.epsilon <= 0.0 or self.rho <= 0.0:
            raise ValueError("rho and epsilon must be positive")
        if self.w_diag.shape != (3,) or np.any(self.w_diag <= 0.0):
            raise ValueError("maneuverability weight diagonal must be positive")
        if self.reference_speed < 0.0:
            raise ValueError("reference speed must be nonnegative")
        if self.reference_ramp < 0.0:
            raise ValueError("reference ramp distance must be nonnegative")

    @property
    def n_obstacles(self) -> int:
        return len(self.obstacles)

    @property
    def path_length(self) -> float:
        return float(self._cum_lengths[-1])


def _project_to_path(mission: MissionConfig, point: np.ndarray) -> tuple[np.ndarray, float]:
    """Closest point on the piecewise-linear path and its arc-length position.

    Ties between segments go to the lower segment index.
    """
    wp = mission.waypoints
    if len(wp) == 1:
        return wp[0].copy(), 0.0
    best_d2 = np.inf
    best_point = wp[0]
    best_s = 0.0
    for i in range(len(wp) - 1):
        a, b = wp[i], wp[i + 1]
        ab = b - a
        denom = float(ab @ ab)
        if denom == 0.0:
            t = 0.0
        else:
            t = float(np.clip((point - a) @ ab / denom, 0.0, 1.0))
        cand = a + t * ab
        d2 = float((point - cand) @ (point - cand))
        if d2 < best_d2 - 1e-15:
            best_d2 = d2
            best_point = cand
            best_s = float(mission._cum_lengths[i] + t * mission._seg_lengths[i])
    return best_point.copy(), best_s


def path_point_at(mission: MissionConfig, s: float) -> np.ndarray:
    """Point at arc length ``s`` along the path, clamped to the endpoints."""
    wp = mission.waypoints
    if len(wp) == 1:
        return wp[0].copy()
    s = float(np.clip(s, 0.0, mission.path_length))
    idx = int(np.searchsorted(mission._cum_lengths, s, side="right") - 1)
    idx = min(idx, len(wp) - 2)
    seg_len = mission._seg_lengths[idx]
    t = 0.0 if seg_len == 0.0 else (s - mission._cum_lengths[idx]) / seg_len
    return wp[idx] + t * (wp[idx + 1] - wp[idx])


def reference_point(state: VesselState, mission: MissionConfig) -> np.ndarray:
    """Orthogonal projection of the vessel position onto the reference path."""
    point, _ = _project_to_path(mission, np.array([state.x, state.y]))
    return point


def reference_sequence(
    state: VesselState, mission: MissionConfig, n: int, dt: float
) -> np.ndarray:
    """Reference points for a prediction horizon, shape (n, 2).

    Starting from the projection of the current position, points advance
    along the path at ``reference_speed`` and clamp at the path end, so the
    tail of a long horizon settles on the final waypoint.  Over the last
    ``reference_ramp`` meters the advance speed tapers linearly to zero,
    shaping a decelerating docking approach.
    """
    _, s0 = _project_to_path(mission, np.array([state.x, state.y]))
    total = mission.path_length
    ramp = mission.reference_ramp
    out = np.empty((n, 2))
    s = s0
    for i in range(n):
        out[i] = path_point_at(mission, s)
        speed = mission.reference_speed
        if ramp > 0.0:
            speed *= min(1.0, max(0.0, total - s) / ramp)
        s += dt * speed
    return out


def tracking_error(state: VesselState, mission: MissionConfig) -> float:
    """Squared distance from the vessel position to the reference path."""
    ref = reference_point(state, mission)
    dx, dy = state.x - ref[0], state.y - ref[1]
    return float(dx * dx + dy * dy)


def obstacle_g(state: VesselState, obstacle: Obstacle, vessel_radius: float) -> float:
    """Normalized proximity to one obstacle; nonpositive iff collision-free."""
    d2 = (state.x - obstacle.ox) ** 2 + (state.y - obstacle.oy) ** 2
    return 1.0 - d2 / (obstacle.radius + vessel_radius) ** 2


def obstacle_penalty(
    state: VesselState, mission: MissionConfig, vessel_radius: float
) -> float:
    """Weighted hinge penalty on safe-distance violations, summed over obstacles."""
    total = 0.0
    for c_n, obs in zip(mission.obstacle_weights, mission.obstacles):
        total += c_n * max(0.0, obstacle_g(state, obs, vessel_radius) + mission.d_safe)
    return float(total)


def thruster_det(alpha: np.ndarray, model: ModelConfig) -> float:
    """Determinant of T(alpha), in closed form."""
    a2, a3 = float(alpha[1]), float(alpha[2])
    c2, s2, c3, s3 = np.cos(a2), np.sin(a2), np.cos(a3), np.sin(a3)
    a_2 = (model.lx2 - model.lx1) * s2 - model.ly2 * c2
    a_3 = (model.lx3 - model.lx1) * s3 - model.ly3 * c3
    return float(-c2 * a_3 + c3 * a_2)


def singularity_penalty(
    alpha: np.ndarray, mission: MissionConfig, model: ModelConfig
) -> float:
    """Penalty that diverges (up to rho/epsilon) near singular thruster layouts."""
    t_mat = thruster_matrix(alpha, model)
    det = float(np.linalg.det(t_mat @ np.diag(1.0 / mission.w_diag) @ t_mat.T))
    return mission.rho / (mission.epsilon + det)


def docking_cost(
    state: VesselState, action: ControlAction, mission: MissionConfig
) -> float:
    """Squared pose error to the dock plus squared velocity and force norms."""
    e = pose_difference(state.pose, mission.eta_d)
    return float(e @ e + state.velocity @ state.velocity + action.forces @ action.forces)


def squared_dock_distance(state: VesselState, mission: MissionConfig) -> float:
    e = pose_difference(state.pose, mission.eta_d)
    return float(e @ e)


def dock_distance(state: VesselState, mission: MissionConfig) -> float:
    return float(np.sqrt(squared_dock_distance(state, mission)))


def in_docking_region(state: VesselState, mission: MissionConfig) -> bool:
    """Stage-cost branch test: squared dock distance at most d_switch (inclusive)."""
    return squared_dock_distance(state, mission) <= mission.d_switch


def mission_complete(state: VesselState, mission: MissionConfig) -> bool:
    """Episode termination: Euclidean pose error within d_error."""
    return dock_distance(state, mission) <= mission.d_error


def stage_cost(
    state: VesselState,
    action: ControlAction,
    mission: MissionConfig,
    model: ModelConfig,
) -> float:
    """Piecewise per-step cost: tracking branch far out, docking branch near."""
    xi = singularity_penalty(action.angles, mission, model)
    if in_docking_region(state, mission):
        return docking_cost(state, action, mission) + xi
    return (
        tracking_error(state, mission)
        + obstacle_penalty(state, mission, model.vessel_radius)
        + xi
    )
