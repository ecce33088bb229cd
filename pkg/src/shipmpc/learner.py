"""Outer policy-gradient loop: roll out episodes, fit the critic, update theta.

Each learning step rolls out m episodes under the current controller
parameters with additive exploration noise on the first input, fits the
state-value and compatible action-value parameters by LSTD, forms the
deterministic policy gradient from the recorded policy sensitivities, and
takes one projected gradient step.  Everything is seeded, so a full learning
run is reproducible bit for bit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from shipmpc import critic, mission as mission_mod
from shipmpc.dynamics import (
    ControlAction,
    ModelConfig,
    VesselState,
    sample_disturbance,
    step,
)
from shipmpc.nlp import NlpError, SolverSettings
from shipmpc.ocp import (
    OcpSpec,
    THETA_DIM,
    THETA_GROUPS,
    ThetaParams,
    build_ocp,
    solve_built,
)
from shipmpc.sensitivity import policy_sensitivity

logger = logging.getLogger(__name__)


class LearningAbortedError(RuntimeError):
    """Too many solver failures inside one learning step."""

    def __init__(self, message: str, trace: "LearningTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass
class LearningConfig:
    """Step size, episode batching, exploration, and stopping rules."""

    step_size: float = 1e-3
    step_scales: dict = field(
        default_factory=lambda: {name: 1.0 for name in THETA_GROUPS}
    )
    episodes_per_step: int = 10
    max_learning_steps: int = 10
    convergence_tol: float = 1e-3
    episode_step_cap: int = 600
    exploration_frac: float = 0.01
    exploration_enabled: bool = True
    seed: int = 0
    feature_low: np.ndarray = field(
        default_factory=lambda: np.array([-5.0, -5.0, -3.5, -1.0, -1.0, -1.0])
    )
    feature_high: np.ndarray = field(
        default_factory=lambda: np.array([30.0, 35.0, 3.5, 1.0, 1.0, 1.0])
    )
    discard_weak_sensitivity: bool = False
    max_failure_fraction: float = 0.5

    def __post_init__(self) -> None:
        self.feature_low = np.asarray(self.feature_low, dtype=float)
        self.feature_high = np.asarray(self.feature_high, dtype=float)
        if self.step_size < 0.0:
            raise ValueError("step size must be nonnegative")
        if self.episodes_per_step < 1:
            raise ValueError("need at least one episode per learning step")
        if self.episode_step_cap < 1:
            raise ValueError("episode step cap must be at least 1")
        if self.max_learning_steps < 0:
            raise ValueError("max_learning_steps must be nonnegative")
        if set(self.step_scales) != set(THETA_GROUPS):
            raise ValueError(f"step_scales must have keys {sorted(THETA_GROUPS)}")

    def scale_vector(self) -> np.ndarray:
        out = np.empty(THETA_DIM)
        for name, sl in THETA_GROUPS.items():
            out[sl] = self.step_scales[name]
        return out


@dataclass
class EpisodeLog:
    """Per-step record of one closed-loop episode.

    ``states`` has one more row than the transition arrays: the state that
    triggered termination (or the state at the cap) is logged as the final
    successor.
    """

    states: np.ndarray
    actions: np.ndarray
    policy_actions: np.ndarray
    costs: np.ndarray
    sensitivities: np.ndarray
    branch_flags: np.ndarray
    discard_mask: np.ndarray
    truncated: bool
    j_value: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return len(self.costs)

    def empirical_j(self, gamma: float) -> float:
        k = np.arange(self.length)
        return float(np.sum(gamma**k * self.costs))


@dataclass
class LearnRecord:
    """Snapshot of one learning step (parameters used, not yet updated)."""

    step: int
    theta_flat: np.ndarray
    grad_norm: float
    j_mean: float
    episode_lengths: list[int]
    diagnostics: dict
    episodes: Optional[list[EpisodeLog]] = None

    def to_json_dict(self) -> dict:
        theta = ThetaParams.from_flat(self.theta_flat)
        return {
            "step": self.step,
            "theta": {
                "theta_l": theta.theta_l.tolist(),
                "theta_eta": theta.theta_eta.tolist(),
                "theta_nu": theta.theta_nu.tolist(),
                "theta_a": theta.theta_a.tolist(),
                "theta_d": theta.theta_d,
                "theta_g": theta.theta_g,
            },
            "grad_norm": self.grad_norm,
            "j_mean": self.j_mean,
            "episode_lengths": self.episode_lengths,
            "diagnostics": self.diagnostics,
        }


@dataclass
class LearningTrace:
    records: list[LearnRecord]
    final_theta: ThetaParams


def exploration_stds(model: ModelConfig, frac: float) -> np.ndarray:
    """Per-channel exploration noise std: a fraction of each input's range."""
    return frac * np.array(
        [
            model.f1_max - model.f1_min,
            model.f23_max - model.f23_min,
            model.f23_max - model.f23_min,
            2.0 * model.alpha_max,
            2.0 * model.alpha_max,
        ]
    )


def run_episode(
    theta: ThetaParams,
    spec: OcpSpec,
    solver_settings: SolverSettings,
    learn_cfg: LearningConfig,
    rng: np.random.Generator,
    record_sensitivity: bool = True,
    explore: Optional[bool] = None,
) -> EpisodeLog:
    """Roll out one closed-loop episode under the current parameters.

    Terminates when the pose error drops below the mission's d_error or at
    the step cap (marked truncated).  The executed action is the policy
    action plus clipped exploration noise; disturbances are sampled from
    ``rng`` every step, so two runs with equal inputs and rng state agree
    exactly.
    """
    mission = spec.mission
    model = spec.model
    if explore is None:
        explore = learn_cfg.exploration_enabled
    stds = exploration_stds(model, learn_cfg.exploration_frac)

    state = VesselState(
        x=mission.initial_pose[0],
        y=mission.initial_pose[1],
        psi=mission.initial_pose[2],
        u=mission.initial_velocity[0],
        v=mission.initial_velocity[1],
        r=mission.initial_velocity[2],
    )
    states = [state.as_array()]
    actions: list[np.ndarray] = []
    policy_actions: list[np.ndarray] = []
    costs: list[float] = []
    sens_list: list[np.ndarray] = []
    branch: list[bool] = []
    discard: list[bool] = []
    diag = {
        "solver_iterations": 0,
        "weak_complementarity": 0,
        "least_squares_sensitivity": 0,
        "immediate_termination": False,
    }

    warm = None
    truncated = True
    for _ in range(learn_cfg.episode_step_cap):
        if mission_mod.mission_complete(state, mission):
            truncated = False
            break
        built = build_ocp(state, theta, spec)
        pi_action, sol = solve_built(built, solver_settings, warm)
        diag["solver_iterations"] += sol.iterations

        if record_sensitivity:
            sens = policy_sensitivity(built, sol)
            jac = sens.jacobian
            weak = sens.weak_complementarity or sens.used_least_squares
            diag["weak_complementarity"] += int(sens.weak_complementarity)
            diag["least_squares_sensitivity"] += int(sens.used_least_squares)
        else:
            jac = np.zeros((THETA_DIM, 6))
            weak = False

        exec_action = pi_action
        if explore:
            noise = rng.normal(0.0, 1.0, size=5) * stds
            exec_action = ControlAction(
                f1=pi_action.f1 + noise[0],
                f2=pi_action.f2 + noise[1],
                f3=pi_action.f3 + noise[2],
                alpha2=pi_action.alpha2 + noise[3],
                alpha3=pi_action.alpha3 + noise[4],
            ).clipped(model)

        cost = mission_mod.stage_cost(state, exec_action, mission, model)
        states_k = state
        tau = sample_disturbance(rng, model)
        state = step(states_k, exec_action, tau, model)

        actions.append(exec_action.as_array())
        policy_actions.append(pi_action.as_array())
        costs.append(cost)
        sens_list.append(jac)
        branch.append(mission_mod.in_docking_region(states_k, mission))
        discard.append(bool(learn_cfg.discard_weak_sensitivity and weak))
        states.append(state.as_array())
        warm = sol
    else:
        truncated = True

    k = len(costs)
    if k == 0:
        diag["immediate_termination"] = True
        truncated = False
    gamma = spec.gamma
    costs_arr = np.asarray(costs)
    j_val = float(np.sum(gamma ** np.arange(k) * costs_arr)) if k else 0.0
    return EpisodeLog(
        states=np.asarray(states),
        actions=np.asarray(actions).reshape(k, 6),
        policy_actions=np.asarray(policy_actions).reshape(k, 6),
        costs=costs_arr,
        sensitivities=np.asarray(sens_list).reshape(k, THETA_DIM, 6),
        branch_flags=np.asarray(branch, dtype=bool),
        discard_mask=np.asarray(discard, dtype=bool),
        truncated=truncated,
        j_value=j_val,
        diagnostics=diag,
    )


def policy_gradient(episodes: list[EpisodeLog], w: np.ndarray) -> np.ndarray:
    """Estimated performance gradient: mean over episodes of sum_k S_k S_k' w."""
    w = np.asarray(w, dtype=float)
    if w.shape != (THETA_DIM,):
        raise ValueError(f"w must have shape ({THETA_DIM},)")
    per_episode = []
    for ep in episodes:
        acc = np.zeros(THETA_DIM)
        for k in range(ep.length):
            if ep.discard_mask[k]:
                continue
            s_k = ep.sensitivities[k]
            acc += s_k @ (s_k.T @ w)
        per_episode.append(acc)
    if not per_episode:
        return np.zeros(THETA_DIM)
    return np.mean(per_episode, axis=0)


def _project(theta_flat: np.ndarray) -> np.ndarray:
    """Keep the terminal gain and constraint tightening nonnegative."""
    out = theta_flat.copy()
    out[12] = max(0.0, out[12])
    out[13] = max(0.0, out[13])
    return out


def learn(
    theta0: ThetaParams,
    spec: OcpSpec,
    solver_settings: SolverSettings,
    learn_cfg: LearningConfig,
    keep_episodes: bool = False,
) -> LearningTrace:
    """Run the full learning loop and return the per-step trace.

    With ``max_learning_steps == 0`` a single evaluation record is produced
    and no update is applied.  Stops early once the gradient norm falls
    below the convergence tolerance.
    """
    theta = theta0
    records: list[LearnRecord] = []
    feature_fn = critic.make_feature_fn(learn_cfg.feature_low, learn_cfg.feature_high)
    scale = learn_cfg.scale_vector()
    seed_seq = np.random.SeedSequence(learn_cfg.seed)
    eval_only = learn_cfg.max_learning_steps == 0
    n_steps = 1 if eval_only else learn_cfg.max_learning_steps
    m = learn_cfg.episodes_per_step

    for step_idx in range(1, n_steps + 1):
        children = seed_seq.spawn(m)
        episodes: list[EpisodeLog] = []
        failures = 0
        for child in children:
            rng = np.random.default_rng(child)
            try:
                episodes.append(
                    run_episode(theta, spec, solver_settings, learn_cfg, rng)
                )
            except NlpError as exc:
                failures += 1
                logger.warning("episode solver failure at step %d: %s", step_idx, exc)
        trace_so_far = LearningTrace(records, theta)
        if failures > learn_cfg.max_failure_fraction * m or not episodes:
            raise LearningAbortedError(
                f"{failures}/{m} episodes failed at learning step {step_idx}",
                trace_so_far,
            )
        usable = [ep for ep in episodes if ep.length > 0]
        if not usable:
            raise LearningAbortedError(
                f"all episodes terminated immediately at step {step_idx}",
                trace_so_far,
            )

        v = critic.lstd_v(usable, spec.gamma, feature_fn)
        w = critic.lstd_w(usable, v, spec.gamma, feature_fn)
        grad = policy_gradient(usable, w)
        grad_norm = float(np.linalg.norm(grad))
        j_mean = float(np.mean([ep.j_value for ep in episodes]))
        diag = {
            "solver_failures": failures,
            "solver_iterations": int(
                sum(ep.diagnostics["solver_iterations"] for ep in episodes)
            ),
            "weak_complementarity": int(
                sum(ep.diagnostics["weak_complementarity"] for ep in episodes)
            ),
            "least_squares_sensitivity": int(
                sum(ep.diagnostics["least_squares_sensitivity"] for ep in episodes)
            ),
            "truncated_episodes": int(sum(ep.truncated for ep in episodes)),
        }
        records.append(
            LearnRecord(
                step=step_idx,
                theta_flat=theta.flatten(),
                grad_norm=grad_norm,
                j_mean=j_mean,
                episode_lengths=[ep.length for ep in episodes],
                diagnostics=diag,
                episodes=episodes if keep_episodes else None,
            )
        )
        logger.info(
            "learning step %d: J=%.4e |grad|=%.4e", step_idx, j_mean, grad_norm
        )
        if eval_only:
            break
        theta = ThetaParams.from_flat(
            _project(theta.flatten() - learn_cfg.step_size * scale * grad)
        )
        if grad_norm <= learn_cfg.convergence_tol:
            break

    return LearningTrace(records=records, final_theta=theta)
