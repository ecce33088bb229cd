"""Self-contained verification battery behind the ``check`` CLI command.

Each check recomputes its expected answer from an independent construction
(analytic KKT point, dense Bellman solve, planted least-squares solution,
finite differences), so a passing battery certifies the derivative and
solver plumbing on the user's machine, not just in CI.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from shipmpc import critic, nlp
from shipmpc.config import RunConfig
from shipmpc.dynamics import VesselState
from shipmpc.learner import EpisodeLog, run_episode
from shipmpc.ocp import (
    OcpSpec,
    THETA_DIM,
    ThetaParams,
    build_ocp,
    cold_start,
    policy,
    solve_built,
)
from shipmpc.sensitivity import policy_sensitivity

FD_DELTA = 1e-5


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _small_spec(config: RunConfig, horizon: int = 6) -> OcpSpec:
    return OcpSpec(
        horizon=horizon,
        gamma=config.ocp_spec.gamma,
        omega=config.ocp_spec.omega,
        omega_f=config.ocp_spec.omega_f,
        delta=config.ocp_spec.delta,
        model=config.model,
        mission=config.mission,
    )


def check_ocp_derivatives(
    config: RunConfig, seed: int, corrupt_gradient: bool = False
) -> CheckResult:
    """Analytic callback derivatives vs central finite differences."""
    spec = _small_spec(config, horizon=4)
    rng = np.random.default_rng(seed)
    pose = config.mission.initial_pose
    state = VesselState(pose[0], pose[1], pose[2], 0.3, 0.0, 0.0)
    built = build_ocp(state, config.theta0, spec)
    instance = built.instance
    if corrupt_gradient:
        clean = instance.gradient

        def corrupted(z: np.ndarray) -> np.ndarray:
            g = clean(z).copy()
            g[0] += 1e-2
            return g

        instance = nlp.NlpInstance(
            n=instance.n,
            objective=instance.objective,
            gradient=corrupted,
            eq_con=instance.eq_con,
            eq_jac=instance.eq_jac,
            ineq_con=instance.ineq_con,
            ineq_jac=instance.ineq_jac,
            cost_hessian=instance.cost_hessian,
            n_eq=instance.n_eq,
            n_ineq=instance.n_ineq,
        )
    z0, _, _ = cold_start(built)
    points = [z0 + 0.05 * rng.standard_normal(built.layout.n) for _ in range(10)]
    ok, worst = nlp.check_derivatives(instance, points, rel_tol=1e-5)
    return CheckResult(
        "ocp derivative consistency", ok, f"max relative error {worst:.3e}"
    )


def check_analytic_qp() -> CheckResult:
    """min 0.5 z'z s.t. z1 >= 1 has solution e1 with multiplier 1."""
    n = 4
    instance = nlp.NlpInstance(
        n=n,
        objective=lambda z: 0.5 * float(z @ z),
        gradient=lambda z: z.copy(),
        ineq_con=lambda z: np.array([1.0 - z[0]]),
        ineq_jac=lambda z: np.array([[-1.0, 0.0, 0.0, 0.0]]),
        n_ineq=1,
    )
    settings = nlp.SolverSettings(
        hessian_mode="damped-bfgs", kkt_tolerance=1e-12, qp_tolerance=1e-13
    )
    res = nlp.solve(instance, np.zeros(n), settings)
    x_err = float(np.max(np.abs(res.x - np.array([1.0, 0.0, 0.0, 0.0]))))
    mu_err = abs(float(res.mu[0]) - 1.0)
    err = max(x_err, mu_err)
    return CheckResult("analytic QP KKT point", err <= 1e-10, f"max error {err:.3e}")


def sensitivity_fd_error(
    built, solution, theta: ThetaParams, spec: OcpSpec, settings: nlp.SolverSettings
) -> tuple[float, np.ndarray, np.ndarray]:
    """Worst entrywise deviation between analytic and FD policy Jacobians.

    Entries whose magnitude stays below 1e-8 on both sides are compared
    absolutely at that same scale; everything else relatively.
    """
    state = VesselState.from_array(built.x0)
    sens = policy_sensitivity(built, solution)
    flat = theta.flatten()
    fd = np.zeros((THETA_DIM, 6))
    for j in range(THETA_DIM):
        pert = np.zeros(THETA_DIM)
        pert[j] = FD_DELTA
        a_plus, _ = policy(
            state, ThetaParams.from_flat(flat + pert), spec, settings, solution
        )
        a_minus, _ = policy(
            state, ThetaParams.from_flat(flat - pert), spec, settings, solution
        )
        fd[j] = (a_plus.as_array() - a_minus.as_array()) / (2.0 * FD_DELTA)
    scale = np.maximum(np.abs(sens.jacobian), np.abs(fd))
    diff = np.abs(sens.jacobian - fd)
    small = scale <= 1e-8
    err = np.where(small, diff / 1e-8 * 1e-4, diff / np.maximum(scale, 1e-300))
    return float(np.max(err)), sens.jacobian, fd


def check_sensitivity(config: RunConfig, seed: int) -> CheckResult:
    """Analytic policy sensitivity vs central finite differences."""
    spec = _small_spec(config, horizon=6)
    settings = nlp.SolverSettings(
        kkt_tolerance=1e-11,
        qp_tolerance=1e-13,
        max_sqp_iterations=200,
        hessian_mode=config.solver.hessian_mode,
    )
    rng = np.random.default_rng(seed)
    pose = config.mission.initial_pose
    worst = 0.0
    for _ in range(2):
        state = VesselState(
            pose[0] + rng.uniform(-0.5, 0.5),
            pose[1] + rng.uniform(-0.5, 0.5),
            pose[2] + rng.uniform(-0.1, 0.1),
            0.3 + rng.uniform(-0.1, 0.1),
            rng.uniform(-0.05, 0.05),
            rng.uniform(-0.02, 0.02),
        )
        built = build_ocp(state, config.theta0, spec)
        _, sol = solve_built(built, settings)
        err, _, _ = sensitivity_fd_error(built, sol, config.theta0, spec, settings)
        worst = max(worst, err)
    return CheckResult(
        "policy sensitivity vs finite differences",
        worst <= 1e-4,
        f"max scaled error {worst:.3e} (tolerance 1e-4)",
    )


def tabular_chain_episode(
    p_next: np.ndarray, costs: np.ndarray, start: int, length: int
) -> EpisodeLog:
    """Deterministic chain walk encoded as an EpisodeLog with 6-dim states.

    State i is embedded as the 6-vector with first component i; the feature
    map used by the oracles turns it into a one-hot vector.
    """
    states = []
    s = start
    for _ in range(length + 1):
        vec = np.zeros(6)
        vec[0] = float(s)
        states.append(vec)
        s = int(p_next[s])
    k = length
    cost_list = [costs[int(states[i][0])] for i in range(k)]
    return EpisodeLog(
        states=np.asarray(states),
        actions=np.zeros((k, 6)),
        policy_actions=np.zeros((k, 6)),
        costs=np.asarray(cost_list, dtype=float),
        sensitivities=np.zeros((k, THETA_DIM, 6)),
        branch_flags=np.zeros(k, dtype=bool),
        discard_mask=np.zeros(k, dtype=bool),
        truncated=False,
        j_value=float(np.sum(cost_list)),
    )


def one_hot_features(n_states: int):
    def features(state: np.ndarray) -> np.ndarray:
        out = np.zeros(n_states)
        out[int(round(state[0]))] = 1.0
        return out

    return features


def check_lstd_bellman() -> CheckResult:
    """Tabular chain: LSTD value parameters equal the dense Bellman solve."""
    p_next = np.array([1, 2, 0])
    costs = np.array([1.0, -0.5, 2.0])
    gamma = 0.9
    p_mat = np.zeros((3, 3))
    for i, j in enumerate(p_next):
        p_mat[i, j] = 1.0
    v_true = np.linalg.solve(np.eye(3) - gamma * p_mat, costs)
    ep = tabular_chain_episode(p_next, costs, start=0, length=60)
    v_fit = critic.lstd_v([ep], gamma, one_hot_features(3))
    err = float(np.max(np.abs(v_fit - v_true)))
    return CheckResult("lstd_v vs Bellman solve", err <= 1e-8, f"max error {err:.3e}")


def check_lstd_planted(seed: int) -> CheckResult:
    """lstd_w on noise-free synthetic data recovers the planted parameters."""
    rng = np.random.default_rng(seed)
    w_true = 0.5 * rng.standard_normal(THETA_DIM)
    k = 3 * THETA_DIM
    sens = np.zeros((k, THETA_DIM, 6))
    actions = np.zeros((k, 6))
    costs = np.zeros(k)
    for i in range(k):
        psi = np.zeros(THETA_DIM)
        psi[i % THETA_DIM] = 1.0
        sens[i, :, 0] = psi
        actions[i, 0] = 1.0
        costs[i] = float(psi @ w_true)
    ep = EpisodeLog(
        states=np.zeros((k + 1, 6)),
        actions=actions,
        policy_actions=np.zeros((k, 6)),
        costs=costs,
        sensitivities=sens,
        branch_flags=np.zeros(k, dtype=bool),
        discard_mask=np.zeros(k, dtype=bool),
        truncated=False,
        j_value=float(np.sum(costs)),
    )
    w_fit = critic.lstd_w([ep], np.zeros(critic.FEATURE_DIM), 0.0,
                          critic.make_feature_fn(-np.ones(6), np.ones(6)))
    err = float(np.max(np.abs(w_fit - w_true)))
    return CheckResult("lstd_w planted recovery", err <= 1e-8, f"max error {err:.3e}")


def run_battery(
    config: RunConfig, seed: int, corrupt_gradient: bool = False
) -> list[CheckResult]:
    results = [
        check_ocp_derivatives(config, seed, corrupt_gradient=corrupt_gradient),
        check_analytic_qp(),
        check_sensitivity(config, seed),
        check_lstd_bellman(),
        check_lstd_planted(seed),
    ]
    return results
