"""Compatible action-value approximation fitted by batch least squares.

The state-value baseline is linear in a quadratic monomial expansion of the
normalized state; the action-value correction is linear in the compatible
features psi = (policy Jacobian) @ (executed action - policy action), which
vanish on-policy.  Both parameter vectors come from per-episode temporal-
difference least-squares solves averaged across episodes.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from shipmpc.ocp import THETA_DIM

# 1 constant + 6 linear + 21 degree-two monomials of the 6 state components
FEATURE_DIM = 28


class SingularSystemError(RuntimeError):
    """LSTD normal matrix is singular even after regularization."""

    def __init__(self, message: str, condition: float):
        super().__init__(message)
        self.condition = condition


def monomial_indices() -> list[tuple[int, ...]]:
    """Documented feature ordering: (), (i,), then (i, j) with i <= j."""
    idx: list[tuple[int, ...]] = [()]
    idx.extend((i,) for i in range(6))
    for i in range(6):
        for j in range(i, 6):
            idx.append((i, j))
    return idx


_MONOMIALS = monomial_indices()


def make_feature_fn(
    low: np.ndarray, high: np.ndarray
) -> Callable[[np.ndarray], np.ndarray]:
    """Quadratic monomial features of the state scaled to roughly [-1, 1].

    The affine scaling keeps positions (tens of meters) and velocities
    (fractions of m/s) comparable so the LSTD normal matrix stays
    well-conditioned.
    """
    low = np.asarray(low, dtype=float)
    high = np.asarray(high, dtype=float)
    if low.shape != (6,) or high.shape != (6,):
        raise ValueError("feature ranges must have shape (6,)")
    if np.any(high <= low):
        raise ValueError("feature range upper bounds must exceed lower bounds")
    center = 0.5 * (low + high)
    half = 0.5 * (high - low)

    def features(state: np.ndarray) -> np.ndarray:
        z = (np.asarray(state, dtype=float) - center) / half
        out = np.empty(FEATURE_DIM)
        out[0] = 1.0
        out[1:7] = z
        k = 7
        for i in range(6):
            for j in range(i, 6):
                out[k] = z[i] * z[j]
                k += 1
        return out

    return features


def psi_features(
    action: np.ndarray, policy_action: np.ndarray, sensitivity: np.ndarray
) -> np.ndarray:
    """Compatible state-action features: sensitivity @ (a - pi(s))."""
    action = np.asarray(action, dtype=float)
    policy_action = np.asarray(policy_action, dtype=float)
    sensitivity = np.asarray(sensitivity, dtype=float)
    if action.shape != (6,) or policy_action.shape != (6,):
        raise ValueError("actions must have shape (6,)")
    if sensitivity.shape != (THETA_DIM, 6):
        raise ValueError(f"sensitivity must have shape ({THETA_DIM}, 6)")
    return sensitivity @ (action - policy_action)


def _regularized_solve(a_mat: np.ndarray, b: np.ndarray, what: str) -> np.ndarray:
    """Solve (A + lam I) x = b with the fixed Tikhonov shift.

    lam = 1e-8 |trace(A)| / dim, which scales with the data (duplicating all
    samples leaves the solution unchanged) and pins directions the data does
    not constrain, e.g. the constant-feature direction under gamma = 1.
    """
    dim = a_mat.shape[0]
    lam = 1e-8 * abs(float(np.trace(a_mat))) / dim
    m = a_mat + lam * np.eye(dim)
    cond = float(np.linalg.cond(m))
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularSystemError(
            f"{what} system singular after regularization (cond={cond:.3e})", cond
        )
    x = np.linalg.solve(m, b)
    if not np.all(np.isfinite(x)):
        raise SingularSystemError(f"{what} solve produced non-finite values", cond)
    return x


def _usable_transitions(episode) -> int:
    """Number of transitions with a recorded successor state.

    Truncated episodes drop their final transition; terminated episodes keep
    all of them (the terminal state is logged as the last successor).
    """
    k = len(episode.costs)
    return k - 1 if episode.truncated else k


def lstd_v(
    episodes: Sequence, gamma: float, feature_fn: Callable[[np.ndarray], np.ndarray]
) -> np.ndarray:
    """Fit the state-value parameters, averaged over per-episode solves."""
    solutions = []
    for ep in episodes:
        t = _usable_transitions(ep)
        if t < 1:
            continue
        phi = np.array([feature_fn(ep.states[k]) for k in range(t + 1)])
        dim = phi.shape[1]
        a_mat = np.zeros((dim, dim))
        b = np.zeros(dim)
        for k in range(t):
            a_mat += np.outer(phi[k], phi[k] - gamma * phi[k + 1])
            b += phi[k] * ep.costs[k]
        solutions.append(_regularized_solve(a_mat, b, "lstd_v"))
    if not solutions:
        raise ValueError("no episode with at least one usable transition")
    return np.mean(solutions, axis=0)


def value_of(
    v: np.ndarray, state: np.ndarray, feature_fn: Callable[[np.ndarray], np.ndarray]
) -> float:
    return float(feature_fn(state) @ v)


def lstd_w(
    episodes: Sequence,
    v: np.ndarray,
    gamma: float,
    feature_fn: Callable[[np.ndarray], np.ndarray],
) -> np.ndarray:
    """Fit the compatible action-value parameters from TD targets.

    Needs off-policy excitation: with purely on-policy actions every psi is
    zero and the Gram matrix is singular, which raises SingularSystemError.
    Samples masked by the episode's discard mask are excluded.
    """
    solutions = []
    for ep in episodes:
        t = _usable_transitions(ep)
        if t < 1:
            continue
        gram = np.zeros((THETA_DIM, THETA_DIM))
        rhs = np.zeros(THETA_DIM)
        for k in range(t):
            if ep.discard_mask[k]:
                continue
            psi = psi_features(ep.actions[k], ep.policy_actions[k], ep.sensitivities[k])
            td = (
                ep.costs[k]
                + gamma * value_of(v, ep.states[k + 1], feature_fn)
                - value_of(v, ep.states[k], feature_fn)
            )
            gram += np.outer(psi, psi)
            rhs += td * psi
        solutions.append(_regularized_solve(gram, rhs, "lstd_w"))
    if not solutions:
        raise ValueError("no episode with at least one usable transition")
    return np.mean(solutions, axis=0)


def q_value(
    w: np.ndarray,
    v: np.ndarray,
    state: np.ndarray,
    action: np.ndarray,
    policy_action: np.ndarray,
    sensitivity: np.ndarray,
    feature_fn: Callable[[np.ndarray], np.ndarray],
) -> float:
    """Compatible action-value estimate Q(s, a) = psi' w + V(s)."""
    psi = psi_features(action, policy_action, sensitivity)
    return float(psi @ w) + value_of(v, state, feature_fn)
