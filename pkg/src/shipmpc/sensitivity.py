"""Differentiates the controller's solution map w.r.t. its parameters.

At a solved instance the stacked KKT residual R(y, theta) vanishes, with
y = (primal, equality multipliers, inequality multipliers).  Implicit
differentiation of R then gives the Jacobian of the first optimal input with
respect to the 14 learnable parameters.  The residual Jacobian needs exact
second derivatives of the Lagrangian; those come from second-order forward
propagation through the hand-coded model functions (:mod:`shipmpc.taylor`),
so no finite differencing enters the computation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from shipmpc.ocp import BuiltOcp, PrimalDualSolution, THETA_DIM

ACTIVE_TOL = 1e-6
WEAK_MU_TOL = 1e-8


class SingularKktError(RuntimeError):
    """KKT Jacobian is numerically singular beyond least-squares rescue."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class PolicySensitivity:
    """d(first input)/d(theta), rows ordered like the flattened parameters.

    The tunnel-thruster angle column is identically zero because that input
    is a constant, not a decision variable.  Condition diagnostics are
    recorded on every evaluation so downstream consumers can discard
    unreliable samples.
    """

    jacobian: np.ndarray
    min_singular_value: float
    active_margin_mu: float
    inactive_margin_h: float
    weak_complementarity: bool
    used_least_squares: bool
    solve_residual: float


def assemble_kkt_jacobians(
    built: BuiltOcp, z: np.ndarray, lam: np.ndarray, mu: np.ndarray
) -> tuple[sp.csc_matrix, np.ndarray]:
    """Jacobian of the KKT residual w.r.t. y and w.r.t. theta.

    Returns ``(A, B)`` with A of shape (n_y, n_y) sparse and B of shape
    (n_y, 14) dense, where n_y = n + n_eq + n_ineq and rows follow the
    residual stacking [stationarity; equalities; complementarity].
    """
    lay = built.layout
    nn, no = lay.horizon, lay.n_obs
    n, me, mi = lay.n, lay.n_eq, lay.n_ineq

    w_zz = built.lagrangian_hessian(z, lam, mu)

    b_mat = np.zeros((lay.n_y, THETA_DIM))
    # terminal cross: columns (theta_eta, theta_nu, theta_d)
    _, term_cross = built.terminal_hessian(z, with_theta=True)
    xo = lay.x_off(nn)
    b_mat[xo : xo + 6, 3:9] = term_cross[:, 0:6]
    b_mat[xo : xo + 6, 12] = term_cross[:, 6]

    # stage tracking cross-derivatives w.r.t. theta_l (position weights only)
    tl = built.theta.theta_l
    dx = z[built.idx_x[:nn]] - built.ref[:, 0]
    dy = z[built.idx_x[:nn] + 1] - built.ref[:, 1]
    b_mat[built.idx_x[:nn], 0] = 4.0 * built.gam_pow * tl[0] * dx
    b_mat[built.idx_x[:nn] + 1, 1] = 4.0 * built.gam_pow * tl[1] * dy

    # dynamics coupling to the force bias, exact blocks for all steps
    _, _, _, g_mats = built._dyn_jacobians(z)
    h_all = built.dynamics_hessians(z, lam)
    for i in range(nn):
        loc = np.concatenate(
            [
                np.arange(lay.x_off(i), lay.x_off(i) + 6),
                np.arange(lay.u_off(i), lay.u_off(i) + 5),
            ]
        )
        b_mat[loc, 9:12] -= h_all[i][:11, 11:14]
        # equality rows: dG_i/d(theta_a) = -dF/d(theta_a)
        b_mat[n + 6 + 6 * i : n + 12 + 6 * i, 9:12] = -g_mats[i]

    # complementarity rows: d(mu*H)/d(theta_g) = mu on obstacle rows
    if no:
        for i in range(nn + 1):
            base = lay.ineq_base(i) + (10 if i < nn else 0)
            for nob in range(no):
                b_mat[n + me + base + nob, 13] = mu[base + nob]

    eq_j = built.eq_jac(z)
    in_j = built.ineq_jac(z)
    h_vals = built.ineq_con(z)
    mu_ji = sp.diags(mu) @ in_j
    a_full = sp.bmat(
        [
            [w_zz, eq_j.T, in_j.T],
            [eq_j, None, None],
            [mu_ji, sp.csr_matrix((mi, me)), sp.diags(h_vals)],
        ],
        format="csc",
    )
    return a_full, b_mat


def _u0_selector(built: BuiltOcp) -> np.ndarray:
    """Selector of the first-input block inside y, as a dense (n_y, 6) matrix.

    Column order matches action arrays (f1, f2, f3, alpha1, alpha2, alpha3);
    the alpha1 column stays zero.
    """
    s = np.zeros((built.layout.n_y, 6))
    u0 = built.layout.u_off(0)
    for k, col in zip(range(5), (0, 1, 2, 4, 5)):
        s[u0 + k, col] = 1.0
    return s


def _smallest_singular_value(lu, n_y: int, iters: int = 12) -> float:
    """Inverse power iteration estimate of the smallest singular value."""
    v = np.full(n_y, 1.0 / np.sqrt(n_y))
    lam_inv = 0.0
    for _ in range(iters):
        u = lu.solve(v, trans="T")
        m = lu.solve(u, trans="N")
        norm = float(np.linalg.norm(m))
        if not np.isfinite(norm) or norm == 0.0:
            return 0.0
        lam_inv = norm
        v = m / norm
    return 1.0 / np.sqrt(lam_inv)


def policy_sensitivity(
    built: BuiltOcp, solution: PrimalDualSolution
) -> PolicySensitivity:
    """Parameter Jacobian of the first optimal input at a solved instance.

    Requires a converged solution; weakly active constraints or a singular
    KKT matrix degrade reliability and are reported in the diagnostics (a
    singular matrix falls back to a flagged minimum-norm least-squares
    solve).
    """
    z, lam, mu = solution.z, solution.lam, solution.mu
    a_full, b_mat = assemble_kkt_jacobians(built, z, lam, mu)
    sel = _u0_selector(built)
    n_y = built.layout.n_y

    h_vals = built.ineq_con(z)
    active = -h_vals <= ACTIVE_TOL
    active_margin = float(np.min(mu[active])) if np.any(active) else np.inf
    inactive_margin = float(np.min(-h_vals[~active])) if np.any(~active) else np.inf
    weak = bool(np.any(active & (mu < WEAK_MU_TOL)))

    used_lstsq = False
    sv_min = 0.0
    x_sol = None
    try:
        lu = splu(a_full)
        x_sol = lu.solve(sel, trans="T")
        sv_min = _smallest_singular_value(lu, n_y)
    except RuntimeError:
        x_sol = None
    residual = np.inf
    if x_sol is not None and np.all(np.isfinite(x_sol)):
        residual = float(np.max(np.abs(a_full.T @ x_sol - sel)))
    tol = 1e-8 * (1.0 + float(np.max(np.abs(sel))))
    if x_sol is None or not np.all(np.isfinite(x_sol)) or residual > tol:
        dense = a_full.toarray()
        x_sol, *_ = np.linalg.lstsq(dense.T, sel, rcond=None)
        used_lstsq = True
        sv_min = float(np.linalg.svd(dense, compute_uv=False)[-1])
        residual = float(np.max(np.abs(dense.T @ x_sol - sel)))
        if not np.all(np.isfinite(x_sol)):
            raise SingularKktError(
                "KKT matrix singular; least-squares rescue failed",
                diagnostics={
                    "min_singular_value": sv_min,
                    "active_margin_mu": active_margin,
                    "inactive_margin_h": inactive_margin,
                },
            )

    jac = -b_mat.T @ x_sol
    return PolicySensitivity(
        jacobian=jac,
        min_singular_value=sv_min,
        active_margin_mu=active_margin,
        inactive_margin_h=inactive_margin,
        weak_complementarity=weak,
        used_least_squares=used_lstsq,
        solve_residual=residual,
    )
