"""Parameterized finite-horizon optimal control problem behind the policy.

The controller minimizes, over predicted poses/velocities, thruster inputs,
and obstacle slack variables,

    term_gain(eta_N) * terminal_cost(eta_N, nu_N) + w_f' sigma_N
      + sum_i gamma^i ( stage_tracking(eta_i) + thruster_penalty(alpha_i)
                        + w' sigma_i )

subject to the RK4-discretized vessel model with a learnable additive force
bias, hard force/angle bounds, and soft (slack-relaxed) obstacle exclusion
constraints tightened by a learnable margin.  The terminal gain
theta_d / (||eta_N - eta_d||^2 + delta) ramps the docking cost up as the
predicted terminal pose approaches the dock.

Learnable parameters (flattening order is fixed): stage weights theta_l,
terminal pose weights theta_eta, terminal velocity weights theta_nu, model
force bias theta_a, terminal gain theta_d, constraint tightening theta_g.
Stage tracking only weights the two position components, so the third entry
of theta_l never enters the problem.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from shipmpc import nlp
from shipmpc.dynamics import (
    ALPHA1_FIXED,
    ControlAction,
    ModelConfig,
    VesselState,
    rk4_step_batch,
    rk4_step_generic,
    rk4_step_jacobian_batch,
)
from shipmpc.mission import MissionConfig, reference_sequence, wrap_angle
from shipmpc.nlp import SolverSettings
from shipmpc.taylor import Taylor2, sym_hessian

THETA_DIM = 14
THETA_GROUPS = {
    "theta_l": slice(0, 3),
    "theta_eta": slice(3, 6),
    "theta_nu": slice(6, 9),
    "theta_a": slice(9, 12),
    "theta_d": slice(12, 13),
    "theta_g": slice(13, 14),
}


@dataclass
class ThetaParams:
    """Learnable controller parameter vector (flattened dimension 14)."""

    theta_l: np.ndarray
    theta_eta: np.ndarray
    theta_nu: np.ndarray
    theta_a: np.ndarray
    theta_d: float
    theta_g: float

    def __post_init__(self) -> None:
        self.theta_l = np.asarray(self.theta_l, dtype=float)
        self.theta_eta = np.asarray(self.theta_eta, dtype=float)
        self.theta_nu = np.asarray(self.theta_nu, dtype=float)
        self.theta_a = np.asarray(self.theta_a, dtype=float)
        for name in ("theta_l", "theta_eta", "theta_nu", "theta_a"):
            if getattr(self, name).shape != (3,):
                raise ValueError(f"{name} must have shape (3,)")
        if not np.all(np.isfinite(self.flatten())):
            raise ValueError("theta entries must be finite")

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [
                self.theta_l,
                self.theta_eta,
                self.theta_nu,
                self.theta_a,
                [self.theta_d],
                [self.theta_g],
            ]
        )

    @classmethod
    def from_flat(cls, flat: np.ndarray) -> "ThetaParams":
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (THETA_DIM,):
            raise ValueError(f"flattened theta must have shape ({THETA_DIM},)")
        return cls(
            theta_l=flat[0:3].copy(),
            theta_eta=flat[3:6].copy(),
            theta_nu=flat[6:9].copy(),
            theta_a=flat[9:12].copy(),
            theta_d=float(flat[12]),
            theta_g=float(flat[13]),
        )

    @classmethod
    def initial(cls) -> "ThetaParams":
        """Default starting point used by the learning loop."""
        return cls(
            theta_l=np.full(3, 0.5),
            theta_eta=np.full(3, 3.0),
            theta_nu=np.full(3, 3.0),
            theta_a=np.full(3, 1e-8),
            theta_d=30.0,
            theta_g=0.4,
        )


@dataclass
class OcpSpec:
    """Horizon, discounting, slack weights, and problem data references.

    ``input_reg`` adds a small quadratic cost on the thruster inputs.  The
    three thrusters are redundant (the tunnel force can be traded against
    the azimuths with no cost change), which leaves the optimizer with a
    continuum of solutions and a singular KKT system; the regularization
    pins a unique one without measurably changing the closed-loop behavior.
    """

    horizon: int
    gamma: float
    omega: np.ndarray
    omega_f: np.ndarray
    delta: float
    model: ModelConfig
    mission: MissionConfig
    input_reg: float = 1e-3

    def __post_init__(self) -> None:
        self.omega = np.asarray(self.omega, dtype=float)
        self.omega_f = np.asarray(self.omega_f, dtype=float)
        self.validate()

    def validate(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.delta <= 0.0:
            raise ValueError("delta must be positive")
        if self.input_reg < 0.0:
            raise ValueError("input regularization must be nonnegative")
        n_obs = self.mission.n_obstacles
        if self.omega.shape != (n_obs,) or self.omega_f.shape != (n_obs,):
            raise ValueError(
                f"slack weights must have one entry per obstacle "
                f"({n_obs}), got {self.omega.shape} and {self.omega_f.shape}"
            )
        if n_obs and (np.any(self.omega <= 0.0) or np.any(self.omega_f <= 0.0)):
            raise ValueError("slack weights must be positive")


class OcpLayout:
    """Index bookkeeping for the stacked decision vector.

    Per step i < N the block is [eta_i, nu_i, f_i, alpha_i, sigma_i]; the
    terminal block is [eta_N, nu_N, sigma_N].  Equalities are the six
    initial-condition pins followed by the dynamics defects in time order.
    Inequalities per step: force lower/upper (3+3), angle lower/upper (2+2),
    obstacle constraints (n_obs), slack nonnegativity (n_obs); then the
    terminal obstacle and slack rows.
    """

    def __init__(self, horizon: int, n_obs: int):
        self.horizon = horizon
        self.n_obs = n_obs
        self.step_width = 11 + n_obs
        self.n = horizon * self.step_width + 6 + n_obs
        self.n_eq = 6 * (horizon + 1)
        self.step_ineq = 10 + 2 * n_obs
        self.n_ineq = horizon * self.step_ineq + 2 * n_obs
        self.n_y = self.n + self.n_eq + self.n_ineq

    def x_off(self, i: int) -> int:
        return i * self.step_width

    def u_off(self, i: int) -> int:
        if i >= self.horizon:
            raise IndexError("inputs exist only for i < N")
        return i * self.step_width + 6

    def sig_off(self, i: int) -> int:
        if i < self.horizon:
            return i * self.step_width + 11
        return self.horizon * self.step_width + 6

    def ineq_base(self, i: int) -> int:
        return i * self.step_ineq


@dataclass
class PrimalDualSolution:
    """Full primal-dual output of one controller solve."""

    eta_hat: np.ndarray
    nu_hat: np.ndarray
    f_hat: np.ndarray
    alpha_hat: np.ndarray
    sigma: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    kkt_residual_norm: float
    objective: float
    converged: bool
    iterations: int
    z: np.ndarray = field(repr=False, default=None)


def _xi_pieces(a2: np.ndarray, a3: np.ndarray, model: ModelConfig):
    """Thruster-matrix determinant and its first/second angle derivatives."""
    c2, s2 = np.cos(a2), np.sin(a2)
    c3, s3 = np.cos(a3), np.sin(a3)
    dx2 = model.lx2 - model.lx1
    dx3 = model.lx3 - model.lx1
    a2_val = dx2 * s2 - model.ly2 * c2
    a2_dot = dx2 * c2 + model.ly2 * s2
    a3_val = dx3 * s3 - model.ly3 * c3
    a3_dot = dx3 * c3 + model.ly3 * s3
    det = -c2 * a3_val + c3 * a2_val
    d_da2 = s2 * a3_val + c3 * a2_dot
    d_da3 = -c2 * a3_dot - s3 * a2_val
    # pure first-harmonic dependence: second own-derivatives are -det
    d_d22 = -det
    d_d33 = -det
    d_d23 = s2 * a3_dot - s3 * a2_dot
    return det, d_da2, d_da3, d_d22, d_d33, d_d23


def _xi_value_grad_hess(a2, a3, rho, eps, w_prod, model):
    det, d2, d3, d22, d33, d23 = _xi_pieces(a2, a3, model)
    q = eps + det * det / w_prod
    xi = rho / q
    q2 = 2.0 * det * d2 / w_prod
    q3 = 2.0 * det * d3 / w_prod
    gx2 = -rho * q2 / q**2
    gx3 = -rho * q3 / q**2
    q22 = 2.0 * (d2 * d2 + det * d22) / w_prod
    q33 = 2.0 * (d3 * d3 + det * d33) / w_prod
    q23 = 2.0 * (d2 * d3 + det * d23) / w_prod
    h22 = -rho * q22 / q**2 + 2.0 * rho * q2 * q2 / q**3
    h33 = -rho * q33 / q**2 + 2.0 * rho * q3 * q3 / q**3
    h23 = -rho * q23 / q**2 + 2.0 * rho * q2 * q3 / q**3
    return xi, gx2, gx3, h22, h33, h23


def terminal_cost_generic(e, nu, t_eta, t_nu, t_d, delta):
    """Terminal objective in scalar form; works on floats or Taylor numbers."""
    q = e[0] * e[0] + e[1] * e[1] + e[2] * e[2] + delta
    h = (
        t_eta[0] ** 2 * e[0] ** 2
        + t_eta[1] ** 2 * e[1] ** 2
        + t_eta[2] ** 2 * e[2] ** 2
        + t_nu[0] ** 2 * nu[0] ** 2
        + t_nu[1] ** 2 * nu[1] ** 2
        + t_nu[2] ** 2 * nu[2] ** 2
    )
    return t_d * h / q


class BuiltOcp:
    """One controller instance: NLP callbacks plus the data to interpret it."""

    def __init__(self, state: VesselState, theta: ThetaParams, spec: OcpSpec):
        self.spec = spec
        self.model = spec.model
        self.mission = spec.mission
        self.theta = theta
        self.layout = OcpLayout(spec.horizon, spec.mission.n_obstacles)
        self.x0 = state.as_array()
        n = self.layout.n
        nn = spec.horizon
        no = self.layout.n_obs

        self.ref = reference_sequence(state, spec.mission, nn, spec.model.dt)
        psi_d = spec.mission.eta_d[2]
        psi_d_adj = state.psi - wrap_angle(state.psi - psi_d)
        self.eta_d_adj = np.array(
            [spec.mission.eta_d[0], spec.mission.eta_d[1], psi_d_adj]
        )
        self.obs_centers = np.array(
            [[o.ox, o.oy] for o in spec.mission.obstacles], dtype=float
        ).reshape(no, 2)
        radii = np.array(
            [o.radius + spec.model.vessel_radius for o in spec.mission.obstacles]
        ).reshape(no)
        self.inv_r2 = 1.0 / radii**2 if no else np.zeros(0)
        self.gam_pow = spec.gamma ** np.arange(nn)
        self.w_prod = float(np.prod(spec.mission.w_diag))

        lay = self.layout
        self.idx_x = np.array([lay.x_off(i) for i in range(nn + 1)])
        self.idx_u = np.array([lay.u_off(i) for i in range(nn)])
        self.idx_sig = np.array(
            [[lay.sig_off(i) + k for k in range(no)] for i in range(nn + 1)]
        ).reshape(nn + 1, no)

        self._build_eq_pattern()
        self._build_ineq_pattern()
        self._stage_hess_const()
        self._val_cache: tuple[bytes, np.ndarray] | None = None
        self._jac_cache: tuple[bytes, tuple] | None = None
        self._dyn_hess_cache: tuple[bytes, np.ndarray] | None = None

        self.instance = nlp.NlpInstance(
            n=n,
            objective=self.objective,
            gradient=self.gradient,
            eq_con=self.eq_con,
            eq_jac=self.eq_jac,
            ineq_con=self.ineq_con,
            ineq_jac=self.ineq_jac,
            cost_hessian=self.cost_hessian,
            lagrangian_hessian=self.lagrangian_hessian,
            n_eq=lay.n_eq,
            n_ineq=lay.n_ineq,
        )

    # pattern construction -------------------------------------------------
    def _build_eq_pattern(self) -> None:
        lay = self.layout
        nn = lay.horizon
        rows, cols = [], []
        rows.extend(range(6))
        cols.extend(range(lay.x_off(0), lay.x_off(0) + 6))
        for i in range(nn):
            r0 = 6 + 6 * i
            xo, uo, xn = lay.x_off(i), lay.u_off(i), lay.x_off(i + 1)
            for r in range(6):
                for c in range(6):
                    rows.append(r0 + r)
                    cols.append(xo + c)
            for r in range(6):
                for c in range(5):
                    rows.append(r0 + r)
                    cols.append(uo + c)
            for r in range(6):
                rows.append(r0 + r)
                cols.append(xn + r)
        self._eq_rows = np.array(rows)
        self._eq_cols = np.array(cols)

    def _build_ineq_pattern(self) -> None:
        lay = self.layout
        nn, no = lay.horizon, lay.n_obs
        crows, ccols, cdata = [], [], []
        vrows, vcols = [], []
        for i in range(nn):
            base = lay.ineq_base(i)
            uo = lay.u_off(i)
            for k in range(3):  # force lower / upper
                crows += [base + k, base + 3 + k]
                ccols += [uo + k, uo + k]
                cdata += [-1.0, 1.0]
            for k in range(2):  # angle lower / upper
                crows += [base + 6 + k, base + 8 + k]
                ccols += [uo + 3 + k, uo + 3 + k]
                cdata += [-1.0, 1.0]
            for nob in range(no):
                row = base + 10 + nob
                vrows += [row, row]
                vcols += [lay.x_off(i), lay.x_off(i) + 1]
                crows.append(row)
                ccols.append(lay.sig_off(i) + nob)
                cdata.append(-1.0)
                srow = base + 10 + no + nob
                crows.append(srow)
                ccols.append(lay.sig_off(i) + nob)
                cdata.append(-1.0)
        base = lay.ineq_base(nn)
        for nob in range(no):
            row = base + nob
            vrows += [row, row]
            vcols += [lay.x_off(nn), lay.x_off(nn) + 1]
            crows.append(row)
            ccols.append(lay.sig_off(nn) + nob)
            cdata.append(-1.0)
            crows.append(base + no + nob)
            ccols.append(lay.sig_off(nn) + nob)
            cdata.append(-1.0)
        self._in_rows = np.concatenate([np.array(crows, dtype=int), np.array(vrows, dtype=int)])
        self._in_cols = np.concatenate([np.array(ccols, dtype=int), np.array(vcols, dtype=int)])
        self._in_const = np.array(cdata)

    def _stage_hess_const(self) -> None:
        tl = self.theta.theta_l
        nn = self.layout.horizon
        u_diag = (self.idx_u[:, None] + np.arange(5)[None, :]).ravel()
        self._stage_rows = np.concatenate(
            [self.idx_x[:nn], self.idx_x[:nn] + 1, u_diag]
        )
        self._stage_vals = np.concatenate(
            [
                2.0 * self.gam_pow * tl[0] ** 2,
                2.0 * self.gam_pow * tl[1] ** 2,
                np.repeat(2.0 * self.spec.input_reg * self.gam_pow, 5),
            ]
        )

    def _stacked_xu(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        nn = self.layout.horizon
        xs = np.stack([z[self.idx_x[:nn] + k] for k in range(6)], axis=1)
        us = np.stack([z[self.idx_u + k] for k in range(5)], axis=1)
        return xs, us

    # dynamics evaluation with single-slot caches ---------------------------
    def _dyn_values(self, z: np.ndarray) -> np.ndarray:
        key = z.tobytes()
        if self._val_cache is not None and self._val_cache[0] == key:
            return self._val_cache[1]
        xs, us = self._stacked_xu(z)
        out = rk4_step_batch(xs, us, self.theta.theta_a[None, :], self.model)
        self._val_cache = (key, out)
        return out

    def _dyn_jacobians(self, z: np.ndarray) -> tuple:
        key = z.tobytes()
        if self._jac_cache is not None and self._jac_cache[0] == key:
            return self._jac_cache[1]
        xs, us = self._stacked_xu(z)
        data = rk4_step_jacobian_batch(
            xs, us, self.theta.theta_a[None, :], self.model
        )
        self._jac_cache = (key, data)
        return data

    def dynamics_hessians(self, z: np.ndarray, lam: np.ndarray) -> np.ndarray:
        """Exact Hessians of lam_i' F(x_i, u_i, theta_a), shape (N, 14, 14).

        One batched second-order forward pass through the integrator covers
        the whole horizon; entry ordering per step is (state 6, input 5,
        force bias 3).
        """
        key = z.tobytes() + lam.tobytes()
        if self._dyn_hess_cache is not None and self._dyn_hess_cache[0] == key:
            return self._dyn_hess_cache[1]
        nn = self.layout.horizon
        xs, us = self._stacked_xu(z)
        inputs = np.concatenate(
            [xs, us, np.tile(self.theta.theta_a, (nn, 1))], axis=1
        )
        seeds = Taylor2.seed_batch(inputs)
        xn = rk4_step_generic(seeds[0:6], seeds[6:11], seeds[11:14], self.model)
        lam_steps = lam[6:].reshape(nn, 6)
        phi = xn[0] * lam_steps[:, 0]
        for c in range(1, 6):
            phi = phi + xn[c] * lam_steps[:, c]
        out = sym_hessian(phi)
        self._dyn_hess_cache = (key, out)
        return out

    # objective and derivatives ---------------------------------------------
    def _terminal_parts(self, z: np.ndarray):
        xo = self.layout.x_off(self.layout.horizon)
        e = z[xo : xo + 3] - self.eta_d_adj
        nu = z[xo + 3 : xo + 6]
        q = float(e @ e) + self.spec.delta
        te2 = self.theta.theta_eta**2
        tn2 = self.theta.theta_nu**2
        h = float(te2 @ e**2 + tn2 @ nu**2)
        return e, nu, q, h, te2, tn2

    def objective(self, z: np.ndarray) -> float:
        nn = self.layout.horizon
        tl = self.theta.theta_l
        dx = z[self.idx_x[:nn]] - self.ref[:, 0]
        dy = z[self.idx_x[:nn] + 1] - self.ref[:, 1]
        total = float(self.gam_pow @ (tl[0] ** 2 * dx**2 + tl[1] ** 2 * dy**2))
        a2 = z[self.idx_u + 3]
        a3 = z[self.idx_u + 4]
        xi, *_ = _xi_value_grad_hess(
            a2, a3, self.mission.rho, self.mission.epsilon, self.w_prod, self.model
        )
        total += float(self.gam_pow @ xi)
        u_all = z[self.idx_u[:, None] + np.arange(5)[None, :]]
        total += self.spec.input_reg * float(self.gam_pow @ np.sum(u_all**2, axis=1))
        if self.layout.n_obs:
            sig = z[self.idx_sig]
            total += float(self.gam_pow @ (sig[:nn] @ self.spec.omega))
            total += float(self.spec.omega_f @ sig[nn])
        e, nu, q, h, _, _ = self._terminal_parts(z)
        total += self.theta.theta_d * h / q
        return total

    def gradient(self, z: np.ndarray) -> np.ndarray:
        nn = self.layout.horizon
        tl = self.theta.theta_l
        g = np.zeros(self.layout.n)
        dx = z[self.idx_x[:nn]] - self.ref[:, 0]
        dy = z[self.idx_x[:nn] + 1] - self.ref[:, 1]
        g[self.idx_x[:nn]] += 2.0 * self.gam_pow * tl[0] ** 2 * dx
        g[self.idx_x[:nn] + 1] += 2.0 * self.gam_pow * tl[1] ** 2 * dy
        a2 = z[self.idx_u + 3]
        a3 = z[self.idx_u + 4]
        _, gx2, gx3, *_ = _xi_value_grad_hess(
            a2, a3, self.mission.rho, self.mission.epsilon, self.w_prod, self.model
        )
        g[self.idx_u + 3] += self.gam_pow * gx2
        g[self.idx_u + 4] += self.gam_pow * gx3
        u_cols = self.idx_u[:, None] + np.arange(5)[None, :]
        g[u_cols.ravel()] += (
            2.0 * self.spec.input_reg * self.gam_pow[:, None] * z[u_cols]
        ).ravel()
        if self.layout.n_obs:
            g[self.idx_sig[:nn]] += self.gam_pow[:, None] * self.spec.omega[None, :]
            g[self.idx_sig[nn]] += self.spec.omega_f
        e, nu, q, h, te2, tn2 = self._terminal_parts(z)
        td = self.theta.theta_d
        xo = self.layout.x_off(nn)
        g[xo : xo + 3] += 2.0 * td * e * (te2 * q - h) / q**2
        g[xo + 3 : xo + 6] += 2.0 * td * tn2 * nu / q
        return g

    def eq_con(self, z: np.ndarray) -> np.ndarray:
        lay = self.layout
        nn = lay.horizon
        r = np.empty(lay.n_eq)
        r[:6] = z[lay.x_off(0) : lay.x_off(0) + 6] - self.x0
        vals = self._dyn_values(z)
        for i in range(nn):
            nxt = z[lay.x_off(i + 1) : lay.x_off(i + 1) + 6]
            r[6 + 6 * i : 12 + 6 * i] = nxt - vals[i]
        return r

    def eq_jac(self, z: np.ndarray) -> sp.csr_matrix:
        lay = self.layout
        nn = lay.horizon
        _, a_mats, b_mats, _ = self._dyn_jacobians(z)
        parts = [np.ones(6)]
        eye6 = np.ones(6)
        for i in range(nn):
            parts.append(-a_mats[i].ravel())
            parts.append(-b_mats[i].ravel())
            parts.append(eye6)
        data = np.concatenate(parts)
        return sp.csr_matrix(
            (data, (self._eq_rows, self._eq_cols)), shape=(lay.n_eq, lay.n)
        )

    def _obstacle_g(self, z: np.ndarray) -> np.ndarray:
        """g_n at every predicted position, shape (N+1, n_obs)."""
        if not self.layout.n_obs:
            return np.zeros((self.layout.horizon + 1, 0))
        px = z[self.idx_x]
        py = z[self.idx_x + 1]
        dxo = px[:, None] - self.obs_centers[None, :, 0]
        dyo = py[:, None] - self.obs_centers[None, :, 1]
        return 1.0 - (dxo**2 + dyo**2) * self.inv_r2[None, :]

    def ineq_con(self, z: np.ndarray) -> np.ndarray:
        lay = self.layout
        nn, no = lay.horizon, lay.n_obs
        f = z[self.idx_u[:, None] + np.arange(3)[None, :]]
        a = z[self.idx_u[:, None] + np.array([3, 4])[None, :]]
        lo = self.model.force_lower
        hi = self.model.force_upper
        amax = self.model.alpha_max
        g_all = self._obstacle_g(z)
        sig = z[self.idx_sig] if no else np.zeros((nn + 1, 0))
        tg = self.theta.theta_g
        step = np.hstack(
            [lo[None, :] - f, f - hi[None, :], -a - amax, a - amax,
             g_all[:nn] + tg - sig[:nn], -sig[:nn]]
        )
        tail = np.concatenate([g_all[nn] + tg - sig[nn], -sig[nn]])
        return np.concatenate([step.ravel(), tail])

    def ineq_jac(self, z: np.ndarray) -> sp.csr_matrix:
        lay = self.layout
        if lay.n_obs:
            px = z[self.idx_x]
            py = z[self.idx_x + 1]
            dgx = -2.0 * (px[:, None] - self.obs_centers[None, :, 0]) * self.inv_r2
            dgy = -2.0 * (py[:, None] - self.obs_centers[None, :, 1]) * self.inv_r2
            var = np.stack([dgx, dgy], axis=2).ravel()
            data = np.concatenate([self._in_const, var])
        else:
            data = self._in_const
        return sp.csr_matrix(
            (data, (self._in_rows, self._in_cols)), shape=(lay.n_ineq, lay.n)
        )

    def terminal_hessian(self, z: np.ndarray, with_theta: bool = False):
        """Exact second derivatives of the terminal term via Taylor numbers.

        Without theta seeds: 6x6 block over (eta_N, nu_N).  With theta seeds:
        additionally the 6x7 cross block w.r.t. (theta_eta, theta_nu,
        theta_d).
        """
        xo = self.layout.x_off(self.layout.horizon)
        e_val = z[xo : xo + 3] - self.eta_d_adj
        nu_val = z[xo + 3 : xo + 6]
        if with_theta:
            seeds = Taylor2.seed(
                np.concatenate(
                    [e_val, nu_val, self.theta.theta_eta, self.theta.theta_nu,
                     [self.theta.theta_d]]
                )
            )
            e, nu = seeds[0:3], seeds[3:6]
            te, tn = seeds[6:9], seeds[9:12]
            td = seeds[12]
        else:
            seeds = Taylor2.seed(np.concatenate([e_val, nu_val]))
            e, nu = seeds[0:3], seeds[3:6]
            te = list(self.theta.theta_eta)
            tn = list(self.theta.theta_nu)
            td = self.theta.theta_d
        expr = terminal_cost_generic(e, nu, te, tn, td, self.spec.delta)
        hess = sym_hessian(expr)
        if with_theta:
            return hess[:6, :6], hess[:6, 6:13]
        return hess[:6, :6]

    def cost_hessian(
        self, z: np.ndarray, lam: np.ndarray, mu: np.ndarray
    ) -> sp.csc_matrix:
        """PSD curvature model for the QP subproblem.

        Exact per-block Hessians of the separable cost terms plus the
        multiplier-weighted dynamics curvature, each eigenvalue-clipped to
        be positive semidefinite, plus a uniform floor.  The (concave)
        obstacle-constraint curvature would project to zero and is skipped.
        """
        lay = self.layout
        nn = lay.horizon
        rows = [self._stage_rows]
        cols = [self._stage_rows]
        data = [self._stage_vals]

        a2 = z[self.idx_u + 3]
        a3 = z[self.idx_u + 4]
        _, _, _, h22, h33, h23 = _xi_value_grad_hess(
            a2, a3, self.mission.rho, self.mission.epsilon, self.w_prod, self.model
        )
        blocks = np.empty((nn, 2, 2))
        blocks[:, 0, 0] = h22
        blocks[:, 1, 1] = h33
        blocks[:, 0, 1] = h23
        blocks[:, 1, 0] = h23
        w, v = np.linalg.eigh(blocks)
        w = np.maximum(w, 0.0) * self.gam_pow[:, None]
        psd = np.einsum("nij,nj,nkj->nik", v, w, v)
        a_idx = np.stack([self.idx_u + 3, self.idx_u + 4], axis=1)
        rows.append(np.repeat(a_idx, 2, axis=1).ravel())
        cols.append(np.tile(a_idx, (1, 2)).ravel())
        data.append(psd.ravel())

        # constraint curvature: -lam' d2F per step over (state, input)
        dyn = -self.dynamics_hessians(z, lam)[:, :11, :11]
        dw, dv = np.linalg.eigh(dyn)
        dyn_psd = np.einsum("nij,nj,nkj->nik", dv, np.maximum(dw, 0.0), dv)
        loc = np.stack(
            [
                np.concatenate(
                    [np.arange(lay.x_off(i), lay.x_off(i) + 6),
                     np.arange(lay.u_off(i), lay.u_off(i) + 5)]
                )
                for i in range(nn)
            ]
        )
        rows.append(np.repeat(loc, 11, axis=1).ravel())
        cols.append(np.tile(loc, (1, 11)).ravel())
        data.append(dyn_psd.ravel())

        term = self.terminal_hessian(z)
        tw, tv = np.linalg.eigh(term)
        term_psd = (tv * np.maximum(tw, 0.0)) @ tv.T
        xo = lay.x_off(nn)
        t_idx = np.arange(xo, xo + 6)
        rows.append(np.repeat(t_idx, 6))
        cols.append(np.tile(t_idx, 6))
        data.append(term_psd.ravel())

        floor_idx = np.arange(lay.n)
        rows.append(floor_idx)
        cols.append(floor_idx)
        data.append(np.full(lay.n, 1e-8))

        return sp.csc_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(lay.n, lay.n),
        )

    def lagrangian_hessian(
        self, z: np.ndarray, lam: np.ndarray, mu: np.ndarray
    ) -> sp.csr_matrix:
        """Exact (unclipped) Hessian of the Lagrangian w.r.t. the primals.

        Shared by the solver's Newton polish phase and the solution-map
        differentiation; includes cost curvature, the multiplier-weighted
        dynamics curvature, and the obstacle-constraint curvature.
        """
        lay = self.layout
        nn, no = lay.horizon, lay.n_obs
        rows = [self._stage_rows]
        cols = [self._stage_rows]
        data = [self._stage_vals]

        a2 = z[self.idx_u + 3]
        a3 = z[self.idx_u + 4]
        _, _, _, h22, h33, h23 = _xi_value_grad_hess(
            a2, a3, self.mission.rho, self.mission.epsilon, self.w_prod, self.model
        )
        a_idx = np.stack([self.idx_u + 3, self.idx_u + 4], axis=1)
        xi_blocks = np.empty((nn, 2, 2))
        xi_blocks[:, 0, 0] = h22
        xi_blocks[:, 1, 1] = h33
        xi_blocks[:, 0, 1] = h23
        xi_blocks[:, 1, 0] = h23
        xi_blocks *= self.gam_pow[:, None, None]
        rows.append(np.repeat(a_idx, 2, axis=1).ravel())
        cols.append(np.tile(a_idx, (1, 2)).ravel())
        data.append(xi_blocks.ravel())

        term_zz = self.terminal_hessian(z)
        xo = lay.x_off(nn)
        t_idx = np.arange(xo, xo + 6)
        rows.append(np.repeat(t_idx, 6))
        cols.append(np.tile(t_idx, 6))
        data.append(term_zz.ravel())

        dyn = -self.dynamics_hessians(z, lam)[:, :11, :11]
        loc = np.stack(
            [
                np.concatenate(
                    [np.arange(lay.x_off(i), lay.x_off(i) + 6),
                     np.arange(lay.u_off(i), lay.u_off(i) + 5)]
                )
                for i in range(nn)
            ]
        )
        rows.append(np.repeat(loc, 11, axis=1).ravel())
        cols.append(np.tile(loc, (1, 11)).ravel())
        data.append(dyn.ravel())

        if no:
            for i in range(nn + 1):
                base = lay.ineq_base(i) + (10 if i < nn else 0)
                for nob in range(no):
                    m = mu[base + nob]
                    if m != 0.0:
                        curv = -2.0 * self.inv_r2[nob] * m
                        pxi = lay.x_off(i)
                        rows.append(np.array([pxi, pxi + 1]))
                        cols.append(np.array([pxi, pxi + 1]))
                        data.append(np.array([curv, curv]))

        return sp.csr_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(lay.n, lay.n),
        )

    # solution handling ------------------------------------------------------
    def unpack(self, result: nlp.SqpResult) -> PrimalDualSolution:
        lay = self.layout
        nn, no = lay.horizon, lay.n_obs
        z = result.x
        eta = np.stack([z[self.idx_x + k] for k in range(3)], axis=1)
        nu = np.stack([z[self.idx_x + 3 + k] for k in range(3)], axis=1)
        f = np.stack([z[self.idx_u + k] for k in range(3)], axis=1)
        alpha = np.stack([z[self.idx_u + 3 + k] for k in range(2)], axis=1)
        sigma = z[self.idx_sig] if no else np.zeros((nn + 1, 0))
        return PrimalDualSolution(
            eta_hat=eta,
            nu_hat=nu,
            f_hat=f,
            alpha_hat=alpha,
            sigma=sigma,
            lam=result.lam.copy(),
            mu=result.mu.copy(),
            kkt_residual_norm=result.kkt_norm,
            objective=result.objective,
            converged=result.converged,
            iterations=result.iterations,
            z=z.copy(),
        )


def build_ocp(state: VesselState, theta: ThetaParams, spec: OcpSpec) -> BuiltOcp:
    """Assemble the controller NLP for the given state and parameters."""
    if not state.is_finite():
        raise ValueError("current state must be finite")
    return BuiltOcp(state, theta, spec)


def cold_start(built: BuiltOcp) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Initial guess for the first solve of an episode.

    Poses repeat the measured pose, velocities/forces/angles/slacks start at
    zero, equality multipliers at zero, inequality multipliers at 1e-3.
    """
    lay = built.layout
    z = np.zeros(lay.n)
    for i in range(lay.horizon + 1):
        z[lay.x_off(i) : lay.x_off(i) + 3] = built.x0[:3]
    lam = np.zeros(lay.n_eq)
    mu = np.full(lay.n_ineq, 1e-3)
    return z, lam, mu


def shift_warm_start(
    built: BuiltOcp, prev: PrimalDualSolution
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shift the previous solution one step forward, duplicating the tail."""
    lay = built.layout
    nn, no = lay.horizon, lay.n_obs
    z = np.zeros(lay.n)
    for i in range(nn):
        j = min(i + 1, nn)
        z[lay.x_off(i) : lay.x_off(i) + 3] = prev.eta_hat[j]
        z[lay.x_off(i) + 3 : lay.x_off(i) + 6] = prev.nu_hat[j]
        ju = min(i + 1, nn - 1)
        z[lay.u_off(i) : lay.u_off(i) + 3] = prev.f_hat[ju]
        z[lay.u_off(i) + 3 : lay.u_off(i) + 5] = prev.alpha_hat[ju]
        if no:
            z[lay.sig_off(i) : lay.sig_off(i) + no] = prev.sigma[min(i + 1, nn)]
    z[lay.x_off(nn) : lay.x_off(nn) + 3] = prev.eta_hat[nn]
    z[lay.x_off(nn) + 3 : lay.x_off(nn) + 6] = prev.nu_hat[nn]
    if no:
        z[lay.sig_off(nn) : lay.sig_off(nn) + no] = prev.sigma[nn]

    lam = np.zeros(lay.n_eq)
    lam[:6] = prev.lam[:6]
    for i in range(nn):
        j = min(i + 1, nn - 1)
        lam[6 + 6 * i : 12 + 6 * i] = prev.lam[6 + 6 * j : 12 + 6 * j]
    mu = np.zeros(lay.n_ineq)
    for i in range(nn):
        j = min(i + 1, nn - 1)
        mu[lay.ineq_base(i) : lay.ineq_base(i) + lay.step_ineq] = prev.mu[
            lay.ineq_base(j) : lay.ineq_base(j) + lay.step_ineq
        ]
    mu[lay.ineq_base(nn) :] = prev.mu[lay.ineq_base(nn) :]
    return z, lam, mu


def solve_built(
    built: BuiltOcp,
    settings: SolverSettings,
    warm_start: Optional[PrimalDualSolution] = None,
) -> tuple[ControlAction, PrimalDualSolution]:
    """Solve an assembled controller instance.

    The returned action is the first predicted input with the fixed tunnel
    angle re-attached, projected onto the (already hard-enforced) bounds to
    scrub interior-point-level constraint slack.
    """
    compatible = (
        warm_start is not None
        and warm_start.z is not None
        and warm_start.eta_hat.shape[0] == built.layout.horizon + 1
        and warm_start.sigma.shape[1] == built.layout.n_obs
    )
    if compatible:
        z0, lam0, mu0 = shift_warm_start(built, warm_start)
    else:
        z0, lam0, mu0 = cold_start(built)
    try:
        result = nlp.solve(built.instance, z0, settings, lam0, mu0)
    except nlp.MaxIterationsError:
        if not compatible:
            raise
        # a shifted solution occasionally parks the iteration in a poor basin
        # of the (nonconvex) problem; restarting cold is cheap and reliable
        z0, lam0, mu0 = cold_start(built)
        result = nlp.solve(built.instance, z0, settings, lam0, mu0)
    sol = built.unpack(result)
    action = ControlAction(
        f1=float(sol.f_hat[0, 0]),
        f2=float(sol.f_hat[0, 1]),
        f3=float(sol.f_hat[0, 2]),
        alpha2=float(sol.alpha_hat[0, 0]),
        alpha3=float(sol.alpha_hat[0, 1]),
        alpha1=ALPHA1_FIXED,
    ).clipped(built.model)
    return action, sol


def policy(
    state: VesselState,
    theta: ThetaParams,
    spec: OcpSpec,
    settings: Optional[SolverSettings] = None,
    warm_start: Optional[PrimalDualSolution] = None,
) -> tuple[ControlAction, PrimalDualSolution]:
    """Controller policy: first optimal input plus the full primal-dual point.

    Deterministic given identical inputs and warm start.  Solver failures
    propagate as :class:`shipmpc.nlp.NlpError` subtypes carrying the best
    iterate for diagnosis.
    """
    if settings is None:
        settings = SolverSettings()
    built = build_ocp(state, theta, spec)
    return solve_built(built, settings, warm_start)
