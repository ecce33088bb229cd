"""3-DOF surface vessel dynamics with azimuth/tunnel thruster allocation.

Pose eta = (x, y, psi) lives in the NED frame, velocity nu = (u, v, r) in the
body-fixed frame.  The model is

    eta_dot = J(psi) nu
    M nu_dot + D nu = T(alpha) f + tau_a

with constant mass and linear damping matrices, a thruster configuration
matrix T(alpha), and an additive body-frame disturbance force tau_a.  The
discrete-time system advances with a fixed-step RK4 integrator, holding the
disturbance constant over the step.

Headings are stored unwrapped; comparisons against reference headings must go
through :func:`shipmpc.mission.wrap_angle`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

ALPHA1_FIXED = np.pi / 2.0


class NonFiniteStateError(RuntimeError):
    """Raised when an integration step produces NaN or infinite state."""


@dataclass(frozen=True)
class VesselState:
    """Pose and body-fixed velocity of the vessel (the RL state)."""

    x: float
    y: float
    psi: float
    u: float
    v: float
    r: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi, self.u, self.v, self.r], dtype=float)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "VesselState":
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (6,):
            raise ValueError(f"state array must have shape (6,), got {arr.shape}")
        return cls(*arr.tolist())

    @property
    def pose(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi], dtype=float)

    @property
    def velocity(self) -> np.ndarray:
        return np.array([self.u, self.v, self.r], dtype=float)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.as_array())))


@dataclass(frozen=True)
class ControlAction:
    """Thruster forces (f1 tunnel, f2/f3 azimuth) and azimuth angles.

    The tunnel thruster angle alpha1 is mechanically fixed at pi/2 and is kept
    as a constant field so actions round-trip as 6-vectors
    (f1, f2, f3, alpha1, alpha2, alpha3).
    """

    f1: float
    f2: float
    f3: float
    alpha2: float
    alpha3: float
    alpha1: float = ALPHA1_FIXED

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.f1, self.f2, self.f3, self.alpha1, self.alpha2, self.alpha3],
            dtype=float,
        )

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ControlAction":
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (6,):
            raise ValueError(f"action array must have shape (6,), got {arr.shape}")
        return cls(
            f1=arr[0], f2=arr[1], f3=arr[2], alpha1=arr[3], alpha2=arr[4], alpha3=arr[5]
        )

    @property
    def forces(self) -> np.ndarray:
        return np.array([self.f1, self.f2, self.f3], dtype=float)

    @property
    def angles(self) -> np.ndarray:
        return np.array([self.alpha1, self.alpha2, self.alpha3], dtype=float)

    def satisfies_bounds(self, config: "ModelConfig", tol: float = 1e-9) -> bool:
        return bool(
            config.f1_min - tol <= self.f1 <= config.f1_max + tol
            and config.f23_min - tol <= self.f2 <= config.f23_max + tol
            and config.f23_min - tol <= self.f3 <= config.f23_max + tol
            and abs(self.alpha2) <= config.alpha_max + tol
            and abs(self.alpha3) <= config.alpha_max + tol
        )

    def clipped(self, config: "ModelConfig") -> "ControlAction":
        """Project onto the force/angle box constraints."""
        return ControlAction(
            f1=float(np.clip(self.f1, config.f1_min, config.f1_max)),
            f2=float(np.clip(self.f2, config.f23_min, config.f23_max)),
            f3=float(np.clip(self.f3, config.f23_min, config.f23_max)),
            alpha2=float(np.clip(self.alpha2, -config.alpha_max, config.alpha_max)),
            alpha3=float(np.clip(self.alpha3, -config.alpha_max, config.alpha_max)),
        )


@dataclass
class ModelConfig:
    """Physical vessel parameters, actuator limits, and discretization step.

    Masses are in kg (kg m^2 for yaw), forces in N, lengths in m, angles in
    rad.  ``disturbance_std`` is the per-component standard deviation of the
    Gaussian body-frame disturbance force sampled once per step.
    """

    mass_matrix: np.ndarray
    damping_matrix: np.ndarray
    lx1: float
    lx2: float
    lx3: float
    ly2: float
    ly3: float
    dt: float
    disturbance_std: float
    f1_min: float
    f1_max: float
    f23_min: float
    f23_max: float
    alpha_max: float
    vessel_radius: float
    _m_inv: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.mass_matrix = np.asarray(self.mass_matrix, dtype=float)
        self.damping_matrix = np.asarray(self.damping_matrix, dtype=float)
        self.validate()
        self._m_inv = np.linalg.inv(self.mass_matrix)

    def validate(self) -> None:
        if self.mass_matrix.shape != (3, 3) or self.damping_matrix.shape != (3, 3):
            raise ValueError("mass and damping matrices must be 3x3")
        if not np.all(np.isfinite(self.mass_matrix)) or not np.all(
            np.isfinite(self.damping_matrix)
        ):
            raise ValueError("mass/damping entries must be finite")
        if abs(np.linalg.det(self.mass_matrix)) < 1e-12:
            raise ValueError("mass matrix must be invertible")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.disturbance_std < 0.0:
            raise ValueError("disturbance_std must be nonnegative")
        if self.f1_min > self.f1_max or self.f23_min > self.f23_max:
            raise ValueError("force bounds must satisfy min <= max")
        if self.alpha_max <= 0.0:
            raise ValueError("alpha_max must be positive")
        if self.vessel_radius <= 0.0:
            raise ValueError("vessel radius must be positive")

    @property
    def m_inv(self) -> np.ndarray:
        return self._m_inv

    @property
    def force_lower(self) -> np.ndarray:
        return np.array([self.f1_min, self.f23_min, self.f23_min])

    @property
    def force_upper(self) -> np.ndarray:
        return np.array([self.f1_max, self.f23_max, self.f23_max])


def rotation_matrix(psi: float) -> np.ndarray:
    """Planar rotation about down-axis, block-diagonal with 1 for yaw."""
    c, s = np.cos(psi), np.sin(psi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_matrix_derivative(psi: float) -> np.ndarray:
    c, s = np.cos(psi), np.sin(psi)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def thruster_matrix(alpha: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Thruster configuration matrix T(alpha).

    Column 1 is the bow tunnel thruster (fixed lateral direction), columns 2
    and 3 are the stern azimuth thrusters rotated by alpha2, alpha3.
    """
    alpha = np.asarray(alpha, dtype=float)
    a2, a3 = alpha[1], alpha[2]
    c2, s2, c3, s3 = np.cos(a2), np.sin(a2), np.cos(a3), np.sin(a3)
    return np.array(
        [
            [0.0, c2, c3],
            [1.0, s2, s3],
            [
                config.lx1,
                config.lx2 * s2 - config.ly2 * c2,
                config.lx3 * s3 - config.ly3 * c3,
            ],
        ]
    )


def rhs_array(
    x: np.ndarray, u5: np.ndarray, tau_a: np.ndarray, config: ModelConfig
) -> np.ndarray:
    """Continuous-time derivative for state ``x`` (6,) and input ``u5``.

    ``u5`` packs (f1, f2, f3, alpha2, alpha3); the fixed tunnel angle is baked
    into the first thruster column.
    """
    psi = x[2]
    nu = x[3:6]
    c, s = np.cos(psi), np.sin(psi)
    eta_dot = np.array(
        [c * nu[0] - s * nu[1], s * nu[0] + c * nu[1], nu[2]]
    )
    f = u5[:3]
    a2, a3 = u5[3], u5[4]
    c2, s2, c3, s3 = np.cos(a2), np.sin(a2), np.cos(a3), np.sin(a3)
    tau = np.array(
        [
            c2 * f[1] + c3 * f[2],
            f[0] + s2 * f[1] + s3 * f[2],
            config.lx1 * f[0]
            + (config.lx2 * s2 - config.ly2 * c2) * f[1]
            + (config.lx3 * s3 - config.ly3 * c3) * f[2],
        ]
    )
    nu_dot = config.m_inv @ (tau + tau_a - config.damping_matrix @ nu)
    return np.concatenate([eta_dot, nu_dot])


def rhs_jacobians(
    x: np.ndarray, u5: np.ndarray, config: ModelConfig
) -> tuple[np.ndarray, np.ndarray]:
    """State and input Jacobians (6x6, 6x5) of :func:`rhs_array`."""
    psi = x[2]
    nu = x[3:6]
    fx = np.zeros((6, 6))
    fx[0:3, 2] = rotation_matrix_derivative(psi) @ nu
    fx[0:3, 3:6] = rotation_matrix(psi)
    fx[3:6, 3:6] = -config.m_inv @ config.damping_matrix

    f = u5[:3]
    a2, a3 = u5[3], u5[4]
    c2, s2, c3, s3 = np.cos(a2), np.sin(a2), np.cos(a3), np.sin(a3)
    t_mat = np.array(
        [
            [0.0, c2, c3],
            [1.0, s2, s3],
            [
                config.lx1,
                config.lx2 * s2 - config.ly2 * c2,
                config.lx3 * s3 - config.ly3 * c3,
            ],
        ]
    )
    dtau_da2 = np.array(
        [-s2 * f[1], c2 * f[1], (config.lx2 * c2 + config.ly2 * s2) * f[1]]
    )
    dtau_da3 = np.array(
        [-s3 * f[2], c3 * f[2], (config.lx3 * c3 + config.ly3 * s3) * f[2]]
    )
    fu = np.zeros((6, 5))
    fu[3:6, 0:3] = config.m_inv @ t_mat
    fu[3:6, 3] = config.m_inv @ dtau_da2
    fu[3:6, 4] = config.m_inv @ dtau_da3
    return fx, fu


def rk4_step_array(
    x: np.ndarray, u5: np.ndarray, tau_a: np.ndarray, config: ModelConfig
) -> np.ndarray:
    """One RK4 step of length ``config.dt`` with zero-order-hold input."""
    h = config.dt
    k1 = rhs_array(x, u5, tau_a, config)
    k2 = rhs_array(x + 0.5 * h * k1, u5, tau_a, config)
    k3 = rhs_array(x + 0.5 * h * k2, u5, tau_a, config)
    k4 = rhs_array(x + h * k3, u5, tau_a, config)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _rhs_batch(
    xs: np.ndarray, us: np.ndarray, tau_a: np.ndarray, config: ModelConfig
) -> np.ndarray:
    """Vectorized :func:`rhs_array` over a batch of states/inputs (N, 6|5)."""
    psi = xs[:, 2]
    nu = xs[:, 3:6]
    c, s = np.cos(psi), np.sin(psi)
    eta_dot = np.stack(
        [c * nu[:, 0] - s * nu[:, 1], s * nu[:, 0] + c * nu[:, 1], nu[:, 2]], axis=1
    )
    f = us[:, :3]
    a2, a3 = us[:, 3], us[:, 4]
    c2, s2, c3, s3 = np.cos(a2), np.sin(a2), np.cos(a3), np.sin(a3)
    tau = np.stack(
        [
            c2 * f[:, 1] + c3 * f[:, 2],
            f[:, 0] + s2 * f[:, 1] + s3 * f[:, 2],
            config.lx1 * f[:, 0]
            + (config.lx2 * s2 - config.ly2 * c2) * f[:, 1]
            + (config.lx3 * s3 - config.ly3 * c3) * f[:, 2],
        ],
        axis=1,
    )
    nu_dot = (tau + tau_a - nu @ config.damping_matrix.T) @ config.m_inv.T
    return np.concatenate([eta_dot, nu_dot], axis=1)


def _rhs_jacobians_batch(
    xs: np.ndarray, us: np.ndarray, config: ModelConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`rhs_jacobians`: returns (N,6,6) and (N,6,5)."""
    n = xs.shape[0]
    psi = xs[:, 2]
    nu = xs[:, 3:6]
    c, s = np.cos(psi), np.sin(psi)
    fx = np.zeros((n, 6, 6))
    fx[:, 0, 2] = -s * nu[:, 0] - c * nu[:, 1]
    fx[:, 1, 2] = c * nu[:, 0] - s * nu[:, 1]
    fx[:, 0, 3] = c
    fx[:, 0, 4] = -s
    fx[:, 1, 3] = s
    fx[:, 1, 4] = c
    fx[:, 2, 5] = 1.0
    fx[:, 3:6, 3:6] = -(config.m_inv @ config.damping_matrix)[None, :, :]

    f = us[:, :3]
    a2, a3 = us[:, 3], us[:, 4]
    c2, s2, c3, s3 = np.cos(a2), np.sin(a2), np.cos(a3), np.sin(a3)
    t_cols = np.zeros((n, 3, 5))
    t_cols[:, 0, 1] = c2
    t_cols[:, 0, 2] = c3
    t_cols[:, 1, 0] = 1.0
    t_cols[:, 1, 1] = s2
    t_cols[:, 1, 2] = s3
    t_cols[:, 2, 0] = config.lx1
    t_cols[:, 2, 1] = config.lx2 * s2 - config.ly2 * c2
    t_cols[:, 2, 2] = config.lx3 * s3 - config.ly3 * c3
    t_cols[:, 0, 3] = -s2 * f[:, 1]
    t_cols[:, 1, 3] = c2 * f[:, 1]
    t_cols[:, 2, 3] = (config.lx2 * c2 + config.ly2 * s2) * f[:, 1]
    t_cols[:, 0, 4] = -s3 * f[:, 2]
    t_cols[:, 1, 4] = c3 * f[:, 2]
    t_cols[:, 2, 4] = (config.lx3 * c3 + config.ly3 * s3) * f[:, 2]
    fu = np.zeros((n, 6, 5))
    fu[:, 3:6, :] = np.einsum("ij,njk->nik", config.m_inv, t_cols)
    return fx, fu


def rk4_step_batch(
    xs: np.ndarray, us: np.ndarray, tau_a: np.ndarray, config: ModelConfig
) -> np.ndarray:
    """Batched RK4 step over (N, 6) states and (N, 5) inputs."""
    h = config.dt
    k1 = _rhs_batch(xs, us, tau_a, config)
    k2 = _rhs_batch(xs + 0.5 * h * k1, us, tau_a, config)
    k3 = _rhs_batch(xs + 0.5 * h * k2, us, tau_a, config)
    k4 = _rhs_batch(xs + h * k3, us, tau_a, config)
    return xs + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step_jacobian_batch(
    xs: np.ndarray, us: np.ndarray, tau_a: np.ndarray, config: ModelConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Batched RK4 step with Jacobians: (N,6), (N,6,6), (N,6,5), (N,6,3)."""
    h = config.dt
    n = xs.shape[0]
    g_tau = np.zeros((6, 3))
    g_tau[3:6, :] = config.m_inv

    def stage(xs_i: np.ndarray, j_xs: np.ndarray):
        k = _rhs_batch(xs_i, us, tau_a, config)
        fx, fu = _rhs_jacobians_batch(xs_i, us, config)
        jk = np.einsum("nij,njk->nik", fx, j_xs)
        jk[:, :, 6:11] += fu
        jk[:, :, 11:14] += g_tau[None, :, :]
        return k, jk

    j_x = np.zeros((n, 6, 14))
    j_x[:, :, 0:6] = np.eye(6)[None, :, :]
    k1, jk1 = stage(xs, j_x)
    k2, jk2 = stage(xs + 0.5 * h * k1, j_x + 0.5 * h * jk1)
    k3, jk3 = stage(xs + 0.5 * h * k2, j_x + 0.5 * h * jk2)
    k4, jk4 = stage(xs + h * k3, j_x + h * jk3)
    x_next = xs + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    j_next = j_x + (h / 6.0) * (jk1 + 2.0 * jk2 + 2.0 * jk3 + jk4)
    return x_next, j_next[:, :, 0:6], j_next[:, :, 6:11], j_next[:, :, 11:14]


def rk4_step_with_jacobian(
    x: np.ndarray, u5: np.ndarray, tau_a: np.ndarray, config: ModelConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """RK4 step plus Jacobians w.r.t. state, input, and disturbance force.

    Returns ``(x_next, A, B, G)`` with shapes (6,), (6,6), (6,5), (6,3).  The
    chain rule is propagated through the four stages; the disturbance enters
    the acceleration linearly through the inverse mass matrix.
    """
    h = config.dt
    g_tau = np.zeros((6, 3))
    g_tau[3:6, :] = config.m_inv

    def stage(xs: np.ndarray, j_xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        # j_xs is d(xs)/d(x, u, tau) of shape (6, 14)
        k = rhs_array(xs, u5, tau_a, config)
        fx, fu = rhs_jacobians(xs, u5, config)
        jk = fx @ j_xs
        jk[:, 6:11] += fu
        jk[:, 11:14] += g_tau
        return k, jk

    j_x = np.zeros((6, 14))
    j_x[:, 0:6] = np.eye(6)

    k1, jk1 = stage(x, j_x)
    k2, jk2 = stage(x + 0.5 * h * k1, j_x + 0.5 * h * jk1)
    k3, jk3 = stage(x + 0.5 * h * k2, j_x + 0.5 * h * jk2)
    k4, jk4 = stage(x + h * k3, j_x + h * jk3)

    x_next = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    j_next = j_x + (h / 6.0) * (jk1 + 2.0 * jk2 + 2.0 * jk3 + jk4)
    return x_next, j_next[:, 0:6], j_next[:, 6:11], j_next[:, 11:14]


def rhs_generic(x: list, u: list, tau_a: list, config: ModelConfig) -> list:
    """Continuous-time derivative in scalar form.

    Works elementwise on anything supporting arithmetic and tsin/tcos
    (floats or second-order Taylor numbers), which lets the sensitivity
    machinery push derivative seeds through the exact model.
    """
    from shipmpc.taylor import tcos, tsin

    c, s = tcos(x[2]), tsin(x[2])
    eta_dot = [c * x[3] - s * x[4], s * x[3] + c * x[4], x[5]]
    c2, s2 = tcos(u[3]), tsin(u[3])
    c3, s3 = tcos(u[4]), tsin(u[4])
    tau = [
        c2 * u[1] + c3 * u[2] + tau_a[0],
        u[0] + s2 * u[1] + s3 * u[2] + tau_a[1],
        config.lx1 * u[0]
        + (config.lx2 * s2 - config.ly2 * c2) * u[1]
        + (config.lx3 * s3 - config.ly3 * c3) * u[2]
        + tau_a[2],
    ]
    d = config.damping_matrix
    minv = config.m_inv
    b = [
        tau[0] - (d[0, 0] * x[3] + d[0, 1] * x[4] + d[0, 2] * x[5]),
        tau[1] - (d[1, 0] * x[3] + d[1, 1] * x[4] + d[1, 2] * x[5]),
        tau[2] - (d[2, 0] * x[3] + d[2, 1] * x[4] + d[2, 2] * x[5]),
    ]
    nu_dot = [
        minv[0, 0] * b[0] + minv[0, 1] * b[1] + minv[0, 2] * b[2],
        minv[1, 0] * b[0] + minv[1, 1] * b[1] + minv[1, 2] * b[2],
        minv[2, 0] * b[0] + minv[2, 1] * b[1] + minv[2, 2] * b[2],
    ]
    return eta_dot + nu_dot


def rk4_step_generic(x: list, u: list, tau_a: list, config: ModelConfig) -> list:
    """Scalar-form RK4 step matching :func:`rk4_step_array`."""
    h = config.dt
    k1 = rhs_generic(x, u, tau_a, config)
    x2 = [x[i] + (0.5 * h) * k1[i] for i in range(6)]
    k2 = rhs_generic(x2, u, tau_a, config)
    x3 = [x[i] + (0.5 * h) * k2[i] for i in range(6)]
    k3 = rhs_generic(x3, u, tau_a, config)
    x4 = [x[i] + h * k3[i] for i in range(6)]
    k4 = rhs_generic(x4, u, tau_a, config)
    return [
        x[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        for i in range(6)
    ]


def continuous_rhs(
    state: VesselState,
    action: ControlAction,
    tau_a: np.ndarray,
    config: ModelConfig,
) -> np.ndarray:
    """Time derivative (eta_dot, nu_dot) of the continuous vessel model."""
    u5 = np.array([action.f1, action.f2, action.f3, action.alpha2, action.alpha3])
    return rhs_array(state.as_array(), u5, np.asarray(tau_a, dtype=float), config)


def sample_disturbance(rng: np.random.Generator, config: ModelConfig) -> np.ndarray:
    """Draw one body-frame disturbance force, i.i.d. per component."""
    if config.disturbance_std == 0.0:
        return np.zeros(3)
    return rng.normal(0.0, config.disturbance_std, size=3)


def step(
    state: VesselState,
    action: ControlAction,
    disturbance: Union[np.random.Generator, np.ndarray, None],
    config: ModelConfig,
) -> VesselState:
    """Advance the real system one sample interval.

    ``disturbance`` is either a Generator (a fresh disturbance force is
    sampled), an explicit 3-vector (injected deterministically, e.g. in
    tests), or None for the undisturbed system.
    """
    if isinstance(disturbance, np.random.Generator):
        tau_a = sample_disturbance(disturbance, config)
    elif disturbance is None:
        tau_a = np.zeros(3)
    else:
        tau_a = np.asarray(disturbance, dtype=float)
        if tau_a.shape != (3,):
            raise ValueError("injected disturbance must have shape (3,)")
    u5 = np.array([action.f1, action.f2, action.f3, action.alpha2, action.alpha3])
    x_next = rk4_step_array(state.as_array(), u5, tau_a, config)
    if not np.all(np.isfinite(x_next)):
        raise NonFiniteStateError(
            f"integration produced non-finite state from {state} with {action}"
        )
    return VesselState.from_array(x_next)
