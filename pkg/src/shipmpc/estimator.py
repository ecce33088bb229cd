"""Estimator-style front end so the controller composes with ML tooling.

:class:`MpcPolicy` is predict-shaped (states in, actions out) and
:class:`MpcDpgAgent` is fit-shaped (``fit()`` runs the learning loop and
stores the tuned parameters on ``theta_``).  Both follow the scikit-learn
parameter conventions: constructor arguments are stored verbatim and exposed
through ``get_params`` / ``set_params``.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from shipmpc.config import RunConfig
from shipmpc.dynamics import VesselState
from shipmpc.learner import LearningTrace, learn
from shipmpc.nlp import SolverSettings
from shipmpc.ocp import OcpSpec, PrimalDualSolution, ThetaParams, policy


def validate_state_array(states) -> tuple[np.ndarray, bool]:
    """Coerce input to an (n, 6) float array; returns (array, was_single)."""
    arr = np.asarray(states, dtype=float)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 6:
        raise ValueError(
            f"states must have shape (6,) or (n, 6), got {np.shape(states)}"
        )
    if not np.all(np.isfinite(arr)):
        raise ValueError("states must be finite")
    return arr, single


class _ParamsMixin:
    _param_names: tuple[str, ...] = ()

    def get_params(self, deep: bool = False) -> dict:
        return {name: getattr(self, name) for name in self._param_names}

    def set_params(self, **params):
        for name, value in params.items():
            if name not in self._param_names:
                raise ValueError(
                    f"unknown parameter {name!r} for {type(self).__name__}"
                )
            setattr(self, name, value)
        return self


class MpcPolicy(_ParamsMixin):
    """State-to-action map backed by one controller solve per state.

    Stateless across ``predict`` calls: every row is solved from the cold
    start, so identical inputs give identical outputs.
    """

    _param_names = ("ocp_spec", "solver_settings", "theta")

    def __init__(
        self,
        ocp_spec: OcpSpec,
        solver_settings: Optional[SolverSettings] = None,
        theta: Optional[ThetaParams] = None,
    ):
        self.ocp_spec = ocp_spec
        self.solver_settings = solver_settings
        self.theta = theta

    def _theta(self) -> ThetaParams:
        return self.theta if self.theta is not None else ThetaParams.initial()

    def _settings(self) -> SolverSettings:
        return (
            self.solver_settings
            if self.solver_settings is not None
            else SolverSettings()
        )

    def solve(
        self, state: VesselState, warm_start: Optional[PrimalDualSolution] = None
    ) -> tuple[np.ndarray, PrimalDualSolution]:
        """Full-detail solve for one state, optionally warm-started."""
        action, sol = policy(
            state, self._theta(), self.ocp_spec, self._settings(), warm_start
        )
        return action.as_array(), sol

    def predict(self, states) -> np.ndarray:
        """Actions (f1, f2, f3, alpha1, alpha2, alpha3) for the given states."""
        arr, single = validate_state_array(states)
        out = np.empty((arr.shape[0], 6))
        for i, row in enumerate(arr):
            action, _ = self.solve(VesselState.from_array(row))
            out[i] = action
        return out[0] if single else out

    def __call__(self, state):
        return self.predict(state)


class MpcDpgAgent(_ParamsMixin):
    """Policy-gradient agent: ``fit()`` tunes the controller parameters.

    After fitting, ``theta_`` holds the learned parameters, ``trace_`` the
    per-step learning records, and ``predict`` maps states through the tuned
    policy.
    """

    _param_names = ("config",)

    def __init__(self, config: RunConfig):
        self.config = config

    def fit(self, X=None, y=None) -> "MpcDpgAgent":
        """Run the learning loop (inputs are ignored; episodes are rolled out)."""
        trace: LearningTrace = learn(
            self.config.theta0,
            self.config.ocp_spec,
            self.config.solver,
            self.config.learning,
        )
        self.trace_ = trace
        self.theta_ = trace.final_theta
        return self

    def _fitted_policy(self) -> MpcPolicy:
        if not hasattr(self, "theta_"):
            raise RuntimeError("agent is not fitted; call fit() first")
        return MpcPolicy(
            self.config.ocp_spec, self.config.solver, theta=self.theta_
        )

    def predict(self, states) -> np.ndarray:
        return self._fitted_policy().predict(states)
