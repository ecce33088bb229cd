"""MPC-based deterministic policy gradient learning for surface vessel freight missions.

A 3-DOF vessel simulator, a parameterized model-predictive controller solved
by an in-repo SQP/interior-point stack, KKT-based policy sensitivities, and an
LSTD actor-critic loop that tunes the controller parameters online.
"""

from shipmpc.dynamics import ControlAction, ModelConfig, VesselState
from shipmpc.mission import MissionConfig, Obstacle
from shipmpc.nlp import NlpInstance, SolverSettings
from shipmpc.ocp import OcpSpec, PrimalDualSolution, ThetaParams
from shipmpc.learner import EpisodeLog, LearningConfig, LearningTrace
from shipmpc.config import RunConfig
from shipmpc.estimator import MpcPolicy, MpcDpgAgent

__all__ = [
    "ControlAction",
    "EpisodeLog",
    "LearningConfig",
    "LearningTrace",
    "MissionConfig",
    "ModelConfig",
    "MpcDpgAgent",
    "MpcPolicy",
    "NlpInstance",
    "Obstacle",
    "OcpSpec",
    "PrimalDualSolution",
    "RunConfig",
    "SolverSettings",
    "ThetaParams",
    "VesselState",
]

__version__ = "0.1.0"
