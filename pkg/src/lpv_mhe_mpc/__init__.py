"""Learning-based MHE-MPC for polytopic LPV systems."""
from .experiment import ExperimentConfig, initial_theta, learn, run_episode, simulate
from .lpv_plant import PolytopicModel, SchedulingBounds, discretize, msd_vertices
from .mhe import MheConfig, MovingHorizonEstimator, estimate
from .mpc import ModelPredictiveController, MpcConfig, policy
from .params import ThetaVector

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "initial_theta", "learn", "run_episode", "simulate", "PolytopicModel",
    "SchedulingBounds", "discretize", "msd_vertices", "MheConfig", "MovingHorizonEstimator",
    "estimate", "ModelPredictiveController", "MpcConfig", "policy", "ThetaVector",
]
