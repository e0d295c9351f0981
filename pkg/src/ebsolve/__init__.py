"""Annealed energy-landscape learning and gradient-descent solving.

The library trains a ladder of progressively smoother energy functions over
(input, output) pairs and answers queries by descending those landscapes from
noisiest to cleanest, optionally spending more optimization steps for harder
instances.
"""

from ebsolve.estimator import EnergySolver
from ebsolve.harness import ExperimentConfig
from ebsolve.inference import SolveConfig, anneal_solve, discretize
from ebsolve.models import ModelSpec, build_model
from ebsolve.schedule import NoiseSchedule, make_cosine_schedule
from ebsolve.tasks import TaskKind
from ebsolve.training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "EnergySolver",
    "ExperimentConfig",
    "ModelSpec",
    "NoiseSchedule",
    "SolveConfig",
    "TaskKind",
    "TrainConfig",
    "__version__",
    "anneal_solve",
    "build_model",
    "discretize",
    "make_cosine_schedule",
    "train",
]
