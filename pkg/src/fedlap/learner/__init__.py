"""FedLap / FedLap+ models, objectives and federated training."""

from .model import ModelState, feature_head, init_state, predict, softmax
from .objective import Problem, build_problem, gradients, loss, regularizer_value
from .train import (
    DivergenceError,
    TrainConfig,
    TrainResult,
    boundary_nsf_exchange,
    centralized_gd,
    fedsgd_train,
    lipschitz_probe,
    load_checkpoint,
    reference_fedsgd,
    save_checkpoint,
)
