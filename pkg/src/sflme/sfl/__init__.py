from .client import ClientState, ClientView, QueryStrategy
from .model import Network, SplitError, SplitModel, merge, rekey, split, synchronize
from .protocol import (
    AttackHook,
    EpochRecord,
    TrainConfig,
    TrainResult,
    gradient_consistency,
    initial_model,
    replay_server,
    run_training,
    server_input_grad,
)
from .server import BudgetExceeded, DivergenceError, GradientQueryRecord, QueryChannel, QueryLog, Server

__all__ = [
    "ClientState", "ClientView", "QueryStrategy", "Network", "SplitError", "SplitModel", "merge", "rekey",
    "split", "synchronize", "AttackHook", "EpochRecord", "TrainConfig", "TrainResult", "gradient_consistency",
    "initial_model", "replay_server", "run_training", "server_input_grad", "BudgetExceeded", "DivergenceError",
    "GradientQueryRecord", "QueryChannel", "QueryLog", "Server",
]
