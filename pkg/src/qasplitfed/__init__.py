"""Split-federated segmentation training with quality-aware model averaging."""

from .aggregation import STRATEGIES, ClientSnapshot, fedavg, fedavg_m, model_updates, naive_average
from .errors import ConfigurationError, DataError, ProtocolError, SplitFedError
from .orchestrator import RunConfig, RunResult, TrainingLog, run
from .params import ParamVector

__all__ = [
    "STRATEGIES", "ClientSnapshot", "ConfigurationError", "DataError", "ParamVector",
    "ProtocolError", "RunConfig", "RunResult", "SplitFedError", "TrainingLog",
    "fedavg", "fedavg_m", "model_updates", "naive_average", "run",
]
__version__ = "0.1.0"
