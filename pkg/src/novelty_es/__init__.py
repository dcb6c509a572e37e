"""Evolution strategies with novelty search for MLP and Decision Transformer policies."""

from .config import RunConfig
from .env import DECEPTIVE_MAZE, OPEN_FIELD, get_env
from .novelty import Archive, BehaviorCharacteristic
from .optim import EsState, NoiseTable
from .policy import PolicySpec, param_count
from .training import Trainer

__all__ = [
    "Archive", "BehaviorCharacteristic", "DECEPTIVE_MAZE", "EsState", "NoiseTable", "OPEN_FIELD",
    "PolicySpec", "RunConfig", "Trainer", "get_env", "param_count",
]
__version__ = "0.1.0"
