"""bnlab: train only the BatchNorm affine parameters of randomly initialized CNNs."""
from .architectures import ArchSpec, ConfigError, Network, build_plan, count_params
from .batchnorm import BatchNormState, BnInitScheme
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .datasets import Dataset, load_cifar10, synthetic_splits
from .rng import Prng
from .trainability import TrainabilityMask, select, verify_frozen
from .training import Hyperparams, evaluate, run_replicates, train

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "BatchNormState", "BnInitScheme", "Checkpoint", "ConfigError", "Dataset", "Hyperparams",
    "Network", "Prng", "RunConfig", "TrainabilityMask", "build_plan", "count_params", "evaluate",
    "load_checkpoint", "load_cifar10", "load_config", "run_replicates", "save_checkpoint", "select",
    "synthetic_splits", "train", "verify_frozen",
]
