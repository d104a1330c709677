"""fedmarket: a deterministic federated-learning simulator built around a
prediction-space knowledge market.

Clients exchange logits on a shared reference set instead of parameters;
the server turns prediction-space similarity and reference accuracy into
per-client teacher ensembles for a second-stage distillation update.
Local-only training, FedAvg, FedProx and a uniform global-teacher
(FedMD-style) baseline run in the same harness with byte-exact
communication accounting.
"""

__version__ = "0.1.0"

from ._kernels import BACKEND as KERNEL_BACKEND
from .data import Dataset, Partition, ReferenceSet, dirichlet_partition, holdout_reference, load_numeric, synth_blobs
from .errors import ConfigError, ContractError, DataFormatError, FedMarketError
from .market import MarketGraph, MarketPolicy, TeacherSet, fedmd_global_teacher, teacher_ensemble
from .nncore import LossSpec, MlpModel, OptimizerState, combined_loss, cross_entropy, gradient_check, kl_distill, optimizer_step, softmax_t

__all__ = [
    "KERNEL_BACKEND",
    "__version__",
    "Dataset",
    "Partition",
    "ReferenceSet",
    "dirichlet_partition",
    "holdout_reference",
    "load_numeric",
    "synth_blobs",
    "ConfigError",
    "ContractError",
    "DataFormatError",
    "FedMarketError",
    "MarketGraph",
    "MarketPolicy",
    "TeacherSet",
    "fedmd_global_teacher",
    "teacher_ensemble",
    "LossSpec",
    "MlpModel",
    "OptimizerState",
    "combined_loss",
    "cross_entropy",
    "gradient_check",
    "kl_distill",
    "optimizer_step",
    "softmax_t",
]
