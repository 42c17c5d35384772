"""Data-parallel nonlinear tensor factorization with Gaussian-process priors.

Tensor cells are modeled as a GP over the concatenation of per-mode latent
factor rows, made scalable through inducing points and collapsed variational
bounds whose statistics are entry-additive. Training distributes as a
key-value-free map/reduce; continuous data uses a Gaussian likelihood,
binary data a probit augmentation with a fixed-point dual update.
"""

from .kernel import KernelParams, kernel_eval
from .model import (
    BINARY,
    CONTINUOUS,
    InducingSet,
    LatentFactors,
    ModelState,
    init_state,
    load_checkpoint,
    save_checkpoint,
)
from .sptensor import EntryBatch, SparseTensor, balanced_sample, parse_coo, split_folds

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "KernelParams",
    "kernel_eval",
    "BINARY",
    "CONTINUOUS",
    "InducingSet",
    "LatentFactors",
    "ModelState",
    "init_state",
    "load_checkpoint",
    "save_checkpoint",
    "EntryBatch",
    "SparseTensor",
    "balanced_sample",
    "parse_coo",
    "split_folds",
]
