"""Sparse network initialization by neural tangent transfer, with foresight-pruning baselines."""

from .autodiff import Tensor, gradient, per_sample_jacobian, second_order_gradient
from .baselines import baseline_mask, logit_snip_scores, random_mask, snip_scores
from .checkpoint import read_checkpoint, write_checkpoint
from .data import Dataset, UnlabeledData, load_cifar10_binary, load_idx, load_mnist
from .errors import ConfigError, DataError, NTTError, NumericalError
from .estimators import (
    MaskedNetworkClassifier,
    MaskedNetworkRegressor,
    NeuralTangentTransfer,
    RandomPruner,
    SnipPruner,
)
from .masks import magnitude_mask, select_mask
from .network import build, count_multiply_adds, init_glorot, init_variance_scaled, make_rng, mlp, preset, speedup
from .ntk import analytic_linear_dynamics, empirical_ntk, linearize, simulate_linear_dynamics
from .training import TrainConfig, evaluate, train
from .transfer import NttConfig, Teacher, ntt_gradient, ntt_objective, ntt_transfer

__version__ = "0.1.0"
