"""scikit-learn style wrappers around the transfer loop, the baselines and training.

``fit`` learns masks / parameters, ``transform`` returns network logits and
the supervised estimators ``predict``. Hyperparameters are plain constructor
arguments, so ``get_params`` / ``set_params`` / ``clone`` work as usual.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .baselines import baseline_mask
from .network import Network, forward_logits, init_glorot, make_rng, preset
from .training import TrainConfig, train
from .transfer import NttConfig, Teacher, ntt_transfer

__all__ = ["NeuralTangentTransfer", "SnipPruner", "RandomPruner", "MaskedNetworkClassifier",
           "MaskedNetworkRegressor"]


def _network(arch, n_outputs: int) -> Network:
    return arch if isinstance(arch, Network) else preset(arch, n_outputs)


def _inputs(X, net: Network | None = None) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float64)
    if net is not None and int(np.prod(X.shape[1:])) != int(np.prod(net.input_shape)):
        raise ValueError(f"X has {np.prod(X.shape[1:])} features per sample, network expects {net.input_shape}")
    return X


class _MaskedTransformMixin(TransformerMixin):
    def transform(self, X):
        check_is_fitted(self, "mask_")
        return forward_logits(self.network_, self.params_, self.mask_, _inputs(X, self.network_))


class NeuralTangentTransfer(_MaskedTransformMixin, BaseEstimator):
    """Label-free sparse initialization by matching a dense teacher's outputs and kernel.

    After ``fit(X)``: ``mask_``, ``params_`` (student), ``teacher_params_``,
    ``report_`` and ``network_``. ``y`` is accepted and ignored.
    """

    def __init__(self, arch="lenet-300-100", n_outputs=10, density=0.03, scheme="layerwise",
                 gamma_sq=1e-3, learning_rate=5e-4, weight_decay=1e-4, batch_size=64, epochs=20,
                 max_iter=None, mask_update_every=100, optimizer="adam", ntk_mode="full",
                 refresh_global_mask=True, random_state=0):
        self.arch = arch
        self.n_outputs = n_outputs
        self.density = density
        self.scheme = scheme
        self.gamma_sq = gamma_sq
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_iter = max_iter
        self.mask_update_every = mask_update_every
        self.optimizer = optimizer
        self.ntk_mode = ntk_mode
        self.refresh_global_mask = refresh_global_mask
        self.random_state = random_state

    def _config(self) -> NttConfig:
        return NttConfig(
            gamma_sq=self.gamma_sq, learning_rate=self.learning_rate, weight_decay=self.weight_decay,
            batch_size=self.batch_size, epochs=self.epochs, iterations=self.max_iter,
            mask_update_every=self.mask_update_every, scheme=self.scheme, density=self.density,
            optimizer=self.optimizer, ntk_mode=self.ntk_mode,
            refresh_global_mask=self.refresh_global_mask, seed=int(self.random_state or 0),
        ).validate()

    def fit(self, X, y=None, teacher_params=None):
        cfg = self._config()
        net = _network(self.arch, self.n_outputs)
        X = _inputs(X, net)
        teacher = (init_glorot(net, make_rng(cfg.seed, "init")) if teacher_params is None
                   else np.asarray(teacher_params, dtype=np.float64))
        self.mask_, self.params_, self.report_ = ntt_transfer(Teacher(net, teacher), X, cfg)
        self.teacher_params_ = teacher
        self.network_ = net
        return self


class SnipPruner(_MaskedTransformMixin, BaseEstimator):
    """SNIP (``snip``, global), Layerwise-SNIP (``layerwise_snip``) or label-free ``logit_snip``."""

    def __init__(self, arch="lenet-300-100", n_outputs=10, density=0.03, variant="snip",
                 scheme=None, loss="softmax_cross_entropy", random_state=0):
        self.arch = arch
        self.n_outputs = n_outputs
        self.density = density
        self.variant = variant
        self.scheme = scheme
        self.loss = loss
        self.random_state = random_state

    def fit(self, X, y=None):
        net = _network(self.arch, self.n_outputs)
        scheme = self.scheme or ("layerwise" if self.variant == "layerwise_snip" else "global")
        if self.variant == "logit_snip":
            X = _inputs(X, net)
        else:
            if y is None:
                raise ValueError(f"{self.variant} needs labels")
            X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64, multi_output=True, y_numeric=True)
            y = y.astype(np.int64) if y.ndim == 1 else y
        self.mask_, self.params_ = baseline_mask(self.variant, net, self.density, scheme,
                                                 int(self.random_state or 0), X, y, self.loss)
        self.network_ = net
        return self


class RandomPruner(_MaskedTransformMixin, BaseEstimator):
    """Exact-count random masks on Glorot weights, or on variance-scaled weights with ``scaled=True``."""

    def __init__(self, arch="lenet-300-100", n_outputs=10, density=0.03, scheme="layerwise",
                 scaled=False, random_state=0):
        self.arch = arch
        self.n_outputs = n_outputs
        self.density = density
        self.scheme = scheme
        self.scaled = scaled
        self.random_state = random_state

    def fit(self, X=None, y=None):
        net = _network(self.arch, self.n_outputs)
        method = "scaled_random" if self.scaled else "random"
        self.mask_, self.params_ = baseline_mask(method, net, self.density, self.scheme, int(self.random_state or 0))
        self.network_ = net
        return self


class _MaskedNetworkBase(BaseEstimator):
    _loss = "softmax_cross_entropy"

    def __init__(self, arch="lenet-300-100", n_outputs=10, mask=None, init_params=None, optimizer="adam",
                 learning_rate=1e-3, batch_size=64, epochs=20, max_iter=None, random_state=0):
        self.arch = arch
        self.n_outputs = n_outputs
        self.mask = mask
        self.init_params = init_params
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_iter = max_iter
        self.random_state = random_state

    def _fit(self, X, labels, targets):
        from .data import Dataset

        net = _network(self.arch, self.n_outputs)
        seed = int(self.random_state or 0)
        p0 = init_glorot(net, make_rng(seed, "init")) if self.init_params is None else self.init_params
        cfg = TrainConfig(optimizer=self.optimizer, learning_rate=self.learning_rate, batch_size=self.batch_size,
                          epochs=self.epochs, iterations=self.max_iter, loss=self._loss, seed=seed)
        ds = Dataset(X, labels, "train", max(net.n_outputs, 1), targets)
        self.params_, self.history_ = train(net, p0, self.mask, ds, cfg)
        self.network_ = net
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        return forward_logits(self.network_, self.params_, self.mask, _inputs(X, self.network_))


class MaskedNetworkClassifier(ClassifierMixin, _MaskedNetworkBase):
    """Softmax cross-entropy training of a (masked) network on integer labels."""

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        self.classes_, codes = np.unique(y, return_inverse=True)
        return self._fit(X, codes.astype(np.int64), None)

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]


class MaskedNetworkRegressor(RegressorMixin, _MaskedNetworkBase):
    """Quadratic-loss training on real-valued targets (one column per network output)."""

    _loss = "quadratic"

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64, multi_output=True, y_numeric=True)
        y2 = y.reshape(len(y), -1)
        return self._fit(X, np.zeros(len(y), dtype=np.int64), y2)

    def predict(self, X):
        out = self.decision_function(X)
        return out[:, 0] if out.shape[1] == 1 else out
