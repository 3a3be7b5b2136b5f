"""Label-free transfer of a dense teacher's outputs and tangent kernel to a sparse student.

The student objective on a batch ``X`` of ``n`` samples is

    J = ||f(X, m * s) - f(X, t)||^2 / n + gamma_sq * ||H(m * s) - H(t)||_F^2 / n^2

with teacher parameters ``t``, student parameters ``s``, mask ``m`` and
kernels taken with respect to the stored parameters. Each iteration takes an
optimizer step on ``dJ/ds`` followed by decoupled decay ``s -= beta * m * s``;
masked-out entries of ``s`` are frozen and the mask is re-ranked from ``|s|``
every ``mask_update_every`` iterations.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .baselines import logit_snip_scores
from .errors import ConfigError, NumericalError
from .masks import check_density, check_scheme, magnitude_mask, select_mask
from .network import Network, make_rng
from .ntk import KernelCache, kernel_matrix, ntk_blocks
from .optim import make_optimizer

__all__ = [
    "NttConfig",
    "NttReport",
    "NTT_PRESETS",
    "Teacher",
    "ntt_objective",
    "ntt_gradient",
    "ntt_transfer",
    "magnitude_mask",
    "batch_schedule",
]


@dataclass(frozen=True)
class NttConfig:
    """Hyperparameters of the transfer loop.

    ``iterations`` overrides ``epochs`` when set. A ``batch_size`` of 0 (or at
    least the dataset size) means full-batch steps in dataset order.
    """

    gamma_sq: float = 1e-3
    learning_rate: float = 5e-4
    weight_decay: float = 1e-4
    batch_size: int = 64
    epochs: int = 20
    iterations: int | None = None
    mask_update_every: int = 100
    scheme: str = "layerwise"
    density: float = 0.03
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    ntk_mode: str = "full"
    refresh_global_mask: bool = True
    snip_batch_size: int = 128
    seed: int = 0

    def validate(self) -> "NttConfig":
        if not self.gamma_sq > 0:
            raise ConfigError("gamma_sq must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.mask_update_every < 1:
            raise ConfigError("mask_update_every must be at least 1")
        if self.batch_size < 0 or self.epochs < 0 or (self.iterations is not None and self.iterations < 0):
            raise ConfigError("batch_size, epochs and iterations must be non-negative")
        if self.ntk_mode not in ("full", "trace"):
            raise ConfigError("ntk_mode must be 'full' or 'trace'")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer must be 'sgd' or 'adam'")
        check_scheme(self.scheme)
        check_density(self.density)
        return self

    def with_overrides(self, **kw) -> "NttConfig":
        known = {f.name for f in fields(self)}
        bad = set(kw) - known
        if bad:
            raise ConfigError(f"unknown transfer settings: {sorted(bad)}")
        return replace(self, **kw)


# Per task/architecture settings; the toy rows run full-batch on 500 images.
NTT_PRESETS: dict[str, dict] = {
    "toy-mlp": dict(iterations=5000, batch_size=0, learning_rate=1e-3, gamma_sq=1e-5, weight_decay=0.0),
    "toy-cnn": dict(iterations=5000, batch_size=0, learning_rate=5e-4, gamma_sq=1e-6, weight_decay=0.0),
    "mnist-mlp": dict(epochs=20, batch_size=64, learning_rate=5e-4, gamma_sq=1e-3, weight_decay=1e-4),
    "mnist-cnn": dict(epochs=20, batch_size=64, learning_rate=5e-4, gamma_sq=1e-3, weight_decay=1e-5),
    "fashion-mlp": dict(epochs=20, batch_size=64, learning_rate=5e-4, gamma_sq=1e-3, weight_decay=1e-4),
    "fashion-cnn": dict(epochs=20, batch_size=64, learning_rate=5e-4, gamma_sq=1e-3, weight_decay=1e-5),
    "cifar-conv4": dict(epochs=20, batch_size=32, learning_rate=5e-4, gamma_sq=1e-3, weight_decay=1e-8),
    "svhn-conv4": dict(epochs=20, batch_size=32, learning_rate=5e-4, gamma_sq=1e-3, weight_decay=1e-8),
}
for _v in NTT_PRESETS.values():
    _v.setdefault("mask_update_every", 100)


def preset_config(name: str, **overrides) -> NttConfig:
    if name not in NTT_PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(NTT_PRESETS)}")
    return NttConfig(**{**NTT_PRESETS[name], **overrides}).validate()


@dataclass
class NttReport:
    """Per-iteration objective trace. ``density`` is the kept fraction of weights."""

    iteration: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    output_term: list = field(default_factory=list)
    kernel_term: list = field(default_factory=list)
    density: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    mask_refreshes: list = field(default_factory=list)

    def append(self, it, j, out, ker, density, wall) -> None:
        self.iteration.append(int(it))
        self.objective.append(float(j))
        self.output_term.append(float(out))
        self.kernel_term.append(float(ker))
        self.density.append(float(density))
        self.wall_time.append(float(wall))

    def rows(self):
        return zip(self.iteration, self.objective, self.output_term, self.kernel_term, self.density)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Teacher:
    """Dense reference network. Outputs and kernel are memoized for the last batch seen."""

    net: Network
    params: np.ndarray
    _key: bytes | None = field(default=None, repr=False)
    _value: tuple | None = field(default=None, repr=False)

    def targets(self, x: np.ndarray, mode: str) -> tuple[np.ndarray, np.ndarray]:
        key = mode.encode() + np.ascontiguousarray(x).tobytes() if x.size <= 1 << 22 else None
        if key is not None and key == self._key:
            return self._value
        f, H4 = ntk_blocks(self.net, self.params, None, x)
        with ad.no_grad():
            value = (f.data, kernel_matrix(H4, mode).data)
        if key is not None:
            self._key, self._value = key, value
        return value


def _as_teacher(teacher) -> Teacher:
    if isinstance(teacher, Teacher):
        return teacher
    net, params = teacher
    return Teacher(net, np.asarray(params, dtype=np.float64))


def _objective_terms(teacher: Teacher, p: Tensor, mask, x, gamma_sq, mode, cache, create_graph):
    net = teacher.net
    f_t, H_t = teacher.targets(x, mode)
    f_s, H4 = ntk_blocks(net, p, mask, x, create_graph=create_graph, cache=cache)
    n = x.shape[0]
    with ad._grad_mode(create_graph):
        d = f_s - Tensor(f_t)
        out = ad.sum_(d * d) / float(n)
        e = kernel_matrix(H4, mode) - Tensor(H_t)
        ker = ad.sum_(e * e) * (gamma_sq / float(n * n))
        return out + ker, out, ker


def _check_student(teacher: Teacher, student_params, mask) -> None:
    P = teacher.net.n_params
    if np.shape(teacher.params) != (P,) or np.shape(student_params) != (P,):
        raise ValueError(f"teacher and student must share the architecture ({P} parameters)")
    if mask is not None and np.shape(mask) != (P,):
        raise ValueError(f"mask must have length {P}")


def ntt_objective(teacher, student_params, mask, batch, gamma_sq: float, ntk_mode: str = "full"):
    """``(J, output_term, kernel_term)`` for one batch (see module docstring)."""
    teacher = _as_teacher(teacher)
    _check_student(teacher, student_params, mask)
    x = np.asarray(batch, dtype=np.float64)
    J, out, ker = _objective_terms(teacher, Tensor(student_params), mask, x, gamma_sq, ntk_mode, None, False)
    return J.item(), out.item(), ker.item()


def ntt_gradient(
    teacher,
    student_params,
    mask,
    batch,
    gamma_sq: float,
    ntk_mode: str = "full",
    cache: KernelCache | None = None,
    return_terms: bool = False,
):
    """Exact ``dJ/ds``; entries of masked weights are exactly zero."""
    teacher = _as_teacher(teacher)
    _check_student(teacher, student_params, mask)
    x = np.asarray(batch, dtype=np.float64)
    p = Tensor(np.asarray(student_params, dtype=np.float64), requires_grad=True)
    J, out, ker = _objective_terms(teacher, p, mask, x, gamma_sq, ntk_mode, cache, True)
    (g,) = ad.grad(J, [p])
    if return_terms:
        return g.data, (J.item(), out.item(), ker.item())
    return g.data


def batch_schedule(n: int, batch_size: int, epochs: int, iterations: int | None, rng: np.random.Generator):
    """Yield index arrays. Full batch (no shuffle) when ``batch_size`` is 0 or >= n."""
    if n == 0:
        raise ValueError("no training samples")
    full = batch_size == 0 or batch_size >= n
    per_epoch = 1 if full else math.ceil(n / batch_size)
    total = iterations if iterations is not None else epochs * per_epoch
    order = np.arange(n)
    for it in range(total):
        if full:
            yield order
            continue
        pos = it % per_epoch
        if pos == 0:
            order = rng.permutation(n)
        yield order[pos * batch_size:(pos + 1) * batch_size]


def _initial_mask(net: Network, params: np.ndarray, x: np.ndarray, cfg: NttConfig) -> np.ndarray:
    if cfg.scheme == "layerwise":
        return magnitude_mask(net, params, cfg.density, "layerwise")
    rng = make_rng(cfg.seed, "snip-batch")
    take = min(cfg.snip_batch_size, x.shape[0])
    idx = np.sort(rng.choice(x.shape[0], size=take, replace=False))
    return select_mask(net, logit_snip_scores(net, params, x[idx]), cfg.density, "global")


def ntt_transfer(
    teacher,
    data,
    config: NttConfig,
    callback=None,
) -> tuple[np.ndarray, np.ndarray, NttReport]:
    """Run the transfer loop; returns ``(mask, student_params, report)``.

    ``data`` is an array of inputs or any object with an ``inputs`` attribute
    (labels are never consulted). ``callback(iteration, params, mask)`` is
    called before every update when given.
    """
    cfg = config.validate()
    teacher = _as_teacher(teacher)
    net = teacher.net
    x = np.asarray(getattr(data, "inputs", data), dtype=np.float64)
    student = teacher.params.copy()
    mask = _initial_mask(net, student, x, cfg)
    weights = net.weight_indicator()
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    refresh = cfg.scheme == "layerwise" or cfg.refresh_global_mask
    cache = KernelCache()
    report = NttReport()
    start = time.perf_counter()
    sched = batch_schedule(x.shape[0], cfg.batch_size, cfg.epochs, cfg.iterations, make_rng(cfg.seed, "ntt-batches"))
    for it, idx in enumerate(sched):
        if it > 0 and refresh and it % cfg.mask_update_every == 0:
            mask = magnitude_mask(net, student, cfg.density, cfg.scheme)
            report.mask_refreshes.append(it)
        batch = x[idx]
        try:
            g, (J, out, ker) = ntt_gradient(teacher, student, mask, batch, cfg.gamma_sq, cfg.ntk_mode, cache, True)
        except ad.NonFiniteError as exc:
            raise NumericalError(f"transfer objective became non-finite at iteration {it}: {exc}") from exc
        if not math.isfinite(J):
            raise NumericalError(f"transfer objective is {J} at iteration {it}")
        report.append(it, J, out, ker, mask[weights].mean(), time.perf_counter() - start)
        if callback is not None:
            callback(it, student, mask)
        opt.step(student, g, mask)
        if cfg.weight_decay:
            student -= cfg.weight_decay * (mask * student)
        if not np.all(np.isfinite(student)):
            raise NumericalError(f"student parameters became non-finite at iteration {it}")
    return mask, student, report
