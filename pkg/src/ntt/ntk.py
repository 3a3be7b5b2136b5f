"""Empirical neural tangent kernels, linearization and linear training dynamics.

Kernels are indexed by (sample, logit) pairs: in ``full`` mode entry
``(i*c + k, j*c + l)`` is the inner product of the parameter gradients of
logit ``k`` on sample ``i`` and logit ``l`` on sample ``j``. ``trace`` mode
sums the ``k == l`` terms into an ``n x n`` matrix.

The kernel is assembled layer by layer instead of through an explicit
``(n*c, P)`` Jacobian. For a dense layer with inputs ``A`` (n x in),
backprop signals ``D[i, k, u] = d f_k(x_i) / d z_u(x_i)`` and a 0/1 mask
``M``, the weight block contributes
``sum_{u,v} M[u,v] D[i,k,u] A[i,v] D[j,l,u] A[j,v]``. All pieces are built
from differentiable operations (or a fused op with its own adjoint), so the
kernel can be differentiated with respect to the parameters.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericalError
from .network import LayerRecord, Network

__all__ = [
    "KernelCache",
    "ntk_blocks",
    "empirical_ntk",
    "network_jacobian",
    "LinearizedModel",
    "linearize",
    "analytic_linear_dynamics",
    "simulate_linear_dynamics",
    "DivergenceError",
]


class DivergenceError(NumericalError):
    """Linear dynamics left the representable range."""


def _digest(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a)
    return hashlib.blake2b(a.view(np.uint8), digest_size=16).digest() + repr(a.shape).encode()


@dataclass
class KernelCache:
    """Reuses masked pair Grams of layers whose inputs do not depend on the parameters.

    Only the first parametric layer qualifies; its entry is keyed by digests of
    the batch and the layer mask.
    """

    entries: dict = field(default_factory=dict)
    max_entries: int = 1

    def get(self, key):
        return self.entries.get(key)

    def put(self, key, value) -> None:
        if len(self.entries) >= self.max_entries:
            self.entries.pop(next(iter(self.entries)))
        self.entries[key] = value


def _masked_dense_block(D: Tensor, A: Tensor, M: np.ndarray, Q: np.ndarray | None = None) -> Tensor:
    Dd = np.ascontiguousarray(D.data)
    Ad = A.data
    if Q is None:
        Q = _kernels.masked_pair_gram(Ad, M)

    def backward(g, needs):
        if ad.is_grad_enabled():
            raise NotImplementedError("masked dense kernel block supports first-order gradients only")
        dD, dQ = _kernels.contract_grad(g.data, Dd, Q, bool(needs[1]))
        gD = Tensor(dD) if needs[0] else None
        gA = Tensor(_kernels.masked_pair_gram_vjp(dQ, Ad, M)) if needs[1] else None
        return gD, gA

    return ad.primitive(_kernels.contract(Dd, Q), (D, A), backward, "masked_dense_ntk")


def _gram4(F: Tensor, n: int, c: int) -> Tensor:
    """``F`` is (n*c, m); returns the (n, c, n, c) Gram of its rows."""
    return ad.reshape(ad.matmul(F, ad.transpose(F)), (n, c, n, c))


def _backprop_signals(logits: Tensor, records: list[LayerRecord], create_graph: bool) -> list[Tensor]:
    """Per layer ``(n, c, *z.shape[1:])`` derivatives of each logit w.r.t. the layer's pre-activations."""
    n, c = logits.shape
    outs = [r.outputs for r in records]
    cols: list[list[Tensor]] = [[] for _ in records]
    for k in range(c):
        seed = np.zeros((n, c))
        seed[:, k] = 1.0
        grads = ad.grad(logits, outs, grad_outputs=Tensor(seed), create_graph=create_graph)
        for li, g in enumerate(grads):
            cols[li].append(g)
    return [ad.stack(col, axis=1) for col in cols]


def ntk_blocks(
    net: Network,
    params,
    mask: np.ndarray | None,
    x,
    create_graph: bool = False,
    cache: KernelCache | None = None,
) -> tuple[Tensor, Tensor]:
    """Logits ``(n, c)`` and the kernel as an ``(n, c, n, c)`` tensor.

    With ``create_graph`` and ``params`` a tensor requiring grad, both results
    are differentiable with respect to ``params``. Dropout is never applied.
    """
    if isinstance(params, Tensor) and params.requires_grad and create_graph:
        p = params
    else:
        raw = params.data if isinstance(params, Tensor) else params
        p = Tensor(np.asarray(raw, dtype=np.float64), requires_grad=True)
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    records: list[LayerRecord] = []
    with ad.enable_grad():
        logits = net.forward(p, x, mask, trace=records)
        n, c = logits.shape
        signals = _backprop_signals(logits, records, create_graph)
        with ad._grad_mode(create_graph):
            H = None
            for rec, D in zip(records, signals):
                part = _layer_kernel(net, rec, D, mask, n, c, x, cache)
                H = part if H is None else H + part
    if not create_graph:
        logits, H = logits.detach(), H.detach()
    return logits, H


def _layer_kernel(net, rec, D, mask, n, c, x, cache) -> Tensor:
    wb = net.block(rec.layer, "weight")
    bb = net.block(rec.layer, "bias")
    spec = net.layers[rec.layer]
    M = None if mask is None else np.asarray(mask[wb.slice]).reshape(wb.shape[0], -1)
    if M is not None and np.all(M == 1):
        M = None
    if rec.kind == "dense":
        A = rec.inputs
        Dflat = ad.reshape(D, (n * c, spec.fan_out))
        if M is None:
            K = ad.reshape(ad.matmul(Dflat, ad.transpose(Dflat)), (n, c, n, c))
            AA = ad.reshape(ad.matmul(A, ad.transpose(A)), (n, 1, n, 1))
            H = K * AA
        else:
            Q = None
            if not A.requires_grad and cache is not None:
                key = (rec.layer, _digest(x), _digest(M))
                Q = cache.get(key)
                if Q is None:
                    Q = _kernels.masked_pair_gram(A.data, M)
                    cache.put(key, Q)
            H = _masked_dense_block(D, A, M, Q)
        if bb is not None:
            H = H + _gram4(Dflat, n, c)
        return H
    # conv: D is (n, c, pos, O), patches (n, pos, r)
    P = rec.inputs
    pos, r = P.shape[1], P.shape[2]
    O = spec.out_ch
    Dt = ad.reshape(ad.transpose(D, (0, 1, 3, 2)), (n, c * O, pos))
    G = ad.reshape(ad.matmul(Dt, P), (n * c, O * r))
    if M is not None:
        G = G * Tensor(M.reshape(-1))
    H = _gram4(G, n, c)
    if bb is not None:
        H = H + _gram4(ad.reshape(ad.sum_(D, axis=2), (n * c, O)), n, c)
    return H


def _trace4(H: Tensor) -> Tensor:
    n, c = H.shape[0], H.shape[1]
    eye = Tensor(np.eye(c).reshape(1, 1, c, c))
    HH = ad.transpose(H, (0, 2, 1, 3)) * eye
    return ad.sum_(ad.reshape(HH, (n, n, c * c)), axis=2)


def kernel_matrix(H4: Tensor, mode: str = "full") -> Tensor:
    """Flatten an ``(n, c, n, c)`` kernel to ``full`` or ``trace`` form."""
    n, c = H4.shape[0], H4.shape[1]
    if mode == "full":
        return ad.reshape(H4, (n * c, n * c))
    if mode == "trace":
        return _trace4(H4)
    raise ValueError(f"ntk mode must be 'full' or 'trace', got {mode!r}")


def empirical_ntk(
    net: Network,
    params: np.ndarray,
    mask: np.ndarray | None,
    batch,
    mode: str = "full",
) -> np.ndarray:
    """Empirical NTK of ``f(X, mask * params)`` with respect to the stored parameters.

    Returns ``(n*c, n*c)`` in ``full`` mode or ``(n, n)`` in ``trace`` mode.
    """
    if mode not in ("full", "trace"):
        raise ValueError(f"ntk mode must be 'full' or 'trace', got {mode!r}")
    _, H4 = ntk_blocks(net, params, mask, batch)
    with ad.no_grad():
        return kernel_matrix(H4, mode).data


def network_jacobian(net: Network, params: np.ndarray, mask: np.ndarray | None, batch) -> tuple[np.ndarray, np.ndarray]:
    """Logits ``(n, c)`` and the explicit ``(n*c, P)`` Jacobian with respect to the stored parameters.

    Columns of masked weights are zero. Assembled from the same per-layer
    quantities as :func:`ntk_blocks`.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    p = Tensor(np.asarray(params, dtype=np.float64), requires_grad=True)
    records: list[LayerRecord] = []
    with ad.enable_grad():
        logits = net.forward(p, x, mask, trace=records)
        n, c = logits.shape
        signals = _backprop_signals(logits, records, create_graph=False)
    J = np.zeros((n * c, net.n_params))
    for rec, D in zip(records, signals):
        wb = net.block(rec.layer, "weight")
        bb = net.block(rec.layer, "bias")
        Dd = D.data
        if rec.kind == "dense":
            blk = np.einsum("iku,iv->ikuv", Dd, rec.inputs.data).reshape(n * c, -1)
            bias = Dd.reshape(n * c, -1)
        else:
            blk = np.einsum("ikpo,ipr->ikor", Dd, rec.inputs.data).reshape(n * c, -1)
            bias = Dd.sum(axis=2).reshape(n * c, -1)
        if mask is not None:
            blk = blk * mask[wb.slice]
        J[:, wb.slice] = blk
        if bb is not None:
            J[:, bb.slice] = bias
    return logits.data, J


@dataclass
class LinearizedModel:
    """First-order expansion ``f0 + J (theta - theta0)`` of a (masked) network on a fixed batch.

    ``f0`` and rows of ``jacobian`` are flattened as ``i*c + k``.
    """

    theta0: np.ndarray
    f0: np.ndarray
    jacobian: np.ndarray
    n_outputs: int
    mask: np.ndarray | None = None

    def __call__(self, theta: np.ndarray) -> np.ndarray:
        return self.f0 + self.jacobian @ (np.asarray(theta, dtype=np.float64) - self.theta0)

    def kernel(self) -> np.ndarray:
        return self.jacobian @ self.jacobian.T


def linearize(net: Network, params0: np.ndarray, mask: np.ndarray | None, batch) -> LinearizedModel:
    logits, J = network_jacobian(net, params0, mask, batch)
    return LinearizedModel(
        theta0=np.array(params0, dtype=np.float64),
        f0=logits.reshape(-1),
        jacobian=J,
        n_outputs=logits.shape[1],
        mask=None if mask is None else np.array(mask, dtype=np.float64),
    )


def analytic_linear_dynamics(H0: np.ndarray, f0: np.ndarray, y: np.ndarray, t: float) -> np.ndarray:
    """Outputs at time ``t`` of ``df/dt = -H0 (f - y)``: ``e^{-tH0} f0 + (I - e^{-tH0}) y``.

    Negative eigenvalues (roundoff on a PSD kernel) are clamped to zero.
    """
    if t < 0:
        raise ValueError("time must be non-negative")
    H0 = np.asarray(H0, dtype=np.float64)
    f0 = np.asarray(f0, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    shape = f0.shape
    f0, y = f0.reshape(-1), y.reshape(-1)
    if H0.shape != (f0.size, f0.size) or y.shape != f0.shape:
        raise ValueError(f"dimension mismatch: H {H0.shape}, f0 {f0.shape}, y {y.shape}")
    if t == 0:
        return f0.reshape(shape).copy()
    lam, V = np.linalg.eigh(0.5 * (H0 + H0.T))
    decay = np.exp(-t * np.clip(lam, 0.0, None))
    r = V.T @ (f0 - y)
    return (y + V @ (decay * r)).reshape(shape)


def simulate_linear_dynamics(
    lin: LinearizedModel, y: np.ndarray, learning_rate: float, steps: int
) -> np.ndarray:
    """Gradient descent on ``1/2 ||f_lin(theta) - y||^2`` in parameter space.

    Returns ``(steps + 1, n*c)`` outputs; row 0 is the starting point and row
    ``s`` the outputs after ``s`` steps.
    """
    if learning_rate < 0:
        raise ValueError("learning rate must be non-negative")
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape != lin.f0.shape:
        raise ValueError(f"targets have {y.size} entries, model has {lin.f0.size} outputs")
    theta = lin.theta0.copy()
    out = np.empty((steps + 1, y.size))
    f = lin(theta)
    out[0] = f
    for s in range(1, steps + 1):
        theta -= learning_rate * (lin.jacobian.T @ (f - y))
        f = lin(theta)
        if not np.all(np.isfinite(f)) or np.linalg.norm(f) > 1e12:
            raise DivergenceError(f"linear dynamics diverged at step {s} (learning rate {learning_rate})")
        out[s] = f
    return out
