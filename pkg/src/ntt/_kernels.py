"""Compiled contractions for masked dense-layer NTK blocks.

With per-sample backprop signals ``D[i, k, u]`` (sample i, logit k, unit u)
and unit-major masked pair Grams ``Q[u, i, j] = sum_v M[u, v] A[i, v] A[j, v]``,
a dense layer contributes ``H[i, k, j, l] = sum_u D[i, k, u] D[j, l, u] Q[u, i, j]``
to the kernel. Each ``Q[u]`` is symmetric.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_FLAGS = {"contract", "arcp", "nsz", "reassoc"}


# Inner loops run over the sample index j, which is contiguous in every
# operand: Dl is D laid out (unit, logit, sample) and G2 / H2 are
# (i, k, l, j) views of the (i, k, j, l) kernel arrays.


@njit(cache=True, fastmath=_FLAGS)
def _contract(D, Dl, Q):
    n, c, m = D.shape
    H2 = np.zeros((n, c, c, n))
    for i in range(n):
        for u in range(m):
            q = Q[u, i]
            for k in range(c):
                d = D[i, k, u]
                if d == 0.0:
                    continue
                for l in range(c):
                    dl = Dl[u, l]
                    h = H2[i, k, l]
                    for j in range(i, n):
                        h[j] += d * q[j] * dl[j]
    for i in range(n):
        for k in range(c):
            for l in range(c):
                for j in range(i + 1, n):
                    H2[j, l, k, i] = H2[i, k, l, j]
    return H2


def contract(D: np.ndarray, Q: np.ndarray) -> np.ndarray:
    D = np.ascontiguousarray(D)
    H2 = _contract(D, np.ascontiguousarray(D.transpose(2, 1, 0)), Q)
    return np.ascontiguousarray(H2.transpose(0, 1, 3, 2))


@njit(cache=True, fastmath=_FLAGS)
def _contract_grad(G2, S2, D, Dl, Q, want_q):
    n, c, m = D.shape
    dD = np.zeros((n, c, m))
    dQ = np.zeros((m, n, n)) if want_q else np.zeros((1, 1, 1))
    for i in range(n):
        for u in range(m):
            q = Q[u, i]
            for k in range(c):
                acc = 0.0
                for l in range(c):
                    s = S2[i, k, l]
                    dl = Dl[u, l]
                    for j in range(n):
                        acc += s[j] * dl[j] * q[j]
                dD[i, k, u] = acc
            if want_q:
                out = dQ[u, i]
                for k in range(c):
                    d = D[i, k, u]
                    if d == 0.0:
                        continue
                    for l in range(c):
                        g = G2[i, k, l]
                        dl = Dl[u, l]
                        for j in range(n):
                            out[j] += d * g[j] * dl[j]
    return dD, dQ


def contract_grad(G: np.ndarray, D: np.ndarray, Q: np.ndarray, want_q: bool):
    """Gradients of ``sum(G * contract(D, Q))`` with respect to ``D`` and ``Q``."""
    G2 = np.ascontiguousarray(G.transpose(0, 1, 3, 2))
    S2 = G2 + G.transpose(2, 3, 1, 0)
    D = np.ascontiguousarray(D)
    return _contract_grad(G2, S2, D, np.ascontiguousarray(D.transpose(2, 1, 0)), Q, want_q)


def masked_pair_gram(A: np.ndarray, M: np.ndarray) -> np.ndarray:
    """``Q[u, i, j] = sum_v M[u, v] A[i, v] A[j, v]`` for a 0/1 mask ``M`` (out x in)."""
    n = A.shape[0]
    Q = np.zeros((M.shape[0], n, n))
    for u in range(M.shape[0]):
        cols = np.flatnonzero(M[u])
        if cols.size:
            As = A[:, cols]
            np.matmul(As, As.T, out=Q[u])
    return Q


def masked_pair_gram_vjp(dQ: np.ndarray, A: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Pull ``dQ`` (out, n, n) back to ``A`` through :func:`masked_pair_gram`."""
    dA = np.zeros_like(A)
    for u in range(M.shape[0]):
        cols = np.flatnonzero(M[u])
        if cols.size:
            dA[:, cols] += (dQ[u] + dQ[u].T) @ A[:, cols]
    return dA
