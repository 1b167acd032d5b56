"""Neural tangent kernels of the scaled two-layer ReLU network.

A :class:`KernelField` evaluates q x q kernel blocks. Three sources exist:
the empirical NTK of a given network, the closed-form limiting kernel under
the zero-second-layer initialization, and a Monte Carlo estimate of that
limit which serves as an independent check of the closed form.
"""

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from fklvi.net import TwoLayerNet, relu, relu_grad


def empirical_ntk_blocks(net: TwoLayerNet, X, Y):
    """NTK blocks K(x_n, y_m) for all pairs, shape (N, M, q, q)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[1] != net.d or Y.shape[1] != net.d:
        raise ValueError(f"inputs must have dimension {net.d}")
    px, py = X @ net.W.T, Y @ net.W.T
    first = relu(px) @ relu(py).T / net.p
    out = first[:, :, None, None] * np.eye(net.q)
    if np.any(net.A):
        sx, sy = relu_grad(px), relu_grad(py)
        # sum_j a_kj a_lj s_nj s_mj, scaled by x_n . y_m
        second = np.einsum("kj,lj,nj,mj->nmkl", net.A, net.A, sx, sy, optimize=True)
        out = out + second * (X @ Y.T)[:, :, None, None] / net.p
    return out


def empirical_ntk(net: TwoLayerNet, x, x2):
    return empirical_ntk_blocks(net, x, x2)[0, 0]


def arccos_kernel(X, Y):
    """E_w[relu(x.w) relu(y.w)] for w ~ N(0, I): the order-1 arc-cosine kernel."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    nx = np.linalg.norm(X, axis=1)
    ny = np.linalg.norm(Y, axis=1)
    if np.any(nx == 0) or np.any(ny == 0):
        raise ValueError("the limiting kernel is undefined at the origin")
    cos = np.clip((X @ Y.T) / np.outer(nx, ny), -1.0, 1.0)
    angle = np.arccos(cos)
    return np.outer(nx, ny) / (2.0 * np.pi) * (np.sin(angle) + (np.pi - angle) * cos)


def limiting_ntk(x, x2, q):
    return arccos_kernel(x, x2)[0, 0] * np.eye(q)


def limiting_ntk_mc(x, x2, q, n_samples, rng, return_se=False):
    """Monte Carlo estimate of the limiting kernel from ``n_samples`` draws of w."""
    x = np.asarray(x, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if np.linalg.norm(x) == 0 or np.linalg.norm(x2) == 0:
        raise ValueError("the limiting kernel is undefined at the origin")
    w = rng.standard_normal((n_samples, x.size))
    prod = relu(w @ x) * relu(w @ x2)
    value = prod.mean() * np.eye(q)
    if return_se:
        return value, prod.std(ddof=1) / np.sqrt(n_samples) * np.eye(q)
    return value


@dataclass(frozen=True)
class KernelField:
    """A q x q matrix-valued kernel; ``blocks(X, Y)`` returns (N, M, q, q)."""

    blocks: Callable
    q: int
    provenance: str

    def __call__(self, x, x2):
        return self.blocks(np.atleast_2d(x), np.atleast_2d(x2))[0, 0]

    def gram(self, X):
        """Block Gram matrix of size (N q, N q)."""
        B = self.blocks(X, X)
        n, q = B.shape[0], B.shape[2]
        return B.transpose(0, 2, 1, 3).reshape(n * q, n * q)

    @classmethod
    def empirical(cls, net: TwoLayerNet):
        frozen = net.copy()
        return cls(lambda X, Y: empirical_ntk_blocks(frozen, X, Y), net.q, "empirical")

    @classmethod
    def limiting(cls, q):
        return cls(lambda X, Y: arccos_kernel(X, Y)[:, :, None, None] * np.eye(q), q,
                   "limiting_closed_form")

    @classmethod
    def limiting_mc(cls, q, n_samples, seed):
        w = np.random.default_rng(seed).standard_normal((n_samples, 2))

        def blocks(X, Y):
            X = np.atleast_2d(X)
            Y = np.atleast_2d(Y)
            if X.shape[1] != w.shape[1]:
                raise ValueError("limiting_mc kernel is built for 2-d inputs")
            k = relu(X @ w.T) @ relu(Y @ w.T).T / n_samples
            return k[:, :, None, None] * np.eye(q)

        return cls(blocks, q, f"limiting_mc(M={n_samples}, seed={seed})")


def unit_circle_grid(n):
    angles = 2.0 * np.pi * np.arange(n) / n
    return np.stack([np.cos(angles), np.sin(angles)], axis=1)


def kernel_sup_distance(k1: KernelField, k2: KernelField, grid):
    """max over grid pairs (diagonal included) of the Frobenius block distance."""
    grid = np.atleast_2d(grid)
    if grid.shape[0] == 0:
        raise ValueError("grid must be nonempty")
    diff = k1.blocks(grid, grid) - k2.blocks(grid, grid)
    return float(np.max(np.sqrt(np.sum(diff * diff, axis=(-2, -1)))))


def kernel_drift(nets, grid):
    """Sup-grid distance of each snapshot's NTK to the first snapshot's.

    Returns ``(curve, max_drift)``.
    """
    nets = list(nets)
    if not nets:
        raise ValueError("need at least one network snapshot")
    shape = (nets[0].p, nets[0].d, nets[0].q)
    if any((n.p, n.d, n.q) != shape for n in nets):
        raise ValueError("all snapshots must share one architecture")
    base = KernelField.empirical(nets[0])
    curve = np.array([kernel_sup_distance(KernelField.empirical(n), base, grid) for n in nets])
    return curve, float(curve.max())


def gram_min_eigenvalue(kernel: KernelField, grid):
    grid = np.atleast_2d(grid)
    _, counts = np.unique(np.round(grid, 12), axis=0, return_counts=True)
    if np.any(counts > 1):
        warnings.warn("grid contains duplicate points; the Gram matrix is singular",
                      RuntimeWarning, stacklevel=2)
    G = kernel.gram(grid)
    return float(np.linalg.eigvalsh(0.5 * (G + G.T))[0])
