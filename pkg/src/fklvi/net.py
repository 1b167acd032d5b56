"""Networks mapping observations to natural parameters, with hand-written gradients.

Every encoder keeps its parameters in one flat vector ``phi``; the named weight
blocks are views into it, so in-place optimizer updates are seen immediately.
Encoders share a small duck-typed surface used by the objectives:

* ``forward(X) -> (B, out)``
* ``backprop(X, G) -> flat gradient``, the batch mean of ``J(x_i)^T g_i``
* ``phi`` (flat parameter vector) and ``copy()``.

Flattening order for :class:`TwoLayerNet` is frozen as ``PARAM_ORDER``: the
second-layer matrix A (q x p, row-major) followed by the first-layer matrix W
(p x d, row-major). The linearized net and the NTK code rely on it.
"""

import json
from dataclasses import dataclass

import numpy as np

from fklvi.expfam import Family

PARAM_ORDER = "A-rowmajor,W-rowmajor;v1"


def relu(u):
    return np.maximum(u, 0.0)


def relu_grad(u):
    # Left derivative at the kink: relu'(0) = 0.
    return (u > 0).astype(float)


def _batch(X, dim, what="x"):
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.ndim != 2 or X.shape[1] != dim:
        raise ValueError(f"{what} must have trailing dimension {dim}, got shape {X.shape}")
    return X, single


def _check_grad_batch(X, G, q):
    G = np.atleast_2d(np.asarray(G, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("backprop needs a nonempty batch")
    if G.shape != (X.shape[0], q):
        raise ValueError(f"output gradients must have shape {(X.shape[0], q)}, got {G.shape}")
    return G


class TwoLayerNet:
    """f(x) = A relu(W x) / sqrt(p), the scaled single-hidden-layer ReLU network."""

    def __init__(self, W, A):
        W = np.asarray(W, dtype=float)
        A = np.asarray(A, dtype=float)
        p, d = W.shape
        q = A.shape[0]
        if A.shape != (q, p):
            raise ValueError(f"A must have shape (q, {p}), got {A.shape}")
        self.p, self.d, self.q = p, d, q
        self.phi = np.concatenate([A.ravel(), W.ravel()])
        self._bind()

    def _bind(self):
        qp = self.q * self.p
        self.A = self.phi[:qp].reshape(self.q, self.p)
        self.W = self.phi[qp:].reshape(self.p, self.d)

    @classmethod
    def initialize(cls, p, d, q, rng):
        """W with i.i.d. standard normal entries and A = 0, so f is identically 0."""
        if min(p, d, q) < 1:
            raise ValueError("p, d, q must all be at least 1")
        return cls(rng.standard_normal((p, d)), np.zeros((q, p)))

    @property
    def n_params(self):
        return self.phi.size

    def copy(self):
        return TwoLayerNet(self.W.copy(), self.A.copy())

    def with_params(self, phi):
        net = self.copy()
        net.phi[:] = phi
        return net

    def hidden(self, X):
        pre = X @ self.W.T
        return relu(pre), relu_grad(pre)

    def forward(self, X):
        X, single = _batch(X, self.d)
        H, _ = self.hidden(X)
        out = H @ self.A.T / np.sqrt(self.p)
        return out[0] if single else out

    def param_jacobian(self, x):
        """Jacobian of f(x) w.r.t. the flat parameters, shape (q, P)."""
        x, _ = _batch(x, self.d)
        x = x[0]
        pre = self.W @ x
        h, s = relu(pre), relu_grad(pre)
        scale = 1.0 / np.sqrt(self.p)
        jac_a = np.zeros((self.q, self.q, self.p))
        jac_a[np.arange(self.q), np.arange(self.q)] = h * scale
        jac_w = (self.A * s)[:, :, None] * x[None, None, :] * scale
        return np.concatenate([jac_a.reshape(self.q, -1), jac_w.reshape(self.q, -1)], axis=1)

    def backprop(self, X, G):
        """Batch mean of J(x_i)^T g_i without materializing Jacobians."""
        X, _ = _batch(X, self.d)
        G = _check_grad_batch(X, G, self.q)
        H, S = self.hidden(X)
        scale = 1.0 / (X.shape[0] * np.sqrt(self.p))
        grad_a = G.T @ H * scale
        grad_w = ((G @ self.A) * S).T @ X * scale
        return np.concatenate([grad_a.ravel(), grad_w.ravel()])


class LinearizedNet:
    """First-order Taylor expansion of a :class:`TwoLayerNet` around ``phi0``.

    lin(x; phi) = f(x; phi0) + J f(x; phi0) (phi - phi0). Activations and the
    Jacobian stay frozen at ``phi0``; only ``phi`` is trainable.
    """

    def __init__(self, base: TwoLayerNet):
        self.base = base.copy()
        self.p, self.d, self.q = base.p, base.d, base.q
        self.phi0 = base.phi.copy()
        self.phi = base.phi.copy()

    @property
    def n_params(self):
        return self.phi.size

    def copy(self):
        lin = LinearizedNet(self.base)
        lin.phi[:] = self.phi
        return lin

    def _delta(self):
        delta = self.phi - self.phi0
        qp = self.q * self.p
        return delta[:qp].reshape(self.q, self.p), delta[qp:].reshape(self.p, self.d)

    def forward(self, X):
        X, single = _batch(X, self.d)
        base = self.base
        H0, S0 = base.hidden(X)
        dA, dW = self._delta()
        f0 = H0 @ base.A.T
        tangent = H0 @ dA.T + ((X @ dW.T) * S0) @ base.A.T
        out = (f0 + tangent) / np.sqrt(self.p)
        return out[0] if single else out

    def backprop(self, X, G):
        X, _ = _batch(X, self.d)
        G = _check_grad_batch(X, G, self.q)
        H0, S0 = self.base.hidden(X)
        scale = 1.0 / (X.shape[0] * np.sqrt(self.p))
        grad_a = G.T @ H0 * scale
        grad_w = ((G @ self.base.A) * S0).T @ X * scale
        return np.concatenate([grad_a.ravel(), grad_w.ravel()])


def linearize(net: TwoLayerNet) -> LinearizedNet:
    return LinearizedNet(net)


class _MLP:
    """Dense ReLU stack over a slice of a shared flat buffer.

    The last layer is linear unless ``final_relu`` is set.
    """

    def __init__(self, sizes, final_relu=False):
        self.sizes = list(sizes)
        self.final_relu = final_relu
        self.shapes = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            self.shapes += [(fan_out, fan_in), (fan_out,)]
        self.n_params = sum(int(np.prod(s)) for s in self.shapes)

    def bind(self, flat):
        views, start = [], 0
        for shape in self.shapes:
            size = int(np.prod(shape))
            views.append(flat[start : start + size].reshape(shape))
            start += size
        return views

    def init_params(self, flat, rng, bias_std=0.0):
        for i, view in enumerate(self.bind(flat)):
            if i % 2 == 0:
                view[:] = rng.standard_normal(view.shape) / np.sqrt(view.shape[1])
            else:
                view[:] = bias_std * rng.standard_normal(view.shape)

    def forward(self, flat, X):
        views = self.bind(flat)
        cache = []
        lead = X.shape[:-1]
        h = X.reshape(-1, X.shape[-1])
        n_layers = len(views) // 2
        for k in range(n_layers):
            W, b = views[2 * k], views[2 * k + 1]
            pre = h @ W.T + b
            cache.append((h, pre))
            h = relu(pre) if k < n_layers - 1 or self.final_relu else pre
        return h.reshape(lead + (h.shape[-1],)), cache

    def backward(self, flat, cache, G, grad_flat, need_input=False):
        """Accumulate parameter gradients into ``grad_flat``.

        Returns the gradient w.r.t. the input when ``need_input`` is set.
        """
        views = self.bind(flat)
        grads = self.bind(grad_flat)
        n_layers = len(views) // 2
        lead = G.shape[:-1]
        g = G.reshape(-1, G.shape[-1])
        for k in reversed(range(n_layers)):
            h_in, pre = cache[k]
            if k < n_layers - 1 or self.final_relu:
                g = g * (pre > 0)
            grads[2 * k] += g.T @ h_in
            grads[2 * k + 1] += g.sum(axis=0)
            if k > 0 or need_input:
                g = g @ views[2 * k]
        return g.reshape(lead + (g.shape[-1],)) if need_input else None


def _canonical_order(X):
    # Sorting each set makes mean pooling bit-exactly permutation invariant.
    if X.shape[-1] == 1:
        return np.sort(X, axis=1)
    out = np.empty_like(X)
    for b in range(X.shape[0]):
        order = np.lexsort(X[b].T[::-1])
        out[b] = X[b][order]
    return out


class DeepSetEncoder:
    """head(mean_i element_net(x_i)): a permutation-invariant set encoder.

    Every element layer ends in a ReLU (a trailing linear element layer would
    commute with the mean and is absorbed into the head); the head's last
    layer is linear. Element biases start at N(0, 1) so that the ReLU kinks
    spread over the (scaled) input range instead of all sitting at zero.

    Inputs are divided by ``input_scale`` and outputs multiplied by
    ``output_scale`` (scalar or per-output vector) so the untrained network
    already works on the data's natural scale.
    """

    def __init__(self, in_dim, out_dim, rng, hidden=64, element_depth=1, head_depth=3,
                 input_scale=1.0, output_scale=1.0):
        if in_dim < 1 or out_dim < 1 or hidden < 1:
            raise ValueError("dimensions must be positive")
        self.in_dim, self.out_dim, self.hidden = in_dim, out_dim, hidden
        self.input_scale = float(input_scale)
        self.output_scale = np.broadcast_to(np.asarray(output_scale, dtype=float), (out_dim,)).copy()
        self.element = _MLP([in_dim] + [hidden] * element_depth, final_relu=True)
        self.head = _MLP([hidden] * head_depth + [out_dim])
        self.phi = np.zeros(self.element.n_params + self.head.n_params)
        self.element.init_params(self._element_flat(self.phi), rng, bias_std=1.0)
        self.head.init_params(self._head_flat(self.phi), rng)

    @property
    def n_params(self):
        return self.phi.size

    def _element_flat(self, flat):
        return flat[: self.element.n_params]

    def _head_flat(self, flat):
        return flat[self.element.n_params :]

    def copy(self):
        enc = object.__new__(DeepSetEncoder)
        enc.__dict__.update(self.__dict__)
        enc.output_scale = self.output_scale.copy()
        enc.phi = self.phi.copy()
        return enc

    def _prepare(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 2 and self.in_dim == 1:
            X = X[..., None]
        if X.ndim != 3 or X.shape[-1] != self.in_dim:
            raise ValueError(f"expected sets of shape (B, n, {self.in_dim}), got {X.shape}")
        if X.shape[1] == 0:
            raise ValueError("cannot encode an empty set")
        return _canonical_order(X) / self.input_scale

    def _run(self, X):
        X = self._prepare(X)
        feats, cache_e = self.element.forward(self._element_flat(self.phi), X)
        pooled = feats.mean(axis=1)
        out, cache_h = self.head.forward(self._head_flat(self.phi), pooled)
        return out * self.output_scale, (X.shape[1], cache_e, cache_h)

    def forward(self, X):
        """Encode a batch of sets, ``(B, n, in_dim)`` or ``(B, n)`` when in_dim == 1."""
        return self._run(X)[0]

    def backprop(self, X, G):
        _, (n, cache_e, cache_h) = self._run(X)
        G = np.atleast_2d(np.asarray(G, dtype=float))
        if G.shape != (cache_h[0][0].shape[0], self.out_dim):
            raise ValueError("output gradient shape does not match the batch")
        grad = np.zeros_like(self.phi)
        G = G * self.output_scale / G.shape[0]
        g_pooled = self.head.backward(self._head_flat(self.phi), cache_h, G, self._head_flat(grad),
                                      need_input=True)
        # materialize: a stride-0 broadcast view would push matmuls off BLAS
        g_feats = np.repeat(g_pooled[:, None, :] / n, n, axis=1)
        self.element.backward(self._element_flat(self.phi), cache_e, g_feats, self._element_flat(grad))
        return grad


class ConcatEncoder:
    """Independent encoders whose outputs are concatenated.

    Sub-encoder parameters become views into one flat buffer so optimizers
    see a single ``phi``. Used for separate networks per latent block.
    """

    def __init__(self, parts):
        self.parts = [p.copy() for p in parts]
        self.sizes = [p.out_dim for p in self.parts]
        self.out_dim = sum(self.sizes)
        self.phi = np.concatenate([p.phi for p in self.parts])
        self._bind()

    def _bind(self):
        start = 0
        for part in self.parts:
            part.phi = self.phi[start : start + part.n_params]
            start += part.n_params

    @property
    def n_params(self):
        return self.phi.size

    def copy(self):
        return ConcatEncoder([p.copy() for p in self.parts])

    def forward(self, X):
        return np.concatenate([p.forward(X) for p in self.parts], axis=-1)

    def backprop(self, X, G):
        G = np.atleast_2d(np.asarray(G, dtype=float))
        cuts = np.cumsum(self.sizes)[:-1]
        return np.concatenate([p.backprop(X, g) for p, g in zip(self.parts, np.split(G, cuts, axis=1))])


class SetCenteredEncoder:
    """Location-equivariant Gaussian head for sets of scalars.

    With c(x) the set mean, the inner encoder sees ``x - c`` and emits raw
    parameters of each latent block *relative to* c; after the output map
    they are shifted back, so that the location of every block moves with the
    data. For the mean-only family this is eta = eta_c + c; for the natural
    family eta = (eta_c1 - 2 eta_c2 c, eta_c2), the natural parameters of
    ``c + Y`` when Y has natural parameters eta_c. ``forward`` returns valid
    natural parameters, so pair it with ``OutputMap(family, identity=True)``.
    """

    def __init__(self, inner, family: Family, n_blocks, offset=1e-4):
        if family not in (Family.GAUSSIAN_MEAN, Family.GAUSSIAN_NATURAL):
            raise ValueError("location shifting is defined for the Gaussian families only")
        if inner.out_dim != n_blocks * family.q:
            raise ValueError(f"inner encoder must emit {n_blocks * family.q} outputs")
        self.inner, self.family, self.n_blocks = inner, family, n_blocks
        self.out_dim = inner.out_dim
        self.map = OutputMap(family, offset)

    @property
    def phi(self):
        return self.inner.phi

    @phi.setter
    def phi(self, value):
        self.inner.phi = value

    @property
    def n_params(self):
        return self.inner.n_params

    def copy(self):
        return SetCenteredEncoder(self.inner.copy(), self.family, self.n_blocks, self.map.offset)

    def _center(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 3:
            if X.shape[-1] != 1:
                raise ValueError("set centering needs scalar set elements")
            X = X[..., 0]
        c = X.mean(axis=1)
        return X - c[:, None], c[:, None]

    def _blocks(self, A):
        return A.reshape(A.shape[0], self.n_blocks, self.family.q)

    def forward(self, X):
        Xc, c = self._center(X)
        eta = self.map.apply(self._blocks(self.inner.forward(Xc)))
        if self.family is Family.GAUSSIAN_MEAN:
            eta[..., 0] += c
        else:
            eta[..., 0] -= 2.0 * eta[..., 1] * c
        return eta.reshape(eta.shape[0], -1)

    def backprop(self, X, G):
        Xc, c = self._center(X)
        raw = self._blocks(self.inner.forward(Xc))
        g = self._blocks(np.atleast_2d(np.asarray(G, dtype=float))).copy()
        if self.family is Family.GAUSSIAN_NATURAL:
            g[..., 1] -= 2.0 * c * g[..., 0]
        g = self.map.vjp(raw, g)
        return self.inner.backprop(Xc, g.reshape(g.shape[0], -1))


def deepset_forward(enc: DeepSetEncoder, xs):
    """Encode a single set ``xs`` of shape (n,) or (n, in_dim)."""
    xs = np.asarray(xs, dtype=float)
    if xs.ndim == 1:
        xs = xs[:, None]
    if xs.shape[0] == 0:
        raise ValueError("cannot encode an empty set")
    return enc.forward(xs[None])[0]


def softplus(u):
    return np.logaddexp(0.0, u)


def _sigmoid(u):
    return np.exp(-softplus(-u))


@dataclass(frozen=True)
class OutputMap:
    """Total map from raw network outputs to valid natural parameters.

    von Mises adds ``offset`` to both coordinates; the Gaussian natural family
    sends the second coordinate through ``-softplus(r) - offset``; the mean-only
    Gaussian is the identity. ``raw`` carries a trailing axis of length q.
    With ``identity=True`` all three maps are the identity, for encoders that
    already emit natural parameters (see :class:`SetCenteredEncoder`).
    """

    family: Family
    offset: float = 1e-4
    identity: bool = False

    def apply(self, raw):
        raw = np.asarray(raw, dtype=float)
        if raw.shape[-1] != self.family.q:
            raise ValueError(f"raw output must have trailing length {self.family.q}")
        if self.identity:
            return raw.copy()
        if self.family is Family.VON_MISES:
            return raw + self.offset
        if self.family is Family.GAUSSIAN_NATURAL:
            return np.stack([raw[..., 0], -softplus(raw[..., 1]) - self.offset], axis=-1)
        return raw.copy()

    def vjp(self, raw, g_eta):
        """Pull a gradient w.r.t. eta back to the raw outputs."""
        g_eta = np.asarray(g_eta, dtype=float)
        if self.family is Family.GAUSSIAN_NATURAL and not self.identity:
            raw = np.asarray(raw, dtype=float)
            g = g_eta.copy()
            g[..., 1] = -g_eta[..., 1] * _sigmoid(raw[..., 1])
            return g
        return g_eta.copy()

    def inverse(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.identity:
            return eta.copy()
        if self.family is Family.VON_MISES:
            return eta - self.offset
        if self.family is Family.GAUSSIAN_NATURAL:
            sp = -eta[..., 1] - self.offset
            if np.any(sp <= 0):
                raise ValueError("eta_2 is not reachable through the softplus map")
            # softplus^{-1}(y) = y + log(-expm1(-y))
            return np.stack([eta[..., 0], sp + np.log(-np.expm1(-sp))], axis=-1)
        return eta.copy()


def apply_output_map(output_map: OutputMap, raw):
    return output_map.apply(raw)


def save_checkpoint(path, net: TwoLayerNet, seed=None):
    """Write dims, seed, flat parameters and the flattening-order tag to an .npz file."""
    meta = {"kind": "TwoLayerNet", "p": net.p, "d": net.d, "q": net.q,
            "seed": seed, "param_order": PARAM_ORDER}
    np.savez(path, phi=net.phi, meta=json.dumps(meta))


def load_checkpoint(path):
    with np.load(path) as data:
        meta = json.loads(str(data["meta"]))
        phi = data["phi"]
    if meta.get("param_order") != PARAM_ORDER:
        raise ValueError(f"unsupported parameter order tag {meta.get('param_order')!r}")
    p, d, q = meta["p"], meta["d"], meta["q"]
    net = TwoLayerNet(np.zeros((p, d)), np.zeros((q, p)))
    net.phi[:] = phi
    return net, meta
