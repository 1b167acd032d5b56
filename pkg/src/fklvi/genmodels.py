"""Synthetic generative models: the rotation toy model and amortized clustering.

Both models support ancestral joint sampling. The toy model additionally
exposes its angular likelihood and a quadrature posterior oracle; the
clustering model exposes its log joint and gradient for ELBO-type objectives.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

TWO_PI = 2.0 * np.pi
LOG_2PI = float(np.log(TWO_PI))


@dataclass(frozen=True)
class JointSample:
    latents: dict
    observation: np.ndarray


# --------------------------------------------------------------------------
# Toy rotation model


@dataclass(frozen=True)
class ToyRotationModel:
    sigma: float = 0.5
    wrap_terms: int = 10
    grid_size: int = 2048

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.wrap_terms < 0 or self.grid_size < 2:
            raise ValueError("wrap_terms must be >= 0 and grid_size >= 2")


def toy_sample_joint(model: ToyRotationModel, rng, size=None) -> JointSample:
    """Draw theta ~ U[0, 2pi), z ~ N(0, sigma^2), x = (cos(theta+z), sin(theta+z)).

    With ``size=None`` a single draw is returned (scalar theta, x of shape
    (2,)); otherwise theta has shape ``(size,)`` and x shape ``(size, 2)``.
    """
    theta = rng.uniform(0.0, TWO_PI, size=size)
    z = model.sigma * rng.standard_normal(size=size)
    angle = theta + z
    x = np.stack([np.cos(angle), np.sin(angle)], axis=-1)
    return JointSample(latents={"theta": theta}, observation=x)


def _unit_angle(x, tol=1e-9):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 2:
        raise ValueError("toy observations are 2-vectors")
    if np.any(np.abs(np.hypot(x[..., 0], x[..., 1]) - 1.0) > tol):
        raise ValueError("toy observation must lie on the unit circle")
    return np.mod(np.arctan2(x[..., 1], x[..., 0]), TWO_PI)


def _wrapped_normal_logpdf(delta, sigma, wrap_terms):
    k = np.arange(-wrap_terms, wrap_terms + 1)
    shifted = np.asarray(delta)[..., None] + TWO_PI * k
    logs = -0.5 * (shifted / sigma) ** 2 - np.log(sigma) - 0.5 * LOG_2PI
    return logsumexp(logs, axis=-1)


def toy_log_likelihood(model: ToyRotationModel, theta, x):
    """Log density of x's angle given theta, w.r.t. arc length on the circle."""
    alpha = _unit_angle(x)
    return _wrapped_normal_logpdf(alpha - np.asarray(theta, dtype=float), model.sigma, model.wrap_terms)


@dataclass(frozen=True)
class ToyPosterior:
    grid: np.ndarray
    log_post: np.ndarray
    moments: np.ndarray
    log_evidence: float

    def log_density(self, model, theta, x):
        """Exact log posterior at arbitrary theta, using the grid normalizer."""
        return toy_log_likelihood(model, theta, x) - LOG_2PI - self.log_evidence


def toy_posterior_oracle(model: ToyRotationModel, x) -> ToyPosterior:
    """Posterior of theta given one observation, by quadrature on a periodic grid.

    The grid holds ``grid_size`` equispaced angles on [0, 2pi); for a periodic
    integrand the trapezoid rule reduces to ``h * sum``. ``moments`` is
    E[(cos theta, sin theta) | x].
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (2,):
        raise ValueError("toy_posterior_oracle takes a single observation")
    h = TWO_PI / model.grid_size
    grid = h * np.arange(model.grid_size)
    log_joint = toy_log_likelihood(model, grid, x) - LOG_2PI
    log_evidence = float(logsumexp(log_joint) + np.log(h))
    log_post = log_joint - log_evidence
    weights = h * np.exp(log_post)
    moments = np.array([np.sum(weights * np.cos(grid)), np.sum(weights * np.sin(grid))])
    return ToyPosterior(grid=grid, log_post=log_post, moments=moments, log_evidence=log_evidence)


def toy_posterior_moments(model: ToyRotationModel, xs) -> np.ndarray:
    """Posterior mean of (cos theta, sin theta) for each row of ``xs``."""
    xs = np.atleast_2d(xs)
    return np.stack([toy_posterior_oracle(model, x).moments for x in xs])


# --------------------------------------------------------------------------
# Amortized clustering model


def _default_mu():
    return (-20.0, -10.0, 0.0, 10.0, 20.0)


@dataclass(frozen=True)
class ClusteringModel:
    mu: tuple = field(default_factory=_default_mu)
    sigma: float = 0.5
    tau: float = 0.1
    weights: tuple = None
    n_obs: int = 1000
    prior_s_std: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "mu", tuple(float(m) for m in self.mu))
        d = len(self.mu)
        if self.weights is None:
            object.__setattr__(self, "weights", tuple([1.0 / d] * d))
        else:
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if len(self.weights) != d:
            raise ValueError("weights and mu must have the same length")
        if abs(sum(self.weights) - 1.0) > 1e-12 or min(self.weights) < 0:
            raise ValueError("weights must lie on the simplex")
        if self.sigma <= 0 or self.tau <= 0 or self.prior_s_std <= 0:
            raise ValueError("sigma, tau and prior_s_std must be positive")
        if self.n_obs < 1:
            raise ValueError("n_obs must be at least 1")

    @property
    def d(self) -> int:
        return len(self.mu)


def clustering_sample_joint(model: ClusteringModel, rng, size=None, s=None) -> JointSample:
    """Ancestral draw of (s, z, xs). Passing ``s`` conditions on a fixed shift.

    With ``size=None``: s scalar, z (d,), xs (n_obs,). Otherwise a leading
    batch axis of length ``size`` is added to each.
    """
    batch = 1 if size is None else size
    mu = np.asarray(model.mu)
    if s is None:
        shift = model.prior_s_std * rng.standard_normal(batch)
    else:
        shift = np.full(batch, float(s))
    z = mu + shift[:, None] + model.sigma * rng.standard_normal((batch, model.d))
    labels = rng.choice(model.d, size=(batch, model.n_obs), p=np.asarray(model.weights))
    centers = np.take_along_axis(z, labels, axis=1)
    xs = centers + model.tau * rng.standard_normal((batch, model.n_obs))
    if size is None:
        shift, z, xs, labels = shift[0], z[0], xs[0], labels[0]
    return JointSample(latents={"s": shift, "z": z, "labels": labels}, observation=xs)


def _norm_logpdf(x, loc, scale):
    return -0.5 * ((x - loc) / scale) ** 2 - np.log(scale) - 0.5 * LOG_2PI


def _check_clustering_dims(model, z, xs):
    if z.shape[-1] != model.d:
        raise ValueError(f"z must have {model.d} entries, got shape {z.shape}")
    if xs.ndim != 1 or xs.shape[0] != model.n_obs:
        raise ValueError(f"xs must be a vector of {model.n_obs} observations")


def clustering_log_joint(model: ClusteringModel, s, z, xs):
    """log p(s) + log p(z | s) + sum_i log sum_j p_j N(x_i; z_j, tau^2).

    ``s`` may carry leading sample dimensions, with ``z`` shaped ``s.shape + (d,)``;
    ``xs`` is one dataset of ``n_obs`` points.
    """
    s = np.asarray(s, dtype=float)
    z = np.asarray(z, dtype=float)
    xs = np.asarray(xs, dtype=float)
    _check_clustering_dims(model, z, xs)
    mu = np.asarray(model.mu)
    prior_s = _norm_logpdf(s, 0.0, model.prior_s_std)
    prior_z = np.sum(_norm_logpdf(z, mu + s[..., None], model.sigma), axis=-1)
    comp = _norm_logpdf(xs[:, None], z[..., None, :], model.tau) + np.log(model.weights)
    return prior_s + prior_z + np.sum(logsumexp(comp, axis=-1), axis=-1)


def clustering_log_joint_and_grad(model: ClusteringModel, s, z, xs):
    """(log joint, grad_s, grad_z), sharing the mixture computation."""
    s = np.asarray(s, dtype=float)
    z = np.asarray(z, dtype=float)
    xs = np.asarray(xs, dtype=float)
    _check_clustering_dims(model, z, xs)
    mu = np.asarray(model.mu)
    prior_s = _norm_logpdf(s, 0.0, model.prior_s_std)
    prior_z = np.sum(_norm_logpdf(z, mu + s[..., None], model.sigma), axis=-1)
    diff = xs[:, None] - z[..., None, :]
    comp = _norm_logpdf(diff, 0.0, model.tau) + np.log(model.weights)
    lse = logsumexp(comp, axis=-1, keepdims=True)
    value = prior_s + prior_z + np.sum(lse[..., 0], axis=-1)
    resid = (z - mu - s[..., None]) / model.sigma**2
    grad_s = -s / model.prior_s_std**2 + np.sum(resid, axis=-1)
    resp = np.exp(comp - lse)
    grad_z = -resid + np.sum(resp * diff, axis=-2) / model.tau**2
    return value, grad_s, grad_z


def clustering_log_joint_grad(model: ClusteringModel, s, z, xs):
    """Gradients of :func:`clustering_log_joint` w.r.t. ``s`` and ``z``."""
    return clustering_log_joint_and_grad(model, s, z, xs)[1:]
