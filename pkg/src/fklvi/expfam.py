"""Exponential-family variational distributions in natural parameterization.

Three scalar families are supported:

``GAUSSIAN_MEAN``
    N(eta, 1); T(theta) = theta, h(theta) = exp(-theta^2 / 2) / sqrt(2 pi),
    A(eta) = eta^2 / 2.
``GAUSSIAN_NATURAL``
    T(theta) = (theta, theta^2), h(theta) = 1 / sqrt(2 pi), natural space
    {eta_2 < 0}, A(eta) = -eta_1^2 / (4 eta_2) - log(-2 eta_2) / 2.
``VON_MISES``
    T(theta) = (cos theta, sin theta) on [0, 2 pi], h(theta) = 1 / (2 pi),
    natural space R^2 minus the origin, A(eta) = log I0(|eta|).

All functions broadcast over leading batch dimensions: ``eta`` has shape
``(..., q)`` and ``theta`` has the matching shape ``(...)``. Log densities are
absolute (base measure included), not up to a constant.
"""

import enum

import numpy as np

from fklvi import _bessel

LOG_2PI = float(np.log(2.0 * np.pi))
TWO_PI = 2.0 * np.pi


class DomainError(ValueError):
    """Raised when a parameter or point lies outside a family's domain."""


class Family(enum.Enum):
    GAUSSIAN_MEAN = "gaussian_mean"
    GAUSSIAN_NATURAL = "gaussian_natural"
    VON_MISES = "von_mises"

    @property
    def q(self) -> int:
        return 1 if self is Family.GAUSSIAN_MEAN else 2

    @property
    def reparameterizable(self) -> bool:
        return self is not Family.VON_MISES


def _as_eta(family, eta):
    eta = np.asarray(eta, dtype=float)
    if eta.ndim == 0 and family.q == 1:
        eta = eta.reshape(1)
    if eta.ndim == 0 or eta.shape[-1] != family.q:
        raise ValueError(
            f"{family.value} expects natural parameters of length {family.q}, "
            f"got shape {eta.shape}"
        )
    return eta


def in_domain(family: Family, eta) -> np.ndarray:
    """Elementwise membership of ``eta`` in the natural parameter space."""
    eta = _as_eta(family, eta)
    finite = np.all(np.isfinite(eta), axis=-1)
    if family is Family.GAUSSIAN_MEAN:
        return finite
    if family is Family.GAUSSIAN_NATURAL:
        return finite & (eta[..., 1] < 0)
    return finite & (np.hypot(eta[..., 0], eta[..., 1]) > 0)


def validate(family: Family, eta) -> bool:
    """True iff every natural parameter vector in ``eta`` lies in the domain."""
    return bool(np.all(in_domain(family, eta)))


def _checked(family, eta):
    eta = _as_eta(family, eta)
    if not validate(family, eta):
        raise DomainError(f"natural parameters outside the {family.value} domain: {eta}")
    return eta


def sufficient_stats(family: Family, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if family is Family.GAUSSIAN_MEAN:
        return theta[..., None]
    if family is Family.GAUSSIAN_NATURAL:
        return np.stack([theta, theta * theta], axis=-1)
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def _log_base(family, theta):
    if family is Family.GAUSSIAN_MEAN:
        return -0.5 * theta * theta - 0.5 * LOG_2PI
    if family is Family.GAUSSIAN_NATURAL:
        return np.full_like(theta, -0.5 * LOG_2PI)
    return np.full_like(theta, -LOG_2PI)


def log_partition(family: Family, eta):
    eta = _checked(family, eta)
    if family is Family.GAUSSIAN_MEAN:
        return 0.5 * eta[..., 0] ** 2
    if family is Family.GAUSSIAN_NATURAL:
        e1, e2 = eta[..., 0], eta[..., 1]
        return -(e1 * e1) / (4.0 * e2) - 0.5 * np.log(-2.0 * e2)
    return _bessel.log_i0(np.hypot(eta[..., 0], eta[..., 1]))


def grad_log_partition(family: Family, eta) -> np.ndarray:
    """Mean of the sufficient statistics, E[T(theta)] = grad A(eta)."""
    eta = _checked(family, eta)
    if family is Family.GAUSSIAN_MEAN:
        return eta.copy()
    if family is Family.GAUSSIAN_NATURAL:
        e1, e2 = eta[..., 0], eta[..., 1]
        return np.stack([-e1 / (2.0 * e2), e1 * e1 / (4.0 * e2 * e2) - 0.5 / e2], axis=-1)
    kappa = np.hypot(eta[..., 0], eta[..., 1])
    r1, _ = _bessel.ratios(kappa)
    return (r1 / kappa)[..., None] * eta


def hessian_log_partition(family: Family, eta) -> np.ndarray:
    """Covariance of the sufficient statistics, shape ``(..., q, q)``."""
    eta = _checked(family, eta)
    if family is Family.GAUSSIAN_MEAN:
        return np.ones(eta.shape + (1,))
    if family is Family.GAUSSIAN_NATURAL:
        e1, e2 = eta[..., 0], eta[..., 1]
        h11 = -0.5 / e2
        h12 = e1 / (2.0 * e2 * e2)
        h22 = -(e1 * e1) / (2.0 * e2**3) + 0.5 / (e2 * e2)
        return np.stack([np.stack([h11, h12], -1), np.stack([h12, h22], -1)], -2)
    kappa = np.hypot(eta[..., 0], eta[..., 1])
    r1, r2 = _bessel.ratios(kappa)
    radial = 0.5 * (1.0 + r2) - r1 * r1
    tangential = r1 / kappa
    u = eta / kappa[..., None]
    uu = u[..., :, None] * u[..., None, :]
    eye = np.eye(2)
    return radial[..., None, None] * uu + tangential[..., None, None] * (eye - uu)


def _check_support(family, theta):
    if family is Family.VON_MISES and np.any((theta < 0) | (theta > TWO_PI)):
        raise DomainError("von Mises support is [0, 2 pi]")


def log_density(family: Family, eta, theta):
    """log q(theta; eta) = log h(theta) + eta . T(theta) - A(eta)."""
    eta = _checked(family, eta)
    theta = np.asarray(theta, dtype=float)
    _check_support(family, theta)
    stats = sufficient_stats(family, theta)
    return _log_base(family, theta) + np.sum(eta * stats, axis=-1) - log_partition(family, eta)


def grad_log_density_eta(family: Family, eta, theta) -> np.ndarray:
    """Gradient in eta of log q(theta; eta), i.e. T(theta) - grad A(eta)."""
    eta = _checked(family, eta)
    theta = np.asarray(theta, dtype=float)
    _check_support(family, theta)
    return sufficient_stats(family, theta) - grad_log_partition(family, eta)


def gaussian_moments(family: Family, eta):
    """Return (mean, std) for the two Gaussian families."""
    eta = _checked(family, eta)
    if family is Family.GAUSSIAN_MEAN:
        return eta[..., 0], np.ones(eta.shape[:-1])
    if family is Family.GAUSSIAN_NATURAL:
        e1, e2 = eta[..., 0], eta[..., 1]
        return -e1 / (2.0 * e2), np.sqrt(-0.5 / e2)
    raise DomainError("von Mises is not a location-scale family")


def mode(family: Family, eta):
    eta = _checked(family, eta)
    if family is Family.VON_MISES:
        return np.mod(np.arctan2(eta[..., 1], eta[..., 0]), TWO_PI)
    return gaussian_moments(family, eta)[0]


def _sample_von_mises(kappa, mu, n, rng):
    # Best & Fisher (1979) rejection sampler; rho written without cancellation.
    s = np.sqrt(1.0 + 4.0 * kappa * kappa)
    tau = 1.0 + s
    rho = 2.0 * kappa * tau / ((s + 1.0) * (tau + np.sqrt(2.0 * tau)))
    r = (1.0 + rho * rho) / (2.0 * rho)
    out = np.empty(n)
    filled = 0
    while filled < n:
        m = max(2 * (n - filled), 16)
        u1, u2, u3 = rng.random((3, m))
        z = np.cos(np.pi * u1)
        f = (1.0 + r * z) / (r + z)
        c = kappa * (r - f)
        accept = (c * (2.0 - c) - u2 > 0) | (np.log(c / u2) + 1.0 - c >= 0)
        draws = np.sign(u3[accept] - 0.5) * np.arccos(np.clip(f[accept], -1.0, 1.0))
        take = min(draws.size, n - filled)
        out[filled : filled + take] = draws[:take]
        filled += take
    return np.mod(mu + out, TWO_PI)


def sample(family: Family, eta, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` independent samples from Q(theta; eta) for a single ``eta``."""
    eta = _checked(family, eta)
    if eta.ndim != 1:
        raise ValueError("sample takes a single natural parameter vector")
    if n < 1:
        raise ValueError("n must be at least 1")
    if family is Family.VON_MISES:
        kappa = float(np.hypot(eta[0], eta[1]))
        return _sample_von_mises(kappa, float(np.arctan2(eta[1], eta[0])), n, rng)
    mean, std = gaussian_moments(family, eta)
    return mean + std * rng.standard_normal(n)
