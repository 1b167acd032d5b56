"""Training objectives and the optimization loop.

The expected forward KL is trained from joint samples only: the gradient
estimator never touches a likelihood, just ``-grad log q(theta_i; f(x_i))``.
The ELBO and IWBO baselines need the clustering model's log joint and use
reparameterized Gaussian samples.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from fklvi import expfam
from fklvi.expfam import Family
from fklvi.genmodels import clustering_log_joint_and_grad

log = logging.getLogger(__name__)


class TrainingAborted(FloatingPointError):
    """Raised when a gradient or objective becomes non-finite."""

    def __init__(self, message, last_good=None, step=None):
        super().__init__(message)
        self.last_good = last_good
        self.step = step


# --------------------------------------------------------------------------
# Forward KL


def fkl_loss_and_grad(encoder, output_map, theta, x):
    """Batch mean of -log q(theta_i; map(f(x_i))) and its gradient in phi.

    ``theta`` has shape ``(B,)`` for a scalar latent or ``(B, k)`` for a
    mean-field product of k coordinates; the encoder then emits ``k * q``
    raw outputs per observation.
    """
    family = output_map.family
    theta = np.asarray(theta, dtype=float)
    batch = theta.shape[0]
    raw = encoder.forward(x)
    raw_f = raw.reshape(theta.shape + (family.q,))
    eta = output_map.apply(raw_f)
    assert expfam.validate(family, eta), "output map produced invalid natural parameters"
    logq = expfam.log_density(family, eta, theta)
    g_eta = -expfam.grad_log_density_eta(family, eta, theta)
    g_raw = output_map.vjp(raw_f, g_eta).reshape(batch, -1)
    loss = float(np.mean(logq.reshape(batch, -1).sum(axis=1)) * -1.0)
    return loss, encoder.backprop(x, g_raw)


def fkl_gradient_estimate(encoder, output_map, sampler, batch_size, rng):
    """Unbiased estimate of the expected-forward-KL gradient.

    ``sampler(rng, B) -> (theta, x)`` draws B joint samples by ancestral
    sampling. Returns the flat gradient.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    theta, x = sampler(rng, batch_size)
    return fkl_loss_and_grad(encoder, output_map, theta, x)[1]


# --------------------------------------------------------------------------
# ELBO / IWBO for the clustering model


def _location_scale(family, eta):
    if not family.reparameterizable:
        raise ValueError(f"{family.value} is not reparameterizable; use a Gaussian family")
    return expfam.gaussian_moments(family, eta)


def _location_scale_vjp(family, eta, g_mean, g_log_std):
    """Pull gradients w.r.t. (mean, log std) back to eta."""
    if family is Family.GAUSSIAN_MEAN:
        return g_mean[..., None]
    e1, e2 = eta[..., 0], eta[..., 1]
    # mean = -e1 / (2 e2); log std = -log(-2 e2) / 2
    d_e1 = g_mean * (-0.5 / e2)
    d_e2 = g_mean * (e1 / (2.0 * e2 * e2)) + g_log_std * (-0.5 / e2)
    return np.stack([d_e1, d_e2], axis=-1)


@dataclass
class BoundEstimate:
    value: float
    grad_eta_s: np.ndarray
    grad_eta_z: np.ndarray
    se: float


def iwbo_estimate(model, family_s, eta_s, family_z, eta_z, xs, K, n_mc, rng):
    """Importance-weighted bound with K samples, averaged over ``n_mc`` draws.

    Variational factors are q(s; eta_s) and prod_j q(z_j; eta_z[j]).
    Returns the estimate, its reparameterized gradient w.r.t. both natural
    parameter blocks, and the Monte Carlo standard error. K = 1 is the ELBO.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    if n_mc < 1:
        raise ValueError("n_mc must be at least 1")
    eta_s = np.asarray(eta_s, dtype=float)
    eta_z = np.asarray(eta_z, dtype=float)
    mean_s, std_s = _location_scale(family_s, eta_s)
    mean_z, std_z = _location_scale(family_z, eta_z)
    eps_s = rng.standard_normal((n_mc, K))
    eps_z = rng.standard_normal((n_mc, K, model.d))
    s = mean_s + std_s * eps_s
    z = mean_z + std_z * eps_z
    # log q at a reparameterized sample depends on eta only through -log std.
    log_q = (expfam.log_density(family_s, eta_s, s)
             + np.sum(expfam.log_density(family_z, eta_z, z), axis=-1))
    log_joint, gs, gz = clustering_log_joint_and_grad(model, s, z, xs)
    log_w = log_joint - log_q
    bounds = logsumexp(log_w, axis=1) - np.log(K)
    wbar = np.exp(log_w - logsumexp(log_w, axis=1, keepdims=True))

    # d log w / d mean = d log p / d sample; d log w / d log std = sample grad * std * eps + 1
    g_mean_s = np.sum(wbar * gs, axis=1).mean(axis=0)
    g_lstd_s = np.sum(wbar * (gs * std_s * eps_s + 1.0), axis=1).mean(axis=0)
    g_mean_z = np.sum(wbar[..., None] * gz, axis=1).mean(axis=0)
    g_lstd_z = np.sum(wbar[..., None] * (gz * std_z * eps_z + 1.0), axis=1).mean(axis=0)
    grad_s = _location_scale_vjp(family_s, eta_s, g_mean_s, g_lstd_s)
    grad_z = _location_scale_vjp(family_z, eta_z, g_mean_z, g_lstd_z)
    se = float(np.std(bounds, ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else float("nan")
    return BoundEstimate(float(np.mean(bounds)), grad_s, grad_z, se)


def elbo_estimate(model, family_s, eta_s, family_z, eta_z, xs, n_mc, rng):
    return iwbo_estimate(model, family_s, eta_s, family_z, eta_z, xs, 1, n_mc, rng)


# --------------------------------------------------------------------------
# Optimizer


def lr_schedule(step_index, total_steps):
    """1 / (1 + i / I0) with I0 = total_steps / 10."""
    decay = max(total_steps / 10.0, 1.0)
    return 1.0 / (1.0 + step_index / decay)


@dataclass
class AdamState:
    n_params: int
    base_lr: float = 1e-4
    total_steps: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = None
    v: np.ndarray = None
    t: int = 0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.m is None:
            self.m = np.zeros(self.n_params)
        if self.v is None:
            self.v = np.zeros(self.n_params)


def adam_step(state: AdamState, params, grad, step_index):
    """In-place bias-corrected Adam update of ``params``; returns ``params``."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    if not np.all(np.isfinite(grad)):
        bad = np.flatnonzero(~np.isfinite(grad))
        raise TrainingAborted(
            f"non-finite gradient at step {step_index} in {bad.size} coordinates "
            f"(first index {bad[0]})", step=step_index)
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad * grad
    lr = state.base_lr * lr_schedule(step_index, state.total_steps)
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    params -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


@dataclass
class SGDState:
    """Plain stochastic gradient descent with the same decay schedule as Adam."""

    n_params: int
    base_lr: float = 0.1
    total_steps: int = 1
    t: int = 0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")


def sgd_step(state: SGDState, params, grad, step_index):
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.shape:
        raise ValueError("parameter and gradient shapes differ")
    if not np.all(np.isfinite(grad)):
        raise TrainingAborted(f"non-finite gradient at step {step_index}", step=step_index)
    state.t += 1
    params -= state.base_lr * lr_schedule(step_index, state.total_steps) * grad
    return params


OPTIMIZERS = {"adam": (AdamState, adam_step), "sgd": (SGDState, sgd_step)}


# --------------------------------------------------------------------------
# Training loop


@dataclass
class TrainTrace:
    steps: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    snapshots: list = field(default_factory=list)

    def record(self, step, objective, metrics, snapshot=None):
        if self.steps and step <= self.steps[-1]:
            raise ValueError("trace steps must be strictly increasing")
        self.steps.append(step)
        self.objective.append(objective)
        for name, value in metrics.items():
            self.metrics.setdefault(name, []).append(value)
        if snapshot is not None:
            self.snapshots.append(snapshot)

    def rows(self):
        names = sorted(self.metrics)
        for i, step in enumerate(self.steps):
            yield [step, self.objective[i]] + [self.metrics[n][i] for n in names]

    def columns(self):
        return ["step", "objective"] + sorted(self.metrics)


@dataclass
class ForwardKLConfig:
    batch_size: int = 16
    steps: int = 20_000
    base_lr: float = 1e-4
    record_every: int = 500
    optimizer: str = "adam"

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {sorted(OPTIMIZERS)}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.steps < 0 or self.record_every < 1:
            raise ValueError("steps must be >= 0 and record_every >= 1")


def train(encoder, objective, steps, base_lr, rng, record_every=500, hooks=None,
          keep_snapshots=False, optimizer="adam"):
    """Minimize a stochastic objective with Adam (or plain SGD).

    ``objective(encoder, rng) -> (value, flat_grad)``. ``hooks`` maps metric
    names to ``callable(encoder) -> float`` and is evaluated at step 0, every
    ``record_every`` steps, and at the final step. Snapshots (flat parameter
    copies) are kept at the same points when ``keep_snapshots`` is set.
    """
    hooks = hooks or {}
    trace = TrainTrace()
    state_cls, step_fn = OPTIMIZERS[optimizer]
    state = state_cls(encoder.n_params, base_lr=base_lr, total_steps=max(steps, 1))

    def _record(step, value):
        metrics = {name: float(fn(encoder)) for name, fn in hooks.items()}
        trace.record(step, value, metrics, encoder.phi.copy() if keep_snapshots else None)

    _record(0, float("nan"))
    last_good = encoder.phi.copy()
    for i in range(steps):
        value, grad = objective(encoder, rng)
        if not np.isfinite(value):
            encoder.phi[:] = last_good
            raise TrainingAborted(f"objective became {value} at step {i}", last_good, i)
        step_fn(state, encoder.phi, grad, i)
        step = i + 1
        if step % record_every == 0 or step == steps:
            last_good = encoder.phi.copy()
            _record(step, value)
    return trace


def forward_kl_objective(output_map, sampler, batch_size):
    """Objective callable for :func:`train` built from a joint sampler."""

    def objective(encoder, rng):
        theta, x = sampler(rng, batch_size)
        return fkl_loss_and_grad(encoder, output_map, theta, x)

    return objective


def train_forward_kl(encoder, output_map, sampler, config: ForwardKLConfig, rng, hooks=None,
                     keep_snapshots=False):
    objective = forward_kl_objective(output_map, sampler, config.batch_size)
    return train(encoder, objective, config.steps, config.base_lr, rng,
                 record_every=config.record_every, hooks=hooks, keep_snapshots=keep_snapshots,
                 optimizer=config.optimizer)
