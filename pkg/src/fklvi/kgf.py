"""Kernel gradient flows on a finite grid, and the moment-matched optimum.

The functional objective is discretized on N grid points with uniform
weights. Flow state lives in raw network-output space; natural parameters are
obtained through the same :class:`~fklvi.net.OutputMap` used in training and
the map's Jacobian enters the flow through its vjp.

Three flows are provided: a fixed-kernel Euler flow (limiting kernel or
empirical kernel at initialization) and the parameter-space flow of a finite
two-layer network, whose induced function values follow the evolving kernel.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from fklvi import expfam
from fklvi.expfam import DomainError, Family
from fklvi.net import OutputMap, TwoLayerNet


class NoSolutionError(ValueError):
    """Raised when a moment vector lies outside the mean-parameter space."""


class StepSizeError(FloatingPointError):
    """Raised when an Euler step leaves the natural parameter space."""


# --------------------------------------------------------------------------
# Pointwise loss


def loss_value(family: Family, eta, m):
    """A(eta) - eta . m, the pointwise loss up to an eta-independent constant."""
    eta = np.asarray(eta, dtype=float)
    m = np.asarray(m, dtype=float)
    return expfam.log_partition(family, eta) - np.sum(eta * m.reshape(eta.shape), axis=-1)


def loss_grad(family: Family, eta, m):
    eta = np.asarray(eta, dtype=float)
    return expfam.grad_log_partition(family, eta) - np.asarray(m, dtype=float).reshape(eta.shape)


def _in_mean_space(family, m):
    if family is Family.GAUSSIAN_MEAN:
        return bool(np.all(np.isfinite(m)))
    if family is Family.GAUSSIAN_NATURAL:
        return bool(np.isfinite(m).all() and m[1] > m[0] ** 2)
    return bool(np.isfinite(m).all() and np.hypot(m[0], m[1]) < 1.0)


def _initial_guess(family, m):
    if family is Family.GAUSSIAN_MEAN:
        return m.copy()
    if family is Family.GAUSSIAN_NATURAL:
        var = m[1] - m[0] ** 2
        return np.array([m[0] / var, -0.5 / var])
    # Inverse of the Bessel ratio, Banerjee et al. style approximation for kappa.
    r = np.hypot(m[0], m[1])
    kappa = r * (2.0 - r * r) / (1.0 - r * r)
    return max(kappa, 1e-3) * m / max(r, 1e-300)


def moment_match_solve(family: Family, m, tol=1e-10, max_iter=100):
    """Natural parameter eta* with grad A(eta*) = m, by damped Newton.

    Each Newton direction uses the covariance Hessian from :mod:`expfam`;
    the step is halved until it stays in the domain and decreases the
    strictly convex objective A(eta) - eta . m.
    """
    m = np.atleast_1d(np.asarray(m, dtype=float))
    if m.shape != (family.q,):
        raise ValueError(f"{family.value} moments have length {family.q}")
    if not _in_mean_space(family, m):
        raise NoSolutionError(f"{m} is outside the {family.value} mean-parameter space")
    if family is Family.GAUSSIAN_MEAN:
        return m.copy()
    eta = _initial_guess(family, m)
    for _ in range(max_iter):
        g = loss_grad(family, eta, m)
        if np.linalg.norm(g) <= tol:
            return eta
        step = np.linalg.solve(expfam.hessian_log_partition(family, eta), g)
        value = loss_value(family, eta, m)
        t = 1.0
        while t > 1e-12:
            cand = eta - t * step
            if expfam.validate(family, cand) and loss_value(family, cand, m) <= value + 1e-14:
                break
            t *= 0.5
        eta = cand
    g = loss_grad(family, eta, m)
    if np.linalg.norm(g) > tol:
        raise NoSolutionError(f"Newton did not converge: residual {np.linalg.norm(g):.3e}")
    return eta


# --------------------------------------------------------------------------
# Grid state


def toy_grid(n, seed):
    """N i.i.d. draws from the toy observation marginal (uniform on the circle)."""
    angles = np.random.default_rng(seed).uniform(0.0, 2.0 * np.pi, size=n)
    return np.stack([np.cos(angles), np.sin(angles)], axis=1)


@dataclass
class GridFunction:
    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.grid = np.atleast_2d(np.asarray(self.grid, dtype=float))
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.shape[0] != self.grid.shape[0]:
            raise ValueError("values length must match the grid")

    @property
    def n(self):
        return self.grid.shape[0]

    @classmethod
    def zeros(cls, grid, q):
        return cls(grid, np.zeros((len(grid), q)))


def optimum(output_map: OutputMap, grid, moments) -> GridFunction:
    """Pointwise moment-matched optimum f*, expressed in raw output space."""
    eta = np.stack([moment_match_solve(output_map.family, m) for m in np.atleast_2d(moments)])
    return GridFunction(grid, output_map.inverse(eta))


def empirical_loss(output_map: OutputMap, values, moments):
    """L_hat = (1/N) sum_n loss_value(map(f(x_n)), m(x_n))."""
    eta = output_map.apply(values)
    return float(np.mean(loss_value(output_map.family, eta, np.asarray(moments).reshape(eta.shape))))


def _raw_loss_grad(output_map, values, moments):
    eta = output_map.apply(values)
    if not expfam.validate(output_map.family, eta):
        raise StepSizeError("flow state maps outside the natural parameter space")
    g = loss_grad(output_map.family, eta, np.asarray(moments).reshape(eta.shape))
    return output_map.vjp(values, g)


@dataclass(frozen=True)
class FlowSpec:
    h: float = 0.01
    T: float = 10.0
    record_stride: int = 100

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("step size h must be positive")
        if self.record_stride < 1:
            raise ValueError("record_stride must be at least 1")
        n = self.T / self.h
        if self.T < 0 or abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValueError(f"T / h must be a nonnegative integer, got {n}")

    @property
    def n_steps(self):
        return int(round(self.T / self.h))


@dataclass
class Trajectory:
    """Recorded flow states. ``step_losses`` holds L_hat after every step."""

    grid: np.ndarray
    h: float
    steps: np.ndarray
    values: np.ndarray
    step_losses: np.ndarray
    max_grad_norm: float = 0.0
    step_changes: np.ndarray = field(default=None)

    def at(self, i) -> GridFunction:
        return GridFunction(self.grid, self.values[i])

    @property
    def times(self):
        return self.steps * self.h

    @property
    def losses(self):
        return self.step_losses[self.steps]


def _integrate(f0: GridFunction, moments, output_map, spec: FlowSpec, velocity, on_record=None):
    """Shared Euler driver. ``velocity(values, g, h)`` returns the next state; g is the raw loss gradient."""
    values = f0.values.copy()
    moments = np.asarray(moments, dtype=float).reshape(values.shape[0], -1)
    steps, recorded = [0], [values.copy()]
    losses = [empirical_loss(output_map, values, moments)]
    changes = []
    max_g = 0.0
    for k in range(spec.n_steps):
        g = _raw_loss_grad(output_map, values, moments)
        max_g = max(max_g, float(np.max(np.linalg.norm(g, axis=-1))))
        new = velocity(values, g, spec.h)
        eta = output_map.apply(new)
        if not np.all(np.isfinite(new)) or not expfam.validate(output_map.family, eta):
            raise StepSizeError(
                f"Euler step {k + 1} with h={spec.h} produced invalid natural parameters "
                f"(max |f| = {np.nanmax(np.abs(new)):.3e}); reduce h")
        changes.append(float(np.max(np.abs(new - values))))
        values = new
        losses.append(empirical_loss(output_map, values, moments))
        if (k + 1) % spec.record_stride == 0 or k + 1 == spec.n_steps:
            steps.append(k + 1)
            recorded.append(values.copy())
            if on_record is not None:
                on_record()
    return Trajectory(f0.grid.copy(), spec.h, np.array(steps), np.stack(recorded),
                      np.array(losses), max_g, np.array(changes))


def euler_flow(f0: GridFunction, moments, kernel, output_map: OutputMap, spec: FlowSpec) -> Trajectory:
    """Explicit Euler for df(x_n)/dt = -(1/N) sum_m K(x_n, x_m) l'(x_m) with a fixed kernel."""
    n, q = f0.values.shape
    if kernel.q != q:
        raise ValueError("kernel output dimension does not match the grid function")
    G = kernel.gram(f0.grid)

    def velocity(values, g, h):
        return values - h * (G @ g.reshape(-1)).reshape(n, q) / n

    return _integrate(f0, moments, output_map, spec, velocity)


def param_flow(net: TwoLayerNet, moments, grid, output_map: OutputMap, spec: FlowSpec):
    """Full-batch Euler descent on the parameters of ``net`` (a copy is trained).

    Returns the trajectory of induced grid values and the list of network
    snapshots at the recorded times.
    """
    net = net.copy()
    grid = np.atleast_2d(grid)
    snapshots = [net.copy()]

    def velocity(values, g, h):
        net.phi -= h * net.backprop(grid, g)
        return net.forward(grid)

    f0 = GridFunction(grid, net.forward(grid))
    traj = _integrate(f0, moments, output_map, spec, velocity,
                      on_record=lambda: snapshots.append(net.copy()))
    return traj, snapshots


def find_stable_step(run, h0, max_halvings=20, slack=1e-8):
    """Halve h until ``run(h)`` yields a trajectory with per-step descent within ``slack``."""
    h = h0
    for _ in range(max_halvings):
        try:
            traj = run(h)
            if np.all(np.diff(traj.step_losses) <= slack):
                return h, traj
        except StepSizeError:
            pass
        h /= 2.0
    raise StepSizeError(f"no descending step size found down to h={h:.3e}")


# --------------------------------------------------------------------------
# Reports


@dataclass
class LyapunovReport:
    times: np.ndarray
    suboptimality: np.ndarray
    envelope: np.ndarray
    delta0: float
    monotone: bool
    envelope_ok: bool
    max_increase: float
    jitter_used: bool

    def rows(self):
        for t, s, e in zip(self.times, self.suboptimality, self.envelope):
            yield t, s, e


def rkhs_energy(kernel, f0: GridFunction, f_star: GridFunction, jitter=1e-10):
    """(Delta_0, jitter_used) with Delta_0 = v^T G^{-1} v / 2 and v = f0 - f*."""
    G = kernel.gram(f0.grid)
    G = 0.5 * (G + G.T)
    v = (f0.values - f_star.values).reshape(-1)
    used = False
    try:
        factor = scipy.linalg.cho_factor(G)
    except np.linalg.LinAlgError:
        used = True
        try:
            factor = scipy.linalg.cho_factor(G + jitter * np.eye(len(G)))
        except np.linalg.LinAlgError as exc:
            raise DomainError("block Gram matrix is not positive definite after jitter") from exc
    return 0.5 * float(v @ scipy.linalg.cho_solve(factor, v)), used


def lyapunov_report(traj: Trajectory, f_star: GridFunction, moments, kernel, output_map,
                    tol=0.1, t_min=1.0, slack=1e-8) -> LyapunovReport:
    """Suboptimality against the Delta_0 / t envelope along a fixed-kernel flow.

    The envelope check covers every step, not only the recorded times.
    """
    if not np.allclose(traj.grid, f_star.grid):
        raise ValueError("trajectory and optimum live on different grids")
    delta0, used = rkhs_energy(kernel, traj.at(0), f_star)
    l_star = empirical_loss(output_map, f_star.values, moments)
    t_all = traj.h * np.arange(len(traj.step_losses))
    sub_all = traj.step_losses - l_star
    mask = t_all >= t_min
    env_all = np.full_like(sub_all, np.inf)
    env_all[t_all > 0] = delta0 / t_all[t_all > 0]
    envelope_ok = bool(np.all(sub_all[mask] <= env_all[mask] * (1.0 + tol) + 1e-12))
    inc = np.diff(traj.step_losses)
    max_inc = float(inc.max()) if inc.size else 0.0
    rec_env = np.where(traj.times > 0, delta0 / np.where(traj.times > 0, traj.times, 1.0), np.inf)
    return LyapunovReport(traj.times.copy(), traj.losses - l_star, rec_env, delta0,
                          max_inc <= slack, envelope_ok, max_inc, used)


def trajectory_distance(traj_a: Trajectory, traj_b: Trajectory):
    """L2(P_hat) distance between the two flows at each recorded time."""
    if traj_a.grid.shape != traj_b.grid.shape or not np.array_equal(traj_a.grid, traj_b.grid):
        raise ValueError("trajectories are on different grids")
    if not np.array_equal(traj_a.steps, traj_b.steps) or traj_a.h != traj_b.h:
        raise ValueError("trajectories have different recording times")
    diff = traj_a.values - traj_b.values
    return np.sqrt(np.mean(np.sum(diff * diff, axis=-1), axis=-1))
