import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fklvi.genmodels import (
    ClusteringModel,
    ToyRotationModel,
    clustering_log_joint,
    clustering_log_joint_and_grad,
    clustering_sample_joint,
    toy_log_likelihood,
    toy_posterior_oracle,
    toy_sample_joint,
)

TOY = ToyRotationModel()


def unit(angle):
    return np.array([np.cos(angle), np.sin(angle)])


def test_toy_draws_on_unit_circle():
    draw = toy_sample_joint(TOY, np.random.default_rng(0), size=1000)
    np.testing.assert_allclose(np.linalg.norm(draw.observation, axis=1), 1.0, atol=1e-12)
    single = toy_sample_joint(TOY, np.random.default_rng(0))
    assert single.observation.shape == (2,)


def test_toy_small_sigma_recovers_theta():
    draw = toy_sample_joint(ToyRotationModel(sigma=1e-12), np.random.default_rng(1), size=100)
    angle = np.mod(np.arctan2(draw.observation[:, 1], draw.observation[:, 0]), 2 * np.pi)
    diff = np.angle(np.exp(1j * (angle - draw.latents["theta"])))
    np.testing.assert_allclose(diff, 0.0, atol=1e-9)


def test_toy_prior_uniform_chi_square():
    theta = toy_sample_joint(TOY, np.random.default_rng(2), size=100_000).latents["theta"]
    counts, _ = np.histogram(theta, bins=32, range=(0, 2 * np.pi))
    assert stats.chisquare(counts).pvalue > 1e-3


def test_toy_likelihood_peaks_at_observed_angle():
    alpha = 1.234
    grid = np.linspace(0, 2 * np.pi, 4096, endpoint=False)
    ll = toy_log_likelihood(TOY, grid, unit(alpha))
    assert abs(grid[np.argmax(ll)] - alpha) <= 2 * np.pi / 4096


def test_toy_likelihood_normalizes_over_x():
    alphas = np.linspace(0, 2 * np.pi, 8193)
    xs = np.stack([np.cos(alphas), np.sin(alphas)], axis=1)
    dens = np.exp(toy_log_likelihood(TOY, 0.7, xs))
    assert np.trapezoid(dens, alphas) == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 2 * np.pi), st.floats(0, 2 * np.pi), st.floats(-10, 10))
def test_toy_likelihood_rotation_invariance(theta, alpha, c):
    a = toy_log_likelihood(TOY, theta, unit(alpha))
    b = toy_log_likelihood(TOY, np.mod(theta + c, 2 * np.pi), unit(alpha + c))
    assert a == pytest.approx(b, abs=1e-9)


def test_toy_likelihood_rejects_off_circle():
    with pytest.raises(ValueError):
        toy_log_likelihood(TOY, 0.0, np.array([1.0, 1.0]))


def test_posterior_oracle_properties():
    x = unit(2.0)
    post = toy_posterior_oracle(TOY, x)
    h = 2 * np.pi / TOY.grid_size
    assert h * np.exp(post.log_post).sum() == pytest.approx(1.0, abs=1e-8)
    assert np.linalg.norm(post.moments) < 1
    fine = toy_posterior_oracle(ToyRotationModel(grid_size=2 * TOY.grid_size), x)
    assert np.max(np.abs(fine.moments - post.moments)) < 1e-9
    # uniform prior: posterior mode = likelihood argmax
    assert post.grid[np.argmax(post.log_post)] == pytest.approx(2.0, abs=h)


def test_posterior_moments_closed_form():
    # for a wrapped normal the mean resultant is exp(-sigma^2 / 2) in the observed direction
    post = toy_posterior_oracle(TOY, unit(0.3))
    np.testing.assert_allclose(post.moments, np.exp(-0.125) * unit(0.3), atol=1e-12)


def test_toy_seed_determinism():
    a = toy_sample_joint(TOY, np.random.default_rng(5), size=10)
    b = toy_sample_joint(TOY, np.random.default_rng(5), size=10)
    np.testing.assert_array_equal(a.observation, b.observation)
    np.testing.assert_array_equal(a.latents["theta"], b.latents["theta"])


CLU = ClusteringModel()


def test_clustering_model_validation():
    with pytest.raises(ValueError):
        ClusteringModel(weights=(0.5, 0.5))
    with pytest.raises(ValueError):
        ClusteringModel(tau=0.0)
    assert sum(CLU.weights) == pytest.approx(1.0, abs=1e-12)


def test_clustering_degenerate_noise():
    draw = clustering_sample_joint(ClusteringModel(sigma=1e-300), np.random.default_rng(0), s=0.0)
    np.testing.assert_allclose(draw.latents["z"], np.asarray(CLU.mu), rtol=0, atol=1e-290)
    assert draw.observation.shape == (CLU.n_obs,)


def test_clustering_prior_mean():
    draw = clustering_sample_joint(CLU, np.random.default_rng(1), size=10_000)
    offset = (draw.latents["z"] - draw.latents["s"][:, None]).mean(axis=0)
    np.testing.assert_allclose(offset, CLU.mu, atol=4 * CLU.sigma / 100)


def test_clustering_assignment_frequencies():
    labels = clustering_sample_joint(ClusteringModel(n_obs=100_000), np.random.default_rng(2)).latents["labels"]
    freq = np.bincount(labels, minlength=5) / labels.size
    assert np.all(np.abs(freq - 0.2) <= 4 * np.sqrt(0.2 * 0.8 / labels.size))


def test_clustering_seed_determinism():
    a = clustering_sample_joint(CLU, np.random.default_rng(3), size=2)
    b = clustering_sample_joint(CLU, np.random.default_rng(3), size=2)
    np.testing.assert_array_equal(a.observation, b.observation)


def test_label_switching_asymmetry():
    draw = clustering_sample_joint(CLU, np.random.default_rng(4), s=100.0)
    z, s, xs = draw.latents["z"], draw.latents["s"], draw.observation
    perm = z[[1, 0, 2, 3, 4]]
    assert clustering_log_joint(CLU, s, perm, xs) != pytest.approx(clustering_log_joint(CLU, s, z, xs))
    # the mixture likelihood alone is symmetric in the labels
    lik = lambda zz: clustering_log_joint(CLU, s, zz, xs) - (
        stats.norm.logpdf(s, 0, 100) + stats.norm.logpdf(zz, np.asarray(CLU.mu) + s, CLU.sigma).sum())
    assert lik(perm) == pytest.approx(lik(z), rel=1e-12)


def test_single_cluster_gaussian_chain():
    model = ClusteringModel(mu=(3.0,), sigma=0.7, tau=0.2, n_obs=50, prior_s_std=10.0)
    rng = np.random.default_rng(5)
    xs = rng.normal(5.0, 0.2, 50)
    s, z = 1.5, np.array([4.8])
    expected = (stats.norm.logpdf(s, 0, 10) + stats.norm.logpdf(z[0], 3.0 + s, 0.7)
                + stats.norm.logpdf(xs, z[0], 0.2).sum())
    assert clustering_log_joint(model, s, z, xs) == pytest.approx(expected, abs=1e-9)


def test_prior_term_decreases_away_from_mean():
    s = 0.0
    base = np.asarray(CLU.mu)
    values = []
    for r in (0.0, 0.5, 1.0, 2.0):
        z = base + r
        xs = np.repeat(z, CLU.n_obs // 5)
        values.append(clustering_log_joint(CLU, s, z, xs))
    assert np.all(np.diff(values) < 0)


def test_log_joint_gradient_matches_fd():
    draw = clustering_sample_joint(CLU, np.random.default_rng(6), s=100.0)
    rng = np.random.default_rng(7)
    s = np.array([99.0, 101.0])
    z = draw.latents["z"] + rng.normal(0, 0.05, (2, 5))
    value, gs, gz = clustering_log_joint_and_grad(CLU, s, z, draw.observation)
    np.testing.assert_array_equal(value, clustering_log_joint(CLU, s, z, draw.observation))
    eps = 1e-6
    fd_s = (clustering_log_joint(CLU, s + eps, z, draw.observation)
            - clustering_log_joint(CLU, s - eps, z, draw.observation)) / (2 * eps)
    np.testing.assert_allclose(gs, fd_s, rtol=1e-5)
    for j in range(5):
        e = np.zeros(5)
        e[j] = eps
        fd = (clustering_log_joint(CLU, s, z + e, draw.observation)
              - clustering_log_joint(CLU, s, z - e, draw.observation)) / (2 * eps)
        np.testing.assert_allclose(gz[:, j], fd, rtol=1e-5, atol=1e-3)
