import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fklvi import _bessel, expfam
from fklvi.expfam import DomainError, Family

from conftest import ALL_FAMILIES, random_eta

GM, GN, VM = Family.GAUSSIAN_MEAN, Family.GAUSSIAN_NATURAL, Family.VON_MISES

# log I0(k) and I1(k)/I0(k), I2(k)/I0(k) from mpmath at 30 digits
BESSEL_ORACLE = {
    1.0: (0.23591435850717865, 0.44638996589653451, 0.10722006820693099),
    2.0: (0.82399354148295628, 0.69777465796400798, 0.30222534203599202),
    3.0: (1.5853076218134209, 0.80998529395650453, 0.46000980402899698),
    5.0: (3.3046817758225334, 0.89338313704408522, 0.64264674518236591),
    14.9: (12.639073730400434, 0.96583748961994571, 0.87035738394363145),
    15.1: (12.832287538686563, 0.96629850295967949, 0.87201344331659874),
    40.0: (37.239786861352357, 0.98741984133635066, 0.95062900793318247),
    200.0: (196.43252935422347, 0.99749685925164353, 0.99002503140748356),
}


@pytest.mark.parametrize("k", sorted(BESSEL_ORACLE))
def test_bessel_against_high_precision_oracle(k):
    log_i0, r1, r2 = BESSEL_ORACLE[k]
    assert _bessel.log_i0(k) == pytest.approx(log_i0, rel=1e-13)
    ratios = _bessel.ratios(k)
    assert ratios[0] == pytest.approx(r1, rel=1e-12)
    assert ratios[1] == pytest.approx(r2, rel=1e-12)


def test_bessel_matches_quadrature():
    theta = np.linspace(0, 2 * np.pi, 4097)[:-1]
    for k in (0.5, 7.0, 14.99, 15.01, 25.0):
        quad = np.mean(np.exp(k * np.cos(theta) - k))
        assert np.log(quad) + k == pytest.approx(_bessel.log_i0(k), rel=1e-12)


def test_validate_examples():
    assert expfam.validate(GN, [1.0, -0.5])
    assert not expfam.validate(VM, [0.0, 0.0])
    assert expfam.validate(GM, [3.7])
    assert not expfam.validate(GN, [1.0, 0.0])
    assert not expfam.validate(GM, [np.nan])


def test_domain_errors():
    with pytest.raises(DomainError):
        expfam.log_partition(VM, [0.0, 0.0])
    with pytest.raises(DomainError):
        expfam.grad_log_partition(GN, [0.0, 1.0])
    with pytest.raises(ValueError):
        expfam.log_partition(GN, [1.0])


def test_log_partition_examples():
    assert expfam.log_partition(GM, 0.0) == 0.0
    assert expfam.log_partition(GM, 2.0) == pytest.approx(2.0)
    assert expfam.log_partition(VM, [1.0, 0.0]) == pytest.approx(np.log(1.2660658777520082), rel=1e-14)


def test_grad_log_partition_examples(rng):
    assert expfam.grad_log_partition(GM, 2.0) == pytest.approx([2.0])
    np.testing.assert_allclose(expfam.grad_log_partition(VM, [1e-12, 0.0]), [0.0, 0.0], atol=1e-11)
    np.testing.assert_allclose(expfam.grad_log_partition(GN, [1.0, -0.5]), [1.0, 2.0], rtol=1e-14)
    # Monte Carlo mean of T for N(1, 1)
    draws = expfam.sample(GN, [1.0, -0.5], 200_000, rng)
    t = expfam.sufficient_stats(GN, draws).mean(axis=0)
    np.testing.assert_allclose(t, [1.0, 2.0], atol=0.03)


def test_hessian_examples():
    np.testing.assert_array_equal(expfam.hessian_log_partition(GM, 0.3), [[1.0]])
    # closed form at (2, 0): d r / dk along the axis, r / k across it (mpmath values)
    np.testing.assert_allclose(expfam.hessian_log_partition(VM, [2.0, 0.0]),
                               [[0.16422319772120768, 0.0], [0.0, 0.34888732898200399]], rtol=1e-12)
    assert np.linalg.eigvalsh(expfam.hessian_log_partition(VM, [2.0, 0.0])).min() > 0


def _fd_jacobian(fn, eta, step=1e-5):
    eta = np.asarray(eta, dtype=float)
    cols = []
    for k in range(eta.size):
        e = np.zeros_like(eta)
        e[k] = step
        cols.append((np.asarray(fn(eta + e)) - np.asarray(fn(eta - e))) / (2 * step))
    return np.stack(cols, axis=-1)


def test_hessian_natural_matches_fd():
    eta = np.array([0.0, -0.5])
    fd = _fd_jacobian(lambda e: expfam.grad_log_partition(GN, e), eta)
    np.testing.assert_allclose(expfam.hessian_log_partition(GN, eta), fd, rtol=1e-5, atol=1e-9)


@pytest.mark.parametrize("family", ALL_FAMILIES)
def test_gradient_and_hessian_finite_differences_200_points(family):
    rng = np.random.default_rng(1)
    worst_g = worst_h = 0.0
    for eta in random_eta(family, rng, 200):
        g = expfam.grad_log_partition(family, eta)
        fd = _fd_jacobian(lambda e: expfam.log_partition(family, e), eta)
        worst_g = max(worst_g, np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-3))
        h = expfam.hessian_log_partition(family, eta)
        fdh = _fd_jacobian(lambda e: expfam.grad_log_partition(family, e), eta)
        worst_h = max(worst_h, np.max(np.abs(h - fdh)) / max(np.max(np.abs(fdh)), 1e-3))
    assert worst_g <= 1e-5
    assert worst_h <= 1e-5


@pytest.mark.parametrize("family", ALL_FAMILIES)
def test_hessian_positive_definite_200_points(family):
    rng = np.random.default_rng(2)
    eig = [np.linalg.eigvalsh(expfam.hessian_log_partition(family, e)).min()
           for e in random_eta(family, rng, 200)]
    assert min(eig) > 0


@pytest.mark.parametrize("family", ALL_FAMILIES)
def test_neg_log_density_convex_along_segments(family):
    rng = np.random.default_rng(3)
    lam = np.linspace(0.0, 1.0, 11)
    for _ in range(100):
        e1, e2 = random_eta(family, rng), random_eta(family, rng)
        if family is VM:
            theta = rng.uniform(0, 2 * np.pi, 50)
        else:
            theta = rng.normal(0, 3, 50)
        for l in lam:
            mid = -expfam.log_density(family, l * e1 + (1 - l) * e2, theta)
            chord = -l * expfam.log_density(family, e1, theta) - (1 - l) * expfam.log_density(family, e2, theta)
            # the segment may pass near the von Mises origin; it never hits it for these draws
            assert np.all(mid <= chord + 1e-12 * np.maximum(1.0, np.abs(chord)))


@pytest.mark.parametrize("family", ALL_FAMILIES)
def test_density_normalizes(family):
    rng = np.random.default_rng(4)
    for eta in random_eta(family, rng, 20):
        if family is VM:
            if np.linalg.norm(eta) > 200:
                continue
            theta = np.linspace(0.0, 2 * np.pi, 4096)
        else:
            mean, sd = expfam.gaussian_moments(family, eta)
            theta = np.linspace(mean - 10 * sd, mean + 10 * sd, 4096)
        dens = np.exp(expfam.log_density(family, eta, theta))
        assert np.trapezoid(dens, theta) == pytest.approx(1.0, abs=1e-4)


def test_log_density_examples():
    assert expfam.log_density(GM, 0.0, 0.0) == pytest.approx(-0.5 * np.log(2 * np.pi))
    theta = np.array([0.0, 1.0, 4.0])
    np.testing.assert_allclose(expfam.log_density(VM, [1e-4, 0.0], theta), -np.log(2 * np.pi), atol=2e-4)
    assert expfam.log_density(GN, [1.0, -0.5], 1.0) == pytest.approx(-0.5 * np.log(2 * np.pi), rel=1e-14)


def test_log_density_support():
    with pytest.raises(DomainError):
        expfam.log_density(VM, [1.0, 0.0], 7.0)


def test_grad_log_density_examples():
    np.testing.assert_allclose(expfam.grad_log_density_eta(GM, 0.0, 1.0), [1.0])
    np.testing.assert_allclose(expfam.grad_log_density_eta(VM, [2.0, 0.0], np.pi / 2),
                               [-0.69777465796400798, 1.0], rtol=1e-12)
    # T(theta) = grad A(eta): moment-matched point
    np.testing.assert_allclose(expfam.grad_log_density_eta(GM, 1.5, 1.5), [0.0])


@pytest.mark.parametrize("family", ALL_FAMILIES)
def test_sample_moments(family):
    rng = np.random.default_rng(5)
    n = 100_000
    for eta in random_eta(family, rng, 3):
        draws = expfam.sample(family, eta, n, rng)
        t = expfam.sufficient_stats(family, draws).reshape(n, -1).mean(axis=0)
        hess = np.atleast_2d(expfam.hessian_log_partition(family, eta))
        bound = 4 * np.sqrt(np.linalg.eigvalsh(hess).max() / n)
        assert np.all(np.abs(t - expfam.grad_log_partition(family, eta)) <= bound)


def test_sample_examples():
    rng = np.random.default_rng(6)
    assert expfam.sample(GM, 5.0, 100_000, rng).mean() == pytest.approx(5.0, abs=0.02)
    draws = expfam.sample(VM, [3.0, 0.0], 100_000, rng)
    assert np.all((draws >= 0) & (draws < 2 * np.pi))
    t = expfam.sufficient_stats(VM, draws).mean(axis=0)
    np.testing.assert_allclose(t, expfam.grad_log_partition(VM, [3.0, 0.0]), atol=0.02)


def test_sample_deterministic():
    a = expfam.sample(VM, [0.3, 2.0], 1000, np.random.default_rng(9))
    b = expfam.sample(VM, [0.3, 2.0], 1000, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def test_mode_examples():
    assert expfam.mode(VM, [0.0, 1.0]) == pytest.approx(np.pi / 2)
    assert expfam.mode(GN, [2.0, -1.0]) == pytest.approx(1.0)
    assert expfam.mode(VM, [-1.0, 0.0]) == pytest.approx(np.pi)
    assert expfam.mode(GM, [100.0]) == pytest.approx(100.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.05, 50.0), st.floats(0.0, 2 * np.pi), st.floats(0.0, 2 * np.pi))
def test_von_mises_rotation_equivariance(kappa, mu, shift):
    eta = kappa * np.array([np.cos(mu), np.sin(mu)])
    eta_rot = kappa * np.array([np.cos(mu + shift), np.sin(mu + shift)])
    theta = np.linspace(0, 2 * np.pi, 17)[:-1]
    moved = np.mod(theta + shift, 2 * np.pi)
    np.testing.assert_allclose(expfam.log_density(VM, eta, theta), expfam.log_density(VM, eta_rot, moved),
                               atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.floats(-10, 10), st.floats(0.05, 10))
def test_gaussian_natural_roundtrip(mean, var):
    eta = np.array([mean / var, -0.5 / var])
    m, sd = expfam.gaussian_moments(GN, eta)
    assert m == pytest.approx(mean, rel=1e-10, abs=1e-10)
    assert sd * sd == pytest.approx(var, rel=1e-10)
