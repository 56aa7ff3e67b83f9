"""Tests for the exponential-family factor algebra."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stmmap.distributions import (
    GaussianCanonical,
    GaussianMoment,
    InverseGammaFactor,
    NotADistribution,
    SingularMarginalization,
    UTParams,
    gauss_divide,
    gauss_marginalize,
    gauss_product,
    ig_divide,
    ig_expected_deviation,
    ig_product,
    kl_gaussian,
    unscented_transform,
)


def random_gaussian(rng, labels):
    n = len(labels)
    a = rng.normal(size=(n, n))
    sigma = a @ a.T + n * np.eye(n)
    mu = rng.normal(size=n)
    return GaussianMoment(mu, sigma).to_canonical(labels)


class TestGaussianCanonical:
    def test_vacuous_is_zero(self):
        g = GaussianCanonical.vacuous(("a", "b"))
        assert g.is_vacuous()
        assert not g.is_normalizable()

    def test_symmetrization_on_construction(self):
        omega = np.array([[2.0, 0.1], [0.1 + 1e-13, 2.0]])
        g = GaussianCanonical(np.zeros(2), omega, ("a", "b"))
        assert np.array_equal(g.omega, g.omega.T)

    def test_moment_round_trip(self):
        rng = np.random.default_rng(0)
        g = random_gaussian(rng, ("a", "b", "c"))
        mom = g.to_moments()
        back = mom.to_canonical(g.labels).to_moments()
        np.testing.assert_allclose(back.mu, mom.mu, atol=1e-9)
        np.testing.assert_allclose(back.sigma, mom.sigma, atol=1e-9)


class TestGaussProduct:
    def test_vacuous_identity(self):
        rng = np.random.default_rng(1)
        g = random_gaussian(rng, ("a", "b"))
        out = gauss_product(GaussianCanonical.vacuous(("a", "b")), g)
        np.testing.assert_array_equal(out.xi, g.xi)
        np.testing.assert_array_equal(out.omega, g.omega)

    def test_1d_unit_variance_pair(self):
        # N(0,1) * N(2,1) has canonical parameters xi=2, omega=2
        g1 = GaussianMoment([0.0], [[1.0]]).to_canonical(("x",))
        g2 = GaussianMoment([2.0], [[1.0]]).to_canonical(("x",))
        out = gauss_product(g1, g2)
        np.testing.assert_allclose(out.xi, [2.0])
        np.testing.assert_allclose(out.omega, [[2.0]])
        mom = out.to_moments()
        np.testing.assert_allclose(mom.mu, [1.0])
        np.testing.assert_allclose(mom.sigma, [[0.5]])

    def test_density_product_on_grid(self):
        # product equals pointwise density product up to a constant
        rng = np.random.default_rng(2)
        g1 = random_gaussian(rng, ("a", "b", "c"))
        g2 = random_gaussian(rng, ("a", "b", "c"))
        prod = gauss_product(g1, g2)
        pts = np.stack(
            np.meshgrid(*[np.linspace(-1, 1, 5)] * 3), axis=-1
        ).reshape(-1, 3)
        log_ratio = [
            g1.log_density(x) + g2.log_density(x) - prod.log_density(x)
            for x in pts
        ]
        assert np.ptp(log_ratio) < 1e-9

    def test_label_union(self):
        g1 = GaussianMoment([1.0], [[1.0]]).to_canonical(("a",))
        g2 = GaussianMoment([2.0], [[1.0]]).to_canonical(("b",))
        out = gauss_product(g1, g2)
        assert set(out.labels) == {"a", "b"}


class TestGaussDivide:
    def test_self_division_vacuous(self):
        rng = np.random.default_rng(3)
        g = random_gaussian(rng, ("a", "b"))
        assert gauss_divide(g, g).is_vacuous()

    def test_group_inverse(self):
        rng = np.random.default_rng(4)
        g1 = random_gaussian(rng, ("a", "b"))
        g2 = random_gaussian(rng, ("a", "b"))
        out = gauss_divide(gauss_product(g1, g2), g2)
        np.testing.assert_allclose(out.xi, g1.xi, atol=1e-12)
        np.testing.assert_allclose(out.omega, g1.omega, atol=1e-12)

    def test_1d_subtraction(self):
        # N(1, 0.5) / N(2, 1) leaves canonical (xi=0, omega=1) = N(0, 1)
        g1 = GaussianMoment([1.0], [[0.5]]).to_canonical(("x",))
        g2 = GaussianMoment([2.0], [[1.0]]).to_canonical(("x",))
        out = gauss_divide(g1, g2)
        np.testing.assert_allclose(out.xi, [0.0], atol=1e-12)
        np.testing.assert_allclose(out.omega, [[1.0]], atol=1e-12)

    def test_scope_must_be_subset(self):
        g1 = GaussianCanonical.vacuous(("a",))
        g2 = GaussianCanonical.vacuous(("b",))
        with pytest.raises(ValueError):
            gauss_divide(g1, g2)


class TestGaussMarginalize:
    def test_marginalize_nothing_is_identity(self):
        rng = np.random.default_rng(5)
        g = random_gaussian(rng, ("a", "b"))
        out = gauss_marginalize(g, ("a", "b"))
        np.testing.assert_array_equal(out.xi, g.xi)

    def test_block_diagonal(self):
        rng = np.random.default_rng(6)
        ga = random_gaussian(rng, ("a",))
        gb = random_gaussian(rng, ("b",))
        joint = gauss_product(ga, gb)
        out = gauss_marginalize(joint, ("a",))
        np.testing.assert_allclose(out.xi, ga.xi, atol=1e-12)
        np.testing.assert_allclose(out.omega, ga.omega, atol=1e-12)

    def test_matches_covariance_submatrix(self):
        rng = np.random.default_rng(7)
        g = random_gaussian(rng, ("a", "b", "c"))
        mom = g.to_moments()
        out = gauss_marginalize(g, ("a", "c")).to_moments()
        np.testing.assert_allclose(out.mu, mom.mu[[0, 2]], atol=1e-9)
        np.testing.assert_allclose(
            out.sigma, mom.sigma[np.ix_([0, 2], [0, 2])], atol=1e-9
        )

    def test_singular_discard_block(self):
        # an indefinite discarded block (legal in improper factors) cannot
        # be regularized away
        omega = np.array([[1.0, 0.0], [0.0, -1.0]])
        g = GaussianCanonical(np.zeros(2), omega, ("a", "b"))
        with pytest.raises(SingularMarginalization):
            gauss_marginalize(g, ("a",))

    def test_vacuous_discard_block_is_vacuous(self):
        # discarding variables with no information yields a vacuous marginal
        g = GaussianCanonical(np.zeros(2), np.zeros((2, 2)), ("a", "b"))
        assert gauss_marginalize(g, ("a",)).is_vacuous()


class TestKLGaussian:
    def test_self_kl_zero(self):
        rng = np.random.default_rng(8)
        g = random_gaussian(rng, ("a", "b"))
        assert kl_gaussian(g, g) < 1e-12

    def test_1d_unit_shift(self):
        q = GaussianMoment([0.0], [[1.0]]).to_canonical(("x",))
        p = GaussianMoment([1.0], [[1.0]]).to_canonical(("x",))
        assert kl_gaussian(q, p) == pytest.approx(0.5)

    def test_matches_quadrature(self):
        rng = np.random.default_rng(9)
        q = random_gaussian(rng, ("a", "b"))
        p = random_gaussian(rng, ("a", "b"))
        qm = q.to_moments()
        # grid wide enough to cover q's mass
        lo = qm.mu - 6 * np.sqrt(np.diag(qm.sigma))
        hi = qm.mu + 6 * np.sqrt(np.diag(qm.sigma))
        xs = np.linspace(lo[0], hi[0], 220)
        ys = np.linspace(lo[1], hi[1], 220)
        dx = (xs[1] - xs[0]) * (ys[1] - ys[0])
        total = 0.0
        for x in xs:
            pts = np.column_stack([np.full_like(ys, x), ys])
            lq = np.array([q.log_density(pt) for pt in pts])
            lp = np.array([p.log_density(pt) for pt in pts])
            total += float(np.sum(np.exp(lq) * (lq - lp))) * dx
        assert kl_gaussian(q, p) == pytest.approx(total, abs=1e-3)

    def test_rejects_improper(self):
        g = GaussianCanonical.vacuous(("x",))
        p = GaussianMoment([0.0], [[1.0]]).to_canonical(("x",))
        with pytest.raises(NotADistribution):
            kl_gaussian(g, p)

    @given(
        mu1=st.floats(-3, 3),
        mu2=st.floats(-3, 3),
        v1=st.floats(0.1, 5),
        v2=st.floats(0.1, 5),
    )
    @settings(max_examples=50, deadline=None)
    def test_nonnegative(self, mu1, mu2, v1, v2):
        q = GaussianMoment([mu1], [[v1]]).to_canonical(("x",))
        p = GaussianMoment([mu2], [[v2]]).to_canonical(("x",))
        assert kl_gaussian(q, p) >= 0.0


class TestInverseGamma:
    def test_flat_identity(self):
        f = InverseGammaFactor(2.5, 1.5)
        out = ig_product(f, InverseGammaFactor.flat())
        assert out == f

    def test_measurement_message_sum(self):
        # two messages with exponent 1/2 and scales 1, 2 combine additively
        m1 = InverseGammaFactor(0.5, 1.0)
        m2 = InverseGammaFactor(0.5, 2.0)
        out = ig_product(m1, m2)
        assert out.exponent == pytest.approx(1.0)
        assert out.scale == pytest.approx(3.0)

    def test_density_product_pointwise(self):
        f1 = InverseGammaFactor.normalized(2.0, 1.0)
        f2 = InverseGammaFactor.normalized(3.0, 2.0)
        prod = ig_product(f1, f2)
        nus = np.linspace(0.1, 10.0, 25)
        # unnormalized log densities; the difference must be nu-independent
        def unnorm(f, nu):
            return -f.exponent * math.log(nu) - f.scale / nu

        diffs = [
            unnorm(f1, nu) + unnorm(f2, nu) - unnorm(prod, nu) for nu in nus
        ]
        assert np.ptp(diffs) < 1e-12

    def test_divide_inverts_product(self):
        f1 = InverseGammaFactor(1.5, 2.0)
        f2 = InverseGammaFactor(0.5, 1.0)
        assert ig_divide(ig_product(f1, f2), f2) == f1

    def test_expected_deviation_values(self):
        assert ig_expected_deviation(InverseGammaFactor.normalized(2, 6)) == 3
        assert ig_expected_deviation(InverseGammaFactor.normalized(1, 1)) == 1

    def test_expected_deviation_monte_carlo(self):
        # <1/nu>^-1 under IG(3, 2) is 2/3
        rng = np.random.default_rng(10)
        nus = 1.0 / rng.gamma(3.0, 1.0 / 2.0, size=400_000)
        mc = 1.0 / np.mean(1.0 / nus)
        assert mc == pytest.approx(
            ig_expected_deviation(InverseGammaFactor.normalized(3, 2)), rel=0.01
        )

    def test_expected_deviation_requires_normalizable(self):
        with pytest.raises(NotADistribution):
            ig_expected_deviation(InverseGammaFactor(0.5, 1.0))

    def test_normalized_convention(self):
        # normalized IG(a, b) stores exponent a + 1
        f = InverseGammaFactor.normalized(2.0, 3.0)
        assert f.exponent == 3.0
        assert f.shape == 2.0


class TestUnscentedTransform:
    def test_affine_exact(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=(3, 3))
        c = rng.normal(size=3)
        g = random_gaussian(rng, ("x", "y", "z")).to_moments()
        out = unscented_transform(g, lambda x: a @ x + c)
        np.testing.assert_allclose(out.mu, a @ g.mu + c, atol=1e-9)
        np.testing.assert_allclose(out.sigma, a @ g.sigma @ a.T, atol=1e-9)

    def test_identity(self):
        rng = np.random.default_rng(12)
        g = random_gaussian(rng, ("x", "y")).to_moments()
        out = unscented_transform(g, lambda x: x)
        np.testing.assert_allclose(out.mu, g.mu, atol=1e-9)
        np.testing.assert_allclose(out.sigma, g.sigma, atol=1e-9)

    def test_square_of_standard_normal(self):
        # x^2 under N(0,1) has mean 1, variance 2; UT approximates
        g = GaussianMoment([0.0], [[1.0]])
        out = unscented_transform(
            g, lambda x: x * x, UTParams(spread=1.0, prior_knowledge=2.0)
        )
        assert out.mu[0] == pytest.approx(1.0, rel=0.1)
        assert out.sigma[0, 0] == pytest.approx(2.0, rel=0.1)

    @given(seed=st.integers(0, 1000))
    @settings(max_examples=30, deadline=None)
    def test_affine_exact_random(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 5))
        a = rng.normal(size=(n, n))
        c = rng.normal(size=n)
        m = rng.normal(size=(n, n))
        g = GaussianMoment(rng.normal(size=n), m @ m.T + n * np.eye(n))
        out = unscented_transform(g, lambda x: a @ x + c)
        np.testing.assert_allclose(out.mu, a @ g.mu + c, atol=1e-9)
        np.testing.assert_allclose(out.sigma, a @ g.sigma @ a.T, atol=1e-9)
