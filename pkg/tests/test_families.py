"""Observation-family values, derivatives, and moment maps."""

import mpmath
import numpy as np
import pytest

from ggpfr import families
from ggpfr.exceptions import ValidationError


def hp_normal_cdf(x):
    """High-precision standard-normal CDF (50 digits)."""
    mpmath.mp.dps = 50
    return float(mpmath.ncdf(x))


class TestLogDensity:
    def test_bernoulli_symmetric_point(self):
        fam = families.bernoulli_logit()
        assert fam.log_density(1.0, 0.0) == pytest.approx(np.log(0.5), abs=1e-14)

    def test_poisson_zero_at_unit_rate(self):
        fam = families.poisson_log()
        assert fam.log_density(0.0, 0.0) == pytest.approx(-1.0, abs=1e-14)

    def test_ordinal_interval_against_high_precision_cdf(self):
        fam = families.ordinal_probit([0.2, 0.7])
        expected = np.log(hp_normal_cdf(0.25) - hp_normal_cdf(-0.25))
        assert fam.log_density(1, 0.45) == pytest.approx(expected, abs=1e-12)

    def test_ordinal_far_tail_is_finite(self):
        fam = families.ordinal_probit([0.2, 0.7])
        for eta in (-40.0, 40.0):
            for z in (0, 1, 2):
                val = fam.log_density(z, eta)
                assert np.isfinite(val)
                assert np.isfinite(fam.dlog_density(z, eta))
                assert fam.d2log_density(z, eta) <= 1e-12

    def test_binomial_counts(self):
        fam = families.binomial_logit(4)
        # 4 choose 2 * (1/2)^4
        assert fam.log_density(2.0, 0.0) == pytest.approx(np.log(6.0 / 16.0), abs=1e-12)

    def test_gaussian_matches_normal_logpdf(self):
        fam = families.gaussian_identity(2.0)
        from scipy.stats import norm
        assert fam.log_density(1.3, 0.4) == pytest.approx(
            norm.logpdf(1.3, 0.4, np.sqrt(2.0)), abs=1e-12)


def _all_families():
    return [
        families.bernoulli_logit(),
        families.binomial_logit(5),
        families.poisson_log(),
        families.ordinal_probit([-0.3, 0.4, 1.1], noise_sd=0.8),
        families.gaussian_identity(1.7),
    ]


def _random_response(fam, rng):
    if fam.kind == families.BERNOULLI_LOGIT:
        return float(rng.integers(0, 2))
    if fam.kind == families.BINOMIAL_LOGIT:
        return float(rng.integers(0, fam.trials + 1))
    if fam.kind == families.POISSON_LOG:
        return float(rng.integers(0, 8))
    if fam.kind == families.ORDINAL_PROBIT:
        return float(rng.integers(0, fam.n_categories))
    return float(rng.normal())


class TestDerivatives:
    def test_bernoulli_values(self):
        fam = families.bernoulli_logit()
        assert fam.dlog_density(1.0, 0.0) == pytest.approx(0.5, abs=1e-14)
        assert fam.d2log_density(1.0, 0.0) == pytest.approx(-0.25, abs=1e-14)

    def test_finite_difference_agreement_all_kinds(self):
        rng = np.random.default_rng(42)
        h = 1e-5
        for fam in _all_families():
            for _ in range(40):
                z = _random_response(fam, rng)
                eta = rng.uniform(-3.0, 3.0)
                fd1 = (fam.log_density(z, eta + h) - fam.log_density(z, eta - h)) / (2 * h)
                fd2 = (fam.log_density(z, eta + h) - 2 * fam.log_density(z, eta)
                       + fam.log_density(z, eta - h)) / h**2
                assert fam.dlog_density(z, eta) == pytest.approx(fd1, abs=1e-6)
                assert fam.d2log_density(z, eta) == pytest.approx(fd2, abs=1e-4)

    def test_second_derivative_nonpositive(self):
        rng = np.random.default_rng(3)
        for fam in _all_families():
            for _ in range(30):
                z = _random_response(fam, rng)
                eta = rng.uniform(-6.0, 6.0)
                assert fam.d2log_density(z, eta) <= 1e-12


class TestMoments:
    def test_bernoulli(self):
        fam = families.bernoulli_logit()
        assert fam.mean_response(0.0) == pytest.approx(0.5)
        assert fam.var_response(0.0) == pytest.approx(0.25)

    def test_poisson(self):
        fam = families.poisson_log()
        assert fam.mean_response(np.log(2.0)) == pytest.approx(2.0)
        assert fam.var_response(np.log(2.0)) == pytest.approx(2.0)

    def test_ordinal_against_cdf_oracle(self):
        fam = families.ordinal_probit([0.2, 0.7])
        p0 = hp_normal_cdf(0.2)
        p1 = hp_normal_cdf(0.7) - hp_normal_cdf(0.2)
        p2 = 1.0 - hp_normal_cdf(0.7)
        assert fam.mean_response(0.0) == pytest.approx(p1 + 2 * p2, abs=1e-12)
        expected_var = p1 + 4 * p2 - (p1 + 2 * p2) ** 2
        assert fam.var_response(0.0) == pytest.approx(expected_var, abs=1e-12)
        np.testing.assert_allclose(fam.category_probs(0.0), [p0, p1, p2], atol=1e-12)

    def test_ordinal_probs_sum_to_one(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            b = np.sort(rng.normal(0, 2, rng.integers(1, 5)))
            b += np.arange(b.size) * 1e-3  # guarantee strict increase
            fam = families.ordinal_probit(b, noise_sd=rng.uniform(0.2, 2.0))
            eta = rng.uniform(-8, 8)
            assert fam.category_probs(eta).sum() == pytest.approx(1.0, abs=1e-12)


def test_curvature_growth_bound():
    # |b''(alpha)| <= exp(kappa |alpha|) with kappa = 2 for the canonical
    # kinds; b'' equals the conditional variance at the canonical parameter.
    alphas = np.linspace(-10, 10, 401)
    bound = np.exp(2.0 * np.abs(alphas))
    for fam in (families.bernoulli_logit(), families.binomial_logit(3),
                families.poisson_log()):
        assert np.all(np.abs(fam.var_response(alphas)) <= bound + 1e-12)


class TestThresholdCoding:
    def test_round_trip(self):
        b = np.array([-0.5, 0.1, 2.0])
        raw = families.thresholds_to_raw(b)
        np.testing.assert_allclose(families.raw_to_thresholds(raw), b, atol=1e-14)

    def test_any_raw_vector_gives_increasing_thresholds(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            raw = rng.normal(0, 3, rng.integers(1, 5))
            b = families.raw_to_thresholds(raw)
            assert np.all(np.diff(b) > 0)


class TestValidation:
    def test_range_checks(self):
        with pytest.raises(ValidationError):
            families.bernoulli_logit().validate_responses([0.0, 2.0])
        with pytest.raises(ValidationError):
            families.poisson_log().validate_responses([1.0, -1.0])
        with pytest.raises(ValidationError):
            families.poisson_log().validate_responses([1.5])
        with pytest.raises(ValidationError):
            families.ordinal_probit([0.0, 1.0]).validate_responses([3.0])
        families.gaussian_identity().validate_responses([-2.5, 0.1])

    def test_threshold_monotonicity_required(self):
        with pytest.raises(ValidationError):
            families.ordinal_probit([0.5, 0.5])

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            families.ObservationFamily("beta-logit")
