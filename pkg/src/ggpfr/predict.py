"""Predictive distributions for observed-batch and new-batch test points.

The default path conditions on a batch through the Gaussian approximation
of its latent full conditional: with a' = C_N*' C_NN^{-1} and
sigma*^2 = k(x*,x*) - C_N*' C_NN^{-1} C_N*, the latent value at a new input
is N(a' mode, a' Omega a + sigma*^2), and response-scale moments follow by
Gauss-Hermite quadrature of the inverse link (and of the conditional
variance) against that normal.  An alternative path approximates the same
moments with a joint Laplace expansion over (tau_batch, tau*); it agrees
closely with the quadrature path and is kept for comparison.

New batches with no observations use the equal-weight (or user-weighted)
mixture over per-training-batch predictions.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import expit

from . import families, kernels
from .data import FunctionalBatch
from .exceptions import ValidationError
from .latent import (DEFAULT_MAX_ITER, DEFAULT_TOL, FamilyTerm, LatentPosterior,
                     _find_mode, _marginal_value, gaussian_approx_fisher,
                     laplace_log_marginal)
from .model import FittedModel

DEFAULT_NODES = 30


@dataclass
class PredictiveDistribution:
    """Latent Normal summary plus response-scale mean and variance."""

    latent_mean: float
    latent_var: float
    response_mean: float
    response_var: float
    category_probs: np.ndarray | None = None


class BatchPosterior:
    """Conditioning state reused across many test inputs for one batch."""

    def __init__(self, model: FittedModel, X_transformed, posterior: LatentPosterior):
        self.model = model
        self.X = X_transformed
        self.posterior = posterior

    def latent_at(self, x_star):
        """Mean and variance of the latent value at a new input."""
        model = self.model
        xs = model.transform_x(np.atleast_1d(np.asarray(x_star, dtype=float)))
        post = self.posterior
        c_star = kernels.cross_cov(self.X, xs, model.kernel)
        k_star = kernels.kernel_eval(xs, xs, model.kernel)
        return _latent_moments(post, c_star, k_star)


def _latent_moments(post: LatentPosterior, c_star, k_star):
    v = cho_solve((post.chol_gram, True), c_star)
    mean = float(v @ post.mode)
    w = post.sqrt_d * c_star
    y = solve_triangular(post.chol_precision, w, lower=True)
    var = max(float(k_star - y @ y), 0.0)
    return mean, var


def posterior_for(model: FittedModel, batch_obs: FunctionalBatch,
                  jitter: float | None = None) -> BatchPosterior:
    """Fresh Gaussian approximation conditioned on one batch's observations."""
    if batch_obs.n_obs < 1:
        raise ValidationError("conditioning batch needs at least one observation")
    model.family.validate_responses(batch_obs.responses)
    X = model.transform_x(batch_obs.covariates)
    C, _ = kernels.gram_with_chol(X, model.kernel,
                                  model.jitter if jitter is None else jitter)
    mu = model.mean_curve(batch_obs.times, batch_obs.scalar_covariates)
    post = gaussian_approx_fisher(batch_obs.responses, mu, C, model.family)
    return BatchPosterior(model, X, post)


def latent_posterior_at(model: FittedModel, batch_obs: FunctionalBatch, x_star,
                        jitter: float | None = None):
    """(mean, variance) of the latent value at x_star given one batch."""
    return posterior_for(model, batch_obs, jitter=jitter).latent_at(x_star)


@lru_cache(maxsize=8)
def _gh_rule(nodes: int):
    x, w = np.polynomial.hermite.hermgauss(nodes)
    return x, w / w.sum()


def response_moments(family: families.ObservationFamily, mu_star: float,
                     latent_mean: float, latent_var: float,
                     nodes: int = DEFAULT_NODES):
    """Response mean/variance under eta = mu* + tau*, tau* ~ N(m, s^2).

    Integrates the conditional mean, its square, and the conditional
    variance by Gauss-Hermite quadrature; the variance combines the two
    per the law of total variance.  Returns (mean, var, category_probs).
    """
    m = mu_star + latent_mean
    if latent_var <= 0.0:
        etas = np.array([m])
        wts = np.array([1.0])
    else:
        x, wts = _gh_rule(nodes)
        etas = m + np.sqrt(2.0 * latent_var) * x
    h = family.mean_response(etas)
    mean = float(wts @ h)
    e_h2 = float(wts @ h**2)
    e_var = float(wts @ family.var_response(etas))
    var = max(e_h2 - mean**2, 0.0) + e_var
    probs = None
    if family.kind in (families.BERNOULLI_LOGIT, families.ORDINAL_PROBIT):
        probs = wts @ family.category_probs(etas)
        probs = np.maximum(probs, 0.0)
        probs = probs / probs.sum()
    return mean, var, probs


def predict_response(model: FittedModel, batch_obs: FunctionalBatch,
                     t_star: float, x_star, u_star,
                     nodes: int = DEFAULT_NODES,
                     posterior: BatchPosterior | None = None) -> PredictiveDistribution:
    """Predictive distribution at (t*, x*) for a partially observed batch.

    ``posterior`` may carry a precomputed conditioning state so a grid of
    test points pays for the batch solve once.
    """
    if posterior is None:
        posterior = posterior_for(model, batch_obs)
    m, s2 = posterior.latent_at(x_star)
    mu_star = model.mean_value(t_star, u_star)
    mean, var, probs = response_moments(model.family, mu_star, m, s2, nodes)
    return PredictiveDistribution(m, s2, mean, var, probs)


def predict_new_batch(model: FittedModel, t_star: float, x_star, u_star,
                      weights=None, nodes: int = DEFAULT_NODES) -> PredictiveDistribution:
    """Mixture prediction for a batch with no observations of its own.

    Every training batch contributes a prediction computed as if the test
    point belonged to it; the mixture mean is the weighted average and the
    mixture variance adds the spread of the per-batch means.
    """
    if model.cluster_ids is not None:
        raise ValidationError("use the clustered prediction API for clustered models")
    n = len(model.batches)
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (n,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-8:
            raise ValidationError("weights must be non-negative and sum to 1")
    mu_star = model.mean_value(t_star, u_star)
    means = np.empty(n)
    variances = np.empty(n)
    lat_means = np.empty(n)
    lat_vars = np.empty(n)
    probs_acc = None
    for i, (batch, post) in enumerate(zip(model.batches, model.per_batch)):
        bp = BatchPosterior(model, model.transform_x(batch.covariates), post)
        m, s2 = bp.latent_at(x_star)
        mean_i, var_i, probs_i = response_moments(model.family, mu_star, m, s2, nodes)
        means[i], variances[i] = mean_i, var_i
        lat_means[i], lat_vars[i] = m, s2
        if probs_i is not None:
            probs_acc = probs_i * w[i] if probs_acc is None else probs_acc + probs_i * w[i]
    mean = float(w @ means)
    var = float(w @ variances + w @ means**2 - mean**2)
    lat_mean = float(w @ lat_means)
    lat_var = float(w @ lat_vars + w @ lat_means**2 - lat_mean**2)
    return PredictiveDistribution(lat_mean, max(lat_var, 0.0), mean, max(var, 0.0),
                                  probs_acc)


def classify(pred: PredictiveDistribution, family: families.ObservationFamily) -> int:
    """Hard category from a predictive distribution (ties go to the lower one)."""
    if family.kind == families.BERNOULLI_LOGIT:
        return int(pred.response_mean > 0.5)
    if family.kind == families.ORDINAL_PROBIT:
        if pred.category_probs is None:
            raise ValidationError("ordinal prediction lacks category probabilities")
        return int(np.argmax(pred.category_probs))
    raise ValidationError(f"classification undefined for {family.kind}")


# ---------------------------------------------------------------------------
# joint Laplace alternative


class _TiltTerm:
    """Family data term on the first N coordinates plus a scalar tilt on the
    last: psi(mu* + tau*) with psi one of log h, 2 log h, or log Var."""

    def __init__(self, family, z, mu, mu_star, tilt):
        self.inner = FamilyTerm(family, z, mu)
        self.mu_star = mu_star
        self.tilt = tilt

    @property
    def size(self):
        return self.inner.size + 1

    def logp(self, tau):
        val, _, _ = self.tilt(self.mu_star + tau[-1])
        return np.concatenate([self.inner.logp(tau[:-1]), [val]])

    def d12(self, tau):
        d1, d2 = self.inner.d12(tau[:-1])
        _, t1, t2 = self.tilt(self.mu_star + tau[-1])
        return np.concatenate([d1, [t1]]), np.concatenate([d2, [t2]])


def _ordinal_moment_funcs(family, eta):
    """h, h', h'' and v, v', v'' for the ordinal categorical moments."""
    s = family.noise_scale
    b = np.concatenate(([-np.inf], family.thresholds, [np.inf]))
    lo = (b[:-1] - eta) / s
    up = (b[1:] - eta) / s

    def pdf(x):
        out = np.zeros_like(x)
        f = np.isfinite(x)
        out[f] = np.exp(-0.5 * x[f] ** 2) / np.sqrt(2.0 * np.pi)
        return out

    from scipy.special import ndtr
    cdf_up = np.where(np.isfinite(up), ndtr(up), 1.0)
    cdf_lo = np.where(np.isfinite(lo), ndtr(lo), 0.0)
    p = cdf_up - cdf_lo
    dp = (pdf(lo) - pdf(up)) / s
    xphi_lo = np.where(np.isfinite(lo), lo, 0.0) * pdf(lo)
    xphi_up = np.where(np.isfinite(up), up, 0.0) * pdf(up)
    d2p = (xphi_lo - xphi_up) / s**2
    j = np.arange(p.size, dtype=float)
    h = float(j @ p)
    h1 = float(j @ dp)
    h2 = float(j @ d2p)
    m2 = float(j**2 @ p)
    m2_1 = float(j**2 @ dp)
    m2_2 = float(j**2 @ d2p)
    v = m2 - h**2
    v1 = m2_1 - 2.0 * h * h1
    v2 = m2_2 - 2.0 * (h1**2 + h * h2)
    return h, h1, h2, v, v1, v2


def _make_tilt(family, which):
    kind = family.kind

    def from_h(h, h1, h2, power=1.0):
        return power * np.log(h), power * h1 / h, power * (h2 / h - (h1 / h) ** 2)

    def tilt(eta):
        if kind in (families.BERNOULLI_LOGIT, families.BINOMIAL_LOGIT):
            p = expit(eta)
            n = family.trials if kind == families.BINOMIAL_LOGIT else 1
            if which == "var":
                # log n p (1 - p)
                return (np.log(n) - np.logaddexp(0.0, eta) - np.logaddexp(0.0, -eta),
                        1.0 - 2.0 * p, -2.0 * p * (1.0 - p))
            power = 2.0 if which == "mean_sq" else 1.0
            return (power * (np.log(n) - np.logaddexp(0.0, -eta)),
                    power * (1.0 - p), -power * p * (1.0 - p))
        if kind == families.POISSON_LOG:
            power = 2.0 if which == "mean_sq" else 1.0
            return power * eta, power, 0.0
        if kind == families.GAUSSIAN_IDENTITY:
            if which == "var":
                return np.log(family.dispersion), 0.0, 0.0
            power = 2.0 if which == "mean_sq" else 1.0
            if eta <= 0:
                # step halving in the mode finder backs away from here
                return -np.inf, 1.0, -1e-10
            return power * np.log(eta), power / eta, -power / eta**2
        h, h1, h2, v, v1, v2 = _ordinal_moment_funcs(family, eta)
        if which == "var":
            if v <= 0:
                return -np.inf, 0.0, -1e-10
            return np.log(v), v1 / v, v2 / v - (v1 / v) ** 2
        if h <= 0:
            return -np.inf, 0.0, -1e-10
        power = 2.0 if which == "mean_sq" else 1.0
        return from_h(h, h1, h2, power)

    return tilt


def _joint_log_expectation(family, z, mu, mu_star, C_plus, L_plus, tilt):
    term = _TiltTerm(family, z, mu, mu_star, tilt)
    mode, _, d2, _ = _find_mode(term, C_plus, L_plus, DEFAULT_TOL, DEFAULT_MAX_ITER)
    value, _, _, _ = _marginal_value(term, mode, C_plus, L_plus, -d2)
    return value


def predict_response_laplace(model: FittedModel, batch_obs: FunctionalBatch,
                             t_star: float, x_star, u_star) -> PredictiveDistribution:
    """Appendix-style alternative: joint Laplace over (tau_batch, tau*).

    Each response moment is a ratio of two Laplace-approximated integrals,
    the numerator carrying an extra log-integrand term at the test
    coordinate and the denominator being the batch's marginal likelihood.
    """
    model.family.validate_responses(batch_obs.responses)
    X = model.transform_x(batch_obs.covariates)
    xs = model.transform_x(np.atleast_1d(np.asarray(x_star, dtype=float)))
    X_plus = np.vstack([X, xs.reshape(1, -1)])
    C_plus, L_plus = kernels.gram_with_chol(X_plus, model.kernel, model.jitter)
    n = batch_obs.n_obs
    mu = model.mean_curve(batch_obs.times, batch_obs.scalar_covariates)
    mu_star = model.mean_value(t_star, u_star)
    C_nn = C_plus[:n, :n]
    log_pz = laplace_log_marginal(batch_obs.responses, mu, C_nn, model.family)
    fam = model.family
    log_eh = _joint_log_expectation(fam, batch_obs.responses, mu, mu_star,
                                    C_plus, L_plus, _make_tilt(fam, "mean"))
    log_eh2 = _joint_log_expectation(fam, batch_obs.responses, mu, mu_star,
                                     C_plus, L_plus, _make_tilt(fam, "mean_sq"))
    log_evar = _joint_log_expectation(fam, batch_obs.responses, mu, mu_star,
                                      C_plus, L_plus, _make_tilt(fam, "var"))
    mean = float(np.exp(log_eh - log_pz))
    e_h2 = float(np.exp(log_eh2 - log_pz))
    e_var = float(np.exp(log_evar - log_pz))
    var = max(e_h2 - mean**2, 0.0) + e_var
    # latent summary from the quadrature-free conditional (same for both paths)
    post = gaussian_approx_fisher(batch_obs.responses, mu, C_nn, fam)
    bp = BatchPosterior(model, X, post)
    m, s2 = bp.latent_at(x_star)
    probs = None
    if fam.kind in (families.BERNOULLI_LOGIT, families.ORDINAL_PROBIT):
        _, _, probs = response_moments(fam, mu_star, m, s2)
    return PredictiveDistribution(m, s2, mean, var, probs)
