"""Exponential-family observation models linking responses to the latent value.

Every family exposes the log density of a response ``z`` given the latent
linear value ``eta``, its first two derivatives in ``eta``, and the
response-scale mean/variance maps.  All evaluators broadcast over numpy
arrays, and the log-concave kinds guarantee a non-positive second
derivative, which keeps the latent Newton solves well posed.

Supported kinds:

* ``bernoulli-logit``   -- binary responses, logistic inverse link
* ``binomial-logit``    -- counts out of a fixed number of trials
* ``poisson-log``       -- counts, exponential inverse link
* ``ordinal-probit``    -- ordered categories defined by thresholds on a
  latent Gaussian variable centred at ``eta`` with fixed noise scale
* ``gaussian-identity`` -- real responses with fixed noise variance; the
  marginal likelihood is then available in closed form, which makes this
  kind the reference point for exactness checks
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, gammaln, log_ndtr

from .exceptions import ValidationError

BERNOULLI_LOGIT = "bernoulli-logit"
BINOMIAL_LOGIT = "binomial-logit"
POISSON_LOG = "poisson-log"
ORDINAL_PROBIT = "ordinal-probit"
GAUSSIAN_IDENTITY = "gaussian-identity"

_KINDS = (BERNOULLI_LOGIT, BINOMIAL_LOGIT, POISSON_LOG, ORDINAL_PROBIT,
          GAUSSIAN_IDENTITY)

_NORM_CONST = 0.5 * np.log(2.0 * np.pi)


def _log_normal_interval(lo, up):
    """log[Phi(up) - Phi(lo)] for standard-normal Phi, stable in both tails.

    ``lo`` may be -inf and ``up`` may be +inf.  The difference is computed
    as ``a + log1p(-exp(b - a))`` on whichever side of the origin keeps the
    two log CDFs well scaled, so intervals far out in a tail do not cancel.
    """
    lo = np.asarray(lo, dtype=float)
    up = np.asarray(up, dtype=float)
    out = np.empty(np.broadcast(lo, up).shape)
    lo_b, up_b = np.broadcast_arrays(lo, up)
    lo_f = np.isfinite(lo_b)
    up_f = np.isfinite(up_b)

    both = lo_f & up_f
    if np.any(both):
        l, u = lo_b[both], up_b[both]
        # Reflect mass that sits right of the origin into the lower tail.
        flip = (l + u) > 0.0
        l2 = np.where(flip, -u, l)
        u2 = np.where(flip, -l, u)
        a = log_ndtr(u2)
        b = log_ndtr(l2)
        with np.errstate(divide="ignore"):
            out[both] = a + np.log1p(-np.exp(b - a))
    only_up = up_f & ~lo_f
    if np.any(only_up):
        out[only_up] = log_ndtr(up_b[only_up])
    only_lo = lo_f & ~up_f
    if np.any(only_lo):
        out[only_lo] = log_ndtr(-lo_b[only_lo])
    neither = ~lo_f & ~up_f
    if np.any(neither):
        out[neither] = 0.0
    return out


def _log_normal_pdf(x):
    x = np.asarray(x, dtype=float)
    out = np.full(x.shape, -np.inf)
    finite = np.isfinite(x)
    out[finite] = -0.5 * x[finite] ** 2 - _NORM_CONST
    return out


@dataclass(frozen=True, eq=False)
class ObservationFamily:
    """Observation model with a fixed dispersion.

    ``dispersion`` is the noise variance for ``gaussian-identity`` and the
    squared probit noise scale for ``ordinal-probit``; the three canonical
    count kinds keep it at 1.  ``thresholds`` are the strictly increasing
    interior cut points b_1 < ... < b_{r-1} of the ordinal model (the outer
    cut points are -inf and +inf).
    """

    kind: str
    trials: int = 1
    dispersion: float = 1.0
    thresholds: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValidationError(f"unknown observation family {self.kind!r}")
        if not (np.isfinite(self.dispersion) and self.dispersion > 0):
            raise ValidationError("dispersion must be positive and finite")
        if self.kind == BINOMIAL_LOGIT and self.trials < 1:
            raise ValidationError("binomial family needs trials >= 1")
        if self.kind == ORDINAL_PROBIT:
            b = np.asarray(self.thresholds, dtype=float)
            if b.ndim != 1 or b.size < 1:
                raise ValidationError("ordinal family needs >= 1 threshold")
            if not np.all(np.isfinite(b)) or not np.all(np.diff(b) > 0):
                raise ValidationError("thresholds must be finite and strictly increasing")
            object.__setattr__(self, "thresholds", b)
        elif self.thresholds is not None:
            raise ValidationError("thresholds only apply to the ordinal family")

    def __eq__(self, other):
        if not isinstance(other, ObservationFamily):
            return NotImplemented
        same_b = (self.thresholds is None) == (other.thresholds is None)
        if same_b and self.thresholds is not None:
            same_b = np.array_equal(self.thresholds, other.thresholds)
        return (self.kind == other.kind and self.trials == other.trials
                and self.dispersion == other.dispersion and same_b)

    def __hash__(self):
        return hash((self.kind, self.trials, self.dispersion))

    # -- introspection ----------------------------------------------------

    @property
    def n_categories(self) -> int:
        if self.kind == ORDINAL_PROBIT:
            return self.thresholds.size + 1
        if self.kind == BERNOULLI_LOGIT:
            return 2
        raise ValidationError(f"{self.kind} has no fixed category count")

    @property
    def noise_scale(self) -> float:
        """Standard deviation of the ordinal probit / Gaussian noise."""
        return float(np.sqrt(self.dispersion))

    def validate_responses(self, z) -> None:
        """Raise ValidationError when any response is outside the family range."""
        z = np.asarray(z, dtype=float)
        if not np.all(np.isfinite(z)):
            raise ValidationError("responses must be finite")
        if self.kind == GAUSSIAN_IDENTITY:
            return
        if np.any(z != np.floor(z)):
            raise ValidationError(f"{self.kind} responses must be integers")
        if self.kind == BERNOULLI_LOGIT and np.any((z < 0) | (z > 1)):
            raise ValidationError("bernoulli responses must lie in {0,1}")
        if self.kind == BINOMIAL_LOGIT and np.any((z < 0) | (z > self.trials)):
            raise ValidationError(f"binomial responses must lie in 0..{self.trials}")
        if self.kind == POISSON_LOG and np.any(z < 0):
            raise ValidationError("poisson responses must be non-negative")
        if self.kind == ORDINAL_PROBIT:
            r = self.n_categories
            if np.any((z < 0) | (z > r - 1)):
                raise ValidationError(f"ordinal responses must lie in 0..{r - 1}")

    # -- ordinal helpers ---------------------------------------------------

    def _bounds(self, z):
        """Scaled interval bounds ((b_z - eta)/s shape helpers) for ordinal z."""
        b = np.concatenate(([-np.inf], self.thresholds, [np.inf]))
        zi = np.asarray(z, dtype=int)
        return b[zi], b[zi + 1]

    def category_probs(self, eta):
        """Ordinal category probabilities at latent value(s) eta, shape (..., r)."""
        if self.kind == BERNOULLI_LOGIT:
            p1 = expit(np.asarray(eta, dtype=float))
            return np.stack([1.0 - p1, p1], axis=-1)
        if self.kind != ORDINAL_PROBIT:
            raise ValidationError(f"{self.kind} has no category probabilities")
        eta = np.asarray(eta, dtype=float)
        s = self.noise_scale
        b = np.concatenate(([-np.inf], self.thresholds, [np.inf]))
        lo = (b[:-1] - eta[..., None]) / s
        up = (b[1:] - eta[..., None]) / s
        return np.exp(_log_normal_interval(lo, up))

    # -- log density and derivatives ---------------------------------------

    def log_density(self, z, eta):
        """log p(z | eta), broadcasting over z and eta."""
        z = np.asarray(z, dtype=float)
        eta = np.asarray(eta, dtype=float)
        if self.kind == BERNOULLI_LOGIT:
            return z * eta - np.logaddexp(0.0, eta)
        if self.kind == BINOMIAL_LOGIT:
            n = self.trials
            comb = gammaln(n + 1) - gammaln(z + 1) - gammaln(n - z + 1)
            return z * eta - n * np.logaddexp(0.0, eta) + comb
        if self.kind == POISSON_LOG:
            with np.errstate(over="ignore"):
                return z * eta - np.exp(eta) - gammaln(z + 1)
        if self.kind == GAUSSIAN_IDENTITY:
            phi = self.dispersion
            return -0.5 * (z - eta) ** 2 / phi - 0.5 * np.log(2.0 * np.pi * phi)
        # ordinal probit
        s = self.noise_scale
        b_lo, b_up = self._bounds(z)
        return _log_normal_interval((b_lo - eta) / s, (b_up - eta) / s)

    def dlog_density(self, z, eta):
        """First derivative of log p(z | eta) in eta."""
        z = np.asarray(z, dtype=float)
        eta = np.asarray(eta, dtype=float)
        if self.kind == BERNOULLI_LOGIT:
            return z - expit(eta)
        if self.kind == BINOMIAL_LOGIT:
            return z - self.trials * expit(eta)
        if self.kind == POISSON_LOG:
            with np.errstate(over="ignore"):
                return z - np.exp(eta)
        if self.kind == GAUSSIAN_IDENTITY:
            return (z - eta) / self.dispersion
        return self._ordinal_d12(z, eta)[0]

    def d2log_density(self, z, eta):
        """Second derivative of log p(z | eta) in eta (<= 0 for every kind)."""
        z = np.asarray(z, dtype=float)
        eta = np.asarray(eta, dtype=float)
        if self.kind == BERNOULLI_LOGIT:
            p = expit(eta)
            return -p * (1.0 - p)
        if self.kind == BINOMIAL_LOGIT:
            p = expit(eta)
            return -self.trials * p * (1.0 - p)
        if self.kind == POISSON_LOG:
            with np.errstate(over="ignore"):
                return -np.exp(eta)
        if self.kind == GAUSSIAN_IDENTITY:
            return np.broadcast_to(-1.0 / self.dispersion, np.broadcast(z, eta).shape).copy()
        return self._ordinal_d12(z, eta)[1]

    def _ordinal_d12(self, z, eta):
        # Ratios phi(x)/p computed through logs so far-tail intervals stay
        # finite; x * phi(x)/p -> 0 as x -> +-inf faster than x grows.
        s = self.noise_scale
        b_lo, b_up = self._bounds(z)
        lo = (b_lo - eta) / s
        up = (b_up - eta) / s
        logp = _log_normal_interval(lo, up)
        r_lo = np.exp(_log_normal_pdf(lo) - logp)
        r_up = np.exp(_log_normal_pdf(up) - logp)
        d1 = (r_lo - r_up) / s
        x_lo = np.where(np.isfinite(lo), lo, 0.0) * r_lo
        x_up = np.where(np.isfinite(up), up, 0.0) * r_up
        d2 = (x_lo - x_up) / s**2 - d1**2
        return d1, d2

    # -- response moments ---------------------------------------------------

    def mean_response(self, eta):
        """E(z | eta) = h(eta) on the response scale."""
        eta = np.asarray(eta, dtype=float)
        if self.kind == BERNOULLI_LOGIT:
            return expit(eta)
        if self.kind == BINOMIAL_LOGIT:
            return self.trials * expit(eta)
        if self.kind == POISSON_LOG:
            with np.errstate(over="ignore"):
                return np.exp(eta)
        if self.kind == GAUSSIAN_IDENTITY:
            return eta + 0.0
        probs = self.category_probs(eta)
        cats = np.arange(probs.shape[-1], dtype=float)
        return probs @ cats

    def var_response(self, eta):
        """Var(z | eta) on the response scale."""
        eta = np.asarray(eta, dtype=float)
        if self.kind == BERNOULLI_LOGIT:
            p = expit(eta)
            return p * (1.0 - p)
        if self.kind == BINOMIAL_LOGIT:
            p = expit(eta)
            return self.trials * p * (1.0 - p)
        if self.kind == POISSON_LOG:
            with np.errstate(over="ignore"):
                return np.exp(eta)
        if self.kind == GAUSSIAN_IDENTITY:
            return np.broadcast_to(self.dispersion, eta.shape).copy()
        probs = self.category_probs(eta)
        cats = np.arange(probs.shape[-1], dtype=float)
        m = probs @ cats
        return probs @ cats**2 - m**2


def bernoulli_logit() -> ObservationFamily:
    return ObservationFamily(BERNOULLI_LOGIT)


def binomial_logit(trials: int) -> ObservationFamily:
    return ObservationFamily(BINOMIAL_LOGIT, trials=trials)


def poisson_log() -> ObservationFamily:
    return ObservationFamily(POISSON_LOG)


def ordinal_probit(thresholds, noise_sd: float = 1.0) -> ObservationFamily:
    return ObservationFamily(ORDINAL_PROBIT, dispersion=float(noise_sd) ** 2,
                             thresholds=np.asarray(thresholds, dtype=float))


def gaussian_identity(noise_var: float = 1.0) -> ObservationFamily:
    return ObservationFamily(GAUSSIAN_IDENTITY, dispersion=float(noise_var))


def thresholds_to_raw(thresholds) -> np.ndarray:
    """Map increasing thresholds to an unconstrained vector (b1, log gaps)."""
    b = np.asarray(thresholds, dtype=float)
    if b.size == 1:
        return b.copy()
    return np.concatenate(([b[0]], np.log(np.diff(b))))


def raw_to_thresholds(raw) -> np.ndarray:
    """Inverse of :func:`thresholds_to_raw`; always yields increasing values."""
    raw = np.asarray(raw, dtype=float)
    if raw.size == 1:
        return raw.copy()
    return raw[0] + np.concatenate(([0.0], np.cumsum(np.exp(raw[1:]))))
