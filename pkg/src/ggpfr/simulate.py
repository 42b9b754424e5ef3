"""Seeded generators for the desk-scale simulation studies plus metrics.

Each generator is deterministic given (seed, sizes): batch m draws from the
stream ``default_rng((seed, stream_tag, m))``, so batches can be produced
independently and in parallel without changing the output.  Latent draws
use the Cholesky factor of (C + 1e-6 I).

Scenarios:

* ``binomial-se``  -- mean 0.8 sin(0.5 t)^3 on equally spaced t in (-4, 4),
  latent GP with the squared-exponential-plus-linear kernel
  (w1, v1, a1) = (1.0, 0.04, 0.1), binary responses through the logistic.
* ``chebyshev``    -- mean 2 sqrt(0.4) sin(0.4 pi t) on [0, 5], covariance
  sum_j j^{-3/2} phi_j(t) phi_j(s) over the first ten orthonormal discrete
  polynomials on the grid, binary responses through the logistic.
* ``ordinal``      -- mean 1/(1+exp(-1.5 x)) on equally spaced x in (-4, 4),
  kernel (w1, v1, a1) = (0.33, 0.0049, 0.01), three categories cut at
  0.2 and 0.7.

The GP kernels in ``binomial-se`` and ``ordinal`` act on the z-scored
covariate column (zero mean, unit variance over the grid), the scaling
under which the published error levels of these studies are attainable;
the emitted covariate column stays x = t, so fits reproduce the stated
hyper-parameters by standardizing inputs the same way.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .data import Dataset, FunctionalBatch
from .exceptions import ValidationError
from .mixed import ClusteredDataset

BINOMIAL_SE = "binomial-se"
CHEBYSHEV = "chebyshev"
ORDINAL = "ordinal"

SCENARIOS = (BINOMIAL_SE, CHEBYSHEV, ORDINAL)

THETA_BINOMIAL = (1.0, 0.04, 0.1)      # (w1, v1, a1)
THETA_ORDINAL = (0.33, 0.0049, 0.01)
ORDINAL_CUTS = (0.2, 0.7)
DRAW_JITTER = 1e-6
# the thresholded scenario needs a visible noise floor: fitting it with a
# probit scale equal to this jitter's standard deviation makes the fitted
# model match the generator exactly, so thresholds stay identified
ORDINAL_DRAW_JITTER = 1e-3


@dataclass(frozen=True)
class SimConfig:
    scenario: str
    n_batches: int
    n_per_batch: int
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValidationError(f"unknown scenario {self.scenario!r}")
        if self.n_batches < 1 or self.n_per_batch < 2:
            raise ValidationError("need n_batches >= 1 and n_per_batch >= 2")


@dataclass(frozen=True)
class SimTruth:
    """Hidden truth that accompanies a simulated dataset."""

    latent: tuple                       # per batch, the y curve
    theta: tuple | None = None          # kernel truth where applicable
    thresholds: tuple | None = None

    def latent_for(self, index):
        return self.latent[index]


def _open_interval_grid(lo, hi, n):
    # equally spaced interior points of (lo, hi), endpoints excluded
    return lo + (hi - lo) * (np.arange(1, n + 1) - 0.5) / n


def _draw_latent(C_chol, rng):
    return C_chol @ rng.standard_normal(C_chol.shape[0])


def standardize_grid(x):
    """The z-scored copy of a covariate grid (the kernel's input scale)."""
    x = np.asarray(x, dtype=float)
    return (x - x.mean()) / x.std()


def sim_binomial_se(n_batches: int, n_per_batch: int, seed: int,
                    theta=THETA_BINOMIAL, id_prefix: str = "b"):
    """Binary curves from the squared-exponential study; returns (Dataset, SimTruth)."""
    w1, v1, a1 = theta
    params = kernels.KernelParams(kernels.SE_LINEAR, np.log([w1, v1, a1]), q=1)
    t = _open_interval_grid(-4.0, 4.0, n_per_batch)
    X = t.reshape(-1, 1)
    _, L = kernels.gram_with_chol(standardize_grid(X), params, DRAW_JITTER)
    mean = 0.8 * np.sin(0.5 * t) ** 3
    batches, latents = [], []
    for m in range(n_batches):
        rng = np.random.default_rng((seed, 0, m))
        y = mean + _draw_latent(L, rng)
        z = (rng.uniform(size=n_per_batch) < 1.0 / (1.0 + np.exp(-y))).astype(float)
        batches.append(FunctionalBatch(f"{id_prefix}{m + 1:03d}", t, z, X, [1.0]))
        latents.append(y)
    ds = Dataset(tuple(batches), "bernoulli-logit", ("x1",))
    return ds, SimTruth(tuple(latents), theta=tuple(theta))


def discrete_orthonormal_polynomials(grid, count: int) -> np.ndarray:
    """First ``count`` orthonormal polynomials on the grid (columns).

    Stabilised Gram-Schmidt on monomials, normalised so each column has
    unit euclidean norm over the grid points.
    """
    grid = np.asarray(grid, dtype=float)
    n = grid.size
    if count > n:
        raise ValidationError("cannot build more polynomials than grid points")
    # center/scale the monomial seed to keep the QR well conditioned
    s = (grid - grid.mean()) / max(grid.std(), 1e-12)
    V = np.vander(s, count, increasing=True)
    basis = np.empty((n, count))
    for j in range(count):
        v = V[:, j].copy()
        for k in range(j):
            v -= (basis[:, k] @ v) * basis[:, k]
        for k in range(j):   # second pass for numerical orthogonality
            v -= (basis[:, k] @ v) * basis[:, k]
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            raise ValidationError("degenerate grid for polynomial construction")
        basis[:, j] = v / norm
    return basis


def chebyshev_covariance(grid, n_terms: int = 10):
    """Covariance sum_j alpha_j phi_j phi_j' with alpha_j = j^{-3/2}."""
    phi = discrete_orthonormal_polynomials(grid, n_terms)
    alpha = (np.arange(1, n_terms + 1, dtype=float)) ** (-1.5)
    return (phi * alpha[None, :]) @ phi.T, alpha, phi


def sim_chebyshev(n_batches: int = 100, n_per_batch: int = 50, seed: int = 0,
                  id_prefix: str = "b"):
    """Binary curves with the finite-rank polynomial covariance; (Dataset, SimTruth)."""
    t = np.linspace(0.0, 5.0, n_per_batch)
    X = t.reshape(-1, 1)
    C, _, _ = chebyshev_covariance(t, 10)
    L = np.linalg.cholesky(C + DRAW_JITTER * np.eye(n_per_batch))
    mean = 2.0 * np.sqrt(0.4) * np.sin(0.4 * np.pi * t)
    batches, latents = [], []
    for m in range(n_batches):
        rng = np.random.default_rng((seed, 1, m))
        y = mean + _draw_latent(L, rng)
        z = (rng.uniform(size=n_per_batch) < 1.0 / (1.0 + np.exp(-y))).astype(float)
        batches.append(FunctionalBatch(f"{id_prefix}{m + 1:03d}", t, z, X, [1.0]))
        latents.append(y)
    ds = Dataset(tuple(batches), "bernoulli-logit", ("x1",))
    return ds, SimTruth(tuple(latents))


def sim_ordinal(n_batches: int, n_per_batch: int, seed: int,
                theta=THETA_ORDINAL, cuts=ORDINAL_CUTS, id_prefix: str = "b",
                draw_jitter: float = ORDINAL_DRAW_JITTER):
    """Three-category ordinal curves cut from a latent GP; (Dataset, SimTruth)."""
    w1, v1, a1 = theta
    params = kernels.KernelParams(kernels.SE_LINEAR, np.log([w1, v1, a1]), q=1)
    x = _open_interval_grid(-4.0, 4.0, n_per_batch)
    X = x.reshape(-1, 1)
    _, L = kernels.gram_with_chol(standardize_grid(X), params, draw_jitter)
    mean = 1.0 / (1.0 + np.exp(-1.5 * x))
    b = np.asarray(cuts, dtype=float)
    batches, latents = [], []
    for m in range(n_batches):
        rng = np.random.default_rng((seed, 2, m))
        y = mean + _draw_latent(L, rng)
        z = np.digitize(y, b).astype(float)
        batches.append(FunctionalBatch(f"{id_prefix}{m + 1:03d}", x, z, X, [1.0]))
        latents.append(y)
    ds = Dataset(tuple(batches), "ordinal-probit", ("x1",))
    return ds, SimTruth(tuple(latents), theta=tuple(theta), thresholds=tuple(cuts))


def sim_clustered_gaussian(n_clusters: int, n_subjects: int, n_per_subject: int,
                           seed: int, gamma=(0.5,), noise_var: float = 0.25,
                           theta=(1.0, 0.05, 0.01)):
    """Clustered Gaussian curves with a shared random intercept per cluster.

    Used by the mixed-effects recovery checks; the random-effect design is
    a column of ones, so gamma is the between-cluster intercept variance.
    """
    gamma = np.asarray(gamma, dtype=float)
    params = kernels.KernelParams(kernels.SE_LINEAR, np.log(list(theta)), q=1)
    t = np.linspace(-2.0, 2.0, n_per_subject)
    X = t.reshape(-1, 1)
    _, L = kernels.gram_with_chol(X, params, DRAW_JITTER)
    mean = 0.5 * np.sin(t)
    clusters, latents = [], []
    for i in range(n_clusters):
        rng = np.random.default_rng((seed, 3, i))
        v = rng.normal(0.0, np.sqrt(gamma))
        bs = []
        for j in range(n_subjects):
            tau = _draw_latent(L, rng)
            W = np.ones((n_per_subject, gamma.size))
            y = mean + W @ v + tau
            z = y + rng.normal(0.0, np.sqrt(noise_var), n_per_subject)
            bs.append(FunctionalBatch(f"c{i + 1:02d}s{j + 1:02d}", t, z, X, [1.0],
                                      re_covariates=W))
            latents.append(y)
        clusters.append((f"c{i + 1:02d}", tuple(bs)))
    cd = ClusteredDataset(tuple(clusters), gamma, family_tag="gaussian-identity",
                          covariate_names=("x1",))
    return cd, SimTruth(tuple(latents), theta=tuple(theta))


def simulate(config: SimConfig):
    """Dispatch a SimConfig to its generator."""
    if config.scenario == BINOMIAL_SE:
        return sim_binomial_se(config.n_batches, config.n_per_batch, config.seed)
    if config.scenario == CHEBYSHEV:
        return sim_chebyshev(config.n_batches, config.n_per_batch, config.seed)
    return sim_ordinal(config.n_batches, config.n_per_batch, config.seed)


def metrics(predicted, truth, predicted_class=None, true_class=None) -> dict:
    """rmse and Pearson r on the latent scale, plus an error rate when
    hard classifications are supplied."""
    predicted = np.asarray(predicted, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if predicted.shape != truth.shape or predicted.ndim != 1:
        raise ValidationError("metrics need aligned vectors")
    out = {"rmse": float(np.sqrt(np.mean((predicted - truth) ** 2)))}
    if predicted.size >= 2:
        sp, st = predicted.std(), truth.std()
        if sp == 0.0 or st == 0.0:
            raise ValidationError("correlation undefined for a constant vector")
        out["pearson_r"] = float(np.corrcoef(predicted, truth)[0, 1])
    if predicted_class is not None:
        pc = np.asarray(predicted_class)
        tc = np.asarray(true_class)
        if pc.shape != tc.shape:
            raise ValidationError("classification vectors must align")
        out["error_rate"] = float(np.mean(pc != tc))
    return out
