"""Per-batch latent posterior computation.

Everything here works on one batch at a time.  Writing eta_i = mu_i + tau_i,
the unnormalised log posterior of the latent vector tau is

    Psi(tau) = sum_i log p(z_i | eta_i) - N/2 log 2pi
               - 1/2 log|C| - 1/2 tau' C^{-1} tau,

with C the (jittered) Gram matrix of the batch.  The mode is found by a
damped Newton iteration; the same fixed point reached by Fisher scoring
yields the Gaussian approximation N(mode, (C^{-1} + D)^{-1}) with D the
clamped negative curvature of the data term.  Both marginal-likelihood
approximations are evaluated in the determinant-identity form

    sum_i log p(z_i | eta_i) - 1/2 tau' C^{-1} tau - 1/2 log|I + sqrt(D) C sqrt(D)|,

which never forms C^{-1} explicitly and keeps the log-determinant stable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .exceptions import ConditioningError, ConvergenceError
from .families import ObservationFamily

CURVATURE_FLOOR = 1e-10
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100
_MAX_HALVINGS = 40


class FamilyTerm:
    """Data term sum_i log p(z_i | mu_i + tau_i) and its diagonal derivatives."""

    def __init__(self, family: ObservationFamily, z, mu):
        self.family = family
        self.z = np.asarray(z, dtype=float)
        self.mu = np.asarray(mu, dtype=float)
        if self.z.shape != self.mu.shape:
            raise ValueError("responses and mean vector must have the same length")

    @property
    def size(self):
        return self.z.size

    def logp(self, tau):
        return self.family.log_density(self.z, self.mu + tau)

    def d12(self, tau):
        eta = self.mu + tau
        return (self.family.dlog_density(self.z, eta),
                self.family.d2log_density(self.z, eta))


@dataclass(eq=False)
class LatentPosterior:
    """Gaussian approximation to one batch's latent full conditional.

    ``chol_precision`` is the Cholesky factor of B = I + sqrt(D) C sqrt(D),
    which encodes C^{-1} + D through the identity
    (C^{-1} + D)^{-1} = C - C sqrt(D) B^{-1} sqrt(D) C.
    """

    mode: np.ndarray
    neg_hessian_diag: np.ndarray
    gram: np.ndarray
    chol_gram: np.ndarray
    chol_precision: np.ndarray
    log_marginal_contribution: float
    grad_at_mode: np.ndarray

    @property
    def sqrt_d(self):
        return np.sqrt(self.neg_hessian_diag)

    def covariance_quad(self, vec) -> float:
        """vec' (C^{-1} + D)^{-1} vec without forming the inverse."""
        v = np.asarray(vec, dtype=float)
        cv = self.gram @ v
        w = self.sqrt_d * cv
        y = solve_triangular(self.chol_precision, w, lower=True)
        return float(v @ cv - y @ y)


def _chol(C):
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        raise ConditioningError("covariance matrix is not positive definite")


def _psi_rel(term, tau, L_C):
    """Psi up to terms constant in tau (enough for line searches)."""
    alpha = cho_solve((L_C, True), tau)
    return float(np.sum(term.logp(tau)) - 0.5 * tau @ alpha)


def _marginal_value(term, tau, C, L_C, curv):
    """Stable evaluation of Psi(tau) + N/2 log 2pi - 1/2 log|C^{-1} + K|."""
    d = np.maximum(curv, CURVATURE_FLOOR)
    sd = np.sqrt(d)
    B = np.eye(C.shape[0]) + (sd[:, None] * C) * sd[None, :]
    L_B = _chol(B)
    alpha = cho_solve((L_C, True), tau)
    logdet_b = 2.0 * float(np.sum(np.log(np.diag(L_B))))
    value = float(np.sum(term.logp(tau)) - 0.5 * tau @ alpha - 0.5 * logdet_b)
    return value, d, sd, L_B


def _find_mode(term, C, L_C, tol, max_iter, tau0=None):
    """Damped Newton ascent on Psi; returns (tau, d1, d2, n_iter)."""
    n = term.size
    tau = np.zeros(n) if tau0 is None else np.array(tau0, dtype=float)
    psi = _psi_rel(term, tau, L_C)
    if not np.isfinite(psi):
        tau = np.zeros(n)
        psi = _psi_rel(term, tau, L_C)
        if not np.isfinite(psi):
            raise ConvergenceError("data term is not finite at the prior mean")
    eye = np.eye(n)
    last_norm = np.inf
    for _ in range(max_iter):
        v, d2 = term.d12(tau)
        grad = v - cho_solve((L_C, True), tau)
        last_norm = float(np.max(np.abs(grad))) if n else 0.0
        if last_norm < tol:
            return tau, v, d2, last_norm
        d = np.maximum(-d2, CURVATURE_FLOOR)
        # Newton step rearranged so only C (never C^{-1}) appears:
        # (I + C D) delta = C v - tau
        delta = np.linalg.solve(eye + C * d[None, :], C @ v - tau)
        step = delta
        for _ in range(_MAX_HALVINGS):
            cand = tau + step
            psi_new = _psi_rel(term, cand, L_C)
            if np.isfinite(psi_new) and psi_new >= psi - 1e-12 * max(1.0, abs(psi)):
                tau, psi = cand, psi_new
                break
            step = 0.5 * step
        else:
            break
    v, d2 = term.d12(tau)
    grad = v - cho_solve((L_C, True), tau)
    last_norm = float(np.max(np.abs(grad)))
    if last_norm < tol:
        return tau, v, d2, last_norm
    raise ConvergenceError(
        f"mode finding stalled at gradient norm {last_norm:.3e}",
        last_residual=last_norm)


def find_mode_newton(z, mu, gram, family: ObservationFamily,
                     tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                     tau0=None) -> np.ndarray:
    """Mode of the latent full conditional for one batch.

    Uses the Newton update tau + (I + C D)^{-1} (C V - tau) with step
    halving whenever Psi would decrease; stops when the sup-norm of the
    Psi gradient falls below ``tol``.
    """
    C = np.asarray(gram, dtype=float)
    term = FamilyTerm(family, z, mu)
    tau, _, _, _ = _find_mode(term, C, _chol(C), tol, max_iter, tau0)
    return tau


def _fisher_posterior(term, C, L_C, tol, max_iter, tau0=None):
    """Fisher-scoring fixed point and the resulting Gaussian approximation."""
    n = term.size
    tau = np.zeros(n) if tau0 is None else np.array(tau0, dtype=float)
    psi = _psi_rel(term, tau, L_C)
    if not np.isfinite(psi):
        tau = np.zeros(n)
        psi = _psi_rel(term, tau, L_C)
    converged = False
    step = np.full(max(n, 1), np.inf)
    for _ in range(max_iter):
        g1, g2 = term.d12(tau)
        d = np.maximum(-g2, CURVATURE_FLOOR)
        a = g1 + d * tau
        sd = np.sqrt(d)
        B = np.eye(n) + (sd[:, None] * C) * sd[None, :]
        L_B = _chol(B)
        # (C^{-1} + D)^{-1} a via the Woodbury identity
        ca = C @ a
        w = cho_solve((L_B, True), sd * ca)
        tau_new = ca - C @ (sd * w)
        step = tau_new - tau
        psi_new = psi
        for _ in range(_MAX_HALVINGS):
            cand = tau + step
            psi_new = _psi_rel(term, cand, L_C)
            if np.isfinite(psi_new) and psi_new >= psi - 1e-12 * max(1.0, abs(psi)):
                break
            step = 0.5 * step
        tau = tau + step
        psi = psi_new
        if float(np.max(np.abs(step))) < tol:
            converged = True
            break
    if not converged:
        raise ConvergenceError(
            "Fisher scoring did not converge",
            last_residual=float(np.max(np.abs(step))))
    g1, g2 = term.d12(tau)
    value, d, sd, L_B = _marginal_value(term, tau, C, L_C, -g2)
    return LatentPosterior(
        mode=tau, neg_hessian_diag=d, gram=C, chol_gram=L_C,
        chol_precision=L_B, log_marginal_contribution=value, grad_at_mode=g1)


def gaussian_approx_fisher(z, mu, gram, family: ObservationFamily,
                           tol: float = DEFAULT_TOL,
                           max_iter: int = DEFAULT_MAX_ITER,
                           tau0=None) -> LatentPosterior:
    """Gaussian approximation N(mode, (C^{-1}+D)^{-1}) by Fisher scoring.

    Each sweep refreshes the working quantities a = g' + D tau and
    D = -g'' at the current iterate and solves (C^{-1} + D) tau_new = a;
    iteration stops when the sup-norm change drops below ``tol``.
    """
    C = np.asarray(gram, dtype=float)
    term = FamilyTerm(family, z, mu)
    return _fisher_posterior(term, C, _chol(C), tol, max_iter, tau0)


def laplace_log_marginal(z, mu, gram, family: ObservationFamily,
                         tol: float = DEFAULT_TOL,
                         max_iter: int = DEFAULT_MAX_ITER) -> float:
    """Laplace approximation of one batch's log marginal likelihood."""
    C = np.asarray(gram, dtype=float)
    L_C = _chol(C)
    term = FamilyTerm(family, z, mu)
    tau, _, d2, _ = _find_mode(term, C, L_C, tol, max_iter)
    value, _, _, _ = _marginal_value(term, tau, C, L_C, -d2)
    return value


def nested_log_marginal(z, mu, gram, family: ObservationFamily,
                        tol: float = DEFAULT_TOL,
                        max_iter: int = DEFAULT_MAX_ITER) -> float:
    """Marginal estimate log p(mode, Z) - log of the Gaussian approximation
    evaluated at its own mode.  Avoids the dimension-growing error a naive
    high-dimensional Laplace expansion can accumulate."""
    return gaussian_approx_fisher(z, mu, gram, family, tol, max_iter).log_marginal_contribution


def regret_term(C_nn, delta: float) -> float:
    """Covariance-complexity diagnostic 1/2 log det(I + delta * C_nn)."""
    C = np.asarray(C_nn, dtype=float)
    if delta < 0:
        raise ValueError("delta must be >= 0")
    if C.size == 0 or delta == 0.0:
        return 0.0
    L = _chol(np.eye(C.shape[0]) + delta * C)
    return float(np.sum(np.log(np.diag(L))))
