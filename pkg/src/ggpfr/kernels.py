"""Covariance kernels over functional-covariate vectors.

The workhorse is the squared-exponential kernel with a non-stationary
linear term,

    k(x, x') = v1 * exp(-0.5 * sum_q w_q (x_q - x'_q)^2) + a1 * sum_q x_q x'_q,

whose hyper-parameters (w_1..w_Q, v1, a1) are kept on the log scale so
unconstrained optimisation preserves positivity.  Three stationary
alternatives (Matern nu=3/2, rational quadratic, compactly supported
piecewise polynomial with q=2) use an isotropic length scale plus a signal
variance, following the usual textbook parameterisations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConditioningError, ValidationError

SE_LINEAR = "se-linear"
MATERN32 = "matern32"
RATIONAL_QUADRATIC = "rational-quadratic"
PIECEWISE_POLY_Q2 = "piecewise-poly-2"

KERNEL_KINDS = (SE_LINEAR, MATERN32, RATIONAL_QUADRATIC, PIECEWISE_POLY_Q2)

DEFAULT_JITTER = 1e-6
MAX_JITTER = 1e-2


def n_params(kind: str, q: int) -> int:
    if kind == SE_LINEAR:
        return q + 2
    if kind in (MATERN32, PIECEWISE_POLY_Q2):
        return 2
    if kind == RATIONAL_QUADRATIC:
        return 3
    raise ValidationError(f"unknown kernel kind {kind!r}")


def param_names(kind: str, q: int) -> list[str]:
    if kind == SE_LINEAR:
        return [f"w{i + 1}" for i in range(q)] + ["v1", "a1"]
    if kind == MATERN32 or kind == PIECEWISE_POLY_Q2:
        return ["length", "variance"]
    return ["length", "variance", "alpha"]


@dataclass(frozen=True, eq=False)
class KernelParams:
    """A kernel kind plus its log-scale hyper-parameter vector.

    For ``se-linear`` the layout is (log w_1..w_Q, log v1, log a1); the
    stationary kinds use (log length, log variance[, log alpha]).
    """

    kind: str
    log_params: np.ndarray
    q: int = 1

    def __post_init__(self):
        lp = np.asarray(self.log_params, dtype=float)
        if lp.ndim != 1:
            raise ValidationError("log_params must be a vector")
        if not np.all(np.isfinite(lp)):
            raise ValidationError("log_params must be finite")
        expected = n_params(self.kind, self.q)
        if lp.size != expected:
            raise ValidationError(
                f"{self.kind} with Q={self.q} needs {expected} parameters, got {lp.size}")
        object.__setattr__(self, "log_params", lp)

    def __eq__(self, other):
        if not isinstance(other, KernelParams):
            return NotImplemented
        return (self.kind == other.kind and self.q == other.q
                and np.array_equal(self.log_params, other.log_params))

    def __hash__(self):
        return hash((self.kind, self.q, self.log_params.tobytes()))

    @property
    def values(self) -> np.ndarray:
        return np.exp(self.log_params)

    def replace(self, log_params) -> "KernelParams":
        return KernelParams(self.kind, np.asarray(log_params, dtype=float), self.q)


def _as_matrix(x, q):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, q) if x.size != q or q == 1 else x.reshape(1, q)
    if x.ndim != 2 or x.shape[1] != q:
        raise ValidationError(f"covariates must have {q} columns")
    return x


def _pp_exponent(q_dim: int) -> int:
    # smoothness order 2, valid up to input dimension q_dim
    return q_dim // 2 + 2 + 1


def _cross(xa, xb, params: KernelParams) -> np.ndarray:
    """Dense kernel matrix k(xa_i, xb_j) for row sets xa (n,q), xb (m,q)."""
    kind = params.kind
    vals = params.values
    if kind == SE_LINEAR:
        w = vals[: params.q]
        v1, a1 = vals[params.q], vals[params.q + 1]
        diff = xa[:, None, :] - xb[None, :, :]
        quad = np.einsum("ijq,q->ij", diff * diff, w)
        return v1 * np.exp(-0.5 * quad) + a1 * (xa @ xb.T)
    ell, v = vals[0], vals[1]
    diff = xa[:, None, :] - xb[None, :, :]
    r = np.sqrt(np.einsum("ijq->ij", diff * diff))
    if kind == MATERN32:
        s = np.sqrt(3.0) * r / ell
        return v * (1.0 + s) * np.exp(-s)
    if kind == RATIONAL_QUADRATIC:
        alpha = vals[2]
        return v * (1.0 + r**2 / (2.0 * alpha * ell**2)) ** (-alpha)
    # piecewise polynomial, q = 2
    j = _pp_exponent(params.q)
    s = np.minimum(r / ell, 1.0)
    poly = ((j**2 + 4 * j + 3) * s**2 + (3 * j + 6) * s + 3.0) / 3.0
    return v * (1.0 - s) ** (j + 2) * poly


def kernel_eval(x_i, x_j, params: KernelParams) -> float:
    """Kernel value k(x_i, x_j) for two Q-vectors."""
    xa = _as_matrix(np.atleast_1d(x_i).reshape(1, -1), params.q)
    xb = _as_matrix(np.atleast_1d(x_j).reshape(1, -1), params.q)
    return float(_cross(xa, xb, params)[0, 0])


def jittered_chol(base, jitter: float):
    """Add escalating jitter (x10 steps, capped at 1e-2) until Cholesky works.

    Returns ``(C, L)`` with ``C = base + jitter_eff * I = L @ L.T``; raises
    a ConditioningError once the cap is exceeded.
    """
    n = base.shape[0]
    if n == 0:
        return base, base.copy()
    j = float(jitter)
    if j < 0:
        raise ValidationError("jitter must be >= 0")
    while True:
        C = base + j * np.eye(n)
        try:
            L = np.linalg.cholesky(C)
            return C, L
        except np.linalg.LinAlgError:
            j = max(j, DEFAULT_JITTER) * 10.0 if j > 0 else DEFAULT_JITTER
            if j > MAX_JITTER:
                raise ConditioningError(
                    f"covariance matrix not positive definite up to jitter {MAX_JITTER}")


def gram_with_chol(X, params: KernelParams, jitter: float = DEFAULT_JITTER):
    """Gram matrix with jitter on the diagonal plus its Cholesky factor."""
    X = _as_matrix(X, params.q)
    if not np.all(np.isfinite(X)):
        raise ValidationError("covariate rows must be finite")
    base = _cross(X, X, params)
    base = 0.5 * (base + base.T)
    return jittered_chol(base, jitter)


def gram_matrix(X, params: KernelParams, jitter: float = DEFAULT_JITTER) -> np.ndarray:
    """Jittered Gram matrix over the rows of X (positive definite by contract)."""
    C, _ = gram_with_chol(X, params, jitter)
    return C


def cross_cov(X_train, x_star, params: KernelParams) -> np.ndarray:
    """Covariances k(x_i, x_star) between training rows and one new input."""
    xs = np.atleast_1d(np.asarray(x_star, dtype=float)).reshape(1, -1)
    if xs.shape[1] != params.q:
        raise ValidationError(f"x_star must have length {params.q}")
    X = np.asarray(X_train, dtype=float).reshape(-1, params.q)
    if X.shape[0] == 0:
        return np.empty(0)
    return _cross(X, xs, params)[:, 0]


def gram_grad(X, params: KernelParams) -> list[np.ndarray]:
    """Derivatives of the (un-jittered) Gram matrix in each log-parameter.

    Returns one symmetric N x N matrix per entry of ``params.log_params``,
    i.e. d K / d log theta_k = theta_k * d K / d theta_k.
    """
    X = _as_matrix(X, params.q)
    kind = params.kind
    vals = params.values
    if kind == SE_LINEAR:
        w = vals[: params.q]
        v1, a1 = vals[params.q], vals[params.q + 1]
        diff = X[:, None, :] - X[None, :, :]
        sq = diff * diff
        quad = np.einsum("ijq,q->ij", sq, w)
        se = v1 * np.exp(-0.5 * quad)
        grads = []
        for qi in range(params.q):
            grads.append(se * (-0.5 * w[qi] * sq[:, :, qi]))
        grads.append(se.copy())
        grads.append(a1 * (X @ X.T))
        return grads
    ell, v = vals[0], vals[1]
    diff = X[:, None, :] - X[None, :, :]
    r = np.sqrt(np.einsum("ijq->ij", diff * diff))
    if kind == MATERN32:
        s = np.sqrt(3.0) * r / ell
        k = v * (1.0 + s) * np.exp(-s)
        d_ell = v * s**2 * np.exp(-s)
        return [d_ell, k]
    if kind == RATIONAL_QUADRATIC:
        alpha = vals[2]
        g = 1.0 + r**2 / (2.0 * alpha * ell**2)
        k = v * g ** (-alpha)
        d_ell = v * g ** (-alpha - 1.0) * r**2 / ell**2
        d_alpha = v * g ** (-alpha) * (-alpha * np.log(g) + r**2 / (2.0 * ell**2) / g)
        return [d_ell, k, d_alpha]
    j = _pp_exponent(params.q)
    s = np.minimum(r / ell, 1.0)
    inside = s < 1.0
    poly = ((j**2 + 4 * j + 3) * s**2 + (3 * j + 6) * s + 3.0) / 3.0
    dpoly = (2.0 * (j**2 + 4 * j + 3) * s + (3 * j + 6)) / 3.0
    base = (1.0 - s) ** (j + 2)
    k = v * base * poly
    dk_ds = v * (-(j + 2) * (1.0 - s) ** (j + 1) * poly + base * dpoly)
    d_ell = np.where(inside, -s * dk_ds, 0.0)
    return [d_ell, k]
