"""Fitted-model container, fitting configuration, and model-file round trips.

Model files are plain key-value text ("ggpfr-model v1" header) with embedded
row-major matrix blocks written at 17 significant digits, which round-trips
IEEE doubles exactly.  A fitted model keeps a snapshot of its training
batches: Gaussian-process prediction needs the training inputs, and the
new-batch mixture needs every batch's latent posterior summary.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from . import basis as basis_mod
from . import families, kernels
from .data import Dataset, FunctionalBatch
from .exceptions import ModelFormatError, ValidationError
from .latent import LatentPosterior

FORMAT_VERSION = "v1"
AUTO = "auto"

OBJECTIVE_NESTED = "nested"
OBJECTIVE_LAPLACE = "laplace"

DEFAULT_BIC_GRID = tuple(range(4, 13))


@dataclass
class ModelSpec:
    """Everything the fitter needs besides the data.

    ``basis_size`` may be an integer (>= 4) or ``"auto"``, in which case the
    dimension is picked by BIC over ``bic_grid``.  ``kernel_init`` overrides
    the data-driven starting point with explicit log-scale values.
    ``max_evals`` caps the number of objective evaluations across the whole
    optimisation (finite-difference gradients included).
    """

    family: families.ObservationFamily
    kernel_kind: str = kernels.SE_LINEAR
    kernel_init: np.ndarray | None = None
    basis_size: int | str = 8
    knot_method: str = basis_mod.EQUAL_SPACED
    objective: str = OBJECTIVE_NESTED
    max_evals: int = 20000
    tol: float = 1e-7
    restarts: int = 2
    seed: int = 0
    jitter: float = kernels.DEFAULT_JITTER
    standardize_x: bool = False
    estimate_thresholds: bool = True
    bic_grid: tuple = DEFAULT_BIC_GRID

    def __post_init__(self):
        if isinstance(self.basis_size, str):
            if self.basis_size != AUTO:
                raise ValidationError("basis_size must be an integer or 'auto'")
        elif self.basis_size < basis_mod.DEGREE + 1:
            raise ValidationError("basis_size must be >= 4")
        if self.tol <= 0:
            raise ValidationError("tolerance must be positive")
        if self.objective not in (OBJECTIVE_NESTED, OBJECTIVE_LAPLACE):
            raise ValidationError(f"unknown objective {self.objective!r}")
        if self.kernel_init is not None:
            object.__setattr__(self, "kernel_init",
                               np.asarray(self.kernel_init, dtype=float))


@dataclass(eq=False)
class FittedModel:
    """Empirical-Bayes estimates plus per-unit latent posterior summaries.

    For independent fits ``per_batch[i]`` matches ``batches[i]``; for
    clustered fits there is one posterior per cluster (curves joined in
    ``cluster_ids`` order) and ``cluster_of[i]`` names batch i's cluster.
    """

    family: families.ObservationFamily
    kernel: kernels.KernelParams
    basis: basis_mod.SplineBasis
    coeffs: np.ndarray                      # D x p spline coefficient matrix
    batches: tuple
    per_batch: tuple
    log_marginal: float
    bic: float
    fit_trace: np.ndarray
    objective: str = OBJECTIVE_NESTED
    jitter: float = kernels.DEFAULT_JITTER
    gamma: np.ndarray | None = None
    cluster_of: tuple | None = None
    cluster_ids: tuple | None = None
    x_shift: np.ndarray | None = None
    x_scale: np.ndarray | None = None

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.ndim != 2 or self.coeffs.shape[0] != self.basis.size:
            raise ValidationError("coefficient matrix must be D x p")
        self.fit_trace = np.asarray(self.fit_trace, dtype=float)
        self.batches = tuple(self.batches)
        self.per_batch = tuple(self.per_batch)

    # -- evaluation helpers -------------------------------------------------

    def transform_x(self, x):
        x = np.asarray(x, dtype=float)
        if self.x_shift is None:
            return x
        return (x - self.x_shift) / self.x_scale

    def mean_curve(self, times, u) -> np.ndarray:
        """Mean structure mu(t) = u' B' Phi(t) at the given times."""
        phi = basis_mod.design_matrix(self.basis, np.atleast_1d(times))
        return phi @ (self.coeffs @ np.atleast_1d(np.asarray(u, dtype=float)))

    def mean_value(self, t, u) -> float:
        return float(self.mean_curve([t], u)[0])

    @property
    def n_parameters(self) -> int:
        g = self.coeffs.size + self.kernel.log_params.size
        if self.family.kind == families.ORDINAL_PROBIT:
            g += self.family.thresholds.size
        if self.gamma is not None:
            g += self.gamma.size
        return g

    def __eq__(self, other):
        if not isinstance(other, FittedModel):
            return NotImplemented

        def opt_eq(a, b):
            if (a is None) != (b is None):
                return False
            return a is None or np.array_equal(np.asarray(a), np.asarray(b))

        if not (self.family == other.family and self.kernel == other.kernel
                and self.basis == other.basis
                and np.array_equal(self.coeffs, other.coeffs)
                and self.batches == other.batches
                and self.log_marginal == other.log_marginal
                and self.bic == other.bic
                and np.array_equal(self.fit_trace, other.fit_trace)
                and self.objective == other.objective
                and self.jitter == other.jitter
                and opt_eq(self.gamma, other.gamma)
                and self.cluster_of == other.cluster_of
                and self.cluster_ids == other.cluster_ids
                and opt_eq(self.x_shift, other.x_shift)
                and opt_eq(self.x_scale, other.x_scale)):
            return False
        if len(self.per_batch) != len(other.per_batch):
            return False
        for a, b in zip(self.per_batch, other.per_batch):
            if not (np.array_equal(a.mode, b.mode)
                    and np.array_equal(a.neg_hessian_diag, b.neg_hessian_diag)
                    and a.log_marginal_contribution == b.log_marginal_contribution):
                return False
        return True


# ---------------------------------------------------------------------------
# serialization


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _write_vector(out, key, vec):
    vec = np.asarray(vec, dtype=float).ravel()
    out.write(f"{key} {vec.size}")
    for v in vec:
        out.write(" " + _fmt(v))
    out.write("\n")


def _write_matrix(out, key, mat):
    mat = np.asarray(mat, dtype=float)
    out.write(f"{key} {mat.shape[0]} {mat.shape[1]}\n")
    for row in mat:
        out.write(" ".join(_fmt(v) for v in row) + "\n")


class _Reader:
    def __init__(self, text, path):
        self.lines = text.splitlines()
        self.pos = 0
        self.path = path

    def next_line(self):
        if self.pos >= len(self.lines):
            raise ModelFormatError(f"{self.path}: unexpected end of file")
        line = self.lines[self.pos]
        self.pos += 1
        return line

    def expect(self, key):
        parts = self.next_line().split()
        if not parts or parts[0] != key:
            raise ModelFormatError(f"{self.path}: expected {key!r}, got {parts[:1]}")
        return parts[1:]

    def peek_key(self):
        if self.pos >= len(self.lines):
            return None
        parts = self.lines[self.pos].split()
        return parts[0] if parts else None

    def scalar(self, key):
        parts = self.expect(key)
        if len(parts) != 1:
            raise ModelFormatError(f"{self.path}: {key} takes one value")
        return parts[0]

    def number(self, key):
        try:
            return float(self.scalar(key))
        except ValueError as exc:
            raise ModelFormatError(f"{self.path}: bad number for {key}") from exc

    def vector(self, key):
        parts = self.expect(key)
        try:
            n = int(parts[0])
            vals = np.array([float(v) for v in parts[1:]], dtype=float)
        except (ValueError, IndexError) as exc:
            raise ModelFormatError(f"{self.path}: malformed vector {key}") from exc
        if vals.size != n:
            raise ModelFormatError(f"{self.path}: vector {key} length mismatch")
        return vals

    def matrix(self, key):
        parts = self.expect(key)
        try:
            rows, cols = int(parts[0]), int(parts[1])
        except (ValueError, IndexError) as exc:
            raise ModelFormatError(f"{self.path}: malformed matrix header {key}") from exc
        data = np.empty((rows, cols))
        for i in range(rows):
            vals = self.next_line().split()
            if len(vals) != cols:
                raise ModelFormatError(f"{self.path}: matrix {key} row {i} has wrong width")
            try:
                data[i] = [float(v) for v in vals]
            except ValueError as exc:
                raise ModelFormatError(f"{self.path}: matrix {key} row {i} not numeric") from exc
        return data


def save_model(model: FittedModel, path) -> None:
    """Write a fitted model to a documented key-value text file."""
    arrays = [model.coeffs, model.kernel.log_params, model.fit_trace]
    for p in model.per_batch:
        arrays += [p.mode, p.neg_hessian_diag]
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise ValidationError("model contains non-finite values")
    out = io.StringIO()
    out.write(f"ggpfr-model {FORMAT_VERSION}\n")
    out.write(f"objective {model.objective}\n")
    out.write(f"jitter {_fmt(model.jitter)}\n")
    fam = model.family
    out.write(f"family.kind {fam.kind}\n")
    out.write(f"family.trials {fam.trials}\n")
    out.write(f"family.dispersion {_fmt(fam.dispersion)}\n")
    if fam.thresholds is not None:
        _write_vector(out, "family.thresholds", fam.thresholds)
    out.write(f"kernel.kind {model.kernel.kind}\n")
    out.write(f"kernel.q {model.kernel.q}\n")
    _write_vector(out, "kernel.log_params", model.kernel.log_params)
    out.write(f"basis.degree {model.basis.degree}\n")
    _write_vector(out, "basis.knots", model.basis.knots)
    _write_matrix(out, "coeff.matrix", model.coeffs)
    if model.gamma is not None:
        _write_vector(out, "gamma", model.gamma)
    if model.x_shift is not None:
        _write_vector(out, "x_scaler.shift", model.x_shift)
        _write_vector(out, "x_scaler.scale", model.x_scale)
    out.write(f"log_marginal {_fmt(model.log_marginal)}\n")
    out.write(f"bic {_fmt(model.bic)}\n")
    _write_vector(out, "fit_trace", model.fit_trace)
    if model.cluster_ids is not None:
        out.write("cluster.ids " + " ".join(model.cluster_ids) + "\n")
    out.write(f"n_batches {len(model.batches)}\n")
    for i, b in enumerate(model.batches):
        out.write(f"batch {i}\n")
        out.write(f"id {b.batch_id}\n")
        if model.cluster_of is not None:
            out.write(f"cluster {model.cluster_of[i]}\n")
        _write_vector(out, "times", b.times)
        _write_vector(out, "z", b.responses)
        _write_matrix(out, "x", b.covariates)
        _write_vector(out, "u", b.scalar_covariates)
        if b.re_covariates is not None:
            _write_matrix(out, "w", b.re_covariates)
        out.write("end_batch\n")
    out.write(f"n_posteriors {len(model.per_batch)}\n")
    for i, p in enumerate(model.per_batch):
        out.write(f"posterior {i}\n")
        _write_vector(out, "mode", p.mode)
        _write_vector(out, "neg_hess", p.neg_hessian_diag)
        out.write(f"logml {_fmt(p.log_marginal_contribution)}\n")
        out.write("end_posterior\n")
    out.write("end\n")
    with open(path, "w") as fh:
        fh.write(out.getvalue())


def _rebuild_posteriors(model: FittedModel, modes, neg_hess, logmls):
    """Reconstruct the derived posterior matrices from stored summaries."""
    posteriors = []
    if model.cluster_ids is None:
        units = [([b], None) for b in model.batches]
    else:
        groups = {cid: [] for cid in model.cluster_ids}
        for b, cid in zip(model.batches, model.cluster_of):
            groups[cid].append(b)
        units = [(groups[cid], cid) for cid in model.cluster_ids]
    for i, (unit_batches, cid) in enumerate(units):
        if cid is None:
            X = model.transform_x(unit_batches[0].covariates)
            C, L_C = kernels.gram_with_chol(X, model.kernel, model.jitter)
        else:
            from .mixed import assemble_cluster_cov
            C, L_C = assemble_cluster_cov(
                unit_batches, model.kernel, model.gamma, model.jitter,
                transform=model.transform_x, with_chol=True)
        z = np.concatenate([b.responses for b in unit_batches])
        mu = np.concatenate([model.mean_curve(b.times, b.scalar_covariates)
                             for b in unit_batches])
        d = np.asarray(neg_hess[i], dtype=float)
        sd = np.sqrt(d)
        B = np.eye(C.shape[0]) + (sd[:, None] * C) * sd[None, :]
        L_B = np.linalg.cholesky(B)
        grad = model.family.dlog_density(z, mu + modes[i])
        posteriors.append(LatentPosterior(
            mode=np.asarray(modes[i], dtype=float), neg_hessian_diag=d,
            gram=C, chol_gram=L_C, chol_precision=L_B,
            log_marginal_contribution=float(logmls[i]), grad_at_mode=grad))
    return tuple(posteriors)


def load_model(path) -> FittedModel:
    """Read a model file written by :func:`save_model`."""
    with open(path) as fh:
        text = fh.read()
    r = _Reader(text, str(path))
    header = r.next_line().split()
    if len(header) != 2 or header[0] != "ggpfr-model":
        raise ModelFormatError(f"{path}: not a ggpfr model file")
    if header[1] != FORMAT_VERSION:
        raise ModelFormatError(
            f"{path}: unsupported model version {header[1]!r} (expected {FORMAT_VERSION})")
    objective = r.scalar("objective")
    jitter = r.number("jitter")
    kind = r.scalar("family.kind")
    trials = int(r.number("family.trials"))
    dispersion = r.number("family.dispersion")
    thresholds = None
    if r.peek_key() == "family.thresholds":
        thresholds = r.vector("family.thresholds")
    family = families.ObservationFamily(kind, trials=trials, dispersion=dispersion,
                                        thresholds=thresholds)
    k_kind = r.scalar("kernel.kind")
    k_q = int(r.number("kernel.q"))
    k_logp = r.vector("kernel.log_params")
    kernel = kernels.KernelParams(k_kind, k_logp, q=k_q)
    degree = int(r.number("basis.degree"))
    knots = r.vector("basis.knots")
    spl = basis_mod.SplineBasis(knots, degree=degree)
    coeffs = r.matrix("coeff.matrix")
    gamma = None
    if r.peek_key() == "gamma":
        gamma = r.vector("gamma")
    x_shift = x_scale = None
    if r.peek_key() == "x_scaler.shift":
        x_shift = r.vector("x_scaler.shift")
        x_scale = r.vector("x_scaler.scale")
    log_marginal = r.number("log_marginal")
    bic_val = r.number("bic")
    fit_trace = r.vector("fit_trace")
    cluster_ids = None
    if r.peek_key() == "cluster.ids":
        cluster_ids = tuple(r.expect("cluster.ids"))
    n_batches = int(r.number("n_batches"))
    batches = []
    cluster_of = [] if cluster_ids is not None else None
    for i in range(n_batches):
        idx = int(r.number("batch"))
        if idx != i:
            raise ModelFormatError(f"{path}: batch blocks out of order")
        bid = r.scalar("id")
        if cluster_ids is not None:
            cluster_of.append(r.scalar("cluster"))
        times = r.vector("times")
        z = r.vector("z")
        x = r.matrix("x")
        u = r.vector("u")
        w = None
        if r.peek_key() == "w":
            w = r.matrix("w")
        if r.next_line().strip() != "end_batch":
            raise ModelFormatError(f"{path}: missing end_batch")
        batches.append(FunctionalBatch(bid, times, z, x, u, re_covariates=w))
    n_post = int(r.number("n_posteriors"))
    modes, neg_hess, logmls = [], [], []
    for i in range(n_post):
        idx = int(r.number("posterior"))
        if idx != i:
            raise ModelFormatError(f"{path}: posterior blocks out of order")
        modes.append(r.vector("mode"))
        neg_hess.append(r.vector("neg_hess"))
        logmls.append(r.number("logml"))
        if r.next_line().strip() != "end_posterior":
            raise ModelFormatError(f"{path}: missing end_posterior")
    if r.next_line().strip() != "end":
        raise ModelFormatError(f"{path}: missing end marker")
    model = FittedModel(
        family=family, kernel=kernel, basis=spl, coeffs=coeffs,
        batches=tuple(batches), per_batch=(),
        log_marginal=log_marginal, bic=bic_val, fit_trace=fit_trace,
        objective=objective, jitter=jitter, gamma=gamma,
        cluster_of=tuple(cluster_of) if cluster_of is not None else None,
        cluster_ids=cluster_ids, x_shift=x_shift, x_scale=x_scale)
    model.per_batch = _rebuild_posteriors(model, modes, neg_hess, logmls)
    return model
