"""Mixed-effects extension for clustered functional data.

Subjects in one cluster share a random effect v ~ N(0, diag(gamma)) that
enters the latent value through each subject's design W, so the joined
latent vector of a cluster has covariance

    Sigma_i = blockdiag(C_i1, ..., C_iN) + W_i diag(gamma) W_i',

and the whole estimation/prediction machinery of the independent model
applies with clusters as the units and Sigma_i in place of the per-batch
Gram matrix.  The random-effect variances are optimised on the log scale
with a floor of 1e-10, so boundary estimates show up as effectively zero
rather than breaking the factorizations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import basis as basis_mod
from . import families, kernels
from .data import Dataset, FunctionalBatch
from .exceptions import ValidationError
from .fitting import (ParamLayout, Workspace, _Unit, _finalize, _initial_point,
                  maximize_objective)
from .model import AUTO, FittedModel, ModelSpec
from .predict import (DEFAULT_NODES, PredictiveDistribution, _latent_moments,
                      response_moments)

GAMMA_FLOOR = 1e-10


@dataclass(frozen=True, eq=False)
class ClusteredDataset:
    """Clusters of batches, each batch carrying a random-effect design W."""

    clusters: tuple                 # ((cluster_id, (FunctionalBatch, ...)), ...)
    gamma: np.ndarray               # r-vector of random-effect variances
    family_tag: str = ""
    covariate_names: tuple = ()

    def __post_init__(self):
        clusters = tuple((cid, tuple(bs)) for cid, bs in self.clusters)
        if not clusters:
            raise ValidationError("need at least one cluster")
        ids = [cid for cid, _ in clusters]
        if len(set(ids)) != len(ids):
            raise ValidationError("cluster ids must be unique")
        gamma = np.asarray(self.gamma, dtype=float)
        if gamma.ndim != 1 or np.any(gamma < 0) or not np.all(np.isfinite(gamma)):
            raise ValidationError("gamma must be a non-negative finite vector")
        r = gamma.size
        all_batches = [b for _, bs in clusters for b in bs]
        if not all_batches:
            raise ValidationError("clusters cannot be empty")
        for b in all_batches:
            if b.re_covariates is None or b.re_covariates.shape[1] != r:
                raise ValidationError(
                    f"batch {b.batch_id}: needs a random-effect design with {r} columns")
        bids = [b.batch_id for b in all_batches]
        if len(set(bids)) != len(bids):
            raise ValidationError("batch ids must be unique across clusters")
        object.__setattr__(self, "clusters", clusters)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))

    @property
    def n_random_effects(self) -> int:
        return self.gamma.size

    def all_batches(self):
        return [b for _, bs in self.clusters for b in bs]

    def as_dataset(self) -> Dataset:
        """The same batches with the cluster structure forgotten."""
        return Dataset(tuple(self.all_batches()), self.family_tag,
                       self.covariate_names)


def load_clustered_csv(path, schema, gamma) -> ClusteredDataset:
    """Load a long-format CSV with cluster_id and w columns."""
    from .data import _batch_from_rows, read_rows
    if schema.cluster_col is None or not schema.w_cols:
        raise ValidationError("clustered loading needs cluster_col and w_cols")
    groups = read_rows(path, schema)
    by_cluster: dict = {}
    for bid, rows in groups.items():
        cids = {r["cluster"] for r in rows}
        if len(cids) != 1:
            raise ValidationError(f"batch {bid}: inconsistent cluster ids {sorted(cids)}")
        batch = _batch_from_rows(bid, rows, schema)
        by_cluster.setdefault(cids.pop(), []).append(batch)
    clusters = tuple((cid, tuple(bs)) for cid, bs in by_cluster.items())
    return ClusteredDataset(clusters, gamma, family_tag=schema.family.kind,
                            covariate_names=schema.x_cols)


def assemble_cluster_cov(batches, params: kernels.KernelParams, gamma,
                         jitter: float = kernels.DEFAULT_JITTER,
                         transform=None, with_chol: bool = False):
    """Joint covariance of one cluster's joined latent curve.

    Block-diagonal per-subject kernel matrices plus the low-rank
    W diag(gamma) W' coupling, then jitter escalation as for plain Gram
    matrices.  Returns the matrix, or ``(matrix, chol)`` with
    ``with_chol=True``.
    """
    gamma = np.zeros(batches[0].re_covariates.shape[1]) if gamma is None \
        else np.asarray(gamma, dtype=float)
    sizes = [b.n_obs for b in batches]
    n = int(np.sum(sizes))
    base = np.zeros((n, n))
    offset = 0
    for b in batches:
        X = b.covariates if transform is None else transform(b.covariates)
        block = kernels._cross(np.asarray(X, dtype=float), np.asarray(X, dtype=float),
                               params)
        base[offset:offset + b.n_obs, offset:offset + b.n_obs] = 0.5 * (block + block.T)
        offset += b.n_obs
    W = np.vstack([b.re_covariates for b in batches])
    base += (W * gamma[None, :]) @ W.T
    base = 0.5 * (base + base.T)
    C, L = kernels.jittered_chol(base, jitter)
    return (C, L) if with_chol else C


def _cluster_workspace(data: ClusteredDataset, spec: ModelSpec, fix_gamma: bool):
    flat = data.as_dataset()
    flat.validate_family(spec.family)
    size = spec.basis_size
    if size == AUTO:
        raise ValidationError("clustered fits need a concrete basis size")
    spl = basis_mod.place_knots(flat.pooled_times(), size, spec.knot_method)
    if spec.standardize_x:
        X = np.vstack([b.covariates for b in flat.batches])
        shift, scale = X.mean(axis=0), X.std(axis=0)
        scale[scale == 0] = 1.0
        transform = lambda x: (np.asarray(x, dtype=float) - shift) / scale
    else:
        transform, shift, scale = (lambda x: np.asarray(x, dtype=float)), None, None
    units = []
    for i, (cid, bs) in enumerate(data.clusters):
        parts = [(basis_mod.design_matrix(spl, b.times), b.scalar_covariates.copy())
                 for b in bs]
        z = np.concatenate([b.responses for b in bs])
        units.append(_Unit(index=i, z=z, parts=parts, batches=list(bs), n=z.size))
    q = flat.n_covariates
    n_thr = 0
    if spec.family.kind == families.ORDINAL_PROBIT and spec.estimate_thresholds:
        n_thr = spec.family.thresholds.size
    n_gamma = 0 if fix_gamma else data.n_random_effects
    layout = ParamLayout(spl.size, flat.n_scalar_covariates,
                         kernels.n_params(spec.kernel_kind, q), n_thr, n_gamma)
    fixed_gamma = data.gamma

    def gram_fn(unit, params, gamma):
        g = fixed_gamma if gamma is None else np.maximum(gamma, GAMMA_FLOOR)
        return assemble_cluster_cov(unit.batches, params, g, spec.jitter,
                                    transform=transform, with_chol=True)

    ws = Workspace(units, spec.family, spec, layout, gram_fn, q)
    ws.basis = spl
    ws.transform = transform
    ws.x_shift, ws.x_scale = shift, scale
    return ws, flat


def fit_clustered(data: ClusteredDataset, spec: ModelSpec,
                  fix_gamma: bool = False) -> FittedModel:
    """Empirical-Bayes fit with per-cluster joint covariances.

    ``data.gamma`` seeds (or, with ``fix_gamma=True``, pins) the
    random-effect variances; everything else matches the independent fit.
    """
    ws, flat = _cluster_workspace(data, spec, fix_gamma)
    x0 = _initial_point(flat, spec, ws)
    if ws.layout.n_gamma:
        x0[-ws.layout.n_gamma:] = np.log(np.maximum(data.gamma, 1e-4))
    best_x, _, trace = maximize_objective(ws, x0, spec,
                                          perturb_seeds=range(spec.restarts))
    cluster_of = tuple(cid for cid, bs in data.clusters for _ in bs)
    cluster_ids = tuple(cid for cid, _ in data.clusters)
    model = _finalize(ws, flat, spec, best_x, trace,
                      cluster_meta=(cluster_of, cluster_ids),
                      fixed_gamma=data.gamma)
    return model


def cluster_posterior(model: FittedModel, cluster_obs):
    """Gaussian approximation on a cluster's joined observation vector."""
    batches = [cluster_obs] if isinstance(cluster_obs, FunctionalBatch) \
        else list(cluster_obs)
    if not batches:
        raise ValidationError("need at least one observed batch in the cluster")
    for b in batches:
        model.family.validate_responses(b.responses)
        if b.re_covariates is None:
            raise ValidationError(f"batch {b.batch_id}: missing random-effect design")
    from .latent import gaussian_approx_fisher
    C, _ = assemble_cluster_cov(batches, model.kernel, model.gamma, model.jitter,
                                transform=model.transform_x, with_chol=True)
    z = np.concatenate([b.responses for b in batches])
    mu = np.concatenate([model.mean_curve(b.times, b.scalar_covariates)
                         for b in batches])
    post = gaussian_approx_fisher(z, mu, C, model.family)
    return batches, post


def predict_clustered(model: FittedModel, cluster_obs, t_star: float, x_star,
                      w_star, u_star, nodes: int = DEFAULT_NODES,
                      subject=0) -> PredictiveDistribution:
    """Predictive distribution at (t*, x*, w*) given a cluster's observations.

    The test point rides on one subject's curve: its cross-covariance with
    that subject's observations is k(x*, x) + w*' diag(gamma) w, while other
    subjects in the cluster couple through the random effect alone
    (their individual processes are independent of the target curve).
    ``subject`` picks the target curve by position or batch id;
    ``subject=None`` predicts a brand-new curve within the cluster, where
    only the random effect carries information.
    """
    batches, post = cluster_posterior(model, cluster_obs)
    gamma = model.gamma if model.gamma is not None else \
        np.zeros(batches[0].re_covariates.shape[1])
    if subject is None:
        target = None
    elif isinstance(subject, str):
        target = next((j for j, b in enumerate(batches) if b.batch_id == subject), -1)
        if target < 0:
            raise ValidationError(f"no observed batch named {subject!r} in the cluster")
    else:
        target = int(subject)
        if not 0 <= target < len(batches):
            raise ValidationError("subject index out of range")
    xs = model.transform_x(np.atleast_1d(np.asarray(x_star, dtype=float)))
    ws_vec = np.asarray(w_star, dtype=float)
    c_parts = []
    for j, b in enumerate(batches):
        c = b.re_covariates @ (gamma * ws_vec)
        if j == target:
            c = c + kernels.cross_cov(model.transform_x(b.covariates), xs, model.kernel)
        c_parts.append(c)
    c_star = np.concatenate(c_parts)
    k_star = kernels.kernel_eval(xs, xs, model.kernel) + float(ws_vec @ (gamma * ws_vec))
    m, s2 = _latent_moments(post, c_star, k_star)
    mu_star = model.mean_value(t_star, u_star)
    mean, var, probs = response_moments(model.family, mu_star, m, s2, nodes)
    return PredictiveDistribution(m, s2, mean, var, probs)
