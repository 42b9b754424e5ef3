"""Command-line front end: simulate | fit | predict | evaluate | reproduce.

Options may come from a flat key=value config file (one pair per line, '#'
comments allowed); explicit command-line flags override config values.
Exit codes are a stable contract: 0 success, 2 I/O problems, 3 schema or
validation problems, 4 numerical failures.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import families, kernels, predict, reproduce, simulate
from .basis import EQUAL_SPACED, QUANTILE
from .data import CsvSchema, load_csv, save_csv
from .exceptions import (GgpfrError, ModelFormatError, NumericalError,
                         SchemaError, ValidationError)
from .fitting import fit
from .latent import regret_term
from .mixed import fit_clustered, load_clustered_csv
from .model import AUTO, FittedModel, ModelSpec, load_model, save_model

EXIT_OK = 0
EXIT_IO = 2
EXIT_VALIDATION = 3
EXIT_NUMERICAL = 4


def _fmt(v):
    return format(float(v), ".17g")


def read_config(path) -> dict:
    """Flat key = value pairs; later keys win; '#' starts a comment."""
    out = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SchemaError(f"{path}:{line_no}: expected key = value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _merged_option(args, config, key, default=None):
    cli_val = getattr(args, key.replace(".", "_"), None)
    if cli_val is not None:
        return cli_val
    if key in config:
        return config[key]
    return default


def _family_from_options(args, config) -> families.ObservationFamily:
    kind = _merged_option(args, config, "family", families.BERNOULLI_LOGIT)
    if kind == families.BERNOULLI_LOGIT:
        return families.bernoulli_logit()
    if kind == families.BINOMIAL_LOGIT:
        trials = int(_merged_option(args, config, "family.trials", 1))
        return families.binomial_logit(trials)
    if kind == families.POISSON_LOG:
        return families.poisson_log()
    if kind == families.GAUSSIAN_IDENTITY:
        var = float(_merged_option(args, config, "family.noise_var", 1.0))
        return families.gaussian_identity(var)
    if kind == families.ORDINAL_PROBIT:
        raw = _merged_option(args, config, "family.thresholds", "0.0 1.0")
        thresholds = [float(v) for v in str(raw).replace(",", " ").split()]
        sd = float(_merged_option(args, config, "family.noise_sd", 1.0))
        return families.ordinal_probit(thresholds, noise_sd=sd)
    raise ValidationError(f"unknown family {kind!r}")


def _spec_from_options(args, config) -> ModelSpec:
    family = _family_from_options(args, config)
    basis_raw = _merged_option(args, config, "basis.size", 8)
    basis_size = AUTO if str(basis_raw) == AUTO else int(basis_raw)
    init_raw = _merged_option(args, config, "kernel.init")
    kernel_init = None
    if init_raw is not None:
        vals = [float(v) for v in str(init_raw).replace(",", " ").split()]
        kernel_init = np.log(np.asarray(vals, dtype=float))
    return ModelSpec(
        family=family,
        kernel_kind=_merged_option(args, config, "kernel.kind", kernels.SE_LINEAR),
        kernel_init=kernel_init,
        basis_size=basis_size,
        knot_method=_merged_option(args, config, "basis.knots", EQUAL_SPACED),
        objective=_merged_option(args, config, "objective", "nested"),
        max_evals=int(_merged_option(args, config, "optimizer.max_evals", 20000)),
        tol=float(_merged_option(args, config, "optimizer.tol", 1e-7)),
        restarts=int(_merged_option(args, config, "restarts", 2)),
        seed=int(_merged_option(args, config, "seed", 0)),
        jitter=float(_merged_option(args, config, "jitter", kernels.DEFAULT_JITTER)),
        standardize_x=str(_merged_option(args, config, "standardize_x", "0"))
        in ("1", "true", "yes"),
    )


def _schema_from_options(args, config, family, clustered=False) -> CsvSchema:
    q = int(_merged_option(args, config, "data.q", 1))
    p = int(_merged_option(args, config, "data.p", 1))
    r = int(_merged_option(args, config, "data.r", 0))
    return CsvSchema(
        family=family,
        x_cols=tuple(f"x{i + 1}" for i in range(q)),
        u_cols=tuple(f"u{i + 1}" for i in range(p)),
        w_cols=tuple(f"w{i + 1}" for i in range(r)),
        cluster_col="cluster_id" if clustered else None,
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args, config) -> int:
    cfg = simulate.SimConfig(scenario=args.scenario,
                             n_batches=int(_merged_option(args, config, "M", 60)),
                             n_per_batch=int(_merged_option(args, config, "Nm", 40)),
                             seed=int(_merged_option(args, config, "seed", 0)))
    dataset, truth = simulate.simulate(cfg)
    save_csv(dataset, args.out)
    if args.truth_out:
        import csv as _csv
        with open(args.truth_out, "w", newline="") as fh:
            writer = _csv.writer(fh)
            header = ["batch_id", "t", "y"]
            theta_names = []
            if truth.theta is not None:
                theta_names = ["w1", "v1", "a1"]
            writer.writerow(header + theta_names)
            for batch, y in zip(dataset.batches, truth.latent):
                for i in range(batch.n_obs):
                    row = [batch.batch_id, _fmt(batch.times[i]), _fmt(y[i])]
                    if theta_names:
                        row += [_fmt(v) for v in truth.theta]
                    writer.writerow(row)
    print(f"wrote {dataset.n_batches} batches to {args.out}")
    return EXIT_OK


def _fit_report(model: FittedModel, path) -> None:
    lines = [
        "log_marginal = " + _fmt(model.log_marginal),
        "bic = " + _fmt(model.bic),
        "n_parameters = " + str(model.n_parameters),
        "kernel.kind = " + model.kernel.kind,
    ]
    names = kernels.param_names(model.kernel.kind, model.kernel.q)
    for name, value in zip(names, np.exp(model.kernel.log_params)):
        lines.append(f"kernel.{name} = " + _fmt(value))
    if model.family.thresholds is not None:
        lines.append("thresholds = " +
                     " ".join(_fmt(b) for b in model.family.thresholds))
    if model.gamma is not None:
        lines.append("gamma = " + " ".join(_fmt(g) for g in model.gamma))
    total_n = sum(b.n_obs for b in model.batches)
    regret = sum(regret_term(p.gram, 1.0) for p in model.per_batch)
    lines.append("regret_per_point = " + _fmt(regret / total_n))
    lines.append("basis.size = " + str(model.basis.size))
    text = "\n".join(lines) + "\n"
    with open(path, "w") as fh:
        fh.write(text)


def cmd_fit(args, config) -> int:
    spec = _spec_from_options(args, config)
    if args.clustered:
        gamma_raw = _merged_option(args, config, "gamma.init", "1.0")
        gamma = np.asarray([float(v) for v in str(gamma_raw).replace(",", " ").split()])
        schema = _schema_from_options(args, config, spec.family, clustered=True)
        data = load_clustered_csv(args.data, schema, gamma)
        model = fit_clustered(data, spec)
    else:
        schema = _schema_from_options(args, config, spec.family)
        data = load_csv(args.data, schema)
        model = fit(data, spec)
    save_model(model, args.out)
    if args.report:
        _fit_report(model, args.report)
    print(f"fitted {len(model.batches)} batches: log_marginal={model.log_marginal:.6f} "
          f"bic={model.bic:.6f}")
    return EXIT_OK


def _predict_rows(model: FittedModel, data, laplace: bool):
    """One output row per input observation, grouped by batch.

    Batches whose id matches a training batch are predicted through that
    batch's stored posterior; unknown ids get the new-batch mixture.
    """
    known = {b.batch_id: i for i, b in enumerate(model.batches)}
    ordinal = model.family.kind == families.ORDINAL_PROBIT
    r = model.family.n_categories if ordinal else 0
    rows = []
    for batch in data.batches:
        if batch.batch_id in known and model.cluster_ids is None:
            idx = known[batch.batch_id]
            bp = predict.BatchPosterior(
                model, model.transform_x(model.batches[idx].covariates),
                model.per_batch[idx])
            train_batch = model.batches[idx]
            for i in range(batch.n_obs):
                if laplace:
                    pd = predict.predict_response_laplace(
                        model, train_batch, batch.times[i], batch.covariates[i],
                        batch.scalar_covariates)
                else:
                    m, s2 = bp.latent_at(batch.covariates[i])
                    mu_star = model.mean_value(batch.times[i], batch.scalar_covariates)
                    mean, var, probs = predict.response_moments(
                        model.family, mu_star, m, s2)
                    pd = predict.PredictiveDistribution(m, s2, mean, var, probs)
                rows.append((batch.batch_id, batch.times[i], pd))
        else:
            for i in range(batch.n_obs):
                pd = predict.predict_new_batch(model, batch.times[i],
                                               batch.covariates[i],
                                               batch.scalar_covariates)
                rows.append((batch.batch_id, batch.times[i], pd))
    return rows, r


def cmd_predict(args, config) -> int:
    import csv as _csv
    model = load_model(args.model)
    schema = _schema_from_options(args, config, model.family)
    data = load_csv(args.data, schema)
    rows, r = _predict_rows(model, data, args.laplace)
    can_classify = model.family.kind in (families.BERNOULLI_LOGIT,
                                         families.ORDINAL_PROBIT)
    with open(args.out, "w", newline="") as fh:
        writer = _csv.writer(fh)
        header = ["batch_id", "t", "latent_mean", "latent_var",
                  "response_mean", "response_var", "predicted_class"]
        header += [f"p_{j}" for j in range(r)]
        writer.writerow(header)
        for bid, t, pd in rows:
            cls = predict.classify(pd, model.family) if can_classify else ""
            row = [bid, _fmt(t), _fmt(pd.latent_mean), _fmt(pd.latent_var),
                   _fmt(pd.response_mean), _fmt(pd.response_var), cls]
            if r:
                row += [_fmt(p) for p in pd.category_probs]
            writer.writerow(row)
    print(f"wrote {len(rows)} predictions to {args.out}")
    return EXIT_OK


def cmd_evaluate(args, config) -> int:
    import csv as _csv
    model = load_model(args.model)
    schema = _schema_from_options(args, config, model.family)
    data = load_csv(args.data, schema)
    if data.family_tag != model.family.kind:
        raise ValidationError("family mismatch between model and data")
    truth = {}
    if args.truth:
        with open(args.truth, newline="") as fh:
            for row in _csv.DictReader(fh):
                truth.setdefault(row["batch_id"], []).append(float(row["y"]))
    seed = int(_merged_option(args, config, "seed", 0))
    fraction = float(_merged_option(args, config, "observed.fraction", 2.0 / 3.0))
    can_classify = model.family.kind in (families.BERNOULLI_LOGIT,
                                         families.ORDINAL_PROBIT)
    out_rows = []
    for bi, batch in enumerate(data.batches):
        obs, test = reproduce.split_indices(batch.n_obs, args.mode, fraction,
                                            (seed, bi))
        preds, classes = [], []
        if args.mode == "new-batch":
            for i in test:
                pd = predict.predict_new_batch(model, batch.times[i],
                                               batch.covariates[i],
                                               batch.scalar_covariates)
                preds.append(pd)
        else:
            batch_obs = reproduce.subset_batch(batch, obs)
            post = predict.posterior_for(model, batch_obs)
            for i in test:
                pd = predict.predict_response(model, batch_obs, batch.times[i],
                                              batch.covariates[i],
                                              batch.scalar_covariates,
                                              posterior=post)
                preds.append(pd)
        row = {"batch_id": batch.batch_id, "n_test": len(test)}
        if can_classify:
            classes = [predict.classify(pd, model.family) for pd in preds]
            row["error_rate"] = float(np.mean(
                [c != int(batch.responses[i]) for c, i in zip(classes, test)]))
        if batch.batch_id in truth:
            y = np.asarray(truth[batch.batch_id])[test]
            y_hat = np.array([model.mean_value(batch.times[i], batch.scalar_covariates)
                              + preds[k].latent_mean for k, i in enumerate(test)])
            m = simulate.metrics(y_hat, y)
            row["rmse"] = m["rmse"]
            row["pearson_r"] = m.get("pearson_r", "")
        out_rows.append(row)
    cols = []
    for row in out_rows:
        for k in row:
            if k not in cols:
                cols.append(k)
    with open(args.out, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(cols)
        for row in out_rows:
            writer.writerow([row.get(c, "") for c in cols])
    print(f"wrote metrics for {len(out_rows)} batches to {args.out}")
    return EXIT_OK


def cmd_reproduce(args, config) -> int:
    rows = reproduce.run_table(
        args.table,
        reps=int(_merged_option(args, config, "reps",
                                30 if args.table == "ORDINAL" else 10)),
        seed=int(_merged_option(args, config, "seed", 0)),
        workers=args.workers,
        n_batches=args.M,
        n_per_batch=args.Nm,
        restarts=int(_merged_option(args, config, "restarts", 0)))
    reproduce.write_rows(rows, args.out)
    n_failed = sum(1 for r in rows if str(r.get("status", "")).startswith("failed"))
    print(f"wrote {len(rows)} rows to {args.out} ({n_failed} failed)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ggpfr",
                                     description="Latent-GP functional regression "
                                                 "for non-Gaussian curves")
    parser.add_argument("--config", help="flat key=value option file")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate a study dataset")
    p_sim.add_argument("--scenario", required=True, choices=simulate.SCENARIOS)
    p_sim.add_argument("--M", type=int, default=None, help="number of batches")
    p_sim.add_argument("--Nm", type=int, default=None, help="points per batch")
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--truth-out", dest="truth_out")

    p_fit = sub.add_parser("fit", help="fit a model to a CSV dataset")
    p_fit.add_argument("--data", required=True)
    p_fit.add_argument("--out", required=True, help="model file path")
    p_fit.add_argument("--report", help="key-value fit report path")
    p_fit.add_argument("--clustered", action="store_true")
    for key in ("family", "kernel.kind", "objective", "basis.knots"):
        p_fit.add_argument("--" + key, dest=key.replace(".", "_"))
    p_fit.add_argument("--basis.size", dest="basis_size")
    p_fit.add_argument("--seed", type=int, default=None)
    p_fit.add_argument("--restarts", type=int, default=None)
    p_fit.add_argument("--standardize-x", dest="standardize_x",
                       action="store_const", const="1")

    p_pred = sub.add_parser("predict", help="predict at test rows")
    p_pred.add_argument("--model", required=True)
    p_pred.add_argument("--data", required=True)
    p_pred.add_argument("--out", required=True)
    p_pred.add_argument("--laplace", action="store_true",
                        help="use the joint-Laplace prediction path")

    p_eval = sub.add_parser("evaluate", help="split, predict, and score")
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--mode", default="interpolate",
                        choices=("interpolate", "extrapolate", "new-batch"))
    p_eval.add_argument("--truth", help="truth CSV with latent y values")
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--out", required=True)

    p_rep = sub.add_parser("reproduce", help="run a study table end to end")
    p_rep.add_argument("--table", required=True, choices=reproduce.TABLES)
    p_rep.add_argument("--reps", type=int, default=None)
    p_rep.add_argument("--seed", type=int, default=None)
    p_rep.add_argument("--workers", type=int, default=None)
    p_rep.add_argument("--M", type=int, default=None)
    p_rep.add_argument("--Nm", type=int, default=None)
    p_rep.add_argument("--out", required=True)
    return parser


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "reproduce": cmd_reproduce,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    config = {}
    try:
        if args.config:
            config = read_config(args.config)
        return _COMMANDS[args.command](args, config)
    except FileNotFoundError as exc:
        print(f"error: IoError: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: IoError: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SchemaError, ValidationError, ModelFormatError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except GgpfrError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
