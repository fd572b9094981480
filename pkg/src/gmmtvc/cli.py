"""Command-line interface.

Subcommands: simulate (condition file -> dataset), fit (dataset ->
estimates), enumerate (dataset -> fit-information table), montecarlo
(condition -> metrics report), trajectories (fit document -> curves), and
kappa (two posterior matrices -> agreement).  Every run writes a manifest
with the configuration echo and content hashes of its inputs.

Exit codes: 0 success, 1 validation error, 2 fit failure, 3 partial
Monte Carlo report.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import reports
from .classification import latent_kappa
from .dataio import read_dataset, standardize_tvc, write_dataset
from .estimation import FitOptions, ModelSpec, enumerate_classes, fit
from .forms import FORM_KINDS
from .simulation import (
    MonteCarloOptions,
    SimulationCondition,
    generate_dataset,
    run_condition,
)


class CliError(Exception):
    pass


def _add_common(parser):
    parser.add_argument("--seed", type=int, default=0, help="random seed")
    parser.add_argument("--out", required=True, help="output path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmmtvc", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a dataset from a condition file")
    p.add_argument("--condition", required=True)
    _add_common(p)

    p = sub.add_parser("fit", help="fit a mixture to a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--format", choices=["wide", "long"], default="wide")
    p.add_argument("--classes", type=int, default=1)
    p.add_argument("--form", choices=sorted(FORM_KINDS), default="bilinear")
    p.add_argument("--decomposition", choices=["slopes", "changes"], default="slopes")
    p.add_argument("--no-tvc", action="store_true", help="drop the TVC block from the model")
    p.add_argument("--no-tic", action="store_true", help="drop the second-type TIC from the model")
    p.add_argument("--gating-tics", type=int, default=2)
    p.add_argument("--starts", type=int, default=10, help="maximum optimization attempts")
    p.add_argument("--standardize-tvc", action="store_true")
    p.add_argument("--no-se", action="store_true", help="skip standard errors")
    p.add_argument("--posterior", default=None, help="posterior matrix CSV path")
    _add_common(p)

    p = sub.add_parser("enumerate", help="fit 1..K covariate-free models and tabulate AIC/BIC")
    p.add_argument("--data", required=True)
    p.add_argument("--format", choices=["wide", "long"], default="wide")
    p.add_argument("--classes", type=int, required=True, help="largest class count to fit")
    p.add_argument("--form", choices=sorted(FORM_KINDS), default="bilinear")
    p.add_argument("--starts", type=int, default=10)
    _add_common(p)

    p = sub.add_parser("montecarlo", help="run replications of a simulation condition")
    p.add_argument("--condition", required=True)
    p.add_argument("--reps", type=int, required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--starts", type=int, default=10)
    p.add_argument("--log", default=None, help="per-replication JSONL log path")
    _add_common(p)

    p = sub.add_parser("trajectories", help="emit class mean curves from a fit document")
    p.add_argument("--fit", required=True, help="fit JSON written by the fit subcommand")
    p.add_argument("--t-min", type=float, required=True)
    p.add_argument("--t-max", type=float, required=True)
    p.add_argument("--points", type=int, default=101)
    _add_common(p)

    p = sub.add_parser("kappa", help="latent kappa between two posterior matrices")
    p.add_argument("--a", required=True, help="posterior CSV of the first solution")
    p.add_argument("--b", required=True, help="posterior CSV of the second solution")
    p.add_argument("--bootstrap", type=int, default=1000)
    _add_common(p)

    return parser


def _read_posterior_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    if not rows or any(len(r) != len(header) for r in rows):
        raise CliError(f"malformed posterior matrix {path}")
    return np.asarray(rows)


def _load_condition(path) -> SimulationCondition:
    with open(path) as fh:
        data = json.load(fh)
    return SimulationCondition.from_dict(data)


def _cmd_simulate(args) -> int:
    condition = _load_condition(args.condition)
    dataset = generate_dataset(condition, args.seed)
    write_dataset(dataset, args.out)
    reports.write_manifest(args.out + ".manifest.json", vars(args), [args.condition], [args.out])
    return 0


def _cmd_fit(args) -> int:
    dataset = read_dataset(args.data, args.format)
    if args.standardize_tvc:
        dataset, transform = standardize_tvc(dataset)
    spec = ModelSpec(
        n_classes=args.classes,
        form=args.form,
        decomposition=args.decomposition,
        has_tvc=not args.no_tvc,
        has_tic=not args.no_tic,
        n_gating_tics=args.gating_tics if args.classes > 1 else 0,
    )
    options = FitOptions(max_attempts=args.starts, seed=args.seed, compute_se=not args.no_se)
    result = fit(dataset, spec, options)
    posterior_path = args.posterior or (args.out + ".posterior.csv")
    reports.write_fit_result(result, args.out, posterior_path if result.converged else None)
    outputs = [args.out] + ([posterior_path] if result.converged else [])
    reports.write_manifest(args.out + ".manifest.json", vars(args), [args.data], outputs)
    if not result.converged:
        print(f"fit failed: {result.status.message}", file=sys.stderr)
        return 2
    print(f"converged in {result.status.attempts_used} attempt(s); "
          f"-2ll={-2 * result.loglik:.2f} AIC={result.aic:.2f} BIC={result.bic:.2f}")
    return 0


def _cmd_enumerate(args) -> int:
    dataset = read_dataset(args.data, args.format)
    spec = ModelSpec(n_classes=1, form=args.form, decomposition="slopes",
                     has_tvc=False, has_tic=False, n_gating_tics=0)
    table = enumerate_classes(dataset, spec, args.classes,
                              FitOptions(max_attempts=args.starts, seed=args.seed, compute_se=False))
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["classes", "converged", "minus2ll", "aic", "bic",
                         "residual_variances", "mixing_proportions"])
        for row in table.rows:
            writer.writerow([
                row.n_classes,
                int(row.converged),
                format(row.minus2ll, ".17g"),
                format(row.aic, ".17g"),
                format(row.bic, ".17g"),
                ";".join(format(v, ".17g") for v in row.residual_variances),
                ";".join(format(v, ".17g") for v in row.mixing_proportions),
            ])
        writer.writerow([])
        writer.writerow(["selected_k", table.selected_k])
    reports.write_manifest(args.out + ".manifest.json", vars(args), [args.data], [args.out])
    print(f"selected K = {table.selected_k} by smallest BIC")
    return 0


def _cmd_montecarlo(args) -> int:
    condition = _load_condition(args.condition)
    spec = condition.model_spec()
    options = MonteCarloOptions(
        seed=args.seed,
        jobs=args.jobs,
        fit_options=FitOptions(max_attempts=args.starts),
        log_path=args.log,
    )
    report = run_condition(condition, spec, args.reps, options)
    reports.write_metrics_csv(report, args.out)
    inputs = [args.condition]
    outputs = [args.out] + ([args.log] if args.log else [])
    reports.write_manifest(args.out + ".manifest.json", vars(args), inputs, outputs)
    print(f"{report.reps_used}/{args.reps} converged replications "
          f"({report.reps_attempted} attempts); mean accuracy {report.mean_accuracy:.3f}")
    return 3 if report.partial else 0


def _cmd_trajectories(args) -> int:
    with open(args.fit) as fh:
        doc = json.load(fh)
    if not doc.get("status", {}).get("converged"):
        print("fit document records a failed fit", file=sys.stderr)
        return 2
    result = _result_from_document(doc)
    grid = np.linspace(args.t_min, args.t_max, args.points)
    rows = reports.emit_trajectories(result, grid)
    reports.write_trajectories(rows, args.out)
    reports.write_manifest(args.out + ".manifest.json", vars(args), [args.fit], [args.out])
    return 0


def _result_from_document(doc: dict):
    """Rebuild enough of a FitResult from its JSON document for reporting."""
    from .estimation import FitResult, FitStatus, GatingParameters, MixtureParameters, ParameterLayout
    from .moments import ClassParameters
    from .forms import make_form

    model = doc["model"]
    params = doc["parameters"]
    K = model["classes"]
    spec = ModelSpec(
        n_classes=K,
        form=model["form"],
        decomposition=model["decomposition"] or "slopes",
        has_tvc=model["has_tvc"],
        has_tic=model["has_tic"],
        n_gating_tics=model["n_gating_tics"],
    )
    C = spec.n_factors

    def value(name):
        return params[name]["estimate"]

    def vec(k, base, size):
        return np.array([value(f"c{k}.{base}_{i}") for i in range(size)])

    def sym(k, base, size):
        m = np.zeros((size, size))
        for i in range(size):
            for j in range(i + 1):
                m[i, j] = m[j, i] = value(f"c{k}.{base}_{min(i, j)}{max(i, j)}")
        return m

    classes = []
    for k in range(1, K + 1):
        coef_name = FORM_KINDS[spec.form].coefficient_name
        form = make_form(spec.form, value(f"c{k}.{coef_name}") if coef_name else None)
        kwargs = {}
        if spec.has_tvc:
            n_rates = 1 + sum(1 for n in params if n.startswith(f"c{k}.rate_"))
            rates = np.ones(n_rates)
            for j in range(2, n_rates + 1):
                rates[j - 1] = value(f"c{k}.rate_{j}")
            kwargs.update(
                mu_eta_x=vec(k, "mu_eta_x", 2),
                phi_eta_x=sym(k, "phi_eta_x", 2),
                rates=rates,
                beta_tvc=vec(k, "beta_tvc", C),
                kappa=value(f"c{k}.kappa"),
                theta_x=value(f"c{k}.theta_x"),
                theta_xy=value(f"c{k}.theta_xy"),
            )
        if spec.has_tic:
            kwargs.update(
                mu_x=value(f"c{k}.mu_x"),
                phi_x=value(f"c{k}.phi_x"),
                beta_tic=vec(k, "beta_tic", C),
            )
        if spec.has_tic and spec.has_tvc:
            kwargs["rho_bl"] = value(f"c{k}.rho_bl")
        classes.append(ClassParameters(
            form=form,
            alpha_y=vec(k, "alpha_y", C),
            psi_eta_y=sym(k, "psi_y", C),
            theta_y=value(f"c{k}.theta_y"),
            **kwargs,
        ))
    if K > 1:
        gating = GatingParameters(
            np.array([value(f"gating{k}.intercept") for k in range(2, K + 1)]),
            np.array([[value(f"gating{k}.xg{i + 1}") for i in range(spec.n_gating_tics)]
                      for k in range(2, K + 1)]),
        )
    else:
        gating = GatingParameters.empty()
    estimates = MixtureParameters(classes, gating)
    return FitResult(
        spec=spec,
        status=FitStatus(True, doc["status"]["attempts_used"], "reloaded"),
        loglik=doc["fit"]["loglik"],
        aic=doc["fit"]["aic"],
        bic=doc["fit"]["bic"],
        n_free_parameters=doc["n_free_parameters"],
        n_individuals=doc["n_individuals"],
        estimates=estimates,
    )


def _cmd_kappa(args) -> int:
    post_a = _read_posterior_csv(args.a)
    post_b = _read_posterior_csv(args.b)
    kappa, ci = latent_kappa(post_a, post_b, n_bootstrap=args.bootstrap, seed=args.seed)
    doc = {"kappa": kappa, "ci95": list(ci), "n_bootstrap": args.bootstrap}
    with open(args.out, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    reports.write_manifest(args.out + ".manifest.json", vars(args), [args.a, args.b], [args.out])
    print(f"latent kappa = {kappa:.4f}, 95% CI ({ci[0]:.4f}, {ci[1]:.4f})")
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "fit": _cmd_fit,
    "enumerate": _cmd_enumerate,
    "montecarlo": _cmd_montecarlo,
    "trajectories": _cmd_trajectories,
    "kappa": _cmd_kappa,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, CliError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
