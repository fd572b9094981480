"""Result serialization, trajectory emission, and run manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import math

import numpy as np

from .estimation import FitResult
from .moments import conditional_growth_moments


def emit_trajectories(result: FitResult, time_grid) -> list[tuple[int, float, float]]:
    """Class-specific growth-factor-implied mean curves.

    Each class's curve is evaluated from its conditional growth-factor
    means and functional form only; the state-effect contribution of the
    TVC is deliberately excluded so the curve shows what the growth
    factors alone imply.  Rows are (class, t, value) with 1-based class
    labels ordered as in the fit.
    """
    if not result.converged:
        raise ValueError("cannot emit trajectories from a failed fit")
    grid = np.asarray(time_grid, dtype=float)
    rows = []
    for k, params in enumerate(result.estimates.classes):
        mu, _ = conditional_growth_moments(params)
        values = params.form.curve(mu, grid)
        rows.extend((k + 1, float(t), float(v)) for t, v in zip(grid, values))
    return rows


def write_trajectories(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class", "t", "value"])
        for cls, t, value in rows:
            writer.writerow([cls, format(t, ".17g"), format(value, ".17g")])


def fit_result_document(result: FitResult) -> dict:
    """Key-value tree summarizing a fit (estimates, SEs, 95% CIs, fit info)."""
    doc = {
        "status": {
            "converged": result.converged,
            "attempts_used": result.status.attempts_used,
            "message": result.status.message,
        },
        "n_individuals": result.n_individuals,
        "n_free_parameters": result.n_free_parameters,
        "model": {
            "classes": result.spec.n_classes,
            "form": result.spec.form,
            "decomposition": result.spec.decomposition.value if result.spec.decomposition else None,
            "has_tvc": result.spec.has_tvc,
            "has_tic": result.spec.has_tic,
            "n_gating_tics": result.spec.n_gating_tics,
        },
    }
    if result.converged:
        doc["fit"] = {
            "loglik": result.loglik,
            "minus2ll": -2.0 * result.loglik,
            "aic": result.aic,
            "bic": result.bic,
        }
        doc["mixing_proportions"] = [float(v) for v in result.mixing_proportions]
        params = {}
        for i, name in enumerate(result.names):
            entry = {"estimate": float(result.values[i])}
            if result.standard_errors is not None:
                entry["se"] = float(result.standard_errors[i])
                entry["ci95"] = [float(result.ci_lower[i]), float(result.ci_upper[i])]
            params[name] = entry
        doc["parameters"] = params
    return doc


def write_fit_result(result: FitResult, path, posterior_path=None) -> None:
    doc = fit_result_document(result)
    if posterior_path is not None and result.posterior is not None:
        with open(posterior_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([f"class{k + 1}" for k in range(result.posterior.shape[1])])
            for row in result.posterior:
                writer.writerow([format(v, ".17g") for v in row])
        doc["posterior_path"] = str(posterior_path)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_metrics_csv(report, path) -> None:
    """Parameter metrics laid out one row per parameter."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["parameter", "truth", "relative_bias", "empirical_se",
                         "relative_rmse", "coverage", "absolute_scale"])
        for p in report.parameters:
            writer.writerow([
                p.name,
                format(p.truth, ".17g"),
                format(p.relative_bias, ".17g"),
                format(p.empirical_se, ".17g") if not math.isnan(p.empirical_se) else "",
                format(p.relative_rmse, ".17g"),
                format(p.coverage, ".17g") if not math.isnan(p.coverage) else "",
                int(p.absolute_scale),
            ])
        writer.writerow([])
        writer.writerow(["mean_accuracy", format(report.mean_accuracy, ".17g")])
        writer.writerow(["convergence_rate", format(report.convergence_rate, ".17g")])
        writer.writerow(["reps_used", report.reps_used])
        writer.writerow(["reps_attempted", report.reps_attempted])
        writer.writerow(["partial", int(report.partial)])


def _hash_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(path, config: dict, input_paths: list, output_paths: list) -> None:
    """Reproducibility manifest: config echo, seed, and input content hashes."""
    manifest = {
        "config": config,
        "inputs": {str(p): _hash_file(p) for p in input_paths},
        "outputs": [str(p) for p in output_paths],
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
