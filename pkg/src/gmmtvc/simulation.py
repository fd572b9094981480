"""Monte Carlo study machinery.

Covers condition definitions (sample size, gating truth, per-class growth
and TVC truth, variance-explained targets), the step-by-step data
generation, the four performance metrics, and a resumable replication
driver that loops generate -> fit -> align-to-truth -> accumulate until
the requested number of converged solutions is reached.
"""

from __future__ import annotations

import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .classification import accuracy
from .dataio import LongitudinalDataset
from .estimation import (
    FitOptions,
    FitResult,
    GatingParameters,
    LoglikEngine,
    MixtureParameters,
    ModelSpec,
)
from .estimation import fit as fit_mixture
from .forms import TvcDecomposition, make_form, state_loadings
from .moments import ClassParameters, conditional_growth_moments


@dataclass(frozen=True)
class ClassTruth:
    """Generating values for one latent class (bilinear-spline outcome)."""

    outcome_mean: np.ndarray
    outcome_cov: np.ndarray
    knot: float
    tvc_mean: np.ndarray
    tvc_cov: np.ndarray
    rates: np.ndarray
    kappa: float
    theta_y: float = 1.0
    theta_x: float = 1.0
    resid_corr: float = 0.3
    rho_bl: float = 0.3
    tic_mean: float = 0.0
    tic_var: float = 1.0
    trait_share: float = 0.0
    tic_share: float = 0.0

    def __post_init__(self):
        for name in ("outcome_mean", "outcome_cov", "tvc_mean", "tvc_cov", "rates"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    def regression_coefficients(self):
        """Trait/TIC effects implied by the variance-explained targets.

        Each growth factor's total variance is psi_cc / (1 - f) where f is
        the jointly explained fraction; the shares then pin down the two
        coefficients (taken positive) given unit-normalized covariates.
        """
        f_total = (self.trait_share + self.tic_share
                   + 2.0 * self.rho_bl * math.sqrt(self.trait_share * self.tic_share))
        if f_total >= 1.0:
            raise ValueError("variance-explained shares must total below 1")
        total_var = np.diag(self.outcome_cov) / (1.0 - f_total)
        beta_tvc = np.sqrt(self.trait_share * total_var / self.tvc_cov[0, 0])
        beta_tic = np.sqrt(self.tic_share * total_var / self.tic_var)
        return beta_tic, beta_tvc

    def class_parameters(self) -> ClassParameters:
        beta_tic, beta_tvc = self.regression_coefficients()
        return ClassParameters(
            form=make_form("bilinear", self.knot),
            alpha_y=self.outcome_mean,
            psi_eta_y=self.outcome_cov,
            theta_y=self.theta_y,
            mu_eta_x=self.tvc_mean,
            phi_eta_x=self.tvc_cov,
            rates=self.rates,
            beta_tvc=beta_tvc,
            kappa=self.kappa,
            theta_x=self.theta_x,
            theta_xy=self.resid_corr * math.sqrt(self.theta_x * self.theta_y),
            mu_x=self.tic_mean,
            phi_x=self.tic_var,
            beta_tic=beta_tic,
            rho_bl=self.rho_bl,
        )


@dataclass(frozen=True)
class SimulationCondition:
    """One cell of the simulation design."""

    n: int
    nominal_times: np.ndarray
    delta: float
    gating_intercepts: np.ndarray
    gating_coefficients: np.ndarray
    classes: tuple
    decomposition: TvcDecomposition
    xg_correlation: float = 0.3
    mahalanobis_d: float = 0.86

    def __post_init__(self):
        object.__setattr__(self, "nominal_times", np.asarray(self.nominal_times, dtype=float))
        object.__setattr__(self, "gating_intercepts", np.atleast_1d(np.asarray(self.gating_intercepts, dtype=float)))
        object.__setattr__(self, "gating_coefficients", np.atleast_2d(np.asarray(self.gating_coefficients, dtype=float)))
        object.__setattr__(self, "classes", tuple(self.classes))
        if isinstance(self.decomposition, str):
            object.__setattr__(self, "decomposition", TvcDecomposition.parse(self.decomposition))
        K = len(self.classes)
        if K < 1:
            raise ValueError("need at least one class")
        if K > 1 and self.gating_intercepts.size != K - 1:
            raise ValueError("gating intercepts must cover classes 2..K")
        J = self.nominal_times.size
        for c in self.classes:
            if c.rates.size != J - 1:
                raise ValueError("rate schedules must have length J-1")
            if not (self.nominal_times[0] < c.knot < self.nominal_times[-1]):
                raise ValueError("knots must lie inside the nominal time range")
            np.linalg.cholesky(c.outcome_cov)
            np.linalg.cholesky(c.tvc_cov)
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        if 2 * self.delta >= np.min(np.diff(self.nominal_times)):
            raise ValueError("time window would allow non-increasing times")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def n_waves(self) -> int:
        return self.nominal_times.size

    def gating(self) -> GatingParameters:
        if self.n_classes == 1:
            return GatingParameters.empty()
        return GatingParameters(self.gating_intercepts, self.gating_coefficients)

    def true_parameters(self) -> MixtureParameters:
        return MixtureParameters([c.class_parameters() for c in self.classes], self.gating())

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            n_classes=self.n_classes,
            form="bilinear",
            decomposition=self.decomposition,
            has_tvc=True,
            has_tic=True,
            n_gating_tics=self.gating_coefficients.shape[1] if self.n_classes > 1 else 2,
        )

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "nominal_times": self.nominal_times.tolist(),
            "delta": self.delta,
            "gating_intercepts": self.gating_intercepts.tolist(),
            "gating_coefficients": self.gating_coefficients.tolist(),
            "xg_correlation": self.xg_correlation,
            "decomposition": self.decomposition.value,
            "mahalanobis_d": self.mahalanobis_d,
            "classes": [
                {
                    "outcome_mean": c.outcome_mean.tolist(),
                    "outcome_cov": c.outcome_cov.tolist(),
                    "knot": c.knot,
                    "tvc_mean": c.tvc_mean.tolist(),
                    "tvc_cov": c.tvc_cov.tolist(),
                    "rates": c.rates.tolist(),
                    "kappa": c.kappa,
                    "theta_y": c.theta_y,
                    "theta_x": c.theta_x,
                    "resid_corr": c.resid_corr,
                    "rho_bl": c.rho_bl,
                    "tic_mean": c.tic_mean,
                    "tic_var": c.tic_var,
                    "trait_share": c.trait_share,
                    "tic_share": c.tic_share,
                }
                for c in self.classes
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SimulationCondition":
        classes = tuple(ClassTruth(**c) for c in data["classes"])
        return cls(
            n=data["n"],
            nominal_times=data["nominal_times"],
            delta=data["delta"],
            gating_intercepts=data["gating_intercepts"],
            gating_coefficients=data["gating_coefficients"],
            classes=classes,
            decomposition=data["decomposition"],
            xg_correlation=data.get("xg_correlation", 0.3),
            mahalanobis_d=data.get("mahalanobis_d", 0.86),
        )


TABLE3_RATES = {
    1: (np.arange(10, 1, -1) / 10.0, np.arange(10, 1, -1) / 10.0),
    2: (np.arange(10, 1, -1) / 10.0, np.arange(10, 1, -1) / 10.0),
    3: (1.0 - 0.12 * np.arange(9), 1.0 - 0.08 * np.arange(9)),
}
TABLE3_TVC_MEANS = {
    1: ((0.0, 5.0), (0.0, 5.0)),
    2: ((0.0, 4.0), (0.0, 6.0)),
    3: ((0.0, 5.0), (0.0, 5.0)),
}


def reference_condition(n: int = 500, scenario: int = 2, knots=(5.0, 4.0),
                        balanced: bool = True, theta_y: float = 1.0,
                        kappas=(0.3, 0.6),
                        decomposition=TvcDecomposition.INTERVAL_SLOPES) -> SimulationCondition:
    """Two-class reference design for the simulation study.

    Ten equally spaced waves with a +/-0.25 time window, gating truth with
    unit-normal correlated first-type TICs, bilinear-spline outcome, and
    TVC scenarios differing in shape-factor means or rate schedules.  The
    trait and TIC jointly explain about 13% (class 1) and 26% (class 2) of
    the growth-factor variance.
    """
    rates1, rates2 = TABLE3_RATES[scenario]
    mu1, mu2 = TABLE3_TVC_MEANS[scenario]
    psi = np.array([[25.0, 1.5, 1.5], [1.5, 1.0, 0.3], [1.5, 0.3, 1.0]])
    tvc_cov = np.array([[1.0, 0.3], [0.3, 1.0]])
    shares = ((0.07, 0.03), (0.14, 0.06))
    outcome_means = ((48.0, 4.5, 1.65), (52.0, 5.0, 1.80))
    classes = []
    for k in range(2):
        classes.append(ClassTruth(
            outcome_mean=outcome_means[k],
            outcome_cov=psi,
            knot=knots[k],
            tvc_mean=(mu1, mu2)[k],
            tvc_cov=tvc_cov,
            rates=(rates1, rates2)[k],
            kappa=kappas[k],
            theta_y=theta_y,
            theta_x=1.0,
            trait_share=shares[k][0],
            tic_share=shares[k][1],
        ))
    return SimulationCondition(
        n=n,
        nominal_times=np.arange(10.0),
        delta=0.25,
        gating_intercepts=[0.0 if balanced else 0.775],
        gating_coefficients=[[math.log(1.5), math.log(1.7)]],
        classes=classes,
        decomposition=decomposition,
    )


def three_class_condition(n: int = 500, knot_gap: float = 2.0,
                          decomposition=TvcDecomposition.INTERVAL_SLOPES) -> SimulationCondition:
    """Three-class extension of the reference design with well-spread knots."""
    psi = np.array([[25.0, 1.5, 1.5], [1.5, 1.0, 0.3], [1.5, 0.3, 1.0]])
    tvc_cov = np.array([[1.0, 0.3], [0.3, 1.0]])
    rates = TABLE3_RATES[1][0]
    mid = 5.0
    knots = (mid - knot_gap, mid, mid + knot_gap)
    outcome_means = ((48.0, 4.5, 1.65), (52.0, 5.0, 1.80), (56.0, 5.5, 1.95))
    shares = ((0.07, 0.03), (0.14, 0.06), (0.14, 0.06))
    kappas = (0.3, 0.45, 0.6)
    classes = [
        ClassTruth(
            outcome_mean=outcome_means[k],
            outcome_cov=psi,
            knot=knots[k],
            tvc_mean=(0.0, 5.0),
            tvc_cov=tvc_cov,
            rates=rates,
            kappa=kappas[k],
            trait_share=shares[k][0],
            tic_share=shares[k][1],
        )
        for k in range(3)
    ]
    return SimulationCondition(
        n=n,
        nominal_times=np.arange(10.0),
        delta=0.25,
        gating_intercepts=[0.0, 0.0],
        gating_coefficients=[[1.0, 0.0], [0.0, 1.0]],
        classes=classes,
        decomposition=decomposition,
    )


def generate_dataset(condition: SimulationCondition, seed) -> LongitudinalDataset:
    """Simulate one dataset through the structural equations.

    Memberships come from the gating probabilities evaluated at the drawn
    first-type TICs, assigning each individual to the most probable
    component; within each class the TIC, TVC growth factors, and outcome
    growth-factor deviations are drawn jointly normal, times get a uniform
    window around the nominal waves, and residuals with the class-level
    contemporaneous covariance are added to the true scores.
    """
    rng = np.random.default_rng(seed)
    n, J, K = condition.n, condition.n_waves, condition.n_classes

    xg_cov = np.array([[1.0, condition.xg_correlation], [condition.xg_correlation, 1.0]])
    n_g = condition.gating_coefficients.shape[1] if K > 1 else 2
    if n_g != 2:
        raise ValueError("conditions use two first-type TICs")
    x_g = rng.standard_normal((n, 2)) @ np.linalg.cholesky(xg_cov).T
    if K == 1:
        labels = np.zeros(n, dtype=int)
    else:
        logits = np.concatenate(
            [np.zeros((n, 1)), condition.gating_intercepts + x_g @ condition.gating_coefficients.T],
            axis=1,
        )
        labels = logits.argmax(axis=1)

    x_e = np.zeros(n)
    eta_x = np.zeros((n, 2))
    eta_y = np.zeros((n, 3))
    for k, c in enumerate(condition.classes):
        members = np.flatnonzero(labels == k)
        m = members.size
        if m == 0:
            continue
        cross = c.rho_bl * math.sqrt(c.tic_var * c.tvc_cov[0, 0])
        joint = np.zeros((3, 3))
        joint[0, 0] = c.tic_var
        joint[1:, 1:] = c.tvc_cov
        joint[0, 1] = joint[1, 0] = cross
        draw = rng.standard_normal((m, 3)) @ np.linalg.cholesky(joint).T
        draw += np.array([c.tic_mean, c.tvc_mean[0], c.tvc_mean[1]])
        x_e[members] = draw[:, 0]
        eta_x[members] = draw[:, 1:]
        zeta = rng.standard_normal((m, 3)) @ np.linalg.cholesky(c.outcome_cov).T
        beta_tic, beta_tvc = c.regression_coefficients()
        eta_y[members] = (c.outcome_mean
                          + np.outer(draw[:, 0], beta_tic)
                          + np.outer(draw[:, 1], beta_tvc)
                          + zeta)

    times = condition.nominal_times + rng.uniform(-condition.delta, condition.delta, size=(n, J))
    dt = np.diff(times, axis=1)

    x_true = np.zeros((n, J))
    y_true = np.zeros((n, J))
    for k, c in enumerate(condition.classes):
        members = np.flatnonzero(labels == k)
        if members.size == 0:
            continue
        cum = np.concatenate(
            [np.zeros((members.size, 1)), np.cumsum(c.rates * dt[members], axis=1)], axis=1
        )
        x_true[members] = eta_x[members, 0:1] + cum * eta_x[members, 1:2]
        form = make_form("bilinear", c.knot)
        s = state_loadings(dt[members], c.rates, condition.decomposition)
        y_true[members] = form.curve(eta_y[members], times[members]) + c.kappa * eta_x[members, 1:2] * s

    eps = rng.standard_normal((n, J, 2))
    x_obs = np.zeros((n, J))
    y_obs = np.zeros((n, J))
    for k, c in enumerate(condition.classes):
        members = np.flatnonzero(labels == k)
        if members.size == 0:
            continue
        cov2 = np.array([
            [c.theta_x, c.resid_corr * math.sqrt(c.theta_x * c.theta_y)],
            [c.resid_corr * math.sqrt(c.theta_x * c.theta_y), c.theta_y],
        ])
        e = eps[members] @ np.linalg.cholesky(cov2).T
        x_obs[members] = x_true[members] + e[:, :, 0]
        y_obs[members] = y_true[members] + e[:, :, 1]

    return LongitudinalDataset(
        times=times,
        y=y_obs,
        x=x_obs,
        x_e=x_e,
        x_g=x_g,
        labels=labels,
        true_theta=condition.true_parameters(),
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def relative_bias(estimates, truth: float) -> float:
    """Mean deviation from truth, scaled by truth unless it is zero."""
    est = np.asarray(estimates, dtype=float)
    bias = float(np.mean(est - truth))
    return bias if truth == 0 else bias / truth


def empirical_se(estimates) -> float:
    est = np.asarray(estimates, dtype=float)
    if est.size < 2:
        raise ValueError("empirical SE needs at least two replications")
    return float(np.std(est, ddof=1))


def relative_rmse(estimates, truth: float) -> float:
    """Root mean squared error, scaled by |truth| unless truth is zero."""
    est = np.asarray(estimates, dtype=float)
    rmse = float(np.sqrt(np.mean((est - truth) ** 2)))
    return rmse if truth == 0 else rmse / abs(truth)


def coverage(intervals, truth: float) -> float:
    """Share of (lower, upper) intervals containing the truth."""
    arr = np.asarray(intervals, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("intervals must have shape (S, 2)")
    return float(np.mean((arr[:, 0] <= truth) & (truth <= arr[:, 1])))


def mc_se_of_bias(estimates) -> float:
    """Monte Carlo standard error of the bias: sqrt(var / S)."""
    est = np.asarray(estimates, dtype=float)
    if est.size < 2:
        raise ValueError("need at least two replications")
    return float(np.sqrt(np.var(est, ddof=1) / est.size))


@dataclass(frozen=True)
class ParameterMetrics:
    name: str
    truth: float
    relative_bias: float
    empirical_se: float
    relative_rmse: float
    coverage: float
    absolute_scale: bool


@dataclass
class MetricsReport:
    parameters: list
    mean_accuracy: float
    convergence_rate: float
    reps_used: int
    reps_attempted: int
    partial: bool = False

    def parameter(self, name: str) -> ParameterMetrics:
        for p in self.parameters:
            if p.name == name:
                return p
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "mean_accuracy": self.mean_accuracy,
            "convergence_rate": self.convergence_rate,
            "reps_used": self.reps_used,
            "reps_attempted": self.reps_attempted,
            "partial": self.partial,
            "parameters": [p.__dict__ for p in self.parameters],
        }


# ---------------------------------------------------------------------------
# Replication driver
# ---------------------------------------------------------------------------


def _class_distance(fit_params: ClassParameters, true_params: ClassParameters) -> float:
    mu_fit = conditional_growth_moments(fit_params)[0][0]
    mu_true = conditional_growth_moments(true_params)[0][0]
    d = (mu_fit - mu_true) ** 2
    if fit_params.form.coefficient_name == "knot":
        d += (fit_params.form.coefficient - true_params.form.coefficient) ** 2
    return float(d)


def match_classes(fitted: MixtureParameters, truth: MixtureParameters) -> tuple:
    """Permutation sigma with fitted class sigma[k] matched to truth class k."""
    K = truth.n_classes
    best, best_cost = tuple(range(K)), np.inf
    for perm in itertools.permutations(range(K)):
        cost = sum(
            _class_distance(fitted.classes[perm[k]], truth.classes[k]) for k in range(K)
        )
        if cost < best_cost:
            best, best_cost = perm, cost
    return best


def aligned_estimate_table(result: FitResult, truth: MixtureParameters) -> dict:
    """Per-parameter (estimate, se, lo, hi) in the truth's class ordering.

    Class blocks are permuted wholesale.  When the matching permutes the
    reference class, the gating block is re-referenced; its standard
    errors are rebuilt from the packed covariance since re-referenced
    coefficients are contrasts of the originals.
    """
    layout_names = result.names
    perm = match_classes(result.estimates, truth)
    K = result.spec.n_classes
    values, ses = result.values, result.standard_errors
    lo, hi = result.ci_lower, result.ci_upper
    class_size = (len(layout_names) - (K - 1) * (1 + result.spec.n_gating_tics)) // K
    out = {}
    for k in range(K):
        src = perm[k]
        for i in range(class_size):
            name = layout_names[k * class_size + i]
            j = src * class_size + i
            out[name] = (
                float(values[j]),
                float(ses[j]) if ses is not None else math.nan,
                float(lo[j]) if lo is not None else math.nan,
                float(hi[j]) if hi is not None else math.nan,
            )
    if K > 1:
        g_off = K * class_size
        width = 1 + result.spec.n_gating_tics
        gvals = values[g_off:].reshape(K - 1, width)
        logits = np.vstack([np.zeros(width), gvals])
        new_logits = logits[list(perm)] - logits[perm[0]]
        gcov = None
        if result.packed_cov is not None:
            gcov = result.packed_cov[g_off:, g_off:]
        for k in range(1, K):
            for i in range(width):
                name = layout_names[g_off + (k - 1) * width + i]
                val = float(new_logits[k, i])
                se = math.nan
                if gcov is not None:
                    a = np.zeros((K - 1) * width)
                    if perm[k] > 0:
                        a[(perm[k] - 1) * width + i] += 1.0
                    if perm[0] > 0:
                        a[(perm[0] - 1) * width + i] -= 1.0
                    se = float(np.sqrt(max(a @ gcov @ a, 0.0)))
                out[name] = (val, se, val - 1.96 * se, val + 1.96 * se)
    return out


def truth_table(condition: SimulationCondition, spec: ModelSpec) -> dict:
    """Generating parameter value for every reporting-scale slot name."""
    from .estimation import ParameterLayout

    layout = ParameterLayout(spec, condition.n_waves)
    packed = layout.pack(condition.true_parameters())
    natural = layout.natural(packed)
    return dict(zip(layout.names, natural))


def run_replication(condition: SimulationCondition, spec: ModelSpec,
                    fit_options: FitOptions, rep_index: int, base_seed: int) -> dict:
    """Generate, fit, align to truth, and summarize one replication."""
    ss = np.random.SeedSequence(entropy=base_seed, spawn_key=(rep_index,))
    data_ss, fit_ss = ss.spawn(2)
    dataset = generate_dataset(condition, data_ss)
    opts = replace(fit_options, seed=int(fit_ss.generate_state(1)[0]))
    result = fit_mixture(dataset, spec, opts)
    record = {
        "rep": rep_index,
        "converged": bool(result.converged),
        "attempts": result.status.attempts_used,
        "message": result.status.message,
    }
    if result.converged:
        engine = LoglikEngine(dataset, spec)
        truth_ll = engine.loglik(engine.layout.pack(condition.true_parameters()))
        modal = result.posterior.argmax(axis=1)
        record.update(
            loglik=float(result.loglik),
            loglik_truth=float(truth_ll),
            accuracy=float(accuracy(modal, dataset.labels)),
            estimates={k: list(v) for k, v in
                       aligned_estimate_table(result, condition.true_parameters()).items()},
        )
    return record


def _worker(args):
    return run_replication(*args)


@dataclass
class MonteCarloOptions:
    seed: int = 0
    jobs: int = 1
    fit_options: FitOptions = field(default_factory=FitOptions)
    log_path: str | None = None
    attempt_cap_factor: int = 2


def run_condition(condition: SimulationCondition, spec: ModelSpec, n_reps: int,
                  options: MonteCarloOptions | None = None) -> MetricsReport:
    """Monte Carlo replications of one condition.

    Non-converged replications are discarded and new attempt indices are
    scheduled (in order, so results do not depend on the parallelism
    degree) until ``n_reps`` converged fits are collected or the attempt
    cap is reached, in which case the report is flagged partial.
    """
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    opts = options or MonteCarloOptions()
    cap = opts.attempt_cap_factor * n_reps
    records = []
    converged = 0
    next_index = 0
    executor = ProcessPoolExecutor(max_workers=opts.jobs) if opts.jobs > 1 else None
    try:
        while converged < n_reps and next_index < cap:
            want = min(max(opts.jobs, 1), cap - next_index, 2 * (n_reps - converged))
            batch = [(condition, spec, opts.fit_options, next_index + i, opts.seed)
                     for i in range(want)]
            next_index += want
            if executor is not None:
                results = list(executor.map(_worker, batch))
            else:
                results = [_worker(a) for a in batch]
            for rec in results:
                records.append(rec)
                if rec["converged"] and converged < n_reps:
                    converged += 1
    finally:
        if executor is not None:
            executor.shutdown()

    records.sort(key=lambda r: r["rep"])
    # truncate at the attempt completing the study so the persisted log and
    # report cannot depend on how many extra attempts were scheduled
    got = 0
    cut = len(records)
    for i, rec in enumerate(records):
        if rec["converged"]:
            got += 1
            if got == n_reps:
                cut = i + 1
                break
    records = records[:cut]
    if opts.log_path:
        with open(opts.log_path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    return report_from_records(records, condition, spec, n_reps)


def report_from_records(records: list, condition: SimulationCondition,
                        spec: ModelSpec, n_reps: int) -> MetricsReport:
    """Assemble the metrics report; usable on a reloaded replication log."""
    used = [r for r in records if r["converged"]][:n_reps]
    attempts = 0
    got = 0
    for r in records:
        attempts += 1
        if r["converged"]:
            got += 1
            if got == n_reps:
                break
    truths = truth_table(condition, spec)
    params = []
    if used:
        names = used[0]["estimates"].keys()
        for name in names:
            est = np.array([r["estimates"][name][0] for r in used])
            ints = np.array([[r["estimates"][name][2], r["estimates"][name][3]] for r in used])
            truth = float(truths[name])
            params.append(ParameterMetrics(
                name=name,
                truth=truth,
                relative_bias=relative_bias(est, truth),
                empirical_se=empirical_se(est) if est.size > 1 else math.nan,
                relative_rmse=relative_rmse(est, truth),
                coverage=coverage(ints, truth) if np.all(np.isfinite(ints)) else math.nan,
                absolute_scale=truth == 0,
            ))
    return MetricsReport(
        parameters=params,
        mean_accuracy=float(np.mean([r["accuracy"] for r in used])) if used else math.nan,
        convergence_rate=len(used) / attempts if attempts else math.nan,
        reps_used=len(used),
        reps_attempted=attempts,
        partial=len(used) < n_reps,
    )


def report_from_log(path, condition: SimulationCondition, spec: ModelSpec,
                    n_reps: int) -> MetricsReport:
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    records.sort(key=lambda r: r["rep"])
    return report_from_records(records, condition, spec, n_reps)
