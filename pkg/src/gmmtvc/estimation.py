"""Mixture FIML estimation.

The mixture log-likelihood couples per-class implied moments with a
multinomial-logistic gating over the first-type TICs.  Optimization runs
on an unconstrained packed vector (log variances, log-Cholesky
covariances, atanh correlations), with multi-start retries, and standard
errors come from the inverse numerical Hessian mapped back to the
reporting scale by the delta method.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from .forms import FORM_KINDS, FunctionalForm, TvcDecomposition, make_form
from .moments import (
    ClassParameters,
    StackedParams,
    observed_dim,
    stack_class_parameters,
    stacked_moments,
)

_LOG_2PI = math.log(2.0 * math.pi)
# box bounds on the packed scale keep the optimizer out of degenerate regions
_LOG_VAR_MIN = math.log(1e-8)
_LOG_VAR_MAX = 50.0
_ATANH_MAX = 12.0


@dataclass(frozen=True)
class GatingParameters:
    """Logistic gating coefficients; class 1 is the reference (all zero)."""

    intercepts: np.ndarray
    coefficients: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "intercepts", np.atleast_1d(np.asarray(self.intercepts, dtype=float)))
        object.__setattr__(self, "coefficients", np.atleast_2d(np.asarray(self.coefficients, dtype=float)))
        if self.intercepts.size and self.coefficients.shape[0] != self.intercepts.size:
            raise ValueError("gating coefficient rows must match intercepts")

    @property
    def n_classes(self) -> int:
        return self.intercepts.size + 1

    def logits(self, x_g: np.ndarray) -> np.ndarray:
        """Class logits (reference class first), shape (..., K)."""
        x_g = np.asarray(x_g, dtype=float)
        if self.intercepts.size == 0:
            return np.zeros(x_g.shape[:-1] + (1,)) if x_g.ndim > 1 else np.zeros(1)
        if x_g.shape[-1] != self.coefficients.shape[1]:
            raise ValueError(
                f"gating expects {self.coefficients.shape[1]} covariates, got {x_g.shape[-1]}"
            )
        tail = self.intercepts + x_g @ self.coefficients.T
        zeros = np.zeros(tail.shape[:-1] + (1,))
        return np.concatenate([zeros, tail], axis=-1)

    @staticmethod
    def empty() -> "GatingParameters":
        return GatingParameters(np.zeros(0), np.zeros((0, 0)))


def gating_probabilities(x_g, gating: GatingParameters) -> np.ndarray:
    """Mixing proportions for one covariate vector (or a batch)."""
    logits = gating.logits(np.asarray(x_g, dtype=float))
    return np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))


@dataclass(frozen=True)
class MixtureParameters:
    """Full parameter set: per-class expert parameters plus gating."""

    classes: list[ClassParameters]
    gating: GatingParameters

    @property
    def n_classes(self) -> int:
        return len(self.classes)


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of the mixture to estimate."""

    n_classes: int
    form: str = "bilinear"
    decomposition: TvcDecomposition | None = TvcDecomposition.INTERVAL_SLOPES
    has_tvc: bool = True
    has_tic: bool = True
    n_gating_tics: int = 2

    def __post_init__(self):
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if self.form not in FORM_KINDS:
            raise ValueError(f"unknown functional form {self.form!r}")
        if isinstance(self.decomposition, str):
            object.__setattr__(self, "decomposition", TvcDecomposition.parse(self.decomposition))
        if self.has_tvc and self.decomposition is None:
            raise ValueError("a TVC model needs a decomposition variant")

    @property
    def n_factors(self) -> int:
        return FORM_KINDS[self.form].n_factors

    def without_covariates(self) -> "ModelSpec":
        return replace(self, has_tvc=False, has_tic=False, n_gating_tics=0)


def _tril_names(prefix: str, C: int) -> list[str]:
    out = []
    for i in range(C):
        for j in range(i + 1):
            out.append(f"{prefix}_{min(i, j)}{max(i, j)}")
    return out


def _tril_indices(C: int):
    return np.tril_indices(C)


def _chol_entries_to_cov(entries: np.ndarray, C: int) -> np.ndarray:
    """(…, m) log-Cholesky parameters -> (…, C, C) covariance."""
    lead = entries.shape[:-1]
    L = np.zeros(lead + (C, C))
    rows, cols = _tril_indices(C)
    vals = entries.copy()
    diag = rows == cols
    vals[..., diag] = np.exp(vals[..., diag])
    L[..., rows, cols] = vals
    return L @ L.swapaxes(-1, -2)


def _cov_to_chol_entries(cov: np.ndarray) -> np.ndarray:
    C = cov.shape[-1]
    L = np.linalg.cholesky(cov)
    rows, cols = _tril_indices(C)
    vals = L[..., rows, cols]
    diag = rows == cols
    vals[..., diag] = np.log(vals[..., diag])
    return vals


def _cov_entries(cov: np.ndarray) -> np.ndarray:
    rows, cols = _tril_indices(cov.shape[-1])
    return cov[..., rows, cols]


class ParameterLayout:
    """Packing layout of the full parameter set for one ModelSpec.

    Each scalar slot has a name on the natural reporting scale; the packed
    and natural vectors have identical length, with variances stored as
    logs, the two correlations as atanh, and covariance matrices as
    log-Cholesky factors.
    """

    def __init__(self, spec: ModelSpec, n_waves: int):
        self.spec = spec
        self.n_waves = n_waves
        C = spec.n_factors
        form_cls = FORM_KINDS[spec.form]
        self.coef_name = form_cls.coefficient_name

        slots: list[tuple[str, int]] = []
        if spec.has_tic:
            slots += [("mu_x", 1), ("phi_x", 1)]
        if spec.has_tvc:
            slots += [("mu_eta_x", 2), ("phi_eta_x", 3), ("rates", n_waves - 2)]
        slots += [("alpha_y", C), ("psi_y", C * (C + 1) // 2)]
        if spec.has_tic:
            slots += [("beta_tic", C)]
        if spec.has_tvc:
            slots += [("beta_tvc", C), ("kappa", 1)]
        if spec.has_tic and spec.has_tvc:
            slots += [("rho_bl", 1)]
        if spec.has_tvc:
            slots += [("theta_x", 1)]
        slots += [("theta_y", 1)]
        if spec.has_tvc:
            slots += [("theta_xy", 1)]
        if self.coef_name is not None:
            slots += [(self.coef_name, 1)]

        self.class_slices: dict[str, slice] = {}
        pos = 0
        for name, size in slots:
            self.class_slices[name] = slice(pos, pos + size)
            pos += size
        self.class_size = pos
        self.n_gating = (spec.n_classes - 1) * (1 + spec.n_gating_tics)
        self.size = spec.n_classes * self.class_size + self.n_gating
        self.gating_offset = spec.n_classes * self.class_size

        self._names = self._build_names()
        self._bounds = self._build_bounds()

    # -- names / bounds ------------------------------------------------

    def _class_slot_names(self) -> list[str]:
        spec, C = self.spec, self.spec.n_factors
        names: list[str] = []
        for slot, sl in self.class_slices.items():
            n = sl.stop - sl.start
            if slot == "phi_eta_x":
                names += _tril_names("phi_eta_x", 2)
            elif slot == "psi_y":
                names += _tril_names("psi_y", C)
            elif slot == "rates":
                names += [f"rate_{j}" for j in range(2, self.n_waves)]
            elif n == 1:
                names += [slot]
            else:
                names += [f"{slot}_{i}" for i in range(n)]
        return names

    def _build_names(self) -> list[str]:
        names = []
        per_class = self._class_slot_names()
        for k in range(self.spec.n_classes):
            names += [f"c{k + 1}.{n}" for n in per_class]
        for k in range(2, self.spec.n_classes + 1):
            names += [f"gating{k}.intercept"]
            names += [f"gating{k}.xg{i + 1}" for i in range(self.spec.n_gating_tics)]
        return names

    @property
    def names(self) -> list[str]:
        return list(self._names)

    def index_of(self, name: str) -> int:
        return self._names.index(name)

    def _build_bounds(self):
        lo = np.full(self.size, -np.inf)
        hi = np.full(self.size, np.inf)
        C = self.spec.n_factors
        for k in range(self.spec.n_classes):
            base = k * self.class_size

            def mark(slot, idx, low, high):
                sl = self.class_slices[slot]
                lo[base + sl.start + idx] = low
                hi[base + sl.start + idx] = high

            if self.spec.has_tic:
                mark("phi_x", 0, _LOG_VAR_MIN, _LOG_VAR_MAX)
            if self.spec.has_tvc:
                rows, cols = _tril_indices(2)
                for i, (r, c) in enumerate(zip(rows, cols)):
                    if r == c:
                        mark("phi_eta_x", i, _LOG_VAR_MIN, _LOG_VAR_MAX)
                mark("theta_x", 0, _LOG_VAR_MIN, _LOG_VAR_MAX)
                mark("theta_xy", 0, -_ATANH_MAX, _ATANH_MAX)
            rows, cols = _tril_indices(C)
            for i, (r, c) in enumerate(zip(rows, cols)):
                if r == c:
                    mark("psi_y", i, _LOG_VAR_MIN, _LOG_VAR_MAX)
            mark("theta_y", 0, _LOG_VAR_MIN, _LOG_VAR_MAX)
            if self.spec.has_tic and self.spec.has_tvc:
                mark("rho_bl", 0, -_ATANH_MAX, _ATANH_MAX)
            if self.coef_name == "b" or self.coef_name == "c":
                mark(self.coef_name, 0, -10.0, 10.0)
        # membership nearly deterministic in the covariates pushes the
        # gating scale toward infinity along a likelihood plateau; a wide
        # box keeps the optimizer out of the overflow region
        lo[self.gating_offset:] = -30.0
        hi[self.gating_offset:] = 30.0
        return lo, hi

    def bounds(self, t_min: float | None = None, t_max: float | None = None):
        lo, hi = self._bounds[0].copy(), self._bounds[1].copy()
        if self.coef_name == "knot" and t_min is not None:
            margin = 1e-3 * (t_max - t_min)
            for k in range(self.spec.n_classes):
                i = k * self.class_size + self.class_slices["knot"].start
                lo[i] = t_min + margin
                hi[i] = t_max - margin
        return list(zip(lo, hi))

    # -- pack / unpack ---------------------------------------------------

    def class_segment(self, vec: np.ndarray, k: int) -> np.ndarray:
        return vec[..., k * self.class_size:(k + 1) * self.class_size]

    def pack(self, theta: MixtureParameters) -> np.ndarray:
        spec = self.spec
        if theta.n_classes != spec.n_classes:
            raise ValueError("class count mismatch")
        vec = np.zeros(self.size)
        for k, p in enumerate(theta.classes):
            seg = self.class_segment(vec, k)

            def put(slot, values):
                seg[self.class_slices[slot]] = values

            if spec.has_tic:
                put("mu_x", p.mu_x)
                put("phi_x", math.log(p.phi_x))
            if spec.has_tvc:
                put("mu_eta_x", p.mu_eta_x)
                put("phi_eta_x", _cov_to_chol_entries(p.phi_eta_x))
                put("rates", p.rates[1:])
            put("alpha_y", p.alpha_y)
            put("psi_y", _cov_to_chol_entries(p.psi_eta_y))
            if spec.has_tic:
                put("beta_tic", p.beta_tic)
            if spec.has_tvc:
                put("beta_tvc", p.beta_tvc)
                put("kappa", p.kappa)
            if spec.has_tic and spec.has_tvc:
                put("rho_bl", np.arctanh(p.rho_bl))
            if spec.has_tvc:
                put("theta_x", math.log(p.theta_x))
            put("theta_y", math.log(p.theta_y))
            if spec.has_tvc:
                corr = p.theta_xy / math.sqrt(p.theta_x * p.theta_y)
                put("theta_xy", np.arctanh(corr))
            if self.coef_name == "knot":
                put("knot", p.form.coefficient)
            elif self.coef_name == "b":
                put("b", math.log(p.form.coefficient))
            elif self.coef_name == "c":
                put("c", math.log(-p.form.coefficient))
        if self.n_gating:
            g = np.column_stack([theta.gating.intercepts, theta.gating.coefficients])
            vec[self.gating_offset:] = g.ravel()
        return vec

    def _class_arrays(self, mat: np.ndarray) -> dict[str, np.ndarray]:
        """Natural-scale per-slot arrays for packed rows (…, class_size)."""
        spec = self.spec
        out: dict[str, np.ndarray] = {}

        def get(slot):
            return mat[..., self.class_slices[slot]]

        if spec.has_tic:
            out["mu_x"] = get("mu_x")[..., 0]
            out["phi_x"] = np.exp(get("phi_x")[..., 0])
        if spec.has_tvc:
            out["mu_eta_x"] = get("mu_eta_x")
            out["phi_eta_x"] = _chol_entries_to_cov(get("phi_eta_x"), 2)
            ones = np.ones(mat.shape[:-1] + (1,))
            out["rates"] = np.concatenate([ones, get("rates")], axis=-1)
        out["alpha_y"] = get("alpha_y")
        out["psi_y"] = _chol_entries_to_cov(get("psi_y"), spec.n_factors)
        if spec.has_tic:
            out["beta_tic"] = get("beta_tic")
        if spec.has_tvc:
            out["beta_tvc"] = get("beta_tvc")
            out["kappa"] = get("kappa")[..., 0]
        if spec.has_tic and spec.has_tvc:
            out["rho_bl"] = np.tanh(get("rho_bl")[..., 0])
        if spec.has_tvc:
            out["theta_x"] = np.exp(get("theta_x")[..., 0])
        out["theta_y"] = np.exp(get("theta_y")[..., 0])
        if spec.has_tvc:
            out["theta_xy"] = np.tanh(get("theta_xy")[..., 0]) * np.sqrt(out["theta_x"] * out["theta_y"])
        if self.coef_name == "knot":
            out["coef"] = get("knot")[..., 0]
        elif self.coef_name == "b":
            out["coef"] = np.exp(get("b")[..., 0])
        elif self.coef_name == "c":
            out["coef"] = -np.exp(get("c")[..., 0])
        return out

    def unpack(self, vec: np.ndarray) -> MixtureParameters:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.size,):
            raise ValueError(f"expected packed vector of length {self.size}, got {vec.shape}")
        spec = self.spec
        classes = []
        for k in range(spec.n_classes):
            a = self._class_arrays(self.class_segment(vec, k))
            form = make_form(spec.form, a.get("coef"))
            classes.append(ClassParameters(
                form=form,
                alpha_y=a["alpha_y"],
                psi_eta_y=a["psi_y"],
                theta_y=float(a["theta_y"]),
                mu_eta_x=a.get("mu_eta_x"),
                phi_eta_x=a.get("phi_eta_x"),
                rates=a.get("rates"),
                beta_tvc=a.get("beta_tvc"),
                kappa=float(a.get("kappa", 0.0)),
                theta_x=float(a["theta_x"]) if spec.has_tvc else None,
                theta_xy=float(a.get("theta_xy", 0.0)),
                mu_x=float(a["mu_x"]) if spec.has_tic else None,
                phi_x=float(a["phi_x"]) if spec.has_tic else None,
                beta_tic=a.get("beta_tic"),
                rho_bl=float(a.get("rho_bl", 0.0)),
            ))
        gating = GatingParameters.empty()
        if self.n_gating:
            g = vec[self.gating_offset:].reshape(spec.n_classes - 1, 1 + spec.n_gating_tics)
            gating = GatingParameters(g[:, 0], g[:, 1:])
        elif spec.n_classes > 1:
            gating = GatingParameters(np.zeros(spec.n_classes - 1), np.zeros((spec.n_classes - 1, 0)))
        return MixtureParameters(classes, gating)

    def natural(self, vecs: np.ndarray) -> np.ndarray:
        """Map packed rows (…, size) to the natural reporting scale."""
        vecs = np.asarray(vecs, dtype=float)
        out = np.empty_like(vecs)
        spec = self.spec
        for k in range(spec.n_classes):
            seg = self.class_segment(vecs, k)
            res = self.class_segment(out, k)
            a = self._class_arrays(seg)
            if spec.has_tic:
                res[..., self.class_slices["mu_x"]] = a["mu_x"][..., None]
                res[..., self.class_slices["phi_x"]] = a["phi_x"][..., None]
            if spec.has_tvc:
                res[..., self.class_slices["mu_eta_x"]] = a["mu_eta_x"]
                res[..., self.class_slices["phi_eta_x"]] = _cov_entries(a["phi_eta_x"])
                res[..., self.class_slices["rates"]] = a["rates"][..., 1:]
            res[..., self.class_slices["alpha_y"]] = a["alpha_y"]
            res[..., self.class_slices["psi_y"]] = _cov_entries(a["psi_y"])
            if spec.has_tic:
                res[..., self.class_slices["beta_tic"]] = a["beta_tic"]
            if spec.has_tvc:
                res[..., self.class_slices["beta_tvc"]] = a["beta_tvc"]
                res[..., self.class_slices["kappa"]] = a["kappa"][..., None]
            if spec.has_tic and spec.has_tvc:
                res[..., self.class_slices["rho_bl"]] = a["rho_bl"][..., None]
            if spec.has_tvc:
                res[..., self.class_slices["theta_x"]] = a["theta_x"][..., None]
            res[..., self.class_slices["theta_y"]] = a["theta_y"][..., None]
            if spec.has_tvc:
                res[..., self.class_slices["theta_xy"]] = a["theta_xy"][..., None]
            if self.coef_name is not None:
                res[..., self.class_slices[self.coef_name]] = a["coef"][..., None]
        out[..., self.gating_offset:] = vecs[..., self.gating_offset:]
        return out

    def stacked_from_packed(self, vecs: np.ndarray, class_indices=None):
        """Vectorized unpack of packed rows (P, size) for the engine.

        Returns a StackedParams of size P*K (replication-major, class-minor
        order) plus gating arrays of shape (P, K-1, 1 + n_gating_tics).
        ``class_indices`` restricts the stacking to a subset of classes.
        """
        vecs = np.atleast_2d(np.asarray(vecs, dtype=float))
        P = vecs.shape[0]
        spec = self.spec
        C = spec.n_factors
        if class_indices is None:
            class_indices = range(spec.n_classes)
        K = len(list(class_indices))
        per_class = [self._class_arrays(self.class_segment(vecs, k)) for k in class_indices]

        def gather(key):
            if key not in per_class[0]:
                return None
            return np.stack([a[key] for a in per_class], axis=1).reshape((P * K,) + per_class[0][key].shape[1:])

        form_cls = FORM_KINDS[spec.form]
        alpha = gather("alpha_y")
        psi = gather("psi_y")
        beta_tic = gather("beta_tic")
        beta_tvc = gather("beta_tvc")
        coef = gather("coef")
        if spec.form == "bilinear":
            T = np.zeros((P * K, 3, 3))
            T[:, 0, 0] = 1.0
            T[:, 0, 1] = coef
            T[:, 1, 1] = T[:, 1, 2] = T[:, 2, 2] = 0.5
            T[:, 2, 1] = -0.5
            alpha = np.einsum("bij,bj->bi", T, alpha)
            psi = T @ psi @ T.swapaxes(-1, -2)
            if beta_tic is not None:
                beta_tic = np.einsum("bij,bj->bi", T, beta_tic)
            if beta_tvc is not None:
                beta_tvc = np.einsum("bij,bj->bi", T, beta_tvc)
        sp = StackedParams(
            form_kind=form_cls,
            has_tvc=spec.has_tvc,
            has_tic=spec.has_tic,
            n_factors=C,
            alpha=alpha,
            psi=psi,
            theta_y=gather("theta_y"),
            coef=coef,
            mu_eta_x=gather("mu_eta_x"),
            phi_eta_x=gather("phi_eta_x"),
            rates=gather("rates"),
            beta_tvc=beta_tvc,
            kappa=gather("kappa"),
            theta_x=gather("theta_x"),
            theta_xy=gather("theta_xy"),
            mu_x=gather("mu_x"),
            phi_x=gather("phi_x"),
            beta_tic=beta_tic,
            rho_bl=gather("rho_bl"),
        )
        if self.n_gating:
            gating = vecs[:, self.gating_offset:].reshape(P, spec.n_classes - 1, 1 + spec.n_gating_tics)
        else:
            gating = np.zeros((P, 0, 1))
        return sp, gating


def pack_parameters(theta: MixtureParameters, spec: ModelSpec, n_waves: int) -> np.ndarray:
    """Pack the full parameter set into an unconstrained vector."""
    return ParameterLayout(spec, n_waves).pack(theta)


def unpack_parameters(vec: np.ndarray, spec: ModelSpec, n_waves: int) -> MixtureParameters:
    """Inverse of :func:`pack_parameters` (exact round trip)."""
    return ParameterLayout(spec, n_waves).unpack(vec)


# ---------------------------------------------------------------------------
# likelihood engine
# ---------------------------------------------------------------------------


def gaussian_logpdf(obs: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Dense multivariate-normal log density; -inf when cov is not PD."""
    obs = np.asarray(obs, dtype=float)
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return -np.inf
    z = np.linalg.solve(L, obs - mean)
    return -0.5 * (obs.size * _LOG_2PI + 2.0 * np.sum(np.log(np.diagonal(L))) + z @ z)


def _masked_chol_quad(M: np.ndarray, u: np.ndarray):
    """Vectorized Cholesky of small SPD systems plus the quadratic form.

    M has shape (..., d, d) with small d; returns (logdet, u' M^-1 u, ok)
    where ok flags batch members whose pivots stayed positive.  Python
    loops run over the tiny matrix dimension only, so every operation is
    a full-batch ufunc.
    """
    d = M.shape[-1]
    L = [[None] * d for _ in range(d)]
    ok = np.ones(M.shape[:-2], dtype=bool)
    logdet = np.zeros(M.shape[:-2])
    for i in range(d):
        s = M[..., i, i].copy()
        for k in range(i):
            s = s - L[i][k] * L[i][k]
        ok &= s > 0
        s = np.where(s > 0, s, 1.0)
        L[i][i] = np.sqrt(s)
        logdet += np.log(s)
        inv_d = 1.0 / L[i][i]
        for j in range(i + 1, d):
            t = M[..., j, i].copy()
            for k in range(i):
                t = t - L[j][k] * L[i][k]
            L[j][i] = t * inv_d
    quad = np.zeros(M.shape[:-2])
    w = [None] * d
    for i in range(d):
        t = u[..., i].copy()
        for k in range(i):
            t = t - L[i][k] * w[k]
        w[i] = t / L[i][i]
        quad += w[i] * w[i]
    return logdet, quad, ok


class LoglikEngine:
    """Precomputed dataset views plus batched likelihood evaluation.

    The observed vector factorizes as p(x_e) * p(x, y | x_e); the
    conditional covariance is a low-rank latent part plus a per-wave
    2x2 residual block, so each individual's density reduces (Woodbury)
    to a small SPD solve whose dimension is the number of latent factors.
    Missing x/y entries enter through per-wave masks, which is exactly
    the FIML subvector density.
    """

    def __init__(self, dataset, spec: ModelSpec):
        self.spec = spec
        self.layout = ParameterLayout(spec, dataset.n_waves)
        self.times = np.asarray(dataset.times, dtype=float)
        self.n, self.n_waves = self.times.shape
        if self.n_waves < 3:
            raise ValueError("estimation requires at least 3 measurement waves")
        self.dt = np.diff(self.times, axis=1)
        self.dim = observed_dim(self.n_waves, spec.has_tvc, spec.has_tic)

        y = np.asarray(dataset.y, dtype=float)
        self.mask_y = np.isfinite(y)
        self.y_vals = np.where(self.mask_y, y, 0.0)
        if spec.has_tvc:
            if dataset.x is None:
                raise ValueError("model includes a TVC but the dataset has no x block")
            x = np.asarray(dataset.x, dtype=float)
            self.mask_x = np.isfinite(x)
            self.x_vals = np.where(self.mask_x, x, 0.0)
        else:
            self.mask_x = None
            self.x_vals = None
        if spec.has_tic:
            if dataset.x_e is None:
                raise ValueError("model includes a second-type TIC but the dataset has no x_e")
            self.xe = np.asarray(dataset.x_e, dtype=float)
            if not np.all(np.isfinite(self.xe)):
                raise ValueError("x_e may not be missing")
        else:
            self.xe = None
        none_observed = ~np.any(self.mask_y, axis=1)
        if self.mask_x is not None:
            none_observed &= ~np.any(self.mask_x, axis=1)
        if not spec.has_tic and np.any(none_observed):
            raise ValueError("an individual with no observed entries cannot contribute")
        if spec.n_gating_tics:
            if dataset.x_g is None:
                raise ValueError("gating covariates missing from dataset")
            self.x_g = np.asarray(dataset.x_g, dtype=float)
            if self.x_g.shape != (self.n, spec.n_gating_tics):
                raise ValueError("gating covariate block has the wrong shape")
        else:
            self.x_g = np.zeros((self.n, 0))
        # memory cap for batched parameter sweeps
        latent_dim = (2 if spec.has_tvc else 0) + spec.n_factors
        per_vec = spec.n_classes * self.n * self.n_waves * max(latent_dim, 1)
        self._chunk = max(1, min(64, int(3e7 / per_vec)))
        self._base_cache: tuple | None = None
        self._complete_y = bool(np.all(self.mask_y))
        self._complete_x = self.mask_x is None or bool(np.all(self.mask_x))

    # -- core evaluations ----------------------------------------------

    def class_loglik_matrix(self, sp: StackedParams) -> np.ndarray:
        """Per-class log densities, shape (B, N)."""
        spec = self.spec
        B, N, J, C = sp.size, self.n, self.n_waves, sp.n_factors
        Lc = (2 if spec.has_tvc else 0) + C
        from .moments import _form_loadings

        lam_y = _form_loadings(sp, self.times)

        # conditional latent covariance given x_e, its inverse and logdet
        Vc = np.zeros((B, Lc, Lc))
        if spec.has_tvc:
            Vc[:, :2, :2] = sp.phi_eta_x
            if spec.has_tic:
                Vc[:, 0, 0] = sp.phi_eta_x[:, 0, 0] * (1.0 - sp.rho_bl ** 2)
            Vc[:, 2:, 2:] = sp.psi
        else:
            Vc[:] = sp.psi
        sign, logdet_vc = np.linalg.slogdet(Vc)
        if np.any(sign <= 0):
            return np.full((B, N), -np.inf)
        Vc_inv = np.linalg.inv(Vc)

        # conditional latent mean (B, N, Lc) and design blocks
        m_c = np.zeros((B, N, Lc))
        Y = np.empty((B, N, J, Lc))
        if spec.has_tvc:
            if spec.has_tic:
                slope = sp.rho_bl * np.sqrt(sp.phi_eta_x[:, 0, 0] / sp.phi_x)
                m_c[:, :, 0] = sp.mu_eta_x[:, 0:1] + slope[:, None] * (self.xe[None, :] - sp.mu_x[:, None])
            else:
                m_c[:, :, 0] = sp.mu_eta_x[:, 0:1]
            m_c[:, :, 1] = sp.mu_eta_x[:, 1:2]
            cum = np.concatenate(
                [np.zeros((B, N, 1)), np.cumsum(sp.rates[:, None, :] * self.dt[None], axis=-1)], axis=-1
            )
            from .forms import state_loadings

            s = state_loadings(self.dt[None], sp.rates[:, None, :], spec.decomposition)
            # one contraction of lam_y against (alpha | beta_tic | beta_tvc)
            stacked_coef = [sp.alpha]
            if spec.has_tic:
                stacked_coef.append(sp.beta_tic)
            stacked_coef.append(sp.beta_tvc)
            proj = np.einsum("bnjc,bcr->bnjr", lam_y, np.stack(stacked_coef, axis=-1))
            offset_y = proj[..., 0]
            if spec.has_tic:
                offset_y = offset_y + proj[..., 1] * self.xe[None, :, None]
            Y[..., 0] = proj[..., -1]
            Y[..., 1] = sp.kappa[:, None, None] * s
            Y[..., 2:] = lam_y
        else:
            if spec.has_tic:
                proj = np.einsum("bnjc,bcr->bnjr", lam_y, np.stack([sp.alpha, sp.beta_tic], axis=-1))
                offset_y = proj[..., 0] + proj[..., 1] * self.xe[None, :, None]
            else:
                offset_y = np.einsum("bnjc,bc->bnj", lam_y, sp.alpha)
            Y[:] = lam_y

        ry = self.y_vals[None] - offset_y - np.einsum("bnjl,bnl->bnj", Y, m_c)
        if not self._complete_y:
            ry *= self.mask_y[None]
        if spec.has_tvc:
            # the x-side design never materializes: its columns are (1, cum, 0..)
            rx = self.x_vals[None] - m_c[:, :, 0:1] - cum * m_c[:, :, 1:2]
            if not self._complete_x:
                rx *= self.mask_x[None]
            th_x = sp.theta_x[:, None, None]
            th_y = sp.theta_y[:, None, None]
            th_xy = sp.theta_xy[:, None, None]
            det2 = th_x * th_y - th_xy ** 2
            if self._complete_x and self._complete_y:
                a = np.broadcast_to(th_y / det2, (B, 1, 1))
                b = np.broadcast_to(th_x / det2, (B, 1, 1))
                c = np.broadcast_to(-th_xy / det2, (B, 1, 1))
                ld_wave = J * np.log(det2[:, :, 0])
            else:
                both = (self.mask_x & self.mask_y)[None]
                x_only = (self.mask_x & ~self.mask_y)[None]
                y_only = (~self.mask_x & self.mask_y)[None]
                a = both * (th_y / det2) + x_only / th_x
                b = both * (th_x / det2) + y_only / th_y
                c = both * (-th_xy / det2)
                ld_wave = (both * np.log(det2) + x_only * np.log(th_x) + y_only * np.log(th_y)).sum(axis=-1)
            q0 = (a * rx * rx + b * ry * ry + 2.0 * c * rx * ry).sum(axis=-1)
            wx = a * rx + c * ry
            wy = c * rx + b * ry
            u = np.einsum("bnjl,bnj->bnl", Y, wy)
            u[..., 0] += wx.sum(axis=-1)
            u[..., 1] += (wx * cum).sum(axis=-1)
            G = Y.swapaxes(-1, -2) @ (b[..., None] * Y)
            if c.shape[-1] == J:
                cY = np.einsum("bnj,bnjl->bnl", c, Y)
                sum_a = a.sum(axis=-1)
            else:
                cY = c[..., 0, None] * Y.sum(axis=-2)
                sum_a = J * a[..., 0]
            ccumY = np.einsum("bnj,bnjl->bnl", c * cum, Y)
            G[..., 0, :] += cY
            G[..., :, 0] += cY
            G[..., 1, :] += ccumY
            G[..., :, 1] += ccumY
            G[..., 0, 0] += sum_a
            acum = (a * cum).sum(axis=-1)
            G[..., 0, 1] += acum
            G[..., 1, 0] += acum
            G[..., 1, 1] += (a * cum * cum).sum(axis=-1)
            d_count = (self.mask_x.sum(axis=1) + self.mask_y.sum(axis=1))[None]
        else:
            th_y = sp.theta_y[:, None, None]
            if self._complete_y:
                b = np.broadcast_to(1.0 / th_y, (B, 1, 1))
                ld_wave = J * np.log(sp.theta_y)[:, None]
            else:
                b = self.mask_y[None] / th_y
                ld_wave = (self.mask_y[None] * np.log(th_y)).sum(axis=-1)
            q0 = (b * ry * ry).sum(axis=-1)
            u = np.einsum("bnjl,bnj->bnl", Y, b * ry)
            G = Y.swapaxes(-1, -2) @ (b[..., None] * Y)
            d_count = self.mask_y.sum(axis=1)[None]

        M = Vc_inv[:, None] + G
        logdet_m, quad_u, ok = _masked_chol_quad(M, u)
        ll = -0.5 * (d_count * _LOG_2PI + ld_wave + logdet_vc[:, None] + logdet_m + q0 - quad_u)
        if spec.has_tic:
            z = self.xe[None, :] - sp.mu_x[:, None]
            ll = ll - 0.5 * (_LOG_2PI + np.log(sp.phi_x[:, None]) + z * z / sp.phi_x[:, None])
        return np.where(ok, ll, -np.inf)

    def class_loglik_matrix_dense(self, sp: StackedParams) -> np.ndarray:
        """Reference implementation via full implied moments (for checks)."""
        mean, cov = stacked_moments(sp, self.times, self.spec.decomposition)
        blocks = []
        if self.spec.has_tvc:
            blocks.append(np.where(self.mask_x, self.x_vals, np.nan))
        blocks.append(np.where(self.mask_y, self.y_vals, np.nan))
        if self.spec.has_tic:
            blocks.append(self.xe[:, None])
        obs = np.column_stack(blocks)
        out = np.empty((sp.size, self.n))
        for i in range(self.n):
            idx = np.flatnonzero(np.isfinite(obs[i]))
            for b in range(sp.size):
                out[b, i] = gaussian_logpdf(obs[i, idx], mean[b, i, idx], cov[b, i][np.ix_(idx, idx)])
        return out

    def _combine(self, cols: np.ndarray, gating: np.ndarray) -> np.ndarray:
        """Mix per-class columns (P, N, K) with per-point gating -> (P,)."""
        P, _, K = cols.shape
        if K == 1:
            return cols[:, :, 0].sum(axis=-1)
        logits = np.zeros((P, self.n, K))
        logits[:, :, 1:] = gating[:, None, :, 0] + np.einsum("ng,pkg->pnk", self.x_g, gating[:, :, 1:])
        log_pi = logits - logsumexp(logits, axis=-1, keepdims=True)
        return logsumexp(log_pi + cols, axis=-1).sum(axis=-1)

    def loglik_many(self, packed: np.ndarray) -> np.ndarray:
        """Total mixture log-likelihood for each packed row (P, size)."""
        packed = np.atleast_2d(np.asarray(packed, dtype=float))
        K = self.spec.n_classes
        out = np.empty(packed.shape[0])
        for lo in range(0, packed.shape[0], self._chunk):
            chunk = packed[lo:lo + self._chunk]
            sp, gating = self.layout.stacked_from_packed(chunk)
            cols = self.class_loglik_matrix(sp).reshape(len(chunk), K, self.n).swapaxes(1, 2)
            out[lo:lo + len(chunk)] = self._combine(cols, gating)
        return out

    def loglik_many_delta(self, base: np.ndarray, packed: np.ndarray) -> np.ndarray:
        """Like :meth:`loglik_many` for points perturbing few coordinates.

        Class columns are recomputed only for classes whose packed segment
        differs from ``base``; finite-difference sweeps touch one class
        (or only the gating block) per point, making this K times cheaper.
        """
        packed = np.atleast_2d(np.asarray(packed, dtype=float))
        P = packed.shape[0]
        K = self.spec.n_classes
        key = base.tobytes()
        if self._base_cache is None or self._base_cache[0] != key:
            sp, _ = self.layout.stacked_from_packed(base[None, :])
            self._base_cache = (key, self.class_loglik_matrix(sp).reshape(K, self.n))
        base_cols = self._base_cache[1]
        cols = np.repeat(base_cols.T[None, :, :], P, axis=0)
        cs = self.layout.class_size
        for k in range(K):
            seg = slice(k * cs, (k + 1) * cs)
            changed = np.flatnonzero(np.any(packed[:, seg] != base[seg], axis=1))
            for lo in range(0, changed.size, self._chunk * K):
                idx = changed[lo:lo + self._chunk * K]
                sp_k, _ = self.layout.stacked_from_packed(packed[idx], class_indices=[k])
                cols[idx, :, k] = self.class_loglik_matrix(sp_k)
        if self.layout.n_gating:
            gating = packed[:, self.layout.gating_offset:].reshape(P, K - 1, -1)
        else:
            gating = np.zeros((P, 0, 1))
        return self._combine(cols, gating)

    def loglik(self, packed: np.ndarray) -> float:
        return float(self.loglik_many(packed[None, :])[0])

    def posterior_matrix(self, packed: np.ndarray) -> np.ndarray:
        """Posterior membership probabilities, shape (N, K), rows sum to 1."""
        sp, gating = self.layout.stacked_from_packed(packed[None, :])
        K = self.spec.n_classes
        ll = self.class_loglik_matrix(sp).reshape(1, K, self.n)[0].T
        logits = np.zeros((self.n, K))
        if K > 1:
            logits[:, 1:] = gating[0, :, 0] + self.x_g @ gating[0, :, 1:].T
        log_pi = logits - logsumexp(logits, axis=-1, keepdims=True)
        log_post = log_pi + ll
        log_post -= logsumexp(log_post, axis=-1, keepdims=True)
        return np.exp(log_post)

    def individual_times(self, i: int) -> np.ndarray:
        return self.times[i]


def class_loglik(individual, params: ClassParameters, decomposition) -> float:
    """FIML log density of one individual's observed entries under one class.

    ``individual`` provides times plus the observed vector in the layout
    (x_1..x_J, y_1..y_J, x_e); entries of x and y may be NaN (missing) and
    are dropped from the density.
    """
    times, obs = _individual_arrays(individual, params)
    sp = stack_class_parameters([params])
    mean, cov = stacked_moments(sp, times[None, :], decomposition)
    mask = np.isfinite(obs)
    idx = np.flatnonzero(mask)
    return gaussian_logpdf(obs[idx], mean[0, 0][idx], cov[0, 0][np.ix_(idx, idx)])


def _individual_arrays(individual, params: ClassParameters):
    if isinstance(individual, tuple):
        times, obs = individual
        return np.asarray(times, dtype=float), np.asarray(obs, dtype=float)
    times = np.asarray(individual.times, dtype=float)
    parts = []
    if params.has_tvc:
        parts.append(np.asarray(individual.x, dtype=float))
    parts.append(np.asarray(individual.y, dtype=float))
    if params.has_tic:
        parts.append(np.atleast_1d(np.asarray(individual.x_e, dtype=float)))
    return times, np.concatenate(parts)


def mixture_loglik(dataset, theta: MixtureParameters, spec: ModelSpec) -> float:
    """Observed-data mixture log-likelihood (log-sum-exp stabilized)."""
    engine = LoglikEngine(dataset, spec)
    return engine.loglik(engine.layout.pack(theta))


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


@dataclass
class FitOptions:
    max_attempts: int = 10
    seed: int = 0
    ftol: float = 1e-8
    gtol: float = 1e-5
    max_iter: int = 600
    gradient_step: float = 1e-5
    hessian_step: float = 1e-4
    compute_se: bool = True
    transformed_variance_ci: bool = False
    min_class_share: float = 0.01
    jitter_sd: float = 0.25
    refine_starts: bool = True
    refine_max_iter: int = 80
    # relative eigenvalue tolerance separating finite-difference noise /
    # likelihood plateaus (repairable) from genuine indefiniteness
    hessian_indefinite_tol: float = 1e-6
    verbose: bool = False


@dataclass(frozen=True)
class FitStatus:
    converged: bool
    attempts_used: int
    message: str = ""


@dataclass
class FitResult:
    """Converged (or failed) mixture fit with reporting-scale summaries."""

    spec: ModelSpec
    status: FitStatus
    loglik: float
    aic: float
    bic: float
    n_free_parameters: int
    n_individuals: int
    estimates: MixtureParameters | None
    names: list[str] = field(default_factory=list)
    values: np.ndarray | None = None
    standard_errors: np.ndarray | None = None
    ci_lower: np.ndarray | None = None
    ci_upper: np.ndarray | None = None
    posterior: np.ndarray | None = None
    packed: np.ndarray | None = None
    packed_cov: np.ndarray | None = None

    def __getitem__(self, name: str):
        i = self.names.index(name)
        return {
            "value": float(self.values[i]),
            "se": float(self.standard_errors[i]) if self.standard_errors is not None else math.nan,
            "ci": (float(self.ci_lower[i]), float(self.ci_upper[i])) if self.ci_lower is not None else (math.nan, math.nan),
        }

    @property
    def converged(self) -> bool:
        return self.status.converged

    @property
    def mixing_proportions(self) -> np.ndarray:
        if self.posterior is not None:
            return self.posterior.mean(axis=0)
        return gating_probabilities(np.zeros(self.spec.n_gating_tics), self.estimates.gating)


class _Objective:
    """Scaled negative log-likelihood with memoized central-difference gradient."""

    def __init__(self, engine: LoglikEngine, step: float):
        self.engine = engine
        self.scale = 1.0 / engine.n
        self.step = step
        self.n_evals = 0
        self._cache: tuple[bytes, float] | None = None

    def value(self, x: np.ndarray) -> float:
        key = x.tobytes()
        if self._cache is not None and self._cache[0] == key:
            return self._cache[1]
        self.n_evals += 1
        v = -self.engine.loglik(x) * self.scale
        if not np.isfinite(v):
            v = 1e12
        self._cache = (key, v)
        return v

    def gradient(self, x: np.ndarray) -> np.ndarray:
        h = self.step * (1.0 + np.abs(x))
        p = x.size
        pts = np.repeat(x[None, :], 2 * p, axis=0)
        idx = np.arange(p)
        pts[2 * idx, idx] += h
        pts[2 * idx + 1, idx] -= h
        vals = -self.engine.loglik_many_delta(x, pts) * self.scale
        self.n_evals += 2 * p
        vals = np.where(np.isfinite(vals), vals, 1e12)
        return (vals[0::2] - vals[1::2]) / (2.0 * h)


def central_difference_gradient(engine: LoglikEngine, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the total mixture log-likelihood."""
    obj = _Objective(engine, step)
    return -obj.gradient(np.asarray(x, dtype=float)) * engine.n


def _curvature_scale(obj: _Objective, x0: np.ndarray) -> np.ndarray:
    """Per-coordinate sqrt-curvature used to precondition the optimizer.

    The packed vector mixes coordinates whose curvatures differ by orders
    of magnitude (means near 50 next to log variances); scaling by the
    square root of the second-difference diagonal makes L-BFGS-B behave
    as on a roughly isotropic problem.
    """
    h = 1e-4 * (1.0 + np.abs(x0))
    p = x0.size
    pts = np.repeat(x0[None, :], 2 * p, axis=0)
    idx = np.arange(p)
    pts[2 * idx, idx] += h
    pts[2 * idx + 1, idx] -= h
    vals = -obj.engine.loglik_many_delta(x0, pts) * obj.scale
    f0 = obj.value(x0)
    diag = (vals[0::2] - 2.0 * f0 + vals[1::2]) / h ** 2
    diag = np.abs(diag)
    finite = diag[np.isfinite(diag) & (diag > 0)]
    ref = np.median(finite) if finite.size else 1.0
    diag = np.where(np.isfinite(diag) & (diag > 0), diag, ref)
    return np.sqrt(np.clip(diag, ref * 1e-6, ref * 1e8))


def _run_lbfgsb(obj: _Objective, x0: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                max_iter: int, ftol: float, gtol: float, rounds: int = 5):
    """L-BFGS-B on curvature-rescaled coordinates; returns (x, fun, success, res).

    The curvature scale is re-estimated and the optimization restarted
    once from the solution: parameters that move far (variances heading
    to a bound, say) invalidate the initial scaling, and the cheap second
    round restores fast local convergence there.
    """
    x_best, f_best = x0, np.inf
    succeeded = False
    last_res = None
    scale = np.ones_like(x0)
    for _ in range(rounds):
        scale = _curvature_scale(obj, x_best)
        res = minimize(
            lambda u: obj.value(u / scale),
            x_best * scale,
            jac=lambda u: obj.gradient(u / scale) / scale,
            method="L-BFGS-B",
            bounds=list(zip(lo * scale, hi * scale)),
            options={"maxiter": max_iter, "ftol": ftol, "gtol": gtol, "maxcor": 25},
        )
        last_res = res
        round_ok = bool(res.success) and np.isfinite(res.fun)
        gain = f_best - res.fun if np.isfinite(res.fun) else -np.inf
        if gain > 0:
            x_best, f_best = res.x / scale, res.fun
        succeeded |= round_ok
        # stop once another rescaled round stops paying for itself; a
        # stalled round gets one more chance under a fresh scaling
        if (res.nit <= 2 and round_ok) or gain < max(100.0 * ftol * (1.0 + abs(f_best)), 1e-13):
            break
    if not succeeded and np.isfinite(f_best):
        # line searches can stall (ABNORMAL) essentially at a solution;
        # accept the point if its Newton decrement under the curvature
        # scaling predicts only a negligible further improvement
        g = obj.gradient(x_best)
        at_lo = x_best <= lo + 1e-10
        at_hi = x_best >= hi - 1e-10
        pg = np.where(at_lo, np.minimum(g, 0.0), np.where(at_hi, np.maximum(g, 0.0), g))
        predicted = 0.5 * float(np.sum((pg / scale) ** 2))
        succeeded = predicted < 1e-6 * (1.0 + abs(f_best))
    return x_best, f_best, succeeded and np.isfinite(f_best), last_res


def _numeric_hessian(engine: LoglikEngine, x: np.ndarray, step: float) -> np.ndarray:
    """Central-difference Hessian of the total negative log-likelihood."""
    p = x.size
    h = step * (1.0 + np.abs(x))
    f0 = -engine.loglik(x)
    pts = []
    for i in range(p):
        ei = np.zeros(p)
        ei[i] = h[i]
        pts.append(x + ei)
        pts.append(x - ei)
    for i in range(p):
        for j in range(i):
            ei = np.zeros(p)
            ei[i] = h[i]
            ej = np.zeros(p)
            ej[j] = h[j]
            pts.extend([x + ei + ej, x + ei - ej, x - ei + ej, x - ei - ej])
    vals = -engine.loglik_many_delta(x, np.asarray(pts))
    H = np.zeros((p, p))
    for i in range(p):
        H[i, i] = (vals[2 * i] - 2.0 * f0 + vals[2 * i + 1]) / h[i] ** 2
    base = 2 * p
    c = 0
    for i in range(p):
        for j in range(i):
            fpp, fpm, fmp, fmm = vals[base + 4 * c: base + 4 * c + 4]
            H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j])
            c += 1
    return H


def _natural_jacobian(layout: ParameterLayout, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    h = step * (1.0 + np.abs(x))
    p = x.size
    pts = np.repeat(x[None, :], 2 * p, axis=0)
    idx = np.arange(p)
    pts[2 * idx, idx] += h
    pts[2 * idx + 1, idx] -= h
    nat = layout.natural(pts)
    return (nat[0::2] - nat[1::2]).T / (2.0 * h)


def _relabel_packed(layout: ParameterLayout, x: np.ndarray) -> np.ndarray:
    """Reorder classes by ascending conditional baseline mean of the outcome.

    The gating block is re-referenced so the permuted parameters describe
    the identical mixture.
    """
    from .moments import conditional_growth_moments

    theta = layout.unpack(x)
    K = layout.spec.n_classes
    if K == 1:
        return x
    base = np.array([conditional_growth_moments(p)[0][0] for p in theta.classes])
    order = np.argsort(base, kind="stable")
    if np.all(order == np.arange(K)):
        return x
    out = x.copy()
    for new_k, old_k in enumerate(order):
        layout.class_segment(out, new_k)[:] = layout.class_segment(x, old_k)
    if layout.n_gating:
        g = x[layout.gating_offset:].reshape(K - 1, -1)
        logits = np.vstack([np.zeros(g.shape[1]), g])
        new_logits = logits[order] - logits[order[0]]
        out[layout.gating_offset:] = new_logits[1:].ravel()
    return out


def _softplus_floor(mat: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """Symmetrize and lift eigenvalues to at least ``floor``."""
    m = 0.5 * (mat + mat.T)
    w, v = np.linalg.eigh(m)
    return (v * np.maximum(w, floor)) @ v.T


def _kmeans(X: np.ndarray, k: int, rng: np.random.Generator, n_init: int = 5) -> np.ndarray:
    X = (X - X.mean(0)) / np.where(X.std(0) > 0, X.std(0), 1.0)
    best_labels, best_inertia = None, np.inf
    for _ in range(n_init):
        centers = X[rng.choice(len(X), size=k, replace=False)]
        labels = np.zeros(len(X), dtype=int)
        for _ in range(60):
            d = ((X[:, None, :] - centers[None]) ** 2).sum(-1)
            labels = d.argmin(1)
            new_centers = centers.copy()
            for j in range(k):
                if np.any(labels == j):
                    new_centers[j] = X[labels == j].mean(0)
            if np.allclose(new_centers, centers):
                break
            centers = new_centers
        inertia = ((X - centers[labels]) ** 2).sum()
        if inertia < best_inertia:
            best_inertia, best_labels = inertia, labels.copy()
    return best_labels


def _ols_growth_summaries(times: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-individual OLS intercept and slope of y on time (missing-safe)."""
    n = times.shape[0]
    out = np.zeros((n, 2))
    for i in range(n):
        mask = np.isfinite(y[i])
        if mask.sum() >= 2:
            X = np.column_stack([np.ones(mask.sum()), times[i, mask]])
            out[i], *_ = np.linalg.lstsq(X, y[i, mask], rcond=None)
    return out


def _init_knot(times: np.ndarray, y: np.ndarray) -> float:
    """Grid-search two-segment least squares on the wave means."""
    tbar = times.mean(0)
    ybar = np.array([np.nanmean(y[:, j]) if np.any(np.isfinite(y[:, j])) else 0.0 for j in range(y.shape[1])])
    best_g, best_sse = tbar[len(tbar) // 2], np.inf
    for g in tbar[1:-1]:
        X = np.column_stack([np.ones_like(tbar), np.minimum(tbar, g), np.maximum(tbar - g, 0.0)])
        coef, *_ = np.linalg.lstsq(X, ybar, rcond=None)
        sse = ((ybar - X @ coef) ** 2).sum()
        if sse < best_sse:
            best_sse, best_g = sse, g
    return float(best_g)


def _factor_scores(form: FunctionalForm, times: np.ndarray, y: np.ndarray):
    """Per-individual OLS factor scores in the natural basis + residual var."""
    n, J = y.shape
    C = form.n_factors
    scores = np.zeros((n, C))
    sse, dof = 0.0, 0
    lam_all = form.loadings(times)
    for i in range(n):
        mask = np.isfinite(y[i])
        if mask.sum() >= C + 1:
            X = lam_all[i][mask]
            coef, *_ = np.linalg.lstsq(X, y[i, mask], rcond=None)
            scores[i] = coef
            r = y[i, mask] - X @ coef
            sse += r @ r
            dof += mask.sum() - C
    resid_var = sse / max(dof, 1)
    return form.from_internal(scores), max(resid_var, 1e-4)


def _initial_class_parameters(spec: ModelSpec, times, y, x, x_e) -> ClassParameters:
    C = spec.n_factors
    J = times.shape[1]
    if spec.form == "bilinear":
        form = make_form("bilinear", _init_knot(times, y))
    elif spec.form == "negexp":
        form = make_form("negexp", 2.0 / max(times.max() - times.min(), 1.0))
    elif spec.form == "jenss":
        form = make_form("jenss", -2.0 / max(times.max() - times.min(), 1.0))
    else:
        form = make_form(spec.form)
    scores, theta_y = _factor_scores(form, times, y)
    alpha = scores.mean(0)
    psi = _softplus_floor(np.cov(scores.T) if len(scores) > C else np.eye(C), 1e-2)

    kwargs: dict = {}
    if spec.has_tvc:
        dt = np.diff(times, axis=1)
        slopes = np.diff(x, axis=1) / dt
        mean_slopes = np.array([np.nanmean(slopes[:, j]) for j in range(J - 1)])
        first = mean_slopes[0] if np.isfinite(mean_slopes[0]) and abs(mean_slopes[0]) > 1e-8 else 1.0
        rates = np.clip(np.nan_to_num(mean_slopes / first, nan=1.0), -10.0, 10.0)
        rates[0] = 1.0
        cum = np.concatenate([np.zeros((len(x), 1)), np.cumsum(rates * dt, axis=1)], axis=1)
        eta = np.zeros((len(x), 2))
        sse, dof = 0.0, 0
        for i in range(len(x)):
            mask = np.isfinite(x[i])
            if mask.sum() >= 3:
                X = np.column_stack([np.ones(mask.sum()), cum[i, mask]])
                eta[i], *_ = np.linalg.lstsq(X, x[i, mask], rcond=None)
                r = x[i, mask] - X @ eta[i]
                sse += r @ r
                dof += mask.sum() - 2
        kwargs.update(
            mu_eta_x=eta.mean(0),
            phi_eta_x=_softplus_floor(np.cov(eta.T), 1e-2),
            rates=rates,
            kappa=0.0,
            theta_x=max(sse / max(dof, 1), 1e-4),
            theta_xy=0.0,
        )
    if spec.has_tic:
        kwargs.update(mu_x=float(np.mean(x_e)), phi_x=max(float(np.var(x_e)), 1e-4))
    # regress factor scores on available covariates for start values
    regressors = []
    if spec.has_tic:
        regressors.append(x_e)
    if spec.has_tvc:
        regressors.append(eta[:, 0])
    if regressors:
        X = np.column_stack([np.ones(len(scores))] + regressors)
        coef, *_ = np.linalg.lstsq(X, scores, rcond=None)
        alpha = coef[0]
        col = 1
        if spec.has_tic:
            kwargs["beta_tic"] = coef[col]
            col += 1
        if spec.has_tvc:
            kwargs["beta_tvc"] = coef[col]
        resid = scores - X @ coef
        psi = _softplus_floor(np.cov(resid.T), 1e-2)
    if spec.has_tic and spec.has_tvc:
        c = np.corrcoef(x_e, eta[:, 0])[0, 1]
        kwargs["rho_bl"] = float(np.clip(np.nan_to_num(c), -0.9, 0.9))
    return ClassParameters(form=form, alpha_y=alpha, psi_eta_y=psi, theta_y=theta_y, **kwargs)


def initial_parameters(dataset, spec: ModelSpec, rng: np.random.Generator,
                       options: FitOptions | None = None) -> MixtureParameters:
    """Start values: k-means on OLS growth summaries, then within-cluster moments.

    With ``refine_starts`` each cluster's moment estimates are polished by
    a short single-class optimization on the cluster members, which lands
    the full mixture optimization much closer to its optimum.
    """
    times = np.asarray(dataset.times, dtype=float)
    y = np.asarray(dataset.y, dtype=float)
    K = spec.n_classes
    if K == 1:
        labels = np.zeros(len(y), dtype=int)
    else:
        labels = _kmeans(_ols_growth_summaries(times, y), K, rng)
    classes = []
    for k in range(K):
        mask = labels == k
        if mask.sum() < max(spec.n_factors + 2, 5):
            mask = np.ones(len(y), dtype=bool)
        sub = _Subset(
            times=times[mask],
            y=y[mask],
            x=np.asarray(dataset.x, dtype=float)[mask] if spec.has_tvc else None,
            x_e=np.asarray(dataset.x_e, dtype=float)[mask] if spec.has_tic else None,
        )
        params = _initial_class_parameters(spec, sub.times, sub.y, sub.x, sub.x_e)
        if options is not None and options.refine_starts and K > 1:
            params = _refine_single_class(params, sub, spec, options)
        classes.append(params)
    if K > 1:
        gating = GatingParameters(np.zeros(K - 1), np.zeros((K - 1, spec.n_gating_tics)))
    else:
        gating = GatingParameters.empty()
    return MixtureParameters(classes, gating)


@dataclass
class _Subset:
    times: np.ndarray
    y: np.ndarray
    x: np.ndarray | None
    x_e: np.ndarray | None
    x_g = None

    @property
    def n_waves(self):
        return self.times.shape[1]


def _refine_single_class(params: ClassParameters, sub: _Subset, spec: ModelSpec,
                         options: FitOptions) -> ClassParameters:
    """Short one-class optimization on a cluster to sharpen start values."""
    spec1 = replace(spec, n_classes=1, n_gating_tics=0)
    engine = LoglikEngine(sub, spec1)
    layout = engine.layout
    x0 = layout.pack(MixtureParameters([params], GatingParameters.empty()))
    bounds = layout.bounds(float(engine.times.min()), float(engine.times.max()))
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    x0 = np.clip(x0, lo + 1e-9, hi - 1e-9)
    obj = _Objective(engine, options.gradient_step)
    x_opt, f_opt, success, _ = _run_lbfgsb(obj, x0, lo, hi, options.refine_max_iter, 1e-7, 1e-4)
    x_best = x_opt if success and f_opt <= obj.value(x0) else x0
    return layout.unpack(x_best).classes[0]


def fit(dataset, spec: ModelSpec, options: FitOptions | None = None) -> FitResult:
    """Estimate the mixture by multi-start quasi-Newton FIML.

    Retries with jittered starting values up to ``max_attempts`` when the
    optimizer fails, a class degenerates below the minimum expected share,
    or (when standard errors are requested) the Hessian is not positive
    definite.  Classes are relabeled by ascending conditional baseline
    mean of the outcome before any summaries are computed.
    """
    opts = options or FitOptions()
    rng = np.random.default_rng(opts.seed)
    engine = LoglikEngine(dataset, spec)
    layout = engine.layout
    t_min, t_max = float(engine.times.min()), float(engine.times.max())
    bounds = layout.bounds(t_min, t_max)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])

    base = layout.pack(initial_parameters(dataset, spec, rng, opts))
    base = np.clip(base, lo + 1e-9, hi - 1e-9)
    obj = _Objective(engine, opts.gradient_step)

    failure = "did not converge"
    for attempt in range(1, opts.max_attempts + 1):
        t_start = time.perf_counter()
        x0 = base if attempt == 1 else np.clip(base * rng.normal(1.0, opts.jitter_sd, base.size), lo + 1e-9, hi - 1e-9)
        x_opt, f_opt, success, res = _run_lbfgsb(obj, x0, lo, hi, opts.max_iter, opts.ftol, opts.gtol)
        if opts.verbose:
            print(f"[fit] attempt {attempt}: nit={res.nit} f={f_opt:.6f} success={success} "
                  f"({time.perf_counter() - t_start:.1f}s) {res.message}", flush=True)
        if not success:
            failure = f"optimizer: {res.message}"
            continue
        x_hat = _relabel_packed(layout, x_opt)
        posterior = engine.posterior_matrix(x_hat)
        share = posterior.mean(axis=0)
        if spec.n_classes > 1 and share.min() < opts.min_class_share:
            failure = f"degenerate class (min share {share.min():.4f})"
            continue

        loglik = engine.loglik(x_hat)
        packed_cov = None
        values = layout.natural(x_hat)
        ses = ci_lo = ci_hi = None
        message = "converged"
        if opts.compute_se:
            t_h = time.perf_counter()
            H = _numeric_hessian(engine, x_hat, opts.hessian_step)
            if opts.verbose:
                print(f"[fit] hessian in {time.perf_counter() - t_h:.1f}s", flush=True)
            packed_cov, repaired = _invert_hessian(0.5 * (H + H.T), opts.hessian_indefinite_tol)
            if packed_cov is None:
                failure = "Hessian indefinite at the optimum"
                if opts.verbose:
                    eigs = np.linalg.eigvalsh(0.5 * (H + H.T))
                    print(f"[fit] hessian eigen range: {eigs.min():.3e} .. {eigs.max():.3e}", flush=True)
                continue
            if repaired:
                message = "converged (near-singular information matrix repaired)"
            Jac = _natural_jacobian(layout, x_hat)
            ses = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", Jac, packed_cov, Jac), 0.0))
            ci_lo = values - 1.96 * ses
            ci_hi = values + 1.96 * ses
            if opts.transformed_variance_ci:
                for i, name in enumerate(layout.names):
                    tail = name.split(".")[-1]
                    if tail in ("phi_x", "theta_x", "theta_y") or _is_diag_cov_name(tail):
                        v, s = values[i], ses[i]
                        if v > 0 and s > 0:
                            ci_lo[i] = v * math.exp(-1.96 * s / v)
                            ci_hi[i] = v * math.exp(1.96 * s / v)

        p = layout.size
        return FitResult(
            spec=spec,
            status=FitStatus(True, attempt, message),
            loglik=loglik,
            aic=-2.0 * loglik + 2.0 * p,
            bic=-2.0 * loglik + p * math.log(engine.n),
            n_free_parameters=p,
            n_individuals=engine.n,
            estimates=layout.unpack(x_hat),
            names=layout.names,
            values=values,
            standard_errors=ses,
            ci_lower=ci_lo,
            ci_upper=ci_hi,
            posterior=posterior,
            packed=x_hat,
            packed_cov=packed_cov,
        )

    return FitResult(
        spec=spec,
        status=FitStatus(False, opts.max_attempts, failure),
        loglik=math.nan,
        aic=math.nan,
        bic=math.nan,
        n_free_parameters=layout.size,
        n_individuals=engine.n,
        estimates=None,
    )


def _invert_hessian(H: np.ndarray, indefinite_tol: float):
    """Invert the observed information, tolerating likelihood plateaus.

    A clean Cholesky inverts directly.  Eigenvalues that are negative
    beyond ``indefinite_tol`` (relative to the largest) mean the point is
    not a maximum and the attempt must fail; tiny or slightly negative
    eigenvalues happen on genuine plateaus (for example gating scale when
    memberships are almost deterministic in the covariates) and are
    floored, which yields appropriately enormous standard errors along
    those directions.  Returns (covariance | None, repaired_flag).
    """
    try:
        inv_c = np.linalg.inv(np.linalg.cholesky(H))
        return inv_c.T @ inv_c, False
    except np.linalg.LinAlgError:
        pass
    eigs, vecs = np.linalg.eigh(H)
    top = eigs.max()
    if not np.isfinite(top) or top <= 0 or eigs.min() < -indefinite_tol * top:
        return None, False
    floored = np.maximum(eigs, 1e-10 * top)
    return (vecs / floored) @ vecs.T, True


def _is_diag_cov_name(tail: str) -> bool:
    for prefix in ("phi_eta_x_", "psi_y_"):
        if tail.startswith(prefix):
            ij = tail[len(prefix):]
            return len(ij) == 2 and ij[0] == ij[1]
    return False


# ---------------------------------------------------------------------------
# class enumeration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnumerationRow:
    n_classes: int
    converged: bool
    minus2ll: float
    aic: float
    bic: float
    residual_variances: tuple
    mixing_proportions: tuple


@dataclass(frozen=True)
class EnumerationTable:
    rows: list[EnumerationRow]

    @property
    def selected_k(self) -> int | None:
        return select_k_by_bic(
            [r.n_classes for r in self.rows],
            [r.bic for r in self.rows],
            [r.converged for r in self.rows],
        )


def select_k_by_bic(ks, bics, converged=None) -> int | None:
    """Smallest-BIC selection; failed fits are excluded from the argmin."""
    best_k, best_bic = None, np.inf
    for i, (k, b) in enumerate(zip(ks, bics)):
        if converged is not None and not converged[i]:
            continue
        if np.isfinite(b) and b < best_bic:
            best_k, best_bic = k, b
    return best_k


def enumerate_classes(dataset, spec_template: ModelSpec, k_max: int,
                      options: FitOptions | None = None) -> EnumerationTable:
    """Fit covariate-free mixtures for K = 1..k_max and tabulate fit info.

    Enumeration follows the convention of choosing the number of classes
    before covariates enter the model: no TVC, no TIC, intercept-only
    gating.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    opts = options or FitOptions()
    rows = []
    for k in range(1, k_max + 1):
        spec = replace(spec_template.without_covariates(), n_classes=k)
        fit_opts = replace(opts, compute_se=False)
        result = fit(dataset, spec, fit_opts)
        if result.converged:
            theta = result.estimates
            resid = tuple(float(p.theta_y) for p in theta.classes)
            mix = tuple(float(v) for v in gating_probabilities(np.zeros(0), theta.gating))
            rows.append(EnumerationRow(k, True, -2.0 * result.loglik, result.aic, result.bic, resid, mix))
        else:
            rows.append(EnumerationRow(k, False, math.nan, math.nan, math.nan, (), ()))
    return EnumerationTable(rows)
