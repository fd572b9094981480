"""Model-implied moments of the stacked observed vector.

Each latent class defines a linear-Gaussian structural model over the
latent vector (constant, second-type TIC, TVC baseline, TVC shape factor,
outcome growth-factor deviations).  Propagating that map exactly yields
the individual-specific implied mean and covariance of the observed
vector laid out as (x_1..x_J, y_1..y_J, x_e); missing-data likelihoods
and data generation both rest on these moments.

The constant latent (the "triangle" of a path diagram) carries the
intercept terms so the mean is exactly A @ m.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .forms import (
    FunctionalForm,
    TvcDecomposition,
    _unwrap_times,
    as_rates,
    state_loadings,
)


def _check_spd(mat: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(mat, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square")
    if not np.allclose(m, m.T, atol=1e-10):
        raise ValueError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} must be positive definite") from None
    return m


@dataclass(frozen=True)
class ClassParameters:
    """Per-class parameter block of the mixture.

    Covariate-free reduced models (used for class enumeration) leave the
    TVC and TIC blocks as None; `rho_bl` is meaningful only when both are
    present.
    """

    form: FunctionalForm
    alpha_y: np.ndarray
    psi_eta_y: np.ndarray
    theta_y: float
    # TVC block
    mu_eta_x: np.ndarray | None = None
    phi_eta_x: np.ndarray | None = None
    rates: np.ndarray | None = None
    beta_tvc: np.ndarray | None = None
    kappa: float = 0.0
    theta_x: float | None = None
    theta_xy: float = 0.0
    # second-type TIC block
    mu_x: float | None = None
    phi_x: float | None = None
    beta_tic: np.ndarray | None = None
    rho_bl: float = 0.0

    def __post_init__(self):
        C = self.form.n_factors
        object.__setattr__(self, "alpha_y", np.asarray(self.alpha_y, dtype=float))
        if self.alpha_y.shape != (C,):
            raise ValueError(f"alpha_y must have length {C}")
        object.__setattr__(self, "psi_eta_y", _check_spd(self.psi_eta_y, "psi_eta_y"))
        if self.psi_eta_y.shape != (C, C):
            raise ValueError(f"psi_eta_y must be {C}x{C}")
        if not (self.theta_y > 0):
            raise ValueError("theta_y must be positive")
        if self.has_tvc:
            object.__setattr__(self, "mu_eta_x", np.asarray(self.mu_eta_x, dtype=float))
            if self.mu_eta_x.shape != (2,):
                raise ValueError("mu_eta_x must have length 2")
            object.__setattr__(self, "phi_eta_x", _check_spd(self.phi_eta_x, "phi_eta_x"))
            if self.phi_eta_x.shape != (2, 2):
                raise ValueError("phi_eta_x must be 2x2")
            object.__setattr__(self, "rates", as_rates(self.rates))
            object.__setattr__(self, "beta_tvc", np.asarray(self.beta_tvc, dtype=float))
            if self.beta_tvc.shape != (C,):
                raise ValueError(f"beta_tvc must have length {C}")
            if self.theta_x is None or not (self.theta_x > 0):
                raise ValueError("theta_x must be positive when the TVC is present")
            if not abs(self.theta_xy) < np.sqrt(self.theta_x * self.theta_y):
                raise ValueError("theta_xy must satisfy |theta_xy| < sqrt(theta_x*theta_y)")
        if self.has_tic:
            if self.phi_x is None or not (self.phi_x > 0):
                raise ValueError("phi_x must be positive when the TIC is present")
            object.__setattr__(self, "beta_tic", np.asarray(self.beta_tic, dtype=float))
            if self.beta_tic.shape != (C,):
                raise ValueError(f"beta_tic must have length {C}")
        if self.has_tvc and self.has_tic and not abs(self.rho_bl) < 1:
            raise ValueError("rho_bl must lie in (-1, 1)")

    @property
    def has_tvc(self) -> bool:
        return self.mu_eta_x is not None

    @property
    def has_tic(self) -> bool:
        return self.mu_x is not None

    @property
    def n_factors(self) -> int:
        return self.form.n_factors


@dataclass(frozen=True)
class ImpliedMoments:
    """Implied mean and covariance over (x_1..x_J, y_1..y_J, x_e)."""

    mean: np.ndarray
    cov: np.ndarray

    def submatrix(self, idx) -> "ImpliedMoments":
        idx = np.asarray(idx)
        return ImpliedMoments(self.mean[idx], self.cov[np.ix_(idx, idx)])


@dataclass
class StackedParams:
    """B class-parameter sets stacked along a leading axis.

    Outcome-factor quantities are stored in the internal loading basis of
    the form (reparameterized for the bilinear spline) so moment assembly
    never branches on the form again.
    """

    form_kind: type
    has_tvc: bool
    has_tic: bool
    n_factors: int
    alpha: np.ndarray
    psi: np.ndarray
    theta_y: np.ndarray
    coef: np.ndarray | None = None
    mu_eta_x: np.ndarray | None = None
    phi_eta_x: np.ndarray | None = None
    rates: np.ndarray | None = None
    beta_tvc: np.ndarray | None = None
    kappa: np.ndarray | None = None
    theta_x: np.ndarray | None = None
    theta_xy: np.ndarray | None = None
    mu_x: np.ndarray | None = None
    phi_x: np.ndarray | None = None
    beta_tic: np.ndarray | None = None
    rho_bl: np.ndarray | None = None
    size: int = field(init=False)

    def __post_init__(self):
        self.size = self.alpha.shape[0]


def stack_class_parameters(params_list: list[ClassParameters]) -> StackedParams:
    """Stack per-class parameters, converting to the internal factor basis."""
    first = params_list[0]
    kind = type(first.form)
    if any(type(p.form) is not kind for p in params_list):
        raise ValueError("all classes must share a functional form")
    if any(p.has_tvc != first.has_tvc or p.has_tic != first.has_tic for p in params_list):
        raise ValueError("all classes must share the covariate structure")
    alpha = np.stack([p.form.to_internal(p.alpha_y) for p in params_list])
    psi = np.stack([p.form.to_internal_cov(p.psi_eta_y) for p in params_list])
    sp = StackedParams(
        form_kind=kind,
        has_tvc=first.has_tvc,
        has_tic=first.has_tic,
        n_factors=first.n_factors,
        alpha=alpha,
        psi=psi,
        theta_y=np.array([p.theta_y for p in params_list]),
    )
    if first.form.coefficient_name is not None:
        sp.coef = np.array([p.form.coefficient for p in params_list])
    if first.has_tvc:
        sp.mu_eta_x = np.stack([p.mu_eta_x for p in params_list])
        sp.phi_eta_x = np.stack([p.phi_eta_x for p in params_list])
        sp.rates = np.stack([p.rates for p in params_list])
        sp.beta_tvc = np.stack([p.form.to_internal(p.beta_tvc) for p in params_list])
        sp.kappa = np.array([p.kappa for p in params_list])
        sp.theta_x = np.array([p.theta_x for p in params_list])
        sp.theta_xy = np.array([p.theta_xy for p in params_list])
    if first.has_tic:
        sp.mu_x = np.array([p.mu_x for p in params_list])
        sp.phi_x = np.array([p.phi_x for p in params_list])
        sp.beta_tic = np.stack([p.form.to_internal(p.beta_tic) for p in params_list])
    if first.has_tvc and first.has_tic:
        sp.rho_bl = np.array([p.rho_bl for p in params_list])
    return sp


def _form_loadings(sp: StackedParams, times: np.ndarray) -> np.ndarray:
    """Internal-basis outcome loadings, shape (B, N, J, C)."""
    B = sp.size
    t = times[None, :, :]
    ones = np.broadcast_to(np.ones_like(times), (B,) + times.shape)
    kind = sp.form_kind.name
    if kind == "linear":
        cols = [ones, np.broadcast_to(t, ones.shape)]
    elif kind == "quadratic":
        cols = [ones, np.broadcast_to(t, ones.shape), np.broadcast_to(t * t, ones.shape)]
    elif kind == "negexp":
        b = sp.coef[:, None, None]
        cols = [ones, 1.0 - np.exp(-b * t)]
    elif kind == "jenss":
        c = sp.coef[:, None, None]
        cols = [ones, np.broadcast_to(t, ones.shape), np.exp(c * t) - 1.0]
    elif kind == "bilinear":
        d = t - sp.coef[:, None, None]
        cols = [ones, d, np.abs(d)]
    else:
        raise ValueError(f"unknown form kind {kind!r}")
    return np.stack(cols, axis=-1)


def observed_dim(n_waves: int, has_tvc: bool, has_tic: bool) -> int:
    return n_waves * (1 + has_tvc) + has_tic


def stacked_design(sp: StackedParams, times: np.ndarray, decomposition):
    """Assemble (A, m, V, R) for B parameter sets and N individuals.

    times: (N, J).  Returns A (B, N, D, L), m (B, L), V (B, L, L) and
    R (B, D, D) with D the observed dimension and L = 1 + tic + 2*tvc + C.
    """
    times = np.asarray(times, dtype=float)
    N, J = times.shape
    B, C = sp.size, sp.n_factors
    dt = np.diff(times, axis=-1)

    L = 1 + (1 if sp.has_tic else 0) + (2 if sp.has_tvc else 0) + C
    D = observed_dim(J, sp.has_tvc, sp.has_tic)
    i_xe = 1 if sp.has_tic else None
    i_eta0 = (2 if sp.has_tic else 1) if sp.has_tvc else None
    i_zeta = 1 + (1 if sp.has_tic else 0) + (2 if sp.has_tvc else 0)
    r_y = J if sp.has_tvc else 0

    lam_y = _form_loadings(sp, times)
    A = np.zeros((B, N, D, L))
    # y-block: intercepts load on the constant; covariate effects enter
    # through the factor loadings; the state effect loads the shape factor
    A[:, :, r_y:r_y + J, 0] = np.einsum("bnjc,bc->bnj", lam_y, sp.alpha)
    A[:, :, r_y:r_y + J, i_zeta:i_zeta + C] = lam_y
    if sp.has_tic:
        A[:, :, r_y:r_y + J, i_xe] = np.einsum("bnjc,bc->bnj", lam_y, sp.beta_tic)
        A[:, :, D - 1, i_xe] = 1.0
    if sp.has_tvc:
        cum = np.cumsum(sp.rates[:, None, :] * dt[None, :, :], axis=-1)
        A[:, :, 0:J, i_eta0] = 1.0
        A[:, :, 1:J, i_eta0 + 1] = cum
        A[:, :, r_y:r_y + J, i_eta0] = np.einsum("bnjc,bc->bnj", lam_y, sp.beta_tvc)
        s = state_loadings(dt[None, :, :], sp.rates[:, None, :], decomposition)
        A[:, :, r_y:r_y + J, i_eta0 + 1] += sp.kappa[:, None, None] * s

    m = np.zeros((B, L))
    m[:, 0] = 1.0
    V = np.zeros((B, L, L))
    if sp.has_tic:
        m[:, i_xe] = sp.mu_x
        V[:, i_xe, i_xe] = sp.phi_x
    if sp.has_tvc:
        m[:, i_eta0:i_eta0 + 2] = sp.mu_eta_x
        V[:, i_eta0:i_eta0 + 2, i_eta0:i_eta0 + 2] = sp.phi_eta_x
        if sp.has_tic:
            c = sp.rho_bl * np.sqrt(sp.phi_x * sp.phi_eta_x[:, 0, 0])
            V[:, i_xe, i_eta0] = c
            V[:, i_eta0, i_xe] = c
    V[:, i_zeta:, i_zeta:] = sp.psi

    R = np.zeros((B, D, D))
    rng_j = np.arange(J)
    R[:, r_y + rng_j, r_y + rng_j] = sp.theta_y[:, None]
    if sp.has_tvc:
        R[:, rng_j, rng_j] = sp.theta_x[:, None]
        R[:, rng_j, r_y + rng_j] = sp.theta_xy[:, None]
        R[:, r_y + rng_j, rng_j] = sp.theta_xy[:, None]
    return A, m, V, R


def stacked_moments(sp: StackedParams, times: np.ndarray, decomposition):
    """Implied mean (B, N, D) and covariance (B, N, D, D)."""
    A, m, V, R = stacked_design(sp, times, decomposition)
    mean = np.einsum("bndl,bl->bnd", A, m)
    AV = np.einsum("bndl,blm->bndm", A, V)
    cov = AV @ A.swapaxes(-1, -2) + R[:, None, :, :]
    return mean, cov


def latent_design(params: ClassParameters, occasions, decomposition):
    """Linear-Gaussian design (A, m, V, R) for one individual.

    The first latent is the constant 1 (zero variance), so that
    observed = A @ latent + residual reproduces the structural equations
    including all intercept terms.
    """
    t = _unwrap_times(occasions)
    sp = stack_class_parameters([params])
    A, m, V, R = stacked_design(sp, t[None, :], decomposition)
    return A[0, 0], m[0], V[0], R[0]


def implied_moments(params: ClassParameters, occasions, decomposition) -> ImpliedMoments:
    """Exact implied moments of (x, y, x_e) for one individual."""
    A, m, V, R = latent_design(params, occasions, decomposition)
    mean = A @ m
    cov = A @ V @ A.T + R
    return ImpliedMoments(mean, 0.5 * (cov + cov.T))


def conditional_growth_moments(params: ClassParameters):
    """Conditional mean and covariance of the outcome growth factors.

    Both are in the natural factor basis of the form: the mean is the
    intercept vector shifted by the covariate effects at their class
    means, and the covariance adds the variance propagated from the TIC
    and the TVC baseline to the unexplained part.
    """
    mu = params.alpha_y.copy()
    var = params.psi_eta_y.copy()
    cols = []
    inner = []
    if params.has_tic:
        mu = mu + params.beta_tic * params.mu_x
        cols.append(params.beta_tic)
        inner.append(params.phi_x)
    if params.has_tvc:
        mu = mu + params.beta_tvc * params.mu_eta_x[0]
        cols.append(params.beta_tvc)
        inner.append(params.phi_eta_x[0, 0])
    if cols:
        Bmat = np.column_stack(cols)
        M = np.diag(np.asarray(inner, dtype=float))
        if params.has_tic and params.has_tvc:
            c = params.rho_bl * np.sqrt(params.phi_x * params.phi_eta_x[0, 0])
            M[0, 1] = M[1, 0] = c
        var = var + Bmat @ M @ Bmat.T
    return mu, var
