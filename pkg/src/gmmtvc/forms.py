"""Growth-curve vocabulary.

Functional forms for the longitudinal outcome, factor loadings built from
individual measurement occasions, and the decomposition of a time-varying
covariate (TVC) into a latent baseline plus interval-specific slopes or
changes scaled by relative rates.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


def as_times(times) -> np.ndarray:
    """Validate a vector of measurement occasions.

    Times must be finite, strictly increasing, and contain at least two
    waves (one interval).
    """
    t = np.asarray(times, dtype=float)
    if t.ndim != 1:
        raise ValueError("times must be a 1-D vector")
    if t.size < 2:
        raise ValueError("need at least 2 measurement occasions")
    if not np.all(np.isfinite(t)):
        raise ValueError("times must be finite")
    if np.any(np.diff(t) <= 0):
        raise ValueError("times must be strictly increasing")
    return t


def as_rates(rates, n_waves: int | None = None) -> np.ndarray:
    """Validate relative rates: length J-1 with rates[0] fixed at 1."""
    r = np.asarray(rates, dtype=float)
    if r.ndim != 1:
        raise ValueError("rates must be a 1-D vector")
    if not np.all(np.isfinite(r)):
        raise ValueError("rates must be finite")
    if r[0] != 1.0:
        raise ValueError("rates[0] must equal 1 exactly (identification)")
    if n_waves is not None and r.size != n_waves - 1:
        raise ValueError(
            f"expected {n_waves - 1} rates for {n_waves} waves, got {r.size}"
        )
    return r


@dataclass(frozen=True)
class Occasions:
    """Ordered measurement times for one individual."""

    times: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "times", as_times(self.times))

    @property
    def n_waves(self) -> int:
        return self.times.size


@dataclass(frozen=True)
class RelativeRates:
    """Interval-specific relative rates of change; first element is 1."""

    rates: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rates", as_rates(self.rates))


@dataclass(frozen=True)
class TvcGrowthFactors:
    """Latent baseline value and first-interval slope of the TVC."""

    eta0: float
    eta1: float


class TvcDecomposition(enum.Enum):
    """How the TVC state features are defined from the first-interval slope."""

    INTERVAL_SLOPES = "slopes"
    INTERVAL_CHANGES = "changes"

    @classmethod
    def parse(cls, name: str) -> "TvcDecomposition":
        for member in cls:
            if member.value == name or member.name.lower() == name.lower():
                return member
        raise ValueError(f"unknown decomposition {name!r}")


def _unwrap_times(occasions) -> np.ndarray:
    if isinstance(occasions, Occasions):
        return occasions.times
    return as_times(occasions)


def _unwrap_rates(rates, n_waves) -> np.ndarray:
    if isinstance(rates, RelativeRates):
        r = rates.rates
        if r.size != n_waves - 1:
            raise ValueError(
                f"expected {n_waves - 1} rates for {n_waves} waves, got {r.size}"
            )
        return r
    return as_rates(rates, n_waves)


def tvc_loadings(occasions, rates) -> np.ndarray:
    """Factor-loading matrix of the TVC growth factors, shape (J, 2).

    Column 1 is all ones (loadings of the latent baseline).  Row j of
    column 2 carries the accumulated relative rate from baseline to t_j,
    i.e. sum over m <= j of rates[m-1] * (t_m - t_{m-1}), with row 1 = 0.
    """
    t = _unwrap_times(occasions)
    r = _unwrap_rates(rates, t.size)
    cum = np.concatenate([[0.0], np.cumsum(r * np.diff(t))])
    return np.column_stack([np.ones_like(t), cum])


def state_features(tvc_factors, occasions, rates, decomposition) -> np.ndarray:
    """Interval-specific slopes or changes of the TVC, length J.

    The first element is 0 (no interval precedes the baseline wave).  For
    slopes, element j is eta1 * rates[j-1]; for changes it is additionally
    scaled by the interval length t_j - t_{j-1}.
    """
    t = _unwrap_times(occasions)
    r = _unwrap_rates(rates, t.size)
    eta1 = tvc_factors.eta1 if isinstance(tvc_factors, TvcGrowthFactors) else float(tvc_factors)
    s = eta1 * r
    if decomposition is TvcDecomposition.INTERVAL_CHANGES:
        s = s * np.diff(t)
    elif decomposition is not TvcDecomposition.INTERVAL_SLOPES:
        raise ValueError(f"unknown decomposition {decomposition!r}")
    return np.concatenate([[0.0], s])


def state_loadings(dt: np.ndarray, rates: np.ndarray, decomposition) -> np.ndarray:
    """Loadings of the shape factor on each wave's state feature.

    Batched core of :func:`state_features`: multiplying by eta1 gives the
    state features themselves.  ``dt`` has shape (..., J-1) and ``rates``
    broadcasts against it; the result has shape (..., J).
    """
    if decomposition is TvcDecomposition.INTERVAL_SLOPES:
        body = np.broadcast_to(rates, np.broadcast_shapes(rates.shape, dt.shape)).copy()
    elif decomposition is TvcDecomposition.INTERVAL_CHANGES:
        body = rates * dt
    else:
        raise ValueError(f"unknown decomposition {decomposition!r}")
    pad = np.zeros(body.shape[:-1] + (1,))
    return np.concatenate([pad, body], axis=-1)


class FunctionalForm:
    """Base class for outcome trajectory shapes.

    Subclasses provide the number of growth factors, the factor-loading
    rows as functions of time, and the mean curve implied by a set of
    growth factors.  Forms carrying a class-level growth coefficient
    (rate b, rate c, or knot) expose it via ``coefficient``.
    """

    name: str = ""
    n_factors: int = 0
    coefficient_name: str | None = None

    @property
    def coefficient(self) -> float | None:
        return None

    def with_coefficient(self, value: float) -> "FunctionalForm":
        raise ValueError(f"{self.name} form has no free growth coefficient")

    def loadings(self, times) -> np.ndarray:
        """Loading matrix with shape times.shape + (n_factors,)."""
        raise NotImplementedError

    def curve(self, eta, times) -> np.ndarray:
        """Mean trajectory at ``times`` for growth factors ``eta``.

        ``eta`` is in the natural basis of the form (for the bilinear
        spline: intercept and the two segment slopes).  Broadcasts over
        leading axes of both arguments.
        """
        eta = np.asarray(eta, dtype=float)
        lam = self.loadings(np.asarray(times, dtype=float))
        return np.einsum("...jc,...c->...j", lam, eta)

    def to_internal(self, vec: np.ndarray) -> np.ndarray:
        """Map factor-level quantities into the basis used by loadings."""
        return np.asarray(vec, dtype=float)

    def to_internal_cov(self, mat: np.ndarray) -> np.ndarray:
        return np.asarray(mat, dtype=float)

    def from_internal(self, vec: np.ndarray) -> np.ndarray:
        return np.asarray(vec, dtype=float)

    def from_internal_cov(self, mat: np.ndarray) -> np.ndarray:
        return np.asarray(mat, dtype=float)

    def validate(self, t_min: float, t_max: float) -> None:
        """Check the growth coefficient against the observed time range."""


@dataclass(frozen=True)
class Linear(FunctionalForm):
    name = "linear"
    n_factors = 2

    def loadings(self, times):
        t = np.asarray(times, dtype=float)
        return np.stack([np.ones_like(t), t], axis=-1)


@dataclass(frozen=True)
class Quadratic(FunctionalForm):
    name = "quadratic"
    n_factors = 3

    def loadings(self, times):
        t = np.asarray(times, dtype=float)
        return np.stack([np.ones_like(t), t, t * t], axis=-1)


@dataclass(frozen=True)
class NegativeExponential(FunctionalForm):
    """y = eta0 + eta1 * (1 - exp(-b t)); b > 0."""

    b: float
    name = "negexp"
    n_factors = 2
    coefficient_name = "b"

    def __post_init__(self):
        if not (self.b > 0):
            raise ValueError("negative-exponential rate b must be positive")

    @property
    def coefficient(self):
        return self.b

    def with_coefficient(self, value):
        return NegativeExponential(b=value)

    def loadings(self, times):
        t = np.asarray(times, dtype=float)
        return np.stack([np.ones_like(t), 1.0 - np.exp(-self.b * t)], axis=-1)


@dataclass(frozen=True)
class JenssBayley(FunctionalForm):
    """y = eta0 + eta1 * t + eta2 * (exp(c t) - 1); c < 0."""

    c: float
    name = "jenss"
    n_factors = 3
    coefficient_name = "c"

    def __post_init__(self):
        if not (self.c < 0):
            raise ValueError("Jenss-Bayley rate c must be negative")

    @property
    def coefficient(self):
        return self.c

    def with_coefficient(self, value):
        return JenssBayley(c=value)

    def loadings(self, times):
        t = np.asarray(times, dtype=float)
        return np.stack([np.ones_like(t), t, np.exp(self.c * t) - 1.0], axis=-1)


@dataclass(frozen=True)
class BilinearSpline(FunctionalForm):
    """Two linear segments joined at a fixed knot.

    Internally the model works in the reparameterized basis with loadings
    (1, t - knot, |t - knot|), which keeps the loadings smooth in the
    estimated parameters; natural-basis factors are (intercept, slope of
    segment 1, slope of segment 2).
    """

    knot: float
    name = "bilinear"
    n_factors = 3
    coefficient_name = "knot"

    @property
    def coefficient(self):
        return self.knot

    def with_coefficient(self, value):
        return BilinearSpline(knot=value)

    def loadings(self, times):
        t = np.asarray(times, dtype=float)
        d = t - self.knot
        return np.stack([np.ones_like(t), d, np.abs(d)], axis=-1)

    def curve(self, eta, times):
        eta = np.asarray(eta, dtype=float)
        t = np.asarray(times, dtype=float)
        e0 = eta[..., 0:1]
        e1 = eta[..., 1:2]
        e2 = eta[..., 2:3]
        return e0 + e1 * np.minimum(t, self.knot) + e2 * np.maximum(t - self.knot, 0.0)

    def _transform(self):
        g = self.knot
        return np.array([[1.0, g, 0.0], [0.0, 0.5, 0.5], [0.0, -0.5, 0.5]])

    def to_internal(self, vec):
        return np.asarray(vec, dtype=float) @ self._transform().T

    def to_internal_cov(self, mat):
        T = self._transform()
        return T @ np.asarray(mat, dtype=float) @ T.T

    def from_internal(self, vec):
        return np.asarray(vec, dtype=float) @ np.linalg.inv(self._transform()).T

    def from_internal_cov(self, mat):
        Tinv = np.linalg.inv(self._transform())
        return Tinv @ np.asarray(mat, dtype=float) @ Tinv.T

    def validate(self, t_min, t_max):
        if not (t_min < self.knot < t_max):
            raise ValueError(
                f"knot {self.knot} lies outside the observed time range "
                f"({t_min}, {t_max})"
            )


FORM_KINDS = {
    "linear": Linear,
    "quadratic": Quadratic,
    "negexp": NegativeExponential,
    "jenss": JenssBayley,
    "bilinear": BilinearSpline,
}


def make_form(kind: str, coefficient: float | None = None) -> FunctionalForm:
    """Instantiate a functional form by name, e.g. ``make_form('bilinear', 5.0)``."""
    try:
        cls = FORM_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown functional form {kind!r}") from None
    if cls.coefficient_name is None:
        if coefficient is not None:
            raise ValueError(f"{kind} form takes no growth coefficient")
        return cls()
    if coefficient is None:
        raise ValueError(f"{kind} form requires its {cls.coefficient_name} coefficient")
    return cls(coefficient)


def outcome_loadings(form: FunctionalForm, occasions) -> np.ndarray:
    """Outcome factor-loading matrix, shape (J, C), validated against the times."""
    t = _unwrap_times(occasions)
    form.validate(t[0], t[-1])
    return form.loadings(t)


def reparameterize_bilinear(eta0, eta1, eta2, gamma):
    """Map natural bilinear-spline factors to the reparameterized triple.

    Returns (eta0 + gamma*eta1, (eta1+eta2)/2, (eta2-eta1)/2); the measured
    intercept at the knot, the average slope, and half the slope difference.
    """
    return eta0 + gamma * eta1, 0.5 * (eta1 + eta2), 0.5 * (eta2 - eta1)


def inverse_reparameterize_bilinear(a0, a1, a2, gamma):
    """Invert :func:`reparameterize_bilinear`; exact round trip."""
    eta1 = a1 - a2
    eta2 = a1 + a2
    return a0 - gamma * eta1, eta1, eta2
