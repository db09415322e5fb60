"""Numeric primitives shared across the package.

Holds the phase-one data containers, the logistic link, a Newton/IRLS
logistic-regression fitter, a damped Newton root finder for vector
estimating equations, and the conditional-moment model that encodes prior
knowledge about the expensive predictor.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np
from scipy.special import expit, log_expit

from .exceptions import (
    InputError,
    NonConvergence,
    NoVariation,
    Separation,
    SingularDesign,
    SingularJacobian,
)

SOLVER_TOL = 1e-8
MAX_ITER = 100
MAX_HALVINGS = 30
SEPARATION_CAP = 50.0

CONTINUOUS = "continuous"
BINARY = "binary"
PREDICTOR_KINDS = (CONTINUOUS, BINARY)


def logistic(u):
    """Logistic distribution function ``1 / (1 + exp(-u))``."""
    return expit(u)


def add_intercept(z: np.ndarray) -> np.ndarray:
    """Prepend a column of ones to a covariate matrix."""
    z = np.asarray(z, dtype=float)
    z = z.reshape(-1, 1) if z.ndim == 1 else z
    return np.column_stack([np.ones(z.shape[0]), z])


# --------------------------------------------------------------------------
# Data containers
# --------------------------------------------------------------------------


class PhaseOneRecord(NamedTuple):
    id: int
    y: int
    z_tilde: np.ndarray


@dataclass(frozen=True, eq=False)
class Cohort:
    """Phase-one sample: binary outcome ``y`` and raw covariates ``z``.

    ``z`` is stored without the constant column; :attr:`z_tilde` adds it.
    """

    y: np.ndarray
    z: np.ndarray
    ids: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y)
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if y.ndim != 1 or y.size < 1:
            raise InputError("y must be a non-empty vector")
        if z.ndim != 2 or z.shape[0] != y.size:
            raise InputError("z must have one row per outcome")
        if not np.all((y == 0) | (y == 1)):
            raise InputError("outcomes must be coded 0/1")
        if not np.all(np.isfinite(z)):
            raise InputError("covariates must be finite")
        ids = np.arange(y.size) if self.ids is None else np.asarray(self.ids)
        if ids.shape != y.shape:
            raise InputError("ids must have one entry per record")
        if np.unique(ids).size != ids.size:
            raise InputError("record ids must be unique")
        object.__setattr__(self, "y", y.astype(np.int8))
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return int(self.y.size)

    @property
    def d(self) -> int:
        return int(self.z.shape[1])

    @property
    def z_tilde(self) -> np.ndarray:
        return add_intercept(self.z)

    def take(self, index) -> "Cohort":
        return Cohort(self.y[index], self.z[index], self.ids[index])

    def records(self) -> Iterator[PhaseOneRecord]:
        zt = self.z_tilde
        for i in range(self.n):
            yield PhaseOneRecord(int(self.ids[i]), int(self.y[i]), zt[i])

    def __len__(self):
        return self.n


@dataclass(frozen=True, eq=False)
class Coefficients:
    """Coefficient vector with an explicitly recorded predictor position."""

    theta: np.ndarray
    names: tuple[str, ...]
    beta_index: int | None = None

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        if theta.shape != (len(self.names),):
            raise InputError("one name per coefficient required")
        object.__setattr__(self, "theta", theta)

    @property
    def beta(self) -> float:
        if self.beta_index is None:
            raise AttributeError("no predictor coefficient in this vector")
        return float(self.theta[self.beta_index])

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, map(float, self.theta)))


def covariate_names(d: int) -> tuple[str, ...]:
    return ("intercept",) + tuple(f"z{j + 1}" for j in range(d))


# --------------------------------------------------------------------------
# Logistic regression
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LogisticFit:
    coef: np.ndarray
    cov: np.ndarray
    n_iter: int
    score_norm: float


def _check_logistic_inputs(design, y, weights):
    if design.ndim != 2 or design.shape[0] != y.size:
        raise InputError("design must be (n, p) with one row per outcome")
    active = weights > 0
    ya = y[active]
    if ya.size == 0 or ya.min() == ya.max():
        raise NoVariation("both outcome classes are required")
    if np.linalg.matrix_rank(design[active]) < design.shape[1]:
        raise SingularDesign("design matrix is rank deficient")


def fit_logistic(design, y, offset=None, weights=None, *, start=None,
                 tol=SOLVER_TOL, max_iter=MAX_ITER, cap=SEPARATION_CAP):
    """Maximum-likelihood logistic regression by Newton-Raphson.

    Parameters
    ----------
    design : (n, p) array
        Regressors, including any constant column.
    y : (n,) array of 0/1
    offset : (n,) array, optional
        Fixed additive term on the logit scale.
    weights : (n,) array, optional
        Nonnegative case weights multiplying each log-likelihood term.
    start : (p,) array, optional
        Initial coefficients (zeros by default).

    Returns
    -------
    LogisticFit
        ``cov`` is the inverse of the weighted observed information.

    Raises
    ------
    NoVariation, SingularDesign, Separation, NonConvergence
    """
    design = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = design.shape
    offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    weights = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    _check_logistic_inputs(design, y, weights)

    def loglik(theta):
        eta = design @ theta + offset
        return np.sum(weights * (y * log_expit(eta) + (1 - y) * log_expit(-eta)))

    theta = np.zeros(p) if start is None else np.array(start, dtype=float)
    ll = loglik(theta)
    for it in range(1, max_iter + 1):
        prob = expit(design @ theta + offset)
        score = design.T @ (weights * (y - prob))
        info = (design * (weights * prob * (1 - prob))[:, None]).T @ design
        if np.max(np.abs(score)) <= tol:
            break
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise Separation("information matrix became singular", theta)
        for _ in range(MAX_HALVINGS + 1):
            candidate = theta + step
            ll_new = loglik(candidate)
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            step = step / 2
        theta, ll = candidate, ll_new
        if np.max(np.abs(theta)) > cap:
            raise Separation(f"|coefficient| exceeded {cap}", theta)
    else:
        raise NonConvergence(f"logistic fit did not converge in {max_iter} iterations", theta)

    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        raise Separation("information matrix is singular at the solution", theta)
    return LogisticFit(theta, cov, it, float(np.max(np.abs(score))))


def newton_solve(residual: Callable[[np.ndarray], np.ndarray],
                 jacobian: Callable[[np.ndarray], np.ndarray],
                 theta0, *, tol=SOLVER_TOL, max_iter=MAX_ITER,
                 max_halvings=MAX_HALVINGS, cap=None) -> np.ndarray:
    """Damped Newton iteration for ``residual(theta) = 0``.

    A full step is halved until the Euclidean residual norm decreases.
    Convergence is declared on the max-norm of the residual.  With ``cap``
    set, iterates leaving the box ``|theta| <= cap`` raise :class:`Separation`.
    """
    theta = np.array(theta0, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise InputError("starting point must be finite")
    r = np.asarray(residual(theta), dtype=float)
    norm = np.linalg.norm(r)
    for _ in range(max_iter):
        if np.max(np.abs(r)) <= tol:
            return theta
        jac = np.asarray(jacobian(theta), dtype=float)
        try:
            step = -np.linalg.solve(jac, r)
        except np.linalg.LinAlgError:
            raise SingularJacobian("jacobian is singular")
        if not np.all(np.isfinite(step)):
            raise SingularJacobian("jacobian solve produced non-finite step")
        for _ in range(max_halvings + 1):
            candidate = theta + step
            r_new = np.asarray(residual(candidate), dtype=float)
            norm_new = np.linalg.norm(r_new)
            if np.isfinite(norm_new) and norm_new < norm:
                break
            step = step / 2
        else:
            raise NonConvergence("step halving failed to reduce the residual", theta)
        theta, r, norm = candidate, r_new, norm_new
        if cap is not None and np.max(np.abs(theta)) > cap:
            raise Separation(f"|coefficient| exceeded {cap}", theta)
    if np.max(np.abs(r)) <= tol:
        return theta
    raise NonConvergence(f"no root within {max_iter} iterations", theta)


# --------------------------------------------------------------------------
# Prior knowledge about X given Z
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MomentModel:
    """First and second conditional moments of the predictor given covariates.

    ``evaluate`` maps a :class:`Cohort` to per-record ``(E[X|Z], E[X^2|Z])``.
    Use the ``linear``, ``logistic`` and ``tabulated`` constructors rather than
    building one by hand.
    """

    kind: str
    evaluator: Callable[[Cohort], tuple[np.ndarray, np.ndarray]]
    description: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in PREDICTOR_KINDS:
            raise InputError(f"predictor kind must be one of {PREDICTOR_KINDS}")

    def evaluate(self, cohort: Cohort, atol=1e-12):
        m1, m2 = (np.asarray(a, dtype=float) for a in self.evaluator(cohort))
        if m1.shape != (cohort.n,) or m2.shape != (cohort.n,):
            raise InputError("moment arrays must have one value per record")
        if not (np.all(np.isfinite(m1)) and np.all(np.isfinite(m2))):
            raise InputError("moments must be finite")
        if self.kind == BINARY:
            if np.any(m1 < -atol) or np.any(m1 > 1 + atol):
                raise InputError("binary predictor needs 0 <= E[X|Z] <= 1")
            if np.any(np.abs(m2 - m1) > atol):
                raise InputError("binary predictor needs E[X^2|Z] = E[X|Z]")
        if np.any(m2 - m1**2 < -atol * np.maximum(1.0, m2)):
            raise InputError("conditional variance E[X^2|Z] - E[X|Z]^2 is negative")
        return m1, m2

    def variance(self, cohort: Cohort) -> np.ndarray:
        m1, m2 = self.evaluate(cohort)
        return np.maximum(m2 - m1**2, 0.0)

    @classmethod
    def linear(cls, intercept: float, coef: Sequence[float], variance: float):
        """Continuous predictor with ``E[X|Z]`` linear in Z and constant variance."""
        coef = np.asarray(coef, dtype=float)
        if variance < 0:
            raise InputError("variance must be nonnegative")

        def evaluator(cohort):
            m1 = intercept + cohort.z @ coef
            return m1, m1**2 + variance

        return cls(CONTINUOUS, evaluator,
                   {"linear": {"intercept": float(intercept), "coef": coef.tolist(),
                               "variance": float(variance)}})

    @classmethod
    def logistic(cls, intercept: float, coef: Sequence[float]):
        """Binary predictor with ``P(X=1|Z)`` logistic in Z."""
        coef = np.asarray(coef, dtype=float)

        def evaluator(cohort):
            m1 = expit(intercept + cohort.z @ coef)
            return m1, m1

        return cls(BINARY, evaluator,
                   {"logistic": {"intercept": float(intercept), "coef": coef.tolist()}})

    @classmethod
    def tabulated(cls, kind: str, ids, m1, m2=None):
        """Per-record moments looked up by cohort id."""
        m1 = np.asarray(m1, dtype=float)
        m2 = m1.copy() if m2 is None else np.asarray(m2, dtype=float)
        lookup = {k: i for i, k in enumerate(np.asarray(ids).tolist())}

        def evaluator(cohort):
            try:
                rows = np.array([lookup[k] for k in cohort.ids.tolist()], dtype=int)
            except KeyError as exc:
                raise InputError(f"no tabulated moments for id {exc.args[0]}") from None
            return m1[rows], m2[rows]

        return cls(kind, evaluator, {"tabulated": True})

    @classmethod
    def from_functions(cls, kind: str, m1: Callable, m2: Callable):
        """Moments given as functions of the raw covariate matrix."""
        return cls(kind, lambda cohort: (m1(cohort.z), m2(cohort.z)))


def warn_if_pi_large(pi: np.ndarray) -> None:
    if np.any(pi >= 0.5):
        warnings.warn(
            f"{int(np.sum(pi >= 0.5))} record(s) have P(Y=1|Z) >= 1/2; "
            "the allocation rules are applied with min(pi, 1 - pi)",
            RuntimeWarning,
            stacklevel=3,
        )
