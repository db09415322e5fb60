"""Estimators of the predictor effect from second-phase data.

Four estimators share one coefficient layout ``(intercept, z1..zd, x)``:

``naive``
    Ordinary logistic regression on the selected records.
``ipw``
    Logistic score equations weighted by ``1 / eta_{Y}(Z)`` with a sandwich
    covariance.
``pcl_validate``
    Logistic regression on the selected records with the offset
    ``log(eta1 / eta0)``, which corrects for outcome-dependent selection.
``pcl_both``
    Adds the unselected records through ``P(Y=1 | Z, not selected)``, whose
    logit involves ``R(Z) = log E[exp(beta X) | Z, Y=0]``.  ``R`` is
    estimated from a regression of X on ``(Z, I(Y=0))`` in the selected
    records.

The module also evaluates the plug-in asymptotic variances of the two
offset-logistic estimators at a sampling plan.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

from .core import (
    BINARY,
    CONTINUOUS,
    PREDICTOR_KINDS,
    SEPARATION_CAP,
    Coefficients,
    Cohort,
    MomentModel,
    covariate_names,
    fit_logistic,
    newton_solve,
)
from .design import SamplingPlan, _as_pi, _projection
from .exceptions import (
    InputError,
    NonConvergence,
    NoVariation,
    Separation,
    SingularDesign,
    SingularWeightMatrix,
    TwoPhaseError,
    ZeroWeightProbability,
)

ETA_FLOOR = 0.01
ETA_CEILING = 0.99
OUTER_TOL = 1e-6
OUTER_MAX = 50


class EstimatorKind(str, enum.Enum):
    NAIVE = "Naive"
    IPW = "IPW"
    PCL_VALIDATE = "PCLvalidate"
    PCL_BOTH = "PCLboth"

    def __str__(self):
        return self.value


@dataclass(frozen=True, eq=False)
class SecondPhaseData:
    """Phase-one cohort plus selection indicators and the revealed predictor.

    ``x`` has one entry per record and is ignored (conventionally NaN) where
    ``delta == 0``.
    """

    cohort: Cohort
    delta: np.ndarray
    x: np.ndarray
    plan: SamplingPlan

    def __post_init__(self):
        delta = np.asarray(self.delta).astype(np.int8)
        x = np.asarray(self.x, dtype=float)
        n = self.cohort.n
        if delta.shape != (n,) or x.shape != (n,):
            raise InputError("delta and x need one entry per cohort record")
        if not np.all((delta == 0) | (delta == 1)):
            raise InputError("selection indicators must be 0/1")
        if not np.all(np.isfinite(x[delta == 1])):
            raise InputError("x must be observed for every selected record")
        if self.plan.n != n:
            raise InputError("plan is not aligned with the cohort")
        x = np.where(delta == 1, x, np.nan)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "x", x)

    @classmethod
    def from_full(cls, cohort: Cohort, x_full, delta, plan: SamplingPlan):
        """Mask a fully known predictor down to the selected records."""
        delta = np.asarray(delta)
        return cls(cohort, delta, np.where(delta == 1, x_full, np.nan), plan)

    @property
    def selected(self) -> np.ndarray:
        return self.delta == 1

    def design(self) -> np.ndarray:
        """``(1, Z, X)`` rows for the selected records."""
        s = self.selected
        return np.column_stack([self.cohort.z_tilde[s], self.x[s]])

    def names(self) -> tuple[str, ...]:
        return covariate_names(self.cohort.d) + ("x",)


@dataclass(frozen=True, eq=False)
class Estimate:
    kind: EstimatorKind
    theta: Coefficients
    cov: np.ndarray
    converged: bool = True
    details: dict = field(default_factory=dict)

    @property
    def beta(self) -> float:
        return self.theta.beta

    @property
    def se_beta(self) -> float:
        b = self.theta.beta_index
        return float(np.sqrt(self.cov[b, b]))


def _coefficients(data: SecondPhaseData, theta) -> Coefficients:
    names = data.names()
    return Coefficients(theta, names, beta_index=len(names) - 1)


def _clamp_low(eta):
    return np.where(eta <= 0, ETA_FLOOR, eta)


def _clamp_high(eta):
    return np.minimum(eta, ETA_CEILING)


def validation_offset(plan: SamplingPlan) -> np.ndarray:
    """``log(eta1 / eta0)`` per record, zeros replaced by 0.01."""
    return np.log(_clamp_low(plan.eta1)) - np.log(_clamp_low(plan.eta0))


def nonvalidation_offset(plan: SamplingPlan) -> np.ndarray:
    """``log((1 - eta1) / (1 - eta0))`` per record, ones replaced by 0.99."""
    return np.log1p(-_clamp_high(plan.eta1)) - np.log1p(-_clamp_high(plan.eta0))


# --------------------------------------------------------------------------
# Validation-only estimators
# --------------------------------------------------------------------------


def naive_fit(data: SecondPhaseData) -> Estimate:
    """Complete-case logistic regression of Y on (1, Z, X)."""
    s = data.selected
    fit = fit_logistic(data.design(), data.cohort.y[s])
    return Estimate(EstimatorKind.NAIVE, _coefficients(data, fit.coef), fit.cov)


def ipw_fit(data: SecondPhaseData) -> Estimate:
    """Inverse-probability-weighted logistic regression, sandwich covariance."""
    s = data.selected
    eta = data.plan.eta_for(data.cohort.y)[s]
    if np.any(eta <= 0):
        raise ZeroWeightProbability("a selected record has zero selection probability")
    w = 1.0 / eta
    xd = data.design()
    y = data.cohort.y[s]
    fit = fit_logistic(xd, y, weights=w)
    p = expit(xd @ fit.coef)
    meat = (xd * ((w * (y - p)) ** 2)[:, None]).T @ xd
    cov = fit.cov @ meat @ fit.cov
    return Estimate(EstimatorKind.IPW, _coefficients(data, fit.coef), (cov + cov.T) / 2)


def pcl_validate_fit(data: SecondPhaseData) -> Estimate:
    """Offset-corrected logistic regression on the selected records.

    Solves ``sum_i delta_i X_i [Y_i - H(X_i theta + log(eta1/eta0))] = 0``;
    the covariance is the inverse of the fitted information
    ``sum_i delta_i X_i X_i' H(1 - H)``.
    """
    s = data.selected
    fit = fit_logistic(data.design(), data.cohort.y[s], offset=validation_offset(data.plan)[s])
    return Estimate(EstimatorKind.PCL_VALIDATE, _coefficients(data, fit.coef), fit.cov)


# --------------------------------------------------------------------------
# R(Z) = log E[exp(beta X) | Z, Y = 0]
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RHatModel:
    """Fitted model for X given ``(Z, I(Y=0))`` evaluated at ``I(Y=0) = 1``.

    ``linear_predictor`` holds, per cohort record, the fitted mean of X
    (continuous) or the fitted logit of ``P(X=1)`` (binary).
    """

    predictor_kind: str
    gamma_hat: np.ndarray
    linear_predictor: np.ndarray
    sigma_x_sq_hat: float = 0.0
    separated: bool = False

    def r_hat(self, beta: float) -> np.ndarray:
        if self.predictor_kind == CONTINUOUS:
            return beta * self.linear_predictor + beta**2 * self.sigma_x_sq_hat / 2
        eta = self.linear_predictor
        return np.logaddexp(log_expit(-eta), log_expit(eta) + beta)

    def r_prime(self, beta: float) -> np.ndarray:
        """Derivative of :meth:`r_hat` with respect to ``beta``."""
        if self.predictor_kind == CONTINUOUS:
            return self.linear_predictor + beta * self.sigma_x_sq_hat
        return expit(self.linear_predictor + beta)


def fit_r_model(data: SecondPhaseData, kind: str) -> RHatModel:
    """Regress X on ``(1, Z, I(Y=0))`` in the selected records."""
    if kind not in PREDICTOR_KINDS:
        raise InputError(f"predictor kind must be one of {PREDICTOR_KINDS}")
    s = data.selected
    control = (data.cohort.y == 0).astype(float)
    zt = data.cohort.z_tilde
    with_indicator = np.ptp(control[s]) > 0
    design_all = np.column_stack([zt, np.ones(data.cohort.n)]) if with_indicator else zt
    design = np.column_stack([zt[s], control[s]]) if with_indicator else zt[s]
    x = data.x[s]
    if kind == BINARY and not np.all((x == 0) | (x == 1)):
        raise InputError("binary predictor must be coded 0/1")
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise SingularDesign("auxiliary regression of X is rank deficient")

    if kind == CONTINUOUS:
        gamma, *_ = np.linalg.lstsq(design, x, rcond=None)
        dof = max(design.shape[0] - design.shape[1], 1)
        sigma_sq = float(np.sum((x - design @ gamma) ** 2) / dof)
        return RHatModel(kind, gamma, design_all @ gamma, sigma_sq)

    separated = False
    try:
        gamma = fit_logistic(design, x).coef
    except NoVariation:
        # every selected record has the same X; the fitted probability is 0 or 1
        gamma = np.zeros(design.shape[1])
        gamma[0] = SEPARATION_CAP if x[0] == 1 else -SEPARATION_CAP
        separated = True
    except (Separation, NonConvergence) as exc:
        gamma = exc.theta
        separated = True
    return RHatModel(kind, gamma, design_all @ gamma, separated=separated)


def estimate_R(data: SecondPhaseData, beta: float, kind: str):
    """Fitted R(Z) at ``beta`` for every cohort record.

    Returns
    -------
    model : RHatModel
    r_hat : ndarray
    """
    model = fit_r_model(data, kind)
    return model, model.r_hat(beta)


# --------------------------------------------------------------------------
# Both-sets estimator
# --------------------------------------------------------------------------


class PCLBothSystem:
    """Stacked estimating equations using selected and unselected records.

    ``theta = (intercept, z1..zd, beta)``.  For unselected records the
    regressor row is ``(1, Z, R(Z))`` and the predictor coefficient is fixed
    at one inside the probability.
    """

    def __init__(self, data: SecondPhaseData, r_model: RHatModel):
        s = data.selected
        zt = data.cohort.z_tilde
        y = data.cohort.y.astype(float)
        self.r_model = r_model
        self.xv = np.column_stack([zt[s], data.x[s]])
        self.yv = y[s]
        self.off_v = validation_offset(data.plan)[s]
        self.zn = zt[~s]
        self.yn = y[~s]
        self.off_n = nonvalidation_offset(data.plan)[~s]
        self.r_lin = r_model.linear_predictor[~s]
        self._rm = RHatModel(r_model.predictor_kind, r_model.gamma_hat, self.r_lin,
                             r_model.sigma_x_sq_hat, r_model.separated)

    def _parts(self, theta, r):
        alpha = theta[:-1]
        hv = expit(self.xv @ theta + self.off_v)
        hn = expit(self.zn @ alpha + r + self.off_n)
        return hv, hn

    def residual(self, theta, r=None):
        """Stacked score; ``r`` fixes R(Z) for the unselected records."""
        if r is None:
            r = self._rm.r_hat(theta[-1])
        hv, hn = self._parts(theta, r)
        tn = np.column_stack([self.zn, r])
        return self.xv.T @ (self.yv - hv) + tn.T @ (self.yn - hn)

    def jacobian(self, theta, r=None):
        """Derivative of :meth:`residual`; R(Z) moves with beta unless fixed."""
        fixed = r is not None
        if not fixed:
            r = self._rm.r_hat(theta[-1])
        hv, hn = self._parts(theta, r)
        tn = np.column_stack([self.zn, r])
        jac = -(self.xv * (hv * (1 - hv))[:, None]).T @ self.xv
        wn = hn * (1 - hn)
        dn = np.column_stack([self.zn, np.zeros(len(r)) if fixed else self._rm.r_prime(theta[-1])])
        jac -= (tn * wn[:, None]).T @ dn
        if not fixed:
            jac[-1, -1] += np.sum(self._rm.r_prime(theta[-1]) * (self.yn - hn))
        return jac

    def information(self, theta):
        """``sum H+(1-H+) X X' + sum H-(1-H-) T T'`` at ``theta``."""
        r = self._rm.r_hat(theta[-1])
        hv, hn = self._parts(theta, r)
        tn = np.column_stack([self.zn, r])
        return ((self.xv * (hv * (1 - hv))[:, None]).T @ self.xv
                + (tn * (hn * (1 - hn))[:, None]).T @ tn)


def pcl_both_fit(data: SecondPhaseData, kind: str, *, outer_tol=OUTER_TOL,
                 outer_max=OUTER_MAX) -> Estimate:
    """Offset-logistic estimator that also uses the unselected records.

    Starting from the validation-only solution, alternate between refreshing
    R(Z) at the current beta and solving the equations with R(Z) held fixed,
    until beta moves less than ``outer_tol``.  A final Newton pass on the
    full system, with R(Z) moving with beta, drives the stacked residual to
    solver tolerance.
    """
    start = pcl_validate_fit(data)
    theta = start.theta.theta.copy()
    r_model = fit_r_model(data, kind)
    system = PCLBothSystem(data, r_model)

    outer_converged = False
    outer_steps = 0
    try:
        for outer_steps in range(1, outer_max + 1):
            r = system._rm.r_hat(theta[-1])
            new = newton_solve(lambda t: system.residual(t, r), lambda t: system.jacobian(t, r),
                               theta, cap=SEPARATION_CAP)
            moved = abs(new[-1] - theta[-1])
            theta = new
            if moved < outer_tol:
                outer_converged = True
                break
    except TwoPhaseError:
        pass
    if not outer_converged:
        # the alternation can be repelled by the root; solve jointly from the start
        theta = start.theta.theta.copy()

    theta = newton_solve(system.residual, system.jacobian, theta, cap=SEPARATION_CAP)
    try:
        cov = np.linalg.inv(system.information(theta))
    except np.linalg.LinAlgError:
        raise SingularDesign("PCLboth information matrix is singular") from None
    details = {"outer_steps": outer_steps, "outer_converged": outer_converged,
               "r_model": r_model}
    return Estimate(EstimatorKind.PCL_BOTH, _coefficients(data, theta), (cov + cov.T) / 2,
                    converged=True, details=details)


# --------------------------------------------------------------------------
# Plug-in asymptotic variances at a plan
# --------------------------------------------------------------------------


def _plan_selected_prob(plan: SamplingPlan, pi):
    """Approximate ``P(Y=1 | Z, selected)`` and ``P(Y=1 | Z, not selected)``."""
    e1, e0 = plan.eta1, plan.eta0
    with np.errstate(divide="ignore", invalid="ignore"):
        h_plus = np.where(plan.mu > 0, e1 * pi / (e1 * pi + e0 * (1 - pi)), 0.5)
        c1, c0 = 1 - _clamp_high(e1), 1 - _clamp_high(e0)
        h_minus = c1 * pi / (c1 * pi + c0 * (1 - pi))
    return np.nan_to_num(h_plus, nan=0.5), h_minus


def plan_mu(plan: SamplingPlan, pi):
    if plan.scheme.value == "CaseControl" and plan.pi is None:
        return plan.eta1 * pi + plan.eta0 * (1 - pi)
    return plan.mu


def var_beta_pclvalidate(cohort: Cohort, moments: MomentModel, pi, plan: SamplingPlan) -> float:
    """Plug-in variance of the validation-only estimate of beta.

    The information is ``sum_i mu_i H+_i (1 - H+_i) sigma_tilde_i^2``, the
    Schur complement of the selected-record information with
    ``H+ = eta1 pi / (eta1 pi + eta0 (1 - pi))``.
    """
    pi = _as_pi(pi)
    m1, m2 = moments.evaluate(cohort)
    h_plus, _ = _plan_selected_prob(plan, pi)
    weight = plan_mu(plan, pi) * h_plus * (1 - h_plus)
    if not np.any(weight > 0):
        raise SingularWeightMatrix("plan selects nobody")
    info = _projection(cohort.z_tilde, m1, m2, weight)[1]
    if info <= 0:
        raise SingularWeightMatrix("information for beta is not positive")
    return 1.0 / info


def information_blocks_pclboth(cohort, moments, pi, plan, r_hat):
    """Blocks ``(I_zz, I_zb, I_bb)`` of the both-sets information at a plan."""
    pi = _as_pi(pi)
    m1, m2 = moments.evaluate(cohort)
    r_hat = np.asarray(r_hat, dtype=float)
    if r_hat.shape != (cohort.n,):
        raise InputError("r_hat needs one value per record")
    mu = plan_mu(plan, pi)
    h_plus, h_minus = _plan_selected_prob(plan, pi)
    a = mu * h_plus * (1 - h_plus)
    b = (1 - mu) * h_minus * (1 - h_minus)
    zt = cohort.z_tilde
    i_zz = zt.T @ (zt * (a + b)[:, None])
    i_zb = zt.T @ (a * m1 + b * r_hat)
    i_bb = float(np.sum(a * m2 + b * r_hat**2))
    return i_zz, i_zb, i_bb


def var_beta_pclboth(cohort: Cohort, moments: MomentModel, pi, plan: SamplingPlan,
                     beta: float, r_hat) -> float:
    """Plug-in variance of the both-sets estimate of beta at ``r_hat``.

    ``beta`` is accepted for symmetry with the fit; it enters only through
    ``r_hat``.
    """
    i_zz, i_zb, i_bb = information_blocks_pclboth(cohort, moments, pi, plan, r_hat)
    try:
        info = i_bb - i_zb @ np.linalg.solve(i_zz, i_zb)
    except np.linalg.LinAlgError:
        raise SingularWeightMatrix("covariate information is singular") from None
    if not info > 0:
        raise SingularWeightMatrix("information for beta is not positive")
    return 1.0 / info


FITTERS = {
    EstimatorKind.NAIVE: naive_fit,
    EstimatorKind.IPW: ipw_fit,
    EstimatorKind.PCL_VALIDATE: pcl_validate_fit,
}


def fit_estimator(kind, data: SecondPhaseData, predictor_kind: str = BINARY) -> Estimate:
    kind = EstimatorKind(kind)
    if kind is EstimatorKind.PCL_BOTH:
        return pcl_both_fit(data, predictor_kind)
    return FITTERS[kind](data)
