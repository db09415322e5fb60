"""Tests of ``beta = 0``: the efficient score test and Wald tests."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .core import MomentModel
from .design import estimate_pi
from .estimators import Estimate, EstimatorKind, SecondPhaseData, plan_mu
from .exceptions import DegenerateSE, SingularInformation

LEVEL = 0.05


class TestMethod(str, enum.Enum):
    __test__ = False

    SCORE = "Score"
    WALD_NAIVE = "WaldNaive"
    WALD_IPW = "WaldIPW"
    WALD_PCL_VALIDATE = "WaldPCLvalidate"
    WALD_PCL_BOTH = "WaldPCLboth"

    def __str__(self):
        return self.value


WALD_METHOD = {
    EstimatorKind.NAIVE: TestMethod.WALD_NAIVE,
    EstimatorKind.IPW: TestMethod.WALD_IPW,
    EstimatorKind.PCL_VALIDATE: TestMethod.WALD_PCL_VALIDATE,
    EstimatorKind.PCL_BOTH: TestMethod.WALD_PCL_BOTH,
}


@dataclass(frozen=True)
class TestResult:
    __test__ = False

    method: TestMethod
    statistic: float
    p_value: float

    @property
    def reject_at_05(self) -> bool:
        return bool(self.p_value < LEVEL)


def _two_sided(statistic: float) -> float:
    return float(2 * norm.sf(abs(statistic)))


def score_components(data: SecondPhaseData, moments: MomentModel, pi=None):
    """Efficient score for ``beta`` at ``beta = 0`` and its variance.

    ``pi`` defaults to the phase-one fit of Y on Z.  The selected-record
    outcome probability is taken from the plan,
    ``p1 = eta1 pi / (eta1 pi + eta0 (1 - pi))``, and the selection
    probability inside the information is the plan's ``mu``.

    Returns
    -------
    score : float
    information : float
        ``I_bb - I_ba I_aa^{-1} I_ab``.
    """
    cohort, plan = data.cohort, data.plan
    if pi is None:
        pi = estimate_pi(cohort).pi
    pi = np.asarray(pi, dtype=float)
    m1, m2 = moments.evaluate(cohort)
    var = np.maximum(m2 - m1**2, 0.0)
    zt = cohort.z_tilde
    y = cohort.y.astype(float)
    s = data.selected

    e1, e0 = plan.eta1, plan.eta0
    denom = e1 * pi + e0 * (1 - pi)
    p1 = np.divide(e1 * pi, denom, out=np.copy(pi), where=denom > 0)
    mu = plan_mu(plan, pi)

    v = pi * (1 - pi)
    i_aa = zt.T @ (zt * v[:, None])
    i_ba = zt.T @ (v * m1)
    i_bb = float(np.sum(v * m1**2 + mu * p1 * (1 - p1) * var))
    try:
        proj = np.linalg.solve(i_aa, i_ba)
    except np.linalg.LinAlgError:
        raise SingularInformation("covariate information is singular") from None

    resid = y - pi
    score = float(resid @ m1 + np.sum((y[s] - p1[s]) * (data.x[s] - m1[s])) - proj @ (zt.T @ resid))
    info = i_bb - float(i_ba @ proj)
    if not info > 1e-10 * i_bb:
        raise SingularInformation("efficient information for beta is not positive")
    return score, info


def score_test(data: SecondPhaseData, moments: MomentModel, pi=None) -> TestResult:
    """Efficient score test of ``beta = 0``, standard normal reference."""
    score, info = score_components(data, moments, pi)
    stat = score / np.sqrt(info)
    return TestResult(TestMethod.SCORE, float(stat), _two_sided(stat))


def wald_test(est: Estimate, se: float | None = None) -> TestResult:
    """Wald test ``beta_hat / se``; ``se`` defaults to the estimate's own."""
    se = est.se_beta if se is None else float(se)
    if not np.isfinite(se) or se <= 0:
        raise DegenerateSE(f"standard error {se} is not positive")
    stat = est.beta / se
    return TestResult(WALD_METHOD[EstimatorKind(est.kind)], float(stat), _two_sided(stat))
