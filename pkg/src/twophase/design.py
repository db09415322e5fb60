"""Second-phase sampling plans.

Four schemes are available:

* ``Proposed`` -- the allocation that minimises the asymptotic variance of
  the offset-logistic (validation-only) estimate of the predictor effect.
  It alternates between the generalised conditional variance of the
  predictor and a three-branch Kuhn-Tucker allocation for a fixed
  multiplier, and a bisection on the multiplier enforces the expected
  subsample size.
* ``TestLocal`` -- the same Kuhn-Tucker allocation driven by the plain
  conditional variance ``Var(X|Z)``, optimal for local alternatives.
* ``Random`` and ``CaseControl`` -- the usual comparators.

All cohort integrals are replaced by averages over the phase-one records.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np

from .core import (
    Coefficients,
    Cohort,
    MomentModel,
    covariate_names,
    fit_logistic,
    logistic,
    warn_if_pi_large,
)
from .exceptions import BracketFailure, DomainError, EmptyStratum, InputError, SingularWeightMatrix

PI_CLIP = 1e-6
ALPHA = 1e-6
N_ITER = 200
SEARCH_TOL = 1e-4
MAX_BISECTIONS = 200
LAMBDA_FLOOR = 1e-12
_RANK_RTOL = 1e-9


class SchemeKind(str, enum.Enum):
    PROPOSED = "Proposed"
    TEST_LOCAL = "TestLocal"
    RANDOM = "Random"
    CASE_CONTROL = "CaseControl"

    def __str__(self):
        return self.value


@dataclass(frozen=True, eq=False)
class PiEstimate:
    """Phase-one fitted ``P(Y=1|Z)`` per record."""

    pi: np.ndarray
    source_coefficients: Coefficients | None = None


@dataclass(frozen=True, eq=False)
class SamplingPlan:
    """Per-record selection probabilities.

    ``mu`` is P(selected | Z) and ``eta1``/``eta0`` are P(selected | Z, Y=y).
    ``lam`` is the Lagrange multiplier for the optimised schemes.  For
    ``CaseControl`` the draw is a fixed-size stratified draw of
    ``case_counts = (cases, controls)``.
    """

    scheme: SchemeKind
    mu: np.ndarray
    eta1: np.ndarray
    eta0: np.ndarray
    target_fraction: float
    lam: float | None = None
    pi: np.ndarray | None = None
    sigma_sq: np.ndarray | None = None
    case_counts: tuple[int, int] | None = None
    converged: bool = True

    @property
    def n(self) -> int:
        return int(self.mu.size)

    def eta_for(self, y) -> np.ndarray:
        """Selection probability of each record given its own outcome."""
        return np.where(np.asarray(y) == 1, self.eta1, self.eta0)


@dataclass(frozen=True, eq=False)
class SelectionIndicators:
    delta: np.ndarray
    seed: object = None

    @property
    def realized_count(self) -> int:
        return int(self.delta.sum())


# --------------------------------------------------------------------------
# Phase-one outcome model
# --------------------------------------------------------------------------


def estimate_pi(cohort: Cohort, clip=PI_CLIP) -> PiEstimate:
    """Logistic regression of Y on Z over the whole phase-one cohort."""
    fit = fit_logistic(cohort.z_tilde, cohort.y)
    pi = np.clip(logistic(cohort.z_tilde @ fit.coef), clip, 1 - clip)
    warn_if_pi_large(pi)
    return PiEstimate(pi, Coefficients(fit.coef, covariate_names(cohort.d)))


def _as_pi(pi) -> np.ndarray:
    return np.asarray(pi.pi if isinstance(pi, PiEstimate) else pi, dtype=float)


# --------------------------------------------------------------------------
# Pointwise rules
# --------------------------------------------------------------------------


def _minority(pi):
    return np.minimum(pi, 1.0 - pi)


def h_plus_approx(mu, pi):
    """Approximate selected-sample event probability and its variance factor.

    With the symmetric choice of ``(eta1, eta0)`` that maximises
    ``mu * H(1 - H)`` at fixed ``mu``, the selected-sample probability is
    ``H = 1/2`` when ``mu <= 2 pi`` and ``H = pi / mu`` otherwise.

    Returns
    -------
    h_plus, h1 : float or ndarray
        ``h1 = h_plus * (1 - h_plus)``.
    """
    mu = np.asarray(mu, dtype=float)
    pi = np.asarray(pi, dtype=float)
    if np.any(mu <= 0):
        raise DomainError("H+ is undefined where mu = 0")
    q = _minority(pi)
    tail = np.where(pi < 0.5, pi / mu, 1.0 - (1.0 - pi) / mu)
    h = np.where(mu <= 2 * q, 0.5, tail)
    h1 = h * (1 - h)
    if h.ndim == 0:
        return float(h), float(h1)
    return h, h1


def selection_weight(mu, pi):
    """``mu * H+(1 - H+)`` with value 0 at ``mu = 0``."""
    mu = np.asarray(mu, dtype=float)
    q = _minority(np.asarray(pi, dtype=float))
    with np.errstate(divide="ignore", invalid="ignore"):
        tail = q - q**2 / mu
    return np.where(mu <= 0, 0.0, np.where(mu <= 2 * q, mu / 4, tail))


def kt_update(sigma_tilde_sq, pi, lam):
    """Kuhn-Tucker allocation for a fixed multiplier.

    0 when ``sigma^2 / 4 < lam``; ``sigma * pi / sqrt(lam)`` capped at 1
    otherwise.  The tie ``lam = sigma^2 / 4`` goes to the interior branch.
    """
    s2 = np.asarray(sigma_tilde_sq, dtype=float)
    q = _minority(np.asarray(pi, dtype=float))
    interior = np.minimum(1.0, np.sqrt(np.maximum(s2, 0.0)) * q / np.sqrt(lam))
    out = np.where(s2 / 4 < lam, 0.0, interior)
    return float(out) if out.ndim == 0 else out


def eta_from_mu(mu, pi):
    """Case and control selection probabilities realising ``mu``.

    ``eta1 = mu / (2 pi), eta0 = mu / (2 (1 - pi))`` for ``mu <= 2 pi`` and
    ``eta1 = 1, eta0 = (mu - pi) / (1 - pi)`` above it; both 0 at ``mu = 0``.
    For ``pi >= 1/2`` the roles of cases and controls swap.
    """
    mu = np.asarray(mu, dtype=float)
    pi = np.asarray(pi, dtype=float)
    mu, pi = np.broadcast_arrays(mu, pi)
    low = mu <= 2 * _minority(pi)
    rare_case = pi < 0.5
    eta1 = np.where(low, mu / (2 * pi), np.where(rare_case, 1.0, (mu - (1 - pi)) / pi))
    eta0 = np.where(low, mu / (2 * (1 - pi)), np.where(rare_case, (mu - pi) / (1 - pi), 1.0))
    eta1 = np.clip(np.where(mu <= 0, 0.0, eta1), 0.0, 1.0)
    eta0 = np.clip(np.where(mu <= 0, 0.0, eta0), 0.0, 1.0)
    if eta1.ndim == 0:
        return float(eta1), float(eta0)
    return eta1, eta0


# --------------------------------------------------------------------------
# Weighted projection of E[X|Z] on the covariates
# --------------------------------------------------------------------------


def _projection(zt, m1, m2, w):
    """Generalised conditional variance and the information objective.

    ``w`` are per-record weights ``mu * h1 / n``.  The weighted least-squares
    fit of ``m1`` on ``zt`` gives ``f``; then
    ``sigma_tilde^2 = Var(X|Z) + (m1 - f)^2`` and the objective is
    ``sum(w * sigma_tilde^2)``, the Schur complement of the information.

    When the active records do not span the covariate space, records with a
    component outside their span take the directional-derivative limit
    ``Var(X|Z)`` (the fitted value is free there).  With no active record at
    all every record takes that limit and the objective is 0.
    """
    var = np.maximum(m2 - m1**2, 0.0)
    active = w > 0
    if not np.any(active):
        return var, 0.0
    za = zt[active]
    wa = w[active]
    gram = za.T @ (za * wa[:, None])
    try:
        chol = np.linalg.cholesky(gram)
        diag = np.diag(chol)
        if diag.min() <= np.sqrt(_RANK_RTOL) * diag.max():
            raise np.linalg.LinAlgError
        rho = np.linalg.solve(chol.T, np.linalg.solve(chol, za.T @ (wa * m1[active])))
        sig = var + (m1 - zt @ rho) ** 2
    except np.linalg.LinAlgError:
        sig = _projection_svd(zt, m1, var, active, np.sqrt(wa))
    return sig, float(np.sum(w * sig))


def _projection_svd(zt, m1, var, active, sw):
    xa = zt[active] * sw[:, None]
    u, s, vt = np.linalg.svd(xa, full_matrices=False)
    keep = s > _RANK_RTOL * s[0]
    v = vt[keep]
    rho = v.T @ ((u[:, keep].T @ (m1[active] * sw)) / s[keep])
    resid_sq = (m1 - zt @ rho) ** 2
    if keep.sum() < zt.shape[1]:
        outside = zt - (zt @ v.T) @ v
        free = np.linalg.norm(outside, axis=1) > 1e-8 * np.linalg.norm(zt, axis=1)
        resid_sq[free] = 0.0
    return var + resid_sq


def _inputs(cohort: Cohort, moments: MomentModel, pi):
    m1, m2 = moments.evaluate(cohort)
    pi = _as_pi(pi)
    if pi.shape != (cohort.n,):
        raise InputError("pi must have one value per record")
    return cohort.z_tilde, m1, m2, pi


def sigma_tilde(cohort: Cohort, moments: MomentModel, pi, mu) -> np.ndarray:
    """Generalised conditional variance of X given Z under allocation ``mu``."""
    zt, m1, m2, pi = _inputs(cohort, moments, pi)
    w = selection_weight(np.asarray(mu, dtype=float), pi) / cohort.n
    if not np.any(w > 0):
        raise SingularWeightMatrix("no record has positive selection weight")
    return _projection(zt, m1, m2, w)[0]


def design_objective(cohort: Cohort, moments: MomentModel, pi, mu) -> float:
    """Per-record information for the predictor coefficient under ``mu``.

    The reciprocal, divided by ``n``, is the approximate variance of the
    validation-only estimate.  Zero for ``mu == 0``.
    """
    zt, m1, m2, pi = _inputs(cohort, moments, pi)
    w = selection_weight(np.asarray(mu, dtype=float), pi) / cohort.n
    return _projection(zt, m1, m2, w)[1]


# --------------------------------------------------------------------------
# Fixed point for a given multiplier
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _FixedPoint:
    mu: np.ndarray
    sigma_sq: np.ndarray
    iterations: int
    converged: bool


def _weight_slope(mu, q):
    """Derivative of ``selection_weight`` with respect to ``mu``."""
    with np.errstate(divide="ignore"):
        return np.where(mu <= 2 * q, 0.25, q**2 / np.maximum(mu, 1e-300) ** 2)


def _fixed_point(zt, m1, m2, pi, lam, mu0, alpha, n_iter):
    """Alternate generalised variance and Kuhn-Tucker update for fixed ``lam``.

    The penalised objective ``info(mu) - lam * mean(mu)`` is concave in
    ``mu`` and the Kuhn-Tucker point is an ascent direction from any
    allocation.  The full update is taken whenever it does not decrease the
    objective; otherwise the step towards it is shortened by a quadratic
    line search.  Without that safeguard the bare alternation can cycle
    between two allocations.  Iteration stops once the directional
    derivative towards the update (an upper bound on the remaining gain)
    drops below ``alpha``.
    """
    n = zt.shape[0]
    q = _minority(pi)

    def penalised(mu):
        sig, obj = _projection(zt, m1, m2, selection_weight(mu, pi) / n)
        return obj - lam * mu.mean(), sig

    mu = mu0
    value, sig = penalised(mu)
    for k in range(1, n_iter + 1):
        target = kt_update(sig, pi, lam)
        step = target - mu
        slope = float(np.sum((sig * _weight_slope(mu, q) - lam) * step)) / n
        if slope < alpha:
            return _FixedPoint(mu, sig, k - 1, True)
        full_value, full_sig = penalised(target)
        if full_value >= value:
            mu, value, sig = target, full_value, full_sig
            continue
        curvature = full_value - value - slope
        t = min(1.0, -slope / (2 * curvature)) if curvature < 0 else 0.5
        for _ in range(40):
            trial = mu + t * step
            trial_value, trial_sig = penalised(trial)
            if trial_value > value:
                break
            t /= 2
        else:
            return _FixedPoint(mu, sig, k, True)
        mu, value, sig = trial, trial_value, trial_sig
    return _FixedPoint(mu, sig, n_iter, False)


def _initial_mu(n, seed):
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=n)


def optimal_mu(cohort: Cohort, moments: MomentModel, pi, lam: float, *,
               alpha=ALPHA, n_iter=N_ITER, seed=None) -> np.ndarray:
    """Optimal allocation for a fixed multiplier ``lam``.

    Starts from uniform random probabilities (drawn from ``seed``) and
    alternates the generalised variance with the Kuhn-Tucker update.
    """
    if lam <= 0:
        raise InputError("multiplier must be positive")
    zt, m1, m2, pi = _inputs(cohort, moments, pi)
    fp = _fixed_point(zt, m1, m2, pi, lam, _initial_mu(cohort.n, seed), alpha, n_iter)
    if not fp.converged:
        warnings.warn(f"allocation did not settle within {n_iter} sweeps", RuntimeWarning,
                      stacklevel=2)
    return fp.mu


# --------------------------------------------------------------------------
# Multiplier search
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _Search:
    lam: float
    mu: np.ndarray
    sigma_sq: np.ndarray
    converged: bool


def _search_lambda(evaluate, target, tol, sigma_hint, max_steps=MAX_BISECTIONS):
    """Bisection (on log scale) for ``mean(mu(lam)) = target``.

    ``evaluate(lam, start)`` returns ``(mu, sigma_sq, converged)``; ``start``
    is the allocation found at the nearest multiplier tried so far.  The
    mean allocation is nonincreasing in ``lam``.  If the bracket collapses
    onto a jump, the allocations on either side are mixed so the target is
    met exactly; both are optimal at the jump, and so is any mixture.
    """
    if not 0 < target <= 1:
        raise BracketFailure(f"target fraction {target} is outside (0, 1]")

    lo = LAMBDA_FLOOR
    mu_lo, sig_lo, ok_lo = evaluate(lo, None)
    if abs(mu_lo.mean() - target) <= tol:
        return _Search(lo, mu_lo, sig_lo, ok_lo)
    if mu_lo.mean() < target:
        raise BracketFailure(
            f"target {target} unattainable: at most {mu_lo.mean():.6f} can be allocated")

    hi = float(np.max(sigma_hint)) / 4 + 1.0
    mu_hi, sig_hi, ok_hi = evaluate(hi, None)
    for _ in range(60):
        if mu_hi.mean() <= target + tol:
            break
        hi *= 2
        mu_hi, sig_hi, ok_hi = evaluate(hi, mu_hi)
    else:
        raise BracketFailure("could not bracket the multiplier from above")
    if abs(mu_hi.mean() - target) <= tol:
        return _Search(hi, mu_hi, sig_hi, ok_hi)

    for _ in range(max_steps):
        mid = np.sqrt(lo * hi)
        if not lo < mid < hi or hi / lo - 1 < 1e-13:
            break
        nearer = mu_lo if np.log(mid / lo) < np.log(hi / mid) else mu_hi
        mu_mid, sig_mid, ok_mid = evaluate(mid, nearer)
        gap = mu_mid.mean() - target
        if abs(gap) <= tol:
            return _Search(mid, mu_mid, sig_mid, ok_mid)
        if gap > 0:
            lo, mu_lo, sig_lo, ok_lo = mid, mu_mid, sig_mid, ok_mid
        else:
            hi, mu_hi, sig_hi, ok_hi = mid, mu_mid, sig_mid, ok_mid

    share = (target - mu_hi.mean()) / (mu_lo.mean() - mu_hi.mean())
    mu = np.clip((1 - share) * mu_hi + share * mu_lo, 0.0, 1.0)
    return _Search(hi, mu, sig_hi, ok_hi and ok_lo)


def solve_lambda(cohort: Cohort, moments: MomentModel, pi, target_fraction: float,
                 search_tol=SEARCH_TOL, *, alpha=ALPHA, n_iter=N_ITER, seed=None):
    """Multiplier and allocation meeting ``mean(mu) = target_fraction``.

    Returns
    -------
    lam : float
    mu : ndarray
    """
    result = _solve_proposed(cohort, moments, pi, target_fraction, search_tol,
                             alpha=alpha, n_iter=n_iter, seed=seed)
    return result.lam, result.mu


def _solve_proposed(cohort, moments, pi, target_fraction, search_tol, *, alpha, n_iter, seed):
    zt, m1, m2, pi = _inputs(cohort, moments, pi)
    mu0 = _initial_mu(cohort.n, seed)

    def evaluate(lam, start):
        fp = _fixed_point(zt, m1, m2, pi, lam, mu0 if start is None else start, alpha, n_iter)
        return fp.mu, fp.sigma_sq, fp.converged

    hint = _projection(zt, m1, m2, selection_weight(mu0, pi) / cohort.n)[0]
    return _search_lambda(evaluate, target_fraction, search_tol, hint)


def _finish(scheme, search, pi, target):
    eta1, eta0 = eta_from_mu(search.mu, pi)
    return SamplingPlan(scheme, search.mu, eta1, eta0, float(target), lam=float(search.lam),
                        pi=pi, sigma_sq=search.sigma_sq, converged=search.converged)


def proposed_plan(cohort: Cohort, moments: MomentModel, pi, target_fraction: float, *,
                  search_tol=SEARCH_TOL, alpha=ALPHA, n_iter=N_ITER, seed=None) -> SamplingPlan:
    """Variance-minimising plan for the validation-only offset-logistic estimator."""
    pi_arr = _as_pi(pi)
    search = _solve_proposed(cohort, moments, pi_arr, target_fraction, search_tol,
                             alpha=alpha, n_iter=n_iter, seed=seed)
    if not search.converged:
        warnings.warn("allocation fixed point hit the iteration cap", RuntimeWarning,
                      stacklevel=2)
    return _finish(SchemeKind.PROPOSED, search, pi_arr, target_fraction)


def testlocal_plan(cohort: Cohort, moments: MomentModel, pi, target_fraction: float, *,
                   search_tol=SEARCH_TOL) -> SamplingPlan:
    """Local-alternative plan: Kuhn-Tucker allocation on ``Var(X|Z)``."""
    zt, m1, m2, pi_arr = _inputs(cohort, moments, pi)
    var = np.maximum(m2 - m1**2, 0.0)

    def evaluate(lam, start):
        return kt_update(var, pi_arr, lam), var, True

    search = _search_lambda(evaluate, target_fraction, search_tol, var)
    return _finish(SchemeKind.TEST_LOCAL, search, pi_arr, target_fraction)


def random_plan(cohort: Cohort, target_fraction: float, pi=None) -> SamplingPlan:
    """Equal selection probability for every record."""
    if not 0 < target_fraction <= 1:
        raise InputError("target fraction must lie in (0, 1]")
    p = np.full(cohort.n, float(target_fraction))
    return SamplingPlan(SchemeKind.RANDOM, p, p.copy(), p.copy(), float(target_fraction),
                        pi=None if pi is None else _as_pi(pi))


def case_control_plan(cohort: Cohort, total_count: int, pi=None) -> SamplingPlan:
    """Equal numbers of cases and controls, drawn without replacement.

    ``floor(N/2)`` cases and ``ceil(N/2)`` controls, each capped at the
    stratum size.  ``eta`` is the realised sampling fraction per stratum;
    with ``pi`` supplied ``mu = eta1 pi + eta0 (1 - pi)``, otherwise ``mu``
    is the overall sampled fraction.
    """
    if total_count < 2:
        raise InputError("case-control plan needs N >= 2")
    n1 = int(np.sum(cohort.y == 1))
    n0 = cohort.n - n1
    if n1 == 0 or n0 == 0:
        raise EmptyStratum("case-control sampling needs both cases and controls")
    cases = min(total_count // 2, n1)
    controls = min(total_count - total_count // 2, n0)
    e1, e0 = cases / n1, controls / n0
    eta1 = np.full(cohort.n, e1)
    eta0 = np.full(cohort.n, e0)
    if pi is not None:
        pi = _as_pi(pi)
        mu = e1 * pi + e0 * (1 - pi)
    else:
        mu = np.full(cohort.n, (cases + controls) / cohort.n)
    return SamplingPlan(SchemeKind.CASE_CONTROL, mu, eta1, eta0,
                        (cases + controls) / cohort.n, pi=pi, case_counts=(cases, controls))


def draw_indicators(plan: SamplingPlan, cohort: Cohort, seed=None) -> SelectionIndicators:
    """Draw second-phase selection indicators.

    Independent Bernoulli(eta_{Y_i}) draws, except for case-control plans,
    which take a simple random sample of fixed size within each stratum.
    ``seed`` may be an int, a ``SeedSequence`` or a ``Generator``.
    """
    if plan.n != cohort.n:
        raise InputError("plan and cohort are not aligned")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if plan.scheme is SchemeKind.CASE_CONTROL and plan.case_counts is not None:
        delta = np.zeros(cohort.n, dtype=np.int8)
        for label, count in zip((1, 0), plan.case_counts):
            members = np.flatnonzero(cohort.y == label)
            delta[rng.choice(members, size=count, replace=False)] = 1
    else:
        p = plan.eta_for(cohort.y)
        delta = (rng.uniform(size=cohort.n) < p).astype(np.int8)
    return SelectionIndicators(delta, seed)


def make_plan(scheme, cohort: Cohort, moments: MomentModel | None, pi, target_fraction: float,
              *, seed=None, search_tol=SEARCH_TOL) -> SamplingPlan:
    """Dispatch on ``scheme`` (a :class:`SchemeKind` or its name)."""
    scheme = SchemeKind(scheme)
    if scheme is SchemeKind.PROPOSED:
        return proposed_plan(cohort, moments, pi, target_fraction, seed=seed,
                             search_tol=search_tol)
    if scheme is SchemeKind.TEST_LOCAL:
        return testlocal_plan(cohort, moments, pi, target_fraction, search_tol=search_tol)
    if scheme is SchemeKind.RANDOM:
        return random_plan(cohort, target_fraction, pi)
    return case_control_plan(cohort, int(round(target_fraction * cohort.n)), pi)
