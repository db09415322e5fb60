"""Monte Carlo replication of the two simulation settings.

Each run draws a phase-one cohort with a hidden binary predictor, builds
the four sampling plans, draws the subsample, fits the four estimators
and runs the five tests.  :func:`summarize` reduces the runs to the mean
absolute error per scheme and estimator and the rejection rate per scheme
and test.

Randomness is keyed by ``(base_seed + run, stream)`` so a run's result
does not depend on which process executes it or in what order.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq

from .core import BINARY, Cohort, MomentModel, fit_logistic, logistic
from .design import SchemeKind, draw_indicators, estimate_pi, make_plan
from .estimators import (
    EstimatorKind,
    SecondPhaseData,
    fit_estimator,
    var_beta_pclboth,
    var_beta_pclvalidate,
)
from .exceptions import BracketFailure, InputError, TwoPhaseError
from .inference import TestMethod, score_test, wald_test

X_INTERCEPT = -1.0
X_COEF = (0.5, 0.5, 1.0, 2.0, -3.0, -2.0)
Y_COEF = (0.5, 0.5, 0.0, 0.0, 0.0, 0.5)
SETTING1_BETA_X = 2.0
SETTING1_EVENT_RATE = 0.10
SETTING2_EVENT_RATE = 0.15
CALIBRATION_DRAWS = 200_000
CALIBRATION_SEED = 20_240_601
CAP = 10.0

STREAMS = {"data-gen": 0, "plan-init": 1, "selection": 2, "pilot": 3}
SCHEMES = tuple(SchemeKind)
ESTIMATORS = tuple(EstimatorKind)
TESTS = (TestMethod.WALD_NAIVE, TestMethod.WALD_IPW, TestMethod.WALD_PCL_BOTH,
         TestMethod.WALD_PCL_VALIDATE, TestMethod.SCORE)


def substream(base_seed: int, run: int, stream: str, *extra: int) -> np.random.SeedSequence:
    """Seed for one named stream of one run."""
    return np.random.SeedSequence([base_seed + run, STREAMS[stream], *extra])


# --------------------------------------------------------------------------
# Data generation
# --------------------------------------------------------------------------


def draw_covariates(rng: np.random.Generator, n: int) -> np.ndarray:
    """Six covariates: Bern(.3), U(0,1), Bern(.7), N(0,1), Exp(1), Gamma(.5, 1)."""
    return np.column_stack([
        rng.binomial(1, 0.3, n),
        rng.uniform(0.0, 1.0, n),
        rng.binomial(1, 0.7, n),
        rng.normal(0.0, 1.0, n),
        rng.exponential(1.0, n),
        rng.gamma(0.5, 1.0, n),
    ]).astype(float)


def oracle_moments() -> MomentModel:
    """Exact ``E[X|Z]`` of the generating predictor model (binary, so m2 = m1)."""
    return MomentModel.logistic(X_INTERCEPT, np.array(X_COEF))


def generate_setting1(n: int, beta_0: float, beta_x: float, seed):
    """Cohort, hidden predictor and oracle moments for the first setting.

    Returns
    -------
    cohort : Cohort
    x : ndarray of 0/1
    moments : MomentModel
    """
    if n < 1:
        raise InputError("cohort size must be positive")
    rng = np.random.default_rng(seed)
    z = draw_covariates(rng, n)
    x = rng.binomial(1, logistic(X_INTERCEPT + z @ np.array(X_COEF))).astype(float)
    y = rng.binomial(1, logistic(beta_0 + z @ np.array(Y_COEF) + beta_x * x))
    return Cohort(y, z), x, oracle_moments()


def generate_setting2(n: int, beta_x: float, seed, event_rate: float = SETTING2_EVENT_RATE):
    """Second setting: same models with the intercept calibrated to 15% events."""
    return generate_setting1(n, calibrate_intercept(event_rate, beta_x), beta_x, seed)


@lru_cache(maxsize=64)
def calibrate_intercept(target_event_rate: float, beta_x: float = SETTING1_BETA_X,
                        y_coef: tuple = Y_COEF, x_intercept: float = X_INTERCEPT,
                        x_coef: tuple = X_COEF, draws: int = CALIBRATION_DRAWS,
                        seed: int = CALIBRATION_SEED) -> float:
    """Outcome intercept giving the target marginal event rate.

    The event rate is averaged analytically over X and by Monte Carlo over
    a fixed synthetic covariate sample, then solved for by bracketing root
    search.  The rate is increasing in the intercept.
    """
    if not 0 < target_event_rate < 0.5:
        raise BracketFailure("target event rate must lie in (0, 0.5)")
    z = draw_covariates(np.random.default_rng(seed), draws)
    lin = z @ np.array(y_coef)
    px = logistic(x_intercept + z @ np.array(x_coef))

    def excess(b0):
        rate = px * logistic(b0 + lin + beta_x) + (1 - px) * logistic(b0 + lin)
        return float(rate.mean()) - target_event_rate

    lo, hi = -60.0, 60.0
    if excess(lo) > 0 or excess(hi) < 0:
        raise BracketFailure("event rate cannot be reached")
    return float(brentq(excess, lo, hi, xtol=1e-12))


def fit_pilot_moments(pilot: Cohort, x: np.ndarray) -> MomentModel:
    """Logistic regression of X on Z in a pilot cohort where X is observed."""
    coef = fit_logistic(pilot.z_tilde, x).coef
    return MomentModel.logistic(coef[0], coef[1:])


# --------------------------------------------------------------------------
# Configuration and per-run results
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation cell.

    Give either ``event_rate`` (the intercept is calibrated) or ``beta_0``.
    ``moments`` is ``"oracle"`` or ``"pilot"``; pilot moments are fitted on
    an independent cohort of ``pilot_size`` records with X observed.
    """

    setting: int = 1
    n: int = 400
    N: int = 60
    beta_x: float = SETTING1_BETA_X
    event_rate: float | None = None
    beta_0: float | None = None
    n_runs: int = 50
    base_seed: int = 2024
    schemes: tuple = SCHEMES
    moments: str = "oracle"
    pilot_size: int = 400

    def __post_init__(self):
        if self.setting not in (1, 2):
            raise InputError("setting must be 1 or 2")
        if not 0 < self.N <= self.n:
            raise InputError("need 0 < N <= n")
        if self.n_runs < 1:
            raise InputError("need at least one run")
        if self.event_rate is not None and self.beta_0 is not None:
            raise InputError("give event_rate or beta_0, not both")
        if self.moments not in ("oracle", "pilot"):
            raise InputError("moments must be 'oracle' or 'pilot'")
        object.__setattr__(self, "schemes", tuple(SchemeKind(s) for s in self.schemes))
        if not self.schemes:
            raise InputError("no sampling scheme selected")

    @property
    def intercept(self) -> float:
        if self.beta_0 is not None:
            return float(self.beta_0)
        rate = self.event_rate
        if rate is None:
            rate = SETTING1_EVENT_RATE if self.setting == 1 else SETTING2_EVENT_RATE
        return calibrate_intercept(rate, self.beta_x)

    @property
    def fraction(self) -> float:
        return self.N / self.n

    def as_dict(self) -> dict:
        out = asdict(self)
        out["schemes"] = [s.value for s in self.schemes]
        out["intercept"] = self.intercept
        return out


@dataclass
class RunResult:
    """Outcome of one replication.

    ``estimates`` maps ``(scheme, estimator)`` to the estimate of beta, or
    NaN when the fit failed; ``failures`` maps the same keys (and test keys)
    to the error name.  ``rejects`` maps ``(scheme, test)`` to the decision
    and ``statistics`` to the test statistic.
    """

    run_id: int
    beta_x: float
    estimates: dict = field(default_factory=dict)
    statistics: dict = field(default_factory=dict)
    rejects: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    sizes: dict = field(default_factory=dict)

    def squared_error(self, scheme, estimator) -> float:
        est = self.estimates[(scheme, estimator)]
        return math.inf if math.isnan(est) else (est - self.beta_x) ** 2


def _plugin_se(kind, est, cohort, moments, pi, plan):
    if kind is EstimatorKind.PCL_VALIDATE:
        return math.sqrt(var_beta_pclvalidate(cohort, moments, pi, plan))
    if kind is EstimatorKind.PCL_BOTH:
        r_hat = est.details["r_model"].r_hat(est.beta)
        return math.sqrt(var_beta_pclboth(cohort, moments, pi, plan, est.beta, r_hat))
    return None


def _run_scheme(result, scheme, config, run, cohort, x, moments, pi):
    plan = make_plan(scheme, cohort, moments, pi, config.fraction, seed=substream(config.base_seed, run, "plan-init"))
    selection = draw_indicators(plan, cohort,
                                substream(config.base_seed, run, "selection", SCHEMES.index(scheme)))
    result.sizes[scheme] = selection.realized_count
    data = SecondPhaseData.from_full(cohort, x, selection.delta, plan)

    for kind in ESTIMATORS:
        test = TestMethod("Wald" + kind.value)
        try:
            est = fit_estimator(kind, data, BINARY)
            result.estimates[(scheme, kind)] = est.beta
        except TwoPhaseError as exc:
            result.estimates[(scheme, kind)] = math.nan
            result.failures[(scheme, kind)] = type(exc).__name__
            result.failures[(scheme, test)] = type(exc).__name__
            result.rejects[(scheme, test)] = False
            result.statistics[(scheme, test)] = math.nan
            continue
        try:
            outcome = wald_test(est, _plugin_se(kind, est, cohort, moments, pi, plan))
            result.rejects[(scheme, test)] = outcome.reject_at_05
            result.statistics[(scheme, test)] = outcome.statistic
        except TwoPhaseError as exc:
            result.failures[(scheme, test)] = type(exc).__name__
            result.rejects[(scheme, test)] = False
            result.statistics[(scheme, test)] = math.nan

    try:
        outcome = score_test(data, moments, pi)
        result.rejects[(scheme, TestMethod.SCORE)] = outcome.reject_at_05
        result.statistics[(scheme, TestMethod.SCORE)] = outcome.statistic
    except TwoPhaseError as exc:
        result.failures[(scheme, TestMethod.SCORE)] = type(exc).__name__
        result.rejects[(scheme, TestMethod.SCORE)] = False
        result.statistics[(scheme, TestMethod.SCORE)] = math.nan


def _fail_scheme(result, scheme, exc):
    name = type(exc).__name__
    result.sizes.setdefault(scheme, 0)
    for kind in ESTIMATORS:
        result.estimates[(scheme, kind)] = math.nan
        result.failures[(scheme, kind)] = name
    for test in TESTS:
        result.rejects[(scheme, test)] = False
        result.statistics[(scheme, test)] = math.nan
        result.failures[(scheme, test)] = name


def run_one(config: ScenarioConfig, run: int) -> RunResult:
    """Generate, sample, estimate and test for one replication."""
    with warnings.catch_warnings():
        # large fitted P(Y=1|Z) in a few records is routine in simulated cohorts
        warnings.simplefilter("ignore", RuntimeWarning)
        return _run_one(config, run)


def _run_one(config, run):
    beta_0 = config.intercept
    cohort, x, moments = generate_setting1(config.n, beta_0, config.beta_x,
                                           substream(config.base_seed, run, "data-gen"))
    result = RunResult(run, config.beta_x)
    try:
        if config.moments == "pilot":
            pilot, pilot_x, _ = generate_setting1(config.pilot_size, beta_0, config.beta_x,
                                                  substream(config.base_seed, run, "pilot"))
            moments = fit_pilot_moments(pilot, pilot_x)
        pi = estimate_pi(cohort).pi
    except TwoPhaseError as exc:
        for scheme in config.schemes:
            _fail_scheme(result, scheme, exc)
        return result
    for scheme in config.schemes:
        try:
            _run_scheme(result, scheme, config, run, cohort, x, moments, pi)
        except TwoPhaseError as exc:
            _fail_scheme(result, scheme, exc)
    return result


def _run_star(args):
    return run_one(*args)


def run_mc(config: ScenarioConfig, jobs: int = 1, *, summary: str = "abs"):
    """Run every replication and summarise.

    ``jobs > 1`` spreads runs over worker processes; results are identical
    to the serial path because each run owns its seeds.

    Returns
    -------
    runs : list of RunResult, ordered by run id
    table : SummaryTable
    """
    tasks = [(config, r) for r in range(config.n_runs)]
    # warm the intercept cache before forking
    config.intercept
    if jobs <= 1:
        runs = [run_one(*t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_run_star, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    runs.sort(key=lambda r: r.run_id)
    return runs, summarize(runs, config.schemes, statistic=summary)


# --------------------------------------------------------------------------
# Summaries
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ErrorCell:
    value: float
    failures: int
    max_abs_error: float

    @property
    def capped(self) -> bool:
        return not self.value <= CAP

    def render(self) -> str:
        return f">{CAP:g}" if self.capped else f"{self.value:.3f}"


@dataclass(frozen=True)
class RateCell:
    rate: float
    failures: int


@dataclass
class SummaryTable:
    """Average error per scheme and estimator, rejection rate per scheme and test."""

    n_runs: int
    statistic: str
    errors: dict
    rates: dict
    mean_sizes: dict

    def error(self, scheme, estimator) -> ErrorCell:
        return self.errors[(SchemeKind(scheme), EstimatorKind(estimator))]

    def rate(self, scheme, test) -> float:
        return self.rates[(SchemeKind(scheme), TestMethod(test))].rate

    def rows(self) -> list[dict]:
        out = []
        for (scheme, kind), cell in self.errors.items():
            out.append({"table": "error", "scheme": scheme.value, "column": kind.value,
                        "value": _num(cell.value), "display": cell.render(),
                        "capped": int(cell.capped), "failures": cell.failures,
                        "max_abs_error": _num(cell.max_abs_error)})
        for (scheme, test), cell in self.rates.items():
            out.append({"table": "rejection", "scheme": scheme.value, "column": test.value,
                        "value": _num(cell.rate), "display": f"{cell.rate:.2f}",
                        "capped": 0, "failures": cell.failures, "max_abs_error": ""})
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(self.rows()[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows())
        return buf.getvalue()

    def to_json(self) -> str:
        payload = {
            "n_runs": self.n_runs,
            "statistic": self.statistic,
            "mean_subsample_size": {s.value: _num(v) for s, v in self.mean_sizes.items()},
            "cells": self.rows(),
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def render(self) -> str:
        """Plain-text tables laid out like the published ones."""
        schemes = list(self.mean_sizes)
        lines = [f"{'':12}" + "".join(f"{k.value:>12}" for k in ESTIMATORS)]
        for s in schemes:
            lines.append(f"{s.value:12}" + "".join(
                f"{self.errors[(s, k)].render():>12}" for k in ESTIMATORS))
        lines.append("")
        lines.append(f"{'':12}" + "".join(f"{t.value:>17}" for t in TESTS))
        for s in schemes:
            lines.append(f"{s.value:12}" + "".join(
                f"{self.rates[(s, t)].rate:>17.2f}" for t in TESTS))
        return "\n".join(lines) + "\n"


def _num(v):
    """JSON/CSV-safe float: repr round-trips, non-finite values become strings."""
    v = float(v)
    return repr(v) if math.isfinite(v) else str(v)


def summarize(results, schemes=None, *, statistic: str = "abs",
              failures: str = "cap") -> SummaryTable:
    """Reduce runs to a summary table.

    ``statistic="abs"`` averages ``|beta_hat - beta|`` over runs;
    ``"rmse"`` reports the root of the mean squared error.  With
    ``failures="cap"`` a failed fit contributes an infinite error, so the
    cell shows as capped; ``"exclude"`` drops failed runs from the
    average.  Failure counts are reported either way.
    """
    results = list(results)
    if not results:
        raise InputError("no runs to summarise")
    if statistic not in ("abs", "rmse"):
        raise InputError("statistic must be 'abs' or 'rmse'")
    if failures not in ("cap", "exclude"):
        raise InputError("failures must be 'cap' or 'exclude'")
    if schemes is None:
        schemes = [s for s in SCHEMES if s in results[0].sizes]
    errors, rates, sizes = {}, {}, {}
    for scheme in schemes:
        sizes[scheme] = float(np.mean([r.sizes[scheme] for r in results]))
        for kind in ESTIMATORS:
            sq = np.array([r.squared_error(scheme, kind) for r in results])
            failed = int(np.sum(~np.isfinite(sq)))
            used = sq[np.isfinite(sq)] if failures == "exclude" else sq
            if used.size == 0:
                value = math.inf
            elif statistic == "abs":
                value = float(np.mean(np.sqrt(used)))
            else:
                value = float(np.sqrt(np.mean(used)))
            errors[(scheme, kind)] = ErrorCell(value, failed, float(np.sqrt(sq.max())))
        for test in TESTS:
            bits = [r.rejects[(scheme, test)] for r in results]
            failed = sum((scheme, test) in r.failures for r in results)
            rates[(scheme, test)] = RateCell(float(np.mean(bits)), failed)
    return SummaryTable(len(results), statistic, errors, rates, sizes)


def runs_to_csv(results) -> str:
    """One row per run, scheme and estimator or test."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["run", "scheme", "kind", "name", "value", "squared_error", "reject",
                     "status", "subsample_size"])
    for r in results:
        for scheme in r.sizes:
            for kind in ESTIMATORS:
                key = (scheme, kind)
                writer.writerow([r.run_id, scheme.value, "estimate", kind.value,
                                 _num(r.estimates[key]), _num(r.squared_error(scheme, kind)),
                                 "", r.failures.get(key, "ok"), r.sizes[scheme]])
            for test in TESTS:
                key = (scheme, test)
                writer.writerow([r.run_id, scheme.value, "test", test.value,
                                 _num(r.statistics[key]), "", int(r.rejects[key]),
                                 r.failures.get(key, "ok"), r.sizes[scheme]])
    return buf.getvalue()
