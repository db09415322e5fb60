import math

import numpy as np
import pytest

from twophase.core import fit_logistic, logistic
from twophase.design import SchemeKind
from twophase.exceptions import BracketFailure, InputError
from twophase.simharness import (
    CAP,
    ESTIMATORS,
    TESTS,
    RunResult,
    ScenarioConfig,
    calibrate_intercept,
    draw_covariates,
    generate_setting1,
    generate_setting2,
    run_mc,
    run_one,
    runs_to_csv,
    substream,
    summarize,
)

P = SchemeKind.PROPOSED


def test_covariate_distribution():
    z = draw_covariates(np.random.default_rng(0), 100_000)
    assert z.shape == (100_000, 6)
    assert z[:, 0].mean() == pytest.approx(0.30, abs=0.01)
    assert z[:, 2].mean() == pytest.approx(0.70, abs=0.01)
    assert z[:, 4].mean() == pytest.approx(1.0, abs=0.02)


def test_predictor_model_at_zero_covariates():
    cohort, x, _ = generate_setting1(200_000, -2.0, 2.0, seed=3)
    coef = fit_logistic(cohort.z_tilde, x).coef
    assert logistic(coef[0]) == pytest.approx(logistic(-1.0), abs=0.01)


def test_calibration_closed_form_and_recheck():
    b0 = calibrate_intercept(0.10, beta_x=0.0, y_coef=(0.0,) * 6)
    assert b0 == pytest.approx(math.log(0.1 / 0.9), abs=1e-9)
    b1 = calibrate_intercept(0.10)
    cohort, _, _ = generate_setting1(1_000_000, b1, 2.0, seed=987654)
    assert cohort.y.mean() == pytest.approx(0.10, abs=0.002)
    with pytest.raises(BracketFailure):
        calibrate_intercept(0.7)


def test_setting2_event_rate():
    cohort, _, _ = generate_setting2(400_000, 1.0, seed=5)
    assert cohort.y.mean() == pytest.approx(0.15, abs=0.003)


def test_substreams_are_distinct():
    a = np.random.default_rng(substream(1, 0, "data-gen")).random(3)
    b = np.random.default_rng(substream(1, 0, "selection", 0)).random(3)
    c = np.random.default_rng(substream(1, 1, "data-gen")).random(3)
    again = np.random.default_rng(substream(1, 0, "data-gen")).random(3)
    assert not np.allclose(a, b) and not np.allclose(a, c) and np.array_equal(a, again)


def test_config_validation():
    with pytest.raises(InputError):
        ScenarioConfig(N=500, n=400)
    with pytest.raises(InputError):
        ScenarioConfig(event_rate=0.1, beta_0=-2)
    with pytest.raises(InputError):
        ScenarioConfig(setting=3)
    with pytest.raises(InputError):
        ScenarioConfig(schemes=())
    cfg = ScenarioConfig(beta_0=-1.5, N=100)
    assert cfg.intercept == -1.5 and cfg.fraction == 0.25
    assert cfg.as_dict()["schemes"] == ["Proposed", "TestLocal", "Random", "CaseControl"]


def _fake(run, errors, bit, failed=False):
    r = RunResult(run, 1.0)
    r.sizes[P] = 60
    for k in ESTIMATORS:
        r.estimates[(P, k)] = math.nan if failed else 1.0 + errors
    for t in TESTS:
        r.rejects[(P, t)] = bit
    return r


def test_summarize_examples():
    runs = [_fake(0, 0.3, True), _fake(1, -0.5, True), _fake(2, 0.3, False), _fake(3, -0.5, True)]
    table = summarize(runs, [P])
    assert table.error(P, ESTIMATORS[0]).value == pytest.approx(0.4)
    assert table.rate(P, TESTS[0]) == 0.75
    rmse = summarize(runs[:2], [P], statistic="rmse")
    assert rmse.error(P, ESTIMATORS[0]).value == pytest.approx(math.sqrt((0.09 + 0.25) / 2))


def test_summarize_failures_and_cap():
    runs = [_fake(0, 0.2, False), _fake(1, 0.0, False, failed=True)]
    capped = summarize(runs, [P])
    cell = capped.error(P, ESTIMATORS[0])
    assert cell.capped and cell.render() == f">{CAP:g}" and cell.failures == 1
    kept = summarize(runs, [P], failures="exclude").error(P, ESTIMATORS[0])
    assert kept.value == pytest.approx(0.2) and kept.render() == "0.200"
    huge = summarize([_fake(0, 12.0, False)], [P]).error(P, ESTIMATORS[0])
    assert huge.render() == ">10"
    with pytest.raises(InputError):
        summarize([])


def test_single_run_summary_equals_run():
    cfg = ScenarioConfig(n_runs=1, N=120, schemes=("Proposed", "Random"))
    runs, table = run_mc(cfg)
    (run,) = runs
    for scheme in cfg.schemes:
        for k in ESTIMATORS:
            est = run.estimates[(scheme, k)]
            want = abs(est - cfg.beta_x) if not math.isnan(est) else math.inf
            assert table.error(scheme, k).value == pytest.approx(want, abs=0) or \
                (math.isinf(want) and table.error(scheme, k).capped)
        for t in TESTS:
            assert table.rate(scheme, t) == float(run.rejects[(scheme, t)])


def test_run_determinism_and_parallel_equivalence():
    cfg = ScenarioConfig(n_runs=4, N=100, base_seed=7)
    a_runs, a = run_mc(cfg)
    b_runs, b = run_mc(cfg)
    c_runs, c = run_mc(cfg, jobs=2)
    assert a.to_csv() == b.to_csv() == c.to_csv()
    assert runs_to_csv(a_runs) == runs_to_csv(c_runs)
    one = run_one(cfg, 2)
    assert one.estimates == a_runs[2].estimates


def test_pilot_moments_run():
    cfg = ScenarioConfig(n_runs=1, N=100, moments="pilot", schemes=("Proposed",))
    runs, table = run_mc(cfg)
    assert runs[0].sizes[P] > 0
