import numpy as np

from twophase.core import Cohort, MomentModel, logistic

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def continuous_cohort(seed, n=300, beta=0.8, b0=-2.0):
    """Two normal covariates, linear-Gaussian predictor, logistic outcome."""
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, 2))
    x = 0.5 + z @ np.array([1.0, -0.5]) + rng.normal(size=n)
    y = rng.binomial(1, logistic(b0 + z @ np.array([0.4, 0.3]) + beta * x))
    return Cohort(y, z), x, MomentModel.linear(0.5, [1.0, -0.5], 1.0)


def two_atom_cohort(n_a=100, n_b=100, cases_a=10, cases_b=20, m_a=0.3, m_b=0.6):
    """Binary covariate with two atoms; the phase-one fit is saturated."""
    z = np.r_[np.zeros(n_a), np.ones(n_b)]
    y = np.r_[np.arange(n_a) < cases_a, np.arange(n_b) < cases_b].astype(int)
    a = np.log(m_a / (1 - m_a))
    b = np.log(m_b / (1 - m_b)) - a
    return Cohort(y, z), MomentModel.logistic(a, [b])
