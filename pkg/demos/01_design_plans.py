"""Compare second-phase sampling plans on one simulated cohort.

A cohort of 400 subjects has six cheap covariates and a binary outcome; a
binary exposure X can be measured on only about 60 of them.  We know (or
assume) P(X=1|Z), so each plan can be scored before any X is measured by
the approximate variance of the offset-logistic estimate of beta.
"""

import warnings

import numpy as np

from twophase import estimate_pi, make_plan, var_beta_pclvalidate
from twophase.simharness import calibrate_intercept, generate_setting1

warnings.simplefilter("ignore", RuntimeWarning)

cohort, _, moments = generate_setting1(400, calibrate_intercept(0.10), 2.0, seed=1)
pi = estimate_pi(cohort).pi
fraction = 60 / cohort.n
print(f"cohort: n={cohort.n}, events={cohort.y.sum()}, target fraction={fraction:.3f}\n")

print(f"{'scheme':12}{'mean mu':>9}{'sd(beta) approx':>17}{'share mu=1':>12}{'share mu=0':>12}")
for scheme in ("Proposed", "TestLocal", "Random", "CaseControl"):
    plan = make_plan(scheme, cohort, moments, pi, fraction, seed=0)
    sd = np.sqrt(var_beta_pclvalidate(cohort, moments, pi, plan))
    print(f"{scheme:12}{plan.mu.mean():9.3f}{sd:17.3f}"
          f"{np.mean(plan.mu >= 1):12.2f}{np.mean(plan.mu <= 0):12.2f}")

# Where does the optimised plan spend its budget?  Records with higher outcome
# risk and more uncertain X get more of it.
plan = make_plan("Proposed", cohort, moments, pi, fraction, seed=0)
order = np.argsort(plan.mu)[::-1]
print("\nfive records with the largest selection probability:")
print(f"{'pi_hat':>8}{'sigma~^2':>10}{'mu':>8}{'eta1':>8}{'eta0':>8}")
for i in order[:5]:
    print(f"{pi[i]:8.3f}{plan.sigma_sq[i]:10.3f}{plan.mu[i]:8.3f}{plan.eta1[i]:8.3f}{plan.eta0[i]:8.3f}")
