"""Regenerate the bundled CLI fixtures and their golden outputs.

Run from the repository root: ``python3 tests/data/make_fixtures.py``.
The golden files are committed; rerun only after an intentional change.
"""

import csv
import json
import sys
from pathlib import Path

import numpy as np

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE.parent))

from conftest import two_atom_cohort  # noqa: E402
from twophase.cli import main, write_cohort  # noqa: E402
from twophase.simharness import X_COEF, X_INTERCEPT, calibrate_intercept, generate_setting1  # noqa: E402


def two_atom():
    out = HERE / "two_atom"
    out.mkdir(exist_ok=True)
    cohort, moments = two_atom_cohort()
    write_cohort(out / "cohort.csv", cohort)
    a = float(np.log(0.3 / 0.7))
    b = float(np.log(0.6 / 0.4)) - a
    (out / "moments.json").write_text(json.dumps(
        {"kind": "binary", "logistic": {"intercept": a, "coef": [b]}}, indent=2) + "\n")
    main(["design", str(out / "cohort.csv"), "--moments", str(out / "moments.json"),
          "--fraction", "0.3", "--seed", "1", "--out", str(out / "plan.csv")])


def synthetic():
    out = HERE / "synthetic"
    out.mkdir(exist_ok=True)
    cohort, x, _ = generate_setting1(400, calibrate_intercept(0.15), 2.0, seed=42)
    write_cohort(out / "cohort.csv", cohort)
    (out / "moments.json").write_text(json.dumps(
        {"kind": "binary", "logistic": {"intercept": X_INTERCEPT, "coef": list(X_COEF)}},
        indent=2) + "\n")
    main(["design", str(out / "cohort.csv"), "--moments", str(out / "moments.json"),
          "--fraction", "0.3", "--seed", "7", "--out", str(out / "plan.csv")])
    main(["select", str(out / "plan.csv"), str(out / "cohort.csv"), "--seed", "7",
          "--out", str(out / "delta.csv")])
    with open(out / "delta.csv") as fh:
        delta = np.array([int(r["delta"]) for r in csv.DictReader(fh)])
    with open(out / "x.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x"])
        for k in np.flatnonzero(delta == 1):
            w.writerow([int(cohort.ids[k]), int(x[k])])
    main(["estimate", str(out / "cohort.csv"), str(out / "delta.csv"), str(out / "x.csv"),
          str(out / "plan.csv"), "--moments", str(out / "moments.json"),
          "--out", str(out / "report.json")])


if __name__ == "__main__":
    two_atom()
    synthetic()
