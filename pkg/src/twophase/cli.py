"""Command-line front end: ``twophase design | select | estimate | simulate``.

Exit codes: 0 success, 2 input or schema error, 3 numeric failure,
4 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from .core import BINARY, PREDICTOR_KINDS, Cohort, MomentModel
from .design import (
    SamplingPlan,
    SchemeKind,
    draw_indicators,
    estimate_pi,
    make_plan,
    sigma_tilde,
)
from .estimators import EstimatorKind, SecondPhaseData, fit_estimator
from .exceptions import InputError, TwoPhaseError
from .inference import score_test, wald_test
from .simharness import STREAMS, ScenarioConfig, run_mc, runs_to_csv
from .simharness import _plugin_se as plugin_se

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_USAGE = 0, 2, 3, 4

SCHEME_NAMES = {s.value.lower(): s for s in SchemeKind}
ESTIMATOR_NAMES = {e.value.lower(): e for e in EstimatorKind}


class UsageError(Exception):
    pass


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _seed(seed, stream):
    return None if seed is None else np.random.SeedSequence([seed, STREAMS[stream]])


# --------------------------------------------------------------------------
# File formats
# --------------------------------------------------------------------------


def _read_rows(path):
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(lines)
    if reader.fieldnames is None:
        raise InputError(f"{path}: empty file")
    return reader.fieldnames, list(reader)


def _parse_id(text, path):
    try:
        return int(text)
    except (TypeError, ValueError):
        raise InputError(f"{path}: id {text!r} is not an integer") from None


def _float(text, path, column):
    try:
        return float(text)
    except (TypeError, ValueError):
        raise InputError(f"{path}: bad number {text!r} in column {column}") from None


def read_cohort(path) -> Cohort:
    """``id,y,z1,...,zd`` with integer ids and 0/1 outcomes."""
    fields, rows = _read_rows(path)
    zcols = [f for f in fields if f not in ("id", "y")]
    if fields[:2] != ["id", "y"] or not zcols:
        raise InputError(f"{path}: header must be id,y,z1,...,zd")
    if not rows:
        raise InputError(f"{path}: no records")
    ids = np.array([_parse_id(r["id"], path) for r in rows])
    y = np.array([_float(r["y"], path, "y") for r in rows])
    z = np.array([[_float(r[c], path, c) for c in zcols] for r in rows])
    return Cohort(y, z, ids)


def write_cohort(path, cohort: Cohort):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "y"] + [f"z{j + 1}" for j in range(cohort.d)])
        for i in range(cohort.n):
            w.writerow([int(cohort.ids[i]), int(cohort.y[i])] + [_fmt(v) for v in cohort.z[i]])


def read_moments(path) -> MomentModel:
    """JSON moment model: ``kind`` plus a ``linear``, ``logistic`` or ``tabulated`` block."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc.msg})") from None
    if not isinstance(doc, dict):
        raise InputError(f"{path}: expected a JSON object")
    kind = doc.get("kind")
    if kind not in PREDICTOR_KINDS:
        raise InputError(f"{path}: kind must be one of {PREDICTOR_KINDS}")
    blocks = [k for k in ("linear", "logistic", "tabulated") if k in doc]
    unknown = set(doc) - {"kind", "linear", "logistic", "tabulated"}
    if len(blocks) != 1 or unknown:
        raise InputError(f"{path}: need exactly one of linear/logistic/tabulated and no other keys")
    block = doc[blocks[0]]
    try:
        if blocks[0] == "linear":
            if kind != "continuous":
                raise InputError(f"{path}: linear moments need kind 'continuous'")
            return MomentModel.linear(block["intercept"], block["coef"], block["variance"])
        if blocks[0] == "logistic":
            if kind != BINARY:
                raise InputError(f"{path}: logistic moments need kind 'binary'")
            return MomentModel.logistic(block["intercept"], block["coef"])
        table = path.parent / block["path"]
    except (KeyError, TypeError) as exc:
        raise InputError(f"{path}: malformed {blocks[0]} block ({exc})") from None
    fields, rows = _read_rows(table)
    if "id" not in fields or "m1" not in fields:
        raise InputError(f"{table}: need columns id,m1[,m2]")
    ids = [_parse_id(r["id"], table) for r in rows]
    m1 = [_float(r["m1"], table, "m1") for r in rows]
    m2 = [_float(r["m2"], table, "m2") for r in rows] if "m2" in fields else None
    return MomentModel.tabulated(kind, ids, m1, m2)


PLAN_COLUMNS = ["id", "pi_hat", "sigma_tilde_sq", "mu", "eta1", "eta0"]


def write_plan(path, plan: SamplingPlan, cohort: Cohort, pi, sig):
    meta = {"scheme": plan.scheme.value,
            "lambda": "" if plan.lam is None else _fmt(plan.lam),
            "target_fraction": _fmt(plan.target_fraction),
            "case_counts": "" if plan.case_counts is None else "%d/%d" % plan.case_counts}
    with open(path, "w", newline="") as fh:
        fh.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PLAN_COLUMNS)
        for i in range(cohort.n):
            w.writerow([int(cohort.ids[i])] + [_fmt(a[i]) for a in (pi, sig, plan.mu,
                                                                     plan.eta1, plan.eta0)])


def read_plan(path, cohort: Cohort | None = None) -> SamplingPlan:
    """Read a plan file, reordered to ``cohort`` when given."""
    with open(path) as fh:
        first = fh.readline()
    if not first.startswith("#"):
        raise InputError(f"{path}: missing plan header line")
    meta = dict(item.split("=", 1) for item in first[1:].split() if "=" in item)
    fields, rows = _read_rows(path)
    if fields != PLAN_COLUMNS:
        raise InputError(f"{path}: columns must be {','.join(PLAN_COLUMNS)}")
    try:
        scheme = SchemeKind(meta["scheme"])
        target = float(meta["target_fraction"])
    except (KeyError, ValueError):
        raise InputError(f"{path}: header needs scheme= and target_fraction=") from None
    ids = np.array([_parse_id(r["id"], path) for r in rows])
    cols = {c: np.array([_float(r[c], path, c) for r in rows]) for c in PLAN_COLUMNS[1:]}
    if cohort is not None:
        order = _align(ids, cohort.ids, path)
        cols = {c: v[order] for c, v in cols.items()}
    for c in ("mu", "eta1", "eta0"):
        if np.any(~np.isfinite(cols[c])) or np.any(cols[c] < 0) or np.any(cols[c] > 1):
            raise InputError(f"{path}: {c} must be probabilities")
    counts = None
    if meta.get("case_counts"):
        counts = tuple(int(v) for v in meta["case_counts"].split("/"))
    lam = float(meta["lambda"]) if meta.get("lambda") else None
    sig = cols["sigma_tilde_sq"]
    return SamplingPlan(scheme, cols["mu"], cols["eta1"], cols["eta0"], target, lam=lam,
                        pi=cols["pi_hat"], sigma_sq=None if np.all(np.isnan(sig)) else sig,
                        case_counts=counts)


def _align(file_ids, cohort_ids, path):
    """Row order mapping ``file_ids`` onto ``cohort_ids``; ids must match exactly."""
    index = {k: i for i, k in enumerate(file_ids.tolist())}
    if len(index) != len(file_ids):
        raise InputError(f"{path}: duplicate ids")
    if len(file_ids) != len(cohort_ids) or any(k not in index for k in cohort_ids.tolist()):
        raise InputError(f"{path}: ids do not match the cohort")
    return np.array([index[k] for k in cohort_ids.tolist()])


def write_delta(path, cohort: Cohort, delta):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "delta"])
        for k, d in zip(cohort.ids.tolist(), delta.tolist()):
            w.writerow([k, int(d)])


def read_delta(path, cohort: Cohort) -> np.ndarray:
    fields, rows = _read_rows(path)
    if fields != ["id", "delta"]:
        raise InputError(f"{path}: columns must be id,delta")
    ids = np.array([_parse_id(r["id"], path) for r in rows])
    delta = np.array([_float(r["delta"], path, "delta") for r in rows])
    if not np.all((delta == 0) | (delta == 1)):
        raise InputError(f"{path}: delta must be 0/1")
    return delta[_align(ids, cohort.ids, path)].astype(np.int8)


def read_x(path, cohort: Cohort, delta) -> np.ndarray:
    """``id,x`` rows for exactly the selected ids; NaN elsewhere."""
    fields, rows = _read_rows(path)
    if fields != ["id", "x"]:
        raise InputError(f"{path}: columns must be id,x")
    values = {}
    for r in rows:
        k = _parse_id(r["id"], path)
        if k in values:
            raise InputError(f"{path}: duplicate id {k}")
        values[k] = _float(r["x"], path, "x")
    selected = set(cohort.ids[delta == 1].tolist())
    if set(values) != selected:
        missing = sorted(selected - set(values))[:5]
        extra = sorted(set(values) - selected)[:5]
        raise InputError(f"{path}: x rows must cover exactly the selected ids "
                         f"(missing {missing}, unexpected {extra})")
    return np.array([values.get(k, math.nan) for k in cohort.ids.tolist()])


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_design(args):
    cohort = read_cohort(args.cohort)
    scheme = SCHEME_NAMES[args.scheme]
    moments = read_moments(args.moments) if args.moments else None
    if moments is None and scheme in (SchemeKind.PROPOSED, SchemeKind.TEST_LOCAL):
        raise UsageError(f"--moments is required for the {scheme.value} scheme")
    if not 0 < args.fraction <= 1:
        raise InputError("--fraction must lie in (0, 1]")
    pi = estimate_pi(cohort).pi
    plan = make_plan(scheme, cohort, moments, pi, args.fraction,
                     seed=_seed(args.seed, "plan-init"))
    sig = plan.sigma_sq
    if sig is None:
        sig = (sigma_tilde(cohort, moments, pi, plan.mu) if moments is not None
               else np.full(cohort.n, math.nan))
    write_plan(args.out, plan, cohort, pi, sig)
    return EXIT_OK


def cmd_select(args):
    cohort = read_cohort(args.cohort)
    plan = read_plan(args.plan, cohort)
    selection = draw_indicators(plan, cohort, _seed(args.seed, "selection"))
    write_delta(args.out, cohort, selection.delta)
    return EXIT_OK


def _estimate_report(kind, data, predictor_kind, moments, pi):
    try:
        est = fit_estimator(kind, data, predictor_kind)
    except TwoPhaseError as exc:
        return {"status": type(exc).__name__, "message": str(exc)}, False
    entry = {"status": "ok", "converged": bool(est.converged),
             "theta": {k: float(v) for k, v in est.theta.as_dict().items()},
             "beta": float(est.beta), "se_beta_model": float(est.se_beta)}
    try:
        se = None
        if moments is not None:
            se = plugin_se(kind, est, data.cohort, moments, pi, data.plan)
        test = wald_test(est, se)
        entry["se_beta"] = float(est.se_beta if se is None else se)
        entry["wald"] = {"statistic": test.statistic, "p_value": test.p_value,
                         "reject_at_05": test.reject_at_05}
    except TwoPhaseError as exc:
        entry["wald"] = {"status": type(exc).__name__, "message": str(exc)}
        return entry, False
    return entry, True


def cmd_estimate(args):
    cohort = read_cohort(args.cohort)
    delta = read_delta(args.delta, cohort)
    x = read_x(args.x, cohort, delta)
    plan = read_plan(args.plan, cohort)
    moments = read_moments(args.moments) if args.moments else None
    kind = moments.kind if moments is not None else args.kind
    data = SecondPhaseData(cohort, delta, x, plan)
    pi = plan.pi if plan.pi is not None and np.all(np.isfinite(plan.pi)) else estimate_pi(cohort).pi
    names = args.estimator or ["all"]
    kinds = list(EstimatorKind) if "all" in names else [ESTIMATOR_NAMES[e] for e in names]

    report = {"n": cohort.n, "n_selected": int(delta.sum()), "predictor_kind": kind,
              "plan_scheme": plan.scheme.value, "estimators": {}}
    ok = True
    for k in kinds:
        entry, good = _estimate_report(k, data, kind, moments, pi)
        report["estimators"][k.value] = entry
        ok &= good
    if moments is not None:
        try:
            t = score_test(data, moments, pi)
            report["score"] = {"statistic": t.statistic, "p_value": t.p_value,
                               "reject_at_05": t.reject_at_05}
        except TwoPhaseError as exc:
            report["score"] = {"status": type(exc).__name__, "message": str(exc)}
            ok = False
    Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if not ok:
        failed = [k for k, v in report["estimators"].items() if v.get("status") != "ok"
                  or "status" in v.get("wald", {})]
        print(f"error: numeric failure in {', '.join(failed) or 'score test'}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_simulate(args):
    schemes = tuple(SCHEME_NAMES[s] for s in args.schemes) if args.schemes else None
    try:
        config = ScenarioConfig(
            setting=args.setting, n=args.n, N=args.N,
            beta_x=args.beta_x if args.beta_x is not None else (2.0 if args.setting == 1 else 1.0),
            event_rate=args.event_rate, beta_0=args.beta_0, n_runs=args.runs,
            base_seed=args.seed, moments=args.moments_source, pilot_size=args.pilot_size,
            **({"schemes": schemes} if schemes else {}))
        config.intercept
    except TwoPhaseError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    runs, table = run_mc(config, jobs=args.jobs, summary=args.summary)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.csv").write_text(table.to_csv())
    payload = json.loads(table.to_json())
    payload["config"] = config.as_dict()
    (out / "summary.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    (out / "runs.csv").write_text(runs_to_csv(runs))
    (out / "summary.txt").write_text(table.render())
    if not args.quiet:
        sys.stdout.write(table.render())
    return EXIT_OK


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


REQUIRED = {
    "design": ("cohort", "out"),
    "select": ("plan", "cohort", "out"),
    "estimate": ("cohort", "delta", "x", "plan", "out"),
    "simulate": ("out",),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="twophase", description="Optimal second-phase sampling for "
                     "two-phase case-control studies.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON file supplying option defaults")
        return p

    p = common(sub.add_parser("design", help="compute a sampling plan"))
    p.add_argument("cohort", nargs="?", help="cohort CSV (id,y,z1..zd)")
    p.add_argument("--moments", help="moment model JSON")
    p.add_argument("--fraction", type=float, default=None, help="expected fraction N/n")
    p.add_argument("--scheme", choices=sorted(SCHEME_NAMES), default="proposed")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_design)

    p = common(sub.add_parser("select", help="draw second-phase indicators"))
    p.add_argument("plan", nargs="?")
    p.add_argument("cohort", nargs="?")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_select)

    p = common(sub.add_parser("estimate", help="fit estimators and Wald/score tests"))
    for name in ("cohort", "delta", "x", "plan"):
        p.add_argument(name, nargs="?")
    p.add_argument("--estimator", action="append",
                   choices=sorted(ESTIMATOR_NAMES) + ["all"])
    p.add_argument("--moments", help="moment model JSON; enables the score test and "
                   "plug-in standard errors for the PCL estimators")
    p.add_argument("--kind", choices=PREDICTOR_KINDS, default=BINARY,
                   help="predictor type when no moment model is given")
    p.add_argument("--out")
    p.set_defaults(func=cmd_estimate)

    p = common(sub.add_parser("simulate", help="Monte Carlo replication"))
    p.add_argument("--setting", type=int, choices=(1, 2), default=1)
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--N", type=int, default=60)
    p.add_argument("--beta-x", type=float, default=None)
    p.add_argument("--event-rate", type=float, default=None)
    p.add_argument("--beta-0", type=float, default=None)
    p.add_argument("--runs", type=int, default=50)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--schemes", nargs="+", choices=sorted(SCHEME_NAMES))
    p.add_argument("--moments-source", choices=("oracle", "pilot"), default="oracle")
    p.add_argument("--pilot-size", type=int, default=400)
    p.add_argument("--summary", choices=("abs", "rmse"), default="abs")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)
    return parser


def _parse(parser, argv):
    args = parser.parse_args(argv)
    if args.command is None:
        parser.error("a subcommand is required")
    if args.config:
        try:
            config = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"{args.config}: invalid JSON ({exc.msg})") from None
        if not isinstance(config, dict):
            raise InputError(f"{args.config}: expected a JSON object")
        config = {k.replace("-", "_"): v for k, v in config.items()}
        unknown = set(config) - set(vars(args)) | (set(config) & {"config", "command", "func"})
        if unknown:
            raise InputError(f"{args.config}: unknown keys {sorted(unknown)}")
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        subparser.set_defaults(**config)
        args = parser.parse_args(argv)
    missing = [k for k in REQUIRED[args.command] if getattr(args, k) is None]
    if args.command == "design" and args.fraction is None:
        missing.append("fraction")
    if missing:
        parser.error(f"{args.command}: missing {', '.join(missing)}")
    return args


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _parse(parser, argv)
        return args.func(args)
    except SystemExit as exc:
        # argparse exits on --help and on usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TwoPhaseError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
