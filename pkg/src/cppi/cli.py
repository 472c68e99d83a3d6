"""Command-line entry point: calibrate, infer, monitor, simulate.

Models are decoupled through predictions files: a CSV aligned row-by-row with
the data CSV, holding per-label probabilities (classification, columns
``p0..p{k-1}``) or point predictions (regression, column ``f``). Commands are
deterministic given their inputs and ``--seed``, and reports echo every
effective setting.

Exit codes: 0 success (monitor: no rejection), 2 usage or input error,
3 monitored rejection.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys

import numpy as np

from .conformal import (
    CalibratedPredictor,
    OnlineCalibratorState,
    absolute_residual_score,
    calibration_report,
    dp_calibrate,
    negative_probability_score,
    split_calibrate,
)
from .datamodel import Dataset, LabelSchema, identity_functional, BoundedFunctional
from .evalues import run_risk_monitor
from .mean import ppi_mean_ci
from .simkit import coverage_study
from .zm import ThetaGrid, m_confidence_set, mean_psi, quantile_psi, squared_loss_derivative, z_confidence_set


class InputError(Exception):
    """User-facing input problem; reported on stderr with exit code 2."""


def _load_schema(path: str) -> LabelSchema:
    try:
        with open(path) as fh:
            return LabelSchema.from_json_dict(json.load(fh))
    except FileNotFoundError:
        raise InputError(f"schema file not found: {path}") from None
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise InputError(f"{path}: bad schema ({exc})") from None


def _load_dataset(path: str, schema: LabelSchema) -> Dataset:
    try:
        return Dataset.from_csv(path, schema)
    except FileNotFoundError:
        raise InputError(f"data file not found: {path}") from None
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _load_predictions(path: str, schema: LabelSchema, n_rows: int) -> np.ndarray:
    """Predictions table: (n, k) probabilities or (n,) point values."""
    try:
        fh = open(path, newline="")
    except FileNotFoundError:
        raise InputError(f"predictions file not found: {path}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty predictions file") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise InputError(f"{path}: row {lineno}: non-numeric prediction") from None
    table = np.asarray(rows, dtype=float)
    if table.shape[0] != n_rows:
        raise InputError(
            f"{path}: {table.shape[0]} prediction rows for {n_rows} data rows")
    if schema.is_categorical:
        k = len(schema.alphabet)
        if header != [f"p{j}" for j in range(k)]:
            raise InputError(f"{path}: classification predictions need columns p0..p{k - 1}")
        sums = table.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-6)
        if bad.size:
            raise InputError(
                f"{path}: row {bad[0] + 2}: probabilities sum to {sums[bad[0]]:.8f}")
        return table
    if header != ["f"]:
        raise InputError(f"{path}: regression predictions need a single column 'f'")
    return table[:, 0]


def _indexed_score(schema: LabelSchema, table: np.ndarray):
    """Conformity score whose model looks up predictions by row index."""
    if schema.is_categorical:
        return negative_probability_score(
            lambda X: table[np.asarray(X, dtype=float)[:, 0].astype(int)])
    return absolute_residual_score(
        lambda X: table[np.asarray(X, dtype=float)[:, 0].astype(int)])


def _index_features(n: int) -> np.ndarray:
    return np.arange(n, dtype=float)[:, None]


def cmd_calibrate(args: argparse.Namespace) -> int:
    schema = _load_schema(args.schema)
    data = _load_dataset(args.data, schema)
    table = _load_predictions(args.predictions, schema, data.n)
    score = _indexed_score(schema, table)
    indexed = Dataset(_index_features(data.n), data.labels, schema)
    if indexed.n_labelled == 0:
        raise InputError(f"{args.data}: no labelled rows to calibrate on")
    online = None
    if args.backend == "split":
        pred = split_calibrate(score, indexed, args.target_err)
    elif args.backend == "dp":
        if args.dp_epsilon is None:
            raise InputError("--backend dp requires --dp-epsilon")
        rng = np.random.default_rng(args.seed)
        pred = dp_calibrate(score, indexed, args.target_err, args.dp_epsilon, rng)
    else:  # online: split-initialized threshold, declared err = tracking target
        base = split_calibrate(score, indexed, args.target_err)
        pred = CalibratedPredictor(score=score, threshold=base.threshold,
                                   err=args.gamma, backend="online", schema=schema,
                                   n_calib=base.n_calib)
        online = {"gamma": args.gamma, "step_size": args.step_size}
    record = {
        "backend": pred.backend,
        "score": pred.score.name,
        "threshold": pred.threshold,
        "declared_err": pred.err,
        "target_err": args.target_err,
        "n_calib": pred.n_calib,
        "schema": schema.to_json_dict(),
        "predictions": args.predictions,
    }
    if pred.privacy_epsilon is not None:
        record["privacy_epsilon"] = pred.privacy_epsilon
    if online is not None:
        record["online"] = online
    with open(args.out, "w") as fh:
        json.dump(record, fh, indent=2)
        fh.write("\n")
    print(json.dumps(calibration_report(pred)))
    return 0


def _load_predictor(path: str):
    try:
        with open(path) as fh:
            record = json.load(fh)
    except FileNotFoundError:
        raise InputError(f"predictor file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: bad predictor JSON ({exc})") from None
    try:
        schema = LabelSchema.from_json_dict(record["schema"])
        threshold = float(record["threshold"]) if record["threshold"] is not None else math.inf
        err = float(record["declared_err"])
        backend = record["backend"]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: incomplete predictor record ({exc})") from None
    return record, schema, threshold, err, backend


def _identity_phi(schema: LabelSchema) -> BoundedFunctional:
    if schema.is_categorical:
        return identity_functional(float(schema.alphabet[0]), float(schema.alphabet[-1]))
    return identity_functional(schema.lo, schema.hi)


def _parse_grid(text: str) -> ThetaGrid:
    try:
        lo, hi, count = text.split(":")
        return ThetaGrid(float(lo), float(hi), int(count))
    except ValueError as exc:
        raise InputError(f"bad --grid {text!r}: expected lo:hi:n ({exc})") from None


def cmd_infer(args: argparse.Namespace) -> int:
    record, schema, threshold, err, backend = _load_predictor(args.predictor)
    data = _load_dataset(args.data, schema)
    table = _load_predictions(args.predictions, schema, data.n)
    score = _indexed_score(schema, table)
    pred = CalibratedPredictor(
        score=score, threshold=threshold, err=err,
        backend="split" if backend == "online" else backend, schema=schema,
        n_calib=record.get("n_calib"),
        privacy_epsilon=record.get("privacy_epsilon"),
    )
    mask = ~data.labelled_mask
    features = _index_features(data.n)[mask] if mask.any() else _index_features(data.n)
    out: dict = {"estimand": args.estimand, "alpha": args.alpha, "method": args.method}
    if args.estimand == "mean":
        result = ppi_mean_ci(_identity_phi(schema), pred, features, args.alpha, args.method)
        out.update(result.to_record())
    else:
        if args.estimand == "quantile":
            if args.q is None:
                raise InputError("--estimand quantile requires --q")
            psi = quantile_psi(args.q)
            runner = z_confidence_set
        elif args.estimand == "zset":
            psi = mean_psi(_identity_phi(schema))
            runner = z_confidence_set
        elif args.estimand == "mset":
            psi = squared_loss_derivative(_identity_phi(schema))
            runner = m_confidence_set
        else:
            raise InputError(f"unknown estimand: {args.estimand!r}")
        if args.grid is None:
            raise InputError(f"--estimand {args.estimand} requires --grid lo:hi:n")
        grid = _parse_grid(args.grid)
        result = runner(psi, grid, pred, features, args.alpha, args.method)
        out.update(result.to_record())
    text = json.dumps(out, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def _iter_stream_records(lines, counts: dict):
    for line in lines:
        line = line.strip()
        if not line:
            continue
        counts["total"] += 1
        try:
            obj = json.loads(line)
            x = obj["x"]
            rho = float(x[0])
            y = obj.get("y")
            miss = None if y is None else int(y)
            if not (0.0 <= rho <= 1.0) or miss not in (None, 0, 1):
                raise ValueError("out of range")
        except (ValueError, KeyError, TypeError, IndexError):
            counts["malformed"] += 1
            print(f"warning: skipping malformed record: {line[:80]}", file=sys.stderr)
            continue
        yield rho, miss


def cmd_monitor(args: argparse.Namespace) -> int:
    if args.stream == "-":
        lines = sys.stdin
        close_in = None
    else:
        try:
            close_in = open(args.stream)
        except FileNotFoundError:
            raise InputError(f"stream file not found: {args.stream}") from None
        lines = close_in
    sink = open(args.out, "w") if args.out else sys.stdout

    def on_step(step, state, rejected):
        sink.write(json.dumps({
            "step": step,
            "wealth_log10": state.wealth_log10,
            "eta": state.last_eta,
            "rejected": rejected,
        }) + "\n")

    counts = {"total": 0, "malformed": 0}
    try:
        result = run_risk_monitor(
            _iter_stream_records(lines, counts),
            val_risk=args.val_risk, eps_tol=args.eps_tol, gamma=args.gamma,
            step_size=args.step_size, alpha=args.alpha,
            init_threshold=args.init_threshold, on_step=on_step,
        )
    finally:
        if close_in is not None:
            close_in.close()
        if args.out:
            sink.close()
    if counts["total"] > 0 and counts["malformed"] > 0.01 * counts["total"]:
        raise InputError(
            f"{counts['malformed']} of {counts['total']} records malformed (> 1%)")
    if result.rejected:
        print(f"rejected at step {result.first_rejection} of {result.steps}",
              file=sys.stderr)
        return 3
    print(f"no rejection in {result.steps} steps", file=sys.stderr)
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    try:
        with open(args.spec) as fh:
            spec = json.load(fh)
    except FileNotFoundError:
        raise InputError(f"study spec not found: {args.spec}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{args.spec}: bad JSON ({exc})") from None
    for key in ("task", "method", "trials", "alpha"):
        if key not in spec:
            raise InputError(f"{args.spec}: missing key {key!r}")
    seed = args.seed if args.seed is not None else spec.get("seed", 0)
    try:
        report = coverage_study(spec["task"], spec["method"], int(spec["trials"]),
                                float(spec["alpha"]), int(seed))
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{args.spec}: bad study spec ({exc})") from None
    text = json.dumps(report, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def _alpha_arg(text: str) -> float:
    value = float(text)
    if not (0.0 < value < 1.0):
        raise argparse.ArgumentTypeError(f"alpha must lie in (0, 1), got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cppi",
        description="Set-predictor calibration and prediction-powered inference",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    cal = sub.add_parser("calibrate", help="fit a set-predictor threshold")
    cal.add_argument("--data", required=True)
    cal.add_argument("--schema", required=True)
    cal.add_argument("--predictions", required=True)
    cal.add_argument("--target-err", type=_alpha_arg, required=True, dest="target_err")
    cal.add_argument("--backend", choices=["split", "dp", "online"], default="split")
    cal.add_argument("--dp-epsilon", type=float, default=None, dest="dp_epsilon")
    cal.add_argument("--gamma", type=_alpha_arg, default=0.1,
                     help="online tracking target miscoverage")
    cal.add_argument("--step-size", type=float, default=1.0, dest="step_size")
    cal.add_argument("--seed", type=int, default=0)
    cal.add_argument("--out", required=True)
    cal.set_defaults(fn=cmd_calibrate)

    inf = sub.add_parser("infer", help="prediction-powered inference over files")
    inf.add_argument("--predictor", required=True)
    inf.add_argument("--data", required=True)
    inf.add_argument("--predictions", required=True)
    inf.add_argument("--estimand", choices=["mean", "quantile", "zset", "mset"],
                     default="mean")
    inf.add_argument("--alpha", type=_alpha_arg, default=0.1)
    inf.add_argument("--method", choices=["clt", "hoeffding"], default="clt")
    inf.add_argument("--q", type=float, default=None)
    inf.add_argument("--grid", default=None, help="theta grid as lo:hi:n")
    inf.add_argument("--out", default=None)
    inf.set_defaults(fn=cmd_infer)

    mon = sub.add_parser("monitor", help="anytime-valid risk monitoring over a stream")
    mon.add_argument("--stream", required=True, help="NDJSON file or - for stdin")
    mon.add_argument("--val-risk", type=float, required=True, dest="val_risk")
    mon.add_argument("--eps-tol", type=float, default=0.05, dest="eps_tol")
    mon.add_argument("--gamma", type=_alpha_arg, default=0.01,
                     help="online conformal miscoverage target")
    mon.add_argument("--step-size", type=float, default=0.05, dest="step_size")
    mon.add_argument("--alpha", type=_alpha_arg, default=0.05)
    mon.add_argument("--init-threshold", type=float, default=-0.5,
                     dest="init_threshold")
    mon.add_argument("--out", default=None, help="per-step NDJSON output path")
    mon.set_defaults(fn=cmd_monitor)

    sim = sub.add_parser("simulate", help="run a Monte Carlo coverage study")
    sim.add_argument("--spec", required=True)
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--out", default=None)
    sim.set_defaults(fn=cmd_simulate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
