import json
import math

import numpy as np
import pytest

from cppi.cli import main
from cppi.simkit import StreamConfig, gen_poisoned_stream

BINARY_SCHEMA = {"label": {"kind": "categorical", "alphabet": [0, 1]}}
REAL_SCHEMA = {"label": {"kind": "real", "range": [-10.0, 10.0]}}


def write(path, text):
    path.write_text(text)
    return str(path)


@pytest.fixture
def binary_fixture(tmp_path):
    schema = write(tmp_path / "schema.json", json.dumps(BINARY_SCHEMA))
    data = write(tmp_path / "calib.csv",
                 "x0,y\n0.0,1\n1.0,1\n2.0,0\n3.0,0\n")
    preds = write(tmp_path / "calib_preds.csv",
                  "p0,p1\n0.1,0.9\n0.2,0.8\n0.6,0.4\n0.7,0.3\n")
    return schema, data, preds


class TestCalibrate:
    def test_split_threshold_matches_hand_computation(self, binary_fixture, tmp_path, capsys):
        schema, data, preds = binary_fixture
        out = str(tmp_path / "pred.json")
        code = main(["calibrate", "--data", data, "--schema", schema,
                     "--predictions", preds, "--target-err", "0.4", "--out", out])
        assert code == 0
        record = json.loads((tmp_path / "pred.json").read_text())
        # scores -p(y|x): [-0.9, -0.8, -0.6, -0.7]; 3rd smallest of 5 with +inf
        assert record["threshold"] == -0.7
        assert record["backend"] == "split"
        assert record["declared_err"] == 0.4
        assert record["n_calib"] == 4
        report = json.loads(capsys.readouterr().out)
        assert report["threshold"] == -0.7

    def test_dp_backend_records_epsilon_and_inflation(self, binary_fixture, tmp_path):
        schema, data, preds = binary_fixture
        out = str(tmp_path / "pred.json")
        code = main(["calibrate", "--data", data, "--schema", schema,
                     "--predictions", preds, "--target-err", "0.4",
                     "--backend", "dp", "--dp-epsilon", "2.0",
                     "--seed", "5", "--out", out])
        assert code == 0
        record = json.loads((tmp_path / "pred.json").read_text())
        assert record["privacy_epsilon"] == 2.0
        assert record["declared_err"] > 0.4

    def test_dp_requires_epsilon(self, binary_fixture, tmp_path, capsys):
        schema, data, preds = binary_fixture
        code = main(["calibrate", "--data", data, "--schema", schema,
                     "--predictions", preds, "--target-err", "0.4",
                     "--backend", "dp", "--out", str(tmp_path / "p.json")])
        assert code == 2
        assert "--dp-epsilon" in capsys.readouterr().err

    def test_missing_predictions_file_names_path(self, binary_fixture, tmp_path, capsys):
        schema, data, _ = binary_fixture
        missing = str(tmp_path / "nope.csv")
        code = main(["calibrate", "--data", data, "--schema", schema,
                     "--predictions", missing, "--target-err", "0.4",
                     "--out", str(tmp_path / "p.json")])
        assert code == 2
        assert missing in capsys.readouterr().err

    def test_row_count_mismatch(self, binary_fixture, tmp_path, capsys):
        schema, data, _ = binary_fixture
        preds = write(tmp_path / "short.csv", "p0,p1\n0.5,0.5\n")
        code = main(["calibrate", "--data", data, "--schema", schema,
                     "--predictions", preds, "--target-err", "0.4",
                     "--out", str(tmp_path / "p.json")])
        assert code == 2
        assert "prediction rows" in capsys.readouterr().err


@pytest.fixture
def inference_fixture(tmp_path, binary_fixture):
    schema, data, preds = binary_fixture
    predictor = str(tmp_path / "pred.json")
    main(["calibrate", "--data", data, "--schema", schema, "--predictions", preds,
          "--target-err", "0.4", "--out", predictor])
    rng = np.random.default_rng(8)
    p1 = rng.uniform(0.05, 0.95, size=40)
    test_data = write(tmp_path / "test.csv",
                      "x0,y\n" + "".join(f"{i}.0,\n" for i in range(40)))
    test_preds = write(tmp_path / "test_preds.csv",
                       "p0,p1\n" + "".join(f"{1-p:.6f},{p:.6f}\n" for p in p1))
    return predictor, test_data, test_preds, p1


class TestInfer:
    def test_mean_matches_library_call(self, inference_fixture, tmp_path, capsys):
        predictor, test_data, test_preds, p1 = inference_fixture
        code = main(["infer", "--predictor", predictor, "--data", test_data,
                     "--predictions", test_preds, "--estimand", "mean",
                     "--alpha", "0.1", "--method", "clt"])
        assert code == 0
        out = json.loads(capsys.readouterr().out)

        from cppi.conformal import CalibratedPredictor, negative_probability_score
        from cppi.datamodel import LabelSchema, identity_functional
        from cppi.mean import ppi_mean_ci
        schema = LabelSchema(kind="categorical", alphabet=(0, 1))
        table = np.column_stack([1 - np.round(p1, 6), np.round(p1, 6)])
        pred = CalibratedPredictor(
            score=negative_probability_score(
                lambda X: table[np.asarray(X)[:, 0].astype(int)]),
            threshold=-0.7, err=0.4, backend="split", schema=schema)
        expected = ppi_mean_ci(identity_functional(0.0, 1.0), pred,
                               np.arange(40.0)[:, None], 0.1, "clt")
        assert out["interval"] == pytest.approx(list(expected.interval))
        total = sum(out["decomposition"].values())
        width = out["raw_interval"][1] - out["raw_interval"][0]
        assert total == pytest.approx(width, abs=1e-12)

    def test_quantile_emits_hull_and_mask(self, tmp_path, capsys):
        schema = write(tmp_path / "schema.json", json.dumps(REAL_SCHEMA))
        n = 60
        rng = np.random.default_rng(3)
        f = rng.normal(0.0, 1.0, size=n)
        y = f + rng.normal(0.0, 0.25, size=n)
        calib = write(tmp_path / "calib.csv",
                      "x0,y\n" + "".join(f"{i}.0,{float(y[i])!r}\n" for i in range(n)))
        calib_preds = write(tmp_path / "calib_preds.csv",
                            "f\n" + "".join(f"{float(v)!r}\n" for v in f))
        predictor = str(tmp_path / "pred.json")
        assert main(["calibrate", "--data", calib, "--schema", schema,
                     "--predictions", calib_preds, "--target-err", "0.1",
                     "--out", predictor]) == 0
        capsys.readouterr()
        test_data = write(tmp_path / "t.csv",
                          "x0,y\n" + "".join(f"{i}.0,\n" for i in range(n)))
        code = main(["infer", "--predictor", predictor, "--data", test_data,
                     "--predictions", calib_preds, "--estimand", "quantile",
                     "--q", "0.5", "--grid=-3:3:201", "--alpha", "0.1"])
        assert code == 0
        out = json.loads(capsys.readouterr().out)
        assert out["grid"] == {"lo": -3.0, "hi": 3.0, "n": 201}
        assert isinstance(out["accepted_mask"], list)
        assert out["hull"] is None or len(out["hull"]) == 2

    def test_quantile_requires_q(self, inference_fixture, tmp_path, capsys):
        predictor, test_data, test_preds, _ = inference_fixture
        code = main(["infer", "--predictor", predictor, "--data", test_data,
                     "--predictions", test_preds, "--estimand", "quantile",
                     "--grid=-1:1:11"])
        assert code == 2
        assert "--q" in capsys.readouterr().err

    def test_alpha_out_of_range_is_usage_error(self, inference_fixture):
        predictor, test_data, test_preds, _ = inference_fixture
        with pytest.raises(SystemExit) as exc:
            main(["infer", "--predictor", predictor, "--data", test_data,
                  "--predictions", test_preds, "--alpha", "1.5"])
        assert exc.value.code == 2

    def test_missing_predictor_file(self, inference_fixture, tmp_path, capsys):
        _, test_data, test_preds, _ = inference_fixture
        code = main(["infer", "--predictor", str(tmp_path / "ghost.json"),
                     "--data", test_data, "--predictions", test_preds])
        assert code == 2
        assert "ghost.json" in capsys.readouterr().err


def write_stream(path, steps):
    lines = []
    for i, s in enumerate(steps):
        lines.append(json.dumps({"x": [s.x[0]], "y": s.miss, "t": i}))
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return str(path)


def run_monitor(tmp_path, stream_path, out_name="mon.ndjson", extra=()):
    out = str(tmp_path / out_name)
    code = main(["monitor", "--stream", stream_path, "--val-risk", "0.1",
                 "--eps-tol", "0.02", "--gamma", "0.01", "--step-size", "0.05",
                 "--alpha", "0.05", "--out", out, *extra])
    return code, out


class TestMonitor:
    def test_null_streams_exit_zero(self, tmp_path, capsys):
        codes = []
        for seed in range(20):
            cfg = StreamConfig(horizon=3000, seed=seed, poisoned=False)
            path = write_stream(tmp_path / f"null{seed}.ndjson", gen_poisoned_stream(cfg))
            code, out = run_monitor(tmp_path, path, f"out{seed}.ndjson")
            codes.append(code)
        assert sum(c == 0 for c in codes) >= 19

    def test_output_lines_parse(self, tmp_path, capsys):
        cfg = StreamConfig(horizon=200, seed=0, poisoned=False)
        path = write_stream(tmp_path / "s.ndjson", gen_poisoned_stream(cfg))
        code, out = run_monitor(tmp_path, path)
        assert code == 0
        lines = [json.loads(l) for l in open(out)]
        assert len(lines) == 200
        assert set(lines[0]) == {"step", "wealth_log10", "eta", "rejected"}
        assert lines[0]["step"] == 1 and lines[-1]["step"] == 200

    def test_poisoned_streams_reject_after_change_point(self, tmp_path, capsys):
        # linear-ramp fixture: strong poisoning right after the change point
        results = []
        for seed in range(30):
            cfg = StreamConfig(horizon=5000, seed=seed, poisoned=True,
                               schedule_exponent=1.0)
            path = write_stream(tmp_path / f"p{seed}.ndjson", gen_poisoned_stream(cfg))
            code, out = run_monitor(tmp_path, path, f"po{seed}.ndjson")
            err = capsys.readouterr().err
            first = None
            if code == 3:
                first = int(err.strip().split("rejected at step ")[1].split(" ")[0])
            results.append((code, first))
        rejected_after_cp = sum(c == 3 and f > 1000 for c, f in results)
        assert rejected_after_cp == 30

    def test_empty_stream(self, tmp_path, capsys):
        path = write(tmp_path / "empty.ndjson", "")
        code, out = run_monitor(tmp_path, path)
        assert code == 0
        assert "0 steps" in capsys.readouterr().err
        assert open(out).read() == ""

    def test_few_malformed_records_are_skipped(self, tmp_path, capsys):
        cfg = StreamConfig(horizon=300, seed=1, poisoned=False)
        lines = [json.dumps({"x": [s.x[0]], "y": s.miss, "t": i})
                 for i, s in enumerate(gen_poisoned_stream(cfg))]
        lines.insert(5, "{not json")
        path = write(tmp_path / "m.ndjson", "\n".join(lines) + "\n")
        code, out = run_monitor(tmp_path, path)
        assert code == 0
        captured = capsys.readouterr()
        assert "skipping malformed" in captured.err
        assert len([l for l in open(out)]) == 300

    def test_too_many_malformed_records_fail(self, tmp_path, capsys):
        lines = ["{not json"] * 10 + [json.dumps({"x": [0.1], "y": None, "t": 0})]
        path = write(tmp_path / "bad.ndjson", "\n".join(lines) + "\n")
        code, _ = run_monitor(tmp_path, path)
        assert code == 2
        assert "malformed" in capsys.readouterr().err

    def test_missing_stream_file(self, tmp_path, capsys):
        code = main(["monitor", "--stream", str(tmp_path / "none.ndjson"),
                     "--val-risk", "0.1"])
        assert code == 2


class TestSimulate:
    def _spec(self, tmp_path, **overrides):
        spec = {
            "task": {"kind": "bernoulli_mean", "p": 0.3, "n": 500,
                     "target_err": 0.05, "singleton_rate": 0.9},
            "method": {"kind": "ppi_mean", "method": "clt"},
            "trials": 100,
            "alpha": 0.1,
        }
        spec.update(overrides)
        return write(tmp_path / "spec.json", json.dumps(spec))

    def test_deterministic_per_seed(self, tmp_path, capsys):
        spec = self._spec(tmp_path)
        assert main(["simulate", "--spec", spec, "--seed", "3"]) == 0
        first = capsys.readouterr().out
        assert main(["simulate", "--spec", spec, "--seed", "3"]) == 0
        second = capsys.readouterr().out
        assert first == second
        report = json.loads(first)
        assert report["trials"] == 100
        assert 0.0 <= report["empirical_coverage"] <= 1.0
        assert report["task"]["kind"] == "bernoulli_mean"

    def test_report_written_to_file(self, tmp_path, capsys):
        spec = self._spec(tmp_path)
        out = str(tmp_path / "report.json")
        assert main(["simulate", "--spec", spec, "--seed", "1", "--out", out]) == 0
        report = json.loads(open(out).read())
        assert report["seed"] == 1

    def test_bad_spec_missing_key(self, tmp_path, capsys):
        spec = write(tmp_path / "s.json", json.dumps({"task": {}}))
        assert main(["simulate", "--spec", spec]) == 2
        assert "missing key" in capsys.readouterr().err

    def test_bad_task_kind(self, tmp_path, capsys):
        spec = self._spec(tmp_path, task={"kind": "mystery"})
        assert main(["simulate", "--spec", spec]) == 2

    def test_missing_spec_file(self, tmp_path, capsys):
        assert main(["simulate", "--spec", str(tmp_path / "ghost.json")]) == 2
