import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from gatedvol.cli import main
from gatedvol.data_pipeline import read_points
from gatedvol.evaluation import iv_mape
from gatedvol.surface_models import ModelDims, deserialize, serialize

FAST = ["--arch", "multi", "--I", "2", "--J", "3", "--K", "2", "--iters", "40", "--log-every", "10"]


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def manifest(out_dir, command):
    return json.loads((out_dir / f"manifest_{command}.json").read_text())


@pytest.fixture(scope="module")
def day(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--seed", "7", "--quotes", "300", "--out-dir", str(out), "--out", str(out / "day.csv")]) == 0
    return out / "day.csv"


@pytest.fixture(scope="module")
def fitted(day, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    assert main(["fit", str(day), "--seed", "1", "--out-dir", str(out), *FAST]) == 0
    return out


def model_file(out):
    (path,) = sorted(out.glob("model_*_multi.json"))
    return path


class TestSimulate:
    def test_outputs(self, day):
        assert day.exists() and (day.parent / "day_truth.csv").exists()
        lines = day.read_text().splitlines()
        assert lines[0] == "trade_date,expiry_date,strike,bid,ask,type,rate,spot"
        assert len(lines) == 301
        m = manifest(day.parent, "simulate")
        assert m["status"] == "ok" and m["seeds"]["seed"] == 7
        assert {o["sha256"] for o in m["outputs"]} == {sha(day), sha(day.parent / "day_truth.csv")}

    def test_rerun_identical(self, day, tmp_path):
        assert main(["simulate", "--seed", "7", "--quotes", "300", "--out-dir", str(tmp_path), "--out", str(tmp_path / "day.csv")]) == 0
        assert (tmp_path / "day.csv").read_bytes() == day.read_bytes()
        assert (tmp_path / "day_truth.csv").read_bytes() == (day.parent / "day_truth.csv").read_bytes()

    def test_negative_count(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            main(["simulate", "--quotes", "-5", "--out-dir", str(tmp_path)])
        assert info.value.code == 1

    def test_several_days(self, tmp_path):
        assert main(["simulate", "--quotes", "60", "--days", "3", "--out-dir", str(tmp_path)]) == 0
        dates = {row["trade_date"] for row in csv.DictReader((tmp_path / "quotes.csv").open())}
        assert len(dates) == 3


class TestFit:
    def test_outputs(self, fitted):
        model = deserialize(model_file(fitted).read_text())
        assert model.arch == "multi" and model.dims == ModelDims(2, 3, 2)
        meta = json.loads(model_file(fitted).read_text())["training_meta"]
        assert meta["seed"] == 1
        tag = model_file(fitted).stem[len("model_"):]
        for prefix in ("train_", "test_", "trace_"):
            assert (fitted / f"{prefix}{tag}.csv").exists()
        assert (fitted / "rejections.csv").exists()
        m = manifest(fitted, "fit")
        assert m["status"] == "ok" and m["config"]["hyperparameters"]["n_iterations"] == 40

    def test_deterministic(self, day, fitted, tmp_path):
        assert main(["fit", str(day), "--seed", "1", "--out-dir", str(tmp_path), *FAST]) == 0
        for name in ("model_", "trace_", "train_", "test_"):
            (a,) = sorted(fitted.glob(name + "*"))
            assert (tmp_path / a.name).read_bytes() == a.read_bytes(), name

    def test_incomplete_flag(self, day, tmp_path):
        assert main(["fit", str(day), "--out-dir", str(tmp_path), "--incomplete-constraints", *FAST]) == 0
        hp = manifest(tmp_path, "fit")["config"]["hyperparameters"]
        assert (hp["gamma"], hp["delta"], hp["eta"], hp["rho"]) == (0, 0, 0, 0)

    def test_config_file_and_flag_precedence(self, day, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"omega": 0.5, "gamma": 3.0}))
        assert main(["fit", str(day), "--out-dir", str(tmp_path), "--config", str(cfg), "--gamma", "4", *FAST]) == 0
        hp = manifest(tmp_path, "fit")["config"]["hyperparameters"]
        assert hp["omega"] == 0.5 and hp["gamma"] == 4.0

    def test_ssvi_arch(self, day, tmp_path):
        assert main(["fit", str(day), "--arch", "ssvi", "--out-dir", str(tmp_path)]) == 0
        (path,) = tmp_path.glob("model_*_ssvi.json")
        assert deserialize(path.read_text()).arch == "ssvi"

    def test_missing_file(self, tmp_path):
        assert main(["fit", str(tmp_path / "nope.csv"), "--out-dir", str(tmp_path)]) == 2
        assert manifest(tmp_path, "fit")["status"] == "io_error"

    def test_too_few_quotes(self, tmp_path):
        assert main(["simulate", "--quotes", "20", "--out-dir", str(tmp_path)]) == 0
        assert main(["fit", str(tmp_path / "quotes.csv"), "--out-dir", str(tmp_path), *FAST]) == 2

    def test_divergence_exit(self, day, tmp_path):
        code = main(["fit", str(day), "--out-dir", str(tmp_path), "--lr", "1e6", "--lr-decay", "0", *FAST])
        assert code == 3


class TestPredictEvaluate:
    def test_predict_points(self, fitted, tmp_path):
        (test_file,) = fitted.glob("test_*.csv")
        out = tmp_path / "pred.csv"
        assert main(["predict", "--model", str(model_file(fitted)), "--points", str(test_file), "--out", str(out), "--out-dir", str(tmp_path)]) == 0
        rows = list(csv.reader(out.open()))[1:]
        model = deserialize(model_file(fitted).read_text())
        pts = read_points(test_file)
        assert len(rows) == len(pts)
        for row, p in zip(rows, pts):
            assert float(row[2]) == model.value(p.m, p.tau)

    def test_predict_grid(self, fitted, tmp_path):
        out = tmp_path / "grid.csv"
        assert main(["predict", "--model", str(model_file(fitted)), "--grid", "-1", "1", "0.1", "1", "--n-m", "5", "--n-tau", "4", "--out", str(out), "--out-dir", str(tmp_path)]) == 0
        assert len(out.read_text().splitlines()) == 21

    def test_evaluate_from_points(self, fitted, tmp_path):
        (train,) = fitted.glob("train_*.csv")
        (test,) = fitted.glob("test_*.csv")
        args = ["evaluate", "--model", str(model_file(fitted)), "--train", str(train), "--test", str(test),
                "--audit-points", "500", "--out-dir", str(tmp_path)]
        assert main(args) == 0
        rep = json.loads((tmp_path / "eval_report.json").read_text())
        model = deserialize(model_file(fitted).read_text())
        assert rep["iv_mape_train"] == pytest.approx(iv_mape(model, read_points(train)), rel=1e-12)
        assert rep["violation"]["conditions"][0]["n_checked"] == 500

    def test_evaluate_from_quotes_matches_split(self, day, fitted, tmp_path):
        args = ["evaluate", "--model-dir", str(fitted), "--arch", "multi", "--quotes", str(day),
                "--seed", "1", "--audit-points", "200", "--out-dir", str(tmp_path)]
        assert main(args) == 0
        rep = json.loads((tmp_path / "eval_report.json").read_text())
        (train,) = fitted.glob("train_*.csv")
        model = deserialize(model_file(fitted).read_text())
        assert rep["iv_mape_train"] == pytest.approx(iv_mape(model, read_points(train)), rel=1e-12)
        assert (tmp_path / "eval_days.csv").exists()

    def test_evaluate_usage(self, fitted, tmp_path):
        assert main(["evaluate", "--model", str(model_file(fitted)), "--out-dir", str(tmp_path)]) == 1


class TestCheckDensity:
    @pytest.fixture
    def constant_model(self, tmp_path):
        z = np.zeros(2)
        from gatedvol.surface_models import SingleModelParams

        path = tmp_path / "flat.json"
        path.write_text(serialize(SingleModelParams(z, z, z, z, z - 40, np.log(0.2))))
        return path

    def test_check_constant(self, constant_model, tmp_path):
        assert main(["check-arbitrage", "--model", str(constant_model), "--points", "2000", "--out-dir", str(tmp_path)]) == 0
        doc = json.loads((tmp_path / "violations.json").read_text())
        counts = {c["name"]: c["n_violated"] for c in doc["conditions"]}
        for name in ("monotonicity", "butterfly", "right_boundary", "left_boundary"):
            assert counts[name] == 0
        assert doc["limit_dplus"]["passed"]

    def test_density(self, constant_model, tmp_path):
        assert main(["density", "--model", str(constant_model), "--tau", "0.5", "1", "--out-dir", str(tmp_path)]) == 0
        assert (tmp_path / "density_tau0.5.csv").exists() and (tmp_path / "density_tau1.csv").exists()

    def test_density_coarse(self, constant_model, tmp_path):
        assert main(["density", "--model", str(constant_model), "--tau", "1", "--n", "101", "--out-dir", str(tmp_path)]) == 2
        assert manifest(tmp_path, "density")["status"] == "data_error"

    def test_bad_model_file(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["density", "--model", str(bad), "--tau", "1", "--out-dir", str(tmp_path)]) == 2


def test_console_script(tmp_path):
    done = subprocess.run([sys.executable, "-m", "gatedvol", "simulate", "--quotes", "16", "--out-dir", str(tmp_path)],
                          capture_output=True, text=True)
    assert done.returncode == 0, done.stderr
    done = subprocess.run([sys.executable, "-m", "gatedvol", "fit"], capture_output=True, text=True)
    assert done.returncode == 1
