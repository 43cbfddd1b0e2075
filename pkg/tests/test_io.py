import json

import numpy as np
import pytest

from rfcal import bench
from rfcal import calibrate as cal
from rfcal import forest as rf
from rfcal import io as rio
from rfcal import synthgen as sg
from rfcal.dataset import Dataset, InvalidInputError


def write(path, text):
    path.write_text(text)
    return path


@pytest.fixture(scope="module")
def fitted():
    data = sg.sample_two_gaussians(d=2, n=200, seed=3)
    calib = sg.sample_two_gaussians(d=2, n=100, seed=4)
    forest = rf.train_forest(data, rf.ForestConfig(n_trees=6, seed=2))
    rank = cal.train_rank_forest(data, forest.config, base_forest=forest)
    models = {m: cal.fit_calibrator(m, forest, calib.features, calib.labels, rank_forest=rank)
              for m in cal.METHODS}
    return data, calib, forest, models


class TestDatasetCSV:
    def test_tiny_golden(self, data_dir):
        d = rio.load_csv(data_dir / "golden" / "tiny.csv")
        np.testing.assert_array_equal(d.features, [[0.5, 1.0], [-1.25, 2.0], [3.0, 0.0]])
        np.testing.assert_array_equal(d.labels, [0, 1, 1])
        assert d.n_classes == 2 and d.true_posteriors is None
        assert rio.feature_names(data_dir / "golden" / "tiny.csv") == ["a", "b"]

    def test_round_trip_exact(self, tmp_path):
        d = sg.sample_two_gaussians(d=3, n=50, seed=0)
        rio.save_csv(d, tmp_path / "d.csv")
        back = rio.load_csv(tmp_path / "d.csv")
        np.testing.assert_array_equal(back.features, d.features)
        np.testing.assert_array_equal(back.labels, d.labels)
        np.testing.assert_array_equal(back.true_posteriors, d.true_posteriors)
        assert rio.data_digest(back) == rio.data_digest(d)

    def test_diabetes(self, data_dir):
        d = rio.load_csv(data_dir / "diabetes.csv")
        assert d.features.shape == (768, 8)
        assert np.bincount(d.labels).tolist() == [500, 268]

    @pytest.mark.parametrize("text, fragment", [
        ("1,2,3\n4,5,6\n", "header"),
        ("a,a,label\n1,2,0\n", "duplicate"),
        ("a,b,label\n1,2,0\n1,2\n", "line 3"),
        ("a,b,label\n1,x,0\n", "line 2"),
        ("a,label\n1,0\n2,2\n", "label"),
        ("", "empty"),
    ])
    def test_parse_errors(self, tmp_path, text, fragment):
        with pytest.raises(rio.ParseError, match=fragment):
            rio.load_csv(write(tmp_path / "bad.csv", text))

    def test_missing_file(self, tmp_path):
        with pytest.raises(InvalidInputError, match="not found"):
            rio.load_csv(tmp_path / "nope.csv")

    def test_predictions_golden(self, data_dir):
        P, y, q = rio.load_predictions_csv(data_dir / "golden" / "grouped_predictions.csv")
        assert P.shape == (8, 2) and q.shape == (8, 2)
        np.testing.assert_array_equal(y, [0, 0, 0, 0, 1, 1, 1, 1])

    def test_predictions_must_be_simplex(self, tmp_path):
        with pytest.raises(rio.ParseError):
            rio.load_predictions_csv(write(tmp_path / "p.csv", "p0,p1,label\n0.7,0.7,0\n"))


class TestModelJSON:
    def test_forest_round_trip(self, fitted, tmp_path):
        data, _, forest, _ = fitted
        rio.save_model(tmp_path / "m.json", forest, train_digest=rio.data_digest(data))
        back, entries, digest = rio.load_model(tmp_path / "m.json")
        np.testing.assert_array_equal(rf.predict_forest(back, data.features), rf.predict_forest(forest, data.features))
        assert entries == [] and digest == rio.data_digest(data)
        assert back.config == forest.config

    @pytest.mark.parametrize("method", cal.METHODS)
    def test_calibrator_round_trip(self, fitted, method, tmp_path):
        data, _, forest, models = fitted
        rio.save_model(tmp_path / "m.json", forest, [rio.calibrator_entry(models[method])])
        back, entries, _ = rio.load_model(tmp_path / "m.json")
        restored = rio.calibrator_from_dict(entries[0], back)
        base = rf.predict_forest(forest, data.features)
        np.testing.assert_array_equal(restored.predict_proba(base, data.features),
                                      models[method].predict_proba(base, data.features))

    def test_version_stamp(self, fitted, tmp_path):
        _, _, forest, _ = fitted
        doc = rio.model_document(forest)
        assert doc["format"] == rio.MODEL_FORMAT and doc["version"] == rio.FORMAT_VERSION
        doc["version"] = "2.0"
        (tmp_path / "m.json").write_text(json.dumps(doc))
        with pytest.raises(InvalidInputError, match="newer"):
            rio.load_model(tmp_path / "m.json")

    def test_minor_version_accepted(self, fitted, tmp_path):
        _, _, forest, _ = fitted
        doc = rio.model_document(forest)
        doc["version"] = "1.7"
        (tmp_path / "m.json").write_text(json.dumps(doc))
        rio.load_model(tmp_path / "m.json")

    def test_wrong_kind_and_bad_json(self, tmp_path):
        (tmp_path / "a.json").write_text(json.dumps({"format": "other", "version": "1.0"}))
        with pytest.raises(InvalidInputError):
            rio.load_model(tmp_path / "a.json")
        (tmp_path / "b.json").write_text("{")
        with pytest.raises(rio.ParseError):
            rio.load_model(tmp_path / "b.json")


class TestResults:
    def test_round_trip(self, tmp_path):
        table = bench.ResultsTable(
            [bench.Record("d", "rf_d", 0, 1, "brier", 0.1 + 0.2), bench.Record("d", "iso", 0, 1, "brier", 1 / 3)],
            [bench.Failure("d", "platt", 0, 1, "DegenerateDataError: one label")])
        rio.write_results(table, tmp_path / "r.csv")
        back = rio.read_results(tmp_path / "r.csv")
        assert back.records == table.records and back.failures == table.failures

    def test_repr_floats(self):
        table = bench.ResultsTable([bench.Record("d", "rf_d", 0, 0, "brier", 0.1 + 0.2)])
        assert "0.30000000000000004" in rio.results_to_csv_text(table)

    def test_rows_csv(self, tmp_path):
        rio.write_rows_csv(tmp_path / "x.csv", [{"a": 1, "b": 0.5}, {"a": 2}], ["a", "b"])
        lines = (tmp_path / "x.csv").read_text().splitlines()
        assert lines[0] == "a,b" and lines[2] == "2,"


class TestRunConfig:
    def test_full_config(self, tmp_path):
        path = write(tmp_path / "run.ini", """
[data]
datasets = a.csv, b.csv
[forest]
n_trees = 20
max_depth = none
laplace = yes
max_features = 3
[methods]
methods = rf_d, iso
[experiment]
folds = 4
repeats = 1
calibration_source = oob
threads = 2
[output]
results = out.csv
""")
        sections = rio.load_run_config(path)
        cfg = rio.experiment_config_from(sections)
        assert cfg.datasets == ("a.csv", "b.csv") and cfg.methods == ("rf_d", "iso")
        assert cfg.folds == 4 and cfg.calibration_source == "oob"
        assert cfg.forest.n_trees == 20 and cfg.forest.max_depth is None and cfg.forest.laplace
        assert cfg.forest.max_features == 3
        assert sections["experiment"]["threads"] == 2

    def test_unknown_key(self, tmp_path):
        with pytest.raises(InvalidInputError, match="unknown key"):
            rio.load_run_config(write(tmp_path / "r.ini", "[forest]\ntrees = 3\n"))

    def test_unknown_section(self, tmp_path):
        with pytest.raises(InvalidInputError, match="unknown section"):
            rio.load_run_config(write(tmp_path / "r.ini", "[model]\nx = 1\n"))

    def test_bad_value(self, tmp_path):
        with pytest.raises(InvalidInputError, match="invalid value"):
            rio.load_run_config(write(tmp_path / "r.ini", "[forest]\nn_trees = many\n"))
