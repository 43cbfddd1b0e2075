"""File formats: dataset CSV, model JSON, results CSV and the INI run config.

Floats are written with ``repr`` so every save/load round trip is exact.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io as _stdio
import json
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from rfcal import bench
from rfcal import calibrate as cal
from rfcal import forest as rf
from rfcal.dataset import Dataset, InvalidInputError

FORMAT_VERSION = "1.0"
MODEL_FORMAT = "rfcal-model"


class ParseError(InvalidInputError):
    pass


def _num(text: str):
    try:
        return float(text)
    except ValueError:
        return None


def _read_rows(path) -> Tuple[List[str], List[List[str]]]:
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"{path}: file not found")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if all(_num(h) is not None for h in header):
        raise ParseError(f"{path}: line 1: missing header row (all cells are numeric)")
    if len(set(header)) != len(header):
        raise ParseError(f"{path}: line 1: duplicate column names")
    for i, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise ParseError(f"{path}: line {i}: expected {len(header)} fields, found {len(r)}")
    return header, rows[1:]


def _numeric_matrix(path, header, rows) -> np.ndarray:
    out = np.empty((len(rows), len(header)))
    for i, r in enumerate(rows):
        for j, cell in enumerate(r):
            v = _num(cell.strip())
            if v is None:
                raise ParseError(f"{path}: line {i + 2}: column {header[j]!r}: non-numeric value {cell!r}")
            out[i, j] = v
    return out


def _labels_from(path, column: np.ndarray, width: Optional[int] = None):
    if column.size and not np.all(column == np.round(column)) or np.any(column < 0):
        raise ParseError(f"{path}: labels must be non-negative integers")
    y = column.astype(np.int64)
    top = int(y.max()) if y.size else 0
    missing = sorted(set(range(top + 1)) - set(y.tolist()))
    if missing:
        raise ParseError(f"{path}: labels must be 0..K-1 without gaps; missing {missing}")
    k = max(2, top + 1) if width is None else width
    if top >= k:
        raise ParseError(f"{path}: label {top} exceeds the {k} posterior columns")
    return y, k


def _posterior_columns(header) -> List[int]:
    cols = []
    while f"q{len(cols)}" in header:
        cols.append(header.index(f"q{len(cols)}"))
    return cols if len(cols) >= 2 else []


def load_csv(path) -> Dataset:
    """Read a dataset CSV: header row, numeric features, a ``label`` column
    (else the last column) and optional ``q0, q1, ...`` posterior columns."""
    header, rows = _read_rows(path)
    M = _numeric_matrix(path, header, rows)
    label_col = header.index("label") if "label" in header else len(header) - 1
    qcols = _posterior_columns(header)
    if label_col in qcols:
        raise ParseError(f"{path}: no label column")
    feat_cols = [j for j in range(len(header)) if j != label_col and j not in qcols]
    y, k = _labels_from(path, M[:, label_col], len(qcols) or None)
    q = M[:, qcols] if qcols else None
    try:
        return Dataset(M[:, feat_cols], y, k, q)
    except InvalidInputError as exc:
        raise ParseError(f"{path}: {exc}") from None


def feature_names(path) -> List[str]:
    header, _ = _read_rows(path)
    label_col = header.index("label") if "label" in header else len(header) - 1
    qcols = _posterior_columns(header)
    return [h for j, h in enumerate(header) if j != label_col and j not in qcols]


def _fmt(v) -> str:
    return repr(float(v))


def save_csv(dataset: Dataset, path, names: Sequence[str] = None) -> None:
    names = list(names) if names is not None else [f"x{j}" for j in range(dataset.n_features)]
    if len(names) != dataset.n_features:
        raise InvalidInputError("one name per feature column is required")
    header = names + ["label"]
    if dataset.true_posteriors is not None:
        header += [f"q{j}" for j in range(dataset.n_classes)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(dataset.n_rows):
            row = [_fmt(v) for v in dataset.features[i]] + [str(int(dataset.labels[i]))]
            if dataset.true_posteriors is not None:
                row += [_fmt(v) for v in dataset.true_posteriors[i]]
            w.writerow(row)


def load_predictions_csv(path):
    """Read ``p0..pK-1, label[, q0..qK-1]``; returns (P, labels, q or None)."""
    header, rows = _read_rows(path)
    M = _numeric_matrix(path, header, rows)
    pcols = []
    while f"p{len(pcols)}" in header:
        pcols.append(header.index(f"p{len(pcols)}"))
    if len(pcols) < 2 or "label" not in header:
        raise ParseError(f"{path}: prediction files need columns p0, p1, ... and label")
    qcols = _posterior_columns(header)
    if qcols and len(qcols) != len(pcols):
        raise ParseError(f"{path}: posterior and prediction widths differ")
    P = M[:, pcols]
    if np.any(P < 0) or np.any(P > 1) or np.any(np.abs(P.sum(axis=1) - 1) > 1e-9):
        raise ParseError(f"{path}: prediction rows must be probability vectors")
    y, _ = _labels_from(path, M[:, header.index("label")], len(pcols))
    q = M[:, qcols] if qcols else None
    if q is not None:
        Dataset(np.zeros((len(y), 1)), y, len(pcols), q)
    return P, y, q


def data_digest(dataset: Dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(dataset.features).tobytes())
    h.update(np.ascontiguousarray(dataset.labels).tobytes())
    return h.hexdigest()


# -- models ---------------------------------------------------------------

def forest_to_dict(model: rf.RandomForestModel) -> dict:
    return {"config": model.config.to_dict(), "n_classes": model.n_classes,
            "n_features": model.n_features, "trees": [t.to_nested() for t in model.trees],
            "bootstrap_indices": [np.asarray(b).tolist() for b in model.bootstrap_indices]}


def forest_from_dict(d: dict) -> rf.RandomForestModel:
    trees = [rf.Tree.from_nested(t) for t in d["trees"]]
    boots = [np.asarray(b, dtype=np.int64) for b in d["bootstrap_indices"]]
    return rf.RandomForestModel(trees, boots, rf.ForestConfig.from_dict(d["config"]),
                                int(d["n_classes"]), int(d["n_features"]))


def _floats(a) -> list:
    return [float(v) for v in np.asarray(a).reshape(-1)]


def calibrator_to_dict(model) -> dict:
    if isinstance(model, cal.PlattModel):
        return {"method": "platt", "params": {"gamma": model.gamma, "delta": model.delta}}
    if isinstance(model, cal.BetaModel):
        return {"method": "beta", "params": {"a": model.a, "b": model.b, "c": model.c}}
    if isinstance(model, cal.IsotonicModel):
        return {"method": "iso", "params": {"breakpoints": _floats(model.breakpoints),
                                            "values": _floats(model.values)}}
    if isinstance(model, cal.VennAbersModel):
        return {"method": "va", "params": {"scores": _floats(model.scores),
                                           "labels": [int(v) for v in model.labels]}}
    if isinstance(model, cal.PPAModel):
        return {"method": "ppa", "params": {"r": model.r}}
    if isinstance(model, cal.CurtailModel):
        return {"method": "ct", "params": {"v": model.v}}
    if isinstance(model, cal.RankModel):
        return {"method": "rank", "params": {
            "cal_tree_probs": np.asarray(model.cal_tree_probs).tolist(),
            "breakpoints": _floats(model.isotonic.breakpoints),
            "values": _floats(model.isotonic.values),
            "rank_forest": forest_to_dict(model.rank_forest)}}
    raise InvalidInputError(f"cannot serialize calibrator of type {type(model).__name__}")


def calibrator_from_dict(d: dict, forest: rf.RandomForestModel):
    m, p = d.get("method"), d.get("params", {})
    if m == "platt":
        return cal.PlattModel(float(p["gamma"]), float(p["delta"]))
    if m == "beta":
        return cal.BetaModel(float(p["a"]), float(p["b"]), float(p["c"]))
    if m == "iso":
        return cal.IsotonicModel(np.array(p["breakpoints"], dtype=np.float64),
                                 np.array(p["values"], dtype=np.float64))
    if m == "va":
        return cal.VennAbersModel(np.array(p["scores"], dtype=np.float64),
                                  np.array(p["labels"], dtype=np.int64))
    if m == "ppa":
        return cal.PPAModel(float(p["r"]))
    if m == "ct":
        return cal.CurtailModel(int(p["v"]), forest)
    if m == "rank":
        iso = cal.IsotonicModel(np.array(p["breakpoints"], dtype=np.float64),
                                np.array(p["values"], dtype=np.float64))
        probs = np.array(p["cal_tree_probs"], dtype=np.float64)
        return cal.RankModel(probs, iso, forest_from_dict(p["rank_forest"]))
    raise InvalidInputError(f"unknown calibrator method {m!r}; valid: {', '.join(cal.METHODS)}")


def check_version(doc: dict, kind: str) -> None:
    if doc.get("format") != kind:
        raise InvalidInputError(f"not a {kind} document")
    version = str(doc.get("version", ""))
    try:
        major = int(version.split(".")[0])
    except ValueError:
        raise InvalidInputError(f"unreadable version stamp {version!r}") from None
    if major > int(FORMAT_VERSION.split(".")[0]):
        raise InvalidInputError(f"{kind} version {version} is newer than supported {FORMAT_VERSION}")


def stamp(kind: str, body: dict) -> dict:
    return {"format": kind, "version": FORMAT_VERSION, **body}


def model_document(forest: rf.RandomForestModel, calibrators: Sequence[dict] = (),
                   train_digest: str = None) -> dict:
    return stamp(MODEL_FORMAT, {"seed": int(forest.config.seed), "train_digest": train_digest,
                                "forest": forest_to_dict(forest), "calibrators": list(calibrators)})


def save_model(path, forest: rf.RandomForestModel, calibrators: Sequence[dict] = (),
               train_digest: str = None) -> None:
    """Write the model JSON; ``calibrators`` are entries from :func:`calibrator_entry`."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_document(forest, calibrators, train_digest), fh)


def calibrator_entry(model, source: str = "fold") -> dict:
    return {**calibrator_to_dict(model), "source": source}


def load_model(path):
    """Returns ``(forest, calibrator entries, train digest)``; entries keep their JSON form."""
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"{path}: file not found")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from None
    check_version(doc, MODEL_FORMAT)
    return forest_from_dict(doc["forest"]), list(doc.get("calibrators", [])), doc.get("train_digest")


# -- results --------------------------------------------------------------

RESULT_COLUMNS = ("dataset", "method", "repeat", "fold", "metric", "value", "error")


def results_to_csv_text(table: bench.ResultsTable) -> str:
    rows = [[r.dataset, r.method, str(r.repeat), str(r.fold), r.metric, _fmt(r.value), ""]
            for r in table.records]
    rows += [[f.dataset, f.method, str(f.repeat), str(f.fold), "", "", f.error] for f in table.failures]
    buf = _stdio.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    w.writerows(rows)
    return buf.getvalue()


def write_results(table: bench.ResultsTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(results_to_csv_text(table))


def read_results(path) -> bench.ResultsTable:
    header, rows = _read_rows(path)
    if tuple(header) != RESULT_COLUMNS:
        raise ParseError(f"{path}: line 1: expected columns {','.join(RESULT_COLUMNS)}")
    recs, fails = [], []
    for i, r in enumerate(rows, start=2):
        try:
            rep, fold = int(r[2]), int(r[3])
            if r[6]:
                fails.append(bench.Failure(r[0], r[1], rep, fold, r[6]))
            else:
                v = float(r[5])
                if not math.isfinite(v):
                    raise ValueError("non-finite value")
                recs.append(bench.Record(r[0], r[1], rep, fold, r[4], v))
        except ValueError as exc:
            raise ParseError(f"{path}: line {i}: {exc}") from None
    return bench.ResultsTable(recs, fails)


def write_json(path, kind: str, body: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(stamp(kind, body), fh, indent=2, sort_keys=False)
        fh.write("\n")


def write_rows_csv(path, rows: Sequence[dict], columns: Sequence[str] = None) -> None:
    """Tidy CSV of dict rows; columns default to first-seen key order."""
    if columns is None:
        columns = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None else (_fmt(r[c]) if isinstance(r[c], float) else r[c])
                        for c in columns])


# -- run config -----------------------------------------------------------

FOREST_KEYS = {"n_trees": int, "criterion": str, "max_depth": "optint", "min_samples_split": int,
               "min_samples_leaf": int, "max_features": "features", "class_weight": "optstr",
               "bootstrap": bool, "laplace": bool, "tree_kind": str}
EXPERIMENT_KEYS = {"folds": int, "repeats": int, "seed": int, "calibration_source": str,
                   "ece_bins": int, "search_iterations": int, "search_folds": int,
                   "search_objective": str, "search_per_fold": bool, "laplace": "optbool",
                   "metrics": "list", "threads": int}
SECTIONS = {"data": {"datasets": "list"}, "forest": FOREST_KEYS, "methods": {"methods": "list"},
            "experiment": EXPERIMENT_KEYS, "output": {"results": str, "summary": str}}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(section, key, raw, kind):
    raw = raw.strip()
    try:
        if kind is int:
            return int(raw)
        if kind is bool:
            if raw.lower() in _TRUE:
                return True
            if raw.lower() in _FALSE:
                return False
            raise ValueError(raw)
        if kind == "optint":
            return None if raw.lower() in ("", "none") else int(raw)
        if kind == "optstr":
            return None if raw.lower() in ("", "none") else raw
        if kind == "optbool":
            return None if raw.lower() in ("", "none") else _convert(section, key, raw, bool)
        if kind == "features":
            return int(raw) if raw.isdigit() else ("all" if raw.lower() == "none" else raw)
        if kind == "list":
            return tuple(v.strip() for v in raw.replace("\n", ",").split(",") if v.strip())
    except ValueError:
        raise InvalidInputError(f"config [{section}] {key}: invalid value {raw!r}") from None
    return raw


def load_run_config(path) -> Dict[str, dict]:
    """Parse the sectioned key=value config; unknown sections or keys are errors."""
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"{path}: file not found")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ParseError(f"{path}: {exc}") from None
    out: Dict[str, dict] = {s: {} for s in SECTIONS}
    for section in parser.sections():
        if section not in SECTIONS:
            raise InvalidInputError(f"{path}: unknown section [{section}]; valid: {', '.join(SECTIONS)}")
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise InvalidInputError(f"{path}: unknown key {key!r} in [{section}]; valid: "
                                        f"{', '.join(SECTIONS[section])}")
            out[section][key] = _convert(section, key, raw, SECTIONS[section][key])
    return out


def forest_config_from(values: dict, base: rf.ForestConfig = rf.ForestConfig()) -> rf.ForestConfig:
    return base.replace(**{k: v for k, v in values.items() if k in FOREST_KEYS})


def experiment_config_from(sections: Dict[str, dict]) -> bench.ExperimentConfig:
    exp = {k: v for k, v in sections.get("experiment", {}).items() if k != "threads"}
    kwargs = dict(exp)
    if "methods" in sections.get("methods", {}):
        kwargs["methods"] = sections["methods"]["methods"]
    if "datasets" in sections.get("data", {}):
        kwargs["datasets"] = sections["data"]["datasets"]
    kwargs["forest"] = forest_config_from(sections.get("forest", {}))
    return bench.ExperimentConfig(**kwargs)
