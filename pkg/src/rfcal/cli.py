"""Command-line front end.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from rfcal import bench
from rfcal import calibrate as cal
from rfcal import forest as rf
from rfcal import io as rio
from rfcal import metrics as mt
from rfcal import stats
from rfcal import synthgen as sg
from rfcal.dataset import InvalidInputError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(InvalidInputError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _distinct_outputs(args, inputs, outputs):
    ins = {Path(p).resolve() for p in inputs if p}
    for out in outputs:
        if out and Path(out).resolve() in ins:
            raise UsageError(f"output path {out} would overwrite an input file")


def _forest_args(p):
    g = p.add_argument_group("forest")
    g.add_argument("--config", help="INI run config; flags override its values")
    g.add_argument("--n-trees", type=int)
    g.add_argument("--criterion", choices=rf.CRITERIA)
    g.add_argument("--max-depth", type=int)
    g.add_argument("--min-samples-split", type=int)
    g.add_argument("--min-samples-leaf", type=int)
    g.add_argument("--max-features")
    g.add_argument("--class-weight", choices=("none", "balanced", "balanced_subsample"))
    g.add_argument("--laplace", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--tree-kind", choices=rf.TREE_KINDS)
    g.add_argument("--no-bootstrap", action="store_true")
    g.add_argument("--seed", type=int)


def _sections(args):
    return rio.load_run_config(args.config) if getattr(args, "config", None) else {
        s: {} for s in rio.SECTIONS}


def _forest_config(args, sections=None) -> rf.ForestConfig:
    sections = _sections(args) if sections is None else sections
    cfg = rio.forest_config_from(sections.get("forest", {}))
    seed = sections.get("experiment", {}).get("seed")
    over = {}
    for key in ("n_trees", "criterion", "max_depth", "min_samples_split", "min_samples_leaf", "tree_kind",
                "laplace"):
        v = getattr(args, key, None)
        if v is not None:
            over[key] = v
    if getattr(args, "max_features", None) is not None:
        mf = args.max_features
        over["max_features"] = int(mf) if mf.isdigit() else mf
    if getattr(args, "class_weight", None) is not None:
        over["class_weight"] = None if args.class_weight == "none" else args.class_weight
    if getattr(args, "no_bootstrap", False):
        over["bootstrap"] = False
    if getattr(args, "seed", None) is not None:
        seed = args.seed
    if seed is not None:
        over["seed"] = seed
    return cfg.replace(**over)


# -- synth ----------------------------------------------------------------

def cmd_synth(args):
    if args.kind in ("gaussians", "mixture"):
        if args.kind == "gaussians":
            n = 1000 if args.n is None else args.n
            data, s0, s1 = sg.sample_two_gaussians(args.dim, n, args.seed, return_specs=True)

            def extra(seed):
                return sg.sample_gaussian_pair(s0, s1, n, seed)
        else:
            n = 2000 if args.n is None else args.n
            data, m0, m1 = sg.sample_mixture(args.dim, n, args.clusters, args.seed, return_specs=True)

            def extra(seed):
                return sg.sample_mixture_pair(m0, m1, n, seed)
        rio.save_csv(data, args.out)
        # extra samples come from the same class distributions as --out
        for tag, path in ((1, args.test_out), (2, args.calib_out)):
            if path:
                rio.save_csv(extra(bench.derive_seed(args.seed, tag)), path)
    else:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        steps = sg.overlap_sweep(sg.OverlapSweepSpec(args.dim, args.steps, args.target,
                                                     args.n or 1000, args.seed))
        rows = []
        for st in steps:
            name = f"step_{st.step:02d}.csv"
            rio.save_csv(st.data, out_dir / name)
            rows.append({"step": st.step, "shift": st.shift, "distance": st.distance, "file": name})
        rio.write_rows_csv(out_dir / "sweep.csv", rows)
    return EXIT_OK


# -- train / calibrate ------------------------------------------------------

def cmd_train(args):
    _distinct_outputs(args, [args.data, args.config], [args.out])
    data = rio.load_csv(args.data)
    model = rf.train_forest(data, _forest_config(args), n_jobs=args.threads)
    rio.save_model(args.out, model, (), rio.data_digest(data))
    return EXIT_OK


def cmd_calibrate(args):
    _distinct_outputs(args, [args.data, args.model, args.train_data], [args.out])
    if args.method not in cal.METHODS:
        raise UsageError(f"unknown method {args.method!r}; valid methods: {', '.join(cal.METHODS)}")
    forest, entries, digest = rio.load_model(args.model)
    data = rio.load_csv(args.data)
    oob = args.source == "oob"
    if oob and digest is not None and rio.data_digest(data) != digest:
        raise InvalidInputError("--source oob needs the exact training data the forest was fitted on")
    rank_forest = None
    if args.method == "rank":
        train = rio.load_csv(args.train_data) if args.train_data else (data if oob else None)
        if train is None:
            grown = forest.config.replace(laplace=True, tree_kind="PET")
            if grown != cal.rank_forest_config(forest.config):
                raise InvalidInputError("rank calibration of a pruned forest needs --train-data")
            rank_forest = rf.RandomForestModel(forest.trees, forest.bootstrap_indices,
                                               cal.rank_forest_config(forest.config),
                                               forest.n_classes, forest.n_features)
        else:
            rank_forest = cal.train_rank_forest(train, forest.config, base_forest=forest)
    model = cal.fit_calibrator(args.method, forest, data.features, data.labels,
                               rank_forest=rank_forest, oob=oob)
    entries.append(rio.calibrator_entry(model, args.source))
    rio.save_model(args.out, forest, entries, digest)
    return EXIT_OK


# -- eval -----------------------------------------------------------------

def _select_calibrator(entries, which):
    if which == "none" or not entries:
        return None
    if which == "last":
        return entries[-1]
    if which.isdigit():
        idx = int(which)
        if idx >= len(entries):
            raise InvalidInputError(f"model holds {len(entries)} calibrators; index {idx} is out of range")
        return entries[idx]
    matches = [e for e in entries if e["method"] == which]
    if not matches:
        raise InvalidInputError(f"model has no {which!r} calibrator")
    return matches[-1]


def cmd_eval(args):
    if bool(args.model) == bool(args.predictions):
        raise UsageError("give exactly one of --model or --predictions")
    _distinct_outputs(args, [args.model, args.data, args.predictions], [args.report, args.reliability])
    if args.predictions:
        P, y, q = rio.load_predictions_csv(args.predictions)
        method = "predictions"
    else:
        if not args.data:
            raise UsageError("--model needs --data")
        forest, entries, _ = rio.load_model(args.model)
        data = rio.load_csv(args.data)
        if data.n_features != forest.n_features:
            raise InvalidInputError(f"data has {data.n_features} features, model expects {forest.n_features}")
        P = rf.predict_forest(forest, data.features)
        entry = _select_calibrator(entries, args.calibrator)
        method = "forest"
        if entry is not None:
            P = rio.calibrator_from_dict(entry, forest).predict_proba(P, data.features)
            method = entry["method"]
        y, q = data.labels, data.true_posteriors
    report = mt.evaluate(P, y, q, args.bins)
    body = {"method": method, "n_rows": int(len(y)), **report.to_dict(),
            "brier_pos": float(np.mean(mt.binary_brier(P, y))) if P.shape[1] == 2 else None,
            "n_groups": int(rf.count_unique_rows(P))}
    if q is not None:
        cl, gl, il = mt.decompose(P, mt.calibrated_groups(P, q), q, "logloss")
        body["logloss_decomposition"] = {"cl": cl, "gl": gl, "il": il}
    rio.write_json(args.report, "rfcal-report", body)
    if args.reliability:
        ref = q if q is not None else y
        rio.write_rows_csv(args.reliability, mt.reliability_data(P, ref, args.bins),
                           ["bin_left", "bin_right", "mean_pred", "observed", "count"])
    return EXIT_OK


# -- bench ----------------------------------------------------------------

def _experiment_config(args):
    sections = _sections(args)
    cfg = rio.experiment_config_from(sections)
    over = {"forest": _forest_config(args, sections)}
    for key in ("folds", "repeats", "search_iterations"):
        v = getattr(args, key, None)
        if v is not None:
            over[key] = v
    if args.seed is not None:
        over["seed"] = args.seed
    if args.data:
        over["datasets"] = tuple(args.data)
    if args.methods:
        over["methods"] = tuple(args.methods)
    if args.metrics:
        over["metrics"] = tuple(args.metrics)
    if args.source:
        over["calibration_source"] = args.source
    cfg = cfg.replace(**over)
    threads = args.threads if args.threads is not None else sections.get("experiment", {}).get("threads", 1)
    outputs = sections.get("output", {})
    return cfg, threads, args.results or outputs.get("results"), args.summary or outputs.get("summary")


def cmd_bench(args):
    cfg, threads, results, summary = _experiment_config(args)
    if not results:
        raise UsageError("bench needs --results (or [output] results in the config)")
    if not cfg.datasets:
        raise UsageError("bench needs datasets (--data or [data] datasets)")
    _distinct_outputs(args, list(cfg.datasets) + [args.config], [results, summary])
    table = bench.run_experiment(cfg, threads=threads)
    rio.write_results(table, results)
    if summary:
        rio.write_json(summary, "rfcal-summary", table.summary())
    return EXIT_OK


# -- stats ----------------------------------------------------------------

def cmd_stats(args):
    _distinct_outputs(args, [args.results, getattr(args, "against", None)], [args.out])
    table = rio.read_results(args.results)
    if args.kind == "ranks":
        rows = []
        for metric in args.metrics or table.metrics():
            datasets, methods, S = table.score_matrix(metric, args.methods)
            if not datasets:
                continue
            R = stats.rank_matrix(S, lower_is_better=metric not in bench.HIGHER_IS_BETTER)
            for d, srow, rrow in zip(datasets, S, R):
                rows.extend({"metric": metric, "dataset": d, "method": m, "mean": float(s), "rank": float(r)}
                            for m, s, r in zip(methods, srow, rrow))
            rows.extend({"metric": metric, "dataset": "__average__", "method": m,
                         "mean": float(s), "rank": float(r)}
                        for m, s, r in zip(methods, S.mean(axis=0), R.mean(axis=0)))
        rio.write_rows_csv(args.out, rows, ["metric", "dataset", "method", "mean", "rank"])
    elif args.kind == "cd":
        metric = (args.metrics or ["brier"])[0]
        summary = bench.rank_summary(table, metric, args.methods, args.alpha)
        body = {"metric": metric, "alpha": args.alpha, **summary.cd_diagram(),
                "significant_pairs": [list(p) for p in summary.significant_pairs]}
        rio.write_json(args.out, "rfcal-cd", body)
    else:
        if not args.against:
            raise UsageError("stats ttest needs --against")
        other = rio.read_results(args.against)
        methods = args.methods or [m for m in table.methods() if m in other.methods()]
        metrics = args.metrics or [m for m in table.metrics() if m in other.metrics()]
        rows = bench.significance_table(table, other, methods, metrics, args.alpha, args.pair_by)
        rio.write_rows_csv(args.out, rows, ["method", "metric", "n", "mean_a", "mean_b", "t", "p",
                                            "significant", "direction", "status"])
    return EXIT_OK


# -- sweep ----------------------------------------------------------------

def cmd_sweep(args):
    _distinct_outputs(args, [args.config], [args.out])
    cfg = _forest_config(args)
    seeds = range(args.seed or 0, (args.seed or 0) + args.seeds)
    common = dict(seeds=seeds, d=args.dim, n_train=args.n, n_test=args.n, config=cfg)
    if args.kind == "depth":
        if args.values:
            common["depths"] = tuple(None if v.lower() == "none" else int(v) for v in args.values)
        rows = bench.depth_sweep(**common)
    elif args.kind == "trees":
        if args.values:
            common["tree_counts"] = tuple(int(v) for v in args.values)
        rows = bench.tree_sweep(**common)
    elif args.kind == "calibsize":
        fracs = tuple(float(v) for v in args.values) if args.values else (0.02, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0)
        methods = tuple(args.methods) if args.methods else bench.CALIBRATORS
        rows = []
        for seed in seeds:
            train, pool, test = bench.synthetic_split(seed, args.dim, args.n, args.n, n_calib=args.n)
            for r in bench.calibration_size_sweep(train, pool, test, fracs, methods, cfg, seed):
                rows.append({"seed": seed, **r})
    else:
        methods = tuple(args.methods) if args.methods else ("rf_d",) + bench.CALIBRATORS
        rows = bench.overlap_experiment((args.dim,), seeds, args.steps, args.target, args.n, methods, cfg)
    rio.write_rows_csv(args.out, rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rfcal", description="Random-forest probability calibration toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write synthetic datasets")
    s.add_argument("kind", choices=("gaussians", "mixture", "sweep"))
    s.add_argument("--dim", type=int, default=2)
    s.add_argument("--n", type=int, default=None, help="rows (default 1000, mixture 2000)")
    s.add_argument("--clusters", type=int, default=4)
    s.add_argument("--steps", type=int, default=20)
    s.add_argument("--target", type=float, default=sg.DEFAULT_TARGET_BD)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="CSV path, or output directory for sweep")
    s.add_argument("--test-out", help="also write an independent test sample here")
    s.add_argument("--calib-out", help="also write an independent calibration sample here")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a forest and write model JSON")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--threads", type=int, default=1)
    _forest_args(t)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("calibrate", help="fit a calibrator and append it to the model")
    c.add_argument("--model", required=True)
    c.add_argument("--data", required=True, help="calibration CSV (the training CSV for --source oob)")
    c.add_argument("--method", required=True)
    c.add_argument("--source", choices=("fold", "oob"), default="fold")
    c.add_argument("--train-data", help="training CSV, needed for rank calibration of pruned forests")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_calibrate)

    e = sub.add_parser("eval", help="metric report and reliability data")
    e.add_argument("--model")
    e.add_argument("--data")
    e.add_argument("--predictions", help="CSV with p0..pK-1, label and optional q0..qK-1")
    e.add_argument("--calibrator", default="last", help="'last', 'none', an index or a method name")
    e.add_argument("--bins", type=int, default=20)
    e.add_argument("--report", required=True)
    e.add_argument("--reliability")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="cross-validated benchmark")
    b.add_argument("--data", nargs="+")
    b.add_argument("--methods", nargs="+")
    b.add_argument("--metrics", nargs="+")
    b.add_argument("--folds", type=int)
    b.add_argument("--repeats", type=int)
    b.add_argument("--search-iterations", type=int)
    b.add_argument("--source", choices=("fold", "oob"))
    b.add_argument("--threads", type=int)
    b.add_argument("--results")
    b.add_argument("--summary")
    _forest_args(b)
    b.set_defaults(func=cmd_bench)

    st = sub.add_parser("stats", help="rank tables, CD diagrams and t-tests from results")
    st.add_argument("kind", choices=("ranks", "cd", "ttest"))
    st.add_argument("--results", required=True)
    st.add_argument("--against", help="second results CSV for ttest")
    st.add_argument("--metrics", nargs="+")
    st.add_argument("--methods", nargs="+")
    st.add_argument("--alpha", type=float, default=0.05)
    st.add_argument("--pair-by", choices=("dataset", "cell"), default="dataset")
    st.add_argument("--out", required=True)
    st.set_defaults(func=cmd_stats)

    w = sub.add_parser("sweep", help="synthetic sweep protocols")
    w.add_argument("kind", choices=("depth", "trees", "calibsize", "overlap"))
    w.add_argument("--values", nargs="+", help="swept values (depths, tree counts or fractions)")
    w.add_argument("--seeds", type=int, default=5, help="number of seeds, starting at --seed")
    w.add_argument("--dim", type=int, default=2)
    w.add_argument("--n", type=int, default=1000)
    w.add_argument("--steps", type=int, default=20)
    w.add_argument("--target", type=float, default=sg.DEFAULT_TARGET_BD)
    w.add_argument("--methods", nargs="+")
    w.add_argument("--out", required=True)
    _forest_args(w)
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "method", None) is not None and args.method not in cal.METHODS:
            raise UsageError(f"unknown method {args.method!r}; valid methods: {', '.join(cal.METHODS)}")
        for m in getattr(args, "methods", None) or ():
            if m not in bench.METHODS:
                raise UsageError(f"unknown method {m!r}; valid methods: {', '.join(bench.METHODS)}")
        return args.func(args)
    except (InvalidInputError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - last-resort runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
