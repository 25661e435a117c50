"""Command-line interface.

Subcommands: ``simulate``, ``fit``, ``predict``, ``evaluate`` and ``experiment``.
Exit codes are 0 on success, 1 for usage errors, 2 for data errors and 3 for
numerical failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from importlib import metadata
from pathlib import Path

import numpy as np
import pandas as pd

from .cure_em import CureModelError
from .data_model import DataError, build_landmark_dataset, load_datasets
from .metrics import default_grid, evaluate
from .mixed_models import BoundaryError, ConvergenceError
from .pipeline import LandmarkModel, evaluate_model, fit_landmark_model, run_replicate, scenario_grid
from .simulation import SCENARIOS, ScenarioSpec, write_replicates

log = logging.getLogger("curemark")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
FAILURE_LIMIT = 0.05


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    return [int(v) for v in _floats(text)]


def _names(text: str) -> list[str]:
    return [v for v in text.replace(",", " ").split() if v]


def _atomic_write(path: Path, writer) -> None:
    """Write through a temporary file so a failure never leaves a partial output."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        writer(Path(tmp))
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _to_csv(df: pd.DataFrame, path: Path) -> None:
    _atomic_write(path, lambda p: df.to_csv(p, index=False, float_format="%.17g"))


def _to_json(obj, path: Path) -> None:
    _atomic_write(path, lambda p: p.write_text(json.dumps(obj, indent=2, default=_json_default)))


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "pandas"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


# -- simulate ------------------------------------------------------------------


def cmd_simulate(args) -> int:
    if args.scenario not in SCENARIOS:
        raise UsageError(f"--scenario must be between 1 and 12, got {args.scenario}")
    spec = ScenarioSpec(args.scenario, m=args.m, replicates=args.replicates, seed=args.seed)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise DataError(f"output directory {out} is not writable")
    dirs = write_replicates(spec, out, validation=args.validation)
    log.info("wrote %d replicate(s) under %s", len(dirs), out)
    return EXIT_OK


# -- fit / predict / evaluate ------------------------------------------------------


def _load(args, x_cols=None, z_cols=None):
    x_cols = x_cols if x_cols is not None else args.incidence_cols
    z_cols = z_cols if z_cols is not None else args.latency_cols
    return load_datasets(args.longitudinal, args.subjects, x_cols, z_cols)


def _restrict(long, cols):
    if not cols:
        return long
    missing = sorted(set(cols) - set(long.covariates))
    if missing:
        raise DataError(f"longitudinal covariate(s) not found: {', '.join(missing)}")
    return long.subset(np.isin(long.covariate, cols))


def cmd_fit(args) -> int:
    long, subj = _load(args)
    long = _restrict(long, args.longitudinal_cols)
    lm = build_landmark_dataset(long, subj, args.landmark)
    model = fit_landmark_model(lm, args.summary, tol=args.tol, max_iter=args.max_iter)
    _to_json(model.to_dict(), Path(args.out))
    c = model.cure
    log.info("fit %s model on %d subjects: %d EM iterations, converged=%s, flags=%s",
             model.strategy.kind, len(lm.subjects), c.iterations, c.converged, list(c.flags))
    return EXIT_OK


def _model_and_data(fit_path, args):
    model = LandmarkModel.load(fit_path)
    c = model.cure
    long, subj = _load(args, list(c.x_names), list(c.z_names))
    long = _restrict(long, list(model.strategy.covariates))
    lm = build_landmark_dataset(long, subj, model.landmark_time)
    return model, lm


def _horizons(values, landmark_time: float) -> np.ndarray:
    h = np.asarray(values, dtype=float)
    if np.any(h <= landmark_time):
        raise UsageError(f"horizons must exceed the landmark time {landmark_time}")
    if np.any(np.diff(h) <= 0):
        raise UsageError("horizons must be strictly increasing")
    return h - landmark_time


def cmd_predict(args) -> int:
    model, lm = _model_and_data(args.fit, args)
    pr = model.predict(lm, _horizons(args.horizons, model.landmark_time))
    _to_csv(pr.to_frame(), Path(args.out))
    return EXIT_OK


def _metric_frame(report, label: str, landmark_time: float, **extra) -> pd.DataFrame:
    rows = [(label, name, t, v) for name, t, v in report.rows(landmark_time)]
    df = pd.DataFrame(rows, columns=["strategy", "metric", "time", "value"])
    for k, v in reversed(extra.items()):
        df.insert(0, k, v)
    return df


def _evaluate_predictions(args) -> tuple[pd.DataFrame, list[str]]:
    pred = pd.read_csv(args.predictions, dtype={"subject_id": str})
    need = {"subject_id", "horizon", "pi_hat", "S_hat", "eta_inc", "eta_lat"}
    if need - set(pred.columns):
        raise DataError(f"prediction file lacks column(s) {sorted(need - set(pred.columns))}")
    if args.landmark is None:
        raise UsageError("--landmark is required with --predictions")
    _, subj = load_datasets(args.longitudinal, args.subjects, [], [])
    keep = subj.time > args.landmark
    subj = subj.subset(keep)
    wide = pred.pivot(index="subject_id", columns="horizon", values="S_hat")
    missing = sorted(set(subj.subject_id) - set(wide.index))
    if missing:
        raise DataError(f"no predictions for {len(missing)} at-risk subject(s), e.g. {missing[0]!r}")
    wide = wide.loc[subj.subject_id]
    first = pred.drop_duplicates("subject_id").set_index("subject_id").loc[subj.subject_id]
    grid = wide.columns.to_numpy(dtype=float) - args.landmark
    q = first["q_hat"].to_numpy() if "q_hat" in first else None
    rep = evaluate(subj.time - args.landmark, subj.event, first["eta_inc"].to_numpy(), q,
                   first["pi_hat"].to_numpy(), first["eta_lat"].to_numpy(), wide.to_numpy(), grid)
    return _metric_frame(rep, args.label or "predictions", args.landmark), list(rep.warnings)


def _cv_frames(summary, lm, args, grid) -> tuple[list[pd.DataFrame], list[str]]:
    folds, repeats = args.cv
    rng = np.random.default_rng(args.seed)
    m = len(lm.subjects)
    frames, msgs = [], []
    for r in range(repeats):
        perm = rng.permutation(m)
        fold_of = np.empty(m, dtype=int)
        fold_of[perm] = np.arange(m) % folds
        for f in range(folds):
            test = fold_of == f
            train_lm = _sub_landmark(lm, ~test)
            test_lm = _sub_landmark(lm, test)
            model = fit_landmark_model(train_lm, summary)
            rep = evaluate_model(model, test_lm, grid)
            frames.append(_metric_frame(rep, model.strategy.kind, lm.landmark_time, repeat=r, fold=f))
            msgs += rep.warnings
    return frames, msgs


def _sub_landmark(lm, mask):
    subj = lm.subjects.subset(mask)
    keep = np.isin(lm.history.subject_id, subj.subject_id)
    return build_landmark_dataset(lm.history.subset(keep), subj, lm.landmark_time)


def cmd_evaluate(args) -> int:
    if args.predictions:
        df, msgs = _evaluate_predictions(args)
    else:
        if not args.fit:
            raise UsageError("evaluate needs --fit (one or more) or --predictions")
        frames, msgs = [], []
        for path in args.fit:
            model, lm = _model_and_data(path, args)
            grid = (_horizons(args.grid, model.landmark_time) if args.grid
                    else default_grid(lm.times_since_landmark, lm.subjects.event))
            if args.cv:
                cv_frames, cv_msgs = _cv_frames(model.strategy.kind, lm, args, grid)
                frames += cv_frames
                msgs += cv_msgs
            else:
                rep = evaluate_model(model, lm, grid)
                frames.append(_metric_frame(rep, model.strategy.kind, model.landmark_time))
                msgs += rep.warnings
        df = pd.concat(frames, ignore_index=True)
    for msg in dict.fromkeys(msgs):
        log.warning("%s", msg)
    _to_csv(df, Path(args.out))
    if args.summary_json:
        keys = [k for k in ("strategy", "metric", "time") if k in df]
        g = df.groupby(keys, dropna=False)["value"]
        summ = [{**dict(zip(keys, k)), "mean": v.mean(), "sd": v.std(ddof=1) if len(v) > 1 else 0.0, "n": len(v)}
                for k, v in g]
        _to_json({"metrics": summ, "warnings": list(dict.fromkeys(msgs))}, Path(args.summary_json))
    return EXIT_OK


# -- experiment -----------------------------------------------------------------


def _replicate_task(task):
    scenario, m, rep, seed, strategies, grid = task
    spec = ScenarioSpec(scenario, m=m, replicates=rep + 1, seed=seed)
    try:
        res = run_replicate(spec, rep, strategies, grid)
    except Exception as exc:  # per-replicate failures are counted, not fatal
        return {"scenario": scenario, "m": m, "replicate": rep, "error": f"{type(exc).__name__}: {exc}"}
    rows = []
    for s, report in res.reports.items():
        for name, t, v in report.rows(spec.landmark_time):
            rows.append((scenario, m, rep, s, name, t, v))
    return {"scenario": scenario, "m": m, "replicate": rep, "rows": rows, "seconds": res.seconds,
            "flags": {k: list(v) for k, v in res.em_flags.items()}}


def _merge_config(args) -> dict:
    defaults = {"scenarios": list(range(1, 13)), "m": [300], "replicates": 100, "seed": 0,
                "strategies": ["model_based", "locf"], "grid": None, "out": None, "jobs": None}
    cfg = dict(defaults)
    if args.config:
        try:
            cfg.update(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    if cfg["jobs"] is None:
        cfg["jobs"] = int(os.environ.get("CUREMARK_JOBS", "1"))
    if cfg["out"] is None:
        raise UsageError("experiment needs --out (or 'out' in the config file)")
    if int(cfg["replicates"]) < 1:
        raise UsageError("replicate count must be at least 1")
    cfg["strategies"] = [{"blup": "model_based"}.get(s, s) for s in cfg["strategies"]]
    if not cfg["strategies"] or set(cfg["strategies"]) - {"model_based", "locf"}:
        raise UsageError("strategies must be a nonempty subset of model_based, locf")
    bad = [s for s in cfg["scenarios"] if s not in SCENARIOS]
    if bad:
        raise UsageError(f"unknown scenario(s) {bad}")
    return cfg


def aggregate(per_rep: pd.DataFrame) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Means and SDs across replicates: (incidence table, latency curves)."""
    def stats(df, keys):
        g = df.groupby(keys, dropna=False)["value"]
        return g.agg(mean="mean", sd=lambda v: v.std(ddof=1) if v.count() > 1 else 0.0,
                     n="count").reset_index()

    inc = per_rep[per_rep.metric.isin(["auc_inc", "brier_inc", "c_index"])]
    inc = stats(inc, ["scenario", "m", "strategy", "metric"])
    inc = inc.pivot_table(index=["scenario", "m", "strategy"], columns="metric", values=["mean", "sd", "n"])
    inc.columns = [f"{metric}_{stat}" for stat, metric in inc.columns]
    inc = inc.reset_index()
    lat = per_rep[per_rep.metric.isin(["auc_lat", "brier_lat"])]
    lat = stats(lat, ["scenario", "m", "strategy", "metric", "time"])
    lat = lat.pivot_table(index=["scenario", "m", "strategy", "time"], columns="metric", values=["mean", "sd", "n"])
    lat.columns = [f"{metric}_{stat}" for stat, metric in lat.columns]
    return inc, lat.reset_index()


def run_experiment(cfg: dict) -> dict:
    """Run the replicate grid and write all outputs; returns the manifest."""
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    tasks = []
    grids = {}
    for sc in cfg["scenarios"]:
        for m in cfg["m"]:
            spec = ScenarioSpec(sc, m=m, seed=cfg["seed"])
            if cfg["grid"]:
                grid = np.asarray(cfg["grid"], dtype=float) - spec.landmark_time
                if np.any(grid <= 0):
                    raise UsageError("grid times must exceed the landmark time")
            else:
                grid = scenario_grid(spec)
            grids[f"{sc}/{m}"] = (grid + spec.landmark_time).tolist()
            tasks += [(sc, m, k, cfg["seed"], tuple(cfg["strategies"]), grid) for k in range(cfg["replicates"])]

    if cfg["jobs"] > 1:
        with ProcessPoolExecutor(max_workers=cfg["jobs"]) as pool:
            results = list(pool.map(_replicate_task, tasks, chunksize=4))
    else:
        results = [_replicate_task(t) for t in tasks]

    failures = [r for r in results if "error" in r]
    for f in failures:
        log.warning("scenario %s m=%s replicate %s failed: %s", f["scenario"], f["m"], f["replicate"], f["error"])
    rows = [row for r in results if "rows" in r for row in r["rows"]]
    per_rep = pd.DataFrame(rows, columns=["scenario", "m", "replicate", "strategy", "metric", "time", "value"])
    per_rep = per_rep.sort_values(["scenario", "m", "replicate", "strategy", "metric", "time"], kind="stable")
    manifest = {
        "config": {k: v for k, v in cfg.items() if k != "out"},
        "seed_scheme": "SeedSequence([seed, scenario, m, replicate, stream]); stream 0 training, 1 validation",
        "grids": grids,
        "versions": _versions(),
        "n_tasks": len(tasks),
        "n_failed": len(failures),
        "failures": failures,
        "em_flags": {f"{r['scenario']}/{r['m']}/{r['replicate']}": r["flags"]
                     for r in results if r.get("flags") and any(r["flags"].values())},
        "wall_seconds": time.time() - t0,
    }
    _to_json(manifest, out / "manifest.json")
    if len(failures) > FAILURE_LIMIT * len(tasks):
        raise CureModelError(f"{len(failures)} of {len(tasks)} replicates failed (limit {FAILURE_LIMIT:.0%})")
    _to_csv(per_rep, out / "replicates.csv")
    inc, lat = aggregate(per_rep)
    _to_csv(inc, out / "incidence_table.csv")
    _to_csv(lat, out / "latency_curves.csv")
    return manifest


def cmd_experiment(args) -> int:
    cfg = _merge_config(args)
    manifest = run_experiment(cfg)
    log.info("experiment finished: %d replicate fits, %d failed, %.1fs", manifest["n_tasks"],
             manifest["n_failed"], manifest["wall_seconds"])
    return EXIT_OK


# -- parser -------------------------------------------------------------------------


def _data_args(p, roles=True):
    p.add_argument("--longitudinal", required=True, help="long-format CSV subject_id,covariate,time,value")
    p.add_argument("--subjects", required=True, help="CSV subject_id,time,event,<baseline covariates>")
    if roles:
        p.add_argument("--incidence-cols", type=_names, default=None,
                       help="baseline columns for the incidence model (default: all extra columns)")
        p.add_argument("--latency-cols", type=_names, default=None,
                       help="baseline columns for the latency model (default: none)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="curemark", description="Landmark prediction with mixture cure models.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="write simulated replicate datasets")
    p.add_argument("--scenario", type=int, required=True)
    p.add_argument("--m", type=int, default=300)
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--validation", action="store_true", help="also write the matched validation set")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", parents=[common], help="fit a landmark cure model")
    _data_args(p)
    p.add_argument("--landmark", type=float, required=True)
    p.add_argument("--summary", choices=["blup", "model_based", "locf"], default="blup")
    p.add_argument("--longitudinal-cols", type=_names, default=None)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", parents=[common], help="predict cure probabilities and survival curves")
    _data_args(p, roles=False)
    p.add_argument("--fit", required=True)
    p.add_argument("--horizons", type=_floats, required=True, help="study times after the landmark")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="score fitted models or a prediction file")
    _data_args(p, roles=False)
    p.add_argument("--fit", action="append", default=[], help="fit JSON; repeat to compare strategies")
    p.add_argument("--predictions", help="prediction CSV to score instead of a fit")
    p.add_argument("--landmark", type=float, help="landmark time (only with --predictions)")
    p.add_argument("--label", help="strategy label for --predictions")
    p.add_argument("--grid", type=_floats, help="study times for time-dependent metrics")
    p.add_argument("--cv", type=int, nargs="*", metavar=("FOLDS", "REPEATS"),
                   help="repeated cross-validation (default 4 folds x 10 repeats)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--summary-json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", parents=[common], help="run the simulation grid")
    p.add_argument("--config", help="JSON file; command-line flags take precedence")
    p.add_argument("--scenarios", type=_ints)
    p.add_argument("--m", type=_ints)
    p.add_argument("--replicates", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--strategies", type=_names)
    p.add_argument("--grid", type=_floats)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "cv", None) is not None:
        if len(args.cv) == 0:
            args.cv = [4, 10]
        if len(args.cv) != 2 or min(args.cv) < 1:
            parser.error("--cv takes FOLDS REPEATS")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"curemark: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CureModelError, ConvergenceError, BoundaryError, np.linalg.LinAlgError) as exc:
        print(f"curemark: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"curemark: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
