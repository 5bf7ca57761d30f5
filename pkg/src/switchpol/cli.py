"""Command-line front end: ``switchpol <command> ...``.

Exit codes: 0 success, 2 configuration/usage error, 3 generation error,
4 inversion infeasible, 5 every training start failed, 6 evaluation error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bicycle import VehicleParams, invert_inputs, yaw_residual, OMEGA
from .core import PolicyParams
from .datagen import FeatureSpec, build_features, make_suite, read_trajectory, write_trajectory
from .errors import (ArgumentError, ConfigError, FitError, FormatError, GenerationError,
                     InversionInfeasibleError, ParseError, SwitchpolError)
from .evaluation import (Dynamics, PredictionRun, joint_prediction, point_prediction, quantile_bands,
                         recursive_one_step, segment_eval)
from .learning import FitConfig, RegConfig, em_fit
from .track import TrackGeometry

log = logging.getLogger("switchpol")

EXIT_OK, EXIT_CONFIG, EXIT_GEN, EXIT_INVERSION, EXIT_FIT, EXIT_EVAL = 0, 2, 3, 4, 5, 6


class CommandError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# configuration


TOP_KEYS = {"seed", "output_dir", "scenario", "vehicle", "features", "fit", "prediction", "data", "model",
            "methods", "improper_init"}
SCENARIO_KEYS = {"suite", "T", "split", "integrator", "noise"}
DATA_KEYS = {"dataset", "train", "val", "test", "track", "integrator"}


def _load_doc(path):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = p.read_text()
    try:
        if p.suffix in (".yaml", ".yml"):
            import yaml
            doc = yaml.safe_load(text)
        else:
            doc = json.loads(text)
    except Exception as exc:  # noqa: BLE001 - any parser failure is a config error
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("top level must be a mapping")
    return doc


def _check_keys(doc, allowed, where):
    if not isinstance(doc, dict):
        raise ConfigError("expected a mapping", where)
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown}", f"{where}.{unknown[0]}" if where else unknown[0])


def _build(cls, doc, where, nested=None):
    """Instantiate a dataclass from a mapping, rejecting unknown keys."""
    doc = dict(doc or {})
    names = {f.name for f in dataclasses.fields(cls)}
    _check_keys(doc, names, where)
    for key, sub in (nested or {}).items():
        if key in doc:
            doc[key] = _build(sub, doc[key], f"{where}.{key}")
    try:
        obj = cls(**doc)
        if hasattr(obj, "validate"):
            obj.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), where) from None
    return obj


class RunConfig:
    """Validated top-level configuration; relative paths resolve against the
    config file's directory."""

    def __init__(self, path, seed_override=None):
        self.path = Path(path)
        self.base = self.path.parent
        doc = _load_doc(path)
        _check_keys(doc, TOP_KEYS, "")
        self.doc = doc
        seed = doc.get("seed", 0)
        if seed_override is not None:
            seed = seed_override
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError("seed must be an integer", "seed")
        self.seed = seed
        self.output_dir = self.resolve(doc.get("output_dir", "out"), must_exist=False)
        self.vehicle = _build(VehicleParams, doc.get("vehicle"), "vehicle")
        self.features_doc = doc.get("features")
        self.fspec = None if self.features_doc is None else _build(FeatureSpec, self.features_doc, "features")
        fit = dict(doc.get("fit") or {})
        fit.setdefault("seed", self.seed)
        if seed_override is not None:
            fit["seed"] = seed_override
        self.fit = _build(FitConfig, fit, "fit", nested={"reg": RegConfig})
        pred = dict(doc.get("prediction") or {})
        pred.setdefault("seed", self.seed)
        if seed_override is not None:
            pred["seed"] = seed_override
        self.prediction = _build(PredictionRun, pred, "prediction")

    def resolve(self, p, must_exist=True, where=None):
        q = Path(p)
        if not q.is_absolute():
            q = self.base / q
        if must_exist and not q.exists():
            raise ConfigError(f"path {p} does not exist", where)
        return q

    def section(self, name, allowed):
        sec = self.doc.get(name)
        if sec is None:
            raise ConfigError("missing section", name)
        _check_keys(sec, allowed, name)
        return sec


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command, inputs, outputs, seed=None, extra=None):
    import scipy
    doc = {
        "command": command,
        "seed": seed,
        "inputs": {str(p): _sha256(p) for p in inputs if Path(p).exists()},
        "outputs": {str(p): _sha256(p) for p in outputs if Path(p).exists()},
        "versions": {"switchpol": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "threads": _thread_cap(),
    }
    if extra:
        doc.update(extra)
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
    return path


def _thread_cap():
    raw = os.environ.get("SWITCHPOL_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"SWITCHPOL_THREADS must be a positive integer, got {raw!r}", "SWITCHPOL_THREADS") from None
    return n


def _apply_thread_cap():
    n = _thread_cap()
    if n is not None:
        import numba
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# ---------------------------------------------------------------------------
# dataset handling


class Dataset:
    def __init__(self, cfg: RunConfig, need=("train",)):
        sec = cfg.section("data", DATA_KEYS)
        meta = {}
        if "dataset" in sec:
            ds_path = cfg.resolve(sec["dataset"], where="data.dataset")
            with open(ds_path) as f:
                meta = json.load(f)
            ds_base = ds_path.parent
        self.paths = {}
        for split in ("train", "val", "test"):
            if split in sec:
                self.paths[split] = [cfg.resolve(p, where=f"data.{split}") for p in sec[split]]
            else:
                self.paths[split] = [ds_base / p for p in meta.get(split, [])] if meta else []
        for split in need:
            if not self.paths[split]:
                raise ConfigError("no trajectories listed", f"data.{split}")
        track = sec.get("track", None)
        self.track_path = None
        if track is not None:
            self.track_path = cfg.resolve(track, where="data.track")
        elif meta.get("track"):
            self.track_path = ds_base / meta["track"]
        self.track = None if self.track_path is None else TrackGeometry.load(self.track_path)
        if cfg.fspec is not None:
            self.fspec = cfg.fspec
        elif meta.get("features"):
            self.fspec = FeatureSpec.from_dict(meta["features"])
        else:
            raise ConfigError("no feature spec (set `features` or use a generated dataset)", "features")
        self.integrator = sec.get("integrator", meta.get("integrator", "euler"))
        self.vehicle = cfg.vehicle if cfg.doc.get("vehicle") is not None else \
            VehicleParams(**meta["vehicle"]) if meta.get("vehicle") else cfg.vehicle
        self._cache = {}

    def inputs_for(self, split):
        return [p for p in self.paths[split]]

    def load(self, split):
        if split not in self._cache:
            out = []
            for p in self.paths[split]:
                traj = read_trajectory(p)
                U = invert_inputs(traj.states, traj.dt, self.vehicle)
                out.append((traj, U))
            self._cache[split] = out
        return self._cache[split]

    def sequences(self, split):
        return [build_features(t, U, self.fspec, self.track) for t, U in self.load(split)]

    def dynamics(self, dt):
        return Dynamics(self.vehicle, self.integrator, dt)

    def all_inputs(self):
        files = [p for s in self.paths.values() for p in s]
        files += [Path(str(p)[:-4] + ".json") for s in self.paths.values() for p in s]
        if self.track_path is not None:
            files.append(self.track_path)
        return files


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    cfg = RunConfig(args.config, args.seed_override)
    sc = cfg.section("scenario", SCENARIO_KEYS)
    suite_name = sc.get("suite", "lane-keeping")
    try:
        split = tuple(sc["split"]) if "split" in sc else None
        suite = make_suite(suite_name, seed=cfg.seed, split=split, T=sc.get("T"),
                           integrator=sc.get("integrator", "euler"), noise=sc.get("noise", 1.0),
                           vehicle=cfg.vehicle)
    except GenerationError:
        raise
    except ArgumentError as exc:
        raise ConfigError(str(exc), "scenario") from None
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    written = []
    track_path = out / "track.json"
    suite.track.save(track_path)
    gen_path = out / "generator.json"
    suite.generator.save(gen_path)
    written += [track_path, gen_path]
    listing = {}
    seeds = {}
    k = 0
    for split in ("train", "val", "test"):
        listing[split] = []
        for i, traj in enumerate(getattr(suite, split)):
            p = out / f"{split}_{i:02d}.csv"
            write_trajectory(traj, p)
            listing[split].append(p.name)
            seeds[p.name] = cfg.seed + k
            k += 1
            written += [p, Path(str(p)[:-4] + ".json")]
    ds = {"suite": suite_name, "track": track_path.name, "generator": gen_path.name,
          "features": suite.fspec.to_dict(), "vehicle": suite.vehicle.to_dict(),
          "integrator": suite.integrator, **listing}
    ds_path = out / "dataset.json"
    with open(ds_path, "w") as f:
        json.dump(ds, f, indent=1, sort_keys=True)
    written.append(ds_path)
    write_manifest(out / "manifest.json", "gen-data", [cfg.path], written, cfg.seed, {"trajectory_seeds": seeds})
    print(json.dumps({"suite": suite_name, "seeds": seeds}, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_estimate_inputs(args):
    traj_path = Path(args.trajectory)
    if not traj_path.exists():
        raise ConfigError(f"trajectory {traj_path} does not exist", "trajectory")
    vehicle = VehicleParams()
    if args.vehicle:
        doc = _load_doc(args.vehicle)
        vehicle = _build(VehicleParams, doc.get("vehicle", doc), "vehicle")
    traj = read_trajectory(traj_path)
    if traj.T < 2:
        raise ConfigError("trajectory too short", "trajectory")
    U = invert_inputs(traj.states, traj.dt, vehicle, tol=args.tol)
    X = traj.states
    res = yaw_residual(X[:-1], U[:, 1], (X[1:, OMEGA] - X[:-1, OMEGA]) / traj.dt, vehicle)
    out = Path(args.output) if args.output else traj_path.with_name(traj_path.stem + "_inputs.csv")
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "a", "delta", "residual"])
        for t in range(U.shape[0]):
            w.writerow([t, f"{U[t, 0]:.17g}", f"{U[t, 1]:.17g}", f"{res[t]:.17g}"])
    summary = {"steps": int(U.shape[0]), "max_abs_residual": float(np.abs(res).max())}
    if traj.inputs is not None:
        summary["max_input_error"] = float(np.abs(U - traj.inputs[:-1]).max())
    write_manifest(Path(str(out) + ".manifest.json"), "estimate-inputs", [traj_path], [out], None)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_train(args):
    cfg = RunConfig(args.config, args.seed_override)
    ds = Dataset(cfg, need=("train",))
    train = ds.sequences("train")
    val = ds.sequences("val") if ds.paths["val"] else None
    report = em_fit(train, cfg.fit, validation=val)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    model_path = out / "model.json"
    report.params.save(model_path)
    rep = report.to_dict()
    rep.pop("params")
    rep.pop("wall_time")
    rep["features"] = ds.fspec.to_dict()
    rep["fit_config"] = cfg.fit.to_dict()
    rep_path = out / "report.json"
    with open(rep_path, "w") as f:
        json.dump(rep, f, indent=1, sort_keys=True)
    trace_path = out / "trace.csv"
    report.write_trace_csv(trace_path)
    write_manifest(out / "manifest.json", "train", [cfg.path] + ds.all_inputs(), [model_path, rep_path, trace_path],
                   cfg.fit.seed)
    summary = {"objective": report.trace[-1], "iterations": report.n_iter, "best_seed": report.best_seed,
               "certificate": report.certificate is not None}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _load_model(cfg, key="model"):
    p = cfg.resolve(cfg.doc.get(key) or "", where=key) if cfg.doc.get(key) else None
    if p is None:
        raise ConfigError("missing model path", key)
    try:
        return PolicyParams.load(p), p
    except (FormatError, ValueError, OSError) as exc:
        raise ConfigError(f"cannot load model: {exc}", key) from None


def cmd_predict(args):
    cfg = RunConfig(args.config, args.seed_override)
    params, model_path = _load_model(cfg)
    ds = Dataset(cfg, need=("test",))
    run = cfg.prediction
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    imp = cfg.doc.get("improper_init")
    if imp is not None:
        _check_keys(imp, {"u0", "uniform_mode"}, "improper_init")
    written = []
    try:
        for k, (traj, U) in enumerate(ds.load("test")):
            win = traj.window(0, run.n_init + run.horizon)
            fn = joint_prediction if run.mode == "joint" else recursive_one_step
            kw = {}
            if imp is not None:
                kw["u0"] = imp.get("u0")
                if imp.get("uniform_mode", True):
                    kw["prior0"] = np.full(params.d, 1.0 / params.d)
            ro = fn(params, win, U, ds.fspec, ds.dynamics(traj.dt), run, ds.track, **kw)
            written.append(_write_plot_data(out / f"predict_{k:02d}.csv", win.states[run.n_init:run.n_init + run.horizon],
                                            point_prediction(ro, run.trim), quantile_bands(ro.states[ro.complete])))
    except SwitchpolError as exc:
        raise CommandError(f"prediction failed: {exc}", EXIT_EVAL) from None
    write_manifest(out / "manifest.json", "predict", [cfg.path, model_path] + ds.all_inputs(), written, run.seed)
    print(json.dumps({"files": [str(p) for p in written]}))
    return EXIT_OK


def _write_plot_data(path, truth, pred, band):
    from .bicycle import STATE_NAMES
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        hdr = ["step"]
        for s in STATE_NAMES:
            hdr += [f"{s}_true", f"{s}_pred"] + ([f"{s}_q25", f"{s}_q75"] if band is not None else [])
        w.writerow(hdr)
        for h in range(truth.shape[0]):
            row = [h]
            for j in range(truth.shape[1]):
                row += [f"{truth[h, j]:.10g}", f"{pred[h, j]:.10g}"]
                if band is not None:
                    row += [f"{band[0, h, j]:.10g}", f"{band[1, h, j]:.10g}"]
            w.writerow(row)
    return path


def cmd_evaluate(args):
    cfg = RunConfig(args.config, args.seed_override)
    methods_doc = cfg.doc.get("methods")
    if not isinstance(methods_doc, dict) or not methods_doc:
        raise ConfigError("expected a mapping of method names to model paths or 'CC'", "methods")
    methods, model_files = {}, []
    for name, ref in methods_doc.items():
        if isinstance(ref, str) and ref.upper() == "CC":
            methods[name] = "CC"
            continue
        p = cfg.resolve(ref, where=f"methods.{name}")
        try:
            methods[name] = PolicyParams.load(p)
        except (FormatError, ValueError, OSError) as exc:
            raise ConfigError(f"cannot load model: {exc}", f"methods.{name}") from None
        model_files.append(p)
    ds = Dataset(cfg, need=("test",))
    data = ds.load("test")
    sink = []
    try:
        table = segment_eval(methods, [t for t, _ in data], [u for _, u in data], ds.fspec,
                             ds.dynamics(data[0][0].dt), cfg.prediction, ds.track, plot_sink=sink)
    except SwitchpolError as exc:
        raise CommandError(f"evaluation failed: {exc}", EXIT_EVAL) from None
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / "metrics.csv", out / "metrics.json"
    table.to_csv(csv_path)
    table.to_json(json_path)
    written = [csv_path, json_path]
    first = {}
    for rec in sink:
        if rec["trajectory"] == 0 and rec["segment"] == 0:
            first[rec["method"]] = rec
    for name, rec in first.items():
        safe = "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in name)
        written.append(_write_plot_data(out / f"plot_{safe}.csv", rec["truth"], rec["pred"], rec["band"]))
    write_manifest(out / "manifest.json", "evaluate", [cfg.path] + model_files + ds.all_inputs(), written,
                   cfg.prediction.seed)
    print(table.format())
    return EXIT_OK


def cmd_plot(args):
    inputs = [Path(p) for p in args.inputs]
    missing = [str(p) for p in inputs if not p.exists()]
    if missing:
        raise ConfigError(f"missing plot input(s): {missing}", "inputs")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from .bicycle import STATE_NAMES
    out = Path(args.output_dir) if args.output_dir else inputs[0].parent
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for p in inputs:
        with open(p, newline="") as f:
            rows = list(csv.reader(f))
        if len(rows) < 2:
            raise ConfigError(f"{p} holds no data", "inputs")
        hdr = rows[0]
        try:
            data = np.array(rows[1:], dtype=float)
        except ValueError:
            raise ConfigError(f"{p} is not a plot-data file", "inputs") from None
        col = {h: i for i, h in enumerate(hdr)}
        if "step" not in col:
            raise ConfigError(f"{p} is not a plot-data file", "inputs")
        fig, axes = plt.subplots(3, 2, figsize=(10, 8), sharex=True)
        for ax, s in zip(axes.ravel(), STATE_NAMES):
            if f"{s}_true" not in col:
                continue
            step = data[:, col["step"]]
            ax.plot(step, data[:, col[f"{s}_true"]], "k-", label="truth")
            ax.plot(step, data[:, col[f"{s}_pred"]], "C0--", label="prediction")
            if f"{s}_q25" in col:
                ax.fill_between(step, data[:, col[f"{s}_q25"]], data[:, col[f"{s}_q75"]], color="C0", alpha=0.25,
                                label="0.25-0.75")
            ax.set_ylabel(s)
        axes[0, 0].legend(fontsize=8)
        fig.tight_layout()
        svg = out / (p.stem + ".svg")
        fig.savefig(svg, metadata={"Date": None})
        plt.close(fig)
        written.append(svg)
    write_manifest(out / "plot_manifest.json", "plot", inputs, written)
    print(json.dumps({"files": [str(p) for p in written]}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    ap = argparse.ArgumentParser(prog="switchpol", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("config", help="YAML or JSON run configuration")
        p.add_argument("--seed-override", type=int, default=None)

    p = sub.add_parser("gen-data", help="generate a synthetic suite")
    with_config(p)
    p.set_defaults(func=cmd_gen_data)
    p = sub.add_parser("estimate-inputs", help="invert the dynamics of a trajectory file")
    p.add_argument("trajectory")
    p.add_argument("--vehicle", default=None, help="config file with a `vehicle` section")
    p.add_argument("-o", "--output", default=None)
    p.add_argument("--tol", type=float, default=1e-10)
    p.set_defaults(func=cmd_estimate_inputs)
    p = sub.add_parser("train", help="fit a switching policy")
    with_config(p)
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("predict", help="roll out a fitted policy on test trajectories")
    with_config(p)
    p.set_defaults(func=cmd_predict)
    p = sub.add_parser("evaluate", help="segment-based comparison of methods")
    with_config(p)
    p.set_defaults(func=cmd_evaluate)
    p = sub.add_parser("plot", help="render plot-data CSV files as SVG")
    p.add_argument("inputs", nargs="+")
    p.add_argument("-o", "--output-dir", default=None)
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        _apply_thread_cap()
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, FormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ParseError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GenerationError as exc:
        print(f"generation error: {exc}", file=sys.stderr)
        return EXIT_GEN
    except InversionInfeasibleError as exc:
        print(f"inversion infeasible at t={exc.t}: {exc}", file=sys.stderr)
        return EXIT_INVERSION
    except FitError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_FIT
    except ArgumentError as exc:
        print(f"argument error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
