"""Command line entry point: ``delaybench {synth,run,importance,report}``."""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, data, metrics
from .models import (
    VARIANTS,
    GroupStructure,
    UnsupportedModelError,
    feature_importance,
    fit,
    load_model,
    save_model,
)
from .report import CellResult, ExperimentReport, IncompleteReportError, emit_tables
from .tuning import cross_validate, derive_seed, grid_for, load_grid_overrides

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger("delaybench")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2
SAVED_FAMILIES = ("RF", "GBM")


class ConfigError(ValueError):
    pass


def available_parallelism() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover
        return os.cpu_count() or 1


@dataclass
class RunConfig:
    seed: int
    csv: str | None = None
    synth: data.SynthConfig = field(default_factory=data.SynthConfig)
    variants: tuple = tuple(VARIANTS)
    predictor_sets: tuple = ("subj", "obj", "comb")
    K: int = 4
    n_splits: int = 10
    train_fraction: float = 0.8
    normalization: str = "all_rows"
    grids: str | None = None
    out: str = "delaybench-out"
    format: str = "csv"
    jobs: int = 0
    save_models: bool = True

    def validate(self) -> None:
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ConfigError("seed must be an integer")
        if not self.variants:
            raise ConfigError("at least one algorithm is required")
        unknown = [v for v in self.variants if v not in VARIANTS]
        if unknown:
            raise ConfigError(f"unknown algorithm {unknown[0]!r}; choose from {', '.join(VARIANTS)}")
        if len(set(self.variants)) != len(self.variants):
            raise ConfigError("algorithms listed twice")
        if not self.predictor_sets:
            raise ConfigError("at least one predictor set is required")
        for p in self.predictor_sets:
            if p not in ("subj", "obj", "comb"):
                raise ConfigError(f"unknown predictor set {p!r}")
        if self.K < 2:
            raise ConfigError("K must be at least 2")
        if self.n_splits < 2:
            raise ConfigError("n_splits must be at least 2 (SD needs two entries)")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.normalization not in ("all_rows", "train_only"):
            raise ConfigError("normalization must be all_rows or train_only")
        if self.format not in ("csv", "md", "markdown"):
            raise ConfigError("format must be csv or md")
        if self.jobs < 0:
            raise ConfigError("jobs must be non-negative (0 = all cores)")
        if self.csv is None:
            try:
                self.synth.validate()
            except ValueError as exc:
                raise ConfigError(f"synthetic data: {exc}") from None

    @property
    def n_jobs(self) -> int:
        return self.jobs or available_parallelism()

    def fingerprint(self) -> str:
        """Hash of everything that shapes a cell's numbers.

        Algorithm and predictor-set selections are left out so that a run can
        be widened later and keep its finished cells.
        """
        payload = {
            "seed": self.seed,
            "csv": self.csv,
            "synth": None if self.csv else dataclasses.asdict(self.synth),
            "K": self.K,
            "n_splits": self.n_splits,
            "train_fraction": self.train_fraction,
            "normalization": self.normalization,
            "grids": load_grid_overrides(self.grids) if self.grids else None,
        }
        text = json.dumps(payload, sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["variants"] = list(self.variants)
        out["predictor_sets"] = list(self.predictor_sets)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d["synth"] = data.SynthConfig(**d.get("synth", {}))
        d["variants"] = tuple(d.get("variants", VARIANTS))
        d["predictor_sets"] = tuple(d.get("predictor_sets", ("subj", "obj", "comb")))
        return cls(**d)


_SYNTH_FIELDS = {f.name for f in dataclasses.fields(data.SynthConfig)}


def synth_config(values: dict) -> data.SynthConfig:
    """SynthConfig from a mapping. A bare ``n_assignments`` shrinks the
    student and course pools in proportion so small sets stay valid."""
    unknown = set(values) - _SYNTH_FIELDS
    if unknown:
        raise ConfigError(f"unknown synth setting {sorted(unknown)[0]!r}")
    values = dict(values)
    if "column_targets" in values:
        values["column_targets"] = {
            **data.COLUMN_TARGETS, **{k: tuple(v) for k, v in values["column_targets"].items()}
        }
    base = data.SynthConfig()
    n = values.get("n_assignments")
    if n is not None and n < base.n_assignments:
        ratio = n / base.n_assignments
        values.setdefault("n_courses", max(1, round(base.n_courses * ratio)))
        values.setdefault("n_students", max(1, round(base.n_students * ratio)))
    return data.SynthConfig(**{**dataclasses.asdict(base), **values})


def load_config(path=None, **overrides) -> RunConfig:
    """Read a TOML run file; keyword overrides (from flags) win when not None.

    Relative paths inside the file resolve against the file's directory.
    """
    doc, root = {}, Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            with path.open("rb") as fh:
                doc = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        root = path.parent
    known = {"seed", "data", "experiment", "output"}
    if set(doc) - known:
        raise ConfigError(f"unknown config section {sorted(set(doc) - known)[0]!r}")
    data_sec = dict(doc.get("data", {}))
    exp = dict(doc.get("experiment", {}))
    out = dict(doc.get("output", {}))

    def resolve(p):
        return None if p is None else str((root / p) if not Path(p).is_absolute() else Path(p))

    kw = {}
    if "seed" in doc:
        kw["seed"] = doc["seed"]
    if "csv" in data_sec:
        kw["csv"] = resolve(data_sec.pop("csv"))
    kw["synth"] = synth_config(data_sec.pop("synth", {}))
    if data_sec:
        raise ConfigError(f"unknown data setting {sorted(data_sec)[0]!r}")
    for key in ("variants", "predictor_sets"):
        if key in exp:
            kw[key] = tuple(exp.pop(key))
    for key in ("K", "n_splits", "train_fraction", "normalization"):
        if key in exp:
            kw[key] = exp.pop(key)
    if "grids" in exp:
        kw["grids"] = resolve(exp.pop("grids"))
    if exp:
        raise ConfigError(f"unknown experiment setting {sorted(exp)[0]!r}")
    if "dir" in out:
        kw["out"] = resolve(out.pop("dir"))
    for key in ("format", "jobs", "save_models"):
        if key in out:
            kw[key] = out.pop(key)
    if out:
        raise ConfigError(f"unknown output setting {sorted(out)[0]!r}")
    kw.update({k: v for k, v in overrides.items() if v is not None})
    if "seed" not in kw:
        raise ConfigError("a seed is required (config 'seed' or --seed)")
    try:
        cfg = RunConfig(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------
# pipeline


def load_dataset(cfg: RunConfig) -> data.Dataset:
    if cfg.csv:
        return data.drop_missing(data.load_csv(cfg.csv))
    return data.generate_synthetic(cfg.synth, seed=cfg.seed)


def cell_seed(master_seed: int, split: int, pset: str, variant: str) -> int:
    return derive_seed(master_seed, split, pset, variant)


@dataclass
class CellTask:
    variant: str
    predictor_set: str
    split: int
    seed: int
    dataset: data.Dataset
    train: np.ndarray
    test: np.ndarray
    normalization: str
    K: int
    grid_overrides: dict | None
    model_path: str | None


def run_cell(task: CellTask) -> CellResult:
    """Tune on the training rows, refit the winner, score the test rows."""
    cell = CellResult(task.variant, task.predictor_set, task.split)
    try:
        ds = task.dataset
        scales = data.fit_normalizer(ds, task.normalization, task.train)
        nd = data.apply_normalizer(ds, scales)
        X, y = data.project(nd, task.predictor_set)
        names = list(data.PredictorSet(task.predictor_set).columns)
        groups = GroupStructure(*ds.group_codes())
        tr, te = task.train, task.test
        family = VARIANTS[task.variant][0]
        grid = grid_for(task.variant, task.grid_overrides, n_features=X.shape[1])
        # after max-abs scaling the training targets span [-1, 1]
        cv = cross_validate(
            family, grid, X[tr], y[tr], groups.subset(tr), K=task.K, seed=task.seed,
            y_max=1.0, feature_names=names,
        )
        best = cv.best_score
        model = fit(best.config, X[tr], y[tr], seed=task.seed, groups=groups.subset(tr), feature_names=names)
        pred = model.predict(X[te], groups.subset(te))
        cell.test = metrics.evaluate(pred, y[te], 1.0).as_dict()
        cell.cv_mean_g, cell.cv_sd_g = best.mean_g, best.sd_g
        cell.best_config = best.config.as_dict()["params"]
        cell.feature_names = names
        cell.delay_scale = float(scales.y_max)
        if family in SAVED_FAMILIES:
            cell.importance = feature_importance(model).tolist()
            if task.model_path:
                model.meta["feature_names"] = names
                save_model(model, task.model_path)
    except Exception as exc:  # one bad cell must not sink the run
        cell.error = f"{type(exc).__name__}: {exc}"
        log.debug("cell %s failed\n%s", cell.key, traceback.format_exc())
    return cell


def _timed(task: CellTask):
    t0 = time.perf_counter()
    cell = run_cell(task)
    return cell, time.perf_counter() - t0


def _cell_file(out: Path, key) -> Path:
    variant, pset, split = key
    return out / "cells" / f"{variant}__{pset}__{split:02d}.json"


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _load_cell(path: Path):
    doc = json.loads(path.read_text(encoding="utf-8"))
    return CellResult(**doc["result"]), float(doc.get("seconds", 0.0))


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    run_file = out / "run.json"
    fp = cfg.fingerprint()
    if run_file.exists():
        prev = json.loads(run_file.read_text(encoding="utf-8"))
        if prev.get("fingerprint") != fp:
            raise ConfigError(
                f"{out} holds cells from a different configuration; pick another --out"
            )
        # widen the stored selection rather than forget earlier cells
        stored = RunConfig.from_dict(prev["config"])
        variants = list(dict.fromkeys(list(stored.variants) + list(cfg.variants)))
        psets = list(dict.fromkeys(list(stored.predictor_sets) + list(cfg.predictor_sets)))
    else:
        variants, psets = list(cfg.variants), list(cfg.predictor_sets)
    stored_cfg = dataclasses.replace(cfg, variants=tuple(variants), predictor_sets=tuple(psets))
    doc = {"fingerprint": fp, "version": __version__, "config": stored_cfg.to_dict()}
    _write_atomic(run_file, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return out


def build_report(cfg: RunConfig, cells: dict, n_rows: int, dropped: int) -> ExperimentReport:
    report = ExperimentReport(tuple(cfg.variants), tuple(cfg.predictor_sets), cfg.n_splits)
    for key in report.expected_keys():
        if key in cells:
            report.add(cells[key])
    report.meta = {
        "seed": cfg.seed,
        "config_fingerprint": cfg.fingerprint(),
        "version": __version__,
        "K": cfg.K,
        "train_fraction": cfg.train_fraction,
        "normalization": cfg.normalization,
        "n_rows": n_rows,
        "dropped_rows": dropped,
        "cell_seeds": {
            f"{v}/{p}/{s}": cell_seed(cfg.seed, s, p, v) for v, p, s in report.expected_keys()
        },
    }
    return report


def run_experiment(cfg: RunConfig, progress=None) -> tuple[ExperimentReport, list]:
    """Execute (or resume) every cell, persist it, and return the report
    together with the failed cells."""
    out = _prepare_out(cfg)
    ds = load_dataset(cfg)
    plan = data.make_split_plan(len(ds), derive_seed(cfg.seed, "splits"), cfg.n_splits, cfg.train_fraction)
    overrides = load_grid_overrides(cfg.grids) if cfg.grids else None
    models_dir = out / "models"
    if cfg.save_models:
        models_dir.mkdir(exist_ok=True)

    cells, timings, tasks = {}, {}, []
    for s, (train, test) in enumerate(plan.partitions):
        for p in cfg.predictor_sets:
            for v in cfg.variants:
                key = (v, p, s)
                path = _cell_file(out, key)
                if path.exists():
                    cell, secs = _load_cell(path)
                    if cell.ok:
                        cells[key], timings[key] = cell, secs
                        continue
                model_path = None
                if cfg.save_models and VARIANTS[v][0] in SAVED_FAMILIES:
                    model_path = str(models_dir / f"{v}__{p}__{s:02d}.npz")
                tasks.append(CellTask(v, p, s, cell_seed(cfg.seed, s, p, v), ds, train, test,
                                      cfg.normalization, cfg.K, overrides, model_path))
    log.info("%d cells done, %d to run on %d worker(s)", len(cells), len(tasks), cfg.n_jobs)

    def record(cell, secs):
        doc = {"result": dataclasses.asdict(cell), "seconds": secs}
        _write_atomic(_cell_file(out, cell.key), json.dumps(doc, sort_keys=True) + "\n")
        cells[cell.key], timings[cell.key] = cell, secs
        status = "ok" if cell.ok else f"FAILED ({cell.error})"
        log.info("%s/%s/split%d %.1fs %s", *cell.key, secs, status)
        if progress:
            progress(cell)

    if cfg.n_jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.n_jobs) as pool:
            for fut in as_completed([pool.submit(_timed, t) for t in tasks]):
                record(*fut.result())
    else:
        for t in tasks:
            record(*_timed(t))

    timing_doc = {f"{v}/{p}/{s}": round(t, 3) for (v, p, s), t in sorted(timings.items())}
    _write_atomic(out / "timings.json", json.dumps(timing_doc, indent=2) + "\n")
    report = build_report(cfg, cells, len(ds), ds.dropped)
    failed = [c for c in report.cells.values() if not c.ok]
    return report, failed


def load_persisted(cfg_or_out) -> tuple[RunConfig, ExperimentReport]:
    """Rebuild the report of an output directory from its cell files."""
    out = Path(cfg_or_out)
    run_file = out / "run.json"
    if not run_file.exists():
        raise ConfigError(f"{out} has no run.json; run the experiment first")
    prev = json.loads(run_file.read_text(encoding="utf-8"))
    cfg = RunConfig.from_dict(prev["config"])
    cells = {}
    for path in sorted((out / "cells").glob("*.json")):
        cell, _ = _load_cell(path)
        cells[cell.key] = cell
    ds = load_dataset(cfg)
    return cfg, build_report(cfg, cells, len(ds), ds.dropped)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg: RunConfig, out_path=None) -> Path:
    ds = data.generate_synthetic(cfg.synth, seed=cfg.seed)
    path = Path(out_path) if out_path else Path(cfg.out) / "synthetic.csv"
    data.write_csv(ds, path)
    return path


def cmd_run(cfg: RunConfig) -> int:
    report, failed = run_experiment(cfg)
    for cell in failed:
        log.error("cell %s/%s/split%d failed: %s", *cell.key, cell.error)
    if failed:
        log.error("%d cell(s) failed; tables not emitted (rerun to retry them)", len(failed))
        return EXIT_FAILED
    emit_tables(report, Path(cfg.out) / "report", cfg.format)
    log.info("report written to %s", Path(cfg.out) / "report")
    return EXIT_OK


def importance_rows(model) -> list:
    names = model.meta.get("feature_names") or [f"x{j}" for j in range(model.n_features)]
    imp = feature_importance(model)
    order = np.argsort(-imp, kind="stable")
    return [(names[j], float(imp[j])) for j in order]


def cmd_importance(model_path, out_path=None, fmt="csv") -> list:
    model = load_model(model_path)
    rows = importance_rows(model)
    if fmt == "csv":
        text = "feature,importance\n" + "".join(f"{n},{v:.6f}\n" for n, v in rows)
    else:
        text = "| feature | importance |\n|---|---|\n" + "".join(f"| {n} | {v:.6f} |\n" for n, v in rows)
    if out_path:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return rows


def cmd_report(out_dir, fmt=None) -> int:
    cfg, report = load_persisted(out_dir)
    emit_tables(report, Path(out_dir) / "report", fmt or cfg.format)
    return EXIT_OK


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory or file")
    common.add_argument("--jobs", type=int, help="worker processes (0 = all cores)")
    common.add_argument("--format", choices=("csv", "md"), help="table format")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="delaybench", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", parents=[common], help="write a synthetic dataset as CSV")
    s.add_argument("--n", type=int, help="number of assignments")
    s.add_argument("--timely-fraction", type=float, help="share of timely submissions")
    sub.add_parser("run", parents=[common], help="run (or resume) the full experiment")
    i = sub.add_parser("importance", parents=[common], help="feature importance of a saved RF/GBM model")
    i.add_argument("model", help="model file written by 'run'")
    sub.add_parser("report", parents=[common], help="re-emit tables from persisted cells")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s", stream=sys.stderr,
    )
    try:
        if args.command == "importance":
            cmd_importance(args.model, args.out, args.format or "csv")
            return EXIT_OK
        if args.command == "report":
            if args.out is None and args.config is None:
                raise ConfigError("report needs --out (a run directory) or --config")
            out = args.out or load_config(args.config, seed=args.seed).out
            return cmd_report(out, args.format)
        overrides = {"seed": args.seed, "jobs": args.jobs, "format": args.format}
        if args.command == "synth":
            cfg = load_config(args.config, **overrides)
            values = dataclasses.asdict(cfg.synth)
            if args.n is not None or args.timely_fraction is not None:
                extra = {}
                if args.n is not None:
                    extra["n_assignments"] = args.n
                if args.timely_fraction is not None:
                    extra["target_timely_fraction"] = args.timely_fraction
                if args.n is not None:
                    values = {k: v for k, v in values.items() if k not in ("n_students", "n_courses")}
                values.update(extra)
                cfg.synth = synth_config(values)
                try:
                    cfg.synth.validate()
                except ValueError as exc:
                    raise ConfigError(f"synthetic data: {exc}") from None
            path = cmd_synth(cfg, args.out)
            log.info("wrote %s", path)
            return EXIT_OK
        cfg = load_config(args.config, out=args.out, **overrides)
        return cmd_run(cfg)
    except (ConfigError, data.DataError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except UnsupportedModelError as exc:
        log.error("%s", exc)
        return EXIT_FAILED
    except IncompleteReportError as exc:
        log.error("%s", exc)
        return EXIT_FAILED


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
