"""Experiment protocols: full data, low-target sweep and low-source sweep.

A sweep is a grid of cells ``(method, grid_value, seed)``. Every cell is an
independent task whose randomness is derived from ``(master_seed, seed)``
only, so results do not depend on scheduling or on which other cells run.
Finished cells leave a JSON marker in ``<out_dir>/cells`` that later runs
reuse instead of recomputing.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
import platform
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import __version__
from .adaptation import TrainConfig, fit
from .bec import correct_pair
from .data import LabeledDataset, PreprocessStats, align_genes, preprocess, stratified_split, subsample_fraction
from .metrics import accuracy, domain_probe, mmd_rbf
from .models import embed, predict

log = logging.getLogger(__name__)


class MethodId(str, enum.Enum):
    TARGET_ONLY = "target_only"
    NO_ADAPTATION = "no_adaptation"
    COMBAT = "combat"
    LIMMA = "limma"
    DANN_UNSUP = "dann_unsup"
    DANN_SUP = "dann_sup"
    WASS_UNSUP = "wass_unsup"
    WASS_SUP = "wass_sup"

    @classmethod
    def parse(cls, name) -> MethodId:
        try:
            return cls(name)
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown method {name!r}; expected one of {valid}") from None


ALL_METHODS = tuple(m.value for m in MethodId)
EXPERIMENTS = ("full_data", "target_sweep", "source_sweep")

TARGET_GRID = tuple(round(0.01 * i, 2) for i in range(1, 21))
SOURCE_GRID = tuple(round(0.001 * i, 3) for i in range(1, 11)) + (0.02,)
SOURCE_GRID_EXTENDED = SOURCE_GRID + (0.05, 0.1, 0.2, 0.5, 0.7, 1.0)
SOURCE_SWEEP_P = 0.01
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
MIN_PROBE_SAMPLES = 20  # per domain, below this the diagnostics are left blank

RESULT_COLUMNS = ("experiment", "method", "grid_value", "seed", "accuracy", "domain_probe", "mmd", "seconds")
SUMMARY_COLUMNS = (
    "experiment",
    "method",
    "grid_value",
    "n",
    "failed",
    "accuracy_mean",
    "accuracy_std",
    "domain_probe_mean",
    "domain_probe_std",
    "mmd_mean",
    "mmd_std",
)


def default_grid(experiment: str, preset: str = "default") -> tuple[float, ...]:
    if experiment == "full_data":
        return (1.0,)
    if experiment == "target_sweep":
        return TARGET_GRID
    if experiment == "source_sweep":
        if preset == "extended":
            return SOURCE_GRID_EXTENDED
        if preset != "default":
            raise ValueError(f"unknown grid preset {preset!r}")
        return SOURCE_GRID
    raise ValueError(f"unknown experiment {experiment!r}; expected one of {', '.join(EXPERIMENTS)}")


def cell_seed(master_seed: int, seed: int) -> int:
    """Training/subsampling seed of a cell; independent of method and grid value."""
    return int(np.random.SeedSequence([master_seed, seed]).generate_state(1)[0])


# -- prepared data -----------------------------------------------------------------


@dataclass
class PreparedData:
    """Preprocessed train/val/test splits of both domains."""

    source_train: LabeledDataset
    source_val: LabeledDataset
    source_test: LabeledDataset
    target_train: LabeledDataset
    target_val: LabeledDataset
    target_test: LabeledDataset
    stats: PreprocessStats | None = None


def prepare(
    source: LabeledDataset,
    target: LabeledDataset,
    fractions: Sequence[float] = (0.8, 0.1, 0.1),
    split_seed: int = 0,
    log_transform: bool = True,
) -> PreparedData:
    """Align genes, split each domain, and standardise with source-train statistics."""
    source, target = align_genes(source, target)
    s_tr, s_va, s_te = stratified_split(source, fractions, split_seed)
    t_tr, t_va, t_te = stratified_split(target, fractions, split_seed + 1)
    s_tr, stats = preprocess(s_tr, log_transform=log_transform)
    rest = [preprocess(d, stats)[0] for d in (s_va, s_te, t_tr, t_va, t_te)]
    return PreparedData(s_tr, *rest, stats=stats)


# -- cells -------------------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    experiment: str
    method: str
    grid_value: float
    seed: int

    @property
    def key(self) -> str:
        return f"{self.experiment}__{self.method}__{self.grid_value!r}__{self.seed}"


@dataclass
class SweepOptions:
    master_seed: int = 0
    diagnostics: bool = True
    fixed_p: float = SOURCE_SWEEP_P


def _cell_data(data: PreparedData, cell: Cell, options: SweepOptions, seed: int):
    if cell.experiment == "full_data":
        return data.source_train, data.target_train
    if cell.experiment == "target_sweep":
        return data.source_train, subsample_fraction(data.target_train, cell.grid_value, seed)
    if cell.experiment == "source_sweep":
        return (
            subsample_fraction(data.source_train, cell.grid_value, seed),
            subsample_fraction(data.target_train, options.fixed_p, seed),
        )
    raise ValueError(f"unknown experiment {cell.experiment!r}")


def train_method(method: str, source_train, target_train, data: PreparedData, cfg: TrainConfig):
    """Train one method.

    Returns ``(model, history, target_test, source_test)`` with both test sets
    mapped into the space the model was trained in (batch-corrected for
    ComBat/limma).
    """
    method = MethodId.parse(method).value
    t_va, t_te, s_va, s_te = data.target_val, data.target_test, data.source_val, data.source_test
    if method == "target_only":
        model, history = fit("plain", target_train, None, cfg, target_val=t_va)
    elif method == "no_adaptation":
        model, history = fit("plain", source_train, target_train, cfg, s_va, t_va)
    elif method in ("combat", "limma"):
        pair = correct_pair(method, source_train, target_train, use_labels=True)
        t_va, t_te = pair.correct_target(t_va), pair.correct_target(t_te)
        s_te = pair.correct_source(s_te)
        model, history = fit("plain", pair.source, pair.target, cfg, None, t_va)
    else:
        model, history = fit(method, source_train, target_train, cfg, s_va, t_va)
    return model, history, t_te, s_te


def run_cell(data: PreparedData, cell: Cell, cfg: TrainConfig, options: SweepOptions) -> dict:
    """Train and evaluate one cell; failures are captured in the ``error`` field."""
    seed = cell_seed(options.master_seed, cell.seed)
    rec = {
        "experiment": cell.experiment,
        "method": cell.method,
        "grid_value": cell.grid_value,
        "seed": cell.seed,
        "accuracy": math.nan,
        "domain_probe": math.nan,
        "mmd": math.nan,
        "seconds": math.nan,
        "error": "",
    }
    start = time.perf_counter()
    try:
        source_train, target_train = _cell_data(data, cell, options, seed)
        model, _, t_te, s_te = train_method(
            cell.method, source_train, target_train, data, TrainConfig.from_dict({**cfg.to_dict(), "seed": seed})
        )
        rec["accuracy"] = accuracy(predict(model, t_te.X), t_te.y)
        if options.diagnostics and min(len(s_te), len(t_te)) >= MIN_PROBE_SAMPLES:
            z_s, z_t = embed(model, s_te.X), embed(model, t_te.X)
            rec["domain_probe"] = domain_probe(z_s, z_t, seed=seed)
            rec["mmd"] = mmd_rbf(z_s, z_t)
        elif options.diagnostics:
            log.info("cell %s: test sets too small for alignment diagnostics", cell.key)
    except Exception as exc:  # per-cell isolation: the sweep goes on
        rec["error"] = f"{type(exc).__name__}: {exc}".replace("\n", " ")
        log.warning("cell %s failed: %s", cell.key, rec["error"])
        log.debug("%s", traceback.format_exc())
    rec["seconds"] = time.perf_counter() - start
    return rec


# -- sweeps ------------------------------------------------------------------------


@dataclass
class SweepResult:
    """Records of a (possibly partial) sweep, in canonical cell order."""

    experiment: str
    grid: tuple[float, ...]
    methods: tuple[str, ...]
    seeds: tuple[int, ...]
    records: list[dict] = field(default_factory=list)
    computed: int = 0  # cells actually run (not loaded from markers) in this call
    config: dict = field(default_factory=dict)

    @property
    def expected_cells(self) -> int:
        return len(self.grid) * len(self.methods) * len(self.seeds)

    @property
    def complete(self) -> bool:
        return len(self.records) == self.expected_cells

    def accuracies(self, method: str, grid_value: float | None = None) -> np.ndarray:
        return np.array(
            [
                r["accuracy"]
                for r in self.records
                if r["method"] == method and (grid_value is None or r["grid_value"] == grid_value)
            ]
        )

    def mean_accuracy(self, method: str, grid_value: float | None = None) -> float:
        return float(np.mean(self.accuracies(method, grid_value)))


def make_cells(experiment, methods, grid, seeds) -> list[Cell]:
    return [Cell(experiment, m, float(v), int(s)) for v in grid for m in methods for s in seeds]


def _marker_path(cell_dir: Path, cell: Cell) -> Path:
    return cell_dir / f"{cell.key}.json"


def _run_cell_task(args):
    data, cell, cfg_dict, options = args
    return cell, run_cell(data, cell, TrainConfig.from_dict(cfg_dict), options)


def run_sweep(
    experiment: str,
    methods: Iterable[str],
    data: PreparedData,
    cfg: TrainConfig | None = None,
    seeds: Iterable[int] = DEFAULT_SEEDS,
    grid: Iterable[float] | None = None,
    options: SweepOptions | None = None,
    out_dir=None,
    jobs: int = 1,
    on_cell: Callable[[Cell, dict], None] | None = None,
) -> SweepResult:
    """Run every missing cell of an experiment grid.

    With ``out_dir`` each finished cell is persisted immediately and cells that
    already have a marker are loaded, not rerun. ``on_cell`` is called after
    each newly computed cell (it may raise to interrupt the sweep).
    """
    if experiment not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {experiment!r}; expected one of {', '.join(EXPERIMENTS)}")
    methods = tuple(MethodId.parse(m).value for m in methods)
    seeds = tuple(int(s) for s in seeds)
    grid = tuple(float(v) for v in (default_grid(experiment) if grid is None else grid))
    if not methods or not seeds or not grid:
        raise ValueError("methods, seeds and grid must all be non-empty")
    cfg = cfg or TrainConfig()
    options = options or SweepOptions()
    cells = make_cells(experiment, methods, grid, seeds)

    done: dict[str, dict] = {}
    cell_dir = None
    if out_dir is not None:
        cell_dir = Path(out_dir) / "cells"
        cell_dir.mkdir(parents=True, exist_ok=True)
        for cell in cells:
            path = _marker_path(cell_dir, cell)
            if path.exists():
                done[cell.key] = json.loads(path.read_text())
    todo = [c for c in cells if c.key not in done]

    def finish(cell, rec):
        done[cell.key] = rec
        if cell_dir is not None:
            tmp = _marker_path(cell_dir, cell).with_suffix(".tmp")
            tmp.write_text(json.dumps(rec, sort_keys=True))
            tmp.replace(_marker_path(cell_dir, cell))
        if on_cell is not None:
            on_cell(cell, rec)

    if jobs <= 1 or len(todo) <= 1:
        for cell in todo:
            finish(cell, run_cell(data, cell, cfg, options))
    else:
        cfg_dict = cfg.to_dict()
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for cell, rec in pool.map(_run_cell_task, [(data, c, cfg_dict, options) for c in todo]):
                finish(cell, rec)

    records = [done[c.key] for c in cells if c.key in done]
    return SweepResult(
        experiment,
        grid,
        methods,
        seeds,
        records,
        computed=len(todo),
        config={"train": cfg.to_dict(), "options": asdict(options)},
    )


def run_full_data(methods, data: PreparedData, cfg=None, seeds=DEFAULT_SEEDS, **kw) -> SweepResult:
    return run_sweep("full_data", methods, data, cfg, seeds, (1.0,), **kw)


def run_target_sweep(methods, data: PreparedData, cfg=None, seeds=DEFAULT_SEEDS, grid=TARGET_GRID, **kw) -> SweepResult:
    return run_sweep("target_sweep", methods, data, cfg, seeds, grid, **kw)


def run_source_sweep(methods, data: PreparedData, cfg=None, seeds=DEFAULT_SEEDS, grid=SOURCE_GRID, **kw) -> SweepResult:
    return run_sweep("source_sweep", methods, data, cfg, seeds, grid, **kw)


# -- reporting ---------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def summarize(records: Sequence[dict]) -> list[dict]:
    """Mean and sample std over seeds per (experiment, method, grid_value)."""
    groups: dict[tuple, list[dict]] = {}
    for r in records:
        groups.setdefault((r["experiment"], r["method"], r["grid_value"]), []).append(r)
    rows = []
    for (exp, method, value), recs in groups.items():
        ok = [r for r in recs if not r.get("error")]
        row = {"experiment": exp, "method": method, "grid_value": value, "n": len(ok), "failed": len(recs) - len(ok)}
        for col in ("accuracy", "domain_probe", "mmd"):
            vals = np.array([r[col] for r in ok], dtype=np.float64)
            vals = vals[~np.isnan(vals)]
            row[f"{col}_mean"] = float(vals.mean()) if len(vals) else math.nan
            row[f"{col}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else (0.0 if len(vals) else math.nan)
        rows.append(row)
    return rows


def write_summary(records: Sequence[dict], path) -> list[dict]:
    rows = summarize(records)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in SUMMARY_COLUMNS])
    return rows


def write_report(
    result: SweepResult, out_dir, record_seconds: bool = False, run_config: dict | None = None
) -> dict[str, Path]:
    """Write results.csv, summary.csv, timings.csv and manifest.json.

    Wall time varies between runs, so the ``seconds`` column of results.csv is
    left empty unless ``record_seconds``; timings.csv always has it. A
    ``run_config`` stored in the manifest lets the CLI rerun the sweep from it.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in ("results.csv", "summary.csv", "timings.csv", "manifest.json")}
    with open(paths["results.csv"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS + ("error",))
        for r in result.records:
            row = {**r, "seconds": r["seconds"] if record_seconds else math.nan}
            w.writerow([_fmt(row[c]) for c in RESULT_COLUMNS] + [r.get("error", "")])
    write_summary(result.records, paths["summary.csv"])
    with open(paths["timings.csv"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("experiment", "method", "grid_value", "seed", "seconds"))
        for r in result.records:
            w.writerow([_fmt(r[c]) for c in ("experiment", "method", "grid_value", "seed", "seconds")])
    manifest = {
        "experiment": result.experiment,
        "methods": list(result.methods),
        "grid": list(result.grid),
        "seeds": list(result.seeds),
        "cells": len(result.records),
        "expected_cells": result.expected_cells,
        "config": result.config,
        "run_config": run_config,
        "versions": {
            "domadapt": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    paths["manifest.json"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return paths


def read_results(path) -> list[dict]:
    """Parse results.csv back into records (empty numeric cells become NaN)."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rec = dict(row)
            rec["grid_value"] = float(rec["grid_value"])
            rec["seed"] = int(rec["seed"])
            for col in ("accuracy", "domain_probe", "mmd", "seconds"):
                rec[col] = float(rec[col]) if rec[col] != "" else math.nan
            out.append(rec)
    return out


def format_table(result: SweepResult) -> str:
    """Plain-text mean ± std table, one line per (method, grid value)."""
    lines = [f"{'method':<15}{'grid':>8}  accuracy"]
    for row in summarize(result.records):
        lines.append(
            f"{row['method']:<15}{row['grid_value']:>8g}  "
            f"{100 * row['accuracy_mean']:.2f} ± {100 * row['accuracy_std']:.2f}"
        )
    return "\n".join(lines)
