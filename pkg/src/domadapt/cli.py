"""Command-line entry point: ``domadapt {synth,train,sweep,embed,bec,report}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .adaptation import TrainingDiverged
from .autodiff import NumericError
from .bec import BatchDesign, combat_fit_adjust, limma_remove_batch
from .config import ConfigError, RunConfig, describe_defaults, load_config
from .data import (
    DataError,
    ExpressionMatrix,
    LabeledDataset,
    PreprocessStats,
    generate_synthetic,
    load_matrix,
    preprocess,
    read_expression,
    read_labels,
    save_matrix,
    subsample_fraction,
    write_synthetic,
)
from .harness import (
    MethodId,
    PreparedData,
    SweepOptions,
    default_grid,
    format_table,
    prepare,
    read_results,
    run_sweep,
    train_method,
    write_report,
    write_summary,
)
from .metrics import accuracy, export_embeddings
from .models import load_checkpoint, predict, save_checkpoint

log = logging.getLogger("domadapt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SWEEP_KINDS = {"full": "full_data", "target": "target_sweep", "source": "source_sweep"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; usage errors here are 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- shared helpers ------------------------------------------------------------------


def _config(args) -> RunConfig:
    return load_config(args.config, args.set or ())


def load_pair(cfg: RunConfig) -> tuple[LabeledDataset, LabeledDataset, bool]:
    """Source and target datasets from the config (files or synthetic) plus the log flag."""
    if cfg.uses_synthetic:
        src, tgt = generate_synthetic(cfg.synthetic)
        log_t = False if cfg.data.log_transform is None else cfg.data.log_transform
        return src, tgt, log_t
    d = cfg.data
    for p in (d.source_matrix, d.source_labels, d.target_matrix, d.target_labels):
        if not Path(p).exists():
            raise DataError(f"file not found: {p}")
    vocab = sorted(set(read_labels(d.source_labels).values()) | set(read_labels(d.target_labels).values()))
    src = load_matrix(d.source_matrix, d.source_labels, "source", vocab)
    tgt = load_matrix(d.target_matrix, d.target_labels, "target", vocab)
    return src, tgt, True if d.log_transform is None else d.log_transform


def prepared_from_config(cfg: RunConfig) -> PreparedData:
    src, tgt, log_t = load_pair(cfg)
    return prepare(src, tgt, cfg.data.split_fractions, cfg.data.split_seed, log_t)


def save_stats(stats: PreprocessStats, genes: list[str], path) -> None:
    np.savez(path, mean=stats.mean, std=stats.std, log_transform=np.array(stats.log_transform), genes=np.array(genes))


def load_stats(path) -> tuple[PreprocessStats, list[str]]:
    with np.load(path) as z:
        return PreprocessStats(z["mean"], z["std"], bool(z["log_transform"])), [str(g) for g in z["genes"]]


def _csv_list(text: str, cast=str) -> list:
    return [cast(x) for x in text.split(",") if x.strip()]


# -- commands --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty (use --force to overwrite)")
    paths = write_synthetic(cfg.synthetic, out)
    for p in paths.values():
        print(p)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.method:
        cfg = cfg.with_overrides([f"run.method={args.method}"])
    method = MethodId.parse(cfg.run.method).value
    if method == "target_only" and not cfg.uses_synthetic:
        log.warning("target_only ignores the source files %s, %s", cfg.data.source_matrix, cfg.data.source_labels)
    data = prepared_from_config(cfg)
    target_train = data.target_train
    if cfg.run.target_fraction < 1:
        target_train = subsample_fraction(target_train, cfg.run.target_fraction, cfg.train.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    save_stats(data.stats, data.source_train.gene_ids, out / "preprocess.npz")
    try:
        model, history, t_te, _ = train_method(method, data.source_train, target_train, data, cfg.train)
    except TrainingDiverged as exc:
        exc.history.to_csv(out / "history.csv")
        raise
    save_checkpoint(model, out / "model.npz")
    history.to_csv(out / "history.csv")
    acc = accuracy(predict(model, t_te.X), t_te.y)
    print(json.dumps({"method": method, "target_test_accuracy": acc, "best_epoch": history.best_epoch}))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    sets = []
    if args.kind:
        sets.append(f"sweep.kind={json.dumps(args.kind)}")
    if args.methods:
        sets.append(f"sweep.methods={json.dumps(_csv_list(args.methods))}")
    if args.seeds:
        sets.append(f"sweep.seeds={json.dumps(_csv_list(args.seeds, int))}")
    if args.jobs:
        sets.append(f"sweep.jobs={args.jobs}")
    cfg = cfg.with_overrides(sets)
    sw = cfg.sweep
    experiment = SWEEP_KINDS[sw.kind]
    grid = sw.grid
    if grid is None:
        grid = default_grid(experiment, sw.grid_preset if experiment == "source_sweep" else "default")
    data = prepared_from_config(cfg)
    options = SweepOptions(sw.master_seed, sw.diagnostics, sw.fixed_p)
    out = Path(args.out)
    result = run_sweep(experiment, sw.methods, data, cfg.train, sw.seeds, grid, options, out, sw.jobs)
    write_report(result, out, record_seconds=sw.record_seconds, run_config=cfg.to_dict())
    failed = sum(1 for r in result.records if r.get("error"))
    print(format_table(result))
    print(f"{len(result.records)} cells ({result.computed} computed, {failed} failed) -> {out}")
    return EXIT_OK


def cmd_embed(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if len(args.matrix) != len(args.labels):
        raise UsageError("give one --labels per --matrix")
    domains = args.domain or [f"set{i}" for i in range(len(args.matrix))]
    if len(domains) != len(args.matrix):
        raise UsageError("give one --domain per --matrix (or none)")
    stats_path = Path(args.stats) if args.stats else Path(args.checkpoint).with_name("preprocess.npz")
    stats, stat_genes = load_stats(stats_path) if stats_path.exists() else (None, None)
    vocab = sorted({v for lp in args.labels for v in read_labels(lp).values()})
    datasets = []
    for mp, lp, dom in zip(args.matrix, args.labels, domains):
        ds = load_matrix(mp, lp, dom, vocab)
        if stat_genes is not None and ds.gene_ids != stat_genes:
            raise DataError(f"{mp}: gene ids differ from those the model was trained on")
        if ds.X.shape[1] != model.input_dim:
            raise DataError(f"{mp}: {ds.X.shape[1]} genes but the checkpoint expects {model.input_dim}")
        if stats is not None:
            ds = preprocess(ds, stats)[0]
        datasets.append(ds)
    path = export_embeddings(model, datasets, args.out, with_pca=args.pca)
    print(path)
    return EXIT_OK


def cmd_bec(args) -> int:
    mats = [read_expression(p) for p in args.matrix]
    genes = mats[0].gene_ids
    for p, m in zip(args.matrix, mats):
        if m.gene_ids != genes:
            raise DataError(f"{p}: gene ids differ from {args.matrix[0]}")
    X = np.vstack([m.values for m in mats])
    batch = np.concatenate([np.full(len(m.sample_ids), i) for i, m in enumerate(mats)])
    covariates = None
    if args.labels:
        if len(args.labels) != len(args.matrix):
            raise UsageError("give one --labels per --matrix")
        raw = []
        for lp, m in zip(args.labels, mats):
            lab = read_labels(lp)
            missing = [s for s in m.sample_ids if s not in lab]
            if missing:
                raise DataError(f"{lp}: no label for sample(s) {missing[:5]}")
            raw += [lab[s] for s in m.sample_ids]
        vocab = sorted(set(raw))
        design = BatchDesign.from_classes(batch, [vocab.index(v) for v in raw], len(vocab))
        covariates = design.covariates
    design = BatchDesign(batch, covariates)
    if len(mats) == 1:
        corrected = X.copy()
    elif args.method == "combat":
        corrected = combat_fit_adjust(X, design)
    else:
        corrected = limma_remove_batch(X, design)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = 0
    for p, m in zip(args.matrix, mats):
        n = len(m.sample_ids)
        dest = out / f"{Path(p).stem}_corrected.csv"
        save_matrix(ExpressionMatrix(corrected[start : start + n], list(m.sample_ids), list(genes)), dest)
        start += n
        print(dest)
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.results)
    path = out / "results.csv" if out.is_dir() else out
    if not path.exists():
        raise DataError(f"results file not found: {path}")
    rows = write_summary(read_results(path), path.with_name("summary.csv"))
    for row in rows:
        print(
            f"{row['experiment']:<13} {row['method']:<14} {row['grid_value']:>7g}  "
            f"{100 * row['accuracy_mean']:6.2f} ± {100 * row['accuracy_std']:5.2f}  (n={row['n']}, failed={row['failed']})"
        )
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------


def _add_config_flags(p) -> None:
    p.add_argument("--config", metavar="PATH", default=None, help="JSON run config (a sweep manifest also works)")
    p.add_argument(
        "--set",
        metavar="KEY=VALUE",
        action="append",
        default=None,
        help="override a config key, e.g. train.epochs=20 (repeatable; wins over --config)",
    )


class _HelpFormatter(argparse.RawDescriptionHelpFormatter):
    """Keeps epilog layout and shows defaults only where there is one."""

    def _get_help_string(self, action):
        text = action.help or ""
        if action.default not in (None, False, argparse.SUPPRESS) and "%(default)" not in text:
            text += " (default: %(default)s)"
        return text


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    keys = "\n".join(f"  {k} = {json.dumps(v)}" for k, v in describe_defaults())
    config_epilog = f"config keys and defaults:\n{keys}"
    parser = _Parser(
        prog="domadapt",
        description="Adversarial domain adaptation for expression matrices.",
        epilog=config_epilog,
        formatter_class=fmt,
    )
    parser.add_argument("-v", "--verbose", action="store_true", default=False, help="debug logging")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="write a synthetic source/target pair", formatter_class=fmt, epilog=config_epilog)
    _add_config_flags(p)
    p.add_argument("--out", required=True, metavar="DIR", help="output directory")
    p.add_argument("--force", action="store_true", default=False, help="write into a non-empty directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one method; writes model.npz and history.csv", formatter_class=fmt, epilog=config_epilog)
    _add_config_flags(p)
    p.add_argument("--method", choices=[m.value for m in MethodId], default=None, help="overrides run.method")
    p.add_argument("--out", required=True, metavar="DIR", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run an experiment grid; resumable", formatter_class=fmt, epilog=config_epilog)
    _add_config_flags(p)
    p.add_argument("--kind", choices=sorted(SWEEP_KINDS), default=None, help="overrides sweep.kind")
    p.add_argument("--methods", metavar="M1,M2", default=None, help="comma-separated subset (sweep.methods)")
    p.add_argument("--seeds", metavar="S1,S2", default=None, help="comma-separated seeds (sweep.seeds)")
    p.add_argument("--jobs", type=int, metavar="N", default=None, help="parallel worker processes (sweep.jobs)")
    p.add_argument("--out", required=True, metavar="DIR", help="report directory; holds per-cell markers")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("embed", help="export latent embeddings as CSV", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, metavar="PATH", help="model.npz written by train")
    p.add_argument("--matrix", action="append", required=True, metavar="PATH", help="matrix file (repeatable)")
    p.add_argument("--labels", action="append", required=True, metavar="PATH", help="label file per matrix")
    p.add_argument("--domain", action="append", default=None, metavar="NAME", help="domain tag per matrix")
    p.add_argument(
        "--stats", default=None, metavar="PATH", help="preprocessing stats (default: preprocess.npz beside the checkpoint)"
    )
    p.add_argument("--pca", action="store_true", default=False, help="append pc_1, pc_2 columns")
    p.add_argument("--out", required=True, metavar="PATH", help="output CSV")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("bec", help="batch-effect correction of pooled matrices", formatter_class=fmt)
    p.add_argument("--method", required=True, choices=["combat", "limma"], help="correction method")
    p.add_argument("--matrix", action="append", required=True, metavar="PATH", help="one matrix per batch (repeatable)")
    p.add_argument(
        "--labels", action="append", default=None, metavar="PATH", help="label file per matrix; protects class effects"
    )
    p.add_argument("--out", required=True, metavar="DIR", help="output directory")
    p.set_defaults(func=cmd_bec)

    p = sub.add_parser("report", help="recompute summary.csv from results.csv", formatter_class=fmt)
    p.add_argument("--results", required=True, metavar="PATH", help="results.csv or the directory holding it")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"domadapt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"domadapt: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"domadapt: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"domadapt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
