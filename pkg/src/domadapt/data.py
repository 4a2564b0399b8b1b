"""Expression-matrix I/O, preprocessing, splitting and the synthetic shift generator."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

STD_FLOOR = 1e-8


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class ExpressionMatrix:
    values: np.ndarray
    sample_ids: list[str]
    gene_ids: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n, g = self.values.shape
        if len(self.sample_ids) != n or len(self.gene_ids) != g:
            raise DataError(
                f"id lengths ({len(self.sample_ids)}, {len(self.gene_ids)}) do not match values {self.values.shape}"
            )
        _check_unique(self.sample_ids, "sample")
        _check_unique(self.gene_ids, "gene")


def _check_unique(ids: Sequence[str], what: str) -> None:
    if len(set(ids)) != len(ids):
        seen, dups = set(), []
        for i in ids:
            if i in seen:
                dups.append(i)
            seen.add(i)
        raise DataError(f"duplicate {what} ids: {dups[:5]}")


@dataclass
class LabeledDataset:
    """Samples x genes matrix with integer class labels and a domain tag."""

    matrix: ExpressionMatrix
    labels: np.ndarray
    class_names: list[str]
    domain: str = "source"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (self.matrix.values.shape[0],):
            raise DataError(f"{len(self.labels)} labels for {self.matrix.values.shape[0]} samples")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError("label index out of range of class_names")

    @property
    def X(self) -> np.ndarray:
        return self.matrix.values

    @property
    def y(self) -> np.ndarray:
        return self.labels

    @property
    def sample_ids(self) -> list[str]:
        return self.matrix.sample_ids

    @property
    def gene_ids(self) -> list[str]:
        return self.matrix.gene_ids

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> LabeledDataset:
        idx = np.asarray(idx, dtype=np.int64)
        m = self.matrix
        sub = ExpressionMatrix(m.values[idx], [m.sample_ids[i] for i in idx], list(m.gene_ids))
        return LabeledDataset(sub, self.labels[idx], list(self.class_names), self.domain)

    def with_values(self, values: np.ndarray) -> LabeledDataset:
        m = self.matrix
        return replace(self, matrix=ExpressionMatrix(values, list(m.sample_ids), list(m.gene_ids)))


# -- file I/O ---------------------------------------------------------------


def _sniff_delimiter(path: Path) -> str:
    with open(path, newline="") as fh:
        head = fh.readline()
    return "\t" if "\t" in head else ","


def read_expression(path) -> ExpressionMatrix:
    path = Path(path)
    if not path.exists():
        raise DataError(f"matrix file not found: {path}")
    delim = _sniff_delimiter(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter=delim))
    if not rows or len(rows[0]) < 2:
        raise DataError(f"{path}: header must be 'sample_id' followed by gene ids")
    gene_ids = rows[0][1:]
    sample_ids, values = [], []
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(gene_ids) + 1:
            raise DataError(f"{path}: row {r} has {len(row) - 1} values, expected {len(gene_ids)}")
        sample_ids.append(row[0])
        try:
            values.append([float(v) for v in row[1:]])
        except ValueError:
            for c, v in enumerate(row[1:]):
                try:
                    float(v)
                except ValueError:
                    raise DataError(
                        f"{path}: non-numeric cell {v!r} at row {r}, column {c + 2} (gene {gene_ids[c]})"
                    ) from None
    if not sample_ids:
        raise DataError(f"{path}: no samples")
    arr = np.array(values, dtype=np.float64)
    if not np.isfinite(arr).all():
        r, c = np.argwhere(~np.isfinite(arr))[0]
        raise DataError(f"{path}: non-finite value at row {r + 2}, column {c + 2}")
    return ExpressionMatrix(arr, sample_ids, gene_ids)


def read_labels(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"label file not found: {path}")
    delim = _sniff_delimiter(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter=delim))
    out: dict[str, str] = {}
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) < 2:
            raise DataError(f"{path}: row {r} needs sample_id and label")
        if row[0] in out:
            raise DataError(f"{path}: duplicate sample id {row[0]!r}")
        out[row[0]] = row[1]
    return out


def load_matrix(path, label_path, domain: str = "source", class_names=None) -> LabeledDataset:
    """Read a matrix file and its label file, joined on sample id.

    Sample order follows the matrix file. ``class_names`` fixes the label
    vocabulary (and its index order); by default it is the sorted set of labels.
    """
    matrix = read_expression(path)
    label_map = read_labels(label_path)
    missing = [s for s in matrix.sample_ids if s not in label_map]
    if missing:
        raise DataError(f"{label_path}: no label for sample(s) {missing[:5]}")
    raw = [label_map[s] for s in matrix.sample_ids]
    if class_names is None:
        class_names = sorted(set(raw))
    index = {name: i for i, name in enumerate(class_names)}
    unknown = sorted(set(raw) - set(index))
    if unknown:
        raise DataError(f"{label_path}: labels {unknown} not in class vocabulary")
    return LabeledDataset(matrix, np.array([index[v] for v in raw]), list(class_names), domain)


def save_matrix(ds: LabeledDataset | ExpressionMatrix, path, label_path=None, delimiter: str = ",") -> None:
    matrix = ds.matrix if isinstance(ds, LabeledDataset) else ds
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(["sample_id", *matrix.gene_ids])
        for sid, row in zip(matrix.sample_ids, matrix.values):
            w.writerow([sid, *(repr(float(v)) for v in row)])
    if label_path is not None:
        if not isinstance(ds, LabeledDataset):
            raise TypeError("labels require a LabeledDataset")
        with open(label_path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
            w.writerow(["sample_id", "label"])
            for sid, lab in zip(ds.sample_ids, ds.labels):
                w.writerow([sid, ds.class_names[lab]])


# -- transforms ---------------------------------------------------------------


def align_genes(a: LabeledDataset, b: LabeledDataset) -> tuple[LabeledDataset, LabeledDataset]:
    """Restrict both datasets to the sorted intersection of their gene ids."""
    common = sorted(set(a.gene_ids) & set(b.gene_ids))
    if not common:
        raise DataError("datasets share no gene ids")

    def restrict(ds):
        pos = {gid: i for i, gid in enumerate(ds.gene_ids)}
        cols = [pos[gid] for gid in common]
        m = ExpressionMatrix(ds.X[:, cols], list(ds.sample_ids), list(common))
        return replace(ds, matrix=m)

    return restrict(a), restrict(b)


@dataclass
class PreprocessStats:
    mean: np.ndarray
    std: np.ndarray
    log_transform: bool = True


def preprocess(
    ds: LabeledDataset, reference_stats: PreprocessStats | None = None, log_transform: bool = True
) -> tuple[LabeledDataset, PreprocessStats]:
    """``log2(x + 1)`` (optional) followed by per-gene z-scoring.

    Pass the stats returned for the source training split as ``reference_stats``
    to transform every other split with the same frozen affine map.
    """
    if reference_stats is not None:
        log_transform = reference_stats.log_transform
    x = ds.X
    if log_transform:
        if (x < 0).any():
            r, c = np.argwhere(x < 0)[0]
            raise DataError(f"negative value {x[r, c]} at sample {ds.sample_ids[r]}, gene {ds.gene_ids[c]}")
        x = np.log2(x + 1.0)
    if reference_stats is None:
        mean = x.mean(axis=0)
        std = np.maximum(x.std(axis=0), STD_FLOOR)
        reference_stats = PreprocessStats(mean, std, log_transform)
    elif reference_stats.mean.shape != (x.shape[1],):
        raise DataError("reference stats do not match the gene count")
    out = (x - reference_stats.mean) / reference_stats.std
    return ds.with_values(out), reference_stats


def _largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    exact = [n * f for f in fractions]
    counts = [math.floor(e) for e in exact]
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def stratified_split(ds: LabeledDataset, fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0):
    """Split into len(fractions) disjoint parts preserving class proportions."""
    fractions = [float(f) for f in fractions]
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be positive and sum to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[] for _ in fractions]
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) == 0:
            continue
        if len(idx) < 3:
            raise DataError(f"class {ds.class_names[c]!r} has {len(idx)} samples; need at least 3")
        idx = rng.permutation(idx)
        start = 0
        for part, k in zip(parts, _largest_remainder(len(idx), fractions)):
            part.extend(idx[start : start + k].tolist())
            start += k
    return tuple(ds.take(np.sort(p)) for p in parts)


def subsample_fraction(ds: LabeledDataset, fraction: float, seed: int = 0) -> LabeledDataset:
    """Stratified subsample keeping ``ceil(fraction * n_c)`` samples of each class.

    For a fixed seed the subsample at a smaller fraction is a subset of the one
    at a larger fraction: every class uses one seed-keyed permutation and takes
    its prefix.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return ds
    keep = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) == 0:
            continue
        perm = np.random.default_rng([seed, c]).permutation(idx)
        keep.extend(perm[: max(1, math.ceil(fraction * len(idx) - 1e-9))].tolist())
    return ds.take(np.sort(keep))


# -- synthetic shift generator -------------------------------------------------


@dataclass
class SyntheticConfig:
    num_genes: int = 200
    num_classes: int = 5
    latent_dim: int = 10
    n_source: int = 2000
    n_target: int = 2000
    class_sep: float = 1.5
    additive_shift: float = 1.0
    multiplicative_shift: float = 0.3
    warp_fraction: float = 0.3
    warp_strength: float = 0.1
    noise_std: float = 3.0
    seed: int = 0

    def __post_init__(self):
        for name in ("class_sep", "additive_shift", "multiplicative_shift", "warp_strength", "noise_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.warp_fraction <= 1.0:
            raise ValueError("warp_fraction must lie in [0, 1]")
        if self.num_classes < 2 or self.num_genes < 1 or self.latent_dim < 1:
            raise ValueError("need num_classes >= 2, num_genes >= 1, latent_dim >= 1")


def generate_synthetic(cfg: SyntheticConfig | None = None) -> tuple[LabeledDataset, LabeledDataset]:
    """Draw a labeled (source, target) pair sharing a latent class structure.

    Class centres live in a ``latent_dim`` space and reach gene space through a
    random linear map shared by both domains. The target additionally gets a
    per-gene scale and offset plus a monotone cubic warp on a subset of genes.
    """
    cfg = cfg or SyntheticConfig()
    rng = np.random.default_rng(cfg.seed)
    k, g, c = cfg.latent_dim, cfg.num_genes, cfg.num_classes
    # unit-variance entries: genes span several units, so the cubic warp is far from linear
    mixing = rng.normal(size=(k, g))
    centers = rng.normal(0.0, cfg.class_sep, size=(c, k))
    offset = rng.normal(0.0, cfg.additive_shift, size=g)
    scale = np.exp(rng.normal(0.0, cfg.multiplicative_shift, size=g))
    warped = np.sort(rng.choice(g, size=int(round(cfg.warp_fraction * g)), replace=False))

    def draw(n):
        y = rng.permutation(np.arange(n) % c)
        z = centers[y] + rng.normal(size=(n, k))
        x = z @ mixing + cfg.noise_std * rng.normal(size=(n, g))
        return x, y

    genes = [f"gene{j:05d}" for j in range(g)]
    classes = [f"class{j}" for j in range(c)]
    xs, ys = draw(cfg.n_source)
    xt, yt = draw(cfg.n_target)
    xt = xt * scale + offset
    xt[:, warped] += cfg.warp_strength * xt[:, warped] ** 3
    src = LabeledDataset(ExpressionMatrix(xs, [f"S{i:06d}" for i in range(len(xs))], genes), ys, classes, "source")
    tgt = LabeledDataset(
        ExpressionMatrix(xt, [f"T{i:06d}" for i in range(len(xt))], list(genes)), yt, list(classes), "target"
    )
    return src, tgt


def write_synthetic(cfg: SyntheticConfig, out_dir) -> dict[str, Path]:
    """Write both domains as matrix + label CSVs alongside a JSON manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    src, tgt = generate_synthetic(cfg)
    paths = {
        "source_matrix": out_dir / "source_matrix.csv",
        "source_labels": out_dir / "source_labels.csv",
        "target_matrix": out_dir / "target_matrix.csv",
        "target_labels": out_dir / "target_labels.csv",
    }
    save_matrix(src, paths["source_matrix"], paths["source_labels"])
    save_matrix(tgt, paths["target_matrix"], paths["target_labels"])
    manifest = {"generator": "synthetic", "config": asdict(cfg), "files": {k: p.name for k, p in paths.items()}}
    paths["manifest"] = out_dir / "manifest.json"
    paths["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return paths
