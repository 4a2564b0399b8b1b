"""Statistical batch-effect correction and the non-adaptive baselines.

Matrices are samples x genes throughout.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .adaptation import TrainConfig, fit
from .data import LabeledDataset

log = logging.getLogger(__name__)


class RankDeficientDesign(ValueError):
    pass


@dataclass
class BatchDesign:
    """Per-sample batch index plus optional covariates whose effect is kept."""

    batch_labels: np.ndarray
    covariates: np.ndarray | None = None

    def __post_init__(self):
        self.batch_labels = np.asarray(self.batch_labels)
        if self.covariates is not None:
            self.covariates = np.asarray(self.covariates, dtype=np.float64)
            if self.covariates.ndim == 1:
                self.covariates = self.covariates[:, None]
            if len(self.covariates) != len(self.batch_labels):
                raise ValueError("covariates and batch labels differ in length")

    @property
    def batches(self) -> np.ndarray:
        return np.unique(self.batch_labels)

    def batch_indicators(self) -> np.ndarray:
        return (self.batch_labels[:, None] == self.batches[None, :]).astype(np.float64)

    @classmethod
    def from_classes(cls, batch_labels, class_labels, num_classes: int | None = None) -> BatchDesign:
        """Protect class effects: one-hot class columns without the first class."""
        class_labels = np.asarray(class_labels, dtype=np.int64)
        c = num_classes or int(class_labels.max()) + 1
        onehot = np.eye(c)[class_labels][:, 1:]
        present = onehot.any(axis=0)
        return cls(batch_labels, onehot[:, present] if present.any() else None)


def _check_rank(design: np.ndarray, names: list[str]) -> None:
    rank = np.linalg.matrix_rank(design)
    if rank == design.shape[1]:
        return
    _, _, piv = scipy.linalg.qr(design, pivoting=True, mode="economic")
    dropped = sorted(piv[rank:])
    raise RankDeficientDesign(
        f"design matrix has rank {rank} < {design.shape[1]} columns; collinear: {[names[i] for i in dropped]}"
    )


# -- ComBat -------------------------------------------------------------------


@dataclass
class CombatModel:
    """Fitted parametric ComBat state (one row per batch in the per-batch arrays)."""

    batches: np.ndarray
    grand_mean: np.ndarray
    var_pooled: np.ndarray
    covariate_coef: np.ndarray | None
    batch_covariate_mean: np.ndarray | None
    gamma_hat: np.ndarray
    delta_hat: np.ndarray
    gamma_star: np.ndarray
    delta_star: np.ndarray
    gamma_bar: np.ndarray
    tau2: np.ndarray
    a_prior: np.ndarray
    b_prior: np.ndarray
    active_genes: np.ndarray
    iterations: list[int] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def _inverse_gamma_priors(delta_hat: np.ndarray) -> tuple[float, float]:
    m = delta_hat.mean()
    s2 = delta_hat.var(ddof=1)
    return (2 * s2 + m**2) / s2, (m * s2 + m**3) / s2


def _eb_solve(sdat, g_hat, d_hat, g_bar, t2, a, b, tol, max_iter):
    n = sdat.shape[0]
    g_old, d_old = g_hat.copy(), d_hat.copy()
    for it in range(1, max_iter + 1):
        g_new = (t2 * n * g_hat + d_old * g_bar) / (t2 * n + d_old)
        sum2 = ((sdat - g_new) ** 2).sum(axis=0)
        d_new = (0.5 * sum2 + b) / (n / 2.0 + a - 1.0)
        change = max(
            np.max(np.abs(g_new - g_old) / np.maximum(np.abs(g_old), 1e-300)),
            np.max(np.abs(d_new - d_old) / np.maximum(np.abs(d_old), 1e-300)),
        )
        g_old, d_old = g_new, d_new
        if change < tol:
            break
    return g_old, d_old, it


def combat_fit(X, design: BatchDesign, tol: float = 1e-4, max_iter: int = 100) -> CombatModel:
    """Estimate parametric empirical-Bayes location/scale batch effects."""
    X = np.asarray(X, dtype=np.float64)
    n, g = X.shape
    batch = design.batch_indicators()
    batches = design.batches
    counts = batch.sum(axis=0)
    if np.any(counts < 2):
        bad = batches[counts < 2].tolist()
        raise ValueError(f"batches {bad} have fewer than 2 samples")
    cov = design.covariates
    full = batch if cov is None else np.hstack([batch, cov])
    names = [f"batch[{b}]" for b in batches] + [f"cov[{j}]" for j in range(0 if cov is None else cov.shape[1])]
    _check_rank(full, names)

    coef = np.linalg.solve(full.T @ full, full.T @ X)
    k = len(batches)
    grand_mean = (counts / n) @ coef[:k]
    resid = X - full @ coef
    var_pooled = (resid**2).mean(axis=0)
    warnings = []
    active = var_pooled > 0
    if not active.all():
        skipped = np.flatnonzero(~active)
        warnings.append(f"{len(skipped)} zero-variance gene(s) passed through unadjusted: {skipped[:10].tolist()}")
        log.warning(warnings[-1])
    cov_coef = None if cov is None else coef[k:]
    stand = np.broadcast_to(grand_mean, (n, g)).copy()
    if cov is not None:
        stand += cov @ cov_coef
    sd = np.sqrt(np.where(active, var_pooled, 1.0))
    sdat = ((X - stand) / sd)[:, active]

    gamma_hat = np.linalg.solve(batch.T @ batch, batch.T @ sdat)
    delta_hat = np.stack([sdat[batch[:, i] > 0].var(axis=0, ddof=1) for i in range(k)])
    gamma_bar = gamma_hat.mean(axis=1)
    tau2 = gamma_hat.var(axis=1, ddof=1)
    priors = [_inverse_gamma_priors(d) for d in delta_hat]
    a_prior = np.array([p[0] for p in priors])
    b_prior = np.array([p[1] for p in priors])

    gamma_star, delta_star, iters = [], [], []
    for i in range(k):
        gs, ds, it = _eb_solve(
            sdat[batch[:, i] > 0], gamma_hat[i], delta_hat[i], gamma_bar[i], tau2[i], a_prior[i], b_prior[i], tol, max_iter
        )
        gamma_star.append(gs)
        delta_star.append(ds)
        iters.append(it)
    batch_cov_mean = None
    if cov is not None:
        batch_cov_mean = np.stack([cov[batch[:, i] > 0].mean(axis=0) for i in range(k)])
    return CombatModel(
        batches=batches,
        grand_mean=grand_mean,
        var_pooled=var_pooled,
        covariate_coef=cov_coef,
        batch_covariate_mean=batch_cov_mean,
        gamma_hat=gamma_hat,
        delta_hat=delta_hat,
        gamma_star=np.stack(gamma_star),
        delta_star=np.stack(delta_star),
        gamma_bar=gamma_bar,
        tau2=tau2,
        a_prior=a_prior,
        b_prior=b_prior,
        active_genes=active,
        iterations=iters,
        warnings=warnings,
    )


def combat_apply(model: CombatModel, X, batch_labels, covariates=None) -> np.ndarray:
    """Adjust samples from batches seen at fit time.

    Without covariates for samples fitted with covariates, the batch's mean
    covariate effect stands in for the unknown per-sample effect.
    """
    X = np.asarray(X, dtype=np.float64)
    batch_labels = np.asarray(batch_labels)
    pos = {b: i for i, b in enumerate(model.batches.tolist())}
    unknown = sorted(set(batch_labels.tolist()) - set(pos))
    if unknown:
        raise ValueError(f"unknown batches {unknown}")
    idx = np.array([pos[b] for b in batch_labels.tolist()], dtype=np.int64)
    stand = np.broadcast_to(model.grand_mean, X.shape).copy()
    if model.covariate_coef is not None:
        if covariates is None:
            covariates = model.batch_covariate_mean[idx]
        covariates = np.asarray(covariates, dtype=np.float64).reshape(len(X), -1)
        stand += covariates @ model.covariate_coef
    a = model.active_genes
    sd = np.sqrt(model.var_pooled[a])
    out = X.copy()
    s = (X[:, a] - stand[:, a]) / sd
    adj = (s - model.gamma_star[idx]) / np.sqrt(model.delta_star[idx])
    out[:, a] = adj * sd + stand[:, a]
    return out


def combat_fit_adjust(X, design: BatchDesign, tol: float = 1e-4, max_iter: int = 100) -> np.ndarray:
    """Parametric ComBat on a pooled matrix; a single batch is returned unchanged."""
    X = np.asarray(X, dtype=np.float64)
    if len(design.batches) < 2:
        return X.copy()
    model = combat_fit(X, design, tol, max_iter)
    return combat_apply(model, X, design.batch_labels, design.covariates)


# -- limma-style removal ----------------------------------------------------------


@dataclass
class LimmaModel:
    batches: np.ndarray
    coef: np.ndarray  # (1 + (K-1) + p) x g
    batch_effects: np.ndarray  # K x g, rows sum to zero

    @property
    def num_batches(self) -> int:
        return len(self.batches)


def _sum_to_zero(batch_labels: np.ndarray, batches: np.ndarray) -> np.ndarray:
    k = len(batches)
    contrasts = np.vstack([np.eye(k - 1), -np.ones((1, k - 1))]) if k > 1 else np.zeros((1, 0))
    idx = np.searchsorted(batches, batch_labels)
    return contrasts[idx], contrasts


def limma_fit(X, design: BatchDesign) -> LimmaModel:
    """Per-gene OLS on [intercept | sum-to-zero batch contrasts | covariates]."""
    X = np.asarray(X, dtype=np.float64)
    batches = design.batches
    xb, contrasts = _sum_to_zero(design.batch_labels, batches)
    cols = [np.ones((len(X), 1)), xb]
    names = ["intercept"] + [f"batch[{b}]" for b in batches[:-1]]
    if design.covariates is not None:
        cols.append(design.covariates)
        names += [f"cov[{j}]" for j in range(design.covariates.shape[1])]
    full = np.hstack(cols)
    _check_rank(full, names)
    coef, *_ = np.linalg.lstsq(full, X, rcond=None)
    k = len(batches)
    return LimmaModel(batches, coef, contrasts @ coef[1:k])


def limma_apply(model: LimmaModel, X, batch_labels) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    batch_labels = np.asarray(batch_labels)
    unknown = sorted(set(batch_labels.tolist()) - set(model.batches.tolist()))
    if unknown:
        raise ValueError(f"unknown batches {unknown}")
    return X - model.batch_effects[np.searchsorted(model.batches, batch_labels)]


def limma_remove_batch(X, design: BatchDesign) -> np.ndarray:
    """Subtract the fitted batch component only; intercept and covariates stay."""
    X = np.asarray(X, dtype=np.float64)
    if len(design.batches) < 2:
        return X.copy()
    return limma_apply(limma_fit(X, design), X, design.batch_labels)


# -- sklearn-style wrappers --------------------------------------------------------


class ComBat(TransformerMixin, BaseEstimator):
    """Parametric ComBat as a transformer; batches are passed alongside ``X``.

    Parameters
    ----------
    tol : float, default=1e-4
        Relative-change tolerance of the empirical-Bayes iteration.
    max_iter : int, default=100
    """

    def __init__(self, tol: float = 1e-4, max_iter: int = 100):
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, batch, covariates=None):
        X = check_array(X, dtype=np.float64)
        self.model_ = combat_fit(X, BatchDesign(batch, covariates), self.tol, self.max_iter)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X, batch, covariates=None):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return combat_apply(self.model_, X, batch, covariates)

    def fit_transform(self, X, batch, covariates=None):
        return self.fit(X, batch, covariates).transform(X, batch, covariates)


class LimmaBatchRemover(TransformerMixin, BaseEstimator):
    """limma-style linear batch removal as a transformer."""

    def fit(self, X, batch, covariates=None):
        X = check_array(X, dtype=np.float64)
        self.model_ = limma_fit(X, BatchDesign(batch, covariates))
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X, batch):
        check_is_fitted(self, "model_")
        return limma_apply(self.model_, check_array(X, dtype=np.float64), batch)

    def fit_transform(self, X, batch, covariates=None):
        return self.fit(X, batch, covariates).transform(X, batch)


# -- non-adaptive baselines ----------------------------------------------------------


def train_target_only(target_train: LabeledDataset, cfg: TrainConfig | None = None, target_val=None):
    """Encoder + classifier trained on target samples alone."""
    if len(target_train) == 0:
        raise ValueError("target training set is empty")
    return fit("plain", target_train, None, cfg, target_val=target_val)


def train_no_adaptation(
    source_train: LabeledDataset,
    target_train: LabeledDataset,
    cfg: TrainConfig | None = None,
    source_val=None,
    target_val=None,
):
    """Encoder + classifier on the labeled union, domain-balanced batches, no domain loss."""
    if list(source_train.class_names) != list(target_train.class_names):
        raise ValueError(
            f"class vocabularies differ: {source_train.class_names} vs {target_train.class_names}"
        )
    return fit("plain", source_train, target_train, cfg, source_val, target_val)


@dataclass
class CorrectedPair:
    source: LabeledDataset
    target: LabeledDataset
    correct_target: object  # callable: LabeledDataset -> LabeledDataset
    correct_source: object


def correct_pair(
    method: str, source: LabeledDataset, target: LabeledDataset, use_labels: bool = True
) -> CorrectedPair:
    """Fit ComBat or limma on the pooled pair (batch = domain).

    Returns the corrected training sets and functions applying the fitted
    per-batch correction to further samples (validation, test) of either domain.
    """
    X = np.vstack([source.X, target.X])
    batch = np.r_[np.zeros(len(source), dtype=int), np.ones(len(target), dtype=int)]
    if use_labels:
        design = BatchDesign.from_classes(batch, np.r_[source.y, target.y], source.num_classes)
    else:
        design = BatchDesign(batch)
    if method == "combat":
        model = combat_fit(X, design)
        corrected = combat_apply(model, X, batch, design.covariates)

        def apply(ds, b=1):
            return ds.with_values(combat_apply(model, ds.X, np.full(len(ds), b)))

    elif method == "limma":
        model = limma_fit(X, design)
        corrected = limma_apply(model, X, batch)

        def apply(ds, b=1):
            return ds.with_values(limma_apply(model, ds.X, np.full(len(ds), b)))

    else:
        raise ValueError(f"unknown correction method {method!r}; expected 'combat' or 'limma'")
    n = len(source)
    return CorrectedPair(
        source.with_values(corrected[:n]), target.with_values(corrected[n:]), apply, lambda ds: apply(ds, 0)
    )
