"""Adversarial training: DANN and Wasserstein-critic variants, supervised or not.

Both variants alternate a discriminator phase on detached latents with one
encoder+classifier phase:

* DANN: the discriminator minimises the domain cross-entropy, the encoder
  minimises ``L_cls - lambda * L_dom`` (gradient reversal).
* Wasserstein: the critic minimises ``-(E_S[D] - E_T[D]) + sigma * GP`` for
  ``critic_steps`` updates, the encoder minimises ``L_cls + lambda * (E_S[D] - E_T[D])``.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import NumericError, Tensor, adam_step, backward, grad, no_grad, ops, zero_grad
from .data import LabeledDataset
from .models import (
    AdaptationModel,
    ClassifierConfig,
    DiscriminatorConfig,
    EncoderConfig,
    build_model,
    classify,
    discriminate,
    encode,
    predict,
)

log = logging.getLogger(__name__)

GRAD_NORM_FLOOR = 1e-12
ADAPTIVE_VARIANTS = ("dann_sup", "dann_unsup", "wass_sup", "wass_unsup")


@dataclass
class TrainConfig:
    """Hyperparameters of the min-max objective and its optimiser.

    ``lambda_`` weights domain alignment against classification and ``sigma``
    weights the gradient penalty; ``lambda`` is accepted as a key by
    :meth:`from_dict`.
    """

    lambda_: float = 1.0
    sigma: float = 10.0
    epochs: int = 200
    batch_size: int = 64
    critic_steps: int = 5
    lr: float = 1e-4
    critic_lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    encoder_hidden: tuple[int, ...] = (256, 256, 256, 256)
    classifier_hidden: tuple[int, ...] = (128, 64)
    discriminator_hidden: tuple[int, ...] = (256, 128, 64)
    use_batchnorm: bool = True
    train_discriminator: bool = True
    select_best: bool = True

    def __post_init__(self):
        self.encoder_hidden = tuple(self.encoder_hidden)
        self.classifier_hidden = tuple(self.classifier_hidden)
        self.discriminator_hidden = tuple(self.discriminator_hidden)
        if self.lambda_ < 0 or self.sigma < 0:
            raise ValueError("lambda and sigma must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.critic_steps < 1:
            raise ValueError("critic_steps must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        for k in ("encoder_hidden", "classifier_hidden", "discriminator_hidden"):
            d[k] = list(d[k])
        return d


@dataclass
class DomainBatch:
    """Paired minibatch; ``x_t`` may be ``None`` for single-domain training."""

    x_s: np.ndarray
    y_s: np.ndarray
    x_t: np.ndarray | None = None
    y_t: np.ndarray | None = None

    def __post_init__(self):
        if self.x_t is not None and len(self.x_t) != len(self.x_s):
            raise ValueError(f"domain batch sizes differ: {len(self.x_s)} vs {len(self.x_t)}")
        if self.y_t is not None and self.x_t is None:
            raise ValueError("target labels without target samples")


HISTORY_COLUMNS = ("epoch", "cls_loss", "dom_loss", "gp", "critic_grad_norm", "src_val_acc", "tgt_val_acc")


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)
    best_epoch: int | None = None

    def append(self, record: dict) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=float)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for r in self.records:
                w.writerow([r["epoch"]] + [repr(float(r[c])) for c in HISTORY_COLUMNS[1:]])
        return path

    @classmethod
    def from_csv(cls, path) -> TrainHistory:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        recs = [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]
        return cls(recs)


class TrainingDiverged(NumericError):
    def __init__(self, message: str, history: TrainHistory):
        super().__init__(message)
        self.history = history


# -- losses -------------------------------------------------------------------


def classification_loss(model: AdaptationModel, x, y, training: bool = True) -> Tensor:
    return ops.softmax_cross_entropy(classify(model, encode(model, x, training), training), y)


def dann_domain_loss(scores_s: Tensor, scores_t: Tensor) -> Tensor:
    """Binary cross-entropy with sigmoid, source scored as the positive class.

    Averages ``-log sigmoid(s)`` over source rows and ``-log(1 - sigmoid(s))``
    over target rows, i.e. the mean over the pooled batch.
    """
    n = scores_s.size + scores_t.size
    src = ops.sum(ops.softplus(ops.neg(scores_s)))
    tgt = ops.sum(ops.softplus(scores_t))
    return ops.mul(ops.add(src, tgt), 1.0 / n)


def interpolate(z_s, z_t, seed=None, eps=None) -> Tensor:
    """Random points on the segments between paired source and target rows.

    Returns a fresh leaf with ``requires_grad=True``. ``eps`` (one weight per
    row, applied to the source side) overrides the uniform draw; ``seed`` may
    be an int or a ``numpy.random.Generator``.
    """
    zs = z_s.data if isinstance(z_s, Tensor) else np.asarray(z_s, dtype=np.float64)
    zt = z_t.data if isinstance(z_t, Tensor) else np.asarray(z_t, dtype=np.float64)
    if zs.shape != zt.shape:
        raise ValueError(f"cannot interpolate shapes {zs.shape} and {zt.shape}")
    if eps is None:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        eps = rng.uniform(0.0, 1.0, size=zs.shape[0])
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), (zs.shape[0],))[:, None]
    return Tensor(eps * zs + (1.0 - eps) * zt, requires_grad=True)


def _critic_fn(critic) -> Callable[[Tensor], Tensor]:
    if isinstance(critic, AdaptationModel):
        return lambda z: discriminate(critic, z)
    return critic


def penalty_terms(critic, z_hat: Tensor, sigma: float) -> tuple[Tensor, np.ndarray]:
    """Gradient penalty and the per-row critic gradient norms at ``z_hat``."""
    if not z_hat.requires_grad:
        raise ValueError("z_hat must require grad")
    scores = _critic_fn(critic)(z_hat)
    (g,) = grad(ops.sum(scores), [z_hat], create_graph=True)
    sq = ops.sum(ops.mul(g, g), axis=1)
    norms = ops.sqrt(ops.clamp_min(sq, GRAD_NORM_FLOOR**2))
    gap = ops.sub(norms, 1.0)
    return ops.mul(ops.mean(ops.mul(gap, gap)), sigma), norms.data


def gradient_penalty(critic, z_hat: Tensor, sigma: float = 10.0) -> Tensor:
    """``sigma * mean((||grad_z D(z_hat)|| - 1)^2)``, differentiable w.r.t. the critic."""
    return penalty_terms(critic, z_hat, sigma)[0]


def wasserstein_domain_loss(critic, z_s, z_t, sigma: float = 10.0, seed=None) -> tuple[Tensor, Tensor]:
    """Returns ``(critic_objective, encoder_signal)``.

    ``encoder_signal = mean D(z_s) - mean D(z_t)``; the critic minimises
    ``-encoder_signal + GP`` while the encoder minimises ``encoder_signal``.
    """
    d = _critic_fn(critic)
    z_s, z_t = ops.as_tensor(z_s), ops.as_tensor(z_t)
    if z_s.shape != z_t.shape:
        raise ValueError(f"batch shapes differ: {z_s.shape} vs {z_t.shape}")
    signal = ops.sub(ops.mean(d(z_s)), ops.mean(d(z_t)))
    gp = gradient_penalty(critic, interpolate(z_s, z_t, seed=seed), sigma)
    return ops.add(ops.neg(signal), gp), signal


def _critic_objective_fused(model, zs: np.ndarray, zt: np.ndarray, sigma: float, rng):
    """Critic objective with source, target and interpolates in one forward pass.

    Valid because the critic has no batch-coupled layers, so rows are
    independent and the interpolates' input gradient only touches their rows.
    """
    m = len(zs)
    z_hat = interpolate(zs, zt, seed=rng).data
    stacked = Tensor(np.concatenate([zs, zt, z_hat]), requires_grad=True)
    scores = discriminate(model, stacked)
    signal = ops.sub(ops.mean(ops.slice_rows(scores, 0, m)), ops.mean(ops.slice_rows(scores, m, 2 * m)))
    (g_all,) = grad(ops.sum(ops.slice_rows(scores, 2 * m, 3 * m)), [stacked], create_graph=True)
    g = ops.slice_rows(g_all, 2 * m, 3 * m)
    norms = ops.sqrt(ops.clamp_min(ops.sum(ops.mul(g, g), axis=1), GRAD_NORM_FLOOR**2))
    gap = ops.sub(norms, 1.0)
    gp = ops.mul(ops.mean(ops.mul(gap, gap)), sigma)
    return ops.add(ops.neg(signal), gp), gp, norms.data


# -- training -------------------------------------------------------------------


def _kind(variant: str) -> str:
    return variant.split("_")[0]


def is_supervised(variant: str) -> bool:
    return variant.endswith("_sup") or variant == "plain"


def _encoder_params(model):
    return model.encoder.parameters() + model.classifier.parameters()


def train_step(model: AdaptationModel, batch: DomainBatch, cfg: TrainConfig, rng=None) -> dict:
    """One alternating update; returns scalar metrics for the step.

    ``rng`` drives the interpolation weights of the Wasserstein penalty.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    kind = _kind(model.variant)
    use_target_labels = batch.y_t is not None and is_supervised(model.variant)
    enc_params = _encoder_params(model)
    dis_params = model.discriminator.parameters()
    critic_lr = cfg.critic_lr if cfg.critic_lr is not None else cfg.lr
    metrics = {"cls_loss": 0.0, "dom_loss": 0.0, "gp": 0.0, "critic_grad_norm": 0.0}

    m = len(batch.x_s)
    if batch.x_t is None:
        z_all = encode(model, batch.x_s, training=True)
        z_s, z_t = z_all, None
    else:
        z_all = encode(model, np.concatenate([batch.x_s, batch.x_t]), training=True)
        z_s, z_t = ops.slice_rows(z_all, 0, m), ops.slice_rows(z_all, m, 2 * m)

    adversarial = kind in ("dann", "wass") and z_t is not None
    if adversarial and cfg.train_discriminator:
        zs_d, zt_d = z_s.detach(), z_t.detach()
        steps = cfg.critic_steps if kind == "wass" else 1
        for _ in range(steps):
            zero_grad(dis_params)
            if kind == "dann":
                loss = dann_domain_loss(discriminate(model, zs_d), discriminate(model, zt_d))
            else:
                loss, gp, norms = _critic_objective_fused(model, zs_d.data, zt_d.data, cfg.sigma, rng)
                metrics["gp"] += gp.item() / steps
                metrics["critic_grad_norm"] += float(norms.mean()) / steps
            backward(loss)
            adam_step(dis_params, critic_lr, cfg.beta1, cfg.beta2, cfg.eps)
        zero_grad(dis_params)

    zero_grad(enc_params)
    if use_target_labels:
        logits = classify(model, z_all, training=True)
        cls_loss = ops.softmax_cross_entropy(logits, np.concatenate([batch.y_s, batch.y_t]))
    else:
        cls_loss = ops.softmax_cross_entropy(classify(model, z_s, training=True), batch.y_s)
    total = cls_loss
    if adversarial:
        align = cfg.lambda_ > 0
        with nullcontext() if align else no_grad():
            if kind == "dann":
                dom = dann_domain_loss(discriminate(model, z_s), discriminate(model, z_t))
                if align:
                    total = ops.sub(total, ops.mul(dom, cfg.lambda_))
            else:
                dom = ops.sub(ops.mean(discriminate(model, z_s)), ops.mean(discriminate(model, z_t)))
                if align:
                    total = ops.add(total, ops.mul(dom, cfg.lambda_))
        metrics["dom_loss"] = dom.item()
    metrics["cls_loss"] = cls_loss.item()
    backward(total)
    adam_step(enc_params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    zero_grad(enc_params)
    zero_grad(dis_params)
    return metrics


class _IndexStream:
    """Endless stream of indices made of back-to-back random permutations."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.buf = np.empty(0, dtype=np.int64)

    def take(self, k: int) -> np.ndarray:
        while len(self.buf) < k:
            self.buf = np.concatenate([self.buf, self.rng.permutation(self.n)])
        out, self.buf = self.buf[:k], self.buf[k:]
        return out


def _accuracy(model, ds) -> float:
    if ds is None or len(ds) == 0:
        return float("nan")
    return float(np.mean(predict(model, ds.X) == ds.y))


def _check_pair(source: LabeledDataset, target: LabeledDataset | None) -> None:
    if len(source) == 0:
        raise ValueError("source dataset is empty")
    if target is None:
        return
    if len(target) == 0:
        raise ValueError("target dataset is empty")
    if source.X.shape[1] != target.X.shape[1] or list(source.gene_ids) != list(target.gene_ids):
        raise ValueError("source and target feature spaces differ; run align_genes first")
    if list(source.class_names) != list(target.class_names):
        raise ValueError(
            f"class vocabularies differ: {source.class_names} vs {target.class_names}"
        )


def new_model(variant: str, num_genes: int, num_classes: int, cfg: TrainConfig) -> AdaptationModel:
    latent = cfg.encoder_hidden[-1]
    return build_model(
        EncoderConfig(num_genes, cfg.encoder_hidden, cfg.use_batchnorm),
        ClassifierConfig(num_classes, latent, cfg.classifier_hidden, cfg.use_batchnorm),
        DiscriminatorConfig(latent, cfg.discriminator_hidden, "wasserstein" if variant.startswith("wass") else "dann"),
        seed=cfg.seed,
        variant=variant,
    )


def fit(
    variant: str,
    source: LabeledDataset,
    target: LabeledDataset | None,
    cfg: TrainConfig | None = None,
    source_val: LabeledDataset | None = None,
    target_val: LabeledDataset | None = None,
) -> tuple[AdaptationModel, TrainHistory]:
    """Train one model and return it with its per-epoch history.

    ``variant`` is one of ``dann_sup``, ``dann_unsup``, ``wass_sup``,
    ``wass_unsup`` or ``plain`` (classification only; with a target it trains on
    the labeled union in paired batches). Unsupervised variants never read
    ``target.y``. When ``target_val`` is given and ``cfg.select_best`` is set,
    the returned parameters are those of the epoch with the best target
    validation accuracy (earliest on ties).
    """
    cfg = cfg or TrainConfig()
    _check_pair(source, target)
    model = new_model(variant, source.X.shape[1], source.num_classes, cfg)
    rng = np.random.default_rng(cfg.seed)
    stream_s = _IndexStream(len(source), rng)
    stream_t = _IndexStream(len(target), rng) if target is not None else None
    sup = is_supervised(variant)
    if target is None:
        bs = min(cfg.batch_size, len(source))
        if bs < 2:
            raise ValueError("need at least 2 training samples")
        steps = math.ceil(len(source) / bs)
    else:
        bs = cfg.batch_size
        steps = math.ceil(max(len(source), len(target)) / bs)

    history = TrainHistory()
    best_acc, best_state = -1.0, None
    for epoch in range(1, cfg.epochs + 1):
        sums = {"cls_loss": 0.0, "dom_loss": 0.0, "gp": 0.0, "critic_grad_norm": 0.0}
        try:
            for _ in range(steps):
                i_s = stream_s.take(bs)
                if target is None:
                    batch = DomainBatch(source.X[i_s], source.y[i_s])
                else:
                    i_t = stream_t.take(bs)
                    batch = DomainBatch(source.X[i_s], source.y[i_s], target.X[i_t], target.y[i_t] if sup else None)
                for k, v in train_step(model, batch, cfg, rng).items():
                    sums[k] += v / steps
        except NumericError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}", history) from exc
        record = {"epoch": epoch, **sums}
        record["src_val_acc"] = _accuracy(model, source_val)
        record["tgt_val_acc"] = _accuracy(model, target_val)
        if not all(math.isfinite(record[k]) for k in sums):
            raise TrainingDiverged(f"epoch {epoch}: non-finite loss {record}", history)
        history.append(record)
        if cfg.select_best and target_val is not None and record["tgt_val_acc"] > best_acc:
            best_acc, best_state = record["tgt_val_acc"], model.state_dict()
            history.best_epoch = epoch
        log.debug("epoch %d %s", epoch, record)
    if best_state is not None:
        model.load_state_dict(best_state)
    return model, history


def clone_model(model: AdaptationModel) -> AdaptationModel:
    return copy.deepcopy(model)
