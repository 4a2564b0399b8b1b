"""scikit-learn style front end to the adversarial trainers."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .adaptation import TrainConfig, fit, is_supervised
from .data import ExpressionMatrix, LabeledDataset
from .models import embed, predict_logits

UNLABELED = -1


def _dataset(X, y, classes, domain) -> LabeledDataset:
    ids = [f"{domain[0]}{i}" for i in range(len(X))]
    genes = [f"g{j}" for j in range(X.shape[1])]
    return LabeledDataset(ExpressionMatrix(X, ids, genes), y, [str(c) for c in classes], domain)


class DomainAdaptationClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Encoder + classifier trained with optional adversarial domain alignment.

    Parameters
    ----------
    variant : str
        ``dann_sup``, ``dann_unsup``, ``wass_sup``, ``wass_unsup`` or ``plain``.
    lambda_ : float
        Weight of the domain-alignment term.
    sigma : float
        Gradient-penalty weight (Wasserstein variants).
    epochs, batch_size, critic_steps, lr :
        Optimisation settings.
    encoder_hidden, classifier_hidden, discriminator_hidden : tuple of int
        Layer widths.
    random_state : int
        Seed for initialisation and batching.

    Notes
    -----
    ``fit(X, y, domain)`` takes the pooled matrix with ``domain`` 0 for source
    and 1 for target rows. Target labels may be ``-1`` for unsupervised
    variants, which never read them anyway. Without ``domain`` every row is
    treated as source and the model is trained without alignment.
    ``transform`` returns the latent representation.
    """

    def __init__(
        self,
        variant: str = "dann_sup",
        lambda_: float = 1.0,
        sigma: float = 10.0,
        epochs: int = 200,
        batch_size: int = 64,
        critic_steps: int = 5,
        lr: float = 1e-4,
        encoder_hidden=(256, 256, 256, 256),
        classifier_hidden=(128, 64),
        discriminator_hidden=(256, 128, 64),
        random_state: int = 0,
    ):
        self.variant = variant
        self.lambda_ = lambda_
        self.sigma = sigma
        self.epochs = epochs
        self.batch_size = batch_size
        self.critic_steps = critic_steps
        self.lr = lr
        self.encoder_hidden = encoder_hidden
        self.classifier_hidden = classifier_hidden
        self.discriminator_hidden = discriminator_hidden
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lambda_=self.lambda_,
            sigma=self.sigma,
            epochs=self.epochs,
            batch_size=self.batch_size,
            critic_steps=self.critic_steps,
            lr=self.lr,
            seed=self.random_state,
            encoder_hidden=self.encoder_hidden,
            classifier_hidden=self.classifier_hidden,
            discriminator_hidden=self.discriminator_hidden,
        )

    def fit(self, X, y, domain=None, target_val=None):
        """Train on pooled rows; ``target_val=(X_val, y_val)`` enables best-epoch selection."""
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} rows but y has {len(y)}")
        domain = np.zeros(len(X), dtype=int) if domain is None else np.asarray(domain).astype(int)
        if len(domain) != len(X) or not np.isin(domain, (0, 1)).all():
            raise ValueError("domain must hold one 0 (source) or 1 (target) per row")
        src, tgt = domain == 0, domain == 1
        if not src.any():
            raise ValueError("no source rows")
        variant = self.variant if tgt.any() else "plain"
        label_rows = src | (tgt & is_supervised(variant))
        labeled = y[label_rows]
        if not isinstance(labeled[0], str) and np.any(labeled == UNLABELED):
            raise ValueError("unlabeled rows (-1) are only allowed for target rows of unsupervised variants")
        self.classes_ = np.unique(labeled)
        index = {c: i for i, c in enumerate(self.classes_.tolist())}

        def encode_labels(values, strict=False):
            unknown = sorted({v for v in values.tolist() if v not in index}, key=str)
            if strict and unknown:
                raise ValueError(f"labels {unknown} were not seen in the labeled training rows")
            # rows whose labels are never read (unsupervised target) map to a placeholder
            return np.array([index.get(v, 0) for v in values.tolist()], dtype=np.int64)

        source = _dataset(X[src], encode_labels(y[src], strict=True), self.classes_, "source")
        target = _dataset(X[tgt], encode_labels(y[tgt]), self.classes_, "target") if tgt.any() else None
        val = None
        if target_val is not None:
            xv = check_array(target_val[0], dtype=np.float64)
            val = _dataset(xv, encode_labels(np.asarray(target_val[1]), strict=True), self.classes_, "target")
        self.model_, self.history_ = fit(variant, source, target, self._train_config(), target_val=val)
        self.n_features_in_ = X.shape[1]
        return self

    def _check(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def decision_function(self, X):
        X = self._check(X)
        return predict_logits(self.model_, X)

    def predict_proba(self, X):
        logits = self.decision_function(X)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        idx = self.decision_function(X).argmax(axis=1)
        return self.classes_[idx]

    def transform(self, X):
        X = self._check(X)
        return embed(self.model_, X)
