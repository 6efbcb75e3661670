"""scikit-learn style front end: a classifier that also reports its own uncertainty."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ConfigurationError, check_images, check_labels, to_tensor
from .backbone import EncoderConfig, predict
from .datasets import DatasetSplit, Sample
from .training import CheckpointBundle, TrainConfig, train_classifier, train_g0, train_g1
from .uncertainty import METHODS, UncertaintyMethod, uncertainty_map


def _as_samples(X, y, prefix):
    return [Sample(img, int(lbl), "array", f"{prefix}-{i:06d}") for i, (img, lbl) in enumerate(zip(X, y))]


class DRUEClassifier(TransformerMixin, ClassifierMixin, BaseEstimator):
    """Residual image classifier with a two-depth decoder pair for uncertainty.

    ``fit`` trains the classifier, then G1 on the penultimate features, then
    the G0 head on the final features with G1's parameters frozen.
    ``uncertainty`` scores images with any of ``drue``, ``rue``, ``entropy`` or
    ``mc_dropout``; ``transform`` stacks all four as columns.

    Parameters
    ----------
    channels, downsample, stem_channels, stem_stride, activation
        Encoder layout; the decoders mirror it.
    learning_rate, classifier_learning_rate : float
        Adam step sizes for the two decoder stages and for the classifier.
    classifier_batch_size, decoder_batch_size : int
    max_epochs, patience : int
        Early stopping on validation loss, per stage.
    validation_fraction : float
        Share of the training images held out when ``X_val`` is not given.
    freeze : bool
        Keep G1's parameters fixed while fitting G0.
    mc_passes, mc_dropout_rate : int, float
        Settings of the MC-dropout score.
    random_state : int
    """

    def __init__(
        self,
        channels=(16, 32, 64, 128),
        downsample=(False, True, True, True),
        stem_channels=16,
        stem_stride=2,
        activation="relu",
        learning_rate=1e-3,
        classifier_learning_rate=3e-4,
        classifier_batch_size=4,
        decoder_batch_size=8,
        max_epochs=40,
        patience=8,
        validation_fraction=0.1,
        freeze=True,
        mc_passes=20,
        mc_dropout_rate=0.3,
        random_state=0,
    ):
        self.channels = channels
        self.downsample = downsample
        self.stem_channels = stem_channels
        self.stem_stride = stem_stride
        self.activation = activation
        self.learning_rate = learning_rate
        self.classifier_learning_rate = classifier_learning_rate
        self.classifier_batch_size = classifier_batch_size
        self.decoder_batch_size = decoder_batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.freeze = freeze
        self.mc_passes = mc_passes
        self.mc_dropout_rate = mc_dropout_rate
        self.random_state = random_state

    def _stage_config(self, stage, batch_size):
        lr = self.classifier_learning_rate if stage == "classifier" else self.learning_rate
        return TrainConfig(
            learning_rate=lr, batch_size=batch_size, max_epochs=self.max_epochs,
            patience=self.patience, seed=self.random_state, stage=stage,
        )

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X)
        y = check_labels(y, len(X))
        if X.shape[1] != X.shape[2]:
            raise ConfigurationError("images must be square")
        if X_val is None:
            if not 0 < self.validation_fraction < 1:
                raise ConfigurationError("validation_fraction must lie in (0, 1)")
            rng = np.random.default_rng(self.random_state)
            perm = rng.permutation(len(X))
            n_val = max(1, int(round(self.validation_fraction * len(X))))
            if n_val >= len(X):
                raise ConfigurationError("too few images to hold out a validation set")
            val_idx, tr_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
            X, X_val, y, y_val = X[tr_idx], X[val_idx], y[tr_idx], y[val_idx]
        else:
            X_val = check_images(X_val, image_size=X.shape[1])
            y_val = check_labels(y_val, len(X_val))

        encoder = EncoderConfig(
            num_blocks=len(self.channels), channels=list(self.channels), downsample=list(self.downsample),
            stem_channels=self.stem_channels, stem_stride=self.stem_stride, image_size=X.shape[1],
            activation=self.activation,
        )
        split = DatasetSplit(_as_samples(X, y, "train"), _as_samples(X_val, y_val, "val"), [], self.random_state)
        bundle = train_classifier(split, self._stage_config("classifier", self.classifier_batch_size), encoder)
        bundle = train_g1(bundle, split, self._stage_config("g1", self.decoder_batch_size))
        bundle = train_g0(bundle, split, self._stage_config("g0", self.decoder_batch_size), freeze=self.freeze)
        self._set_bundle(bundle)
        return self

    def _set_bundle(self, bundle: CheckpointBundle):
        self.bundle_ = bundle
        self.classes_ = np.array([0, 1])
        self.image_size_ = bundle.model.config.image_size
        self.freeze_report_ = bundle.freeze_report

    @classmethod
    def from_bundle(cls, bundle: CheckpointBundle, **params) -> "DRUEClassifier":
        """Wrap an already trained bundle (for example one loaded from a checkpoint)."""
        cfg = bundle.model.config
        est = cls(
            channels=tuple(cfg.channels), downsample=tuple(cfg.downsample), stem_channels=cfg.stem_channels,
            stem_stride=cfg.stem_stride, activation=cfg.activation, **params,
        )
        est._set_bundle(bundle)
        return est

    def _validated(self, X):
        check_is_fitted(self, "bundle_")
        return check_images(X, image_size=self.image_size_)

    def predict_proba(self, X):
        X = self._validated(X)
        return predict(self.bundle_.model, to_tensor(X))

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]

    def uncertainty(self, X, method="drue"):
        """Per-image uncertainty; larger means less trustworthy."""
        X = self._validated(X)
        params = {}
        if method == "mc_dropout":
            params = {"n_passes": self.mc_passes, "dropout_rate": self.mc_dropout_rate, "seed": self.random_state}
        return UncertaintyMethod(method, params)(X, self.bundle_)

    def transform(self, X):
        """Columns: drue, rue, entropy, mc_dropout."""
        X = self._validated(X)
        return np.column_stack([self.uncertainty(X, m) for m in METHODS])

    def uncertainty_map(self, X):
        """Per-pixel DRUE maps scaled to [0, 1], shape (n, H, W)."""
        X = self._validated(X)
        return uncertainty_map(X, self.bundle_)
