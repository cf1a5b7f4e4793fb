"""Scikit-learn style estimator facade over the volumetric classifier.

Wraps model building, the two training stages, and scoring behind the
familiar fit/predict API so the classifier can sit inside sklearn
pipelines and model-selection utilities. The functional API in the other
modules remains the primary interface for experiments.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .data import VolumeRecord
from .errors import ConfigError
from .model import ArchitectureSpec, build_model, forward
from .tensor import Tensor
from .training import TrainConfig, finetune_stage2, split_records, train_stage1


class VolumeNetClassifier(BaseEstimator, ClassifierMixin):
    """Binary volumetric classifier with optional cross-attention blocks.

    Parameters mirror :class:`ArchitectureSpec` and :class:`TrainConfig`;
    ``finetune`` enables the consistency-based second training stage.
    """

    def __init__(self, variant: str = "H", placement=None, dropout_rate: float = 0.1,
                 epochs: int = 50, batch_size: int = 4, learning_rate: float = 1e-4,
                 patience: int = 25, lam: float = 0.5, finetune: bool = False,
                 val_fraction: float = 0.2, seed: int = 0):
        self.variant = variant
        self.placement = placement
        self.dropout_rate = dropout_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.patience = patience
        self.lam = lam
        self.finetune = finetune
        self.val_fraction = val_fraction
        self.seed = seed

    def _records(self, X, y=None):
        X = np.asarray(X, dtype=float)
        if X.ndim == 4:
            X = X[:, None]
        if X.ndim != 5 or X.shape[1] != 1:
            raise ConfigError(f"expected [n,D,H,W] or [n,1,D,H,W] volumes, got {X.shape}")
        labels = np.zeros(len(X), dtype=int) if y is None else np.asarray(y, dtype=int)
        return [
            VolumeRecord(values=x, label=int(lbl), patient_id=f"S{i:05d}")
            for i, (x, lbl) in enumerate(zip(X, labels))
        ]

    def fit(self, X, y):
        records = self._records(X, y)
        self.classes_ = np.unique(np.asarray(y, dtype=int))
        dims = records[0].dims
        spec = ArchitectureSpec(variant=self.variant, placement=self.placement,
                                dropout_rate=self.dropout_rate, input_dims=dims)
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                          learning_rate=self.learning_rate, patience=self.patience,
                          lam=self.lam, seed=self.seed, augment_scale=False)
        rng = np.random.default_rng(self.seed)
        frac_val = self.val_fraction
        splits = split_records(records, fractions=(1 - frac_val - 1e-9, frac_val, 1e-9), rng=rng)
        if not splits["test"]:
            splits["test"] = splits["val"]
        self.model_ = build_model(spec, seed=self.seed)
        result = train_stage1(self.model_, splits, cfg)
        if self.finetune:
            result = finetune_stage2(self.model_, splits, cfg)
        self.history_ = result.history
        return self

    def predict_proba(self, X):
        if not hasattr(self, "model_"):
            raise ConfigError("estimator is not fitted; call fit first")
        records = self._records(X)
        probs = []
        for start in range(0, len(records), self.batch_size):
            chunk = records[start:start + self.batch_size]
            batch = Tensor(np.stack([r.values for r in chunk]))
            probs.append(forward(self.model_, batch, mode="eval").probs.data)
        return np.concatenate(probs, axis=0)

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)
