"""Binary presence classifier (backbone + linear head) with CAM heatmaps."""
from __future__ import annotations

import warnings

import numpy as np
import torch
from sklearn.base import ClassifierMixin
from torch import nn

from .._validation import check_labels, check_tiles
from .backbones import BackboneConfig, build_backbone
from .base import TorchEstimator, batched, run_epochs, to_tensor


class PresenceNet(nn.Module):
    def __init__(self, backbone_config: BackboneConfig):
        super().__init__()
        self.backbone = build_backbone(backbone_config)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(self.backbone.out_channels, 1)
        self.feature_layer = f"backbone.{backbone_config.feature_layer}"

    def forward(self, x):
        return self.head(torch.flatten(self.pool(self.backbone(x)), 1)).squeeze(1)

    def cam_target(self, x: torch.Tensor, target: str) -> torch.Tensor:
        if target != "class_logit":
            raise ValueError(f"classifier supports target 'class_logit', not {target!r}")
        return self(x)


def weighted_bce(logits: torch.Tensor, labels: torch.Tensor, positive_class_weight: float) -> torch.Tensor:
    pos_weight = torch.tensor(positive_class_weight, dtype=logits.dtype)
    return nn.functional.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype), pos_weight=pos_weight)


class TileClassifier(ClassifierMixin, TorchEstimator):
    """Image-level presence classifier trained with positive-weighted BCE.

    ``fit(X, y)`` takes ``(n, H, W, 3)`` uint8 tiles and boolean labels.
    ``predict_proba`` returns sigmoid scores; :meth:`heatmaps` runs a CAM
    method on the final feature layer.
    """

    method = "classifier"

    def __init__(self, backbone="reduced", epochs=10, batch_size=14, optimizer="adam", learning_rate=1e-4,
                 positive_class_weight=20.0, rng_seed=0, feature_layer=None, verbose=False):
        self.backbone = backbone
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.positive_class_weight = positive_class_weight
        self.rng_seed = rng_seed
        self.feature_layer = feature_layer
        self.verbose = verbose

    def _build_module(self):
        return PresenceNet(BackboneConfig(self.backbone, False, self.feature_layer))

    def fit(self, X, y):
        X = check_tiles(X)
        y = check_labels(y, len(X))
        self.train_config().validate()
        if len(X) == 0:
            raise ValueError("cannot train on an empty split")
        if y.all() or not y.any():
            warnings.warn("training data contains a single class", UserWarning, stacklevel=2)
        self.classes_ = np.array([False, True])
        self.module_ = self._init_module()
        labels = torch.from_numpy(y)

        def step(idx):
            logits = self.module_(to_tensor(X[idx]))
            return {"total": weighted_bce(logits, labels[idx], self.positive_class_weight)}

        self.history_ = run_epochs(
            self.module_, len(X), step, epochs=self.epochs, batch_size=self.batch_size,
            optimizer=self.optimizer, learning_rate=self.learning_rate, rng_seed=self.rng_seed, verbose=self.verbose,
        )
        self.module_.eval()
        return self

    def decision_function(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_tiles(X)
        self.module_.eval()
        out = []
        with torch.no_grad():
            for sl in batched(len(X), 32):
                out.append(self.module_(to_tensor(X[sl])).double().numpy())
        return np.concatenate(out) if out else np.zeros(0)

    def presence_scores(self, X) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.decision_function(X)))

    def predict_proba(self, X) -> np.ndarray:
        p = self.presence_scores(X)
        return np.stack([1 - p, p], axis=1)

    def predict(self, X) -> np.ndarray:
        return self.presence_scores(X) >= 0.5

    def heatmaps(self, X, method: str = "gradcam") -> np.ndarray:
        from ..cam import cam_heatmaps
        self._check_fitted()
        return cam_heatmaps(self.module_, check_tiles(X), "class_logit", method)
