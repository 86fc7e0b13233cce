"""Variational autoencoder anomaly detector.

The encoder is the shared backbone; two linear heads give the latent mean and
log-variance. The decoder mirrors the encoder with transposed convolutions.
Anomaly scores are per-tile reconstruction MSE min-max scaled by the
validation-set extremes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import OutlierMixin
from torch import nn

from .._validation import check_labels, check_tiles
from .backbones import BackboneConfig, build_backbone, feature_shape
from .base import TorchEstimator, batched, run_epochs, seeded_generator, to_tensor

BOTTLENECK_CHANNELS = 16


@dataclass(frozen=True)
class AnomalyNormalizer:
    min_loss: float
    max_loss: float

    def __post_init__(self):
        if not self.min_loss < self.max_loss:
            raise ValueError(f"normalizer needs min_loss < max_loss, got ({self.min_loss}, {self.max_loss})")

    def __call__(self, losses) -> np.ndarray:
        losses = np.asarray(losses, dtype=float)
        return np.clip((losses - self.min_loss) / (self.max_loss - self.min_loss), 0.0, 1.0)


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Per-sample KL(N(mu, sigma^2) || N(0, 1)) summed over latent dims."""
    return -0.5 * torch.sum(1 + logvar - mu.pow(2) - logvar.exp(), dim=1)


def reconstruction_mse(x: torch.Tensor, recon: torch.Tensor) -> torch.Tensor:
    """Per-sample mean squared error."""
    return (recon - x).pow(2).flatten(1).mean(dim=1)


def vae_loss(x, recon, mu, logvar, reconstruction_weight: float) -> dict[str, torch.Tensor]:
    mse = reconstruction_mse(x, recon).mean()
    kl = kl_divergence(mu, logvar).mean()
    total = reconstruction_weight * mse + (1.0 - reconstruction_weight) * kl
    return {"total": total, "mse": mse, "kl": kl}


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    return mu + torch.exp(0.5 * logvar) * eps


def _up(c_in, c_out):
    return nn.Sequential(nn.ConvTranspose2d(c_in, c_out, 4, 2, 1), nn.BatchNorm2d(c_out), nn.ReLU())


class VAENet(nn.Module):
    def __init__(self, backbone_config: BackboneConfig, latent_dims: int, input_size: int):
        super().__init__()
        self.input_size = input_size
        self.backbone = build_backbone(backbone_config)
        c, h, w = feature_shape(self.backbone, input_size)
        self.feature_layer = f"backbone.{backbone_config.feature_layer}"
        self.squeeze = nn.Conv2d(c, BOTTLENECK_CHANNELS, 1)
        flat = BOTTLENECK_CHANNELS * h * w
        self.fc_mu = nn.Linear(flat, latent_dims)
        self.fc_logvar = nn.Linear(flat, latent_dims)
        self.fc_dec = nn.Linear(latent_dims, flat)
        self.unsqueeze = nn.Sequential(nn.Conv2d(BOTTLENECK_CHANNELS, c, 1), nn.ReLU())
        self._grid = (h, w)
        n_up = int(round(math.log2(self.backbone.stride)))
        chans = [c] + [max(8, c // 2 ** (i + 1)) for i in range(n_up)]
        self.decoder = nn.Sequential(*[_up(chans[i], chans[i + 1]) for i in range(n_up)])
        self.to_rgb = nn.Conv2d(chans[-1], 3, 3, 1, 1)

    def encode(self, x):
        flat = torch.flatten(self.squeeze(self.backbone(x)), 1)
        return self.fc_mu(flat), self.fc_logvar(flat)

    def decode(self, z):
        h = self.fc_dec(z).view(len(z), BOTTLENECK_CHANNELS, *self._grid)
        out = self.to_rgb(self.decoder(self.unsqueeze(h)))
        if out.shape[-1] != self.input_size:
            out = F.interpolate(out, size=(self.input_size, self.input_size), mode="bilinear", align_corners=False)
        return torch.sigmoid(out)

    def forward(self, x, eps=None):
        mu, logvar = self.encode(x)
        z = mu if eps is None else reparameterize(mu, logvar, eps)
        return self.decode(z), mu, logvar

    def cam_target(self, x: torch.Tensor, target: str) -> torch.Tensor:
        if target != "reconstruction_error":
            raise ValueError(f"VAE supports target 'reconstruction_error', not {target!r}")
        recon, _, _ = self(x)
        return reconstruction_mse(x, recon)


class VAEAnomalyDetector(OutlierMixin, TorchEstimator):
    """Trained on panel-free tiles only; higher scores mean more anomalous.

    Inference is deterministic: the decoder is fed the latent mean.
    """

    method = "vae"

    def __init__(self, backbone="reduced", epochs=10, batch_size=5, optimizer="adam", learning_rate=5e-5,
                 reconstruction_weight=0.9, latent_dims=128, rng_seed=0, tile_size=200, verbose=False):
        self.backbone = backbone
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.reconstruction_weight = reconstruction_weight
        self.latent_dims = latent_dims
        self.rng_seed = rng_seed
        self.tile_size = tile_size
        self.verbose = verbose

    def _build_module(self):
        return VAENet(BackboneConfig(self.backbone), self.latent_dims, self.tile_size)

    def fit(self, X, y=None):
        X = check_tiles(X, self.tile_size)
        if y is not None and check_labels(y, len(X)).any():
            raise ValueError("VAE training stream contains positive tiles; train on negatives only")
        self.train_config().validate()
        if len(X) == 0:
            raise ValueError("cannot train on an empty split")
        self.module_ = self._init_module()
        eps_gen = seeded_generator(self.rng_seed, "epsilon")

        def step(idx):
            x = to_tensor(X[idx])
            eps = torch.randn(len(idx), self.latent_dims, generator=eps_gen)
            recon, mu, logvar = self.module_(x, eps)
            return vae_loss(x, recon, mu, logvar, self.reconstruction_weight)

        self.history_ = run_epochs(
            self.module_, len(X), step, epochs=self.epochs, batch_size=self.batch_size,
            optimizer=self.optimizer, learning_rate=self.learning_rate, rng_seed=self.rng_seed, verbose=self.verbose,
        )
        self.module_.eval()
        return self

    def reconstruction_errors(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_tiles(X, self.tile_size)
        self.module_.eval()
        out = []
        with torch.no_grad():
            for sl in batched(len(X), 32):
                x = to_tensor(X[sl])
                recon, _, _ = self.module_(x)
                out.append(reconstruction_mse(x, recon).double().numpy())
        return np.concatenate(out) if out else np.zeros(0)

    def calibrate(self, X_val) -> AnomalyNormalizer:
        self.normalizer_ = calibrate_normalizer(self.reconstruction_errors(X_val))
        return self.normalizer_

    def score_samples(self, X) -> np.ndarray:
        """Normalized anomaly score in [0, 1]."""
        if not hasattr(self, "normalizer_"):
            raise ValueError("call calibrate() on validation tiles before scoring")
        return self.normalizer_(self.reconstruction_errors(X))

    presence_scores = score_samples

    def predict(self, X, threshold: float = 0.5) -> np.ndarray:
        return self.score_samples(X) >= threshold

    def heatmaps(self, X, method: str = "gradcam") -> np.ndarray:
        from ..cam import cam_heatmaps
        self._check_fitted()
        return cam_heatmaps(self.module_, check_tiles(X, self.tile_size), "reconstruction_error", method)

    def _extra_state(self):
        n = getattr(self, "normalizer_", None)
        return {} if n is None else {"normalizer": (n.min_loss, n.max_loss)}

    def _load_extra_state(self, extra):
        if "normalizer" in extra:
            self.normalizer_ = AnomalyNormalizer(*extra["normalizer"])


def calibrate_normalizer(losses) -> AnomalyNormalizer:
    """Normalizer from per-tile validation losses."""
    losses = np.asarray(losses, dtype=float)
    if losses.size == 0:
        raise ValueError("cannot calibrate on an empty validation set")
    return AnomalyNormalizer(float(losses.min()), float(losses.max()))
