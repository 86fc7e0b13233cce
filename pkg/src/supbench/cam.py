"""Class activation maps from captured activations and gradients.

Capture is done with forward hooks on the model's feature layer; all map
arithmetic happens in float64 numpy so heatmaps are reproducible across
platforms.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .models.backbones import find_layer
from .models.base import to_tensor

CAM_METHODS = ("gradcam", "gradcam_pp", "hirescam", "fullgrad", "eigencam", "eigengradcam")
TARGETS = ("class_logit", "reconstruction_error")
GRADCAM_PP_EPS = 1e-8


@dataclass
class ActivationCapture:
    activations: np.ndarray
    gradients: np.ndarray
    target_value: float = 0.0
    bias_terms: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    input: np.ndarray | None = None
    input_gradient: np.ndarray | None = None

    def __post_init__(self):
        if self.activations.shape != self.gradients.shape:
            raise ValueError(f"activation shape {self.activations.shape} != gradient shape {self.gradients.shape}")
        if self.activations.ndim != 3:
            raise ValueError("activations must be C x h x w")


@dataclass
class Heatmap:
    values: np.ndarray
    source_method: str
    tile_id: str = ""


# ------------------------------------------------------------------ capture


def _bias_modules(model: nn.Module) -> list[nn.Module]:
    out = []
    for m in model.modules():
        if isinstance(m, nn.modules.conv._ConvNd) and m.bias is not None:
            out.append(m)
        elif isinstance(m, nn.BatchNorm2d):
            out.append(m)
    return out


def _effective_bias(m: nn.Module) -> torch.Tensor:
    if isinstance(m, nn.BatchNorm2d):
        scale = m.weight / torch.sqrt(m.running_var + m.eps)
        return (m.bias - m.running_mean * scale).detach()
    return m.bias.detach()


def capture_batch(model: nn.Module, x: torch.Tensor, target: str, layer: str | None = None,
                  fullgrad: bool = False) -> list[ActivationCapture]:
    """Capture feature-layer activations and target gradients for each sample.

    ``model.cam_target(x, target)`` gives one scalar per sample and their sum
    is back-propagated. In eval mode samples do not interact, so each sample's
    gradients are those of its own scalar.
    """
    if target not in TARGETS:
        raise ValueError(f"unknown CAM target {target!r}; expected one of {TARGETS}")
    layer = layer or model.feature_layer
    feature_module = find_layer(model, layer)
    model.eval()
    stash: dict[str, torch.Tensor] = {}
    bias_outputs: list[tuple[nn.Module, torch.Tensor]] = []

    def keep_features(_m, _inp, out):
        out.retain_grad()
        stash["features"] = out

    def keep_bias_output(m, _inp, out):
        out.retain_grad()
        bias_outputs.append((m, out))

    handles = [feature_module.register_forward_hook(keep_features)]
    if fullgrad:
        handles += [m.register_forward_hook(keep_bias_output) for m in _bias_modules(model)]
    x = x.detach().clone().requires_grad_(fullgrad)
    try:
        with torch.enable_grad():
            values = model.cam_target(x, target)
            model.zero_grad(set_to_none=True)
            values.sum().backward()
    finally:
        for h in handles:
            h.remove()
    feats = stash["features"]
    acts = feats.detach().double().numpy()
    grads = feats.grad.double().numpy() if feats.grad is not None else np.zeros_like(acts)
    per_sample = values.detach().double().tolist()
    captures = []
    for i in range(len(x)):
        cap = ActivationCapture(acts[i], grads[i], per_sample[i])
        if fullgrad:
            cap.bias_terms = [
                (_effective_bias(m).double().numpy(),
                 (out.grad[i].double().numpy() if out.grad is not None else np.zeros(out.shape[1:])))
                for m, out in bias_outputs
            ]
            cap.input = x[i].detach().double().numpy()
            cap.input_gradient = x.grad[i].double().numpy() if x.grad is not None else np.zeros(x.shape[1:])
        captures.append(cap)
    return captures


def capture(model: nn.Module, tile, target: str, layer: str | None = None, fullgrad: bool = False) -> ActivationCapture:
    """Capture for a single tile (``H x W x 3`` uint8 array or ``3 x H x W`` tensor)."""
    if isinstance(tile, torch.Tensor):
        x = tile[None] if tile.ndim == 3 else tile
    else:
        x = to_tensor(np.asarray(tile)[None], dtype=next(model.parameters()).dtype)
    return capture_batch(model, x, target, layer, fullgrad)[0]


# ------------------------------------------------------------------ methods


def _check_finite(cap: ActivationCapture) -> None:
    if not (np.isfinite(cap.activations).all() and np.isfinite(cap.gradients).all()):
        raise ValueError("capture contains non-finite values")


def _relu(a):
    return np.maximum(a, 0.0)


def _eigen_projection(tensor: np.ndarray) -> np.ndarray:
    c, h, w = tensor.shape
    flat = tensor.reshape(c, h * w).T
    if not flat.any():
        return np.zeros((h, w))
    _, _, vt = np.linalg.svd(flat, full_matrices=False)
    proj = flat @ vt[0]
    mean = proj.mean()
    if mean < 0 or (mean == 0 and proj[np.argmax(np.abs(proj))] < 0):
        proj = -proj
    return proj.reshape(h, w)


def _minmax(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    if hi <= lo:
        return np.zeros_like(a, dtype=float)
    return (a - lo) / (hi - lo)


def _fullgrad(cap: ActivationCapture) -> np.ndarray:
    if cap.input is None or cap.input_gradient is None:
        raise ValueError("fullgrad requires bias terms and input gradients in the capture")
    size = cap.input.shape[1:]
    total = _minmax(np.abs(cap.input * cap.input_gradient).sum(axis=0))
    for bias, grad in cap.bias_terms:
        layer_map = np.abs(bias[:, None, None] * grad).sum(axis=0)
        total = total + bilinear_resize(_minmax(layer_map), size)
    return total


def compute_cam(cap: ActivationCapture, method: str) -> np.ndarray:
    """Raw (unnormalized) map: ``h x w``, or ``H x W`` for fullgrad."""
    if method not in CAM_METHODS:
        raise ValueError(f"unknown CAM method {method!r}; expected one of {CAM_METHODS}")
    _check_finite(cap)
    A, g = cap.activations, cap.gradients
    if method == "gradcam":
        weights = g.mean(axis=(1, 2))
        return _relu(np.tensordot(weights, A, axes=1))
    if method == "hirescam":
        return _relu((g * A).sum(axis=0))
    if method == "gradcam_pp":
        g2, g3 = g ** 2, g ** 3
        sum_a = A.sum(axis=(1, 2))[:, None, None]
        alpha = g2 / (2 * g2 + sum_a * g3 + GRADCAM_PP_EPS)
        alpha = np.where(g != 0, alpha, 0.0)
        weights = (alpha * _relu(g)).sum(axis=(1, 2))
        return _relu(np.tensordot(weights, A, axes=1))
    if method == "eigencam":
        return _eigen_projection(A)
    if method == "eigengradcam":
        return _eigen_projection(g * A)
    return _fullgrad(cap)


# --------------------------------------------------------------- resampling


def _axis_weights(n_in: int, n_out: int):
    scale = n_in / n_out
    src = np.maximum((np.arange(n_out) + 0.5) * scale - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def bilinear_resize(a: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel centers (corner alignment off)."""
    a = np.asarray(a, dtype=float)
    if a.shape == tuple(size):
        return a.copy()
    r0, r1, fr = _axis_weights(a.shape[0], size[0])
    c0, c1, fc = _axis_weights(a.shape[1], size[1])
    rows = a[r0] * (1 - fr)[:, None] + a[r1] * fr[:, None]
    return rows[:, c0] * (1 - fc)[None, :] + rows[:, c1] * fc[None, :]


def upsample_and_normalize(raw: np.ndarray, target_size: tuple[int, int] = (200, 200),
                           method: str = "", tile_id: str = "") -> Heatmap:
    """Min-max normalize to [0, 1] and resize; a constant map becomes all zeros."""
    raw = np.asarray(raw, dtype=float)
    if not np.isfinite(raw).all():
        raise ValueError("raw map contains non-finite values")
    values = np.clip(bilinear_resize(_minmax(raw), target_size), 0.0, 1.0)
    return Heatmap(values, method, tile_id)


def cam_heatmaps(model: nn.Module, X: np.ndarray, target: str, method: str = "gradcam",
                 batch_size: int = 16) -> np.ndarray:
    """Heatmaps ``(n, H, W)`` in [0, 1] for a stack of uint8 tiles."""
    if method not in CAM_METHODS:
        raise ValueError(f"unknown CAM method {method!r}; expected one of {CAM_METHODS}")
    size = X.shape[1:3]
    out = np.zeros((len(X), *size))
    for lo in range(0, len(X), batch_size):
        x = to_tensor(X[lo:lo + batch_size])
        for k, cap in enumerate(capture_batch(model, x, target, fullgrad=method == "fullgrad")):
            out[lo + k] = upsample_and_normalize(compute_cam(cap, method), size, method).values
    return out
