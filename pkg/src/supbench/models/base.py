"""Training plumbing shared by the three estimators."""
from __future__ import annotations

import hashlib
import logging
import math
import subprocess
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator

logger = logging.getLogger(__name__)

OPTIMIZERS = {
    "adam": torch.optim.Adam,
    "adamw": torch.optim.AdamW,
    "adagrad": torch.optim.Adagrad,
    "rmsprop": torch.optim.RMSprop,
    "asgd": torch.optim.ASGD,
}


@dataclass
class TrainConfig:
    """Per-method training hyperparameters.

    Defaults are the full-size classifier settings; :data:`DEFAULT_CONFIGS`
    holds all three methods. For the VAE the total
    loss is ``reconstruction_weight * MSE + (1 - reconstruction_weight) * KL``.
    """

    epochs: int = 10
    batch_size: int = 14
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    positive_class_weight: float = 20.0
    reconstruction_weight: float = 0.9
    latent_dims: int = 4096
    data_fraction: float = 1.0
    rng_seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; choose from {sorted(OPTIMIZERS)}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.positive_class_weight <= 0:
            raise ValueError("positive_class_weight must be > 0")
        if not 0 <= self.reconstruction_weight <= 1:
            raise ValueError("reconstruction_weight must lie in [0, 1]")
        if self.latent_dims < 1:
            raise ValueError("latent_dims must be >= 1")
        if not 0 < self.data_fraction <= 1:
            raise ValueError("data_fraction must lie in (0, 1]")
        return self

    def estimator_params(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "data_fraction"}

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULT_CONFIGS = {
    "detector": TrainConfig(epochs=10, batch_size=8, optimizer="adam", learning_rate=1e-4, positive_class_weight=20.0),
    "classifier": TrainConfig(epochs=10, batch_size=14, optimizer="adam", learning_rate=1e-4, positive_class_weight=20.0),
    "vae": TrainConfig(epochs=10, batch_size=5, optimizer="adam", learning_rate=5e-5, reconstruction_weight=0.9, latent_dims=4096),
}


def derive_seed(base_seed: int, *names: str | int) -> int:
    """Independent 32-bit seed for a named RNG stream."""
    key = "/".join(str(n) for n in (base_seed, *names)).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:4], "little")


def seeded_generator(base_seed: int, *names) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(base_seed, *names))
    return g


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True, text=True, timeout=5,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def to_tensor(X: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """``(n, H, W, 3)`` uint8 tiles -> ``(n, 3, H, W)`` tensor scaled to [0, 1]."""
    t = torch.from_numpy(np.ascontiguousarray(X)).permute(0, 3, 1, 2)
    return t.to(dtype) / 255.0


@dataclass
class EpochLog:
    epoch: int
    losses: dict[str, float]
    seconds: float


def run_epochs(
    module: torch.nn.Module,
    n_samples: int,
    step_loss: Callable[[np.ndarray], dict[str, torch.Tensor]],
    *,
    epochs: int,
    batch_size: int,
    optimizer: str,
    learning_rate: float,
    rng_seed: int,
    verbose: bool = False,
) -> list[EpochLog]:
    """Minibatch loop; ``step_loss`` maps batch indices to named losses incl. ``total``."""
    opt = OPTIMIZERS[optimizer](module.parameters(), lr=learning_rate)
    shuffle = np.random.default_rng(derive_seed(rng_seed, "shuffle"))
    history = []
    for epoch in range(epochs):
        module.train()
        start = time.perf_counter()
        sums: dict[str, float] = {}
        n_batches = 0
        order = shuffle.permutation(n_samples)
        for lo in range(0, n_samples, batch_size):
            idx = order[lo:lo + batch_size]
            losses = step_loss(idx)
            total = losses["total"]
            if not torch.isfinite(total):
                detail = ", ".join(f"{k}={float(v.detach()):.4g}" for k, v in losses.items())
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {n_batches}: {detail}")
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            for k, v in losses.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach())
            n_batches += 1
        log = EpochLog(epoch, {k: v / max(n_batches, 1) for k, v in sums.items()}, time.perf_counter() - start)
        history.append(log)
        if verbose:
            logger.info("epoch %d: %s (%.1fs)", epoch, log.losses, log.seconds)
    return history


def write_train_log(path: str | Path, history: Sequence[EpochLog]) -> None:
    keys = sorted({k for h in history for k in h.losses}, key=lambda k: (k != "total", k))
    lines = ["epoch\t" + "\t".join(f"mean_{k}" for k in keys) + "\tseconds"]
    for h in history:
        vals = "\t".join(repr(h.losses.get(k, math.nan)) for k in keys)
        lines.append(f"{h.epoch}\t{vals}\t{h.seconds:.3f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class TorchEstimator(BaseEstimator):
    """Common save/load and config handling for the torch-backed estimators."""

    method: str = ""

    def _check_fitted(self):
        if not hasattr(self, "module_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.get_params().items() if k in names})

    @classmethod
    def from_config(cls, config: TrainConfig, **extra):
        params = config.estimator_params()
        accepted = cls._get_param_names()
        return cls(**{k: v for k, v in params.items() if k in accepted}, **extra)

    def _build_module(self) -> torch.nn.Module:
        raise NotImplementedError

    def _init_module(self) -> torch.nn.Module:
        torch.manual_seed(derive_seed(self.rng_seed, "init"))
        return self._build_module()

    def save(self, path: str | Path) -> None:
        self._check_fitted()
        state = {
            "class": type(self).__name__,
            "params": self.get_params(),
            "train_config": self.train_config().to_dict(),
            "git_describe": git_describe(),
            "state_dict": self.module_.state_dict(),
            "history": [asdict(h) for h in getattr(self, "history_", [])],
            "extra": self._extra_state(),
        }
        torch.save(state, path)

    def _extra_state(self) -> dict:
        return {}

    def _load_extra_state(self, extra: dict) -> None:
        pass

    @classmethod
    def load(cls, path: str | Path):
        state = torch.load(path, map_location="cpu", weights_only=False)
        if state["class"] != cls.__name__:
            raise ValueError(f"artifact holds a {state['class']}, not a {cls.__name__}")
        est = cls(**state["params"])
        est.module_ = est._build_module()
        est.module_.load_state_dict(state["state_dict"])
        est.module_.eval()
        est.history_ = [EpochLog(**h) for h in state["history"]]
        est._load_extra_state(state["extra"])
        return est


def batched(n: int, size: int) -> Iterable[slice]:
    for lo in range(0, n, size):
        yield slice(lo, min(n, lo + size))
