from .backbones import BackboneConfig
from .base import DEFAULT_CONFIGS, TrainConfig
from .classifier import TileClassifier
from .detector import Detection, TileDetector
from .vae import AnomalyNormalizer, VAEAnomalyDetector

ESTIMATORS = {"detector": TileDetector, "classifier": TileClassifier, "vae": VAEAnomalyDetector}

__all__ = [
    "AnomalyNormalizer", "BackboneConfig", "DEFAULT_CONFIGS", "Detection", "ESTIMATORS",
    "TileClassifier", "TileDetector", "TrainConfig", "VAEAnomalyDetector",
]
