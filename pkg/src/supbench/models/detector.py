"""Two-stage box detector built on torchvision's Faster R-CNN."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torchvision.models.detection import FasterRCNN, fasterrcnn_resnet50_fpn
from torchvision.models.detection.anchor_utils import AnchorGenerator
from torchvision.models.detection.faster_rcnn import FastRCNNPredictor, TwoMLPHead
from torchvision.models.detection.roi_heads import RoIHeads
from torchvision.ops import MultiScaleRoIAlign

from .._validation import check_boxes, check_tiles
from .backbones import BackboneConfig, build_backbone
from .base import TorchEstimator, batched, run_epochs, to_tensor

NMS_IOU = 0.5
SCORE_FLOOR = 0.01
MAX_DETECTIONS = 50


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    score: float

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def presence_from_detections(dets: list[Detection]) -> float:
    return max((d.score for d in dets), default=0.0)


class WeightedRoIHeads(RoIHeads):
    """RoI heads whose classification loss up-weights the object class."""

    positive_class_weight: float = 1.0

    def forward(self, features, proposals, image_shapes, targets=None):
        if not self.training:
            return super().forward(features, proposals, image_shapes, targets)
        proposals, _, labels, regression_targets = self.select_training_samples(proposals, targets)
        box_features = self.box_head(self.box_roi_pool(features, proposals, image_shapes))
        class_logits, box_regression = self.box_predictor(box_features)
        labels = torch.cat(labels)
        regression_targets = torch.cat(regression_targets)
        weight = torch.ones(class_logits.shape[1], dtype=class_logits.dtype)
        weight[1:] = self.positive_class_weight
        # normalized by sample count, not by summed weights
        loss_cls = (F.cross_entropy(class_logits, labels, reduction="none") * weight[labels]).mean()
        pos = torch.where(labels > 0)[0]
        box_regression = box_regression.reshape(len(labels), -1, 4)
        loss_box = F.smooth_l1_loss(
            box_regression[pos, labels[pos]], regression_targets[pos], beta=1 / 9, reduction="sum"
        ) / labels.numel()
        return [], {"loss_classifier": loss_cls, "loss_box_reg": loss_box}


def build_faster_rcnn(backbone_config: BackboneConfig, tile_size: int, positive_class_weight: float) -> FasterRCNN:
    common = dict(
        min_size=tile_size, max_size=tile_size,
        box_nms_thresh=NMS_IOU, box_score_thresh=SCORE_FLOOR, box_detections_per_img=MAX_DETECTIONS,
    )
    if backbone_config.architecture == "resnet50":
        model = fasterrcnn_resnet50_fpn(weights=None, weights_backbone=None, num_classes=2,
                                        trainable_backbone_layers=5, **common)
    else:
        backbone = build_backbone(backbone_config)
        anchors = AnchorGenerator(sizes=((8, 16, 32, 64),), aspect_ratios=((0.5, 1.0, 2.0),))
        roi_pool = MultiScaleRoIAlign(featmap_names=["0"], output_size=7, sampling_ratio=2)
        model = FasterRCNN(
            backbone, num_classes=None,
            rpn_anchor_generator=anchors, box_roi_pool=roi_pool,
            box_head=TwoMLPHead(backbone.out_channels * 49, 256),
            box_predictor=FastRCNNPredictor(256, 2),
            image_mean=[0.5, 0.5, 0.5], image_std=[0.25, 0.25, 0.25],
            rpn_pre_nms_top_n_train=600, rpn_pre_nms_top_n_test=300,
            rpn_post_nms_top_n_train=300, rpn_post_nms_top_n_test=100,
            box_batch_size_per_image=128,
            **common,
        )
    model.roi_heads.__class__ = WeightedRoIHeads
    model.roi_heads.positive_class_weight = float(positive_class_weight)
    return model


class TileDetector(TorchEstimator):
    """Box detector; ``fit(X, boxes)`` takes one ``(k, 4)`` xyxy array per tile.

    The per-tile presence score is the highest detection score, or 0 when
    nothing is detected.
    """

    method = "detector"

    def __init__(self, backbone="reduced", epochs=10, batch_size=8, optimizer="adam", learning_rate=1e-4,
                 positive_class_weight=20.0, rng_seed=0, tile_size=200, verbose=False):
        self.backbone = backbone
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.positive_class_weight = positive_class_weight
        self.rng_seed = rng_seed
        self.tile_size = tile_size
        self.verbose = verbose

    def _build_module(self):
        return build_faster_rcnn(BackboneConfig(self.backbone), self.tile_size, self.positive_class_weight)

    def fit(self, X, boxes):
        X = check_tiles(X, self.tile_size)
        boxes = check_boxes(boxes, len(X), self.tile_size)
        self.train_config().validate()
        if len(X) == 0:
            raise ValueError("cannot train on an empty split")
        self.module_ = self._init_module()
        targets = [{"boxes": torch.from_numpy(b), "labels": torch.ones(len(b), dtype=torch.int64)} for b in boxes]

        def step(idx):
            images = list(to_tensor(X[idx]))
            losses = self.module_(images, [targets[i] for i in idx])
            losses["total"] = sum(losses.values())
            return losses

        self.history_ = run_epochs(
            self.module_, len(X), step, epochs=self.epochs, batch_size=self.batch_size,
            optimizer=self.optimizer, learning_rate=self.learning_rate, rng_seed=self.rng_seed, verbose=self.verbose,
        )
        self.module_.eval()
        return self

    def predict_detections(self, X) -> list[list[Detection]]:
        self._check_fitted()
        X = check_tiles(X, self.tile_size)
        self.module_.eval()
        out = []
        with torch.no_grad():
            for sl in batched(len(X), 16):
                for res in self.module_(list(to_tensor(X[sl]))):
                    dets = []
                    for box, score in zip(res["boxes"].double().tolist(), res["scores"].double().tolist()):
                        x1, y1, x2, y2 = (min(max(v, 0.0), float(self.tile_size)) for v in box)
                        if x1 < x2 and y1 < y2:
                            dets.append(Detection((x1, y1, x2, y2), min(max(score, 0.0), 1.0)))
                    out.append(dets)
        return out

    def presence_scores(self, X) -> np.ndarray:
        return np.array([presence_from_detections(d) for d in self.predict_detections(X)], dtype=float)

    def predict(self, X, threshold: float = 0.5) -> np.ndarray:
        return self.presence_scores(X) >= threshold
