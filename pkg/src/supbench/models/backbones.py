"""Convolutional backbones shared by the detector, classifier and VAE.

``resnet50`` is the fidelity mode. ``reduced`` keeps the same
stem -> residual stages -> feature map topology at a fraction of the cost so
the whole benchmark runs on a CPU.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torchvision

ARCHITECTURES = ("resnet50", "reduced")


@dataclass(frozen=True)
class BackboneConfig:
    architecture: str = "reduced"
    pretrained: bool = False
    final_feature_layer: str | None = None

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown backbone {self.architecture!r}; choose from {ARCHITECTURES}")
        if self.pretrained:
            raise ValueError("pretrained backbones are not supported; all models train from scratch")

    @property
    def feature_layer(self) -> str:
        if self.final_feature_layer:
            return self.final_feature_layer
        return "layer4" if self.architecture == "resnet50" else "layer3"


class BasicBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.relu = nn.ReLU()
        self.shortcut = nn.Identity()
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), nn.BatchNorm2d(c_out))

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class ReducedBackbone(nn.Module):
    """Stride-8 residual feature extractor: 200x200 input -> C x 25 x 25."""

    def __init__(self, widths: tuple[int, int, int] = (16, 32, 48)):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(3, widths[0], 3, 2, 1, bias=False), nn.BatchNorm2d(widths[0]), nn.ReLU())
        self.layer1 = BasicBlock(widths[0], widths[0])
        self.layer2 = BasicBlock(widths[0], widths[1], stride=2)
        self.layer3 = BasicBlock(widths[1], widths[2], stride=2)
        self.out_channels = widths[2]
        self.stride = 8

    def forward(self, x):
        return self.layer3(self.layer2(self.layer1(self.stem(x))))


class ResNet50Backbone(nn.Module):
    """torchvision ResNet-50 body (randomly initialized), stride 32."""

    def __init__(self):
        super().__init__()
        net = torchvision.models.resnet50(weights=None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2, self.layer3, self.layer4 = net.layer1, net.layer2, net.layer3, net.layer4
        self.out_channels = 2048
        self.stride = 32

    def forward(self, x):
        return self.layer4(self.layer3(self.layer2(self.layer1(self.stem(x)))))


def build_backbone(config: BackboneConfig) -> nn.Module:
    return ResNet50Backbone() if config.architecture == "resnet50" else ReducedBackbone()


def find_layer(model: nn.Module, name: str) -> nn.Module:
    modules = dict(model.named_modules())
    if name not in modules:
        raise LookupError(f"layer {name!r} not found in {type(model).__name__}")
    return modules[name]


def feature_shape(backbone: nn.Module, input_size: int) -> tuple[int, int, int]:
    was_training = backbone.training
    backbone.eval()
    with torch.no_grad():
        out = backbone(torch.zeros(1, 3, input_size, input_size))
    backbone.train(was_training)
    return tuple(out.shape[1:])
