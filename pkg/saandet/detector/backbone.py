from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from structlog.stdlib import get_logger
from torch import nn
from torchvision.models import ResNet50_Weights, resnet50
from torchvision.ops import FrozenBatchNorm2d

from saandet.exceptions import ShapeError
from saandet.models.config import DetectorConfig

logger = get_logger(__name__)

NORM_GROUPS = 8


@dataclass(frozen=True)
class BackboneFeatures:
    features: torch.Tensor  # (N, C, h, w)
    stride: int
    image_size: tuple[int, int]  # (H, W) of the input


class TinyBackbone(nn.Module):
    """Stride-2 conv blocks, one per entry of ``channels``

    Every block halves the spatial size rounding up, so the output is ``ceil(H / stride)`` by ``ceil(W / stride)``.
    Group normalization and He initialization keep activations at unit scale when training from scratch with one
    image per step.
    """

    def __init__(self, channels: Sequence[int] = (32, 64, 128), in_channels: int = 3):
        super().__init__()
        blocks = []
        prev = in_channels
        for out in channels:
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(prev, out, kernel_size=3, stride=2, padding=1),
                    nn.GroupNorm(math.gcd(out, NORM_GROUPS), out),
                    nn.ReLU(inplace=True),
                    nn.Conv2d(out, out, kernel_size=3, stride=1, padding=1),
                    nn.GroupNorm(math.gcd(out, NORM_GROUPS), out),
                    nn.ReLU(inplace=True),
                )
            )
            prev = out
        self.blocks = nn.Sequential(*blocks)
        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                nn.init.kaiming_normal_(module.weight, mode="fan_out", nonlinearity="relu")
                nn.init.zeros_(module.bias)
        self.out_channels = prev
        self.stride = 2 ** len(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x)


class ResNetBackbone(nn.Module):
    """ResNet-50 trunk up to ``layer3`` (stride 16, 1024 channels) with frozen batch statistics"""

    def __init__(self, pretrained: bool = True):
        super().__init__()
        weights = ResNet50_Weights.IMAGENET1K_V1 if pretrained else None
        trunk = resnet50(weights=weights, norm_layer=FrozenBatchNorm2d)
        self.body = nn.Sequential(
            trunk.conv1, trunk.bn1, trunk.relu, trunk.maxpool, trunk.layer1, trunk.layer2, trunk.layer3
        )
        # the stem stays at its ImageNet values
        for module in (trunk.conv1, trunk.layer1):
            for p in module.parameters():
                p.requires_grad_(False)
        self.out_channels = 1024
        self.stride = 16

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


def build_backbone(config: DetectorConfig) -> TinyBackbone | ResNetBackbone:
    if config.size == "full":
        logger.info("building resnet50 backbone", pretrained=config.pretrained)
        return ResNetBackbone(pretrained=config.pretrained)
    backbone = TinyBackbone(config.channels)
    if backbone.stride != config.stride:
        raise ShapeError(f"{len(config.channels)} tiny blocks give stride {backbone.stride}, not {config.stride}")
    return backbone


def backbone_forward(backbone: TinyBackbone | ResNetBackbone, image: torch.Tensor) -> BackboneFeatures:
    """Run ``backbone`` on a normalized ``C x H x W`` image or ``N x C x H x W`` batch"""
    batch = image.unsqueeze(0) if image.dim() == 3 else image
    if batch.dim() != 4:
        raise ShapeError(f"expected an image tensor, got shape {tuple(image.shape)}")
    height, width = int(batch.shape[-2]), int(batch.shape[-1])
    if height < backbone.stride or width < backbone.stride:
        raise ShapeError(f"image {width}x{height} is smaller than the backbone stride {backbone.stride}")
    features = backbone(batch)
    expected = (math.ceil(height / backbone.stride), math.ceil(width / backbone.stride))
    if tuple(features.shape[-2:]) != expected:
        raise ShapeError(f"backbone produced {tuple(features.shape[-2:])}, expected {expected}")
    return BackboneFeatures(features=features, stride=backbone.stride, image_size=(height, width))
