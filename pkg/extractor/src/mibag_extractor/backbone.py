"""Patch-embedding backbone: WideResNet-50 tapped after its second
residual stage, 3x3 average pooling, unit-L2 patch normalization."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.models import wide_resnet50_2

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def build_trunk(pretrained: bool, weights_path: Path | None, seed: int) -> nn.Module:
    """The network up to the second residual stage (stride 8, 512 channels)."""
    if weights_path is not None:
        model = wide_resnet50_2(weights=None)
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    elif pretrained:
        from torchvision.models import Wide_ResNet50_2_Weights

        model = wide_resnet50_2(weights=Wide_ResNet50_2_Weights.IMAGENET1K_V1)
    else:
        # Deterministic random initialization: good enough for format/shape
        # tests and pipelines that only need a fixed feature map.
        torch.manual_seed(seed)
        model = wide_resnet50_2(weights=None)
    trunk = nn.Sequential(
        model.conv1, model.bn1, model.relu, model.maxpool, model.layer1, model.layer2
    )
    trunk.eval()
    return trunk


class PatchEmbedder:
    def __init__(self, trunk: nn.Module, device: str = "cpu"):
        self.device = torch.device(device)
        self.trunk = trunk.to(self.device)
        mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
        std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
        self._mean = mean.to(self.device)
        self._std = std.to(self.device)

    @torch.no_grad()
    def embed_batch(self, images: np.ndarray) -> np.ndarray:
        """(B, H, W, 3) uint8 -> (B, (H/8)*(W/8), 512) float32 unit rows."""
        x = torch.from_numpy(images).to(self.device).permute(0, 3, 1, 2).float() / 255.0
        x = (x - self._mean) / self._std
        fmap = self.trunk(x)  # (B, C, H/8, W/8)
        fmap = F.avg_pool2d(fmap, kernel_size=3, stride=1, padding=1)
        fmap = F.normalize(fmap, p=2, dim=1, eps=1e-12)
        b, c, h, w = fmap.shape
        patches = fmap.permute(0, 2, 3, 1).reshape(b, h * w, c)
        return patches.cpu().numpy().astype(np.float32)
