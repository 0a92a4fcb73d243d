"""Adversarial critics: a three-scale whole-image critic and a shared
object-crop critic with an auxiliary classification head."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ImageTooSmall, NoObjects
from .nnblocks import LEAKY_SLOPE
from .visual import crop_and_resize

MIN_CROP_PX = 2  # boxes smaller than 2x2 pixels are skipped


@dataclass
class CriticOutput:
    logits: list[torch.Tensor]  # one spatial logit map (or vector) per scale
    features: list[list[torch.Tensor]]  # per scale, one entry per conv layer
    aux_logits: Optional[torch.Tensor] = None  # [N, C], object critic only
    kept: Optional[list[int]] = None  # object indices that were large enough
    skipped: list[int] = field(default_factory=list)


class _ScaleCritic(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(3, width, 4, stride=2, padding=1)
        self.conv2 = nn.Conv2d(width, width * 2, 4, stride=2, padding=1)
        self.conv3 = nn.Conv2d(width * 2, 1, 4, stride=1, padding=1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        f1 = F.leaky_relu(self.conv1(x), LEAKY_SLOPE)
        f2 = F.leaky_relu(self.conv2(f1), LEAKY_SLOPE)
        logits = self.conv3(f2)
        return logits, [f1, f2, logits]


class ImageCritic(nn.Module):
    """Runs three critics on the image at x1, x1/2 and x1/4 average-pooled
    scales; each is a stack of three convolutions."""

    def __init__(self, width: int = 32, min_image: int = 16):
        super().__init__()
        self.min_image = min_image
        self.scale0 = _ScaleCritic(width)
        self.scale1 = _ScaleCritic(width)
        self.scale2 = _ScaleCritic(width)

    def forward(self, images: torch.Tensor) -> CriticOutput:
        if images.shape[-1] < self.min_image or images.shape[-2] < self.min_image:
            raise ImageTooSmall(
                f"image {tuple(images.shape[-2:])} below the {self.min_image}px minimum"
            )
        half = F.avg_pool2d(images, 2)
        quarter = F.avg_pool2d(half, 2)
        logits, features = [], []
        for critic, x in ((self.scale0, images), (self.scale1, half), (self.scale2, quarter)):
            lg, fs = critic(x)
            logits.append(lg)
            features.append(fs)
        return CriticOutput(logits=logits, features=features)


class ObjectCritic(nn.Module):
    """Shared critic over fixed-size object crops: a realism logit and class
    logits per object."""

    def __init__(self, n_classes: int, width: int = 32, patch: int = 16):
        super().__init__()
        self.patch = patch
        self.conv1 = nn.Conv2d(3, width, 4, stride=2, padding=1)
        self.conv2 = nn.Conv2d(width, width * 2, 4, stride=2, padding=1)
        flat = width * 2 * (patch // 4) ** 2
        self.real_head = nn.Linear(flat, 1)
        self.class_head = nn.Linear(flat, n_classes)

    def forward(
        self,
        images: torch.Tensor,
        boxes: torch.Tensor,
        scene_index: torch.Tensor,
    ) -> CriticOutput:
        if boxes.shape[0] == 0:
            raise NoObjects("object critic needs at least one box")
        _, _, h, w = images.shape
        keep, skipped = [], []
        for i in range(boxes.shape[0]):
            bw = float(boxes[i, 2] - boxes[i, 0]) * w
            bh = float(boxes[i, 3] - boxes[i, 1]) * h
            if bw < MIN_CROP_PX or bh < MIN_CROP_PX:
                skipped.append(i)
            else:
                keep.append(i)
        if not keep:
            raise NoObjects("all object boxes were below the minimum crop size")
        idx = torch.tensor(keep, dtype=torch.long, device=images.device)
        crops = crop_and_resize(
            images, boxes.index_select(0, idx), scene_index.index_select(0, idx), self.patch
        )
        f1 = F.leaky_relu(self.conv1(crops), LEAKY_SLOPE)
        f2 = F.leaky_relu(self.conv2(f1), LEAKY_SLOPE)
        flat = f2.flatten(1)
        realism = self.real_head(flat).squeeze(-1)
        aux = self.class_head(flat)
        return CriticOutput(
            logits=[realism], features=[[f1, f2]], aux_logits=aux, kept=keep, skipped=skipped
        )
