"""Small trainable convolutional encoder for per-object visual features.

Replaces a large pretrained backbone at toy scale: object crops are resized
to a fixed patch and encoded to a fixed-width vector. The same network, run
fully convolutionally on whole images, doubles as the perceptual-loss
feature extractor (a frozen snapshot of it, refreshed partway through
training).
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .nnblocks import LEAKY_SLOPE


class VisualEncoder(nn.Module):
    def __init__(self, feature_dim: int = 32, width: int = 16):
        super().__init__()
        self.feature_dim = feature_dim
        self.conv1 = nn.Conv2d(3, width, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(width, width * 2, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(width * 2, width * 4, 3, stride=2, padding=1)
        self.conv4 = nn.Conv2d(width * 4, feature_dim, 3, stride=1, padding=1)

    def features(self, images: torch.Tensor) -> list[torch.Tensor]:
        f1 = F.leaky_relu(self.conv1(images), LEAKY_SLOPE)
        f2 = F.leaky_relu(self.conv2(f1), LEAKY_SLOPE)
        f3 = F.leaky_relu(self.conv3(f2), LEAKY_SLOPE)
        f4 = F.leaky_relu(self.conv4(f3), LEAKY_SLOPE)
        return [f1, f2, f3, f4]

    def forward(self, crops: torch.Tensor) -> torch.Tensor:
        """crops: [N, 3, P, P] -> [N, feature_dim] via global average pooling."""
        return self.features(crops)[-1].mean(dim=(-1, -2))


def crop_and_resize(
    images: torch.Tensor, boxes: torch.Tensor, scene_index: torch.Tensor, size: int
) -> torch.Tensor:
    """Bilinearly sample each box from its scene image into a size x size
    patch. images: [S, 3, H, W]; boxes: [N, 4] normalized; scene_index: [N]."""
    n = boxes.shape[0]
    if n == 0:
        return images.new_zeros((0, 3, size, size))
    src = images.index_select(0, scene_index)
    x0, y0, x1, y1 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    # sample positions at patch-cell centers, mapped to [-1, 1] image coords
    steps = (torch.arange(size, dtype=boxes.dtype, device=boxes.device) + 0.5) / size
    gx = x0.unsqueeze(-1) + (x1 - x0).unsqueeze(-1) * steps  # [N, size]
    gy = y0.unsqueeze(-1) + (y1 - y0).unsqueeze(-1) * steps
    gx = gx * 2.0 - 1.0
    gy = gy * 2.0 - 1.0
    grid = torch.stack(
        [gx.unsqueeze(1).expand(n, size, size), gy.unsqueeze(2).expand(n, size, size)],
        dim=-1,
    )
    return F.grid_sample(src, grid, mode="bilinear", padding_mode="border", align_corners=False)


def erase_regions(
    images: torch.Tensor, boxes: list[tuple[int, tuple[float, float, float, float]]]
) -> torch.Tensor:
    """Zero out (scene_index, bbox) regions; returns a copy."""
    if not boxes:
        return images
    out = images.clone()
    _, _, h, w = images.shape
    for scene, bbox in boxes:
        from .render import bbox_window

        i0, i1, j0, j1 = bbox_window(bbox, h, w)
        out[scene, :, i0:i1, j0:j1] = 0.0
    return out
