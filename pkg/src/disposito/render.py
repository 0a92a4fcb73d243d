"""From per-object appearance latents to an image.

Boxes and soft pseudo-masks are predicted from the appearance latents, the
latents are stamped into a spatial layout grid, per-object affine transforms
are applied to the pooled layout patches, and a stack of spatially-adaptive
normalization residual blocks decodes the layout into an RGB image in
[-1, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .config import RenderConfig
from .disentangle import TransformParams, _warp_chw, build_affine
from .errors import DimensionMismatch, SingularTransform
from .nnblocks import LEAKY_SLOPE

BBOX_EPS = 1e-3  # lower bound on predicted box width/height


@dataclass
class Layout:
    """Spatial feature grid [C, H, W] plus per-object cell windows."""

    grid: torch.Tensor
    windows: list[tuple[int, int, int, int]]  # (i0, i1, j0, j1) per object


def bbox_window(
    bbox: Sequence[float], height: int, width: int
) -> tuple[int, int, int, int]:
    """Integer cell window covered by a normalized bbox; at least one cell."""
    x0, y0, x1, y1 = (float(v) for v in bbox)
    i0 = min(max(math.floor(y0 * height), 0), height - 1)
    j0 = min(max(math.floor(x0 * width), 0), width - 1)
    i1 = max(min(math.ceil(y1 * height), height), i0 + 1)
    j1 = max(min(math.ceil(x1 * width), width), j0 + 1)
    return i0, i1, j0, j1


class BoxHead(nn.Module):
    """Predicts (cx, cy, w, h) through sigmoids and converts to an ordered,
    in-range (x0, y0, x1, y1). Used only where the input box is masked."""

    def __init__(self, in_dim: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.LeakyReLU(LEAKY_SLOPE), nn.Linear(hidden, 4)
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        raw = torch.sigmoid(self.net(z))
        cx, cy = raw[..., 0], raw[..., 1]
        w = BBOX_EPS + (1.0 - BBOX_EPS) * raw[..., 2]
        h = BBOX_EPS + (1.0 - BBOX_EPS) * raw[..., 3]
        x0 = torch.clamp(cx - w / 2, 0.0, 1.0)
        x1 = torch.clamp(cx + w / 2, 0.0, 1.0)
        y0 = torch.clamp(cy - h / 2, 0.0, 1.0)
        y1 = torch.clamp(cy + h / 2, 0.0, 1.0)
        return torch.stack([x0, y0, x1, y1], dim=-1)


class MaskHead(nn.Module):
    """Transposed-conv head from the appearance latent to an MxM soft mask."""

    def __init__(self, in_dim: int, mask_size: int = 16, width: int = 32):
        super().__init__()
        if mask_size % 4 != 0:
            raise DimensionMismatch("mask size must be a multiple of 4")
        self.mask_size = mask_size
        first = mask_size // 4
        self.net = nn.Sequential(
            nn.ConvTranspose2d(in_dim, width, kernel_size=first, stride=first),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.ConvTranspose2d(width, width // 2, kernel_size=4, stride=2, padding=1),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.ConvTranspose2d(width // 2, 1, kernel_size=4, stride=2, padding=1),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = z.unsqueeze(-1).unsqueeze(-1)
        return torch.sigmoid(self.net(x)).squeeze(1)


def compose_layout(
    latents: torch.Tensor,
    boxes: torch.Tensor,
    masks: torch.Tensor,
    background: torch.Tensor,
    size: tuple[int, int],
) -> Layout:
    """Stamp each object's latent into its box, weighted by its resized soft
    mask; overlaps resolve later-object-wins; uncovered cells keep the
    learned background vector."""
    h, w = size
    grid = background.reshape(-1, 1, 1).expand(-1, h, w).clone()
    windows = []
    for idx in range(latents.shape[0]):
        i0, i1, j0, j1 = bbox_window(boxes[idx].tolist(), h, w)
        windows.append((i0, i1, j0, j1))
        m = masks[idx].unsqueeze(0).unsqueeze(0)
        m = F.interpolate(m, size=(i1 - i0, j1 - j0), mode="bilinear", align_corners=False)
        m = m[0, 0]
        patch = latents[idx].reshape(-1, 1, 1)
        grid[:, i0:i1, j0:j1] = m * patch + (1.0 - m) * grid[:, i0:i1, j0:j1]
    return Layout(grid=grid, windows=windows)


def pool_and_transform(
    layout: Layout, transforms: Optional[TransformParams]
) -> Layout:
    """Crop each object's layout patch, warp it under its affine, and paste it
    back at the same window; cells outside every window are untouched."""
    if transforms is None:
        return layout
    grid = layout.grid.clone()
    n = len(layout.windows)
    for idx in range(n):
        i0, i1, j0, j1 = layout.windows[idx]
        affine = build_affine(
            TransformParams(
                alpha=transforms.alpha[idx],
                m=transforms.m[idx],
                delta_a=transforms.delta_a[idx],
                delta_b=transforms.delta_b[idx],
                t_a=transforms.t_a[idx],
                t_b=transforms.t_b[idx],
            )
        )
        det = affine[0, 0] * affine[1, 1] - affine[0, 1] * affine[1, 0]
        if torch.abs(det) < 1e-8:
            raise SingularTransform(f"object {idx}: affine determinant {float(det):.3e}")
        patch = grid[:, i0:i1, j0:j1].unsqueeze(0)
        warped = _warp_chw(patch, affine)
        grid[:, i0:i1, j0:j1] = warped[0]
    return Layout(grid=grid, windows=list(layout.windows))


class SpadeNorm(nn.Module):
    # normalization whose scale/shift are spatial maps predicted from the
    # layout resized to the block's resolution
    def __init__(self, channels: int, cond_channels: int):
        super().__init__()
        self.bn = nn.BatchNorm2d(channels, affine=False)
        self.gamma = nn.Conv2d(cond_channels, channels, kernel_size=3, padding=1)
        self.beta = nn.Conv2d(cond_channels, channels, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if cond.shape[-2:] != x.shape[-2:]:
            cond = F.interpolate(cond, size=x.shape[-2:], mode="nearest")
        if self.training and x.shape[0] * x.shape[-1] * x.shape[-2] == 1:
            norm = F.batch_norm(
                x, self.bn.running_mean, self.bn.running_var, None, None,
                training=False, momentum=0.0, eps=self.bn.eps,
            )
        else:
            norm = self.bn(x)
        return norm * (1.0 + self.gamma(cond)) + self.beta(cond)


class SpadeResBlock(nn.Module):
    def __init__(self, fin: int, fout: int, cond_channels: int):
        super().__init__()
        fmid = min(fin, fout)
        self.norm0 = SpadeNorm(fin, cond_channels)
        self.conv0 = nn.Conv2d(fin, fmid, kernel_size=3, padding=1)
        self.norm1 = SpadeNorm(fmid, cond_channels)
        self.conv1 = nn.Conv2d(fmid, fout, kernel_size=3, padding=1)
        self.learned_shortcut = fin != fout
        if self.learned_shortcut:
            self.norm_s = SpadeNorm(fin, cond_channels)
            self.conv_s = nn.Conv2d(fin, fout, kernel_size=1, bias=False)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        shortcut = self.conv_s(self.norm_s(x, cond)) if self.learned_shortcut else x
        dx = self.conv0(F.leaky_relu(self.norm0(x, cond), LEAKY_SLOPE))
        dx = self.conv1(F.leaky_relu(self.norm1(dx, cond), LEAKY_SLOPE))
        return shortcut + dx


class AppearanceDecoder(nn.Module):
    """Stack of SPADE residual blocks with x2 upsampling in between, widths
    halving down to the base width, then a 3x3 conv, leaky rectifier, and a
    1x1 conv to RGB with tanh output."""

    def __init__(self, cond_channels: int, cfg: RenderConfig):
        super().__init__()
        self.cfg = cfg
        n_blocks = cfg.n_upsample + 1
        widths = [cfg.base_width * (2 ** (n_blocks - 1 - i)) for i in range(n_blocks)]
        blocks = []
        fin = cond_channels
        for fout in widths:
            blocks.append(SpadeResBlock(fin, fout, cond_channels))
            fin = fout
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Sequential(
            nn.Conv2d(widths[-1], widths[-1], kernel_size=3, padding=1),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(widths[-1], 3, kernel_size=1),
        )

    def forward(self, layout_grid: torch.Tensor) -> torch.Tensor:
        """layout_grid: [B, C, H_l, W_l] -> image [B, 3, H, W] in [-1, 1]."""
        if layout_grid.shape[-1] != self.cfg.layout_size:
            raise DimensionMismatch(
                f"layout size {layout_grid.shape[-1]} != configured {self.cfg.layout_size}"
            )
        x = layout_grid
        cond = layout_grid
        for i, block in enumerate(self.blocks):
            x = block(x, cond)
            if i < len(self.blocks) - 1:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
        return torch.tanh(self.head(x))


def decode_image(layout: Layout, decoder: AppearanceDecoder) -> torch.Tensor:
    """Single-layout convenience wrapper used by the op-level contract."""
    return decoder(layout.grid.unsqueeze(0))[0]
