"""Variational appearance/pose branches and the affine transform machinery.

Each branch encodes per-object features into a diagonal Gaussian and samples
with the reparameterization trick. The pose branch is decoded into six
transform parameters (rotation, shear, two scales, two translations) that
build a 2x3 affine applied to pooled layout patches. Appearance and pose stay
separated structurally: the image decoder only ever sees appearance-derived
layouts, and the affine only ever sees pose samples.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .config import PoseConfig
from .errors import DimensionMismatch, SingularTransform
from .nnblocks import LEAKY_SLOPE, BatchNorm2dSafe


@dataclass
class GaussianLatent:
    """Posterior (mu, sigma) with the sample z = mu + sigma * eps."""

    mu: torch.Tensor
    sigma: torch.Tensor
    z: torch.Tensor
    eps: Optional[torch.Tensor] = None


@dataclass(frozen=True)
class TransformParams:
    """Constrained per-object transform: rotation alpha (radians), shear m,
    positive scales (delta_a, delta_b), translations (t_a, t_b) in normalized
    grid units."""

    alpha: torch.Tensor
    m: torch.Tensor
    delta_a: torch.Tensor
    delta_b: torch.Tensor
    t_a: torch.Tensor
    t_b: torch.Tensor

    @staticmethod
    def identity(n: int = 1, dtype=torch.float32) -> "TransformParams":
        zero = torch.zeros(n, dtype=dtype)
        one = torch.ones(n, dtype=dtype)
        return TransformParams(zero, zero.clone(), one, one.clone(), zero.clone(), zero.clone())


class _EncoderBranch(nn.Module):
    # per-object features treated as a 1x1 spatial grid so the 2D conv/bn
    # stack applies unchanged
    def __init__(self, in_dim: int, hidden: int = 128):
        super().__init__()
        self.net = nn.Sequential(
            BatchNorm2dSafe(in_dim),
            nn.Conv2d(in_dim, hidden, kernel_size=1),
            nn.LeakyReLU(LEAKY_SLOPE),
            BatchNorm2dSafe(hidden),
            nn.Conv2d(hidden, in_dim, kernel_size=1),
            nn.LeakyReLU(LEAKY_SLOPE),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        grid = x.unsqueeze(-1).unsqueeze(-1)
        return self.net(grid).squeeze(-1).squeeze(-1)


class GaussianEncoder(nn.Module):
    """Two parallel subnets produce mu and pre-sigma; sigma = softplus(pre)."""

    def __init__(self, in_dim: int):
        super().__init__()
        self.in_dim = in_dim
        self.mu_net = _EncoderBranch(in_dim)
        self.sigma_net = _EncoderBranch(in_dim)

    def forward(
        self,
        x: torch.Tensor,
        sample: bool | torch.Tensor = True,
        rng: Optional[torch.Generator] = None,
    ) -> GaussianLatent:
        if x.shape[-1] != self.in_dim:
            raise DimensionMismatch(f"expected width {self.in_dim}, got {x.shape[-1]}")
        mu = self.mu_net(x)
        sigma = F.softplus(self.sigma_net(x))
        return reparameterize(mu, sigma, sample=sample, rng=rng)


def reparameterize(
    mu: torch.Tensor,
    sigma: torch.Tensor,
    sample: bool | torch.Tensor = True,
    rng: Optional[torch.Generator] = None,
) -> GaussianLatent:
    """z = mu + sigma * eps. `sample` may be a per-row bool mask; rows with
    sample=False are deterministic (z = mu, eps = 0)."""
    eps = torch.randn(mu.shape, generator=rng, dtype=mu.dtype, device=mu.device)
    if isinstance(sample, torch.Tensor):
        gate = sample.to(mu.dtype).view(-1, *([1] * (mu.dim() - 1)))
        eps = eps * gate
    elif not sample:
        eps = torch.zeros_like(eps)
    z = mu + sigma * eps
    return GaussianLatent(mu=mu, sigma=sigma, z=z, eps=eps)


class PoseDecoder(nn.Module):
    """Gaussian over the 6 raw transform parameters, then the raw->constrained
    map. The mean head's final layer starts at zero so every object begins at
    the identity transform; the sigma head starts near-deterministic."""

    def __init__(self, in_dim: int, cfg: PoseConfig):
        super().__init__()
        self.in_dim = in_dim
        self.scale_clamp = cfg.scale_clamp
        # final activation on the hidden path only; the raw outputs must be
        # free to go negative
        self.mu_net = nn.Sequential(
            nn.Linear(in_dim, cfg.hidden), nn.LeakyReLU(LEAKY_SLOPE), nn.Linear(cfg.hidden, 6)
        )
        self.sigma_net = nn.Sequential(
            nn.Linear(in_dim, cfg.hidden), nn.LeakyReLU(LEAKY_SLOPE), nn.Linear(cfg.hidden, 6)
        )
        nn.init.zeros_(self.mu_net[-1].weight)
        nn.init.zeros_(self.mu_net[-1].bias)
        nn.init.zeros_(self.sigma_net[-1].weight)
        nn.init.constant_(self.sigma_net[-1].bias, -3.0)

    def forward(
        self,
        z_pose: torch.Tensor,
        sample: bool | torch.Tensor = True,
        rng: Optional[torch.Generator] = None,
    ) -> tuple[TransformParams, GaussianLatent]:
        if z_pose.shape[-1] != self.in_dim:
            raise DimensionMismatch(f"expected width {self.in_dim}, got {z_pose.shape[-1]}")
        mu = self.mu_net(z_pose)
        sigma = F.softplus(self.sigma_net(z_pose))
        lat = reparameterize(mu, sigma, sample=sample, rng=rng)
        return constrain_params(lat.z, self.scale_clamp), lat


def constrain_params(raw: torch.Tensor, scale_clamp: float) -> TransformParams:
    """Map 6 unconstrained values to valid transform parameters; all-zero raw
    output gives the identity."""
    if raw.shape[-1] != 6:
        raise DimensionMismatch(f"expected 6 raw parameters, got {raw.shape[-1]}")
    log_scale = torch.clamp(raw[..., 2:4], -scale_clamp, scale_clamp)
    return TransformParams(
        alpha=raw[..., 0],
        m=raw[..., 1],
        delta_a=torch.exp(log_scale[..., 0]),
        delta_b=torch.exp(log_scale[..., 1]),
        t_a=torch.tanh(raw[..., 4]),
        t_b=torch.tanh(raw[..., 5]),
    )


def build_affine(g: TransformParams) -> torch.Tensor:
    """2x3 matrix: Rot(alpha) . Shear(m) . Scale(delta_a, delta_b) with the
    translation in the last column. Batched params give [N, 2, 3]."""
    alpha = torch.as_tensor(g.alpha)
    batched = alpha.dim() > 0
    alpha = alpha.reshape(-1)
    n = alpha.shape[0]
    m = torch.as_tensor(g.m).reshape(-1).to(alpha.dtype)
    da = torch.as_tensor(g.delta_a).reshape(-1).to(alpha.dtype)
    db = torch.as_tensor(g.delta_b).reshape(-1).to(alpha.dtype)
    ta = torch.as_tensor(g.t_a).reshape(-1).to(alpha.dtype)
    tb = torch.as_tensor(g.t_b).reshape(-1).to(alpha.dtype)
    cos, sin = torch.cos(alpha), torch.sin(alpha)
    zeros = torch.zeros_like(alpha)
    ones = torch.ones_like(alpha)
    rot = torch.stack([cos, -sin, sin, cos], dim=-1).reshape(n, 2, 2)
    shear = torch.stack([ones, m, zeros, ones], dim=-1).reshape(n, 2, 2)
    scale = torch.stack([da, zeros, zeros, db], dim=-1).reshape(n, 2, 2)
    mat = rot @ shear @ scale
    out = torch.cat([mat, torch.stack([ta, tb], dim=-1).unsqueeze(-1)], dim=-1)
    return out if batched else out[0]


def warp_features(patch: torch.Tensor, affine: torch.Tensor) -> torch.Tensor:
    """Bilinearly resample (H, W, C) features under the inverse of the 2x3
    affine on the [-1, 1] normalized grid; out-of-range samples replicate the
    border. Output shape matches the input."""
    if patch.dim() != 3:
        raise DimensionMismatch(f"expected (H, W, C) patch, got shape {tuple(patch.shape)}")
    mat = affine[:, :2]
    det = mat[0, 0] * mat[1, 1] - mat[0, 1] * mat[1, 0]
    if torch.abs(det) < 1e-8:
        raise SingularTransform(f"affine block determinant {float(det):.3e} below 1e-8")
    chw = patch.permute(2, 0, 1).unsqueeze(0)
    out = _warp_chw(chw, affine)
    return out[0].permute(1, 2, 0)


def _warp_chw(x: torch.Tensor, affine: torch.Tensor) -> torch.Tensor:
    """Core warp on a [1, C, H, W] tensor (shared with the layout pooling)."""
    _, _, h, w = x.shape
    mat = affine[:, :2]
    trans = affine[:, 2]
    inv = torch.inverse(mat)
    if h > 1:
        ys = torch.linspace(-1.0, 1.0, h, dtype=x.dtype, device=x.device)
    else:
        ys = torch.zeros(1, dtype=x.dtype, device=x.device)
    if w > 1:
        xs = torch.linspace(-1.0, 1.0, w, dtype=x.dtype, device=x.device)
    else:
        xs = torch.zeros(1, dtype=x.dtype, device=x.device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    pts = torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=0)
    src = inv @ (pts - trans.unsqueeze(-1))
    grid = src.T.reshape(1, h, w, 2)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=True)


def kl_divergence(mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)), closed form, summed over feature
    dimensions and averaged over leading (object) dimensions."""
    if (sigma <= 0).any():
        raise ValueError("sigma must be positive")
    per_dim = 0.5 * (mu * mu + sigma * sigma - 1.0 - 2.0 * torch.log(sigma))
    if per_dim.dim() == 1:
        return per_dim.sum()
    return per_dim.sum(dim=-1).mean()
