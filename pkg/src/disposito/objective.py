"""Loss terms and the total objective.

The adversarial terms use the vanilla log form, written with softplus so the
log-sigmoids stay finite, and the generator side is non-saturating. All
weighted sums use the configured multipliers; the KL terms enter with unit
weight.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import LossWeights
from .critics import CriticOutput
from .errors import NonFinite, ShapeMismatch


@dataclass
class LossReport:
    """Per-term scalars for one step. Generator-side gan/aux values are the
    non-saturating versions; the d_* fields are the discriminator split."""

    gan_img: float = 0.0
    gan_obj: float = 0.0
    aux: float = 0.0
    rec: float = 0.0
    perc: float = 0.0
    featmatch: float = 0.0
    kl_pose: float = 0.0
    kl_app: float = 0.0
    bbox: float = 0.0
    total: float = 0.0
    d_gan_img: float = 0.0
    d_gan_obj: float = 0.0
    d_aux: float = 0.0
    d_total: float = 0.0
    step: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def gan_terms(real: CriticOutput, fake: CriticOutput) -> tuple[torch.Tensor, torch.Tensor]:
    """Vanilla GAN losses averaged over scales and spatial logits.

    d = -E[log D(real)] - E[log(1 - D(fake))]; g = -E[log D(fake)].
    """
    if len(real.logits) != len(fake.logits):
        raise ShapeMismatch("real/fake critic outputs have different scale counts")
    d_loss = real.logits[0].new_zeros(())
    g_loss = real.logits[0].new_zeros(())
    for r, f in zip(real.logits, fake.logits):
        d_loss = d_loss + F.softplus(-r).mean() + F.softplus(f).mean()
        g_loss = g_loss + F.softplus(-f).mean()
    n = len(real.logits)
    return d_loss / n, g_loss / n


def generator_gan_term(fake: CriticOutput) -> torch.Tensor:
    """Non-saturating generator loss, averaged over scales and logits."""
    g_loss = fake.logits[0].new_zeros(())
    for f in fake.logits:
        g_loss = g_loss + F.softplus(-f).mean()
    return g_loss / len(fake.logits)


def reconstruction_loss(target: torch.Tensor, generated: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over every pixel and channel."""
    if target.shape != generated.shape:
        raise ShapeMismatch(f"{tuple(target.shape)} vs {tuple(generated.shape)}")
    return (target - generated).abs().mean()


def bbox_loss(
    pred: torch.Tensor, gt: torch.Tensor, masked: torch.Tensor, lambda_b: float
) -> torch.Tensor:
    """Weighted mean L1 over the coordinates of masked-box nodes; exactly
    zero when nothing is masked."""
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"{tuple(pred.shape)} vs {tuple(gt.shape)}")
    if not bool(masked.any()):
        return pred.new_zeros(())
    err = (pred[masked] - gt[masked]).abs().mean()
    return lambda_b * err


def feature_matching_loss(
    real: CriticOutput, fake: CriticOutput
) -> torch.Tensor:
    """Mean L1 over matched critic features, averaged over every
    (scale, layer) pair so the value is invariant to layer count."""
    terms = []
    for r_feats, f_feats in zip(real.features, fake.features):
        if len(r_feats) != len(f_feats):
            raise ShapeMismatch("feature lists have different lengths")
        for r, f in zip(r_feats, f_feats):
            if r.shape != f.shape:
                raise ShapeMismatch(f"{tuple(r.shape)} vs {tuple(f.shape)}")
            terms.append((r.detach() - f).abs().mean())
    return torch.stack(terms).mean()


def perceptual_loss(
    real_feats: list[torch.Tensor], fake_feats: list[torch.Tensor]
) -> torch.Tensor:
    """Mean L1 over frozen-extractor feature maps of target vs generated."""
    if len(real_feats) != len(fake_feats):
        raise ShapeMismatch("feature lists have different lengths")
    terms = []
    for r, f in zip(real_feats, fake_feats):
        if r.shape != f.shape:
            raise ShapeMismatch(f"{tuple(r.shape)} vs {tuple(f.shape)}")
        terms.append((r.detach() - f).abs().mean())
    return torch.stack(terms).mean()


def aux_classifier_loss(output: CriticOutput, class_ids: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of the object critic's class head against node classes,
    restricted to the crops the critic kept."""
    if output.aux_logits is None:
        raise ShapeMismatch("critic output carries no class logits")
    targets = class_ids
    if output.kept is not None:
        idx = torch.tensor(output.kept, dtype=torch.long, device=class_ids.device)
        targets = class_ids.index_select(0, idx)
    return F.cross_entropy(output.aux_logits, targets)


@dataclass
class LossParts:
    """Tensor-valued inputs to the total objective (generator side plus the
    discriminator split)."""

    g_gan_img: torch.Tensor
    g_gan_obj: torch.Tensor
    g_aux: torch.Tensor
    rec: torch.Tensor
    perc: torch.Tensor
    featmatch: torch.Tensor
    kl_pose: torch.Tensor
    kl_app: torch.Tensor
    bbox: torch.Tensor  # already carries its multiplier
    d_gan_img: torch.Tensor
    d_gan_obj: torch.Tensor
    d_aux: torch.Tensor


def total_loss(
    parts: LossParts, w: LossWeights, step: int = 0, kl_scale: float = 1.0
) -> tuple[torch.Tensor, torch.Tensor, LossReport]:
    """Weighted totals for both sides plus the logged report.

    generator = lambda_g*gan_img + lambda_o*gan_obj + lambda_a*aux + rec
              + lambda_p*perc + lambda_f*featmatch + kl_pose + kl_app + bbox
    discriminator = d_gan_img + d_gan_obj + aux-on-real
    """
    g_total = (
        w.lambda_g * parts.g_gan_img
        + w.lambda_o * parts.g_gan_obj
        + w.lambda_a * parts.g_aux
        + parts.rec
        + w.lambda_p * parts.perc
        + w.lambda_f * parts.featmatch
        + kl_scale * (parts.kl_pose + parts.kl_app)
        + parts.bbox
    )
    d_total = parts.d_gan_img + parts.d_gan_obj + parts.d_aux
    # kl fields hold the scaled contribution so `total` always equals the
    # unit-weight recomputation from the report
    report = LossReport(
        gan_img=float(parts.g_gan_img),
        gan_obj=float(parts.g_gan_obj),
        aux=float(parts.g_aux),
        rec=float(parts.rec),
        perc=float(parts.perc),
        featmatch=float(parts.featmatch),
        kl_pose=float(kl_scale * parts.kl_pose),
        kl_app=float(kl_scale * parts.kl_app),
        bbox=float(parts.bbox),
        total=float(g_total),
        d_gan_img=float(parts.d_gan_img),
        d_gan_obj=float(parts.d_gan_obj),
        d_aux=float(parts.d_aux),
        d_total=float(d_total),
        step=step,
    )
    for name, value in report.to_dict().items():
        if name != "step" and not _finite(value):
            raise NonFinite(f"loss term {name!r} is {value} at step {step}")
    return g_total, d_total, report


def _finite(value: float) -> bool:
    return value == value and abs(value) != float("inf")
