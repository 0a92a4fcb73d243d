"""Run configuration: nested dataclasses mirroring the TOML run file."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .scenegraph import MaskRates, canonical_json

LN4 = 1.3862943611198906


@dataclass
class MaskConfig:
    region: float = 0.15
    feature: float = 0.3
    bbox: float = 0.3
    rel_change_target: str = "subject"  # whose box a relationship change masks

    def rates(self) -> MaskRates:
        return MaskRates(region=self.region, feature=self.feature, bbox=self.bbox)


@dataclass
class ModelConfig:
    disentangle_embeddings: bool = True
    disentangle_graph: bool = True
    kl_warmup: bool = False  # linear 0->1 over the first 10% of steps


@dataclass
class EmbedConfig:
    class_dim: int = 14
    pred_dim: int = 14


@dataclass
class VisualConfig:
    feature_dim: int = 32
    crop_size: int = 16


@dataclass
class DsgnConfig:
    k: int = 16
    nhidden: int = 14
    routing_iters: int = 12
    routing_layers_per_subnet: int = 10
    out_dim: int = 64
    msg_hidden: int = 128
    subnet_count: int = 2

    def __post_init__(self):
        if self.k < 1 or self.nhidden < 1 or self.routing_iters < 1:
            raise ValueError("dsgn config values must be >= 1")
        if self.subnet_count != 2:
            raise ValueError("subnet_count is fixed at 2")

    @property
    def proj_dim(self) -> int:
        return self.k * self.nhidden


@dataclass
class LatentConfig:
    dim: int = 64
    det_eval: bool = True


@dataclass
class PoseConfig:
    scale_clamp: float = LN4  # per-axis log-scale bound, so scale is in [1/4, 4]
    hidden: int = 64


@dataclass
class RenderConfig:
    image_size: int = 32
    layout_size: int = 8
    base_width: int = 16
    mask_size: int = 16
    profile: str = "toy"

    def __post_init__(self):
        if self.profile == "paper":
            self.image_size = 64
            self.layout_size = 4
            self.base_width = 64

    @property
    def n_upsample(self) -> int:
        ratio = self.image_size // self.layout_size
        if self.layout_size * (2 ** (ratio.bit_length() - 1)) != self.image_size:
            raise ValueError(
                f"image size {self.image_size} must be layout size {self.layout_size} times a power of 2"
            )
        return ratio.bit_length() - 1


@dataclass
class CriticConfig:
    base_width: int = 32
    object_patch: int = 16


@dataclass
class LossWeights:
    lambda_o: float = 0.1
    lambda_a: float = 0.1
    lambda_g: float = 1.0
    lambda_f: float = 10.0
    lambda_p: float = 10.0
    lambda_b: float = 50.0

    def __post_init__(self):
        for f_ in dataclasses.fields(self):
            if getattr(self, f_.name) < 0:
                raise ValueError(f"{f_.name} must be >= 0")


@dataclass
class RunConfig:
    seed: int = 0
    steps: int = 5000
    batch_size: int = 16
    learning_rate: float = 2e-4
    adam_betas: tuple[float, float] = (0.5, 0.999)
    grad_clip: float = 10.0
    ckpt_every: int = 1000
    eval_every: int = 500
    perc_snapshot_frac: float = 0.2
    untrained_warning_steps: int = 200
    mask: MaskConfig = field(default_factory=MaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    visual: VisualConfig = field(default_factory=VisualConfig)
    dsgn: DsgnConfig = field(default_factory=DsgnConfig)
    latent: LatentConfig = field(default_factory=LatentConfig)
    pose: PoseConfig = field(default_factory=PoseConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    loss: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        # the variational encoders map dsgn features back to the same width
        if self.latent.dim != self.dsgn.out_dim:
            raise ValueError(
                f"latent.dim ({self.latent.dim}) must equal dsgn.out_dim ({self.dsgn.out_dim})"
            )
        if self.render.profile == "paper":
            self.batch_size = 32
            self.grad_clip = 0.0

    def to_dict(self) -> dict:
        def convert(value):
            if dataclasses.is_dataclass(value):
                return {f_.name: convert(getattr(value, f_.name)) for f_ in dataclasses.fields(value)}
            if isinstance(value, tuple):
                return list(value)
            return value

        return convert(self)

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()[:16]


_SECTIONS = {
    "mask": MaskConfig,
    "model": ModelConfig,
    "embed": EmbedConfig,
    "visual": VisualConfig,
    "dsgn": DsgnConfig,
    "latent": LatentConfig,
    "pose": PoseConfig,
    "render": RenderConfig,
    "critic": CriticConfig,
    "loss": LossWeights,
}


def config_from_dict(data: dict) -> RunConfig:
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            known = {f_.name for f_ in dataclasses.fields(_SECTIONS[key])}
            bad = set(value) - known
            if bad:
                raise KeyError(f"unknown keys in [{key}]: {sorted(bad)}")
            kwargs[key] = _SECTIONS[key](**value)
        else:
            if key not in {f_.name for f_ in dataclasses.fields(RunConfig)}:
                raise KeyError(f"unknown run config key {key!r}")
            kwargs[key] = tuple(value) if key == "adam_betas" else value
    return RunConfig(**kwargs)


def load_config(path: str | Path) -> RunConfig:
    with open(path, "rb") as fh:
        return config_from_dict(tomli.load(fh))


def config_to_json(config: RunConfig) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=True)
