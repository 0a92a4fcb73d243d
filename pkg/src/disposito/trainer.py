"""Training loop, checkpoint state, and the manipulation entry point."""

from __future__ import annotations

import copy
import json
import subprocess
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import seeding
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_from_dict
from .critics import ImageCritic, ObjectCritic
from .disentangle import kl_divergence
from .errors import NonFinite
from .objective import (
    LossParts,
    LossReport,
    aux_classifier_loss,
    bbox_loss,
    feature_matching_loss,
    gan_terms,
    generator_gan_term,
    perceptual_loss,
    reconstruction_loss,
    total_loss,
)
from .pipeline import Generator, GraphBatch
from .scenegraph import GraphEdit, SceneGraph, edit_and_mask, training_mask, validate_graph
from .toyworld import ToyDataset
from .visual import VisualEncoder


class UntrainedModelWarning(UserWarning):
    pass


@dataclass
class TrainState:
    config: RunConfig
    classes: list[str]
    predicates: list[str]
    generator: Generator
    d_img: ImageCritic
    d_obj: ObjectCritic
    perc: VisualEncoder  # frozen perceptual extractor
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    step: int = 0
    history: list[dict] = field(default_factory=list)


def build_state(config: RunConfig, classes: Sequence[str], predicates: Sequence[str]) -> TrainState:
    torch.manual_seed(config.seed)
    generator = Generator(config, len(classes), len(predicates))
    d_img = ImageCritic(config.critic.base_width)
    d_obj = ObjectCritic(len(classes), config.critic.base_width, config.critic.object_patch)
    perc = copy.deepcopy(generator.visual)
    perc.requires_grad_(False)
    opt_g = torch.optim.Adam(
        generator.parameters(), lr=config.learning_rate, betas=config.adam_betas
    )
    opt_d = torch.optim.Adam(
        list(d_img.parameters()) + list(d_obj.parameters()),
        lr=config.learning_rate,
        betas=config.adam_betas,
    )
    return TrainState(
        config=config,
        classes=list(classes),
        predicates=list(predicates),
        generator=generator,
        d_img=d_img,
        d_obj=d_obj,
        perc=perc,
        opt_g=opt_g,
        opt_d=opt_d,
    )


def _kl_scale(config: RunConfig, step: int) -> float:
    if not config.model.kl_warmup:
        return 1.0
    ramp = max(1, int(0.1 * config.steps))
    return min(1.0, step / ramp)


def train_step(
    state: TrainState,
    graphs: Sequence[SceneGraph],
    images: torch.Tensor,
) -> LossReport:
    """One alternating update: discriminators on (real, detached fake), then
    the generator on the full objective. images are [S, 3, H, W] in [-1, 1]."""
    cfg = state.config
    step = state.step
    state.generator.train()
    state.d_img.train()
    state.d_obj.train()

    masked = [
        training_mask(
            g,
            cfg.mask.rates(),
            seeding.rng_for(cfg.seed, seeding.MASK, step, i),
            feature_dim=cfg.visual.feature_dim,
        )
        for i, g in enumerate(graphs)
    ]
    batch = GraphBatch.from_graphs(masked, cfg.visual.feature_dim, dtype=images.dtype)
    rng = seeding.torch_gen_for(cfg.seed, seeding.NOISE, step)
    out = state.generator(batch, images, sample=True, rng=rng)
    fake = out.images

    # --- discriminator update (real branch detached from the generator) ---
    real_img = state.d_img(images)
    fake_img = state.d_img(fake.detach())
    d_img_loss, _ = gan_terms(real_img, fake_img)
    real_obj = state.d_obj(images, batch.bboxes, batch.scene_index)
    fake_obj = state.d_obj(fake.detach(), out.render_boxes.detach(), batch.scene_index)
    d_obj_loss, _ = gan_terms(real_obj, fake_obj)
    d_aux = aux_classifier_loss(real_obj, batch.class_ids)
    d_total = d_img_loss + d_obj_loss + d_aux
    state.opt_d.zero_grad(set_to_none=True)
    d_total.backward()
    state.opt_d.step()

    # --- generator update on the full objective ---
    fake_img_g = state.d_img(fake)
    with torch.no_grad():
        real_img_g = state.d_img(images)
    g_gan_img = generator_gan_term(fake_img_g)
    fake_obj_g = state.d_obj(fake, out.render_boxes.detach(), batch.scene_index)
    g_gan_obj = generator_gan_term(fake_obj_g)
    g_aux = aux_classifier_loss(fake_obj_g, batch.class_ids)
    rec = reconstruction_loss(images, fake)
    featmatch = feature_matching_loss(real_img_g, fake_img_g)
    with torch.no_grad():
        perc_real = state.perc.features(images)
    perc_fake = state.perc.features(fake)
    perc_term = perceptual_loss(perc_real, perc_fake)
    if out.lat_app is not None:
        kl_app = kl_divergence(out.lat_app.mu, out.lat_app.sigma)
        kl_pose = kl_divergence(out.lat_pose.mu, out.lat_pose.sigma)
    else:
        kl_app = fake.new_zeros(())
        kl_pose = fake.new_zeros(())
    bbox = bbox_loss(out.pred_boxes, batch.bboxes, batch.bbox_masked, cfg.loss.lambda_b)

    parts = LossParts(
        g_gan_img=g_gan_img,
        g_gan_obj=g_gan_obj,
        g_aux=g_aux,
        rec=rec,
        perc=perc_term,
        featmatch=featmatch,
        kl_pose=kl_pose,
        kl_app=kl_app,
        bbox=bbox,
        d_gan_img=d_img_loss.detach(),
        d_gan_obj=d_obj_loss.detach(),
        d_aux=d_aux.detach(),
    )
    g_total, _, report = total_loss(parts, cfg.loss, step=step, kl_scale=_kl_scale(cfg, step))
    state.opt_g.zero_grad(set_to_none=True)
    g_total.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(state.generator.parameters(), cfg.grad_clip)
    state.opt_g.step()
    state.step = step + 1
    return report


def _git_hash() -> Optional[str]:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5
        )
        return out.stdout.strip() or None
    except OSError:
        return None


def images_to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    """Stack [H, W, 3] arrays in [0, 1] into a [S, 3, H, W] tensor in [-1, 1]."""
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2) * 2.0 - 1.0


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    """[3, H, W] in [-1, 1] -> [H, W, 3] in [0, 1]."""
    return ((t.detach().cpu().permute(1, 2, 0).numpy() + 1.0) / 2.0).clip(0.0, 1.0)


def fit(
    config: RunConfig,
    dataset: ToyDataset,
    run_dir: str | Path,
    holdout: int = 50,
    resume: Optional[str | Path] = None,
    log_fn=None,
) -> Path:
    """Train for config.steps on all but the last `holdout` scenes; returns
    the final checkpoint path. Deterministic for a fixed config and dataset;
    resuming from a checkpoint replays the uninterrupted run."""
    run_path = Path(run_dir)
    run_path.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        state = load_state(resume)
        if state.config.config_hash() != config.config_hash():
            raise ValueError("resume checkpoint was produced by a different config")
    else:
        state = build_state(config, dataset.manifest.classes, dataset.manifest.predicates)

    n_train = len(dataset) - holdout
    if n_train < config.batch_size:
        raise ValueError(f"dataset too small: {n_train} train scenes")
    graphs = [dataset.graph(i) for i in range(len(dataset))]
    images = images_to_tensor([dataset.image(i) for i in range(len(dataset))])

    manifest = {
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "git_hash": _git_hash(),
        "dataset": str(dataset.root),
        "train_scenes": n_train,
        "holdout_scenes": holdout,
    }
    (run_path / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    log_path = run_path / "log.jsonl"
    mode = "a" if resume is not None else "w"
    snapshot_step = int(config.perc_snapshot_frac * config.steps)
    with open(log_path, mode) as log:
        for step in range(state.step, config.steps):
            if step == snapshot_step:
                state.perc = copy.deepcopy(state.generator.visual)
                state.perc.requires_grad_(False)
            idx = seeding.rng_for(config.seed, seeding.DATA, step).choice(
                n_train, size=config.batch_size, replace=n_train < config.batch_size
            )
            batch_graphs = [graphs[i] for i in idx]
            batch_images = images[torch.from_numpy(idx.astype(np.int64))]
            try:
                report = train_step(state, batch_graphs, batch_images)
            except NonFinite:
                save_state(state, run_path / "crash.ckpt")
                raise
            line = report.to_dict()
            state.history.append(line)
            log.write(json.dumps(line, sort_keys=True) + "\n")
            if log_fn is not None:
                log_fn(line)
            if config.ckpt_every > 0 and state.step % config.ckpt_every == 0:
                save_state(state, run_path / f"step{state.step:06d}.ckpt")
    final = run_path / "final.ckpt"
    save_state(state, final)
    return final


def reconstruct(state: TrainState, graphs: Sequence[SceneGraph], images: torch.Tensor) -> torch.Tensor:
    """Deterministic reconstruction (no masking, z = mu) of whole scenes."""
    state.generator.eval()
    with torch.no_grad():
        batch = GraphBatch.from_graphs(graphs, state.config.visual.feature_dim, dtype=images.dtype)
        rng = seeding.torch_gen_for(state.config.seed, seeding.NOISE, 0)
        out = state.generator(batch, images, sample=False, rng=rng)
    return out.images


def manipulate(
    state: TrainState,
    image: torch.Tensor,
    graph: SceneGraph,
    edit: GraphEdit,
    sample_count: int = 1,
    sample: bool = True,
    seed: int = 0,
) -> tuple[list[torch.Tensor], SceneGraph]:
    """Apply an edit with its masking rule and decode sample_count images.

    Masked branches draw fresh latent noise per sample; unmasked branches are
    deterministic (z = mu). With sample=False everything is deterministic and
    all outputs are identical.
    """
    report = validate_graph(graph, n_classes=len(state.classes), n_predicates=len(state.predicates))
    if not report.ok:
        raise ValueError(f"graph invalid: {report.to_dict()['violations']}")
    if state.step < state.config.untrained_warning_steps:
        warnings.warn(
            f"checkpoint at step {state.step} is below the training threshold",
            UntrainedModelWarning,
            stacklevel=2,
        )
    cfg = state.config
    edited, region_boxes = edit_and_mask(graph, edit, cfg.mask.rel_change_target)
    extra = [(0, bbox) for bbox in region_boxes]
    state.generator.eval()
    batch = GraphBatch.from_graphs([edited], cfg.visual.feature_dim, dtype=image.dtype)
    sample_mask = batch.feature_masked | batch.bbox_masked
    images = image.unsqueeze(0)
    outputs = []
    with torch.no_grad():
        for i in range(sample_count):
            rng = seeding.torch_gen_for(seed, seeding.NOISE, i if sample else 0)
            out = state.generator(
                batch,
                images,
                sample=sample_mask if sample else False,
                rng=rng,
                extra_regions=extra,
            )
            outputs.append(out.images[0])
    return outputs, edited


# --- checkpoint wiring ------------------------------------------------------


def save_state(state: TrainState, path: str | Path) -> None:
    payload = {
        "step": state.step,
        "config": state.config.to_dict(),
        "config_hash": state.config.config_hash(),
        "classes": list(state.classes),
        "predicates": list(state.predicates),
        "params": {
            "gen": state.generator.state_dict(),
            "d_img": state.d_img.state_dict(),
            "d_obj": state.d_obj.state_dict(),
            "perc": state.perc.state_dict(),
        },
        "opt": {"g": state.opt_g.state_dict(), "d": state.opt_d.state_dict()},
        "rng": {"torch": torch.get_rng_state()},
    }
    save_checkpoint(payload, path)


def load_state(path: str | Path) -> TrainState:
    data = load_checkpoint(path)
    config = config_from_dict(data["config"])
    if config.config_hash() != data["config_hash"]:
        raise ValueError("checkpoint config hash mismatch")
    state = build_state(config, data["classes"], data["predicates"])
    state.generator.load_state_dict(data["params"]["gen"])
    state.d_img.load_state_dict(data["params"]["d_img"])
    state.d_obj.load_state_dict(data["params"]["d_obj"])
    state.perc.load_state_dict(data["params"]["perc"])
    state.opt_g.load_state_dict(_optim_state(data["opt"]["g"]))
    state.opt_d.load_state_dict(_optim_state(data["opt"]["d"]))
    state.step = int(data["step"])
    torch.set_rng_state(data["rng"]["torch"].to(torch.uint8))
    return state


def _optim_state(tree: dict) -> dict:
    # pickled dict keys arrive as-is; Adam expects int keys in `state`
    tree = dict(tree)
    tree["state"] = {int(k): v for k, v in tree["state"].items()}
    return tree
