"""Full generator: graph batch assembly and the forward pass from scene
graphs + source images to generated images."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn

from .config import RunConfig
from .disentangle import GaussianEncoder, GaussianLatent, PoseDecoder, TransformParams
from .dsgn import BBOX_SENTINEL, Dsgn
from .render import AppearanceDecoder, BoxHead, Layout, MaskHead, compose_layout, pool_and_transform
from .scenegraph import SceneGraph
from .visual import VisualEncoder, crop_and_resize, erase_regions


@dataclass
class GraphBatch:
    """Nodes of several scenes flattened into one disconnected graph."""

    class_ids: torch.Tensor  # [N]
    bboxes: torch.Tensor  # [N, 4] ground-truth boxes (crop + render fallback)
    bbox_masked: torch.Tensor  # [N] bool
    feature_masked: torch.Tensor  # [N] bool
    region_masked: torch.Tensor  # [N] bool
    stored_features: Optional[torch.Tensor]  # [N, F] rows valid where flagged
    has_stored: torch.Tensor  # [N] bool
    edges: torch.Tensor  # [E, 3] (subject, predicate, object), global indices
    scene_index: torch.Tensor  # [N]
    n_scenes: int

    @staticmethod
    def from_graphs(
        graphs: Sequence[SceneGraph],
        feature_dim: int,
        dtype: torch.dtype = torch.float32,
        device: str | torch.device = "cpu",
    ) -> "GraphBatch":
        class_ids, boxes, bm, fm, rm, scene = [], [], [], [], [], []
        stored = []
        has_stored = []
        edges = []
        offset = 0
        for s, g in enumerate(graphs):
            index = {n.id: offset + i for i, n in enumerate(g.nodes)}
            for n in g.nodes:
                class_ids.append(n.class_id)
                boxes.append(n.bbox)
                bm.append(n.bbox_masked)
                fm.append(n.feature_masked)
                rm.append(n.region_masked)
                if n.visual_feature is not None:
                    stored.append(list(n.visual_feature))
                    has_stored.append(True)
                else:
                    stored.append([0.0] * feature_dim)
                    has_stored.append(False)
                scene.append(s)
            for e in g.edges:
                edges.append((index[e.subject_id], e.predicate_id, index[e.object_id]))
            offset += len(g.nodes)
        return GraphBatch(
            class_ids=torch.tensor(class_ids, dtype=torch.long, device=device),
            bboxes=torch.tensor(boxes, dtype=dtype, device=device),
            bbox_masked=torch.tensor(bm, dtype=torch.bool, device=device),
            feature_masked=torch.tensor(fm, dtype=torch.bool, device=device),
            region_masked=torch.tensor(rm, dtype=torch.bool, device=device),
            stored_features=torch.tensor(stored, dtype=dtype, device=device),
            has_stored=torch.tensor(has_stored, dtype=torch.bool, device=device),
            edges=torch.tensor(edges, dtype=torch.long, device=device).reshape(-1, 3),
            scene_index=torch.tensor(scene, dtype=torch.long, device=device),
            n_scenes=len(graphs),
        )


@dataclass
class GeneratorOutput:
    images: torch.Tensor  # [S, 3, H, W] in [-1, 1]
    z_graph: torch.Tensor  # [N, D]
    lat_app: Optional[GaussianLatent]
    lat_pose: Optional[GaussianLatent]
    lat_pose_raw: Optional[GaussianLatent]  # pose-decoder 6-param posterior
    pred_boxes: torch.Tensor  # [N, 4]
    render_boxes: torch.Tensor  # [N, 4]
    masks: torch.Tensor  # [N, M, M]
    tparams: Optional[TransformParams]
    layouts: list[Layout]
    visual_features: torch.Tensor  # [N, F] after mask substitution


class Generator(nn.Module):
    """Everything on the generative side, wired per the run config. With
    disentangle_embeddings off, the graph features feed the heads and the
    layout directly (no variational branches, no pose transform); with
    disentangle_graph off, the graph net runs single-factor at the same total
    width."""

    def __init__(self, cfg: RunConfig, n_classes: int, n_predicates: int):
        super().__init__()
        self.cfg = cfg
        self.class_embed = nn.Embedding(n_classes, cfg.embed.class_dim)
        self.visual = VisualEncoder(cfg.visual.feature_dim)
        node_dim = cfg.embed.class_dim + 4 + cfg.visual.feature_dim
        dsgn_cfg = cfg.dsgn
        if not cfg.model.disentangle_graph:
            dsgn_cfg = dataclasses.replace(cfg.dsgn, k=1, nhidden=cfg.dsgn.proj_dim)
        self.dsgn = Dsgn(node_dim, n_predicates, cfg.embed.pred_dim, dsgn_cfg)
        dim = cfg.dsgn.out_dim
        if cfg.model.disentangle_embeddings:
            self.enc_a = GaussianEncoder(dim)
            self.enc_p = GaussianEncoder(dim)
            self.q_p = PoseDecoder(dim, cfg.pose)
        self.bbox_head = BoxHead(dim)
        self.mask_head = MaskHead(dim, cfg.render.mask_size)
        self.background = nn.Parameter(torch.zeros(dim))
        self.q_a = AppearanceDecoder(dim, cfg.render)

    @property
    def layout_hw(self) -> tuple[int, int]:
        return (self.cfg.render.layout_size, self.cfg.render.layout_size)

    def forward(
        self,
        batch: GraphBatch,
        images: torch.Tensor,
        sample: bool | torch.Tensor = True,
        rng: Optional[torch.Generator] = None,
        extra_regions: Optional[list[tuple[int, tuple[float, float, float, float]]]] = None,
    ) -> GeneratorOutput:
        cfg = self.cfg
        regions = [
            (int(batch.scene_index[i]), tuple(batch.bboxes[i].tolist()))
            for i in range(batch.class_ids.shape[0])
            if bool(batch.region_masked[i])
        ]
        if extra_regions:
            regions.extend(extra_regions)
        visible = erase_regions(images, regions)

        crops = crop_and_resize(
            visible, batch.bboxes, batch.scene_index, cfg.visual.crop_size
        )
        feats = self.visual(crops)
        noise = torch.where(
            batch.has_stored.unsqueeze(-1),
            batch.stored_features,
            torch.randn(feats.shape, generator=rng, dtype=feats.dtype, device=feats.device),
        )
        feats = torch.where(batch.feature_masked.unsqueeze(-1), noise, feats)

        sentinel = feats.new_tensor(BBOX_SENTINEL)
        bbox_in = torch.where(batch.bbox_masked.unsqueeze(-1), sentinel, batch.bboxes)
        x = torch.cat([self.class_embed(batch.class_ids).to(feats.dtype), bbox_in, feats], dim=-1)
        z_graph = self.dsgn(x, batch.edges)

        lat_app = lat_pose = lat_pose_raw = None
        tparams = None
        if cfg.model.disentangle_embeddings:
            lat_app = self.enc_a(z_graph, sample=sample, rng=rng)
            lat_pose = self.enc_p(z_graph, sample=sample, rng=rng)
            z_app = lat_app.z
            tparams, lat_pose_raw = self.q_p(lat_pose.z, sample=sample, rng=rng)
        else:
            z_app = z_graph

        pred_boxes = self.bbox_head(z_app)
        render_boxes = torch.where(batch.bbox_masked.unsqueeze(-1), pred_boxes, batch.bboxes)
        masks = self.mask_head(z_app)

        layouts = []
        grids = []
        for s in range(batch.n_scenes):
            idx = (batch.scene_index == s).nonzero(as_tuple=True)[0]
            layout = compose_layout(
                z_app.index_select(0, idx),
                render_boxes.index_select(0, idx),
                masks.index_select(0, idx),
                self.background,
                self.layout_hw,
            )
            if tparams is not None:
                layout = pool_and_transform(layout, _select_params(tparams, idx))
            layouts.append(layout)
            grids.append(layout.grid)
        out_images = self.q_a(torch.stack(grids, dim=0))
        return GeneratorOutput(
            images=out_images,
            z_graph=z_graph,
            lat_app=lat_app,
            lat_pose=lat_pose,
            lat_pose_raw=lat_pose_raw,
            pred_boxes=pred_boxes,
            render_boxes=render_boxes,
            masks=masks,
            tparams=tparams,
            layouts=layouts,
            visual_features=feats,
        )


def _select_params(params: TransformParams, idx: torch.Tensor) -> TransformParams:
    return TransformParams(
        alpha=params.alpha.index_select(0, idx),
        m=params.m.index_select(0, idx),
        delta_a=params.delta_a.index_select(0, idx),
        delta_b=params.delta_b.index_select(0, idx),
        t_a=params.t_a.index_select(0, idx),
        t_b=params.t_b.index_select(0, idx),
    )
