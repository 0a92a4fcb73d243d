"""Graph network with per-node factorized features and neighborhood routing.

Node features are split into k factor channels. Each message-passing layer
first maps every (subject, predicate, object) triplet through a shared MLP
that emits per-edge contributions for both endpoints plus an updated
predicate feature, then routes the aggregated neighbor messages into the
factor channels by iterative soft assignment. Two stacked subnets produce
the final per-object features.
"""

from __future__ import annotations

from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .config import DsgnConfig
from .errors import DimensionMismatch, EmptyGraph
from .nnblocks import LEAKY_SLOPE, BatchNorm1dSafe
from .scenegraph import ObjectNode

BBOX_SENTINEL = (-1.0, -1.0, -1.0, -1.0)


def assemble_node_input(
    node: ObjectNode,
    class_table: torch.Tensor,
    visual_feature: Optional[torch.Tensor] = None,
    rng: Optional[torch.Generator] = None,
    feature_dim: Optional[int] = None,
) -> torch.Tensor:
    """Concatenate [class embedding | bbox | visual feature or noise].

    A masked bbox is replaced by the sentinel box (-1,-1,-1,-1). A masked or
    absent visual feature is drawn as unit-normal noise from `rng`.
    """
    if node.class_id >= class_table.shape[0]:
        raise DimensionMismatch(f"class id {node.class_id} not covered by the embedding table")
    emb = class_table[node.class_id]
    bbox = BBOX_SENTINEL if node.bbox_masked else node.bbox
    box = torch.tensor(bbox, dtype=emb.dtype, device=emb.device)
    if visual_feature is None and node.visual_feature is not None:
        visual_feature = torch.tensor(node.visual_feature, dtype=emb.dtype, device=emb.device)
    if visual_feature is None:
        if feature_dim is None:
            raise DimensionMismatch("need feature_dim to draw noise for a masked/absent feature")
        visual_feature = torch.randn(feature_dim, generator=rng, dtype=emb.dtype, device=emb.device)
    if feature_dim is not None and visual_feature.shape[-1] != feature_dim:
        raise DimensionMismatch(
            f"visual feature width {visual_feature.shape[-1]} != {feature_dim}"
        )
    return torch.cat([emb, box, visual_feature])


class SparseInputLayer(nn.Module):
    """k independent affine projections to nhidden, leaky-rectified and
    L2-normalized per factor channel (block-diagonal stand-in for the sparse
    input layer)."""

    def __init__(self, in_dim: int, k: int, nhidden: int):
        super().__init__()
        self.in_dim = in_dim
        self.k = k
        self.nhidden = nhidden
        self.weight = nn.Parameter(torch.empty(k, in_dim, nhidden))
        self.bias = nn.Parameter(torch.zeros(k, nhidden))
        nn.init.kaiming_uniform_(self.weight, a=LEAKY_SLOPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise DimensionMismatch(f"expected input width {self.in_dim}, got {x.shape[-1]}")
        # [N, in] x [k, in, h] -> [N, k, h]
        out = torch.einsum("ni,kih->nkh", x, self.weight) + self.bias
        out = F.leaky_relu(out, LEAKY_SLOPE)
        return F.normalize(out, dim=-1)


class TripletMessage(nn.Module):
    """Per-edge map on [subject | predicate | object] emitting the subject
    contribution, the updated predicate feature, and the object contribution."""

    def __init__(self, k: int, nhidden: int, pred_dim: int, hidden: int):
        super().__init__()
        self.k = k
        self.nhidden = nhidden
        self.pred_dim = pred_dim
        width = k * nhidden
        self.net = nn.Sequential(
            nn.Linear(2 * width + pred_dim, hidden),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Linear(hidden, 2 * width + pred_dim),
        )

    def forward(
        self, subj: torch.Tensor, pred: torch.Tensor, obj: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        width = self.k * self.nhidden
        if subj.shape[-2:] != (self.k, self.nhidden) or obj.shape[-2:] != (self.k, self.nhidden):
            raise DimensionMismatch("subject/object factor shapes do not match the config")
        if pred.shape[-1] != self.pred_dim:
            raise DimensionMismatch(f"predicate width {pred.shape[-1]} != {self.pred_dim}")
        flat = torch.cat([subj.flatten(-2), pred, obj.flatten(-2)], dim=-1)
        out = self.net(flat)
        alpha = out[..., :width].reshape(*subj.shape)
        rho = out[..., width : width + self.pred_dim]
        beta = out[..., width + self.pred_dim :].reshape(*obj.shape)
        return alpha, rho, beta


def neighborhood_routing(
    center: torch.Tensor,
    msgs: torch.Tensor,
    msg_dst: torch.Tensor,
    iters: int,
    return_attention: bool = False,
):
    """Iterative soft assignment of neighbor messages to factor channels.

    center: [N, k, h] factor-normalized node features; msgs: [M, k, h]
    factor-normalized neighbor messages routed to node msg_dst[m]. Each
    iteration scores every message against the current center per factor,
    softmaxes over factors, and renormalizes (original center + weighted
    message sum). With no messages the (normalized) center passes through.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    c0 = F.normalize(center, dim=-1)
    c = c0
    attn = None
    k = center.shape[-2]
    effective_iters = 1 if k == 1 else iters  # single factor: fixed point after one pass
    if msgs.shape[0] == 0:
        return (c0, None) if return_attention else c0
    for _ in range(effective_iters):
        scores = (c.index_select(0, msg_dst) * msgs).sum(-1)
        attn = torch.softmax(scores, dim=-1)
        agg = torch.zeros_like(c0)
        agg.index_add_(0, msg_dst, attn.unsqueeze(-1) * msgs)
        c = F.normalize(c0 + agg, dim=-1)
    if return_attention:
        return c, attn
    return c


def coalesce_messages(
    alpha: torch.Tensor, beta: torch.Tensor, edges: torch.Tensor, n_nodes: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Collect per-node neighbor messages: the subject contribution flows to
    the subject, the object contribution to the object; multiple edges
    between the same node pair are averaged. Returns factor-normalized
    messages and their destination node indices."""
    dst = torch.cat([edges[:, 0], edges[:, 2]])
    src = torch.cat([edges[:, 2], edges[:, 0]])
    raw = torch.cat([alpha, beta], dim=0)
    key = dst * n_nodes + src
    uniq, inverse = torch.unique(key, return_inverse=True)
    summed = torch.zeros(uniq.shape[0], *raw.shape[1:], dtype=raw.dtype, device=raw.device)
    summed.index_add_(0, inverse, raw)
    counts = torch.bincount(inverse, minlength=uniq.shape[0]).to(raw.dtype)
    msg = F.normalize(summed / counts.view(-1, 1, 1), dim=-1)
    return msg, (uniq // n_nodes).long()


class DsgnSubnet(nn.Module):
    def __init__(self, in_dim: int, pred_dim: int, cfg: DsgnConfig):
        super().__init__()
        self.cfg = cfg
        self.sparse = SparseInputLayer(in_dim, cfg.k, cfg.nhidden)
        self.msg_layers = nn.ModuleList(
            TripletMessage(cfg.k, cfg.nhidden, pred_dim, cfg.msg_hidden)
            for _ in range(cfg.routing_layers_per_subnet)
        )
        self.fc = nn.Linear(cfg.proj_dim, cfg.out_dim)
        self.bn = BatchNorm1dSafe(cfg.out_dim)

    def forward(
        self, x: torch.Tensor, edges: torch.Tensor, rho: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        nu = self.sparse(x)
        n = nu.shape[0]
        for layer in self.msg_layers:
            if edges.shape[0] > 0:
                alpha, rho, beta = layer(
                    nu.index_select(0, edges[:, 0]), rho, nu.index_select(0, edges[:, 2])
                )
                msgs, dst = coalesce_messages(alpha, beta, edges, n)
            else:
                msgs = nu.new_zeros((0, self.cfg.k, self.cfg.nhidden))
                dst = edges.new_zeros((0,))
            nu = neighborhood_routing(nu, msgs, dst, self.cfg.routing_iters)
        z = self.fc(nu.flatten(1))
        return F.leaky_relu(self.bn(z), LEAKY_SLOPE), rho


class Dsgn(nn.Module):
    """Two stacked subnets; the second consumes the first's node features and
    its evolved predicate features."""

    def __init__(self, node_dim: int, n_predicates: int, pred_dim: int, cfg: DsgnConfig):
        super().__init__()
        self.cfg = cfg
        self.pred_embed = nn.Embedding(n_predicates, pred_dim)
        self.subnet1 = DsgnSubnet(node_dim, pred_dim, cfg)
        self.subnet2 = DsgnSubnet(cfg.out_dim, pred_dim, cfg)

    def forward(self, x: torch.Tensor, edges: torch.Tensor) -> torch.Tensor:
        """x: [N, node_dim]; edges: [E, 3] rows (subject, predicate, object)
        with node columns indexing into x. Returns [N, out_dim]."""
        if x.shape[0] == 0:
            raise EmptyGraph("dsgn forward needs at least one node")
        if edges.shape[0] > 0:
            rho = self.pred_embed(edges[:, 1]).to(x.dtype)
        else:
            rho = x.new_zeros((0, self.pred_embed.embedding_dim))
        z1, rho = self.subnet1(x, edges, rho)
        z2, _ = self.subnet2(z1, edges, rho)
        return z2
