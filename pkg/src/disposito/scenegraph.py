"""Scene-graph data model, validation, edits, and masking rules.

A scene graph is an immutable value: objects (nodes) carry a class id, a
normalized bounding box, an optional visual feature vector, and three masking
flags; relations (edges) are directed predicate triplets. Edits return new
graphs, so callers can keep the pre-edit graph around for chaining or undo.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np


class UnknownTarget(KeyError):
    """An edit payload references a node or edge that is not in the graph."""


class InvalidAddition(ValueError):
    """An OBJECT_ADDITION payload is internally inconsistent."""


@dataclass(frozen=True)
class ObjectNode:
    """One object in the scene.

    bbox is (x0, y0, x1, y1) in [0, 1] image coordinates. visual_feature is
    either a fixed-width float tuple or None (to be computed from the image,
    or drawn as noise when feature_masked is set).
    """

    id: str
    class_id: int
    bbox: tuple[float, float, float, float]
    visual_feature: Optional[tuple[float, ...]] = None
    feature_masked: bool = False
    bbox_masked: bool = False
    region_masked: bool = False


@dataclass(frozen=True)
class PredicateEdge:
    """Directed triplet (subject, predicate, object), ids referencing nodes."""

    subject_id: str
    object_id: str
    predicate_id: int

    def key(self) -> tuple[str, int, str]:
        return (self.subject_id, self.predicate_id, self.object_id)


@dataclass(frozen=True)
class SceneGraph:
    nodes: tuple[ObjectNode, ...]
    edges: tuple[PredicateEdge, ...]

    def node(self, node_id: str) -> ObjectNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise UnknownTarget(node_id)

    def has_node(self, node_id: str) -> bool:
        return any(n.id == node_id for n in self.nodes)

    def node_index(self, node_id: str) -> int:
        for i, n in enumerate(self.nodes):
            if n.id == node_id:
                return i
        raise UnknownTarget(node_id)


class EditMode(Enum):
    RELATIONSHIP_CHANGE = "relationship_change"
    OBJECT_REPLACEMENT = "object_replacement"
    OBJECT_REMOVAL = "object_removal"
    OBJECT_ADDITION = "object_addition"


@dataclass(frozen=True)
class GraphEdit:
    """One user edit. Only the payload fields for `mode` are consulted.

    RELATIONSHIP_CHANGE: edge (s, p, o) + new_predicate
    OBJECT_REPLACEMENT:  node_id + new_class
    OBJECT_REMOVAL:      node_id
    OBJECT_ADDITION:     new_node + new_edges
    """

    mode: EditMode
    edge: Optional[tuple[str, int, str]] = None
    new_predicate: Optional[int] = None
    node_id: Optional[str] = None
    new_class: Optional[int] = None
    new_node: Optional[ObjectNode] = None
    new_edges: tuple[PredicateEdge, ...] = ()


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    subject: Optional[str] = None


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, kind: str, message: str, subject: Optional[str] = None) -> None:
        self.violations.append(Violation(kind, message, subject))

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "violations": [
                {"kind": v.kind, "message": v.message, "subject": v.subject}
                for v in self.violations
            ],
        }


def validate_graph(
    graph: SceneGraph,
    n_classes: Optional[int] = None,
    n_predicates: Optional[int] = None,
    feature_dim: Optional[int] = None,
) -> ValidationReport:
    """Collect every invariant violation; an empty report means a valid graph."""
    report = ValidationReport()
    seen: set[str] = set()
    for n in graph.nodes:
        if n.id in seen:
            report.add("duplicate_node", f"node id {n.id!r} appears twice", n.id)
        seen.add(n.id)
        x0, y0, x1, y1 = n.bbox
        if not n.bbox_masked:
            if not (0.0 <= x0 < x1 <= 1.0):
                report.add("bbox_order", f"node {n.id!r}: need 0 <= x0 < x1 <= 1, got ({x0}, {x1})", n.id)
            if not (0.0 <= y0 < y1 <= 1.0):
                report.add("bbox_order", f"node {n.id!r}: need 0 <= y0 < y1 <= 1, got ({y0}, {y1})", n.id)
        if n.class_id < 0 or (n_classes is not None and n.class_id >= n_classes):
            report.add("class_range", f"node {n.id!r}: class id {n.class_id} out of range", n.id)
        if n.visual_feature is not None and feature_dim is not None and len(n.visual_feature) != feature_dim:
            report.add(
                "feature_dim",
                f"node {n.id!r}: feature length {len(n.visual_feature)} != {feature_dim}",
                n.id,
            )
    ids = {n.id for n in graph.nodes}
    for e in graph.edges:
        if e.subject_id == e.object_id:
            report.add("self_loop", f"edge on {e.subject_id!r} points at itself", e.subject_id)
        for endpoint in (e.subject_id, e.object_id):
            if endpoint not in ids:
                report.add("dangling_edge", f"edge references missing node {endpoint!r}", endpoint)
        if e.predicate_id < 0 or (n_predicates is not None and e.predicate_id >= n_predicates):
            report.add("predicate_range", f"predicate id {e.predicate_id} out of range", e.subject_id)
    return report


def apply_edit(graph: SceneGraph, edit: GraphEdit) -> SceneGraph:
    """Apply one edit, returning a new graph; the input graph is untouched."""
    if edit.mode is EditMode.RELATIONSHIP_CHANGE:
        if edit.edge is None or edit.new_predicate is None:
            raise UnknownTarget("relationship change needs an edge and a new predicate")
        matched = False
        edges = []
        for e in graph.edges:
            if not matched and e.key() == edit.edge:
                edges.append(replace(e, predicate_id=edit.new_predicate))
                matched = True
            else:
                edges.append(e)
        if not matched:
            raise UnknownTarget(f"edge {edit.edge!r} not found")
        return SceneGraph(graph.nodes, tuple(edges))

    if edit.mode is EditMode.OBJECT_REPLACEMENT:
        if edit.node_id is None or edit.new_class is None:
            raise UnknownTarget("replacement needs a node id and a new class")
        graph.node(edit.node_id)
        nodes = tuple(
            replace(n, class_id=edit.new_class) if n.id == edit.node_id else n for n in graph.nodes
        )
        return SceneGraph(nodes, graph.edges)

    if edit.mode is EditMode.OBJECT_REMOVAL:
        if edit.node_id is None:
            raise UnknownTarget("removal needs a node id")
        graph.node(edit.node_id)
        nodes = tuple(n for n in graph.nodes if n.id != edit.node_id)
        edges = tuple(
            e for e in graph.edges if edit.node_id not in (e.subject_id, e.object_id)
        )
        return SceneGraph(nodes, edges)

    if edit.mode is EditMode.OBJECT_ADDITION:
        if edit.new_node is None:
            raise InvalidAddition("addition needs a node payload")
        if graph.has_node(edit.new_node.id):
            raise InvalidAddition(f"node id {edit.new_node.id!r} already present")
        ids = {n.id for n in graph.nodes} | {edit.new_node.id}
        for e in edit.new_edges:
            if e.subject_id not in ids or e.object_id not in ids:
                raise InvalidAddition(f"added edge {e.key()!r} dangles")
            if edit.new_node.id not in (e.subject_id, e.object_id):
                raise InvalidAddition(f"added edge {e.key()!r} is not incident to the new node")
        return SceneGraph(graph.nodes + (edit.new_node,), graph.edges + tuple(edit.new_edges))

    raise UnknownTarget(f"unhandled edit mode {edit.mode!r}")


def _set_flags(graph: SceneGraph, node_id: str, **flags: bool) -> SceneGraph:
    graph.node(node_id)
    nodes = tuple(replace(n, **flags) if n.id == node_id else n for n in graph.nodes)
    return SceneGraph(nodes, graph.edges)


def mask_for_mode(
    graph: SceneGraph, edit: GraphEdit, rel_change_target: str = "subject"
) -> SceneGraph:
    """Set the masking flags the edit's mode prescribes on its target node(s).

    RELATIONSHIP_CHANGE keeps the object features and masks the bounding box;
    OBJECT_REPLACEMENT drops the features and keeps the box; OBJECT_REMOVAL
    flags the node's image region for erasure; OBJECT_ADDITION (applied after
    the node exists) drops the features and uses the payload box.

    rel_change_target selects whose box a relationship change masks:
    "subject", "object", or "both".
    """
    if edit.mode is EditMode.RELATIONSHIP_CHANGE:
        if edit.edge is None:
            raise UnknownTarget("relationship change needs an edge")
        s, _, o = edit.edge
        out = graph
        if rel_change_target in ("subject", "both"):
            out = _set_flags(out, s, bbox_masked=True)
        if rel_change_target in ("object", "both"):
            out = _set_flags(out, o, bbox_masked=True)
        return out
    if edit.mode is EditMode.OBJECT_REPLACEMENT:
        assert edit.node_id is not None
        return _set_flags(graph, edit.node_id, feature_masked=True)
    if edit.mode is EditMode.OBJECT_REMOVAL:
        assert edit.node_id is not None
        return _set_flags(graph, edit.node_id, region_masked=True)
    if edit.mode is EditMode.OBJECT_ADDITION:
        assert edit.new_node is not None
        return _set_flags(graph, edit.new_node.id, feature_masked=True)
    raise UnknownTarget(f"unhandled edit mode {edit.mode!r}")


def edit_and_mask(
    graph: SceneGraph, edit: GraphEdit, rel_change_target: str = "subject"
) -> tuple[SceneGraph, list[tuple[float, float, float, float]]]:
    """Apply an edit together with its masking rule.

    Returns the post-edit graph with flags set, plus the image-space boxes
    that must be erased from the source image (removal regions survive here
    even though the removed node does not).
    """
    if edit.mode is EditMode.OBJECT_REMOVAL:
        masked = mask_for_mode(graph, edit, rel_change_target)
        region = [masked.node(edit.node_id).bbox]
        return apply_edit(masked, edit), region
    if edit.mode is EditMode.OBJECT_ADDITION:
        added = apply_edit(graph, edit)
        return mask_for_mode(added, edit, rel_change_target), []
    edited = apply_edit(graph, edit)
    return mask_for_mode(edited, edit, rel_change_target), []


@dataclass(frozen=True)
class MaskRates:
    """Per-channel Bernoulli rates for the training-time masking of nodes."""

    region: float = 0.15
    feature: float = 0.3
    bbox: float = 0.3


def training_mask(
    graph: SceneGraph,
    rates: MaskRates,
    rng: np.random.Generator,
    feature_dim: Optional[int] = None,
) -> SceneGraph:
    """Randomly mask nodes for the reconstruction-proxy objective.

    Each flag flips independently per node at its configured rate. Masked
    visual features are replaced by unit-normal noise (of feature_dim, or of
    the existing feature's width). Deterministic for a fixed rng state.
    """
    for r in (rates.region, rates.feature, rates.bbox):
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"mask rate {r} outside [0, 1]")
    nodes = []
    for n in graph.nodes:
        draws = rng.random(3)
        region = n.region_masked or bool(draws[0] < rates.region)
        feature = n.feature_masked or bool(draws[1] < rates.feature)
        bbox = n.bbox_masked or bool(draws[2] < rates.bbox)
        vf = n.visual_feature
        if feature:
            width = feature_dim if feature_dim is not None else (len(vf) if vf else None)
            if width is not None:
                vf = tuple(float(v) for v in rng.standard_normal(width))
        nodes.append(
            replace(n, region_masked=region, feature_masked=feature, bbox_masked=bbox, visual_feature=vf)
        )
    return SceneGraph(tuple(nodes), graph.edges)


# --- wire format ----------------------------------------------------------
#
# {"objects": [{"id", "class", "bbox": [x0,y0,x1,y1], "flags": {...}}],
#  "relations": [{"s", "p", "o"}]}
#
# Class and predicate names come from the dataset manifest. Serialization is
# canonical (sorted keys, compact separators, integral floats written as
# ints) so clients in other languages can reproduce the bytes.


def _canonical_value(value):
    if isinstance(value, bool):
        return value
    if isinstance(value, float):
        if value == int(value) and abs(value) < 2**53:
            return int(value)
        return value
    if isinstance(value, dict):
        return {k: _canonical_value(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_canonical_value(v) for v in value]
    return value


def canonical_json(value) -> str:
    """Deterministic JSON used on every wire surface (service, files, UI)."""
    return json.dumps(_canonical_value(value), sort_keys=True, separators=(",", ":"))


def graph_to_dict(
    graph: SceneGraph, classes: Sequence[str], predicates: Sequence[str]
) -> dict:
    objects = []
    for n in graph.nodes:
        objects.append(
            {
                "id": n.id,
                "class": classes[n.class_id],
                "bbox": [round(float(v), 6) for v in n.bbox],
                "flags": {
                    "feature_masked": n.feature_masked,
                    "bbox_masked": n.bbox_masked,
                    "region_masked": n.region_masked,
                },
            }
        )
    relations = [
        {"s": e.subject_id, "p": predicates[e.predicate_id], "o": e.object_id}
        for e in graph.edges
    ]
    return {"objects": objects, "relations": relations}


def graph_from_dict(
    data: dict, classes: Sequence[str], predicates: Sequence[str]
) -> SceneGraph:
    class_index = {name: i for i, name in enumerate(classes)}
    pred_index = {name: i for i, name in enumerate(predicates)}
    nodes = []
    for obj in data["objects"]:
        flags = obj.get("flags", {})
        name = obj["class"]
        if name not in class_index:
            raise KeyError(f"unknown class {name!r}")
        nodes.append(
            ObjectNode(
                id=str(obj["id"]),
                class_id=class_index[name],
                bbox=tuple(float(v) for v in obj["bbox"]),
                feature_masked=bool(flags.get("feature_masked", False)),
                bbox_masked=bool(flags.get("bbox_masked", False)),
                region_masked=bool(flags.get("region_masked", False)),
            )
        )
    edges = []
    for rel in data.get("relations", []):
        name = rel["p"]
        if name not in pred_index:
            raise KeyError(f"unknown predicate {name!r}")
        edges.append(PredicateEdge(str(rel["s"]), str(rel["o"]), pred_index[name]))
    return SceneGraph(tuple(nodes), tuple(edges))


def edit_from_dict(
    data: dict, classes: Sequence[str], predicates: Sequence[str]
) -> GraphEdit:
    """Parse the edit wire format used by the CLI, the service, and the UI."""
    class_index = {name: i for i, name in enumerate(classes)}
    pred_index = {name: i for i, name in enumerate(predicates)}
    mode = EditMode(data["mode"])
    if mode is EditMode.RELATIONSHIP_CHANGE:
        return GraphEdit(
            mode,
            edge=(str(data["subject"]), pred_index[data["predicate"]], str(data["object"])),
            new_predicate=pred_index[data["new_predicate"]],
        )
    if mode is EditMode.OBJECT_REPLACEMENT:
        return GraphEdit(mode, node_id=str(data["node"]), new_class=class_index[data["new_class"]])
    if mode is EditMode.OBJECT_REMOVAL:
        return GraphEdit(mode, node_id=str(data["node"]))
    node = data["node"]
    new_node = ObjectNode(
        id=str(node["id"]),
        class_id=class_index[node["class"]],
        bbox=tuple(float(v) for v in node["bbox"]),
    )
    new_edges = tuple(
        PredicateEdge(str(r["s"]), str(r["o"]), pred_index[r["p"]])
        for r in data.get("relations", [])
    )
    return GraphEdit(mode, new_node=new_node, new_edges=new_edges)


def iter_region_masked_boxes(graph: SceneGraph) -> Iterable[tuple[float, float, float, float]]:
    for n in graph.nodes:
        if n.region_masked:
            yield n.bbox
