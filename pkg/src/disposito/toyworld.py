"""Procedural toy scenes: colored shapes with geometric relation predicates.

Every scene is fully determined by (spec, scene index): object placement,
colors, brightness jitter, and the low-frequency background come from a
per-index rng. That makes ground-truth re-rendering possible (including
re-rendering a scene without one of its objects, which the removal metric
needs) without storing anything beyond the spec and the index.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .scenegraph import (
    ObjectNode,
    PredicateEdge,
    SceneGraph,
    canonical_json,
    graph_from_dict,
    graph_to_dict,
)
from .seeding import SCENE, rng_for

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (220, 50, 47),
    "orange": (230, 126, 34),
    "yellow": (241, 196, 15),
    "green": (60, 160, 70),
    "cyan": (42, 180, 190),
    "blue": (38, 100, 210),
    "purple": (130, 80, 200),
    "magenta": (211, 54, 130),
}
PREDICATES = ("left_of", "right_of", "above", "below", "inside", "surrounding")
OPPOSITE = {"left_of": "right_of", "right_of": "left_of", "above": "below", "below": "above"}

SUPERSAMPLE = 4
MIN_SIDE_PX = 4


class PlacementFailure(RuntimeError):
    """Rejection sampling could not place all objects (spec too crowded)."""


@dataclass(frozen=True)
class ToySpec:
    image_size: int = 32
    min_objects: int = 2
    max_objects: int = 4
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = tuple(COLORS)
    predicates: tuple[str, ...] = PREDICATES
    seed: int = 0
    containment_prob: float = 0.2
    bg_amplitude: float = 0.05

    def __post_init__(self):
        if not self.shapes or not self.colors or not self.predicates:
            raise ValueError("vocabularies must be non-empty")
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ValueError("object count range must be >= 1 and ordered")

    @property
    def classes(self) -> tuple[str, ...]:
        return tuple(f"{c}_{s}" for c in self.colors for s in self.shapes)

    def class_id(self, color: str, shape: str) -> int:
        return self.colors.index(color) * len(self.shapes) + self.shapes.index(shape)

    def spec_hash(self) -> str:
        payload = canonical_json(
            {
                "image_size": self.image_size,
                "min_objects": self.min_objects,
                "max_objects": self.max_objects,
                "shapes": list(self.shapes),
                "colors": list(self.colors),
                "predicates": list(self.predicates),
                "seed": self.seed,
                "containment_prob": self.containment_prob,
                "bg_amplitude": self.bg_amplitude,
            }
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ObjectParams:
    shape: str
    color: str
    bbox: tuple[float, float, float, float]  # normalized, pixel-aligned
    brightness: float


@dataclass(frozen=True)
class SceneParams:
    objects: tuple[ObjectParams, ...]  # draw order: larger objects first
    bg_base: float
    bg_grid: tuple[tuple[float, ...], ...]  # coarse per-channel offsets, shape (3, 4, 4)


def _boxes_overlap(a, b) -> bool:
    return not (a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1])


def _box_inside(inner, outer, margin: float = 0.0) -> bool:
    return (
        inner[0] >= outer[0] + margin
        and inner[1] >= outer[1] + margin
        and inner[2] <= outer[2] - margin
        and inner[3] <= outer[3] - margin
    )


def sample_scene_params(spec: ToySpec, rng: np.random.Generator) -> SceneParams:
    size = spec.image_size
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    placed: list[ObjectParams] = []
    for _ in range(n):
        ok = False
        for _attempt in range(100):
            contain_host = None
            if placed and rng.random() < spec.containment_prob:
                hosts = [
                    p
                    for p in placed
                    if (p.bbox[2] - p.bbox[0]) * size >= MIN_SIDE_PX + 4
                    and (p.bbox[3] - p.bbox[1]) * size >= MIN_SIDE_PX + 4
                ]
                if hosts:
                    contain_host = hosts[int(rng.integers(len(hosts)))]
            if contain_host is not None:
                hx0, hy0, hx1, hy1 = (int(round(v * size)) for v in contain_host.bbox)
                max_w = (hx1 - hx0) - 2
                max_h = (hy1 - hy0) - 2
                w = int(rng.integers(MIN_SIDE_PX, max(max_w, MIN_SIDE_PX) + 1))
                h = int(rng.integers(MIN_SIDE_PX, max(max_h, MIN_SIDE_PX) + 1))
                w, h = min(w, max_w), min(h, max_h)
                x0 = int(rng.integers(hx0 + 1, hx1 - w))
                y0 = int(rng.integers(hy0 + 1, hy1 - h))
            else:
                lo, hi = MIN_SIDE_PX + 2, max(MIN_SIDE_PX + 3, int(0.45 * size))
                w = int(rng.integers(lo, hi + 1))
                h = int(rng.integers(lo, hi + 1))
                x0 = int(rng.integers(0, size - w + 1))
                y0 = int(rng.integers(0, size - h + 1))
            bbox = (x0 / size, y0 / size, (x0 + w) / size, (y0 + h) / size)
            if contain_host is None:
                clash = any(
                    _boxes_overlap(bbox, p.bbox) and not _box_inside(p.bbox, bbox) for p in placed
                )
                if clash:
                    continue
            shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
            color = spec.colors[int(rng.integers(len(spec.colors)))]
            brightness = float(rng.uniform(0.75, 1.0))
            placed.append(ObjectParams(shape, color, bbox, brightness))
            ok = True
            break
        if not ok:
            raise PlacementFailure(f"could not place object {len(placed)} of {n}")
    # draw larger objects first so contained ones stay visible
    placed.sort(key=lambda p: -(p.bbox[2] - p.bbox[0]) * (p.bbox[3] - p.bbox[1]))
    bg_base = float(rng.uniform(0.42, 0.58))
    bg_grid = rng.normal(0.0, spec.bg_amplitude, size=(3, 4, 4))
    return SceneParams(tuple(placed), bg_base, tuple(tuple(map(float, row.flatten())) for row in bg_grid))


def _upsample_bilinear(grid: np.ndarray, size: int) -> np.ndarray:
    # coarse (gh, gw) -> (size, size), sampling grid cell centers
    gh, gw = grid.shape
    ys = (np.arange(size) + 0.5) / size * gh - 0.5
    xs = (np.arange(size) + 0.5) / size * gw - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, gh - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, gw - 1)
    y1 = np.clip(y0 + 1, 0, gh - 1)
    x1 = np.clip(x0 + 1, 0, gw - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - wx) + grid[np.ix_(y0, x1)] * wx
    bot = grid[np.ix_(y1, x0)] * (1 - wx) + grid[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def _shape_mask(shape: str, bbox_px: tuple[int, int, int, int], canvas: int) -> np.ndarray:
    """Boolean mask at SUPERSAMPLE resolution for one filled shape."""
    s = SUPERSAMPLE
    x0, y0, x1, y1 = (v * s for v in bbox_px)
    ys, xs = np.mgrid[0 : canvas * s, 0 : canvas * s]
    ys = ys + 0.5
    xs = xs + 0.5
    if shape == "circle":
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        rx, ry = (x1 - x0) / 2, (y1 - y0) / 2
        return ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
    if shape == "square":
        return (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)
    if shape == "triangle":
        # upward triangle: apex at top-center, base at the bottom edge
        inside_y = (ys >= y0) & (ys < y1)
        t = np.clip((ys - y0) / max(y1 - y0, 1e-9), 0.0, 1.0)
        cx = (x0 + x1) / 2
        half = (x1 - x0) / 2 * t
        return inside_y & (np.abs(xs - cx) <= half)
    raise ValueError(f"unknown shape {shape!r}")


def render_scene_params(
    params: SceneParams, spec: ToySpec, exclude: Optional[int] = None
) -> np.ndarray:
    """Render to a float image in [0, 1], shape (size, size, 3).

    exclude drops the object at that draw-order index (ground truth for
    removal edits).
    """
    size = spec.image_size
    img = np.empty((size, size, 3), dtype=np.float64)
    for c in range(3):
        coarse = np.array(params.bg_grid[c], dtype=np.float64).reshape(4, 4)
        img[:, :, c] = params.bg_base + _upsample_bilinear(coarse, size)
    img = np.clip(img, 0.0, 1.0)
    img_hi = np.repeat(np.repeat(img, SUPERSAMPLE, axis=0), SUPERSAMPLE, axis=1)
    for i, obj in enumerate(params.objects):
        if exclude is not None and i == exclude:
            continue
        bbox_px = tuple(int(round(v * size)) for v in obj.bbox)
        mask = _shape_mask(obj.shape, bbox_px, size)
        rgb = np.array(COLORS[obj.color], dtype=np.float64) / 255.0 * obj.brightness
        img_hi[mask] = rgb
    down = img_hi.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE, 3).mean(axis=(1, 3))
    return down.astype(np.float32)


def derive_edges(
    objects: Sequence[ObjectParams], spec: ToySpec, rng: np.random.Generator
) -> list[tuple[int, str, int]]:
    """One edge per object pair per relation family, with random orientation.

    Containment pairs get a single inside/surrounding edge; all other pairs
    get one horizontal (left_of/right_of) and one vertical (above/below)
    edge. Orientation (which object is the subject) is a coin flip so both
    predicate directions appear in training data.
    """
    edges = []
    n = len(objects)
    for i in range(n):
        for j in range(i + 1, n):
            a, b = objects[i].bbox, objects[j].bbox
            if _box_inside(a, b):
                if rng.random() < 0.5:
                    edges.append((i, "inside", j))
                else:
                    edges.append((j, "surrounding", i))
                continue
            if _box_inside(b, a):
                if rng.random() < 0.5:
                    edges.append((j, "inside", i))
                else:
                    edges.append((i, "surrounding", j))
                continue
            ax = (a[0] + a[2]) / 2, (a[1] + a[3]) / 2
            bx = (b[0] + b[2]) / 2, (b[1] + b[3]) / 2
            if abs(ax[0] - bx[0]) > 1e-6:
                s, o = (i, j) if rng.random() < 0.5 else (j, i)
                sx = ax[0] if s == i else bx[0]
                ox = bx[0] if s == i else ax[0]
                edges.append((s, "left_of" if sx < ox else "right_of", o))
            if abs(ax[1] - bx[1]) > 1e-6:
                s, o = (i, j) if rng.random() < 0.5 else (j, i)
                sy = ax[1] if s == i else bx[1]
                oy = bx[1] if s == i else ax[1]
                edges.append((s, "above" if sy < oy else "below", o))
    return edges


def predicate_holds(pred: str, subj_bbox, obj_bbox) -> bool:
    scx = (subj_bbox[0] + subj_bbox[2]) / 2
    scy = (subj_bbox[1] + subj_bbox[3]) / 2
    ocx = (obj_bbox[0] + obj_bbox[2]) / 2
    ocy = (obj_bbox[1] + obj_bbox[3]) / 2
    if pred == "left_of":
        return scx < ocx
    if pred == "right_of":
        return scx > ocx
    if pred == "above":
        return scy < ocy
    if pred == "below":
        return scy > ocy
    if pred == "inside":
        return _box_inside(subj_bbox, obj_bbox)
    if pred == "surrounding":
        return _box_inside(obj_bbox, subj_bbox)
    raise ValueError(f"unknown predicate {pred!r}")


def graph_from_params(params: SceneParams, spec: ToySpec, rng: np.random.Generator) -> SceneGraph:
    nodes = tuple(
        ObjectNode(id=f"o{i}", class_id=spec.class_id(obj.color, obj.shape), bbox=obj.bbox)
        for i, obj in enumerate(params.objects)
    )
    pred_index = {p: k for k, p in enumerate(spec.predicates)}
    edges = tuple(
        PredicateEdge(f"o{s}", f"o{o}", pred_index[p])
        for s, p, o in derive_edges(params.objects, spec, rng)
    )
    return SceneGraph(nodes, edges)


def scene_rng(spec: ToySpec, index: int) -> np.random.Generator:
    return rng_for(spec.seed, SCENE, index)


def generate_scene(spec: ToySpec, index: int) -> tuple[np.ndarray, SceneGraph, SceneParams]:
    """Deterministically build scene `index`: image in [0,1], graph, params."""
    rng = scene_rng(spec, index)
    params = sample_scene_params(spec, rng)
    image = render_scene_params(params, spec)
    graph = graph_from_params(params, spec, rng)
    return image, graph, params


def image_to_png(image: np.ndarray, path: Path) -> None:
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def png_to_image(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0


@dataclass
class Manifest:
    classes: list[str]
    predicates: list[str]
    image_size: int
    count: int
    seed: int
    spec_hash: str
    spec: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "classes": self.classes,
            "predicates": self.predicates,
            "image_size": self.image_size,
            "count": self.count,
            "seed": self.seed,
            "spec_hash": self.spec_hash,
            "spec": self.spec,
        }


def _spec_to_dict(spec: ToySpec) -> dict:
    return {
        "image_size": spec.image_size,
        "min_objects": spec.min_objects,
        "max_objects": spec.max_objects,
        "shapes": list(spec.shapes),
        "colors": list(spec.colors),
        "predicates": list(spec.predicates),
        "seed": spec.seed,
        "containment_prob": spec.containment_prob,
        "bg_amplitude": spec.bg_amplitude,
    }


def spec_from_dict(data: dict) -> ToySpec:
    return ToySpec(
        image_size=data["image_size"],
        min_objects=data["min_objects"],
        max_objects=data["max_objects"],
        shapes=tuple(data["shapes"]),
        colors=tuple(data["colors"]),
        predicates=tuple(data["predicates"]),
        seed=data["seed"],
        containment_prob=data["containment_prob"],
        bg_amplitude=data["bg_amplitude"],
    )


def emit_dataset(spec: ToySpec, n: int, out_dir: str | Path) -> Manifest:
    """Write n (image, scene) pairs plus manifest.json under out_dir."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    manifest = Manifest(
        classes=list(spec.classes),
        predicates=list(spec.predicates),
        image_size=spec.image_size,
        count=n,
        seed=spec.seed,
        spec_hash=spec.spec_hash(),
        spec=_spec_to_dict(spec),
    )
    for i in range(n):
        image, graph, _ = generate_scene(spec, i)
        image_to_png(image, out / "images" / f"{i:06d}.png")
        scene_json = canonical_json(graph_to_dict(graph, manifest.classes, manifest.predicates))
        (out / "scenes" / f"{i:06d}.json").write_text(scene_json)
    (out / "manifest.json").write_text(canonical_json(manifest.to_dict()))
    return manifest


class ToyDataset:
    """Loader for the emitted directory layout; validates the manifest hash."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        data = json.loads((self.root / "manifest.json").read_text())
        spec = spec_from_dict(data["spec"])
        if spec.spec_hash() != data["spec_hash"]:
            raise ValueError("manifest spec hash does not match its spec fields")
        self.spec = spec
        self.manifest = Manifest(
            classes=list(data["classes"]),
            predicates=list(data["predicates"]),
            image_size=data["image_size"],
            count=data["count"],
            seed=data["seed"],
            spec_hash=data["spec_hash"],
            spec=data["spec"],
        )

    def __len__(self) -> int:
        return self.manifest.count

    def image(self, index: int) -> np.ndarray:
        return png_to_image(self.root / "images" / f"{index:06d}.png")

    def graph(self, index: int) -> SceneGraph:
        data = json.loads((self.root / "scenes" / f"{index:06d}.json").read_text())
        return graph_from_dict(data, self.manifest.classes, self.manifest.predicates)

    def params(self, index: int) -> SceneParams:
        return sample_scene_params(self.spec, scene_rng(self.spec, index))
