"""Spatial scene graph over candidate instances.

Nodes are context objects (``CTX``, e.g. drawers, a lamp) and interactive
elements (``INT``, e.g. handles). Interactive nodes link to the context node
that contains them. The graph is serialised to a fixed JSON layout, drawn as a
schematic top-down map, and queried by the deterministic spatial resolver.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from .errors import ResolutionError, ValidationError
from .fusion import CandidatePool, frame_votes
from .geometry import project_points
from .memory import DepthFilterParams, SequenceStats, frame_quality_score
from .query import SpatialDescriptor
from .scene_io import PointCloud, SceneSequence, normalize_category

log = logging.getLogger(__name__)

CTX, INT = "CTX", "INT"
CONTAINMENT_MARGIN = 0.05
CROP_DILATION = 0.10


@dataclass(frozen=True)
class GraphNode:
    node_id: int
    kind: str
    label: str
    centroid: tuple
    aabb_min: tuple
    aabb_max: tuple
    parent_id: int | None = None
    point_indices: tuple = ()

    def __post_init__(self):
        if self.kind not in (CTX, INT):
            raise ValidationError(f"node kind must be CTX or INT, got {self.kind!r}")
        if self.kind == CTX and self.parent_id is not None:
            raise ValidationError("CTX nodes cannot have a parent")

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.centroid, dtype=np.float64)

    def to_dict(self):
        return {"id": self.node_id, "kind": self.kind, "label": self.label,
                "centroid": list(self.centroid),
                "aabb": {"min": list(self.aabb_min), "max": list(self.aabb_max)},
                "parent": self.parent_id, "indices": list(self.point_indices)}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["id"]), d["kind"], d["label"], tuple(float(x) for x in d["centroid"]),
                   tuple(float(x) for x in d["aabb"]["min"]), tuple(float(x) for x in d["aabb"]["max"]),
                   None if d["parent"] is None else int(d["parent"]),
                   tuple(int(i) for i in d.get("indices", ())))


@dataclass(frozen=True)
class SceneGraph:
    artifact_kind = "scene_graph"

    nodes: tuple
    up_axis: tuple = (0.0, 0.0, 1.0)
    scene_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        ids = [n.node_id for n in self.nodes]
        if ids != list(range(1, len(ids) + 1)):
            raise ValidationError("node ids must be 1..n in order")
        ctx_ids = {n.node_id for n in self.nodes if n.kind == CTX}
        for n in self.nodes:
            if n.parent_id is not None and n.parent_id not in ctx_ids:
                raise ValidationError(f"node {n.node_id} has invalid parent {n.parent_id}")

    def node(self, node_id: int) -> GraphNode:
        return self.nodes[node_id - 1]

    def int_nodes(self, label: str | None = None) -> list[GraphNode]:
        label = normalize_category(label) if label else None
        return [n for n in self.nodes if n.kind == INT and (label is None or n.label == label)]

    def ctx_nodes(self, label: str | None = None) -> list[GraphNode]:
        label = normalize_category(label) if label else None
        return [n for n in self.nodes if n.kind == CTX and (label is None or n.label == label)]

    def to_dict(self):
        return {"scene_id": self.scene_id, "up_axis": list(self.up_axis),
                "nodes": [n.to_dict() for n in self.nodes]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(GraphNode.from_dict(n) for n in d["nodes"]),
                   tuple(float(x) for x in d["up_axis"]), d["scene_id"])


def _contains(node: GraphNode, point: np.ndarray, margin: float) -> bool:
    lo = np.asarray(node.aabb_min) - margin
    hi = np.asarray(node.aabb_max) + margin
    return bool(np.all(point >= lo) and np.all(point <= hi))


def _volume(node: GraphNode) -> float:
    return float(np.prod(np.asarray(node.aabb_max) - np.asarray(node.aabb_min)))


def build_graph(int_candidates: CandidatePool, ctx_candidates: CandidatePool, labels,
                up_axis=(0.0, 0.0, 1.0), scene_id: str = "", extra_ctx: dict | None = None,
                margin: float = CONTAINMENT_MARGIN) -> SceneGraph:
    """One node per candidate; ``labels`` is ``(int_label, ctx_label)``.

    ``extra_ctx`` adds further context pools (e.g. a referenced object) keyed by
    label. Interactive nodes are parented only to context nodes of ``ctx_label``.
    """
    int_label, ctx_label = labels
    int_label = normalize_category(int_label)
    ctx_label = normalize_category(ctx_label) if ctx_label else None
    ctx_items = [(ctx_label or "object", c) for c in ctx_candidates]
    for label, pool in sorted((extra_ctx or {}).items()):
        ctx_items += [(normalize_category(label), c) for c in pool]
    ctx_items.sort(key=lambda lc: (lc[1].centroid, lc[0]))
    int_items = sorted(int_candidates, key=lambda c: c.centroid)

    nodes = []
    for i, (label, c) in enumerate(ctx_items, start=1):
        nodes.append(GraphNode(i, CTX, label, c.centroid, c.aabb_min, c.aabb_max, None, c.point_indices))
    parents = [n for n in nodes if ctx_label is None or n.label == ctx_label]
    for c in int_items:
        p = np.asarray(c.centroid)
        hits = [n for n in parents if _contains(n, p, margin)]
        parent = min(hits, key=lambda n: (_volume(n), n.node_id)).node_id if hits else None
        nodes.append(GraphNode(len(nodes) + 1, INT, int_label, c.centroid, c.aabb_min, c.aabb_max,
                               parent, c.point_indices))
    up = np.asarray(up_axis, dtype=np.float64)
    return SceneGraph(tuple(nodes), tuple(float(x) for x in up / np.linalg.norm(up)), scene_id)


# ---------------------------------------------------------------------------
# JSON for the selector


def _num(x: float) -> str:
    s = f"{x:.4f}"
    return "0.0000" if s == "-0.0000" else s


def _vec(v) -> str:
    return "[" + ", ".join(_num(float(x)) for x in v) + "]"


def serialize_graph(graph: SceneGraph) -> str:
    """Deterministic JSON of the graph (4-decimal coordinates, no point indices)."""
    lines = ["{", f'  "scene_id": {json.dumps(graph.scene_id)},', f'  "up_axis": {_vec(graph.up_axis)},']
    if not graph.nodes:
        lines.append('  "nodes": []')
    else:
        lines.append('  "nodes": [')
        for k, n in enumerate(graph.nodes):
            parent = "null" if n.parent_id is None else str(n.parent_id)
            item = (f'    {{"id": {n.node_id}, "kind": {json.dumps(n.kind)}, "label": {json.dumps(n.label)}, '
                    f'"centroid": {_vec(n.centroid)}, '
                    f'"aabb": {{"min": {_vec(n.aabb_min)}, "max": {_vec(n.aabb_max)}}}, "parent": {parent}}}')
            lines.append(item + ("," if k < len(graph.nodes) - 1 else ""))
        lines.append("  ]")
    lines.append("}")
    return "\n".join(lines) + "\n"


def parse_graph(text: str) -> SceneGraph:
    d = json.loads(text)
    nodes = tuple(GraphNode(int(n["id"]), n["kind"], n["label"], tuple(n["centroid"]),
                            tuple(n["aabb"]["min"]), tuple(n["aabb"]["max"]), n["parent"])
                  for n in d["nodes"])
    return SceneGraph(nodes, tuple(d["up_axis"]), d["scene_id"])


# ---------------------------------------------------------------------------
# top-down map


def ground_basis(up_axis) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal (lateral, forward) axes spanning the plane orthogonal to ``up_axis``."""
    up = np.asarray(up_axis, dtype=np.float64)
    up = up / np.linalg.norm(up)
    ref = np.array([1.0, 0.0, 0.0]) if abs(up[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = ref - up * (ref @ up)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(up, e1)
    return e1, e2


@dataclass
class _MapLayout:
    size: int
    points: np.ndarray  # canvas xy of sub-sampled cloud points
    rects: list = field(default_factory=list)  # (node, x0, y0, x1, y1)
    labels: list = field(default_factory=list)  # (node, tx, ty, leader or None)


def _layout(graph: SceneGraph, cloud: PointCloud | None, size: int, margin: float,
            max_points: int) -> _MapLayout:
    e1, e2 = ground_basis(graph.up_axis)
    basis = np.stack([e1, e2], axis=1)
    footprints = []
    for n in graph.nodes:
        lo, hi = np.asarray(n.aabb_min), np.asarray(n.aabb_max)
        corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        c2 = corners @ basis
        footprints.append((c2.min(axis=0), c2.max(axis=0)))
    pts2 = np.zeros((0, 2))
    if cloud is not None:
        stride = max(1, math.ceil(len(cloud) / max_points))
        pts2 = cloud.points[::stride] @ basis
    extent = [pts2] + [np.stack(f) for f in footprints]
    allp = np.concatenate(extent) if any(len(e) for e in extent) else np.zeros((1, 2))
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1e-6))
    scale = (size - 2 * margin) / span
    mid = (lo + hi) / 2.0

    def to_canvas(p):
        p = np.atleast_2d(p)
        x = size / 2.0 + (p[:, 0] - mid[0]) * scale
        y = size / 2.0 - (p[:, 1] - mid[1]) * scale
        return np.stack([x, y], axis=1)

    layout = _MapLayout(size, to_canvas(pts2) if len(pts2) else np.zeros((0, 2)))
    for n, (flo, fhi) in zip(graph.nodes, footprints):
        a, b = to_canvas(np.array([flo, fhi]))
        layout.rects.append((n, min(a[0], b[0]), min(a[1], b[1]), max(a[0], b[0]), max(a[1], b[1])))

    def overlaps(r, s):
        return r[1] < s[3] and s[1] < r[3] and r[2] < s[4] and s[2] < r[4]

    for k, r in enumerate(layout.rects):
        crowded = any(overlaps(r, s) for j, s in enumerate(layout.rects) if j != k)
        n, x0, y0, x1, y1 = r
        if crowded:
            # pull the label away from the cluster along a per-node fan, with a leader line
            ang = math.radians(200 + 37 * (n.node_id % 7))
            tx, ty = x0 + 28 * math.cos(ang), y0 + 28 * math.sin(ang) - 6
            layout.labels.append((n, tx, ty, (tx, ty, x0, y0)))
        else:
            layout.labels.append((n, x0, y0 - 4, None))
    return layout


_STROKE = {CTX: "#1f77b4", INT: "#d62728"}


def render_topdown(graph: SceneGraph, cloud: PointCloud | None = None, size: int = 1024,
                   margin: float = 48.0, max_points: int = 4000, stroke_width: float = 2.0) -> str:
    """Orthographic map along the up axis as a byte-deterministic SVG string."""
    lay = _layout(graph, cloud, size, margin, max_points)
    f = lambda x: f"{x:.1f}"  # noqa: E731
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">',
           f'<rect x="0" y="0" width="{size}" height="{size}" fill="#ffffff"/>',
           '<g fill="#9a9a9a">']
    out += [f'<circle cx="{f(x)}" cy="{f(y)}" r="1.2"/>' for x, y in lay.points]
    out.append("</g>")
    for n, x0, y0, x1, y1 in lay.rects:
        out.append(f'<rect x="{f(x0)}" y="{f(y0)}" width="{f(x1 - x0)}" height="{f(y1 - y0)}" '
                   f'fill="none" stroke="{_STROKE[n.kind]}" stroke-width="{stroke_width:g}"/>')
    for n, tx, ty, leader in lay.labels:
        if leader is not None:
            out.append(f'<line x1="{f(leader[0])}" y1="{f(leader[1])}" x2="{f(leader[2])}" '
                       f'y2="{f(leader[3])}" stroke="#333333" stroke-width="1"/>')
        out.append(f'<text x="{f(tx)}" y="{f(ty)}" font-family="monospace" font-size="16" '
                   f'fill="{_STROKE[n.kind]}">{n.node_id}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def rasterize_topdown(graph: SceneGraph, cloud: PointCloud | None = None, size: int = 1024,
                      margin: float = 48.0, max_points: int = 4000, stroke_width: int = 4) -> np.ndarray:
    """The same map drawn directly into an RGB array (for image attachments)."""
    lay = _layout(graph, cloud, size, margin, max_points)
    im = Image.new("RGB", (size, size), (255, 255, 255))
    draw = ImageDraw.Draw(im)
    for x, y in lay.points:
        draw.point((float(x), float(y)), fill=(154, 154, 154))
    for n, x0, y0, x1, y1 in lay.rects:
        draw.rectangle((x0, y0, max(x1, x0 + 1), max(y1, y0 + 1)), outline=_STROKE[n.kind], width=stroke_width)
    for n, tx, ty, leader in lay.labels:
        if leader is not None:
            draw.line(leader, fill=(51, 51, 51), width=1)
        draw.text((tx, ty - 12), str(n.node_id), fill=_STROKE[n.kind])
    return np.asarray(im)


# ---------------------------------------------------------------------------
# per-node crops


def _visible_points(scene: SceneSequence, frame, params: DepthFilterParams) -> np.ndarray:
    visible, _ = frame_votes(scene.cloud.points, frame, [], params)
    return visible


def extract_crops(graph: SceneGraph, scene: SceneSequence, params: DepthFilterParams = DepthFilterParams(),
                  weights=(0.5, 0.5), workers: int | None = None):
    """Best-view RGB crop per node.

    Returns ``(crops, warnings)``: ``crops`` maps node_id to an image; nodes that
    are visible in no frame are listed in ``warnings`` instead.
    """
    visible = {f.index: _visible_points(scene, f, params) for f in scene.frames}

    def crop_for(node: GraphNode):
        idx = np.asarray(node.point_indices, dtype=np.int64)
        views = []
        for f in scene.frames:
            vis = idx[np.isin(idx, visible[f.index])]
            if len(vis) == 0:
                continue
            proj = project_points(scene.cloud.points[vis], f.pose, f.intrinsics, indices=vis)
            if len(proj) == 0:
                continue
            views.append((f, proj))
        if not views:
            return None
        centroid = node.center
        stats = SequenceStats.from_distances([np.linalg.norm(f.pose.center - centroid) for f, _ in views])
        best = None
        for f, proj in views:
            h, w = f.shape
            col, row = proj.pixels(w, h)
            mask = np.zeros((h, w), dtype=bool)
            mask[row, col] = True
            s = frame_quality_score(mask, f, centroid, stats, scene.scene_id, weights)
            if best is None or s.score > best[0].score:
                best = (s, f, col, row)
        _, f, col, row = best
        h, w = f.shape
        bw, bh = col.max() - col.min() + 1, row.max() - row.min() + 1
        dx, dy = CROP_DILATION * bw, CROP_DILATION * bh
        x0 = int(max(0, math.floor(col.min() - dx)))
        x1 = int(min(w - 1, math.ceil(col.max() + dx)))
        y0 = int(max(0, math.floor(row.min() - dy)))
        y1 = int(min(h - 1, math.ceil(row.max() + dy)))
        return f.index, (x0, y0, x1, y1), f.rgb[y0:y1 + 1, x0:x1 + 1].copy()

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(crop_for, graph.nodes))
    else:
        results = [crop_for(n) for n in graph.nodes]
    crops, warnings = {}, []
    for n, r in zip(graph.nodes, results):
        if r is None:
            warnings.append({"node_id": n.node_id, "reason": "not visible in any frame"})
            log.warning("node %d is not visible in any frame; no crop", n.node_id)
        else:
            crops[n.node_id] = r[2]
    return crops, warnings


# ---------------------------------------------------------------------------
# deterministic spatial resolution


def _axis(graph: SceneGraph, direction: str) -> tuple[np.ndarray, bool]:
    """(axis, descending) such that sorting by projection yields rank 1 first."""
    up = np.asarray(graph.up_axis)
    e1, e2 = ground_basis(up)
    return {
        "top": (up, True), "bottom": (up, False),
        "left": (e1, False), "right": (e1, True),
        "front": (e2, False), "back": (e2, True),
    }[direction]


def _reference_nodes(graph: SceneGraph, label: str) -> list[GraphNode]:
    refs = graph.ctx_nodes(label)
    if not refs:
        raise ResolutionError(f"referenced object {label!r} is not in the graph")
    return refs


def resolve_spatial(graph: SceneGraph, descriptor: SpatialDescriptor | None, int_label: str) -> int:
    """Pick the interactive node matching ``descriptor``; returns its node_id."""
    cands = graph.int_nodes(int_label)
    if not cands:
        raise ResolutionError(f"no {int_label!r} node in the graph")
    kind = descriptor.kind if descriptor is not None else "none"

    if kind == "ordinal":
        axis, desc = _axis(graph, descriptor.direction)
        keyed = sorted(cands, key=lambda n: ((-1 if desc else 1) * float(n.center @ axis), n.node_id))
        k = descriptor.ordinal_rank
        if k > len(keyed):
            raise ResolutionError(f"rank {k} requested but only {len(keyed)} candidates")
        return keyed[k - 1].node_id

    if kind in ("relation", "nearest"):
        refs = _reference_nodes(graph, descriptor.reference_label)
        ref_pts = np.array([r.center for r in refs])

        def dist(n):
            return float(np.min(np.linalg.norm(ref_pts - n.center, axis=1)))

        pool = cands
        if kind == "relation" and descriptor.relation != "next_to":
            up = np.asarray(graph.up_axis)
            e1, _ = ground_basis(up)
            lat = lambda n: float(n.center @ e1)  # noqa: E731
            hgt = lambda n: float(n.center @ up)  # noqa: E731
            rule = {
                "left_of": lambda n: all(lat(n) < float(r.center @ e1) for r in refs),
                "right_of": lambda n: all(lat(n) > float(r.center @ e1) for r in refs),
                "above": lambda n: all(hgt(n) > float(r.center @ up) for r in refs),
                "below": lambda n: all(hgt(n) < float(r.center @ up) for r in refs),
            }[descriptor.relation]
            pool = [n for n in cands if rule(n)]
            if not pool:
                raise ResolutionError(f"no {int_label!r} node is {descriptor.relation} {descriptor.reference_label!r}")
        return min(pool, key=lambda n: (dist(n), n.node_id)).node_id

    if len(cands) > 1:
        log.warning("no spatial qualifier and %d candidates; taking the lowest node id", len(cands))
    return min(n.node_id for n in cands)
