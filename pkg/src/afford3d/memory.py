"""Cross-scene affordance memory.

For every annotated category the bank stores up to ``k_recall`` overlay images
(annotated region filled green over the source RGB) taken from the best views
across all source scenes. Views are ranked by a frame quality score mixing how
central the projected region is and how close the camera is to it.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ContractViolation, LeakageError, ValidationError
from .geometry import depth_residuals, project_points, valid_depth
from .scene_io import (AffordanceAnnotation, Frame, SceneSequence, dumps_artifact,
                       loads_artifact, normalize_category)

log = logging.getLogger(__name__)

OVERLAY_COLOR = (0, 255, 0)
OVERLAY_ALPHA = 0.5


@dataclass(frozen=True)
class DepthFilterParams:
    k: float = 3.0
    tau_min: float = 0.05

    def __post_init__(self):
        if not (self.k > 0 and self.tau_min > 0):
            raise ValidationError("depth filter needs k > 0 and tau_min > 0")


def depth_consistency_mask(residuals, params: DepthFilterParams = DepthFilterParams()) -> np.ndarray:
    """Boolean keep-mask: ``|r - median| < max(tau_min, k * MAD)``."""
    r = np.asarray(residuals, dtype=np.float64)
    if r.size == 0:
        return np.zeros(0, dtype=bool)
    med = np.median(r)
    dev = np.abs(r - med)
    tau = max(params.tau_min, params.k * float(np.median(dev)))
    return dev < tau


def depth_consistency_filter(point_index, residuals,
                             params: DepthFilterParams = DepthFilterParams()) -> np.ndarray:
    """Point indices whose depth residual survives the MAD filter."""
    point_index = np.asarray(point_index, dtype=np.int64)
    return point_index[depth_consistency_mask(residuals, params)]


# ---------------------------------------------------------------------------
# frame scoring


@dataclass(frozen=True)
class FrameScore:
    scene_id: str
    frame_index: int
    centrality: float
    proximity: float
    score: float

    @property
    def sort_key(self):
        return (-self.score, self.scene_id, self.frame_index)


@dataclass(frozen=True)
class SequenceStats:
    """Camera-to-region distance range over the visible frames of one sequence."""

    min_distance: float
    max_distance: float

    @classmethod
    def from_distances(cls, distances) -> "SequenceStats":
        d = np.asarray(distances, dtype=np.float64)
        return cls(float(d.min()), float(d.max()))


def mask_centrality(mask: np.ndarray) -> float:
    rows, cols = np.nonzero(mask)
    h, w = mask.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    half_diag = float(np.hypot(cx, cy)) or 1.0
    d = float(np.hypot(cols.mean() - cx, rows.mean() - cy))
    return float(np.clip(1.0 - d / half_diag, 0.0, 1.0))


def proximity_score(distance: float, stats: SequenceStats) -> float:
    lo, hi = 1.0 / stats.max_distance, 1.0 / stats.min_distance
    if hi - lo <= 0:
        return 1.0
    return float(np.clip((1.0 / distance - lo) / (hi - lo), 0.0, 1.0))


def frame_quality_score(mask: np.ndarray, frame: Frame, centroid_3d, stats: SequenceStats,
                        scene_id: str = "", weights=(0.5, 0.5)) -> FrameScore:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ContractViolation("frame_quality_score needs a non-empty mask")
    centrality = mask_centrality(mask)
    distance = float(np.linalg.norm(frame.pose.center - np.asarray(centroid_3d, dtype=np.float64)))
    proximity = proximity_score(max(distance, 1e-9), stats)
    score = float(np.clip(weights[0] * centrality + weights[1] * proximity, 0.0, 1.0))
    return FrameScore(scene_id, int(frame.index), centrality, proximity, score)


def select_top_k(scored, k: int) -> list[FrameScore]:
    """Best ``k`` scores pooled over every scene; ties go to (scene_id, frame_index) ascending."""
    if k < 1:
        raise ContractViolation(f"k must be >= 1, got {k}")
    return sorted(scored, key=lambda s: s.sort_key)[:k]


# ---------------------------------------------------------------------------
# masks


def _hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain on integer points, counter-clockwise, no collinear vertices."""
    pts = sorted(set(map(tuple, points.tolist())))
    if len(pts) <= 2:
        return np.asarray(pts, dtype=np.int64)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.asarray(lower[:-1] + upper[:-1], dtype=np.int64)


def convex_hull_fill(pixels, shape: tuple[int, int]) -> np.ndarray:
    """Rasterise the convex hull (boundary inclusive) of integer-rounded ``(u, v)`` pixels.

    Fewer than three distinct pixels, or collinear input, falls back to the
    segment through them dilated by one pixel.
    """
    pix = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if len(pix) == 0:
        raise ContractViolation("convex_hull_fill needs at least one pixel")
    h, w = shape
    pts = np.floor(pix + 0.5).astype(np.int64)
    hull = _hull(pts)
    mask = np.zeros((h, w), dtype=bool)

    if len(hull) <= 2:
        a, b = hull[0], hull[-1]
        n = int(np.abs(b - a).max()) + 1
        t = np.linspace(0.0, 1.0, n)
        seg = np.floor(a[None, :] + t[:, None] * (b - a)[None, :] + 0.5).astype(np.int64)
        ok = (seg[:, 0] >= 0) & (seg[:, 0] < w) & (seg[:, 1] >= 0) & (seg[:, 1] < h)
        mask[seg[ok, 1], seg[ok, 0]] = True
        return ndimage.binary_dilation(mask, structure=np.ones((3, 3), dtype=bool))

    u0, v0 = max(hull[:, 0].min(), 0), max(hull[:, 1].min(), 0)
    u1, v1 = min(hull[:, 0].max(), w - 1), min(hull[:, 1].max(), h - 1)
    if u0 > u1 or v0 > v1:
        return mask
    vv, uu = np.mgrid[v0:v1 + 1, u0:u1 + 1]
    inside = np.ones(uu.shape, dtype=bool)
    for i in range(len(hull)):
        a, b = hull[i], hull[(i + 1) % len(hull)]
        # integer cross product keeps the boundary test exact
        inside &= (b[0] - a[0]) * (vv - a[1]) - (b[1] - a[1]) * (uu - a[0]) >= 0
    mask[v0:v1 + 1, u0:u1 + 1] = inside
    return mask


def render_overlay(rgb: np.ndarray, mask: np.ndarray, color=OVERLAY_COLOR) -> np.ndarray:
    """Blend ``color`` over ``rgb`` at 50% opacity inside ``mask``."""
    out = rgb.copy()
    blended = (rgb.astype(np.uint16) + np.asarray(color, dtype=np.uint16) + 1) // 2
    out[mask] = blended[mask].astype(np.uint8)
    return out


# ---------------------------------------------------------------------------
# bank


@dataclass(frozen=True, eq=False)
class MemoryExemplar:
    category: str
    scene_id: str
    frame_index: int
    overlay_image: np.ndarray
    mask: np.ndarray
    score: FrameScore

    def __eq__(self, other):
        if not isinstance(other, MemoryExemplar):
            return NotImplemented
        return (self.category == other.category and self.scene_id == other.scene_id
                and self.frame_index == other.frame_index and self.score == other.score
                and np.array_equal(self.overlay_image, other.overlay_image)
                and np.array_equal(self.mask, other.mask))

    __hash__ = None

    @property
    def file_stem(self) -> str:
        return f"{self.category}/{self.scene_id}_{self.frame_index}"


@dataclass(frozen=True)
class BankManifest:
    """JSON-serialisable description of a bank (everything except pixels)."""

    artifact_kind = "memory_bank_manifest"

    k_recall: int
    source_scene_ids: tuple
    params: dict
    categories: dict  # category -> tuple of exemplar metadata dicts, in rank order

    def to_dict(self):
        return {
            "k_recall": self.k_recall,
            "source_scene_ids": list(self.source_scene_ids),
            "params": dict(self.params),
            "categories": {c: [dict(e) for e in v] for c, v in self.categories.items()},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["k_recall"]), tuple(d["source_scene_ids"]), dict(d["params"]),
                   {c: tuple(v) for c, v in d["categories"].items()})

    def __eq__(self, other):
        if not isinstance(other, BankManifest):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None


@dataclass(eq=False)
class MemoryBank:
    entries: dict = field(default_factory=dict)
    k_recall: int = 20
    source_scene_ids: frozenset = frozenset()
    params: DepthFilterParams = DepthFilterParams()

    def __post_init__(self):
        self.source_scene_ids = frozenset(self.source_scene_ids)
        for cat, items in self.entries.items():
            if len(items) > self.k_recall:
                raise ValidationError(f"category {cat!r} holds {len(items)} > k_recall exemplars")
            keys = [e.score.sort_key for e in items]
            if keys != sorted(keys):
                raise ValidationError(f"category {cat!r} exemplars are not in rank order")

    @property
    def categories(self) -> list[str]:
        return sorted(self.entries)

    def recall(self, interaction_label: str) -> list[MemoryExemplar]:
        return recall(self, interaction_label)

    def check_separation(self, target_scene_id: str) -> None:
        """Refuse to serve a target scene that contributed to the bank."""
        if target_scene_id in self.source_scene_ids:
            raise LeakageError(target_scene_id)

    def manifest(self) -> BankManifest:
        cats = {}
        for cat in self.categories:
            cats[cat] = tuple(
                {"scene_id": e.scene_id, "frame_index": e.frame_index,
                 "centrality": e.score.centrality, "proximity": e.score.proximity,
                 "score": e.score.score, "overlay": e.file_stem + ".png",
                 "mask": e.file_stem + "_mask.png"}
                for e in self.entries[cat])
        params = {"k": self.params.k, "tau_min": self.params.tau_min}
        return BankManifest(self.k_recall, tuple(sorted(self.source_scene_ids)), params, cats)

    def __eq__(self, other):
        if not isinstance(other, MemoryBank):
            return NotImplemented
        return (self.manifest() == other.manifest()
                and all(a == b for c in self.entries for a, b in zip(self.entries[c], other.entries[c])))

    __hash__ = None


def recall(bank: MemoryBank, interaction_label: str) -> list[MemoryExemplar]:
    """Exact (normalised) category match; unseen categories give ``[]``."""
    if not interaction_label or not interaction_label.strip():
        raise ContractViolation("interaction label must be non-empty")
    return list(bank.entries.get(normalize_category(interaction_label), []))


def find_visible_frames(annotation: AffordanceAnnotation, scene: SceneSequence) -> list[int]:
    """Frames where at least one annotated point lands in-bounds on a valid depth pixel."""
    pts = scene.cloud.points[annotation.indices]
    out = []
    for frame in scene.frames:
        proj = project_points(pts, frame.pose, frame.intrinsics)
        if len(proj) == 0:
            continue
        col, row = proj.pixels(frame.intrinsics.width, frame.intrinsics.height)
        if valid_depth(frame.depth[row, col]).any():
            out.append(frame.index)
    return out


@dataclass(frozen=True, eq=False)
class _FrameView:
    frame: Frame
    mask: np.ndarray
    centroid: np.ndarray


def _category_view(frame: Frame, cloud_points: np.ndarray, instances: list[np.ndarray],
                   params: DepthFilterParams) -> _FrameView | None:
    """Filtered, hull-filled mask of one category in one frame (None if nothing survives)."""
    all_idx = np.concatenate(instances)
    proj = project_points(cloud_points[all_idx], frame.pose, frame.intrinsics, indices=all_idx)
    if len(proj) == 0:
        return None
    idx, res = depth_residuals(proj, frame.depth)
    if len(idx) == 0:
        return None
    kept = np.unique(depth_consistency_filter(idx, res, params))
    if len(kept) == 0:
        return None
    shape = frame.shape
    keep_proj = proj.subset(np.isin(proj.index, kept))
    mask = np.zeros(shape, dtype=bool)
    for inst in instances:
        sel = np.isin(keep_proj.index, inst)
        if sel.any():
            mask |= convex_hull_fill(np.stack([keep_proj.u[sel], keep_proj.v[sel]], axis=1), shape)
    if not mask.any():
        return None
    return _FrameView(frame, mask, cloud_points[kept].mean(axis=0))


def build_memory_bank(annotations, scenes: dict, params: DepthFilterParams = DepthFilterParams(),
                      k: int = 20, weights=(0.5, 0.5), workers: int | None = None) -> MemoryBank:
    """Build a bank from source-scene annotations.

    ``scenes`` maps scene_id to :class:`SceneSequence`; every annotation's scene
    must be present. Categories whose region never survives the depth filter are
    left out of the bank.
    """
    grouped: dict[str, dict[str, list[np.ndarray]]] = {}
    for ann in annotations:
        if ann.scene_id not in scenes:
            raise ValidationError(f"annotation references unknown scene {ann.scene_id!r}")
        n = len(scenes[ann.scene_id].cloud)
        if len(ann.point_indices) and ann.point_indices[-1] >= n:
            raise ValidationError(f"annotation index out of range for scene {ann.scene_id!r}")
        if len(ann.point_indices):
            grouped.setdefault(ann.category, {}).setdefault(ann.scene_id, []).append(ann.indices)

    entries = {}
    pool = ThreadPoolExecutor(max_workers=workers) if workers and workers > 1 else None
    try:
        for category in sorted(grouped):
            views: dict[tuple[str, int], _FrameView] = {}
            scored: list[FrameScore] = []
            for scene_id in sorted(grouped[category]):
                scene = scenes[scene_id]
                instances = grouped[category][scene_id]
                visible = set()
                for inst in instances:
                    visible.update(find_visible_frames(
                        AffordanceAnnotation(category, inst.tolist(), scene_id), scene))
                frames = [f for f in scene.frames if f.index in visible]
                fn = lambda f: _category_view(f, scene.cloud.points, instances, params)  # noqa: E731
                results = list(pool.map(fn, frames)) if pool else [fn(f) for f in frames]
                scene_views = [v for v in results if v is not None]
                if not scene_views:
                    continue
                dists = [np.linalg.norm(v.frame.pose.center - v.centroid) for v in scene_views]
                stats = SequenceStats.from_distances(dists)
                for v in scene_views:
                    s = frame_quality_score(v.mask, v.frame, v.centroid, stats, scene_id, weights)
                    scored.append(s)
                    views[(scene_id, v.frame.index)] = v
            if not scored:
                log.warning("category %r has no surviving frames; left out of the bank", category)
                continue
            exemplars = []
            for s in select_top_k(scored, k):
                v = views[(s.scene_id, s.frame_index)]
                exemplars.append(MemoryExemplar(category, s.scene_id, s.frame_index,
                                                render_overlay(v.frame.rgb, v.mask), v.mask, s))
            entries[category] = exemplars
    finally:
        if pool:
            pool.shutdown()
    source = {a.scene_id for a in annotations}
    return MemoryBank(entries, k, frozenset(source), params)


def save_bank(bank: MemoryBank, directory) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for cat, items in bank.entries.items():
        (root / cat).mkdir(exist_ok=True)
        for e in items:
            Image.fromarray(e.overlay_image).save(root / (e.file_stem + ".png"), format="PNG")
            Image.fromarray(e.mask.astype(np.uint8) * 255).save(root / (e.file_stem + "_mask.png"),
                                                                format="PNG")
    (root / "bank.json").write_text(dumps_artifact(bank.manifest()))
    return root


def load_bank(directory) -> MemoryBank:
    root = Path(directory)
    manifest = loads_artifact((root / "bank.json").read_text(), root / "bank.json")
    entries = {}
    for cat, items in manifest.categories.items():
        exemplars = []
        for meta in items:
            with Image.open(root / meta["overlay"]) as im:
                overlay = np.asarray(im.convert("RGB"), dtype=np.uint8)
            with Image.open(root / meta["mask"]) as im:
                mask = np.asarray(im) > 0
            score = FrameScore(meta["scene_id"], int(meta["frame_index"]), float(meta["centrality"]),
                               float(meta["proximity"]), float(meta["score"]))
            exemplars.append(MemoryExemplar(cat, meta["scene_id"], int(meta["frame_index"]),
                                            overlay, mask, score))
        entries[cat] = exemplars
    params = DepthFilterParams(**manifest.params)
    return MemoryBank(entries, manifest.k_recall, frozenset(manifest.source_scene_ids), params)


def read_bank_sources(directory) -> frozenset:
    """Source scene ids of a saved bank without decoding any images."""
    doc = json.loads((Path(directory) / "bank.json").read_text())
    return frozenset(doc["data"]["source_scene_ids"])
