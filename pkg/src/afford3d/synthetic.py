"""Seeded synthetic cabinet scenes with exact ground truth.

A scene is a set of axis-aligned boxes (floor, cabinet body, drawer fronts,
handle cuboids, a reference lamp, an optional occluder) seen by cameras on an
arc in front of the cabinet. Depth is ray-cast analytically, RGB is flat
colour per object, and the point cloud holds surface samples that at least one
camera actually observes (what a fused RGB-D reconstruction would contain).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .geometry import project_points
from .scene_io import (AffordanceAnnotation, CameraIntrinsics, Frame, PointCloud, Pose,
                       SceneSequence, load_annotations, load_scene, save_annotations, save_scene)

FACES = ("-x", "+x", "-y", "+y", "-z", "+z")
ORDINALS = ["first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth", "tenth"]

PALETTE = {
    "floor": (120, 110, 100), "cabinet": (170, 130, 90), "drawer": (200, 160, 110),
    "handle": (60, 60, 70), "lamp": (230, 220, 120), "box": (90, 140, 180),
}


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    label: str
    instance: int
    faces: tuple = FACES

    @property
    def center(self) -> np.ndarray:
        return (np.asarray(self.lo) + np.asarray(self.hi)) / 2.0

    def to_dict(self):
        return {"lo": list(self.lo), "hi": list(self.hi), "label": self.label,
                "instance": self.instance, "faces": list(self.faces)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["lo"]), tuple(d["hi"]), d["label"], int(d["instance"]), tuple(d["faces"]))


@dataclass(frozen=True)
class SyntheticSceneSpec:
    seed: int = 0
    scene_id: str | None = None
    n_drawers: int = 3
    cabinet_width: float = 0.60
    cabinet_depth: float = 0.45
    drawer_height: float = 0.26
    handle_size: tuple = (0.12, 0.03, 0.03)  # width (x), standoff (y), height (z)
    handle_offsets: tuple | None = None  # optional per-drawer lateral offsets of the handle centre
    lamp_side: str | None = None  # "left" | "right" | None (no lamp)
    lamp_drawer: int = 0  # lamp centre height aligned with this drawer (0 = top)
    occluder: tuple | None = None  # ((x0, y0, z0), (x1, y1, z1))
    n_frames: int = 24
    orbit_radius: float = 1.4
    orbit_heights: tuple = (0.35, 1.45)
    arc_degrees: float = 110.0
    image_size: tuple = (320, 240)
    focal: float = 300.0
    spacing: float = 0.01
    min_observations: int = 1

    @property
    def resolved_id(self) -> str:
        return self.scene_id or f"synth_{self.seed:04d}"


@dataclass(eq=False)
class SyntheticScene:
    spec: SyntheticSceneSpec
    scene: SceneSequence
    boxes: list
    point_instance: np.ndarray  # instance id per cloud point
    annotations: list
    queries: list = field(default_factory=list)
    _instance_maps: dict = field(default_factory=dict, repr=False)

    def instance_map(self, frame: Frame) -> np.ndarray:
        if frame.index not in self._instance_maps:
            _, ids = raycast(self.boxes, frame.pose, frame.intrinsics)
            self._instance_maps[frame.index] = ids
        return self._instance_maps[frame.index]

    def instances(self, label: str) -> list[Box]:
        return [b for b in self.boxes if b.label == label]

    def instance_points(self, instance: int) -> np.ndarray:
        return np.flatnonzero(self.point_instance == instance)


# ---------------------------------------------------------------------------
# cameras and ray casting


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return Pose(np.stack([right, down, fwd], axis=1), eye)


def pixel_rays(pose: Pose, intr: CameraIntrinsics, cols: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """World ray directions with unit camera-z component (ray parameter == camera depth)."""
    x = (cols - intr.cx) / intr.fx
    y = (rows - intr.cy) / intr.fy
    R = pose.rotation
    # written out elementwise so that a scalar re-implementation rounds identically
    return np.stack([R[k, 0] * x + R[k, 1] * y + R[k, 2] for k in range(3)], axis=-1)


def ray_box(origin: np.ndarray, dirs: np.ndarray, lo, hi) -> np.ndarray:
    """Entry parameter of each ray into the box (inf when missed)."""
    tmin = np.full(len(dirs), -np.inf)
    tmax = np.full(len(dirs), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        for k in range(3):
            d = dirs[:, k]
            t1 = (lo[k] - origin[k]) / d
            t2 = (hi[k] - origin[k]) / d
            near = np.where(d == 0, np.where((origin[k] >= lo[k]) & (origin[k] <= hi[k]), -np.inf, np.inf),
                            np.minimum(t1, t2))
            far = np.where(d == 0, np.where((origin[k] >= lo[k]) & (origin[k] <= hi[k]), np.inf, -np.inf),
                           np.maximum(t1, t2))
            tmin = np.maximum(tmin, near)
            tmax = np.minimum(tmax, far)
    hit = (tmin <= tmax) & (tmin > 0)
    return np.where(hit, tmin, np.inf)


def _screen_window(box: Box, pose: Pose, intr: CameraIntrinsics):
    lo, hi = box.lo, box.hi
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    cam = pose.world_to_camera(corners)
    if np.any(cam[:, 2] <= 1e-3):
        return 0, intr.width - 1, 0, intr.height - 1
    u = intr.fx * cam[:, 0] / cam[:, 2] + intr.cx
    v = intr.fy * cam[:, 1] / cam[:, 2] + intr.cy
    c0, c1 = max(0, int(math.floor(u.min())) - 1), min(intr.width - 1, int(math.ceil(u.max())) + 1)
    r0, r1 = max(0, int(math.floor(v.min())) - 1), min(intr.height - 1, int(math.ceil(v.max())) + 1)
    return c0, c1, r0, r1


def raycast(boxes, pose: Pose, intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Analytic depth (0 = no hit) and instance-id image (0 = background)."""
    h, w = intr.height, intr.width
    depth = np.full((h, w), np.inf)
    ids = np.zeros((h, w), dtype=np.int32)
    origin = pose.translation
    for box in boxes:
        c0, c1, r0, r1 = _screen_window(box, pose, intr)
        if c0 > c1 or r0 > r1:
            continue
        rows, cols = np.mgrid[r0:r1 + 1, c0:c1 + 1]
        dirs = pixel_rays(pose, intr, cols.ravel().astype(np.float64), rows.ravel().astype(np.float64))
        t = ray_box(origin, dirs, box.lo, box.hi).reshape(rows.shape)
        sub = depth[r0:r1 + 1, c0:c1 + 1]
        closer = t < sub
        sub[closer] = t[closer]
        ids[r0:r1 + 1, c0:c1 + 1][closer] = box.instance
    depth[~np.isfinite(depth)] = 0.0
    return depth, ids


# ---------------------------------------------------------------------------
# scene construction


def build_boxes(spec: SyntheticSceneSpec) -> list[Box]:
    W, D, dh = spec.cabinet_width, spec.cabinet_depth, spec.drawer_height
    n = spec.n_drawers
    top = n * dh + 0.04
    hw, hd, hh = spec.handle_size
    boxes = [
        Box((-1.0, -0.9, -0.02), (1.0, 0.8, 0.0), "floor", 1, ("+z",)),
        Box((-W / 2, 0.0, 0.0), (W / 2, D, top), "cabinet", 2),
    ]
    nid = 3
    centers = []
    for i in range(n):
        z1 = top - 0.02 - i * dh
        z0 = z1 - dh + 0.02
        boxes.append(Box((-W / 2 + 0.02, -0.02, z0), (W / 2 - 0.02, 0.0, z1), "drawer", nid))
        centers.append((z0 + z1) / 2)
        nid += 1
    offsets = spec.handle_offsets or (0.0,) * n
    for i, zc in enumerate(centers):
        xc = offsets[i]
        boxes.append(Box((xc - hw / 2, -0.02 - hd, zc - hh / 2), (xc + hw / 2, -0.02, zc + hh / 2), "handle", nid))
        nid += 1
    if spec.lamp_side is not None:
        zc = centers[spec.lamp_drawer]
        xc = (W / 2 + 0.25) * (1 if spec.lamp_side == "right" else -1)
        boxes.append(Box((xc - 0.08, 0.02, zc - 0.15), (xc + 0.08, 0.18, zc + 0.15), "lamp", nid))
        nid += 1
    if spec.occluder is not None:
        lo, hi = spec.occluder
        boxes.append(Box(tuple(lo), tuple(hi), "box", nid))
    return boxes


def validate_boxes(boxes) -> None:
    handles = [b for b in boxes if b.label == "handle"]
    for b in boxes:
        if not all(l < h for l, h in zip(b.lo, b.hi)):
            raise ValidationError(f"box {b.instance} ({b.label}) has non-positive extent")
    for i, a in enumerate(handles):
        for b in handles[i + 1:]:
            if all(a.lo[k] < b.hi[k] and b.lo[k] < a.hi[k] for k in range(3)):
                raise ValidationError(f"handles {a.instance} and {b.instance} overlap")
    solid = [b for b in boxes if b.label not in ("floor",)]
    for h in handles:
        for b in solid:
            if b is h or b.label in ("drawer", "cabinet"):
                continue
            if all(h.lo[k] < b.hi[k] and b.lo[k] < h.hi[k] for k in range(3)):
                raise ValidationError(f"handle {h.instance} intersects {b.label} {b.instance}")


def _sample_face(box: Box, face: str, spacing: float, rng: np.random.Generator) -> np.ndarray:
    axis = "xyz".index(face[1])
    other = [k for k in range(3) if k != axis]
    lo, hi = np.asarray(box.lo), np.asarray(box.hi)
    counts = [max(1, int(math.ceil((hi[k] - lo[k]) / spacing - 1e-9))) for k in other]
    steps = [(hi[k] - lo[k]) / c for k, c in zip(other, counts)]
    ga, gb = np.meshgrid(np.arange(counts[0]), np.arange(counts[1]), indexing="ij")
    ja = rng.uniform(-0.25, 0.25, ga.shape)
    jb = rng.uniform(-0.25, 0.25, gb.shape)
    pts = np.empty((ga.size, 3))
    pts[:, other[0]] = lo[other[0]] + (ga.ravel() + 0.5 + ja.ravel()) * steps[0]
    pts[:, other[1]] = lo[other[1]] + (gb.ravel() + 0.5 + jb.ravel()) * steps[1]
    pts[:, axis] = hi[axis] if face[0] == "+" else lo[axis]
    return pts


def _inside_other(points: np.ndarray, boxes, own: Box) -> np.ndarray:
    bad = np.zeros(len(points), dtype=bool)
    for b in boxes:
        if b is own:
            continue
        lo, hi = np.asarray(b.lo) - 1e-9, np.asarray(b.hi) + 1e-9
        bad |= np.all((points >= lo) & (points <= hi), axis=1)
    return bad


def _observations(points, inst, frames, id_maps, tol=0.01) -> np.ndarray:
    counts = np.zeros(len(points), dtype=np.int64)
    for f in frames:
        proj = project_points(points, f.pose, f.intrinsics)
        col, row = proj.pixels(f.intrinsics.width, f.intrinsics.height)
        seen = (id_maps[f.index][row, col] == inst[proj.index]) & \
               (np.abs(f.depth[row, col] - proj.z) < tol)
        counts[proj.index[seen]] += 1
    return counts


def _queries(spec: SyntheticSceneSpec, boxes, point_instance) -> list[dict]:
    handles = [b for b in boxes if b.label == "handle"]  # top to bottom
    n = len(handles)
    lamp = next((b for b in boxes if b.label == "lamp"), None)
    rng = np.random.default_rng(spec.seed + 7919)
    out = []

    def add(text, target, spatial_relation, kind):
        out.append({
            "query_id": f"{spec.resolved_id}_q{len(out)}", "text": text, "kind": kind,
            "target_instance": target.instance,
            "gt_indices": np.flatnonzero(point_instance == target.instance).tolist(),
            "parse": {"contextual_object": "drawer", "interactive_objects": ["handle"],
                      "functional_object_candidates": ["handle"], "action": "hook_pull",
                      "spatial_relation": spatial_relation},
        })

    r = int(rng.integers(2, n)) if n > 2 else 1  # never the bottom drawer
    add(f"pull the handle of the {ORDINALS[r - 1]} drawer from the top", handles[r - 1], "N/A", "ordinal")
    add("pull the handle of the first drawer from the bottom", handles[-1], "N/A", "ordinal")
    if lamp is not None:
        near = min(handles, key=lambda h: float(np.linalg.norm(h.center - lamp.center)))
        add("pull the drawer handle nearest to the lamp", near, ["drawer", "lamp"], "nearest")
        if spec.seed % 2 == 0:
            side = "left" if lamp.center[0] > 0 else "right"
            add(f"pull the drawer handle to the {side} of the lamp", near, ["drawer", "lamp"], "relation")
    while len(out) < 4 and n >= 1:
        k = len(out) % n
        add(f"pull the handle of the {ORDINALS[k]} drawer from the top", handles[k], "N/A", "ordinal")
    return out


def default_spec(seed: int, **overrides) -> SyntheticSceneSpec:
    """Seeded variation of the reference cabinet scene."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 5))
    params = dict(
        seed=seed, n_drawers=n,
        cabinet_width=float(rng.uniform(0.55, 0.7)),
        lamp_side="left" if rng.random() < 0.5 else "right",
        lamp_drawer=int(rng.integers(0, n)),
        orbit_radius=float(rng.uniform(1.3, 1.5)),
    )
    params.update(overrides)
    return SyntheticSceneSpec(**params)


def generate_synthetic_scene(spec: SyntheticSceneSpec) -> SyntheticScene:
    """Render frames, sample the cloud and emit annotations and queries for ``spec``."""
    if spec.n_drawers < 1 or spec.n_frames < 1 or spec.spacing <= 0:
        raise ValidationError("synthetic spec needs >= 1 drawer, >= 1 frame and positive spacing")
    boxes = build_boxes(spec)
    validate_boxes(boxes)
    rng = np.random.default_rng(spec.seed)
    w, h = spec.image_size
    intr = CameraIntrinsics(spec.focal, spec.focal, (w - 1) / 2.0, (h - 1) / 2.0, w, h)
    cab = next(b for b in boxes if b.label == "cabinet")
    target = np.array([0.0, 0.0, cab.hi[2] * 0.5])

    colors = {b.instance: np.asarray(PALETTE.get(b.label, (128, 128, 128)), dtype=np.uint8) for b in boxes}
    lut = np.zeros((max(colors) + 1, 3), dtype=np.uint8)
    for k, c in colors.items():
        lut[k] = c

    frames, id_maps = [], {}
    half = math.radians(spec.arc_degrees) / 2
    lo_h, hi_h = spec.orbit_heights
    for i in range(spec.n_frames):
        a = -half + (2 * half) * (i / max(1, spec.n_frames - 1))
        height = lo_h + (hi_h - lo_h) * (0.5 + 0.5 * math.sin(2 * math.pi * 2.5 * i / spec.n_frames))
        radius = spec.orbit_radius * (1.0 + 0.05 * float(rng.uniform(-1, 1)))
        eye = target + np.array([radius * math.sin(a), -radius * math.cos(a), 0.0])
        eye[2] = height
        pose = look_at(eye, target)
        depth, ids = raycast(boxes, pose, intr)
        depth = depth.astype(np.float32).astype(np.float64)
        frames.append(Frame(i, lut[ids], depth, intr, pose))
        id_maps[i] = ids

    pts, inst = [], []
    for b in boxes:
        for face in b.faces:
            p = _sample_face(b, face, spec.spacing, rng)
            p = p[~_inside_other(p, boxes, b)]
            pts.append(p)
            inst.append(np.full(len(p), b.instance, dtype=np.int64))
    points = np.concatenate(pts)
    point_instance = np.concatenate(inst)
    # float32 round so the on-disk PLY reproduces the cloud exactly
    points = points.astype(np.float32).astype(np.float64)
    seen = _observations(points, point_instance, frames, id_maps) >= spec.min_observations
    points, point_instance = points[seen], point_instance[seen]
    cloud_colors = lut[point_instance]

    scene = SceneSequence(spec.resolved_id, frames, PointCloud(points, cloud_colors))
    annotations = [AffordanceAnnotation("handle", np.flatnonzero(point_instance == b.instance).tolist(),
                                        scene.scene_id)
                   for b in boxes if b.label == "handle"]
    annotations = [a for a in annotations if a.point_indices]
    queries = _queries(spec, boxes, point_instance)
    return SyntheticScene(spec, scene, boxes, point_instance, annotations, queries, id_maps)


# ---------------------------------------------------------------------------
# disk


def save_synthetic(synth: SyntheticScene, root) -> Path:
    """Write the scene directory plus annotations, queries, per-query GT and the mock scenario."""
    root = Path(root)
    save_scene(synth.scene, root, depth_unit="m")
    save_annotations(root / "annotations.json", synth.annotations)
    queries = [{"query_id": q["query_id"], "text": q["text"]} for q in synth.queries]
    (root / "queries.json").write_text(json.dumps(queries, indent=1) + "\n")
    gt = {q["query_id"]: q["gt_indices"] for q in synth.queries}
    (root / "gt.json").write_text(json.dumps(gt, sort_keys=True) + "\n")
    scenario = {"scene_id": synth.scene.scene_id, "spec": asdict(synth.spec),
                "boxes": [b.to_dict() for b in synth.boxes],
                "point_instance": synth.point_instance.tolist(), "queries": synth.queries}
    (root / "scenario.json").write_text(json.dumps(scenario, sort_keys=True) + "\n")
    return root


def load_synthetic(root) -> SyntheticScene:
    root = Path(root)
    scene = load_scene(root)
    doc = json.loads((root / "scenario.json").read_text())
    spec_d = doc["spec"]
    for key in ("handle_size", "orbit_heights", "image_size"):
        spec_d[key] = tuple(spec_d[key])
    if spec_d.get("handle_offsets") is not None:
        spec_d["handle_offsets"] = tuple(spec_d["handle_offsets"])
    if spec_d.get("occluder") is not None:
        spec_d["occluder"] = tuple(tuple(c) for c in spec_d["occluder"])
    boxes = [Box.from_dict(b) for b in doc["boxes"]]
    annotations = load_annotations(root / "annotations.json", scene.scene_id, len(scene.cloud))
    return SyntheticScene(SyntheticSceneSpec(**spec_d), scene, boxes,
                          np.asarray(doc["point_instance"], dtype=np.int64), annotations, doc["queries"])
