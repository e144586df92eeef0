"""Deterministic stand-ins for the model roles.

The oracle mocks answer from a synthetic scene's exact geometry: instance-id
images are ray-cast from each frame's pose, so boxes and masks are ground
truth by construction. The replay mock returns recorded raw responses and runs
them through the same parsers as the HTTP backends.
"""

from __future__ import annotations

import hashlib
import json
import threading
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..errors import BackendError, ContractViolation
from ..query import ParsedQuery, parse_query
from ..scene_io import Frame
from ..synthetic import SyntheticScene, load_synthetic, raycast
from .base import (Backends, BoundingBox2D, GroundingRequest, SelectionRequest, check_positive,
                   parse_grounding_response, parse_selection_response)


def _stable_int(*parts) -> int:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


class _InstanceMaps:
    """Thread-safe cache of ray-cast instance-id images keyed by frame index."""

    def __init__(self, synth: SyntheticScene):
        self.synth = synth
        self._cache: dict[int, np.ndarray] = {}
        self._lock = threading.Lock()

    def __call__(self, frame: Frame) -> np.ndarray:
        with self._lock:
            ids = self._cache.get(frame.index)
        if ids is None:
            _, ids = raycast(self.synth.boxes, frame.pose, frame.intrinsics)
            with self._lock:
                self._cache[frame.index] = ids
        return ids


def _pixel_bbox(mask: np.ndarray):
    rows, cols = np.nonzero(mask)
    return int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max())


class OracleGrounder:
    """Visible GT instances of the label as positive boxes, their mount as the negative.

    Positive boxes are the instance's pixel bbox grown outward by 0-2 px per side
    (deterministic per scene, frame and instance).
    """

    def __init__(self, synth: SyntheticScene, maps: _InstanceMaps | None = None, jitter: int = 2):
        self.synth = synth
        self.maps = maps or _InstanceMaps(synth)
        self.jitter = jitter

    def _companion(self, box):
        touching = []
        for other in self.synth.boxes:
            if other is box or other.label in (box.label, "floor"):
                continue
            gap = max(max(other.lo[k] - box.hi[k], box.lo[k] - other.hi[k]) for k in range(3))
            if gap <= 1e-9:
                vol = float(np.prod(np.subtract(other.hi, other.lo)))
                touching.append((vol, other.instance, other))
        return min(touching)[2] if touching else None

    def ground(self, request: GroundingRequest) -> list[BoundingBox2D]:
        frame = request.query_frame
        ids = self.maps(frame)
        h, w = ids.shape
        out = []
        for box in self.synth.instances(request.interaction_label):
            mask = ids == box.instance
            if not mask.any():
                continue
            x0, y0, x1, y1 = _pixel_bbox(mask)
            r = _stable_int(request.scene_id, frame.index, box.instance)
            grow = [(r >> (2 * k)) % (self.jitter + 1) for k in range(4)]
            x0, y0 = max(0, x0 - grow[0]), max(0, y0 - grow[1])
            x1, y1 = min(w - 1, x1 + grow[2]), min(h - 1, y1 + grow[3])
            if x1 == x0:
                x1, x0 = (x1 + 1, x0) if x1 < w - 1 else (x1, x0 - 1)
            if y1 == y0:
                y1, y0 = (y1 + 1, y0) if y1 < h - 1 else (y1, y0 - 1)
            pos = BoundingBox2D(x0, y0, x1, y1, 1)
            out.append(pos)
            if not request.adversarial:
                continue
            neg = None
            mount = self._companion(box)
            if mount is not None and (ids == mount.instance).any():
                mx0, my0, mx1, my1 = _pixel_bbox(ids == mount.instance)
                if mx0 < mx1 and my0 < my1:
                    neg = BoundingBox2D(mx0, my0, mx1, my1, 0)
            if neg is None:
                neg = BoundingBox2D(max(0, x0 - 4), max(0, y0 - 4), min(w - 1, x1 + 4), min(h - 1, y1 + 4), 0)
            out.append(neg)
        return out


class OracleSegmenter:
    """GT instance masks; ``noise=True`` adds one spurious ring mask per frame to text queries."""

    def __init__(self, synth: SyntheticScene, maps: _InstanceMaps | None = None, noise: bool = False,
                 ring_px: int = 6, min_box_iou: float = 0.25):
        self.synth = synth
        self.maps = maps or _InstanceMaps(synth)
        self.noise = noise
        self.ring_px = ring_px
        self.min_box_iou = min_box_iou

    def segment_by_text(self, frame: Frame, label: str) -> list[np.ndarray]:
        if not label or not label.strip():
            raise ContractViolation("segmentation label must be non-empty")
        ids = self.maps(frame)
        masks = [ids == b.instance for b in self.synth.instances(label.strip().lower())]
        masks = [m for m in masks if m.any()]
        if self.noise and masks:
            union = np.logical_or.reduce(masks)
            grown = ndimage.binary_dilation(union, np.ones((3, 3), bool), iterations=self.ring_px)
            ring = grown & ~union & (frame.depth > 0)
            if ring.any():
                masks.append(ring)
        return masks

    def segment_by_box(self, frame: Frame, box: BoundingBox2D) -> np.ndarray:
        check_positive(box)
        ids = self.maps(frame)
        h, w = ids.shape
        if not box.within(w, h):
            raise ContractViolation(f"box {box.as_list()} outside the {w}x{h} image")
        rows, cols = np.mgrid[0:h, 0:w]
        inside = (cols >= box.x_min) & (cols <= box.x_max) & (rows >= box.y_min) & (rows <= box.y_max)
        best, best_iou = None, self.min_box_iou
        for inst in np.unique(ids[inside]):
            if inst == 0:
                continue
            x0, y0, x1, y1 = _pixel_bbox(ids == inst)
            if x0 == x1 or y0 == y1:
                continue
            iou = box.iou(BoundingBox2D(x0, y0, x1, y1))
            if iou > best_iou or (iou == best_iou and best is not None and inst < best):
                best, best_iou = int(inst), iou
        if best is None:
            return np.zeros((h, w), dtype=bool)
        return inside & (ids == best)


class OracleSelector:
    """Answers with the INT node whose centroid is closest to the GT target of the instruction."""

    def __init__(self, synth: SyntheticScene):
        self.synth = synth

    def select(self, request: SelectionRequest, n_candidates: int) -> int:
        if n_candidates < 1:
            raise ContractViolation("selection needs at least one candidate")
        query = next((q for q in self.synth.queries if q["text"] == request.instruction), None)
        if query is None:
            raise BackendError(f"oracle has no ground truth for {request.instruction!r}")
        gt = self.synth.scene.cloud.points[np.asarray(query["gt_indices"], dtype=np.int64)].mean(axis=0)
        nodes = json.loads(request.graph_json)["nodes"]
        allowed = request.affordance_nodes()[:n_candidates]
        if not allowed:
            raise BackendError("graph has no affordance nodes")
        by_id = {n["id"]: np.asarray(n["centroid"]) for n in nodes}
        return min(allowed, key=lambda i: (float(np.linalg.norm(by_id[i] - gt)), i))


def format_stage1(parse: dict, text: str) -> str:
    """Stage-1 reply lines for a recorded parse (the format a well-behaved model returns)."""
    rel = parse.get("spatial_relation", "N/A")
    if isinstance(rel, (list, tuple)):
        rel = f"[{rel[0]}, {rel[1]}]"
    return "\n".join([
        parse.get("contextual_object") or "None",
        ", ".join(parse["interactive_objects"]),
        ", ".join(parse.get("functional_object_candidates", [])),
        parse["action"],
        rel,
        text,
    ])


def _format_parsed(p: ParsedQuery) -> str:
    rel = "N/A"
    if p.spatial.reference_label:
        rel = [p.context_label or "None", p.spatial.reference_label]
    return format_stage1({"contextual_object": p.context_label,
                          "interactive_objects": [p.interaction_label, *p.functional_candidates],
                          "functional_object_candidates": list(p.functional_candidates),
                          "action": p.action.value, "spatial_relation": rel}, p.original_prompt)


class OracleLanguageModel:
    """Stage-1 replies from the scenario's recorded parses; keyword parse for unknown text."""

    def __init__(self, synth: SyntheticScene | None = None):
        self.parses = {q["text"]: q["parse"] for q in (synth.queries if synth else [])}

    def complete(self, system_prompt: str, text: str) -> str:
        if text in self.parses:
            return format_stage1(self.parses[text], text)
        return _format_parsed(parse_query(text))


class ReplayBackend:
    """Recorded raw replies, keyed by request, parsed like live ones.

    File layout::

        {"language": {"<text>": "<raw>"},
         "grounding": {"<scene>|<frame>|<label>": "<raw>"},
         "selection": {"<scene>|<instruction>": "<raw>"}}

    Segmentation is delegated to ``segmenter`` when given.
    """

    def __init__(self, records: dict, segmenter=None):
        self.records = {k: dict(records.get(k, {})) for k in ("language", "grounding", "selection")}
        self.segmenter = segmenter

    @classmethod
    def from_file(cls, path, segmenter=None) -> "ReplayBackend":
        return cls(json.loads(Path(path).read_text()), segmenter)

    def _lookup(self, role: str, key: str) -> str:
        try:
            return self.records[role][key]
        except KeyError:
            raise BackendError(f"no recorded {role} reply for {key!r}") from None

    def complete(self, system_prompt: str, text: str) -> str:
        return self._lookup("language", text)

    def ground(self, request: GroundingRequest) -> list[BoundingBox2D]:
        scene, frame, label = request.key
        raw = self._lookup("grounding", f"{scene}|{frame}|{label}")
        h, w = request.query_frame.shape
        boxes = parse_grounding_response(raw, w, h)
        return boxes if request.adversarial else [b for b in boxes if b.part_index == 1]

    def select(self, request: SelectionRequest, n_candidates: int) -> int:
        raw = self._lookup("selection", f"{request.scene_id}|{request.instruction}")
        return request.affordance_nodes()[parse_selection_response(raw, n_candidates) - 1]

    def segment_by_text(self, frame: Frame, label: str):
        if self.segmenter is None:
            raise BackendError("replay backend has no segmenter")
        return self.segmenter.segment_by_text(frame, label)

    def segment_by_box(self, frame: Frame, box: BoundingBox2D):
        check_positive(box)
        if self.segmenter is None:
            raise BackendError("replay backend has no segmenter")
        return self.segmenter.segment_by_box(frame, box)


def oracle_backends(synth: SyntheticScene, noise: bool = False) -> Backends:
    maps = _InstanceMaps(synth)
    return Backends(OracleLanguageModel(synth), OracleGrounder(synth, maps), OracleSelector(synth),
                    OracleSegmenter(synth, maps, noise=noise))


def load_scenario(path) -> SyntheticScene:
    """Scenario for the oracle mocks: a synthetic scene directory or its scenario.json."""
    path = Path(path)
    return load_synthetic(path.parent if path.is_file() else path)
