"""Backend request/response types, role protocols and reply parsers."""

from __future__ import annotations

import base64
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Protocol, runtime_checkable

import numpy as np

from ..errors import ContractViolation, ParseError, SelectionError, ValidationError
from ..scene_io import Frame, encode_png


@dataclass(frozen=True)
class BoundingBox2D:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    part_index: int = 1

    def __post_init__(self):
        if self.part_index not in (0, 1):
            raise ValidationError(f"part_index must be 0 or 1, got {self.part_index}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValidationError(f"degenerate box {self.as_list()}")

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def within(self, width: int, height: int) -> bool:
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= width - 1 and self.y_max <= height - 1

    def clipped(self, width: int, height: int) -> "BoundingBox2D":
        x0, x1 = min(max(self.x_min, 0), width - 1), min(max(self.x_max, 0), width - 1)
        y0, y1 = min(max(self.y_min, 0), height - 1), min(max(self.y_max, 0), height - 1)
        return BoundingBox2D(x0, y0, max(x1, x0 + 1), max(y1, y0 + 1), self.part_index)

    def iou(self, other: "BoundingBox2D") -> float:
        iw = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        ih = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        if iw <= 0 or ih <= 0:
            return 0.0
        inter = iw * ih
        area = lambda b: (b.x_max - b.x_min) * (b.y_max - b.y_min)  # noqa: E731
        return inter / (area(self) + area(other) - inter)

    def to_dict(self):
        return {"bbox_2d": self.as_list(), "part_index": self.part_index}


@dataclass(frozen=True, eq=False)
class GroundingRequest:
    query_frame: Frame
    exemplars: tuple = ()  # MemoryExemplar
    interaction_label: str = ""
    instruction: str = ""
    scene_id: str = ""
    adversarial: bool = True

    def __post_init__(self):
        if not self.instruction.strip():
            raise ContractViolation("grounding instruction must be non-empty")
        if not self.interaction_label.strip():
            raise ContractViolation("grounding needs an interaction label")

    @property
    def key(self) -> tuple:
        return (self.scene_id, self.query_frame.index, self.interaction_label)


@dataclass(frozen=True, eq=False)
class SelectionRequest:
    graph_json: str
    instruction: str
    topdown_render: np.ndarray | None = None
    node_crops: dict = field(default_factory=dict)
    int_label: str | None = None
    scene_id: str = ""

    def __post_init__(self):
        from ..scene_graph import parse_graph

        parse_graph(self.graph_json)  # raises on malformed graphs

    def affordance_nodes(self) -> list[int]:
        """INT node ids in serialised order; the selector answers an index into this list."""
        from ..scene_graph import INT

        nodes = json.loads(self.graph_json)["nodes"]
        return [n["id"] for n in nodes
                if n["kind"] == INT and (self.int_label is None or n["label"] == self.int_label)]


@runtime_checkable
class LanguageModel(Protocol):
    def complete(self, system_prompt: str, text: str) -> str: ...


@runtime_checkable
class Grounder(Protocol):
    def ground(self, request: GroundingRequest) -> list[BoundingBox2D]: ...


@runtime_checkable
class Selector(Protocol):
    def select(self, request: SelectionRequest, n_candidates: int) -> int: ...


@runtime_checkable
class Segmenter(Protocol):
    def segment_by_text(self, frame: Frame, label: str) -> list[np.ndarray]: ...

    def segment_by_box(self, frame: Frame, box: BoundingBox2D) -> np.ndarray: ...


@dataclass
class Backends:
    """The four model roles the pipeline talks to."""
    language: LanguageModel | None
    grounder: Grounder
    selector: Selector
    segmenter: Segmenter


def check_positive(box: BoundingBox2D) -> None:
    if box.part_index != 1:
        raise ContractViolation("segment_by_box called with a part_index 0 (negative) box")


# ---------------------------------------------------------------------------
# prompt templates


def template(name: str) -> str:
    return (resources.files("afford3d.backends") / "templates" / f"{name}.txt").read_text(encoding="utf-8")


def grounding_prompt(instruction: str, category: str, adversarial: bool = True) -> str:
    text = template("stage2_ground" if adversarial else "stage2_ground_positive_only")
    return text.replace("{instruction}", instruction).replace("{category}", category)


def memory_preamble(label: str) -> str:
    return template("memory_preamble").replace("{label}", label)


def selection_prompt(instruction: str, graph_json: str, n_candidates: int) -> str:
    text = template("stage3_select").replace("{instruction}", instruction)
    text = text.replace("{len(affordance_nodes)}", str(n_candidates))
    anchor = "Available affordance nodes\n"
    return text.replace(anchor, anchor + graph_json + "\n", 1)


def data_uri(image: np.ndarray) -> str:
    return "data:image/png;base64," + base64.b64encode(encode_png(image)).decode("ascii")


# ---------------------------------------------------------------------------
# reply parsing


def parse_grounding_response(raw: str, width: int | None = None, height: int | None = None,
                             scale: str = "pixel") -> list[BoundingBox2D]:
    """JSON array of ``{bbox_2d, part_index}``; text around the outermost brackets is ignored.

    ``scale="norm1000"`` converts coordinates given on a 0..1000 grid to pixels.
    Boxes are clipped to the image when its size is known.
    """
    start, end = raw.find("["), raw.rfind("]")
    if start < 0 or end <= start:
        raise ParseError("no JSON array in grounding reply", raw=raw)
    try:
        items = json.loads(raw[start:end + 1])
    except json.JSONDecodeError as exc:
        raise ParseError(f"grounding reply is not valid JSON: {exc}", raw=raw) from None
    if not isinstance(items, list):
        raise ParseError("grounding reply is not a list", raw=raw)
    boxes = []
    for it in items:
        try:
            x0, y0, x1, y1 = (float(v) for v in it["bbox_2d"])
            part = int(it.get("part_index", 1))
        except (KeyError, TypeError, ValueError):
            raise ParseError(f"malformed box entry {it!r}", raw=raw) from None
        if scale == "norm1000":
            if width is None or height is None:
                raise ContractViolation("norm1000 boxes need the image size")
            x0, x1 = x0 * (width - 1) / 1000.0, x1 * (width - 1) / 1000.0
            y0, y1 = y0 * (height - 1) / 1000.0, y1 * (height - 1) / 1000.0
        x0, x1 = sorted((x0, x1))
        y0, y1 = sorted((y0, y1))
        if x0 == x1 or y0 == y1 or part not in (0, 1):
            continue
        box = BoundingBox2D(x0, y0, x1, y1, part)
        if width is not None and height is not None:
            if x1 < 0 or y1 < 0 or x0 > width - 1 or y0 > height - 1:
                continue
            box = box.clipped(width, height)
        boxes.append(box)
    return boxes


_DIGITS = re.compile(r"^\s*(\d+)\s*\.?\s*$")


def parse_selection_response(raw: str, n_candidates: int) -> int:
    """1-based index from a digits-only reply."""
    m = _DIGITS.match(raw)
    if m is None:
        raise ParseError("selection reply is not a bare number", raw=raw)
    k = int(m.group(1))
    if not 1 <= k <= n_candidates:
        raise SelectionError(f"selected index {k} outside 1..{n_candidates}")
    return k
