"""Posed RGB-D scene ingestion and artifact persistence.

On-disk scene layout (one directory per scene)::

    manifest.json      scene_id, depth_unit ("mm" | "m"), optional cloud / up_axis,
                       frames: [{index, rgb, depth, fx, fy, cx, cy, width, height,
                                 pose: 16 floats, row-major camera-to-world}]
    <rgb>.png          8-bit RGB
    <depth>            16-bit PNG in millimetres, or raw little-endian float32 metres
    cloud.ply          binary little-endian PLY, float32 x,y,z (+ optional uint8 r,g,b)
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ArtifactParseError, IngestionError, ValidationError


ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid camera-to-world transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValidationError("pose contains non-finite values")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL:
            raise ValidationError("pose rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValidationError("pose rotation has determinant != +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        # R^T (p - t), written row-wise
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
            raise ValidationError(f"point cloud must be a non-empty Nx3 array, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.colors is not None:
            cols = np.asarray(self.colors, dtype=np.uint8)
            if cols.shape != pts.shape:
                raise ValidationError("colors must match points shape")
            object.__setattr__(self, "colors", cols)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True, eq=False)
class Frame:
    index: int
    rgb: np.ndarray
    depth: np.ndarray
    intrinsics: CameraIntrinsics
    pose: Pose

    def __post_init__(self):
        h, w = self.intrinsics.height, self.intrinsics.width
        if self.rgb.shape != (h, w, 3):
            raise ValidationError(
                f"frame {self.index}: rgb shape {self.rgb.shape} does not match intrinsics {w}x{h}"
            )
        if self.depth.shape != (h, w):
            raise ValidationError(
                f"frame {self.index}: depth shape {self.depth.shape} does not match intrinsics {w}x{h}"
            )
        if not np.all(np.isfinite(self.depth)):
            raise ValidationError(f"frame {self.index}: depth contains non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.intrinsics.height, self.intrinsics.width


@dataclass(frozen=True, eq=False)
class SceneSequence:
    scene_id: str
    frames: tuple
    cloud: PointCloud
    up_axis: tuple = (0.0, 0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        idx = [f.index for f in self.frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValidationError(f"scene {self.scene_id}: frame indices must be strictly increasing")
        up = np.asarray(self.up_axis, dtype=np.float64)
        n = np.linalg.norm(up)
        if not n > 0:
            raise ValidationError("up_axis must be non-zero")
        object.__setattr__(self, "up_axis", tuple(float(x) for x in up / n))

    def frame(self, index: int) -> Frame:
        for f in self.frames:
            if f.index == index:
                return f
        raise KeyError(index)


def normalize_category(category: str) -> str:
    return category.strip().lower()


@dataclass(frozen=True)
class AffordanceAnnotation:
    category: str
    point_indices: tuple
    scene_id: str

    def __post_init__(self):
        cat = normalize_category(self.category)
        if not cat:
            raise ValidationError("annotation category must be non-empty")
        object.__setattr__(self, "category", cat)
        object.__setattr__(self, "point_indices", tuple(sorted({int(i) for i in self.point_indices})))

    @property
    def indices(self) -> np.ndarray:
        return np.asarray(self.point_indices, dtype=np.int64)


# ---------------------------------------------------------------------------
# PLY


_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
              "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
              "ushort": "<u2", "uint16": "<u2", "short": "<i2", "int16": "<i2",
              "uint": "<u4", "uint32": "<u4", "int": "<i4", "int32": "<i4"}


def write_ply(path, cloud: PointCloud) -> None:
    n = len(cloud)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if cloud.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    arr = np.empty(n, dtype=fields)
    for k, name in enumerate("xyz"):
        arr[name] = cloud.points[:, k]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}",
              "property float x", "property float y", "property float z"]
    if cloud.colors is not None:
        for k, name in enumerate(("red", "green", "blue")):
            arr[name] = cloud.colors[:, k]
            header.append(f"property uchar {name}")
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(arr.tobytes())


def read_ply(path) -> PointCloud:
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise IngestionError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    body = data[end + len(b"end_header\n"):]
    if "format binary_little_endian 1.0" not in header:
        raise IngestionError(f"{path}: only binary_little_endian PLY is supported")
    count, props, in_vertex = None, [], False
    for line in header:
        parts = line.split()
        if parts[:1] == ["element"]:
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[:1] == ["property"] and in_vertex:
            if parts[1] == "list":
                raise IngestionError(f"{path}: list properties in vertex element unsupported")
            props.append((parts[2], _PLY_TYPES[parts[1]]))
    if count is None:
        raise IngestionError(f"{path}: no vertex element")
    dtype = np.dtype(props)
    if len(body) < count * dtype.itemsize:
        raise IngestionError(f"{path}: truncated vertex data")
    arr = np.frombuffer(body, dtype=dtype, count=count)
    pts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
    colors = None
    names = dtype.names
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.stack([arr["red"], arr["green"], arr["blue"]], axis=1).astype(np.uint8)
    return PointCloud(pts, colors)


# ---------------------------------------------------------------------------
# scenes


def _read_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def _read_depth(path: Path, unit: str, shape: tuple[int, int]) -> np.ndarray:
    if unit == "mm":
        with Image.open(path) as im:
            raw = np.asarray(im)
        return raw.astype(np.float64) / 1000.0
    raw = np.fromfile(path, dtype="<f4")
    h, w = shape
    if raw.size != h * w:
        raise ValidationError(f"{path}: float depth has {raw.size} values, expected {h * w}")
    return raw.reshape(h, w).astype(np.float64)


def load_scene(root_path) -> SceneSequence:
    root = Path(root_path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise IngestionError(f"missing manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise IngestionError(f"{manifest_path}: invalid JSON at byte {exc.pos}") from exc
    unit = manifest.get("depth_unit", "m")
    if unit not in ("mm", "m"):
        raise IngestionError(f"{manifest_path}: depth_unit must be 'mm' or 'm', got {unit!r}")

    frames = []
    for entry in sorted(manifest["frames"], key=lambda e: int(e["index"])):
        idx = int(entry["index"])
        rgb_path, depth_path = root / entry["rgb"], root / entry["depth"]
        for p in (rgb_path, depth_path):
            if not p.is_file():
                raise IngestionError(f"frame {idx}: missing file {p}")
        intr = CameraIntrinsics(float(entry["fx"]), float(entry["fy"]), float(entry["cx"]),
                                float(entry["cy"]), int(entry["width"]), int(entry["height"]))
        try:
            pose = Pose.from_matrix(entry["pose"])
        except ValidationError as exc:
            raise ValidationError(f"frame {idx}: {exc}") from exc
        rgb = _read_rgb(rgb_path)
        depth = _read_depth(depth_path, unit, (intr.height, intr.width))
        frames.append(Frame(idx, rgb, depth, intr, pose))

    cloud_path = root / manifest.get("cloud", "cloud.ply")
    if not cloud_path.is_file():
        raise IngestionError(f"missing point cloud: {cloud_path}")
    cloud = read_ply(cloud_path)
    up = tuple(manifest.get("up_axis", (0.0, 0.0, 1.0)))
    return SceneSequence(str(manifest["scene_id"]), frames, cloud, up)


def save_scene(scene: SceneSequence, root_path, depth_unit: str = "m") -> Path:
    """Write ``scene`` in the layout read by :func:`load_scene`."""
    root = Path(root_path)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    entries = []
    for f in scene.frames:
        rgb_name = f"frames/{f.index:06d}_rgb.png"
        Image.fromarray(f.rgb).save(root / rgb_name, format="PNG")
        if depth_unit == "mm":
            depth_name = f"frames/{f.index:06d}_depth.png"
            mm = np.clip(np.round(np.where(f.depth > 0, f.depth, 0) * 1000.0), 0, 65535).astype(np.uint16)
            Image.fromarray(mm).save(root / depth_name, format="PNG")
        elif depth_unit == "m":
            depth_name = f"frames/{f.index:06d}_depth.f32"
            f.depth.astype("<f4").tofile(root / depth_name)
        else:
            raise ValueError(f"unknown depth unit {depth_unit!r}")
        k = f.intrinsics
        entries.append({
            "index": f.index, "rgb": rgb_name, "depth": depth_name,
            "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "width": k.width, "height": k.height,
            "pose": [float(x) for x in f.pose.matrix.reshape(-1)],
        })
    write_ply(root / "cloud.ply", scene.cloud)
    manifest = {"scene_id": scene.scene_id, "depth_unit": depth_unit, "cloud": "cloud.ply",
                "up_axis": list(scene.up_axis), "frames": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


def load_annotations(path, scene_id: str, cloud_size: int | None = None) -> list[AffordanceAnnotation]:
    """Read ``{category: [indices]}``; a list of lists yields one annotation per instance."""
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ArtifactParseError("invalid annotation JSON", path, exc.pos) from exc
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: annotations must be a JSON object")
    out = []
    for category in sorted(raw):
        if not normalize_category(category):
            raise ValidationError(f"{path}: empty category name")
        value = raw[category]
        groups = value if value and all(isinstance(v, list) for v in value) else [value]
        for group in groups:
            idx = np.asarray(group, dtype=np.int64)
            if idx.size and (idx.min() < 0 or (cloud_size is not None and idx.max() >= cloud_size)):
                raise ValidationError(
                    f"{path}: category {category!r} has index out of range for cloud of {cloud_size} points"
                )
            out.append(AffordanceAnnotation(category, idx.tolist(), scene_id))
    return out


def save_annotations(path, annotations) -> None:
    grouped: dict[str, list] = {}
    for a in annotations:
        grouped.setdefault(a.category, []).append(list(a.point_indices))
    doc = {k: (v[0] if len(v) == 1 else v) for k, v in grouped.items()}
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# artifacts

_ARTIFACT_KINDS = {
    "candidate_pool": ("afford3d.fusion", "CandidatePool"),
    "scene_graph": ("afford3d.scene_graph", "SceneGraph"),
    "memory_bank_manifest": ("afford3d.memory", "BankManifest"),
}


def _artifact_class(kind):
    import importlib

    try:
        module, name = _ARTIFACT_KINDS[kind]
    except KeyError:
        raise ArtifactParseError(f"unknown artifact kind {kind!r}") from None
    return getattr(importlib.import_module(module), name)


def dumps_artifact(artifact) -> str:
    kind = getattr(artifact, "artifact_kind", None)
    if kind not in _ARTIFACT_KINDS:
        raise TypeError(f"cannot persist {type(artifact).__name__}")
    doc = {"kind": kind, "version": 1, "data": artifact.to_dict()}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def loads_artifact(text: str, path=None):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise ArtifactParseError(f"corrupt artifact: {exc.msg}", path, offset) from exc
    if not isinstance(doc, dict) or "kind" not in doc or "data" not in doc:
        raise ArtifactParseError("artifact missing 'kind'/'data' envelope", path, 0)
    try:
        return _artifact_class(doc["kind"]).from_dict(doc["data"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ArtifactParseError(f"malformed {doc['kind']} payload: {exc}", path, 0) from exc


def persist_artifact(artifact, path) -> Path:
    """Deterministically write ``artifact`` as JSON (atomic rename)."""
    path = Path(path)
    payload = dumps_artifact(artifact).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)
    return path


def load_artifact(path):
    path = Path(path)
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ArtifactParseError("artifact is not UTF-8", path, exc.start) from exc
    return loads_artifact(text, path)


def encode_png(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    return buf.getvalue()
