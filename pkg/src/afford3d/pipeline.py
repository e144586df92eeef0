"""Stage-wise orchestration: parse, ground, fuse, graph, select, eval.

Every stage writes a JSON artifact under a content-addressed name (a hash of
the configuration slice it depends on plus its upstream artifacts), so a
downstream stage can be re-run without re-querying the models. Running one
stage on its own requires the upstream artifacts to be cached already.
"""

from __future__ import annotations

import base64
import contextlib
import dataclasses
import fcntl
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .backends.base import Backends, GroundingRequest, SelectionRequest
from .errors import ContractViolation, DependencyError, ResolutionError, ValidationError
from .evaluation import EvalRecord, evaluation_report, format_table, dumps_report
from .fusion import CandidatePool, VotingParams, fuse
from .memory import DepthFilterParams, MemoryBank
from .query import ParsedQuery, parse_query
from .scene_graph import (build_graph, extract_crops, rasterize_topdown, render_topdown, resolve_spatial,
                          serialize_graph)
from .scene_io import SceneSequence, dumps_artifact, loads_artifact, normalize_category

log = logging.getLogger(__name__)

STAGES = ("parse", "ground", "fuse", "graph", "select", "eval")
ABLATIONS = {"memory": "no_memory", "adversarial": "no_adversarial", "graph": "no_graph"}


@dataclass(frozen=True)
class PipelineConfig:
    # depth filter
    k: float = 3.0
    tau_min: float = 0.05
    # voting
    rho0: float = 0.70
    theta_vis: int = 3
    voting_mode: str = "ratio"
    # clustering and merging
    dbscan_eps: float = 0.03
    dbscan_min_pts: int = 5
    theta_iou: float = 0.30
    theta_rec: float = 0.60
    # memory
    k_recall: int = 20
    w1: float = 0.5
    w2: float = 0.5
    # backends and selection
    backend: str = "mock-oracle"
    selector: str = "backend"  # "backend" asks the selector model, "resolver" is rule-based
    mock_noise: bool = False
    # ablations
    no_memory: bool = False
    no_adversarial: bool = False
    no_graph: bool = False
    cache_dir: str | None = None
    workers: int = 1

    def __post_init__(self):
        if self.backend not in ("http", "mock-oracle", "mock-replay"):
            raise ValidationError(f"unknown backend {self.backend!r}")
        if self.selector not in ("backend", "resolver"):
            raise ValidationError(f"unknown selector {self.selector!r}")
        if self.k <= 0 or self.tau_min < 0 or self.dbscan_eps <= 0 or self.dbscan_min_pts < 1:
            raise ValidationError("filter and clustering parameters must be positive")
        if self.k_recall < 1 or self.workers < 1:
            raise ValidationError("k_recall and workers must be >= 1")
        # delegate the remaining range checks
        self.depth_params()
        self.voting_params()
        if not (0 < self.theta_iou < 1 and 0 < self.theta_rec < 1):
            raise ValidationError("merge thresholds must lie in (0, 1)")

    def depth_params(self) -> DepthFilterParams:
        return DepthFilterParams(self.k, self.tau_min)

    def voting_params(self) -> VotingParams:
        return VotingParams(self.rho0, self.theta_vis, self.voting_mode)

    def with_ablations(self, names) -> "PipelineConfig":
        flags = {}
        for name in names:
            if name not in ABLATIONS:
                raise ValidationError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
            flags[ABLATIONS[name]] = True
        return dataclasses.replace(self, **flags)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(str(exc)) from None

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {path} is not valid JSON: {exc}") from None


# ---------------------------------------------------------------------------
# caching


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def content_key(stage: str, payload) -> str:
    return hashlib.sha256((stage + "\n" + _canonical(payload)).encode()).hexdigest()[:24]


class ArtifactCache:
    """Stage artifacts by (stage, key); on disk when ``root`` is given, else in memory."""

    def __init__(self, root=None):
        self.root = Path(root) if root is not None else None
        self._mem: dict[tuple[str, str], str] = {}
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)

    def path(self, stage: str, key: str) -> Path | None:
        return None if self.root is None else self.root / stage / f"{key}.json"

    def get(self, stage: str, key: str) -> str | None:
        if self.root is None:
            return self._mem.get((stage, key))
        p = self.path(stage, key)
        return p.read_text() if p.exists() else None

    def put(self, stage: str, key: str, text: str) -> None:
        if self.root is None:
            self._mem[(stage, key)] = text
            return
        p = self.path(stage, key)
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_name(p.name + f".{os.getpid()}.tmp")
        tmp.write_text(text)
        os.replace(tmp, p)

    @contextlib.contextmanager
    def locked(self):
        """Advisory exclusive lock so only one run mutates the directory at a time."""
        if self.root is None:
            yield
            return
        with open(self.root / ".lock", "w") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)


def encode_mask(mask: np.ndarray) -> dict:
    m = np.asarray(mask, dtype=bool)
    return {"shape": list(m.shape), "bits": base64.b64encode(np.packbits(m.ravel()).tobytes()).decode("ascii")}


def decode_mask(d: dict) -> np.ndarray:
    shape = tuple(d["shape"])
    bits = np.frombuffer(base64.b64decode(d["bits"]), dtype=np.uint8)
    return np.unpackbits(bits, count=int(np.prod(shape))).astype(bool).reshape(shape)


def scene_fingerprint(scene: SceneSequence) -> str:
    h = hashlib.sha256(scene.scene_id.encode())
    h.update(np.ascontiguousarray(scene.cloud.points, dtype=np.float64).tobytes())
    for f in scene.frames:
        h.update(str(f.index).encode())
        h.update(np.ascontiguousarray(f.rgb).tobytes())
        h.update(np.ascontiguousarray(f.depth, dtype=np.float64).tobytes())
        h.update(f.pose.matrix.tobytes())
        h.update(f.intrinsics.matrix.tobytes())
    return h.hexdigest()[:24]


def bank_fingerprint(bank: MemoryBank | None) -> str | None:
    if bank is None:
        return None
    return hashlib.sha256(dumps_artifact(bank.manifest()).encode()).hexdigest()[:24]


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class QueryResult:
    query_id: str
    text: str
    parsed: ParsedQuery
    node_id: int | None
    predicted: tuple | None
    graph_json: str | None = None
    topdown_svg: str | None = None
    crops: dict = dataclasses.field(default_factory=dict)


class Pipeline:
    """One target scene, one configuration, one set of backends."""

    def __init__(self, config: PipelineConfig, scene: SceneSequence, backends: Backends,
                 bank: MemoryBank | None = None, cache: ArtifactCache | None = None, backend_id: str = ""):
        if bank is not None:
            bank.check_separation(scene.scene_id)
        if bank is None and not config.no_memory:
            log.warning("no memory bank given; grounding runs without exemplars")
        self.config = config
        self.scene = scene
        self.backends = backends
        self.bank = bank
        self.cache = cache or ArtifactCache(config.cache_dir)
        self.backend_id = backend_id or config.backend
        self.scene_fp = scene_fingerprint(scene)
        self._compute: set[str] = set(STAGES)

    # -- plumbing ---------------------------------------------------------

    def _cached(self, stage: str, payload, compute):
        key = content_key(stage, payload)
        text = self.cache.get(stage, key)
        if text is None:
            if stage not in self._compute:
                raise DependencyError(stage, f"run `{stage}` first (key {key})")
            text = compute()
            self.cache.put(stage, key, text)
        return key, text

    def _map_frames(self, fn):
        frames = self.scene.frames
        if self.config.workers > 1:
            with ThreadPoolExecutor(max_workers=self.config.workers) as ex:
                return list(ex.map(fn, frames))
        return [fn(f) for f in frames]

    # -- stages -----------------------------------------------------------

    def parse(self, queries) -> tuple[str, list[tuple[str, str, ParsedQuery]]]:
        queries = [(str(q["query_id"]), str(q["text"])) for q in queries]
        ids = [q for q, _ in queries]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate query_id in query file")

        def compute():
            out = [{"query_id": qid, "text": text,
                    "parsed": parse_query(text, self.backends.language).to_dict()} for qid, text in queries]
            return _canonical({"queries": out}) + "\n"

        key, text = self._cached("parse", {"queries": queries, "backend": self.backend_id}, compute)
        doc = json.loads(text)
        return key, [(q["query_id"], q["text"], ParsedQuery.from_dict(q["parsed"])) for q in doc["queries"]]

    def ground(self, text: str, parsed: ParsedQuery) -> tuple[str, list[np.ndarray]]:
        """Per-frame union of the interaction-element masks."""
        cfg = self.config
        label = normalize_category(parsed.interaction_label)
        payload = {"scene": self.scene_fp, "label": label, "instruction": text, "backend": self.backend_id,
                   "memory": not cfg.no_memory, "adversarial": not cfg.no_adversarial,
                   "bank": None if cfg.no_memory else bank_fingerprint(self.bank),
                   "k_recall": cfg.k_recall, "noise": cfg.mock_noise}
        seg = self.backends.segmenter

        def frame_mask(frame):
            h, w = frame.shape
            if cfg.no_memory:
                masks = seg.segment_by_text(frame, label)
                n_boxes = len(masks)
            else:
                exemplars = tuple(self.bank.recall(label)[:cfg.k_recall]) if self.bank is not None else ()
                req = GroundingRequest(frame, exemplars, label, text, self.scene.scene_id,
                                       adversarial=not cfg.no_adversarial)
                boxes = self.backends.grounder.ground(req)
                positives = [b for b in boxes if b.part_index == 1]
                masks = [seg.segment_by_box(frame, b) for b in positives]
                n_boxes = len(boxes)
            union = np.zeros((h, w), dtype=bool)
            for m in masks:
                union |= np.asarray(m, dtype=bool)
            return union, n_boxes

        def compute():
            results = self._map_frames(frame_mask)
            frames = [{"frame": f.index, "boxes": n, "mask": encode_mask(m)}
                      for f, (m, n) in zip(self.scene.frames, results)]
            return _canonical({"kind": "interaction", "label": label, "frames": frames}) + "\n"

        key, doc = self._cached("ground", payload, compute)
        return key, [decode_mask(f["mask"]) for f in json.loads(doc)["frames"]]

    def context_masks(self, label: str) -> tuple[str, list[np.ndarray]]:
        """Per-frame union of text-prompted masks for a context or reference object."""
        label = normalize_category(label)
        payload = {"scene": self.scene_fp, "label": label, "backend": self.backend_id,
                   "noise": self.config.mock_noise, "role": "context"}

        def frame_mask(frame):
            union = np.zeros(frame.shape, dtype=bool)
            for m in self.backends.segmenter.segment_by_text(frame, label):
                union |= np.asarray(m, dtype=bool)
            return union

        def compute():
            frames = [{"frame": f.index, "mask": encode_mask(m)}
                      for f, m in zip(self.scene.frames, self._map_frames(frame_mask))]
            return _canonical({"kind": "context", "label": label, "frames": frames}) + "\n"

        key, doc = self._cached("ground", payload, compute)
        return key, [decode_mask(f["mask"]) for f in json.loads(doc)["frames"]]

    def fuse(self, ground_key: str, masks) -> tuple[str, CandidatePool]:
        cfg = self.config
        payload = {"ground": ground_key, "k": cfg.k, "tau_min": cfg.tau_min, "rho0": cfg.rho0,
                   "theta_vis": cfg.theta_vis, "mode": cfg.voting_mode, "eps": cfg.dbscan_eps,
                   "min_pts": cfg.dbscan_min_pts, "theta_iou": cfg.theta_iou, "theta_rec": cfg.theta_rec}

        def compute():
            pairs = [(f, [m]) for f, m in zip(self.scene.frames, masks)]
            pool = fuse(self.scene.cloud, pairs, cfg.depth_params(), cfg.voting_params(), cfg.dbscan_eps,
                        cfg.dbscan_min_pts, cfg.theta_iou, cfg.theta_rec, cfg.workers)
            return dumps_artifact(pool)

        key, text = self._cached("fuse", payload, compute)
        return key, loads_artifact(text)

    def _pools(self, text: str, parsed: ParsedQuery):
        gkey, masks = self.ground(text, parsed)
        int_key, int_pool = self.fuse(gkey, masks)
        ctx = {}
        labels = [parsed.context_label] if parsed.context_label else []
        ref = parsed.spatial.reference_label
        if ref and normalize_category(ref) not in [normalize_category(x) for x in labels]:
            labels.append(ref)
        for label in labels:
            ckey, cmasks = self.context_masks(label)
            ctx[normalize_category(label)] = self.fuse(ckey, cmasks)
        return (int_key, int_pool), ctx

    def graph(self, text: str, parsed: ParsedQuery):
        (int_key, int_pool), ctx = self._pools(text, parsed)
        int_label = normalize_category(parsed.interaction_label)
        ctx_label = normalize_category(parsed.context_label) if parsed.context_label else None
        payload = {"int": int_key, "ctx": {k: v[0] for k, v in sorted(ctx.items())},
                   "labels": [int_label, ctx_label], "up": list(self.scene.up_axis)}

        def compute():
            ctx_pool = ctx[ctx_label][1] if ctx_label else CandidatePool(())
            extra = {k: v[1] for k, v in ctx.items() if k != ctx_label}
            g = build_graph(int_pool, ctx_pool, (int_label, ctx_label), self.scene.up_axis,
                            self.scene.scene_id, extra)
            return dumps_artifact(g)

        key, text_out = self._cached("graph", payload, compute)
        return key, loads_artifact(text_out), int_pool

    def select(self, qid: str, text: str, parsed: ParsedQuery) -> QueryResult:
        cfg = self.config
        gkey, graph, int_pool = self.graph(text, parsed)
        int_label = normalize_category(parsed.interaction_label)
        mode = "largest_support" if cfg.no_graph else cfg.selector
        payload = {"graph": gkey, "mode": mode, "instruction": text, "backend": self.backend_id,
                   "spatial": parsed.spatial.to_dict()}
        extras = {}

        def compute():
            node_id, predicted = None, None
            if cfg.no_graph:
                if len(int_pool):
                    best = max(enumerate(int_pool),
                               key=lambda ic: (ic[1].support, len(ic[1]), -ic[0]))[1]
                    predicted = list(best.point_indices)
            elif not graph.int_nodes(int_label):
                log.warning("query %s: no %r candidates survived fusion", qid, int_label)
            elif cfg.selector == "resolver":
                try:
                    node_id = resolve_spatial(graph, parsed.spatial, int_label)
                except ResolutionError as exc:
                    log.warning("query %s: %s", qid, exc)
            else:
                crops, _ = extract_crops(graph, self.scene, cfg.depth_params(), (cfg.w1, cfg.w2))
                req = SelectionRequest(serialize_graph(graph), text, rasterize_topdown(graph, self.scene.cloud),
                                       crops, int_label, self.scene.scene_id)
                node_id = self.backends.selector.select(req, len(req.affordance_nodes()))
                extras["crops"] = crops
            if node_id is not None:
                predicted = list(graph.node(node_id).point_indices)
            return _canonical({"query_id": qid, "mode": mode, "node_id": node_id,
                               "predicted": predicted}) + "\n"

        _, out = self._cached("select", payload, compute)
        doc = json.loads(out)
        pred = doc["predicted"]
        return QueryResult(qid, text, parsed, doc["node_id"], None if pred is None else tuple(pred),
                           serialize_graph(graph), render_topdown(graph, self.scene.cloud),
                           extras.get("crops", {}))

    # -- drivers ----------------------------------------------------------

    def run_stage(self, stage: str, queries) -> list:
        """Compute ``stage`` for every query; upstream stages must already be cached."""
        if stage not in STAGES[:-1]:
            raise ContractViolation(f"unknown stage {stage!r}")
        self._compute = {stage}
        try:
            with self.cache.locked():
                if stage == "parse":
                    self._compute = {"parse"}
                    return self.parse(queries)[1]
                parsed = self._parsed_cached(queries)
                out = []
                for qid, text, pq in parsed:
                    if stage == "ground":
                        self.ground(text, pq)
                        for label in filter(None, [pq.context_label, pq.spatial.reference_label]):
                            self.context_masks(label)
                    elif stage == "fuse":
                        self._pools(text, pq)
                    elif stage == "graph":
                        self.graph(text, pq)
                    else:
                        out.append(self.select(qid, text, pq))
                return out
        finally:
            self._compute = set(STAGES)

    def _parsed_cached(self, queries):
        saved = self._compute
        self._compute = saved - {"parse"}
        try:
            return self.parse(queries)[1]
        finally:
            self._compute = saved

    def cached_results(self, queries) -> list[QueryResult]:
        """Selections from the cache only; raises DependencyError for anything missing."""
        self._compute = set()
        try:
            return [self.select(qid, text, pq) for qid, text, pq in self.parse(queries)[1]]
        finally:
            self._compute = set(STAGES)

    def run(self, queries) -> list[QueryResult]:
        """All stages for every query (evaluation is separate, see :func:`evaluate`)."""
        self._compute = set(STAGES)
        with self.cache.locked():
            return [self.select(qid, text, pq) for qid, text, pq in self.parse(queries)[1]]


def evaluate(results, ground_truth: dict, scene_id: str = "") -> list[EvalRecord]:
    """Score each query's prediction against ``ground_truth`` (query_id -> point indices)."""
    records = []
    for r in results:
        if r.query_id not in ground_truth:
            raise ValidationError(f"no ground truth for query {r.query_id!r}")
        records.append(EvalRecord.score(r.query_id, r.predicted, ground_truth[r.query_id], scene_id))
    return records


def write_outputs(results, records, out_dir) -> Path:
    """Per-query graph JSON, top-down SVG and crops, plus the metrics report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in results:
        qdir = out / r.query_id
        qdir.mkdir(exist_ok=True)
        sel = {"query_id": r.query_id, "text": r.text, "parsed": r.parsed.to_dict(), "node_id": r.node_id,
               "predicted": None if r.predicted is None else list(r.predicted)}
        (qdir / "selection.json").write_text(json.dumps(sel, sort_keys=True, indent=1) + "\n")
        if r.graph_json is not None:
            (qdir / "graph.json").write_text(r.graph_json)
            (qdir / "topdown.svg").write_text(r.topdown_svg)
        for node_id, crop in sorted(r.crops.items()):
            Image.fromarray(crop).save(qdir / f"node_{node_id}.png", format="PNG")
    if records:
        report = evaluation_report(records)
        (out / "metrics.json").write_text(dumps_report(report))
        (out / "metrics.txt").write_text(format_table(report))
    return out
