"""3D mask IoU and AP/AR/mIoU over per-query predictions.

Each query gets at most one unscored prediction, so AP and AR at a threshold
both reduce to the fraction of queries whose IoU reaches it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

THRESHOLDS = (0.25, 0.50)
METRIC_KEYS = ("AP25", "AP50", "AR25", "AR50", "mIoU")


def mask_iou_3d(a, b) -> float:
    """Set IoU of two point-index collections; two empty sets score 0."""
    sa, sb = set(int(i) for i in a), set(int(i) for i in b)
    union = len(sa | sb)
    return len(sa & sb) / union if union else 0.0


@dataclass(frozen=True)
class EvalRecord:
    query_id: str
    predicted: tuple | None
    ground_truth: tuple
    iou: float
    scene_id: str = ""

    @classmethod
    def score(cls, query_id: str, predicted, ground_truth, scene_id: str = "") -> "EvalRecord":
        gt = tuple(sorted(int(i) for i in ground_truth))
        if predicted is None:
            return cls(query_id, None, gt, 0.0, scene_id)
        pred = tuple(sorted(int(i) for i in predicted))
        return cls(query_id, pred, gt, mask_iou_3d(pred, gt), scene_id)

    def to_dict(self):
        return {"query_id": self.query_id, "scene_id": self.scene_id, "iou": self.iou,
                "predicted": None if self.predicted is None else list(self.predicted),
                "ground_truth": list(self.ground_truth)}

    @classmethod
    def from_dict(cls, d):
        pred = d.get("predicted")
        return cls(d["query_id"], None if pred is None else tuple(pred), tuple(d["ground_truth"]),
                   float(d["iou"]), d.get("scene_id", ""))


def _metrics_from_ious(ious) -> dict:
    ious = np.asarray(ious, dtype=np.float64)
    out = {}
    for t in THRESHOLDS:
        hit = float(np.mean(ious >= t))
        out[f"AP{int(round(t * 100))}"] = hit
        out[f"AR{int(round(t * 100))}"] = hit
    out["mIoU"] = float(np.mean(ious))
    return {k: out[k] for k in METRIC_KEYS}


def compute_metrics(records) -> dict:
    """AP/AR at IoU 0.25 and 0.50 plus mIoU, averaged over queries."""
    records = list(records)
    if not records:
        raise ContractViolation("compute_metrics needs at least one record")
    ids = [r.query_id for r in records]
    if len(set(ids)) != len(ids):
        raise ContractViolation("one record per query expected")
    return _metrics_from_ious([r.iou for r in records])


def scene_macro_metrics(records) -> dict:
    """Per-scene metrics averaged over scenes (each scene weighted equally)."""
    by_scene: dict[str, list] = {}
    for r in records:
        by_scene.setdefault(r.scene_id, []).append(r.iou)
    if not by_scene:
        raise ContractViolation("scene_macro_metrics needs at least one record")
    per = [_metrics_from_ious(v) for _, v in sorted(by_scene.items())]
    return {k: float(np.mean([m[k] for m in per])) for k in METRIC_KEYS}


def evaluation_report(records) -> dict:
    records = list(records)
    return {
        "metrics": compute_metrics(records),
        "scene_macro": scene_macro_metrics(records),
        "n_queries": len(records),
        "records": [r.to_dict() for r in records],
    }


def format_table(report: dict) -> str:
    """Aligned plain-text table of the metrics and per-query IoUs."""
    lines = [f"{'metric':<10}{'queries':>10}{'scenes':>10}"]
    for k in METRIC_KEYS:
        lines.append(f"{k:<10}{report['metrics'][k]:>10.4f}{report['scene_macro'][k]:>10.4f}")
    lines.append("")
    width = max([len("query")] + [len(r["query_id"]) for r in report["records"]])
    lines.append(f"{'query':<{width}}  {'iou':>7}")
    for r in report["records"]:
        lines.append(f"{r['query_id']:<{width}}  {r['iou']:>7.4f}")
    return "\n".join(lines) + "\n"


def dumps_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=1) + "\n"
