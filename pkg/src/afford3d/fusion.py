"""Multi-view mask fusion into 3D candidate instances.

Each frame's 2D masks vote on the scene cloud: a point is *visible* in a frame
when it projects inside the image and its depth residual survives that frame's
MAD filter, and *foreground* when it is visible and lands inside a mask. Points
with enough consistent support are clustered (DBSCAN) and overlapping clusters
merged into the candidate pool.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractViolation, ValidationError
from .geometry import depth_residuals, project_points
from .memory import DepthFilterParams, depth_consistency_mask
from .scene_io import PointCloud


@dataclass(frozen=True, eq=False)
class VoteTable:
    n_vis: np.ndarray
    n_fg: np.ndarray
    # per frame: point indices that received a foreground vote
    fg_frames: tuple = ()

    def __post_init__(self):
        if self.n_vis.shape != self.n_fg.shape:
            raise ValidationError("vote arrays differ in length")
        if np.any(self.n_fg > self.n_vis) or np.any(self.n_fg < 0):
            raise ValidationError("vote table violates 0 <= n_fg <= n_vis")

    @property
    def point_count(self) -> int:
        return len(self.n_vis)


@dataclass(frozen=True)
class VotingParams:
    rho0: float = 0.70
    theta_vis: int = 3
    mode: str = "ratio"
    z: float = 1.96

    def __post_init__(self):
        if not 0 < self.rho0 < 1:
            raise ValidationError("rho0 must lie in (0, 1)")
        if self.theta_vis < 0:
            raise ValidationError("theta_vis must be >= 0")
        if self.mode not in ("ratio", "wilson"):
            raise ValidationError(f"unknown voting mode {self.mode!r}")


def frame_votes(cloud_points, frame, masks, depth_params=DepthFilterParams()):
    """``(visible, foreground)`` point indices for one frame and its masks."""
    h, w = frame.shape
    for m in masks:
        if m.shape != (h, w):
            raise ValidationError(f"frame {frame.index}: mask shape {m.shape} != image {(h, w)}")
    proj = project_points(cloud_points, frame.pose, frame.intrinsics)
    idx, res = depth_residuals(proj, frame.depth)
    keep = depth_consistency_mask(res, depth_params)
    visible = idx[keep]
    if not masks or len(visible) == 0:
        return visible, visible[:0]
    union = np.logical_or.reduce([np.asarray(m, dtype=bool) for m in masks])
    pos = np.searchsorted(proj.index, visible)
    col, row = proj.subset(pos).pixels(w, h)
    return visible, visible[union[row, col]]


def accumulate_votes(cloud: PointCloud, frames_with_masks,
                     depth_params: DepthFilterParams = DepthFilterParams(),
                     workers: int | None = None) -> VoteTable:
    """Count per-point visibility and foreground support over ``(frame, masks)`` pairs."""
    n = len(cloud)
    items = list(frames_with_masks)
    fn = lambda fm: frame_votes(cloud.points, fm[0], list(fm[1]), depth_params)  # noqa: E731
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(fn, items))
    else:
        results = [fn(fm) for fm in items]
    n_vis = np.zeros(n, dtype=np.int64)
    n_fg = np.zeros(n, dtype=np.int64)
    for vis, fg in results:
        n_vis[vis] += 1
        n_fg[fg] += 1
    return VoteTable(n_vis, n_fg, tuple(fg for _, fg in results))


def wilson_lower_bound(successes: int, trials: int, z: float = 1.96) -> float:
    """Lower end of the Wilson score interval for a binomial proportion."""
    if trials < 1:
        raise ContractViolation("wilson_lower_bound needs trials >= 1")
    if not 0 <= successes <= trials:
        raise ContractViolation("successes must lie in [0, trials]")
    if successes == 0:
        return 0.0
    n = float(trials)
    p = successes / n
    z2 = z * z
    centre = p + z2 / (2 * n)
    margin = z * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n))
    return max(0.0, (centre - margin) / (1 + z2 / n))


def wilson_lower_bounds(successes, trials, z: float = 1.96) -> np.ndarray:
    """Vectorised :func:`wilson_lower_bound`; entries with zero trials give 0."""
    k = np.asarray(successes, dtype=np.float64)
    n = np.asarray(trials, dtype=np.float64)
    out = np.zeros(np.broadcast(k, n).shape)
    ok = (n > 0) & (k > 0)
    k, n = np.broadcast_to(k, out.shape)[ok], np.broadcast_to(n, out.shape)[ok]
    p = k / n
    z2 = z * z
    centre = p + z2 / (2 * n)
    margin = z * np.sqrt(p * (1 - p) / n + z2 / (4 * n * n))
    out[ok] = np.maximum(0.0, (centre - margin) / (1 + z2 / n))
    return out


def threshold_foreground(votes: VoteTable, params: VotingParams = VotingParams()) -> np.ndarray:
    """Indices of points kept as foreground (strict inequalities on both tests)."""
    n_vis, n_fg = votes.n_vis, votes.n_fg
    seen = n_vis > 0
    if params.mode == "ratio":
        ratio = np.zeros(len(n_vis))
        ratio[seen] = n_fg[seen] / n_vis[seen]
    else:
        ratio = wilson_lower_bounds(n_fg, n_vis, params.z)
    keep = seen & (ratio > params.rho0) & (n_vis > params.theta_vis)
    return np.flatnonzero(keep)


# ---------------------------------------------------------------------------
# candidates


@dataclass(frozen=True)
class Candidate3D:
    point_indices: tuple
    centroid: tuple
    aabb_min: tuple
    aabb_max: tuple
    support: int = 0

    def __post_init__(self):
        if not self.point_indices:
            raise ValidationError("candidate must contain at least one point")

    @classmethod
    def from_points(cls, indices, cloud: PointCloud, support: int = 0) -> "Candidate3D":
        idx = np.unique(np.asarray(indices, dtype=np.int64))
        pts = cloud.points[idx]
        return cls(tuple(int(i) for i in idx), tuple(float(x) for x in pts.mean(axis=0)),
                   tuple(float(x) for x in pts.min(axis=0)), tuple(float(x) for x in pts.max(axis=0)),
                   int(support))

    @property
    def indices(self) -> np.ndarray:
        return np.asarray(self.point_indices, dtype=np.int64)

    def __len__(self):
        return len(self.point_indices)

    def to_dict(self):
        return {"indices": list(self.point_indices), "centroid": list(self.centroid),
                "aabb": {"min": list(self.aabb_min), "max": list(self.aabb_max)},
                "support": self.support}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(int(i) for i in d["indices"]), tuple(float(x) for x in d["centroid"]),
                   tuple(float(x) for x in d["aabb"]["min"]), tuple(float(x) for x in d["aabb"]["max"]),
                   int(d["support"]))


@dataclass(frozen=True)
class CandidatePool:
    artifact_kind = "candidate_pool"

    candidates: tuple = ()
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))

    def __len__(self):
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    def __getitem__(self, i):
        return self.candidates[i]

    def to_dict(self):
        return {"candidates": [c.to_dict() for c in self.candidates], "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(Candidate3D.from_dict(c) for c in d["candidates"]), dict(d["params"]))

    __hash__ = None


def _canonical_order(points: np.ndarray) -> np.ndarray:
    return np.lexsort(points.T[::-1])


def dbscan_labels(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """DBSCAN labels (-1 = noise) that do not depend on input order.

    Clusters are the connected components of core points; a border point joins
    the cluster of its nearest core neighbour (ties: lexicographically smallest
    core coordinate).
    """
    if not eps > 0 or min_pts < 1:
        raise ContractViolation("dbscan needs eps > 0 and min_pts >= 1")
    n = len(points)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    tree = cKDTree(points)
    neigh = tree.query_ball_point(points, r=eps)
    core = np.array([len(nb) >= min_pts for nb in neigh])

    rank = np.empty(n, dtype=np.int64)
    rank[_canonical_order(points)] = np.arange(n)
    next_label = 0
    for seed in sorted(np.flatnonzero(core), key=lambda i: rank[i]):
        if labels[seed] >= 0:
            continue
        labels[seed] = next_label
        stack = [seed]
        while stack:
            p = stack.pop()
            for q in neigh[p]:
                if core[q] and labels[q] < 0:
                    labels[q] = next_label
                    stack.append(q)
        next_label += 1

    for b in np.flatnonzero(~core):
        cores = [q for q in neigh[b] if core[q]]
        if not cores:
            continue
        d = np.linalg.norm(points[cores] - points[b], axis=1)
        best = min(range(len(cores)), key=lambda j: (d[j], rank[cores[j]]))
        labels[b] = labels[cores[best]]
    return labels


def _sort_candidates(cands):
    return sorted(cands, key=lambda c: (-len(c), c.centroid))


def cluster_candidates(foreground, cloud: PointCloud, eps: float = 0.03, min_pts: int = 5,
                       support_frames=None) -> list[Candidate3D]:
    """Cluster foreground points into candidates, largest first.

    ``support_frames`` (per-frame foreground index arrays, e.g.
    ``VoteTable.fg_frames``) fills in each candidate's frame support.
    """
    fg = np.unique(np.asarray(foreground, dtype=np.int64))
    if len(fg) == 0:
        return []
    labels = dbscan_labels(cloud.points[fg], eps, min_pts)
    out = []
    for lab in np.unique(labels[labels >= 0]):
        members = fg[labels == lab]
        support = 0
        if support_frames is not None:
            support = sum(1 for hits in support_frames if np.isin(hits, members).any())
        out.append(Candidate3D.from_points(members, cloud, support))
    return _sort_candidates(out)


def overlap_stats(a, b) -> tuple[float, float]:
    """``(IoU, min-recall)`` of two point-index sets."""
    sa, sb = set(a), set(b)
    inter = len(sa & sb)
    if inter == 0:
        return 0.0, 0.0
    return inter / len(sa | sb), inter / min(len(sa), len(sb))


def merge_candidates(pool, cloud: PointCloud, theta_iou: float = 0.30,
                     theta_rec: float = 0.60) -> CandidatePool:
    """Union candidates until no pair has IoU > theta_iou or min-recall > theta_rec."""
    if not (0 < theta_iou < 1 and 0 < theta_rec < 1):
        raise ContractViolation("merge thresholds must lie in (0, 1)")
    cands = list(pool)
    merged = True
    while merged:
        merged = False
        for i in range(len(cands)):
            for j in range(i + 1, len(cands)):
                iou, rec = overlap_stats(cands[i].point_indices, cands[j].point_indices)
                if iou > theta_iou or rec > theta_rec:
                    union = np.union1d(cands[i].indices, cands[j].indices)
                    cands[i] = Candidate3D.from_points(union, cloud,
                                                       max(cands[i].support, cands[j].support))
                    del cands[j]
                    merged = True
                    break
            if merged:
                break
    # leftover partial overlaps (below both thresholds) keep their point with the larger candidate
    cands = _sort_candidates(cands)
    taken: set[int] = set()
    final = []
    for c in cands:
        rest = [i for i in c.point_indices if i not in taken]
        if not rest:
            continue
        taken.update(rest)
        final.append(c if len(rest) == len(c) else Candidate3D.from_points(rest, cloud, c.support))
    params = {"theta_iou": theta_iou, "theta_rec": theta_rec}
    return CandidatePool(tuple(_sort_candidates(final)), params)


def fuse(cloud: PointCloud, frames_with_masks, depth_params=DepthFilterParams(),
         voting=VotingParams(), eps: float = 0.03, min_pts: int = 5, theta_iou: float = 0.30,
         theta_rec: float = 0.60, workers: int | None = None) -> CandidatePool:
    """Votes -> foreground threshold -> DBSCAN -> merge, in one call."""
    votes = accumulate_votes(cloud, frames_with_masks, depth_params, workers)
    fg = threshold_foreground(votes, voting)
    clusters = cluster_candidates(fg, cloud, eps, min_pts, votes.fg_frames)
    pool = merge_candidates(clusters, cloud, theta_iou, theta_rec)
    params = dict(pool.params, rho0=voting.rho0, theta_vis=voting.theta_vis, mode=voting.mode,
                  eps=eps, min_pts=min_pts, k=depth_params.k, tau_min=depth_params.tau_min)
    return CandidatePool(pool.candidates, params)
