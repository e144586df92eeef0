"""Hand-built scene graphs shared by the graph and acceptance tests."""

import numpy as np

from afford3d.fusion import Candidate3D, CandidatePool
from afford3d.scene_graph import CTX, INT, GraphNode, SceneGraph, build_graph


def box_candidate(center, half=0.01, first_index=0):
    c = np.asarray(center, dtype=float)
    return Candidate3D((first_index,), tuple(c), tuple(c - half), tuple(c + half))


def make_graph(int_centroids, ctx=(), up=(0.0, 0.0, 1.0), label="handle", half=0.01, ctx_half=0.05):
    """Graph from explicit centroids. ``ctx`` is a list of ``(label, centroid)`` pairs."""
    nodes = []
    for label_c, c in ctx:
        c = np.asarray(c, dtype=float)
        nodes.append(GraphNode(len(nodes) + 1, CTX, label_c, tuple(c), tuple(c - ctx_half), tuple(c + ctx_half)))
    for c in int_centroids:
        c = np.asarray(c, dtype=float)
        nodes.append(GraphNode(len(nodes) + 1, INT, label, tuple(c), tuple(c - half), tuple(c + half),
                               None, (len(nodes),)))
    return SceneGraph(tuple(nodes), up, "hand")


def golden_single():
    pool = CandidatePool((box_candidate((0.1, 0.2, 0.3)),))
    return build_graph(pool, CandidatePool(()), ("handle", None), scene_id="golden_single")


def golden_cabinet():
    drawers = CandidatePool((
        Candidate3D((0,), (0.0, -0.01, 0.65), (-0.28, -0.02, 0.53), (0.28, 0.0, 0.77)),
        Candidate3D((1,), (0.0, -0.01, 0.35), (-0.28, -0.02, 0.23), (0.28, 0.0, 0.47)),
    ))
    handles = CandidatePool((
        Candidate3D((2,), (0.0, -0.035, 0.65), (-0.06, -0.05, 0.635), (0.06, -0.02, 0.665)),
        Candidate3D((3,), (0.0, -0.035, 0.35), (-0.06, -0.05, 0.335), (0.06, -0.02, 0.365)),
    ))
    return build_graph(handles, drawers, ("handle", "drawer"), scene_id="golden_cabinet")


def golden_lamp():
    cabinet = CandidatePool((Candidate3D((0,), (0.0, 0.2, 0.4), (-0.3, 0.0, 0.0), (0.3, 0.45, 0.8)),))
    lamp = CandidatePool((Candidate3D((1,), (-0.55, 0.2, 0.25), (-0.6, 0.15, 0.0), (-0.5, 0.25, 0.5)),))
    handles = CandidatePool((
        Candidate3D((2,), (0.0, -0.035, 0.6), (-0.06, -0.05, 0.585), (0.06, -0.02, 0.615)),
        Candidate3D((3,), (0.0, -0.035, 0.2), (-0.06, -0.05, 0.185), (0.06, -0.02, 0.215)),
        Candidate3D((4,), (1.2, -0.00001, 0.2), (1.1, -0.02, 0.1), (1.3, 0.02, 0.3)),
    ))
    return build_graph(handles, cabinet, ("Handle", "cabinet"), scene_id="golden_lamp",
                       extra_ctx={"lamp": lamp})


GOLDEN = {"single": golden_single, "cabinet": golden_cabinet, "lamp": golden_lamp}
