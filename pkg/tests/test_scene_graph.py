import re
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afford3d.errors import ResolutionError, ValidationError
from afford3d.fusion import Candidate3D, CandidatePool
from afford3d.query import SpatialDescriptor
from afford3d.scene_graph import (CTX, INT, GraphNode, SceneGraph, build_graph, extract_crops, ground_basis,
                                  parse_graph, rasterize_topdown, render_topdown, resolve_spatial,
                                  serialize_graph)

from graphs import GOLDEN, box_candidate, make_graph

GOLDEN_DIR = Path(__file__).parent / "golden"


@pytest.mark.parametrize("name", sorted(GOLDEN))
def test_golden_serialization(name):
    assert serialize_graph(GOLDEN[name]()) == (GOLDEN_DIR / f"graph_{name}.json").read_text()


@pytest.mark.parametrize("name", sorted(GOLDEN))
def test_golden_parses_back(name):
    text = (GOLDEN_DIR / f"graph_{name}.json").read_text()
    assert serialize_graph(parse_graph(text)) == text


def random_graph(rng, n_ctx, n_int):
    ctx = CandidatePool(tuple(box_candidate(rng.uniform(-2, 2, 3), 0.2, i) for i in range(n_ctx)))
    ints = CandidatePool(tuple(box_candidate(rng.uniform(-2, 2, 3), 0.02, 100 + i) for i in range(n_int)))
    return build_graph(ints, ctx, ("handle", "drawer"), scene_id="rand")


def test_round_trip_within_tolerance():
    rng = np.random.default_rng(1)
    for _ in range(20):
        g = random_graph(rng, 4, 6)
        back = parse_graph(serialize_graph(g))
        assert len(back.nodes) == 10
        for a, b in zip(g.nodes, back.nodes):
            assert (a.node_id, a.kind, a.label, a.parent_id) == (b.node_id, b.kind, b.label, b.parent_id)
            for u, v in ((a.centroid, b.centroid), (a.aabb_min, b.aabb_min), (a.aabb_max, b.aabb_max)):
                assert np.max(np.abs(np.subtract(u, v))) <= 5e-5 + 1e-12


def test_serialize_twice_identical():
    g = random_graph(np.random.default_rng(2), 3, 3)
    assert serialize_graph(g) == serialize_graph(g)


def test_parent_links():
    ctx = CandidatePool((Candidate3D((0,), (0, 0, 0), (-0.5, -0.5, -0.5), (0.5, 0.5, 0.5)),
                         Candidate3D((1,), (0, 0, 0.1), (-0.1, -0.1, 0.0), (0.1, 0.1, 0.2)),
                         Candidate3D((2,), (5, 0, 0), (4.9, -0.1, -0.1), (5.1, 0.1, 0.1))))
    ints = CandidatePool((box_candidate((0, 0, 0.12), first_index=3), box_candidate((5.12, 0, 0), first_index=4),
                          box_candidate((9, 9, 9), first_index=5)))
    g = build_graph(ints, ctx, ("handle", "drawer"))
    parents = [n.parent_id for n in g.int_nodes()]
    # nested boxes -> smaller one (node 2); 0.02 outside node 3 is inside the 0.05 margin; far point -> none
    assert parents == [2, 3, None]


def test_invalid_graphs_rejected():
    n = GraphNode(1, INT, "handle", (0, 0, 0), (0, 0, 0), (0, 0, 0))
    with pytest.raises(ValidationError):
        SceneGraph((GraphNode(2, INT, "handle", (0, 0, 0), (0, 0, 0), (0, 0, 0)),))
    with pytest.raises(ValidationError):
        SceneGraph((n, GraphNode(2, INT, "handle", (0, 0, 0), (0, 0, 0), (0, 0, 0), parent_id=1)))
    with pytest.raises(ValidationError):
        GraphNode(1, CTX, "drawer", (0, 0, 0), (0, 0, 0), (0, 0, 0), parent_id=1)


def test_ground_basis_for_z_up():
    e1, e2 = ground_basis((0, 0, 1))
    np.testing.assert_allclose(e1, [1, 0, 0])
    np.testing.assert_allclose(e2, [0, 1, 0])


def _rects(svg):
    return [tuple(float(x) for x in m) for m in
            re.findall(r'<rect x="([\d.]+)" y="([\d.]+)" width="([\d.]+)" height="([\d.]+)" fill="none"', svg)]


def _labels(svg):
    return [(float(x), int(t)) for x, t in re.findall(r'<text x="([\d.\-]+)" [^>]*>(\d+)</text>', svg)]


def test_single_box_is_centred():
    g = SceneGraph((GraphNode(1, CTX, "drawer", (0, 0, 0), (-0.5, -0.5, 0), (0.5, 0.5, 1)),))
    svg = render_topdown(g)
    (x, y, w, h), = _rects(svg)
    assert (x + w / 2, y + h / 2) == (512.0, 512.0)
    assert [t for _, t in _labels(svg)] == [1]


def test_label_order_follows_lateral_axis():
    g = make_graph([(0.5, 0, 0), (0.0, 0, 0)])
    labels = sorted(_labels(render_topdown(g)))
    assert [t for _, t in labels] == [2, 1]
    assert "<line" not in render_topdown(g)


def test_overlapping_boxes_get_leader_lines():
    g = make_graph([(0.0, 0, 0), (0.005, 0, 0)])
    assert render_topdown(g).count("<line") == 2


def test_svg_deterministic_with_cloud(synth7):
    g = make_graph([(0.0, 0, 0.3), (0.1, 0, 0.6)], ctx=[("drawer", (0, 0, 0.3))])
    a = render_topdown(g, synth7.scene.cloud)
    assert a == render_topdown(g, synth7.scene.cloud)
    assert a.count("<circle") <= 4000
    img = rasterize_topdown(g, synth7.scene.cloud)
    assert img.shape == (1024, 1024, 3)
    assert np.array_equal(img, rasterize_topdown(g, synth7.scene.cloud))


def test_resolver_ordinal_from_top():
    g = make_graph([(0, 0, 1.2), (0, 0, 0.9), (0, 0, 0.6)])
    assert resolve_spatial(g, SpatialDescriptor.ordinal(2, "top"), "handle") == 2


def test_resolver_nearest():
    g = make_graph([(0, 0, 1.5), (0, 0, 3.0)], ctx=[("window", (0, 0, 1))])
    assert resolve_spatial(g, SpatialDescriptor.nearest("window"), "handle") == 2


def test_resolver_rank_too_large():
    g = make_graph([(0, 0, 1.2), (0, 0, 0.9), (0, 0, 0.6)])
    with pytest.raises(ResolutionError):
        resolve_spatial(g, SpatialDescriptor.ordinal(4, "top"), "handle")


def test_resolver_missing_reference_and_label():
    g = make_graph([(0, 0, 1.2)])
    with pytest.raises(ResolutionError):
        resolve_spatial(g, SpatialDescriptor.nearest("lamp"), "handle")
    with pytest.raises(ResolutionError):
        resolve_spatial(g, None, "knob")


def test_resolver_without_descriptor():
    g = make_graph([(0, 0, 1.2), (0, 0, 0.2)])
    assert resolve_spatial(g, SpatialDescriptor(), "handle") == 1
    assert resolve_spatial(make_graph([(3, 0, 0)]), None, "handle") == 1


def test_crops_and_invisible_nodes(synth7):
    scene = synth7.scene
    handle = synth7.instances("handle")[0]
    idx = synth7.instance_points(handle.instance)
    pts = scene.cloud.points[idx]
    nodes = (GraphNode(1, INT, "handle", tuple(pts.mean(0)), tuple(pts.min(0)), tuple(pts.max(0)), None,
                       tuple(int(i) for i in idx)),
             GraphNode(2, INT, "handle", (9, 9, 9), (9, 9, 9), (9, 9, 9), None, ()))
    crops, warnings = extract_crops(SceneGraph(nodes), scene)
    assert set(crops) == {1}
    assert warnings == [{"node_id": 2, "reason": "not visible in any frame"}]
    h, w = scene.frames[0].shape
    assert crops[1].ndim == 3 and crops[1].shape[0] <= h and crops[1].shape[1] <= w


coords = st.floats(-3, 3, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.lists(coords, min_size=1, max_size=8, unique=True), st.integers(0, 7),
       st.sampled_from([("top", "bottom", 2), ("left", "right", 0), ("front", "back", 1)]))
def test_ordinal_reversal(values, k, axes):
    first, second, axis = axes
    cents = [[0.0, 0.0, 0.0] for _ in values]
    for c, v in zip(cents, values):
        c[axis] = v
    g = make_graph(cents)
    n = len(values)
    k = k % n + 1
    assert (resolve_spatial(g, SpatialDescriptor.ordinal(k, first), "handle")
            == resolve_spatial(g, SpatialDescriptor.ordinal(n + 1 - k, second), "handle"))


# multiples of 1/8 keep every shift and distance exact in floating point
eighths = st.integers(-24, 24).map(lambda i: i / 8)
points = st.tuples(eighths, eighths, eighths)


@settings(max_examples=100, deadline=None)
@given(st.lists(points, min_size=2, max_size=6, unique=True), points, points)
def test_translation_equivariance(cents, lamp, shift):
    g = make_graph(cents, ctx=[("lamp", lamp)])
    moved = make_graph([np.add(c, shift) for c in cents], ctx=[("lamp", np.add(lamp, shift))])
    for d in (SpatialDescriptor.ordinal(1, "top"), SpatialDescriptor.ordinal(2, "left"),
              SpatialDescriptor.nearest("lamp"), SpatialDescriptor.related("right_of", "lamp")):
        try:
            want = resolve_spatial(g, d, "handle")
        except ResolutionError:
            with pytest.raises(ResolutionError):
                resolve_spatial(moved, d, "handle")
            continue
        assert resolve_spatial(moved, d, "handle") == want
