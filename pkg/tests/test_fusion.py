import itertools
import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afford3d.errors import ContractViolation, ValidationError
from afford3d.fusion import (Candidate3D, VoteTable, VotingParams, accumulate_votes, cluster_candidates,
                             dbscan_labels, fuse, merge_candidates, overlap_stats, threshold_foreground,
                             wilson_lower_bound, wilson_lower_bounds)
from afford3d.scene_io import PointCloud

from oracles import blob_cloud, naive_dbscan, partition, vote_predicate, wilson_oracle

RHO0, THETA_VIS = 0.70, 3


def test_three_of_four_kept_three_of_three_dropped():
    votes = VoteTable(np.array([4, 3]), np.array([3, 3]))
    assert threshold_foreground(votes).tolist() == [0]


def test_voting_exhaustive_grid():
    pairs = [(f, v) for v in range(21) for f in range(v + 1)]
    votes = VoteTable(np.array([v for _, v in pairs]), np.array([f for f, _ in pairs]))
    got = set(threshold_foreground(votes, VotingParams(RHO0, THETA_VIS)).tolist())
    want = {i for i, (f, v) in enumerate(pairs) if v > 0 and vote_predicate(f, v)}
    assert got == want


def test_vote_table_invariant():
    with pytest.raises(ValidationError):
        VoteTable(np.array([1]), np.array([2]))


def test_voting_params_validated():
    with pytest.raises(ValidationError):
        VotingParams(rho0=1.0)
    with pytest.raises(ValidationError):
        VotingParams(mode="mean")


def test_wilson_reference_value():
    # 50-digit oracle: 0.30063605244263663454
    assert abs(wilson_lower_bound(3, 4) - 0.30063605244263663454) < 1e-12


def test_wilson_against_high_precision_grid():
    grid = [(s, n) for n in range(1, 21) for s in range(0, n + 1)][:200]
    assert len(grid) == 200
    scalar = [wilson_lower_bound(s, n) for s, n in grid]
    vector = wilson_lower_bounds([s for s, _ in grid], [n for _, n in grid])
    for (s, n), a, b in zip(grid, scalar, vector):
        want = float(wilson_oracle(s, n))
        assert abs(a - want) < 1e-9 and abs(b - want) < 1e-9


def test_wilson_contract():
    with pytest.raises(ContractViolation):
        wilson_lower_bound(1, 0)
    with pytest.raises(ContractViolation):
        wilson_lower_bound(3, 2)


def test_wilson_mode_is_stricter_than_ratio():
    votes = VoteTable(np.array([4, 40]), np.array([4, 38]))
    assert threshold_foreground(votes).tolist() == [0, 1]
    assert threshold_foreground(votes, VotingParams(mode="wilson")).tolist() == [1]


def test_accumulate_votes(tiny_scene):
    full = np.ones((96, 128), dtype=bool)
    left = np.zeros((96, 128), dtype=bool)
    left[:, :64] = True
    votes = accumulate_votes(tiny_scene.cloud, [(tiny_scene.frames[0], [full]),
                                                (tiny_scene.frames[1], [left])])
    assert votes.n_vis.tolist() == [2] * 9
    # x = -0.1 projects to u = 59 (left half), x = 0 to u = 64 (right half)
    assert votes.n_fg.tolist() == [2, 2, 2, 1, 1, 1, 1, 1, 1]


def test_accumulate_votes_bad_mask_shape(tiny_scene):
    with pytest.raises(ValidationError):
        accumulate_votes(tiny_scene.cloud, [(tiny_scene.frames[0], [np.ones((3, 3), bool)])])


def test_dbscan_matches_naive_reference():
    rng = np.random.default_rng(3)
    for _ in range(20):
        pts = blob_cloud(rng)
        assert partition(dbscan_labels(pts, 0.03, 5)) == partition(naive_dbscan(pts, 0.03, 5))


def test_dbscan_permutation_invariant():
    rng = np.random.default_rng(4)
    pts = blob_cloud(rng)
    base = partition(dbscan_labels(pts, 0.03, 5))
    for _ in range(5):
        perm = rng.permutation(len(pts))
        got = dbscan_labels(pts[perm], 0.03, 5)
        back = np.empty_like(got)
        back[perm] = got
        assert partition(back) == base


def test_dbscan_contract():
    with pytest.raises(ContractViolation):
        dbscan_labels(np.zeros((3, 3)), 0.0, 5)
    assert dbscan_labels(np.zeros((0, 3)), 0.03, 5).size == 0


def test_cluster_candidates_two_blobs():
    pts = np.concatenate([np.full((6, 3), 0.0), np.full((6, 3), 1.0), [[5.0, 5.0, 5.0]]])
    pts[:, 0] += np.arange(13) * 1e-3
    cloud = PointCloud(pts)
    cands = cluster_candidates(np.arange(13), cloud, eps=0.03, min_pts=5)
    assert [c.point_indices for c in cands] == [tuple(range(6)), tuple(range(6, 12))]
    assert cands[0].aabb_min[0] == 0.0 and cands[0].aabb_max[0] == pytest.approx(0.005)


def test_overlap_examples():
    # oracle values: nested 10 in 100 -> IoU 1/10, min-recall 1; 10/10 overlap 5 -> IoU 1/3
    assert overlap_stats(range(10), range(100)) == (0.1, 1.0)
    assert overlap_stats(range(10), range(5, 15)) == (1 / 3, 0.5)
    assert overlap_stats([1], [2]) == (0.0, 0.0)


def test_overlap_against_set_arithmetic():
    rng = random.Random(8)
    for _ in range(100):
        a = set(rng.sample(range(60), rng.randint(1, 40)))
        b = set(rng.sample(range(60), rng.randint(1, 40)))
        inter = len(a & b)
        want = (Fraction(inter, len(a | b)), Fraction(inter, min(len(a), len(b))))
        iou, rec = overlap_stats(a, b)
        assert iou == pytest.approx(float(want[0]), abs=1e-15)
        assert rec == pytest.approx(float(want[1]), abs=1e-15)


@pytest.fixture(scope="module")
def cloud():
    return PointCloud(np.random.default_rng(0).uniform(0, 1, size=(400, 3)))


def test_nested_candidates_merge(cloud):
    small = Candidate3D.from_points(range(10), cloud)
    big = Candidate3D.from_points(range(100), cloud)
    out = merge_candidates([small, big], cloud)
    assert [c.point_indices for c in out] == [tuple(range(100))]


def test_disjoint_candidates_stay_apart(cloud):
    a = Candidate3D.from_points(range(0, 20), cloud)
    b = Candidate3D.from_points(range(20, 30), cloud)
    assert len(merge_candidates([a, b], cloud)) == 2


def test_merge_thresholds_validated(cloud):
    with pytest.raises(ContractViolation):
        merge_candidates([], cloud, theta_iou=0.0)


def random_pool(rng, cloud, n):
    out = []
    for _ in range(n):
        start = rng.randint(0, 380)
        out.append(Candidate3D.from_points(range(start, start + rng.randint(1, 20)), cloud))
    return out


def check_fixed_point(pool, cands):
    for a, b in itertools.combinations(pool, 2):
        iou, rec = overlap_stats(a.point_indices, b.point_indices)
        assert iou <= 0.30 and rec <= 0.60
    assert set().union(*[c.point_indices for c in pool]) == set().union(*[c.point_indices for c in cands])


def test_merge_converges_to_fixed_point(cloud):
    rng = random.Random(2)
    for _ in range(50):
        cands = random_pool(rng, cloud, rng.randint(1, 50))
        check_fixed_point(merge_candidates(cands, cloud), cands)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 380), st.integers(1, 20)), min_size=1, max_size=30))
def test_merge_fixed_point_property(cloud, spans):
    cands = [Candidate3D.from_points(range(s, s + n), cloud) for s, n in spans]
    check_fixed_point(merge_candidates(cands, cloud), cands)


def test_fuse_records_params(tiny_scene):
    full = np.ones((96, 128), dtype=bool)
    pairs = [(tiny_scene.frames[i % 2], [full]) for i in range(4)]
    pool = fuse(tiny_scene.cloud, pairs, voting=VotingParams(theta_vis=1), eps=0.15, min_pts=3)
    assert len(pool) == 1 and len(pool[0]) == 9
    assert pool.params["theta_vis"] == 1 and pool.params["rho0"] == 0.7
