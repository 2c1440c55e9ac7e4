import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trajrag.errors import MatchError
from trajrag.gridmap import FREE, OBSTACLE, UNKNOWN
from trajrag.match import (
    Correspondence,
    MatchResult,
    Se2Transform,
    estimate_se2_ransac,
    fit_se2,
    match_nodes,
    mutual_knn,
    node_similarity,
    rotate_sector,
    sector_similarity,
    semantic_match,
    similarity_matrix,
    wrap_angle,
)
from trajrag.topo import TopoNode

sector_st = st.lists(st.integers(-3, 4), min_size=12, max_size=12)


# -- oracles ----------------------------------------------------------------------


def rot_oracle(s, k):
    return [s[(i - k) % 12] for i in range(12)]


def sim_oracle(a, b, w_sem=2.0, w_struct=1.0):
    got = total = 0.0
    for x, y in zip(a, b):
        w = w_sem if x >= 0 else w_struct
        total += w
        if x == y:
            got += w
    return got / total


def node_sim_oracle(a, b):
    best, best_k = -1.0, None
    for k in range(12):
        v = sim_oracle(rot_oracle(list(a), k), list(b))
        if v > best:
            best, best_k = v, k
    return best, best_k


def knn_oracle(S, K):
    n, m = S.shape
    rows = [set(sorted(range(m), key=lambda j: (-S[i, j], j))[:K]) for i in range(n)]
    cols = [set(sorted(range(n), key=lambda i: (-S[i, j], i))[:K]) for j in range(m)]
    return sorted((i, j) for i in range(n) for j in range(m) if j in rows[i] and i in cols[j] and S[i, j] > 0)


def planted(seed, n_in, n_out, theta=None, t=None):
    """Correspondences with ``n_in`` exact inliers and ``n_out`` far outliers."""
    rng = np.random.default_rng(seed)
    T = Se2Transform(rng.uniform(-math.pi, math.pi) if theta is None else theta, rng.uniform(-5, 5, 2) if t is None else t)
    src = rng.uniform(-6, 6, (n_in + n_out, 2))
    dst = T.apply(src)
    for k in range(n_in, n_in + n_out):
        while True:
            cand = rng.uniform(-12, 12, 2)
            if np.linalg.norm(cand - dst[k]) > 2.0:
                dst[k] = cand
                break
    corr = [Correspondence(k, 1000 + k, 1.0) for k in range(n_in + n_out)]
    qpos = {k: src[k] for k in range(n_in + n_out)}
    tpos = {1000 + k: dst[k] for k in range(n_in + n_out)}
    return T, corr, qpos, tpos


def rot_err(a, b):
    return abs(wrap_angle(a.rotation - b.rotation))


def trans_err(a, b):
    return float(np.hypot(*(np.subtract(a.translation, b.translation))))


# -- rotation and similarity ------------------------------------------------------


def test_rotate_examples():
    s = [OBSTACLE] + [FREE] * 11
    assert list(rotate_sector(s, 0)) == s
    assert list(rotate_sector(s, 12)) == s
    out = list(rotate_sector(s, 3))
    assert out[3] == OBSTACLE and out.count(OBSTACLE) == 1


@given(sector_st, st.integers(-30, 30))
def test_rotate_matches_oracle(s, k):
    assert list(rotate_sector(s, k)) == rot_oracle(s, k)


def test_sector_similarity_examples():
    a = [0, 1, OBSTACLE, FREE, UNKNOWN, 2] * 2
    assert sector_similarity(a, a) == 1.0
    assert sector_similarity([FREE] * 12, [OBSTACLE] * 12) == 0.0
    b = [OBSTACLE] * 6 + [FREE] * 6
    assert sector_similarity([OBSTACLE] * 12, b) == 0.5


@given(sector_st, sector_st)
def test_sector_similarity_matches_oracle(a, b):
    assert sector_similarity(a, b) == pytest.approx(sim_oracle(a, b), abs=1e-12)


def test_node_similarity_examples():
    a = [0, 1, OBSTACLE, FREE, UNKNOWN, 2, FREE, FREE, OBSTACLE, FREE, FREE, FREE]
    assert node_similarity(rotate_sector(a, 5), a) == (1.0, 7)
    score, k = node_similarity(a, rotate_sector(a, 5))
    assert (score, k) == (1.0, 5)
    assert node_similarity([FREE] * 12, [FREE] * 12) == (1.0, 0)


@given(sector_st, sector_st)
def test_node_similarity_matches_oracle(a, b):
    score, k = node_similarity(a, b)
    want, want_k = node_sim_oracle(a, b)
    assert score == pytest.approx(want, abs=1e-12)
    assert k == want_k


@given(sector_st, sector_st, st.integers(0, 11))
def test_node_similarity_rotation_invariant(a, b, k):
    assert node_similarity(rotate_sector(a, k), b)[0] == pytest.approx(node_similarity(a, b)[0], abs=1e-12)
    assert node_similarity(a, rotate_sector(b, k))[0] == pytest.approx(node_similarity(a, b)[0], abs=1e-12)


@given(sector_st, st.randoms(use_true_random=False))
def test_node_similarity_symmetric_on_equal_multisets(a, rnd):
    b = list(a)
    rnd.shuffle(b)
    assert node_similarity(a, b)[0] == pytest.approx(node_similarity(b, a)[0], abs=1e-12)


# -- mutual KNN -------------------------------------------------------------------


def nodes_from(sectors, base=0):
    return [TopoNode(base + i, s, (float(i), 0.0)) for i, s in enumerate(sectors)]


def test_identical_sets_k1_identity():
    rng = np.random.default_rng(3)
    sec = [tuple(rng.integers(-3, 4, 12)) for _ in range(6)]
    corr = semantic_match(nodes_from(sec), nodes_from(sec, 100), K=1)
    assert sorted((c.query, c.target) for c in corr) == [(i, 100 + i) for i in range(6)]


def test_zero_score_query_excluded():
    q = nodes_from([(0,) * 12, (OBSTACLE,) * 12])
    t = nodes_from([(OBSTACLE,) * 12, (FREE,) * 12], 10)
    pairs = {(c.query, c.target) for c in semantic_match(q, t, K=2)}
    assert all(qid != 0 for qid, _ in pairs)
    assert (1, 10) in pairs


@given(st.integers(0, 100_000), st.integers(1, 5))
def test_mutual_knn_matches_oracle(seed, K):
    rng = np.random.default_rng(seed)
    q = rng.integers(-3, 3, (8, 12))
    t = rng.integers(-3, 3, (8, 12))
    S = similarity_matrix(q, t)
    got = mutual_knn(S, K)
    assert got == knn_oracle(S, K)
    one_way = {(i, j) for i in range(8) for j in sorted(range(8), key=lambda j: (-S[i, j], j))[:K]}
    assert set(got) <= one_way


def test_knn_rejects_bad_k():
    with pytest.raises(ValueError):
        mutual_knn(np.ones((2, 2)), 0)


# -- transforms -------------------------------------------------------------------


@given(st.floats(-10, 10), st.floats(-50, 50), st.floats(-50, 50))
def test_se2_inverse_and_compose(theta, x, y):
    T = Se2Transform(theta, (x, y))
    p = np.array([[1.5, -2.0], [0.0, 3.0]])
    assert np.allclose(T.apply(T.inverse().apply(p)), p, atol=1e-9)
    I = T.compose(T.inverse())
    assert abs(I.rotation) < 1e-9 and np.allclose(I.translation, 0, atol=1e-9)
    assert -math.pi < T.rotation <= math.pi


def test_fit_se2_exact():
    T = Se2Transform(0.7, (2.0, -1.0))
    src = np.array([[0, 0], [1, 0], [0, 2], [3, 1.0]])
    fit = fit_se2(src, T.apply(src))
    assert rot_err(fit, T) < 1e-12 and trans_err(fit, T) < 1e-12


# -- RANSAC -----------------------------------------------------------------------


def test_ransac_noiseless_planted():
    T, corr, q, t = planted(0, 10, 0, theta=math.radians(30), t=(1.0, -0.5))
    res = estimate_se2_ransac(corr, q, t, seed=1)
    assert rot_err(res.transform, T) < 1e-6 and trans_err(res.transform, T) < 1e-6
    assert res.inlier_ratio == 1.0


def test_ransac_with_outliers():
    T, corr, q, t = planted(1, 10, 4, theta=math.radians(30), t=(1.0, -0.5))
    res = estimate_se2_ransac(corr, q, t, seed=2)
    assert rot_err(res.transform, T) < 1e-3 and trans_err(res.transform, T) < 1e-3
    assert res.inlier_ratio >= 10 / 14


def test_ransac_identity():
    pts = {i: (float(i), float(i * i % 5)) for i in range(6)}
    corr = [Correspondence(i, i, 1.0) for i in range(6)]
    res = estimate_se2_ransac(corr, pts, pts)
    assert rot_err(res.transform, Se2Transform()) < 1e-12
    assert trans_err(res.transform, Se2Transform()) < 1e-12
    assert res.inlier_ratio == 1.0


def test_ransac_requires_two_pairs():
    with pytest.raises(MatchError):
        estimate_se2_ransac([Correspondence(0, 0, 1.0)], {0: (0, 0)}, {0: (0, 0)})


def test_ransac_deterministic():
    _, corr, q, t = planted(5, 8, 5)
    a = estimate_se2_ransac(corr, q, t, seed=9)
    b = estimate_se2_ransac(corr, q, t, seed=9)
    assert a == b


@given(st.integers(0, 100_000), st.integers(6, 15))
def test_ransac_sixty_percent_inliers(seed, n_in):
    n_out = int(n_in * 0.4 / 0.6)
    T, corr, q, t = planted(seed, n_in, n_out)
    res = estimate_se2_ransac(corr, q, t, iters=128, seed=seed)
    assert rot_err(res.transform, T) < 1e-6 and trans_err(res.transform, T) < 1e-6


def test_rotation_consistency_filters_wrong_turns():
    """A pair whose best sector shift contradicts the hypothesis is not an inlier."""
    a = [0, OBSTACLE, FREE, FREE, 1, FREE, FREE, FREE, OBSTACLE, FREE, FREE, FREE]
    b = [2, FREE, OBSTACLE, FREE, FREE, FREE, 1, FREE, FREE, FREE, FREE, OBSTACLE]
    q = [TopoNode(0, a, (0, 0)), TopoNode(1, b, (2, 0)), TopoNode(2, a, (0, 2))]
    # targets: same layout, no rotation, but node 2's partner turned by 90 degrees
    t = [TopoNode(10, a, (5, 5)), TopoNode(11, b, (7, 5)), TopoNode(12, rotate_sector(a, 3), (5, 7))]
    res = match_nodes(q, t, K=1)
    assert abs(res.transform.rotation) < 1e-9
    assert {(c.query, c.target) for c in res.inliers} == {(0, 10), (1, 11)}


# -- match results ----------------------------------------------------------------


def test_single_node_query_matches_by_shift():
    a = [0, OBSTACLE, FREE, FREE, 1, FREE, FREE, FREE, OBSTACLE, FREE, FREE, FREE]
    res = match_nodes([TopoNode(0, a, (1.0, 0.0))], [TopoNode(5, rotate_sector(a, 3), (4.0, 4.0))], K=3)
    assert res.transform.sector_shift == 3
    assert np.allclose(res.transform.apply((1.0, 0.0)), (4.0, 4.0))
    assert res.is_valid(n_query=1)


def test_match_nodes_none_without_pairs():
    q = [TopoNode(0, (0,) * 12, (0, 0))]
    t = [TopoNode(0, (OBSTACLE,) * 12, (0, 0))]
    assert match_nodes(q, t) is None


def test_is_valid_rule():
    inl = [Correspondence(i, i, 0.9) for i in range(4)]
    r = MatchResult(Se2Transform(), 4 / 12, inl, 12, 6)
    assert r.node_inlier_ratio == pytest.approx(4 / 6)
    assert r.is_valid(0.5, 4, n_query=6, min_similarity=0.75)
    assert not r.is_valid(0.5, 4, n_query=6, min_similarity=0.95)
    assert not r.is_valid(0.7, 4, n_query=6)
    small = MatchResult(Se2Transform(), 1.0, inl[:2], 2, 2)
    assert small.is_valid(0.5, 4, n_query=4)
    assert not small.is_valid(0.5, 4, n_query=10)
    assert r.score == pytest.approx(4 / 6 * 0.9)
    assert "node ratio" in str(r)
