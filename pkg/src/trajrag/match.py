"""Node matching under heading changes, mutual-KNN filtering and SE(2) RANSAC."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import MatchError
from .gridmap import N_SECTORS

W_SEM = 2.0
W_STRUCT = 1.0
RANSAC_ITERS = 256
INLIER_TOL = 0.5
MIN_INLIER_RATIO = 0.5
MIN_INLIERS = 4
MIN_MEAN_SIMILARITY = 0.75


def wrap_angle(a: float) -> float:
    """Map an angle into (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


@dataclass(frozen=True)
class Se2Transform:
    rotation: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "rotation", wrap_angle(float(self.rotation)))
        t = self.translation
        object.__setattr__(self, "translation", (float(t[0]), float(t[1])))

    @property
    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return np.array([[c, -s], [s, c]])

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        out = pts.reshape(-1, 2) @ self.matrix.T + np.asarray(self.translation)
        return out.reshape(pts.shape)

    def inverse(self) -> "Se2Transform":
        r = self.matrix
        t = -(r.T @ np.asarray(self.translation))
        return Se2Transform(-self.rotation, (t[0], t[1]))

    def compose(self, other: "Se2Transform") -> "Se2Transform":
        """``self`` after ``other``: x -> self(other(x))."""
        t = self.matrix @ np.asarray(other.translation) + np.asarray(self.translation)
        return Se2Transform(self.rotation + other.rotation, (t[0], t[1]))

    @property
    def sector_shift(self) -> int:
        """Rotation rounded to whole 30 degree sectors."""
        return int(round(self.rotation / (2.0 * math.pi / N_SECTORS))) % N_SECTORS

    def __str__(self):
        return (
            f"rot={math.degrees(self.rotation):.3f}deg "
            f"t=({self.translation[0]:.4f}, {self.translation[1]:.4f})"
        )


@dataclass(frozen=True)
class Correspondence:
    query: int
    target: int
    score: float
    shift: int = 0  # best sector rotation of the query node onto the target
    shift_scores: tuple[float, ...] | None = field(default=None, compare=False, repr=False)


@dataclass
class MatchResult:
    """RANSAC outcome.

    ``inlier_ratio`` counts correspondences.  Mutual KNN with K > 1 gives a
    query node several candidate partners of which at most one can be
    geometrically right, so acceptance uses ``node_inlier_ratio``: the share of
    corresponded query nodes that have at least one inlier.
    """

    transform: Se2Transform
    inlier_ratio: float
    inliers: list[Correspondence] = field(default_factory=list)
    n_correspondences: int = 0
    n_query_nodes: int = 0

    @property
    def n_inliers(self) -> int:
        return len(self.inliers)

    @property
    def n_inlier_nodes(self) -> int:
        return len({c.query for c in self.inliers})

    @property
    def node_inlier_ratio(self) -> float:
        if self.n_query_nodes == 0:
            return self.inlier_ratio
        return self.n_inlier_nodes / self.n_query_nodes

    @property
    def mean_inlier_score(self) -> float:
        if not self.inliers:
            return 0.0
        return float(np.mean([c.score for c in self.inliers]))

    @property
    def score(self) -> float:
        """Combined geometric-semantic score used for ranking groups."""
        return self.node_inlier_ratio * self.mean_inlier_score

    def is_valid(
        self,
        min_ratio: float = MIN_INLIER_RATIO,
        min_inliers: int = MIN_INLIERS,
        n_query: int | None = None,
        min_similarity: float = 0.0,
    ) -> bool:
        """Acceptance test for merging.

        The absolute inlier floor scales with query length: half the query's
        nodes, at least two points (one for a single-node query), at most
        ``min_inliers``.  ``min_similarity`` bounds the mean inlier similarity,
        which rejects alignments built from weak semantic pairs.
        """
        if n_query is None:
            need = min_inliers
        elif n_query <= 1:
            need = 1
        else:
            need = min(min_inliers, max(2, n_query // 2))
        return (
            self.node_inlier_ratio >= min_ratio
            and self.n_inlier_nodes >= need
            and self.mean_inlier_score >= min_similarity
        )

    def __str__(self):
        lines = [
            f"transform   {self.transform}",
            f"inliers     {self.n_inliers}/{self.n_correspondences} (ratio {self.inlier_ratio:.3f})",
            f"node ratio  {self.n_inlier_nodes}/{self.n_query_nodes} ({self.node_inlier_ratio:.3f})",
        ]
        lines += [f"  {c.query} -> {c.target}  sim={c.score:.3f}" for c in self.inliers]
        return "\n".join(lines)


# -- semantic similarity --------------------------------------------------------


# _ROT[k] gathers rotate_sector(., k): output[i] = s[(i - k) mod 12]; _FWD[k] undoes it
_ROT = (np.arange(N_SECTORS)[None, :] - np.arange(N_SECTORS)[:, None]) % N_SECTORS
_FWD = (np.arange(N_SECTORS)[None, :] + np.arange(N_SECTORS)[:, None]) % N_SECTORS


def rotate_sector(s, k: int) -> np.ndarray:
    """Cyclic shift: output[i] = s[(i - k) mod 12]."""
    return np.asarray(s)[..., _ROT[int(k) % N_SECTORS]]


def _weights(a: np.ndarray, w_sem: float, w_struct: float) -> np.ndarray:
    return np.where(a >= 0, w_sem, w_struct)


def sector_similarity(a, b, w_sem: float = W_SEM, w_struct: float = W_STRUCT) -> float:
    """Weighted per-sector agreement normalised by ``a``'s maximum weight."""
    a = np.asarray(a)
    b = np.asarray(b)
    w = _weights(a, w_sem, w_struct)
    return float((w * (a == b)).sum() / w.sum())


def similarity_tensor(
    query: np.ndarray, target: np.ndarray, w_sem: float = W_SEM, w_struct: float = W_STRUCT
) -> np.ndarray:
    """Scores for every (query, target, rotation); shape (n, m, 12)."""
    q = np.asarray(query).reshape(-1, N_SECTORS)
    t = np.asarray(target).reshape(-1, N_SECTORS)
    rot = q[:, _ROT]  # (n, k, 12): rot[i, k] = rotate_sector(q[i], k)
    w = _weights(q, w_sem, w_struct)
    wrot = w[:, _ROT]
    agree = rot[:, None, :, :] == t[None, :, None, :]
    achieved = (wrot[:, None, :, :] * agree).sum(axis=-1)
    return achieved / w.sum(axis=1)[:, None, None]


def node_similarity(a, b, w_sem: float = W_SEM, w_struct: float = W_STRUCT) -> tuple[float, int]:
    """Best score over the 12 rotations of ``a``; ties resolve to the smallest shift."""
    a = np.asarray(a)
    w = _weights(a, w_sem, w_struct)
    # rotating a by k and comparing to b equals comparing a to b rotated by -k
    scores = (np.asarray(b)[_FWD] == a).astype(float) @ w / w.sum()
    k = int(np.argmax(scores))
    return float(scores[k]), k


def similarity_matrix(query: np.ndarray, target: np.ndarray, **kw) -> np.ndarray:
    return similarity_tensor(query, target, **kw).max(axis=-1)


def _topk_mask(scores: np.ndarray, k: int, axis: int) -> np.ndarray:
    """Boolean mask of the top-k entries along ``axis`` (lower index wins ties)."""
    s = np.moveaxis(scores, axis, -1)
    order = np.argsort(-s, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(s.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return np.moveaxis(mask, -1, axis)


def mutual_knn(scores: np.ndarray, k: int) -> list[tuple[int, int]]:
    """Index pairs (i, j) that sit in each other's top-k with positive score."""
    if k < 1:
        raise ValueError("K must be >= 1")
    if scores.size == 0:
        return []
    keep = _topk_mask(scores, k, 1) & _topk_mask(scores, k, 0) & (scores > 0)
    return [(int(i), int(j)) for i, j in zip(*np.nonzero(keep))]


def semantic_match(query_nodes, target_nodes, K: int = 3, **kw) -> list[Correspondence]:
    """Mutual-KNN correspondences between two node lists (node ids in the output)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if not len(query_nodes) or not len(target_nodes):
        return []
    q = np.array([n.sector for n in query_nodes])
    t = np.array([n.sector for n in target_nodes])
    tensor = similarity_tensor(q, t, **kw)
    s = tensor.max(axis=-1)
    best_k = tensor.argmax(axis=-1)
    return [
        Correspondence(
            query_nodes[i].id,
            target_nodes[j].id,
            float(s[i, j]),
            int(best_k[i, j]),
            tuple(float(v) for v in tensor[i, j]),
        )
        for i, j in mutual_knn(s, K)
    ]


# -- geometric matching ---------------------------------------------------------


def fit_se2(src: np.ndarray, dst: np.ndarray) -> Se2Transform:
    """Closed-form least-squares rigid fit mapping ``src`` onto ``dst``."""
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - mu_s, dst - mu_d
    dot = (a * b).sum()
    cross = (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]).sum()
    theta = math.atan2(cross, dot)
    c, s = math.cos(theta), math.sin(theta)
    t = mu_d - np.array([c * mu_s[0] - s * mu_s[1], s * mu_s[0] + c * mu_s[1]])
    return Se2Transform(theta, (t[0], t[1]))


def _residuals(theta, t, src, dst):
    c, s = np.cos(theta), np.sin(theta)
    x = c[:, None] * src[None, :, 0] - s[:, None] * src[None, :, 1] + t[:, 0:1]
    y = s[:, None] * src[None, :, 0] + c[:, None] * src[None, :, 1] + t[:, 1:2]
    return np.hypot(x - dst[None, :, 0], y - dst[None, :, 1])


def _shift_table(corr) -> np.ndarray | None:
    """(n, 12) per-shift similarities when every pair carries them, else None."""
    if not corr or any(c.shift_scores is None for c in corr):
        return None
    return np.array([c.shift_scores for c in corr], dtype=float)


def _rotation_consistent(theta, table: np.ndarray | None, n: int) -> np.ndarray:
    """Mask (len(theta), n): the hypothesis rotation, within one sector, is a best
    rotation for the pair.  All True without a shift table."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if table is None:
        return np.ones((len(theta), n), dtype=bool)
    k = np.rint(theta / (2.0 * math.pi / N_SECTORS)).astype(np.int64)
    near = np.stack([table[:, (k + d) % N_SECTORS].T for d in (-1, 0, 1)]).max(axis=0)
    return near >= table.max(axis=1)[None, :] - 1e-9


def _shift_hypothesis(corr, src, dst, inlier_tol):
    """Best single-correspondence hypothesis, rotation taken from the sector shift.

    Used when no two correspondences span distinct points (e.g. a one-node
    query), where a two-point fit is impossible.
    """
    best, best_key, best_inl = None, None, None
    for c, p, q in zip(corr, src, dst):
        theta = c.shift * 2.0 * math.pi / N_SECTORS
        cs, sn = math.cos(theta), math.sin(theta)
        T = Se2Transform(theta, (q[0] - (cs * p[0] - sn * p[1]), q[1] - (sn * p[0] + cs * p[1])))
        inl = np.hypot(*(T.apply(src) - dst).T) <= inlier_tol
        inl &= _rotation_consistent(T.rotation, _shift_table(corr), len(corr))[0]
        key = (int(inl.sum()), c.score)
        if best_key is None or key > best_key:
            best, best_key, best_inl = T, key, inl
    return best, best_inl


def estimate_se2_ransac(
    corr: Sequence[Correspondence],
    query_pos: Mapping[int, Sequence[float]],
    target_pos: Mapping[int, Sequence[float]],
    iters: int = RANSAC_ITERS,
    inlier_tol: float = INLIER_TOL,
    seed: int = 0,
) -> MatchResult:
    """Seeded two-point RANSAC for a planar rigid transform, then inlier refit.

    Hypotheses come from random pairs of correspondences; pairs whose source or
    target points coincide are skipped and redrawn.  The best hypothesis
    (largest summed inlier similarity, then most inliers, then earliest draw)
    is refined by least squares on its inliers until the inlier set stops
    growing.

    Correspondences that carry per-shift similarities (as produced by
    :func:`semantic_match`) only count as inliers when the hypothesis rotation
    agrees, to within one sector, with a best rotation of the node pair.
    """
    n = len(corr)
    if n < 2:
        raise MatchError(f"need at least 2 correspondences, got {n}")
    src = np.array([query_pos[c.query] for c in corr], dtype=float)
    dst = np.array([target_pos[c.target] for c in corr], dtype=float)
    table = _shift_table(corr)
    rng = np.random.default_rng(seed)

    i = rng.integers(0, n, size=iters * 2)
    j = rng.integers(0, n - 1, size=iters * 2)
    j = j + (j >= i)
    ds = src[j] - src[i]
    dd = dst[j] - dst[i]
    ok = (np.hypot(ds[:, 0], ds[:, 1]) > 1e-9) & (np.hypot(dd[:, 0], dd[:, 1]) > 1e-9)
    i, j, ds, dd = i[ok][:iters], j[ok][:iters], ds[ok][:iters], dd[ok][:iters]
    if len(i) == 0:
        best, inl = _shift_hypothesis(corr, src, dst, inlier_tol)
    else:
        theta = np.arctan2(dd[:, 1], dd[:, 0]) - np.arctan2(ds[:, 1], ds[:, 0])
        c, s = np.cos(theta), np.sin(theta)
        t = np.column_stack(
            [
                dst[i, 0] - (c * src[i, 0] - s * src[i, 1]),
                dst[i, 1] - (s * src[i, 0] + c * src[i, 1]),
            ]
        )
        res = _residuals(theta, t, src, dst)
        hits = (res <= inlier_tol) & _rotation_consistent(theta, table, n)
        # summed inlier similarity, ties to the most inliers, then the earliest draw
        weight = hits @ np.array([c.score for c in corr], dtype=float)
        counts = hits.sum(axis=1)
        top = np.flatnonzero(weight >= weight.max() - 1e-12)
        b = int(top[np.argmax(counts[top])])
        best = Se2Transform(float(theta[b]), (t[b, 0], t[b, 1]))
        inl = hits[b]

    for _ in range(5):
        if inl.sum() < 2:
            break
        refit = fit_se2(src[inl], dst[inl])
        new_inl = np.hypot(*(refit.apply(src) - dst).T) <= inlier_tol
        new_inl &= _rotation_consistent(refit.rotation, table, n)[0]
        if new_inl.sum() < inl.sum():
            break
        best = refit
        if np.array_equal(new_inl, inl):
            break
        inl = new_inl

    inliers = [c for c, flag in zip(corr, inl) if flag]
    return MatchResult(best, len(inliers) / n, inliers, n, len({c.query for c in corr}))


def match_nodes(
    query_nodes,
    target_nodes,
    K: int = 3,
    iters: int = RANSAC_ITERS,
    inlier_tol: float = INLIER_TOL,
    seed: int = 0,
) -> MatchResult | None:
    """Semantic matching followed by RANSAC; None when no pair survives.

    A single correspondence is aligned through its best sector rotation.
    """
    corr = semantic_match(query_nodes, target_nodes, K)
    if not corr:
        return None
    qpos = {n.id: n.position for n in query_nodes}
    tpos = {n.id: n.position for n in target_nodes}
    if len(corr) == 1:
        src = np.array([qpos[corr[0].query]], dtype=float)
        dst = np.array([tpos[corr[0].target]], dtype=float)
        T, inl = _shift_hypothesis(corr, src, dst, inlier_tol)
        inliers = [c for c, f in zip(corr, inl) if f]
        return MatchResult(T, len(inliers), inliers, 1, 1)
    return estimate_se2_ransac(corr, qpos, tpos, iters, inlier_tol, seed)
