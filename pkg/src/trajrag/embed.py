"""Trajectory embeddings for the fine index and their contrastive training.

A node's sector vector is one-hot encoded per sector (fixed, not trained).
A trajectory is summarised by a position-decayed sum of node features plus
the mean element-wise product of consecutive features, which makes the
summary order-sensitive.  A trainable linear projection maps the summary to
``d_out`` dimensions; the normalised result is concatenated with a one-hot
goal block and normalised again.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, EmptyTrajectoryError
from .gridmap import FREE, N_SECTORS, OBSTACLE, UNKNOWN
from .topo import TopoPolarTrajectory

GAMMA = 0.8
TAU = 0.1
D_OUT = 64
_EPS = 1e-12


def alphabet_size(n_categories: int) -> int:
    return 3 + n_categories


def feature_dim(n_categories: int) -> int:
    return N_SECTORS * alphabet_size(n_categories)


def aggregate_dim(n_categories: int) -> int:
    return 2 * feature_dim(n_categories)


def _slots(sector, n_categories: int) -> np.ndarray:
    s = np.asarray(sector, dtype=np.int64)
    if s.shape != (N_SECTORS,):
        raise ValueError(f"sector vector must have {N_SECTORS} entries")
    slot = np.where(s == FREE, 0, np.where(s == OBSTACLE, 1, np.where(s == UNKNOWN, 2, s + 3)))
    if ((s < 0) & ~np.isin(s, (FREE, OBSTACLE, UNKNOWN))).any() or (s >= n_categories).any():
        raise ValueError(f"sector label outside alphabet of {n_categories} categories")
    return slot


def featurize_node(sector, n_categories: int) -> np.ndarray:
    """One-hot per sector, concatenated in sector order; length 12 * (3 + N_o)."""
    a = alphabet_size(n_categories)
    feat = np.zeros((N_SECTORS, a))
    feat[np.arange(N_SECTORS), _slots(sector, n_categories)] = 1.0
    return feat.ravel()


def aggregate_sequence(features: Sequence[np.ndarray], gamma: float = GAMMA) -> np.ndarray:
    """Decayed sum ``sum_t gamma^(L-t) f_t`` followed by the mean bigram product."""
    f = np.asarray(features, dtype=float)
    if f.ndim != 2 or len(f) == 0:
        raise EmptyTrajectoryError("cannot aggregate an empty sequence")
    L = len(f)
    weights = gamma ** np.arange(L - 1, -1, -1, dtype=float)
    decayed = weights @ f
    if L > 1:
        bigram = (f[:-1] * f[1:]).mean(axis=0)
    else:
        bigram = np.zeros(f.shape[1])
    return np.concatenate([decayed, bigram])


def trajectory_aggregate(traj: TopoPolarTrajectory, n_categories: int, gamma: float = GAMMA):
    if not len(traj.nodes):
        raise EmptyTrajectoryError("empty trajectory")
    return aggregate_sequence([featurize_node(n.sector, n_categories) for n in traj.nodes], gamma)


def goal_vector(goal: int, n_categories: int) -> np.ndarray:
    if not 0 <= goal < n_categories:
        raise ValueError(f"goal {goal} outside {n_categories} categories")
    g = np.zeros(n_categories)
    g[goal] = 1.0
    return g


@dataclass
class ProjectionParams:
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        if self.matrix.ndim != 2:
            raise ConfigError("projection must be a 2-D matrix")
        if not np.isfinite(self.matrix).all():
            raise ConfigError("projection has non-finite entries")

    @classmethod
    def random(cls, d_in: int, d_out: int = D_OUT, seed: int = 0) -> "ProjectionParams":
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((d_out, d_in)) / np.sqrt(d_in))

    @classmethod
    def for_categories(cls, n_categories: int, d_out: int = D_OUT, seed: int = 0):
        return cls.random(aggregate_dim(n_categories), d_out, seed)

    @property
    def d_in(self) -> int:
        return self.matrix.shape[1]

    @property
    def d_out(self) -> int:
        return self.matrix.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ProjectionParams):
            return NotImplemented
        return np.array_equal(self.matrix, other.matrix)


def _forward(W: np.ndarray, X: np.ndarray, G: np.ndarray):
    Y = X @ W.T
    ny = np.maximum(np.linalg.norm(Y, axis=1, keepdims=True), _EPS)
    U = Y / ny
    C = np.hstack([U, G])
    nc = np.linalg.norm(C, axis=1, keepdims=True)
    Z = C / nc
    return Y, ny, U, nc, Z


def embed_aggregate(x: np.ndarray, goal: int, params: ProjectionParams, n_categories: int):
    *_, Z = _forward(params.matrix, x[None, :], goal_vector(goal, n_categories)[None, :])
    return Z[0]


def embed_trajectory(
    traj: TopoPolarTrajectory,
    goal: int | None,
    params: ProjectionParams,
    n_categories: int,
    gamma: float = GAMMA,
) -> np.ndarray:
    """Unit-norm embedding: normalised projection of the summary joined with the goal."""
    goal = traj.goal_category if goal is None else goal
    x = trajectory_aggregate(traj, n_categories, gamma)
    if x.shape[0] != params.d_in:
        raise ConfigError(f"projection expects {params.d_in} inputs, summary has {x.shape[0]}")
    return embed_aggregate(x, goal, params, n_categories)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def contrastive_loss(anchor, positive, negatives, tau: float = TAU) -> float:
    """Softmax cross-entropy of the positive against the negatives (cosine / tau)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    a = np.asarray(anchor, dtype=float)
    cands = [np.asarray(positive, dtype=float)] + [np.asarray(n, dtype=float) for n in negatives]
    logits = np.array([cosine(a, c) for c in cands]) / tau
    m = logits.max()
    return float(m + np.log(np.exp(logits - m).sum()) - logits[0])


# -- batched training ------------------------------------------------------------


@dataclass
class ContrastiveBatch:
    """Aggregated inputs plus (anchor, positive, negatives) index triplets."""

    X: np.ndarray
    goals: np.ndarray
    n_categories: int
    triplets: list[tuple[int, int, tuple[int, ...]]]

    def __post_init__(self):
        if not self.triplets:
            raise ConfigError("contrastive batch has no usable anchor")
        for a, p, negs in self.triplets:
            if not negs:
                raise ConfigError(f"anchor {a} has no negatives")

    @property
    def G(self) -> np.ndarray:
        G = np.zeros((len(self.goals), self.n_categories))
        G[np.arange(len(self.goals)), self.goals] = 1.0
        return G

    @classmethod
    def from_trajectories(cls, trajs, goals, triplets, n_categories, gamma=GAMMA):
        X = np.array([trajectory_aggregate(t, n_categories, gamma) for t in trajs])
        return cls(X, np.asarray(goals, dtype=np.int64), n_categories, list(triplets))


def contrastive_objective(W: np.ndarray, batch: ContrastiveBatch, tau: float = TAU):
    """Mean loss over the batch triplets and its exact gradient w.r.t. ``W``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    X, G = batch.X, batch.G
    Y, ny, U, nc, Z = _forward(W, X, G)
    dZ = np.zeros_like(Z)
    total = 0.0
    for a, p, negs in batch.triplets:
        cand = np.array((p,) + tuple(negs))
        logits = Z[cand] @ Z[a] / tau
        m = logits.max()
        e = np.exp(logits - m)
        prob = e / e.sum()
        total += m + np.log(e.sum()) - logits[0]
        ds = prob.copy()
        ds[0] -= 1.0
        ds /= tau
        dZ[a] += ds @ Z[cand]
        np.add.at(dZ, cand, ds[:, None] * Z[a][None, :])
    n = len(batch.triplets)
    dZ /= n
    # back through the outer normalisation (tangent projection) and the inner one
    dC = (dZ - Z * (Z * dZ).sum(axis=1, keepdims=True)) / nc
    dU = dC[:, : U.shape[1]]
    dY = (dU - U * (U * dU).sum(axis=1, keepdims=True)) / ny
    return total / n, dY.T @ X


def contrastive_grad(params: ProjectionParams, batch: ContrastiveBatch, tau: float = TAU):
    """Gradient of the mean contrastive loss w.r.t. the projection matrix."""
    return contrastive_objective(params.matrix, batch, tau)[1]


def batch_loss(params: ProjectionParams, batch: ContrastiveBatch, tau: float = TAU) -> float:
    return contrastive_objective(params.matrix, batch, tau)[0]


@dataclass(frozen=True)
class LabeledTrajectory:
    trajectory: TopoPolarTrajectory
    group: int

    @property
    def goal(self) -> int:
        return self.trajectory.goal_category


def sample_triplets(
    groups: Sequence[int], goals: Sequence[int], n_negatives: int = 8, seed: int = 0
) -> list[tuple[int, int, tuple[int, ...]]]:
    """Positives share a group or a goal; negatives come from other groups."""
    groups = np.asarray(groups)
    goals = np.asarray(goals)
    if len(set(groups.tolist())) < 2:
        raise ConfigError("need at least two groups to draw negatives")
    rng = np.random.default_rng(seed)
    triplets = []
    idx = np.arange(len(groups))
    for i in idx:
        pos = idx[((groups == groups[i]) | (goals == goals[i])) & (idx != i)]
        neg = idx[groups != groups[i]]
        if len(pos) == 0 or len(neg) == 0:
            continue
        p = int(rng.choice(pos))
        k = min(n_negatives, len(neg))
        negs = tuple(int(v) for v in np.sort(rng.choice(neg, size=k, replace=False)))
        triplets.append((int(i), p, negs))
    return triplets


@dataclass
class TrainingRun:
    params: ProjectionParams
    losses: list[float] = field(default_factory=list)
    batch: ContrastiveBatch | None = None

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return min(self.losses)


def fit_projection(
    dataset: Sequence[LabeledTrajectory],
    n_categories: int,
    epochs: int = 100,
    lr: float = 0.5,
    tau: float = TAU,
    seed: int = 0,
    d_out: int = D_OUT,
    gamma: float = GAMMA,
    n_negatives: int = 8,
    init: ProjectionParams | None = None,
) -> TrainingRun:
    """Full-batch gradient descent on the contrastive loss; keeps the best iterate."""
    trajs = [d.trajectory for d in dataset]
    triplets = sample_triplets([d.group for d in dataset], [d.goal for d in dataset], n_negatives, seed)
    batch = ContrastiveBatch.from_trajectories(
        trajs, [d.goal for d in dataset], triplets, n_categories, gamma
    )
    params = init if init is not None else ProjectionParams.random(batch.X.shape[1], d_out, seed)
    W = params.matrix.copy()
    best_W, best_loss = W.copy(), None
    losses = []
    for _ in range(epochs + 1):
        loss, grad = contrastive_objective(W, batch, tau)
        losses.append(float(loss))
        if best_loss is None or loss < best_loss:
            best_loss, best_W = loss, W.copy()
        W = W - lr * grad
    return TrainingRun(ProjectionParams(best_W), losses, batch)


def train_projection(
    dataset: Sequence[LabeledTrajectory],
    n_categories: int,
    epochs: int = 100,
    lr: float = 0.5,
    tau: float = TAU,
    seed: int = 0,
    **kw,
) -> ProjectionParams:
    return fit_projection(dataset, n_categories, epochs, lr, tau, seed, **kw).params
