"""Decision layer: frontier candidate paths, experience retrieval, planners, A*."""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .errors import TrajRagError, UnreachableError
from .gridmap import Frontier, SemanticMap
from .match import wrap_angle
from .store import TrajRagStore, retrieve
from .topo import TopoNode, TopoPolarTrajectory, describe_node, prune_loops

FORWARD = "forward"
TURN_LEFT = "turn_left"
TURN_RIGHT = "turn_right"
STOP = "stop"
ACTIONS = (FORWARD, TURN_LEFT, TURN_RIGHT, STOP)

TURN_ANGLE = math.radians(30.0)
TOP_M = 3
TOP_K = 3


@dataclass(frozen=True)
class CandidatePath:
    """BFS path from the agent's node to the frontier's nearest node, plus the frontier."""

    frontier: Frontier
    frontier_index: int
    nodes: tuple[TopoNode, ...]

    def __post_init__(self):
        if not self.nodes:
            raise ValueError("candidate path must contain the frontier node")

    @property
    def node_ids(self) -> list[int]:
        return [n.id for n in self.nodes]

    @property
    def length(self) -> int:
        return len(self.nodes)

    def as_trajectory(self, goal: int) -> TopoPolarTrajectory:
        return TopoPolarTrajectory(self.nodes, goal, f"candidate:{self.frontier_index}")


@dataclass(frozen=True)
class RetrievedExperience:
    chunk_id: int
    description: str
    fine_score: float
    coarse_score: float


@dataclass(frozen=True)
class PlannerDecision:
    index: int
    rationale: str
    scores: tuple[float, ...] = ()


def frontier_node_id(traj: TopoPolarTrajectory, frontier_index: int) -> int:
    """Id for the hypothetical frontier node, distinct from every trajectory id."""
    base = max(traj.ids, default=-1) + 1
    return base + frontier_index


def candidate_paths(
    traj: TopoPolarTrajectory, agent_node: int, frontiers: Sequence[Frontier]
) -> list[CandidatePath]:
    """One candidate per reachable frontier, in frontier order."""
    by_id = {n.id: n for n in traj.nodes}
    if agent_node not in by_id:
        raise KeyError(f"agent node {agent_node} not in trajectory")
    adj: dict[int, list[int]] = {i: [] for i in by_id}
    for a, b in traj.edges:
        adj[a].append(b)
        adj[b].append(a)
    parent = {agent_node: None}
    queue = deque([agent_node])
    while queue:
        u = queue.popleft()
        for v in sorted(adj[u]):
            if v not in parent:
                parent[v] = u
                queue.append(v)

    ordered = sorted(traj.nodes, key=lambda n: n.id)
    pos = np.array([n.position for n in ordered])
    out = []
    for k, fr in enumerate(frontiers):
        d = np.hypot(*(pos - np.asarray(fr.centroid)).T)
        target = ordered[int(np.argmin(d))].id
        if target not in parent:
            continue
        path = []
        v = target
        while v is not None:
            path.append(by_id[v])
            v = parent[v]
        path.reverse()
        fnode = TopoNode(frontier_node_id(traj, k), fr.sector_vector, fr.centroid)
        out.append(CandidatePath(fr, k, tuple(path) + (fnode,)))
    return out


def candidate_query(
    candidate: CandidatePath, goal: int, history: TopoPolarTrajectory | None = None
) -> TopoPolarTrajectory:
    """Query trajectory for a candidate.

    With a ``history`` (the agent's trajectory so far) the query is the
    loop-pruned concatenation of history and candidate path, i.e. the route
    from the episode start to the frontier.  It no longer depends on which
    node the agent currently stands on, so re-planning from a neighbouring
    node scores the same frontier identically.
    """
    if history is None or not len(history):
        return candidate.as_trajectory(goal)
    by_id = {n.id: n for n in history.nodes}
    by_id.update((n.id, n) for n in candidate.nodes)
    ids = prune_loops(history.ids + candidate.node_ids)
    return TopoPolarTrajectory(tuple(by_id[i] for i in ids), goal, f"candidate:{candidate.frontier_index}")


class RetrievalCache:
    """Memo of retrieval results keyed by query content (ids, positions, sectors, goal)."""

    def __init__(self, store: TrajRagStore | None, top_m: int = TOP_M, top_k: int = TOP_K):
        self.store = store
        self.top_m = top_m
        self.top_k = top_k
        self._memo: dict = {}
        self.hits = 0
        self.misses = 0

    def __call__(self, query: TopoPolarTrajectory) -> list[RetrievedExperience]:
        key = (
            query.goal_category,
            tuple((n.id, n.position, n.sector) for n in query.nodes),
        )
        if key in self._memo:
            self.hits += 1
            return self._memo[key]
        self.misses += 1
        out = _retrieve_query(self.store, query, self.top_m, self.top_k)
        self._memo[key] = out
        return out


def _retrieve_query(store, query, top_m, top_k) -> list[RetrievedExperience]:
    if store is None or not store.groups:
        return []
    _, fine = retrieve(store, query, top_m, top_k)
    return [
        RetrievedExperience(f.chunk_id, store.chunks[f.chunk_id].description, f.score, c.score)
        for f, c in fine
    ]


def retrieve_experiences(
    store: TrajRagStore | None,
    candidate: CandidatePath,
    goal: int,
    top_m: int = TOP_M,
    top_k: int = TOP_K,
    history: TopoPolarTrajectory | None = None,
) -> list[RetrievedExperience]:
    """Coarse-to-fine lookup of stored trajectories resembling the candidate."""
    return _retrieve_query(store, candidate_query(candidate, goal, history), top_m, top_k)


def mentions(description: str, category: str) -> bool:
    """Whole-word occurrence of ``category`` in a description."""
    tokens = description.replace(":", " ").replace(";", " ").replace(".", " ").replace(",", " ").split()
    return category in tokens


class Planner(Protocol):
    uses_experience: bool

    def __call__(
        self,
        candidates: Sequence[CandidatePath],
        experiences: Sequence[Sequence[RetrievedExperience]],
        goal: str,
    ) -> PlannerDecision: ...


class HeuristicPlanner:
    """Prefer the candidate whose best goal-mentioning experience is most similar.

    Ties fall back to the shorter BFS path, then the lower index.
    """

    uses_experience = True
    name = "trajrag"

    def __call__(self, candidates, experiences, goal: str) -> PlannerDecision:
        return plan(candidates, experiences, goal)


class NearestFrontierPlanner(HeuristicPlanner):
    """Ablation: the heuristic planner with retrieval switched off (shortest candidate)."""

    uses_experience = False
    name = "nearest"


class RandomFrontierPlanner:
    """Baseline: uniformly random candidate from a seeded generator."""

    uses_experience = False
    name = "random"

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def __call__(self, candidates, experiences, goal: str) -> PlannerDecision:
        if not candidates:
            raise TrajRagError("planner needs at least one candidate")
        k = int(self.rng.integers(len(candidates)))
        return PlannerDecision(k, "random frontier")


def plan(
    candidates: Sequence[CandidatePath],
    experiences: Sequence[Sequence[RetrievedExperience]],
    goal: str,
) -> PlannerDecision:
    """Deterministic heuristic decision over candidates."""
    if not candidates:
        raise TrajRagError("planner needs at least one candidate")
    scores = []
    for k in range(len(candidates)):
        exps = experiences[k] if k < len(experiences) else ()
        relevant = [e.fine_score for e in exps if mentions(e.description, goal)]
        scores.append(max(relevant) if relevant else -math.inf)
    best = min(range(len(candidates)), key=lambda k: (-scores[k], candidates[k].length, k))
    if math.isinf(scores[best]):
        why = f"no experience mentions {goal}; shortest path ({candidates[best].length} nodes)"
    else:
        why = f"closest {goal} experience (similarity {scores[best]:.3f})"
    return PlannerDecision(best, why, tuple(scores))


def export_prompt(
    candidates: Sequence[CandidatePath],
    experiences: Sequence[Sequence[RetrievedExperience]],
    goal: str,
    categories: Sequence[str],
) -> str:
    """Structured planner prompt listing candidates and their retrieved experiences."""
    lines = [
        "You are choosing the next exploration path for an object-goal navigation agent.",
        f"Goal category: {goal}",
        f"Candidates: {len(candidates)}",
        "",
    ]
    for k, cand in enumerate(candidates):
        lines.append(f"[candidate {k}] path of {cand.length} nodes toward frontier {cand.frontier_index}")
        for j, node in enumerate(cand.nodes, 1):
            tag = "frontier" if j == cand.length else f"node {j}"
            lines.append(f"  {tag}: {describe_node(node.sector, categories)}")
        exps = experiences[k] if k < len(experiences) else ()
        lines.append("  experiences:")
        if not exps:
            lines.append("    (none)")
        for e in exps:
            lines.append(f"    - chunk {e.chunk_id} (similarity {e.fine_score:.3f}): {e.description}")
        lines.append("")
    lines.append("Answer with the index of the candidate most likely to lead to the goal.")
    return "\n".join(lines) + "\n"


# -- local policy -------------------------------------------------------------------

_MOVES = [(-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)]
_SQRT2 = math.sqrt(2.0)


def grid_neighbors(passable: np.ndarray, cell):
    """8-connected moves; diagonals may not cut a blocked corner."""
    h, w = passable.shape
    r, c = cell
    for dr, dc in _MOVES:
        nr, nc = r + dr, c + dc
        if not (0 <= nr < h and 0 <= nc < w) or not passable[nr, nc]:
            continue
        if dr and dc:
            if not (passable[r + dr, c] and passable[r, c + dc]):
                continue
            yield (nr, nc), _SQRT2
        else:
            yield (nr, nc), 1.0


def nearest_passable(passable: np.ndarray, cell, max_dist_cells: float):
    """Closest passable cell to ``cell`` within a radius (ties: row-major)."""
    r, c = cell
    if 0 <= r < passable.shape[0] and 0 <= c < passable.shape[1] and passable[r, c]:
        return (r, c)
    rad = int(math.ceil(max_dist_cells))
    r0, r1 = max(0, r - rad), min(passable.shape[0], r + rad + 1)
    c0, c1 = max(0, c - rad), min(passable.shape[1], c + rad + 1)
    cand = np.argwhere(passable[r0:r1, c0:c1])
    if len(cand) == 0:
        return None
    cand += (r0, c0)
    d2 = ((cand - (r, c)) ** 2).sum(axis=1)
    k = int(np.argmin(d2))
    if d2[k] > max_dist_cells**2:
        return None
    return (int(cand[k][0]), int(cand[k][1]))


def path_cost(path) -> float:
    return sum(
        _SQRT2 if (a[0] != b[0] and a[1] != b[1]) else 1.0 for a, b in zip(path, path[1:])
    )


def astar(
    smap: SemanticMap,
    start,
    goal_cell,
    passable: np.ndarray | None = None,
    snap_radius: float = 1.0,
) -> list[tuple[int, int]]:
    """Shortest 8-connected cell path with a Euclidean heuristic.

    ``passable`` defaults to the map's free cells.  A blocked goal is replaced
    by the nearest passable cell within ``snap_radius`` metres.
    """
    if passable is None:
        passable = smap.free
    start = (int(start[0]), int(start[1]))
    if not smap.in_bounds(*goal_cell):
        raise UnreachableError(f"goal {goal_cell} outside map")
    if not smap.in_bounds(*start) or not passable[start]:
        raise UnreachableError(f"start {start} is not passable")
    goal = nearest_passable(passable, goal_cell, snap_radius / smap.resolution)
    if goal is None:
        raise UnreachableError(f"no passable cell within {snap_radius} m of {goal_cell}")

    def h(cell):
        return math.hypot(cell[0] - goal[0], cell[1] - goal[1])

    g = {start: 0.0}
    parent = {start: None}
    heap = [(h(start), 0.0, start)]
    closed = set()
    while heap:
        _, gc, cur = heapq.heappop(heap)
        if cur in closed:
            continue
        if cur == goal:
            path = []
            while cur is not None:
                path.append(cur)
                cur = parent[cur]
            return path[::-1]
        closed.add(cur)
        for nb, step in grid_neighbors(passable, cur):
            ng = gc + step
            if ng < g.get(nb, math.inf) - 1e-12:
                g[nb] = ng
                parent[nb] = cur
                heapq.heappush(heap, (ng + h(nb), ng, nb))
    raise UnreachableError(f"no path from {start} to {goal}")


@dataclass(frozen=True)
class AgentPose:
    position: tuple[float, float]
    heading: float


def next_action(
    path,
    pose,
    turn_angle: float = TURN_ANGLE,
    reach_tol: float = 0.2,
    lookahead: float = 0.3,
) -> str:
    """Discrete action that follows a world-coordinate waypoint path."""
    pts = np.asarray(path, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("empty path")
    here = np.asarray(pose.position, dtype=float)
    d = np.hypot(*(pts - here).T)
    if d[-1] <= reach_tol:
        return STOP
    start = int(np.argmin(d))
    ahead = np.nonzero(d[start:] > lookahead)[0]
    target = pts[start + ahead[0]] if len(ahead) else pts[-1]
    bearing = math.atan2(target[1] - here[1], target[0] - here[0])
    err = wrap_angle(bearing - pose.heading)
    if abs(err) > turn_angle / 2.0 + 1e-9:
        return TURN_LEFT if err > 0 else TURN_RIGHT
    return FORWARD
