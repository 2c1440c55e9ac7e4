"""Procedural room-and-corridor gridworld with object-goal episodes.

Scenes are generated from two seeds: the *layout* fixes room geometry,
corridors and which categories each room holds; the *scene seed* places the
individual objects.  Scenes sharing a layout form a family, which is what the
experience store is expected to generalise over.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage as ndi
from skimage.graph import MCP_Geometric

from .errors import ConfigError, EmptyTrajectoryError, ParseError, UnreachableError
from .gridmap import (
    SemanticMap,
    extract_frontiers,
    map_to_lines,
    parse_map_lines,
)
from .match import Se2Transform, wrap_angle
from .nav import (
    FORWARD,
    STOP,
    TOP_K,
    TOP_M,
    TURN_ANGLE,
    TURN_LEFT,
    TURN_RIGHT,
    AgentPose,
    HeuristicPlanner,
    NearestFrontierPlanner,
    RandomFrontierPlanner,
    RetrievalCache,
    astar,
    candidate_query,
    candidate_paths,
    nearest_passable,
    next_action,
)
from .store import TrajRagStore, align_trajectory
from .topo import TopoNode, TopoPolarTrajectory, assign_to_nearest, build_topo_polar_trajectory, extract_nodes

__all__ = [
    "AgentPose",
    "BuildReport",
    "EpisodeConfig",
    "EpisodeResult",
    "EpisodeSpec",
    "ObjectInstance",
    "Scene",
    "SceneParams",
    "build_store",
    "compute_metrics",
    "consolidate",
    "episode_specs",
    "evaluate",
    "generate_scene",
    "load_scene",
    "observe",
    "planner_factory",
    "run_episode",
    "save_scene",
    "scripted_walk",
    "step",
]

DEFAULT_CATEGORIES = ("chair", "bed", "plant", "toilet", "tv", "sofa")
FORWARD_STEP = 0.25
SLOT = 5.0
CORRIDOR_WIDTH = 1.0
MARGIN = 0.5


@dataclass(frozen=True)
class SceneParams:
    rooms: int = 4
    corridors: int | None = None  # default: a spanning tree (rooms - 1)
    object_density: float = 1.0
    categories: tuple[str, ...] = DEFAULT_CATEGORIES
    resolution: float = 0.1
    layout: int | None = None

    def validate(self) -> None:
        if self.rooms < 1:
            raise ConfigError("need at least one room")
        if not self.categories:
            raise ConfigError("need at least one category")
        if self.object_density <= 0:
            raise ConfigError("object_density must be positive")
        if not 0.02 <= self.resolution <= 0.25:
            raise ConfigError("resolution must lie in [0.02, 0.25] m")
        n_corr = self.n_corridors
        if n_corr < self.rooms - 1:
            raise ConfigError(f"{self.rooms} rooms need at least {self.rooms - 1} corridors")
        if n_corr > len(_slot_edges(self.rooms)):
            raise ConfigError(f"{self.rooms} rooms allow at most {len(_slot_edges(self.rooms))} corridors")

    @property
    def n_corridors(self) -> int:
        return self.rooms - 1 if self.corridors is None else self.corridors


@dataclass
class ObjectInstance:
    category: int
    cells: np.ndarray = field(repr=False)

    def __eq__(self, other):
        if not isinstance(other, ObjectInstance):
            return NotImplemented
        return self.category == other.category and np.array_equal(self.cells, other.cells)


@dataclass
class Scene:
    """Ground-truth map (fully explored) plus object instances."""

    map: SemanticMap
    objects: list[ObjectInstance]
    seed: int
    layout: int
    rooms: list[tuple[float, float, float, float]] = field(default_factory=list)

    @property
    def categories(self) -> tuple[str, ...]:
        return self.map.categories

    def present_categories(self) -> list[int]:
        return sorted({o.category for o in self.objects})

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.map == other.map
            and self.objects == other.objects
            and self.seed == other.seed
            and self.layout == other.layout
            and self.rooms == other.rooms
        )


# -- generation -----------------------------------------------------------------------


def _grid_shape(rooms: int) -> tuple[int, int]:
    cols = int(math.ceil(math.sqrt(rooms)))
    rows = int(math.ceil(rooms / cols))
    return rows, cols


def _slot_edges(rooms: int) -> list[tuple[int, int]]:
    rows, cols = _grid_shape(rooms)
    edges = []
    for i in range(rooms):
        r, c = divmod(i, cols)
        if c + 1 < cols and i + 1 < rooms:
            edges.append((i, i + 1))
        if i + cols < rooms:
            edges.append((i, i + cols))
    return edges


def _spanning_corridors(rooms: int, n: int, rng) -> list[tuple[int, int]]:
    edges = _slot_edges(rooms)
    order = [edges[k] for k in rng.permutation(len(edges))]
    parent = list(range(rooms))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    tree, rest = [], []
    for a, b in order:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
            tree.append((a, b))
        else:
            rest.append((a, b))
    return sorted(tree + rest[: n - len(tree)])


def generate_scene(seed: int, params: SceneParams = SceneParams()) -> Scene:
    """Seeded room-and-corridor scene; every room is reachable by construction."""
    params.validate()
    layout = seed if params.layout is None else params.layout
    lrng = np.random.default_rng([1, layout])
    srng = np.random.default_rng([2, layout, seed])
    res = params.resolution
    rows, cols = _grid_shape(params.rooms)
    width_m = cols * SLOT + 2 * MARGIN
    height_m = rows * SLOT + 2 * MARGIN
    w = int(round(width_m / res))
    h = int(round(height_m / res))
    cats = tuple(params.categories)
    free = np.zeros((h, w), dtype=bool)

    def carve(x0, y0, x1, y1, mask=free):
        c0, c1 = int(round(x0 / res)), int(round(x1 / res))
        r0, r1 = int(round(y0 / res)), int(round(y1 / res))
        mask[max(r0, 1) : min(r1, h - 1), max(c0, 1) : min(c1, w - 1)] = True

    rects = []
    for i in range(params.rooms):
        r, c = divmod(i, cols)
        cx = MARGIN + (c + 0.5) * SLOT
        cy = MARGIN + (r + 0.5) * SLOT
        rw, rh = lrng.uniform(3.0, 4.2, size=2)
        ox = lrng.uniform(-(SLOT - rw) / 2 + 0.3, (SLOT - rw) / 2 - 0.3)
        oy = lrng.uniform(-(SLOT - rh) / 2 + 0.3, (SLOT - rh) / 2 - 0.3)
        # rooms always cover the slot centre +-1 m so corridors line up
        x0 = min(cx + ox - rw / 2, cx - 1.0)
        x1 = max(cx + ox + rw / 2, cx + 1.0)
        y0 = min(cy + oy - rh / 2, cy - 1.0)
        y1 = max(cy + oy + rh / 2, cy + 1.0)
        rects.append((float(x0), float(y0), float(x1), float(y1)))
        carve(x0, y0, x1, y1)

    doors = np.zeros_like(free)
    for a, b in _spanning_corridors(params.rooms, params.n_corridors, lrng):
        ra, rb = rects[a], rects[b]
        jitter = lrng.uniform(-0.4, 0.4)
        half = CORRIDOR_WIDTH / 2
        corr = np.zeros_like(free)
        if b == a + 1:  # horizontal neighbours
            yc = MARGIN + (a // cols + 0.5) * SLOT + jitter
            carve(ra[2] - 0.2, yc - half, rb[0] + 0.2, yc + half, corr)
        else:
            xc = MARGIN + (a % cols + 0.5) * SLOT + jitter
            carve(xc - half, ra[3] - 0.2, xc + half, rb[1] + 0.2, corr)
        doors |= corr
        free |= corr

    room_masks = []
    for x0, y0, x1, y1 in rects:
        m = np.zeros_like(free)
        carve(x0, y0, x1, y1, m)
        room_masks.append(m)

    # categories spread over rooms round-robin, in a layout-specific order
    perm = lrng.permutation(len(cats))
    room_cats: list[list[int]] = [[] for _ in range(params.rooms)]
    for j, cat in enumerate(perm):
        room_cats[j % params.rooms].append(int(cat))

    obstacle = ~free
    semantic = np.zeros((len(cats), h, w), dtype=bool)
    keep_clear = ndi.binary_dilation(doors & ~np.logical_or.reduce(room_masks), iterations=int(0.7 / res))
    objects_mask = np.zeros_like(free)
    objects: list[ObjectInstance] = []
    for i, cat_list in enumerate(room_cats):
        x0, y0, x1, y1 = rects[i]
        for cat in cat_list:
            count = max(1, int(srng.poisson(params.object_density)))
            for _ in range(count):
                inst = _place_object(srng, (x0, y0, x1, y1), res, obstacle, objects_mask, keep_clear)
                if inst is None:
                    continue
                obstacle[inst[:, 0], inst[:, 1]] = True
                objects_mask[inst[:, 0], inst[:, 1]] = True
                semantic[cat, inst[:, 0], inst[:, 1]] = True
                objects.append(ObjectInstance(cat, inst))
    gt = SemanticMap(w, h, res, (0.0, 0.0), cats, obstacle, np.ones((h, w), dtype=bool), semantic)
    return Scene(gt, objects, int(seed), int(layout), rects)


def _place_object(rng, rect, res, obstacle, objects_mask, keep_clear, tries: int = 40):
    x0, y0, x1, y1 = rect
    shape = obstacle.shape
    h, w = shape
    for _ in range(tries):
        along = rng.uniform(0.5, 1.2)
        depth = rng.uniform(0.4, 0.8)
        side = int(rng.integers(4))
        if side in (0, 1):  # bottom / top wall
            ow, oh = along, depth
            ox = rng.uniform(x0, max(x0, x1 - ow))
            oy = y0 if side == 0 else y1 - oh
        else:  # left / right wall
            ow, oh = depth, along
            oy = rng.uniform(y0, max(y0, y1 - oh))
            ox = x0 if side == 2 else x1 - ow
        c0, c1 = int(round(ox / res)), int(round((ox + ow) / res))
        r0, r1 = int(round(oy / res)), int(round((oy + oh) / res))
        c0, r0 = max(c0, 1), max(r0, 1)
        c1, r1 = min(c1, w - 1), min(r1, h - 1)
        if c1 <= c0 or r1 <= r0:
            continue
        block = np.zeros(shape, dtype=bool)
        block[r0:r1, c0:c1] = True
        block &= ~obstacle
        if not block.any() or (block & keep_clear).any():
            continue
        # keep a 0.5 m clearance to other objects and keep free space connected
        halo = ndi.binary_dilation(block, iterations=int(0.5 / res))
        if (halo & objects_mask).any():
            continue
        trial = ~(obstacle | block)
        _, n = ndi.label(trial, structure=np.ones((3, 3)))
        if n != 1:
            continue
        return np.argwhere(block)
    return None


# -- scene text I/O ---------------------------------------------------------------------

SCENE_MAGIC = "trajrag-scene v1"


def scene_to_text(scene: Scene) -> str:
    lines = [SCENE_MAGIC, f"seed {scene.seed}", f"layout {scene.layout}"]
    lines.append(f"rooms {len(scene.rooms)}")
    lines += ["room " + " ".join(repr(float(v)) for v in r) for r in scene.rooms]
    lines += map_to_lines(scene.map)
    lines.append(f"objects {len(scene.objects)}")
    for o in scene.objects:
        cells = " ".join(f"{r} {c}" for r, c in o.cells.tolist())
        lines.append(f"object {o.category} {len(o.cells)} {cells}")
    lines.append("end-scene")
    return "\n".join(lines) + "\n"


def scene_from_text(text: str, source=None) -> Scene:
    lines = text.splitlines()

    def field_(i, key):
        if i >= len(lines):
            raise ParseError(f"unexpected end, expected '{key}'", i + 1, source)
        head, _, rest = lines[i].partition(" ")
        if head != key:
            raise ParseError(f"expected '{key}'", i + 1, source)
        return rest

    if not lines or lines[0] != SCENE_MAGIC:
        raise ParseError(f"missing '{SCENE_MAGIC}' header", 1, source)
    try:
        seed = int(field_(1, "seed"))
        layout = int(field_(2, "layout"))
        n_rooms = int(field_(3, "rooms"))
        rooms = []
        for k in range(n_rooms):
            vals = tuple(float(v) for v in field_(4 + k, "room").split())
            if len(vals) != 4:
                raise ParseError("room needs 4 values", 5 + k, source)
            rooms.append(vals)
    except ValueError:
        raise ParseError("bad scene header", 2, source) from None
    smap, i = parse_map_lines(lines, 4 + n_rooms, source)
    try:
        n_obj = int(field_(i, "objects"))
    except ValueError:
        raise ParseError("bad object count", i + 1, source) from None
    i += 1
    objects = []
    for _ in range(n_obj):
        parts = field_(i, "object").split()
        try:
            cat, n = int(parts[0]), int(parts[1])
            vals = [int(v) for v in parts[2:]]
        except (ValueError, IndexError):
            raise ParseError("malformed object record", i + 1, source) from None
        if len(vals) != 2 * n:
            raise ParseError("object cell count mismatch", i + 1, source)
        objects.append(ObjectInstance(cat, np.array(vals, dtype=np.int64).reshape(n, 2)))
        i += 1
    if i >= len(lines) or lines[i] != "end-scene":
        raise ParseError("missing 'end-scene' terminator", i + 1, source)
    return Scene(smap, objects, seed, layout, rooms)


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(scene_to_text(scene))


def load_scene(path) -> Scene:
    return scene_from_text(Path(path).read_text(), source=str(path))


# -- sensing and motion -----------------------------------------------------------------


@lru_cache(maxsize=64)
def _ray_table(n_rays: int, fov: float, range_cells: float):
    rel = np.linspace(-fov / 2, fov / 2, n_rays, endpoint=fov < 2 * math.pi - 1e-9)
    steps = np.arange(0, int(math.floor(2 * range_cells)) + 1) * 0.5
    return rel, steps


def visible_cells(scene: Scene, pose: AgentPose, fov_deg: float = 360.0, range_m: float = 3.0) -> np.ndarray:
    """Cells seen from ``pose`` (rays stop at, and include, the first obstacle)."""
    gt = scene.map
    res = gt.resolution
    fov = math.radians(min(fov_deg, 360.0))
    range_cells = range_m / res
    n_rays = max(3, int(math.ceil(fov * range_cells * 2)))
    rel, steps = _ray_table(n_rays, fov, range_cells)
    ang = pose.heading + rel
    col_f = (pose.position[0] - gt.origin[0]) / res
    row_f = (pose.position[1] - gt.origin[1]) / res
    cols = np.floor(col_f + np.cos(ang)[:, None] * steps[None, :] + 0.5).astype(np.int64)
    rows = np.floor(row_f + np.sin(ang)[:, None] * steps[None, :] + 0.5).astype(np.int64)
    inside = (rows >= 0) & (rows < gt.height) & (cols >= 0) & (cols < gt.width)
    blocked = np.ones(rows.shape, dtype=bool)
    blocked[inside] = gt.obstacle[rows[inside], cols[inside]]
    first = np.where(blocked.any(axis=1), blocked.argmax(axis=1), blocked.shape[1])
    seen = (np.arange(rows.shape[1])[None, :] <= first[:, None]) & inside
    out = np.zeros((gt.height, gt.width), dtype=bool)
    out[rows[seen], cols[seen]] = True
    return out


def observe(
    scene: Scene,
    pose: AgentPose,
    fov_deg: float = 360.0,
    range_m: float = 3.0,
    agent_map: SemanticMap | None = None,
) -> SemanticMap:
    """Reveal what is visible from ``pose`` in ``agent_map`` (updated in place)."""
    if agent_map is None:
        agent_map = SemanticMap.empty_like(scene.map)
    seen = visible_cells(scene, pose, fov_deg, range_m)
    gt = scene.map
    agent_map.explored |= seen
    agent_map.obstacle |= seen & gt.obstacle
    agent_map.semantic |= seen[None] & gt.semantic
    return agent_map


def _snap_heading(heading: float, delta: int) -> float:
    k = heading / TURN_ANGLE
    kr = round(k)
    if abs(k - kr) < 1e-9:
        idx = (kr + delta) % 12
        ang = idx * TURN_ANGLE
        return ang - 2 * math.pi if ang > math.pi else ang
    return wrap_angle(heading + delta * TURN_ANGLE)


def segment_clear(gt: SemanticMap, a, b) -> bool:
    """True if every half-cell sample along a->b lies in ground-truth free space."""
    free = gt.free
    dist = math.hypot(b[0] - a[0], b[1] - a[1])
    n = max(1, int(math.ceil(dist / (gt.resolution * 0.5))))
    for t in np.linspace(0.0, 1.0, n + 1):
        r, c = gt.world_to_cell((a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])))
        if not gt.in_bounds(r, c) or not free[r, c]:
            return False
    return True


def step(scene: Scene, pose: AgentPose, action: str, forward_step: float = FORWARD_STEP) -> AgentPose:
    """Apply one discrete action; a blocked forward move leaves the pose unchanged."""
    if action == TURN_LEFT:
        return AgentPose(pose.position, _snap_heading(pose.heading, +1))
    if action == TURN_RIGHT:
        return AgentPose(pose.position, _snap_heading(pose.heading, -1))
    if action == STOP:
        return pose
    if action != FORWARD:
        raise ValueError(f"unknown action {action!r}")
    x, y = pose.position
    nxt = (x + forward_step * math.cos(pose.heading), y + forward_step * math.sin(pose.heading))
    if not segment_clear(scene.map, pose.position, nxt):
        return pose
    return AgentPose(nxt, pose.heading)


# -- episodes ----------------------------------------------------------------------------


@dataclass
class EpisodeResult:
    success: bool
    path_length: float
    shortest_length: float
    steps: int
    stop_issued: bool
    goal: int = -1
    seed: int = -1
    decisions: int = 0
    # the agent's final trajectory in its episode frame (start pose at the origin)
    trajectory: TopoPolarTrajectory | None = field(default=None, compare=False, repr=False)

    @property
    def spl(self) -> float:
        if not self.success:
            return 0.0
        if self.shortest_length <= 0.0:
            return 1.0
        return self.shortest_length / max(self.path_length, self.shortest_length)


@dataclass(frozen=True)
class EpisodeConfig:
    budget_steps: int = 500
    success_radius: float = 1.0
    fov_deg: float = 360.0
    range_m: float = 3.0
    d_min: float = 0.5
    range_R: float = 1.5
    dilation: int = 2
    frontier_min_size: int = 4
    inflation: float = 0.15
    top_m: int = TOP_M
    top_k: int = TOP_K
    node_track_radius: float = 0.5
    commit: bool = True


def compute_metrics(results: Sequence[EpisodeResult]) -> dict[str, float]:
    """Success rate and success weighted by path length."""
    if not results:
        raise ValueError("no episode results")
    sr = float(np.mean([r.success for r in results]))
    spl = float(np.mean([r.spl for r in results]))
    return {"SR": sr, "SPL": spl}


def approach_region(scene: Scene, goal: int, radius: float) -> np.ndarray:
    """Free cells within ``radius`` of any instance of ``goal``."""
    gt = scene.map
    target = gt.semantic[goal]
    if not target.any():
        return np.zeros_like(target)
    dist = ndi.distance_transform_edt(~target) * gt.resolution
    return (dist <= radius) & gt.free


def geodesic_distances(free: np.ndarray, start_cell, resolution: float) -> np.ndarray:
    """8-connected geodesic distance (metres) from ``start_cell`` over ``free``."""
    costs = np.where(free, 1.0, np.inf)
    mcp = MCP_Geometric(costs, fully_connected=True)
    cum, _ = mcp.find_costs([tuple(start_cell)])
    return cum * resolution


def shortest_length(scene: Scene, start: AgentPose, goal: int, success_radius: float = 1.0) -> float:
    gt = scene.map
    region = approach_region(scene, goal, success_radius)
    cell = gt.world_to_cell(start.position)
    dist = geodesic_distances(gt.free, cell, gt.resolution)
    vals = dist[region]
    vals = vals[np.isfinite(vals)]
    return float(vals.min()) if len(vals) else math.inf


def goal_distance(scene: Scene, position, goal: int) -> float:
    cells = np.argwhere(scene.map.semantic[goal])
    if len(cells) == 0:
        return math.inf
    world = scene.map.cells_to_world(cells)
    return float(np.hypot(*(world - np.asarray(position)).T).min())


def sample_start(scene: Scene, rng, clearance: float = 0.4) -> AgentPose:
    gt = scene.map
    free = gt.free
    dist = ndi.distance_transform_edt(free) * gt.resolution
    cells = np.argwhere(dist >= clearance)
    if len(cells) == 0:
        raise ConfigError("scene has no start cell with enough clearance")
    r, c = cells[int(rng.integers(len(cells)))]
    return AgentPose(gt.cell_to_world((r, c)), _snap_heading(0.0, int(rng.integers(12))))


def sample_episode_start(scene: Scene, goal: int, rng, success_radius: float = 1.0, tries: int = 100) -> AgentPose:
    """Random start from which ``goal`` is reachable and not already within reach."""
    for _ in range(tries):
        start = sample_start(scene, rng)
        d = shortest_length(scene, start, goal, success_radius)
        if 0.0 < d < math.inf and goal_distance(scene, start.position, goal) > success_radius:
            return start
    raise ConfigError(f"no valid start for goal {scene.categories[goal]!r}")


def episode_frame(start: AgentPose) -> Se2Transform:
    """World -> episode transform (start pose at the origin facing +x)."""
    return Se2Transform(-start.heading, (0.0, 0.0)).compose(
        Se2Transform(0.0, (-start.position[0], -start.position[1]))
    )


class NodeTracker:
    """Keeps node ids stable across map rebuilds by nearest matching."""

    def __init__(self, radius: float = 0.5):
        self.radius = radius
        self.nodes: list[TopoNode] = []
        self.next_id = 0

    def update(self, fresh: Sequence[TopoNode]) -> list[TopoNode]:
        prev = self.nodes
        prev_pos = np.array([n.position for n in prev]).reshape(-1, 2)
        claimed = set()
        out = []
        for node in fresh:
            nid = None
            if len(prev):
                d = np.hypot(*(prev_pos - np.asarray(node.position)).T)
                for k in np.argsort(d, kind="stable"):
                    if d[k] >= self.radius:
                        break
                    if prev[k].id not in claimed:
                        nid = prev[k].id
                        break
            if nid is None:
                nid = self.next_id
                self.next_id += 1
            claimed.add(nid)
            out.append(TopoNode(nid, node.sector, node.position))
        self.nodes = out
        return out


@dataclass
class DecisionRecord:
    step: int
    node: int
    reason: str
    n_candidates: int
    scores: tuple[float, ...]
    chosen: int
    retrieved: tuple[int, ...] = ()

    def to_line(self) -> str:
        sc = ",".join("-inf" if math.isinf(s) else f"{s:.6f}" for s in self.scores)
        ret = ",".join(str(c) for c in self.retrieved)
        return f"{self.step}\t{self.node}\t{self.reason}\t{self.n_candidates}\t{sc}\t{self.chosen}\t{ret}"


TRACE_HEADER = "step\tnode\treason\tcandidates\tscores\tchosen\tretrieved"


class _Navigator:
    """Episode state machine; see :func:`run_episode`."""

    def __init__(self, scene, goal, planner, store, cfg: EpisodeConfig, start: AgentPose):
        self.scene = scene
        self.goal = goal
        self.goal_name = scene.categories[goal]
        self.planner = planner
        self.store = store
        self.cfg = cfg
        self.pose = start
        self.map = SemanticMap.empty_like(scene.map)
        self.poses = [start.position]
        self.tracker = NodeTracker(cfg.node_track_radius)
        self.nodes: list[TopoNode] = []
        self.trace: list[DecisionRecord] = []
        self.node = None
        self.waypoint = None
        self.mode = "explore"
        self.path = None
        self.visited_waypoints: list[tuple[int, int]] = []
        self.failed_goal_cells: set = set()
        self.retrieval = RetrievalCache(store, cfg.top_m, cfg.top_k)
        self.commit_score = -math.inf
        self.queued: list[str] = []

    # map and topology -------------------------------------------------------------
    def sense(self):
        observe(self.scene, self.pose, self.cfg.fov_deg, self.cfg.range_m, self.map)
        fresh = extract_nodes(self.map, self.cfg.d_min, self.cfg.range_R, self.cfg.dilation)
        self.nodes = self.tracker.update(fresh)
        self._passable = None

    @property
    def passable(self) -> np.ndarray:
        if self._passable is None:
            free = self.map.free
            blocked = ~free
            r = int(round(self.cfg.inflation / self.map.resolution))
            if r > 0:
                solid = self.map.obstacle | self.map.any_semantic
                blocked = ndi.binary_dilation(solid, iterations=r) | ~self.map.explored
            self._passable = ~blocked
        return self._passable

    def current_node(self):
        if not self.nodes:
            return None
        return assign_to_nearest([self.pose.position], self.nodes)[0]

    def trajectory(self) -> TopoPolarTrajectory:
        return build_topo_polar_trajectory(
            self.map, self.poses, self.goal, self.cfg.d_min, self.cfg.range_R, self.cfg.dilation, nodes=self.nodes
        )

    # decisions ------------------------------------------------------------------------
    def decide(self, step_no: int, reason: str) -> bool:
        """Pick a frontier waypoint; False when exploration is exhausted."""
        frontiers = extract_frontiers(self.map, self.cfg.frontier_min_size, self.cfg.range_R, self.cfg.dilation)
        frontiers = [f for f in frontiers if not self._visited(f.anchor)]
        if not frontiers:
            return False
        try:
            traj = self.trajectory()
        except EmptyTrajectoryError:
            traj = None
        cands = []
        if traj is not None and len(traj):
            cands = candidate_paths(traj, traj.nodes[-1].id, frontiers)
        if not cands:
            return False
        exps = []
        if getattr(self.planner, "uses_experience", False):
            exps = [self.retrieval(candidate_query(c, self.goal, traj)) for c in cands]
        decision = self.planner(cands, exps, self.goal_name)
        if not 0 <= decision.index < len(cands):
            raise AssertionError("planner chose an invalid candidate index")
        chosen = decision.index
        keep = self._incumbent(cands) if self.cfg.commit and decision.scores else None
        if keep is not None and keep != chosen and not decision.scores[chosen] > self.commit_score:
            chosen, reason = keep, reason + "/keep"
        elif decision.scores:
            self.commit_score = decision.scores[chosen]
        self.trace.append(
            DecisionRecord(
                step_no,
                self.node if self.node is not None else -1,
                reason,
                len(cands),
                decision.scores,
                chosen,
                tuple(sorted({e.chunk_id for ex in exps for e in ex})),
            )
        )
        if chosen != keep:
            self.waypoint = cands[chosen].frontier.anchor
            self.path = None
        return True

    def _incumbent(self, cands) -> int | None:
        """Index of the candidate whose frontier still holds the current waypoint."""
        if self.waypoint is None:
            return None
        lim = (1.0 / self.map.resolution) ** 2
        best, best_d = None, lim
        for k, c in enumerate(cands):
            a = c.frontier.anchor
            d = (a[0] - self.waypoint[0]) ** 2 + (a[1] - self.waypoint[1]) ** 2
            if d <= best_d:
                best, best_d = k, d
        return best

    def _visited(self, cell) -> bool:
        lim = (0.5 / self.map.resolution) ** 2
        return any((cell[0] - v[0]) ** 2 + (cell[1] - v[1]) ** 2 <= lim for v in self.visited_waypoints)

    def goal_target(self):
        cells = np.argwhere(self.map.semantic[self.goal])
        if len(cells) == 0:
            return None
        cells = [tuple(c) for c in cells.tolist() if tuple(c) not in self.failed_goal_cells]
        if not cells:
            return None
        here = np.asarray(self.map.world_to_cell(self.pose.position))
        arr = np.array(cells)
        k = int(np.argmin(((arr - here) ** 2).sum(axis=1)))
        return cells[k]

    def plan_path(self) -> bool:
        start = self.map.world_to_cell(self.pose.position)
        start = nearest_passable(self.passable, start, 0.5 / self.map.resolution)
        if start is None:
            start = self.map.world_to_cell(self.pose.position)
        passable = self.passable.copy()
        passable[start] = True
        try:
            cells = astar(self.map, start, self.waypoint, passable=passable)
        except UnreachableError:
            return False
        self.path = self.map.cells_to_world(np.array(cells))
        self.path_cells = cells
        return True

    def escape_actions(self) -> list[str]:
        """Turns plus one forward step along the clear heading nearest the path bearing.

        Headings are restricted to 30 degree multiples, so following a cell
        path can graze a corner; clearance is judged on the agent's own map.
        """
        pts = self.path
        here = np.asarray(self.pose.position)
        d = np.hypot(*(pts - here).T)
        ahead = np.nonzero(d > 0.3)[0]
        tgt = pts[ahead[0]] if len(ahead) else pts[-1]
        bearing = math.atan2(tgt[1] - here[1], tgt[0] - here[0])
        k0 = int(round(self.pose.heading / TURN_ANGLE))
        options = []
        for dk in range(-6, 7):
            h = (k0 + dk) * TURN_ANGLE
            nxt = (here[0] + FORWARD_STEP * math.cos(h), here[1] + FORWARD_STEP * math.sin(h))
            if segment_clear(self.map, self.pose.position, nxt):
                options.append((abs(wrap_angle(h - bearing)), abs(dk), dk))
        if not options:
            return [TURN_LEFT]
        _, _, dk = min(options)
        turn = TURN_LEFT if dk > 0 else TURN_RIGHT
        return [turn] * abs(dk) + [FORWARD]

    def path_blocked(self) -> bool:
        if self.path is None:
            return True
        p = self.passable
        return any(not p[c] for c in self.path_cells[1:])


def run_episode(
    scene: Scene,
    goal: int,
    planner=None,
    store: TrajRagStore | None = None,
    budget_steps: int | None = None,
    success_radius: float | None = None,
    start: AgentPose | None = None,
    config: EpisodeConfig = EpisodeConfig(),
    seed: int = 0,
    trace: list | None = None,
    poses_out: list | None = None,
) -> EpisodeResult:
    """Run one object-goal episode and score it.

    The agent re-plans whenever its nearest topological node changes and
    whenever its current waypoint is reached or becomes unreachable.  Once the
    goal category appears on its map it drives straight to it and stops.
    """
    if budget_steps is not None or success_radius is not None:
        config = EpisodeConfig(
            **{
                **config.__dict__,
                **({"budget_steps": budget_steps} if budget_steps is not None else {}),
                **({"success_radius": success_radius} if success_radius is not None else {}),
            }
        )
    if not scene.map.semantic[goal].any():
        raise ConfigError(f"goal {scene.categories[goal]!r} does not occur in the scene")
    rng = np.random.default_rng([3, scene.seed, seed])
    if start is None:
        start = sample_episode_start(scene, goal, rng, config.success_radius)
    if planner is None:
        planner = HeuristicPlanner()
    nav = _Navigator(scene, goal, planner, store, config, start)
    shortest = shortest_length(scene, start, goal, config.success_radius)
    steps = 0
    path_len = 0.0
    stop_issued = False
    moved_since_sense = True
    idle = 0
    while steps < config.budget_steps:
        if moved_since_sense:
            nav.sense()
            moved_since_sense = False
        node = nav.current_node()
        node_changed = node != nav.node
        nav.node = node

        if nav.mode != "goal":
            target = nav.goal_target()
            if target is not None:
                nav.mode = "goal"
                nav.waypoint = target
                nav.path = None
        if nav.mode == "explore" and (node_changed or nav.waypoint is None):
            reason = "new-node" if node_changed else "no-waypoint"
            if not nav.decide(steps, reason):
                break
        if nav.path is None or nav.path_blocked():
            if not nav.plan_path():
                if nav.mode == "goal":
                    nav.failed_goal_cells.add(tuple(nav.waypoint))
                    nav.mode = "explore"
                else:
                    nav.visited_waypoints.append(tuple(nav.waypoint))
                nav.waypoint = None
                nav.path = None
                idle += 1
                if idle > 200:
                    break
                continue
        action = nav.queued.pop(0) if nav.queued else next_action(nav.path, nav.pose)
        if action == STOP:
            if nav.mode == "goal":
                stop_issued = True
                steps += 1
                break
            nav.visited_waypoints.append(tuple(nav.waypoint))
            nav.waypoint = None
            nav.path = None
            idle += 1
            if idle > 200:
                break
            continue
        idle = 0
        new_pose = step(scene, nav.pose, action)
        steps += 1
        if action == FORWARD:
            moved = math.hypot(new_pose.position[0] - nav.pose.position[0], new_pose.position[1] - nav.pose.position[1])
            if moved == 0.0:
                nav.queued = nav.escape_actions()
            else:
                path_len += moved
                nav.poses.append(new_pose.position)
                moved_since_sense = True
        nav.pose = new_pose

    success = stop_issued and goal_distance(scene, nav.pose.position, goal) <= config.success_radius
    if success:
        # grid geodesics can overshoot the continuous path slightly; SPL is unaffected
        shortest = min(shortest, path_len)
    if trace is not None:
        trace.extend(nav.trace)
    if poses_out is not None:
        poses_out.extend(nav.poses)
    try:
        final = align_trajectory(nav.trajectory(), episode_frame(start))
    except EmptyTrajectoryError:
        final = None
    return EpisodeResult(
        bool(success), float(path_len), float(shortest), steps, stop_issued, goal, seed, len(nav.trace), final
    )


# -- scripted walks for building the store ----------------------------------------------------


@dataclass
class Walk:
    trajectory: TopoPolarTrajectory  # episode frame
    world_trajectory: TopoPolarTrajectory
    start: AgentPose
    poses: list
    agent_map: SemanticMap
    reached: bool


def scripted_walk(
    scene: Scene,
    start: AgentPose,
    goal: int,
    config: EpisodeConfig = EpisodeConfig(),
    max_steps: int = 1500,
    tag: str = "",
) -> Walk:
    """Expert walk along the ground-truth shortest route to the nearest goal instance."""
    gt = scene.map
    inflate = int(round(config.inflation / gt.resolution))
    blocked = ndi.binary_dilation(gt.obstacle, iterations=inflate) if inflate else gt.obstacle
    passable = ~blocked
    region = approach_region(scene, goal, config.success_radius * 0.6) & passable
    start_cell = nearest_passable(passable, gt.world_to_cell(start.position), 0.5 / gt.resolution)
    if start_cell is None or not region.any():
        raise UnreachableError("no route for scripted walk")
    dist = geodesic_distances(passable, start_cell, gt.resolution)
    dist[~region] = np.inf
    if not np.isfinite(dist).any():
        raise UnreachableError("goal unreachable from start")
    target = tuple(int(v) for v in np.unravel_index(np.argmin(dist), dist.shape))
    cells = astar(gt, start_cell, target, passable=passable)
    path = gt.cells_to_world(np.array(cells))
    pose = start
    agent_map = SemanticMap.empty_like(gt)
    poses = [pose.position]
    observe(scene, pose, config.fov_deg, config.range_m, agent_map)
    reached = False
    for _ in range(max_steps):
        action = next_action(path, pose)
        if action == STOP:
            reached = True
            break
        new_pose = step(scene, pose, action)
        if action == FORWARD:
            if new_pose.position == pose.position:
                break
            poses.append(new_pose.position)
            observe(scene, new_pose, config.fov_deg, config.range_m, agent_map)
        pose = new_pose
    world = build_topo_polar_trajectory(
        agent_map, poses, goal, config.d_min, config.range_R, config.dilation, source_tag=tag
    )
    local = align_trajectory(world, episode_frame(start))
    return Walk(local, world, start, poses, agent_map, reached)


# -- corpus building and paired evaluation ----------------------------------------------


@dataclass
class BuildReport:
    walks: int = 0
    inserted: int = 0
    merged: int = 0
    new_groups: int = 0
    discarded: int = 0
    superseded: int = 0
    failed_walks: int = 0
    outcomes: list = field(default_factory=list)


def walk_specs(scene: Scene, episodes: int, seed: int):
    """Deterministic (start, goal) pairs for scripted walks in ``scene``."""
    rng = np.random.default_rng([4, scene.seed, seed])
    goals = scene.present_categories()
    for _ in range(episodes):
        goal = goals[int(rng.integers(len(goals)))]
        yield sample_start(scene, rng), goal


def build_store(
    scenes: Sequence[Scene],
    episodes_per_scene: int,
    store: TrajRagStore | None = None,
    config: EpisodeConfig = EpisodeConfig(),
    seed: int = 0,
) -> tuple[TrajRagStore, BuildReport]:
    """Insert scripted walks from every scene into ``store`` (created if absent)."""
    from .store import DiscardedRedundant, MergedInto, NewGroup, SupersededExisting, insert_trajectory

    if not scenes:
        raise ConfigError("no scenes given")
    if store is None:
        store = TrajRagStore(scenes[0].categories)
    report = BuildReport()
    for scene in scenes:
        if tuple(scene.categories) != tuple(store.categories):
            raise ConfigError(f"scene {scene.seed} categories differ from the store's")
        for k, (start, goal) in enumerate(walk_specs(scene, episodes_per_scene, seed)):
            report.walks += 1
            try:
                walk = scripted_walk(scene, start, goal, config, tag=f"scene:{scene.seed}:walk:{k}")
            except (UnreachableError, EmptyTrajectoryError):
                report.failed_walks += 1
                continue
            out = insert_trajectory(store, walk.trajectory)
            report.outcomes.append(out)
            if isinstance(out, NewGroup):
                report.new_groups += 1
                report.inserted += 1
            elif isinstance(out, MergedInto):
                report.merged += 1
                report.inserted += 1
            elif isinstance(out, DiscardedRedundant):
                report.discarded += 1
            elif isinstance(out, SupersededExisting):
                report.superseded += 1
                report.inserted += 1
    return store, report


@dataclass(frozen=True)
class EpisodeSpec:
    scene_seed: int
    layout: int
    goal: int
    episode_seed: int


def episode_specs(
    scene_seeds: Sequence[int], layouts: Sequence[int], goals_per_scene: int, params: SceneParams, seed: int = 0
):
    """Paired-evaluation episodes: each scene seed uses layout ``layouts[i % len]``."""
    if not layouts:
        raise ConfigError("no layouts given")
    specs = []
    for i, s in enumerate(scene_seeds):
        layout = layouts[i % len(layouts)]
        scene = generate_scene(s, SceneParams(**{**params.__dict__, "layout": layout}))
        goals = scene.present_categories()
        rng = np.random.default_rng([5, s, seed])
        chosen = rng.permutation(goals)[: goals_per_scene]
        specs += [EpisodeSpec(int(s), int(layout), int(g), int(seed)) for g in chosen]
    return specs


RESULT_HEADER = "planner\tscene\tlayout\tgoal\tsuccess\tpath_length\tshortest_length\tsteps\tstop\tdecisions\tspl"


def result_row(planner: str, spec: EpisodeSpec, r: EpisodeResult, categories) -> str:
    return "\t".join(
        [
            planner,
            str(spec.scene_seed),
            str(spec.layout),
            categories[spec.goal],
            str(int(r.success)),
            f"{r.path_length:.6f}",
            f"{r.shortest_length:.6f}",
            str(r.steps),
            str(int(r.stop_issued)),
            str(r.decisions),
            f"{r.spl:.6f}",
        ]
    )


PLANNERS = ("trajrag", "random", "nearest")


def planner_factory(name: str, seed: int = 0) -> Callable[[EpisodeSpec], object]:
    """Fresh-planner factory for :func:`evaluate`; random draws are seeded per episode."""
    if name == "trajrag":
        return lambda spec: HeuristicPlanner()
    if name == "random":
        return lambda spec: RandomFrontierPlanner([6, seed, spec.scene_seed, spec.goal, spec.episode_seed])
    if name == "nearest":
        return lambda spec: NearestFrontierPlanner()
    raise ConfigError(f"unknown planner {name!r}; choose from {', '.join(PLANNERS)}")


def evaluate(
    specs: Sequence[EpisodeSpec],
    planners: dict[str, Callable[[EpisodeSpec], object]],
    store: TrajRagStore | None,
    params: SceneParams = SceneParams(),
    config: EpisodeConfig = EpisodeConfig(),
    workers: int = 1,
) -> dict[str, list[tuple[EpisodeSpec, EpisodeResult]]]:
    """Run every spec under every planner (same start pose per spec).

    ``planners`` maps a name to a factory producing a fresh planner for an
    episode, so seeded planners restart identically for each spec.  With
    ``workers > 1`` scenes are spread over threads; the store is only read, and
    results come back in spec order regardless of scheduling.
    """
    by_scene: dict[tuple[int, int], list[int]] = {}
    for i, spec in enumerate(specs):
        by_scene.setdefault((spec.scene_seed, spec.layout), []).append(i)

    def run_scene(key):
        scene = generate_scene(key[0], SceneParams(**{**params.__dict__, "layout": key[1]}))
        rows = []
        for i in by_scene[key]:
            spec = specs[i]
            for name, factory in planners.items():
                planner = factory(spec)
                use_store = store if getattr(planner, "uses_experience", False) else None
                r = run_episode(scene, spec.goal, planner, use_store, config=config, seed=spec.episode_seed)
                rows.append((i, name, r))
        return rows

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(run_scene, by_scene))
    else:
        chunks = [run_scene(k) for k in by_scene]
    table = {(i, name): r for rows in chunks for i, name, r in rows}
    return {name: [(spec, table[i, name]) for i, spec in enumerate(specs)] for name in planners}


def consolidate(store: TrajRagStore, results: Sequence[tuple[EpisodeSpec, EpisodeResult]]) -> list:
    """Insert the trajectories of successful episodes, one after another in spec order."""
    from .store import insert_trajectory

    outcomes = []
    for _, r in results:
        if r.success and r.trajectory is not None and len(r.trajectory):
            outcomes.append(insert_trajectory(store, r.trajectory))
    return outcomes
