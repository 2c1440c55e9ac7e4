"""Topo-polar trajectories: skeleton junctions annotated with polar sector labels.

Pipeline: free mask -> thinning -> junction pixels -> distance suppression ->
12-sector sampling per node -> nearest-node assignment of poses -> loop
pruning.  Node world positions stay in the frame of the source map.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numba
import numpy as np

from .errors import EmptyTrajectoryError, MapError, ParseError
from .gridmap import (
    DEFAULT_DILATION,
    DEFAULT_SAMPLING_RANGE,
    FREE,
    N_SECTORS,
    OBSTACLE,
    SECTOR_ANGLES,
    UNKNOWN,
    SemanticMap,
    dilate_semantics,
    label_name,
    sample_rays,
)

DEFAULT_D_MIN = 0.5


@dataclass(frozen=True)
class TopoNode:
    id: int
    sector: tuple[int, ...]
    position: tuple[float, float]

    def __post_init__(self):
        sector = tuple(int(v) for v in self.sector)
        if len(sector) != N_SECTORS:
            raise ValueError(f"sector vector must have {N_SECTORS} labels, got {len(sector)}")
        object.__setattr__(self, "sector", sector)
        object.__setattr__(self, "position", (float(self.position[0]), float(self.position[1])))
        object.__setattr__(self, "id", int(self.id))


@dataclass(frozen=True)
class TopoPolarTrajectory:
    """Loop-free ordered node list with a goal category index."""

    nodes: tuple[TopoNode, ...]
    goal_category: int
    source_tag: str = ""

    def __post_init__(self):
        nodes = tuple(self.nodes)
        ids = [n.id for n in nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("trajectory node ids must be pairwise distinct")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "goal_category", int(self.goal_category))

    def __len__(self):
        return len(self.nodes)

    @property
    def ids(self) -> list[int]:
        return [n.id for n in self.nodes]

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(a.id, b.id) for a, b in zip(self.nodes, self.nodes[1:])]

    @property
    def positions(self) -> np.ndarray:
        return np.array([n.position for n in self.nodes], dtype=float).reshape(-1, 2)

    @property
    def sectors(self) -> np.ndarray:
        return np.array([n.sector for n in self.nodes], dtype=np.int64).reshape(-1, N_SECTORS)


# -- thinning -----------------------------------------------------------------


@numba.njit(cache=True)
def _guo_hall_pass(img, odd):
    h, w = img.shape
    marks = []
    for r in range(1, h - 1):
        for c in range(1, w - 1):
            if img[r, c] == 0:
                continue
            p2 = img[r - 1, c]
            p3 = img[r - 1, c + 1]
            p4 = img[r, c + 1]
            p5 = img[r + 1, c + 1]
            p6 = img[r + 1, c]
            p7 = img[r + 1, c - 1]
            p8 = img[r, c - 1]
            p9 = img[r - 1, c - 1]
            cc = (
                ((1 - p2) & (p3 | p4))
                + ((1 - p4) & (p5 | p6))
                + ((1 - p6) & (p7 | p8))
                + ((1 - p8) & (p9 | p2))
            )
            n1 = (p9 | p2) + (p3 | p4) + (p5 | p6) + (p7 | p8)
            n2 = (p2 | p3) + (p4 | p5) + (p6 | p7) + (p8 | p9)
            n = min(n1, n2)
            if odd:
                m = (p6 | p7 | (1 - p9)) & p8
            else:
                m = (p2 | p3 | (1 - p5)) & p4
            if cc == 1 and 2 <= n <= 3 and m == 0:
                marks.append(r * w + c)
    for k in marks:
        img[k // w, k % w] = 0
    return len(marks)


@numba.njit(cache=True)
def _yokoi8(img, r, c):
    # neighbours E, NE, N, NW, W, SW, S, SE as complements
    x = np.empty(9, dtype=np.int64)
    x[0] = 1 - img[r, c + 1]
    x[1] = 1 - img[r - 1, c + 1]
    x[2] = 1 - img[r - 1, c]
    x[3] = 1 - img[r - 1, c - 1]
    x[4] = 1 - img[r, c - 1]
    x[5] = 1 - img[r + 1, c - 1]
    x[6] = 1 - img[r + 1, c]
    x[7] = 1 - img[r + 1, c + 1]
    x[8] = x[0]
    total = 0
    for k in (0, 2, 4, 6):
        total += x[k] - x[k] * x[k + 1] * x[k + 2]
    return total


@numba.njit(cache=True)
def _drop_square_pixels(img):
    h, w = img.shape
    changed = True
    while changed:
        changed = False
        for r in range(1, h - 2):
            for c in range(1, w - 2):
                if img[r, c] & img[r + 1, c] & img[r, c + 1] & img[r + 1, c + 1]:
                    for dr in range(2):
                        for dc in range(2):
                            rr = r + dr
                            cc = c + dc
                            if img[rr, cc] and _yokoi8(img, rr, cc) == 1:
                                img[rr, cc] = 0
                                changed = True
                                break
                        if changed:
                            break
                if changed:
                    break
            if changed:
                break


def skeletonize(free_mask: np.ndarray) -> np.ndarray:
    """One-pixel-wide skeleton via two-subcycle (Guo-Hall) thinning.

    A final sequential pass removes simple pixels from any remaining 2x2
    block, so only blocks whose every pixel is topologically necessary stay.
    """
    mask = np.asarray(free_mask, dtype=bool)
    img = np.zeros((mask.shape[0] + 2, mask.shape[1] + 2), dtype=np.uint8)
    img[1:-1, 1:-1] = mask
    while True:
        removed = _guo_hall_pass(img, True)
        removed += _guo_hall_pass(img, False)
        if removed == 0:
            break
    _drop_square_pixels(img)
    return img[1:-1, 1:-1].astype(bool)


# -- junctions and suppression ---------------------------------------------------

# ring order N, NE, E, SE, S, SW, W, NW
_RING = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]


def _ring_stack(mask: np.ndarray) -> np.ndarray:
    pad = np.pad(mask, 1)
    h, w = mask.shape
    return np.stack([pad[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w] for dr, dc in _RING])


def neighbor_components(skeleton: np.ndarray) -> np.ndarray:
    """Per pixel, number of connected runs of skeleton pixels around its 8-ring."""
    ring = _ring_stack(np.asarray(skeleton, dtype=bool)).astype(np.int8)
    rolled = np.roll(ring, -1, axis=0)
    transitions = ((ring == 0) & (rolled == 1)).sum(axis=0)
    full = ring.all(axis=0)
    return np.where(full, 1, transitions)


def detect_candidate_nodes(skeleton: np.ndarray) -> list[tuple[int, int]]:
    """Skeleton pixels whose 8-neighbourhood splits into >= 3 components."""
    skel = np.asarray(skeleton, dtype=bool)
    comps = neighbor_components(skel)
    rows, cols = np.nonzero(skel & (comps >= 3))
    return list(zip(rows.tolist(), cols.tolist()))


def suppress_nodes(
    candidates: Iterable[tuple[int, int]], d_min: float = DEFAULT_D_MIN, resolution: float = 0.05
) -> list[tuple[int, int]]:
    """Greedy distance suppression in (row, col) order."""
    if d_min <= 0:
        raise ValueError("d_min must be positive")
    ordered = sorted({(int(r), int(c)) for r, c in candidates})
    limit = (d_min / resolution) ** 2
    kept: list[tuple[int, int]] = []
    kept_arr = np.empty((0, 2))
    for rc in ordered:
        if len(kept):
            d2 = ((kept_arr - rc) ** 2).sum(axis=1)
            if (d2 < limit).any():
                continue
        kept.append(rc)
        kept_arr = np.array(kept, dtype=float)
    return kept


def _fallback_pixels(skeleton: np.ndarray) -> list[tuple[int, int]]:
    """Endpoints (and isolated pixels) plus the pixel nearest the skeleton centroid."""
    skel = np.asarray(skeleton, dtype=bool)
    pts = np.argwhere(skel)
    if len(pts) == 0:
        return []
    degree = _ring_stack(skel).sum(axis=0)
    ends = np.argwhere(skel & (degree <= 1))
    centroid = pts.mean(axis=0)
    mid = pts[np.argmin(((pts - centroid) ** 2).sum(axis=1))]
    out = {tuple(int(v) for v in p) for p in ends}
    out.add((int(mid[0]), int(mid[1])))
    return sorted(out)


# -- node construction -------------------------------------------------------------


def build_nodes(
    smap: SemanticMap,
    pixels: Sequence[tuple[int, int]],
    range_R: float = DEFAULT_SAMPLING_RANGE,
    dilation: int = DEFAULT_DILATION,
    start_id: int = 0,
) -> list[TopoNode]:
    """Sample the 12-sector vector at each pixel on a semantics-dilated copy."""
    for r, c in pixels:
        if not smap.in_bounds(r, c):
            raise MapError(f"pixel {(r, c)} outside map")
    if not len(pixels):
        return []
    labels = dilate_semantics(smap, dilation).label_grid()
    range_cells = range_R / smap.resolution
    nodes = []
    for k, (r, c) in enumerate(pixels):
        sv = sample_rays(labels, (float(r), float(c)), SECTOR_ANGLES, range_cells)
        nodes.append(TopoNode(start_id + k, tuple(sv.tolist()), smap.cell_to_world((r, c))))
    return nodes


def extract_nodes(
    smap: SemanticMap,
    d_min: float = DEFAULT_D_MIN,
    range_R: float = DEFAULT_SAMPLING_RANGE,
    dilation: int = DEFAULT_DILATION,
) -> list[TopoNode]:
    """All topological nodes of the map's explored free space."""
    skel = skeletonize(smap.free)
    cands = detect_candidate_nodes(skel)
    if not cands:
        cands = _fallback_pixels(skel)
    pixels = suppress_nodes(cands, d_min, smap.resolution)
    return build_nodes(smap, pixels, range_R, dilation)


def assign_to_nearest(poses, nodes: Sequence[TopoNode]) -> list[int]:
    """Id of the Euclidean-nearest node for each pose (ties -> lowest id)."""
    if not len(nodes):
        raise EmptyTrajectoryError("cannot assign poses to an empty node set")
    ordered = sorted(nodes, key=lambda n: n.id)
    centers = np.array([n.position for n in ordered])
    ids = np.array([n.id for n in ordered])
    pts = np.asarray(poses, dtype=float).reshape(-1, 2)
    d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return ids[np.argmin(d2, axis=1)].tolist()


def merge_consecutive(seq: Sequence) -> list:
    out = []
    for x in seq:
        if not out or out[-1] != x:
            out.append(x)
    return out


def prune_loops(seq: Sequence) -> list:
    """Merge consecutive repeats, then cut every cycle back to the latest visit.

    When a node reappears, the stretch from its previous occurrence up to the
    current step is dropped and the node is re-appended.
    """
    out: list = []
    where: dict = {}
    for x in merge_consecutive(seq):
        if x in where:
            cut = where[x]
            for y in out[cut:]:
                del where[y]
            del out[cut:]
        where[x] = len(out)
        out.append(x)
    return out


def build_topo_polar_trajectory(
    smap: SemanticMap,
    poses,
    goal_category: int,
    d_min: float = DEFAULT_D_MIN,
    range_R: float = DEFAULT_SAMPLING_RANGE,
    dilation: int = DEFAULT_DILATION,
    source_tag: str = "",
    nodes: Sequence[TopoNode] | None = None,
) -> TopoPolarTrajectory:
    """Full pipeline from map and pose history to a loop-free trajectory.

    ``nodes`` may be passed when the caller already extracted them from
    ``smap`` (the simulator does, to track node identity).
    """
    pts = np.asarray(poses, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        raise EmptyTrajectoryError("no poses given")
    free = smap.free
    inside = False
    for p in pts:
        r, c = smap.world_to_cell(p)
        if smap.in_bounds(r, c) and free[r, c]:
            inside = True
            break
    if not inside:
        raise EmptyTrajectoryError("no pose lies in explored free space")
    if nodes is None:
        nodes = extract_nodes(smap, d_min, range_R, dilation)
    if not nodes:
        raise EmptyTrajectoryError("map yields no topological nodes")
    by_id = {n.id: n for n in nodes}
    seq = prune_loops(assign_to_nearest(pts, nodes))
    return TopoPolarTrajectory(tuple(by_id[i] for i in seq), goal_category, source_tag)


# -- descriptions ------------------------------------------------------------------


def _runs(indices: list[int]) -> str:
    parts = []
    start = prev = indices[0]
    for i in indices[1:] + [None]:
        if i is not None and i == prev + 1:
            prev = i
            continue
        parts.append(f"{start}" if start == prev else f"{start}-{prev}")
        if i is not None:
            start = prev = i
    return ", ".join(parts)


def describe_node(sector: Sequence[int], categories: Sequence[str]) -> str:
    groups: dict[int, list[int]] = {}
    for k, lab in enumerate(sector):
        if lab != FREE:
            groups.setdefault(int(lab), []).append(k)
    if not groups:
        return "open space"
    # semantic labels first (by index), then obstacle, then unknown
    order = sorted(groups, key=lambda l: (l < 0, l if l >= 0 else -l))
    clauses = []
    for lab in order:
        idx = groups[lab]
        noun = "sector" if len(idx) == 1 else "sectors"
        clauses.append(f"{label_name(lab, categories)} at {noun} {_runs(idx)}")
    return "; ".join(clauses)


def describe_trajectory(traj: TopoPolarTrajectory, categories: Sequence[str]) -> str:
    """Deterministic text: one clause per node, then the goal."""
    parts = [f"node {k}: {describe_node(n.sector, categories)}." for k, n in enumerate(traj.nodes, 1)]
    parts.append(f"goal: {label_name(traj.goal_category, categories)}.")
    return " ".join(parts)


# -- serialization -----------------------------------------------------------------

TRAJ_MAGIC = "topo-polar-trajectory v1"
_LABEL_CODES = {FREE: "F", OBSTACLE: "O", UNKNOWN: "U"}
_CODE_LABELS = {v: k for k, v in _LABEL_CODES.items()}


def _label_code(label: int) -> str:
    return _LABEL_CODES.get(label, str(label))


def _code_label(code: str, lineno, source) -> int:
    if code in _CODE_LABELS:
        return _CODE_LABELS[code]
    try:
        v = int(code)
    except ValueError:
        raise ParseError(f"bad sector label {code!r}", lineno, source) from None
    if v < 0:
        raise ParseError(f"bad sector label {code!r}", lineno, source)
    return v


def node_to_line(node: TopoNode, key: str = "node") -> str:
    labels = " ".join(_label_code(v) for v in node.sector)
    return f"{key} {node.id} {node.position[0]!r} {node.position[1]!r} {labels}"


def node_from_line(line: str, lineno=None, source=None, key: str = "node") -> TopoNode:
    parts = line.split()
    if len(parts) != 4 + N_SECTORS or parts[0] != key:
        raise ParseError(f"malformed {key} record", lineno, source)
    try:
        nid = int(parts[1])
        x, y = float(parts[2]), float(parts[3])
    except ValueError:
        raise ParseError(f"malformed {key} record", lineno, source) from None
    sector = tuple(_code_label(p, lineno, source) for p in parts[4:])
    return TopoNode(nid, sector, (x, y))


def trajectory_to_lines(traj: TopoPolarTrajectory) -> list[str]:
    lines = [
        TRAJ_MAGIC,
        f"goal {traj.goal_category}",
        f"source {traj.source_tag}",
        f"nodes {len(traj.nodes)}",
    ]
    lines.extend(node_to_line(n) for n in traj.nodes)
    lines.append("end-trajectory")
    return lines


def trajectory_to_text(traj: TopoPolarTrajectory) -> str:
    return "\n".join(trajectory_to_lines(traj)) + "\n"


def parse_trajectory_lines(lines: list[str], start: int = 0, source=None):
    """Parse a trajectory block at ``lines[start]``; returns (trajectory, next index)."""
    i = start
    if i >= len(lines) or lines[i].strip() != TRAJ_MAGIC:
        raise ParseError(f"missing '{TRAJ_MAGIC}' header", i + 1, source)
    try:
        head, _, val = lines[i + 1].partition(" ")
        if head != "goal":
            raise ValueError
        goal = int(val)
        head, _, tag = lines[i + 2].partition(" ")
        if head != "source":
            raise ValueError
        head, _, val = lines[i + 3].partition(" ")
        if head != "nodes":
            raise ValueError
        count = int(val)
    except (ValueError, IndexError):
        raise ParseError("malformed trajectory header", i + 2, source) from None
    i += 4
    nodes = []
    for _ in range(count):
        if i >= len(lines):
            raise ParseError("truncated node list", i + 1, source)
        nodes.append(node_from_line(lines[i], i + 1, source))
        i += 1
    if i >= len(lines) or lines[i].strip() != "end-trajectory":
        raise ParseError("missing 'end-trajectory' terminator", i + 1, source)
    try:
        traj = TopoPolarTrajectory(tuple(nodes), goal, tag)
    except ValueError as exc:
        raise ParseError(str(exc), start + 1, source) from None
    return traj, i + 1


def trajectory_from_text(text: str, source=None) -> TopoPolarTrajectory:
    traj, _ = parse_trajectory_lines(text.splitlines(), 0, source)
    return traj


def save_trajectory(traj: TopoPolarTrajectory, path) -> None:
    Path(path).write_text(trajectory_to_text(traj))


def load_trajectory(path) -> TopoPolarTrajectory:
    return trajectory_from_text(Path(path).read_text(), source=str(path))
