"""Hierarchical trajectory store: groups with summary graphs over chunks.

Every group owns a summary graph expressed in the frame of its first
trajectory.  Incoming trajectories are matched against each summary; the best
valid alignment decides whether the trajectory joins that group, is dropped as
redundant, replaces shorter members, or founds a new group.

Chunk embeddings are computed after rotating sector vectors into the group
frame, so fine retrieval compares trajectories under a common heading.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import embed as E
from .errors import ConfigError, EmptyTrajectoryError, ParseError, TrajRagError
from .match import (
    INLIER_TOL,
    MIN_INLIER_RATIO,
    MIN_INLIERS,
    MIN_MEAN_SIMILARITY,
    RANSAC_ITERS,
    MatchResult,
    Se2Transform,
    match_nodes,
    rotate_sector,
)
from .topo import (
    TopoNode,
    TopoPolarTrajectory,
    describe_trajectory,
    merge_consecutive,
    node_from_line,
    node_to_line,
    parse_trajectory_lines,
    prune_loops,
    trajectory_to_lines,
)

STORE_VERSION = 1


@dataclass
class StoreConfig:
    eps_merge: float = 0.5
    K: int = 3
    ransac_iters: int = RANSAC_ITERS
    inlier_tol: float = INLIER_TOL
    min_inlier_ratio: float = MIN_INLIER_RATIO
    min_inliers: int = MIN_INLIERS
    min_similarity: float = MIN_MEAN_SIMILARITY
    seed: int = 0
    gamma: float = E.GAMMA
    d_out: int = E.D_OUT

    def __post_init__(self):
        if self.eps_merge <= 0 or self.K < 1 or self.ransac_iters < 1 or self.inlier_tol <= 0:
            raise ConfigError("invalid store configuration")


@dataclass
class Chunk:
    id: int
    trajectory: TopoPolarTrajectory
    description: str
    embedding: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, Chunk):
            return NotImplemented
        return (
            self.id == other.id
            and self.trajectory == other.trajectory
            and self.description == other.description
            and np.array_equal(self.embedding, other.embedding)
        )


@dataclass
class SummaryGraph:
    nodes: list[TopoNode] = field(default_factory=list)
    edges: set[tuple[int, int]] = field(default_factory=set)

    @property
    def positions(self) -> np.ndarray:
        return np.array([n.position for n in self.nodes], dtype=float).reshape(-1, 2)

    def add_edge(self, a: int, b: int) -> bool:
        if a == b:
            return False
        e = (min(a, b), max(a, b))
        if e in self.edges:
            return False
        self.edges.add(e)
        return True


@dataclass
class Member:
    chunk_id: int
    goal: int
    transform: Se2Transform
    sequence: tuple[int, ...]


@dataclass
class Group:
    id: int
    summary: SummaryGraph = field(default_factory=SummaryGraph)
    members: dict[int, Member] = field(default_factory=dict)

    @property
    def chunk_ids(self) -> list[int]:
        return sorted(self.members)


# -- insert outcomes ------------------------------------------------------------


@dataclass(frozen=True)
class NewGroup:
    group_id: int
    chunk_id: int


@dataclass(frozen=True)
class MergedInto:
    group_id: int
    chunk_id: int
    transform: Se2Transform


@dataclass(frozen=True)
class DiscardedRedundant:
    group_id: int
    superseding: int


@dataclass(frozen=True)
class SupersededExisting:
    group_id: int
    chunk_id: int
    removed: tuple[int, ...]
    transform: Se2Transform


InsertOutcome = NewGroup | MergedInto | DiscardedRedundant | SupersededExisting


@dataclass(frozen=True)
class RedundancyVerdict:
    redundant_to: int | None = None
    supersedes: tuple[int, ...] = ()


@dataclass(frozen=True)
class CoarseHit:
    group_id: int
    score: float
    match: MatchResult


@dataclass(frozen=True)
class FineHit:
    chunk_id: int
    score: float


# -- geometry helpers ---------------------------------------------------------------


def is_subsequence(short: Sequence, long: Sequence) -> bool:
    """Order-preserving (not necessarily contiguous) containment."""
    it = iter(long)
    return all(any(x == y for y in it) for x in short)


def align_trajectory(traj: TopoPolarTrajectory, T: Se2Transform) -> TopoPolarTrajectory:
    """Express ``traj`` in another frame: move positions and rotate sectors."""
    shift = T.sector_shift
    pos = T.apply(traj.positions) if len(traj) else np.empty((0, 2))
    nodes = tuple(
        TopoNode(n.id, tuple(rotate_sector(n.sector, shift).tolist()), (p[0], p[1]))
        for n, p in zip(traj.nodes, pos)
    )
    return TopoPolarTrajectory(nodes, traj.goal_category, traj.source_tag)


def resolve_nodes(summary: SummaryGraph, points: np.ndarray, eps: float) -> list[int | None]:
    """Nearest summary node id within ``eps`` for each point (None otherwise)."""
    if not summary.nodes:
        return [None] * len(points)
    sp = summary.positions
    d = np.linalg.norm(points[:, None, :] - sp[None, :, :], axis=2)
    near = np.argmin(d, axis=1)
    return [summary.nodes[k].id if d[i, k] < eps else None for i, k in enumerate(near)]


def resolved_sequence(summary: SummaryGraph, traj: TopoPolarTrajectory, T: Se2Transform, eps: float):
    """Summary ids along the aligned trajectory; unknown nodes get unique negative ids."""
    ids = resolve_nodes(summary, T.apply(traj.positions), eps)
    seq = [i if i is not None else -(k + 1) for k, i in enumerate(ids)]
    return tuple(prune_loops(seq))


def merge_into_summary(group: Group, traj: TopoPolarTrajectory, T: Se2Transform, eps: float = 0.5) -> Group:
    """Add the aligned trajectory's unseen nodes and edges to the summary.

    A node within ``eps`` of an existing summary node is identified with it
    (the stored sector vector is kept); otherwise it is appended.
    """
    summary = group.summary
    aligned = align_trajectory(traj, T)
    ids = []
    for node in aligned.nodes:
        (hit,) = resolve_nodes(summary, np.array([node.position]), eps)
        if hit is None:
            hit = len(summary.nodes)
            summary.nodes.append(TopoNode(hit, node.sector, node.position))
        ids.append(hit)
    for a, b in zip(merge_consecutive(ids), merge_consecutive(ids)[1:]):
        summary.add_edge(a, b)
    return group


def check_redundancy(group: Group, sequence: Sequence[int], goal: int) -> RedundancyVerdict:
    """Containment test of a resolved node sequence against same-goal members.

    The new sequence is redundant if it is contained in (or equal to) a
    member's sequence; otherwise members strictly contained in it are reported
    as superseded.
    """
    seq = tuple(sequence)
    superseded = []
    for cid in group.chunk_ids:
        m = group.members[cid]
        if m.goal != goal:
            continue
        if is_subsequence(seq, m.sequence):
            return RedundancyVerdict(redundant_to=cid)
        if len(m.sequence) < len(seq) and is_subsequence(m.sequence, seq):
            superseded.append(cid)
    return RedundancyVerdict(supersedes=tuple(superseded))


# -- the store ------------------------------------------------------------------------


@dataclass
class TrajRagStore:
    categories: tuple[str, ...]
    config: StoreConfig = field(default_factory=StoreConfig)
    params: E.ProjectionParams | None = None
    groups: dict[int, Group] = field(default_factory=dict)
    chunks: dict[int, Chunk] = field(default_factory=dict)
    next_group_id: int = 0
    next_chunk_id: int = 0

    def __post_init__(self):
        self.categories = tuple(self.categories)
        if self.params is None:
            self.params = E.ProjectionParams.for_categories(
                len(self.categories), self.config.d_out, self.config.seed
            )

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    def group_of(self, chunk_id: int) -> int:
        for g in self.groups.values():
            if chunk_id in g.members:
                return g.id
        raise KeyError(chunk_id)

    def embed(self, traj: TopoPolarTrajectory, T: Se2Transform | None = None) -> np.ndarray:
        aligned = traj if T is None else align_trajectory(traj, T)
        return E.embed_trajectory(aligned, traj.goal_category, self.params, self.n_categories, self.config.gamma)

    def reembed(self) -> None:
        """Recompute every chunk embedding (after the projection changed)."""
        for g in self.groups.values():
            for cid, m in g.members.items():
                self.chunks[cid].embedding = self.embed(self.chunks[cid].trajectory, m.transform)

    def match_group(self, traj: TopoPolarTrajectory, group: Group) -> MatchResult | None:
        c = self.config
        return match_nodes(traj.nodes, group.summary.nodes, c.K, c.ransac_iters, c.inlier_tol, c.seed)

    def _add_chunk(self, group: Group, traj: TopoPolarTrajectory, T: Se2Transform) -> int:
        cid = self.next_chunk_id
        self.next_chunk_id += 1
        merge_into_summary(group, traj, T, self.config.eps_merge)
        seq = resolved_sequence(group.summary, traj, T, self.config.eps_merge)
        group.members[cid] = Member(cid, traj.goal_category, T, seq)
        self.chunks[cid] = Chunk(cid, traj, describe_trajectory(traj, self.categories), self.embed(traj, T))
        return cid

    def __eq__(self, other):
        if not isinstance(other, TrajRagStore):
            return NotImplemented
        return (
            self.categories == other.categories
            and self.config == other.config
            and self.params == other.params
            and self.groups == other.groups
            and self.chunks == other.chunks
            and self.next_group_id == other.next_group_id
            and self.next_chunk_id == other.next_chunk_id
        )


def insert_trajectory(store: TrajRagStore, traj: TopoPolarTrajectory) -> InsertOutcome:
    """Integrate one trajectory into the store."""
    if not len(traj.nodes):
        raise EmptyTrajectoryError("cannot insert an empty trajectory")
    c = store.config
    best: tuple[float, int, MatchResult] | None = None
    for gid in sorted(store.groups):
        res = store.match_group(traj, store.groups[gid])
        if res is None or not res.is_valid(c.min_inlier_ratio, c.min_inliers, len(traj), c.min_similarity):
            continue
        if best is None or res.score > best[0]:
            best = (res.score, gid, res)

    if best is None:
        gid = store.next_group_id
        store.next_group_id += 1
        group = Group(gid)
        store.groups[gid] = group
        cid = store._add_chunk(group, traj, Se2Transform())
        return NewGroup(gid, cid)

    _, gid, res = best
    group = store.groups[gid]
    seq = resolved_sequence(group.summary, traj, res.transform, c.eps_merge)
    verdict = check_redundancy(group, seq, traj.goal_category)
    if verdict.redundant_to is not None:
        return DiscardedRedundant(gid, verdict.redundant_to)
    for old in verdict.supersedes:
        del group.members[old]
        del store.chunks[old]
    cid = store._add_chunk(group, traj, res.transform)
    if verdict.supersedes:
        return SupersededExisting(gid, cid, verdict.supersedes, res.transform)
    return MergedInto(gid, cid, res.transform)


def coarse_retrieve(store: TrajRagStore, query: TopoPolarTrajectory, top_m: int = 3) -> list[CoarseHit]:
    """Rank groups by inlier ratio times mean inlier similarity against their summaries."""
    if top_m < 1:
        raise ValueError("top_m must be >= 1")
    hits = []
    for gid in sorted(store.groups):
        res = store.match_group(query, store.groups[gid])
        if res is None or res.score <= 0:
            continue
        hits.append(CoarseHit(gid, res.score, res))
    hits.sort(key=lambda h: (-h.score, h.group_id))
    return hits[:top_m]


def fine_retrieve(store: TrajRagStore, group_ids: Sequence[int], query_embedding, top_k: int = 3) -> list[FineHit]:
    """Cosine ranking of the chunks inside ``group_ids``; ties go to the lower chunk id."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    q = np.asarray(query_embedding, dtype=float)
    q = q / np.linalg.norm(q)
    ids = []
    for gid in group_ids:
        if gid not in store.groups:
            raise KeyError(f"unknown group id {gid}")
        ids.extend(store.groups[gid].chunk_ids)
    ids = sorted(set(ids))
    if not ids:
        return []
    Z = np.array([store.chunks[i].embedding for i in ids])
    scores = Z @ q / np.linalg.norm(Z, axis=1)
    order = sorted(range(len(ids)), key=lambda k: (-scores[k], ids[k]))
    return [FineHit(ids[k], float(scores[k])) for k in order[:top_k]]


def retrieve(store: TrajRagStore, query: TopoPolarTrajectory, top_m: int = 3, top_k: int = 3):
    """Coarse-to-fine retrieval; each group's chunks are scored with the query aligned to it.

    Returns ``(coarse_hits, [(FineHit, CoarseHit), ...])`` with the fine list
    sorted by similarity then chunk id.
    """
    coarse = coarse_retrieve(store, query, top_m)
    fine = []
    for hit in coarse:
        z = store.embed(query, hit.match.transform)
        fine.extend((f, hit) for f in fine_retrieve(store, [hit.group_id], z, top_k))
    fine.sort(key=lambda fh: (-fh[0].score, fh[0].chunk_id))
    return coarse, fine[:top_k]


def train_store(
    store: TrajRagStore, epochs: int = 100, lr: float = 0.5, tau: float = E.TAU, seed: int = 0
) -> E.TrainingRun:
    """Fit the projection on group-labelled chunks, then re-embed every chunk."""
    if len(store.groups) < 2:
        raise TrajRagError("training needs at least two groups")
    data = [
        E.LabeledTrajectory(align_trajectory(store.chunks[cid].trajectory, m.transform), gid)
        for gid in sorted(store.groups)
        for cid, m in sorted(store.groups[gid].members.items())
    ]
    run = E.fit_projection(
        data, store.n_categories, epochs, lr, tau, seed, d_out=store.params.d_out,
        gamma=store.config.gamma, init=store.params,
    )
    store.params = run.params
    store.reembed()
    return run


# -- persistence --------------------------------------------------------------------


def _f(x) -> str:
    return repr(float(x))


def _manifest_lines(store: TrajRagStore) -> list[str]:
    c = store.config
    lines = [
        f"trajrag-store v{STORE_VERSION}",
        "categories " + " ".join(store.categories),
    ]
    for key in StoreConfig.__dataclass_fields__:
        val = getattr(c, key)
        lines.append(f"config {key} {_f(val) if isinstance(val, float) else val}")
    lines += [
        f"next-group-id {store.next_group_id}",
        f"next-chunk-id {store.next_chunk_id}",
        f"groups {len(store.groups)}",
    ]
    for gid in sorted(store.groups):
        lines.append(f"group {gid} " + " ".join(str(i) for i in store.groups[gid].chunk_ids))
    W = store.params.matrix
    lines.append(f"projection v1 {W.shape[0]} {W.shape[1]}")
    lines += [" ".join(_f(v) for v in row) for row in W]
    lines.append("end-manifest")
    return lines


def _group_lines(group: Group) -> list[str]:
    s = group.summary
    lines = [f"trajrag-group v{STORE_VERSION}", f"id {group.id}", f"summary-nodes {len(s.nodes)}"]
    lines += [node_to_line(n, "snode") for n in s.nodes]
    lines.append(f"edges {len(s.edges)}")
    lines += [f"edge {a} {b}" for a, b in sorted(s.edges)]
    lines.append(f"members {len(group.members)}")
    for cid in group.chunk_ids:
        m = group.members[cid]
        T = m.transform
        seq = " ".join(str(i) for i in m.sequence)
        lines.append(
            f"member {cid} {m.goal} {_f(T.rotation)} {_f(T.translation[0])} {_f(T.translation[1])} seq {seq}".rstrip()
        )
    lines.append("end-group")
    return lines


def _chunk_lines(chunk: Chunk) -> list[str]:
    lines = [f"trajrag-chunk v{STORE_VERSION}", f"id {chunk.id}", f"description {chunk.description}"]
    lines.append(f"embedding {len(chunk.embedding)} " + " ".join(_f(v) for v in chunk.embedding))
    lines += trajectory_to_lines(chunk.trajectory)
    lines.append("end-chunk")
    return lines


def _write(path: Path, lines: list[str]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def save(store: TrajRagStore, path) -> None:
    """Write the store as a directory: manifest, groups/<id>, chunks/<id>."""
    root = Path(path)
    (root / "groups").mkdir(parents=True, exist_ok=True)
    (root / "chunks").mkdir(parents=True, exist_ok=True)
    keep_g = {str(g) for g in store.groups}
    keep_c = {str(c) for c in store.chunks}
    for sub, keep in (("groups", keep_g), ("chunks", keep_c)):
        for f in (root / sub).iterdir():
            if f.name not in keep:
                f.unlink()
    for gid, g in store.groups.items():
        _write(root / "groups" / str(gid), _group_lines(g))
    for cid, ch in store.chunks.items():
        _write(root / "chunks" / str(cid), _chunk_lines(ch))
    _write(root / "manifest", _manifest_lines(store))


class _Reader:
    def __init__(self, path: Path):
        self.source = str(path)
        try:
            self.lines = path.read_text().splitlines()
        except OSError as exc:
            raise ParseError(f"cannot read: {exc}", None, self.source) from None
        self.i = 0

    def fail(self, msg, offset=0):
        raise ParseError(msg, self.i + 1 + offset, self.source)

    def take(self, key: str) -> str:
        if self.i >= len(self.lines):
            self.fail(f"unexpected end of file, expected '{key}'")
        head, _, rest = self.lines[self.i].partition(" ")
        if head != key:
            self.fail(f"expected '{key}', found {self.lines[self.i][:40]!r}")
        self.i += 1
        return rest

    def take_int(self, key: str) -> int:
        rest = self.take(key)
        try:
            return int(rest)
        except ValueError:
            self.i -= 1
            self.fail(f"'{key}' needs an integer")

    def raw(self) -> str:
        if self.i >= len(self.lines):
            self.fail("unexpected end of file")
        self.i += 1
        return self.lines[self.i - 1]


def _parse_config(key: str, val: str, r: _Reader):
    kind = StoreConfig.__dataclass_fields__[key].type
    try:
        return float(val) if kind in (float, "float") else int(val)
    except ValueError:
        r.i -= 1
        r.fail(f"bad value for config {key}")


def _load_group(path: Path) -> Group:
    r = _Reader(path)
    if r.raw() != f"trajrag-group v{STORE_VERSION}":
        r.fail("bad group header", -1)
    gid = r.take_int("id")
    summary = SummaryGraph()
    for _ in range(r.take_int("summary-nodes")):
        summary.nodes.append(node_from_line(r.raw(), r.i, r.source, key="snode"))
    for _ in range(r.take_int("edges")):
        try:
            a, b = (int(v) for v in r.take("edge").split())
        except ValueError:
            r.fail("malformed edge", -1)
        summary.edges.add((a, b))
    members = {}
    for _ in range(r.take_int("members")):
        parts = r.take("member").split()
        try:
            cid, goal = int(parts[0]), int(parts[1])
            rot, tx, ty = float(parts[2]), float(parts[3]), float(parts[4])
            if parts[5] != "seq":
                raise ValueError
            seq = tuple(int(v) for v in parts[6:])
        except (ValueError, IndexError):
            r.fail("malformed member record", -1)
        members[cid] = Member(cid, goal, Se2Transform(rot, (tx, ty)), seq)
    if r.raw() != "end-group":
        r.fail("missing 'end-group' terminator", -1)
    return Group(gid, summary, members)


def _load_chunk(path: Path) -> Chunk:
    r = _Reader(path)
    if r.raw() != f"trajrag-chunk v{STORE_VERSION}":
        r.fail("bad chunk header", -1)
    cid = r.take_int("id")
    desc = r.take("description")
    parts = r.take("embedding").split()
    try:
        n = int(parts[0])
        emb = np.array([float(v) for v in parts[1:]])
    except (ValueError, IndexError):
        r.fail("malformed embedding", -1)
    if len(emb) != n:
        r.fail(f"embedding has {len(emb)} values, header says {n}", -1)
    traj, r.i = parse_trajectory_lines(r.lines, r.i, r.source)
    if r.raw() != "end-chunk":
        r.fail("missing 'end-chunk' terminator", -1)
    return Chunk(cid, traj, desc, emb)


def load(path) -> TrajRagStore:
    """Read a store directory written by :func:`save`; raises ParseError on damage."""
    root = Path(path)
    if not (root / "manifest").is_file():
        raise TrajRagError(f"no store manifest under {root}")
    r = _Reader(root / "manifest")
    header = r.raw()
    if header != f"trajrag-store v{STORE_VERSION}":
        r.fail(f"unsupported store header {header!r}", -1)
    categories = tuple(r.take("categories").split())
    cfg = {}
    while r.i < len(r.lines) and r.lines[r.i].startswith("config "):
        _, key, val = r.raw().split(" ", 2)
        if key not in StoreConfig.__dataclass_fields__:
            r.fail(f"unknown config key {key!r}", -1)
        cfg[key] = _parse_config(key, val, r)
    next_g = r.take_int("next-group-id")
    next_c = r.take_int("next-chunk-id")
    index = {}
    for _ in range(r.take_int("groups")):
        try:
            ids = [int(v) for v in r.take("group").split()]
        except ValueError:
            r.fail("malformed group index line", -1)
        index[ids[0]] = ids[1:]
    parts = r.take("projection").split()
    try:
        if parts[0] != "v1":
            raise ValueError
        rows, cols = int(parts[1]), int(parts[2])
        W = np.array([[float(v) for v in r.raw().split()] for _ in range(rows)])
    except (ValueError, IndexError):
        r.fail("malformed projection block", -1)
    if W.shape != (rows, cols):
        r.fail("projection block has wrong shape")
    if r.raw() != "end-manifest":
        r.fail("missing 'end-manifest' terminator", -1)

    groups = {}
    chunks = {}
    for gid, cids in index.items():
        g = _load_group(root / "groups" / str(gid))
        if g.id != gid or g.chunk_ids != sorted(cids):
            raise ParseError("group file disagrees with manifest index", None, str(root / "groups" / str(gid)))
        groups[gid] = g
        for cid in cids:
            ch = _load_chunk(root / "chunks" / str(cid))
            if ch.id != cid:
                raise ParseError("chunk id mismatch", None, str(root / "chunks" / str(cid)))
            chunks[cid] = ch
    try:
        config = StoreConfig(**cfg)
    except (TypeError, ConfigError) as exc:
        raise ParseError(f"bad store config: {exc}", None, str(root / "manifest")) from None
    return TrajRagStore(categories, config, E.ProjectionParams(W), groups, chunks, next_g, next_c)
