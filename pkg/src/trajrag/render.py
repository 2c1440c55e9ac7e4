"""Deterministic SVG drawings of maps, trajectories and summary graphs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .gridmap import SemanticMap, extract_frontiers
from .topo import TopoNode, TopoPolarTrajectory, extract_nodes, skeletonize

PALETTE = ("#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4", "#f032e6", "#bfef45", "#9a6324", "#469990")
UNKNOWN_FILL = "#bdbdbd"
FREE_FILL = "#ffffff"
OBSTACLE_FILL = "#424242"
SKELETON_FILL = "#90caf9"
FRONTIER_FILL = "#ffd54f"
NODE_FILL = "#d32f2f"
EDGE_STROKE = "#1565c0"

CELL_PX = 4
METRE_PX = 40


def _f(x: float) -> str:
    return f"{x:.2f}"


class _Canvas:
    """World-to-pixel mapping with y pointing up in the world."""

    def __init__(self, x0: float, y0: float, x1: float, y1: float, px_per_m: float):
        self.x0, self.y1, self.s = x0, y1, px_per_m
        self.w = max(1, int(round((x1 - x0) * px_per_m)))
        self.h = max(1, int(round((y1 - y0) * px_per_m)))
        self.parts: list[str] = []

    def px(self, x: float, y: float) -> tuple[float, float]:
        return (x - self.x0) * self.s, (self.y1 - y) * self.s

    def add(self, s: str) -> None:
        self.parts.append(s)

    def svg(self) -> str:
        head = (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.w}" height="{self.h}" '
            f'viewBox="0 0 {self.w} {self.h}">'
        )
        defs = (
            '<defs><marker id="arrow" viewBox="0 0 10 10" refX="9" refY="5" markerWidth="6" '
            f'markerHeight="6" orient="auto"><path d="M0,0 L10,5 L0,10 z" fill="{EDGE_STROKE}"/></marker></defs>'
        )
        return "\n".join([head, defs, *self.parts, "</svg>"]) + "\n"


def _map_canvas(smap: SemanticMap) -> _Canvas:
    r = smap.resolution
    ox, oy = smap.origin
    # cell (row, col) covers [ox + (col - 0.5) r, ox + (col + 0.5) r]
    return _Canvas(ox - r / 2, oy - r / 2, ox + (smap.width - 0.5) * r, oy + (smap.height - 0.5) * r, CELL_PX / r)


def _cells(c: _Canvas, smap: SemanticMap, mask: np.ndarray, fill: str, cls: str) -> None:
    """Horizontal runs of set cells as rectangles."""
    r = smap.resolution
    for row in range(smap.height):
        line = mask[row]
        if not line.any():
            continue
        padded = np.concatenate([[False], line, [False]])
        edges = np.flatnonzero(padded[1:] != padded[:-1])
        for a, b in zip(edges[::2], edges[1::2]):
            x, y = smap.cell_to_world((row, a))
            px, py = c.px(x - r / 2, y + r / 2)
            c.add(
                f'<rect class="{cls}" x="{_f(px)}" y="{_f(py)}" width="{_f((b - a) * r * c.s)}" '
                f'height="{_f(r * c.s)}" fill="{fill}"/>'
            )


def _nodes(c: _Canvas, nodes: Sequence[TopoNode], radius: float = 4.0) -> None:
    for n in nodes:
        x, y = c.px(*n.position)
        c.add(f'<circle class="node" data-id="{n.id}" cx="{_f(x)}" cy="{_f(y)}" r="{_f(radius)}" fill="{NODE_FILL}"/>')


def _edges(c: _Canvas, pos: dict, pairs, directed: bool) -> None:
    marker = ' marker-end="url(#arrow)"' if directed else ""
    for a, b in pairs:
        (x0, y0), (x1, y1) = c.px(*pos[a]), c.px(*pos[b])
        c.add(
            f'<line class="edge" x1="{_f(x0)}" y1="{_f(y0)}" x2="{_f(x1)}" y2="{_f(y1)}" '
            f'stroke="{EDGE_STROKE}" stroke-width="2"{marker}/>'
        )


def _legend(c: _Canvas, categories: Sequence[str], present: Sequence[int]) -> None:
    for k, cat in enumerate(present):
        y = 12 + 14 * k
        c.add(f'<rect class="legend" x="4" y="{y - 9}" width="10" height="10" fill="{PALETTE[cat % len(PALETTE)]}"/>')
        c.add(f'<text class="legend" x="18" y="{y}" font-size="11" font-family="monospace">{categories[cat]}</text>')


def render_map(
    smap: SemanticMap,
    trajectory: TopoPolarTrajectory | None = None,
    show_nodes: bool = True,
    show_frontiers: bool = True,
) -> str:
    """Free space, obstacles, semantics, skeleton, nodes, frontiers and an optional trajectory."""
    c = _map_canvas(smap)
    c.add(f'<rect class="background" x="0" y="0" width="{c.w}" height="{c.h}" fill="{UNKNOWN_FILL}"/>')
    if smap.explored.any():
        _cells(c, smap, smap.free, FREE_FILL, "free")
        _cells(c, smap, smap.obstacle & ~smap.any_semantic, OBSTACLE_FILL, "obstacle")
        present = []
        for k in range(smap.n_categories):
            if smap.semantic[k].any():
                present.append(k)
                # lowest category wins where channels overlap
                mask = smap.semantic[k] & ~np.logical_or.reduce(smap.semantic[:k], axis=0) if k else smap.semantic[k]
                _cells(c, smap, mask, PALETTE[k % len(PALETTE)], f"semantic {smap.categories[k]}")
        _cells(c, smap, skeletonize(smap.free), SKELETON_FILL, "skeleton")
        if show_frontiers:
            for fr in extract_frontiers(smap):
                m = np.zeros((smap.height, smap.width), dtype=bool)
                m[fr.cells[:, 0], fr.cells[:, 1]] = True
                _cells(c, smap, m, FRONTIER_FILL, "frontier")
        if trajectory is None and show_nodes:
            _nodes(c, extract_nodes(smap))
        _legend(c, smap.categories, present)
    if trajectory is not None:
        pos = {n.id: n.position for n in trajectory.nodes}
        _edges(c, pos, trajectory.edges, True)
        _nodes(c, trajectory.nodes)
    return c.svg()


def _bounds(points: np.ndarray, margin: float = 1.0):
    if len(points) == 0:
        return -margin, -margin, margin, margin
    lo, hi = points.min(axis=0) - margin, points.max(axis=0) + margin
    return lo[0], lo[1], hi[0], hi[1]


def render_trajectory(traj: TopoPolarTrajectory) -> str:
    c = _Canvas(*_bounds(traj.positions if len(traj) else np.empty((0, 2))), METRE_PX)
    c.add(f'<rect class="background" x="0" y="0" width="{c.w}" height="{c.h}" fill="{FREE_FILL}"/>')
    pos = {n.id: n.position for n in traj.nodes}
    _edges(c, pos, traj.edges, True)
    _nodes(c, traj.nodes)
    return c.svg()


def render_summary(nodes: Sequence[TopoNode], edges) -> str:
    pts = np.array([n.position for n in nodes]).reshape(-1, 2)
    c = _Canvas(*_bounds(pts), METRE_PX)
    c.add(f'<rect class="background" x="0" y="0" width="{c.w}" height="{c.h}" fill="{FREE_FILL}"/>')
    pos = {n.id: n.position for n in nodes}
    _edges(c, pos, sorted(edges), False)
    _nodes(c, nodes)
    return c.svg()


def write_svg(svg: str, path) -> None:
    Path(path).write_text(svg)
