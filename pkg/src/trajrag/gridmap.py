"""Semantic occupancy grids: dilation, polar ray sampling, frontiers, text I/O.

Cells are addressed as ``(row, col)``.  World coordinates follow the usual
map convention: ``x = origin_x + col * resolution`` and
``y = origin_y + row * resolution``, so angles are measured counterclockwise
from the +x (east) axis with +y pointing toward increasing rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage as ndi

from .errors import MapError, ParseError

# Structural sector labels.  Semantic categories use their index 0..N_o-1.
FREE = -1
OBSTACLE = -2
UNKNOWN = -3
STRUCTURAL_NAMES = {FREE: "free", OBSTACLE: "obstacle", UNKNOWN: "unknown"}

N_SECTORS = 12
SECTOR_ANGLES = np.arange(N_SECTORS) * (2.0 * math.pi / N_SECTORS)

DEFAULT_RESOLUTION = 0.05
DEFAULT_DILATION = 2
DEFAULT_FRONTIER_MIN_SIZE = 4
DEFAULT_SAMPLING_RANGE = 1.5

_EIGHT = np.ones((3, 3), dtype=bool)


def label_name(label: int, categories: Sequence[str]) -> str:
    """Human-readable name of a sector label."""
    if label in STRUCTURAL_NAMES:
        return STRUCTURAL_NAMES[label]
    if 0 <= label < len(categories):
        return categories[label]
    raise MapError(f"label {label} outside alphabet of {len(categories)} categories")


def disc(radius: int) -> np.ndarray:
    """Boolean disc structuring element: offsets with dx^2 + dy^2 <= r^2."""
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (xx * xx + yy * yy) <= r * r


@dataclass
class SemanticMap:
    """Multi-channel 2-D grid: obstacle, explored and one mask per category.

    Object cells of the ground truth are also obstacle cells; an explored cell
    is *free* when it carries neither an obstacle nor a semantic mark.
    """

    width: int
    height: int
    resolution: float = DEFAULT_RESOLUTION
    origin: tuple[float, float] = (0.0, 0.0)
    categories: tuple[str, ...] = ()
    obstacle: np.ndarray = field(default=None, repr=False)
    explored: np.ndarray = field(default=None, repr=False)
    semantic: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.width = int(self.width)
        self.height = int(self.height)
        self.resolution = float(self.resolution)
        self.origin = (float(self.origin[0]), float(self.origin[1]))
        self.categories = tuple(self.categories)
        shape = (self.height, self.width)
        if self.obstacle is None:
            self.obstacle = np.zeros(shape, dtype=bool)
        if self.explored is None:
            self.explored = np.zeros(shape, dtype=bool)
        if self.semantic is None:
            self.semantic = np.zeros((len(self.categories),) + shape, dtype=bool)
        self.obstacle = np.asarray(self.obstacle, dtype=bool)
        self.explored = np.asarray(self.explored, dtype=bool)
        self.semantic = np.asarray(self.semantic, dtype=bool)
        if self.obstacle.shape != shape or self.explored.shape != shape:
            raise MapError(f"channel shape mismatch, expected {shape}")
        if self.semantic.shape != (len(self.categories),) + shape:
            raise MapError("semantic stack does not match category list")
        for name in self.categories:
            if not name or any(ch.isspace() for ch in name):
                raise MapError(f"invalid category name {name!r}")

    # -- construction helpers -------------------------------------------------
    @classmethod
    def empty_like(cls, other: "SemanticMap") -> "SemanticMap":
        return cls(other.width, other.height, other.resolution, other.origin, other.categories)

    def copy(self) -> "SemanticMap":
        return SemanticMap(
            self.width,
            self.height,
            self.resolution,
            self.origin,
            self.categories,
            self.obstacle.copy(),
            self.explored.copy(),
            self.semantic.copy(),
        )

    def __eq__(self, other):
        if not isinstance(other, SemanticMap):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.resolution == other.resolution
            and self.origin == other.origin
            and self.categories == other.categories
            and np.array_equal(self.obstacle, other.obstacle)
            and np.array_equal(self.explored, other.explored)
            and np.array_equal(self.semantic, other.semantic)
        )

    # -- channel access -------------------------------------------------------
    @property
    def n_categories(self) -> int:
        return len(self.categories)

    @property
    def any_semantic(self) -> np.ndarray:
        if self.n_categories == 0:
            return np.zeros((self.height, self.width), dtype=bool)
        return self.semantic.any(axis=0)

    @property
    def free(self) -> np.ndarray:
        return self.explored & ~self.obstacle & ~self.any_semantic

    def category_index(self, name_or_index) -> int:
        if isinstance(name_or_index, (int, np.integer)):
            idx = int(name_or_index)
            if not 0 <= idx < self.n_categories:
                raise MapError(f"category index {idx} out of range")
            return idx
        try:
            return self.categories.index(name_or_index)
        except ValueError:
            raise MapError(f"unknown category {name_or_index!r}") from None

    def channel(self, channel) -> np.ndarray:
        """Return the mask for ``"obstacle"``, ``"explored"`` or a category."""
        if channel == "obstacle":
            return self.obstacle
        if channel == "explored":
            return self.explored
        return self.semantic[self.category_index(channel)]

    def validate(self) -> None:
        """Raise MapError unless obstacle and semantic cells are all explored."""
        if (self.obstacle & ~self.explored).any():
            raise MapError("obstacle cell outside explored area")
        if (self.any_semantic & ~self.explored).any():
            raise MapError("semantic cell outside explored area")

    # -- coordinates ----------------------------------------------------------
    def in_bounds(self, row: int, col: int) -> bool:
        return 0 <= row < self.height and 0 <= col < self.width

    def world_to_cell(self, xy) -> tuple[int, int]:
        col = math.floor((xy[0] - self.origin[0]) / self.resolution + 0.5)
        row = math.floor((xy[1] - self.origin[1]) / self.resolution + 0.5)
        return int(row), int(col)

    def cell_to_world(self, cell) -> tuple[float, float]:
        row, col = cell
        return (
            self.origin[0] + col * self.resolution,
            self.origin[1] + row * self.resolution,
        )

    def cells_to_world(self, cells: np.ndarray) -> np.ndarray:
        cells = np.asarray(cells, dtype=float).reshape(-1, 2)
        return np.column_stack(
            [
                self.origin[0] + cells[:, 1] * self.resolution,
                self.origin[1] + cells[:, 0] * self.resolution,
            ]
        )

    def label_grid(self) -> np.ndarray:
        """Per-cell sector label: lowest category, else obstacle/unknown/free."""
        grid = np.full((self.height, self.width), FREE, dtype=np.int16)
        grid[~self.explored] = UNKNOWN
        grid[self.obstacle] = OBSTACLE
        for idx in range(self.n_categories - 1, -1, -1):
            grid[self.semantic[idx]] = idx
        return grid


def dilate_channel(smap: SemanticMap, channel, radius: int) -> SemanticMap:
    """Dilate one channel by a disc of ``radius`` cells; returns a new map."""
    if radius < 0:
        raise MapError("dilation radius must be >= 0")
    out = smap.copy()
    mask = out.channel(channel)  # raises on unknown channel
    if radius == 0:
        return out
    mask[...] = ndi.binary_dilation(mask, structure=disc(radius))
    return out


def dilate_semantics(smap: SemanticMap, radius: int = DEFAULT_DILATION) -> SemanticMap:
    """Scratch copy with every semantic channel dilated (sampling-time view)."""
    out = smap.copy()
    if radius > 0:
        se = disc(radius)
        for idx in range(out.n_categories):
            if out.semantic[idx].any():
                out.semantic[idx] = ndi.binary_dilation(out.semantic[idx], structure=se)
    return out


def _ray_offsets(range_cells: float, angles: np.ndarray) -> np.ndarray:
    steps = np.arange(1, int(math.floor(2.0 * range_cells + 1e-9)) + 1) * 0.5
    # (n_angles, n_steps, 2) in (d_col, d_row)
    return np.stack(
        [np.cos(angles)[:, None] * steps[None, :], np.sin(angles)[:, None] * steps[None, :]],
        axis=-1,
    )


def sample_rays(
    labels: np.ndarray,
    center_cell_f: tuple[float, float],
    angles: np.ndarray,
    range_cells: float,
) -> np.ndarray:
    """First non-free label along each ray over a precomputed label grid.

    ``center_cell_f`` is a fractional ``(row, col)``.  Rays advance in half-cell
    steps with nearest-cell lookup; leaving the grid counts as unknown.
    """
    angles = np.atleast_1d(np.asarray(angles, dtype=float))
    offs = _ray_offsets(range_cells, angles)
    if offs.shape[1] == 0:
        return np.full(len(angles), FREE, dtype=np.int16)
    cols = np.floor(center_cell_f[1] + offs[..., 0] + 0.5).astype(np.int64)
    rows = np.floor(center_cell_f[0] + offs[..., 1] + 0.5).astype(np.int64)
    h, w = labels.shape
    inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    vals = np.full(rows.shape, UNKNOWN, dtype=np.int16)
    vals[inside] = labels[rows[inside], cols[inside]]
    hit = vals != FREE
    first = hit.argmax(axis=1)
    out = vals[np.arange(len(angles)), first]
    out[~hit.any(axis=1)] = FREE
    return out


def _center_cell(smap: SemanticMap, center) -> tuple[float, float]:
    col_f = (center[0] - smap.origin[0]) / smap.resolution
    row_f = (center[1] - smap.origin[1]) / smap.resolution
    row, col = smap.world_to_cell(center)
    if not smap.in_bounds(row, col):
        raise MapError(f"center {tuple(center)} lies outside the map")
    return row_f, col_f


def cast_polar_ray(smap: SemanticMap, center, theta: float, range_R: float) -> int:
    """Label of the first non-free cell hit from ``center`` along ``theta``.

    The map is used as given; semantic channels are expected to be dilated
    already (see :func:`dilate_semantics`).
    """
    rc = _center_cell(smap, center)
    out = sample_rays(smap.label_grid(), rc, np.array([theta]), range_R / smap.resolution)
    return int(out[0])


def sector_vector(
    smap: SemanticMap,
    center,
    range_R: float = DEFAULT_SAMPLING_RANGE,
    labels: np.ndarray | None = None,
) -> np.ndarray:
    """Twelve ray samples at 30 degree steps, sector 0 pointing east."""
    rc = _center_cell(smap, center)
    if labels is None:
        labels = smap.label_grid()
    return sample_rays(labels, rc, SECTOR_ANGLES, range_R / smap.resolution)


@dataclass
class Frontier:
    """Connected set of free cells bordering unexplored space."""

    centroid: tuple[float, float]
    cells: np.ndarray = field(repr=False)
    size: int
    sector_vector: tuple[int, ...]
    anchor: tuple[int, int]

    def __eq__(self, other):
        if not isinstance(other, Frontier):
            return NotImplemented
        return (
            self.centroid == other.centroid
            and self.size == other.size
            and self.sector_vector == other.sector_vector
            and np.array_equal(self.cells, other.cells)
        )


def frontier_mask(smap: SemanticMap) -> np.ndarray:
    """Free cells 8-adjacent to at least one unexplored in-map cell."""
    unknown = ~smap.explored
    near_unknown = ndi.binary_dilation(unknown, structure=_EIGHT)
    return smap.free & near_unknown


def extract_frontiers(
    smap: SemanticMap,
    min_size: int = DEFAULT_FRONTIER_MIN_SIZE,
    range_R: float = DEFAULT_SAMPLING_RANGE,
    dilation: int = DEFAULT_DILATION,
) -> list[Frontier]:
    """8-connected frontier components with at least ``min_size`` cells.

    Components come back in raster order of their first cell.  Each carries
    a sector vector sampled at the member cell closest to the centroid.
    """
    mask = frontier_mask(smap)
    if not mask.any():
        return []
    lab, n = ndi.label(mask, structure=_EIGHT)
    labels = None
    frontiers = []
    for k in range(1, n + 1):
        cells = np.argwhere(lab == k)
        if len(cells) < min_size:
            continue
        world = smap.cells_to_world(cells)
        centroid = world.mean(axis=0)
        anchor = cells[np.argmin(((world - centroid) ** 2).sum(axis=1))]
        if labels is None:
            labels = dilate_semantics(smap, dilation).label_grid()
        sv = sample_rays(
            labels, (float(anchor[0]), float(anchor[1])), SECTOR_ANGLES, range_R / smap.resolution
        )
        frontiers.append(
            Frontier(
                centroid=(float(centroid[0]), float(centroid[1])),
                cells=cells,
                size=len(cells),
                sector_vector=tuple(int(v) for v in sv),
                anchor=(int(anchor[0]), int(anchor[1])),
            )
        )
    return frontiers


# -- text serialization -------------------------------------------------------

MAP_MAGIC = "semantic-map v1"


def _rle_encode(mask: np.ndarray) -> str:
    flat = mask.ravel().astype(np.int8)
    if flat.size == 0:
        return "0"
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds)
    return " ".join([str(int(flat[0]))] + [str(int(r)) for r in runs])


def _rle_decode(text: str, shape, lineno: int, source) -> np.ndarray:
    parts = text.split()
    total = int(np.prod(shape))
    try:
        first = int(parts[0])
        runs = [int(p) for p in parts[1:]]
    except (ValueError, IndexError):
        raise ParseError("bad run-length data", lineno, source) from None
    if first not in (0, 1) or any(r <= 0 for r in runs) or sum(runs) != total:
        raise ParseError(f"run lengths do not cover {total} cells", lineno, source)
    values = (np.arange(len(runs)) + first) % 2
    return np.repeat(values.astype(bool), runs).reshape(shape)


def map_to_lines(smap: SemanticMap) -> list[str]:
    lines = [
        MAP_MAGIC,
        f"width {smap.width}",
        f"height {smap.height}",
        f"resolution {smap.resolution!r}",
        f"origin {smap.origin[0]!r} {smap.origin[1]!r}",
        "categories " + " ".join(smap.categories),
        "obstacle " + _rle_encode(smap.obstacle),
        "explored " + _rle_encode(smap.explored),
    ]
    for idx, name in enumerate(smap.categories):
        lines.append(f"category {name} " + _rle_encode(smap.semantic[idx]))
    lines.append("end-map")
    return lines


def map_to_text(smap: SemanticMap) -> str:
    return "\n".join(map_to_lines(smap)) + "\n"


def _expect(lines, i, key, source):
    if i >= len(lines):
        raise ParseError(f"unexpected end of document, expected '{key}'", i + 1, source)
    head, _, rest = lines[i].partition(" ")
    if head != key:
        raise ParseError(f"expected '{key}', found {lines[i][:40]!r}", i + 1, source)
    return rest


def parse_map_lines(lines: list[str], start: int = 0, source=None) -> tuple[SemanticMap, int]:
    """Parse a map block beginning at ``lines[start]``; returns (map, next index)."""
    i = start
    if i >= len(lines) or lines[i].strip() != MAP_MAGIC:
        raise ParseError(f"missing '{MAP_MAGIC}' header", i + 1, source)
    i += 1
    try:
        width = int(_expect(lines, i, "width", source))
        height = int(_expect(lines, i + 1, "height", source))
        resolution = float(_expect(lines, i + 2, "resolution", source))
        ox, oy = (float(v) for v in _expect(lines, i + 3, "origin", source).split())
    except ValueError:
        raise ParseError("bad numeric header field", i + 1, source) from None
    cats = tuple(_expect(lines, i + 4, "categories", source).split())
    i += 5
    shape = (height, width)
    obstacle = _rle_decode(_expect(lines, i, "obstacle", source), shape, i + 1, source)
    explored = _rle_decode(_expect(lines, i + 1, "explored", source), shape, i + 2, source)
    i += 2
    semantic = np.zeros((len(cats),) + shape, dtype=bool)
    for idx, name in enumerate(cats):
        rest = _expect(lines, i, "category", source)
        got, _, data = rest.partition(" ")
        if got != name:
            raise ParseError(f"expected category {name!r}, found {got!r}", i + 1, source)
        semantic[idx] = _rle_decode(data, shape, i + 1, source)
        i += 1
    if i >= len(lines) or lines[i].strip() != "end-map":
        raise ParseError("missing 'end-map' terminator", i + 1, source)
    smap = SemanticMap(width, height, resolution, (ox, oy), cats, obstacle, explored, semantic)
    return smap, i + 1


def map_from_text(text: str, source=None) -> SemanticMap:
    smap, _ = parse_map_lines(text.splitlines(), 0, source)
    return smap


def save_map(smap: SemanticMap, path) -> None:
    Path(path).write_text(map_to_text(smap))


def load_map(path) -> SemanticMap:
    return map_from_text(Path(path).read_text(), source=str(path))
