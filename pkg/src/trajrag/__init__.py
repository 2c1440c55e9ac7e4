"""Topo-polar trajectories and a hierarchical experience store for object-goal navigation."""

from .errors import (
    ConfigError,
    EmptyTrajectoryError,
    MapError,
    MatchError,
    ParseError,
    TrajRagError,
    UnreachableError,
)
from .gridmap import SemanticMap, extract_frontiers, sector_vector
from .match import Se2Transform, match_nodes, node_similarity, rotate_sector
from .store import TrajRagStore, coarse_retrieve, fine_retrieve, insert_trajectory, retrieve
from .topo import TopoNode, TopoPolarTrajectory, build_topo_polar_trajectory, prune_loops

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "EmptyTrajectoryError",
    "MapError",
    "MatchError",
    "ParseError",
    "Se2Transform",
    "SemanticMap",
    "TopoNode",
    "TopoPolarTrajectory",
    "TrajRagError",
    "TrajRagStore",
    "UnreachableError",
    "build_topo_polar_trajectory",
    "coarse_retrieve",
    "extract_frontiers",
    "fine_retrieve",
    "insert_trajectory",
    "match_nodes",
    "node_similarity",
    "prune_loops",
    "retrieve",
    "rotate_sector",
]
