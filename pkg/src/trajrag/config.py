"""Declarative run configuration (JSON) with strict validation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .gridmap import N_SECTORS
from .sim import DEFAULT_CATEGORIES, EpisodeConfig, SceneParams
from .store import StoreConfig


@dataclass(frozen=True)
class RunConfig:
    # topology
    d_min: float = 0.5
    n_sectors: int = N_SECTORS
    range_R: float = 1.5
    dilation: int = 2
    frontier_min_size: int = 4
    # store and matching
    eps_merge: float = 0.5
    K: int = 3
    ransac_iters: int = 256
    inlier_tol: float = 0.5
    min_inlier_ratio: float = 0.5
    min_inliers: int = 4
    min_similarity: float = 0.75
    top_m: int = 3
    top_k: int = 3
    # embedding
    tau: float = 0.1
    gamma: float = 0.8
    d_out: int = 64
    epochs: int = 100
    lr: float = 0.5
    # episodes
    budget_steps: int = 500
    success_radius: float = 1.0
    fov_deg: float = 360.0
    range_m: float = 3.0
    # scenes
    rooms: int = 4
    corridors: int | None = None
    object_density: float = 1.0
    categories: tuple[str, ...] = DEFAULT_CATEGORIES
    resolution: float = 0.1
    # root seed; every other seed is derived from it
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        self.validate()

    def validate(self) -> None:
        if self.n_sectors != N_SECTORS:
            raise ConfigError(f"n_sectors is fixed at {N_SECTORS}")
        positive = ("d_min", "range_R", "eps_merge", "inlier_tol", "tau", "success_radius", "range_m", "resolution")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        at_least_one = ("K", "ransac_iters", "top_m", "top_k", "d_out", "budget_steps", "rooms", "min_inliers")
        for name in at_least_one:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.dilation < 0 or self.frontier_min_size < 1 or self.epochs < 0 or self.lr < 0:
            raise ConfigError("dilation, frontier_min_size, epochs and lr must be non-negative")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if not 0 <= self.min_inlier_ratio <= 1 or not 0 <= self.min_similarity <= 1:
            raise ConfigError("ratios must lie in [0, 1]")
        if not 0 < self.fov_deg <= 360:
            raise ConfigError("fov_deg must lie in (0, 360]")
        if len(set(self.categories)) != len(self.categories) or not self.categories:
            raise ConfigError("categories must be non-empty and distinct")
        for c in self.categories:
            if not c or any(ch.isspace() for ch in c):
                raise ConfigError(f"category {c!r} must be a single non-empty word")
        self.scene_params().validate()

    # -- derived configs --------------------------------------------------------
    def scene_params(self, layout: int | None = None) -> SceneParams:
        return SceneParams(
            self.rooms, self.corridors, self.object_density, self.categories, self.resolution, layout
        )

    def store_config(self) -> StoreConfig:
        return StoreConfig(
            eps_merge=self.eps_merge,
            K=self.K,
            ransac_iters=self.ransac_iters,
            inlier_tol=self.inlier_tol,
            min_inlier_ratio=self.min_inlier_ratio,
            min_inliers=self.min_inliers,
            min_similarity=self.min_similarity,
            seed=self.seed,
            gamma=self.gamma,
            d_out=self.d_out,
        )

    def episode_config(self) -> EpisodeConfig:
        return EpisodeConfig(
            budget_steps=self.budget_steps,
            success_radius=self.success_radius,
            fov_deg=self.fov_deg,
            range_m=self.range_m,
            d_min=self.d_min,
            range_R=self.range_R,
            dilation=self.dilation,
            frontier_min_size=self.frontier_min_size,
            top_m=self.top_m,
            top_k=self.top_k,
        )

    # -- I/O --------------------------------------------------------------------
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["categories"] = list(self.categories)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def replace(self, **overrides) -> "RunConfig":
        return from_dict({**self.to_dict(), **overrides})


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, value):
    kind = _FIELDS[name].type
    if name == "categories":
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, str) for v in value):
            raise ConfigError("categories must be a list of strings")
        return tuple(value)
    if name == "corridors":
        if value is None:
            return None
        kind = "int"
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number")
        return float(value)
    raise ConfigError(f"unsupported field {name}")  # pragma: no cover


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config document must be a JSON object")
    unknown = sorted(set(data) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return RunConfig(**{k: _coerce(k, v) for k, v in data.items()})


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from None
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return from_dict(data)

