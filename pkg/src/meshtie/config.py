"""Pipeline configuration: one flat JSON-serializable record.

Precedence when assembling a run: command-line flag > config file > field
default. Angles are stored in degrees for readability and converted at the
point of use.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

from meshtie.features import FeatureParams
from meshtie.outlier import FilterConfig
from meshtie.propagate import PropagateConfig

__all__ = ["PipelineConfig"]


@dataclass
class PipelineConfig:
    # Input and output paths
    mesh_tiles: list[str] = field(default_factory=list)
    ground_cameras: str = ""
    aerial_cameras: str = ""
    ground_image_dir: str = ""
    aerial_image_dir: str = ""
    ground_features_dir: str = ""  # optional externally computed features
    out_dir: str = "out"
    # Feature stage
    ratio_max: float = 0.8
    contrast_threshold: float = 0.02
    max_features: int = 4000
    # Outlier filter stage
    length_fraction: float = 0.02
    k_neighbors: int = 5
    tau_a_deg: float = 90.0
    ransac_mode: str = "adaptive"
    epipolar_threshold: float = 3.0
    ransac_iters: int = 1000
    min_matches: int = 5
    # Propagation stage
    w_s: int = 31
    w_c: int = 15
    search_radius: int = 8
    tau_c: float = 0.75
    tau_n_deg: float = 90.0
    eps_self: float = 1e-3
    # Run control
    seed: int = 0
    jobs: int = 1
    weld_eps_factor: float = 1e-4
    max_leaf_triangles: int = 4

    def __post_init__(self):
        if not (0 < self.ratio_max <= 1):
            raise ValueError("ratio_max must lie in (0, 1]")
        if self.length_fraction <= 0:
            raise ValueError("length_fraction must be positive")
        if not (0 < self.tau_a_deg <= 180 and 0 < self.tau_n_deg <= 180):
            raise ValueError("angle thresholds must lie in (0, 180] degrees")
        if not (-1 <= self.tau_c <= 1):
            raise ValueError("tau_c must lie in [-1, 1]")
        if self.min_matches < 1 or self.k_neighbors < 1:
            raise ValueError("count thresholds must be >= 1")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        if self.ransac_mode not in ("adaptive", "fixed"):
            raise ValueError("ransac_mode must be 'adaptive' or 'fixed'")

    # -- stage views ---------------------------------------------------------

    def feature_params(self) -> FeatureParams:
        return FeatureParams(
            contrast_threshold=self.contrast_threshold,
            max_features=self.max_features,
        )

    def filter_config(self, seed: int | None = None) -> FilterConfig:
        return FilterConfig(
            length_fraction=self.length_fraction,
            k_neighbors=self.k_neighbors,
            tau_a=math.radians(self.tau_a_deg),
            ransac_mode=self.ransac_mode,
            epipolar_threshold=self.epipolar_threshold,
            max_iters=self.ransac_iters,
            min_matches=self.min_matches,
            seed=self.seed if seed is None else seed,
        )

    def propagate_config(self) -> PropagateConfig:
        return PropagateConfig(
            w_s=self.w_s,
            w_c=self.w_c,
            search_radius=self.search_radius,
            tau_c=self.tau_c,
            tau_n=math.radians(self.tau_n_deg),
            eps_self=self.eps_self,
        )

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def with_overrides(self, **overrides) -> "PipelineConfig":
        """New config with non-None overrides applied (flag > file > default)."""
        data = self.to_dict()
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in data:
                raise ValueError(f"unknown config field {key!r}")
            data[key] = value
        return PipelineConfig.from_dict(data)
