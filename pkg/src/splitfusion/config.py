"""Run configuration, loaded from JSON."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .icp import EnergyParams, SolverConfig
from .segmentation import ClassTable, GraphCutParams

DATASET_CLASS_TABLE = "class_table.json"


@dataclass(frozen=True)
class IcpConfig:
    outer: int = 4
    inner: int = 3
    pcg_tol: float = 1e-6
    pcg_max: int = 200
    mu0: float = 1e-4
    delta_d: float = 0.10
    delta_n_deg: float = 60.0


@dataclass(frozen=True)
class PipelineConfig:
    voxel_size: float = 0.01
    background_voxel_size: float = 0.02
    truncation_factor: float = 4.0
    lam: float = 0.1  # best of a 1-2-5 sweep on the bending sheet (scripts/sweep_lambda.py)
    r_node: float = 0.05
    K: int = 6
    icp: IcpConfig = field(default_factory=IcpConfig)
    class_table_path: Optional[str] = None
    depth_scale: Optional[float] = None
    max_weight: float = 100.0
    volume_padding: float = 10.0  # bounding-box padding, in truncation distances
    refine_segments: bool = True
    workers: int = 1
    graph_cut: GraphCutParams = field(default_factory=GraphCutParams)

    def __post_init__(self):
        if self.voxel_size <= 0 or self.background_voxel_size <= 0:
            raise ValueError("voxel sizes must be positive")
        if self.truncation_factor < 2:
            raise ValueError("truncation_factor must be at least 2")
        if self.volume_padding < 0:
            raise ValueError("volume_padding must be non-negative")
        if self.r_node <= 0 or self.K < 1 or self.workers < 1:
            raise ValueError("invalid graph or worker settings")

    @property
    def bind_range(self) -> float:
        """Voxels farther than this from every node are not fused into non-rigid volumes."""
        return 2.0 * self.r_node

    def energy_params(self) -> EnergyParams:
        return EnergyParams(self.lam, self.icp.delta_d, math.cos(math.radians(self.icp.delta_n_deg)))

    def solver_config(self) -> SolverConfig:
        i = self.icp
        return SolverConfig(i.outer, i.inner, i.pcg_max, i.pcg_tol, i.mu0)

    def class_table(self, dataset_root=None) -> ClassTable:
        """Default table, then ``<dataset>/class_table.json``, then class_table_path."""
        table = ClassTable.default()
        if dataset_root is not None and (Path(dataset_root) / DATASET_CLASS_TABLE).exists():
            table = ClassTable.load(Path(dataset_root) / DATASET_CLASS_TABLE, table)
        if self.class_table_path:
            table = ClassTable.load(self.class_table_path, table)
        return table

    def to_dict(self) -> dict:
        return {
            "voxel_size": self.voxel_size,
            "background_voxel_size": self.background_voxel_size,
            "truncation_factor": self.truncation_factor,
            "lambda": self.lam,
            "r_node": self.r_node,
            "K": self.K,
            "icp": dict(vars(self.icp)),
            "class_table_path": self.class_table_path,
            "depth_scale": self.depth_scale,
            "max_weight": self.max_weight,
            "volume_padding": self.volume_padding,
            "refine_segments": self.refine_segments,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        known = set(cls().to_dict())
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        icp = data.pop("icp", {}) or {}
        bad = set(icp) - set(vars(IcpConfig()))
        if bad:
            raise ValueError(f"unknown icp keys: {sorted(bad)}")
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        return cls(icp=IcpConfig(**icp), **data)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        cfg = cls.from_dict(json.loads(Path(path).read_text()))
        if cfg.class_table_path and not Path(cfg.class_table_path).is_absolute():
            resolved = str(Path(path).parent / cfg.class_table_path)
            cfg = cls.from_dict({**cfg.to_dict(), "class_table_path": resolved})
        return cfg
