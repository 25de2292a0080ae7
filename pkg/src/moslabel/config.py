"""Pipeline configuration: one section per stage, loaded from YAML.

Every knob of every stage lives here with its default; a config file only
needs the keys it wants to change. Unknown keys and out-of-range values are
rejected up front so a typo cannot silently run the wrong experiment.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .correction import IcpParams
from .detection import DetectParams
from .errors import ConfigError
from .tracking import TrackParams
from .trajectory import ClusterParams

STAGES = ("sync", "cluster", "correct", "detect", "track", "export", "eval")


@dataclass(frozen=True)
class SyncConfig:
    max_sync_gap: float = 0.15
    compensate_motion: bool = True


@dataclass(frozen=True)
class ClusterConfig:
    yaw_window: int = 20
    yaw_threshold: float = 30.0  # degrees
    revisit_radius: float = 10.0
    min_time_gap: float = 60.0
    min_linear_len: int = 100
    intersection_merge_factor: float = 2.0

    def to_params(self) -> ClusterParams:
        return ClusterParams(
            yaw_window=self.yaw_window,
            yaw_threshold=math.radians(self.yaw_threshold),
            revisit_radius=self.revisit_radius,
            min_time_gap=self.min_time_gap,
            min_linear_len=self.min_linear_len,
            intersection_merge_factor=self.intersection_merge_factor,
        )


@dataclass(frozen=True)
class CorrectConfig:
    map_voxel_size: float = 0.2
    min_points: int = 500
    max_iterations: int = 50
    update_tolerance: float = 1e-4
    max_corr_dist: float = 2.0
    normal_neighbors: int = 20
    max_source_points: int = 20000

    def to_params(self) -> IcpParams:
        return IcpParams(
            min_points=self.min_points,
            max_iterations=self.max_iterations,
            update_tolerance=self.update_tolerance,
            max_corr_dist=self.max_corr_dist,
            normal_neighbors=self.normal_neighbors,
            max_source_points=self.max_source_points,
        )


@dataclass(frozen=True)
class DetectConfig:
    map_voxel_size: float = 1.0
    ground_cell_size: float = 10.0
    ground_lowest_fraction: float = 0.3
    ground_plane_dist: float = 0.25
    ground_min_cell_points: int = 10
    ground_max_slope: float = 0.3
    ground_seed_band: float = 0.4
    ground_consistency: float = 0.75
    instance_voxel_size: float = 0.5
    min_instance_points: int = 10
    max_instance_diag: float = 15.0
    min_coverage: int = 3
    rho_dyn: float = 0.35
    coverage_max_range: float = 70.0
    coverage_v_fov: float = 90.0
    ground_clearance: float = 0.5

    def to_params(self) -> DetectParams:
        return DetectParams(**dataclasses.asdict(self))


@dataclass(frozen=True)
class TrackConfig:
    max_assoc_dist: float = 2.0
    max_gap: int = 5
    min_displacement: float = 1.0
    min_track_len: int = 3
    box_pad: float = 0.2

    def to_params(self) -> TrackParams:
        return TrackParams(**dataclasses.asdict(self))


@dataclass(frozen=True)
class ExportConfig:
    train_ratio: float = 0.68
    val_ratio: float = 0.16
    test_ratio: float = 0.16
    val_anchor: int | None = None
    test_anchor: int | None = None


@dataclass(frozen=True)
class EvalConfig:
    voxel_size: float = 0.2


@dataclass(frozen=True)
class PipelineConfig:
    input_dir: str = ""
    out_dir: str = ""
    stages: tuple[str, ...] = STAGES
    seed: int = 0
    sync: SyncConfig = field(default_factory=SyncConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    correct: CorrectConfig = field(default_factory=CorrectConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    track: TrackConfig = field(default_factory=TrackConfig)
    export: ExportConfig = field(default_factory=ExportConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        checks = [
            (self.sync.max_sync_gap > 0, "sync.max_sync_gap must be positive"),
            (self.cluster.yaw_window >= 2, "cluster.yaw_window must be at least 2"),
            (self.cluster.yaw_threshold > 0, "cluster.yaw_threshold must be positive"),
            (self.cluster.revisit_radius > 0, "cluster.revisit_radius must be positive"),
            (self.cluster.min_time_gap > 0, "cluster.min_time_gap must be positive"),
            (self.correct.map_voxel_size > 0, "correct.map_voxel_size must be positive"),
            (self.correct.min_points >= 6, "correct.min_points must be at least 6"),
            (self.correct.max_iterations >= 1, "correct.max_iterations must be at least 1"),
            (self.detect.map_voxel_size > 0, "detect.map_voxel_size must be positive"),
            (0 < self.detect.ground_lowest_fraction <= 1, "detect.ground_lowest_fraction must be in (0, 1]"),
            (self.detect.ground_plane_dist > 0, "detect.ground_plane_dist must be positive"),
            (self.detect.instance_voxel_size > 0, "detect.instance_voxel_size must be positive"),
            (self.detect.min_instance_points >= 1, "detect.min_instance_points must be at least 1"),
            (self.detect.min_coverage >= 1, "detect.min_coverage must be at least 1"),
            (0 < self.detect.rho_dyn <= 1, "detect.rho_dyn must be in (0, 1]"),
            (self.track.max_assoc_dist > 0, "track.max_assoc_dist must be positive"),
            (self.track.max_gap >= 1, "track.max_gap must be at least 1"),
            (self.track.min_track_len >= 1, "track.min_track_len must be at least 1"),
            (self.track.box_pad >= 0, "track.box_pad must be non-negative"),
            (self.eval.voxel_size > 0, "eval.voxel_size must be positive"),
            (
                abs(self.export.train_ratio + self.export.val_ratio + self.export.test_ratio - 1.0) < 1e-9,
                "export ratios must sum to 1",
            ),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        unknown = set(self.stages) - set(STAGES)
        if unknown:
            raise ConfigError(f"unknown stages {sorted(unknown)}; valid: {STAGES}")

    def section_dict(self, name: str) -> dict:
        return dataclasses.asdict(getattr(self, name))

    def section_hash(self, name: str) -> str:
        payload = json.dumps(self.section_dict(name), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


_SECTIONS = {
    "sync": SyncConfig,
    "cluster": ClusterConfig,
    "correct": CorrectConfig,
    "detect": DetectConfig,
    "track": TrackConfig,
    "export": ExportConfig,
    "eval": EvalConfig,
}
_TOP_KEYS = {"input_dir", "out_dir", "stages", "seed"}


def config_from_dict(raw: dict) -> PipelineConfig:
    raw = dict(raw or {})
    unknown = set(raw) - _TOP_KEYS - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    kwargs = {}
    for key in _TOP_KEYS & set(raw):
        kwargs[key] = tuple(raw[key]) if key == "stages" else raw[key]
    for name, cls in _SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"section '{name}' must be a mapping")
        valid = {f.name for f in dataclasses.fields(cls)}
        bad = set(section) - valid
        if bad:
            raise ConfigError(f"unknown keys in section '{name}': {sorted(bad)}")
        kwargs[name] = cls(**section)
    config = PipelineConfig(**kwargs)
    config.validate()
    return config


def load_config(path) -> PipelineConfig:
    raw = yaml.safe_load(Path(path).read_text())
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config root must be a mapping")
    return config_from_dict(raw)
