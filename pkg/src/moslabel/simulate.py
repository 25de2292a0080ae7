"""Deterministic synthetic multi-sensor LiDAR scenes with exact labels.

Scenes are built from analytic geometry only (a ground rectangle, axis-aligned
boxes, box-shaped movers on waypoint trajectories), sampled by ray casting on
each sensor's angular grid. Because every hit is attributable to a surface,
the generator knows the true class of every point, which makes it the oracle
for accepting the labeling pipeline end to end. Everything is a pure function
of the scene spec and seed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import yaml

from . import dataset
from .dataset import CLASS_DYNAMIC, CLASS_STATIC, SENSOR_IDS, pack_labels
from .detection import FrameDetection, VERDICT_DYNAMIC, VERDICT_STATIC
from .geometry import PointCloud, Pose, rot_z, translate


@dataclass(frozen=True)
class SensorProfile:
    name: str
    horizontal_fov: float  # degrees; 360 means spinning
    vertical_fov: float  # degrees, total aperture
    horizontal_steps: int
    vertical_steps: int
    max_range: float
    mount: Pose  # sensor frame -> body frame
    pattern_jitter: float = 0.0  # degrees of per-frame angular scatter
    time_offset: float = 0.0  # seconds relative to the frame clock

    @property
    def spinning(self) -> bool:
        return self.horizontal_fov >= 360.0


@dataclass(frozen=True)
class BoxSpec:
    center: np.ndarray
    extents: np.ndarray  # full widths

    def corners(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center, dtype=np.float64)
        h = np.asarray(self.extents, dtype=np.float64) / 2.0
        return c - h, c + h


@dataclass(frozen=True)
class MoverSpec:
    extents: np.ndarray
    waypoints: list[tuple[float, np.ndarray]]  # (frame, center), linear in between
    active: tuple[int, int]  # [start, stop) frame range

    def center_at(self, frame: float) -> np.ndarray:
        frames = np.array([w[0] for w in self.waypoints], dtype=np.float64)
        centers = np.array([w[1] for w in self.waypoints], dtype=np.float64)
        return np.array(
            [np.interp(frame, frames, centers[:, k]) for k in range(3)]
        )


@dataclass(frozen=True)
class SceneSpec:
    frame_count: int
    ego: list[Pose]  # body pose per frame
    sensors: tuple[SensorProfile, ...]
    ground_z: float = 0.0
    ground_half_extent: tuple[float, float] = (150.0, 150.0)
    boxes: tuple[BoxSpec, ...] = ()
    movers: tuple[MoverSpec, ...] = ()
    frame_period: float = 0.1
    seed: int = 0
    world_half_extent: float = 200.0
    range_jitter: float = 0.01  # Gaussian sigma in meters; keeps analytic
    # surfaces off exact voxel boundaries, like real sensor noise would

    def __post_init__(self):
        if self.frame_count < 1 or len(self.ego) != self.frame_count:
            raise ValueError("ego trajectory must supply one pose per frame")
        for mover in self.movers:
            for f, c in mover.waypoints:
                if np.abs(np.asarray(c)).max() > self.world_half_extent:
                    raise ValueError(
                        f"mover waypoint {c} lies outside world bounds"
                        f" (+-{self.world_half_extent} m)"
                    )


def default_sensor_suite() -> tuple[SensorProfile, ...]:
    """Four profiles mimicking the class of each real sensor: a narrow-FOV
    scanner, a narrow-FOV irregular scanner, a dense spinner, and a sparse
    spinner. The dense spinner is the reference and sits at the body origin."""
    return (
        SensorProfile("aeva", 100.0, 20.0, 48, 24, 80.0, translate(0.5, 0.3, -0.2), 0.0, 0.013),
        SensorProfile("livox", 70.0, 70.0, 40, 40, 90.0, translate(0.6, -0.3, -0.1), 0.25, 0.027),
        SensorProfile("ouster", 360.0, 22.5, 512, 32, 100.0, Pose.identity(), 0.0, 0.0),
        SensorProfile("velodyne", 360.0, 30.0, 360, 16, 70.0, translate(-0.2, 0.0, 0.4), 0.0, 0.041),
    )


def _interp_pose(ego: list[Pose], frame: float) -> Pose:
    """Pose at a fractional frame index: linear position, wrap-aware yaw."""
    n = len(ego)
    f = min(max(frame, 0.0), n - 1.0)
    i = int(np.floor(f))
    if i >= n - 1:
        return ego[n - 1]
    lam = f - i
    a, b = ego[i], ego[i + 1]
    pos = (1.0 - lam) * a.translation + lam * b.translation
    ya = np.arctan2(a.rotation[1, 0], a.rotation[0, 0])
    yb = np.arctan2(b.rotation[1, 0], b.rotation[0, 0])
    dyaw = (yb - ya + np.pi) % (2.0 * np.pi) - np.pi
    return Pose(rot_z(ya + lam * dyaw).rotation, pos)


def _ray_directions(profile: SensorProfile, rng: np.random.Generator) -> np.ndarray:
    if profile.spinning:
        az = np.linspace(-np.pi, np.pi, profile.horizontal_steps, endpoint=False)
    else:
        half = np.radians(profile.horizontal_fov) / 2.0
        az = np.linspace(-half, half, profile.horizontal_steps)
    half_v = np.radians(profile.vertical_fov) / 2.0
    el = np.linspace(-half_v, half_v, profile.vertical_steps)
    azg, elg = np.meshgrid(az, el)
    azg, elg = azg.ravel(), elg.ravel()
    if profile.pattern_jitter > 0.0:
        spread = np.radians(profile.pattern_jitter)
        azg = azg + rng.uniform(-spread, spread, azg.shape)
        if not profile.spinning:
            half_h = np.radians(profile.horizontal_fov) / 2.0
            azg = np.clip(azg, -half_h, half_h)
        elg = np.clip(elg + rng.uniform(-spread, spread, elg.shape), -half_v, half_v)
    return np.column_stack(
        [np.cos(elg) * np.cos(azg), np.cos(elg) * np.sin(azg), np.sin(elg)]
    )


def _ray_box(origin: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Slab-test hit distances, inf on miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    tnear = np.nanmax(np.minimum(t1, t2), axis=1)
    tfar = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (tfar >= tnear) & (tfar > 1e-9) & (tnear > 1e-9)
    return np.where(hit, tnear, np.inf)


def _ray_ground(origin, dirs, z, half_x, half_y) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (z - origin[2]) / dirs[:, 2]
    x = origin[0] + t * dirs[:, 0]
    y = origin[1] + t * dirs[:, 1]
    ok = (t > 1e-9) & np.isfinite(t) & (np.abs(x) <= half_x) & (np.abs(y) <= half_y)
    return np.where(ok, t, np.inf)


@dataclass(frozen=True)
class SensorRecording:
    profile: SensorProfile
    timestamps: np.ndarray
    poses: tuple[Pose, ...]  # body pose at each scan timestamp
    clouds: tuple[PointCloud, ...]
    labels: tuple[np.ndarray, ...]  # packed class | mover id << 16
    mover_ids: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class GroundTruthBundle:
    spec: SceneSpec
    sensors: dict[str, SensorRecording]
    true_poses: dict[str, tuple[Pose, ...]]

    def extrinsics(self) -> dict[str, Pose]:
        return {name: rec.profile.mount for name, rec in self.sensors.items()}


def generate_scene(spec: SceneSpec) -> GroundTruthBundle:
    """Ray-cast every frame for every sensor; labels come from the hit surface."""
    sensors: dict[str, SensorRecording] = {}
    for sensor_index, profile in enumerate(spec.sensors):
        timestamps, poses, clouds, labels, mover_ids = [], [], [], [], []
        for i in range(spec.frame_count):
            t = i * spec.frame_period + profile.time_offset
            fractional = i + profile.time_offset / spec.frame_period
            body = _interp_pose(spec.ego, fractional)
            rng = np.random.default_rng([spec.seed, sensor_index, i])
            dirs_sensor = _ray_directions(profile, rng)
            sensor_pose = Pose(
                body.rotation @ profile.mount.rotation,
                body.apply(profile.mount.translation),
            )
            origin = sensor_pose.translation
            dirs_world = dirs_sensor @ sensor_pose.rotation.T

            best_t = _ray_ground(
                origin, dirs_world, spec.ground_z, *spec.ground_half_extent
            )
            best_id = np.zeros(len(dirs_world), dtype=np.int64)
            for box in spec.boxes:
                lo, hi = box.corners()
                t_box = _ray_box(origin, dirs_world, lo, hi)
                closer = t_box < best_t
                best_t = np.where(closer, t_box, best_t)
            for m_idx, mover in enumerate(spec.movers, start=1):
                if not (mover.active[0] <= i < mover.active[1]):
                    continue
                center = mover.center_at(fractional)
                half = np.asarray(mover.extents) / 2.0
                t_box = _ray_box(origin, dirs_world, center - half, center + half)
                closer = t_box < best_t
                best_t = np.where(closer, t_box, best_t)
                best_id = np.where(closer, m_idx, best_id)

            hit = best_t <= profile.max_range
            ranges = best_t[hit]
            if spec.range_jitter > 0.0:
                noise = rng.normal(0.0, spec.range_jitter, ranges.shape)
                ranges = np.clip(ranges + noise, 0.0, profile.max_range)
            pts = dirs_sensor[hit] * ranges[:, None]
            ids = best_id[hit]
            classes = np.where(ids > 0, CLASS_DYNAMIC, CLASS_STATIC).astype(np.uint32)
            timestamps.append(t)
            poses.append(body)
            clouds.append(PointCloud(pts, np.clip(1.0 - ranges / profile.max_range, 0.0, 1.0)))
            labels.append(pack_labels(classes, ids.astype(np.uint32)))
            mover_ids.append(ids)
        sensors[profile.name] = SensorRecording(
            profile,
            np.array(timestamps),
            tuple(poses),
            tuple(clouds),
            tuple(labels),
            tuple(mover_ids),
        )
    true_poses = {name: rec.poses for name, rec in sensors.items()}
    return GroundTruthBundle(spec, sensors, true_poses)


def first_revisit_frame(
    spec: SceneSpec, radius: float = 10.0, min_frame_gap: int = 30
) -> int | None:
    positions = np.array([p.translation for p in spec.ego])
    for i in range(min_frame_gap, len(positions)):
        earlier = positions[: i - min_frame_gap + 1]
        if np.linalg.norm(earlier - positions[i], axis=1).min() <= radius:
            return i
    return None


def corrupt_poses(
    bundle: GroundTruthBundle,
    drift: float,
    seed: int = 0,
    start_frame: int | None = None,
) -> GroundTruthBundle:
    """Add a smooth translation offset ramping to ``drift`` after the first
    revisit; true poses stay available on the returned bundle."""
    if drift < 0:
        raise ValueError("drift must be non-negative")
    spec = bundle.spec
    if start_frame is None:
        start_frame = first_revisit_frame(spec)
        if start_frame is None:
            start_frame = spec.frame_count // 2
    rng = np.random.default_rng([seed, 101])
    angle = rng.uniform(0.0, 2.0 * np.pi)
    direction = np.array([np.cos(angle), np.sin(angle), 0.0])
    last = spec.frame_count - 1

    def magnitude(frame: float) -> float:
        # Linear ramp: continuous, bounded by `drift`, exactly `drift` at the
        # last frame, and with the smallest possible peak slope so the offset
        # stays near-constant within any one subcluster.
        if drift == 0.0 or frame < start_frame:
            return 0.0
        if last <= start_frame:
            return drift
        return drift * min((frame - start_frame) / (last - start_frame), 1.0)

    sensors = {}
    for name, rec in bundle.sensors.items():
        shifted = []
        for t, pose in zip(rec.timestamps, rec.poses):
            frac = (t - rec.profile.time_offset) / spec.frame_period
            offset = direction * magnitude(frac)
            shifted.append(Pose(pose.rotation, pose.translation + offset))
        sensors[name] = replace(rec, poses=tuple(shifted))
    return GroundTruthBundle(spec, sensors, bundle.true_poses)


def degrade_detections(
    detections: dict[int, FrameDetection],
    drop_frames: list[int] = (),
    inject_static_fp: int = 0,
    seed: int = 0,
) -> tuple[dict[int, FrameDetection], list[dict]]:
    """Stress fixture for the tracking filter: delete mover detections at the
    given frames (false negatives) and flip some static instances to dynamic
    (false positives). Returns the degraded copy and the edit list."""
    degraded = {}
    edits: list[dict] = []
    flippable: list[tuple[int, int]] = []
    for frame, det in sorted(detections.items()):
        classes = det.annotation.classes.copy()
        instance_ids = det.annotation.instance_ids.copy()
        verdicts = dict(det.verdicts)
        instances = list(det.instances)
        if frame in drop_frames:
            kept = []
            for inst in instances:
                if verdicts[inst.instance_id] == VERDICT_DYNAMIC:
                    classes[inst.point_indices] = CLASS_STATIC
                    instance_ids[inst.point_indices] = 0
                    del verdicts[inst.instance_id]
                    edits.append({"kind": "drop", "frame": frame, "instance": inst.instance_id})
                else:
                    kept.append(inst)
            instances = kept
        for inst in instances:
            if verdicts.get(inst.instance_id) == VERDICT_STATIC:
                flippable.append((frame, inst.instance_id))
        degraded[frame] = FrameDetection(
            type(det.annotation)(frame, classes, instance_ids),
            tuple(instances),
            verdicts,
            det.pose,
        )

    if inject_static_fp > 0:
        rng = np.random.default_rng([seed, 202])
        if inject_static_fp > len(flippable):
            raise ValueError(
                f"asked for {inject_static_fp} false positives but only"
                f" {len(flippable)} static instances exist"
            )
        chosen = rng.choice(len(flippable), size=inject_static_fp, replace=False)
        for k in sorted(int(c) for c in chosen):
            frame, instance_id = flippable[k]
            det = degraded[frame]
            classes = det.annotation.classes.copy()
            for inst in det.instances:
                if inst.instance_id == instance_id:
                    classes[inst.point_indices] = CLASS_DYNAMIC
            verdicts = dict(det.verdicts)
            verdicts[instance_id] = VERDICT_DYNAMIC
            degraded[frame] = FrameDetection(
                type(det.annotation)(frame, classes, det.annotation.instance_ids.copy()),
                det.instances,
                verdicts,
                det.pose,
            )
            edits.append({"kind": "flip", "frame": frame, "instance": instance_id})
    return degraded, edits


def write_bundle(bundle: GroundTruthBundle, out_dir, include_true_poses: bool = True) -> None:
    """Write the bundle in the on-disk sequence layout the pipeline ingests."""
    out_dir = Path(out_dir)
    extrinsics = bundle.extrinsics()
    for name, rec in bundle.sensors.items():
        root = out_dir / name
        for i, cloud in enumerate(rec.clouds):
            dataset.write_scan(cloud, root / dataset.SCAN_DIR / f"{i:06d}.bin")
            dataset.write_labels(rec.labels[i], root / dataset.LABEL_DIR / f"{i:06d}.label")
        dataset.write_timestamps(rec.timestamps, root / "times.txt")
        dataset.write_poses(rec.poses, root / "poses.txt")
        dataset.write_calib(extrinsics, root / "calib.txt")
        if include_true_poses:
            dataset.write_poses(bundle.true_poses[name], root / "poses_true.txt")


def waypoint_trajectory(waypoints: list[tuple[float, float, float]], frame_count: int, height: float = 1.8) -> list[Pose]:
    """Ego poses from (frame, x, y) waypoints: linear position, heading along
    the direction of travel."""
    frames = np.array([w[0] for w in waypoints], dtype=np.float64)
    xs = np.array([w[1] for w in waypoints], dtype=np.float64)
    ys = np.array([w[2] for w in waypoints], dtype=np.float64)
    idx = np.arange(frame_count, dtype=np.float64)
    x = np.interp(idx, frames, xs)
    y = np.interp(idx, frames, ys)
    poses = []
    yaw_prev = 0.0
    for i in range(frame_count):
        j = min(i + 1, frame_count - 1)
        dx, dy = x[j] - x[i], y[j] - y[i]
        yaw = np.arctan2(dy, dx) if (dx * dx + dy * dy) > 1e-12 else yaw_prev
        yaw_prev = yaw
        poses.append(Pose(rot_z(yaw).rotation, np.array([x[i], y[i], height])))
    return poses


def demo_scene(
    frame_count: int = 100,
    seed: int = 7,
    sensors: tuple[SensorProfile, ...] | None = None,
) -> SceneSpec:
    """Out-and-back street scene: buildings, two movers, one parked car.

    The ego drives east along y=0, U-turns, and comes back on a parallel
    lane, so the trajectory contains both a sharp turn and revisited places.
    """
    ego = waypoint_trajectory(
        [
            (0.0, -40.0, 0.0),
            (0.42 * frame_count, 38.0, 0.0),
            (0.47 * frame_count, 45.0, 1.5),
            (0.53 * frame_count, 45.0, 4.0),
            (0.58 * frame_count, 38.0, 5.5),
            (frame_count - 1.0, -40.0, 5.5),
        ],
        frame_count,
    )
    boxes = (
        BoxSpec(np.array([-10.0, 22.0, 4.0]), np.array([30.0, 8.0, 8.0])),
        BoxSpec(np.array([25.0, 22.0, 3.0]), np.array([20.0, 8.0, 6.0])),
        BoxSpec(np.array([-15.0, -14.0, 4.0]), np.array([24.0, 8.0, 8.0])),
        BoxSpec(np.array([20.0, -14.0, 2.5]), np.array([16.0, 6.0, 5.0])),
        BoxSpec(np.array([-38.0, 4.0, 3.0]), np.array([6.0, 6.0, 6.0])),
        # Parked car on the south shoulder.
        BoxSpec(np.array([8.0, -6.5, 0.75]), np.array([4.2, 1.9, 1.5])),
    )
    movers = (
        MoverSpec(
            np.array([4.2, 1.9, 1.6]),
            [(0.0, np.array([45.0, -2.0, 0.8])), (frame_count - 1.0, np.array([-45.0, -2.0, 0.8]))],
            (0, frame_count),
        ),
        MoverSpec(
            np.array([0.8, 0.8, 1.7]),
            [
                (0.2 * frame_count, np.array([18.0, -10.0, 0.85])),
                (0.8 * frame_count, np.array([18.0, 14.0, 0.85])),
            ],
            (int(0.2 * frame_count), int(0.8 * frame_count)),
        ),
    )
    return SceneSpec(
        frame_count=frame_count,
        ego=ego,
        sensors=sensors or default_sensor_suite(),
        ground_half_extent=(80.0, 50.0),
        boxes=boxes,
        movers=movers,
        seed=seed,
    )


def circuit_scene(
    frame_count: int = 200,
    laps: int = 4,
    seed: int = 5,
    sensors: tuple[SensorProfile, ...] | None = None,
    movers: tuple[MoverSpec, ...] = (),
) -> SceneSpec:
    """Rectangular multi-lap circuit around a city block.

    Every corner and straight is revisited once per lap, which keeps
    subclusters short; the scene of choice for exercising drift correction.
    """
    per_lap = frame_count / laps
    corners = [(-30.0, -18.0), (30.0, -18.0), (30.0, 18.0), (-30.0, 18.0)]
    wps = []
    for lap in range(laps):
        for k, (x, y) in enumerate(corners):
            wps.append((lap * per_lap + k * per_lap / 4.0, x, y))
    wps.append((frame_count - 1.0, corners[0][0], corners[0][1]))
    ego = waypoint_trajectory(wps, frame_count)
    boxes = (
        BoxSpec(np.array([0.0, 0.0, 3.0]), np.array([30.0, 14.0, 6.0])),
        BoxSpec(np.array([-42.0, 0.0, 4.0]), np.array([8.0, 20.0, 8.0])),
        BoxSpec(np.array([42.0, 0.0, 4.0]), np.array([8.0, 20.0, 8.0])),
        BoxSpec(np.array([0.0, 30.0, 3.0]), np.array([40.0, 8.0, 6.0])),
        BoxSpec(np.array([0.0, -30.0, 3.0]), np.array([40.0, 8.0, 6.0])),
    )
    return SceneSpec(
        frame_count=frame_count,
        ego=ego,
        sensors=sensors or default_sensor_suite(),
        ground_half_extent=(80.0, 60.0),
        boxes=boxes,
        movers=movers,
        seed=seed,
    )


def scene_from_yaml(path) -> SceneSpec:
    """Load a scene spec from a YAML file; see demo_scene for the semantics."""
    raw = yaml.safe_load(Path(path).read_text())
    frame_count = int(raw["frame_count"])
    ego = waypoint_trajectory(
        [tuple(w) for w in raw["ego"]["waypoints"]],
        frame_count,
        float(raw["ego"].get("height", 1.8)),
    )
    sensors = []
    if raw.get("sensors", "default") == "default":
        sensors = default_sensor_suite()
    else:
        for s in raw["sensors"]:
            mount = s.get("mount", [0.0, 0.0, 0.0])
            sensors.append(
                SensorProfile(
                    s["name"],
                    float(s["horizontal_fov"]),
                    float(s["vertical_fov"]),
                    int(s["horizontal_steps"]),
                    int(s["vertical_steps"]),
                    float(s["max_range"]),
                    translate(*mount),
                    float(s.get("pattern_jitter", 0.0)),
                    float(s.get("time_offset", 0.0)),
                )
            )
        sensors = tuple(sensors)
    boxes = tuple(
        BoxSpec(np.array(b["center"], dtype=float), np.array(b["extents"], dtype=float))
        for b in raw.get("boxes", [])
    )
    movers = tuple(
        MoverSpec(
            np.array(m["extents"], dtype=float),
            [(float(w[0]), np.array(w[1:4], dtype=float)) for w in m["waypoints"]],
            (int(m["active"][0]), int(m["active"][1])),
        )
        for m in raw.get("movers", [])
    )
    return SceneSpec(
        frame_count=frame_count,
        ego=ego,
        sensors=tuple(sensors),
        ground_z=float(raw.get("ground", {}).get("z", 0.0)),
        ground_half_extent=tuple(raw.get("ground", {}).get("half_extent", (150.0, 150.0))),
        boxes=boxes,
        movers=movers,
        frame_period=float(raw.get("frame_period", 0.1)),
        seed=int(raw.get("seed", 0)),
    )
