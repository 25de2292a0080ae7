"""Binary scan/label I/O, pose and calibration files, export layout, splits.

On-disk conventions follow the SemanticKITTI family: scans are packed
little-endian float32 ``x, y, z, intensity`` records in ``velodyne/``,
labels are per-point little-endian uint32 in ``labels/`` (class id in the
low 16 bits, instance id in the high 16), and ``poses.txt`` holds one
row-major 3x4 ``[R | t]`` matrix per line. A sequence bundle contains one
such directory per sensor plus ``times.txt`` and ``calib.txt``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyInputError, FormatError, InvalidAnchorError
from .geometry import Pose, PointCloud, orthonormalize

log = logging.getLogger(__name__)

# MOS class ids, low 16 bits of a label word.
CLASS_UNLABELED = 0
CLASS_STATIC = 9
CLASS_DYNAMIC = 251
VALID_CLASSES = frozenset({CLASS_UNLABELED, CLASS_STATIC, CLASS_DYNAMIC})

# Fixed sensor order; "ouster" is the reference frame all scans merge into.
SENSOR_IDS = ("aeva", "livox", "ouster", "velodyne")
REFERENCE_SENSOR = "ouster"

SCAN_DIR = "velodyne"  # scans live in velodyne/ regardless of sensor, by convention
LABEL_DIR = "labels"

_SCAN_RECORD = 16  # 4 float32
_LABEL_RECORD = 4  # 1 uint32


def pack_labels(class_ids, instance_ids=None) -> np.ndarray:
    cls = np.asarray(class_ids, dtype=np.uint32)
    if instance_ids is None:
        return cls.copy()
    inst = np.asarray(instance_ids, dtype=np.uint32)
    return (cls & np.uint32(0xFFFF)) | (inst << np.uint32(16))


def label_classes(labels) -> np.ndarray:
    return np.asarray(labels, dtype=np.uint32) & np.uint32(0xFFFF)


def label_instances(labels) -> np.ndarray:
    return np.asarray(labels, dtype=np.uint32) >> np.uint32(16)


@dataclass(frozen=True)
class ScanRecords:
    """A decoded scan plus the on-disk record index of every kept point."""

    cloud: PointCloud
    record_indices: np.ndarray
    record_count: int


def read_scan_records(path) -> ScanRecords:
    """Read a packed float32 scan; non-finite records are dropped with a warning."""
    raw = Path(path).read_bytes()
    if len(raw) % _SCAN_RECORD != 0:
        raise FormatError(
            f"{path}: scan length {len(raw)} is not a multiple of {_SCAN_RECORD}"
            f" (trailing partial record at byte {len(raw) - len(raw) % _SCAN_RECORD})"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    finite = np.isfinite(data).all(axis=1)
    indices = np.flatnonzero(finite).astype(np.int64)
    if not finite.all():
        log.warning("%s: dropped %d non-finite records", path, int((~finite).sum()))
    kept = data[finite]
    cloud = PointCloud(kept[:, :3].astype(np.float64), kept[:, 3].astype(np.float64))
    return ScanRecords(cloud, indices, data.shape[0])


def read_scan(path) -> PointCloud:
    return read_scan_records(path).cloud


def write_scan(cloud: PointCloud, path) -> None:
    data = np.zeros((len(cloud), 4), dtype="<f4")
    data[:, :3] = cloud.points
    if cloud.intensities is not None:
        data[:, 3] = cloud.intensities
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data.tobytes())


def read_labels(path, expected_count: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    count = len(raw) // _LABEL_RECORD
    if len(raw) % _LABEL_RECORD != 0 or count != expected_count:
        raise FormatError(
            f"{path}: found {count} labels ({len(raw)} bytes), expected {expected_count}"
        )
    return np.frombuffer(raw, dtype="<u4").copy()


def write_labels(labels, path) -> None:
    labels = np.asarray(labels, dtype="<u4")
    classes = set(np.unique(label_classes(labels)).tolist())
    bad = classes - VALID_CLASSES
    if bad:
        raise ValueError(f"refusing to write labels with unknown class ids {sorted(bad)}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(labels.tobytes())


def _parse_pose_line(tokens: list[str], lineno: int, path) -> Pose:
    if len(tokens) != 12:
        raise FormatError(f"{path}:{lineno}: expected 12 pose values, got {len(tokens)}")
    vals = np.array([float(v) for v in tokens], dtype=np.float64).reshape(3, 4)
    r = vals[:, :3]
    drift = np.abs(r @ r.T - np.eye(3)).max()
    if drift > 1e-3:
        raise FormatError(f"{path}:{lineno}: rotation is not orthonormal within 1e-3")
    if drift > 1e-9:
        r = orthonormalize(r)  # repair mild drift; exact input stays bit-exact
    return Pose(r, vals[:, 3])


def read_poses(path) -> list[Pose]:
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if line.strip():
            poses.append(_parse_pose_line(line.split(), lineno, path))
    return poses


def write_poses(poses, path) -> None:
    lines = []
    for p in poses:
        flat = np.hstack([p.rotation, p.translation[:, None]]).reshape(-1)
        lines.append(" ".join(f"{v:.17g}" for v in flat))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_timestamps(path) -> np.ndarray:
    vals = [float(line) for line in Path(path).read_text().splitlines() if line.strip()]
    return np.asarray(vals, dtype=np.float64)


def write_timestamps(times, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(f"{float(t):.17g}\n" for t in times))


def read_calib(path) -> dict[str, Pose]:
    """Parse ``Tr_<sensor>: <12 floats>`` extrinsics into the reference frame."""
    extrinsics = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        name, _, rest = line.partition(":")
        if not name.startswith("Tr_") or not rest.strip():
            raise FormatError(f"{path}:{lineno}: expected 'Tr_<sensor>: <12 floats>'")
        extrinsics[name[3:]] = _parse_pose_line(rest.split(), lineno, path)
    return extrinsics


def write_calib(extrinsics: dict[str, Pose], path) -> None:
    lines = []
    for sensor, pose in extrinsics.items():
        flat = np.hstack([pose.rotation, pose.translation[:, None]]).reshape(-1)
        lines.append(f"Tr_{sensor}: " + " ".join(f"{v:.17g}" for v in flat))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(line + "\n" for line in lines))


@dataclass(frozen=True)
class SensorSequence:
    scan_paths: tuple[Path, ...]
    timestamps: np.ndarray
    poses: tuple[Pose, ...]
    label_paths: tuple[Path, ...] = ()

    def __len__(self) -> int:
        return len(self.scan_paths)


@dataclass(frozen=True)
class SequenceManifest:
    """Per-sensor scan lists with timestamps and poses, plus extrinsics."""

    sensors: dict[str, SensorSequence]
    extrinsics: dict[str, Pose]
    reference: str = REFERENCE_SENSOR

    def __post_init__(self):
        if tuple(sorted(self.sensors)) != tuple(sorted(SENSOR_IDS)):
            raise FormatError(
                f"expected sensors {sorted(SENSOR_IDS)}, got {sorted(self.sensors)}"
            )
        for sensor, seq in self.sensors.items():
            ts = seq.timestamps
            if len(ts) != len(seq.scan_paths) or len(seq.poses) != len(seq.scan_paths):
                raise FormatError(f"{sensor}: scan/timestamp/pose counts differ")
            if len(ts) > 1 and not (np.diff(ts) > 0).all():
                raise FormatError(f"{sensor}: timestamps are not strictly increasing")
        for sensor in self.sensors:
            if sensor not in self.extrinsics:
                raise FormatError(f"missing extrinsic for sensor {sensor}")

    @property
    def reference_sequence(self) -> SensorSequence:
        return self.sensors[self.reference]

    def frame_count(self) -> int:
        return len(self.reference_sequence)


def load_manifest(bundle_dir, reference: str = REFERENCE_SENSOR) -> SequenceManifest:
    bundle_dir = Path(bundle_dir)
    sensors = {}
    for sensor in SENSOR_IDS:
        root = bundle_dir / sensor
        if not root.is_dir():
            raise FormatError(f"{bundle_dir}: missing sensor directory {sensor}/")
        scans = tuple(sorted((root / SCAN_DIR).glob("*.bin")))
        if not scans:
            raise FormatError(f"{root}: no scans under {SCAN_DIR}/")
        times = read_timestamps(root / "times.txt")
        poses = tuple(read_poses(root / "poses.txt"))
        label_dir = root / LABEL_DIR
        labels = tuple(sorted(label_dir.glob("*.label"))) if label_dir.is_dir() else ()
        sensors[sensor] = SensorSequence(scans, times, poses, labels)
    extrinsics = read_calib(bundle_dir / reference / "calib.txt")
    return SequenceManifest(sensors, extrinsics, reference)


def export_layout(manifest: SequenceManifest, labels_per_sensor, out_dir) -> list[str]:
    """Write the per-sensor dataset layout; returns relative paths written.

    ``labels_per_sensor`` maps sensor id to a sequence of per-frame uint32
    label arrays aligned with the sensor's scans. Every frame must have a
    label array of matching length.
    """
    out_dir = Path(out_dir)
    missing = {
        sensor: [i for i in range(len(seq)) if _label_for(labels_per_sensor, sensor, i) is None]
        for sensor, seq in manifest.sensors.items()
    }
    missing = {s: idx for s, idx in missing.items() if idx}
    if missing:
        detail = "; ".join(f"{s}: frames {idx}" for s, idx in sorted(missing.items()))
        raise EmptyInputError(f"labels missing for some frames ({detail})")

    written: list[str] = []
    for sensor, seq in manifest.sensors.items():
        root = out_dir / sensor
        for i, scan_path in enumerate(seq.scan_paths):
            name = f"{i:06d}"
            dst = root / SCAN_DIR / f"{name}.bin"
            dst.parent.mkdir(parents=True, exist_ok=True)
            dst.write_bytes(Path(scan_path).read_bytes())
            written.append(str(dst.relative_to(out_dir)))
            labels = _label_for(labels_per_sensor, sensor, i)
            expected = len(read_scan(scan_path))
            if len(labels) != expected:
                raise FormatError(
                    f"{sensor} frame {i}: {len(labels)} labels for {expected} points"
                )
            write_labels(labels, root / LABEL_DIR / f"{name}.label")
            written.append(str((root / LABEL_DIR / f"{name}.label").relative_to(out_dir)))
        write_poses(seq.poses, root / "poses.txt")
        write_calib(manifest.extrinsics, root / "calib.txt")
        written += [f"{sensor}/poses.txt", f"{sensor}/calib.txt"]
        if len(seq):
            write_timestamps(seq.timestamps, root / "times.txt")
            written.append(f"{sensor}/times.txt")
    return sorted(written)


def _label_for(labels_per_sensor, sensor, index):
    per_frame = labels_per_sensor.get(sensor)
    if per_frame is None:
        return None
    if isinstance(per_frame, dict):
        return per_frame.get(index)
    return per_frame[index] if index < len(per_frame) else None


@dataclass(frozen=True)
class SplitAssignment:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]

    def __post_init__(self):
        all_idx = self.train + self.val + self.test
        if len(set(all_idx)) != len(all_idx):
            raise InvalidAnchorError("split blocks overlap")


def make_splits(
    frame_count: int,
    ratios: tuple[float, float, float] = (0.68, 0.16, 0.16),
    val_anchor: int | None = None,
    test_anchor: int | None = None,
) -> SplitAssignment:
    """Contiguous val/test blocks of floor(ratio * N) frames; train is the rest.

    The test block absorbs the rounding remainder. Default anchors place the
    val and test blocks back-to-back at the end of the sequence.
    """
    if frame_count < 3:
        raise ValueError(f"need at least 3 frames to split, got {frame_count}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    train_n = math.floor(ratios[0] * frame_count)
    val_n = math.floor(ratios[1] * frame_count)
    test_n = frame_count - train_n - val_n
    if test_anchor is None:
        test_anchor = frame_count - test_n
    if val_anchor is None:
        val_anchor = test_anchor - val_n if test_anchor >= val_n else test_anchor + test_n

    val = range(val_anchor, val_anchor + val_n)
    test = range(test_anchor, test_anchor + test_n)
    if val_anchor < 0 or test_anchor < 0 or val.stop > frame_count or test.stop > frame_count:
        raise InvalidAnchorError(
            f"anchor blocks fall outside frames [0, {frame_count})"
        )
    if val.start < test.stop and test.start < val.stop:
        raise InvalidAnchorError(
            f"val block [{val.start}, {val.stop}) overlaps test block [{test.start}, {test.stop})"
        )
    held_out = set(val) | set(test)
    train = tuple(i for i in range(frame_count) if i not in held_out)
    return SplitAssignment(train, tuple(val), tuple(test))
