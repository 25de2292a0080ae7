"""Software synchronization of the four sensors: merge and label split-back.

Per reference frame, the nearest-in-time scan of every sensor is transformed
into the reference sensor frame and concatenated in fixed sensor order. Each
merged point remembers where it came from (sensor, source frame, source
record index), so refined labels can later be routed back to the native
per-sensor scans without any tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dataset
from .dataset import CLASS_UNLABELED, SENSOR_IDS, SequenceManifest
from .errors import ConfigError, SyncGapError
from .geometry import PointCloud, Pose, compose, invert

DEFAULT_MAX_SYNC_GAP = 0.15  # seconds; above one 10 Hz period means a dropped frame


@dataclass(frozen=True)
class FrameQuadruple:
    """Nearest-in-time frame of each sensor to one reference timestamp."""

    frames: dict[str, int]
    timestamps: dict[str, float]
    reference_timestamp: float


@dataclass(frozen=True)
class SyncedScan:
    """Merged four-sensor cloud in the reference frame with per-point origin.

    ``provenance`` is (N, 3) int64: sensor index into SENSOR_IDS, source frame
    index, source record index within that sensor's on-disk scan.
    """

    frame: int
    cloud: PointCloud
    provenance: np.ndarray
    body_pose: Pose

    def __post_init__(self):
        prov = np.asarray(self.provenance, dtype=np.int64).reshape(-1, 3)
        if prov.shape[0] != len(self.cloud):
            raise ValueError(
                f"provenance rows {prov.shape[0]} != cloud size {len(self.cloud)}"
            )
        prov.flags.writeable = False
        object.__setattr__(self, "provenance", prov)


def match_frames(
    manifest: SequenceManifest,
    ref_frame: int,
    max_sync_gap: float = DEFAULT_MAX_SYNC_GAP,
) -> FrameQuadruple:
    """Pick, per sensor, the frame closest in time to the reference frame."""
    ref_seq = manifest.reference_sequence
    if not 0 <= ref_frame < len(ref_seq):
        raise ValueError(f"reference frame {ref_frame} out of range")
    ref_ts = float(ref_seq.timestamps[ref_frame])
    frames, stamps = {}, {}
    for sensor in SENSOR_IDS:
        ts = manifest.sensors[sensor].timestamps
        right = int(np.searchsorted(ts, ref_ts))
        # Candidates straddle the reference time; ties go to the earlier frame.
        best, best_gap = None, np.inf
        for idx in (right - 1, right):
            if 0 <= idx < len(ts):
                gap = abs(float(ts[idx]) - ref_ts)
                if gap < best_gap:
                    best, best_gap = idx, gap
        if best is None or best_gap > max_sync_gap:
            raise SyncGapError(
                f"sensor {sensor}: nearest frame is {best_gap:.3f}s from reference"
                f" t={ref_ts:.3f}s (max {max_sync_gap:.3f}s)"
            )
        frames[sensor] = best
        stamps[sensor] = float(ts[best])
    return FrameQuadruple(frames, stamps, ref_ts)


def merge_scans(
    quad: FrameQuadruple,
    manifest: SequenceManifest,
    ref_frame: int,
    compensate_motion: bool = True,
    scan_loader=None,
) -> SyncedScan:
    """Merge the quadruple into the reference frame (fixed sensor order).

    With motion compensation on, each sensor's extrinsic is chained with the
    relative body motion between its matched timestamp and the reference
    timestamp; otherwise only the extrinsic is applied.
    """
    loader = scan_loader or dataset.read_scan_records
    ref_pose = manifest.reference_sequence.poses[ref_frame]
    ref_from_world = invert(ref_pose)
    parts, provs = [], []
    for sensor_idx, sensor in enumerate(SENSOR_IDS):
        if sensor not in manifest.extrinsics:
            raise ConfigError(f"no extrinsic calibration for sensor {sensor}")
        frame = quad.frames[sensor]
        seq = manifest.sensors[sensor]
        records = loader(seq.scan_paths[frame])
        to_ref = manifest.extrinsics[sensor]
        if compensate_motion:
            to_ref = compose(compose(ref_from_world, seq.poses[frame]), to_ref)
        pts = to_ref.apply(records.cloud.points)
        parts.append((pts, records.cloud.intensities))
        prov = np.empty((len(records.cloud), 3), dtype=np.int64)
        prov[:, 0] = sensor_idx
        prov[:, 1] = frame
        prov[:, 2] = records.record_indices
        provs.append(prov)

    points = np.vstack([p for p, _ in parts]) if parts else np.zeros((0, 3))
    intensities = np.concatenate(
        [i if i is not None else np.zeros(len(p)) for p, i in parts]
    )
    provenance = np.vstack(provs)
    return SyncedScan(ref_frame, PointCloud(points, intensities), provenance, ref_pose)


def split_labels(
    synced: SyncedScan,
    labels: np.ndarray,
    record_counts: dict[tuple[str, int], int],
) -> dict[str, dict[int, np.ndarray]]:
    """Route merged-scan labels back to per-sensor native label arrays.

    Records of a source scan that never entered the merge (including records
    dropped on ingest) come back as unlabeled.
    """
    labels = np.asarray(labels, dtype=np.uint32)
    if labels.shape[0] != len(synced.cloud):
        raise ValueError(
            f"{labels.shape[0]} labels for a merged cloud of {len(synced.cloud)} points"
        )
    out: dict[str, dict[int, np.ndarray]] = {s: {} for s in SENSOR_IDS}
    prov = synced.provenance
    for sensor_idx, sensor in enumerate(SENSOR_IDS):
        rows = prov[:, 0] == sensor_idx
        for frame in np.unique(prov[rows, 1]):
            key = (sensor, int(frame))
            arr = np.full(record_counts[key], CLASS_UNLABELED, dtype=np.uint32)
            sel = rows & (prov[:, 1] == frame)
            arr[prov[sel, 2]] = labels[sel]
            out[sensor][int(frame)] = arr
    return out


def remerge_labels(
    synced: SyncedScan, per_sensor: dict[str, dict[int, np.ndarray]]
) -> np.ndarray:
    """Inverse of split_labels for one synced scan (round-trip check/export)."""
    merged = np.empty(len(synced.cloud), dtype=np.uint32)
    prov = synced.provenance
    for i, (sensor_idx, frame, record) in enumerate(prov):
        merged[i] = per_sensor[SENSOR_IDS[sensor_idx]][int(frame)][record]
    return merged
