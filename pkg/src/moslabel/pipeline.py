"""Stage orchestration: run the labeling pipeline with content-keyed caching.

Each stage's outputs land in ``out_dir/cache/<stage>/<key>/`` where the key
hashes the stage's config section plus the upstream stage keys (and, for the
first stage, a fingerprint of the input bundle). Re-running with an unchanged
config is therefore a chain of cache hits, and changing one section only
recomputes from that stage onward. ``run.json`` records the active key of
every stage so other tools (the review service) can find the outputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataset, sync
from .config import PipelineConfig
from .correction import AlignmentRecord, alignment_report, correct_partition
from .dataset import (
    CLASS_DYNAMIC,
    CLASS_STATIC,
    SENSOR_IDS,
    SequenceManifest,
    label_classes,
    make_splits,
)
from .detection import FrameDetection, Instance, ScanAnnotation, detect_cluster
from .errors import ConfigError, InvalidAnchorError, MoslabelError
from .geometry import Aabb, PointCloud, Pose, transform_cloud, voxel_downsample
from .metrics import (
    ConfusionCounts,
    confusion_counts,
    dynamic_ratio,
    iou_mos,
    map_voxel_metrics,
    metrics_csv,
    metrics_table,
)
from .tracking import (
    STATUS_CONFIRMED,
    AugmentedBox,
    Observation,
    Track,
    associate_tracks,
    augment_lost_boxes,
    filter_labels,
    judge_tracks,
    track_dump,
)
from .trajectory import ClusterPartition, cluster_trajectory, parse_partition, serialize_partition, trajectory_from_poses

log = logging.getLogger(__name__)

EDITS_FILE = "edits.jsonl"


@dataclass(frozen=True)
class EditRecord:
    """One human correction: relabel an instance or explicit points."""

    frame: int
    new_class: str  # "static" | "dynamic" | "unlabeled"
    instance_id: int | None = None
    point_indices: tuple[int, ...] | None = None
    note: str = ""
    timestamp: float = 0.0

    def __post_init__(self):
        if (self.instance_id is None) == (self.point_indices is None):
            raise ValueError("an edit needs exactly one of instance_id or point_indices")
        if self.new_class not in _CLASS_BY_NAME:
            raise ValueError(f"unknown class {self.new_class!r}")

    def to_json(self) -> dict:
        out = {"frame": self.frame, "new_class": self.new_class, "note": self.note, "timestamp": self.timestamp}
        if self.instance_id is not None:
            out["instance_id"] = self.instance_id
        else:
            out["point_indices"] = list(self.point_indices)
        return out

    @staticmethod
    def from_json(raw: dict) -> "EditRecord":
        return EditRecord(
            frame=int(raw["frame"]),
            new_class=raw["new_class"],
            instance_id=raw.get("instance_id"),
            point_indices=tuple(raw["point_indices"]) if "point_indices" in raw else None,
            note=raw.get("note", ""),
            timestamp=float(raw.get("timestamp", 0.0)),
        )


_CLASS_BY_NAME = {
    "unlabeled": dataset.CLASS_UNLABELED,
    "static": CLASS_STATIC,
    "dynamic": CLASS_DYNAMIC,
}


def apply_edits(
    annotations: dict[int, ScanAnnotation], edits: list[EditRecord]
) -> dict[int, ScanAnnotation]:
    """Apply edits in order; later edits override earlier ones on overlap."""
    out = dict(annotations)
    for k, edit in enumerate(edits):
        if edit.frame not in out:
            raise MoslabelError(f"edit {k}: frame {edit.frame} has no annotation")
        ann = out[edit.frame]
        classes = ann.classes.copy()
        if edit.instance_id is not None:
            sel = ann.instance_ids == edit.instance_id
            if not sel.any():
                raise MoslabelError(
                    f"edit {k}: instance {edit.instance_id} not present in frame {edit.frame}"
                )
        else:
            idx = np.asarray(edit.point_indices, dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= len(classes)):
                raise MoslabelError(f"edit {k}: point index out of range in frame {edit.frame}")
            sel = np.zeros(len(classes), dtype=bool)
            sel[idx] = True
        classes[sel] = _CLASS_BY_NAME[edit.new_class]
        out[edit.frame] = ScanAnnotation(edit.frame, classes, ann.instance_ids)
    return out


def read_edits(path) -> list[EditRecord]:
    path = Path(path)
    if not path.exists():
        return []
    return [
        EditRecord.from_json(json.loads(line))
        for line in path.read_text().splitlines()
        if line.strip()
    ]


def append_edit(path, edit: EditRecord) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(edit.to_json()) + "\n")


# ---------------------------------------------------------------------------
# Cache plumbing
# ---------------------------------------------------------------------------


def _hash(*parts: str) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p.encode())
        h.update(b"\x00")
    return h.hexdigest()[:16]


def _file_fingerprint(path: Path) -> str:
    st = path.stat()
    return f"{path.name}:{st.st_size}:{st.st_mtime_ns}"


def input_fingerprint(bundle_dir) -> tuple[str, str]:
    """(scan side, label side) fingerprints of the input bundle.

    Scan files are fingerprinted by size and mtime (hashing gigabytes on
    every run would defeat the <1s cache-hit goal); small text files are
    hashed by content.
    """
    bundle_dir = Path(bundle_dir)
    scan_parts, label_parts = [], []
    for sensor in SENSOR_IDS:
        root = bundle_dir / sensor
        for name in ("times.txt", "poses.txt", "calib.txt"):
            f = root / name
            if f.exists():
                scan_parts.append(name + ":" + hashlib.sha256(f.read_bytes()).hexdigest())
        for f in sorted((root / dataset.SCAN_DIR).glob("*.bin")):
            scan_parts.append(_file_fingerprint(f))
        label_dir = root / dataset.LABEL_DIR
        if label_dir.is_dir():
            for f in sorted(label_dir.glob("*.label")):
                label_parts.append(_file_fingerprint(f))
    return _hash(*scan_parts), _hash(*label_parts)


@dataclass
class StageResult:
    stage: str
    key: str
    directory: Path
    cached: bool
    seconds: float
    counts: dict = field(default_factory=dict)


class StageCache:
    def __init__(self, out_dir):
        self.root = Path(out_dir) / "cache"

    def dir_for(self, stage: str, key: str) -> Path:
        return self.root / stage / key

    def is_complete(self, stage: str, key: str) -> bool:
        return (self.dir_for(stage, key) / ".complete").exists()

    def mark_complete(self, stage: str, key: str, counts: dict) -> None:
        (self.dir_for(stage, key) / ".complete").write_text(json.dumps(counts))

    def counts(self, stage: str, key: str) -> dict:
        return json.loads((self.dir_for(stage, key) / ".complete").read_text())


# ---------------------------------------------------------------------------
# Pipeline state and stage serialization
# ---------------------------------------------------------------------------


@dataclass
class PipelineState:
    config: PipelineConfig
    manifest: SequenceManifest | None = None
    synced: list[sync.SyncedScan] | None = None
    record_counts: dict[tuple[str, int], int] | None = None
    partition: ClusterPartition | None = None
    corrected_poses: dict[int, Pose] | None = None
    alignment_records: list[AlignmentRecord] | None = None
    detections: dict[int, FrameDetection] | None = None
    tracks: list[Track] | None = None
    augmented: list[AugmentedBox] | None = None
    refined: dict[int, ScanAnnotation] | None = None
    export_dir: Path | None = None

    def clouds(self) -> dict[int, PointCloud]:
        return {s.frame: s.cloud for s in self.synced}

    def body_poses(self) -> dict[int, Pose]:
        return {s.frame: s.body_pose for s in self.synced}


def _save_sync(state: PipelineState, out: Path) -> dict:
    frames_dir = out / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    for s in state.synced:
        base = frames_dir / f"{s.frame:06d}"
        np.save(base.with_suffix(".points.npy"), s.cloud.points)
        inten = s.cloud.intensities
        np.save(base.with_suffix(".intensity.npy"), inten if inten is not None else np.zeros(len(s.cloud)))
        np.save(base.with_suffix(".prov.npy"), s.provenance)
    dataset.write_poses([s.body_pose for s in state.synced], out / "poses.txt")
    counts = {f"{sensor}:{frame}": n for (sensor, frame), n in state.record_counts.items()}
    (out / "record_counts.json").write_text(json.dumps(counts, sort_keys=True))
    total_points = sum(len(s.cloud) for s in state.synced)
    return {"frames": len(state.synced), "points": total_points}


def _load_sync(state: PipelineState, out: Path) -> None:
    poses = dataset.read_poses(out / "poses.txt")
    synced = []
    for t, pose in enumerate(poses):
        base = out / "frames" / f"{t:06d}"
        points = np.load(base.with_suffix(".points.npy"))
        inten = np.load(base.with_suffix(".intensity.npy"))
        prov = np.load(base.with_suffix(".prov.npy"))
        synced.append(sync.SyncedScan(t, PointCloud(points, inten), prov, pose))
    state.synced = synced
    raw = json.loads((out / "record_counts.json").read_text())
    state.record_counts = {
        (key.rsplit(":", 1)[0], int(key.rsplit(":", 1)[1])): v for key, v in raw.items()
    }


def _save_cluster(state: PipelineState, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    (out / "partition.txt").write_text(serialize_partition(state.partition))
    kinds = [c.kind for c in state.partition.clusters]
    (out / "kinds.json").write_text(json.dumps(kinds))
    return {
        "clusters": len(state.partition.clusters),
        "subclusters": sum(len(c.subclusters) for c in state.partition.clusters),
    }


def _load_cluster(state: PipelineState, out: Path) -> None:
    kinds = json.loads((out / "kinds.json").read_text())
    state.partition = parse_partition((out / "partition.txt").read_text(), kinds)


def _save_correct(state: PipelineState, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    frames = sorted(state.corrected_poses)
    dataset.write_poses([state.corrected_poses[t] for t in frames], out / "poses.txt")
    (out / "report.txt").write_text(alignment_report(state.alignment_records))
    (out / "records.json").write_text(
        json.dumps([dataclasses.asdict(r) for r in state.alignment_records])
    )
    return {
        "icp_runs": len(state.alignment_records),
        "converged": sum(r.converged for r in state.alignment_records),
    }


def _load_correct(state: PipelineState, out: Path) -> None:
    poses = dataset.read_poses(out / "poses.txt")
    state.corrected_poses = dict(enumerate(poses))
    raw = json.loads((out / "records.json").read_text())
    state.alignment_records = [AlignmentRecord(**r) for r in raw]


def _save_annotations(frames_dir: Path, annotations: dict[int, ScanAnnotation]) -> None:
    frames_dir.mkdir(parents=True, exist_ok=True)
    for t, ann in sorted(annotations.items()):
        base = frames_dir / f"{t:06d}"
        np.save(base.with_suffix(".classes.npy"), ann.classes)
        np.save(base.with_suffix(".inst.npy"), ann.instance_ids)


def _load_annotations(frames_dir: Path) -> dict[int, ScanAnnotation]:
    out = {}
    for f in sorted(frames_dir.glob("*.classes.npy")):
        t = int(f.name.split(".")[0])
        classes = np.load(f)
        inst = np.load(frames_dir / f"{t:06d}.inst.npy")
        out[t] = ScanAnnotation(t, classes, inst)
    return out


def _save_detect(state: PipelineState, out: Path) -> dict:
    _save_annotations(out / "frames", {t: d.annotation for t, d in state.detections.items()})
    meta = {}
    for t, det in sorted(state.detections.items()):
        base = out / "frames" / f"{t:06d}"
        np.save(base.with_suffix(".ground.npy"), det.ground)
        meta[str(t)] = [
            {
                "id": inst.instance_id,
                "verdict": det.verdicts[inst.instance_id],
                "centroid": inst.centroid.tolist(),
                "aabb": [inst.aabb.min_corner.tolist(), inst.aabb.max_corner.tolist()],
                "count": inst.count,
            }
            for inst in det.instances
        ]
    (out / "instances.json").write_text(json.dumps(meta, sort_keys=True))
    n_inst = sum(len(v) for v in meta.values())
    n_dyn = sum(1 for v in meta.values() for i in v if i["verdict"] == "dynamic")
    return {"frames": len(state.detections), "instances": n_inst, "dynamic_instances": n_dyn}


def _load_detect(state: PipelineState, out: Path) -> None:
    annotations = _load_annotations(out / "frames")
    meta = json.loads((out / "instances.json").read_text())
    poses = state.corrected_poses
    detections = {}
    for t, ann in annotations.items():
        ground = np.load(out / "frames" / f"{t:06d}.ground.npy")
        instances, verdicts = [], {}
        for m in meta.get(str(t), []):
            indices = np.flatnonzero(ann.instance_ids == m["id"])
            instances.append(
                Instance(m["id"], indices, np.array(m["centroid"]), Aabb(*map(np.array, m["aabb"])))
            )
            verdicts[m["id"]] = m["verdict"]
        detections[t] = FrameDetection(ann, tuple(instances), verdicts, poses[t], ground)
    state.detections = detections


def _save_track(state: PipelineState, out: Path) -> dict:
    _save_annotations(out / "frames", state.refined)
    tracks_payload = [
        {
            "track_id": tr.track_id,
            "status": tr.status,
            "observations": [
                {
                    "frame": o.frame,
                    "instance_id": o.instance_id,
                    "centroid": o.centroid.tolist(),
                    "aabb": [o.aabb.min_corner.tolist(), o.aabb.max_corner.tolist()],
                }
                for o in tr.observations
            ],
        }
        for tr in state.tracks
    ]
    (out / "tracks.json").write_text(json.dumps(tracks_payload))
    (out / "augmented.json").write_text(
        json.dumps(
            [
                {
                    "frame": b.frame,
                    "aabb": [b.aabb.min_corner.tolist(), b.aabb.max_corner.tolist()],
                    "track_id": b.track_id,
                    "instance_id": b.instance_id,
                    "fraction": b.fraction,
                }
                for b in state.augmented
            ]
        )
    )
    (out / "track_dump.txt").write_text(track_dump(state.tracks))
    confirmed = sum(1 for tr in state.tracks if tr.status == STATUS_CONFIRMED)
    return {"tracks": len(state.tracks), "confirmed": confirmed, "augmented_boxes": len(state.augmented)}


def _load_track(state: PipelineState, out: Path) -> None:
    state.refined = _load_annotations(out / "frames")
    tracks = []
    for raw in json.loads((out / "tracks.json").read_text()):
        obs = [
            Observation(
                o["frame"],
                o["instance_id"],
                np.array(o["centroid"]),
                Aabb(*map(np.array, o["aabb"])),
            )
            for o in raw["observations"]
        ]
        tracks.append(Track(raw["track_id"], obs, raw["status"]))
    state.tracks = tracks
    state.augmented = [
        AugmentedBox(
            b["frame"],
            Aabb(*map(np.array, b["aabb"])),
            b["track_id"],
            b["instance_id"],
            b["fraction"],
        )
        for b in json.loads((out / "augmented.json").read_text())
    ]


# ---------------------------------------------------------------------------
# Stage computations
# ---------------------------------------------------------------------------


def _compute_sync(state: PipelineState) -> None:
    cfg = state.config
    manifest = state.manifest
    synced, record_counts = [], {}
    for t in range(manifest.frame_count()):
        quad = sync.match_frames(manifest, t, cfg.sync.max_sync_gap)
        synced.append(
            sync.merge_scans(quad, manifest, t, compensate_motion=cfg.sync.compensate_motion)
        )
        for sensor, f in quad.frames.items():
            key = (sensor, f)
            if key not in record_counts:
                records = dataset.read_scan_records(manifest.sensors[sensor].scan_paths[f])
                record_counts[key] = records.record_count
    state.synced = synced
    state.record_counts = record_counts


def _compute_cluster(state: PipelineState) -> None:
    frames = trajectory_from_poses(
        [s.body_pose for s in state.synced],
        state.manifest.reference_sequence.timestamps,
    )
    state.partition = cluster_trajectory(frames, state.config.cluster.to_params())


def _compute_correct(state: PipelineState) -> None:
    cfg = state.config
    corrected, records = correct_partition(
        state.partition,
        state.clouds(),
        state.body_poses(),
        cfg.correct.map_voxel_size,
        cfg.correct.to_params(),
    )
    state.corrected_poses = corrected
    state.alignment_records = records


def _compute_detect(state: PipelineState) -> None:
    params = state.config.detect.to_params()
    clouds = state.clouds()
    poses = state.corrected_poses
    detections: dict[int, FrameDetection] = {}
    next_id = 1
    for cluster in state.partition.clusters:
        dets = detect_cluster(
            {t: clouds[t] for t in cluster.frames},
            {t: poses[t] for t in cluster.frames},
            params,
            start_id=next_id,
        )
        next_id = max(
            (max((i.instance_id for i in d.instances), default=0) for d in dets.values()),
            default=next_id - 1,
        ) + 1
        detections.update(dets)
    state.detections = detections


def _compute_track(state: PipelineState) -> None:
    params = state.config.track.to_params()
    tracks = associate_tracks(state.detections, params)
    judge_tracks(tracks, params)
    augmented = [
        box
        for tr in tracks
        if tr.status == STATUS_CONFIRMED
        for box in augment_lost_boxes(tr, params)
    ]
    state.tracks = tracks
    state.augmented = augmented
    state.refined = filter_labels(state.detections, tracks, augmented, state.clouds())


def derive_split_anchors(partition: ClusterPartition, frame_count: int, val_n: int, test_n: int):
    """Anchor val/test at the last two revisited clusters when possible."""
    revisits = [c for c in partition.clusters if c.kind == "revisit"]
    candidates = []
    for cluster in revisits[-2:]:
        candidates.append(cluster.subclusters[-1][0])
    candidates = sorted(set(candidates))
    if len(candidates) == 2:
        val_anchor, test_anchor = candidates
        if (
            val_anchor + val_n <= test_anchor
            and test_anchor + test_n <= frame_count
        ):
            return val_anchor, test_anchor
    return None, None


def _compute_export(state: PipelineState, out: Path) -> dict:
    cfg = state.config
    edits = read_edits(Path(cfg.out_dir) / EDITS_FILE)
    annotations = apply_edits(state.refined, edits) if edits else state.refined

    per_sensor: dict[str, dict[int, np.ndarray]] = {s: {} for s in SENSOR_IDS}
    for s in state.synced:
        ann = annotations[s.frame]
        labels = dataset.pack_labels(ann.classes, ann.instance_ids)
        split = sync.split_labels(s, labels, state.record_counts)
        for sensor, by_frame in split.items():
            for f, arr in by_frame.items():
                if f in per_sensor[sensor]:
                    old = per_sensor[sensor][f]
                    # Class precedence dynamic > static > unlabeled; the ids
                    # are ordered that way numerically.
                    take = label_classes(arr) > label_classes(old)
                    old[take] = arr[take]
                else:
                    per_sensor[sensor][f] = arr.copy()

    full_labels: dict[str, dict[int, np.ndarray]] = {}
    for sensor in SENSOR_IDS:
        seq = state.manifest.sensors[sensor]
        frames = {}
        for f in range(len(seq)):
            arr = per_sensor[sensor].get(f)
            if arr is None:
                arr = np.zeros(_scan_record_count(seq.scan_paths[f]), dtype=np.uint32)
            frames[f] = arr
        full_labels[sensor] = frames

    dataset_dir = out / "dataset"
    written = dataset.export_layout(state.manifest, full_labels, dataset_dir)

    n = state.manifest.frame_count()
    ratios = (cfg.export.train_ratio, cfg.export.val_ratio, cfg.export.test_ratio)
    val_anchor, test_anchor = cfg.export.val_anchor, cfg.export.test_anchor
    if val_anchor is None and test_anchor is None:
        val_n = int(np.floor(cfg.export.val_ratio * n))
        test_n = n - int(np.floor(cfg.export.train_ratio * n)) - val_n
        val_anchor, test_anchor = derive_split_anchors(state.partition, n, val_n, test_n)
    try:
        splits = make_splits(n, ratios, val_anchor, test_anchor)
    except InvalidAnchorError:
        log.warning("derived split anchors invalid, falling back to tail blocks")
        splits = make_splits(n, ratios)
    (out / "splits.json").write_text(
        json.dumps({"train": splits.train, "val": splits.val, "test": splits.test})
    )
    state.export_dir = dataset_dir
    edited = len(edits)
    return {"files": len(written), "edits_applied": edited, "train": len(splits.train), "val": len(splits.val), "test": len(splits.test)}


def _scan_record_count(path) -> int:
    return Path(path).stat().st_size // 16


def _compute_eval(state: PipelineState, out: Path) -> dict:
    cfg = state.config
    out.mkdir(parents=True, exist_ok=True)
    manifest = state.manifest
    has_gt = all(len(seq.label_paths) == len(seq) for seq in manifest.sensors.values())

    ratios_rows = []
    refined = state.refined
    for t in sorted(refined):
        ann = refined[t]
        if len(ann) == 0:
            continue
        ratios_rows.append({"frame": t, "dynamic_ratio": dynamic_ratio(dataset.pack_labels(ann.classes))})
    (out / "dynamic_ratios.csv").write_text(metrics_csv(ratios_rows))

    if not has_gt:
        (out / "summary.json").write_text(json.dumps({"ground_truth": False}))
        return {"ground_truth": False, "frames": len(ratios_rows)}

    export_dataset = state.export_dir
    rows = []
    gt_cache: dict[tuple[str, int], np.ndarray] = {}
    total = ConfusionCounts(0, 0, 0, 0)
    for sensor in SENSOR_IDS:
        seq = manifest.sensors[sensor]
        counts = ConfusionCounts(0, 0, 0, 0)
        for f in range(len(seq)):
            n = _scan_record_count(seq.scan_paths[f])
            gt = dataset.read_labels(seq.label_paths[f], n)
            gt_cache[(sensor, f)] = gt
            pred = dataset.read_labels(
                export_dataset / sensor / dataset.LABEL_DIR / f"{f:06d}.label", n
            )
            counts = counts + confusion_counts(pred, gt)
        rows.append(
            {
                "sensor": sensor,
                "iou_mos": iou_mos(counts),
                "tp": counts.tp,
                "fp": counts.fp,
                "fn": counts.fn,
                "tn": counts.tn,
            }
        )
        total = total + counts
    rows.append(
        {"sensor": "all", "iou_mos": iou_mos(total), "tp": total.tp, "fp": total.fp, "fn": total.fn, "tn": total.tn}
    )
    (out / "point_metrics.csv").write_text(metrics_csv(rows))
    (out / "point_metrics.txt").write_text(metrics_table(rows))

    # Map-level metrics on the merged scans under corrected poses.
    poses = state.corrected_poses
    gt_clouds, gt_labels, pose_list = [], [], []
    static_parts = []
    for s in state.synced:
        merged_gt = np.empty(len(s.cloud), dtype=np.uint32)
        for sensor_idx, sensor in enumerate(SENSOR_IDS):
            rows_sel = s.provenance[:, 0] == sensor_idx
            if not rows_sel.any():
                continue
            for f in np.unique(s.provenance[rows_sel, 1]):
                gt_arr = gt_cache[(sensor, int(f))]
                sel = rows_sel & (s.provenance[:, 1] == f)
                merged_gt[sel] = gt_arr[s.provenance[sel, 2]]
        gt_clouds.append(s.cloud)
        gt_labels.append(merged_gt)
        pose_list.append(poses[s.frame])
        keep = refined[s.frame].classes == CLASS_STATIC
        static_parts.append(poses[s.frame].apply(s.cloud.points[keep]))
    cleaned = voxel_downsample(
        PointCloud(np.vstack(static_parts)), cfg.eval.voxel_size
    )
    map_result = map_voxel_metrics(cleaned, gt_clouds, gt_labels, pose_list, cfg.eval.voxel_size)
    map_rows = [
        {
            "preservation_pct": map_result.preservation_pct,
            "rejection_pct": map_result.rejection_pct,
            "f1": map_result.f1,
            "static_voxels": map_result.static_voxels,
            "dynamic_voxels": map_result.dynamic_voxels,
        }
    ]
    (out / "map_metrics.csv").write_text(metrics_csv(map_rows))
    (out / "map_metrics.txt").write_text(metrics_table(map_rows))
    summary = {
        "ground_truth": True,
        "iou_mos": iou_mos(total),
        "preservation_pct": map_result.preservation_pct,
        "rejection_pct": map_result.rejection_pct,
        "f1": map_result.f1,
    }
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True))
    return summary


# ---------------------------------------------------------------------------
# The runner
# ---------------------------------------------------------------------------

_STAGE_ORDER = ("sync", "cluster", "correct", "detect", "track", "export", "eval")


def run(config: PipelineConfig) -> list[StageResult]:
    """Execute the requested stages, reusing cached results where valid."""
    config.validate()
    if not config.input_dir or not config.out_dir:
        raise ConfigError("config needs input_dir and out_dir")
    out_root = Path(config.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    cache = StageCache(out_root)
    state = PipelineState(config)
    state.manifest = dataset.load_manifest(config.input_dir)

    scans_fp, labels_fp = input_fingerprint(config.input_dir)
    requested = [s for s in _STAGE_ORDER if s in config.stages]
    if not requested:
        raise ConfigError("no valid stages requested")
    # Everything up to the last requested stage is a dependency.
    last = max(_STAGE_ORDER.index(s) for s in requested)
    to_run = _STAGE_ORDER[: last + 1]
    results: list[StageResult] = []
    upstream_key = scans_fp

    savers = {
        "sync": _save_sync,
        "cluster": _save_cluster,
        "correct": _save_correct,
        "detect": _save_detect,
        "track": _save_track,
    }
    loaders = {
        "sync": _load_sync,
        "cluster": _load_cluster,
        "correct": _load_correct,
        "detect": _load_detect,
        "track": _load_track,
    }
    computes = {
        "sync": _compute_sync,
        "cluster": _compute_cluster,
        "correct": _compute_correct,
        "detect": _compute_detect,
        "track": _compute_track,
    }

    for stage in to_run:
        extra = ""
        if stage == "export":
            edits_path = out_root / EDITS_FILE
            extra = (
                hashlib.sha256(edits_path.read_bytes()).hexdigest()
                if edits_path.exists()
                else "no-edits"
            )
        elif stage == "eval":
            extra = labels_fp
        key = _hash(stage, config.section_hash(stage), upstream_key, extra)
        stage_dir = cache.dir_for(stage, key)
        started = time.time()
        if cache.is_complete(stage, key):
            if stage in loaders:
                loaders[stage](state, stage_dir)
            elif stage == "export":
                state.export_dir = stage_dir / "dataset"
            counts = cache.counts(stage, key)
            results.append(StageResult(stage, key, stage_dir, True, time.time() - started, counts))
        else:
            stage_dir.mkdir(parents=True, exist_ok=True)
            if stage in computes:
                computes[stage](state)
                counts = savers[stage](state, stage_dir)
            elif stage == "export":
                counts = _compute_export(state, stage_dir)
            else:
                counts = _compute_eval(state, stage_dir)
            cache.mark_complete(stage, key, counts)
            results.append(StageResult(stage, key, stage_dir, False, time.time() - started, counts))
        upstream_key = key

    _write_run_record(out_root, config, results)
    return results


def _write_run_record(out_root: Path, config: PipelineConfig, results: list[StageResult]) -> None:
    record = {
        "input_dir": str(config.input_dir),
        "stages": {
            r.stage: {
                "key": r.key,
                "dir": str(r.directory),
                "cached": r.cached,
                "seconds": round(r.seconds, 3),
                "counts": r.counts,
            }
            for r in results
        },
    }
    (out_root / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True))


def report_text(results: list[StageResult]) -> str:
    lines = ["stage    cached  seconds  counts"]
    for r in results:
        counts = " ".join(f"{k}={v}" for k, v in r.counts.items())
        lines.append(f"{r.stage:<8} {str(r.cached):<7} {r.seconds:7.2f}  {counts}")
    return "\n".join(lines) + "\n"
