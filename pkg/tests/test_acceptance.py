"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line with its runtime and enforcing its time budget.

Run with `pytest tests/test_acceptance.py -s` to see the lines as they go.
"""

import json
import re
import time
from contextlib import contextmanager

import numpy as np
import pytest

from conftest import compact_sensor_suite
from moslabel import dataset, pipeline, simulate, sync
from moslabel.config import config_from_dict
from moslabel.correction import IcpParams, correct_partition
from moslabel.dataset import CLASS_DYNAMIC, SENSOR_IDS, label_classes, make_splits, pack_labels
from moslabel.detection import DetectParams, detect_cluster
from moslabel.geometry import PointCloud, Pose, compose, points_in_box, Aabb
from moslabel.metrics import ConfusionCounts, confusion_counts, f1_score, iou_mos, map_voxel_metrics
from moslabel.simulate import circuit_scene, corrupt_poses, degrade_detections, demo_scene, generate_scene, write_bundle
from moslabel.tracking import (
    STATUS_CONFIRMED,
    TrackParams,
    associate_tracks,
    augment_lost_boxes,
    filter_labels,
    judge_tracks,
)
from moslabel.trajectory import ClusterParams, cluster_trajectory, trajectory_from_poses


@contextmanager
def criterion(name: str, budget_s: float):
    started = time.time()
    try:
        yield
    except BaseException:
        print(f"FAIL  {name}  ({time.time() - started:.1f}s)")
        raise
    elapsed = time.time() - started
    verdict = "PASS" if elapsed < budget_s else "FAIL"
    print(f"{verdict}  {name}  ({elapsed:.1f}s, budget {budget_s:.0f}s)")
    assert elapsed < budget_s, f"{name} exceeded its {budget_s}s budget ({elapsed:.1f}s)"


TABLE_F1_ROWS = [
    (85.072, 47.170, 0.607),
    (95.325, 82.490, 0.884),
    (99.522, 95.339, 0.974),
    (80.581, 71.965, 0.760),
    (91.610, 84.290, 0.878),
    (99.530, 93.740, 0.965),
    (82.852, 81.301, 0.821),
    (93.969, 89.955, 0.919),
    (99.676, 97.175, 0.984),
]


def test_f1_arithmetic():
    with criterion("F1 arithmetic (9 published PR/RR rows, +-5e-4)", 1.0):
        for pr, rr, expected in TABLE_F1_ROWS:
            got = f1_score(pr / 100.0, rr / 100.0)
            assert abs(got - expected) < 5e-4, (pr, rr, got, expected)


def test_merge_split_round_trip():
    with criterion("merge/split label round trip (100 scans, 0 mismatches)", 10.0):
        mismatches = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            prov_rows, counts = [], {}
            for sensor_idx in range(4):
                sensor = SENSOR_IDS[sensor_idx]
                frame = int(rng.integers(0, 4))
                n = int(rng.integers(1, 60))
                counts[(sensor, frame)] = n + int(rng.integers(0, 5))
                prov_rows += [(sensor_idx, frame, r) for r in range(n)]
            prov = np.array(prov_rows, dtype=np.int64)
            cloud = PointCloud(rng.normal(size=(len(prov), 3)))
            synced = sync.SyncedScan(0, cloud, prov, Pose.identity())
            labels = pack_labels(
                rng.choice([0, 9, 251], size=len(prov)),
                rng.integers(0, 99, size=len(prov)),
            )
            split = sync.split_labels(synced, labels, counts)
            back = sync.remerge_labels(synced, split)
            mismatches += int((back != labels).sum())
        assert mismatches == 0


def test_pose_correction_under_drift(tmp_path):
    with criterion("pose correction: 0.4m drift -> <=0.05m / <=0.5deg, exact ICP count", 60.0):
        spec = circuit_scene(frame_count=200, laps=4, seed=5)
        bundle = generate_scene(spec)
        start = simulate.first_revisit_frame(spec, radius=10.0, min_frame_gap=30)
        corrupted = corrupt_poses(bundle, drift=0.4, seed=11, start_frame=start)
        bundle_dir = tmp_path / "bundle"
        write_bundle(corrupted, bundle_dir)
        manifest = dataset.load_manifest(bundle_dir)

        synced = [
            sync.merge_scans(sync.match_frames(manifest, t), manifest, t)
            for t in range(manifest.frame_count())
        ]
        params = ClusterParams(
            yaw_window=3, yaw_threshold=np.radians(50), revisit_radius=6.0,
            min_time_gap=3.0, min_linear_len=100,
        )
        frames = trajectory_from_poses(
            [s.body_pose for s in synced], manifest.reference_sequence.timestamps
        )
        partition = cluster_trajectory(frames, params)

        clouds = {s.frame: s.cloud for s in synced}
        poses = {s.frame: s.body_pose for s in synced}
        corrected, records = correct_partition(partition, clouds, poses, 0.2, IcpParams())
        expected_icp = sum(len(c.subclusters) - 1 for c in partition.clusters)
        assert len(records) == expected_icp
        assert all(r.converged for r in records)

        truth = bundle.true_poses["ouster"]
        err_t = max(
            np.linalg.norm(corrected[t].translation - truth[t].translation)
            for t in range(spec.frame_count)
        )
        err_r = max(
            np.degrees(
                np.arccos(
                    np.clip(
                        (np.trace(corrected[t].rotation.T @ truth[t].rotation) - 1) / 2, -1, 1
                    )
                )
            )
            for t in range(spec.frame_count)
        )
        assert err_t <= 0.05, f"max translation error {err_t:.3f} m"
        assert err_r <= 0.5, f"max rotation error {err_r:.3f} deg"


def _acceptance_config(bundle_dir, out_dir):
    return config_from_dict(
        {
            "input_dir": str(bundle_dir),
            "out_dir": str(out_dir),
            "cluster": {
                "yaw_window": 8,
                "yaw_threshold": 30.0,
                "revisit_radius": 8.0,
                "min_time_gap": 2.0,
                "min_linear_len": 25,
            },
            "detect": {"ground_plane_dist": 0.10},
            "track": {"max_assoc_dist": 6.0},
        }
    )


def test_end_to_end_auto_labeling(tmp_path):
    with criterion("end-to-end auto labeling: IoU >= 0.90, parked object clean", 300.0):
        spec = demo_scene(frame_count=100, seed=7)
        assert len(spec.movers) >= 2 and len(spec.sensors) == 4
        bundle = generate_scene(spec)
        bundle_dir = tmp_path / "bundle"
        write_bundle(bundle, bundle_dir)

        out_dir = tmp_path / "run"
        results = pipeline.run(_acceptance_config(bundle_dir, out_dir))
        eval_dir = next(r for r in results if r.stage == "eval").directory
        summary = json.loads((eval_dir / "summary.json").read_text())
        assert summary["iou_mos"] >= 0.90, f"IoU {summary['iou_mos']:.4f}"

        # The parked car (a static box in the scene) must contribute zero
        # dynamic points in any sensor's exported labels.
        parked = spec.boxes[-1]
        lo, hi = parked.corners()
        region = Aabb(lo - 0.3, hi + 0.3)
        export_dir = next(r for r in results if r.stage == "export").directory / "dataset"
        parked_dynamic = 0
        for sensor in SENSOR_IDS:
            rec = bundle.sensors[sensor]
            for f, cloud in enumerate(rec.clouds):
                labels = dataset.read_labels(
                    export_dir / sensor / "labels" / f"{f:06d}.label", len(cloud)
                )
                world = compose(rec.poses[f], rec.profile.mount).apply(cloud.points)
                inside = points_in_box(world, region)
                parked_dynamic += int(
                    ((label_classes(labels) == CLASS_DYNAMIC) & inside).sum()
                )
        assert parked_dynamic == 0, f"{parked_dynamic} dynamic points on the parked car"


def _merged_gt(bundle, synced_scans):
    gt = {}
    for s in synced_scans:
        labels = np.empty(len(s.cloud), dtype=np.uint32)
        for k, (sensor_idx, frame, record) in enumerate(s.provenance):
            labels[k] = bundle.sensors[SENSOR_IDS[sensor_idx]].labels[frame][record]
        gt[s.frame] = labels
    return gt


def _annotation_iou(annotations, gt):
    total = ConfusionCounts(0, 0, 0, 0)
    for t, ann in annotations.items():
        total = total + confusion_counts(pack_labels(ann.classes), gt[t])
    return iou_mos(total)


def test_filtering_ablation_ordering(tmp_path):
    with criterion("filtering ablation: detect < +judge < +augmentation, recovery >= 95%", 60.0):
        spec = demo_scene(frame_count=50, seed=13, sensors=compact_sensor_suite())
        bundle = generate_scene(spec)
        bundle_dir = tmp_path / "bundle"
        write_bundle(bundle, bundle_dir)
        manifest = dataset.load_manifest(bundle_dir)
        synced = [
            sync.merge_scans(sync.match_frames(manifest, t), manifest, t)
            for t in range(manifest.frame_count())
        ]
        cp = ClusterParams(
            yaw_window=8, yaw_threshold=np.radians(30), revisit_radius=8.0,
            min_time_gap=2.0, min_linear_len=15,
        )
        frames = trajectory_from_poses(
            [s.body_pose for s in synced], manifest.reference_sequence.timestamps
        )
        partition = cluster_trajectory(frames, cp)
        clouds = {s.frame: s.cloud for s in synced}
        poses = {s.frame: s.body_pose for s in synced}
        dp = DetectParams(ground_plane_dist=0.10)
        detections = {}
        next_id = 1
        for cluster in partition.clusters:
            dets = detect_cluster(
                {t: clouds[t] for t in cluster.frames},
                {t: poses[t] for t in cluster.frames},
                dp,
                start_id=next_id,
            )
            next_id = (
                max(
                    (max((i.instance_id for i in d.instances), default=0) for d in dets.values()),
                    default=next_id - 1,
                )
                + 1
            )
            detections.update(dets)

        drop_frames = [18, 19]
        degraded, edits = degrade_detections(
            detections, drop_frames=drop_frames, inject_static_fp=3, seed=21
        )
        deleted_points = {
            (e["frame"], e["instance"]): detections[e["frame"]].instances
            for e in edits
            if e["kind"] == "drop"
        }
        gt = _merged_gt(bundle, synced)

        iou_detect = _annotation_iou({t: d.annotation for t, d in degraded.items()}, gt)

        tp = TrackParams(max_assoc_dist=6.0)
        tracks = associate_tracks(degraded, tp)
        judge_tracks(tracks, tp)
        judged_only = filter_labels(degraded, tracks, [], clouds)
        iou_judged = _annotation_iou(judged_only, gt)

        augmented = [
            b for tr in tracks if tr.status == STATUS_CONFIRMED for b in augment_lost_boxes(tr, tp)
        ]
        assert augmented, "expected augmentation boxes over the dropped frames"
        refined = filter_labels(degraded, tracks, augmented, clouds)
        iou_refined = _annotation_iou(refined, gt)

        assert iou_detect < iou_judged < iou_refined, (
            iou_detect,
            iou_judged,
            iou_refined,
        )

        recovered = total = 0
        for e in edits:
            if e["kind"] != "drop":
                continue
            det = detections[e["frame"]]
            inst = next(i for i in det.instances if i.instance_id == e["instance"])
            classes_after = refined[e["frame"]].classes[inst.point_indices]
            recovered += int((classes_after == CLASS_DYNAMIC).sum())
            total += inst.count
        assert total > 0
        assert recovered / total >= 0.95, f"recovered {recovered}/{total}"


def test_static_scene_soundness(tmp_path):
    with criterion("static scene: zero dynamic points exported", 60.0):
        base = demo_scene(frame_count=40, seed=23, sensors=compact_sensor_suite())
        import dataclasses

        spec = dataclasses.replace(base, movers=())
        bundle = generate_scene(spec)
        bundle_dir = tmp_path / "bundle"
        write_bundle(bundle, bundle_dir)
        out_dir = tmp_path / "run"
        config = _acceptance_config(bundle_dir, out_dir)
        import dataclasses as dc

        config = dc.replace(config, stages=("sync", "cluster", "correct", "detect", "track", "export"))
        results = pipeline.run(config)
        export_dir = next(r for r in results if r.stage == "export").directory / "dataset"
        dynamic = 0
        for label_file in export_dir.rglob("*.label"):
            raw = np.frombuffer(label_file.read_bytes(), dtype="<u4")
            dynamic += int((label_classes(raw) == CLASS_DYNAMIC).sum())
        assert dynamic == 0, f"{dynamic} dynamic points in a mover-free scene"


def test_metric_oracle_equivalence():
    with criterion("metrics match brute force on 50 random instances", 30.0):
        from test_metrics import brute_confusion, brute_iou, brute_map_metrics, _map_case

        rng = np.random.default_rng(99)
        for case in range(40):
            n = int(rng.integers(1, 10_000))
            pred = pack_labels(rng.choice([0, 9, 251], size=n), rng.integers(0, 9, size=n))
            gt = pack_labels(rng.choice([0, 9, 251], size=n), rng.integers(0, 9, size=n))
            counts = confusion_counts(pred, gt)
            assert (counts.tp, counts.fp, counts.fn, counts.tn) == brute_confusion(pred, gt)
            assert iou_mos(counts) == brute_iou(pred, gt)
        for case in range(10):
            clouds, labels, poses = _map_case(rng, n_scans=3, n_points=120)
            cleaned = PointCloud(rng.uniform(-5, 5, (80, 3)))
            result = map_voxel_metrics(cleaned, clouds, labels, poses, 0.5)
            pr, rr = brute_map_metrics(cleaned, clouds, labels, poses, 0.5)
            assert result.preservation_pct == pytest.approx(pr, abs=1e-12)
            assert result.rejection_pct == pytest.approx(rr, abs=1e-12)


def test_format_fidelity(tmp_path):
    with criterion("format fidelity: 1000 round trips + layout regex", 30.0):
        rng = np.random.default_rng(5)
        scan_path = tmp_path / "scan.bin"
        label_path = tmp_path / "labels.label"
        pose_path = tmp_path / "poses.txt"
        for case in range(1000):
            n = int(rng.integers(0, 40))
            pts = rng.uniform(-500, 500, (n, 3)).astype(np.float32).astype(np.float64)
            inten = rng.uniform(0, 1, n).astype(np.float32).astype(np.float64)
            cloud = PointCloud(pts, inten)
            dataset.write_scan(cloud, scan_path)
            back = dataset.read_scan(scan_path)
            assert (back.points == cloud.points).all()
            assert (back.intensities == cloud.intensities).all()

            labels = pack_labels(
                rng.choice([0, 9, 251], size=n), rng.integers(0, 65535, size=n)
            )
            dataset.write_labels(labels, label_path)
            assert (dataset.read_labels(label_path, n) == labels).all()

            if case % 20 == 0:
                from moslabel.geometry import rot_z, translate

                poses = [
                    compose(rot_z(rng.uniform(-np.pi, np.pi)), translate(*rng.uniform(-100, 100, 3)))
                    for _ in range(5)
                ]
                dataset.write_poses(poses, pose_path)
                reread = dataset.read_poses(pose_path)
                for a, b in zip(poses, reread):
                    assert (a.rotation == b.rotation).all()
                    assert (a.translation == b.translation).all()

        # layout regex over a tiny real export
        spec = demo_scene(frame_count=3, seed=2, sensors=compact_sensor_suite())
        bundle = generate_scene(spec)
        bdir = tmp_path / "bundle"
        write_bundle(bundle, bdir)
        manifest = dataset.load_manifest(bdir)
        labels = {
            s: [
                pack_labels([9] * len(bundle.sensors[s].clouds[i]))
                for i in range(3)
            ]
            for s in SENSOR_IDS
        }
        out = tmp_path / "export"
        written = dataset.export_layout(manifest, labels, out)
        pattern = re.compile(
            r"^(aeva|livox|ouster|velodyne)/(velodyne/\d{6}\.bin|labels/\d{6}\.label|poses\.txt|calib\.txt|times\.txt)$"
        )
        assert written
        for rel in written:
            assert pattern.match(rel), rel


def test_split_arithmetic():
    with criterion("split arithmetic: 12188 -> 8287/1950/1951", 1.0):
        splits = make_splits(12188)
        assert len(splits.train) == 8287
        assert len(splits.val) == 1950
        assert len(splits.test) == 1951
        val, test = list(splits.val), list(splits.test)
        assert val == list(range(val[0], val[0] + 1950))
        assert test == list(range(test[0], test[0] + 1951))
        assert not (set(val) & set(test))
        assert sorted(splits.train + splits.val + splits.test) == list(range(12188))
