import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moslabel import dataset, sync
from moslabel.dataset import CLASS_UNLABELED, SENSOR_IDS, pack_labels
from moslabel.errors import SyncGapError
from moslabel.geometry import PointCloud, Pose, translate


def _write_sensor(root, sensor, times, points_per_frame, poses=None, extrinsic=None):
    for i, pts in enumerate(points_per_frame):
        cloud = PointCloud(np.asarray(pts, dtype=np.float32).reshape(-1, 3))
        dataset.write_scan(cloud, root / sensor / dataset.SCAN_DIR / f"{i:06d}.bin")
    dataset.write_timestamps(times, root / sensor / "times.txt")
    poses = poses or [Pose.identity()] * len(times)
    dataset.write_poses(poses, root / sensor / "poses.txt")


def _manifest(tmp_path, times_by_sensor, extrinsics=None, points=None):
    extrinsics = extrinsics or {s: Pose.identity() for s in SENSOR_IDS}
    for sensor in SENSOR_IDS:
        times = times_by_sensor[sensor]
        pts = points.get(sensor) if points else [[[1.0, 0, 0]]] * len(times)
        _write_sensor(tmp_path, sensor, times, pts)
        dataset.write_calib(extrinsics, tmp_path / sensor / "calib.txt")
    return dataset.load_manifest(tmp_path)


class TestMatchFrames:
    def test_nearest(self, tmp_path):
        times = {s: [9.40, 9.95, 10.55] for s in SENSOR_IDS}
        times["ouster"] = [10.00]
        manifest = _manifest(tmp_path, times)
        quad = sync.match_frames(manifest, 0, max_sync_gap=1.0)
        assert quad.frames["velodyne"] == 1
        assert quad.timestamps["velodyne"] == pytest.approx(9.95)

    def test_tie_goes_earlier(self, tmp_path):
        times = {s: [9.90, 10.10] for s in SENSOR_IDS}
        times["ouster"] = [10.00]
        manifest = _manifest(tmp_path, times)
        quad = sync.match_frames(manifest, 0, max_sync_gap=1.0)
        assert quad.frames["aeva"] == 0

    def test_gap_error_names_sensor(self, tmp_path):
        times = {s: [10.00] for s in SENSOR_IDS}
        times["velodyne"] = [10.30]
        manifest = _manifest(tmp_path, times)
        with pytest.raises(SyncGapError, match="velodyne"):
            sync.match_frames(manifest, 0, max_sync_gap=0.15)


class TestMergeScans:
    def test_single_points_identity_extrinsics(self, tmp_path):
        times = {s: [10.0] for s in SENSOR_IDS}
        manifest = _manifest(tmp_path, times)
        quad = sync.match_frames(manifest, 0, max_sync_gap=1.0)
        merged = sync.merge_scans(quad, manifest, 0)
        assert len(merged.cloud) == 4
        # fixed sensor order with per-point provenance
        assert merged.provenance[:, 0].tolist() == [0, 1, 2, 3]
        assert merged.provenance[:, 2].tolist() == [0, 0, 0, 0]

    def test_empty_sensor_scan(self, tmp_path):
        times = {s: [10.0] for s in SENSOR_IDS}
        points = {s: [[[1.0, 0, 0]]] for s in SENSOR_IDS}
        points["livox"] = [np.zeros((0, 3))]
        manifest = _manifest(tmp_path, times, points=points)
        quad = sync.match_frames(manifest, 0, max_sync_gap=1.0)
        merged = sync.merge_scans(quad, manifest, 0)
        assert len(merged.cloud) == 3

    def test_extrinsic_applied(self, tmp_path):
        times = {s: [10.0] for s in SENSOR_IDS}
        extrinsics = {s: Pose.identity() for s in SENSOR_IDS}
        extrinsics["aeva"] = translate(0, 0, 0.5)
        points = {s: [[[1.0, 0, 0]]] for s in SENSOR_IDS}
        points["aeva"] = [[[0.0, 0.0, 0.0]]]
        manifest = _manifest(tmp_path, times, extrinsics=extrinsics, points=points)
        quad = sync.match_frames(manifest, 0, max_sync_gap=1.0)
        merged = sync.merge_scans(quad, manifest, 0)
        np.testing.assert_allclose(merged.cloud.points[0], [0, 0, 0.5])

    def test_size_is_sum_of_members(self, demo_bundle):
        bundle_dir, bundle, _ = demo_bundle
        manifest = dataset.load_manifest(bundle_dir)
        quad = sync.match_frames(manifest, 3)
        merged = sync.merge_scans(quad, manifest, 3)
        expected = sum(
            len(bundle.sensors[s].clouds[quad.frames[s]]) for s in SENSOR_IDS
        )
        assert len(merged.cloud) == expected

    def test_provenance_bijection(self, demo_bundle):
        bundle_dir, _, _ = demo_bundle
        manifest = dataset.load_manifest(bundle_dir)
        quad = sync.match_frames(manifest, 5)
        merged = sync.merge_scans(quad, manifest, 5)
        rows = {tuple(r) for r in merged.provenance}
        assert len(rows) == len(merged.cloud)


class TestSplitLabels:
    def _merged(self, tmp_path):
        times = {s: [10.0] for s in SENSOR_IDS}
        points = {s: [[[1.0, 0, 0], [2.0, 0, 0]]] for s in SENSOR_IDS}
        manifest = _manifest(tmp_path, times, points=points)
        quad = sync.match_frames(manifest, 0, max_sync_gap=1.0)
        merged = sync.merge_scans(quad, manifest, 0)
        counts = {(s, 0): 2 for s in SENSOR_IDS}
        return merged, counts

    def test_all_static(self, tmp_path):
        merged, counts = self._merged(tmp_path)
        labels = pack_labels([9] * len(merged.cloud))
        split = sync.split_labels(merged, labels, counts)
        for sensor in SENSOR_IDS:
            assert (split[sensor][0] == 9).all()

    def test_single_dynamic_routed(self, tmp_path):
        merged, counts = self._merged(tmp_path)
        labels = pack_labels([9] * len(merged.cloud))
        velo_rows = np.flatnonzero(merged.provenance[:, 0] == 3)
        target = velo_rows[1]
        labels[target] = 251
        split = sync.split_labels(merged, labels, counts)
        record = merged.provenance[target, 2]
        assert split["velodyne"][0][record] == 251

    def test_unselected_records_unlabeled(self, tmp_path):
        merged, counts = self._merged(tmp_path)
        counts = {k: v + 1 for k, v in counts.items()}  # pretend a dropped record
        labels = pack_labels([9] * len(merged.cloud))
        split = sync.split_labels(merged, labels, counts)
        for sensor in SENSOR_IDS:
            assert split[sensor][0][-1] == CLASS_UNLABELED

    def test_length_mismatch(self, tmp_path):
        merged, counts = self._merged(tmp_path)
        with pytest.raises(ValueError):
            sync.split_labels(merged, pack_labels([9]), counts)


@given(seed=st.integers(0, 10_000))
@settings(max_examples=100, deadline=None)
def test_round_trip_identity_property(seed):
    """Splitting labels and re-merging reproduces them exactly."""
    rng = np.random.default_rng(seed)
    n_per = rng.integers(1, 30, size=4)
    prov_rows, counts = [], {}
    for sensor_idx, n in enumerate(n_per):
        sensor = SENSOR_IDS[sensor_idx]
        frame = int(rng.integers(0, 3))
        counts[(sensor, frame)] = int(n) + int(rng.integers(0, 4))
        for record in range(int(n)):
            prov_rows.append((sensor_idx, frame, record))
    prov = np.array(prov_rows, dtype=np.int64)
    cloud = PointCloud(rng.normal(size=(len(prov), 3)))
    synced = sync.SyncedScan(0, cloud, prov, Pose.identity())
    labels = pack_labels(
        rng.choice([0, 9, 251], size=len(prov)), rng.integers(0, 50, size=len(prov))
    )
    split = sync.split_labels(synced, labels, counts)
    back = sync.remerge_labels(synced, split)
    assert (back == labels).all()
