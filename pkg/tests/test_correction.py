import numpy as np
import pytest

from moslabel.correction import (
    IcpParams,
    Submap,
    build_submap,
    correct_cluster_poses,
    correct_partition,
    icp_align,
)
from moslabel.errors import DegenerateInputError, EmptyInputError
from moslabel.geometry import PointCloud, Pose, compose, invert, rot_z, translate, transform_cloud
from moslabel.trajectory import Cluster, ClusterPartition, decompose_subclusters


def structured_scene(rng, n=3000):
    """Ground patch plus two walls and a box: enough structure to pin all DOF."""
    ground = np.column_stack(
        [rng.uniform(-20, 20, n), rng.uniform(-20, 20, n), np.zeros(n)]
    )
    wall_x = np.column_stack(
        [np.full(n // 3, 10.0), rng.uniform(-20, 20, n // 3), rng.uniform(0, 4, n // 3)]
    )
    wall_y = np.column_stack(
        [rng.uniform(-20, 20, n // 3), np.full(n // 3, -12.0), rng.uniform(0, 4, n // 3)]
    )
    box = np.column_stack(
        [rng.uniform(-3, -1, n // 4), rng.uniform(4, 6, n // 4), rng.uniform(0, 2, n // 4)]
    )
    return PointCloud(np.vstack([ground, wall_x, wall_y, box]))


def as_submap(cloud, index=0, ref=0, members=(0,)):
    return Submap(index, ref, cloud, tuple(members))


class TestBuildSubmap:
    def test_single_frame_count(self):
        rng = np.random.default_rng(0)
        cloud = structured_scene(rng, 900)
        clouds = {4: cloud}
        poses = {4: Pose.identity()}
        submap = build_submap((4,), clouds, poses, 0.2)
        # outer pass over an already-sampled cloud keeps the count
        from moslabel.geometry import voxel_downsample

        assert len(submap.cloud) == len(voxel_downsample(cloud, 0.2))
        assert submap.reference_frame == 4

    def test_duplicate_frames_collapse(self):
        rng = np.random.default_rng(1)
        cloud = structured_scene(rng, 900)
        clouds = {0: cloud, 1: cloud}
        poses = {0: Pose.identity(), 1: Pose.identity()}
        single = build_submap((0,), clouds, poses, 0.2)
        double = build_submap((0, 1), clouds, poses, 0.2)
        assert len(double.cloud) == len(single.cloud)

    def test_disjoint_geometry_adds_counts(self):
        # Two frames, each a distinct wall, poses 10 m apart viewing
        # non-overlapping voxel sets: union count is the exact sum.
        a = PointCloud(
            np.column_stack([np.arange(100) * 0.5, np.zeros(100), np.zeros(100)])
        )
        b = PointCloud(
            np.column_stack([np.arange(100) * 0.5, np.full(100, 100.0), np.zeros(100)])
        )
        clouds = {0: a, 1: b}
        poses = {0: Pose.identity(), 1: translate(0, 300.0, 0)}
        submap = build_submap((0, 1), clouds, poses, 0.2)
        single_a = build_submap((0,), clouds, poses, 0.2)
        single_b = build_submap((1,), {1: b}, {1: Pose.identity()}, 0.2)
        assert len(submap.cloud) == len(single_a.cloud) + len(single_b.cloud)

    def test_empty_rejected(self):
        with pytest.raises(EmptyInputError):
            build_submap((), {}, {}, 0.2)


class TestIcpAlign:
    def test_identity_on_same_cloud(self):
        rng = np.random.default_rng(2)
        cloud = structured_scene(rng)
        result = icp_align(as_submap(cloud), as_submap(cloud))
        assert result.converged
        assert np.abs(result.transform.matrix() - np.eye(4)).max() < 1e-6

    def test_recovers_known_transform(self):
        rng = np.random.default_rng(3)
        cloud = structured_scene(rng)
        truth = compose(rot_z(np.radians(5.0)), translate(0.3, 0.0, 0.0))
        target = as_submap(transform_cloud(cloud, truth))
        result = icp_align(as_submap(cloud), target)
        assert result.converged
        err_t = np.linalg.norm(result.transform.translation - truth.translation)
        rel = result.transform.rotation.T @ truth.rotation
        err_r = np.degrees(np.arccos(np.clip((np.trace(rel) - 1) / 2, -1, 1)))
        assert err_t <= 0.05
        assert err_r <= 0.5

    def test_min_points_guard(self):
        cloud = PointCloud(np.random.default_rng(4).normal(size=(50, 3)))
        with pytest.raises(DegenerateInputError):
            icp_align(as_submap(cloud), as_submap(cloud), IcpParams(min_points=500))

    def test_error_decreases_with_perturbation(self):
        # Sanity curve: under a fixed, scarce iteration budget and a blind
        # identity start, larger injected offsets are recovered less.
        rng = np.random.default_rng(5)
        cloud = structured_scene(rng)
        errors = []
        for magnitude in (2.0, 1.0, 0.5):
            truth = compose(rot_z(np.radians(4.0)), translate(magnitude, magnitude / 2, 0.0))
            target = as_submap(transform_cloud(cloud, truth))
            result = icp_align(as_submap(cloud), target, IcpParams(max_iterations=2))
            errors.append(np.linalg.norm(result.transform.translation - truth.translation))
        assert errors[0] >= errors[1] >= errors[2]


def _cluster_fixture(rng, n_runs, frames_per_run, drift=None):
    """A revisited scene: the same structure observed in n_runs separate runs."""
    scene = structured_scene(rng, 2500)
    clouds, poses, frames = {}, {}, []
    truth = {}
    t = 0
    for run in range(n_runs):
        for k in range(frames_per_run):
            body = translate(k * 0.5, run * 0.2, 0.0)
            truth[t] = body
            stored = body
            if drift is not None and run > 0:
                stored = compose(translate(*drift), body)
            clouds[t] = transform_cloud(scene, invert(body))
            poses[t] = stored
            frames.append(t)
            t += 1
        t += 5  # index gap between runs
    return clouds, poses, truth, frames


class TestCorrectClusterPoses:
    def test_single_subcluster_no_icp(self):
        rng = np.random.default_rng(6)
        clouds, poses, truth, frames = _cluster_fixture(rng, 1, 4)
        cluster = Cluster("revisit", tuple(frames), tuple(decompose_subclusters(frames)))
        submaps = [build_submap(sub, clouds, poses, 0.2, i) for i, sub in enumerate(cluster.subclusters)]
        corrected, records = correct_cluster_poses(cluster, submaps, poses)
        assert records == []
        for t in frames:
            assert (corrected[t].matrix() == poses[t].matrix()).all()

    def test_three_subclusters_two_icp_calls(self):
        rng = np.random.default_rng(7)
        clouds, poses, truth, frames = _cluster_fixture(rng, 3, 4)
        cluster = Cluster("revisit", tuple(frames), tuple(decompose_subclusters(frames)))
        submaps = [build_submap(sub, clouds, poses, 0.2, i) for i, sub in enumerate(cluster.subclusters)]
        _, records = correct_cluster_poses(cluster, submaps, poses, IcpParams(min_points=100))
        assert len(records) == 2

    def test_drift_recovery(self):
        rng = np.random.default_rng(8)
        clouds, poses, truth, frames = _cluster_fixture(rng, 2, 5, drift=(0.4, 0.0, 0.0))
        cluster = Cluster("revisit", tuple(frames), tuple(decompose_subclusters(frames)))
        submaps = [build_submap(sub, clouds, poses, 0.2, i) for i, sub in enumerate(cluster.subclusters)]
        corrected, records = correct_cluster_poses(cluster, submaps, poses, IcpParams(min_points=100))
        assert all(r.converged for r in records)
        errs = [
            np.linalg.norm(corrected[t].translation - truth[t].translation) for t in frames
        ]
        assert max(errs) <= 0.05

    def test_anchor_untouched_bit_exact(self):
        rng = np.random.default_rng(9)
        clouds, poses, truth, frames = _cluster_fixture(rng, 2, 5, drift=(0.3, 0.1, 0.0))
        cluster = Cluster("revisit", tuple(frames), tuple(decompose_subclusters(frames)))
        submaps = [build_submap(sub, clouds, poses, 0.2, i) for i, sub in enumerate(cluster.subclusters)]
        corrected, _ = correct_cluster_poses(cluster, submaps, poses, IcpParams(min_points=100))
        for t in cluster.subclusters[0]:
            assert (corrected[t].rotation == poses[t].rotation).all()
            assert (corrected[t].translation == poses[t].translation).all()


class TestCorrectPartition:
    def _full_partition(self, rng, clouds, poses, frames):
        """Wrap the revisited frames in one cluster and pad the index gaps
        with singleton linear clusters so the partition is exhaustive."""
        n = max(frames) + 1
        missing = sorted(set(range(n)) - set(frames))
        filler = structured_scene(rng, 1200)
        for t in missing:
            clouds[t] = filler
            poses[t] = Pose.identity()
        clusters = (
            Cluster("revisit", tuple(frames), tuple(decompose_subclusters(frames))),
        ) + tuple(Cluster("linear", (t,), ((t,),)) for t in missing)
        return ClusterPartition(tuple(sorted(clusters, key=lambda c: c.frames[0])), n)

    def test_icp_count_matches_subclusters(self):
        rng = np.random.default_rng(10)
        clouds, poses, truth, frames = _cluster_fixture(rng, 3, 4)
        partition = self._full_partition(rng, clouds, poses, frames)
        corrected, records = correct_partition(
            partition, clouds, poses, 0.2, IcpParams(min_points=100)
        )
        expected = sum(len(c.subclusters) - 1 for c in partition.clusters)
        assert len(records) == expected

    def test_idempotent_within_half_voxel(self):
        rng = np.random.default_rng(11)
        voxel = 0.2
        clouds, poses, truth, frames = _cluster_fixture(rng, 2, 5, drift=(0.4, 0.0, 0.0))
        partition = self._full_partition(rng, clouds, poses, frames)
        once, _ = correct_partition(partition, clouds, poses, voxel, IcpParams(min_points=100))
        twice, _ = correct_partition(partition, clouds, once, voxel, IcpParams(min_points=100))
        moves = [
            np.linalg.norm(twice[t].translation - once[t].translation) for t in frames
        ]
        assert max(moves) < voxel / 2
