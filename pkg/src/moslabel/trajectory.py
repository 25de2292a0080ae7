"""Trajectory clustering that prioritizes intersections and revisited places.

Frames where the heading changes rapidly mark intersections; places passed
again after a long time gap mark revisits. Both collect frames from every
pass through the same area into one cluster, whose maximal consecutive-frame
runs ("subclusters") later anchor submap alignment. Leftover frames join the
cluster closest in frame index, so the result always partitions the sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from io import StringIO

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose, yaw_of

KIND_INTERSECTION = "intersection"
KIND_REVISIT = "revisit"
KIND_LINEAR = "linear"


@dataclass(frozen=True)
class TrajectoryFrame:
    index: int
    pose: Pose
    timestamp: float
    yaw: float

    @property
    def position(self) -> np.ndarray:
        return self.pose.translation


def trajectory_from_poses(poses, timestamps) -> list[TrajectoryFrame]:
    if len(poses) != len(timestamps):
        raise ValueError("pose and timestamp counts differ")
    return [
        TrajectoryFrame(i, p, float(t), yaw_of(p))
        for i, (p, t) in enumerate(zip(poses, timestamps))
    ]


@dataclass(frozen=True)
class ClusterParams:
    yaw_window: int = 20
    yaw_threshold: float = math.radians(30.0)
    revisit_radius: float = 10.0
    min_time_gap: float = 60.0
    min_linear_len: int = 100
    intersection_merge_factor: float = 2.0


@dataclass(frozen=True)
class Cluster:
    kind: str
    frames: tuple[int, ...]
    subclusters: tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class ClusterPartition:
    clusters: tuple[Cluster, ...]
    frame_count: int

    def __post_init__(self):
        seen: list[int] = []
        for c in self.clusters:
            if decompose_subclusters(c.frames) != list(c.subclusters):
                raise ValueError("subclusters are not the maximal-run decomposition")
            seen.extend(c.frames)
        if sorted(seen) != list(range(self.frame_count)):
            raise ValueError("clusters do not partition the frame range")

    def cluster_of(self, frame: int) -> int:
        for cid, c in enumerate(self.clusters):
            if frame in c.frames:
                return cid
        raise KeyError(frame)


def _wrap_angle(a: np.ndarray) -> np.ndarray:
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def detect_turn_regions(
    frames: list[TrajectoryFrame], window: int, yaw_threshold: float
) -> list[tuple[int, int]]:
    """Maximal index ranges [start, stop) where the heading turns sharply.

    A window of ``window`` frames is flagged when the summed absolute yaw
    change across it exceeds ``yaw_threshold``; overlapping windows merge.
    """
    if window < 2:
        raise ValueError(f"window must be at least 2 frames, got {window}")
    n = len(frames)
    if n < window:
        return []
    yaws = np.array([f.yaw for f in frames])
    step = np.abs(_wrap_angle(np.diff(yaws)))
    csum = np.concatenate([[0.0], np.cumsum(step)])
    # Sum of |yaw change| over frames [i, i + window).
    turning = csum[window - 1 :] - csum[: n - window + 1] > yaw_threshold
    ranges: list[tuple[int, int]] = []
    for i in np.flatnonzero(turning):
        start, stop = int(i), int(i) + window
        if ranges and start <= ranges[-1][1]:
            ranges[-1] = (ranges[-1][0], max(ranges[-1][1], stop))
        else:
            ranges.append((start, stop))
    return ranges


def detect_revisits(
    frames: list[TrajectoryFrame], radius: float, min_time_gap: float
) -> list[list[int]]:
    """Groups of frames occupying the same place at well-separated times.

    Any two frames within ``radius`` whose timestamps differ by at least
    ``min_time_gap`` are linked; groups are the transitive closure of those
    links, so all passes through a revisited place end up together.
    """
    if radius <= 0 or min_time_gap <= 0:
        raise ValueError("radius and min_time_gap must be positive")
    if len(frames) < 2:
        return []
    positions = np.array([f.position for f in frames])
    times = np.array([f.timestamp for f in frames])
    pairs = cKDTree(positions).query_pairs(radius, output_type="ndarray")
    if pairs.size == 0:
        return []
    linked = pairs[np.abs(times[pairs[:, 0]] - times[pairs[:, 1]]) >= min_time_gap]

    parent = list(range(len(frames)))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in linked:
        parent[find(int(a))] = find(int(b))
    groups: dict[int, list[int]] = {}
    for a, b in linked:
        for i in (int(a), int(b)):
            groups.setdefault(find(i), [])
    for i in range(len(frames)):
        root = find(i)
        if root in groups:
            groups[root].append(frames[i].index)
    return sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])


def decompose_subclusters(cluster) -> list[tuple[int, ...]]:
    """Maximal runs of consecutive indices, ordered by first index."""
    indices = sorted(cluster)
    if not indices:
        raise ValueError("cannot decompose an empty cluster")
    runs, run = [], [indices[0]]
    for idx in indices[1:]:
        if idx == run[-1] + 1:
            run.append(idx)
        else:
            runs.append(tuple(run))
            run = [idx]
    runs.append(tuple(run))
    return runs


def cluster_trajectory(
    frames: list[TrajectoryFrame], params: ClusterParams = ClusterParams()
) -> ClusterPartition:
    if not frames:
        raise ValueError("need at least one trajectory frame")
    n = len(frames)
    positions = np.array([f.position for f in frames])
    assigned = np.full(n, -1, dtype=np.int64)
    proto: list[tuple[str, set[int]]] = []

    # Step 1: turn regions become intersection clusters. Regions whose mean
    # positions are close merge (multi-pass crossings), and every frame that
    # passes through the region's footprint joins, whichever pass it is on.
    turn_ranges = detect_turn_regions(frames, params.yaw_window, params.yaw_threshold)
    merge_dist = params.intersection_merge_factor * params.revisit_radius
    groups: list[list[tuple[int, int]]] = []
    for rng in turn_ranges:
        mean = positions[rng[0] : rng[1]].mean(axis=0)
        for g in groups:
            centers = [positions[a:b].mean(axis=0) for a, b in g]
            if min(np.linalg.norm(mean - c) for c in centers) <= merge_dist:
                g.append(rng)
                break
        else:
            groups.append([rng])
    tree = cKDTree(positions)
    for g in groups:
        members: set[int] = set()
        for a, b in g:
            members.update(range(a, b))
            for hits in tree.query_ball_point(positions[a:b], params.revisit_radius):
                members.update(int(h) for h in hits)
        members = {m for m in members if assigned[m] < 0}
        if members:
            for m in members:
                assigned[m] = len(proto)
            proto.append((KIND_INTERSECTION, members))

    # Step 2: revisited places that are not intersections, then long linear runs.
    remaining = [frames[i] for i in range(n) if assigned[i] < 0]
    for group in detect_revisits(remaining, params.revisit_radius, params.min_time_gap):
        members = {i for i in group if assigned[i] < 0}
        if members:
            for m in members:
                assigned[m] = len(proto)
            proto.append((KIND_REVISIT, members))
    for run in _unassigned_runs(assigned):
        if len(run) >= params.min_linear_len:
            for m in run:
                assigned[m] = len(proto)
            proto.append((KIND_LINEAR, set(run)))

    # Step 3: leftovers join the cluster with the closest frame interval
    # (ties toward the earlier cluster). A featureless trajectory becomes a
    # single linear cluster.
    if not proto:
        proto.append((KIND_LINEAR, set(range(n))))
        assigned[:] = 0
    else:
        member_cluster = {m: cid for cid, (_, ms) in enumerate(proto) for m in ms}
        anchors = np.array(sorted(member_cluster))
        for i in np.flatnonzero(assigned < 0):
            dist = np.abs(anchors - i)
            nearest = anchors[dist == dist.min()]
            cid = min(member_cluster[int(a)] for a in nearest)
            proto[cid][1].add(int(i))
            assigned[i] = cid

    order = sorted(range(len(proto)), key=lambda cid: min(proto[cid][1]))
    clusters = tuple(
        Cluster(
            proto[cid][0],
            tuple(sorted(proto[cid][1])),
            tuple(decompose_subclusters(proto[cid][1])),
        )
        for cid in order
    )
    return ClusterPartition(clusters, n)


def _unassigned_runs(assigned: np.ndarray) -> list[list[int]]:
    runs, run = [], []
    for i, cid in enumerate(assigned):
        if cid < 0:
            run.append(i)
        elif run:
            runs.append(run)
            run = []
    if run:
        runs.append(run)
    return runs


def serialize_partition(partition: ClusterPartition) -> str:
    """Text table ``frame_index cluster_id subcluster_id`` for caching."""
    rows = {}
    for cid, cluster in enumerate(partition.clusters):
        for sid, sub in enumerate(cluster.subclusters):
            for frame in sub:
                rows[frame] = (cid, sid)
    buf = StringIO()
    buf.write("# frame_index cluster_id subcluster_id\n")
    for frame in sorted(rows):
        cid, sid = rows[frame]
        buf.write(f"{frame} {cid} {sid}\n")
    return buf.getvalue()


def parse_partition(text: str, kinds: list[str] | None = None) -> ClusterPartition:
    by_cluster: dict[int, set[int]] = {}
    count = 0
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        frame, cid, _ = (int(v) for v in line.split())
        by_cluster.setdefault(cid, set()).add(frame)
        count += 1
    clusters = tuple(
        Cluster(
            kinds[cid] if kinds else KIND_LINEAR,
            tuple(sorted(members)),
            tuple(decompose_subclusters(members)),
        )
        for cid, members in sorted(by_cluster.items())
    )
    return ClusterPartition(clusters, count)
