"""Submap construction and submap-to-submap alignment within a cluster.

Poses of revisited places drift relative to the first pass, which smears the
accumulated map and poisons scan-vs-map change detection. Each subcluster
(consecutive-frame run) is assumed locally consistent, so its scans fuse into
a submap expressed in the subcluster's own reference frame (the first member's
body frame). Aligning every later submap onto the first with point-to-plane
ICP yields a per-subcluster correction that is then applied to all member
poses; the first subcluster is the anchor and is never touched.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateInputError, EmptyInputError
from .geometry import (
    PointCloud,
    Pose,
    compose,
    invert,
    orthonormalize,
    transform_cloud,
    voxel_downsample,
)
from .trajectory import Cluster, ClusterPartition

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Submap:
    """Voxel-sampled union of one subcluster's scans, in its reference frame."""

    subcluster: int
    reference_frame: int
    cloud: PointCloud
    members: tuple[int, ...]


@dataclass(frozen=True)
class IcpParams:
    min_points: int = 500
    max_iterations: int = 50
    update_tolerance: float = 1e-4
    max_corr_dist: float = 2.0
    normal_neighbors: int = 20
    max_source_points: int = 20000


@dataclass(frozen=True)
class IcpResult:
    transform: Pose  # target-from-source
    residual: float  # RMS point-to-plane distance over gated matches
    iterations: int
    converged: bool


def build_submap(
    subcluster: tuple[int, ...],
    clouds: dict[int, PointCloud],
    poses: dict[int, Pose],
    voxel_size: float,
    index: int = 0,
) -> Submap:
    """Double voxel sampling: per scan after transforming to the reference
    frame, then once more over the union."""
    if not subcluster:
        raise EmptyInputError("cannot build a submap from an empty subcluster")
    ref = subcluster[0]
    world_from_ref = poses[ref]
    parts = []
    for t in subcluster:
        ref_from_t = compose(invert(world_from_ref), poses[t])
        parts.append(voxel_downsample(transform_cloud(clouds[t], ref_from_t), voxel_size).points)
    merged = PointCloud(np.vstack(parts))
    return Submap(index, ref, voxel_downsample(merged, voxel_size), tuple(subcluster))


def estimate_normals(points: np.ndarray, neighbors: int) -> np.ndarray:
    """Per-point unit normals from the smallest principal axis of k-NN patches."""
    k = min(neighbors, len(points))
    _, idx = cKDTree(points).query(points, k=k)
    patches = points[idx]  # (N, k, 3)
    centered = patches - patches.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, :, 0]


def _small_rotation(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        return np.eye(3)
    k = w / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * (kx @ kx)


def icp_align(
    source: Submap,
    target: Submap,
    params: IcpParams = IcpParams(),
    initial: Pose | None = None,
) -> IcpResult:
    """Point-to-plane ICP; returns the transform mapping source-frame points
    into the target frame.

    Correspondences are nearest neighbors gated by distance; the gate starts
    at ``max_corr_dist`` and halves whenever the residual plateaus, tightening
    the fit. Convergence is declared when the pose update step drops below
    ``update_tolerance``.
    """
    if len(source.cloud) < params.min_points or len(target.cloud) < params.min_points:
        raise DegenerateInputError(
            f"ICP needs at least {params.min_points} points per submap, got"
            f" {len(source.cloud)} source / {len(target.cloud)} target"
        )
    tgt = target.cloud.points
    normals = estimate_normals(tgt, params.normal_neighbors)
    tree = cKDTree(tgt)
    src = source.cloud.points
    if len(src) > params.max_source_points:
        # Deterministic stride subsample keeps ICP cost bounded on big submaps.
        src = src[:: int(np.ceil(len(src) / params.max_source_points))]

    transform = initial if initial is not None else Pose.identity()
    gate = params.max_corr_dist
    prev_residual = np.inf
    residual = np.inf
    for iteration in range(1, params.max_iterations + 1):
        moved = transform.apply(src)
        dist, idx = tree.query(moved)
        sel = dist <= gate
        if sel.sum() < 6:
            return IcpResult(transform, float("inf"), iteration, False)
        p, q, n = moved[sel], tgt[idx[sel]], normals[idx[sel]]
        r = np.einsum("ij,ij->i", n, p - q)
        a = np.hstack([np.cross(p, n), n])
        x, *_ = np.linalg.lstsq(a, -r, rcond=None)
        delta = Pose(_small_rotation(x[:3]), x[3:])
        transform = compose(delta, transform)
        residual = float(np.sqrt(np.mean(r * r)))
        if float(np.linalg.norm(x)) < params.update_tolerance:
            return IcpResult(transform, residual, iteration, True)
        if prev_residual - residual < 1e-3 * max(prev_residual, 1e-12):
            gate = max(gate * 0.5, 0.25)
        prev_residual = residual
    return IcpResult(transform, residual, params.max_iterations, False)


@dataclass(frozen=True)
class AlignmentRecord:
    cluster: int
    subcluster: int
    residual: float
    iterations: int
    converged: bool


def correct_cluster_poses(
    cluster: Cluster,
    submaps: list[Submap],
    poses: dict[int, Pose],
    params: IcpParams = IcpParams(),
    cluster_id: int = 0,
) -> tuple[dict[int, Pose], list[AlignmentRecord]]:
    """Align submaps 2..N onto the first and update member poses in place.

    Returns corrected world poses for the cluster's frames (anchor subcluster
    untouched) and one alignment record per ICP invocation. A non-converged
    alignment keeps the original poses: a bad correction is worse than the
    drift it was meant to fix, and later filtering absorbs the residue.
    """
    corrected = {t: poses[t] for t in cluster.frames}
    records = []
    anchor = submaps[0]
    world_from_w1 = poses[anchor.reference_frame]
    for submap in submaps[1:]:
        world_from_wn = poses[submap.reference_frame]
        initial = compose(invert(world_from_w1), world_from_wn)
        result = icp_align(submap, anchor, params, initial=initial)
        records.append(
            AlignmentRecord(
                cluster_id, submap.subcluster, result.residual, result.iterations, result.converged
            )
        )
        if not result.converged:
            log.warning(
                "cluster %d subcluster %d: ICP did not converge (residual %.3f m),"
                " keeping original poses",
                cluster_id,
                submap.subcluster,
                result.residual,
            )
            continue
        for t in submap.members:
            wn_from_t = compose(invert(world_from_wn), poses[t])
            corrected[t] = compose(world_from_w1, compose(result.transform, wn_from_t))
    return corrected, records


def correct_partition(
    partition: ClusterPartition,
    clouds: dict[int, PointCloud],
    poses: dict[int, Pose],
    voxel_size: float,
    params: IcpParams = IcpParams(),
) -> tuple[dict[int, Pose], list[AlignmentRecord]]:
    """Run submap alignment over every cluster of the partition."""
    corrected = dict(poses)
    records: list[AlignmentRecord] = []
    for cid, cluster in enumerate(partition.clusters):
        subclusters = _merge_small_subclusters(
            cluster.subclusters, clouds, params.min_points
        )
        submaps = [
            build_submap(sub, clouds, poses, voxel_size, index=i)
            for i, sub in enumerate(subclusters)
        ]
        cluster_poses, cluster_records = correct_cluster_poses(
            cluster, submaps, poses, params, cluster_id=cid
        )
        corrected.update(cluster_poses)
        records.extend(cluster_records)
    return corrected, records


def _merge_small_subclusters(subclusters, clouds, min_points) -> list[tuple[int, ...]]:
    """Fold subclusters too small for ICP into their predecessor (or successor)."""
    merged: list[list[int]] = []
    pending: list[int] = []
    for sub in subclusters:
        count = sum(len(clouds[t]) for t in sub)
        if count >= min_points:
            merged.append(list(pending) + list(sub))
            pending = []
        elif merged:
            merged[-1].extend(sub)
        else:
            pending.extend(sub)
    if pending:
        if merged:
            merged[0] = pending + merged[0]
        else:
            merged.append(pending)
    return [tuple(m) for m in merged]


def alignment_report(records: list[AlignmentRecord]) -> str:
    """Text table ``cluster n residual iterations converged``."""
    lines = ["# cluster n residual iterations converged"]
    for r in records:
        lines.append(
            f"{r.cluster} {r.subcluster} {r.residual:.6f} {r.iterations} {int(r.converged)}"
        )
    return "\n".join(lines) + "\n"
