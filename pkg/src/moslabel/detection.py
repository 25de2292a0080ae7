"""Instance-aware initial MOS annotation: cluster first, then detect.

Ground is peeled off by cell-wise plane fits, the remaining points are
grouped into instances by voxel connectivity, and each whole instance is
classified against the cluster's accumulated map: a region that is occupied
in only a small fraction of the frames that could observe it is temporarily
occupied, hence dynamic. Classifying per instance (not per point) keeps every
object's label coherent, so no half-dynamic cars come out of this stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .dataset import CLASS_DYNAMIC, CLASS_STATIC, CLASS_UNLABELED
from .errors import EmptyInputError
from .geometry import Aabb, PointCloud, Pose, voxel_keys

VERDICT_DYNAMIC = "dynamic"
VERDICT_STATIC = "static"
VERDICT_UNLABELED = "unlabeled"

_VERDICT_CLASS = {
    VERDICT_DYNAMIC: CLASS_DYNAMIC,
    VERDICT_STATIC: CLASS_STATIC,
    VERDICT_UNLABELED: CLASS_UNLABELED,
}


@dataclass(frozen=True)
class DetectParams:
    map_voxel_size: float = 1.0
    ground_cell_size: float = 10.0
    ground_lowest_fraction: float = 0.3
    ground_plane_dist: float = 0.25
    ground_min_cell_points: int = 10
    ground_max_slope: float = 0.3  # rise/run; steeper fits are walls, not ground
    ground_seed_band: float = 0.4  # meters above the cell's lowest point
    ground_consistency: float = 0.75  # max height disagreement with neighbor cells
    instance_voxel_size: float = 0.5
    min_instance_points: int = 10
    max_instance_diag: float = 15.0
    min_coverage: int = 3
    rho_dyn: float = 0.35  # occupancy ratio below which an instance is dynamic
    coverage_max_range: float = 70.0
    coverage_v_fov: float = 90.0  # degrees, total vertical aperture
    ground_clearance: float = 0.5  # meters above column ground to trust occupancy


@dataclass(frozen=True)
class Instance:
    instance_id: int
    point_indices: np.ndarray
    centroid: np.ndarray
    aabb: Aabb

    def __post_init__(self):
        idx = np.asarray(self.point_indices, dtype=np.int64)
        idx.flags.writeable = False
        object.__setattr__(self, "point_indices", idx)

    @property
    def count(self) -> int:
        return len(self.point_indices)


@dataclass(frozen=True)
class ScanAnnotation:
    """Per-point class and instance id for one (synced) scan."""

    frame: int
    classes: np.ndarray
    instance_ids: np.ndarray

    def __post_init__(self):
        cls = np.asarray(self.classes, dtype=np.uint32)
        inst = np.asarray(self.instance_ids, dtype=np.uint32)
        if cls.shape != inst.shape:
            raise ValueError("classes and instance_ids must be aligned")
        object.__setattr__(self, "classes", cls)
        object.__setattr__(self, "instance_ids", inst)

    def __len__(self) -> int:
        return len(self.classes)


def segment_ground(scan: PointCloud, params: DetectParams = DetectParams()) -> np.ndarray:
    """Boolean mask of ground points via per-cell lowest-slab plane fits.

    The xy plane is partitioned into square cells; in each cell a plane is
    least-squares fit to the lowest fraction of points, refined twice on its
    inliers (object skirts contaminate the lowest slab and tilt the first
    fit), and everything within ``ground_plane_dist`` of it is ground.
    Sparse cells borrow the plane of the nearest populated cell.
    """
    if len(scan) == 0:
        raise EmptyInputError("cannot segment an empty scan")
    pts = scan.points
    cells = np.floor(pts[:, :2] / params.ground_cell_size).astype(np.int64)
    packed = cells[:, 0] * np.int64(1 << 32) + cells[:, 1]
    order = np.argsort(packed, kind="stable")
    boundaries = np.flatnonzero(np.diff(packed[order])) + 1
    groups = np.split(order, boundaries)

    planes: dict[tuple[int, int], np.ndarray] = {}
    sparse: list[tuple[tuple[int, int], np.ndarray]] = []
    for grp in groups:
        key = (int(cells[grp[0], 0]), int(cells[grp[0], 1]))
        if len(grp) < params.ground_min_cell_points:
            sparse.append((key, grp))
            continue
        z = pts[grp, 2]
        low_n = max(3, int(np.ceil(params.ground_lowest_fraction * len(grp))))
        by_height = grp[np.argsort(z, kind="stable")]
        seed = by_height[: low_n]
        # Cap the seed slab near the lowest point: when an object dominates
        # the cell, a plain lowest-fraction slab is mostly object.
        banded = grp[z <= z.min() + params.ground_seed_band]
        if len(banded) >= 3:
            seed = banded
        coef = _fit_plane(pts, seed)
        for _ in range(2):
            resid = np.abs(
                pts[grp, 2] - (pts[grp, 0] * coef[0] + pts[grp, 1] * coef[1] + coef[2])
            )
            inliers = grp[resid <= params.ground_plane_dist]
            if len(inliers) < 3:
                break
            coef = _fit_plane(pts, inliers)
        # A cell dominated by a vertical surface fits a steep pseudo-plane
        # that would swallow the object; fall back to a neighbor's plane.
        if np.hypot(coef[0], coef[1]) <= params.ground_max_slope:
            planes[key] = coef
        else:
            sparse.append((key, grp))

    _drop_inconsistent_planes(planes, sparse, groups, cells, params)

    mask = np.zeros(len(scan), dtype=bool)
    for grp in groups:
        key = (int(cells[grp[0], 0]), int(cells[grp[0], 1]))
        if key in planes:
            coef = planes[key]
            predicted = pts[grp, 0] * coef[0] + pts[grp, 1] * coef[1] + coef[2]
            mask[grp] = np.abs(pts[grp, 2] - predicted) <= params.ground_plane_dist
    if planes:
        keys = np.array(list(planes))
        for key, grp in sparse:
            nearest = keys[np.abs(keys - np.array(key)).sum(axis=1).argmin()]
            coef = planes[tuple(nearest)]
            predicted = pts[grp, 0] * coef[0] + pts[grp, 1] * coef[1] + coef[2]
            mask[grp] = np.abs(pts[grp, 2] - predicted) <= params.ground_plane_dist
    return mask


def _drop_inconsistent_planes(planes, sparse, groups, cells, params) -> None:
    """Demote cells whose plane height disagrees with the neighborhood.

    A cell seeing only an object's top (ground hidden below the sensor's
    vertical aperture) fits a flat plane at roof height; neighbors evaluated
    at the same spot expose the offset.
    """
    if len(planes) < 2:
        return
    center = {}
    for grp in groups:
        key = (int(cells[grp[0], 0]), int(cells[grp[0], 1]))
        if key in planes:
            c = (np.array(key, dtype=float) + 0.5) * params.ground_cell_size
            center[key] = c
    rejected = []
    for key, coef in planes.items():
        cx, cy = center[key]
        mine = coef[0] * cx + coef[1] * cy + coef[2]
        others = [
            p[0] * cx + p[1] * cy + p[2]
            for k, p in planes.items()
            if k != key and max(abs(k[0] - key[0]), abs(k[1] - key[1])) <= 2
        ]
        if others and abs(mine - float(np.median(others))) > params.ground_consistency:
            rejected.append(key)
    for grp in groups:
        key = (int(cells[grp[0], 0]), int(cells[grp[0], 1]))
        if key in rejected:
            sparse.append((key, grp))
    for key in rejected:
        del planes[key]


def _fit_plane(pts: np.ndarray, idx: np.ndarray) -> np.ndarray:
    a = np.column_stack([pts[idx, 0], pts[idx, 1], np.ones(len(idx))])
    coef, *_ = np.linalg.lstsq(a, pts[idx, 2], rcond=None)
    return coef


def extract_instances(
    scan: PointCloud,
    ground_mask: np.ndarray,
    params: DetectParams = DetectParams(),
    start_id: int = 1,
) -> list[Instance]:
    """Cluster non-ground points into instances by 26-connected voxels.

    Components below the size threshold or with an oversized bounding box
    (buildings, long walls) stay background.
    """
    candidates = np.flatnonzero(~np.asarray(ground_mask, dtype=bool))
    if candidates.size == 0:
        return []
    keys = voxel_keys(scan.points[candidates], params.instance_voxel_size)
    lo = keys.min(axis=0)
    shape = keys.max(axis=0) - lo + 1
    grid = np.zeros(shape, dtype=bool)
    grid[tuple((keys - lo).T)] = True
    labeled, n_components = ndimage.label(grid, structure=np.ones((3, 3, 3)))
    comp = labeled[tuple((keys - lo).T)]

    instances = []
    next_id = start_id
    for c in range(1, n_components + 1):
        members = candidates[comp == c]
        if members.size < params.min_instance_points:
            continue
        pts = scan.points[members]
        box = Aabb(pts.min(axis=0), pts.max(axis=0))
        if box.diagonal > params.max_instance_diag:
            continue
        instances.append(Instance(next_id, members, pts.mean(axis=0), box))
        next_id += 1
    return instances


@dataclass(frozen=True)
class StaticMapModel:
    """Accumulated voxel map with per-voxel persistence evidence.

    ``hits`` counts frames that actually placed a point in the voxel.
    ``coverage`` counts frames that observed the voxel's vertical column
    (a point anywhere in the column, usually the ground at its base) while
    the voxel was within sensing range and aperture. Column observation is
    what makes absence meaningful: a frame that sampled the road under a
    voxel but put nothing into the voxel is evidence the voxel was empty.
    ``column_ground`` is the lowest accumulated z per column, used to ignore
    ground-contaminated voxels during classification.
    """

    voxel_size: float
    keys: np.ndarray
    hits: np.ndarray
    coverage: np.ndarray
    column_keys: np.ndarray
    column_ground: np.ndarray
    _packed: np.ndarray = field(repr=False, default=None)
    _order: np.ndarray = field(repr=False, default=None)
    _col_packed: np.ndarray = field(repr=False, default=None)
    _col_order: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "keys", np.asarray(self.keys, dtype=np.int64).reshape(-1, 3))
        object.__setattr__(self, "hits", np.asarray(self.hits, dtype=np.int64))
        object.__setattr__(self, "coverage", np.asarray(self.coverage, dtype=np.int64))
        object.__setattr__(self, "column_keys", np.asarray(self.column_keys, dtype=np.int64).reshape(-1, 2))
        object.__setattr__(self, "column_ground", np.asarray(self.column_ground, dtype=np.float64))
        packed = _pack_keys(self.keys)
        order = np.argsort(packed)
        object.__setattr__(self, "_packed", packed[order])
        object.__setattr__(self, "_order", order)
        col_packed = _pack_columns(self.column_keys)
        col_order = np.argsort(col_packed)
        object.__setattr__(self, "_col_packed", col_packed[col_order])
        object.__setattr__(self, "_col_order", col_order)

    def lookup(self, keys: np.ndarray) -> np.ndarray:
        """Row indices for voxel keys; -1 where the voxel is unoccupied."""
        packed = _pack_keys(keys)
        if len(self._packed) == 0:
            return np.full(len(packed), -1, dtype=np.int64)
        pos = np.clip(np.searchsorted(self._packed, packed), 0, len(self._packed) - 1)
        return np.where(self._packed[pos] == packed, self._order[pos], -1)

    def ground_of(self, column_keys: np.ndarray) -> np.ndarray:
        """Lowest accumulated z per (ix, iy) column; +inf for unknown columns."""
        packed = _pack_columns(column_keys)
        if len(self._col_packed) == 0:
            return np.full(len(packed), np.inf)
        pos = np.clip(np.searchsorted(self._col_packed, packed), 0, len(self._col_packed) - 1)
        found = self._col_packed[pos] == packed
        return np.where(found, self.column_ground[self._col_order[pos]], np.inf)


_PACK_OFFSET = np.int64(1 << 20)


def _pack_keys(keys: np.ndarray) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64) + _PACK_OFFSET
    return (k[:, 0] << np.int64(42)) | (k[:, 1] << np.int64(21)) | k[:, 2]


def _pack_columns(keys: np.ndarray) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64) + _PACK_OFFSET
    return (k[:, 0] << np.int64(21)) | k[:, 1]


def build_static_map(
    clouds: dict[int, PointCloud],
    poses: dict[int, Pose],
    params: DetectParams = DetectParams(),
) -> StaticMapModel:
    """Accumulate one cluster's scans (corrected poses) into a counted grid."""
    frames = sorted(clouds)
    per_frame = []
    column_sets = {}
    col_min: dict[int, float] = {}
    for t in frames:
        world = poses[t].apply(clouds[t].points)
        keys = voxel_keys(world, params.map_voxel_size)
        per_frame.append(np.unique(_pack_keys(keys)))
        cols = _pack_columns(keys[:, :2])
        order = np.argsort(cols, kind="stable")
        uniq, starts = np.unique(cols[order], return_index=True)
        z_sorted = world[order, 2]
        mins = np.minimum.reduceat(z_sorted, starts)
        for c, z in zip(uniq.tolist(), mins.tolist()):
            if z < col_min.get(c, np.inf):
                col_min[c] = z
        column_sets[t] = uniq

    stacked = np.concatenate(per_frame) if per_frame else np.zeros(0, dtype=np.int64)
    packed_keys, hits = np.unique(stacked, return_counts=True)
    keys = np.column_stack(
        [
            (packed_keys >> np.int64(42)) - _PACK_OFFSET,
            ((packed_keys >> np.int64(21)) & np.int64((1 << 21) - 1)) - _PACK_OFFSET,
            (packed_keys & np.int64((1 << 21) - 1)) - _PACK_OFFSET,
        ]
    )
    centers = (keys + 0.5) * params.map_voxel_size
    voxel_cols = _pack_columns(keys[:, :2])

    coverage = np.zeros(len(keys), dtype=np.int64)
    half_v = np.radians(params.coverage_v_fov) / 2.0
    for t in frames:
        origin = poses[t].translation
        delta = centers - origin
        horiz = np.hypot(delta[:, 0], delta[:, 1])
        rng = np.linalg.norm(delta, axis=1)
        elevation = np.arctan2(delta[:, 2], horiz)
        geometric = (rng <= params.coverage_max_range) & (np.abs(elevation) <= half_v)
        cols = column_sets[t]
        if len(cols):
            pos = np.clip(np.searchsorted(cols, voxel_cols), 0, len(cols) - 1)
            observed = cols[pos] == voxel_cols
        else:
            observed = np.zeros(len(keys), dtype=bool)
        coverage += geometric & observed
    coverage = np.maximum(coverage, hits)

    col_packed = np.array(sorted(col_min), dtype=np.int64)
    col_keys = np.column_stack(
        [
            (col_packed >> np.int64(21)) - _PACK_OFFSET,
            (col_packed & np.int64((1 << 21) - 1)) - _PACK_OFFSET,
        ]
    )
    col_ground = np.array([col_min[c] for c in col_packed.tolist()])
    return StaticMapModel(
        params.map_voxel_size, keys, hits, coverage, col_keys, col_ground
    )


def classify_instance(
    instance: Instance,
    world_points: np.ndarray,
    static_map: StaticMapModel,
    params: DetectParams = DetectParams(),
) -> str:
    """Verdict for one instance from its voxels' occupancy persistence.

    The occupancy ratio is hits/coverage averaged over the instance's voxels
    with enough covering frames; a temporarily occupied region scores low.
    Voxels too close to the column's ground level are skipped (they stay
    occupied by the road itself); an instance with nothing above that band is
    terrain clutter and stays static, while one whose voxels are all
    under-covered yields no verdict.
    """
    keys = np.unique(
        voxel_keys(world_points[instance.point_indices], static_map.voxel_size), axis=0
    )
    ground = static_map.ground_of(keys[:, :2])
    clear = keys[:, 2] * static_map.voxel_size >= ground + params.ground_clearance
    if not clear.any():
        return VERDICT_STATIC
    rows = static_map.lookup(keys[clear])
    rows = rows[rows >= 0]
    if rows.size == 0:
        return VERDICT_UNLABELED
    covered = rows[static_map.coverage[rows] >= params.min_coverage]
    if covered.size == 0:
        return VERDICT_UNLABELED
    ratio = static_map.hits[covered] / static_map.coverage[covered]
    return VERDICT_DYNAMIC if float(ratio.mean()) < params.rho_dyn else VERDICT_STATIC


def annotate_scan(
    scan: PointCloud,
    frame: int,
    instances: list[Instance],
    verdicts: dict[int, str],
    ground_mask: np.ndarray,
) -> ScanAnnotation:
    """Fold instance verdicts into per-point labels; everything else is static."""
    classes = np.full(len(scan), CLASS_STATIC, dtype=np.uint32)
    instance_ids = np.zeros(len(scan), dtype=np.uint32)
    for inst in instances:
        classes[inst.point_indices] = _VERDICT_CLASS[verdicts[inst.instance_id]]
        instance_ids[inst.point_indices] = inst.instance_id
    return ScanAnnotation(frame, classes, instance_ids)


@dataclass(frozen=True)
class FrameDetection:
    """Everything the tracking stage needs about one annotated frame."""

    annotation: ScanAnnotation
    instances: tuple[Instance, ...]
    verdicts: dict[int, str]
    pose: Pose
    ground: np.ndarray | None = None


def detect_cluster(
    clouds: dict[int, PointCloud],
    poses: dict[int, Pose],
    params: DetectParams = DetectParams(),
    start_id: int = 1,
) -> dict[int, FrameDetection]:
    """Run ground removal, instance extraction, and classification for one
    cluster's frames against the cluster's own static map."""
    static_map = build_static_map(clouds, poses, params)
    detections: dict[int, FrameDetection] = {}
    next_id = start_id
    for t in sorted(clouds):
        scan = clouds[t]
        if len(scan) == 0:
            ann = ScanAnnotation(t, np.zeros(0, np.uint32), np.zeros(0, np.uint32))
            detections[t] = FrameDetection(ann, (), {}, poses[t], np.zeros(0, bool))
            continue
        ground = segment_ground(scan, params)
        instances = extract_instances(scan, ground, params, start_id=next_id)
        next_id += len(instances)
        world = poses[t].apply(scan.points)
        verdicts = {
            inst.instance_id: classify_instance(inst, world, static_map, params)
            for inst in instances
        }
        annotation = annotate_scan(scan, t, instances, verdicts, ground)
        detections[t] = FrameDetection(annotation, tuple(instances), verdicts, poses[t], ground)
    return detections
