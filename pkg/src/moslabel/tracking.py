"""Tracking-based false-label filtering with bounding-box gap augmentation.

Map-discrepancy detection over-triggers: anything transient-looking gets
flagged. Linking dynamic instances across frames separates real movers from
static clutter (a track that never goes anywhere is not a moving object), and
interpolating boxes into frames where a confirmed mover was missed wins back
the false negatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import CLASS_DYNAMIC, CLASS_STATIC
from .detection import FrameDetection, ScanAnnotation, VERDICT_DYNAMIC
from .geometry import Aabb, PointCloud, Pose, points_in_box

STATUS_CONFIRMED = "confirmed-moving"
STATUS_REJECTED = "rejected-static"
STATUS_PENDING = "pending"


@dataclass(frozen=True)
class TrackParams:
    max_assoc_dist: float = 2.0
    max_gap: int = 5
    min_displacement: float = 1.0
    min_track_len: int = 3
    box_pad: float = 0.2


@dataclass(frozen=True)
class Observation:
    frame: int
    instance_id: int
    centroid: np.ndarray  # world frame
    aabb: Aabb  # world frame


@dataclass
class Track:
    track_id: int
    observations: list[Observation] = field(default_factory=list)
    status: str = STATUS_PENDING

    @property
    def gaps(self) -> list[tuple[int, int]]:
        """Frame ranges strictly between consecutive observations."""
        out = []
        for a, b in zip(self.observations, self.observations[1:]):
            if b.frame > a.frame + 1:
                out.append((a.frame + 1, b.frame))
        return out

    def predict(self, frame: int) -> np.ndarray:
        last = self.observations[-1]
        if len(self.observations) < 2:
            return last.centroid
        prev = self.observations[-2]
        velocity = (last.centroid - prev.centroid) / (last.frame - prev.frame)
        return last.centroid + velocity * (frame - last.frame)


@dataclass(frozen=True)
class AugmentedBox:
    frame: int
    aabb: Aabb
    track_id: int
    instance_id: int
    fraction: float  # interpolation parameter in (0, 1)


def _world_aabb(box: Aabb, pose: Pose) -> Aabb:
    lo, hi = box.min_corner, box.max_corner
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    world = pose.apply(corners)
    return Aabb(world.min(axis=0), world.max(axis=0))


def associate_tracks(
    detections: dict[int, FrameDetection], params: TrackParams = TrackParams()
) -> list[Track]:
    """Greedy nearest-centroid association with constant-velocity prediction.

    Only dynamic-verdict instances are tracked. Unmatched detections open new
    tracks; a track idle for more than ``max_gap`` frames is closed.
    """
    active: list[Track] = []
    finished: list[Track] = []
    next_track = 1
    for frame in sorted(detections):
        det = detections[frame]
        still_active = []
        for tr in active:
            if frame - tr.observations[-1].frame > params.max_gap:
                finished.append(tr)
            else:
                still_active.append(tr)
        active = still_active

        candidates = [
            Observation(
                frame,
                inst.instance_id,
                det.pose.apply(inst.centroid),
                _world_aabb(inst.aabb, det.pose),
            )
            for inst in det.instances
            if det.verdicts[inst.instance_id] == VERDICT_DYNAMIC
        ]
        pairs = []
        for ti, tr in enumerate(active):
            predicted = tr.predict(frame)
            for ci, obs in enumerate(candidates):
                dist = float(np.linalg.norm(obs.centroid - predicted))
                if dist <= params.max_assoc_dist:
                    pairs.append((dist, ti, ci))
        used_tracks: set[int] = set()
        used_candidates: set[int] = set()
        for dist, ti, ci in sorted(pairs):
            if ti in used_tracks or ci in used_candidates:
                continue
            active[ti].observations.append(candidates[ci])
            used_tracks.add(ti)
            used_candidates.add(ci)
        for ci, obs in enumerate(candidates):
            if ci not in used_candidates:
                active.append(Track(next_track, [obs]))
                next_track += 1
    return sorted(finished + active, key=lambda tr: tr.track_id)


def judge_tracks(tracks: list[Track], params: TrackParams = TrackParams()) -> None:
    """Confirm tracks that actually travel; reject short or stationary ones.

    Displacement is the farthest any observation strays from the first one,
    so a jittering parked object stays below threshold however long it lives.
    """
    for tr in tracks:
        start = tr.observations[0].centroid
        displacement = max(
            float(np.linalg.norm(obs.centroid - start)) for obs in tr.observations
        )
        if len(tr.observations) < params.min_track_len or displacement < params.min_displacement:
            tr.status = STATUS_REJECTED
        else:
            tr.status = STATUS_CONFIRMED


def augment_lost_boxes(
    track: Track, params: TrackParams = TrackParams()
) -> list[AugmentedBox]:
    """Interpolate boxes into a confirmed track's gap frames.

    The box centroid moves linearly between the bracketing observations; its
    extents are the component-wise union of theirs plus padding, keeping all
    of the object inside even as the silhouette changes.
    """
    boxes = []
    for a, b in zip(track.observations, track.observations[1:]):
        if b.frame <= a.frame + 1:
            continue
        extent = np.maximum(a.aabb.extents, b.aabb.extents) / 2.0 + params.box_pad
        # No padding below the observed underside: padding downward would
        # push the box into the road and relabel ground points.
        floor = min(a.aabb.min_corner[2], b.aabb.min_corner[2])
        for g in range(a.frame + 1, b.frame):
            lam = (g - a.frame) / (b.frame - a.frame)
            center = (1.0 - lam) * a.centroid + lam * b.centroid
            lo = center - extent
            lo[2] = max(lo[2], floor)
            boxes.append(
                AugmentedBox(
                    g, Aabb(lo, center + extent), track.track_id, a.instance_id, lam
                )
            )
    return boxes


def filter_labels(
    detections: dict[int, FrameDetection],
    tracks: list[Track],
    augmented: list[AugmentedBox],
    clouds: dict[int, PointCloud],
) -> dict[int, ScanAnnotation]:
    """Apply track verdicts and augmented boxes to the per-frame annotations.

    Points of rejected tracks flip to static, confirmed tracks stay dynamic,
    and points falling inside an augmented box become dynamic under the
    track's instance id. Nothing outside those sets changes.
    """
    status_by_obs: dict[tuple[int, int], str] = {}
    for tr in tracks:
        for obs in tr.observations:
            status_by_obs[(obs.frame, obs.instance_id)] = tr.status
    boxes_by_frame: dict[int, list[AugmentedBox]] = {}
    for box in augmented:
        boxes_by_frame.setdefault(box.frame, []).append(box)

    refined: dict[int, ScanAnnotation] = {}
    for frame, det in detections.items():
        classes = det.annotation.classes.copy()
        instance_ids = det.annotation.instance_ids.copy()
        for inst in det.instances:
            status = status_by_obs.get((frame, inst.instance_id))
            if status == STATUS_REJECTED:
                classes[inst.point_indices] = CLASS_STATIC
        frame_boxes = boxes_by_frame.get(frame, ())
        if frame_boxes:
            world = det.pose.apply(clouds[frame].points)
            eligible = classes != CLASS_DYNAMIC
            if det.ground is not None and len(det.ground):
                # Recover missed object points only; the road under an
                # interpolated box is not a lost detection.
                eligible &= ~det.ground
            for box in frame_boxes:
                grab = points_in_box(world, box.aabb) & eligible
                classes[grab] = CLASS_DYNAMIC
                instance_ids[grab] = box.instance_id
        refined[frame] = ScanAnnotation(frame, classes, instance_ids)
    return refined


def track_dump(tracks: list[Track]) -> str:
    """Text table ``track_id frame cx cy cz status`` for the review UI."""
    lines = ["# track_id frame cx cy cz status"]
    for tr in tracks:
        for obs in tr.observations:
            c = obs.centroid
            lines.append(f"{tr.track_id} {obs.frame} {c[0]:.4f} {c[1]:.4f} {c[2]:.4f} {tr.status}")
    return "\n".join(lines) + "\n"
