"""Persistent object landmarks.

Objects are voxel-downsampled point clouds in the world frame.  Each object's
pose sits at the centroid of its points with axes aligned to the world at
creation; the rotation is never re-estimated from geometry (only the pose
graph may move it).
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from .assoc import Detection, averaged_label_dist
from .geom import Pose, inverse, transform_point

VOXEL_SIZE = 0.02


class EmptyGeometryError(ValueError):
    """No valid depth under a detection mask."""


@dataclass(frozen=True)
class CameraModel:
    fx: float = 80.0
    fy: float = 80.0
    cx: float = 63.5
    cy: float = 47.5
    width: int = 128
    height: int = 96

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def pixel_rays(self) -> np.ndarray:
        """Unnormalised camera-frame ray directions (z = 1), shape (H, W, 3)."""
        return _pixel_rays(self)

    def backproject(self, depth, mask=None) -> np.ndarray:
        """Camera-frame points for pixels with valid depth (optionally inside ``mask``)."""
        depth = np.asarray(depth, dtype=float)
        valid = np.isfinite(depth) & (depth > 0)
        if mask is not None:
            valid &= np.asarray(mask, dtype=bool)
        v, u = np.nonzero(valid)
        z = depth[v, u]
        x = (u - self.cx) * z / self.fx
        y = (v - self.cy) * z / self.fy
        return np.column_stack([x, y, z])

    def project(self, points_cam) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pixel columns, rows (rounded to the nearest pixel) and depths."""
        p = np.atleast_2d(points_cam)
        z = p[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.rint(self.fx * p[:, 0] / z + self.cx)
            v = np.rint(self.fy * p[:, 1] / z + self.cy)
        return u, v, z


@lru_cache(maxsize=8)
def _pixel_rays(cam: CameraModel) -> np.ndarray:
    v, u = np.mgrid[0:cam.height, 0:cam.width].astype(float)
    rays = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)
    rays.setflags(write=False)
    return rays


@lru_cache(maxsize=64)
def disc_offsets(radius: int) -> tuple[np.ndarray, np.ndarray]:
    r = int(radius)
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    keep = dx * dx + dy * dy <= r * r
    return dx[keep], dy[keep]


def _voxel_keys(points, voxel):
    idx = np.floor(np.asarray(points) / voxel).astype(np.int64) + (1 << 20)
    return (idx[:, 0] << 42) | (idx[:, 1] << 21) | idx[:, 2]


def voxel_downsample(points, voxel: float = VOXEL_SIZE, keep_first: int = 0):
    """Keep one point per voxel.

    The first ``keep_first`` points are already downsampled and take priority,
    so merging a cloud into itself leaves it unchanged.  Returns the kept
    points and their indices into ``points``.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        return points, np.zeros(0, dtype=int)
    keys = _voxel_keys(points, voxel)
    _, first = np.unique(keys, return_index=True)
    first.sort()
    return points[first], first


@dataclass
class ObjectLandmark:
    id: int
    points: np.ndarray
    pose: Pose
    label_counts: np.ndarray
    embeddings: deque
    first_seen: int = 0
    last_seen: int = 0
    last_fused: int = 0
    observation_count: int = 1
    point_frames: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    frames: list = field(default_factory=list)
    mask: Optional[np.ndarray] = None
    _bound: Optional[tuple] = field(default=None, repr=False, compare=False)

    @property
    def radius(self) -> float:
        """Largest distance from the centroid to a point (cached per point array)."""
        if self._bound is None or self._bound[0] is not self.points:
            r = float(np.sqrt(np.max(np.sum((self.points - self.pose.t) ** 2, axis=1)))) if len(self.points) else 0.0
            self._bound = (self.points, r)
        return self._bound[1]

    @property
    def label_dist(self) -> np.ndarray:
        return averaged_label_dist(self.label_counts)

    @property
    def label(self) -> int:
        return int(np.argmax(self.label_dist))

    @property
    def centroid(self) -> np.ndarray:
        return self.pose.t

    def points_before(self, frame: int) -> np.ndarray:
        """Points first inserted before ``frame``."""
        return self.points[self.point_frames < frame]

    def apply_motion(self, new_pose: Pose) -> None:
        """Move the object rigidly so its pose becomes ``new_pose``."""
        delta = new_pose @ inverse(self.pose)
        self.points = transform_point(delta, self.points)
        self.pose = new_pose


def detection_points(d: Detection, depth, cam: CameraModel, t_wc: Pose) -> np.ndarray:
    return transform_point(t_wc, cam.backproject(depth, d.mask))


def create_object(d: Detection, depth, cam: CameraModel, t_wc: Pose, obj_id: int = 0,
                  n_classes: Optional[int] = None, frame: int = 0, voxel: float = VOXEL_SIZE,
                  max_embeddings: int = 16) -> ObjectLandmark:
    """New landmark from one detection: back-projected, downsampled, world-aligned."""
    pts = detection_points(d, depth, cam, t_wc)
    if len(pts) == 0:
        raise EmptyGeometryError("no valid depth under the detection mask")
    pts, _ = voxel_downsample(pts, voxel)
    n_classes = n_classes if n_classes is not None else d.label + 1
    counts = np.zeros(n_classes)
    counts[d.label] = 1
    return ObjectLandmark(
        id=obj_id,
        points=pts,
        pose=Pose.from_translation(pts.mean(axis=0)),
        label_counts=counts,
        embeddings=deque([d.embedding], maxlen=max_embeddings),
        first_seen=frame,
        last_seen=frame,
        last_fused=frame,
        point_frames=np.full(len(pts), frame, dtype=int),
        frames=[frame],
    )


def integrate_detection(o: ObjectLandmark, d: Detection, depth, cam: CameraModel, t_wc: Pose,
                        frame: int = 0, voxel: float = VOXEL_SIZE, fuse_geometry: bool = True) -> ObjectLandmark:
    """Fuse a matched detection into ``o`` (in place) and return it.

    Geometry is merged by voxel downsampling with existing points taking
    priority, then the pose is re-centred on the new centroid keeping its
    rotation.  Label counts, embeddings and bookkeeping are always updated,
    even when the mask has no valid depth.
    """
    o.label_counts[d.label] += 1
    o.embeddings.append(d.embedding)
    o.observation_count += 1
    o.last_seen = frame
    if not o.frames or o.frames[-1] != frame:
        o.frames.append(frame)
    if not fuse_geometry:
        return o
    pts = detection_points(d, depth, cam, t_wc)
    o.last_fused = frame
    if len(pts) == 0:
        return o
    merged = np.concatenate([o.points, pts])
    tags = np.concatenate([o.point_frames, np.full(len(pts), frame, dtype=int)])
    kept, idx = voxel_downsample(merged, voxel, keep_first=len(o.points))
    o.points = kept
    o.point_frames = tags[idx]
    o.pose = Pose(o.pose.q, kept.mean(axis=0))
    return o


def _frustum_normals(cam: CameraModel, margin_px: float = 2.0) -> np.ndarray:
    """Unit inward normals of the four side planes through the optical centre."""
    lo_u, hi_u = (-0.5 - margin_px - cam.cx) / cam.fx, (cam.width - 0.5 + margin_px - cam.cx) / cam.fx
    lo_v, hi_v = (-0.5 - margin_px - cam.cy) / cam.fy, (cam.height - 0.5 + margin_px - cam.cy) / cam.fy
    n = np.array([[1.0, 0.0, -lo_u], [-1.0, 0.0, hi_u], [0.0, 1.0, -lo_v], [0.0, -1.0, hi_v]])
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def spheres_in_view(cam: CameraModel, centres_cam, radii) -> np.ndarray:
    """Conservative frustum test: False only for spheres wholly outside the view."""
    c = np.asarray(centres_cam, dtype=float).reshape(-1, 3)
    r = np.asarray(radii, dtype=float).reshape(-1)
    inside = c[:, 2] + r > 0
    return inside & np.all(c @ _frustum_normals(cam).T >= -r[:, None], axis=1)


def _render_points(pc, cam: CameraModel, voxel: float) -> np.ndarray:
    mask = np.zeros(cam.shape, dtype=bool)
    pc = pc[pc[:, 2] > 1e-6]
    if len(pc) == 0:
        return mask
    u, v, z = cam.project(pc)
    radius = np.maximum(1, np.rint(cam.fx * voxel / z)).astype(int)
    onscreen = (u + radius >= 0) & (u - radius < cam.width) & (v + radius >= 0) & (v - radius < cam.height)
    if not onscreen.any():
        return mask
    u, v, radius = u[onscreen].astype(int), v[onscreen].astype(int), radius[onscreen]
    for r in np.unique(radius):
        sel = radius == r
        dx, dy = disc_offsets(int(r))
        uu = (u[sel, None] + dx[None, :]).ravel()
        vv = (v[sel, None] + dy[None, :]).ravel()
        ok = (uu >= 0) & (uu < cam.width) & (vv >= 0) & (vv < cam.height)
        mask[vv[ok], uu[ok]] = True
    return mask


def predict_mask(o: ObjectLandmark, cam: CameraModel, t_wc: Pose, voxel: float = VOXEL_SIZE,
                 points=None) -> np.ndarray:
    """Render the object's points as filled discs of radius ``max(1, round(fx * voxel / depth))``."""
    pts = o.points if points is None else points
    if len(pts) == 0:
        return np.zeros(cam.shape, dtype=bool)
    return _render_points(transform_point(inverse(t_wc), pts), cam, voxel)


def predict_masks(objects, cam: CameraModel, t_wc: Pose, voxel: float = VOXEL_SIZE) -> list:
    """``predict_mask`` for many objects, skipping those outside the view frustum.

    Culled objects get an all-false mask, identical to what rendering them
    would produce.
    """
    objects = list(objects)
    out = [None] * len(objects)
    if not objects:
        return out
    t_cw = inverse(t_wc)
    centres = transform_point(t_cw, np.array([o.pose.t for o in objects]))
    radii = np.array([o.radius for o in objects]) + 2.0 * voxel
    keep = spheres_in_view(cam, centres, radii)
    for i, o in enumerate(objects):
        if keep[i] and len(o.points):
            out[i] = _render_points(transform_point(t_cw, o.points), cam, voxel)
        else:
            out[i] = np.zeros(cam.shape, dtype=bool)
    return out


class ObjectMap:
    """Id-keyed landmark store with a single writer."""

    def __init__(self, n_classes: int, voxel: float = VOXEL_SIZE, max_embeddings: int = 16):
        self.n_classes = n_classes
        self.voxel = voxel
        self.max_embeddings = max_embeddings
        self.objects: dict[int, ObjectLandmark] = {}
        self.next_id = 0

    def __len__(self):
        return len(self.objects)

    def __iter__(self):
        return iter(self.objects.values())

    def __getitem__(self, obj_id) -> ObjectLandmark:
        return self.objects[obj_id]

    def create(self, d, depth, cam, t_wc, frame=0) -> ObjectLandmark:
        o = create_object(d, depth, cam, t_wc, self.next_id, self.n_classes, frame,
                          self.voxel, self.max_embeddings)
        self.objects[o.id] = o
        self.next_id += 1
        return o

    def integrate(self, obj_id, d, depth, cam, t_wc, frame=0, fuse_geometry=True) -> ObjectLandmark:
        return integrate_detection(self.objects[obj_id], d, depth, cam, t_wc, frame, self.voxel, fuse_geometry)

    def predict(self, cam, t_wc, ids=None) -> None:
        """Refresh the predicted mask of every object (or of ``ids``)."""
        for o in self.objects.values() if ids is None else (self.objects[i] for i in ids):
            o.mask = predict_mask(o, cam, t_wc, self.voxel)
