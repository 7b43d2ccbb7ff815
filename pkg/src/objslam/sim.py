"""Synthetic scenes and sensor streams.

Objects are yawed boxes and spheres.  Frames are rendered by casting one ray
per pixel against every nearby object and keeping the nearest hit, which
yields an exact depth map and instance masks with occlusion.  All randomness
comes from named sub-streams of the scene seed so any frame can be
regenerated on its own.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .assoc import Detection, confusion_matrix
from .geom import Pose, compose, inverse, se3_exp
from .objmap import CameraModel

MIN_VISIBLE_PIXELS = 30
MAX_VISIBLE_DEPTH = 5.0
PLACEMENT_ATTEMPTS = 1000

# sub-stream ids for np.random.default_rng([seed, stream, ...])
STREAM_SCENE = 0
STREAM_DETECTIONS = 1
STREAM_WALKS = 2
STREAM_ODOMETRY = 3


class OverDenseSceneError(RuntimeError):
    pass


def substream(seed: int, stream: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream), *[int(e) for e in extra]])


@dataclass
class NoiseConfig:
    sigma_t: float = 0.0          # m per axis
    sigma_r: float = 0.0          # rad per axis
    sigma_e: float = 0.0          # embedding noise, total norm
    p_miss: float = 0.0
    p_false: float = 0.0
    eps: float = 0.0              # label confusion
    mode: str = "incremental"     # or "absolute"

    def validate(self, prefix: str = "noise") -> None:
        for name in ("sigma_t", "sigma_r", "sigma_e"):
            if getattr(self, name) < 0:
                raise ValueError(f"{prefix}.{name} must be >= 0")
        for name in ("p_miss", "p_false", "eps"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{prefix}.{name} must lie in [0, 1]")
        if self.mode not in ("incremental", "absolute"):
            raise ValueError(f"{prefix}.mode must be 'incremental' or 'absolute'")


@dataclass
class SceneConfig:
    n_objects: int = 20
    n_classes: int = 5
    frames: int = 200
    trajectory: str = "circle"    # or "lawnmower"
    revisit: bool = False
    laps: float = 1.0             # circle laps when revisiting
    cam_radius: float = 1.5
    cam_height: float = 1.0
    ring: tuple = (2.7, 4.2)      # object distance from the circle centre
    room: float = 4.0             # half-width of the lawnmower room
    size_range: tuple = (0.25, 0.5)
    embedding_dim: int = 64
    loop_gap: Optional[int] = None
    camera: CameraModel = field(default_factory=CameraModel)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    seed: int = 0

    def validate(self) -> None:
        if self.n_objects < 0:
            raise ValueError("scene.n_objects must be >= 0")
        if self.n_classes < 1:
            raise ValueError("scene.n_classes must be >= 1")
        if self.frames < 1:
            raise ValueError("scene.frames must be >= 1")
        if self.trajectory not in ("circle", "lawnmower"):
            raise ValueError("scene.trajectory must be 'circle' or 'lawnmower'")
        if self.size_range[0] <= 0 or self.size_range[1] < self.size_range[0]:
            raise ValueError("scene.size_range must be 0 < lo <= hi")
        self.noise.validate("scene.noise")

    @property
    def gap(self) -> int:
        return self.loop_gap if self.loop_gap is not None else self.frames // 4


@dataclass
class GTObject:
    id: int
    cls: int
    embedding: np.ndarray
    kind: str                     # "box" | "sphere"
    center: np.ndarray
    size: np.ndarray              # box half extents, or (r, r, r)
    yaw: float
    surface: np.ndarray           # (n, 3) samples

    @property
    def bound_radius(self) -> float:
        return float(np.linalg.norm(self.size)) if self.kind == "box" else float(self.size[0])


@dataclass
class GroundTruth:
    cfg: SceneConfig
    objects: list
    poses: list                   # true T_wi per frame
    _renders: dict = field(default_factory=dict, repr=False)
    _visibility: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    def render(self, frame: int):
        if frame not in self._renders:
            self._renders[frame] = render_frame(self.objects, self.poses[frame], self.cfg.camera)
        return self._renders[frame]

    def visibility(self) -> np.ndarray:
        """(frames, objects) boolean matrix of detectable objects."""
        if self._visibility is None:
            v = np.zeros((self.n_frames, len(self.objects)), dtype=bool)
            for i in range(self.n_frames):
                v[i, visible_objects(self, i)] = True
            self._visibility = v
        return self._visibility


def cam_rotation(alpha: float) -> np.ndarray:
    """Camera axes (x right, y down, z forward) for a level camera heading ``alpha``."""
    c, s = math.cos(alpha), math.sin(alpha)
    return np.array([[s, 0.0, c], [-c, 0.0, s], [0.0, -1.0, 0.0]])


def _yaw_matrix(psi):
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def circle_trajectory(cfg: SceneConfig) -> list[Pose]:
    laps = cfg.laps if cfg.revisit else 0.75
    n = cfg.frames
    poses = []
    for i in range(n):
        a = 2 * math.pi * laps * i / max(n - 1, 1)
        p = np.array([cfg.cam_radius * math.cos(a), cfg.cam_radius * math.sin(a), cfg.cam_height])
        poses.append(Pose.from_rotation_matrix(cam_rotation(a), p))
    return poses


def lawnmower_trajectory(cfg: SceneConfig) -> list[Pose]:
    """Serpentine sweep over three rows; with ``revisit`` the sweep is retraced back to the start."""
    half = cfg.room * 0.6
    rows = [-half, 0.0, half]
    way = []
    for r, y in enumerate(rows):
        xs = (-half, half) if r % 2 == 0 else (half, -half)
        way += [(xs[0], y), (xs[1], y)]
    way = np.array(way)
    if cfg.revisit:
        way = np.concatenate([way, way[-2::-1]])
    seg = np.linalg.norm(np.diff(way, axis=0), axis=1)
    s = np.concatenate([[0], np.cumsum(seg)])
    poses = []
    for i in range(cfg.frames):
        d = s[-1] * i / max(cfg.frames - 1, 1)
        k = min(np.searchsorted(s, d, side="right") - 1, len(seg) - 1)
        f = (d - s[k]) / seg[k]
        xy = way[k] + f * (way[k + 1] - way[k])
        heading = math.atan2(*(way[k + 1] - way[k])[::-1])
        poses.append(Pose.from_rotation_matrix(cam_rotation(heading), [xy[0], xy[1], cfg.cam_height]))
    return poses


def _surface_samples(kind, size, yaw, center, rng, n=400):
    if kind == "sphere":
        d = rng.normal(size=(n, 3))
        return center + size[0] * d / np.linalg.norm(d, axis=1, keepdims=True)
    h = size
    areas = np.array([h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2], h[0] * h[1], h[0] * h[1]])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    p = rng.uniform(-1, 1, size=(n, 3)) * h
    axis = face // 2
    sign = np.where(face % 2 == 0, -1.0, 1.0)
    p[np.arange(n), axis] = sign * h[axis]
    return center + p @ _yaw_matrix(yaw).T


def generate_scene(cfg: SceneConfig) -> GroundTruth:
    """Objects and the true trajectory; deterministic in ``cfg.seed``."""
    cfg.validate()
    rng = substream(cfg.seed, STREAM_SCENE)
    poses = circle_trajectory(cfg) if cfg.trajectory == "circle" else lawnmower_trajectory(cfg)
    path = np.array([p.t[:2] for p in poses])
    objects: list[GTObject] = []
    classes = rng.integers(0, cfg.n_classes, size=cfg.n_objects)
    for oid in range(cfg.n_objects):
        kind = "box" if rng.random() < 0.6 else "sphere"
        lo, hi = cfg.size_range
        if kind == "box":
            size = rng.uniform(lo, hi, size=3) / 2
        else:
            size = np.full(3, rng.uniform(lo, hi) / 2)
        yaw = float(rng.uniform(0, math.pi)) if kind == "box" else 0.0
        bound = float(np.linalg.norm(size)) if kind == "box" else float(size[0])
        for _ in range(PLACEMENT_ATTEMPTS):
            if cfg.trajectory == "circle":
                r = rng.uniform(*cfg.ring)
                a = rng.uniform(0, 2 * math.pi)
                xy = np.array([r * math.cos(a), r * math.sin(a)])
            else:
                xy = rng.uniform(-cfg.room, cfg.room, size=2)
                if np.min(np.linalg.norm(path - xy, axis=1)) < bound + 0.5:
                    continue
            center = np.array([xy[0], xy[1], rng.uniform(0.5, 1.5)])
            if all(np.linalg.norm(center - o.center) > bound + o.bound_radius + 0.1 for o in objects):
                break
        else:
            raise OverDenseSceneError(f"could not place object {oid} after {PLACEMENT_ATTEMPTS} attempts")
        e = rng.normal(size=cfg.embedding_dim)
        objects.append(GTObject(oid, int(classes[oid]), e / np.linalg.norm(e), kind, center, size, yaw,
                                _surface_samples(kind, size, yaw, center, rng)))
    return GroundTruth(cfg, objects, poses)


def _ray_hits(obj: GTObject, origin, dirs):
    """Ray parameter of the first hit for each direction (inf on miss)."""
    if obj.kind == "sphere":
        oc = origin - obj.center
        a = np.einsum("ij,ij->i", dirs, dirs)
        b = 2.0 * dirs @ oc
        c = oc @ oc - obj.size[0] ** 2
        disc = b * b - 4 * a * c
        ok = disc >= 0
        s = np.full(len(dirs), np.inf)
        s[ok] = (-b[ok] - np.sqrt(disc[ok])) / (2 * a[ok])
        s[s <= 0] = np.inf
        return s
    rt = _yaw_matrix(-obj.yaw)
    o = rt @ (origin - obj.center)
    d = dirs @ rt.T
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-obj.size - o) * inv
        t2 = (obj.size - o) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (tmax >= tmin) & (tmin > 0)
    return np.where(hit, tmin, np.inf)


def render_frame(objects, t_wc: Pose, cam: CameraModel):
    """Depth map (0 where nothing is hit) and per-pixel object index (-1 for background).

    Rays are only cast inside a conservative image-space bound of each
    object's bounding sphere.
    """
    rays = cam.pixel_rays()
    r = t_wc.rotation_matrix
    origin = t_wc.t
    best = np.full(cam.shape, np.inf)
    ids = np.full(cam.shape, -1)
    for i, o in enumerate(objects):
        pc = r.T @ (o.center - origin)
        rad = o.bound_radius
        if pc[2] + rad <= 0 or pc[2] - rad > MAX_VISIBLE_DEPTH + 1.0:
            continue
        if pc[2] - rad > 0.05:
            zmin = pc[2] - rad
            # extreme image coordinates of the sphere's bounding box corners
            xs = np.array([pc[0] - rad, pc[0] + rad])
            ys = np.array([pc[1] - rad, pc[1] + rad])
            zs = np.array([zmin, zmin, pc[2] + rad, pc[2] + rad])
            us = cam.fx * np.concatenate([xs / zs[0], xs / zs[2]]) + cam.cx
            vs = cam.fy * np.concatenate([ys / zs[0], ys / zs[2]]) + cam.cy
            c0, c1 = int(math.floor(us.min())) - 1, int(math.ceil(us.max())) + 2
            r0, r1 = int(math.floor(vs.min())) - 1, int(math.ceil(vs.max())) + 2
            c0, r0 = max(c0, 0), max(r0, 0)
            c1, r1 = min(c1, cam.width), min(r1, cam.height)
            if c0 >= c1 or r0 >= r1:
                continue
        else:
            r0, r1, c0, c1 = 0, cam.height, 0, cam.width
        sub = rays[r0:r1, c0:c1].reshape(-1, 3) @ r.T
        s = _ray_hits(o, origin, sub).reshape(r1 - r0, c1 - c0)
        win_best = best[r0:r1, c0:c1]
        win_ids = ids[r0:r1, c0:c1]
        closer = s < win_best
        win_best[closer] = s[closer]
        win_ids[closer] = i
    depth = np.where(np.isfinite(best), best, 0.0)
    return depth, ids


def visible_objects(gt: GroundTruth, frame: int) -> list[int]:
    """Objects in front of the camera, within range, covering at least 30 pixels."""
    _, ids = gt.render(frame)
    counts = np.bincount(ids[ids >= 0].ravel(), minlength=len(gt.objects))
    t_wc = gt.poses[frame]
    fwd = t_wc.rotation_matrix[:, 2]
    out = []
    for i in np.nonzero(counts >= MIN_VISIBLE_PIXELS)[0]:
        rel = gt.objects[i].center - t_wc.t
        if rel @ fwd > 0 and np.linalg.norm(rel) < MAX_VISIBLE_DEPTH:
            out.append(int(i))
    return out


def perturb_pose(p: Pose, sigma_t: float, sigma_r: float, rng) -> Pose:
    """``p * exp(xi)`` with ``xi`` Gaussian, per-axis std ``sigma_t`` (rho) and ``sigma_r`` (phi)."""
    if sigma_t == 0 and sigma_r == 0:
        return p
    xi = np.concatenate([rng.normal(0.0, sigma_t, 3), rng.normal(0.0, sigma_r, 3)])
    return compose(p, se3_exp(xi))


def noisy_absolute_pose(gt: GroundTruth, frame: int, noise: NoiseConfig) -> Pose:
    return perturb_pose(gt.poses[frame], noise.sigma_t, noise.sigma_r,
                        substream(gt.cfg.seed, STREAM_ODOMETRY, frame))


def odometry(gt: GroundTruth, frame: int, noise: Optional[NoiseConfig] = None, rng=None) -> Pose:
    """Odometry reading for ``frame``.

    Frame 0 reports its pose relative to the world origin; later frames report
    the increment from the previous frame.  In incremental mode the true
    increment is perturbed; in absolute mode consecutive independently
    perturbed absolute poses are differenced, so chaining the readings
    reproduces the perturbed absolute poses.
    """
    noise = noise or gt.cfg.noise
    if noise.mode == "absolute":
        cur = noisy_absolute_pose(gt, frame, noise)
        if frame == 0:
            return cur
        return compose(inverse(noisy_absolute_pose(gt, frame - 1, noise)), cur)
    if frame == 0:
        return gt.poses[0]
    rng = rng if rng is not None else substream(gt.cfg.seed, STREAM_ODOMETRY, frame)
    true_inc = compose(inverse(gt.poses[frame - 1]), gt.poses[frame])
    return perturb_pose(true_inc, noise.sigma_t, noise.sigma_r, rng)


@dataclass
class FrameData:
    index: int
    detections: list
    depth: np.ndarray
    odometry: Pose
    true_pose: Pose
    visible: list


def _noisy_embedding(e, sigma_e, rng):
    if sigma_e == 0:
        return e.copy()
    v = e + rng.normal(0.0, sigma_e / math.sqrt(len(e)), len(e))
    return v / np.linalg.norm(v)


def _spurious_detection(cfg: SceneConfig, rng) -> Detection:
    cam = cfg.camera
    h, w = rng.integers(8, 24, size=2)
    v0 = rng.integers(0, cam.height - h)
    u0 = rng.integers(0, cam.width - w)
    mask = np.zeros(cam.shape, dtype=bool)
    mask[v0:v0 + h, u0:u0 + w] = True
    e = rng.normal(size=cfg.embedding_dim)
    return Detection(mask, int(rng.integers(cfg.n_classes)), float(rng.uniform(0.5, 1.0)),
                     e / np.linalg.norm(e), None)


def simulate_frame(gt: GroundTruth, frame: int, cfg: Optional[SceneConfig] = None, rng=None,
                   noise: Optional[NoiseConfig] = None) -> FrameData:
    """Detections, depth and odometry for one frame.

    ``noise`` overrides ``cfg.noise`` so one rendered scene can be replayed
    at several noise levels.
    """
    cfg = cfg or gt.cfg
    noise = noise or cfg.noise
    if not 0 <= frame < gt.n_frames:
        raise IndexError(f"frame {frame} outside [0, {gt.n_frames})")
    rng = rng if rng is not None else substream(cfg.seed, STREAM_DETECTIONS, frame)
    depth, ids = gt.render(frame)
    vis = visible_objects(gt, frame)
    cm = confusion_matrix(cfg.n_classes, noise.eps)
    dets = []
    for i in vis:
        o = gt.objects[i]
        miss = rng.random() < noise.p_miss
        label = int(rng.choice(cfg.n_classes, p=cm[o.cls])) if noise.eps > 0 else o.cls
        emb = _noisy_embedding(o.embedding, noise.sigma_e, rng)
        conf = float(rng.uniform(0.6, 1.0))
        if not miss:
            dets.append(Detection(ids == i, label, conf, emb, o.id))
    if rng.random() < noise.p_false:
        dets.append(_spurious_detection(cfg, rng))
    odo = odometry(gt, frame, noise)
    return FrameData(frame, dets, depth, odo, gt.poses[frame], vis)


def generate_loop_labels(gt: GroundTruth, cfg: Optional[SceneConfig] = None) -> set:
    """Frame pairs more than ``gap`` apart that share more than two visible objects."""
    cfg = cfg or gt.cfg
    v = gt.visibility().astype(np.int32)
    common = v @ v.T
    i, j = np.nonzero(np.triu(common > 2, k=cfg.gap + 1))
    return {(int(a), int(b)) for a, b in zip(i, j)}
