"""End-to-end object SLAM over a frame stream.

Per frame: chain odometry into the pose graph, track detections, associate
confirmed detections with map objects, then fuse or create objects.  Frames
are grouped into tumbling windows; at the end of each window the window's
local object graph is matched against the graph of objects first seen well
before the window.  A match that passes the distance-consistency check
yields a drift estimate, which re-seeds the current camera, adds object
constraints, and triggers a pose-graph optimisation.  A loop is reported as
verified when, in addition, one query frame and one map frame both observed
enough of the matched objects and the rigid fit of the matched centroids
implies a drift within the correction bounds.

Observations that associate with a stale object (one not fused for a while) are recorded but not fused
until a loop closure has reconciled the frames; fusing them earlier would
bake the accumulated drift into the object constraints.
"""
from __future__ import annotations

import math
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .align import AlignParams, InsufficientMatchesError, estimate_drift
from .assoc import (AssociationParams, InstanceTracker, associate, check_confusion,
                    nn_baseline_associate)
from .geom import DegenerateInputError, Pose, compose, fit_rigid, transform_point
from .objmap import EmptyGeometryError, ObjectMap, predict_masks, voxel_downsample
from .posegraph import PoseGraph, apply_loop_correction, information_matrix, optimize
from .semgraph import (NoFeasibleMatchError, SemanticGraph, match_graphs, match_random_walk,
                       random_walk_descriptors, verify_loop)
from .sim import STREAM_WALKS, substream


@dataclass
class MatchParams:
    mu: float = 2.0
    min_pair_score: float = 0.05
    edge_frac: float = 0.5
    dist_tol: float = 0.25
    n_walks: int = 200
    walk_depth: int = 4


@dataclass
class PipelineParams:
    assoc: AssociationParams = field(default_factory=AssociationParams)
    match: MatchParams = field(default_factory=MatchParams)
    align: AlignParams = field(default_factory=lambda: AlignParams(icp_min_radius=0.05))
    method: str = "proposed"          # or "nn"
    loop_closure: bool = True
    baseline_matcher: bool = True     # also run the random-walk matcher on every window
    window: int = 10
    stale_gap: int = 50
    odom_sigma_t: float = 0.01
    odom_sigma_r: float = 0.001
    oc_sigma_t: float = 0.02
    oc_sigma_r: float = 0.01
    deadband_t: float = 0.01
    deadband_r: float = math.radians(0.2)
    max_drift_t: float = 1.0          # larger corrections are treated as false matches
    max_drift_r: float = math.radians(20.0)
    lm_iters: int = 50
    lm_tol: float = 1e-10
    voxel: float = 0.02
    min_query_vertices: int = 3


@dataclass
class LoopEvent:
    method: str
    window_end: int
    frame: int                  # current-side frame of the detected loop
    match_frame: int            # map-side frame
    detected: bool              # topology check passed
    verified: bool              # plus distance consistency, frame support, plausible drift
    pairs: list                 # (map object id, query object id)
    consistent: bool = False    # distance consistency alone; gates drift correction
    applied: bool = False
    t_rel: Optional[list] = None
    ms: float = 0.0


@dataclass
class _Obs:
    obj_id: int
    frame: int
    points: np.ndarray
    label: int


class Pipeline:
    def __init__(self, cam, cm, params: Optional[PipelineParams] = None, seed: int = 0):
        self.cam = cam
        self.cm = check_confusion(cm)
        self.p = params or PipelineParams()
        self.seed = seed
        self.map = ObjectMap(self.cm.shape[0], self.p.voxel, self.p.assoc.max_embeddings)
        self.graph: Optional[PoseGraph] = None
        self.tracker = InstanceTracker(self.cm, self.p.assoc)
        self.odom_info = information_matrix(self.p.odom_sigma_t, self.p.odom_sigma_r)
        self.oc_info = information_matrix(self.p.oc_sigma_t, self.p.oc_sigma_r)
        self.assignments: dict = {}          # (frame, det index) -> object id
        self.ref_gt: dict = {}               # (frame, det index) -> gt id (evaluation only)
        self.odometry_only: list[Pose] = []
        self.covis: set = set()
        self.window: list[_Obs] = []
        self.window_frames: list[int] = []
        self.loop_events: list[LoopEvent] = []
        self.lm_histories: list[list] = []
        self.recent: dict = {}               # frame index -> FrameData, kept for the boundary flushes
        self.first_frame = 0
        self.dropped: list = []              # (frame, det index, detection) of unconfirmed tracks
        self._recent_span = (self.p.assoc.max_track_age + 1) * self.p.assoc.min_track + 1

    # ------------------------------------------------------------------ frames

    def step(self, fr) -> None:
        k = fr.index
        if self.graph is None:
            self.first_frame = k
            self.graph = PoseGraph(fr.odometry)
            self.odometry_only.append(fr.odometry)
        else:
            self.graph.add_odometry(fr.odometry, self.odom_info)
            self.odometry_only.append(compose(self.odometry_only[-1], fr.odometry))
        dets = fr.detections
        refs = [(k, i) for i in range(len(dets))]
        for r, d in zip(refs, dets):
            self.ref_gt[r] = d.gt_id

        if self.p.method == "nn":
            keep = [i for i, d in enumerate(dets) if d.confidence >= self.p.assoc.confidence_floor]
            confirmed = [(None, i) for i in keep]
        else:
            before = {tr.id: tr for tr in self.tracker.tracks}
            confirmed = self.tracker.step(dets, refs)
            alive = {tr.id for tr in self.tracker.tracks}
            died = [tr for tid, tr in before.items() if tid not in alive and tr.history
                    and tr.hits < self.p.assoc.min_track]
            # tracks cut short by the start of the stream, like those cut by its end
            self._flush([tr for tr in died if tr.history[0][0] == self.first_frame])
            for tr in died:
                if tr.history[0][0] != self.first_frame:
                    self.dropped += [(f, i, self.recent[f].detections[i]) for f, i in tr.history
                                     if f in self.recent]

        self._fuse(fr, confirmed)
        self.recent[k] = fr
        self.recent.pop(k - self._recent_span, None)
        self.window_frames.append(k)
        if len(self.window_frames) >= self.p.window:
            self._close_window(k)

    def _fuse(self, fr, confirmed) -> None:
        """Associate confirmed detections of frame ``fr`` with the map, then fuse or create."""
        k = fr.index
        t_wc = self.graph.cameras[k]
        dets = fr.detections
        cand = self._candidates(t_wc)
        conf_dets = [dets[i] for _, i in confirmed]
        if self.p.method == "nn":
            res = nn_baseline_associate(cand, conf_dets)
        else:
            res = associate(cand, conf_dets, self.cm, self.p.assoc)
        matched = {ci: oid for oid, ci in res.matches}

        for ci, (track, di) in enumerate(confirmed):
            d = dets[di]
            if ci in matched:
                oid = matched[ci]
                o = self.map[oid]
                if self._is_stale(o, k):
                    o.last_seen = k
                else:
                    self.map.integrate(oid, d, fr.depth, self.cam, t_wc, k)
                    self._sync_object(oid, k, t_wc)
            else:
                try:
                    o = self.map.create(d, fr.depth, self.cam, t_wc, k)
                except EmptyGeometryError:
                    continue
                oid = o.id
                self.graph.add_object(oid, o.pose)
                self.graph.add_object_constraint(oid, k, None, self.oc_info)
            self.assignments[(k, di)] = oid
            if track is not None:
                for r in track.history:
                    self.assignments.setdefault(r, oid)
            if self.p.loop_closure:
                pts = self.cam.backproject(fr.depth, d.mask)
                if len(pts):
                    self.window.append(_Obs(oid, k, transform_point(t_wc, pts), d.label))

    def finish(self) -> None:
        """Flush tracks still awaiting confirmation, then close the last window.

        At the end of the stream a tentative track can gain no more hits, so
        its latest detection is processed as if confirmed and the earlier
        ones inherit the resulting object.  Tracks that died unconfirmed
        mid-stream are then re-associated against the final map.
        """
        if self.p.method != "nn":
            self._flush(self.tracker.tracks)
            self.tracker.tracks = [tr for tr in self.tracker.tracks if tr.hits >= self.p.assoc.min_track]
        if self.window_frames:
            self._close_window(self.window_frames[-1])
        self._reassociate_dropped()

    def _reassociate_dropped(self) -> None:
        """Attribute detections of tracks that died unconfirmed to the final map.

        Each is associated at its own frame's optimised pose with the same
        gated assignment; matches only label the detection and are not fused,
        so the map still holds confirmed observations only.  A brief glimpse
        of an object that is confirmed later is credited to that object.
        """
        by_frame = defaultdict(list)
        for f, i, d in self.dropped:
            if (f, i) not in self.assignments:
                by_frame[f].append((i, d))
        for f in sorted(by_frame):
            items = sorted(by_frame[f], key=lambda c: c[0])
            res = associate(self._candidates(self.graph.cameras[f]), [d for _, d in items], self.cm,
                            self.p.assoc)
            for oid, ci in res.matches:
                self.assignments[(f, items[ci][0])] = oid
        self.dropped = []

    def _flush(self, tracks) -> None:
        """Fuse the latest detection of each unconfirmed track; earlier ones inherit the object."""
        by_frame = defaultdict(list)
        for tr in tracks:
            if tr.hits < self.p.assoc.min_track and tr.history:
                f, i = tr.history[-1]
                if f in self.recent:
                    by_frame[f].append((tr, i))
        for f in sorted(by_frame):
            self._fuse(self.recent[f], sorted(by_frame[f], key=lambda c: c[1]))

    def _candidates(self, t_wc):
        out = []
        objs = list(self.map)
        for o, m in zip(objs, predict_masks(objs, self.cam, t_wc, self.p.voxel)):
            if m.any():
                o.mask = m
                out.append(o)
        return out

    def _is_stale(self, o, k) -> bool:
        return self.p.loop_closure and o.last_fused < k - self.p.stale_gap

    def _sync_object(self, oid, k, t_wc):
        o = self.map[oid]
        self.graph.recenter_object(oid, o.pose)
        self.graph.add_object_constraint(oid, k, None, self.oc_info)

    # ------------------------------------------------------------------ loops

    def _close_window(self, k: int) -> None:
        obs, frames = self.window, self.window_frames
        self.window, self.window_frames = [], []
        ids = sorted({o.obj_id for o in obs})
        for a in range(len(ids)):
            for b in range(a + 1, len(ids)):
                self.covis.add((ids[a], ids[b]))
        if not self.p.loop_closure:
            return
        start = frames[0]
        stale = [o for o in self.map if o.first_seen < start - self.p.stale_gap]
        if len(ids) < self.p.min_query_vertices or len(stale) < 3:
            return
        gq, q_points, q_frames = self._query_graph(obs)
        gt = self._target_graph(stale)
        mp = self.p.match

        t0 = time.perf_counter()
        try:
            sm = match_graphs(gq, gt, mp.mu, mp.min_pair_score)
        except NoFeasibleMatchError:
            sm = None
        ms = (time.perf_counter() - t0) * 1e3
        ev = self._event("spectral", sm, gq, gt, q_frames, stale, k, ms)
        if self.p.baseline_matcher:
            t0 = time.perf_counter()
            rng = substream(self.seed, STREAM_WALKS, k)
            dq = random_walk_descriptors(gq, mp.n_walks, mp.walk_depth, rng)
            dt = random_walk_descriptors(gt, mp.n_walks, mp.walk_depth, rng)
            rm = match_random_walk(dq, dt)
            self._event("random_walk", rm, gq, gt, q_frames, stale, k, (time.perf_counter() - t0) * 1e3)
        if ev is not None and ev.consistent:
            self._correct(ev, sm, gq, gt, q_points, stale, k)

    def _query_graph(self, obs):
        by_id = defaultdict(list)
        for o in obs:
            by_id[o.obj_id].append(o)
        ids = sorted(by_id)
        cents, labels, points, frames = [], [], [], []
        for oid in ids:
            pts = np.concatenate([o.points for o in by_id[oid]])
            pts, _ = voxel_downsample(pts, self.p.voxel)
            points.append(pts)
            cents.append(pts.mean(axis=0))
            labels.append(Counter(o.label for o in by_id[oid]).most_common(1)[0][0])
            frames.append(sorted({o.frame for o in by_id[oid]}))
        edges = [(a, b) for a in range(len(ids)) for b in range(a + 1, len(ids))]
        return SemanticGraph.from_edges(cents, labels, edges, ids), points, frames

    def _target_graph(self, stale):
        index = {o.id: i for i, o in enumerate(stale)}
        edges = [(index[a], index[b]) for a, b in self.covis if a in index and b in index]
        return SemanticGraph.from_edges([o.centroid for o in stale], [o.label for o in stale], edges,
                                        [o.id for o in stale])

    def _event(self, method, m, gq, gt, q_frames, stale, k, ms):
        if m is None or not m.pairs:
            return None
        mp = self.p.match
        detected = verify_loop(m, gq, gt, mp.edge_frac, None)
        if not detected:
            return None
        consistent = bool(verify_loop(m, gq, gt, mp.edge_frac, mp.dist_tol))
        frame, match_frame, support = self._loop_frames(m.pairs, q_frames, stale, k)
        verified = consistent and support >= self.p.min_query_vertices and self._plausible(m, gq, gt)
        ev = LoopEvent(method, k, frame, match_frame, detected, verified,
                       [(gt.ids[j], gq.ids[qk]) for j, qk in m.pairs], consistent=consistent, ms=ms)
        self.loop_events.append(ev)
        return ev

    def _plausible(self, m, gq, gt) -> bool:
        """Rigid fit of the matched centroids implies a drift within the correction bounds.

        Distances are invariant to rotation, so a wrong match that mirrors the
        true layout under a large rotation passes the consistency check.
        """
        j, k = np.array(m.pairs).T
        try:
            t_rel = fit_rigid(gq.centroids[k], gt.centroids[j])
        except DegenerateInputError:
            return False
        return bool(np.linalg.norm(t_rel.t) <= self.p.max_drift_t and t_rel.angle <= self.p.max_drift_r)

    def _loop_frames(self, pairs, q_frames, stale, k):
        """Query/map frame pair that observed the most matched objects in common, and that count."""
        seen_q, seen_t = defaultdict(set), defaultdict(set)
        for n, (j, qk) in enumerate(pairs):
            for f in q_frames[qk]:
                seen_q[f].add(n)
            for f in stale[j].frames:
                if f < k - self.p.stale_gap:
                    seen_t[f].add(n)
        if not seen_t:
            return min(seen_q, key=lambda f: (-len(seen_q[f]), f)), -1, 0
        fq, ft = min(((fq, ft) for fq in seen_q for ft in seen_t),
                     key=lambda p: (-len(seen_q[p[0]] & seen_t[p[1]]), -len(seen_q[p[0]]),
                                    -len(seen_t[p[1]]), p[0], p[1]))
        return fq, ft, len(seen_q[fq] & seen_t[ft])

    def _correct(self, ev, sm, gq, gt, q_points, stale, k):
        g_points = [o.points for o in stale]
        try:
            res = estimate_drift(sm, gq, gt, q_points, g_points, self.p.align,
                                 substream(self.seed, STREAM_WALKS, k, 1))
        except InsufficientMatchesError:
            return
        t_rel = res.t_rel
        ev.t_rel = t_rel.to_list()
        if np.linalg.norm(t_rel.t) > self.p.max_drift_t or t_rel.angle > self.p.max_drift_r:
            return
        matched = sorted({gt.ids[j] for j, _ in sm.pairs})
        small = np.linalg.norm(t_rel.t) < self.p.deadband_t and t_rel.angle < self.p.deadband_r
        if small:
            apply_loop_correction(self.graph, Pose.identity(), k, matched, self.oc_info)
        else:
            apply_loop_correction(self.graph, t_rel, k, matched, self.oc_info)
            result = optimize(self.graph, self.p.lm_iters, self.p.lm_tol)
            self.lm_histories.append(result.history)
            for oid, pose in self.graph.objects.items():
                self.map[oid].apply_motion(pose)
            ev.applied = True
        for oid in matched:
            self.map[oid].last_fused = k

    # ------------------------------------------------------------------ output

    def trajectory(self) -> list[Pose]:
        return list(self.graph.cameras) if self.graph else []

    def track_detections(self) -> dict:
        out = defaultdict(list)
        for ref, oid in self.assignments.items():
            out[oid].append(ref)
        return dict(out)

    def gt_detections(self) -> dict:
        out = defaultdict(list)
        for ref, g in self.ref_gt.items():
            if g is not None:
                out[g].append(ref)
        return dict(out)
