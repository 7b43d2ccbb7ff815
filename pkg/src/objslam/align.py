"""Drift estimation between a local map and the global map.

``T_rel`` maps local-map coordinates onto global coordinates: a coarse rigid
fit on matched object centroids (RANSAC over triples), then point-to-point
ICP on the matched objects' merged point clouds.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .geom import DegenerateInputError, Pose, fit_rigid, se3_log, transform_point, compose, inverse


class InsufficientMatchesError(ValueError):
    pass


@dataclass
class AlignParams:
    inlier_threshold: float = 0.25
    ransac_iters: int = 100
    icp_radius: float = 0.3
    icp_max_iters: int = 50
    icp_tol: float = 1e-6
    icp_min_radius: Optional[float] = None


@dataclass
class AlignmentResult:
    t_rel: Pose
    rms_residual: float
    inlier_fraction: float
    converged: bool
    iterations: int = 0


def _residuals(pose, src, dst):
    return np.linalg.norm(transform_point(pose, src) - dst, axis=1)


def coarse_align(src, dst, inlier_threshold: float = 0.25, iters: int = 100, rng=None) -> tuple[Pose, np.ndarray]:
    """Rigid transform taking matched points ``src`` onto ``dst``, robust to outliers.

    Every triple is tried when there are at most ``iters`` of them, otherwise
    ``iters`` random triples.  The winner is the hypothesis with the most
    inliers (ties broken by inlier RMS), refit on its inliers.  Returns the
    pose and the inlier mask.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    n = len(src)
    if n < 3 or len(dst) != n:
        raise InsufficientMatchesError(f"need at least 3 matched pairs, got {n}")
    if n == 3:
        return fit_rigid(src, dst), np.ones(3, dtype=bool)
    if math.comb(n, 3) <= iters:
        triples = itertools.combinations(range(n), 3)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        triples = (tuple(rng.choice(n, 3, replace=False)) for _ in range(iters))
    best_key, best_mask = None, None
    for tri in triples:
        idx = list(tri)
        try:
            hyp = fit_rigid(src[idx], dst[idx])
        except DegenerateInputError:
            continue
        res = _residuals(hyp, src, dst)
        mask = res <= inlier_threshold
        key = (int(mask.sum()), -float(np.sqrt(np.mean(res[mask] ** 2))) if mask.any() else -np.inf)
        if best_key is None or key > best_key:
            best_key, best_mask = key, mask
    if best_mask is None or best_mask.sum() < 3:
        return fit_rigid(src, dst), np.ones(n, dtype=bool)
    try:
        return fit_rigid(src[best_mask], dst[best_mask]), best_mask
    except DegenerateInputError:
        return fit_rigid(src, dst), np.ones(n, dtype=bool)


def _truncated_rms(d, radius):
    return float(np.sqrt(np.mean(np.minimum(d, radius) ** 2)))


def icp_refine(src, dst, init: Pose = None, radius: float = 0.3, max_iters: int = 50,
               tol: float = 1e-6, min_radius: Optional[float] = None) -> AlignmentResult:
    """Point-to-point ICP from ``init``.

    Correspondences are nearest neighbours within ``radius``.  Each step
    refits on the current correspondences and is accepted only if the
    truncated RMS (distances capped at the radius) does not increase, so the
    reported residual never grows along accepted steps.  With ``min_radius``
    the radius is halved after each convergence until it reaches
    ``min_radius``, which sheds correspondences on surface seen from only one
    side when the clouds overlap partially.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if len(src) < 10 or len(dst) < 10:
        raise InsufficientMatchesError("ICP needs at least 10 points per cloud")
    init = Pose.identity() if init is None else init
    final_radius = radius if min_radius is None else min(min_radius, radius)
    tree = cKDTree(dst)
    pose = init
    d, nn = tree.query(transform_point(pose, src), distance_upper_bound=radius)
    ok = np.isfinite(d)
    if ok.sum() < 3:
        return AlignmentResult(init, float("nan"), 0.0, False, 0)
    rms = _truncated_rms(d, radius)
    converged = False
    it = 0
    while it < max_iters:
        it += 1
        step = np.inf
        try:
            cand = fit_rigid(src[ok], dst[nn[ok]])
        except DegenerateInputError:
            cand = None
        if cand is not None:
            d2, nn2 = tree.query(transform_point(cand, src), distance_upper_bound=radius)
            ok2 = np.isfinite(d2)
            rms2 = _truncated_rms(d2, radius)
            if ok2.sum() >= 3 and rms2 <= rms:
                step = float(np.linalg.norm(se3_log(compose(inverse(pose), cand))))
                pose, d, nn, ok, rms = cand, d2, nn2, ok2, rms2
            else:
                step = 0.0
        if step < tol:
            if radius <= final_radius:
                converged = True
                break
            radius = max(radius / 2.0, final_radius)
            d, nn = tree.query(transform_point(pose, src), distance_upper_bound=radius)
            ok = np.isfinite(d)
            if ok.sum() < 3:
                break
            rms = _truncated_rms(d, radius)
    return AlignmentResult(pose, rms, float(ok.mean()), converged, it)


def estimate_drift(match, local_graph, global_graph, local_points, global_points,
                   params: AlignParams = None, rng=None) -> AlignmentResult:
    """Drift from a verified graph match.

    ``match.pairs`` holds (global vertex, local vertex) pairs;
    ``local_points`` / ``global_points`` map vertex index to that object's
    point cloud.
    """
    params = params or AlignParams()
    pairs = match.pairs if hasattr(match, "pairs") else match
    if len(pairs) < 3:
        raise InsufficientMatchesError(f"need at least 3 matched objects, got {len(pairs)}")
    js = [j for j, _ in pairs]
    ks = [k for _, k in pairs]
    coarse, inliers = coarse_align(local_graph.centroids[ks], global_graph.centroids[js],
                                   params.inlier_threshold, params.ransac_iters, rng)
    src = np.concatenate([local_points[k] for k, keep in zip(ks, inliers) if keep])
    dst = np.concatenate([global_points[j] for j, keep in zip(js, inliers) if keep])
    if len(src) < 10 or len(dst) < 10:
        res = _residuals(coarse, local_graph.centroids[ks], global_graph.centroids[js])[inliers]
        return AlignmentResult(coarse, float(np.sqrt(np.mean(res ** 2))), float(inliers.mean()), False, 0)
    fine = icp_refine(src, dst, coarse, params.icp_radius, params.icp_max_iters, params.icp_tol,
                      params.icp_min_radius)
    if not np.isfinite(fine.rms_residual):
        res = _residuals(coarse, local_graph.centroids[ks], global_graph.centroids[js])[inliers]
        return AlignmentResult(coarse, float(np.sqrt(np.mean(res ** 2))), float(inliers.mean()), False, 0)
    return fine
