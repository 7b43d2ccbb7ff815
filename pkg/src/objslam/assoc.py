"""Object-level data association.

Cost between a map object (or track) ``j`` and a detection ``k``::

    L(j, k) = 1 - W(j, k) * p(l_k | o_j)
    W(j, k) = lam * IoU(m_j, m_k) + (1 - lam) * max_e <e, e_k>

where ``m_j`` is the object's predicted mask (the previous-frame mask for a
track) and ``p(l_k | o_j)`` marginalises the confusion matrix over the
object's label distribution.  Matching is a rectangular linear assignment
with post-solve gating.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .assign import solve_lap

NN_IOU_THRESHOLD = 0.3
LABEL_SMOOTHING = 0.9


@dataclass
class Detection:
    """One instance-segmentation output: mask, label, confidence, unit embedding.

    ``gt_id`` is simulator truth carried for evaluation only; association
    never reads it.
    """

    mask: np.ndarray
    label: int
    confidence: float
    embedding: np.ndarray
    gt_id: Optional[int] = None

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.embedding = np.asarray(self.embedding, dtype=float)
        if not self.mask.any():
            raise ValueError("detection mask has no set pixel")
        norm = np.linalg.norm(self.embedding)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"embedding must be unit norm, got {norm:.6g}")


@dataclass
class AssociationParams:
    lam: float = 0.5
    gate: float = 0.7
    min_track: int = 3
    confidence_floor: float = 0.5
    max_embeddings: int = 16
    max_track_age: int = 2

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.min_track < 1:
            raise ValueError("min_track must be >= 1")


def confusion_matrix(n_classes: int, eps: float) -> np.ndarray:
    """Row-stochastic ``p[true, observed]``: 1 - eps on the diagonal, eps spread uniformly."""
    if n_classes == 1:
        return np.ones((1, 1))
    p = np.full((n_classes, n_classes), eps / (n_classes - 1))
    np.fill_diagonal(p, 1.0 - eps)
    return p


def check_confusion(cm) -> np.ndarray:
    cm = np.asarray(cm, dtype=float)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError("confusion matrix must be square")
    if np.any(cm < 0) or not np.allclose(cm.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("confusion matrix rows must be non-negative and sum to 1")
    return cm


def averaged_label_dist(counts) -> np.ndarray:
    """Mean of one-hot label observations.

    A single observation is smoothed (0.9 on the observed class, the rest
    spread uniformly) so one noisy label does not zero out the others.
    """
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    if total <= 0:
        return np.full(len(counts), 1.0 / len(counts))
    if total == 1 and len(counts) > 1:
        dist = np.full(len(counts), (1.0 - LABEL_SMOOTHING) / (len(counts) - 1))
        dist[int(np.argmax(counts))] = LABEL_SMOOTHING
        return dist
    return counts / total


def mask_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = np.count_nonzero(a & b)
    union = np.count_nonzero(a) + np.count_nonzero(b) - inter
    return inter / union if union else 0.0


def embedding_affinity(stored, query) -> float:
    """Largest cosine similarity between ``query`` and any stored embedding, floored at 0."""
    stored = np.atleast_2d(np.asarray(stored, dtype=float))
    if stored.size == 0:
        raise ValueError("embedding set is empty")
    return float(max(0.0, np.max(stored @ np.asarray(query, dtype=float))))


def pairwise_iou(masks_a: Sequence[np.ndarray], masks_b: Sequence[np.ndarray]) -> np.ndarray:
    """IoU for every (a, b) pair, via one matrix product over flattened masks."""
    if len(masks_a) == 0 or len(masks_b) == 0:
        return np.zeros((len(masks_a), len(masks_b)))
    fa = np.stack([np.asarray(m, dtype=bool).ravel() for m in masks_a]).astype(np.float32)
    fb = np.stack([np.asarray(m, dtype=bool).ravel() for m in masks_b]).astype(np.float32)
    if fa.shape[1] != fb.shape[1]:
        raise ValueError("mask shapes differ")
    inter = (fa @ fb.T).astype(float)
    union = fa.sum(axis=1)[:, None] + fb.sum(axis=1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.maximum(union, 1.0), 0.0)
    return iou


def build_cost_matrix(objects, detections: Sequence[Detection], cm, params: AssociationParams,
                      masks=None) -> np.ndarray:
    """N x M association cost matrix with entries in [0, 1].

    ``objects`` need ``label_dist`` and ``embeddings``; their masks come from
    ``masks`` when given, otherwise from each object's ``mask`` attribute
    (the predicted mask for landmarks, the last mask for tracks).
    """
    n, m = len(objects), len(detections)
    if n == 0 or m == 0:
        return np.zeros((n, m))
    if masks is None:
        masks = [o.mask for o in objects]
    iou = pairwise_iou(masks, [d.mask for d in detections])
    q = np.stack([d.embedding for d in detections])
    aff = np.stack([np.max(np.atleast_2d(np.asarray(list(o.embeddings))) @ q.T, axis=0) for o in objects])
    aff = np.clip(aff, 0.0, 1.0)
    w = params.lam * iou + (1.0 - params.lam) * aff
    label_dist = np.stack([o.label_dist for o in objects])
    det_labels = np.array([d.label for d in detections])
    p = label_dist @ np.asarray(cm, dtype=float)[:, det_labels]
    return np.clip(1.0 - w * p, 0.0, 1.0)


@dataclass
class AssociationResult:
    matches: list[tuple[int, int]]          # (object id, detection index)
    unmatched_detections: list[int]
    cost: Optional[np.ndarray] = None


def associate(objects, detections, cm, params: AssociationParams, masks=None) -> AssociationResult:
    """Globally optimal object/detection matching with gating."""
    if len(detections) == 0:
        return AssociationResult([], [], np.zeros((len(objects), 0)))
    if len(objects) == 0:
        return AssociationResult([], list(range(len(detections))), np.zeros((0, len(detections))))
    cost = build_cost_matrix(objects, detections, cm, params, masks)
    sol = solve_lap(cost, gate=params.gate)
    matches = [(objects[r].id, k) for r, k in sol.pairs]
    matched = {k for _, k in matches}
    unmatched = [k for k in range(len(detections)) if k not in matched]
    return AssociationResult(matches, unmatched, cost)


def nn_baseline_associate(objects, detections, masks=None) -> AssociationResult:
    """Greedy nearest-neighbour association on mask IoU alone.

    Detections are visited in order; each takes the unclaimed object with the
    highest IoU above 0.3.
    """
    if masks is None:
        masks = [o.mask for o in objects]
    iou = pairwise_iou(masks, [d.mask for d in detections])
    taken: set[int] = set()
    matches, unmatched = [], []
    for k in range(len(detections)):
        best, best_iou = None, NN_IOU_THRESHOLD
        for j in range(len(objects)):
            if j in taken:
                continue
            if iou[j, k] > best_iou:
                best, best_iou = j, iou[j, k]
        if best is None:
            unmatched.append(k)
        else:
            taken.add(best)
            matches.append((objects[best].id, k))
    return AssociationResult(matches, unmatched, None)


# ---------------------------------------------------------------------------
# multi-frame instance tracking


@dataclass
class Track:
    id: int
    mask: np.ndarray
    label_counts: np.ndarray
    embeddings: deque
    hits: int = 1
    misses: int = 0
    history: list = field(default_factory=list)   # detection refs seen by this track

    @property
    def label_dist(self) -> np.ndarray:
        return averaged_label_dist(self.label_counts)


def _new_track(track_id, det: Detection, n_classes, params, ref):
    counts = np.zeros(n_classes)
    counts[det.label] += 1
    tr = Track(track_id, det.mask, counts, deque([det.embedding], maxlen=params.max_embeddings))
    tr.history.append(ref)
    return tr


def track_instances(tracks: list[Track], detections: Sequence[Detection], cm, params: AssociationParams,
                    next_id: int, refs=None):
    """Advance tracks by one frame.

    Detections are matched to tracks with the association cost, using each
    track's previous-frame mask in place of a predicted mask.  Returns
    ``(tracks, confirmed, next_id)`` where ``confirmed`` lists
    ``(track, detection index)`` for detections whose track has now been hit
    at least ``min_track`` times.
    """
    n_classes = np.asarray(cm).shape[0]
    refs = list(range(len(detections))) if refs is None else refs
    res = associate(tracks, detections, cm, params)
    by_id = {t.id: t for t in tracks}
    hit_ids = set()
    confirmed = []
    for tid, k in res.matches:
        tr = by_id[tid]
        d = detections[k]
        tr.mask = d.mask
        tr.label_counts[d.label] += 1
        tr.embeddings.append(d.embedding)
        tr.hits += 1
        tr.misses = 0
        tr.history.append(refs[k])
        hit_ids.add(tid)
        if tr.hits >= params.min_track:
            confirmed.append((tr, k))
    survivors = []
    for tr in tracks:
        if tr.id not in hit_ids:
            tr.misses += 1
        if tr.misses <= params.max_track_age:
            survivors.append(tr)
    for k in res.unmatched_detections:
        tr = _new_track(next_id, detections[k], n_classes, params, refs[k])
        next_id += 1
        survivors.append(tr)
        if params.min_track <= 1:
            confirmed.append((tr, k))
    confirmed.sort(key=lambda c: c[1])
    return survivors, confirmed, next_id


class InstanceTracker:
    """Stateful wrapper around ``track_instances`` for a frame stream."""

    def __init__(self, cm, params: AssociationParams):
        self.cm = check_confusion(cm)
        self.params = params
        self.tracks: list[Track] = []
        self.next_id = 0

    def step(self, detections: Sequence[Detection], refs=None):
        kept = [i for i, d in enumerate(detections) if d.confidence >= self.params.confidence_floor]
        dets = [detections[i] for i in kept]
        sub_refs = None if refs is None else [refs[i] for i in kept]
        self.tracks, confirmed, self.next_id = track_instances(
            self.tracks, dets, self.cm, self.params, self.next_id, sub_refs)
        return [(tr, kept[k]) for tr, k in confirmed]
