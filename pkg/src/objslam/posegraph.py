"""Object-level pose graph and its Levenberg-Marquardt optimisation.

Camera nodes ``T_wi`` are chained by odometry edges; object nodes ``T_wo``
are tied to the cameras that observed them.  Residuals::

    e_cc = log(Z^-1 T_wi^-1 T_wi+1)
    e_oc = log(Z^-1 T_wo^-1 T_wi)

Poses are updated on the right, ``T <- T exp(delta)``, and the first camera
node is held fixed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .geom import (DomainError, Pose, ad_twist, adjoint, compose, compose_batch, exp_batch, inverse,
                   inverse_batch, log_batch, se3_log)

FD_STEP = 1e-6
INFO_FLOOR_SIGMA = 1e-6


class GraphReferenceError(KeyError):
    """An edge refers to a node that does not exist."""


class NumericalFailure(RuntimeError):
    pass


def information_matrix(sigma_t: float, sigma_r: float, floor: float = INFO_FLOOR_SIGMA) -> np.ndarray:
    """Diagonal information for (rho, phi) twists with per-axis std ``sigma_t`` / ``sigma_r``."""
    st, sr = max(sigma_t, floor), max(sigma_r, floor)
    return np.diag([1 / st**2] * 3 + [1 / sr**2] * 3)


@dataclass
class Edge:
    a: int            # cc: camera i;   oc: object id
    b: int            # cc: camera i+1; oc: camera i
    z: Pose
    info: np.ndarray


def residual_cc(t_wi: Pose, t_wi1: Pose, z: Pose) -> np.ndarray:
    return se3_log(compose(inverse(z), compose(inverse(t_wi), t_wi1)))


def residual_oc(t_wi: Pose, t_wo: Pose, z: Pose) -> np.ndarray:
    return se3_log(compose(inverse(z), compose(inverse(t_wo), t_wi)))


def _batch_residual(qa, ta, qb, tb, qz, tz):
    """log(Z^-1 A^-1 B) for stacked poses."""
    qai, tai = inverse_batch(qa, ta)
    q, t = compose_batch(qai, tai, qb, tb)
    qzi, tzi = inverse_batch(qz, tz)
    q, t = compose_batch(qzi, tzi, q, t)
    return log_batch(q, t)


def _inv_right_jacobian(xi) -> np.ndarray:
    a = ad_twist(xi)
    a2 = a @ a
    return np.eye(6) + 0.5 * a + a2 / 12.0 - (a2 @ a2) / 720.0


def analytic_jacobians(t_a: Pose, t_b: Pose, z: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians of ``log(Z^-1 A^-1 B)`` w.r.t. right perturbations of A and B.

    Uses a truncated series for the inverse right Jacobian, so it is accurate
    for small residuals; the optimiser uses finite differences instead.
    """
    e = se3_log(compose(inverse(z), compose(inverse(t_a), t_b)))
    jr_inv = _inv_right_jacobian(e)
    return -jr_inv @ adjoint(compose(inverse(t_b), t_a)), jr_inv


class PoseGraph:
    def __init__(self, first: Optional[Pose] = None):
        self.cameras: list[Pose] = [first if first is not None else Pose.identity()]
        self.objects: dict[int, Pose] = {}
        self.cc_edges: list[Edge] = []
        self.oc_edges: list[Edge] = []

    @property
    def n_cameras(self) -> int:
        return len(self.cameras)

    def add_odometry(self, z: Pose, info=None) -> int:
        info = np.eye(6) if info is None else np.asarray(info, dtype=float)
        i = len(self.cameras) - 1
        self.cameras.append(compose(self.cameras[i], z))
        self.cc_edges.append(Edge(i, i + 1, z, info))
        return i + 1

    def add_cc_edge(self, i: int, j: int, z: Pose, info=None) -> None:
        for n in (i, j):
            if not 0 <= n < len(self.cameras):
                raise GraphReferenceError(f"camera node {n} does not exist")
        self.cc_edges.append(Edge(i, j, z, np.eye(6) if info is None else np.asarray(info, dtype=float)))

    def add_object(self, obj_id: int, pose: Pose) -> None:
        self.objects[obj_id] = pose

    def add_object_constraint(self, obj_id: int, cam: int, z: Optional[Pose] = None, info=None) -> Edge:
        """oc edge; ``z`` defaults to the current estimate ``T_wo^-1 T_wi``."""
        if obj_id not in self.objects:
            raise GraphReferenceError(f"object node {obj_id} does not exist")
        if not 0 <= cam < len(self.cameras):
            raise GraphReferenceError(f"camera node {cam} does not exist")
        if z is None:
            z = compose(inverse(self.objects[obj_id]), self.cameras[cam])
        e = Edge(obj_id, cam, z, np.eye(6) if info is None else np.asarray(info, dtype=float))
        self.oc_edges.append(e)
        return e

    def recenter_object(self, obj_id: int, new_pose: Pose) -> None:
        """Move an object's frame without changing any residual (its edges are re-expressed)."""
        old = self.objects[obj_id]
        delta = compose(inverse(new_pose), old)
        edges = [e for e in self.oc_edges if e.a == obj_id]
        if edges:
            q, t = compose_batch(delta.q, delta.t, np.array([e.z.q for e in edges]),
                                 np.array([e.z.t for e in edges]))
            for e, qi, ti in zip(edges, q, t):
                e.z = Pose(qi, ti)
        self.objects[obj_id] = new_pose

    def residuals(self) -> np.ndarray:
        out = [residual_cc(self.cameras[e.a], self.cameras[e.b], e.z) for e in self.cc_edges]
        out += [residual_oc(self.cameras[e.b], self.objects[e.a], e.z) for e in self.oc_edges]
        return np.array(out).reshape(-1, 6)

    def cost(self) -> float:
        infos = [e.info for e in self.cc_edges] + [e.info for e in self.oc_edges]
        r = self.residuals()
        return float(sum(ri @ w @ ri for ri, w in zip(r, infos)))

    def copy(self) -> "PoseGraph":
        g = PoseGraph(self.cameras[0])
        g.cameras = list(self.cameras)
        g.objects = dict(self.objects)
        g.cc_edges = [Edge(e.a, e.b, e.z, e.info) for e in self.cc_edges]
        g.oc_edges = [Edge(e.a, e.b, e.z, e.info) for e in self.oc_edges]
        return g

    def trajectory(self) -> list[Pose]:
        return list(self.cameras)


def apply_loop_correction(g: PoseGraph, t_rel: Pose, k: int, matched_objects, info=None) -> list[Edge]:
    """Re-seed camera ``k`` at ``t_rel * T_w'k`` and tie it to each matched global object.

    The new oc edges take their measurement from the corrected poses, so they
    start with zero residual.
    """
    g.cameras[k] = compose(t_rel, g.cameras[k])
    return [g.add_object_constraint(oid, k, None, info) for oid in matched_objects]


@dataclass
class OptimizeResult:
    initial_cost: float
    final_cost: float
    iterations: int
    history: list = field(default_factory=list)
    converged: bool = False


class _Problem:
    """Flattened view of a graph for one LM run."""

    def __init__(self, g: PoseGraph):
        self.g = g
        self.n_cam = len(g.cameras)
        self.obj_ids = sorted(g.objects)
        self.obj_index = {oid: i for i, oid in enumerate(self.obj_ids)}
        # variable blocks: cameras 1..n-1, then objects
        self.n_var = (self.n_cam - 1) + len(self.obj_ids)
        cc, oc = g.cc_edges, g.oc_edges
        for e in oc:
            if e.a not in self.obj_index:
                raise GraphReferenceError(f"object node {e.a} does not exist")
        self.cc_a = np.array([e.a for e in cc], dtype=int)
        self.cc_b = np.array([e.b for e in cc], dtype=int)
        self.oc_o = np.array([self.obj_index[e.a] for e in oc], dtype=int)
        self.oc_c = np.array([e.b for e in oc], dtype=int)
        self.zq = np.array([e.z.q for e in cc + oc]).reshape(-1, 4)
        self.zt = np.array([e.z.t for e in cc + oc]).reshape(-1, 3)
        infos = np.array([e.info for e in cc + oc]).reshape(-1, 6, 6)
        self.sqrt_info = np.transpose(np.linalg.cholesky(infos), (0, 2, 1)) if len(infos) else infos
        self.n_cc = len(cc)

    def pack(self):
        g = self.g
        cq = np.array([p.q for p in g.cameras])
        ct = np.array([p.t for p in g.cameras])
        oq = np.array([g.objects[i].q for i in self.obj_ids]).reshape(-1, 4)
        ot = np.array([g.objects[i].t for i in self.obj_ids]).reshape(-1, 3)
        return cq, ct, oq, ot

    def unpack(self, state):
        cq, ct, oq, ot = state
        g = self.g
        g.cameras = [Pose(q, t) for q, t in zip(cq, ct)]
        for i, oid in enumerate(self.obj_ids):
            g.objects[oid] = Pose(oq[i], ot[i])

    def cam_var(self, idx):
        return idx - 1              # -1 for the fixed node

    def obj_var(self, idx):
        return self.n_cam - 1 + idx

    def raw_residuals(self, state, pert=None):
        """Stacked residuals; ``pert`` = (edge block, side, twist) perturbs one endpoint of every edge."""
        cq, ct, oq, ot = state
        nc = self.n_cc
        qa = np.concatenate([cq[self.cc_a], oq[self.oc_o]]).reshape(-1, 4)
        ta = np.concatenate([ct[self.cc_a], ot[self.oc_o]]).reshape(-1, 3)
        qb = np.concatenate([cq[self.cc_b], cq[self.oc_c]]).reshape(-1, 4)
        tb = np.concatenate([ct[self.cc_b], ct[self.oc_c]]).reshape(-1, 3)
        if pert is not None:
            side, twist = pert
            dq, dt = exp_batch(np.broadcast_to(twist, (len(qa), 6)))
            if side == 0:
                qa, ta = compose_batch(qa, ta, dq, dt)
            else:
                qb, tb = compose_batch(qb, tb, dq, dt)
        return _batch_residual(qa, ta, qb, tb, self.zq, self.zt)

    def whiten(self, r):
        return np.einsum("eij,ej->ei", self.sqrt_info, r)

    def cost(self, state) -> float:
        try:
            r = self.whiten(self.raw_residuals(state))
        except DomainError:
            return math.inf
        return float(np.sum(r * r))

    def jacobian(self, state):
        """Sparse whitened Jacobian by central differences, all edges at once."""
        n_e = len(self.zq)
        blocks = []
        for side in (0, 1):
            jac = np.empty((n_e, 6, 6))
            for d in range(6):
                step = np.zeros(6)
                step[d] = FD_STEP
                rp = self.raw_residuals(state, (side, step))
                rm = self.raw_residuals(state, (side, -step))
                jac[:, :, d] = (rp - rm) / (2 * FD_STEP)
            blocks.append(np.einsum("eij,ejk->eik", self.sqrt_info, jac))
        var_a = np.concatenate([self.cam_var(self.cc_a), self.obj_var(self.oc_o)]).astype(int)
        var_b = np.concatenate([self.cam_var(self.cc_b), self.cam_var(self.oc_c)]).astype(int)
        rows, cols, vals = [], [], []
        r_idx = (np.arange(n_e)[:, None, None] * 6 + np.arange(6)[None, :, None]) * np.ones((1, 1, 6), int)
        for var, jac in ((var_a, blocks[0]), (var_b, blocks[1])):
            keep = var >= 0
            c_idx = (var[:, None, None] * 6 + np.arange(6)[None, None, :]) * np.ones((1, 6, 1), int)
            rows.append(r_idx[keep].ravel())
            cols.append(c_idx[keep].ravel())
            vals.append(jac[keep].ravel())
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(6 * n_e, 6 * self.n_var))

    def retract(self, state, delta):
        cq, ct, oq, ot = state
        d = delta.reshape(-1, 6)
        nc = self.n_cam - 1
        cq, ct = cq.copy(), ct.copy()
        if nc:
            eq, et = exp_batch(d[:nc])
            cq[1:], ct[1:] = compose_batch(cq[1:], ct[1:], eq, et)
        if len(oq):
            eq, et = exp_batch(d[nc:])
            oq, ot = compose_batch(oq, ot, eq, et)
        return cq, ct, oq, ot


def optimize(g: PoseGraph, max_iters: int = 50, tol: float = 1e-10, lam: float = 1e-4,
             callback=None) -> OptimizeResult:
    """Levenberg-Marquardt on the information-weighted residuals, in place.

    Only cost-decreasing steps are accepted.  Stops when the relative cost
    decrease falls below ``tol``, the cost reaches zero, the damping runs
    away, or after ``max_iters`` accepted or rejected steps.
    """
    prob = _Problem(g)
    state = prob.pack()
    cost = prob.cost(state)
    if not math.isfinite(cost):
        raise NumericalFailure("initial cost is not finite")
    history = [cost]
    res = OptimizeResult(cost, cost, 0, history)
    if prob.n_var == 0 or len(prob.zq) == 0 or cost < 1e-24:
        res.converged = True
        return res
    it = 0
    while it < max_iters:
        it += 1
        r = prob.whiten(prob.raw_residuals(state)).ravel()
        jac = prob.jacobian(state)
        h = (jac.T @ jac).tocsc()
        grad = jac.T @ r
        diag = h.diagonal()
        damp = lam * np.maximum(diag, 1e-9 * max(diag.max(), 1.0))
        accepted = False
        while lam < 1e12:
            delta = spsolve((h + sp.diags(damp)).tocsc(), -grad)
            if not np.all(np.isfinite(delta)):
                raise NumericalFailure("non-finite LM step")
            cand = prob.retract(state, delta)
            new_cost = prob.cost(cand)
            if math.isfinite(new_cost) and new_cost < cost:
                accepted = True
                lam = max(lam / 10.0, 1e-12)
                break
            lam *= 10.0
            damp = lam * np.maximum(diag, 1e-9 * max(diag.max(), 1.0))
        if not accepted:
            res.converged = True
            break
        drop = (cost - new_cost) / cost
        state, cost = cand, new_cost
        history.append(cost)
        if callback is not None:
            callback(it, cost)
        if drop < tol or cost < 1e-24:
            res.converged = True
            break
    prob.unpack(state)
    res.final_cost = cost
    res.iterations = it
    return res


def write_trajectory(path, poses, frame_indices=None) -> None:
    """One line per pose: ``frame_index tx ty tz qx qy qz qw``."""
    idx = range(len(poses)) if frame_indices is None else frame_indices
    with open(path, "w") as f:
        for i, p in zip(idx, poses):
            w, x, y, z = p.q
            tx, ty, tz = p.t
            f.write(f"{i} {tx:.9f} {ty:.9f} {tz:.9f} {x:.9f} {y:.9f} {z:.9f} {w:.9f}\n")


def read_trajectory(path) -> tuple[list[int], list[Pose]]:
    idx, poses = [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            i, tx, ty, tz, x, y, z, w = parts
            idx.append(int(i))
            poses.append(Pose(np.array([float(w), float(x), float(y), float(z)]),
                              np.array([float(tx), float(ty), float(tz)])))
    return idx, poses
