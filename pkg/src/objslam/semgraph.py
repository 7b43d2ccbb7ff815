"""Semantic graphs over object maps and their matching.

Vertices are objects (centroid, label, embeddings); an edge joins two objects
that were observed in the same local-map window and carries their centroid
distance.  Matching maximises ``x^T S x`` over partial assignment vectors
``x`` (index ``j * M + k`` pairs target vertex ``j`` with query vertex ``k``)
by taking the principal eigenvector of ``S`` and discretising it with a
linear assignment.
"""
from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.linalg.lapack import dstemr

from .assign import solve_lap

BRUTE_FORCE_QAP_MAX = 5


class NoFeasibleMatchError(ValueError):
    """The reward matrix has no positive entry."""


@dataclass
class SemanticGraph:
    ids: list
    centroids: np.ndarray                 # (n, 3)
    labels: np.ndarray                    # (n,) int
    edges: np.ndarray                     # (E, 2) int, i < j
    lengths: np.ndarray                   # (E,)
    embeddings: list = field(default_factory=list)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=float).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=int).reshape(-1)
        self.edges = np.asarray(self.edges, dtype=int).reshape(-1, 2)
        self.lengths = np.asarray(self.lengths, dtype=float).reshape(-1)

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @classmethod
    def from_edges(cls, centroids, labels, edges, ids=None, embeddings=None) -> "SemanticGraph":
        """Graph with lengths computed from the centroids; edges are canonicalised and deduplicated."""
        c = np.asarray(centroids, dtype=float).reshape(-1, 3)
        e = np.asarray(list(edges), dtype=int).reshape(-1, 2)
        e = e[e[:, 0] != e[:, 1]]
        e = np.unique(np.sort(e, axis=1), axis=0)
        lengths = np.linalg.norm(c[e[:, 0]] - c[e[:, 1]], axis=1) if len(e) else np.zeros(0)
        ids = list(range(len(c))) if ids is None else list(ids)
        return cls(ids, c, labels, e, lengths, list(embeddings) if embeddings is not None else [])

    def adjacency(self) -> sp.csr_matrix:
        n = self.n
        if self.n_edges == 0:
            return sp.csr_matrix((n, n))
        r = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        c = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        return sp.csr_matrix((np.ones(len(r)), (r, c)), shape=(n, n))

    def transformed(self, pose) -> "SemanticGraph":
        from .geom import transform_point
        return SemanticGraph(list(self.ids), transform_point(pose, self.centroids) if self.n else self.centroids,
                             self.labels.copy(), self.edges.copy(), self.lengths.copy(), list(self.embeddings))

    def to_dict(self) -> dict:
        return {
            "vertices": [
                {"id": int(i), "centroid": [float(x) for x in c], "label": int(l)}
                for i, c, l in zip(self.ids, self.centroids, self.labels)
            ],
            "edges": [[int(a), int(b), float(d)] for (a, b), d in zip(self.edges, self.lengths)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SemanticGraph":
        verts = d["vertices"]
        edges = d.get("edges", [])
        return cls(
            [v["id"] for v in verts],
            [v["centroid"] for v in verts],
            [v["label"] for v in verts],
            [e[:2] for e in edges],
            [e[2] for e in edges],
        )


def extract_graph(objects: Iterable, covis: Iterable[tuple]) -> SemanticGraph:
    """One vertex per object, one edge per co-visible id pair present in the map."""
    objects = list(objects)
    ids = [o.id for o in objects]
    index = {oid: i for i, oid in enumerate(ids)}
    edges = [(index[a], index[b]) for a, b in covis if a in index and b in index and a != b]
    centroids = np.array([o.centroid for o in objects]).reshape(-1, 3)
    labels = np.array([o.label for o in objects], dtype=int)
    embeddings = [np.asarray(list(o.embeddings)) for o in objects]
    return SemanticGraph.from_edges(centroids, labels, edges, ids, embeddings)


@dataclass
class RewardMatrix:
    """Reward matrix over candidate pairs.

    Only label-consistent (target, query) pairs can carry reward, so the
    matrix is stored as ``core`` over those candidates, whose flat indices
    ``j * M + k`` are listed in ``cand``.  ``s`` expands it to NM x NM.
    """
    core: sp.csr_matrix
    cand: np.ndarray
    n_rows: int       # target vertices
    m_cols: int       # query vertices
    _full: Optional[sp.csr_matrix] = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return self.n_rows * self.m_cols

    @property
    def sparsity(self) -> float:
        total = self.size ** 2
        return 1.0 - self.core.nnz / total if total else 1.0

    @property
    def s(self) -> sp.csr_matrix:
        if self._full is None:
            counts = np.zeros(self.size, dtype=np.int64)
            counts[self.cand] = np.diff(self.core.indptr)
            indptr = np.concatenate([[0], np.cumsum(counts)])
            self._full = sp.csr_matrix((self.core.data, self.cand[self.core.indices], indptr),
                                       shape=(self.size, self.size))
        return self._full

    def expand(self, v: np.ndarray) -> np.ndarray:
        out = np.zeros(self.size)
        out[self.cand] = v
        return out


def _directed(g: SemanticGraph):
    e = g.edges.astype(np.int32)
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    return src, dst, np.concatenate([g.lengths, g.lengths])


def build_reward_matrix(gq: SemanticGraph, gt: SemanticGraph, mu: float = 2.0) -> RewardMatrix:
    """Sparse NM x NM reward matrix.

    Diagonal ``(jM+k, jM+k)`` is 1 when labels of ``j`` and ``k`` agree.  For
    a query edge ``(k1, k2)`` and a target edge ``(j1, j2)`` with matching
    endpoint labels, ``(j1M+k1, j2M+k2)`` and its transpose hold
    ``exp(-mu |len_t - len_q|)``.
    """
    if mu <= 0:
        raise ValueError("mu must be positive")
    n, m = gt.n, gq.n
    size = n * m
    n_cls = int(max(gq.labels.max(initial=0), gt.labels.max(initial=0))) + 1

    cand = np.flatnonzero(gt.labels[:, None] == gq.labels[None, :])
    c_of = np.full(size, -1, dtype=np.int32)
    c_of[cand] = np.arange(len(cand))
    diag = np.arange(len(cand), dtype=np.int32)
    rows, cols, vals = [diag], [diag], [np.ones(len(diag))]

    if gq.n_edges and gt.n_edges:
        # one orientation per query edge; the reversed query edge meets the
        # reversed target edge and gives the transposed entry
        qs, qd, ql = gq.edges[:, 0].astype(np.int32), gq.edges[:, 1].astype(np.int32), gq.lengths
        ts, td, tl = _directed(gt)
        qkey = gq.labels[qs] * n_cls + gq.labels[qd]
        tkey = gt.labels[ts] * n_cls + gt.labels[td]
        order = np.argsort(tkey, kind="stable")
        ts, td, tl, tkey = ts[order], td[order], tl[order], tkey[order]
        lo = np.searchsorted(tkey, qkey, side="left")
        hi = np.searchsorted(tkey, qkey, side="right")
        cnt = hi - lo
        if cnt.sum():
            qi = np.repeat(np.arange(len(qkey)), cnt)
            starts = np.repeat(lo - np.concatenate([[0], np.cumsum(cnt)[:-1]]), cnt)
            ti = np.arange(cnt.sum()) + starts
            # matching keys guarantee both endpoints are candidate pairs
            r = c_of[(ts * m)[ti] + qs[qi]]
            c = c_of[(td * m)[ti] + qd[qi]]
            v = np.exp(-mu * np.abs(tl[ti] - ql[qi]))
            rows += [r, c]
            cols += [c, r]
            vals += [v, v]
    core = _csr(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), len(cand))
    return RewardMatrix(core, cand, n, m)


def _csr(rows, cols, vals, size: int) -> sp.csr_matrix:
    # entries are unique by construction, so the CSR arrays can be laid out
    # directly; scipy's COO conversion would sort and deduplicate them.
    # 16-bit keys take numpy's radix sort path and int32 indices avoid a
    # downcasting copy in the constructor.
    keys = rows.astype(np.uint16) if size <= 65536 else rows
    order = np.argsort(keys, kind="stable")
    idx = np.int32 if len(rows) < 2**31 else np.int64
    indptr = np.zeros(size + 1, dtype=idx)
    np.cumsum(np.bincount(rows, minlength=size), out=indptr[1:])
    return sp.csr_matrix((vals[order], cols[order].astype(idx, copy=False), indptr), shape=(size, size))


def principal_eigenvector(s, tol: float = 1e-10, max_iter: int = 10_000,
                          method: str = "lanczos") -> np.ndarray:
    """Unit-norm dominant eigenvector of a symmetric non-negative matrix.

    ``method="power"`` runs power iteration on ``S + sigma I`` with ``sigma``
    half a norm estimate, which keeps a large negative eigenvalue from making
    the plain iteration oscillate.  ``method="lanczos"`` builds the Krylov
    space of the same start vector with full reorthogonalisation and stops
    once the top Ritz residual falls below ``tol``; it needs far fewer
    products on the small eigengaps typical of reward matrices.  Both routes
    return the projection of the uniform start onto the dominant eigenspace,
    which matters when that eigenspace is degenerate.  Entries are clamped
    at zero either way.
    """
    if isinstance(s, RewardMatrix):
        return s.expand(principal_eigenvector(s.core, tol, max_iter, method))
    s = sp.csr_matrix(s) if not sp.issparse(s) else s.tocsr()
    if s.nnz == 0 or not np.any(s.data):
        raise NoFeasibleMatchError("reward matrix is all zero")
    n = s.shape[0]
    v0 = np.full(n, 1.0 / math.sqrt(n))
    if method == "lanczos":
        v = _lanczos(s, v0, tol, min(max_iter, n))
    elif method == "power":
        v = _power_iteration(s, v0, tol, max_iter)
    else:
        raise ValueError(f"unknown eigen method {method!r}")
    v = np.where(v < 0, 0.0, v)
    return v / np.linalg.norm(v)


def _lanczos(s, v0, tol, max_steps):
    basis = np.empty((max_steps, len(v0)))
    basis[0] = v0
    alpha, beta = [], []
    for k in range(max_steps):
        w = s @ basis[k]
        alpha.append(float(w @ basis[k]))
        # two passes of Gram-Schmidt keep the basis orthogonal to rounding
        for _ in range(2):
            w -= basis[:k + 1].T @ (basis[:k + 1] @ w)
        b = float(np.linalg.norm(w))
        # top Ritz pair of the tridiagonal projection (MRRR, index range)
        _, _, y, info = dstemr(np.array(alpha), np.array(beta + [0.0]), 2, 0.0, 0.0, k + 1, k + 1)
        if info != 0:
            raise np.linalg.LinAlgError(f"tridiagonal eigensolver failed ({info})")
        if b * abs(y[-1, 0]) < tol or k + 1 == max_steps:
            break
        beta.append(b)
        basis[k + 1] = w / b
    v = basis[:k + 1].T @ y[:, 0]
    return v if v.sum() >= 0 else -v


def _power_iteration(s, v, tol, max_iter):
    sigma = 0.5 * np.linalg.norm(s @ v)
    for _ in range(max_iter):
        w = s @ v + sigma * v
        w /= np.linalg.norm(w)
        if np.linalg.norm(w - v) < tol:
            return w
        v = w
    return v


@dataclass
class GraphMatch:
    pairs: list                             # (target vertex, query vertex)
    score: float
    eigenvector: Optional[np.ndarray] = None

    def query_to_target(self) -> dict:
        return {k: j for j, k in self.pairs}


def assignment_vector(pairs, n: int, m: int) -> np.ndarray:
    x = np.zeros(n * m)
    for j, k in pairs:
        x[j * m + k] = 1.0
    return x


def match_score(rm: RewardMatrix, pairs) -> float:
    x = assignment_vector(pairs, rm.n_rows, rm.m_cols)[rm.cand]
    return float(x @ (rm.core @ x))


def discretize(v, gq: SemanticGraph, gt: SemanticGraph, min_pair_score: float = 0.05) -> list:
    """Partial permutation from an eigenvector, via linear assignment on ``max - A``.

    Pairs scoring below ``min_pair_score`` times the largest entry, or with
    differing labels, are dropped; ``min_pair_score=0`` keeps every
    label-consistent pair of the assignment.
    """
    a = np.asarray(v).reshape(gt.n, gq.n)
    top = a.max()
    sol = solve_lap(top - a)
    return [
        (j, k) for j, k in sol.pairs
        if a[j, k] >= min_pair_score * top and gt.labels[j] == gq.labels[k]
    ]


def match_graphs(gq: SemanticGraph, gt: SemanticGraph, mu: float = 2.0,
                 min_pair_score: float = 0.05, max_rounds: int = 8) -> GraphMatch:
    """Spectral match, repeated on the vertices left unmatched.

    The dominant eigenvector concentrates on the strongest consistent block
    of S, so vertices outside it score near zero and get dropped.  Each later
    round re-solves on the label-consistent candidates among unmatched
    vertices and is kept only while its Rayleigh quotient exceeds 1, i.e.
    there is edge support beyond the diagonal.  Pairs that remain the only
    candidate for both vertices are added last.
    """
    if gq.n == 0 or gt.n == 0:
        raise ValueError("both graphs must be non-empty")
    rm = build_reward_matrix(gq, gt, mu)
    v = principal_eigenvector(rm)
    pairs = discretize(v, gq, gt, min_pair_score)
    cj, ck = np.divmod(rm.cand, gq.n)
    for _ in range(max_rounds - 1):
        if not pairs:
            break
        j_used, k_used = zip(*pairs)
        idx = np.flatnonzero(~np.isin(cj, j_used) & ~np.isin(ck, k_used))
        if len(idx) < 2:
            break
        sub = rm.core[idx][:, idx]
        if sub.nnz <= len(idx):
            break
        w = principal_eigenvector(sub)
        if w @ (sub @ w) <= 1.0 + 1e-9:
            break
        a = np.zeros(rm.size)
        a[rm.cand[idx]] = w
        new = [(j, k) for j, k in discretize(a, gq, gt, min_pair_score) if a[j * gq.n + k] > 0]
        if not new:
            break
        pairs = sorted(pairs + new)
    pairs = sorted(pairs + _unambiguous_singles(cj, ck, pairs))
    return GraphMatch(pairs, match_score(rm, pairs), v)


def _unambiguous_singles(cj, ck, pairs) -> list:
    """Leftover candidate pairs whose vertices have no other free candidate.

    Without edge support the eigenvector cannot rank these, but a pair that
    is the only option for both of its vertices adds its vertex reward
    without competing with anything.
    """
    j_used = {j for j, _ in pairs}
    k_used = {k for _, k in pairs}
    free = [(int(j), int(k)) for j, k in zip(cj, ck) if j not in j_used and k not in k_used]
    nj = Counter(j for j, _ in free)
    nk = Counter(k for _, k in free)
    return [(j, k) for j, k in free if nj[j] == 1 and nk[k] == 1]


def brute_force_qap(gq: SemanticGraph, gt: SemanticGraph, mu: float = 2.0) -> GraphMatch:
    """Exact maximiser of ``x^T S x`` over partial injections (graphs up to 5 vertices)."""
    if max(gq.n, gt.n) > BRUTE_FORCE_QAP_MAX:
        raise ValueError(f"brute-force QAP limited to {BRUTE_FORCE_QAP_MAX} vertices")
    rm = build_reward_matrix(gq, gt, mu)
    s = rm.s.toarray()
    m = gq.n
    options = [[None] + [j for j in range(gt.n) if gt.labels[j] == gq.labels[k]] for k in range(m)]
    best, best_pairs = -1.0, []
    for choice in itertools.product(*options):
        used = [j for j in choice if j is not None]
        if len(used) != len(set(used)):
            continue
        idx = [j * m + k for k, j in enumerate(choice) if j is not None]
        score = float(s[np.ix_(idx, idx)].sum()) if idx else 0.0
        if score > best:
            best = score
            best_pairs = sorted((j, k) for k, j in enumerate(choice) if j is not None)
    return GraphMatch(best_pairs, best, None)


def verify_loop(match: GraphMatch, gq: SemanticGraph, gt: SemanticGraph, edge_frac: float = 0.5,
                dist_tol: Optional[float] = 0.25, min_vertices: int = 3) -> bool:
    """Topology and distance consistency check on a proposed match.

    Passes when at least ``edge_frac`` of the query edges map onto target
    edges, every pairwise centroid distance among matched vertices agrees
    within ``dist_tol`` (skipped when None) and at least ``min_vertices``
    vertices are matched.
    """
    pairs = match.pairs
    if len(pairs) < min_vertices or gq.n_edges == 0:
        return False
    q2t = {k: j for j, k in pairs}
    tedges = {(int(a), int(b)) for a, b in gt.edges}
    hit = 0
    for a, b in gq.edges:
        if a in q2t and b in q2t:
            ja, jb = q2t[a], q2t[b]
            if (min(ja, jb), max(ja, jb)) in tedges:
                hit += 1
    if hit / gq.n_edges < edge_frac:
        return False
    if dist_tol is not None:
        js = np.array([j for j, _ in pairs])
        ks = np.array([k for _, k in pairs])
        dq = np.linalg.norm(gq.centroids[ks][:, None] - gq.centroids[ks][None], axis=-1)
        dt = np.linalg.norm(gt.centroids[js][:, None] - gt.centroids[js][None], axis=-1)
        if np.any(np.abs(dq - dt) > dist_tol):
            return False
    return True


# ---------------------------------------------------------------------------
# random-walk baseline


@dataclass
class WalkDescriptors:
    """Per-vertex multisets of label sequences, each sequence packed into an integer code."""
    roots: np.ndarray                 # (n,) root labels
    codes: np.ndarray                 # (n, n_walks)
    depth: int
    base: int                         # label + 1 is one digit; 0 marks a finished walk

    def counters(self) -> list[Counter]:
        return [Counter(row.tolist()) for row in self.codes]

    def sequences(self, v: int) -> list[tuple]:
        """Decode the walks of vertex ``v`` back to label tuples."""
        base = self.base
        out = []
        for code in self.codes[v]:
            seq = []
            code = int(code)
            while code:
                seq.append(code % base - 1)
                code //= base
            out.append(tuple(seq))
        return out


def random_walk_descriptors(g: SemanticGraph, n_walks: int = 200, depth: int = 4, seed=None) -> WalkDescriptors:
    """``n_walks`` uniform random walks of ``depth`` vertices from every vertex.

    A walk records the label of each visited vertex, starting with the root.
    Walks from an isolated vertex stop after the root.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = g.n
    base = int(g.labels.max(initial=0)) + 2
    adj = g.adjacency()
    indptr, indices = adj.indptr, adj.indices
    deg = np.diff(indptr)
    pos = np.repeat(np.arange(n), n_walks)
    alive = deg[pos] > 0
    codes = (g.labels[pos] + 1).astype(np.int64)
    mult = 1
    for _ in range(depth - 1):
        mult *= base
        d = deg[pos]
        step = np.floor(rng.random(len(pos)) * np.maximum(d, 1)).astype(int)
        nxt = indices[np.minimum(indptr[pos] + step, len(indices) - 1)] if len(indices) else pos
        pos = np.where(alive, nxt, pos)
        codes = codes + np.where(alive, (g.labels[pos] + 1) * mult, 0)
    return WalkDescriptors(g.labels.copy(), codes.reshape(n, n_walks), depth, base)


def _multiset_overlap(a: Counter, b: Counter) -> int:
    if len(a) > len(b):
        a, b = b, a
    return sum(min(c, b[k]) for k, c in a.items() if k in b)


def match_random_walk(desc_q: WalkDescriptors, desc_t: WalkDescriptors) -> GraphMatch:
    """Baseline matching on walk-sequence overlap.

    Each query vertex takes the same-label target vertex sharing the most
    identical walks; ties or zero overlap leave it unmatched.  When several
    query vertices claim one target, only the strictly best keeps it.
    """
    cq, ct = desc_q.counters(), desc_t.counters()
    claims: dict[int, list] = {}
    for k in range(len(cq)):
        cands = np.nonzero(desc_t.roots == desc_q.roots[k])[0]
        if len(cands) == 0:
            continue
        sims = np.array([_multiset_overlap(cq[k], ct[j]) for j in cands])
        top = sims.max()
        if top <= 0 or np.count_nonzero(sims == top) > 1:
            continue
        claims.setdefault(int(cands[np.argmax(sims)]), []).append((int(top), k))
    pairs, score = [], 0
    for j, cl in claims.items():
        cl.sort(reverse=True)
        if len(cl) > 1 and cl[0][0] == cl[1][0]:
            continue
        pairs.append((j, cl[0][1]))
        score += cl[0][0]
    pairs.sort()
    return GraphMatch(pairs, float(score), None)
