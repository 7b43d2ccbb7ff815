"""Rectangular linear assignment with post-solve gating.

The solver itself is SciPy's ``linear_sum_assignment``, which implements the
shortest augmenting path method of Crouse (2016).  This module pins the
contract around it: rectangular inputs in either orientation, forbidden
entries, gating, and an exact total cost.  ``brute_force_lap`` is the
enumeration oracle used by the tests.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

FORBIDDEN_COST = 1e9
BRUTE_FORCE_MAX = 8


class InvalidInputError(ValueError):
    pass


class SizeError(ValueError):
    pass


@dataclass
class Assignment:
    pairs: list[tuple[int, int]] = field(default_factory=list)
    total_cost: float = 0.0

    def as_dict(self) -> dict[int, int]:
        """Row -> column mapping."""
        return dict(self.pairs)


def _prepare(cost, forbidden):
    c = np.asarray(cost, dtype=float)
    if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] < 1:
        raise InvalidInputError(f"cost matrix must be non-empty 2-D, got shape {c.shape}")
    if forbidden is None:
        forb = np.zeros(c.shape, dtype=bool)
    else:
        forb = np.asarray(forbidden, dtype=bool)
        if forb.shape != c.shape:
            raise InvalidInputError("forbidden mask must match the cost matrix shape")
    if not np.all(np.isfinite(c[~forb])):
        raise InvalidInputError("non-forbidden costs must be finite")
    return c, forb


def _total(c, pairs):
    return math.fsum(float(c[r, k]) for r, k in pairs)


def solve_lap(cost, gate: float = math.inf, forbidden=None) -> Assignment:
    """Minimum-cost matching of an N x M cost matrix.

    Every column is assigned when N >= M (every row when N < M).  Pairs whose
    cost exceeds ``gate`` are dropped afterwards, as are forbidden pairs the
    solver was forced into.  ``total_cost`` sums the surviving pairs.
    """
    c, forb = _prepare(cost, forbidden)
    work = np.where(forb, FORBIDDEN_COST, c)
    rows, cols = linear_sum_assignment(work)
    pairs = [
        (int(r), int(k))
        for r, k in zip(rows, cols)
        if not forb[r, k] and c[r, k] <= gate
    ]
    pairs.sort(key=lambda p: p[1])
    return Assignment(pairs, _total(c, pairs))


def brute_force_lap(cost, forbidden=None) -> Assignment:
    """Exact optimum by enumerating every maximal injection (max side <= 8).

    Forbidden pairs are treated like the solver does: priced at the sentinel
    during the search and removed from the returned pairs.
    """
    c, forb = _prepare(cost, forbidden)
    n, m = c.shape
    if max(n, m) > BRUTE_FORCE_MAX:
        raise SizeError(f"brute force limited to {BRUTE_FORCE_MAX} per side, got {c.shape}")
    work = np.where(forb, FORBIDDEN_COST, c)
    best = None
    best_pairs: list[tuple[int, int]] = []
    if n >= m:
        for rows in itertools.permutations(range(n), m):
            pairs = [(r, k) for k, r in enumerate(rows)]
            total = math.fsum(work[r, k] for r, k in pairs)
            if best is None or total < best:
                best, best_pairs = total, pairs
    else:
        for cols in itertools.permutations(range(m), n):
            pairs = [(r, k) for r, k in enumerate(cols)]
            total = math.fsum(work[r, k] for r, k in pairs)
            if best is None or total < best:
                best, best_pairs = total, pairs
    pairs = sorted(((r, k) for r, k in best_pairs if not forb[r, k]), key=lambda p: p[1])
    return Assignment(pairs, _total(c, pairs))
