"""Exact minimum-cost bipartite assignment with forbidden pairs.

One solver backs the training matcher, the evaluation matcher and the
tracking-by-detection linker. ``scipy.optimize.linear_sum_assignment`` does the
heavy lifting; this module adds forbidden entries, maximum-cardinality
semantics on rectangular matrices and a deterministic choice among ties.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from scipy.optimize import linear_sum_assignment

FORBIDDEN = math.inf

# Relative slack when deciding that two matchings cost the same.
TIE_TOLERANCE = 1e-9


class Assignment(NamedTuple):
    pairs: tuple[tuple[int, int], ...]
    total_cost: float

    def as_dict(self) -> dict[int, int]:
        return dict(self.pairs)


def _as_cost_matrix(cost, forbidden) -> np.ndarray:
    c = np.array(cost, dtype=np.float64, copy=True)
    if c.ndim != 2:
        if c.size == 0:
            return c.reshape(0, 0)
        raise ValueError(f"cost matrix must be 2-D, got shape {c.shape}")
    if np.isnan(c).any():
        raise ValueError("cost matrix contains NaN")
    if np.isneginf(c).any():
        raise ValueError("cost matrix contains -inf")
    if forbidden is not None:
        mask = np.asarray(forbidden, dtype=bool)
        if mask.shape != c.shape:
            raise ValueError(f"forbidden mask shape {mask.shape} != cost shape {c.shape}")
        c[mask] = FORBIDDEN
    return c


def _optimum(c: np.ndarray) -> tuple[int, float, list[tuple[int, int]]]:
    """Max-cardinality, min-cost matching of ``c`` (inf = forbidden)."""
    if c.size == 0:
        return 0, 0.0, []
    finite = np.isfinite(c)
    if not finite.any():
        return 0, 0.0, []
    lo = float(c[finite].min())
    span = float(c[finite].max()) - lo
    k = min(c.shape)
    # Any extra forbidden pair outweighs every possible finite total.
    big = (k + 1) * (span + 1.0)
    shifted = np.where(finite, c - lo, big)
    rows, cols = linear_sum_assignment(shifted)
    pairs = [(int(r), int(q)) for r, q in zip(rows, cols) if finite[r, q]]
    total = math.fsum(float(c[r, q]) for r, q in pairs)
    return len(pairs), total, pairs


def _same_optimum(card: int, cost: float, target_card: int, target_cost: float) -> bool:
    if card != target_card:
        return False
    return abs(cost - target_cost) <= TIE_TOLERANCE * max(1.0, abs(target_cost))


def solve_assignment(cost, forbidden=None) -> Assignment:
    """Solve the rectangular assignment problem over non-forbidden entries.

    Entries equal to ``FORBIDDEN`` (or flagged in the optional boolean mask) may
    not be paired. The result has maximum cardinality, minimum total cost among
    those, and is the lexicographically smallest row-to-column mapping among
    all optimal matchings (an unassigned row sorts after every column).
    """
    c = _as_cost_matrix(cost, forbidden)
    if c.size == 0:
        return Assignment((), 0.0)

    finite = np.isfinite(c)
    row_ids = np.flatnonzero(finite.any(axis=1))
    col_ids = np.flatnonzero(finite.any(axis=0))
    if row_ids.size == 0:
        return Assignment((), 0.0)
    sub = c[np.ix_(row_ids, col_ids)]
    sub_finite = finite[np.ix_(row_ids, col_ids)]

    target_card, target_cost, current = _optimum(sub)
    current_map = dict(current)

    chosen: dict[int, int] = {}
    used_cols: set[int] = set()
    fixed_cost = 0.0
    n_rows, n_cols = sub.shape
    for i in range(n_rows):
        later_rows = np.arange(i + 1, n_rows)
        incumbent = current_map.get(i)
        candidates = [
            j
            for j in range(n_cols)
            if j not in used_cols and sub_finite[i, j] and (incumbent is None or j <= incumbent)
        ]
        candidates.append(None)
        for j in candidates:
            if j == incumbent:
                break
            free_cols = np.array([q for q in range(n_cols) if q not in used_cols and q != j], dtype=int)
            rest_card, rest_cost, rest_pairs = _optimum(sub[np.ix_(later_rows, free_cols)])
            card = len(chosen) + rest_card + (0 if j is None else 1)
            total = math.fsum([fixed_cost, rest_cost, 0.0 if j is None else float(sub[i, j])])
            if _same_optimum(card, total, target_card, target_cost):
                current_map = {r: q for r, q in current_map.items() if r < i}
                if j is not None:
                    current_map[i] = j
                current_map.update({int(later_rows[r]): int(free_cols[q]) for r, q in rest_pairs})
                incumbent = j
                break
        if incumbent is not None:
            chosen[i] = incumbent
            used_cols.add(incumbent)
            fixed_cost = math.fsum([fixed_cost, float(sub[i, incumbent])])

    pairs = tuple(sorted((int(row_ids[r]), int(col_ids[q])) for r, q in chosen.items()))
    total_cost = math.fsum(float(c[r, q]) for r, q in pairs)
    return Assignment(pairs, total_cost)
