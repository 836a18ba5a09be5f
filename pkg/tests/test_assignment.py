import itertools
import math

import numpy as np
import pytest

import assignment as asg
from assignment import FORBIDDEN


def _brute_force(c: np.ndarray) -> tuple[tuple[tuple[int, int], ...], float]:
    """Enumerate injections, largest cardinality first; lexicographic tie-break."""
    n_rows, n_cols = c.shape
    for k in range(min(n_rows, n_cols), -1, -1):
        best = None
        for rows in itertools.combinations(range(n_rows), k):
            for cols in itertools.permutations(range(n_cols), k):
                if not all(math.isfinite(c[r, q]) for r, q in zip(rows, cols)):
                    continue
                total = math.fsum(c[r, q] for r, q in zip(rows, cols))
                mapping = dict(zip(rows, cols))
                key = tuple(mapping.get(r, n_cols) for r in range(n_rows))
                if best is None or total < best[0] - 1e-9 or (abs(total - best[0]) <= 1e-9 and key < best[1]):
                    best = (total, key, tuple(sorted(zip(rows, cols))))
        if best is not None:
            return best[2], best[0]
    return (), 0.0


# --- examples ---


def test_identity_matching_on_diagonal_zeros():
    c = np.ones((3, 3)) - np.eye(3)
    result = asg.solve_assignment(c)
    assert result.pairs == ((0, 0), (1, 1), (2, 2))
    assert result.total_cost == 0.0


def test_two_by_two():
    result = asg.solve_assignment([[1, 2], [2, 1]])
    assert result.pairs == ((0, 0), (1, 1))
    assert result.total_cost == 2.0


def test_more_rows_than_columns():
    result = asg.solve_assignment([[5, 1], [1, 5], [2, 2]])
    assert result.pairs == ((0, 1), (1, 0))
    assert result.total_cost == 2.0


def test_empty_matrices():
    assert asg.solve_assignment(np.zeros((0, 0))) == asg.Assignment((), 0.0)
    assert asg.solve_assignment(np.zeros((0, 4))).pairs == ()
    assert asg.solve_assignment(np.zeros((3, 0))).pairs == ()


# --- forbidden entries ---


def test_forbidden_entries_are_never_paired():
    c = np.array([[FORBIDDEN, 1.0], [FORBIDDEN, FORBIDDEN]])
    result = asg.solve_assignment(c)
    assert result.pairs == ((0, 1),)
    assert result.total_cost == 1.0


def test_cardinality_beats_cost():
    # Pairing (0,0) alone is cheapest but blocks a two-pair matching.
    c = np.array([[0.0, 100.0], [50.0, FORBIDDEN]])
    result = asg.solve_assignment(c)
    assert result.pairs == ((0, 1), (1, 0))
    assert result.total_cost == 150.0


def test_forbidden_mask_argument():
    c = np.zeros((2, 2))
    mask = np.array([[True, False], [False, False]])
    assert asg.solve_assignment(c, forbidden=mask).pairs == ((0, 1), (1, 0))


def test_all_forbidden_gives_empty_matching():
    assert asg.solve_assignment(np.full((3, 2), FORBIDDEN)) == asg.Assignment((), 0.0)


def test_rejects_nan():
    with pytest.raises(ValueError):
        asg.solve_assignment([[math.nan]])


# --- determinism ---


def test_ties_pick_lexicographically_smallest_mapping():
    result = asg.solve_assignment(np.zeros((3, 3)))
    assert result.pairs == ((0, 0), (1, 1), (2, 2))


def test_unassigned_row_sorts_after_columns():
    # Either row may take the single column; row 0 gets it.
    result = asg.solve_assignment(np.array([[1.0], [1.0]]))
    assert result.pairs == ((0, 0),)


# --- properties ---


def test_matches_brute_force_on_random_matrices():
    rng = np.random.default_rng(20240601)
    for _ in range(1000):
        n_rows, n_cols = rng.integers(1, 7, size=2)
        c = np.round(rng.uniform(0, 10, size=(n_rows, n_cols)), 3)
        c[rng.random((n_rows, n_cols)) < 0.15] = FORBIDDEN
        result = asg.solve_assignment(c)
        pairs, total = _brute_force(c)
        assert len(result.pairs) == len(pairs)
        assert result.total_cost == pytest.approx(total, abs=1e-9)
        assert result.pairs == pairs


def test_constant_shift_on_square_matrix():
    rng = np.random.default_rng(7)
    c = rng.uniform(0, 5, size=(5, 5))
    base = asg.solve_assignment(c)
    shifted = asg.solve_assignment(c + 2.5)
    assert shifted.pairs == base.pairs
    assert shifted.total_cost == pytest.approx(base.total_cost + 5 * 2.5)


def test_transpose_transposes_matching():
    rng = np.random.default_rng(11)
    for _ in range(50):
        c = rng.uniform(0, 1, size=(4, 6))
        a = asg.solve_assignment(c)
        b = asg.solve_assignment(c.T)
        assert sorted((q, r) for r, q in b.pairs) == list(a.pairs)
        assert b.total_cost == pytest.approx(a.total_cost)
