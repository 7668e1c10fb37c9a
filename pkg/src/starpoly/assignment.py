"""Exact rectangular linear assignment (min-cost injective matching).

M ground-truth rows are matched into N >= M prediction columns. The solver
is scipy's shortest-augmenting-path implementation (Jonker-Volgenant
family): exact, cubic worst case, deterministic for a fixed input, and
comfortably fast at the few-hundred-query scale this package targets.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass(frozen=True)
class CostMatrix:
    """Finite real costs, rows = ground truth (M), columns = predictions (N)."""

    costs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.costs, dtype=np.float64)
        if c.ndim != 2:
            raise ValueError(f"cost matrix must be 2-D, got shape {c.shape}")
        if c.shape[0] > c.shape[1]:
            raise ValueError(
                f"need at least as many columns as rows, got {c.shape[0]}x{c.shape[1]}"
            )
        if c.size and not np.all(np.isfinite(c)):
            raise ValueError("cost matrix entries must be finite")
        object.__setattr__(self, "costs", c)

    @property
    def num_rows(self) -> int:
        return self.costs.shape[0]

    @property
    def num_cols(self) -> int:
        return self.costs.shape[1]


@dataclass(frozen=True)
class MatchResult:
    """Optimal injective row -> column map with its total cost."""

    column_for_row: np.ndarray
    total_cost: float
    unmatched_columns: np.ndarray

    @property
    def num_matched(self) -> int:
        return self.column_for_row.shape[0]

    def pairs(self) -> list:
        return [(int(j), int(i)) for j, i in enumerate(self.column_for_row)]


def solve(costs: CostMatrix) -> MatchResult:
    """Minimize the total cost over all injective row-to-column maps."""
    if not isinstance(costs, CostMatrix):
        costs = CostMatrix(np.asarray(costs))
    rows, cols = linear_sum_assignment(costs.costs)
    column_for_row = np.full(costs.num_rows, -1, dtype=np.int64)
    column_for_row[rows] = cols
    total = float(costs.costs[rows, cols].sum())
    matched = set(cols.tolist())
    unmatched = np.array(
        [i for i in range(costs.num_cols) if i not in matched], dtype=np.int64
    )
    return MatchResult(column_for_row, total, unmatched)
