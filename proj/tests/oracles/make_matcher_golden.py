"""Freezes assignment-problem goldens computed with scipy's Hungarian solver.

Each case is a dense cost matrix (rows = predictions, cols = targets, rows >=
cols as in set-prediction matching). The golden records the optimal total cost
and one optimal column->row assignment; the consumer checks total cost only,
since ties can be broken differently by equally correct solvers.
"""

import json
import os

import numpy as np
from scipy.optimize import linear_sum_assignment


def solve(cost):
    cost = np.asarray(cost, dtype=np.float64)
    rows, cols = linear_sum_assignment(cost)
    total = float(cost[rows, cols].sum())
    assignment = [-1] * cost.shape[1]
    for r, c in zip(rows, cols):
        assignment[int(c)] = int(r)
    return total, assignment


def main(out_path):
    rng = np.random.default_rng(20240817)
    cases = []

    fixed = [
        [[1.0]],
        [[1.0, 2.0], [2.0, 1.0]],
        [[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]],
        # rectangular: 5 predictions, 2 targets
        [[9.0, 7.0], [1.0, 8.0], [6.0, 2.0], [5.0, 5.0], [3.0, 4.0]],
        # negative entries (GIoU-style costs go negative)
        [[-0.5, 0.25, -1.0], [0.75, -0.25, 0.5], [-0.125, 1.5, -0.75],
         [0.0, -1.5, 2.0]],
        # many equal entries: heavy tie-breaking
        [[1.0, 1.0, 1.0], [1.0, 1.0, 1.0], [1.0, 1.0, 1.0]],
    ]
    for cost in fixed:
        total, assignment = solve(cost)
        cases.append({"cost": cost, "total": total, "assignment": assignment})

    for _ in range(40):
        nq = int(rng.integers(1, 13))
        ng = int(rng.integers(1, nq + 1))
        cost = np.round(rng.uniform(-2.0, 8.0, size=(nq, ng)), 4)
        total, assignment = solve(cost)
        cases.append({
            "cost": cost.tolist(),
            "total": total,
            "assignment": assignment,
        })

    with open(out_path, "w") as f:
        json.dump({"cases": cases}, f, indent=1)
        f.write("\n")
    print(f"wrote {len(cases)} cases to {out_path}")


if __name__ == "__main__":
    import sys

    main(sys.argv[1] if len(sys.argv) > 1 else os.path.join(
        os.path.dirname(__file__), "..", "data", "matcher_golden.json"))
