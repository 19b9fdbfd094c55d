"""Selection-constraint groups for autonomous goal selection.

A group collects scalar squared-distance constraints that share one task
map g but have pairwise distinct targets. Minimizing the number of
nonzero slacks over the group picks at most one target to drive to zero.
After a level settles, the group is pruned: feasible members stay, or a
single best-infeasible member is kept, and discarded members' slacks
remain determined by the kept one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .model import EQUALITY, ConstraintBlock, squared_distance_block


@dataclass(frozen=True)
class SelectionGroup:
    """A family of squared-distance constraints over one task map.

    ``g`` maps the variable subset to (value, jacobian); every member i
    contributes the scalar constraint ||g(x_S) - targets[i]||^2 = v.
    """

    group_id: str
    g: Callable[[np.ndarray], tuple]
    targets: tuple
    subset: np.ndarray
    n: int

    def __post_init__(self):
        arr = [np.asarray(t, dtype=float) for t in self.targets]
        for a, b in ((a, b) for i, a in enumerate(arr) for b in arr[i + 1:]):
            if a.shape == b.shape and np.allclose(a, b):
                raise ValueError(f"group {self.group_id}: targets must be distinct")
        object.__setattr__(self, "targets", tuple(arr))
        object.__setattr__(self, "subset", np.asarray(self.subset, dtype=int))

    @property
    def size(self) -> int:
        return len(self.targets)

    def blocks(self) -> list:
        """One scalar equality block per member, tagged with the group id."""
        return [
            squared_distance_block(
                self.g, t, self.subset, self.n,
                kind=EQUALITY, group_id=self.group_id,
                label=f"{self.group_id}[{i}]",
            )
            for i, t in enumerate(self.targets)
        ]


def group_rows(sg: SelectionGroup, x: np.ndarray):
    """Stacked member residuals and Jacobian rows at x.

    Row i is  f_i = ||g - g_di||^2  with gradient  2 (g - g_di)' G
    embedded into the full variable vector.
    """
    x = np.asarray(x, dtype=float)
    val, G = sg.g(x[sg.subset])
    val = np.asarray(val, dtype=float)
    G = np.atleast_2d(np.asarray(G, dtype=float))
    f = np.empty(sg.size)
    J = np.zeros((sg.size, x.size))
    for i, t in enumerate(sg.targets):
        d = val - t
        f[i] = d @ d
        J[i, sg.subset] = 2.0 * (d @ G)
    return f, J


def prune(v_star: Sequence[float], eps: float) -> list:
    """Indices of group members kept after the level settles.

    Feasible members (|v| <= eps) are all kept; infeasible ones are
    discarded. With no feasible member, exactly one survives: the
    smallest slack magnitude, ties broken by the lowest index.
    """
    v = np.abs(np.asarray(v_star, dtype=float))
    if v.size == 0:
        return []
    feasible = np.flatnonzero(v <= eps)
    if feasible.size:
        return list(feasible)
    return [int(np.argmin(v))]


def slack_consistency(sg: SelectionGroup, x: np.ndarray) -> dict:
    """Implied slack of every member at x.

    Holding any one member at its optimum determines all the others'
    slacks through the shared task map; this recomputes them directly
    and serves as the reporting and audit path for discarded members.
    """
    f, _ = group_rows(sg, x)
    return {i: float(f[i]) for i in range(sg.size)}
