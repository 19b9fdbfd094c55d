"""Problem model for sparse hierarchical nonlinear programs.

A problem is an ordered stack of priority levels. Each level holds typed
nonlinear constraint blocks and a norm tag: ``l0`` levels minimize the
number of violated constraints, ``l2`` levels minimize the squared
violation. Blocks expose evaluation callbacks returning the residual
vector and its Jacobian at a point.

Internally every constraint row is canonicalized to the step form

    A xhat - b  (= | >=)  vhat,    b = -c(x_k),

where ``c`` is the row residual oriented so that inequality rows are
satisfied when ``c >= 0``. User-facing ``f <= 0`` rows are negated on
canonicalization.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

EQUALITY = "equality"
INEQ_LOWER = "inequality-lower"
INEQ_UPPER = "inequality-upper"
BOUND = "two-sided-bound"

_KINDS = (EQUALITY, INEQ_LOWER, INEQ_UPPER, BOUND)

L0 = "l0"
L2 = "l2"


class EvaluationDomainError(ValueError):
    """An evaluator produced non-finite output."""


class StructuralError(ValueError):
    """Dimension or symmetry mismatch in problem data."""


@dataclass(frozen=True)
class ConstraintBlock:
    """One typed constraint block on a level.

    ``evaluator`` maps x to (f, J) with f of shape (dim,) and J of shape
    (dim, n). ``hessian_evaluator`` maps (x, multipliers) to the summed
    curvature contribution ``sum_i multipliers[i] * hess f_i`` of shape
    (n, n); when absent, Newton mode falls back to the Gauss-Newton
    surrogate J^T J for this block. Evaluators must be pure functions
    of x.
    """

    kind: str
    dim: int
    evaluator: Callable[[np.ndarray], tuple]
    hessian_evaluator: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    group_id: Optional[str] = None
    label: str = ""
    # bounds, only for kind == BOUND
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise StructuralError(f"unknown constraint kind {self.kind!r}")
        if self.kind == BOUND and (self.lower is None or self.upper is None):
            raise StructuralError("two-sided-bound block needs lower and upper")

    @property
    def row_count(self) -> int:
        """Number of canonical rows this block expands to."""
        return 2 * self.dim if self.kind == BOUND else self.dim


@dataclass(frozen=True)
class Level:
    index: int
    norm: str
    blocks: tuple

    def __post_init__(self):
        if self.norm not in (L0, L2):
            raise StructuralError(f"level norm must be 'l0' or 'l2', got {self.norm!r}")

    @property
    def m(self) -> int:
        return sum(b.dim for b in self.blocks)

    @property
    def row_count(self) -> int:
        return sum(b.row_count for b in self.blocks)


@dataclass(frozen=True)
class Hierarchy:
    """An ordered stack of priority levels over n variables.

    The trust region acts as an implicit level 0 and is supplied by the
    driver, not stored here. Immutable after construction; evaluator
    callbacks must be re-entrant.
    """

    n: int
    levels: tuple

    def __post_init__(self):
        idx = [lv.index for lv in self.levels]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise StructuralError("level indices must be strictly increasing")

    @property
    def p(self) -> int:
        return len(self.levels)


@dataclass
class Violation:
    """Per-level feasibility measure and its filter coordinate."""

    h: float
    log_h: float
    per_row: np.ndarray


@dataclass
class RowMeta:
    block_index: int
    row_in_block: int
    kind: str
    # canonical slack -> user-facing slack sign (f <= v rows are negated)
    user_sign: float
    group_id: Optional[str]
    label: str


@dataclass
class LevelRows:
    """Canonical step-form rows of one level at a point x."""

    A: np.ndarray          # (m, n)
    b: np.ndarray          # (m,), b = -c(x)
    is_eq: np.ndarray      # (m,) bool
    meta: list

    @property
    def c0(self) -> np.ndarray:
        """Canonical residuals at the expansion point (zero step)."""
        return -self.b


@dataclass
class LevelLinearization:
    """Projected data of one level inside a cascade instance."""

    level_index: int
    rows: LevelRows
    A_tilde: np.ndarray    # (m, n_r)
    b_breve: np.ndarray    # (m,)
    omega: np.ndarray      # (m,) positive weights, l0 levels
    H: Optional[np.ndarray] = None        # (n, n) level Hessian, full space
    H_tilde: Optional[np.ndarray] = None  # (n_r, n_r)


def _check_finite(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise EvaluationDomainError(f"non-finite {name} output")


def evaluate_level(level: Level, x: np.ndarray):
    """Stacked raw block evaluations (f, J) in block order."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise EvaluationDomainError("non-finite evaluation point")
    fs, Js = [], []
    for blk in level.blocks:
        f, J = blk.evaluator(x)
        f = np.atleast_1d(np.asarray(f, dtype=float))
        J = np.atleast_2d(np.asarray(J, dtype=float))
        if J.shape != (blk.dim, x.size):
            raise StructuralError(
                f"block {blk.label or blk.kind}: Jacobian shape {J.shape}, "
                f"expected {(blk.dim, x.size)}"
            )
        _check_finite("evaluator", f, J)
        fs.append(f)
        Js.append(J)
    if not fs:
        return np.zeros(0), np.zeros((0, x.size))
    return np.concatenate(fs), np.vstack(Js)


def canonical_rows(level: Level, x: np.ndarray) -> LevelRows:
    """Expand a level into canonical step-form rows at x.

    Equality rows keep their orientation. ``f <= v`` rows are negated so
    that every inequality row reads ``A xhat - b >= vhat`` and is
    satisfied at vhat = 0 when the canonical residual is nonnegative.
    Two-sided bounds expand into a lower and an upper row per entry.
    """
    x = np.asarray(x, dtype=float)
    A_rows, b_rows, eq_flags, meta = [], [], [], []
    for bi, blk in enumerate(level.blocks):
        f, J = blk.evaluator(x)
        f = np.atleast_1d(np.asarray(f, dtype=float))
        J = np.atleast_2d(np.asarray(J, dtype=float))
        _check_finite("evaluator", f, J)
        if blk.kind == EQUALITY:
            A_rows.append(J)
            b_rows.append(-f)
            eq_flags.extend([True] * blk.dim)
            meta.extend(
                RowMeta(bi, i, blk.kind, 1.0, blk.group_id, blk.label)
                for i in range(blk.dim)
            )
        elif blk.kind == INEQ_LOWER:
            A_rows.append(J)
            b_rows.append(-f)
            eq_flags.extend([False] * blk.dim)
            meta.extend(
                RowMeta(bi, i, blk.kind, 1.0, blk.group_id, blk.label)
                for i in range(blk.dim)
            )
        elif blk.kind == INEQ_UPPER:
            A_rows.append(-J)
            b_rows.append(f)
            eq_flags.extend([False] * blk.dim)
            meta.extend(
                RowMeta(bi, i, blk.kind, -1.0, blk.group_id, blk.label)
                for i in range(blk.dim)
            )
        else:  # BOUND: lower <= f <= upper
            lo = np.asarray(blk.lower, dtype=float)
            hi = np.asarray(blk.upper, dtype=float)
            A_rows.append(J)
            b_rows.append(-(f - lo))
            A_rows.append(-J)
            b_rows.append(-(hi - f))
            eq_flags.extend([False] * (2 * blk.dim))
            meta.extend(
                RowMeta(bi, i, blk.kind, 1.0, blk.group_id, blk.label)
                for i in range(blk.dim)
            )
            meta.extend(
                RowMeta(bi, i, blk.kind, -1.0, blk.group_id, blk.label)
                for i in range(blk.dim)
            )
    if not A_rows:
        return LevelRows(np.zeros((0, x.size)), np.zeros(0), np.zeros(0, bool), [])
    return LevelRows(
        np.vstack(A_rows),
        np.concatenate(b_rows),
        np.asarray(eq_flags, dtype=bool),
        meta,
    )


def violation(
    level: Level,
    x: np.ndarray,
    v_target: Optional[np.ndarray] = None,
    eps_filter: float = 1e-9,
    pin_tol: float = 1e-9,
) -> Violation:
    """Feasibility measure of one level at x.

    ``v_target`` holds the canonical reference slacks, zero before the
    level has been solved. Equality rows always measure |c - v|.
    Inequality rows measure the one-sided violation max(0, -c) while
    their target is zero and switch to |c - v| once pinned at a nonzero
    optimal slack.
    """
    rows = canonical_rows(level, x)
    c = rows.c0
    if v_target is None:
        v_target = np.zeros_like(c)
    v_target = np.asarray(v_target, dtype=float)
    per_row = np.empty_like(c)
    for i in range(c.size):
        if rows.is_eq[i] or abs(v_target[i]) > pin_tol:
            per_row[i] = abs(c[i] - v_target[i])
        else:
            per_row[i] = max(0.0, -c[i])
    h = float(np.sum(per_row))
    return Violation(h=h, log_h=float(np.log(h + eps_filter)), per_row=per_row)


def linearize(
    hierarchy: Hierarchy,
    x: np.ndarray,
    cascade,
    weights: Optional[dict] = None,
    levels: Optional[Sequence[int]] = None,
) -> list:
    """Project the given (default: all) levels onto the cascade state.

    Returns one :class:`LevelLinearization` per requested level with
    A_tilde = A N and b_breve = b - A xhat_star for the cascade's current
    basis and accumulated step.
    """
    N = cascade.basis.N
    x_hat = cascade.x_hat_star
    out = []
    for lv in hierarchy.levels:
        if levels is not None and lv.index not in levels:
            continue
        rows = canonical_rows(lv, x)
        if rows.A.shape[1] != hierarchy.n:
            raise StructuralError(
                f"level {lv.index}: row width {rows.A.shape[1]} != n={hierarchy.n}"
            )
        omega = None
        if weights is not None and lv.index in weights:
            omega = np.asarray(weights[lv.index], dtype=float)
            if omega.shape != rows.b.shape:
                raise StructuralError(
                    f"level {lv.index}: weight length {omega.shape} != rows {rows.b.shape}"
                )
        out.append(
            LevelLinearization(
                level_index=lv.index,
                rows=rows,
                A_tilde=rows.A @ N,
                b_breve=rows.b - rows.A @ x_hat,
                omega=omega if omega is not None else np.ones_like(rows.b),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Built-in block constructors


def affine_block(C, d, kind=EQUALITY, group_id=None, label="affine"):
    """Rows C x + d, with constant Jacobian C."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    d = np.atleast_1d(np.asarray(d, dtype=float))

    def ev(x):
        return C @ x + d, C

    return ConstraintBlock(kind, C.shape[0], ev, group_id=group_id, label=label)


def bounds_block(indices, lower, upper, n, label="bounds"):
    """Two-sided bounds lower <= x[indices] <= upper."""
    indices = np.asarray(indices, dtype=int)
    C = np.zeros((indices.size, n))
    C[np.arange(indices.size), indices] = 1.0

    def ev(x):
        return x[indices], C

    return ConstraintBlock(
        BOUND,
        indices.size,
        ev,
        label=label,
        lower=np.asarray(lower, dtype=float),
        upper=np.asarray(upper, dtype=float),
    )


def disk_block(indices, offset, center=None, kind=INEQ_UPPER, group_id=None, label="disk"):
    """Scalar quadratic  sum_i (x[i]-c[i])^2 + offset  (= | <= | >=)  v."""
    indices = np.asarray(indices, dtype=int)
    center = (
        np.zeros(indices.size)
        if center is None
        else np.asarray(center, dtype=float)
    )

    def ev(x):
        d = x[indices] - center
        J = np.zeros((1, x.size))
        J[0, indices] = 2.0 * d
        return np.array([d @ d + offset]), J

    def hess(x, mult):
        H = np.zeros((x.size, x.size))
        H[indices, indices] = 2.0 * mult[0]
        return H

    return ConstraintBlock(kind, 1, ev, hess, group_id=group_id, label=label)


def rosenbrock_block(i, j, offset=0.0, kind=EQUALITY, group_id=None, label="rosenbrock"):
    """Scalar residual  (1-x_i)^2 + 100 (x_j - x_i^2)^2 + offset."""

    def ev(x):
        a, b = x[i], x[j]
        J = np.zeros((1, x.size))
        J[0, i] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a)
        J[0, j] = 200.0 * (b - a * a)
        return np.array([(1.0 - a) ** 2 + 100.0 * (b - a * a) ** 2 + offset]), J

    def hess(x, mult):
        a, b = x[i], x[j]
        H = np.zeros((x.size, x.size))
        H[i, i] = mult[0] * (2.0 + 1200.0 * a * a - 400.0 * b)
        H[i, j] = H[j, i] = mult[0] * (-400.0 * a)
        H[j, j] = mult[0] * 200.0
        return H

    return ConstraintBlock(kind, 1, ev, hess, group_id=group_id, label=label)


def mccormick_block(i, j, offset=0.0, kind=EQUALITY, group_id=None, label="mccormick"):
    """Scalar residual  sin(x_i+x_j) + (x_i-x_j)^2 - 1.5 x_i + 2.5 x_j + 1 + offset."""

    def ev(x):
        a, b = x[i], x[j]
        J = np.zeros((1, x.size))
        J[0, i] = np.cos(a + b) + 2.0 * (a - b) - 1.5
        J[0, j] = np.cos(a + b) - 2.0 * (a - b) + 2.5
        val = np.sin(a + b) + (a - b) ** 2 - 1.5 * a + 2.5 * b + 1.0 + offset
        return np.array([val]), J

    def hess(x, mult):
        a, b = x[i], x[j]
        s = -np.sin(a + b)
        H = np.zeros((x.size, x.size))
        H[i, i] = mult[0] * (s + 2.0)
        H[i, j] = H[j, i] = mult[0] * (s - 2.0)
        H[j, j] = mult[0] * (s + 2.0)
        return H

    return ConstraintBlock(kind, 1, ev, hess, group_id=group_id, label=label)


def squared_distance_block(
    g, target, subset, n, kind=EQUALITY, group_id=None, label="sqdist"
):
    """Scalar residual  || g(x[subset]) - target ||^2  = v.

    ``g`` maps the variable subset to (value, G) with G the Jacobian of g
    with respect to the subset. Curvature of g itself is not required;
    Newton mode uses the Gauss-Newton surrogate for this block.
    """
    subset = np.asarray(subset, dtype=int)
    target = np.asarray(target, dtype=float)

    def ev(x):
        val, G = g(x[subset])
        val = np.asarray(val, dtype=float)
        G = np.atleast_2d(np.asarray(G, dtype=float))
        d = val - target
        J = np.zeros((1, x.size))
        J[0, subset] = 2.0 * (d @ G)
        return np.array([d @ d]), J

    return ConstraintBlock(kind, 1, ev, group_id=group_id, label=label)
