"""Sequential outer loop over the level hierarchy.

Planning mode certifies one level at a time: each outer iteration
re-linearizes the problem at the current point, solves the cascade of
level sub-problems up to the level under certification, and passes the
combined step through that level's step filter under a trust region.
Once the step norm drops below the convergence threshold the level is
finalized: optimal slacks stored, selection groups pruned, weights
frozen, and certification advances.

Control mode runs one cascade over all levels per call with a constant
trust radius and applies the step unconditionally.

Weights follow the reweighting rule omega = 1 / (t + xi), which turns
the weighted slack costs into a sparsity-seeking iteration; levels
already certified keep the weights they converged with.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import model as mdl
from .linalg import CascadeState, psd_factor, update_cascade
from .model import (
    BOUND,
    EQUALITY,
    INEQ_LOWER,
    INEQ_UPPER,
    L0,
    L2,
    Hierarchy,
    Level,
    canonical_rows,
    violation,
)
from .nqp import IpmOptions, LevelProblem, solve_level

GAUSS_NEWTON = "gauss-newton"
NEWTON = "newton"


@dataclass
class SolverOptions:
    xi: float = 1e-6
    eps_newton: float = 1e-6
    chi: float = 1e-7
    rho0: float = 1.0
    rho_min: float = 1e-12
    eta1: float = 0.01
    eta2: float = 0.7
    gamma_inc: float = 2.0
    gamma_dec: float = 0.5
    eps_filter: float = 1e-9
    max_outer: int = 1000
    active_tol: float = 1e-8
    touch_tol: float = 1e-2
    ipm: IpmOptions = field(default_factory=IpmOptions)


@dataclass
class Weights:
    """Per-level weight vectors over live canonical rows."""

    omega: dict
    frozen: dict

    @classmethod
    def fresh(cls, hierarchy: Hierarchy) -> "Weights":
        return cls(
            omega={lv.index: np.ones(lv.row_count) for lv in hierarchy.levels},
            frozen={lv.index: False for lv in hierarchy.levels},
        )


def update_weights(t: np.ndarray, xi: float) -> np.ndarray:
    """Reweighting rule omega_i = 1 / (t_i + xi) for nonnegative t."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("auxiliary magnitudes must be nonnegative")
    return 1.0 / (t + xi)


def select_mode(v_star_prev: np.ndarray, eps: float) -> str:
    """Newton only when the level's optimal slack stays infeasible."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    v = np.asarray(v_star_prev, dtype=float)
    return NEWTON if np.linalg.norm(v) > eps else GAUSS_NEWTON


@dataclass
class FilterState:
    entries: list
    rho: float
    current_level: int

    @classmethod
    def fresh(cls, rho: float, level: int) -> "FilterState":
        return cls(entries=[], rho=rho, current_level=level)


def _acceptable(entries, opt_c, feas_c):
    # envelope margins: better feasibility or sufficiently better optimality
    for f_j, h_j in entries:
        if not (feas_c <= 0.99 * h_j or opt_c <= f_j - 1e-4 * feas_c):
            return False
    return True


def hsf_step(
    fs: FilterState,
    candidate_coords,
    model_reduction: float,
    actual_reduction: float,
    opts: SolverOptions,
    step_norm: Optional[float] = None,
):
    """Filter decision for one trial point of the certified level.

    The candidate carries its (optimality, feasibility) log coordinates.
    Acceptance needs both the filter envelope and an actual-to-predicted
    reduction ratio of at least eta1; the trust radius grows on strong
    agreement and shrinks on rejection. Accepted points enter the filter
    with dominated entries purged.

    The radius only grows while the region actually binds the step, and
    a rejection shrinks relative to the rejected step length, so one
    overlong step cannot leave the radius orders of magnitude off scale.
    """
    opt_c, feas_c = candidate_coords
    ratio = actual_reduction / max(model_reduction, 1e-16)
    accept = _acceptable(fs.entries, opt_c, feas_c) and ratio >= opts.eta1
    entries = list(fs.entries)
    rho = fs.rho
    binding = step_norm is None or step_norm >= 0.8 * fs.rho
    if accept:
        entries = [
            (f_j, h_j)
            for f_j, h_j in entries
            if not (opt_c <= f_j and feas_c <= h_j)
        ]
        entries.append((opt_c, feas_c))
        if ratio >= opts.eta2 and binding:
            rho *= opts.gamma_inc
    else:
        rho = opts.gamma_dec * (min(rho, step_norm) if step_norm else rho)
    return accept, FilterState(entries=entries, rho=rho, current_level=fs.current_level)


# ---------------------------------------------------------------------------
# Level bookkeeping


@dataclass
class LevelState:
    """Driver-side mutable record of one level."""

    level: Level                 # live (possibly pruned) blocks
    discarded: list              # blocks dropped by selection pruning
    v_star: Optional[np.ndarray] = None   # canonical slacks at finalization
    omega_star: Optional[np.ndarray] = None
    finalized: bool = False
    mode: str = GAUSS_NEWTON
    last_v: Optional[np.ndarray] = None   # most recent sub-solve slacks
    last_duals: Optional[np.ndarray] = None  # most recent row multipliers


@dataclass
class LevelSolve:
    rows: mdl.LevelRows
    v: np.ndarray             # canonical slacks in row order
    z: np.ndarray
    iterations: int
    converged: bool
    failure: Optional[str]
    omega: np.ndarray
    H: Optional[np.ndarray]


@dataclass
class CascadeSolve:
    x_hat: np.ndarray
    levels: dict
    cascade: CascadeState
    ipm_iterations: int
    ok: bool


@dataclass
class LevelReport:
    index: int
    norm: str
    labels: list
    v_abs: np.ndarray
    kept: np.ndarray
    v_norm: float
    iterations: int
    mode: str


@dataclass
class SolveReport:
    x_star: np.ndarray
    levels: list
    converged: bool
    total_iterations: int
    log: list
    wall_time: float
    failure: Optional[str] = None


def _newton_dual_estimate(rows: mdl.LevelRows, omega, norm) -> np.ndarray:
    """Row duals implied by the violations at the current point.

    Strictly violated rows sit on one auxiliary bound, which pins the
    row's multiplier at the weight with the violation's sign; for the
    quadratic norm the multiplier equals the negative slack.
    """
    c = rows.c0
    if norm == L2:
        v = np.where(rows.is_eq, c, np.minimum(c, 0.0))
        return -v
    return np.where(rows.is_eq, -np.sign(c) * omega, np.where(c < 0, omega, 0.0))


def _newton_hessian(level: Level, x: np.ndarray, rows: mdl.LevelRows,
                    duals: np.ndarray) -> np.ndarray:
    """Gauss-Newton term plus multiplier-weighted constraint curvature.

    The curvature of row i enters as -lambda_i * hess c_i; with the
    weighted slack costs the active-row multipliers carry the weight
    scale, which is what makes the composite step a proper Newton step
    on the violated constraints rather than an overshooting pull.
    """
    H = rows.A.T @ rows.A
    pos = 0
    for blk in level.blocks:
        cnt = blk.row_count
        if blk.hessian_evaluator is not None:
            # canonical rows of upper-kind constraints are negated; the
            # multiplier seen by the user-form hessian flips back
            per_block = np.zeros(blk.dim)
            for i in range(cnt):
                meta = rows.meta[pos + i]
                per_block[meta.row_in_block] += meta.user_sign * (-duals[pos + i])
            H = H + blk.hessian_evaluator(x, per_block)
        pos += cnt
    return 0.5 * (H + H.T)


def _level_problem(rows, A_t, b_b, prev_A, prev_b, H_t, g_t, omega, norm):
    eq = rows.is_eq
    return LevelProblem(
        A_E=A_t[eq], b_E=b_b[eq],
        A_I=A_t[~eq], b_I=b_b[~eq],
        A_prev=prev_A, b_prev=prev_b,
        H=H_t, grad_const=g_t,
        omega_E=omega[eq], omega_I=omega[~eq],
        norm=norm,
    )


def _merge_v(rows, sol):
    v = np.empty(rows.b.shape)
    v[rows.is_eq] = sol.v_star_E
    v[~rows.is_eq] = sol.v_star_I
    return v


def solve_cascade(
    hierarchy: Hierarchy,
    x: np.ndarray,
    states: dict,
    weights: Weights,
    upto: int,
    rho: float,
    opts: SolverOptions,
) -> CascadeSolve:
    """One hierarchical sub-problem instance at the point x.

    The trust region enters as bound rows on the implicit level zero;
    each level is then solved in the nullspace of everything already
    pinned, and folded into the cascade.
    """
    n = hierarchy.n
    cascade = CascadeState.fresh(n)
    A_tr = np.vstack([-np.eye(n), np.eye(n)])
    b_tr = np.full(2 * n, -rho)
    cascade.add_inactive(A_tr, b_tr)

    per_level = {}
    total_ipm = 0
    ok = True
    for lv in hierarchy.levels:
        j = lv.index
        if j > upto:
            break
        st = states[j]
        live = st.level
        rows = canonical_rows(live, x)
        N = cascade.basis.N
        A_t = rows.A @ N
        b_b = rows.b - rows.A @ cascade.x_hat_star
        prev_A, prev_b = cascade.projected_inactive()
        omega = weights.omega[j]
        H_full = None
        Ht = np.zeros((N.shape[1], N.shape[1]))
        gt = np.zeros(N.shape[1])
        if st.mode == NEWTON:
            duals = st.last_duals
            if duals is None or duals.size != rows.b.size:
                duals = _newton_dual_estimate(rows, omega, live.norm)
            H_full = _newton_hessian(live, x, rows, duals)
            R = psd_factor(H_full)
            H_full = R.T @ R
            Ht = N.T @ H_full @ N
            gt = N.T @ (H_full @ cascade.x_hat_star)
        prob = _level_problem(rows, A_t, b_b, prev_A, prev_b, Ht, gt, omega, live.norm)
        sol = solve_level(prob, opts.ipm)
        total_ipm += sol.iterations
        if not sol.converged:
            ok = False
        v = _merge_v(rows, sol)
        lam = np.empty_like(v)
        lam[rows.is_eq] = sol.lam_E
        lam[~rows.is_eq] = sol.lam_I
        st.last_duals = lam
        per_level[j] = LevelSolve(
            rows=rows, v=v, z=sol.z_star, iterations=sol.iterations,
            converged=sol.converged, failure=sol.failure, omega=omega,
            H=H_full,
        )
        R_rows = psd_factor(H_full) if H_full is not None else None
        cascade = update_cascade(
            cascade, j, rows, v, sol.z_star, R_rows, opts.active_tol
        )
    return CascadeSolve(
        x_hat=cascade.x_hat_star, levels=per_level, cascade=cascade,
        ipm_iterations=total_ipm, ok=ok,
    )


def _row_magnitudes(rows: mdl.LevelRows) -> np.ndarray:
    """Current violation magnitude per canonical row (zero targets)."""
    c = rows.c0
    return np.where(rows.is_eq, np.abs(c), np.maximum(0.0, -c))


def refresh_weights(hierarchy, states, weights, x, upto, xi):
    for lv in hierarchy.levels:
        if lv.index > upto:
            break
        st = states[lv.index]
        if weights.frozen[lv.index]:
            continue
        if st.level.norm == L2:
            weights.omega[lv.index] = np.ones(st.level.row_count)
            continue
        rows = canonical_rows(st.level, x)
        weights.omega[lv.index] = update_weights(_row_magnitudes(rows), xi)


def _model_measure(rows: mdl.LevelRows, omega, xhat, norm):
    r = rows.A @ xhat - rows.b
    vio = np.where(rows.is_eq, np.abs(r), np.maximum(0.0, -r))
    if norm == L2:
        return float(vio @ vio)
    return float(omega @ vio)


def _nonlinear_measure(level: Level, omega, x, norm):
    rows = canonical_rows(level, x)
    vio = _row_magnitudes(rows)
    if norm == L2:
        return float(vio @ vio)
    return float(omega @ vio)


def _filter_coords(hierarchy, states, x, l_cur, opts):
    """(optimality, feasibility) log coordinates for certifying l_cur."""
    h_upper = 0.0
    for lv in hierarchy.levels:
        if lv.index >= l_cur:
            break
        st = states[lv.index]
        vt = st.v_star if st.v_star is not None else None
        h_upper += violation(st.level, x, vt, opts.eps_filter).h
    st = states[l_cur]
    h_own = violation(st.level, x, None, opts.eps_filter).h
    return (
        float(np.log(h_own + opts.eps_filter)),
        float(np.log(h_upper + opts.eps_filter)),
    )


def finalize_level(state: LevelState, solve: LevelSolve, omega_used, eps: float) -> LevelState:
    """Prune selection groups, store optimal slacks and freeze weights.

    Feasible group members stay; infeasible ones are discarded, keeping
    one member when none is feasible. Store the canonical slacks of the
    surviving rows and the weights they converged with.
    """
    from .selection import prune

    level = state.level
    v = solve.v
    # map rows to blocks
    row_block = [m.block_index for m in solve.rows.meta]
    per_block_v = {}
    for r, b in enumerate(row_block):
        per_block_v.setdefault(b, []).append(abs(float(v[r])))
    groups = {}
    for bi, blk in enumerate(level.blocks):
        if blk.group_id is not None:
            groups.setdefault(blk.group_id, []).append(bi)
    drop = set()
    for gid, members in groups.items():
        vals = [max(per_block_v.get(bi, [0.0])) for bi in members]
        kept = set(prune(vals, eps))
        for pos, bi in enumerate(members):
            if pos not in kept:
                drop.add(bi)
    live_blocks = tuple(b for i, b in enumerate(level.blocks) if i not in drop)
    discarded = list(state.discarded) + [level.blocks[i] for i in sorted(drop)]
    keep_rows = np.array([row_block[r] not in drop for r in range(len(row_block))])
    new_level = Level(index=level.index, norm=level.norm, blocks=live_blocks)
    v_kept = v[keep_rows]
    duals = state.last_duals[keep_rows] if state.last_duals is not None else None
    return LevelState(
        level=new_level,
        discarded=discarded,
        v_star=v_kept,
        omega_star=np.asarray(omega_used)[keep_rows],
        finalized=True,
        mode=select_mode(v_kept, eps),
        last_v=v_kept,
        last_duals=duals,
    )


def _level_report(state: LevelState, x, iterations) -> LevelReport:
    live = state.level
    rows = canonical_rows(live, x)
    v_live = state.v_star if state.v_star is not None else (
        state.last_v if state.last_v is not None else _row_magnitudes(rows)
    )
    labels = [m.label or f"block{m.block_index}" for m in rows.meta]
    v_abs = list(np.abs(v_live))
    kept = [True] * len(v_abs)
    for blk in state.discarded:
        drows = canonical_rows(
            Level(index=live.index, norm=live.norm, blocks=(blk,)), x
        )
        c = drows.c0
        implied = np.where(drows.is_eq, c, np.minimum(c, 0.0))
        for i in range(c.size):
            labels.append((blk.label or "block") + " (discarded)")
            v_abs.append(abs(float(implied[i])))
            kept.append(False)
    v_abs = np.asarray(v_abs)
    return LevelReport(
        index=live.index,
        norm=live.norm,
        labels=labels,
        v_abs=v_abs,
        kept=np.asarray(kept, dtype=bool),
        v_norm=float(np.linalg.norm(v_live)),
        iterations=iterations,
        mode=state.mode,
    )


def solve_planning(
    hierarchy: Hierarchy, x0, opts: Optional[SolverOptions] = None
) -> SolveReport:
    """Certify all levels in priority order from the starting point.

    Per outer iteration: refresh weights, solve the cascade up to the
    current level, and either finalize (step norm below chi) or run the
    candidate through the level's filter. The trust radius resets when
    certification advances.
    """
    opts = opts or SolverOptions()
    t0 = time.perf_counter()
    x = np.asarray(x0, dtype=float).copy()
    states = {
        lv.index: LevelState(level=lv, discarded=[]) for lv in hierarchy.levels
    }
    weights = Weights.fresh(hierarchy)
    order = [lv.index for lv in hierarchy.levels]
    iters = {j: 0 for j in order}
    log = []
    failure = None
    if not order:
        return SolveReport(x, [], True, 0, [], time.perf_counter() - t0)
    pos = 0
    l_cur = order[pos]
    fs = FilterState.fresh(opts.rho0, l_cur)
    total = 0
    converged = False
    while total < opts.max_outer:
        total += 1
        iters[l_cur] += 1
        refresh_weights(hierarchy, states, weights, x, l_cur, opts.xi)
        result = solve_cascade(hierarchy, x, states, weights, l_cur, fs.rho, opts)
        for j, lsolve in result.levels.items():
            states[j].last_v = lsolve.v
            if not states[j].finalized:
                states[j].mode = select_mode(lsolve.v, opts.eps_newton)
        x_hat = result.x_hat
        step_norm = float(np.linalg.norm(x_hat))
        if step_norm < opts.chi:
            lsolve = result.levels[l_cur]
            states[l_cur] = finalize_level(
                states[l_cur], lsolve, lsolve.omega, opts.eps_newton
            )
            weights.omega[l_cur] = states[l_cur].omega_star
            weights.frozen[l_cur] = True
            log.append(
                dict(iter=total, level=l_cur, rho=fs.rho, step=step_norm,
                     event="finalized", opt=np.nan, feas=np.nan)
            )
            pos += 1
            if pos >= len(order):
                converged = True
                break
            l_cur = order[pos]
            fs = FilterState.fresh(opts.rho0, l_cur)
            continue
        x_cand = x + x_hat
        st = states[l_cur]
        lsolve = result.levels[l_cur]
        pred = _model_measure(lsolve.rows, lsolve.omega, np.zeros_like(x), st.level.norm) \
            - _model_measure(lsolve.rows, lsolve.omega, x_hat, st.level.norm)
        actual = _nonlinear_measure(st.level, lsolve.omega, x, st.level.norm) \
            - _nonlinear_measure(st.level, lsolve.omega, x_cand, st.level.norm)
        coords = _filter_coords(hierarchy, states, x_cand, l_cur, opts)
        accept, fs = hsf_step(fs, coords, pred, actual, opts, step_norm)
        log.append(
            dict(iter=total, level=l_cur, rho=fs.rho, step=step_norm,
                 event="accept" if accept else "reject",
                 opt=coords[0], feas=coords[1])
        )
        if accept:
            x = x_cand
        elif fs.rho < opts.rho_min:
            failure = f"trust region collapsed on level {l_cur}"
            break
    else:
        failure = "outer iteration cap"

    reports = [_level_report(states[j], x, iters[j]) for j in order]
    return SolveReport(
        x_star=x,
        levels=reports,
        converged=converged,
        total_iterations=total,
        log=log,
        wall_time=time.perf_counter() - t0,
        failure=failure,
    )


def control_step(
    hierarchy: Hierarchy,
    x_k,
    rho_const: float,
    opts: Optional[SolverOptions] = None,
):
    """One accepted step over the full hierarchy at constant trust radius.

    Stateless: weights and the Newton switch are derived from the
    residuals at the current point, the cascade runs over every level,
    and the step is applied unconditionally. On a sub-solver failure the
    previous point is returned flagged so a caller can hold position.
    """
    if rho_const <= 0:
        raise ValueError("rho_const must be positive")
    opts = opts or SolverOptions()
    x_k = np.asarray(x_k, dtype=float)
    states = {}
    weights = Weights.fresh(hierarchy)
    for lv in hierarchy.levels:
        rows = canonical_rows(lv, x_k)
        mags = _row_magnitudes(rows)
        states[lv.index] = LevelState(
            level=lv, discarded=[], mode=select_mode(mags, opts.eps_newton)
        )
        if lv.norm == L0:
            weights.omega[lv.index] = update_weights(mags, opts.xi)
    upto = hierarchy.levels[-1].index
    result = solve_cascade(hierarchy, x_k, states, weights, upto, rho_const, opts)
    if not result.ok:
        return x_k.copy(), dict(ok=False, result=result)
    return x_k + result.x_hat, dict(ok=True, result=result)
