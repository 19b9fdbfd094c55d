"""Interior-point sub-solver for one level of the hierarchical program.

Solves, over the reduced variables z of the cascade,

    min  omega_E . t_E + omega_I . t_I
         + 0.5 (xhat* + N z)' H (xhat* + N z)
    s.t. -t <= v <= t
         A_E z - b_E  = v_E
         A_I z - b_I >= v_I
         A_prev z - b_prev >= 0

for l0 levels, and the same with cost 0.5 |v|^2 and no auxiliaries t for
l2 levels. The bound pairs on v are kept as equalities with nonnegative
slacks w and handled by a log barrier. At most one side of each pair can
be active at the optimum (the cost gradient on t forbids both duals
vanishing and both slacks vanishing at once), which is what makes the
elimination below sound and lets the converged auxiliaries be read off
as t = |v|.

Each Newton step is condensed onto z alone: the slack, auxiliary and
dual blocks are eliminated row by row, leaving an n_r x n_r system whose
assembly touches every constraint row once. Cost per iteration is
O(n_r^2 m + n_r^3); the eliminated blocks are recovered afterwards by
back-substitution. A dense transcription of the unreduced Newton system
is provided for verification and as a cubic baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .linalg import psd_factor
from .model import L0, L2, StructuralError


class InteriorViolationError(ValueError):
    """Barrier variables left the strict interior."""


@dataclass
class IpmOptions:
    kkt_tol: float = 1e-9
    mu_tol: float = 1e-10
    max_iter: int = 200
    tau: float = 0.995
    sigma: float = 0.1
    step_floor: float = 1e-14
    psi_min: float = 1e-120
    psi_max: float = 1e120
    # rows whose elimination denominator drops below this are kept as
    # explicit unknowns in a bordered solve instead of being condensed
    aug_threshold: float = 1e-8
    trace: bool = False


@dataclass
class LevelProblem:
    """Projected, substituted data of one level (all quantities reduced)."""

    A_E: np.ndarray
    b_E: np.ndarray
    A_I: np.ndarray
    b_I: np.ndarray
    A_prev: np.ndarray
    b_prev: np.ndarray
    H: np.ndarray                 # projected Hessian, (n_r, n_r), PSD
    grad_const: np.ndarray        # N' H xhat*, (n_r,)
    omega_E: np.ndarray
    omega_I: np.ndarray
    norm: str = L0

    def __post_init__(self):
        self.A_E = np.atleast_2d(np.asarray(self.A_E, dtype=float))
        self.A_I = np.atleast_2d(np.asarray(self.A_I, dtype=float))
        self.A_prev = np.atleast_2d(np.asarray(self.A_prev, dtype=float))
        for name in ("b_E", "b_I", "b_prev", "grad_const", "omega_E", "omega_I"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), float)))
        n_r = self.n_r
        for A, b, tag in (
            (self.A_E, self.b_E, "E"),
            (self.A_I, self.b_I, "I"),
            (self.A_prev, self.b_prev, "prev"),
        ):
            if A.shape != (b.size, n_r):
                raise StructuralError(f"{tag} rows: A {A.shape} vs b {b.size}, n_r {n_r}")
        if self.H.shape != (n_r, n_r):
            raise StructuralError(f"H shape {self.H.shape}, expected {(n_r, n_r)}")
        if np.max(np.abs(self.H - self.H.T), initial=0.0) > 1e-10 * max(
            1.0, float(np.max(np.abs(self.H), initial=0.0))
        ):
            raise StructuralError("H must be symmetric")
        if self.norm == L0 and (
            np.any(self.omega_E <= 0) or np.any(self.omega_I <= 0)
        ):
            raise StructuralError("l0 level weights must be strictly positive")

    @property
    def n_r(self) -> int:
        return self.H.shape[0] if self.H.ndim == 2 else 0

    @property
    def m_E(self) -> int:
        return self.b_E.size

    @property
    def m_I(self) -> int:
        return self.b_I.size

    @property
    def m_prev(self) -> int:
        return self.b_prev.size


def empty_problem(n_r, norm=L0):
    z = np.zeros((0, n_r))
    return LevelProblem(
        A_E=z, b_E=np.zeros(0), A_I=z, b_I=np.zeros(0), A_prev=z,
        b_prev=np.zeros(0), H=np.zeros((n_r, n_r)), grad_const=np.zeros(n_r),
        omega_E=np.zeros(0), omega_I=np.zeros(0), norm=norm,
    )


_VAR_FIELDS = (
    "z", "v_E", "v_I", "t_E", "t_I",
    "lam_E", "lam_I", "lam_prev",
    "lam_tE_p", "lam_tE_m", "lam_tI_p", "lam_tI_m",
    "w_tE_p", "w_tE_m", "w_tI_p", "w_tI_m", "w_I", "w_prev",
)

# (slack, dual) pairs kept strictly positive by the barrier. Equality
# multipliers lam_E are sign-free and deliberately not listed.
_PAIRS_L0 = (
    ("w_tE_p", "lam_tE_p"), ("w_tE_m", "lam_tE_m"),
    ("w_tI_p", "lam_tI_p"), ("w_tI_m", "lam_tI_m"),
    ("w_I", "lam_I"), ("w_prev", "lam_prev"),
)
_PAIRS_L2 = (("w_I", "lam_I"), ("w_prev", "lam_prev"))


@dataclass
class IpmIterate:
    """Full variable vector of one sub-solve, plus barrier parameters."""

    z: np.ndarray
    v_E: np.ndarray
    v_I: np.ndarray
    t_E: np.ndarray
    t_I: np.ndarray
    lam_E: np.ndarray
    lam_I: np.ndarray
    lam_prev: np.ndarray
    lam_tE_p: np.ndarray
    lam_tE_m: np.ndarray
    lam_tI_p: np.ndarray
    lam_tI_m: np.ndarray
    w_tE_p: np.ndarray
    w_tE_m: np.ndarray
    w_tI_p: np.ndarray
    w_tI_m: np.ndarray
    w_I: np.ndarray
    w_prev: np.ndarray
    mu: dict
    sigma: float
    norm: str = L0

    @property
    def pairs(self):
        return _PAIRS_L0 if self.norm == L0 else _PAIRS_L2

    def duality(self):
        """Per-family and overall duality measures lam'w / dim."""
        per = {}
        tot, cnt = 0.0, 0
        for wn, ln in self.pairs:
            w, lam = getattr(self, wn), getattr(self, ln)
            if w.size:
                dot = float(lam @ w)
                per[wn] = dot / w.size
                tot += dot
                cnt += w.size
            else:
                per[wn] = 0.0
        return per, (tot / cnt if cnt else 0.0)

    def advance(self, step, alpha):
        for name in _VAR_FIELDS:
            setattr(self, name, getattr(self, name) + alpha * getattr(step, name))
        self.mu, _ = self.duality()


@dataclass
class IpmStep:
    z: np.ndarray = None
    v_E: np.ndarray = None
    v_I: np.ndarray = None
    t_E: np.ndarray = None
    t_I: np.ndarray = None
    lam_E: np.ndarray = None
    lam_I: np.ndarray = None
    lam_prev: np.ndarray = None
    lam_tE_p: np.ndarray = None
    lam_tE_m: np.ndarray = None
    lam_tI_p: np.ndarray = None
    lam_tI_m: np.ndarray = None
    w_tE_p: np.ndarray = None
    w_tE_m: np.ndarray = None
    w_tI_p: np.ndarray = None
    w_tI_m: np.ndarray = None
    w_I: np.ndarray = None
    w_prev: np.ndarray = None


@dataclass
class LevelSolution:
    z_star: np.ndarray
    v_star_E: np.ndarray
    v_star_I: np.ndarray
    t_star_E: np.ndarray
    t_star_I: np.ndarray
    lam_E: np.ndarray
    lam_I: np.ndarray
    lam_prev: np.ndarray
    kkt_residual_norm: float
    mu: float
    iterations: int
    converged: bool
    failure: Optional[str]
    iterate: IpmIterate
    trace: list = field(default_factory=list)

    @property
    def v_star(self):
        return np.concatenate([self.v_star_E, self.v_star_I])


def initial_iterate(p: LevelProblem, opts: IpmOptions) -> IpmIterate:
    """Strictly interior, scale-aware start.

    z = 0, v carries the residual at zero step, t = |v| + 1, slacks w
    follow their defining equalities clipped below at one, duals start
    at one.
    """
    mE, mI, mP = p.m_E, p.m_I, p.m_prev
    v_E = -p.b_E.copy()
    v_I = -p.b_I.copy()
    ones = np.ones
    if p.norm == L0:
        t_E = np.abs(v_E) + 1.0
        t_I = np.abs(v_I) + 1.0
        # bound duals must sum to omega at any solution; start on scale
        ltE = np.maximum(0.5 * p.omega_E, 0.5)
        ltI = np.maximum(0.5 * p.omega_I, 0.5)
        q = IpmIterate(
            z=np.zeros(p.n_r), v_E=v_E, v_I=v_I, t_E=t_E, t_I=t_I,
            lam_E=ones(mE), lam_I=ones(mI), lam_prev=ones(mP),
            lam_tE_p=ltE, lam_tE_m=ltE.copy(),
            lam_tI_p=ltI, lam_tI_m=ltI.copy(),
            w_tE_p=np.maximum(t_E - v_E, 1.0), w_tE_m=np.maximum(t_E + v_E, 1.0),
            w_tI_p=np.maximum(t_I - v_I, 1.0), w_tI_m=np.maximum(t_I + v_I, 1.0),
            w_I=np.maximum(-p.b_I - v_I, 1.0), w_prev=np.maximum(-p.b_prev, 1.0),
            mu={}, sigma=opts.sigma, norm=L0,
        )
    else:
        zero = np.zeros
        q = IpmIterate(
            z=np.zeros(p.n_r), v_E=v_E, v_I=v_I, t_E=zero(0), t_I=zero(0),
            lam_E=ones(mE), lam_I=ones(mI), lam_prev=ones(mP),
            lam_tE_p=zero(0), lam_tE_m=zero(0), lam_tI_p=zero(0), lam_tI_m=zero(0),
            w_tE_p=zero(0), w_tE_m=zero(0), w_tI_p=zero(0), w_tI_m=zero(0),
            w_I=np.maximum(-p.b_I - v_I, 1.0), w_prev=np.maximum(-p.b_prev, 1.0),
            mu={}, sigma=opts.sigma, norm=L2,
        )
    q.mu, _ = q.duality()
    return q


def kkt_residual(q: IpmIterate, p: LevelProblem, sigma_mu=None, correction=None):
    """First-order optimality residual, one entry per variable block.

    Complementarity rows read lam * w - sigma*mu (Hadamard product), per
    slack family. ``sigma_mu`` overrides the centering term (scalar or
    per-family dict); ``correction`` adds a second-order term to the
    complementarity rows.
    """
    Hz = p.H @ q.z + p.grad_const
    K = {
        "z": Hz
        - p.A_E.T @ q.lam_E
        - p.A_I.T @ q.lam_I
        - p.A_prev.T @ q.lam_prev,
        "lam_E": -p.A_E @ q.z + p.b_E + q.v_E,
        "lam_I": -p.A_I @ q.z + p.b_I + q.v_I + q.w_I,
        "lam_prev": -p.A_prev @ q.z + p.b_prev + q.w_prev,
    }
    if p.norm == L0:
        K["v_E"] = q.lam_tE_p - q.lam_tE_m + q.lam_E
        K["v_I"] = q.lam_tI_p - q.lam_tI_m + q.lam_I
        K["t_E"] = p.omega_E - q.lam_tE_p - q.lam_tE_m
        K["t_I"] = p.omega_I - q.lam_tI_p - q.lam_tI_m
        K["lam_tE"] = np.concatenate(
            [q.t_E - q.v_E - q.w_tE_p, q.t_E + q.v_E - q.w_tE_m]
        )
        K["lam_tI"] = np.concatenate(
            [q.t_I - q.v_I - q.w_tI_p, q.t_I + q.v_I - q.w_tI_m]
        )
    else:
        K["v_E"] = q.v_E + q.lam_E
        K["v_I"] = q.v_I + q.lam_I
    for wn, ln in q.pairs:
        w, lam = getattr(q, wn), getattr(q, ln)
        if sigma_mu is None:
            sm = q.sigma * q.mu.get(wn, 0.0)
        elif isinstance(sigma_mu, dict):
            sm = sigma_mu.get(wn, 0.0)
        else:
            sm = sigma_mu
        row = lam * w - sm
        if correction is not None and wn in correction:
            row = row + correction[wn]
        K[wn] = row
    return K


def kkt_norm(K) -> float:
    return max(
        (float(np.max(np.abs(v))) for v in K.values() if v.size), default=0.0
    )


def _psi(q, p, opts, wn, ln):
    """Barrier scaling w / lam of one slack family.

    Entries are clipped into the inversion guard window only when they
    would over- or underflow; the nearly-active rows that would make the
    plain condensation singular are diverted to the bordered solve
    instead of being clamped, which would falsify their elimination.
    """
    w, lam = getattr(q, wn), getattr(q, ln)
    if w.size and (np.any(w <= 0) or np.any(lam <= 0)):
        raise InteriorViolationError(f"{wn} left the interior")
    return np.clip(w / lam, opts.psi_min, opts.psi_max) if w.size else w


@dataclass
class _Condensation:
    M: np.ndarray
    psi: dict
    d_E: np.ndarray
    d_I: np.ndarray
    d_P: np.ndarray
    soft_E: np.ndarray
    soft_I: np.ndarray
    soft_P: np.ndarray
    e_E: np.ndarray      # elimination denominators (pre-inversion)
    e_I: np.ndarray
    e_P: np.ndarray

    @property
    def n_aug(self) -> int:
        return int((~self.soft_E).sum() + (~self.soft_I).sum() + (~self.soft_P).sum())


def _split(e, threshold):
    """Soft mask and guarded inverse of an elimination denominator."""
    if e.size == 0:
        return np.ones(0, dtype=bool), e
    soft = e >= threshold
    d = np.zeros_like(e)
    d[soft] = 1.0 / e[soft]
    return soft, d


def _condense(p: LevelProblem, q: IpmIterate, opts: IpmOptions,
              aug_threshold: Optional[float] = None) -> _Condensation:
    """Left-hand side of the reduced Newton system (residual-independent).

    Rows whose elimination denominator falls below ``aug_threshold`` are
    excluded here and handled as explicit unknowns by the bordered solve;
    condensing them would put their near-infinite barrier curvature on
    the diagonal and destroy the step for everything else.
    """
    thr = opts.aug_threshold if aug_threshold is None else aug_threshold
    psi = {}
    M = p.H.copy()
    if p.norm == L0:
        pp = psi["w_tE_p"] = _psi(q, p, opts, "w_tE_p", "lam_tE_p")
        pm = psi["w_tE_m"] = _psi(q, p, opts, "w_tE_m", "lam_tE_m")
        e_E = 0.25 * (pp + pm)
        soft_E, d4 = _split(e_E, 0.25 * thr)
        d_E = 0.25 * d4
        if p.m_E:
            M += 4.0 * p.A_E.T @ (d_E[:, None] * p.A_E)
        pp = psi["w_tI_p"] = _psi(q, p, opts, "w_tI_p", "lam_tI_p")
        pm = psi["w_tI_m"] = _psi(q, p, opts, "w_tI_m", "lam_tI_m")
        pI = psi["w_I"] = _psi(q, p, opts, "w_I", "lam_I")
        e_I = 0.25 * (4.0 * pI + pp + pm) if pI.size else pI
        soft_I, d4 = _split(e_I, 0.25 * thr)
        d_I = 0.25 * d4
        if p.m_I:
            M += 4.0 * p.A_I.T @ (d_I[:, None] * p.A_I)
    else:
        if p.m_E:
            M += p.A_E.T @ p.A_E
        e_E = np.ones(p.m_E)
        soft_E = np.ones(p.m_E, dtype=bool)
        d_E = np.zeros(p.m_E)
        pI = psi["w_I"] = _psi(q, p, opts, "w_I", "lam_I")
        # quadratic slack cost keeps this denominator >= 1
        e_I = 1.0 + pI if pI.size else pI
        soft_I = np.ones(p.m_I, dtype=bool)
        d_I = 1.0 / e_I if pI.size else pI
        if p.m_I:
            M += p.A_I.T @ (d_I[:, None] * p.A_I)
    pP = psi["w_prev"] = _psi(q, p, opts, "w_prev", "lam_prev")
    e_P = pP
    soft_P, d_P = _split(e_P, thr)
    if p.m_prev:
        M += p.A_prev.T @ (d_P[:, None] * p.A_prev)
    return _Condensation(
        M=M, psi=psi, d_E=d_E, d_I=d_I, d_P=d_P,
        soft_E=soft_E, soft_I=soft_I, soft_P=soft_P,
        e_E=e_E, e_I=e_I, e_P=e_P,
    )


def _inner_E(p, q, K, cond):
    """Eliminated-block combination multiplying A_E' in the rhs."""
    pp, pm = cond.psi["w_tE_p"], cond.psi["w_tE_m"]
    KtE_p = K["lam_tE"][: p.m_E]
    KtE_m = K["lam_tE"][p.m_E :]
    return (
        2.0 * cond.d_E * (
            2.0 * K["lam_E"]
            + pp * K["t_E"]
            + K["w_tE_p"] / q.lam_tE_p
            - K["w_tE_m"] / q.lam_tE_m
            + KtE_p
            - KtE_m
        )
        - K["t_E"]
        - K["v_E"]
    )


def _inner_I(p, q, K, cond):
    pI = cond.psi["w_I"]
    pp, pm = cond.psi["w_tI_p"], cond.psi["w_tI_m"]
    KtI_p = K["lam_tI"][: p.m_I]
    KtI_m = K["lam_tI"][p.m_I :]
    return (
        2.0 * cond.d_I * (
            -2.0 * (pI * (-K["t_I"] - K["v_I"]) + K["w_I"] / q.lam_I - K["lam_I"])
            + pp * K["t_I"]
            + K["w_tI_p"] / q.lam_tI_p
            + KtI_p
            - K["w_tI_m"] / q.lam_tI_m
            - KtI_m
        )
        - K["t_I"]
        - K["v_I"]
    )


def _rhs(p, q, K, cond):
    """Right-hand side of the reduced system, soft (condensed) rows only."""
    rhs = -K["z"]
    if p.norm == L0:
        if p.m_E:
            rhs = rhs + p.A_E.T @ np.where(cond.soft_E, _inner_E(p, q, K, cond), 0.0)
        if p.m_I:
            rhs = rhs + p.A_I.T @ np.where(cond.soft_I, _inner_I(p, q, K, cond), 0.0)
    else:
        if p.m_E:
            rhs = rhs + p.A_E.T @ (K["lam_E"] - K["v_E"])
        if p.m_I:
            rhs = rhs + p.A_I.T @ (
                cond.d_I * (K["lam_I"] - K["v_I"] - K["w_I"] / q.lam_I)
            )
    if p.m_prev:
        rhs = rhs + p.A_prev.T @ np.where(
            cond.soft_P,
            cond.d_P * (-K["w_prev"] / q.lam_prev + K["lam_prev"]),
            0.0,
        )
    return rhs


def _aug_rows(p, q, K, cond):
    """Implicit elimination relations of the augmented rows.

    Each augmented row i contributes  A_i dz + e_i dlam_i = r_i  with its
    tiny elimination denominator e_i kept on the left, which stays
    perfectly conditioned as the row approaches exact activity.
    """
    rows_A, rows_e, rows_r, tags = [], [], [], []
    if p.norm == L0 and p.m_E and not cond.soft_E.all():
        m = ~cond.soft_E
        mE = p.m_E
        pp, pm = cond.psi["w_tE_p"], cond.psi["w_tE_m"]
        gp = -K["lam_tE"][:mE] - K["w_tE_p"] / q.lam_tE_p
        gm = -K["lam_tE"][mE:] - K["w_tE_m"] / q.lam_tE_m
        r = (
            K["lam_E"]
            - cond.e_E * K["v_E"]
            + 0.25 * (2.0 * (gm - gp) - (pm - pp) * K["t_E"])
        )
        rows_A.append(p.A_E[m])
        rows_e.append(cond.e_E[m])
        rows_r.append(r[m])
        tags.append(("E", m))
    if p.norm == L0 and p.m_I and not cond.soft_I.all():
        m = ~cond.soft_I
        mI = p.m_I
        pI = cond.psi["w_I"]
        pp, pm = cond.psi["w_tI_p"], cond.psi["w_tI_m"]
        X = (
            -2.0 * (pI * (-K["t_I"] - K["v_I"]) + K["w_I"] / q.lam_I - K["lam_I"])
            + pp * K["t_I"]
            + K["w_tI_p"] / q.lam_tI_p
            + K["lam_tI"][:mI]
            - K["w_tI_m"] / q.lam_tI_m
            - K["lam_tI"][mI:]
        )
        r = 0.5 * X - cond.e_I * (K["t_I"] + K["v_I"])
        rows_A.append(p.A_I[m])
        rows_e.append(cond.e_I[m])
        rows_r.append(r[m])
        tags.append(("I", m))
    if p.m_prev and not cond.soft_P.all():
        m = ~cond.soft_P
        r = K["lam_prev"] - K["w_prev"] / q.lam_prev
        rows_A.append(p.A_prev[m])
        rows_e.append(cond.e_P[m])
        rows_r.append(r[m])
        tags.append(("P", m))
    if not rows_A:
        return None
    return np.vstack(rows_A), np.concatenate(rows_e), np.concatenate(rows_r), tags


def _solve_newton(p, q, K, cond, factor=None):
    """Primal step and augmented-row duals for one Newton solve.

    Returns (dz, aug, factor); ``aug`` maps family tag to (mask, dlam)
    for rows handled by the bordered system.
    """
    rhs = _rhs(p, q, K, cond)
    aug_data = _aug_rows(p, q, K, cond)
    if aug_data is None:
        if factor is None:
            factor = _Factor(cond.M)
        return factor.solve(rhs), {}, factor
    B, e, r, tags = aug_data
    if factor is None:
        n = cond.M.shape[0]
        k = B.shape[0]
        KKT = np.zeros((n + k, n + k))
        KKT[:n, :n] = cond.M
        KKT[:n, n:] = -B.T
        KKT[n:, :n] = B
        KKT[n:, n:] = np.diag(e)
        factor = _Factor(KKT)
    n = cond.M.shape[0]
    sol = factor.solve(np.concatenate([rhs, r]))
    dz = sol[:n]
    dy = sol[n:]
    aug = {}
    pos = 0
    for fam, mask in tags:
        cnt = int(mask.sum())
        aug[fam] = (mask, dy[pos : pos + cnt])
        pos += cnt
    return dz, aug, factor


def assemble_normal(p: LevelProblem, q: IpmIterate, K=None, opts: Optional[IpmOptions] = None):
    """Reduced Newton system (M, rhs) with M = H + C_E + C_I + C_prev.

    Every inverse involved is a diagonal inversion, so assembly is linear
    in the constraint count at fixed n_r. All rows are condensed here;
    the solver itself switches nearly-active rows to the bordered form.
    """
    opts = opts or IpmOptions()
    if K is None:
        K = kkt_residual(q, p)
    cond = _condense(p, q, opts, aug_threshold=0.0)
    return cond.M, _rhs(p, q, K, cond)


def _bound_pair(K, prefix, m, dv, dlam_fam, lam_p, lam_m, w_p, w_m, psi_p, psi_m):
    """Resolve one auxiliary bound pair given dv and the slack-family dual step.

    The pair duals come from the exactly-solvable 2x2 of the dual
    feasibility and cost rows. The side closer to its bound defines the
    auxiliary step through its own rows (stable small-magnitude
    arithmetic); the opposite side's complementarity row absorbs the
    round-off, where it is rescaled by the vanishing barrier parameter
    and cannot propagate.
    """
    Kt_p = K[f"lam_t{prefix}"][:m]
    Kt_m = K[f"lam_t{prefix}"][m:]
    S = K[f"t_{prefix}"]
    D = -K[f"v_{prefix}"] - dlam_fam
    dlp = 0.5 * (S + D)
    dlm = 0.5 * (S - D)
    plus_active = psi_p <= psi_m
    # plus side active
    dw_p_a = (-K[f"w_t{prefix}_p"] - w_p * dlp) / lam_p
    dt_a = -Kt_p + dv + dw_p_a
    dw_m_a = dt_a + dv + Kt_m
    # minus side active
    dw_m_b = (-K[f"w_t{prefix}_m"] - w_m * dlm) / lam_m
    dt_b = -Kt_m - dv + dw_m_b
    dw_p_b = dt_b - dv + Kt_p
    dt = np.where(plus_active, dt_a, dt_b)
    dw_p = np.where(plus_active, dw_p_a, dw_p_b)
    dw_m = np.where(plus_active, dw_m_a, dw_m_b)
    return dt, dlp, dlm, dw_p, dw_m


def recover_full_step(p: LevelProblem, q: IpmIterate, dz, K=None, cond=None,
                      opts: Optional[IpmOptions] = None, aug=None) -> IpmStep:
    """Back-substitute the eliminated blocks from the primal step dz.

    Inverts the elimination: slack duals follow from the condensed
    relations (or directly from the bordered solve for augmented rows),
    then each family's remaining blocks are read off its own rows. Every
    linear optimality row is satisfied exactly by construction; only the
    bilinear complementarity rows carry the solve's round-off.
    """
    opts = opts or IpmOptions()
    if K is None:
        K = kkt_residual(q, p)
    if cond is None:
        cond = _condense(p, q, opts, aug_threshold=0.0)
    aug = aug or {}
    s = IpmStep(z=dz)
    zero = np.zeros(0)

    if p.norm == L0:
        mE = p.m_E
        if mE:
            pp, pm = cond.psi["w_tE_p"], cond.psi["w_tE_m"]
            gp = -K["lam_tE"][:mE] - K["w_tE_p"] / q.lam_tE_p
            gm = -K["lam_tE"][mE:] - K["w_tE_m"] / q.lam_tE_m
            dv = p.A_E @ dz - K["lam_E"]
            s_E = -K["v_E"] + cond.d_E * (2.0 * (gm - gp) - (pm - pp) * K["t_E"])
            dlam_E = -4.0 * cond.d_E * dv + s_E
            if "E" in aug:
                mask, dy = aug["E"]
                dlam_E[mask] = dy
            dt, dlp, dlm, dw_p, dw_m = _bound_pair(
                K, "E", mE, dv, dlam_E, q.lam_tE_p, q.lam_tE_m,
                q.w_tE_p, q.w_tE_m, pp, pm,
            )
            s.v_E, s.t_E, s.lam_E = dv, dt, dlam_E
            s.lam_tE_p, s.lam_tE_m = dlp, dlm
            s.w_tE_p, s.w_tE_m = dw_p, dw_m
        else:
            s.v_E = s.t_E = s.lam_tE_p = s.lam_tE_m = zero
            s.w_tE_p = s.w_tE_m = s.lam_E = zero
        mI = p.m_I
        if mI:
            pI = cond.psi["w_I"]
            pp, pm = cond.psi["w_tI_p"], cond.psi["w_tI_m"]
            dlam_I = -4.0 * cond.d_I * (p.A_I @ dz) + _inner_I(p, q, K, cond)
            if "I" in aug:
                mask, dy = aug["I"]
                dlam_I[mask] = dy
            dw_I = -K["w_I"] / q.lam_I - pI * dlam_I
            dv = p.A_I @ dz - K["lam_I"] - dw_I
            dt, dlp, dlm, dw_p, dw_m = _bound_pair(
                K, "I", mI, dv, dlam_I, q.lam_tI_p, q.lam_tI_m,
                q.w_tI_p, q.w_tI_m, pp, pm,
            )
            s.lam_I, s.w_I, s.v_I, s.t_I = dlam_I, dw_I, dv, dt
            s.lam_tI_p, s.lam_tI_m = dlp, dlm
            s.w_tI_p, s.w_tI_m = dw_p, dw_m
        else:
            s.lam_I = s.w_I = s.v_I = s.t_I = zero
            s.lam_tI_p = s.lam_tI_m = s.w_tI_p = s.w_tI_m = zero
    else:
        s.t_E = s.t_I = zero
        s.lam_tE_p = s.lam_tE_m = s.lam_tI_p = s.lam_tI_m = zero
        s.w_tE_p = s.w_tE_m = s.w_tI_p = s.w_tI_m = zero
        s.v_E = p.A_E @ dz - K["lam_E"] if p.m_E else zero
        s.lam_E = -K["v_E"] - s.v_E if p.m_E else zero
        if p.m_I:
            pI = cond.psi["w_I"]
            s.v_I = cond.d_I * (
                p.A_I @ dz - K["lam_I"] + K["w_I"] / q.lam_I - pI * K["v_I"]
            )
            s.lam_I = -K["v_I"] - s.v_I
            s.w_I = p.A_I @ dz - K["lam_I"] - s.v_I
        else:
            s.v_I = s.lam_I = s.w_I = zero
    if p.m_prev:
        s.w_prev = p.A_prev @ dz - K["lam_prev"]
        s.lam_prev = (-K["w_prev"] - q.lam_prev * s.w_prev) / q.w_prev
        if "P" in aug:
            mask, dy = aug["P"]
            s.lam_prev[mask] = dy
    else:
        s.w_prev = s.lam_prev = zero
    return s


def fraction_to_boundary(q: IpmIterate, step: IpmStep, tau: float) -> float:
    """Largest alpha in (0, 1] keeping all barrier pairs strictly interior.

    Each nonnegative slack and its dual may shrink by at most the
    fraction tau of its current value: val + alpha*dval >= (1-tau)*val.
    """
    alpha = 1.0
    for wn, ln in q.pairs:
        for name in (wn, ln):
            val = getattr(q, name)
            dval = getattr(step, name)
            if val.size == 0:
                continue
            neg = dval < 0
            if np.any(neg):
                alpha = min(alpha, float(np.min(-tau * val[neg] / dval[neg])))
    return alpha


class _Factor:
    """LU factor of the reduced matrix with iterative refinement.

    The condensed matrix mixes barrier scalings that can span fourteen
    orders of magnitude; refinement recovers the digits a single
    backsolve loses there.
    """

    def __init__(self, M):
        self.M = M
        if M.shape[0] == 0:
            self.lu = None
            return
        import scipy.linalg

        with np.errstate(all="ignore"):
            lu = scipy.linalg.lu_factor(M, check_finite=False)
        if not np.all(np.isfinite(lu[0])) or np.min(np.abs(np.diag(lu[0]))) == 0.0:
            # singular system: shift by a tiny multiple of its scale
            scale = max(float(np.max(np.abs(M))), 1.0)
            lu = scipy.linalg.lu_factor(
                M + 1e-12 * scale * np.eye(M.shape[0]), check_finite=False
            )
        self.lu = lu

    def solve(self, rhs, refine=2):
        if self.lu is None:
            return np.zeros(0)
        import scipy.linalg

        x = scipy.linalg.lu_solve(self.lu, rhs, check_finite=False)
        if not np.all(np.isfinite(x)):
            return np.linalg.lstsq(self.M, rhs, rcond=None)[0]
        for _ in range(refine):
            r = rhs - self.M @ x
            if not np.all(np.isfinite(r)) or np.max(np.abs(r)) == 0.0:
                break
            dx = scipy.linalg.lu_solve(self.lu, r, check_finite=False)
            if not np.all(np.isfinite(dx)):
                break
            x = x + dx
        return x


def _solve_reduced(M, rhs):
    return _Factor(M).solve(rhs)


def _mu_after(q, step, alpha):
    tot, cnt = 0.0, 0
    for wn, ln in q.pairs:
        w = getattr(q, wn) + alpha * getattr(step, wn)
        lam = getattr(q, ln) + alpha * getattr(step, ln)
        if w.size:
            tot += float(lam @ w)
            cnt += w.size
    return tot / cnt if cnt else 0.0


def _snapshot(q: IpmIterate) -> IpmIterate:
    kw = {name: getattr(q, name).copy() for name in _VAR_FIELDS}
    return IpmIterate(mu=dict(q.mu), sigma=q.sigma, norm=q.norm, **kw)


_LIN_ROWS_L0 = ("lam_E", "lam_I", "lam_prev", "v_E", "v_I", "t_E", "t_I",
                "lam_tE", "lam_tI")
_LIN_ROWS_L2 = ("lam_E", "lam_I", "lam_prev", "v_E", "v_I")


def solve_level(p: LevelProblem, opts: Optional[IpmOptions] = None) -> LevelSolution:
    """Run the predictor-corrector interior-point iteration to KKT
    convergence.

    Convergence requires the freshly evaluated optimality residual (with
    zero centering) below kkt_tol and the duality measure below mu_tol.
    Each iteration solves an affine predictor and then a corrector with
    fixed centering and the predictor's second-order complementarity
    term; one matrix factorization serves both. The accepted step never
    increases the duality measure.

    The linear residual rows are carried by their exact (1 - alpha)
    recurrences between iterations instead of being recomputed from the
    O(1) problem data, which keeps the step computation stable when the
    barrier parameter is small. The iterate with the best residual score
    is returned if the iteration cap is hit or the line search stalls.
    """
    opts = opts or IpmOptions()
    q = initial_iterate(p, opts)
    lin_rows = _LIN_ROWS_L0 if p.norm == L0 else _LIN_ROWS_L2
    K_m = kkt_residual(q, p, sigma_mu=0.0)
    trace = []
    failure = None
    converged = False
    best = None          # (score, norm, mu, iterate)
    best_it = 0
    it = 0
    used = 0
    while True:
        K_fresh = kkt_residual(q, p, sigma_mu=0.0)
        nrm = kkt_norm(K_fresh)
        _, mu_all = q.duality()
        score = max(nrm / opts.kkt_tol, mu_all / opts.mu_tol)
        if best is None or score < best[0]:
            best = (score, nrm, mu_all, _snapshot(q))
            best_it = it
        if nrm <= opts.kkt_tol and mu_all <= opts.mu_tol:
            converged = True
            break
        if it - best_it > 15:
            failure = "stagnation"
            break
        if it >= opts.max_iter:
            failure = "max_iter"
            break
        it += 1
        used = it
        try:
            cond = _condense(p, q, opts)
        except InteriorViolationError:
            failure = "interior"
            break
        # affine predictor: maintained linear rows, zero centering
        K_aff = dict(K_m)
        for wn, ln in q.pairs:
            K_aff[wn] = getattr(q, ln) * getattr(q, wn)
        dz_aff, aug_aff, factor = _solve_newton(p, q, K_aff, cond)
        step_aff = recover_full_step(p, q, dz_aff, K_aff, cond, opts, aug_aff)
        # corrector: fixed centering plus second-order complementarity term
        per_mu, _ = q.duality()
        Kc = dict(K_m)
        for wn, ln in q.pairs:
            w, lam = getattr(q, wn), getattr(q, ln)
            Kc[wn] = (
                lam * w
                - opts.sigma * per_mu[wn]
                + getattr(step_aff, ln) * getattr(step_aff, wn)
            )
        dz, aug_c, _ = _solve_newton(p, q, Kc, cond, factor)
        step = recover_full_step(p, q, dz, Kc, cond, opts, aug_c)

        def _capped(step):
            # fraction to boundary, then keep the duality measure non-increasing
            a = min(1.0, fraction_to_boundary(q, step, opts.tau))
            mu_now = _mu_after(q, step, 0.0)
            guard = 0
            while guard < 30 and _mu_after(q, step, a) > mu_now and a > opts.step_floor:
                a *= 0.5
                guard += 1
            return a

        alpha = _capped(step)
        if alpha <= opts.step_floor:
            # second-order term can overshoot near the boundary; fall back
            # to the plain centering step
            Kc2 = dict(K_m)
            for wn, ln in q.pairs:
                w, lam = getattr(q, wn), getattr(q, ln)
                Kc2[wn] = lam * w - opts.sigma * per_mu[wn]
            dz, aug_c, _ = _solve_newton(p, q, Kc2, cond, factor)
            step = recover_full_step(p, q, dz, Kc2, cond, opts, aug_c)
            alpha = _capped(step)
        if alpha <= opts.step_floor:
            failure = "stall"
            break
        q.advance(step, alpha)
        K_m["z"] = K_m["z"] + alpha * (
            p.H @ step.z
            - p.A_E.T @ step.lam_E
            - p.A_I.T @ step.lam_I
            - p.A_prev.T @ step.lam_prev
        )
        fade = 1.0 - alpha
        for name in lin_rows:
            K_m[name] = fade * K_m[name]
        if opts.trace:
            _, mu_tr = q.duality()
            trace.append((it, mu_tr, kkt_norm(kkt_residual(q, p, sigma_mu=0.0)), alpha))

    if not converged:
        if failure is None:
            failure = "max_iter"
        if best is not None:
            _, nrm, mu_all, q = best
            if nrm <= opts.kkt_tol and mu_all <= opts.mu_tol:
                converged = True
                failure = None

    return LevelSolution(
        z_star=q.z.copy(),
        v_star_E=q.v_E.copy(),
        v_star_I=q.v_I.copy(),
        t_star_E=np.abs(q.v_E) if p.norm == L0 else np.zeros(0),
        t_star_I=np.abs(q.v_I) if p.norm == L0 else np.zeros(0),
        lam_E=q.lam_E.copy(),
        lam_I=q.lam_I.copy(),
        lam_prev=q.lam_prev.copy(),
        kkt_residual_norm=nrm,
        mu=mu_all,
        iterations=used,
        converged=converged,
        failure=failure,
        iterate=q,
        trace=trace,
    )


def solve_level_l2(p: LevelProblem, opts: Optional[IpmOptions] = None) -> LevelSolution:
    """Least-squares variant: quadratic slack cost, no auxiliaries."""
    if p.norm != L2:
        raise StructuralError("solve_level_l2 expects an l2 problem")
    return solve_level(p, opts)


def cost_to_constraint(sol: LevelSolution, H_full: np.ndarray, x_hat_star: np.ndarray):
    """Linear rows freezing a solved level's quadratic cost for lower levels.

    Returns (R, R @ xhat_star) with R'R the PSD projection of the level
    Hessian; stacking R into the cascade's cost rows removes the
    corresponding directions from subsequent bases. The constant linear
    cost term of the solved level is dropped.
    """
    R = psd_factor(H_full)
    return R, R @ np.asarray(x_hat_star, dtype=float)


# ---------------------------------------------------------------------------
# Dense transcription of the unreduced Newton system. Used by the test
# suite as an independent reference for the condensed step and by the
# scaling benchmark as the cubic baseline.


def full_system_layout(p: LevelProblem):
    mE, mI, mP, nr = p.m_E, p.m_I, p.m_prev, p.n_r
    if p.norm == L0:
        names = [
            ("z", nr), ("lam_E", mE), ("lam_I", mI), ("lam_prev", mP),
            ("v_E", mE), ("v_I", mI), ("t_E", mE), ("t_I", mI),
            ("lam_tE_p", mE), ("lam_tE_m", mE), ("lam_tI_p", mI), ("lam_tI_m", mI),
            ("w_tE_p", mE), ("w_tE_m", mE), ("w_tI_p", mI), ("w_tI_m", mI),
            ("w_I", mI), ("w_prev", mP),
        ]
    else:
        names = [
            ("z", nr), ("lam_E", mE), ("lam_I", mI), ("lam_prev", mP),
            ("v_E", mE), ("v_I", mI), ("w_I", mI), ("w_prev", mP),
        ]
    offsets = {}
    pos = 0
    for name, size in names:
        offsets[name] = (pos, pos + size)
        pos += size
    return offsets, pos


def build_full_newton_system(p: LevelProblem, q: IpmIterate, K=None):
    """Jacobian and packed residual of the complete linearized system.

    Row blocks follow the residual components one-to-one; solving
    J dq = -K gives the unreduced Newton step. Dense and cubic in the
    total dimension by construction.
    """
    if K is None:
        K = kkt_residual(q, p)
    off, dim = full_system_layout(p)
    J = np.zeros((dim, dim))
    rhs = np.zeros(dim)

    def put(rname, cname, block):
        r0, r1 = off[rname]
        c0, c1 = off[cname]
        J[r0:r1, c0:c1] += block

    def eye(name):
        a, b = off[name]
        return np.eye(b - a)

    mE, mI, mP = p.m_E, p.m_I, p.m_prev
    # stationarity in z
    put("z", "z", p.H)
    if mE:
        put("z", "lam_E", -p.A_E.T)
        put("lam_E", "z", -p.A_E)
        put("lam_E", "v_E", eye("v_E"))
    if mI:
        put("z", "lam_I", -p.A_I.T)
        put("lam_I", "z", -p.A_I)
        put("lam_I", "v_I", eye("v_I"))
        put("lam_I", "w_I", eye("w_I"))
    if mP:
        put("z", "lam_prev", -p.A_prev.T)
        put("lam_prev", "z", -p.A_prev)
        put("lam_prev", "w_prev", eye("w_prev"))

    if p.norm == L0:
        if mE:
            put("v_E", "lam_tE_p", eye("lam_tE_p"))
            put("v_E", "lam_tE_m", -eye("lam_tE_m"))
            put("v_E", "lam_E", eye("lam_E"))
            put("t_E", "lam_tE_p", -eye("lam_tE_p"))
            put("t_E", "lam_tE_m", -eye("lam_tE_m"))
            put("lam_tE_p", "t_E", eye("t_E"))
            put("lam_tE_p", "v_E", -eye("v_E"))
            put("lam_tE_p", "w_tE_p", -eye("w_tE_p"))
            put("lam_tE_m", "t_E", eye("t_E"))
            put("lam_tE_m", "v_E", eye("v_E"))
            put("lam_tE_m", "w_tE_m", -eye("w_tE_m"))
            put("w_tE_p", "lam_tE_p", np.diag(q.w_tE_p))
            put("w_tE_p", "w_tE_p", np.diag(q.lam_tE_p))
            put("w_tE_m", "lam_tE_m", np.diag(q.w_tE_m))
            put("w_tE_m", "w_tE_m", np.diag(q.lam_tE_m))
        if mI:
            put("v_I", "lam_tI_p", eye("lam_tI_p"))
            put("v_I", "lam_tI_m", -eye("lam_tI_m"))
            put("v_I", "lam_I", eye("lam_I"))
            put("t_I", "lam_tI_p", -eye("lam_tI_p"))
            put("t_I", "lam_tI_m", -eye("lam_tI_m"))
            put("lam_tI_p", "t_I", eye("t_I"))
            put("lam_tI_p", "v_I", -eye("v_I"))
            put("lam_tI_p", "w_tI_p", -eye("w_tI_p"))
            put("lam_tI_m", "t_I", eye("t_I"))
            put("lam_tI_m", "v_I", eye("v_I"))
            put("lam_tI_m", "w_tI_m", -eye("w_tI_m"))
            put("w_tI_p", "lam_tI_p", np.diag(q.w_tI_p))
            put("w_tI_p", "w_tI_p", np.diag(q.lam_tI_p))
            put("w_tI_m", "lam_tI_m", np.diag(q.w_tI_m))
            put("w_tI_m", "w_tI_m", np.diag(q.lam_tI_m))
    else:
        if mE:
            put("v_E", "v_E", eye("v_E"))
            put("v_E", "lam_E", eye("lam_E"))
        if mI:
            put("v_I", "v_I", eye("v_I"))
            put("v_I", "lam_I", eye("lam_I"))
    if mI:
        put("w_I", "lam_I", np.diag(q.w_I))
        put("w_I", "w_I", np.diag(q.lam_I))
    if mP:
        put("w_prev", "lam_prev", np.diag(q.w_prev))
        put("w_prev", "w_prev", np.diag(q.lam_prev))

    packed = {
        "lam_tE_p": ("lam_tE", 0, mE),
        "lam_tE_m": ("lam_tE", mE, 2 * mE),
        "lam_tI_p": ("lam_tI", 0, mI),
        "lam_tI_m": ("lam_tI", mI, 2 * mI),
    }
    for name in off:
        a, b = off[name]
        if name in packed and p.norm == L0:
            src, i0, i1 = packed[name]
            rhs[a:b] = K[src][i0:i1]
        elif name in ("lam_tE_p", "lam_tE_m", "lam_tI_p", "lam_tI_m"):
            continue
        else:
            rhs[a:b] = K[name]
    return J, rhs, off


def solve_full_newton(p: LevelProblem, q: IpmIterate, K=None):
    """Direct solve of the unreduced system; returns the step per block."""
    J, rhs, off = build_full_newton_system(p, q, K)
    dq = np.linalg.solve(J, -rhs)
    return {name: dq[a:b] for name, (a, b) in off.items()}
