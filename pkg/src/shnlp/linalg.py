"""Nullspace bases, cascade bookkeeping and PSD factors.

The cascade eliminates the constraints of solved levels by a change of
variables xhat = xhat_star + N z, where N spans the nullspace of all
active rows stacked with the accumulated quadratic-cost rows. Dense,
rank-revealing algebra throughout; problems here are desk scale in the
variable count.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.linalg

from .model import StructuralError

RANK_RTOL = 1e-10


@dataclass
class NullspaceBasis:
    N: np.ndarray          # (n, n_r), orthonormal columns
    n_r: int
    source_rank: int


@dataclass
class CascadeState:
    """Accumulated state of one hierarchical sub-problem instance.

    ``x_hat_star`` is the step assembled so far, ``basis`` spans the
    directions still free. ``active`` records (level, row meta, vstar)
    for rows pinned at their optimal slacks; ``inactive_A, inactive_b``
    carry satisfied inequality rows forward in full coordinates, so each
    level re-projects them with its own basis. ``cost_rows`` are the R
    factors of solved levels with nonzero Hessian.
    """

    n: int
    x_hat_star: np.ndarray
    basis: NullspaceBasis
    active_rows: np.ndarray        # (m_act, n)
    active: list                   # (level_index, RowMeta, v_star)
    inactive_A: np.ndarray         # (m_in, n)
    inactive_b: np.ndarray         # (m_in,)
    inactive_info: list            # (level_index, RowMeta)
    cost_rows: np.ndarray          # (m_cost, n)

    @classmethod
    def fresh(cls, n: int) -> "CascadeState":
        return cls(
            n=n,
            x_hat_star=np.zeros(n),
            basis=NullspaceBasis(np.eye(n), n, 0),
            active_rows=np.zeros((0, n)),
            active=[],
            inactive_A=np.zeros((0, n)),
            inactive_b=np.zeros(0),
            inactive_info=[],
            cost_rows=np.zeros((0, n)),
        )

    def add_inactive(self, A: np.ndarray, b: np.ndarray, info=None) -> None:
        self.inactive_A = np.vstack([self.inactive_A, A])
        self.inactive_b = np.concatenate([self.inactive_b, b])
        self.inactive_info.extend(info if info is not None else [None] * len(b))

    def projected_inactive(self):
        """Inactive rows seen by the next level: (A N, b - A xhat_star)."""
        return (
            self.inactive_A @ self.basis.N,
            self.inactive_b - self.inactive_A @ self.x_hat_star,
        )


def nullspace_basis(A: np.ndarray) -> NullspaceBasis:
    """Orthonormal nullspace basis of A via column-pivoted QR of A^T.

    Rank is detected from the pivoted R diagonal at a relative threshold,
    so rank-deficient and exactly repeated rows are handled. An empty A
    yields the identity basis.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise StructuralError("nullspace_basis expects a matrix")
    m, n = A.shape
    if m == 0:
        return NullspaceBasis(np.eye(n), n, 0)
    Q, R, _ = scipy.linalg.qr(A.T, mode="full", pivoting=True)
    diag = np.abs(np.diag(R[: min(m, n), : min(m, n)]))
    if diag.size == 0 or diag[0] == 0.0:
        rank = 0
    else:
        rank = int(np.sum(diag > RANK_RTOL * diag[0]))
    N = Q[:, rank:]
    return NullspaceBasis(N, n - rank, rank)


def psd_factor(H: np.ndarray, sym_tol: float = 1e-10, eig_rtol: float = 1e-12):
    """Factor R with R^T R equal to the PSD projection of H.

    Negative eigenvalues are clamped to zero; rows of R correspond to the
    strictly positive eigenvalues only, so R has shape (rank, n). For an
    already PSD H the product R^T R reproduces H exactly up to round-off.
    """
    H = np.asarray(H, dtype=float)
    scale = max(1.0, float(np.max(np.abs(H)))) if H.size else 1.0
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise StructuralError("psd_factor expects a square matrix")
    if np.max(np.abs(H - H.T), initial=0.0) > sym_tol * scale:
        raise StructuralError("psd_factor expects a symmetric matrix")
    if H.shape[0] == 0:
        return np.zeros((0, 0))
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    keep = w > eig_rtol * max(1.0, float(np.max(np.abs(w))))
    return (np.sqrt(w[keep])[:, None] * V[:, keep].T)


def update_cascade(
    cascade: CascadeState,
    level_index: int,
    rows,
    v_star: np.ndarray,
    z_star: np.ndarray,
    R: Optional[np.ndarray] = None,
    active_tol: float = 1e-8,
) -> CascadeState:
    """Fold one solved level into the cascade.

    The primal accumulates xhat_star += N z_star. Equality rows and
    violated inequality rows (|vstar| > active_tol) join the active set;
    satisfied inequality rows are carried forward one-sided. The basis is
    recomputed from all active rows stacked with the cost rows, so it
    never gains directions along the cascade.
    """
    N = cascade.basis.N
    x_new = cascade.x_hat_star + (N @ z_star if N.shape[1] else np.zeros(cascade.n))

    act_rows = [cascade.active_rows]
    act_info = list(cascade.active)
    inact_A = [cascade.inactive_A]
    inact_b = [cascade.inactive_b]
    inact_info = list(cascade.inactive_info)
    for i in range(rows.A.shape[0]):
        meta = rows.meta[i] if rows.meta else None
        if rows.is_eq[i] or abs(v_star[i]) > active_tol:
            act_rows.append(rows.A[i : i + 1])
            act_info.append((level_index, meta, float(v_star[i])))
        else:
            inact_A.append(rows.A[i : i + 1])
            inact_b.append(rows.b[i : i + 1])
            inact_info.append((level_index, meta))

    cost = cascade.cost_rows
    if R is not None and R.shape[0] > 0:
        cost = np.vstack([cost, R])

    active_rows = np.vstack(act_rows)
    stacked = np.vstack([active_rows, cost])
    basis = nullspace_basis(stacked)

    return CascadeState(
        n=cascade.n,
        x_hat_star=x_new,
        basis=basis,
        active_rows=active_rows,
        active=act_info,
        inactive_A=np.vstack(inact_A),
        inactive_b=np.concatenate(inact_b),
        inactive_info=inact_info,
        cost_rows=cost,
    )
