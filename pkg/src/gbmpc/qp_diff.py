"""Sensitivity of the QP solution map through the dual fixed point.

Given per-parameter directional derivatives of the QP blocks, the dual
iterate sensitivity solves U Z = V with

    U = J_P (I - gamma H) - I,      V = -gamma J_P (dH z + dh),

where J_P = diag(sign(lam), 1) selects the rows of the projection that are
locally identity (active multipliers and the free equality block).  The primal
sensitivity then follows from the recovery map x = -Q^{-1}([G' F'] z + q):

    dx/dp = W + Q^{-1} [G' F'] Z,

with W the partial derivative of the recovery map at fixed z.  Note Z equals
minus dz/dp; the recovery formula absorbs the sign so that dx/dp matches
finite differences wherever the active set is stable.

Sensitivities enter through :class:`AssemblySensitivity`: one slot per scalar
parameter.  Matrix slots (dQ, dF, dG) accept dense arrays or scipy.sparse
matrices; vector slots (dq, df, dg) are dense (n_params, dim) arrays.  Missing
fields mean identically-zero derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .qp import DualProblem, ParametricQp, recover_primal


class SingularKkt(RuntimeError):
    """Active-set KKT system is singular (strict complementarity fails)."""


@dataclass(eq=False)
class AssemblySensitivity:
    """Directional derivatives of the QP blocks, one slot per parameter.

    The first `n_state` slots differentiate with respect to the state
    argument of an MPC assembly; the remainder are tunable-parameter slots.
    For plain parametric QPs leave n_state at zero.
    """

    n_params: int
    n_state: int = 0
    dQ: object | None = None
    dq: np.ndarray | None = None
    dF: object | None = None
    df: np.ndarray | None = None
    dG: object | None = None
    dg: np.ndarray | None = None

    def __post_init__(self):
        for name in ("dq", "df", "dg"):
            val = getattr(self, name)
            if val is not None:
                val = np.asarray(val, dtype=float)
                if val.ndim != 2 or val.shape[0] != self.n_params:
                    raise ValueError(f"{name} must have shape (n_params, dim)")
                setattr(self, name, val)


def _slot(seq, j):
    return None if seq is None else seq[j]


def select_jpc(z: np.ndarray, n_eq: int, tol: float = 0.0) -> np.ndarray:
    """Projection-Jacobian diagonal: sign(lam) with sign(0) = 0, ones for mu."""
    z = np.asarray(z, dtype=float).ravel()
    n_in = z.size - n_eq
    if n_in < 0:
        raise ValueError("n_eq exceeds the dual dimension")
    return np.concatenate([(z[:n_in] > tol).astype(float), np.ones(n_eq)])


def sensitivity_products(
    qp: ParametricQp,
    sens: AssemblySensitivity,
    x: np.ndarray,
    z: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Forward-mode assembly of (dH z + dh, W) for all parameter slots.

    Uses d(Q^{-1}) = -Q^{-1} dQ Q^{-1} and the identity Q^{-1}([G' F']z + q)
    = -x, so each slot costs one sparse product; the Q-solves are batched.

    Returns:
        dHz_plus_dh: (n_in + n_eq, n_params) matrix, column j equal to
            (dH/dp_j) z + dh/dp_j at fixed z.
        W: (n, n_params) partial derivative of the recovery map at fixed z.
    """
    n, n_p = qp.n, sens.n_params
    n_in = qp.n_in
    lam, mu = z[:n_in], z[n_in:]
    V = np.array(sens.dq.T) if sens.dq is not None else np.zeros((n, n_p))
    for j in range(n_p):
        dQj = _slot(sens.dQ, j)
        if dQj is not None:
            V[:, j] += dQj @ x
        dGj = _slot(sens.dG, j)
        if dGj is not None and n_in:
            V[:, j] += dGj.T @ lam
        dFj = _slot(sens.dF, j)
        if dFj is not None and qp.n_eq:
            V[:, j] += dFj.T @ mu
    W = -qp.solve_q(V) if n_p else np.zeros((n, 0))

    T = np.zeros((n_in + qp.n_eq, n_p))
    if sens.dg is not None:
        T[:n_in] += sens.dg.T
    if sens.df is not None:
        T[n_in:] += sens.df.T
    for j in range(n_p):
        dGj = _slot(sens.dG, j)
        if dGj is not None:
            T[:n_in, j] -= dGj @ x
        dFj = _slot(sens.dF, j)
        if dFj is not None:
            T[n_in:, j] -= dFj @ x
    if T.size:
        T -= qp.constraint_stack() @ W
    return T, W


def dual_jacobian(
    dp: DualProblem,
    z: np.ndarray,
    gamma: float,
    dHz_plus_dh: np.ndarray,
    jpc: np.ndarray | None = None,
) -> tuple[np.ndarray, bool]:
    """Solve U Z = V for the dual sensitivity block.

    A rank-deficient U (LU pivot below 1e-10 of the largest) is solved in the
    least-squares sense and flagged; this correlates with LICQ failure or
    weakly active constraints and is reported rather than raised.

    Returns:
        (Z, degenerate) with Z of shape (n_in + n_eq, n_params).
    """
    nz = dp.size
    dHz_plus_dh = np.asarray(dHz_plus_dh, dtype=float)
    n_p = dHz_plus_dh.shape[1] if dHz_plus_dh.ndim == 2 else 0
    if nz == 0 or n_p == 0:
        return np.zeros((nz, n_p)), False
    d = select_jpc(z, dp.n_eq) if jpc is None else np.asarray(jpc, dtype=float)
    U = d[:, None] * (np.eye(nz) - gamma * dp.H)
    U[np.diag_indices(nz)] -= 1.0
    V = -gamma * d[:, None] * dHz_plus_dh
    lu, piv = scipy.linalg.lu_factor(U, check_finite=False)
    diag = np.abs(np.diag(lu))
    degenerate = bool(diag.min() <= 1e-10 * max(diag.max(), 1.0))
    if degenerate:
        Z = np.linalg.lstsq(U, V, rcond=None)[0]
    else:
        Z = scipy.linalg.lu_solve((lu, piv), V, check_finite=False)
    return Z, degenerate


@dataclass(eq=False)
class SolutionJacobian:
    """An element of the generalized Jacobian of the QP solution map."""

    matrix: np.ndarray
    n_state: int = 0
    degenerate: bool = False

    @property
    def wrt_state(self) -> np.ndarray:
        return self.matrix[:, :self.n_state]

    @property
    def wrt_params(self) -> np.ndarray:
        return self.matrix[:, self.n_state:]


def solution_jacobian(
    qp: ParametricQp,
    sens: AssemblySensitivity,
    z: np.ndarray,
    Z: np.ndarray,
    *,
    x: np.ndarray | None = None,
    W: np.ndarray | None = None,
    degenerate: bool = False,
) -> SolutionJacobian:
    """Primal sensitivity dx/dp = W + Q^{-1} [G' F'] Z.

    W is recomputed from the assembly sensitivities unless supplied (callers
    that already ran :func:`sensitivity_products` pass it to avoid the repeat
    solve).
    """
    if W is None:
        if x is None:
            x = recover_primal(qp, z)
        _, W = sensitivity_products(qp, sens, x, z)
    E = qp.constraint_stack()
    jac = W.copy()
    if E.shape[0] and Z.size:
        jac += qp.solve_q(E.T @ Z)
    return SolutionJacobian(jac, n_state=sens.n_state, degenerate=degenerate)


def kkt_oracle_jacobian(
    qp: ParametricQp,
    sens: AssemblySensitivity,
    x: np.ndarray,
    z: np.ndarray,
    *,
    tol_act: float = 1e-7,
    strict_tol: float = 1e-6,
) -> np.ndarray:
    """Cross-check Jacobian from implicit differentiation of the active-set KKT system.

    Requires strict complementarity (every active multiplier above
    `strict_tol`); raises SingularKkt otherwise.  Test-oracle quality only: it
    rebuilds and solves the bordered system densely for every call.
    """
    n, n_p = qp.n, sens.n_params
    n_in = qp.n_in
    lam, mu = z[:n_in], z[n_in:]
    act = np.flatnonzero(lam > tol_act)
    if act.size and lam[act].min() <= strict_tol:
        raise SingularKkt("active multiplier below the strict-complementarity threshold")
    G_a = qp.G[act]
    n_a, n_e = G_a.shape[0], qp.n_eq
    kkt = np.zeros((n + n_a + n_e, n + n_a + n_e))
    kkt[:n, :n] = qp.Q
    kkt[:n, n:n + n_a] = G_a.T
    kkt[:n, n + n_a:] = qp.F.T
    kkt[n:n + n_a, :n] = G_a
    kkt[n + n_a:, :n] = qp.F

    rhs = np.zeros((n + n_a + n_e, n_p))
    if sens.dq is not None:
        rhs[:n] -= sens.dq.T
    if sens.dg is not None:
        rhs[n:n + n_a] += sens.dg.T[act]
    if sens.df is not None:
        rhs[n + n_a:] += sens.df.T
    for j in range(n_p):
        dQj = _slot(sens.dQ, j)
        if dQj is not None:
            rhs[:n, j] -= dQj @ x
        dGj = _slot(sens.dG, j)
        if dGj is not None:
            dGj = dGj.toarray() if hasattr(dGj, "toarray") else np.asarray(dGj)
            rhs[:n, j] -= dGj.T @ lam
            rhs[n:n + n_a, j] -= dGj[act] @ x
        dFj = _slot(sens.dF, j)
        if dFj is not None:
            rhs[:n, j] -= dFj.T @ mu
            rhs[n + n_a:, j] -= dFj @ x
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularKkt("bordered KKT system is singular") from exc
    return sol[:n]
