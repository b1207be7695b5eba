"""Standard-form parametric QP: dual assembly, projected-gradient solve, primal recovery.

The primal problem

    min_x  0.5 x'Qx + q'x   s.t.   Fx = f,  Gx <= g,

with Q symmetric positive definite, is solved through its dual

    min_z  0.5 z'Hz + h'z   s.t.   z = (lam, mu),  lam >= 0,

where H = [G; F] Q^{-1} [G; F]' and h = [G; F] Q^{-1} q + [g; f].  The dual is
solved by the fixed-point iteration z <- P_C(z - gamma (Hz + h)), with P_C
clamping the inequality block at zero and leaving the equality block free.
The primal optimizer is then x = -Q^{-1}([G' F'] z + q).

Dual ordering is fixed throughout the package: inequality multipliers (lam)
first, equality multipliers (mu) second, matching the block layout of H.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import scipy.linalg


class NotStronglyConvex(ValueError):
    """Raised when the cost curvature Q fails its Cholesky factorization."""


class QpStatus(enum.Enum):
    CONVERGED = "converged"
    MAX_ITER = "max_iter"
    LICQ_VIOLATED = "licq_violated"


def _as_vector(v, size: int, name: str) -> np.ndarray:
    v = np.zeros(size) if v is None else np.asarray(v, dtype=float).ravel()
    if v.size != size:
        raise ValueError(f"{name} has size {v.size}, expected {size}")
    return v


def _as_constraint(m, n: int, name: str) -> np.ndarray:
    if m is None:
        return np.zeros((0, n))
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.shape[1] != n:
        raise ValueError(f"{name} has {m.shape[1]} columns, expected {n}")
    return m


@dataclass(eq=False)
class ParametricQp:
    """Value object holding one instance of the standard-form QP data.

    F/f and G/g may be omitted (None) for problems without equalities or
    inequalities.  The Cholesky factor of Q is computed lazily on first use
    and cached on the instance; the cache is never shared between instances
    unless explicitly transplanted via :meth:`share_factorization`.
    """

    Q: np.ndarray
    q: np.ndarray
    F: np.ndarray | None = None
    f: np.ndarray | None = None
    G: np.ndarray | None = None
    g: np.ndarray | None = None

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        n = self.Q.shape[0]
        if self.Q.shape != (n, n):
            raise ValueError("Q must be square")
        sym_err = np.abs(self.Q - self.Q.T).max()
        if sym_err > 1e-10 * (1.0 + np.abs(self.Q).max()):
            raise ValueError("Q must be symmetric")
        self.q = _as_vector(self.q, n, "q")
        self.F = _as_constraint(self.F, n, "F")
        self.G = _as_constraint(self.G, n, "G")
        self.f = _as_vector(self.f, self.F.shape[0], "f")
        self.g = _as_vector(self.g, self.G.shape[0], "g")
        self._q_cho = None

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def n_eq(self) -> int:
        return self.F.shape[0]

    @property
    def n_in(self) -> int:
        return self.G.shape[0]

    def solve_q(self, rhs: np.ndarray) -> np.ndarray:
        """Solve Q x = rhs through the cached Cholesky factor."""
        if self._q_cho is None:
            try:
                self._q_cho = scipy.linalg.cho_factor(self.Q, lower=True)
            except scipy.linalg.LinAlgError as exc:
                raise NotStronglyConvex("Q is not positive definite") from exc
        return scipy.linalg.cho_solve(self._q_cho, rhs)

    def share_factorization(self, other: "ParametricQp") -> None:
        """Adopt the Cholesky factor of `other`, which must hold the same Q."""
        self._q_cho = other._q_cho

    def constraint_stack(self) -> np.ndarray:
        """Stacked constraint matrix E = [G; F] in dual ordering."""
        return np.vstack([self.G, self.F])


@dataclass(eq=False)
class DualProblem:
    """Dual QP data: min 0.5 z'Hz + h'z over z = (lam >= 0, mu free)."""

    H: np.ndarray
    h: np.ndarray
    n_in: int
    n_eq: int

    @property
    def size(self) -> int:
        return self.n_in + self.n_eq


def build_dual(qp: ParametricQp) -> DualProblem:
    """Assemble the dual problem; verifies Q > 0 via factorization success."""
    E = qp.constraint_stack()
    if E.shape[0] == 0:
        qp.solve_q(qp.q)  # trigger the factorization check even without duals
        return DualProblem(np.zeros((0, 0)), np.zeros(0), 0, 0)
    H = E @ qp.solve_q(E.T)
    H = 0.5 * (H + H.T)
    h = E @ qp.solve_q(qp.q) + np.concatenate([qp.g, qp.f])
    return DualProblem(H, h, qp.n_in, qp.n_eq)


def spectral_norm_estimate(H: np.ndarray, iterations: int = 20) -> float:
    """Largest-eigenvalue estimate of a PSD matrix by power iteration.

    The start vector comes from a fixed counter-based generator, so the
    estimate is a deterministic function of H.
    """
    n = H.shape[0]
    if n == 0:
        return 0.0
    rng = np.random.Generator(np.random.Philox(0x9E3779B9))
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iterations):
        w = H @ v
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
    return lam


def default_gamma(dp: DualProblem) -> float:
    """Dual stepsize 0.9 / lambda_max(H), with lambda_max from power iteration."""
    lam = spectral_norm_estimate(dp.H)
    return 0.9 / lam if lam > 0.0 else 1.0


@dataclass(eq=False)
class DualSolve:
    z: np.ndarray
    status: QpStatus
    iterations: int
    residual: float
    objectives: np.ndarray | None = None


def _project_dual(z: np.ndarray, n_in: int) -> np.ndarray:
    out = z.copy()
    np.maximum(out[:n_in], 0.0, out=out[:n_in])
    return out


def solve_dual(
    dp: DualProblem,
    gamma: float,
    tol: float = 1e-8,
    max_iter: int | None = None,
    z0: np.ndarray | None = None,
    trace: bool = False,
) -> DualSolve:
    """Projected-gradient solve of the dual to fixed-point residual `tol`.

    Args:
        dp: dual problem data.
        gamma: stepsize; must lie in (0, 2 / lambda_max(H)) for convergence.
        tol: bound on the infinity norm of z - P_C(z - gamma (Hz + h)).
        max_iter: iteration cap, default 200 * (n_in + n_eq).
        z0: warm start (copied); zeros when omitted.
        trace: record the dual objective at every iterate.

    Returns:
        DualSolve with the last iterate; status MAX_ITER flags an unconverged
        solve (the iterate is still returned for inspection or fallback).
    """
    nz = dp.size
    if max_iter is None:
        max_iter = 200 * nz
    if nz == 0:
        return DualSolve(np.zeros(0), QpStatus.CONVERGED, 0, 0.0,
                         np.zeros(0) if trace else None)
    if z0 is None:
        z = np.zeros(nz)
    else:
        z = _project_dual(np.asarray(z0, dtype=float).ravel(), dp.n_in)
    objectives = [] if trace else None
    status = QpStatus.MAX_ITER
    residual = np.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        z_next = _project_dual(z - gamma * (dp.H @ z + dp.h), dp.n_in)
        residual = float(np.abs(z_next - z).max())
        z = z_next
        if trace:
            objectives.append(0.5 * z @ (dp.H @ z) + dp.h @ z)
        if residual <= tol:
            status = QpStatus.CONVERGED
            break
    return DualSolve(z, status, iterations, residual,
                     np.asarray(objectives) if trace else None)


def recover_primal(qp: ParametricQp, z: np.ndarray) -> np.ndarray:
    """Primal optimizer x = -Q^{-1}([G' F'] z + q) from a dual point."""
    z = np.asarray(z, dtype=float).ravel()
    if z.size != qp.n_in + qp.n_eq:
        raise ValueError(f"dual vector has size {z.size}, expected {qp.n_in + qp.n_eq}")
    rhs = qp.q.copy()
    if z.size:
        rhs = rhs + qp.constraint_stack().T @ z
    return -qp.solve_q(rhs)


def active_set(z: np.ndarray, n_in: int, tol_act: float = 1e-7) -> np.ndarray:
    """Indices of inequality multipliers above the activity threshold."""
    return np.flatnonzero(np.asarray(z)[:n_in] > tol_act)


def check_licq(qp: ParametricQp, active: np.ndarray) -> bool:
    """True when the active inequality rows stacked with F have full row rank.

    Rank is decided by a column-pivoted QR with threshold 1e-8 relative to the
    Frobenius norm of the stacked matrix.
    """
    M = np.vstack([qp.G[np.asarray(active, dtype=int)], qp.F])
    rows = M.shape[0]
    if rows == 0:
        return True
    if rows > qp.n:
        return False
    scale = np.linalg.norm(M)
    if scale == 0.0:
        return False
    R = scipy.linalg.qr(M.T, mode="r", pivoting=True)[0]
    diag = np.abs(np.diag(R))
    rank = int(np.count_nonzero(diag > 1e-8 * scale))
    return rank == rows


@dataclass
class KktResiduals:
    stationarity: float
    equality: float
    inequality: float
    complementarity: float

    @property
    def worst(self) -> float:
        return max(self.stationarity, self.equality, self.inequality,
                   self.complementarity)


def kkt_residuals(qp: ParametricQp, x: np.ndarray, z: np.ndarray) -> KktResiduals:
    """Infinity-norm KKT residuals of a primal-dual pair."""
    lam, mu = z[:qp.n_in], z[qp.n_in:]
    grad = qp.Q @ x + qp.q + qp.G.T @ lam + qp.F.T @ mu
    eq = np.abs(qp.F @ x - qp.f).max() if qp.n_eq else 0.0
    slack = qp.G @ x - qp.g if qp.n_in else np.zeros(0)
    ineq = max(0.0, slack.max()) if qp.n_in else 0.0
    comp = np.abs(lam * slack).max() if qp.n_in else 0.0
    return KktResiduals(float(np.abs(grad).max()), float(eq), float(ineq), float(comp))


@dataclass(eq=False)
class QpSolution:
    """Converged (or best-effort) primal-dual solution of one QP instance."""

    x: np.ndarray
    z: np.ndarray
    n_in: int
    active: np.ndarray
    status: QpStatus
    iterations: int
    fp_residual: float
    gamma: float
    licq_ok: bool
    jacobian: object | None = None

    @property
    def lam(self) -> np.ndarray:
        return self.z[:self.n_in]

    @property
    def mu(self) -> np.ndarray:
        return self.z[self.n_in:]


def solve(
    qp: ParametricQp,
    *,
    gamma: float | None = None,
    tol_kkt: float = 1e-8,
    tol_act: float = 1e-7,
    max_iter: int | None = None,
    z0: np.ndarray | None = None,
) -> QpSolution:
    """Full dual-based solve pipeline returning a QpSolution.

    The dual fixed-point tolerance is gamma * tol_kkt, which translates into
    primal feasibility / complementarity residuals of order tol_kkt.
    """
    dp = build_dual(qp)
    if gamma is None:
        gamma = default_gamma(dp)
    dual = solve_dual(dp, gamma, tol=gamma * tol_kkt, max_iter=max_iter, z0=z0)
    x = recover_primal(qp, dual.z)
    act = active_set(dual.z, qp.n_in, tol_act)
    licq_ok = check_licq(qp, act)
    status = dual.status if licq_ok else QpStatus.LICQ_VIOLATED
    return QpSolution(x, dual.z, qp.n_in, act, status, dual.iterations,
                      dual.residual, gamma, licq_ok)
