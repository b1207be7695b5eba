"""Horizon QP assembly for a box-constrained linear-prediction MPC policy.

Decision vector layout (length n):

    v = [ x_0 .. x_N | u_0 .. u_{N-1} | s_0 .. s_N ]

where the per-step slack vectors s_k cover the state coordinates that carry
at least one finite bound; with a fully unbounded state box there are no
slack variables.  Equality rows pin x_0 to the measured state and encode the
prediction dynamics x_{k+1} = A x_k + B u_k.  Input bounds are hard;
state bounds are softened to x <= ub + s, x >= lb - s, s >= 0, with the slack
penalized quadratically (weight `slack_quad_weight`) and linearly (weight
`slack_lin_weight`).  The softening keeps the QP feasible for every initial
state, so no separate recovery scheme is needed.

Cost parameters enter through diag(p_q)^2, diag(p_r)^2 and L L' (L lower
triangular from p_p), each regularized by `reg_eps * I` so the QP stays
strongly convex for every parameter value.  The QP blocks are therefore
smooth in (x_t, theta) and their sensitivities are assembled analytically;
slots are ordered state-first: p = (x_t, p_q, p_r, p_p).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse

from . import qp as qpmod
from . import qp_diff
from .qp import ParametricQp, QpStatus


class QpFailed(RuntimeError):
    """The policy QP produced a non-finite solution."""


def _as_bound(v, size, default):
    if v is None:
        return np.full(size, default, dtype=float)
    v = np.asarray(v, dtype=float).ravel()
    if v.size == 1:
        return np.full(size, float(v[0]))
    if v.size != size:
        raise ValueError(f"bound has size {v.size}, expected {size}")
    return v


@dataclass(eq=False)
class MpcSpec:
    """Static description of the horizon problem (model, boxes, references)."""

    horizon: int
    A: np.ndarray
    B: np.ndarray
    state_lower: np.ndarray | None = None
    state_upper: np.ndarray | None = None
    input_lower: np.ndarray | None = None
    input_upper: np.ndarray | None = None
    x_ref: np.ndarray | None = None
    u_ref: np.ndarray | None = None
    slack_quad_weight: float = 1.0
    slack_lin_weight: float = 25.0
    reg_eps: float = 1e-6

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        n_x = self.A.shape[0]
        if self.A.shape != (n_x, n_x) or self.B.shape[0] != n_x:
            raise ValueError("A must be square and B row-conformant with A")
        n_u = self.B.shape[1]
        self.state_lower = _as_bound(self.state_lower, n_x, -np.inf)
        self.state_upper = _as_bound(self.state_upper, n_x, np.inf)
        self.input_lower = _as_bound(self.input_lower, n_u, -np.inf)
        self.input_upper = _as_bound(self.input_upper, n_u, np.inf)
        if np.any(self.state_lower > self.state_upper) or np.any(
                self.input_lower > self.input_upper):
            raise ValueError("box bounds must satisfy lower <= upper")
        self.x_ref = _as_bound(self.x_ref, n_x, 0.0)
        self.u_ref = _as_bound(self.u_ref, n_u, 0.0)
        if self.slack_quad_weight <= 0 or self.slack_lin_weight <= 0:
            raise ValueError("slack weights must be positive")

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]


def n_packed_tril(n_x: int) -> int:
    return n_x * (n_x + 1) // 2


@dataclass(eq=False)
class PolicyParams:
    """Tunable cost parameters theta = (p_q, p_r, p_p) with their admissible box.

    p_p packs the lower triangle of L row by row (np.tril_indices order).
    """

    p_q: np.ndarray
    p_r: np.ndarray
    p_p: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        self.p_q = np.asarray(self.p_q, dtype=float).ravel()
        self.p_r = np.asarray(self.p_r, dtype=float).ravel()
        self.p_p = np.asarray(self.p_p, dtype=float).ravel()
        n_x = self.p_q.size
        if self.p_p.size != n_packed_tril(n_x):
            raise ValueError("p_p must pack the lower triangle of an n_x x n_x matrix")
        n = self.n_params
        self.lower = _as_bound(self.lower, n, -np.inf)
        self.upper = _as_bound(self.upper, n, np.inf)

    @property
    def n_x(self) -> int:
        return self.p_q.size

    @property
    def n_u(self) -> int:
        return self.p_r.size

    @property
    def n_params(self) -> int:
        return self.p_q.size + self.p_r.size + self.p_p.size

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.p_q, self.p_r, self.p_p])

    def replace_vector(self, theta: np.ndarray) -> "PolicyParams":
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.size != self.n_params:
            raise ValueError("theta has the wrong size")
        nq, nr = self.p_q.size, self.p_r.size
        return PolicyParams(theta[:nq], theta[nq:nq + nr], theta[nq + nr:],
                            self.lower, self.upper)

    def cost_matrices(self, eps: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(Q, R, P) = (diag(p_q)^2, diag(p_r)^2, L L') each plus eps * I."""
        Q = np.diag(self.p_q ** 2) + eps * np.eye(self.n_x)
        R = np.diag(self.p_r ** 2) + eps * np.eye(self.n_u)
        L = self.tril()
        P = L @ L.T + eps * np.eye(self.n_x)
        return Q, R, P

    def tril(self) -> np.ndarray:
        L = np.zeros((self.n_x, self.n_x))
        L[np.tril_indices(self.n_x)] = self.p_p
        return L


def params_from_matrices(Q_diag, R_diag, P, lower=None, upper=None) -> PolicyParams:
    """PolicyParams reproducing the given diagonal Q/R weights and dense P."""
    Q_diag = np.asarray(Q_diag, dtype=float).ravel()
    R_diag = np.asarray(R_diag, dtype=float).ravel()
    if np.any(Q_diag < 0) or np.any(R_diag < 0):
        raise ValueError("diagonal weights must be nonnegative")
    L = np.linalg.cholesky(np.asarray(P, dtype=float))
    return PolicyParams(np.sqrt(Q_diag), np.sqrt(R_diag),
                        L[np.tril_indices(L.shape[0])], lower, upper)


@dataclass(eq=False)
class MpcDiagnostics:
    status: QpStatus
    licq_ok: bool
    dual_iterations: int
    fp_residual: float
    degenerate: bool = False


@dataclass(eq=False)
class MpcStep:
    """First input of the horizon solution plus its local sensitivities."""

    u: np.ndarray
    jac_state: np.ndarray | None
    jac_params: np.ndarray | None
    diagnostics: MpcDiagnostics
    z: np.ndarray
    solution: qpmod.QpSolution | None = None


class MpcPolicy:
    """Reusable policy object: static structure built once, per-theta data cached.

    Instances are safe to share across concurrent rollouts as long as each
    rollout keeps its own warm-start vector; the internal theta cache is
    read-only after construction of each entry.
    """

    def __init__(self, spec: MpcSpec, *, tol_kkt: float = 1e-8,
                 tol_act: float = 1e-7, max_dual_iter: int | None = None):
        self.spec = spec
        self.tol_kkt = tol_kkt
        self.tol_act = tol_act
        self.max_dual_iter = max_dual_iter
        self._build_structure()
        self._cache: dict[bytes, dict] = {}

    # ---- static structure -------------------------------------------------

    def _build_structure(self):
        spec = self.spec
        N, n_x, n_u = spec.horizon, spec.n_x, spec.n_u
        self.bounded = np.flatnonzero(np.isfinite(spec.state_lower)
                                      | np.isfinite(spec.state_upper))
        n_s = self.bounded.size
        self.n_s = n_s
        self.nv_x = n_x * (N + 1)
        self.nv_u = n_u * N
        self.nv_s = n_s * (N + 1)
        self.n_var = self.nv_x + self.nv_u + self.nv_s
        self.u0_slice = slice(self.nv_x, self.nv_x + n_u)

        n_eq = n_x * (N + 1)
        F = np.zeros((n_eq, self.n_var))
        F[:n_x, :n_x] = np.eye(n_x)
        for k in range(N):
            r = slice(n_x * (k + 1), n_x * (k + 2))
            F[r, n_x * (k + 1):n_x * (k + 2)] = np.eye(n_x)
            F[r, n_x * k:n_x * (k + 1)] = -spec.A
            F[r, self.nv_x + n_u * k:self.nv_x + n_u * (k + 1)] = -spec.B
        self.F = F
        self.f_base = np.zeros(n_eq)
        self.n_eq = n_eq

        rows, cols, vals, rhs = [], [], [], []

        def add_row(entries, b):
            r = len(rhs)
            for c, v in entries:
                rows.append(r)
                cols.append(c)
                vals.append(v)
            rhs.append(b)

        for k in range(N):
            base = self.nv_x + n_u * k
            for j in range(n_u):
                if np.isfinite(spec.input_upper[j]):
                    add_row([(base + j, 1.0)], spec.input_upper[j])
        for k in range(N):
            base = self.nv_x + n_u * k
            for j in range(n_u):
                if np.isfinite(spec.input_lower[j]):
                    add_row([(base + j, -1.0)], -spec.input_lower[j])
        slack_pos = {j: m for m, j in enumerate(self.bounded)}
        for k in range(N + 1):
            for j in self.bounded:
                if np.isfinite(spec.state_upper[j]):
                    add_row([(n_x * k + j, 1.0),
                             (self.nv_x + self.nv_u + n_s * k + slack_pos[j], -1.0)],
                            spec.state_upper[j])
        for k in range(N + 1):
            for j in self.bounded:
                if np.isfinite(spec.state_lower[j]):
                    add_row([(n_x * k + j, -1.0),
                             (self.nv_x + self.nv_u + n_s * k + slack_pos[j], -1.0)],
                            -spec.state_lower[j])
        for i in range(self.nv_s):
            add_row([(self.nv_x + self.nv_u + i, -1.0)], 0.0)

        G = np.zeros((len(rhs), self.n_var))
        G[rows, cols] = vals
        self.G = G
        self.g = np.asarray(rhs, dtype=float)
        self.n_in = G.shape[0]

        # state-sensitivity slots: d f / d x_t is the identity on the first rows
        n_p = n_x + n_x + n_u + n_packed_tril(n_x)
        self.n_params = n_p
        df = np.zeros((n_p, n_eq))
        df[:n_x, :n_x] = np.eye(n_x)
        self.df = df
        self.tril_rows, self.tril_cols = np.tril_indices(n_x)

    # ---- per-theta data ---------------------------------------------------

    def _prepare(self, params: PolicyParams) -> dict:
        key = params.to_vector().tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        spec = self.spec
        N, n_x, n_u = spec.horizon, spec.n_x, spec.n_u
        Qm, Rm, Pm = params.cost_matrices(spec.reg_eps)

        Qbar = np.zeros((self.n_var, self.n_var))
        qvec = np.zeros(self.n_var)
        for k in range(N):
            s = slice(n_x * k, n_x * (k + 1))
            Qbar[s, s] = 2.0 * Qm
            qvec[n_x * k:n_x * (k + 1)] = -2.0 * Qm @ spec.x_ref
        sN = slice(n_x * N, n_x * (N + 1))
        Qbar[sN, sN] = 2.0 * Pm
        qvec[sN] = -2.0 * Pm @ spec.x_ref
        for k in range(N):
            s = slice(self.nv_x + n_u * k, self.nv_x + n_u * (k + 1))
            Qbar[s, s] = 2.0 * Rm
            qvec[s] = -2.0 * Rm @ spec.u_ref
        if self.nv_s:
            s = slice(self.nv_x + self.nv_u, self.n_var)
            Qbar[s, s] = 2.0 * spec.slack_quad_weight * np.eye(self.nv_s)
            qvec[s.start:] = spec.slack_lin_weight

        template = ParametricQp(Qbar, qvec, self.F, self.f_base, self.G, self.g)
        dp = qpmod.build_dual(template)
        gamma = qpmod.default_gamma(dp)
        sens = self._build_sensitivity(params)
        entry = {
            "params": params,
            "template": template,
            "dual": dp,
            "gamma": gamma,
            "sens": sens,
        }
        if len(self._cache) >= 8:
            self._cache.pop(next(iter(self._cache)))
        self._cache[key] = entry
        return entry

    def _build_sensitivity(self, params: PolicyParams) -> qp_diff.AssemblySensitivity:
        spec = self.spec
        N, n_x, n_u = spec.horizon, spec.n_x, spec.n_u
        n, n_p = self.n_var, self.n_params
        L = params.tril()
        dQ: list = [None] * n_p
        dq = np.zeros((n_p, n))
        slot = n_x  # state slots first, all-zero except df
        for i in range(n_x):
            idx = np.array([n_x * k + i for k in range(N)])
            val = 4.0 * params.p_q[i]
            dQ[slot] = scipy.sparse.csr_matrix(
                (np.full(N, val), (idx, idx)), shape=(n, n))
            dq[slot, idx] = -val * spec.x_ref[i]
            slot += 1
        for i in range(n_u):
            idx = np.array([self.nv_x + n_u * k + i for k in range(N)])
            val = 4.0 * params.p_r[i]
            dQ[slot] = scipy.sparse.csr_matrix(
                (np.full(N, val), (idx, idx)), shape=(n, n))
            dq[slot, idx] = -val * spec.u_ref[i]
            slot += 1
        base = n_x * N
        for r, c in zip(self.tril_rows, self.tril_cols):
            dP = np.zeros((n_x, n_x))
            dP[r, :] += L[:, c]
            dP[:, r] += L[:, c]
            block = 2.0 * dP
            rr, cc = np.nonzero(block)
            dQ[slot] = scipy.sparse.csr_matrix(
                (block[rr, cc], (base + rr, base + cc)), shape=(n, n))
            dq[slot, base:base + n_x] = -block @ spec.x_ref
            slot += 1
        return qp_diff.AssemblySensitivity(
            n_params=n_p, n_state=n_x, dQ=dQ, dq=dq, df=self.df)

    # ---- solve ------------------------------------------------------------

    def assemble(self, params: PolicyParams, x_t: np.ndarray
                 ) -> tuple[ParametricQp, qp_diff.AssemblySensitivity]:
        """Instantiate the horizon QP at (theta, x_t) with its sensitivity slots."""
        x_t = np.asarray(x_t, dtype=float).ravel()
        if x_t.size != self.spec.n_x:
            raise ValueError(f"state has size {x_t.size}, expected {self.spec.n_x}")
        entry = self._prepare(params)
        template = entry["template"]
        f = self.f_base.copy()
        f[:self.spec.n_x] = x_t
        inst = ParametricQp(template.Q, template.q, self.F, f, self.G, self.g)
        inst.share_factorization(template)
        return inst, entry["sens"]

    def solve(self, params: PolicyParams, x_t: np.ndarray, *,
              z0: np.ndarray | None = None, need_jacobians: bool = True) -> MpcStep:
        """Solve the horizon QP and return the first input with its Jacobians."""
        inst, sens = self.assemble(params, x_t)
        entry = self._prepare(params)
        dp_t, gamma = entry["dual"], entry["gamma"]
        h = dp_t.h.copy()
        h[dp_t.n_in:dp_t.n_in + self.spec.n_x] += x_t
        dp = qpmod.DualProblem(dp_t.H, h, dp_t.n_in, dp_t.n_eq)
        dual = qpmod.solve_dual(dp, gamma, tol=gamma * self.tol_kkt,
                                max_iter=self.max_dual_iter, z0=z0)
        x = qpmod.recover_primal(inst, dual.z)
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(dual.z)):
            raise QpFailed(f"non-finite QP solution (dual status {dual.status.value})")
        act = qpmod.active_set(dual.z, self.n_in, self.tol_act)
        licq_ok = qpmod.check_licq(inst, act)
        status = dual.status if licq_ok else QpStatus.LICQ_VIOLATED

        jac_state = jac_params = None
        degenerate = False
        if need_jacobians:
            dHz_dh, W = qp_diff.sensitivity_products(inst, sens, x, dual.z)
            Z, degenerate = qp_diff.dual_jacobian(dp, dual.z, gamma, dHz_dh)
            sol_jac = qp_diff.solution_jacobian(inst, sens, dual.z, Z,
                                                x=x, W=W, degenerate=degenerate)
            jac_state = sol_jac.wrt_state[self.u0_slice]
            jac_params = sol_jac.wrt_params[self.u0_slice]
            if not (np.all(np.isfinite(jac_state)) and np.all(np.isfinite(jac_params))):
                raise QpFailed("non-finite policy Jacobian")
        diag = MpcDiagnostics(status, licq_ok, dual.iterations,
                              dual.residual, degenerate)
        qp_solution = qpmod.QpSolution(
            x, dual.z, self.n_in, act, status, dual.iterations, dual.residual,
            gamma, licq_ok)
        return MpcStep(x[self.u0_slice].copy(), jac_state, jac_params,
                       diag, dual.z, qp_solution)

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_cache"] = {}
        return state


def mpc(spec: MpcSpec, params: PolicyParams, x_t: np.ndarray
        ) -> tuple[np.ndarray, np.ndarray, np.ndarray, MpcDiagnostics]:
    """One-shot policy evaluation: u_0 plus Jacobians w.r.t. x_t and theta.

    Builds a throwaway MpcPolicy; rollouts should construct the policy once
    and call :meth:`MpcPolicy.solve` to reuse the static structure.
    """
    step = MpcPolicy(spec).solve(params, x_t)
    return step.u, step.jac_state, step.jac_params, step.diagnostics
