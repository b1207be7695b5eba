"""Closed-loop simulation under the MPC policy and its model-based gradient.

A rollout applies u_t = policy(x_t, theta) to the true plant for T steps and
records the per-step policy Jacobians.  The tuning objective splits into a
quadratic tracking cost C and a penalty P = weight * sum_t dist_1(x_t, box);
the model-based gradient propagates the recorded Jacobians through the
prediction model with the forward recursion

    J_{u_t} = Jpol_x(t) J_{x_t} + Jpol_theta(t),
    J_{x_{t+1}} = A J_{x_t} + B J_{u_t},           J_{x_0} = 0,

and chains them with the analytic gradients of C and a sign-pattern
subgradient of the penalty (zero at kinks).  The gradient differentiates the
full objective C + P so that every mixing weight optimizes the same function.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mpc import MpcPolicy, PolicyParams, QpFailed, _as_bound
from .qp import QpStatus


@dataclass(eq=False)
class ObjectiveSpec:
    """Upper-level weights, references and the penalized state box."""

    Qc: np.ndarray
    Rc: np.ndarray
    Pc: np.ndarray
    x_ref: np.ndarray | None = None
    u_ref: np.ndarray | None = None
    penalty_weight: float = 300.0
    state_lower: np.ndarray | None = None
    state_upper: np.ndarray | None = None

    def __post_init__(self):
        self.Qc = np.atleast_2d(np.asarray(self.Qc, dtype=float))
        self.Rc = np.atleast_2d(np.asarray(self.Rc, dtype=float))
        self.Pc = np.atleast_2d(np.asarray(self.Pc, dtype=float))
        n_x, n_u = self.Qc.shape[0], self.Rc.shape[0]
        self.x_ref = _as_bound(self.x_ref, n_x, 0.0)
        self.u_ref = _as_bound(self.u_ref, n_u, 0.0)
        self.state_lower = _as_bound(self.state_lower, n_x, -np.inf)
        self.state_upper = _as_bound(self.state_upper, n_x, np.inf)
        if self.penalty_weight < 0:
            raise ValueError("penalty_weight must be nonnegative")


@dataclass(eq=False)
class Rollout:
    """Trajectory record: T+1 states, T inputs, T policy Jacobian pairs."""

    states: np.ndarray
    inputs: np.ndarray
    jac_state: np.ndarray | None
    jac_params: np.ndarray | None
    feasible: np.ndarray
    degenerate_steps: int = 0
    licq_failures: int = 0
    unconverged_steps: int = 0

    @property
    def horizon(self) -> int:
        return self.inputs.shape[0]


def rollout(
    plant,
    policy: MpcPolicy,
    params: PolicyParams,
    x0: np.ndarray,
    T: int,
    *,
    need_jacobians: bool = True,
    warm_start: bool = True,
) -> Rollout:
    """Simulate the plant under the policy for T steps.

    Args:
        plant: callable (x, u) -> next state; evaluated exactly once per step.
        policy: shared MpcPolicy (static structure reused across calls).
        params: cost parameters theta.
        x0: initial state.
        T: number of closed-loop steps (>= 1).
        need_jacobians: record per-step policy Jacobians (skip for pure
            objective probes; roughly halves the per-step cost).
        warm_start: seed each dual solve with the previous step's multipliers.

    Raises:
        QpFailed: re-raised with the failing step index; the trajectory up to
            that step is attached as the `partial` attribute.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    x = np.asarray(x0, dtype=float).ravel()
    n_x, n_u = policy.spec.n_x, policy.spec.n_u
    states = np.zeros((T + 1, n_x))
    inputs = np.zeros((T, n_u))
    jac_x = np.zeros((T, n_u, n_x)) if need_jacobians else None
    jac_th = np.zeros((T, n_u, params.n_params)) if need_jacobians else None
    states[0] = x
    degenerate = licq_fail = unconverged = 0
    z_prev = None
    for t in range(T):
        try:
            step = policy.solve(params, x, z0=z_prev if warm_start else None,
                                need_jacobians=need_jacobians)
        except QpFailed as exc:
            exc.partial = Rollout(states[:t + 1], inputs[:t],
                                  jac_x[:t] if need_jacobians else None,
                                  jac_th[:t] if need_jacobians else None,
                                  _box_membership(states[:t + 1], policy.spec),
                                  degenerate, licq_fail, unconverged)
            raise QpFailed(f"policy QP failed at step {t}: {exc}") from exc
        inputs[t] = step.u
        if need_jacobians:
            jac_x[t] = step.jac_state
            jac_th[t] = step.jac_params
        degenerate += int(step.diagnostics.degenerate)
        licq_fail += int(not step.diagnostics.licq_ok)
        unconverged += int(step.diagnostics.status == QpStatus.MAX_ITER)
        z_prev = step.z
        x = np.asarray(plant(x, step.u), dtype=float).ravel()
        states[t + 1] = x
    return Rollout(states, inputs, jac_x, jac_th,
                   _box_membership(states, policy.spec),
                   degenerate, licq_fail, unconverged)


def _box_membership(states: np.ndarray, spec) -> np.ndarray:
    return np.all((states >= spec.state_lower) & (states <= spec.state_upper),
                  axis=1)


def box_distance_l1(x: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> float:
    """1-norm distance from x to the box, computed coordinatewise."""
    over = np.maximum(x - upper, 0.0)
    under = np.maximum(lower - x, 0.0)
    return float(np.sum(over + under))


def _box_sign_pattern(x: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    # subgradient of dist_1: +1 above, -1 below, 0 inside and at the kinks
    return (x > upper).astype(float) - (x < lower).astype(float)


def objective(r: Rollout, ospec: ObjectiveSpec) -> tuple[float, float]:
    """Tracking cost C and penalty P of a rollout.

    C = |x_T - x_ref|^2_Pc + sum_{t<T} (|x_t - x_ref|^2_Qc + |u_t - u_ref|^2_Rc),
    P = penalty_weight * sum_{t<=T} dist_1(x_t, box).
    """
    dx = r.states - ospec.x_ref
    du = r.inputs - ospec.u_ref
    T = r.horizon
    C = float(np.einsum("ti,ij,tj->", dx[:T], ospec.Qc, dx[:T])
              + np.einsum("ti,ij,tj->", du, ospec.Rc, du)
              + dx[T] @ ospec.Pc @ dx[T])
    P = ospec.penalty_weight * float(sum(
        box_distance_l1(x, ospec.state_lower, ospec.state_upper) for x in r.states))
    return C, P


def model_gradient(r: Rollout, model, ospec: ObjectiveSpec) -> np.ndarray:
    """Gradient estimate of C + P w.r.t. theta using the prediction model.

    Args:
        r: rollout carrying per-step policy Jacobians.
        model: (A, B) pair, an object with A/B attributes, or a callable
            (x, u) -> (A, B) returning the model Jacobians at a point.
        ospec: objective definition.
    """
    if r.jac_state is None:
        raise ValueError("rollout was recorded without policy Jacobians")
    if callable(model) and not hasattr(model, "A"):
        jac_model = model
    else:
        A = np.asarray(model[0] if isinstance(model, (tuple, list)) else model.A,
                       dtype=float)
        B = np.asarray(model[1] if isinstance(model, (tuple, list)) else model.B,
                       dtype=float)
        jac_model = None
    T = r.horizon
    n_theta = r.jac_params.shape[2]
    Jx = np.zeros((r.states.shape[1], n_theta))
    d = np.zeros(n_theta)
    w = ospec.penalty_weight
    for t in range(T):
        dxt = r.states[t] - ospec.x_ref
        d += (2.0 * ospec.Qc @ dxt) @ Jx
        d += w * _box_sign_pattern(r.states[t], ospec.state_lower,
                                   ospec.state_upper) @ Jx
        Ju = r.jac_state[t] @ Jx + r.jac_params[t]
        d += (2.0 * ospec.Rc @ (r.inputs[t] - ospec.u_ref)) @ Ju
        if jac_model is not None:
            A, B = jac_model(r.states[t], r.inputs[t])
        Jx = A @ Jx + B @ Ju
    dxT = r.states[T] - ospec.x_ref
    d += (2.0 * ospec.Pc @ dxT) @ Jx
    d += w * _box_sign_pattern(r.states[T], ospec.state_lower,
                               ospec.state_upper) @ Jx
    return d
