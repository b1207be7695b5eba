"""Hybrid projected update mixing model-based and zeroth-order directions.

Each iteration forms d = eta_k * d1 + (1 - eta_k) * d2 from the model-based
gradient d1 and the one-point smoothing estimate d2, then projects

    theta_{k+1} = clip(theta_k - alpha_k * d, lower, upper)

onto the admissible box.  Convergence requires vanishing stepsizes: alpha
positive with divergent sum and summable squares, eta in [0, 1] with
sum(eta_k * alpha_k) finite; `validate_schedule` checks these conditions
symbolically for the closed-form families and flags custom tables as
unverifiable.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import closed_loop, zeroth_order
from .closed_loop import ObjectiveSpec, Rollout
from .mpc import MpcPolicy, PolicyParams


class NonFiniteDirection(RuntimeError):
    """Update direction contains NaN or Inf."""


@dataclass(frozen=True)
class Schedule:
    """Scalar sequence from one of the closed-form families or a custom table.

    kinds: "power"      scale / (k+1)^exponent
           "power_log"  scale * log(k+2) / (k+1)^exponent
           "constant"   scale
           "table"      values[k] (must cover every requested k)
    """

    kind: str
    scale: float = 1.0
    exponent: float = 0.0
    values: tuple = field(default=())

    def __post_init__(self):
        if self.kind not in ("power", "power_log", "constant", "table"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "table" and len(self.values) == 0:
            raise ValueError("table schedule needs at least one value")

    @classmethod
    def power(cls, scale: float, exponent: float) -> "Schedule":
        return cls("power", scale, exponent)

    @classmethod
    def power_log(cls, scale: float, exponent: float) -> "Schedule":
        return cls("power_log", scale, exponent)

    @classmethod
    def constant(cls, value: float) -> "Schedule":
        return cls("constant", value)

    @classmethod
    def table(cls, values) -> "Schedule":
        return cls("table", values=tuple(float(v) for v in values))

    def value(self, k: int) -> float:
        if self.kind == "power":
            return self.scale / (k + 1) ** self.exponent
        if self.kind == "power_log":
            return self.scale * math.log(k + 2) / (k + 1) ** self.exponent
        if self.kind == "constant":
            return self.scale
        if k >= len(self.values):
            raise IndexError(f"table schedule has no entry for k={k}")
        return self.values[k]

    def is_zero(self) -> bool:
        if self.kind == "constant":
            return self.scale == 0.0
        if self.kind == "table":
            return all(v == 0.0 for v in self.values)
        return self.scale == 0.0


@dataclass
class ScheduleReport:
    valid: bool
    violations: list[str]
    notes: list[str]

    def __str__(self) -> str:
        lines = ["schedules valid" if self.valid else "schedules INVALID"]
        lines += [f"  violation: {v}" for v in self.violations]
        lines += [f"  note: {n}" for n in self.notes]
        return "\n".join(lines)


def validate_schedule(s_alpha: Schedule, s_eta: Schedule) -> ScheduleReport:
    """Check the stepsize conditions for the (alpha, eta) pair.

    For the power families the exponent conditions are checked symbolically:
    alpha needs scale > 0 and exponent in (0.5, 1]; the mixing weight needs
    range [0, 1] and a combined decay alpha_exp + eta_exp > 1 unless eta is
    identically zero.  Custom tables get positivity / range checks only and a
    note that summability cannot be verified from finitely many values.
    """
    violations: list[str] = []
    notes: list[str] = []

    alpha_exp = None
    if s_alpha.kind == "table":
        if any(v <= 0 for v in s_alpha.values):
            violations.append("alpha table contains non-positive entries")
        notes.append("alpha summability unverifiable for custom tables")
    elif s_alpha.kind == "constant":
        if s_alpha.scale <= 0:
            violations.append("alpha must be positive")
        else:
            violations.append("constant alpha: sum of squares diverges")
    else:
        if s_alpha.scale <= 0:
            violations.append("alpha must be positive")
        if s_alpha.exponent <= 0.5:
            violations.append(
                f"alpha exponent {s_alpha.exponent} <= 0.5: sum of squares diverges")
        if s_alpha.exponent > 1.0:
            violations.append(
                f"alpha exponent {s_alpha.exponent} > 1: sum of steps converges")
        if not violations:
            alpha_exp = s_alpha.exponent

    eta_zero = s_eta.is_zero()
    if s_eta.kind == "table":
        if any(v < 0 or v > 1 for v in s_eta.values):
            violations.append("eta table leaves [0, 1]")
        notes.append("eta summability unverifiable for custom tables")
    elif s_eta.kind == "constant":
        if s_eta.scale < 0 or s_eta.scale > 1:
            violations.append("constant eta leaves [0, 1]")
        elif s_eta.scale > 0:
            violations.append(
                "constant positive eta: sum(eta * alpha) inherits the divergent sum of alpha")
    else:
        if s_eta.scale < 0 or s_eta.scale > 1:
            violations.append("eta scale leaves [0, 1]")
        if s_eta.exponent < 0:
            violations.append("eta exponent negative: weights grow beyond 1")
        if alpha_exp is not None and not eta_zero:
            combined = alpha_exp + s_eta.exponent
            if combined <= 1.0:
                violations.append(
                    f"combined decay {combined} <= 1: sum(eta * alpha) diverges")
    return ScheduleReport(not violations, violations, notes)


@dataclass(eq=False)
class IterateRecord:
    """One optimizer iteration; everything except wall_time lands in the CSV."""

    k: int
    seed: int
    theta: np.ndarray
    cost: float
    penalty: float
    eta: float
    alpha: float
    norm_d1: float
    norm_d2: float
    norm_d: float
    degenerate: bool
    licq_violated: bool
    wall_time: float = float("nan")

    @property
    def objective(self) -> float:
        return self.cost + self.penalty


def project_box(theta: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    return np.clip(theta, lower, upper)


def step(
    k: int,
    theta: np.ndarray,
    d1: np.ndarray | None,
    d2: np.ndarray,
    s_alpha: Schedule,
    s_eta: Schedule,
    lower: np.ndarray,
    upper: np.ndarray,
) -> np.ndarray:
    """Projected hybrid update theta - alpha_k (eta_k d1 + (1-eta_k) d2)."""
    eta = s_eta.value(k)
    alpha = s_alpha.value(k)
    d2 = np.asarray(d2, dtype=float)
    if d1 is None:
        if eta != 0.0:
            raise ValueError("d1 is required whenever eta is nonzero")
        d = (1.0 - eta) * d2
    else:
        d = eta * np.asarray(d1, dtype=float) + (1.0 - eta) * d2
    if not np.all(np.isfinite(d)):
        raise NonFiniteDirection(f"non-finite update direction at iteration {k}")
    return project_box(theta - alpha * d, lower, upper)


@dataclass(eq=False)
class RunConfig:
    """Everything one optimization run needs; plant and model stay fixed."""

    plant: object
    model: object
    policy: MpcPolicy
    objective: ObjectiveSpec
    theta0: PolicyParams
    x0: np.ndarray
    horizon: int
    alpha: Schedule
    eta: Schedule
    iterations: int
    seed: int = 0
    delta: float = 1e-4
    warm_start: bool = True
    continue_on_nonfinite: bool = False


@dataclass(eq=False)
class RunResult:
    records: list[IterateRecord]
    theta_final: np.ndarray
    final_rollout: Rollout


def run(cfg: RunConfig) -> RunResult:
    """Run the hybrid loop for `iterations` steps and evaluate the final iterate.

    Per iteration: one rollout at theta_k (shared between the record and the
    estimator's base value), one rollout at the probe theta_k + delta * v_k,
    and one model-gradient pass over the recorded Jacobians.  A trailing
    record evaluates theta_K with the step fields left as NaN.  Identical
    configs and seeds reproduce the records bit for bit.
    """
    if cfg.iterations < 0:
        raise ValueError("iterations must be nonnegative")
    rng = zeroth_order.make_rng(cfg.seed)
    theta = cfg.theta0.to_vector()
    lower, upper = cfg.theta0.lower, cfg.theta0.upper
    theta = project_box(theta, lower, upper)
    n_theta = theta.size
    records: list[IterateRecord] = []
    skip_d1 = cfg.eta.is_zero()

    for k in range(cfg.iterations):
        tic = time.perf_counter()
        eta_k = cfg.eta.value(k)
        need_d1 = not skip_d1 and eta_k != 0.0
        params_k = cfg.theta0.replace_vector(theta)
        r = closed_loop.rollout(cfg.plant, cfg.policy, params_k, cfg.x0,
                                cfg.horizon, need_jacobians=need_d1,
                                warm_start=cfg.warm_start)
        cost, penalty = closed_loop.objective(r, cfg.objective)
        base = cost + penalty
        d1 = closed_loop.model_gradient(r, cfg.model, cfg.objective) if need_d1 else None

        v = zeroth_order.sample_sphere(rng, n_theta)
        probe = cfg.theta0.replace_vector(theta + cfg.delta * v)
        r2 = closed_loop.rollout(cfg.plant, cfg.policy, probe, cfg.x0,
                                 cfg.horizon, need_jacobians=False,
                                 warm_start=cfg.warm_start)
        c2, p2 = closed_loop.objective(r2, cfg.objective)
        d2 = (n_theta / cfg.delta) * ((c2 + p2) - base) * v

        effective_eta = eta_k
        try:
            theta_next = step(k, theta, d1, d2, cfg.alpha, cfg.eta, lower, upper)
        except NonFiniteDirection:
            d2_finite = bool(np.all(np.isfinite(d2)))
            if not (cfg.continue_on_nonfinite and d2_finite):
                raise
            effective_eta = 0.0
            theta_next = project_box(theta - cfg.alpha.value(k) * d2, lower, upper)

        records.append(IterateRecord(
            k=k, seed=cfg.seed, theta=theta.copy(), cost=cost, penalty=penalty,
            eta=effective_eta, alpha=cfg.alpha.value(k),
            norm_d1=float(np.linalg.norm(d1)) if d1 is not None else float("nan"),
            norm_d2=float(np.linalg.norm(d2)),
            norm_d=float(np.linalg.norm(effective_eta * (d1 if d1 is not None else 0.0)
                                        + (1.0 - effective_eta) * d2)),
            degenerate=r.degenerate_steps > 0,
            licq_violated=r.licq_failures > 0,
            wall_time=time.perf_counter() - tic,
        ))
        theta = theta_next

    tic = time.perf_counter()
    params_final = cfg.theta0.replace_vector(theta)
    r_final = closed_loop.rollout(cfg.plant, cfg.policy, params_final, cfg.x0,
                                  cfg.horizon, need_jacobians=False,
                                  warm_start=cfg.warm_start)
    cost, penalty = closed_loop.objective(r_final, cfg.objective)
    nan = float("nan")
    records.append(IterateRecord(
        k=cfg.iterations, seed=cfg.seed, theta=theta.copy(), cost=cost,
        penalty=penalty, eta=nan, alpha=nan, norm_d1=nan, norm_d2=nan,
        norm_d=nan, degenerate=r_final.degenerate_steps > 0,
        licq_violated=r_final.licq_failures > 0,
        wall_time=time.perf_counter() - tic,
    ))
    return RunResult(records, theta, r_final)
