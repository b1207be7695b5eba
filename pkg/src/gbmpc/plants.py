"""True-plant dynamics, least-squares model identification, and DARE tools.

The quadcopter is the standard twelve-state rigid body: position, velocity
(world frame, z up), ZYX Euler angles, and body rates, driven by four rotor
speeds whose squares map to total thrust and body torques.  Integration is a
single RK4 step per control period.  LTI benchmark plants (scalar, double
integrator) live here as well, along with the regression that identifies an
(A, B) prediction model from closed-loop data and the iterative solver for
the discrete algebraic Riccati equation used to seed the terminal cost.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class RankDeficientData(ValueError):
    """Regression data does not excite every state/input direction."""


class NoConvergence(RuntimeError):
    """Riccati iteration failed to settle."""


# ---------------------------------------------------------------------------
# quadcopter
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadcopterParams:
    """Physical constants; defaults give a hover speed near 360 rad/s."""

    mass: float = 0.5
    inertia_x: float = 3.2e-3
    inertia_y: float = 3.2e-3
    inertia_z: float = 5.5e-3
    arm: float = 0.17
    k_thrust: float = 9.4618e-6
    k_torque: float = 2.0e-7
    gravity: float = 9.81
    max_rotor_speed: float = 630.0
    dt: float = 0.02

    def __post_init__(self):
        for name in ("mass", "inertia_x", "inertia_y", "inertia_z", "arm",
                     "k_thrust", "k_torque", "gravity", "max_rotor_speed", "dt"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def hover_speed(self) -> float:
        return float(np.sqrt(self.mass * self.gravity / (4.0 * self.k_thrust)))


def hover_input(params: QuadcopterParams) -> np.ndarray:
    return np.full(4, params.hover_speed)


def hover_state(position=(0.0, 0.0, 0.0)) -> np.ndarray:
    x = np.zeros(12)
    x[:3] = position
    return x


def _rotation(phi: float, theta: float, psi: float) -> np.ndarray:
    cph, sph = np.cos(phi), np.sin(phi)
    cth, sth = np.cos(theta), np.sin(theta)
    cps, sps = np.cos(psi), np.sin(psi)
    return np.array([
        [cps * cth, cps * sth * sph - sps * cph, cps * sth * cph + sps * sph],
        [sps * cth, sps * sth * sph + cps * cph, sps * sth * cph - cps * sph],
        [-sth, cth * sph, cth * cph],
    ])


def quad_rhs(params: QuadcopterParams, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Continuous-time derivative of the 12-state model for clamped rotor speeds.

    Rotors sit on the body axes: 0 at +x, 1 at +y, 2 at -x, 3 at -y, with
    alternating spin so yaw torque is k_torque * (w0^2 - w1^2 + w2^2 - w3^2).
    """
    vel = x[3:6]
    phi, theta, psi = x[6:9]
    p, q, r = x[9:12]
    w2 = u ** 2
    thrust = params.k_thrust * w2.sum()
    tau_x = params.arm * params.k_thrust * (w2[1] - w2[3])
    tau_y = params.arm * params.k_thrust * (w2[2] - w2[0])
    tau_z = params.k_torque * (w2[0] - w2[1] + w2[2] - w2[3])

    acc = _rotation(phi, theta, psi) @ np.array([0.0, 0.0, thrust / params.mass])
    acc[2] -= params.gravity

    cph, sph = np.cos(phi), np.sin(phi)
    cth, tth = np.cos(theta), np.tan(theta)
    angle_rates = np.array([
        p + sph * tth * q + cph * tth * r,
        cph * q - sph * r,
        (sph * q + cph * r) / cth,
    ])
    ix, iy, iz = params.inertia_x, params.inertia_y, params.inertia_z
    body = np.array([
        ((iy - iz) * q * r + tau_x) / ix,
        ((iz - ix) * p * r + tau_y) / iy,
        ((ix - iy) * p * q + tau_z) / iz,
    ])
    return np.concatenate([vel, acc, angle_rates, body])


def quad_dynamics(params: QuadcopterParams, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """One RK4 step of the quadcopter over params.dt; rotor speeds are clamped
    to [0, max_rotor_speed] before integration."""
    x = np.asarray(x, dtype=float).ravel()
    u = np.clip(np.asarray(u, dtype=float).ravel(), 0.0, params.max_rotor_speed)
    dt = params.dt
    k1 = quad_rhs(params, x, u)
    k2 = quad_rhs(params, x + 0.5 * dt * k1, u)
    k3 = quad_rhs(params, x + 0.5 * dt * k2, u)
    k4 = quad_rhs(params, x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def input_saturated(params: QuadcopterParams, u: np.ndarray) -> bool:
    u = np.asarray(u, dtype=float)
    return bool(np.any(u < 0.0) or np.any(u > params.max_rotor_speed))


def hover_linearization(params: QuadcopterParams) -> tuple[np.ndarray, np.ndarray]:
    """Analytic continuous-time (A, B) of the quadcopter at hover."""
    g = params.gravity
    wh = params.hover_speed
    A = np.zeros((12, 12))
    A[0:3, 3:6] = np.eye(3)
    A[3, 7] = g    # pitch tilts thrust into +x
    A[4, 6] = -g   # roll tilts thrust into -y
    A[6:9, 9:12] = np.eye(3)
    B = np.zeros((12, 4))
    B[5, :] = 2.0 * params.k_thrust * wh / params.mass
    kf, arm = params.k_thrust, params.arm
    B[9, 1] = 2.0 * arm * kf * wh / params.inertia_x
    B[9, 3] = -2.0 * arm * kf * wh / params.inertia_x
    B[10, 2] = 2.0 * arm * kf * wh / params.inertia_y
    B[10, 0] = -2.0 * arm * kf * wh / params.inertia_y
    km = params.k_torque
    B[11, :] = 2.0 * km * wh / params.inertia_z * np.array([1.0, -1.0, 1.0, -1.0])
    return A, B


def discretize_euler(A_c: np.ndarray, B_c: np.ndarray, dt: float
                     ) -> tuple[np.ndarray, np.ndarray]:
    n = A_c.shape[0]
    return np.eye(n) + dt * A_c, dt * B_c


# ---------------------------------------------------------------------------
# LTI benchmarks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearPlant:
    """Picklable plant callable x+ = A x + B u."""

    A: tuple
    B: tuple

    @classmethod
    def from_matrices(cls, A, B) -> "LinearPlant":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        return cls(tuple(map(tuple, A)), tuple(map(tuple, B)))

    @property
    def A_matrix(self) -> np.ndarray:
        return np.asarray(self.A, dtype=float)

    @property
    def B_matrix(self) -> np.ndarray:
        return np.asarray(self.B, dtype=float)

    def __call__(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.A_matrix @ np.asarray(x, dtype=float) + \
            self.B_matrix @ np.asarray(u, dtype=float)


def double_integrator(dt: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    A = np.array([[1.0, dt], [0.0, 1.0]])
    B = np.array([[0.5 * dt * dt], [dt]])
    return A, B


def scalar_lti(a: float = 0.9, b: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    return np.array([[a]]), np.array([[b]])


# ---------------------------------------------------------------------------
# identification
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Dataset:
    """Stacked one-step transitions (x_t, u_t, x_{t+1})."""

    x: np.ndarray
    u: np.ndarray
    x_next: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.u = np.atleast_2d(np.asarray(self.u, dtype=float))
        self.x_next = np.atleast_2d(np.asarray(self.x_next, dtype=float))
        if not (self.x.shape[0] == self.u.shape[0] == self.x_next.shape[0]):
            raise ValueError("sample counts disagree")
        if self.x.shape != self.x_next.shape:
            raise ValueError("x and x_next must have identical shapes")

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass(eq=False)
class LinearModel:
    """Identified prediction model x+ = A x + B u."""

    A: np.ndarray
    B: np.ndarray
    fit_residual: float = 0.0
    ridge: float = 0.0


def fit_linear_model(data: Dataset, ridge: float = 1e-10) -> LinearModel:
    """Least-squares fit of [A B] from one-step transitions.

    Solves the normal equations with a tiny ridge for conditioning and
    reports the Frobenius norm of the prediction residual.

    Raises:
        RankDeficientData: fewer samples than unknowns or numerically
            rank-deficient regressors.
    """
    Z = np.hstack([data.x, data.u])
    m, d = Z.shape
    if m < d:
        raise RankDeficientData(f"{m} samples cannot determine {d} columns")
    if np.linalg.matrix_rank(Z) < d:
        raise RankDeficientData("regressor matrix is rank deficient")
    M = Z.T @ Z + ridge * np.eye(d)
    theta = np.linalg.solve(M, Z.T @ data.x_next)
    n_x = data.x.shape[1]
    A = theta[:n_x].T
    B = theta[n_x:].T
    residual = float(np.linalg.norm(data.x_next - Z @ theta))
    return LinearModel(A, B, residual, ridge)


def collect_trajectories(
    plant,
    policy,
    n_traj: int,
    T: int,
    x0_sampler,
    rng: np.random.Generator,
    input_noise_std: float = 0.0,
) -> Dataset:
    """Roll a stabilizing policy from sampled initial states and stack transitions.

    Each trajectory draws from its own substream derived from (seed, index),
    so the dataset is independent of the iteration order.
    """
    seeds = rng.integers(0, 2 ** 63 - 1, size=max(n_traj, 1))
    xs, us, xns = [], [], []
    for i in range(n_traj):
        sub = np.random.Generator(np.random.Philox(int(seeds[i])))
        x = np.asarray(x0_sampler(sub), dtype=float).ravel()
        for _ in range(T):
            u = np.asarray(policy(x), dtype=float).ravel()
            if input_noise_std > 0.0:
                u = u + input_noise_std * sub.standard_normal(u.size)
            x_next = np.asarray(plant(x, u), dtype=float).ravel()
            xs.append(x)
            us.append(u)
            xns.append(x_next)
            x = x_next
    if not xs:
        n = 0
        return Dataset(np.zeros((n, 0)), np.zeros((n, 0)), np.zeros((n, 0)))
    return Dataset(np.array(xs), np.array(us), np.array(xns))


def save_dataset(path, data: Dataset, header_lines: list[str] | None = None) -> None:
    """Write transitions as CSV rows: t, x_t..., u_t..., x_{t+1}..."""
    n_x, n_u = data.x.shape[1], data.u.shape[1]
    cols = (["t"] + [f"x_{i}" for i in range(n_x)] + [f"u_{i}" for i in range(n_u)]
            + [f"xnext_{i}" for i in range(n_x)])
    with open(path, "w") as fh:
        for line in header_lines or []:
            fh.write(line + "\n")
        fh.write(",".join(cols) + "\n")
        for t in range(len(data)):
            row = ([str(t)] + [f"{v:.17g}" for v in data.x[t]]
                   + [f"{v:.17g}" for v in data.u[t]]
                   + [f"{v:.17g}" for v in data.x_next[t]])
            fh.write(",".join(row) + "\n")


def load_dataset(path) -> Dataset:
    """Inverse of :func:`save_dataset`; ignores leading '#' header lines."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip() and not ln.startswith("#")]
    header = lines[0].split(",")
    n_x = sum(1 for c in header if c.startswith("x_"))
    n_u = sum(1 for c in header if c.startswith("u_"))
    rows = [ln.split(",") for ln in lines[1:]]
    if not rows:
        return Dataset(np.zeros((0, n_x)), np.zeros((0, n_u)), np.zeros((0, n_x)))
    arr = np.array([[float(v) for v in r[1:]] for r in rows])
    return Dataset(arr[:, :n_x], arr[:, n_x:n_x + n_u], arr[:, n_x + n_u:])


# ---------------------------------------------------------------------------
# Riccati
# ---------------------------------------------------------------------------

def solve_dare(
    A: np.ndarray,
    B: np.ndarray,
    Q: np.ndarray,
    R: np.ndarray,
    tol: float = 1e-12,
    max_iter: int = 20000,
) -> np.ndarray:
    """Fixed-point iteration for the discrete algebraic Riccati equation.

    Iterates P <- A'PA - A'PB (R + B'PB)^{-1} B'PA + Q from P = Q until the
    update stalls below `tol` in the infinity norm.

    Raises:
        NoConvergence: divergent or non-settling iteration (e.g. the pair
            (A, B) is not stabilizable).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = Q.copy()
    blowup = 1e12 * max(1.0, float(np.abs(Q).max()))
    for _ in range(max_iter):
        BtP = B.T @ P
        gain = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = A.T @ P @ (A - B @ gain) + Q
        P_next = 0.5 * (P_next + P_next.T)
        delta = float(np.abs(P_next - P).max())
        P = P_next
        if np.abs(P).max() > blowup:
            raise NoConvergence("Riccati iteration diverged")
        if delta <= tol:
            return P
    raise NoConvergence(f"Riccati iteration did not settle in {max_iter} steps")


def dare_residual(A, B, Q, R, P) -> float:
    BtP = B.T @ P
    gain = np.linalg.solve(R + BtP @ B, BtP @ A)
    return float(np.abs(A.T @ P @ (A - B @ gain) + Q - P).max())


def lqr_gain(A, B, Q, R) -> np.ndarray:
    """Infinite-horizon gain K with u = -K x from the DARE solution."""
    P = solve_dare(A, B, Q, R)
    BtP = np.atleast_2d(B).T @ P
    return np.linalg.solve(np.atleast_2d(R) + BtP @ np.atleast_2d(B),
                           BtP @ np.atleast_2d(A))
