"""One-point randomized-smoothing gradient estimator.

The estimator probes the objective at theta + delta * v with v uniform on the
unit sphere and differences against the value at theta:

    d2 = (n_theta / delta) * (obj(theta + delta v) - obj(theta)) * v.

Its expectation is the gradient of the delta-smoothed objective, so a run can
descend on function evaluations alone.  Probes may leave the admissible box
by at most delta; the objective stays well defined there because the policy
cost matrices remain positive definite for every parameter value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SmoothingConfig:
    delta: float = 1e-4
    rng_seed: int = 0
    n_theta: int = 1

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.n_theta < 1:
            raise ValueError("n_theta must be at least 1")


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator: the direction stream is a pure function of the seed."""
    return np.random.Generator(np.random.Philox(seed))


def sample_sphere(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform draw from the unit sphere (normalized Gaussian; zero draws resampled)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    while True:
        v = rng.standard_normal(n)
        norm = np.linalg.norm(v)
        if norm > 0.0:
            return v / norm


def estimate(
    theta: np.ndarray,
    v: np.ndarray,
    delta: float,
    eval_fn,
    base_value: float | None = None,
) -> np.ndarray:
    """One-point differenced gradient estimate along direction v.

    `base_value` carries a pre-computed obj(theta) so the estimator adds a
    single extra evaluation; when omitted both points are evaluated here.
    """
    theta = np.asarray(theta, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    if v.size != theta.size:
        raise ValueError("direction and theta must have the same size")
    if base_value is None:
        base_value = float(eval_fn(theta))
    probed = float(eval_fn(theta + delta * v))
    return (theta.size / delta) * (probed - base_value) * v
