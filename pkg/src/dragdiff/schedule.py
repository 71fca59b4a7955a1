"""Noise-level schedules and the scalar step coefficients derived from them.

A schedule is the increasing sequence sigma_0 .. sigma_T of noise standard
deviations shared by the training-loss metric and the samplers.  The step
coefficients alpha_t (damping), eta_t (guidance strength) and gamma_t
(projected-gradient step size) are all simple functions of sigma_t.
"""

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NoiseSchedule",
    "GuidanceWeights",
    "make_schedule",
    "alpha",
    "eta",
    "gamma_t",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Strictly increasing noise levels sigma_0 .. sigma_T.

    sigma_0 may be zero (clean endpoint); every later level is positive.
    """

    sigmas: np.ndarray

    def __post_init__(self):
        sig = np.asarray(self.sigmas, dtype=float)
        if sig.ndim != 1 or sig.size < 2:
            raise ValueError("schedule needs at least sigma_0 and sigma_1")
        if not np.all(np.isfinite(sig)):
            raise ValueError("schedule contains nonfinite sigma")
        if sig[0] < 0:
            raise ValueError("sigma_0 must be >= 0")
        if not np.all(np.diff(sig) > 0):
            raise ValueError("sigmas must be strictly increasing")
        object.__setattr__(self, "sigmas", sig)

    @property
    def T(self):
        return len(self.sigmas) - 1

    def sigma(self, t):
        if not 0 <= t <= self.T:
            raise ValueError(f"t={t} outside [0, {self.T}]")
        return float(self.sigmas[t])


@dataclass(frozen=True)
class GuidanceWeights:
    """Scalar knobs of a guided run: eta0, CFG weight, GE mixing factor."""

    eta0: float = 400.0
    cfg_w: float = 7.5
    ge_gamma: float = 2.0

    def __post_init__(self):
        for name in ("eta0", "cfg_w", "ge_gamma"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
        if self.eta0 < 0:
            raise ValueError(f"eta0 must be >= 0, got {self.eta0}")


def make_schedule(kind, T, sigma_min, sigma_max):
    """Build a noise schedule of T steps between sigma_min and sigma_max.

    kind 'linear' spaces sigma uniformly.  kind 'log_linear' spaces log sigma
    uniformly; since log 0 is undefined, sigma_min = 0 pins sigma_0 = 0 and
    log-spaces t = 1..T over [0.01 * sigma_max, sigma_max].
    """
    T = int(T)
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    sigma_min = float(sigma_min)
    sigma_max = float(sigma_max)
    if not (math.isfinite(sigma_min) and math.isfinite(sigma_max)):
        raise ValueError("sigma bounds must be finite")
    if sigma_min < 0:
        raise ValueError(f"sigma_min must be >= 0, got {sigma_min}")
    if sigma_min >= sigma_max:
        raise ValueError(f"need sigma_min < sigma_max, got {sigma_min} >= {sigma_max}")

    if kind == "linear":
        sig = np.linspace(sigma_min, sigma_max, T + 1)
    elif kind == "log_linear":
        if sigma_min > 0:
            sig = np.geomspace(sigma_min, sigma_max, T + 1)
        else:
            low = 0.01 * sigma_max
            if T == 1:
                tail = np.array([sigma_max])
            else:
                tail = np.geomspace(low, sigma_max, T)
            sig = np.concatenate([[0.0], tail])
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")

    # endpoints must hit the requested bounds exactly, not up to geomspace rounding
    sig[0] = sigma_min
    sig[-1] = sigma_max
    return NoiseSchedule(sigmas=sig)


def alpha(schedule, t):
    """Damping coefficient alpha_t = 1 - sigma_{t-1} / sigma_t, in (0, 1]."""
    t = int(t)
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t={t} outside [1, {schedule.T}]")
    s_t = schedule.sigmas[t]
    if s_t <= 0:
        raise ValueError(f"alpha undefined at sigma_t = {s_t}")
    return float(1.0 - schedule.sigmas[t - 1] / s_t)


def eta(weights, sigma_t):
    """Guidance strength eta_t = eta0 * sigma_t / sqrt(sigma_t^2 + 1).

    Equals eta0 / sqrt(1 + 1/sigma_t^2) for sigma_t > 0 but stays finite at
    sigma_t = 0.
    """
    sigma_t = float(sigma_t)
    if not math.isfinite(sigma_t) or sigma_t < 0:
        raise ValueError(f"sigma_t must be finite and >= 0, got {sigma_t}")
    return weights.eta0 * sigma_t / math.sqrt(sigma_t * sigma_t + 1.0)


def gamma_t(weights, sigma_t):
    """Projected-gradient step size gamma_t = sigma_t * eta_t."""
    return float(sigma_t) * eta(weights, sigma_t)
