"""Energy-harvesting receiver models.

Two RF-to-DC conversion models: a logistic (saturating) curve parameterized
by saturation power M, steepness a and turn-on threshold b, and the classic
linear model with a fixed conversion efficiency.  All powers are linear
Watts; dBm conversion happens only at I/O boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Clamp for logistic exponents: exp(+-700) is the edge of float64 range and
# anything beyond is numerically 0 or saturation anyway.
EXP_CLAMP = 700.0


@dataclass(frozen=True)
class EhModelParams:
    """Constants of the non-linear (logistic) harvesting curve.

    M is the saturation harvested power in Watts, a the circuit steepness in
    1/W, b the turn-on threshold in Watts.  omega is the derived zero-input
    offset 1/(1+exp(a*b)), always in (0, 0.5).
    """

    M: float = 0.024
    a: float = 1500.0
    b: float = 0.0014
    omega: float = field(init=False)

    def __post_init__(self):
        if not (self.M > 0 and self.a > 0 and self.b > 0):
            raise ValueError("EH parameters M, a, b must all be positive")
        object.__setattr__(self, "omega", 1.0 / (1.0 + np.exp(self.a * self.b)))


@dataclass(frozen=True)
class LinearEhParams:
    """Linear RF-to-DC model: harvested = eta * received."""

    eta: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"conversion efficiency must lie in [0, 1], got {self.eta}")


def _check_nonneg(p_received):
    p = np.asarray(p_received, dtype=float)
    if np.any(p < 0):
        raise ValueError("received power must be nonnegative")
    return p


def psi(p_received, params: EhModelParams):
    """Logistic conversion curve M / (1 + exp(-a (p - b))).

    Strictly increasing with range (M*omega, M).  Accepts scalars or arrays.
    """
    p = _check_nonneg(p_received)
    z = np.clip(-params.a * (p - params.b), -EXP_CLAMP, EXP_CLAMP)
    out = params.M / (1.0 + np.exp(z))
    return float(out) if np.isscalar(p_received) else out


def harvested_power_nonlinear(p_received, params: EhModelParams):
    """Harvested DC power (psi(p) - M*omega) / (1 - omega); zero at p = 0."""
    p = _check_nonneg(p_received)
    out = (psi(p, params) - params.M * params.omega) / (1.0 - params.omega)
    return float(out) if np.isscalar(p_received) else out


def harvested_power_linear(p_received, params: LinearEhParams):
    """Linear model: eta * received power."""
    p = _check_nonneg(p_received)
    out = params.eta * p
    return float(out) if np.isscalar(p_received) else out


def saturation_input(fraction: float, params: EhModelParams) -> float:
    """Input power at which the non-linear harvested power equals fraction*M.

    Analytic inversion of the logistic: solve
    (psi(p) - M*omega)/(1-omega) = fraction*M for p.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie strictly inside (0, 1), got {fraction}")
    # psi target in (M*omega, M)
    psi_target = params.M * (fraction * (1.0 - params.omega) + params.omega)
    ratio = params.M / psi_target - 1.0  # equals exp(-a (p - b))
    return params.b - np.log(ratio) / params.a
