"""Baseline allocation designed against the linear harvesting model.

The baseline assumes harvested power is a fixed fraction eta of received
power.  That makes its objective linear in the powers, so the time-shared
relaxation of the full problem is a single convex program: solve it, round
the shares to a binary schedule, repair the schedule if rounding starved a
user, and polish the slot powers exactly on the fixed schedule.  The
resulting allocation is finally scored under the non-linear harvesting
curve, which is how a receiver with a real rectifier would experience it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import ChannelRealization, ScenarioConfig
from .eh import EhModelParams, LinearEhParams, harvested_power_linear
from .errors import InfeasibleError
from .inner import (LN2, _build_allocation, _fixed_schedule_slack,
                    _repair_schedule)
from .newton import average_harvested_power


@dataclass(frozen=True)
class BaselineReport:
    """Outcome of a baseline solve.

    avg_harvested_power is the allocation's value under the non-linear
    harvesting curve (Watts); avg_harvested_linear is the value the baseline
    believes it achieves under its own linear model.
    """

    avg_harvested_power: float
    avg_harvested_linear: float
    per_user_avg_rate: np.ndarray
    per_slot_ir: list


def _solve_relaxation(hm, config: ScenarioConfig, eta):
    """Time-shared convex relaxation; returns (schedule, slot powers).

    The schedule is the per-slot argmax of the fractional shares.  Raises
    InfeasibleError when even the relaxation admits no feasible point.
    """
    import cvxpy as cp

    K, T = hm.shape
    sigma2 = config.noise_power
    s = cp.Variable((K, T), nonneg=True)
    Pp = cp.Variable((K, T), nonneg=True)
    Pv = cp.Variable((K, T), nonneg=True)
    ptot = cp.Variable(T, nonneg=True)
    # rescale the huge SNR dynamic range so the conic solver stays stable
    kappa = np.maximum(hm * config.P_max / sigma2, 1.0)
    rate = cp.multiply(s, np.log2(kappa)) - cp.rel_entr(
        s, s / kappa + cp.multiply(hm / (sigma2 * kappa), Pp)) / LN2
    cons = [
        cp.sum(s, axis=0) <= 1,
        s <= 1,
        ptot == cp.sum(Pp, axis=0),
        ptot <= config.P_max,
        cp.sum(ptot) / T <= config.P_av,
        cp.sum(rate, axis=1) / T >= config.c_req_vec,
        Pv <= cp.vstack([ptot] * K),
        Pv <= cp.multiply(1.0 - s, config.P_max),
    ]
    prob = cp.Problem(cp.Maximize(cp.sum(cp.multiply(eta * hm, Pv)) / T), cons)
    prob.solve(solver=cp.CLARABEL)
    if prob.status not in ("optimal", "optimal_inaccurate") or s.value is None:
        raise InfeasibleError(
            "rate requirements exceed what the power budget allows")
    return (np.argmax(s.value, axis=0),
            np.clip(np.asarray(ptot.value, dtype=float), 0.0, config.P_max))


def _polish_powers(hm, jstar, config: ScenarioConfig, eta, p0):
    """Maximize the linear harvest on the fixed schedule via a convex program.

    With the schedule fixed the objective is linear in the slot powers and
    the rate constraints are concave, so the polish is exact.  Returns the
    improved slot powers, or p0 unchanged if the conic solver fails or its
    answer violates a target.
    """
    import cvxpy as cp

    K, T = hm.shape
    cols = np.arange(T)
    sigma2 = config.noise_power
    h_ir = hm[jstar, cols]
    # per-slot marginal value of power: every non-IR user harvests it
    c = eta * (hm.sum(axis=0) - h_ir)

    p = cp.Variable(T, nonneg=True)
    kappa = np.maximum(h_ir * config.P_max / sigma2, 1.0)
    rate = (np.log(kappa) + cp.log(1.0 / kappa
                                   + cp.multiply(h_ir / (sigma2 * kappa), p))) / LN2
    cons = [p <= config.P_max, cp.sum(p) / T <= config.P_av]
    cons += [cp.sum(rate[jstar == k]) / T >= config.c_req_vec[k]
             for k in range(K) if np.any(jstar == k)]
    prob = cp.Problem(cp.Maximize(c @ p / T), cons)
    try:
        prob.solve(solver=cp.CLARABEL)
    except cp.error.SolverError:
        return p0
    if prob.status not in ("optimal", "optimal_inaccurate") or p.value is None:
        return p0
    cand = np.clip(np.asarray(p.value, dtype=float), 0.0, config.P_max)
    rates = np.log2(1.0 + cand * h_ir / sigma2)
    avg = np.bincount(jstar, rates, minlength=K) / T
    if (np.all(avg >= config.c_req_vec - 1e-8)
            and cand.sum() / T <= config.P_av + 1e-9 * max(1.0, config.P_max)
            and (c @ cand) >= (c @ p0)):
        return cand
    return p0


def solve_baseline(config: ScenarioConfig, h: ChannelRealization,
                   lin_params: LinearEhParams = LinearEhParams(),
                   eh_params: EhModelParams = EhModelParams()):
    """Solve the baseline problem; returns (Allocation, BaselineReport)."""
    hm = h.h
    K, T = hm.shape
    eta = lin_params.eta
    jstar, p0 = _solve_relaxation(hm, config, eta)
    tval, pv, _ = _fixed_schedule_slack(hm, jstar, config)
    if tval < -1e-9:
        jstar = _repair_schedule(hm, jstar, config)
        _, pv, _ = _fixed_schedule_slack(hm, jstar, config)
    p = _polish_powers(hm, jstar, config, eta, pv if pv is not None else p0)
    alloc = _build_allocation(hm, jstar, p, K, T)

    cols = np.arange(T)
    rates = np.log2(1.0 + p * hm[jstar, cols] / config.noise_power)
    avg_rates = np.bincount(jstar, rates, minlength=K) / T
    lin_value = float(harvested_power_linear(alloc.P_virtual * hm,
                                             lin_params).sum() / T)
    report = BaselineReport(
        avg_harvested_power=average_harvested_power(alloc, h, eh_params),
        avg_harvested_linear=lin_value,
        per_user_avg_rate=avg_rates,
        per_slot_ir=[int(j) if p[n] > 0 else None
                     for n, j in enumerate(jstar)],
    )
    return alloc, report
