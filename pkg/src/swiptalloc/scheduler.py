"""Closed-form per-slot user selection and its consistency check.

At an optimum of the time-shared problem, the user scheduled for information
in slot n is the argmax of a per-user score built from the rate multiplier
and the slot's aggregated duals.  This module recovers those scores from a
converged solve and re-derives the per-slot selection independently, so the
solver's schedule can be cross-checked without trusting its internals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import ChannelRealization, ScenarioConfig
from .eh import EXP_CLAMP, EhModelParams
from .errors import MultiplierUnavailable
from .inner import Allocation, DualParams

LN2 = np.log(2.0)


@dataclass(frozen=True)
class SchedulingMultipliers:
    """Recovered dual values driving the per-slot selection rule.

    lam is the per-slot scheduling multiplier (T,), eps the per-user rate
    multipliers (K,), and g the (K, T) aggregate of the remaining slot duals
    entering each user's selection score.
    """

    lam: np.ndarray
    eps: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        eps = np.asarray(self.eps, dtype=float)
        g = np.asarray(self.g, dtype=float)
        if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(eps))
                and np.all(np.isfinite(g))):
            raise ValueError("multipliers must be finite")
        if np.any(eps < 0) or np.any(lam < 0):
            raise ValueError("rate and slot multipliers must be nonnegative")
        if g.shape != (eps.shape[0], lam.shape[0]):
            raise ValueError("g must have shape (K, T)")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "eps", eps)
        object.__setattr__(self, "g", g)


def selection_metric(p, h, noise_power):
    """Rate-intercept metric ln(1 + x) - x/(1 + x), x = p*h/noise.

    This is the value of the log-rate minus its tangent-line term at the
    operating point; it is nonnegative and strictly increasing in x.
    """
    p = np.asarray(p, dtype=float)
    h = np.asarray(h, dtype=float)
    if np.any(p < 0) or np.any(h < 0):
        raise ValueError("power and channel gain must be nonnegative")
    if noise_power <= 0:
        raise ValueError("noise power must be positive")
    x = p * h / noise_power
    out = np.log1p(x) - x / (1.0 + x)
    if np.isscalar(p * h / noise_power) or out.ndim == 0:
        return float(out)
    return out


def _scores(metrics, multipliers: SchedulingMultipliers, n: int):
    T = multipliers.g.shape[1]
    return multipliers.eps / (T * LN2) * np.asarray(metrics, dtype=float) \
        + multipliers.g[:, n]


def select_ir(metrics, multipliers: SchedulingMultipliers, n: int) -> int:
    """Index of the user with the highest selection score in slot n.

    Ties break to the lowest user index.  The score is
    eps_k/(T ln 2) * metric_k + g_k(n).
    """
    scores = _scores(metrics, multipliers, n)
    if scores.size < 1:
        raise ValueError("need at least one user")
    if not np.all(np.isfinite(scores)):
        raise ValueError("selection scores must be finite")
    return int(np.argmax(scores))


def recover_multipliers(alloc: Allocation, duals: DualParams, eps,
                        h: ChannelRealization, config: ScenarioConfig,
                        params: EhModelParams) -> SchedulingMultipliers:
    """Rebuild the selection-score duals from a converged solve.

    For candidate IR k at the realized slot power p_n, the slot's objective
    contribution splits into eps_k/(T ln 2) * selection_metric plus a
    remainder g_k(n): the harvest terms of everyone but k, k's own zero-input
    harvest term, and the tangent-line part of k's rate.  Terms common to all
    candidates in a slot (the power price, additive constants) are dropped;
    they cancel in every score comparison.

    Raises MultiplierUnavailable if the solver did not expose its rate
    multipliers.
    """
    if eps is None:
        raise MultiplierUnavailable(
            "inner solver did not expose rate multipliers")
    eps = np.asarray(eps, dtype=float)
    hm = h.h
    K, T = hm.shape
    p = alloc.P_prime.sum(axis=0)
    w = duals.weights
    z = np.clip(-params.a * (p[None, :] * hm - params.b), -EXP_CLAMP, EXP_CLAMP)
    E = np.exp(z)
    eab = float(np.exp(min(params.a * params.b, EXP_CLAMP)))
    # harvest part if k were the IR: everyone else harvests p_n, k harvests 0
    harv = -(w * E).sum(axis=0)[None, :] + w * E - w * eab
    x = p[None, :] * hm / config.noise_power
    g = harv / T + eps[:, None] * (x / (1.0 + x)) / (T * LN2)
    metric = np.log1p(x) - x / (1.0 + x)
    scores = eps[:, None] / (T * LN2) * metric + g
    lam = np.maximum(scores.max(axis=0), 0.0)
    return SchedulingMultipliers(lam=lam, eps=eps, g=g)


def _slot_choices(alloc: Allocation, multipliers: SchedulingMultipliers,
                  h: ChannelRealization, config: ScenarioConfig):
    """Per-slot (solver IR, rule IR, top-two score gap); solver IR is None
    for idle slots."""
    hm = h.h
    K, T = hm.shape
    p = alloc.P_prime.sum(axis=0)
    out = []
    for n in range(T):
        metrics = selection_metric(np.full(K, p[n]), hm[:, n],
                                   config.noise_power)
        scores = _scores(metrics, multipliers, n)
        rule = int(np.argmax(scores))
        if K > 1:
            gap = float(scores[rule] - np.partition(scores, -2)[-2])
        else:
            gap = np.inf
        ir_col = np.flatnonzero(alloc.s[:, n] > 0.5)
        solver = int(ir_col[0]) if ir_col.size else None
        out.append((solver, rule, gap))
    return out


def verify_against_solver(alloc: Allocation, multipliers: SchedulingMultipliers,
                          h: ChannelRealization, config: ScenarioConfig) -> bool:
    """True iff the selection rule reproduces the solver's IR in every
    powered slot.

    Raises MultiplierUnavailable if multipliers were not recovered.
    """
    if multipliers is None:
        raise MultiplierUnavailable(
            "inner solver did not expose the duals needed for verification")
    choices = _slot_choices(alloc, multipliers, h, config)
    return all(solver == rule for solver, rule, _ in choices
               if solver is not None)


def agreement_counts(alloc: Allocation, multipliers: SchedulingMultipliers,
                     h: ChannelRealization, config: ScenarioConfig,
                     near_tie_gap: float = 0.0):
    """(agreeing slots, compared slots), skipping idle slots and slots whose
    top-two score gap is below near_tie_gap."""
    if multipliers is None:
        raise MultiplierUnavailable(
            "inner solver did not expose the duals needed for verification")
    agree = considered = 0
    for solver, rule, gap in _slot_choices(alloc, multipliers, h, config):
        if solver is None or gap < near_tie_gap:
            continue
        considered += 1
        agree += (solver == rule)
    return agree, considered
