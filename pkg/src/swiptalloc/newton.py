"""Outer loop: damped modified Newton on the transform weights.

The root conditions mu*(1+e) = 1 and beta*(1+e) = M couple the weights to
the allocation only through e = exp(-a*(P_virtual*h - b)).  With the
allocation held fixed the residual phi is affine and diagonal in rho =
(mu, beta), so the undamped Newton step lands exactly on
fixed_point_duals(allocation); the outer loop is that fixed-point iteration.
Once the schedule settles, the self-consistency system G(mu) - mu = 0 (G the
composite weights -> allocation -> weights map) is solved by matrix-free
Newton-Krylov steps, which converge even where the plain iteration's local
spectrum sits at or above one.  Entries flatten in C order, i = k*T + n.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from .channel import ChannelRealization, ScenarioConfig
from .eh import EXP_CLAMP, EhModelParams, harvested_power_nonlinear
from .errors import MaxBacktrackError
from .inner import (Allocation, DualParams, InnerState, solve_inner_detailed)


@dataclass(frozen=True)
class SolverOptions:
    I_max: int = 30
    phi_tol_scale: float = 1e-6
    delta: float = 0.1
    step_ratio: float = 0.5
    l_max: int = 60
    krylov_dim: int = 12          # GMRES subspace size per Newton-Krylov step
    krylov_gate: float = 0.5      # residual level below which Krylov engages


@dataclass(frozen=True)
class SolveReport:
    avg_harvested_power: float
    outer_iterations: int
    phi_residual: float
    tightness_metric: float
    per_slot_ir: list
    per_user_avg_rate: np.ndarray
    converged: bool
    inner_solves: int = 0
    residual_history: list = field(default_factory=list)
    gamma: float = 0.0
    eps: np.ndarray = None
    gamma_sched: float = 0.0
    eps_sched: np.ndarray = None


def _exponent_matrix(alloc: Allocation, h: ChannelRealization, params: EhModelParams):
    z = np.clip(-params.a * (alloc.P_virtual * h.h - params.b), -EXP_CLAMP, EXP_CLAMP)
    return np.exp(z)


def phi(duals: DualParams, alloc: Allocation, h: ChannelRealization,
        params: EhModelParams) -> np.ndarray:
    """Length-2N residual: [mu*(1+e) - 1 ; beta*(1+e) - M], C-order flattening."""
    e = _exponent_matrix(alloc, h, params)
    top = duals.mu * (1.0 + e) - 1.0
    bot = duals.beta * (1.0 + e) - params.M
    return np.concatenate([top.ravel(order="C"), bot.ravel(order="C")])


def fixed_point_duals(alloc: Allocation, h: ChannelRealization,
                      params: EhModelParams) -> DualParams:
    """Closed-form root: mu = 1/(1+e), beta = M/(1+e)."""
    e = _exponent_matrix(alloc, h, params)
    return DualParams(mu=1.0 / (1.0 + e), beta=params.M / (1.0 + e))


def newton_direction(duals: DualParams, phi_vec: np.ndarray,
                     M: float = 0.024) -> np.ndarray:
    """Damped-Newton direction -phi_i/(1+e_i).

    The Jacobian is diagonal with entries (1+e_i), recoverable from the
    residual itself: (1+e) = (phi+1)/mu on the first half and (phi+M)/beta
    on the second, so no allocation is needed here.
    """
    n = duals.mu.size
    mu = duals.mu.ravel(order="C")
    beta = duals.beta.ravel(order="C")
    jac_top = (phi_vec[:n] + 1.0) / mu
    jac_bot = (phi_vec[n:] + M) / beta
    return -phi_vec / np.concatenate([jac_top, jac_bot])


def _rho_step(duals: DualParams, direction: np.ndarray, zeta: float) -> DualParams:
    n = duals.mu.size
    shape = duals.mu.shape
    mu = duals.mu.ravel(order="C") + zeta * direction[:n]
    beta = duals.beta.ravel(order="C") + zeta * direction[n:]
    return DualParams(mu=mu.reshape(shape), beta=beta.reshape(shape))


def line_search(duals: DualParams, direction: np.ndarray, delta: float,
                step_ratio: float, alloc: Allocation, h: ChannelRealization,
                params: EhModelParams, l_max: int = 60) -> float:
    """Largest zeta in {1, eps, eps^2, ...} meeting the norm-decrease test."""
    base = np.linalg.norm(phi(duals, alloc, h, params))
    zeta = 1.0
    for _ in range(l_max):
        trial = np.linalg.norm(phi(_rho_step(duals, direction, zeta), alloc, h, params))
        if trial <= (1.0 - delta * zeta) * base:
            return zeta
        zeta *= step_ratio
    raise MaxBacktrackError("line search exhausted its backtracking budget")


def _composite_weights(mu, h, config, params, state):
    """One application of the composite map G: weights -> allocation -> weights.

    Returns (G(mu), inner solution).  With beta = M*mu enforced, the full
    residual norm follows from these alone:
    ||phi|| = sqrt(1 + M^2) * ||mu / G(mu) - 1||.
    """
    K, T = h.h.shape
    duals = DualParams(mu=mu.reshape(K, T), beta=params.M * mu.reshape(K, T))
    sol = solve_inner_detailed(duals, h, config, params, state)
    z = np.clip(-params.a * (sol.allocation.P_virtual * h.h - params.b),
                -EXP_CLAMP, EXP_CLAMP)
    return (1.0 / (1.0 + np.exp(z))).ravel(order="C"), sol


def solve(config: ScenarioConfig, h: ChannelRealization, params: EhModelParams,
          opts: SolverOptions = SolverOptions()):
    """Alternate inner solves with dual updates until the root conditions hold.

    Returns (Allocation, DualParams, SolveReport).  Raises InfeasibleError if
    the rate requirements cannot be met at all.
    """
    K, T = h.h.shape
    N = K * T
    tol = opts.phi_tol_scale * np.sqrt(2.0 * N)
    mu_floor = params.omega
    mu_ceil = 1.0 - 1e-12

    duals = DualParams(mu=np.full((K, T), params.omega),
                       beta=np.full((K, T), params.M * params.omega))
    state = InnerState()
    sol = solve_inner_detailed(duals, h, config, params, state)
    inner_solves = 1
    state = sol.state
    state.full_refresh = False
    prev_schedule = None
    history = []
    converged = False
    iters = 0
    settle_iters = 2
    # residual levels at which the frozen schedule gets re-examined by a full
    # phase A; the last gate must pass with an unchanged schedule before the
    # solve may declare convergence
    gates = [opts.krylov_gate, 100.0 * tol]
    gate_idx = 0
    best_res = np.inf
    last_improve = 0

    for m in range(opts.I_max):
        phi_vec = phi(duals, sol.allocation, h, params)
        res = float(np.linalg.norm(phi_vec))
        history.append(res)
        iters = m + 1

        if prev_schedule is None or not np.array_equal(sol.schedule, prev_schedule):
            if gate_idx == len(gates):
                gate_idx -= 1     # final gate no longer passed
        prev_schedule = sol.schedule

        if res <= tol and gate_idx == len(gates):
            converged = True
            break
        if res < 0.95 * best_res:
            best_res, last_improve = res, m
        if m >= settle_iters:
            if gate_idx < len(gates) and res <= gates[gate_idx] and state.frozen:
                # thaw once: let a full phase A re-derive the schedule
                state.frozen = False
                state.full_refresh = True
                gate_idx += 1
            elif m - last_improve >= 6 and state.frozen:
                # stagnation escape: the current schedule has trapped the
                # iteration in a cycle, so re-derive it from scratch
                state.frozen = False
                state.full_refresh = True
                last_improve = m
            else:
                state.frozen = True

        direction = newton_direction(duals, phi_vec, params.M)
        zeta = line_search(duals, direction, opts.delta, opts.step_ratio,
                           sol.allocation, h, params, opts.l_max)
        plain = _rho_step(duals, direction, zeta)

        mu_now = duals.mu.ravel(order="C")
        mu_plain = plain.mu.ravel(order="C")
        mu_next = mu_plain
        sol_next = None
        if state.frozen and res <= opts.krylov_gate:
            # Newton-Krylov on G(mu) - mu = 0; the plain step already gives
            # G(mu), and each GMRES matvec is one finite-difference
            # application of the composite map from the same warm state
            F0 = mu_plain - mu_now
            snap = state
            counter = [0]
            scale = max(np.linalg.norm(mu_now), 1.0)

            def matvec(v):
                nv = np.linalg.norm(v)
                if nv == 0.0:
                    return v
                eps = 1e-6 * scale / nv
                Gv, _ = _composite_weights(mu_now + eps * v, h, config,
                                           params, snap)
                counter[0] += 1
                return v - (Gv - mu_plain) / eps

            op = LinearOperator((N, N), matvec=matvec)
            step, _ = gmres(op, F0, rtol=0.05, restart=opts.krylov_dim,
                            maxiter=1)
            inner_solves += counter[0]
            if np.all(np.isfinite(step)):
                # safeguarded acceptance: Newton-Krylov progress on these
                # instances is non-monotone, so a bounded residual increase is
                # tolerated, but a step that blows the residual up (an
                # overshoot past the linear region) is damped and, failing
                # that, discarded in favor of the plain step
                res_norm = np.sqrt(1.0 + params.M ** 2)
                cap = 100.0 * np.linalg.norm(F0)
                t = 1.0
                for _ in range(3):
                    if t * np.linalg.norm(step) > cap:
                        t *= 0.25
                        continue
                    cand = np.clip(mu_now + t * step, mu_floor, mu_ceil)
                    Gc, sol_c = _composite_weights(cand, h, config,
                                                   params, snap)
                    inner_solves += 1
                    res_c = res_norm * np.linalg.norm(cand / Gc - 1.0)
                    if res_c <= 2.0 * res:
                        mu_next, sol_next = cand, sol_c
                        break
                    t *= 0.25

        duals = DualParams(mu=mu_next.reshape(K, T),
                           beta=params.M * mu_next.reshape(K, T))
        if sol_next is None:
            sol = solve_inner_detailed(duals, h, config, params, state)
            inner_solves += 1
        else:
            sol = sol_next
        state = sol.state
        state.full_refresh = False

    report = SolveReport(
        avg_harvested_power=average_harvested_power(sol.allocation, h, params),
        outer_iterations=iters,
        phi_residual=history[-1],
        tightness_metric=sol.allocation.tightness,
        per_slot_ir=[int(j) if sol.slot_power[n] > 0 else None
                     for n, j in enumerate(sol.schedule)],
        per_user_avg_rate=sol.avg_rates,
        converged=converged,
        inner_solves=inner_solves,
        residual_history=history,
        gamma=sol.gamma,
        eps=sol.eps,
        gamma_sched=sol.gamma_sched,
        eps_sched=sol.eps_sched,
    )
    return sol.allocation, duals, report


def average_harvested_power(alloc: Allocation, h: ChannelRealization,
                            params: EhModelParams) -> float:
    """Mean per-slot total harvested power of a fixed allocation, in Watts."""
    T = h.h.shape[1]
    harvested = harvested_power_nonlinear(alloc.P_virtual * h.h, params)
    return float(harvested.sum() / T)
