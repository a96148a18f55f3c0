"""Mean-field equilibria: flow propagation, best response and a damped fixed-point loop.

The loop averages joint state-action measures, so its iterates are mixed
Markov policies recovered by disintegration. Every candidate pair
(policy, flow) is judged by two residuals computed from scratch:

* flow consistency, ``max_t rho_v(Lambda(policy)_t, flow_t)``;
* exploitability, ``J(policy) - min_pi J(pi)`` against the frozen flow.

Periodically the loop also certifies two sharper candidates: the pure best
response paired with its own flow (exact when the equilibrium is pure), and,
for equilibria that randomize at a few states, the solution of the
indifference conditions at those states.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy import optimize

from .dp import (
    MarkovPolicy,
    MeasureFlow,
    ValueFlow,
    evaluate_policy,
    q_values,
    solve_nonhomogeneous,
    tail_bound,
    truncation_horizon,
)
from .errors import NumericError, StabilityError, StructuralError
from .measures import rho_v_batch
from .model import GameModel, GrowthConstants, default_probes, estimate_growth_constants

logger = logging.getLogger(__name__)

EXPLOIT_FLOOR = -1e-9


def propagate_flow(model: GameModel, policy: MarkovPolicy, T: int) -> MeasureFlow:
    """Forward state distributions ``mu_0 .. mu_T`` induced by ``policy``."""
    if policy.horizon < T:
        raise StructuralError(f"policy horizon {policy.horizon} too short for T = {T}")
    if policy.n_states != model.n_states or policy.n_actions != model.n_actions:
        raise StructuralError("policy shape does not match the model")
    masses = np.empty((T + 1, model.n_states))
    m = model.mu0.mass.copy()
    masses[0] = m
    for t in range(T):
        P = model.kernel_tensor(m)
        weights = m[:, None] * policy.kernels[t]
        m = (weights[:, :, None] * P).sum(axis=(0, 1))
        m = np.clip(m, 0.0, None)
        m /= m.sum()
        masses[t + 1] = m
    return MeasureFlow(model.state_grid, masses)


def best_response(model: GameModel, flow: MeasureFlow) -> Tuple[MarkovPolicy, ValueFlow]:
    values, policy = solve_nonhomogeneous(model, flow)
    return policy, values


def exploitability(model: GameModel, flow: MeasureFlow, policy: MarkovPolicy) -> float:
    """Cost gap between ``policy`` and a best response to ``flow``."""
    _, J = evaluate_policy(model, flow, policy)
    _, opt = best_response(model, flow)
    gap = J - float(model.mu0.mass @ opt.values[0])
    if gap < EXPLOIT_FLOOR:
        raise NumericError(f"policy beats the best response by {-gap:.3g}")
    return max(gap, 0.0)


def joint_measures(flow: MeasureFlow, policy: MarkovPolicy) -> np.ndarray:
    """State-action measures ``nu_t(x, a) = mu_t(x) pi_t(a|x)``."""
    T = flow.horizon
    return flow.masses[:, :, None] * policy.kernels[: T + 1]


def disintegrate(joint: np.ndarray, fallback: MarkovPolicy) -> Tuple[MeasureFlow, MarkovPolicy]:
    """Split joint measures into their state marginals and conditional policy.

    Rows with zero state mass take the corresponding row of ``fallback``.
    """
    marg = joint.sum(axis=2)
    kernels = fallback.kernels[: joint.shape[0]].copy()
    mask = marg > 0
    kernels[mask] = joint[mask] / marg[mask][:, None]
    return marg, MarkovPolicy(kernels)


def flow_residual(model: GameModel, policy: MarkovPolicy, flow: MeasureFlow) -> float:
    induced = propagate_flow(model, policy, flow.horizon)
    return float(np.max(rho_v_batch(induced.masses, flow.masses, model.v)))


def certify(model: GameModel, policy: MarkovPolicy, flow: MeasureFlow) -> Tuple[float, float]:
    """(flow residual, exploitability) of a candidate pair, recomputed from scratch."""
    return flow_residual(model, policy, flow), exploitability(model, flow, policy)


@dataclass(frozen=True)
class MfeOptions:
    """Solver settings.

    ``damping`` is ``"harmonic"`` (weight ``1/(k+1)`` on the newest best
    response) or a float in (0, 1] for constant damping. The first
    iteration always takes weight 1 so the initial guess is discarded.
    """

    horizon: Optional[int] = None
    tol_tail: float = 1e-3
    max_iters: int = 1000
    tol_flow: float = 1e-6
    tol_exploit: float = 1e-6
    damping: Union[str, float] = "harmonic"
    refine: bool = True
    refine_start: int = 20
    refine_every: int = 20
    tie_weight: float = 0.02
    max_refine_unknowns: int = 64

    def delta(self, k: int) -> float:
        if k == 0:
            return 1.0
        if self.damping == "harmonic":
            return 1.0 / (k + 1)
        d = float(self.damping)
        if not 0.0 < d <= 1.0:
            raise ValueError(f"constant damping must lie in (0, 1], got {d}")
        return d

    def damping_label(self) -> str:
        return "harmonic" if self.damping == "harmonic" else f"const:{float(self.damping):g}"


@dataclass(frozen=True, eq=False)
class MfeSolution:
    policy: MarkovPolicy
    flow: MeasureFlow
    joint: np.ndarray
    values: ValueFlow
    residual_flow: float
    exploitability: float
    iterations: int
    converged: bool
    horizon: int
    tail: Optional[float]
    damping: str
    deltas: Tuple[float, ...]
    refined: bool = False
    max_near_ties: int = 0
    constants: Optional[GrowthConstants] = None
    history: Tuple[Tuple[float, float], ...] = field(default=(), repr=False)

    def summary(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "residual_flow": self.residual_flow,
            "exploitability": self.exploitability,
            "horizon": self.horizon,
            "tail": self.tail,
            "damping": self.damping,
            "refined": self.refined,
            "max_near_ties": self.max_near_ties,
            "constants": None if self.constants is None else self.constants.as_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"


def resolve_horizon(
    model: GameModel, opts: MfeOptions, constants: Optional[GrowthConstants] = None
) -> Tuple[int, Optional[float], GrowthConstants]:
    """Horizon and tail from the options, or from the probe-based constants."""
    if constants is None:
        constants = estimate_growth_constants(model, default_probes(model))
    if opts.horizon is not None:
        tail = tail_bound(constants, model.beta, opts.horizon) if constants.stable else None
        return int(opts.horizon), tail, constants
    if not constants.stable:
        raise StabilityError(
            f"probe-based alpha*beta*gamma = {constants.contraction:.6g} >= 1; "
            "pass an explicit horizon"
        )
    T, tail = truncation_horizon(constants, model.beta, opts.tol_tail)
    return T, tail, constants


def _mixing_sites(policy: MarkovPolicy, marg: np.ndarray, tie_weight: float):
    sites = []
    T1, nX, _ = policy.kernels.shape
    for t in range(T1):
        for x in range(nX):
            if marg[t, x] <= 1e-12:
                continue
            support = np.flatnonzero(policy.kernels[t, x] >= tie_weight)
            if support.size >= 2:
                sites.append((t, x, support))
    return sites


def _refine(model: GameModel, policy: MarkovPolicy, base: MarkovPolicy, marg: np.ndarray,
            opts: MfeOptions) -> Optional[Tuple[MarkovPolicy, MeasureFlow]]:
    """Solve the indifference conditions at the mixing sites of ``policy``.

    Non-site rows follow ``base`` (a pure best response). Returns ``None``
    when there is nothing to solve, the system is too large, or the root lies
    outside the simplex.
    """
    sites = _mixing_sites(policy, marg, opts.tie_weight)
    T = policy.horizon
    if not sites:
        return None
    n_unknowns = sum(s[2].size - 1 for s in sites)
    if n_unknowns > opts.max_refine_unknowns:
        return None
    theta0 = []
    for t, x, support in sites:
        w = policy.kernels[t, x, support]
        theta0.extend(w[1:] / w.sum())
    theta0 = np.asarray(theta0)

    def build(theta):
        k = base.kernels.copy()
        pos = 0
        for t, x, support in sites:
            m = support.size - 1
            probs = np.clip(theta[pos : pos + m], 0.0, 1.0)
            row = np.zeros(model.n_actions)
            row[support[1:]] = probs
            row[support[0]] = max(0.0, 1.0 - probs.sum())
            k[t, x] = row / row.sum()
            pos += m
        return MarkovPolicy(k)

    site_times = {}
    for t, x, support in sites:
        site_times.setdefault(t, []).append((x, support))

    def equations(theta):
        pol = build(theta)
        flow = propagate_flow(model, pol, T)
        out = []
        u = np.zeros(model.n_states)
        eqs = {}
        for t in range(T, -1, -1):
            Q = q_values(model, flow.masses[t], u)
            for x, support in site_times.get(t, ()):
                eqs[(t, x)] = Q[x, support[1:]] - Q[x, support[0]]
            u = Q.min(axis=1)
        for t, x, _ in sites:
            out.extend(eqs[(t, x)])
        return np.asarray(out)

    try:
        sol = optimize.root(equations, theta0, method="hybr", options={"xtol": 1e-13})
    except (ValueError, FloatingPointError, np.linalg.LinAlgError):
        return None
    theta = sol.x
    if not np.all(np.isfinite(theta)) or np.any(theta < -1e-9) or np.any(theta > 1 + 1e-9):
        return None
    pos = 0
    for _, _, support in sites:
        m = support.size - 1
        if theta[pos : pos + m].sum() > 1 + 1e-9:
            return None
        pos += m
    pol = build(theta)
    return pol, propagate_flow(model, pol, T)


def solve_mfe(
    model: GameModel,
    options: Optional[MfeOptions] = None,
    constants: Optional[GrowthConstants] = None,
) -> MfeSolution:
    """Damped best-response iteration over joint state-action flows.

    Iteration ``k`` computes a pure best response to the current flow,
    propagates it, and mixes the resulting joint measures into the running
    iterate with weight ``delta_k``. The candidate returned at each step is
    the disintegrated iterate; the loop stops once both residuals meet their
    tolerances. On exhaustion the best candidate seen is returned with
    ``converged=False``.
    """
    opts = options or MfeOptions()
    T, tail, constants = resolve_horizon(model, opts, constants)

    flow = MeasureFlow.constant(model.mu0, T)
    br_policy, br_values = best_response(model, flow)
    joint = None
    deltas: List[float] = []
    history: List[Tuple[float, float]] = []
    max_ties = br_values.near_ties
    best = None
    best_score = np.inf
    refined = False

    def score(res, exp):
        return max(res / opts.tol_flow, exp / opts.tol_exploit)

    k = 0
    for k in range(opts.max_iters):
        induced = propagate_flow(model, br_policy, T)
        fresh = joint_measures(induced, br_policy)
        delta = opts.delta(k)
        deltas.append(delta)
        joint = fresh if joint is None else (1.0 - delta) * joint + delta * fresh
        marg, cand_policy = disintegrate(joint, br_policy)
        cand_flow = MeasureFlow(model.state_grid, marg)
        base_policy = br_policy

        br_policy, br_values = best_response(model, cand_flow)
        max_ties = max(max_ties, br_values.near_ties)
        _, J = evaluate_policy(model, cand_flow, cand_policy)
        exp = max(J - float(model.mu0.mass @ br_values.values[0]), 0.0)
        res = flow_residual(model, cand_policy, cand_flow)
        history.append((res, exp))
        s = score(res, exp)
        if s < best_score:
            best_score = s
            best = (cand_policy, cand_flow, res, exp, False)
        if s <= 1.0:
            break

        n = k + 1
        if opts.refine and n >= opts.refine_start and (n - opts.refine_start) % opts.refine_every == 0:
            pure = (br_policy, propagate_flow(model, br_policy, T))
            for out in (pure, _refine(model, cand_policy, br_policy, marg, opts)):
                if out is None:
                    continue
                rpol, rflow = out
                rres, rexp = certify(model, rpol, rflow)
                logger.debug("refinement at iteration %d: residual %.3g, exploit %.3g", n, rres, rexp)
                rs = score(rres, rexp)
                if rs < best_score:
                    best_score = rs
                    best = (rpol, rflow, rres, rexp, True)
                if rs <= 1.0:
                    break
            if best_score <= 1.0:
                break
    iterations = k + 1
    policy, flow, res, exp, refined = best
    values, _ = solve_nonhomogeneous(model, flow)
    return MfeSolution(
        policy=policy,
        flow=flow,
        joint=joint_measures(flow, policy),
        values=values,
        residual_flow=res,
        exploitability=exp,
        iterations=iterations,
        converged=bool(best_score <= 1.0),
        horizon=T,
        tail=tail,
        damping=opts.damping_label(),
        deltas=tuple(deltas),
        refined=refined,
        max_near_ties=max_ties,
        constants=constants,
        history=tuple(history),
    )
