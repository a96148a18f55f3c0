"""Nonhomogeneous discounted dynamic programming against a frozen measure flow."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import DomainError, NumericError, StabilityError, StructuralError
from .measures import Grid, ProbVector, format_float
from .model import GameModel, GrowthConstants

FLOW_TOL = 1e-9
POLICY_TOL = 1e-12
NEAR_TIE = 1e-9


@dataclass(frozen=True, eq=False)
class MeasureFlow:
    """State distributions ``mu_0 .. mu_T`` stacked as rows of ``masses``."""

    grid: Grid
    masses: np.ndarray

    def __post_init__(self):
        m = np.array(self.masses, dtype=float, copy=True)
        if m.ndim != 2 or m.shape[1] != self.grid.size or m.shape[0] < 1:
            raise StructuralError(f"flow masses have shape {m.shape}")
        m[(m < 0) & (m > -1e-14)] = 0.0
        if not np.all(np.isfinite(m)) or np.any(m < 0):
            raise DomainError("flow masses must be finite and nonnegative")
        sums = m.sum(axis=1)
        if np.max(np.abs(sums - 1.0)) > FLOW_TOL:
            raise DomainError("every flow entry must be a probability vector")
        m /= sums[:, None]
        m.setflags(write=False)
        object.__setattr__(self, "masses", m)

    @classmethod
    def constant(cls, mu: ProbVector, horizon: int) -> "MeasureFlow":
        return cls(mu.grid, np.tile(mu.mass, (horizon + 1, 1)))

    @classmethod
    def from_measures(cls, measures) -> "MeasureFlow":
        ms = list(measures)
        return cls(ms[0].grid, np.vstack([m.mass for m in ms]))

    @property
    def horizon(self) -> int:
        return self.masses.shape[0] - 1

    def __len__(self) -> int:
        return self.masses.shape[0]

    def __getitem__(self, t: int) -> ProbVector:
        return ProbVector(self.grid, self.masses[t])

    def window(self, start: int, stop: Optional[int] = None) -> "MeasureFlow":
        """Entries ``start .. stop`` inclusive."""
        stop = self.horizon if stop is None else stop
        return MeasureFlow(self.grid, self.masses[start : stop + 1])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "state_index", "coordinate", "mass"])
        for t, row in enumerate(self.masses):
            for i, (x, m) in enumerate(zip(self.grid.points, row)):
                w.writerow([t, i, format_float(x), format_float(m)])
        return buf.getvalue()


@dataclass(frozen=True, eq=False)
class ValueFlow:
    """Value vectors for ``t = 0 .. T`` plus the terminal vector at ``T + 1``.

    ``near_ties`` counts (t, x) pairs whose best and second-best action values
    differ by less than ``NEAR_TIE``; it is zero for policy evaluations.
    """

    values: np.ndarray
    terminal: np.ndarray
    near_ties: int = 0

    @property
    def horizon(self) -> int:
        return self.values.shape[0] - 1

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "state_index", "value"])
        for t, row in enumerate(self.values):
            for i, val in enumerate(row):
                w.writerow([t, i, format_float(val)])
        return buf.getvalue()


@dataclass(frozen=True, eq=False)
class MarkovPolicy:
    """Row-stochastic matrices ``kernels[t, x, a]`` for ``t = 0 .. T``."""

    kernels: np.ndarray

    def __post_init__(self):
        k = np.array(self.kernels, dtype=float, copy=True)
        if k.ndim != 3 or k.shape[0] < 1:
            raise StructuralError(f"policy kernels have shape {k.shape}")
        k[(k < 0) & (k > -1e-14)] = 0.0
        if not np.all(np.isfinite(k)) or np.any(k < 0):
            raise DomainError("policy probabilities must be finite and nonnegative")
        sums = k.sum(axis=2)
        if np.max(np.abs(sums - 1.0)) > 1e-9:
            raise DomainError("policy rows must sum to 1")
        k /= sums[..., None]
        k.setflags(write=False)
        object.__setattr__(self, "kernels", k)

    @classmethod
    def from_actions(cls, actions, n_actions: int) -> "MarkovPolicy":
        """Deterministic policy from an integer array ``actions[t, x]``."""
        acts = np.asarray(actions, dtype=int)
        k = np.zeros(acts.shape + (n_actions,))
        np.put_along_axis(k, acts[..., None], 1.0, axis=-1)
        return cls(k)

    @classmethod
    def constant(cls, horizon: int, n_states: int, n_actions: int, action: int) -> "MarkovPolicy":
        return cls.from_actions(np.full((horizon + 1, n_states), action), n_actions)

    @classmethod
    def uniform(cls, horizon: int, n_states: int, n_actions: int) -> "MarkovPolicy":
        return cls(np.full((horizon + 1, n_states, n_actions), 1.0 / n_actions))

    @property
    def horizon(self) -> int:
        return self.kernels.shape[0] - 1

    @property
    def n_states(self) -> int:
        return self.kernels.shape[1]

    @property
    def n_actions(self) -> int:
        return self.kernels.shape[2]

    def is_deterministic(self) -> bool:
        return bool(np.all((self.kernels == 0.0) | (self.kernels == 1.0)))

    def window(self, start: int, stop: Optional[int] = None) -> "MarkovPolicy":
        stop = self.horizon if stop is None else stop
        return MarkovPolicy(self.kernels[start : stop + 1])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "state_index", "action_index", "prob"])
        for t, mat in enumerate(self.kernels):
            for i, row in enumerate(mat):
                for a, p in enumerate(row):
                    w.writerow([t, i, a, format_float(p)])
        return buf.getvalue()


def _check_finite(u: np.ndarray) -> None:
    if not np.all(np.isfinite(u)):
        raise NumericError("value vector contains NaN or infinite entries")


def q_values(model: GameModel, mu_t, u: np.ndarray) -> np.ndarray:
    """``c(x, a, mu_t) + beta * sum_y p(y|x, a, mu_t) u(y)`` for all (x, a)."""
    u = np.asarray(u, dtype=float)
    if u.shape != (model.n_states,):
        raise StructuralError("value vector does not match the state grid")
    _check_finite(u)
    C = model.cost_matrix(mu_t)
    P = model.kernel_tensor(mu_t)
    # elementwise product then a fixed-order reduction keeps results schedule-independent
    return C + model.beta * (P * u).sum(axis=2)


def _near_tie_count(Q: np.ndarray) -> int:
    if Q.shape[1] < 2:
        return 0
    part = np.partition(Q, 1, axis=1)
    return int(np.sum(part[:, 1] - part[:, 0] < NEAR_TIE))


def bellman_backup(model: GameModel, mu_t, u) -> Tuple[np.ndarray, np.ndarray]:
    """One application of the time-t operator: (minimal values, greedy actions).

    Ties resolve to the lowest action index.
    """
    Q = q_values(model, mu_t, u)
    return Q.min(axis=1), Q.argmin(axis=1)


def tail_bound(constants: GrowthConstants, beta: float, horizon: int) -> float:
    rate = constants.alpha * beta * constants.gamma
    if rate >= 1.0:
        raise StabilityError(f"alpha*beta*gamma = {rate:.6g} >= 1; no finite truncation")
    return constants.M * constants.R * rate ** (horizon + 1) / (1.0 - rate)


def truncation_horizon(constants: GrowthConstants, beta: float, tol_tail: float) -> Tuple[int, float]:
    """Smallest ``T >= 1`` whose discounted tail ``M R r^(T+1) / (1 - r)`` is at most ``tol_tail``."""
    if not tol_tail > 0:
        raise DomainError("tail tolerance must be positive")
    rate = constants.alpha * beta * constants.gamma
    if rate >= 1.0:
        raise StabilityError(f"alpha*beta*gamma = {rate:.6g} >= 1; no finite truncation")
    scale = constants.M * constants.R / (1.0 - rate)
    if scale <= tol_tail or rate == 0.0:
        return 1, tail_bound(constants, beta, 1)
    T = max(1, math.ceil(math.log(tol_tail / scale) / math.log(rate)) - 1)
    # correct floating-point slop of the logarithm in either direction
    while T > 1 and tail_bound(constants, beta, T - 1) <= tol_tail:
        T -= 1
    while tail_bound(constants, beta, T) > tol_tail:
        T += 1
    return T, tail_bound(constants, beta, T)


def _check_flow(model: GameModel, flow: MeasureFlow) -> None:
    if flow.grid != model.state_grid:
        raise StructuralError("flow is not on the model's state grid")


def solve_nonhomogeneous(model: GameModel, flow: MeasureFlow) -> Tuple[ValueFlow, MarkovPolicy]:
    """Backward induction from a zero terminal value at ``T + 1``."""
    _check_flow(model, flow)
    T = flow.horizon
    values = np.empty((T + 1, model.n_states))
    greedy = np.empty((T + 1, model.n_states), dtype=int)
    u = np.zeros(model.n_states)
    ties = 0
    for t in range(T, -1, -1):
        Q = q_values(model, flow.masses[t], u)
        greedy[t] = Q.argmin(axis=1)
        u = Q.min(axis=1)
        values[t] = u
        ties += _near_tie_count(Q)
    vf = ValueFlow(values=values, terminal=np.zeros(model.n_states), near_ties=ties)
    return vf, MarkovPolicy.from_actions(greedy, model.n_actions)


def evaluate_policy(model: GameModel, flow: MeasureFlow, policy: MarkovPolicy) -> Tuple[ValueFlow, float]:
    """Expected discounted cost of ``policy`` against ``flow``.

    Returns the per-state value flow and its average under the model's
    initial law.
    """
    _check_flow(model, flow)
    T = flow.horizon
    if policy.horizon < T:
        raise StructuralError(f"policy horizon {policy.horizon} shorter than flow horizon {T}")
    if policy.n_states != model.n_states or policy.n_actions != model.n_actions:
        raise StructuralError("policy shape does not match the model")
    values = np.empty((T + 1, model.n_states))
    u = np.zeros(model.n_states)
    for t in range(T, -1, -1):
        Q = q_values(model, flow.masses[t], u)
        u = (policy.kernels[t] * Q).sum(axis=1)
        values[t] = u
    vf = ValueFlow(values=values, terminal=np.zeros(model.n_states))
    return vf, float(model.mu0.mass @ values[0])


def v_norm(g: np.ndarray, v: np.ndarray) -> float:
    """Weighted sup-norm ``max |g(x)| / v(x)``."""
    return float(np.max(np.abs(g) / v))
