"""Game models: state/action grids, a mean-field kernel and cost, growth constants.

A :class:`GameModel` stores its kernel and cost as vectorized procedures of
the population measure: ``kernel_fn(mass)`` returns the full transition
tensor ``P[x, a, y]`` and ``cost_fn(mass)`` the stage-cost matrix
``c[x, a]``. The per-entry accessors :func:`transition` and
:func:`stage_cost` are thin validated views of those tensors.
"""

from __future__ import annotations

import hashlib
import threading
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import (
    ConfigurationError,
    DomainError,
    ModelIntegrityError,
    StabilityError,
    StructuralError,
)
from .measures import Grid, ProbVector, WeightFn, moment

KERNEL_TOL = 1e-9
CACHE_SIZE = 512

KernelFn = Callable[[np.ndarray], np.ndarray]
CostFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class LinearCost:
    """Cost of the form ``base[x, a] + sum_y coupling[x, a, y] * mu(y)``."""

    base: np.ndarray
    coupling: np.ndarray


@dataclass(frozen=True, eq=False)
class GameModel:
    name: str
    state_grid: Grid
    action_grid: Grid
    beta: float
    mu0: ProbVector
    weight: WeightFn
    cost_bounded: bool
    kernel_fn: KernelFn = field(repr=False)
    cost_fn: CostFn = field(repr=False)
    action_labels: Optional[tuple] = None
    linear_cost: Optional[LinearCost] = field(default=None, repr=False)
    config: Optional[dict] = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ConfigurationError(f"discount must lie in (0, 1), got {self.beta}")
        if self.mu0.grid != self.state_grid:
            raise StructuralError("initial law is not supported on the state grid")
        if self.weight.grid != self.state_grid:
            raise StructuralError("weight function is not defined on the state grid")
        if self.action_labels is not None and len(self.action_labels) != self.n_actions:
            raise StructuralError("one label per action required")
        object.__setattr__(self, "_cache", OrderedDict())
        object.__setattr__(self, "_lock", threading.Lock())

    def _cached(self, tag: str, mass: np.ndarray, build):
        key = (tag, mass.tobytes())
        cache = self._cache
        with self._lock:
            hit = cache.get(key)
        if hit is not None:
            return hit
        val = build()
        with self._lock:
            cache[key] = val
            if len(cache) > CACHE_SIZE:
                cache.popitem(last=False)
        return val

    @property
    def n_states(self) -> int:
        return self.state_grid.size

    @property
    def n_actions(self) -> int:
        return self.action_grid.size

    @property
    def v(self) -> WeightFn:
        """Weight used for norms: constant 1 for bounded costs, else ``w``."""
        if self.cost_bounded:
            return WeightFn.ones(self.state_grid)
        return self.weight

    def _mass(self, mu) -> np.ndarray:
        if isinstance(mu, ProbVector):
            if mu.grid != self.state_grid:
                raise StructuralError("measure is not on the model's state grid")
            return mu.mass
        m = np.asarray(mu, dtype=float)
        if m.shape != (self.n_states,):
            raise StructuralError("mass vector does not match the state grid")
        return m

    def kernel_tensor(self, mu) -> np.ndarray:
        """Validated transition tensor ``P[x, a, y]`` under population ``mu``."""
        mass = self._mass(mu)
        return self._cached("kernel", mass, lambda: self._checked_kernel(mass))

    def _checked_kernel(self, mass: np.ndarray) -> np.ndarray:
        P = np.array(self.kernel_fn(mass), dtype=float)
        shape = (self.n_states, self.n_actions, self.n_states)
        if P.shape != shape:
            raise ModelIntegrityError(f"kernel returned shape {P.shape}, expected {shape}")
        if not np.all(np.isfinite(P)) or np.any(P < -KERNEL_TOL):
            raise ModelIntegrityError("kernel returned negative or non-finite mass")
        sums = P.sum(axis=2)
        if np.max(np.abs(sums - 1.0)) > KERNEL_TOL:
            raise ModelIntegrityError(
                f"kernel rows sum to values off by {np.max(np.abs(sums - 1.0)):.3g}"
            )
        P.setflags(write=False)
        return P

    def cost_matrix(self, mu) -> np.ndarray:
        """Validated stage-cost matrix ``c[x, a]`` under population ``mu``."""
        mass = self._mass(mu)
        return self._cached("cost", mass, lambda: self._checked_cost(mass))

    def _checked_cost(self, mass: np.ndarray) -> np.ndarray:
        c = np.array(self.cost_fn(mass), dtype=float)
        if c.shape != (self.n_states, self.n_actions):
            raise ModelIntegrityError(f"cost returned shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ModelIntegrityError("cost returned non-finite values")
        if np.any(c < 0):
            raise ModelIntegrityError("cost must be nonnegative")
        c.setflags(write=False)
        return c

    def with_mu0(self, mu0: ProbVector) -> "GameModel":
        return replace(self, mu0=mu0)

    def fingerprint(self) -> str:
        """SHA-256 over the model's defining data, evaluated at fixed probes."""
        h = hashlib.sha256()
        h.update(self.name.encode())
        for arr in (self.state_grid.points, self.action_grid.points, self.mu0.mass,
                    self.weight.values):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(repr((self.beta, self.cost_bounded)).encode())
        for probe in (self.mu0.mass, np.full(self.n_states, 1.0 / self.n_states)):
            h.update(np.ascontiguousarray(self.kernel_fn(probe), dtype=float).tobytes())
            h.update(np.ascontiguousarray(self.cost_fn(probe), dtype=float).tobytes())
        return h.hexdigest()


def _check_indices(model: GameModel, x: int, a: int) -> None:
    if not 0 <= x < model.n_states:
        raise StructuralError(f"state index {x} out of range")
    if not 0 <= a < model.n_actions:
        raise StructuralError(f"action index {a} out of range")


def transition(model: GameModel, x: int, a: int, mu: ProbVector) -> ProbVector:
    """Next-state law from state ``x`` under action ``a`` and population ``mu``."""
    _check_indices(model, x, a)
    row = model.kernel_tensor(mu)[x, a]
    return ProbVector.from_mass(model.state_grid, np.clip(row, 0.0, None))


def stage_cost(model: GameModel, x: int, a: int, mu: ProbVector) -> float:
    _check_indices(model, x, a)
    return float(model.cost_matrix(mu)[x, a])


# ---------------------------------------------------------------- constants


@dataclass(frozen=True)
class GrowthConstants:
    """Probe-based estimates of the drift and cost-growth constants.

    ``alpha`` bounds ``E[w(next)] / w(x)``, the cost envelope is
    ``M_t = gamma**t * R`` in units of ``v``, ``M`` is the ``v``-moment of the
    initial law and ``B`` the second-moment drift of ``v``.
    """

    alpha: float
    gamma: float
    R: float
    M: float
    B: float
    beta: float

    def __post_init__(self):
        for name in ("alpha", "R", "M", "B"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be nonnegative")
        if self.gamma < 1:
            raise DomainError("gamma must be >= 1")

    @property
    def contraction(self) -> float:
        return self.alpha * self.beta * self.gamma

    @property
    def stable(self) -> bool:
        return self.contraction < 1.0

    def cost_envelope(self, t: int) -> float:
        return self.gamma**t * self.R

    def as_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "gamma": self.gamma,
            "R": self.R,
            "M": self.M,
            "B": self.B,
            "beta": self.beta,
            "alpha_beta_gamma": self.contraction,
            "stable": self.stable,
            "qualifier": "probe-based",
        }


def default_probes(model: GameModel, extra: Sequence[ProbVector] = ()) -> list:
    """Initial law, uniform law and every point mass, plus ``extra``."""
    grid = model.state_grid
    probes = [model.mu0, ProbVector.uniform(grid)]
    probes += [ProbVector.point_mass(grid, i) for i in range(grid.size)]
    probes += list(extra)
    return probes


def estimate_growth_constants(model: GameModel, probe_flows: Sequence[ProbVector]) -> GrowthConstants:
    """Scan every grid (x, a) against every probe measure.

    The result is a diagnostic over the probes, not a certified bound over
    all population measures. Probes are taken to be the times 0, 1, 2, ...
    when fitting the cost envelope of a general model.
    """
    probes = list(probe_flows)
    if not probes:
        raise DomainError("at least one probe measure is required")
    w = model.weight.values
    v = model.v.values
    alpha = 0.0
    B = 0.0
    for mu in probes:
        P = model.kernel_tensor(mu)
        alpha = max(alpha, float(np.max((P @ w) / w[:, None])))
        B = max(B, float(np.max((P @ v**2) / (v**2)[:, None])))
    M = moment(model.mu0, v)

    if model.cost_bounded or model.linear_cost is None:
        # least envelope: gamma = 1 and the largest cost/v ratio over probes
        gamma = 1.0
        R = 0.0
        for mu in probes:
            R = max(R, float(np.max(model.cost_matrix(mu) / v[:, None])))
    else:
        # c <= base + max_y d/w(y) * mu(w) and mu_t(w) <= alpha**t M, so gamma = alpha
        lc = model.linear_cost
        per_xa = lc.base / v[:, None] + M * np.max(lc.coupling / w[None, None, :], axis=2) / v[:, None]
        R = float(np.max(per_xa))
        gamma = max(alpha, 1.0)
    return GrowthConstants(alpha=alpha, gamma=gamma, R=R, M=M, B=B, beta=model.beta)


def lt_envelope(constants: GrowthConstants, beta: float, t: int) -> float:
    """Value envelope ``L_t = sum_{k>=t} (beta*alpha)**(k-t) M_k``.

    Closed form ``gamma**t R / (1 - alpha beta gamma)``.
    """
    if t < 0:
        raise DomainError("time index must be nonnegative")
    rate = constants.alpha * beta * constants.gamma
    if rate >= 1.0:
        raise StabilityError(f"alpha*beta*gamma = {rate:.6g} >= 1")
    return constants.gamma**t * constants.R / (1.0 - rate)


# ---------------------------------------------------------------- tabular models


def tabular_model(
    states: Sequence[float],
    actions: Sequence[float],
    kernel,
    cost_base,
    *,
    beta: float,
    mu0=None,
    cost_coupling=None,
    kernel_coupling=None,
    weight: Optional[WeightFn] = None,
    cost_bounded: bool = True,
    action_labels=None,
    name: str = "tabular",
    config: Optional[dict] = None,
) -> GameModel:
    """Finite model with kernel and cost affine in the population measure.

    ``p(y|x,a,mu) = kernel[x,a,y] + sum_z kernel_coupling[x,a,y,z] mu(z)`` and
    ``c(x,a,mu) = cost_base[x,a] + sum_y cost_coupling[x,a,y] mu(y)``.
    The kernel is validated on every call, so a coupling that leaves the
    simplex surfaces as :class:`ModelIntegrityError` when probed.
    """
    sg = Grid(np.asarray(states, dtype=float))
    ag = Grid(np.asarray(actions, dtype=float))
    nX, nA = sg.size, ag.size
    K0 = np.array(kernel, dtype=float)
    C0 = np.array(cost_base, dtype=float)
    if K0.shape != (nX, nA, nX):
        raise ConfigurationError(f"kernel must have shape {(nX, nA, nX)}, got {K0.shape}")
    if C0.shape != (nX, nA):
        raise ConfigurationError(f"cost must have shape {(nX, nA)}, got {C0.shape}")
    D = np.zeros((nX, nA, nX)) if cost_coupling is None else np.array(cost_coupling, dtype=float)
    if D.shape != (nX, nA, nX):
        raise ConfigurationError("cost coupling must have shape (nX, nA, nX)")
    K1 = None if kernel_coupling is None else np.array(kernel_coupling, dtype=float)
    if K1 is not None and K1.shape != (nX, nA, nX, nX):
        raise ConfigurationError("kernel coupling must have shape (nX, nA, nX, nX)")
    for arr in (K0, C0, D):
        arr.setflags(write=False)

    if K1 is None:
        def kernel_fn(mass):
            return K0
    else:
        K1.setflags(write=False)

        def kernel_fn(mass):
            return K0 + K1 @ mass

    def cost_fn(mass):
        return C0 + D @ mass

    mu0 = ProbVector.uniform(sg) if mu0 is None else mu0
    if not isinstance(mu0, ProbVector):
        mu0 = ProbVector.from_mass(sg, mu0)
    if weight is None:
        weight = WeightFn.ones(sg) if cost_bounded else WeightFn.polynomial(sg, 2)
    return GameModel(
        name=name,
        state_grid=sg,
        action_grid=ag,
        beta=float(beta),
        mu0=mu0,
        weight=weight,
        cost_bounded=cost_bounded,
        kernel_fn=kernel_fn,
        cost_fn=cost_fn,
        action_labels=None if action_labels is None else tuple(action_labels),
        linear_cost=LinearCost(C0, D),
        config=config,
    )


STAY, SWITCH = 0, 1


def toy_model(beta: float = 0.9, mu0=None) -> GameModel:
    """Two-state crowd-aversion game used as the reference oracle model.

    States 0 and 1; "stay" keeps the state with probability 0.9, "switch"
    flips it with probability 0.8. Cost ``x * mu({1}) + 0.1 * [switch]``.
    """
    K = np.array(
        [
            [[0.9, 0.1], [0.2, 0.8]],
            [[0.1, 0.9], [0.8, 0.2]],
        ]
    )
    base = np.array([[0.0, 0.1], [0.0, 0.1]])
    D = np.zeros((2, 2, 2))
    D[1, :, 1] = 1.0
    return tabular_model(
        [0.0, 1.0],
        [0.0, 1.0],
        K,
        base,
        beta=beta,
        mu0=mu0,
        cost_coupling=D,
        action_labels=("stay", "switch"),
        name="toy",
        config={"model": "toy", "beta": beta},
    )


def decoupled_toy_model(beta: float = 0.9, occupancy: float = 0.5) -> GameModel:
    """Toy dynamics with the crowd term frozen at ``occupancy``: c and p ignore mu."""
    K = toy_model(beta).kernel_fn(np.array([0.5, 0.5]))
    base = np.array([[0.0, 0.1], [occupancy, occupancy + 0.1]])
    return tabular_model(
        [0.0, 1.0],
        [0.0, 1.0],
        K,
        base,
        beta=beta,
        action_labels=("stay", "switch"),
        name="toy_decoupled",
        config={"model": "toy_decoupled", "beta": beta, "occupancy": occupancy},
    )


# ---------------------------------------------------------------- additive noise


@dataclass(frozen=True)
class AdditiveNoiseSpec:
    """``x' = F(x, a, mu) + g(x, a) Z`` with ``F = integral of f(x, a, y) mu(dy)``.

    ``f``, ``g`` and ``d`` are vectorized callables broadcasting over numpy
    arrays; ``Z`` is a standard normal truncated at ``+-sigma_trunc``.
    """

    f: Callable
    g: Callable
    d: Callable
    state_grid: Grid
    action_grid: Grid
    beta: float
    mu0: Optional[ProbVector] = None
    sigma_trunc: float = 4.0
    name: str = "additive_noise"
    config: Optional[dict] = None


def truncated_normal_bins(grid: Grid, mean, scale, sigma_trunc: float) -> np.ndarray:
    """Nearest-grid-point binning of ``mean + scale * Z``, Z truncated at +-sigma_trunc.

    ``mean`` and ``scale`` broadcast together; the bin axis is appended last.
    Mass beyond the grid ends is assigned to the end points.
    """
    pts = grid.points
    mids = 0.5 * (pts[1:] + pts[:-1])
    lower = np.concatenate(([-np.inf], mids))
    upper = np.concatenate((mids, [np.inf]))
    mean = np.asarray(mean, dtype=float)[..., None]
    scale = np.asarray(scale, dtype=float)[..., None]
    z_hi = np.clip((upper - mean) / scale, -sigma_trunc, sigma_trunc)
    z_lo = np.clip((lower - mean) / scale, -sigma_trunc, sigma_trunc)
    mass = ndtr(z_hi) - ndtr(z_lo)
    mass = np.clip(mass, 0.0, None)
    return mass / mass.sum(axis=-1, keepdims=True)


def build_additive_noise_model(spec: AdditiveNoiseSpec) -> GameModel:
    sg, ag = spec.state_grid, spec.action_grid
    X = sg.points[:, None, None]
    A = ag.points[None, :, None]
    Y = sg.points[None, None, :]
    shape3 = (sg.size, ag.size, sg.size)
    fvals = np.broadcast_to(np.asarray(spec.f(X, A, Y), dtype=float), shape3).copy()
    dvals = np.broadcast_to(np.asarray(spec.d(X, A, Y), dtype=float), shape3).copy()
    gvals = np.broadcast_to(
        np.asarray(spec.g(X[..., 0], A[..., 0]), dtype=float), (sg.size, ag.size)
    ).copy()
    if not np.all(np.isfinite(fvals)):
        raise ConfigurationError("drift f must be finite on the grid")
    if not np.all(np.isfinite(dvals)) or np.any(dvals < 0):
        raise ConfigurationError("coupling cost d must be finite and nonnegative")
    theta = float(np.min(np.abs(gvals)))
    if not theta > 0:
        raise ConfigurationError("noise scale g must be bounded away from zero (theta > 0)")
    if spec.sigma_trunc <= 0:
        raise ConfigurationError("sigma_trunc must be positive")
    if 2.0 * spec.sigma_trunc * theta < sg.max_step():
        raise ConfigurationError(
            "state grid too coarse: the narrowest noise support "
            f"({2 * spec.sigma_trunc * theta:.4g}) is below the grid step ({sg.max_step():.4g})"
        )
    for arr in (fvals, dvals, gvals):
        arr.setflags(write=False)
    scale = np.abs(gvals)
    sigma = float(spec.sigma_trunc)

    def kernel_fn(mass):
        F = fvals @ mass
        return truncated_normal_bins(sg, F, scale, sigma)

    def cost_fn(mass):
        return dvals @ mass

    mu0 = spec.mu0 if spec.mu0 is not None else ProbVector.uniform(sg)
    return GameModel(
        name=spec.name,
        state_grid=sg,
        action_grid=ag,
        beta=float(spec.beta),
        mu0=mu0,
        weight=WeightFn.polynomial(sg, 2),
        cost_bounded=False,
        kernel_fn=kernel_fn,
        cost_fn=cost_fn,
        linear_cost=LinearCost(np.zeros((sg.size, ag.size)), dvals),
        config=spec.config,
    )


def drift_mean(model_spec: AdditiveNoiseSpec, mu: ProbVector) -> np.ndarray:
    """``F(x, a, mu)`` for every grid pair."""
    sg, ag = model_spec.state_grid, model_spec.action_grid
    fvals = np.broadcast_to(
        model_spec.f(sg.points[:, None, None], ag.points[None, :, None], sg.points[None, None, :]),
        (sg.size, ag.size, sg.size),
    )
    return fvals @ mu.mass
