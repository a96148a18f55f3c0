"""Finite-population Monte Carlo: N agents coupled through their empirical measure.

Randomness is organised so results never depend on scheduling. Replication
``r`` of a run with population ``N`` draws from its own PCG64 stream seeded
by ``SeedSequence(master_seed, spawn_key=(stream, N, r))``. Inside a
replication the uniforms are consumed in a fixed order: one per agent for the
initial state, then for every ``t`` one per agent for the action and, when
``t < T``, one per agent for the transition. The uniform used by agent ``i``
at time ``t`` is therefore a fixed function of ``(master_seed, r, i, t)``, and
different policies run with the same seed share their random numbers.

Agent 0 is the tagged agent whose cost is recorded and who may deviate.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .dp import MarkovPolicy, MeasureFlow, solve_nonhomogeneous
from .errors import ConfigurationError, DomainError, StructuralError
from .measures import GridFunction, ProbVector, grid_values, format_float, rho_v_batch
from .model import GameModel

WORKERS_ENV = "MFGKIT_WORKERS"
Z_BAND = 3.0


def resolve_workers(workers: Optional[int] = None) -> int:
    """Explicit value, else ``$MFGKIT_WORKERS``, else 1."""
    if workers is None:
        raw = os.environ.get(WORKERS_ENV)
        if raw is None or raw.strip() == "":
            return 1
        try:
            workers = int(raw)
        except ValueError as exc:
            raise ConfigurationError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    if workers < 1:
        raise ConfigurationError("worker count must be at least 1")
    return int(workers)


def _stream(master_seed: int, *key: int) -> np.random.Generator:
    seq = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(seq))


def _sample_rows(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw of one index per row."""
    idx = (u[:, None] >= cdf_rows).sum(axis=1)
    return np.minimum(idx, cdf_rows.shape[1] - 1)


def _mean_se(x: np.ndarray, axis: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    n = x.shape[axis]
    mean = x.mean(axis=axis)
    if n < 2:
        return mean, np.zeros_like(mean)
    return mean, x.std(axis=axis, ddof=1) / np.sqrt(n)


@dataclass(frozen=True)
class SimConfig:
    """One batch of replications.

    ``policy`` drives the crowd; ``deviator``, when given, replaces it for
    agent 0 only.
    """

    N: int
    T: int
    reps: int
    policy: MarkovPolicy
    master_seed: int = 0
    deviator: Optional[MarkovPolicy] = None
    stream: int = 0
    workers: Optional[int] = None

    def __post_init__(self):
        if self.N < 1:
            raise DomainError("population size N must be at least 1")
        if self.T < 0:
            raise DomainError("horizon must be nonnegative")
        if self.reps < 1:
            raise DomainError("at least one replication is required")
        if not 0 <= int(self.master_seed) < 2**64:
            raise DomainError("master seed must fit in 64 unsigned bits")


@dataclass(frozen=True, eq=False)
class SimReport:
    N: int
    T: int
    costs: np.ndarray
    mean_cost: float
    stderr: float
    empirical_flow: np.ndarray
    distances: Optional[np.ndarray]
    distance_stderr: Optional[np.ndarray]
    rng: dict

    def costs_csv(self) -> str:
        lines = ["rep,cost"]
        lines += [f"{r},{format_float(c)}" for r, c in enumerate(self.costs)]
        return "\n".join(lines) + "\n"

    def distances_csv(self) -> str:
        lines = ["N,t,mean_dist,stderr"]
        if self.distances is not None:
            for t, (d, s) in enumerate(zip(self.distances, self.distance_stderr)):
                lines.append(f"{self.N},{t},{format_float(d)},{format_float(s)}")
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {
            "N": self.N,
            "T": self.T,
            "reps": int(self.costs.size),
            "mean_cost": self.mean_cost,
            "stderr": self.stderr,
            "rng": self.rng,
        }


def _check_policy(model: GameModel, policy: MarkovPolicy, T: int, what: str) -> None:
    if policy.horizon < T:
        raise StructuralError(f"{what} horizon {policy.horizon} shorter than T = {T}")
    if policy.n_states != model.n_states or policy.n_actions != model.n_actions:
        raise StructuralError(f"{what} shape does not match the model")


def _replication(model: GameModel, cfg: SimConfig, crowd_cdf, dev_cdf, mu0_cdf, r: int):
    rng = _stream(cfg.master_seed, cfg.stream, cfg.N, r)
    N, T, nX = cfg.N, cfg.T, model.n_states
    states = np.minimum(np.searchsorted(mu0_cdf, rng.random(N), side="right"), nX - 1)
    emp = np.empty((T + 1, nX))
    cost = 0.0
    disc = 1.0
    for t in range(T + 1):
        mass = np.bincount(states, minlength=nX) / N
        emp[t] = mass
        u_act = rng.random(N)
        actions = _sample_rows(crowd_cdf[t][states], u_act)
        actions[0] = _sample_rows(dev_cdf[t][states[:1]], u_act[:1])[0]
        C = model.cost_matrix(mass)
        cost += disc * C[states[0], actions[0]]
        disc *= model.beta
        if t < T:
            P = model.kernel_tensor(mass)
            rows = np.cumsum(P[states, actions], axis=1)
            states = _sample_rows(rows, rng.random(N))
    return cost, emp


def simulate(model: GameModel, config: SimConfig, reference_flow: Optional[MeasureFlow] = None) -> SimReport:
    """Run ``config.reps`` independent replications of the N-agent game.

    With a reference flow the per-time distance ``rho_v(e_t, flow_t)`` is
    averaged over replications.
    """
    cfg = config
    _check_policy(model, cfg.policy, cfg.T, "crowd policy")
    dev = cfg.deviator if cfg.deviator is not None else cfg.policy
    _check_policy(model, dev, cfg.T, "deviator policy")
    if reference_flow is not None:
        if reference_flow.grid != model.state_grid:
            raise StructuralError("reference flow is not on the model's state grid")
        if reference_flow.horizon < cfg.T:
            raise StructuralError("reference flow is shorter than the simulation horizon")

    crowd_cdf = np.cumsum(cfg.policy.kernels, axis=2)
    dev_cdf = np.cumsum(dev.kernels, axis=2)
    mu0_cdf = np.cumsum(model.mu0.mass)

    def work(r):
        return _replication(model, cfg, crowd_cdf, dev_cdf, mu0_cdf, r)

    workers = resolve_workers(cfg.workers)
    if workers == 1:
        results = [work(r) for r in range(cfg.reps)]
    else:
        # map preserves replication order, so aggregation is schedule-independent
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, range(cfg.reps)))

    costs = np.array([c for c, _ in results])
    emps = np.stack([e for _, e in results])
    mean, se = _mean_se(costs)
    dists = dist_se = None
    if reference_flow is not None:
        ref = reference_flow.masses[: cfg.T + 1]
        d = np.stack([rho_v_batch(e, ref, model.v) for e in emps])
        dists, dist_se = _mean_se(d)
    rng = {
        "generator": "PCG64",
        "seeding": "SeedSequence(master_seed, spawn_key=(stream, N, rep))",
        "master_seed": int(cfg.master_seed),
        "stream": int(cfg.stream),
        "draw_order": "initial states; then per t: actions, transitions",
    }
    return SimReport(
        N=cfg.N,
        T=cfg.T,
        costs=costs,
        mean_cost=float(mean),
        stderr=float(se),
        empirical_flow=emps.mean(axis=0),
        distances=dists,
        distance_stderr=dist_se,
        rng=rng,
    )


# ------------------------------------------------------------------ convergence study


@dataclass(frozen=True, eq=False)
class ConvergenceStudy:
    Ns: Tuple[int, ...]
    mean_dist: np.ndarray  # (len(Ns), T + 1)
    stderr: np.ndarray
    slope: float
    reports: Tuple[SimReport, ...] = field(repr=False, default=())

    def to_csv(self) -> str:
        lines = ["N,t,mean_dist,stderr"]
        for N, row, srow in zip(self.Ns, self.mean_dist, self.stderr):
            for t, (d, s) in enumerate(zip(row, srow)):
                lines.append(f"{N},{t},{format_float(d)},{format_float(s)}")
        return "\n".join(lines) + "\n"

    def strictly_decreasing(self, t_max: int) -> bool:
        block = self.mean_dist[:, : t_max + 1]
        return bool(np.all(np.diff(block, axis=0) < 0))


def loglog_slope(Ns: Sequence[int], values: Sequence[float]) -> float:
    """Least-squares slope of ``log(values)`` against ``log(Ns)``."""
    x = np.log(np.asarray(Ns, dtype=float))
    y = np.asarray(values, dtype=float)
    if x.size < 2 or np.any(y <= 0):
        return float("nan")
    return float(np.polyfit(x, np.log(y), 1)[0])


def empirical_convergence_study(
    model: GameModel,
    policy: MarkovPolicy,
    flow: MeasureFlow,
    Ns: Sequence[int],
    reps: int,
    master_seed: int = 0,
    deviator: Optional[MarkovPolicy] = None,
    workers: Optional[int] = None,
) -> ConvergenceStudy:
    """Distances between empirical measures and ``flow`` along a ladder of N.

    The slope is fitted to the time-averaged mean distance.
    """
    Ns = tuple(int(n) for n in Ns)
    if not Ns or any(b <= a for a, b in zip(Ns, Ns[1:])):
        raise DomainError("Ns must be nonempty and strictly increasing")
    T = flow.horizon
    reports = []
    for N in Ns:
        cfg = SimConfig(N=N, T=T, reps=reps, policy=policy, master_seed=master_seed,
                        deviator=deviator, workers=workers)
        reports.append(simulate(model, cfg, reference_flow=flow))
    mean = np.stack([r.distances for r in reports])
    se = np.stack([r.distance_stderr for r in reports])
    slope = loglog_slope(Ns, mean.mean(axis=1))
    return ConvergenceStudy(Ns=Ns, mean_dist=mean, stderr=se, slope=slope, reports=tuple(reports))


# ------------------------------------------------------------------ variance check


@dataclass(frozen=True)
class VarianceCheck:
    lhs: float
    rhs: float
    rel_se: float
    passed: bool


def one_step_variance_check(
    model: GameModel,
    policy: MarkovPolicy,
    mu: ProbVector,
    N: int,
    reps: int,
    g: GridFunction,
    seed: int = 0,
    t: int = 0,
) -> VarianceCheck:
    """Monte Carlo test of ``E|e_1(g) - e_0 P(g)|^2 <= (mu(P g^2) + mu((P g)^2)) / N``.

    ``P(.|y) = sum_a pi_t(a|y) p(.|y, a, mu)`` is frozen at ``mu``. Each
    replication draws fresh ``y_1..y_N`` from ``mu``, so the exact right side
    is the ``mu``-average of the fixed-``y`` bound.
    """
    if N < 1 or reps < 1:
        raise DomainError("N and reps must be at least 1")
    if mu.grid != model.state_grid:
        raise StructuralError("mu is not on the model's state grid")
    gv = grid_values(g, model.state_grid)
    if not np.all(np.isfinite(gv)):
        raise DomainError("g must be finite on the grid")
    K = np.einsum("xa,xay->xy", policy.kernels[t], model.kernel_tensor(mu))
    Pg = K @ gv
    Pg2 = K @ gv**2
    rhs = float(mu.mass @ Pg2 + mu.mass @ Pg**2) / N

    rng = _stream(seed, N, reps)
    nX = model.n_states
    y = np.minimum(np.searchsorted(np.cumsum(mu.mass), rng.random((reps, N)), side="right"), nX - 1)
    Kcdf = np.cumsum(K, axis=1)
    u = rng.random((reps, N))
    x1 = np.minimum((u[..., None] >= Kcdf[y]).sum(axis=2), nX - 1)
    dev = np.abs(gv[x1].mean(axis=1) - Pg[y].mean(axis=1))
    m, se = _mean_se(dev)
    lhs = float(m) ** 2
    rel = float(2.0 * se / m) if m > 0 else 0.0
    return VarianceCheck(lhs=lhs, rhs=rhs, rel_se=rel, passed=bool(lhs <= rhs * (1.0 + Z_BAND * rel)))


# ------------------------------------------------------------------ Nash gap


def finite_population_best_response(model: GameModel, flow: MeasureFlow, N: int) -> MarkovPolicy:
    """Best response of one agent that accounts for its own weight ``1/N``.

    At state ``x`` the agent faces ``((N - 1) flow_t + delta_x) / N``.
    """
    T = flow.horizon
    nX = model.n_states
    greedy = np.empty((T + 1, nX), dtype=int)
    u = np.zeros(nX)
    eye = np.eye(nX)
    for t in range(T, -1, -1):
        Q = np.empty((nX, model.n_actions))
        for x in range(nX):
            m = ((N - 1) * flow.masses[t] + eye[x]) / N
            Q[x] = model.cost_matrix(m)[x] + model.beta * model.kernel_tensor(m)[x] @ u
        greedy[t] = Q.argmin(axis=1)
        u = Q.min(axis=1)
    return MarkovPolicy.from_actions(greedy, model.n_actions)


def default_deviations(
    model: GameModel,
    policy: MarkovPolicy,
    flow: MeasureFlow,
    N: int,
    reps: int,
    master_seed: int = 0,
    workers: Optional[int] = None,
) -> List[Tuple[str, MarkovPolicy]]:
    """Candidate deviations for agent 0 at population size N.

    Best responses to the limit flow and to a pilot empirical flow, the
    own-weight-aware best response, and every constant action.
    """
    T = flow.horizon
    _, br = solve_nonhomogeneous(model, flow)
    pilot = simulate(model, SimConfig(N=N, T=T, reps=reps, policy=policy,
                                      master_seed=master_seed, stream=1, workers=workers))
    _, br_pilot = solve_nonhomogeneous(model, MeasureFlow(model.state_grid, pilot.empirical_flow))
    out = [
        ("br_mfe_flow", br),
        ("br_pilot_flow", br_pilot),
        ("br_finite_population", finite_population_best_response(model, flow, N)),
    ]
    labels = model.action_labels or tuple(f"a{a}" for a in range(model.n_actions))
    for a, lab in enumerate(labels):
        out.append((f"const_{lab}", MarkovPolicy.constant(T, model.n_states, model.n_actions, a)))
    return out


@dataclass(frozen=True)
class GapEstimate:
    N: int
    gap: float
    stderr: float
    best: str
    tail: Optional[float]
    costs: Tuple[Tuple[str, float, float], ...]

    @property
    def upper(self) -> float:
        return self.gap + Z_BAND * self.stderr


@dataclass(frozen=True, eq=False)
class GapSweep:
    estimates: Tuple[GapEstimate, ...]

    def costs_csv(self) -> str:
        lines = ["deviation_name,N,mean_cost,stderr"]
        for est in self.estimates:
            for name, m, s in est.costs:
                lines.append(f"{name},{est.N},{format_float(m)},{format_float(s)}")
        return "\n".join(lines) + "\n"

    def gap_csv(self) -> str:
        lines = ["N,gap,stderr,upper,best_deviation"]
        for e in self.estimates:
            lines.append(f"{e.N},{format_float(e.gap)},{format_float(e.stderr)},{format_float(e.upper)},{e.best}")
        return "\n".join(lines) + "\n"


DeviationSpec = Union[None, Sequence[Tuple[str, MarkovPolicy]], Callable[[int], Sequence[Tuple[str, MarkovPolicy]]]]


def nash_gap(
    model: GameModel,
    mfe,
    deviations: DeviationSpec,
    N: int,
    reps: int,
    master_seed: int = 0,
    workers: Optional[int] = None,
) -> GapEstimate:
    """Estimated epsilon of the symmetric profile in which everyone plays ``mfe.policy``.

    ``gap = J(pi, pi..) - min_c J(c, pi..)`` over ``{pi}`` and the candidate
    deviations, all run on common random numbers. The standard error is that
    of the paired per-replication difference against the minimizing candidate.
    ``deviations=None`` selects :func:`default_deviations`.
    """
    policy, flow = mfe.policy, mfe.flow
    T = flow.horizon
    if deviations is None:
        cands = default_deviations(model, policy, flow, N, reps, master_seed, workers)
    elif callable(deviations):
        cands = list(deviations(N))
    else:
        cands = list(deviations)
    if not cands:
        raise DomainError("the deviation set must be nonempty")

    def run(dev):
        cfg = SimConfig(N=N, T=T, reps=reps, policy=policy, master_seed=master_seed,
                        deviator=dev, workers=workers)
        return simulate(model, cfg).costs

    base = run(None)
    rows = [("mfe", base)] + [(name, run(dev)) for name, dev in cands]
    means = [float(c.mean()) for _, c in rows]
    k = int(np.argmin(means))
    best_name, best_costs = rows[k]
    gap = means[0] - means[k]
    if k == 0:
        se = 0.0
    else:
        _, se = _mean_se(base - best_costs)
    table = tuple((name, float(c.mean()), float(_mean_se(c)[1])) for name, c in rows)
    tail = getattr(mfe, "tail", None)
    return GapEstimate(N=N, gap=float(gap), stderr=float(se), best=best_name, tail=tail, costs=table)


def nash_gap_sweep(
    model: GameModel,
    mfe,
    Ns: Sequence[int],
    reps: int,
    master_seed: int = 0,
    deviations: DeviationSpec = None,
    workers: Optional[int] = None,
) -> GapSweep:
    return GapSweep(tuple(nash_gap(model, mfe, deviations, int(N), reps, master_seed, workers) for N in Ns))


def manifest_json(payload: Dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"
