import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import identity_model, random_prob
from mfgkit.dp import (
    MarkovPolicy,
    MeasureFlow,
    bellman_backup,
    evaluate_policy,
    solve_nonhomogeneous,
    tail_bound,
    truncation_horizon,
    v_norm,
)
from mfgkit.errors import DomainError, NumericError, StabilityError, StructuralError
from mfgkit.measures import ProbVector
from mfgkit.mfe import propagate_flow
from mfgkit.model import GrowthConstants, default_probes, estimate_growth_constants, lt_envelope


def half_flow(model, T):
    return MeasureFlow.constant(ProbVector.uniform(model.state_grid), T)


def path_value(model, flow, actions, x0):
    """Expected discounted cost from x0 by summing over every state path."""
    T = flow.horizon
    total = 0.0
    for path in itertools.product(range(model.n_states), repeat=T):
        states = (x0,) + path
        prob, cost = 1.0, 0.0
        for t, x in enumerate(states):
            a = actions[t][x]
            cost += model.beta**t * model.cost_matrix(flow.masses[t])[x, a]
            if t < T:
                prob *= model.kernel_tensor(flow.masses[t])[x, a, states[t + 1]]
        total += prob * cost
    return total


def brute_force_optimum(model, flow):
    T = flow.horizon
    nX, nA = model.n_states, model.n_actions
    best = np.full(nX, np.inf)
    for flat in itertools.product(range(nA), repeat=nX * (T + 1)):
        actions = np.array(flat).reshape(T + 1, nX)
        for x in range(nX):
            best[x] = min(best[x], path_value(model, flow, actions, x))
    return best


# ---------------------------------------------------------------- bellman backup


def test_backup_constant_cost():
    m = identity_model(3, cost=np.ones((3, 2)))
    val, greedy = bellman_backup(m, m.mu0, np.zeros(3))
    assert np.array_equal(val, np.ones(3))
    assert np.array_equal(greedy, [0, 0, 0])


def test_backup_constant_value(toy):
    rng = np.random.default_rng(0)
    mu = random_prob(rng, toy.state_grid)
    val, _ = bellman_backup(toy, mu, np.full(2, 3.0))
    assert np.allclose(val, toy.cost_matrix(mu).min(axis=1) + 0.9 * 3.0, atol=1e-14)


def test_backup_toy_example(toy):
    val, greedy = bellman_backup(toy, ProbVector.uniform(toy.state_grid), np.zeros(2))
    assert np.allclose(val, [0.0, 0.5])
    assert greedy.tolist() == [0, 0]


def test_backup_rejects_nonfinite(toy):
    with pytest.raises(NumericError):
        bellman_backup(toy, toy.mu0, np.array([0.0, np.nan]))
    with pytest.raises(NumericError):
        bellman_backup(toy, toy.mu0, np.array([np.inf, 0.0]))
    with pytest.raises(StructuralError):
        bellman_backup(toy, toy.mu0, np.zeros(3))


def test_backup_ties_go_to_lowest_action():
    m = identity_model(2, n_actions=3, cost=[[1.0, 1.0, 1.0], [2.0, 0.5, 0.5]])
    _, greedy = bellman_backup(m, m.mu0, np.zeros(2))
    assert greedy.tolist() == [0, 1]


# ---------------------------------------------------------------- truncation


def test_truncation_examples():
    c = GrowthConstants(alpha=1.5, gamma=1.0, R=2.0, M=1.0, B=1.0, beta=0.5)
    T, tail = truncation_horizon(c, 0.5, 1e-3)
    assert T == 31
    assert tail <= 1e-3 < tail_bound(c, 0.5, 30)
    # closed form against the explicit series tail sum_{k > T} M R r^k
    series = sum(1.0 * 2.0 * 0.75**k for k in range(T + 1, 2000))
    assert tail == pytest.approx(series, rel=1e-12)
    z = GrowthConstants(alpha=1.5, gamma=1.0, R=0.0, M=1.0, B=1.0, beta=0.5)
    assert truncation_horizon(z, 0.5, 1e-3) == (1, 0.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.2, 1.2), st.floats(0.1, 0.8), st.floats(1e-8, 1.0), st.floats(0.01, 10.0))
def test_truncation_minimal_and_monotone(alpha, beta, tol, R):
    c = GrowthConstants(alpha=alpha, gamma=1.0, R=R, M=1.0, B=1.0, beta=beta)
    if c.contraction >= 0.99:
        return
    T, tail = truncation_horizon(c, beta, tol)
    assert tail <= tol
    assert T == 1 or tail_bound(c, beta, T - 1) > tol
    T2, _ = truncation_horizon(c, beta, tol / 2)
    assert T2 >= T


def test_truncation_errors():
    c = GrowthConstants(alpha=2.0, gamma=1.0, R=1.0, M=1.0, B=1.0, beta=0.6)
    with pytest.raises(StabilityError):
        truncation_horizon(c, 0.6, 1e-3)
    ok = GrowthConstants(alpha=1.0, gamma=1.0, R=1.0, M=1.0, B=1.0, beta=0.6)
    with pytest.raises(DomainError):
        truncation_horizon(ok, 0.6, 0.0)


# ---------------------------------------------------------------- solve / evaluate


def test_zero_cost_solution():
    m = identity_model(3)
    vf, pol = solve_nonhomogeneous(m, MeasureFlow.constant(m.mu0, 4))
    assert np.all(vf.values == 0.0)
    assert np.all(pol.kernels[..., 0] == 1.0)
    assert evaluate_policy(m, MeasureFlow.constant(m.mu0, 4), MarkovPolicy.uniform(4, 3, 2))[1] == 0.0


def test_myopic_horizon(toy):
    flow = MeasureFlow.constant(toy.mu0, 0)
    vf, _ = solve_nonhomogeneous(toy, flow)
    assert np.allclose(vf.values[0], toy.cost_matrix(toy.mu0).min(axis=1))


@pytest.mark.parametrize("T", [1, 2, 3])
def test_brute_force_equivalence(toy, T):
    rng = np.random.default_rng(T)
    flows = [half_flow(toy, T)]
    flows.append(MeasureFlow(toy.state_grid, np.stack([random_prob(rng, toy.state_grid).mass for _ in range(T + 1)])))
    for flow in flows:
        vf, pol = solve_nonhomogeneous(toy, flow)
        assert np.max(np.abs(vf.values[0] - brute_force_optimum(toy, flow))) <= 1e-12
        _, J = evaluate_policy(toy, flow, pol)
        assert J == pytest.approx(float(toy.mu0.mass @ vf.values[0]), abs=1e-12)


def test_evaluation_matches_greedy_value(additive):
    flow = propagate_flow(additive, MarkovPolicy.uniform(10, additive.n_states, additive.n_actions), 10)
    vf, pol = solve_nonhomogeneous(additive, flow)
    _, J = evaluate_policy(additive, flow, pol)
    assert J == pytest.approx(float(additive.mu0.mass @ vf.values[0]), abs=1e-10)
    _, J_unif = evaluate_policy(additive, flow, MarkovPolicy.uniform(10, additive.n_states, additive.n_actions))
    assert J_unif >= J - 1e-10


def test_evaluation_matches_monte_carlo(toy):
    T = 30
    flow = half_flow(toy, T)
    policy = MarkovPolicy.uniform(T, 2, 2)
    _, J = evaluate_policy(toy, flow, policy)
    rng = np.random.default_rng(11)
    n = 100_000
    P = toy.kernel_tensor(flow.masses[0])
    C = toy.cost_matrix(flow.masses[0])
    x = (rng.random(n) < 0.5).astype(int)
    costs = np.zeros(n)
    for t in range(T + 1):
        a = (rng.random(n) < 0.5).astype(int)
        costs += toy.beta**t * C[x, a]
        x = (rng.random(n) < P[x, a, 1]).astype(int)
    se = costs.std(ddof=1) / np.sqrt(n)
    assert abs(costs.mean() - J) <= 3 * se


def test_evaluate_policy_horizon_mismatch(toy):
    with pytest.raises(StructuralError):
        evaluate_policy(toy, half_flow(toy, 5), MarkovPolicy.uniform(3, 2, 2))


# ---------------------------------------------------------------- properties


def _random_pair(rng, model, scale):
    v = model.v.values
    return rng.normal(size=model.n_states) * v * scale, rng.normal(size=model.n_states) * v * scale


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_contraction_additive(additive, seed):
    rng = np.random.default_rng(seed)
    mu = random_prob(rng, additive.state_grid)
    alpha = estimate_growth_constants(additive, [mu]).alpha
    u, r = _random_pair(rng, additive, 3.0)
    bu, _ = bellman_backup(additive, mu, u)
    br, _ = bellman_backup(additive, mu, r)
    v = additive.v.values
    assert v_norm(bu - br, v) <= alpha * additive.beta * v_norm(u - r, v) + 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_monotonicity(toy, seed):
    rng = np.random.default_rng(seed)
    mu = random_prob(rng, toy.state_grid)
    u = rng.normal(size=2)
    up = u + rng.random(2)
    assert np.all(bellman_backup(toy, mu, u)[0] <= bellman_backup(toy, mu, up)[0] + 1e-15)


@pytest.mark.parametrize("name", ["toy", "additive"])
def test_value_envelope(request, name):
    model = request.getfixturevalue(name)
    c = estimate_growth_constants(model, default_probes(model))
    T, tail = truncation_horizon(c, model.beta, 1e-3)
    for policy in (MarkovPolicy.uniform(T, model.n_states, model.n_actions),
                   MarkovPolicy.constant(T, model.n_states, model.n_actions, 0)):
        flow = propagate_flow(model, policy, T)
        vf, _ = solve_nonhomogeneous(model, flow)
        assert np.all(vf.values >= 0)
        for t in range(T + 1):
            assert np.all(vf.values[t] <= lt_envelope(c, model.beta, t) * model.v.values + tail)


def test_successive_approximation_rate(toy):
    mu = ProbVector.uniform(toy.state_grid)
    c = estimate_growth_constants(toy, [mu])
    rate = c.alpha * toy.beta
    fixed = np.zeros(2)
    for _ in range(2000):
        fixed = bellman_backup(toy, mu, fixed)[0]
    L0 = lt_envelope(c, toy.beta, 0)
    u = np.zeros(2)
    for k in range(1, 80):
        u = bellman_backup(toy, mu, u)[0]
        assert v_norm(u - fixed, toy.v.values) <= rate**k * L0 + 1e-12


# ---------------------------------------------------------------- containers and export


def test_policy_and_flow_validation():
    with pytest.raises(DomainError):
        MarkovPolicy(np.array([[[0.5, 0.6]]]))
    with pytest.raises(StructuralError):
        MarkovPolicy(np.ones((2, 2)))
    toy_grid = ProbVector.uniform(identity_model(2).state_grid).grid
    with pytest.raises(DomainError):
        MeasureFlow(toy_grid, np.array([[0.5, 0.6]]))
    pol = MarkovPolicy.from_actions(np.array([[1, 0]]), 2)
    assert pol.is_deterministic()
    assert not MarkovPolicy.uniform(0, 2, 2).is_deterministic()


def test_csv_exports(toy):
    flow = half_flow(toy, 2)
    vf, pol = solve_nonhomogeneous(toy, flow)
    assert vf.to_csv().splitlines()[0] == "t,state_index,value"
    assert pol.to_csv().splitlines()[0] == "t,state_index,action_index,prob"
    assert flow.to_csv().splitlines()[0] == "t,state_index,coordinate,mass"
    assert len(pol.to_csv().splitlines()) == 1 + 3 * 2 * 2
    row = vf.to_csv().splitlines()[2]
    assert float(row.split(",")[2]) == vf.values[0, 1]


def test_near_ties_are_counted():
    m = identity_model(2, n_actions=2, cost=[[1.0, 1.0], [0.0, 1.0]])
    vf, _ = solve_nonhomogeneous(m, MeasureFlow.constant(m.mu0, 3))
    assert vf.near_ties == 4
