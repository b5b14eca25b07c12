"""Tests for naive mean field inference"""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from model.enumeration import clamped_log_partition, log_partition_function
from model.model import DTYPE, ClampPattern, Network, Topology
from toolkit.meanfield import (
    AnnealSchedule,
    FixedPointSettings,
    MeanFieldParams,
    binary_entropy,
    mf_anneal,
    mf_clamped_objective,
    mf_fixed_point,
    mf_free_objective,
    mf_learning_gradient,
    mf_marginal_prob,
    mf_pair_correlations,
)

from network_factories import random_network


TIGHT = FixedPointSettings(max_sweeps=1000, rel_tol=1e-15)


def test_binary_entropy_values():
    assert_allclose(binary_entropy(0.5), math.log(2), rtol=1e-15)
    assert binary_entropy(0.0) == 0.0
    assert binary_entropy(1.0) == 0.0
    values = binary_entropy(torch.tensor([0.25, 0.75], dtype=DTYPE))
    assert_allclose(values[0], values[1], rtol=1e-15)


@pytest.mark.parametrize("p", [-0.1, 1.5])
def test_binary_entropy_rejects_out_of_range(p):
    with pytest.raises(ValueError):
        binary_entropy(p)


def test_marginal_prob():
    assert_allclose(mf_marginal_prob(0.2, 1), 0.6)
    assert_allclose(mf_marginal_prob(0.2, -1), 0.4)
    with pytest.raises(ValueError):
        mf_marginal_prob(0.2, 0)


def test_params_validation():
    with pytest.raises(ValueError):
        MeanFieldParams(torch.tensor([0.5, 1.5]))
    clamp = ClampPattern.from_visible(2, [0], [1])
    with pytest.raises(ValueError):
        MeanFieldParams(torch.tensor([0.5, 0.0]), clamp)
    assert MeanFieldParams.clamped(torch.tensor([0.5, 0.1], dtype=DTYPE), clamp).means.tolist() == [1.0, 0.1]


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), T=st.floats(0.3, 5.0))
def test_free_objective_bounds_log_partition(seed, T):
    net = random_network(8, seed)
    generator = torch.Generator().manual_seed(seed)
    m = MeanFieldParams((2 * torch.rand(8, generator=generator, dtype=DTYPE) - 1) * 0.999)
    assert mf_free_objective(net, m, T) >= -log_partition_function(net, T) - 1e-12


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_clamped_objective_bounds_clamped_log_partition(seed):
    net = random_network(6, seed)
    generator = torch.Generator().manual_seed(seed)
    clamp = Topology.fully_connected(6, n_visible=2).clamp([1, -1])
    mu = MeanFieldParams.random(6, generator, clamp)
    assert mf_clamped_objective(net, mu) <= clamped_log_partition(net, clamp) + 1e-12


def test_clamped_objective_needs_clamp():
    net = random_network(3, 0)
    with pytest.raises(ValueError):
        mf_clamped_objective(net, MeanFieldParams(torch.zeros(3, dtype=DTYPE)))


def test_factorized_network_is_solved_exactly():
    biases = torch.tensor([0.3, -1.2, 0.8], dtype=DTYPE)
    net = Network.fully_connected(torch.zeros(3, 3, dtype=DTYPE), biases)
    result = mf_fixed_point(net, None, 2.0, MeanFieldParams(torch.zeros(3, dtype=DTYPE)))
    assert result.converged
    assert_allclose(result.params.means, torch.tanh(biases / 2.0), rtol=0, atol=1e-15)
    assert_allclose(mf_free_objective(net, result.params, 2.0), -log_partition_function(net, 2.0), rtol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_fixed_point_residual(seed):
    net = random_network(10, seed, scale=0.3)
    init = MeanFieldParams.random(10, torch.Generator().manual_seed(seed))
    result = mf_fixed_point(net, None, 1.0, init, TIGHT)
    m = result.params.means
    residual = m - torch.tanh(net.weights @ m + net.biases)
    assert residual.abs().max() <= 1e-6


def test_sweeps_never_increase_free_objective():
    net = random_network(10, 11)
    init = MeanFieldParams.random(10, torch.Generator().manual_seed(11))
    result = mf_fixed_point(net, None, 1.0, init, FixedPointSettings(max_sweeps=50, rel_tol=1e-15))
    objectives = [mf_free_objective(net, init)] + [value for _, value in result.trace]
    assert all(b <= a + 1e-12 for a, b in zip(objectives, objectives[1:]))


def test_clamped_fixed_point_keeps_observed_values():
    net = random_network(5, 2)
    clamp = ClampPattern.from_visible(5, [1, 3], [-1, 1])
    init = MeanFieldParams.random(5, torch.Generator().manual_seed(0), clamp)
    result = mf_fixed_point(net, clamp, 1.0, init)
    assert result.params.means[1] == -1.0
    assert result.params.means[3] == 1.0
    assert result.params.clamp is clamp


def test_non_convergence_is_flagged_not_raised():
    net = random_network(10, 3, scale=2.0)
    init = MeanFieldParams.random(10, torch.Generator().manual_seed(3))
    result = mf_fixed_point(net, None, 1.0, init, FixedPointSettings(max_sweeps=1, rel_tol=1e-15))
    assert result.n_sweeps == 1
    assert len(result.trace) == 1


def test_geometric_schedules():
    schedule = AnnealSchedule.geometric(60.0, 8)
    assert len(schedule) == 8
    assert_allclose(schedule.temperatures[0], 60.0, rtol=1e-12)
    assert schedule.temperatures[-1] == 1.0
    ratios = np.array(schedule.temperatures[:-1]) / np.array(schedule.temperatures[1:])
    assert_allclose(ratios, ratios[0], rtol=1e-10)
    assert len(AnnealSchedule.geometric(100.0, 7)) == 7
    assert AnnealSchedule.geometric(5.0, 1).temperatures == (1.0,)


@pytest.mark.parametrize("temperatures", [(2.0, 3.0, 1.0), (5.0, 2.0), (), (3.0, 3.0, 1.0)])
def test_invalid_schedules(temperatures):
    with pytest.raises(ValueError):
        AnnealSchedule(temperatures)


def test_settings_validation():
    with pytest.raises(ValueError):
        FixedPointSettings(max_sweeps=0)
    with pytest.raises(ValueError):
        FixedPointSettings(rel_tol=0.0)
    with pytest.raises(ValueError):
        FixedPointSettings(damping=1.0)
    assert FixedPointSettings.from_dict(FixedPointSettings().to_dict()) == FixedPointSettings()


def test_anneal_follows_schedule_and_ends_at_unit_temperature():
    net = random_network(6, 4)
    schedule = AnnealSchedule.geometric(60.0, 8)
    init = MeanFieldParams.random(6, torch.Generator().manual_seed(4))
    result = mf_anneal(net, None, schedule, init)
    temperatures = [T for T, _ in result.trace]
    assert temperatures[0] == schedule.temperatures[0]
    assert temperatures[-1] == 1.0
    assert all(a >= b for a, b in zip(temperatures, temperatures[1:]))
    assert set(temperatures) == set(schedule.temperatures)


def test_damped_sweeps_reach_same_fixed_point():
    net = random_network(6, 9, scale=0.3)
    init = MeanFieldParams.random(6, torch.Generator().manual_seed(9))
    plain = mf_fixed_point(net, None, 1.0, init, TIGHT)
    damped = mf_fixed_point(net, None, 1.0, init, FixedPointSettings(max_sweeps=1000, rel_tol=1e-15, damping=0.5))
    assert_allclose(plain.params.means, damped.params.means, rtol=0, atol=1e-6)


def test_learning_gradient_for_fully_observed_patterns():
    topology = Topology.fully_connected(3)
    patterns = [topology.clamp([1, -1, 1]), topology.clamp([1, 1, 1])]
    mus = [MeanFieldParams.clamped(torch.zeros(3, dtype=DTYPE), p) for p in patterns]
    m = MeanFieldParams(torch.tensor([0.2, -0.1, 0.0], dtype=DTYPE))
    gradient = mf_learning_gradient(mus, m)
    # averaged clamped correlations of (1, -1, 1) and (1, 1, 1): pair (1, 2) averages -1 and 1
    assert_allclose(gradient[1, 2], 0.0 - 0.2 * -0.1, atol=1e-15)
    assert_allclose(gradient[0, 1], 1.0 - 0.2, atol=1e-15)
    assert torch.equal(gradient.diagonal(), torch.zeros(4, dtype=DTYPE))


def test_learning_gradient_matches_frozen_objective_finite_differences():
    net = random_network(5, 8)
    topology = Topology.fully_connected(5, n_visible=2)
    generator = torch.Generator().manual_seed(8)
    patterns = [topology.clamp([1, -1]), topology.clamp([-1, -1])]
    mus = [mf_fixed_point(net, p, 1.0, MeanFieldParams.random(5, generator, p)).params for p in patterns]
    m = mf_fixed_point(net, None, 1.0, MeanFieldParams.random(5, generator)).params
    gradient = mf_learning_gradient(mus, m)

    def objective(candidate):
        clamped = sum(mf_clamped_objective(candidate, mu) for mu in mus) / len(mus)
        return clamped + mf_free_objective(candidate, m)

    eps = 1e-6
    base = net.augmented()
    for i in range(6):
        for j in range(i + 1, 6):
            step = torch.zeros_like(base)
            step[i, j] = step[j, i] = eps
            plus = Network.from_augmented(base + step, net.adjacency)
            minus = Network.from_augmented(base - step, net.adjacency)
            numeric = (objective(plus) - objective(minus)) / (2 * eps)
            assert_allclose(gradient[i, j], numeric, rtol=0, atol=1e-8)


def test_pair_correlations_shape():
    correlations = mf_pair_correlations(MeanFieldParams(torch.tensor([0.5, -0.5], dtype=DTYPE)))
    assert correlations.shape == (3, 3)
    assert_allclose(correlations[1, 2], -0.25)
    assert_allclose(correlations[0, 1], 0.5)


def bisect_positive_root(w, lo=1e-6, hi=1.0, n_steps=200):
    """Positive solution of m = tanh(w m) for w > 1 by scalar bisection."""
    def f(m):
        return m - math.tanh(w * m)

    for _ in range(n_steps):
        mid = 0.5 * (lo + hi)
        if f(lo) * f(mid) <= 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def test_two_node_fixed_point_matches_bisection():
    net = Network.fully_connected(torch.tensor([[0.0, 1.5], [1.5, 0.0]], dtype=DTYPE), torch.zeros(2, dtype=DTYPE))
    init = MeanFieldParams(torch.tensor([0.1, 0.1], dtype=DTYPE))
    result = mf_fixed_point(net, None, 1.0, init, TIGHT)
    root = bisect_positive_root(1.5)
    assert result.converged
    assert_allclose(result.params.means, [root, root], rtol=0, atol=1e-7)


def test_fixed_point_init_is_returned_unchanged():
    net = Network.fully_connected(torch.tensor([[0.0, 1.5], [1.5, 0.0]], dtype=DTYPE), torch.zeros(2, dtype=DTYPE))
    root = mf_fixed_point(net, None, 1.0, MeanFieldParams(torch.tensor([0.1, 0.1], dtype=DTYPE)), TIGHT)
    again = mf_fixed_point(net, None, 1.0, root.params, TIGHT)
    assert again.n_sweeps == 1
    assert_allclose(again.params.means, root.params.means, rtol=0, atol=1e-8)


def test_anneal_is_no_worse_than_direct_solve():
    converged = FixedPointSettings(max_sweeps=2000, rel_tol=1e-14)
    schedule = AnnealSchedule.geometric(60.0, 8)
    no_worse = 0
    for seed in range(100):
        net = random_network(10, seed)
        init = MeanFieldParams.random(10, torch.Generator().manual_seed(seed))
        annealed = mf_anneal(net, None, schedule, init, converged)
        direct = mf_fixed_point(net, None, 1.0, init, converged)
        if mf_free_objective(net, annealed.params) <= mf_free_objective(net, direct.params) + 1e-10:
            no_worse += 1
    assert no_worse >= 90
