"""Tests for the mixture of factorized distributions"""

import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from model.enumeration import binary_states, exact_pair_correlations, log_partition_function
from model.model import DTYPE, ClampPattern, Network
from toolkit.experiments import correlation_differences
from toolkit.meanfield import (
    AnnealSchedule,
    FixedPointSettings,
    MeanFieldParams,
    factorized_terms,
    mf_anneal,
    mf_free_objective,
    mf_learning_gradient,
    mf_pair_correlations,
)
from toolkit.mixture import (
    MixtureParams,
    component_overlap,
    component_overlaps,
    init_mixture,
    marginals,
    mix_prob,
    mixture_entropy_exact,
    mixture_free_bound,
    mixture_learning_gradient,
    mixture_pair_correlations,
    mutual_info_exact,
    mutual_info_lower_bound,
    mutual_info_smoothed_exact,
    optimize_mixture,
    update_alphas,
    update_component_means,
    update_lambdas,
    update_smoothing,
)

from network_factories import random_network


def random_mixture(n_nodes, n_components, seed):
    generator = torch.Generator().manual_seed(seed)
    alphas = torch.softmax(torch.randn(n_components, generator=generator, dtype=DTYPE), 0)
    means = (2 * torch.rand(n_components, n_nodes, generator=generator, dtype=DTYPE) - 1) * 0.9
    smoothing = torch.rand(n_components, n_nodes, 2, generator=generator, dtype=DTYPE) + 0.1
    lambdas = torch.rand(n_components, generator=generator, dtype=DTYPE) + 0.5
    return MixtureParams(alphas, means, smoothing, lambdas)


def enumerated_smoothing(params):
    """R(S|l) for every configuration, shape (K, 2^L)."""
    states = binary_states(params.n_nodes)
    index = ((states + 1) / 2).long()
    tables = []
    for l in range(params.n_components):
        per_node = params.smoothing[l].gather(1, index.T)
        tables.append(per_node.prod(0))
    return torch.stack(tables)


def test_params_validation():
    params = random_mixture(3, 2, 0)
    with pytest.raises(ValueError):
        MixtureParams(torch.tensor([0.7, 0.7]), params.means, params.smoothing, params.lambdas)
    with pytest.raises(ValueError):
        MixtureParams(params.alphas, params.means, torch.zeros(2, 3, 2), params.lambdas)
    with pytest.raises(ValueError):
        MixtureParams(params.alphas, params.means, params.smoothing, -params.lambdas)
    with pytest.raises(ValueError):
        MixtureParams(params.alphas, params.means[:, :2], params.smoothing, params.lambdas)


def test_mix_prob_is_normalized():
    params = random_mixture(5, 3, 1)
    total = sum(mix_prob(params, s) for s in binary_states(5))
    assert_allclose(total, 1.0, rtol=1e-12)


def test_component_overlaps_match_enumeration():
    params = random_mixture(5, 3, 2)
    states = binary_states(5)
    q_mix = torch.tensor([mix_prob(params, s) for s in states], dtype=DTYPE)
    expected = enumerated_smoothing(params) @ q_mix
    assert_allclose(component_overlaps(params), expected, rtol=1e-12)
    assert_allclose(component_overlap(params, 1), float(expected[1]), rtol=1e-12)
    with pytest.raises(ValueError):
        component_overlap(params, 3)


@pytest.mark.parametrize("seed", range(5))
def test_smoothed_mutual_information_identity(seed):
    params = random_mixture(6, 3, seed)
    assert_allclose(mutual_info_smoothed_exact(params), mutual_info_exact(params), rtol=0, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n_components=st.integers(1, 5))
def test_information_bound_ordering(seed, n_components):
    params = random_mixture(6, n_components, seed)
    exact = mutual_info_exact(params)
    assert mutual_info_lower_bound(params) <= exact + 1e-10
    assert -1e-12 <= exact <= math.log(n_components) + 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_entropy_decomposition(seed):
    params = random_mixture(6, 4, seed)
    _, entropies = factorized_terms(params.means, random_network(6, seed), 1.0)
    decomposed = float((params.alphas * entropies).sum()) + mutual_info_exact(params)
    assert_allclose(mixture_entropy_exact(params), decomposed, rtol=0, atol=1e-10)


def test_uniform_tables_give_zero_and_updates_stay_nonnegative():
    params = random_mixture(6, 3, 7)
    uniform = MixtureParams(params.alphas, params.means, torch.full_like(params.smoothing, 0.5), params.lambdas)
    uniform = update_lambdas(uniform)
    assert_allclose(mutual_info_lower_bound(uniform), 0.0, atol=1e-12)
    fitted = update_lambdas(update_smoothing(uniform))
    assert mutual_info_lower_bound(fitted) >= -1e-12
    assert mutual_info_lower_bound(fitted) <= mutual_info_exact(fitted) + 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_lambda_and_smoothing_updates_raise_information_bound(seed):
    params = random_mixture(6, 3, seed)
    before = mutual_info_lower_bound(params)
    after_lambdas = update_lambdas(params)
    assert mutual_info_lower_bound(after_lambdas) >= before - 1e-12
    after_smoothing = update_smoothing(after_lambdas)
    assert mutual_info_lower_bound(after_smoothing) >= mutual_info_lower_bound(after_lambdas) - 1e-12
    assert_allclose(after_lambdas.lambdas, params.alphas / component_overlaps(params), rtol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_alpha_and_mean_updates_lower_the_bound(seed):
    net = random_network(6, seed)
    params = random_mixture(6, 3, seed)
    before = mixture_free_bound(params, net).total
    after_alphas = update_alphas(params, net)
    assert_allclose(float(after_alphas.alphas.sum()), 1.0, rtol=1e-12)
    assert mixture_free_bound(after_alphas, net).total <= before + 1e-10
    after_means = update_component_means(after_alphas, net)
    assert mixture_free_bound(after_means, net).total <= mixture_free_bound(after_alphas, net).total + 1e-10


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), T=st.floats(0.5, 3.0))
def test_mixture_bound_is_upper_bound_on_negative_log_partition(seed, T):
    net = random_network(8, seed)
    params = random_mixture(8, 3, seed)
    bound = mixture_free_bound(params, net, T)
    assert bound.total >= -log_partition_function(net, T) - 1e-10
    assert_allclose(bound.total, bound.energy_term - bound.entropy_term - bound.mutual_info_lb, rtol=1e-14)


def test_optimized_bound_decreases_within_each_temperature():
    net = random_network(8, 3, scale=0.5)
    settings_ = FixedPointSettings(max_sweeps=30, rel_tol=1e-12)
    result = optimize_mixture(
        net, AnnealSchedule.geometric(10.0, 4), 3, settings=settings_, generator=torch.Generator().manual_seed(3)
    )
    for (t_prev, prev), (t_cur, cur) in zip(result.trace, result.trace[1:]):
        if t_prev == t_cur:
            assert cur <= prev + 1e-10 * abs(prev)
    assert result.trace[-1][0] == 1.0
    assert result.trace[-1][1] >= -log_partition_function(net) - 1e-10


def test_init_mixture():
    params = init_mixture(4, 3, torch.Generator().manual_seed(0))
    assert params.alphas.tolist() == pytest.approx([1 / 3] * 3)
    assert (params.means.abs() < 0.1).all()
    assert_allclose(params.smoothing, marginals(params.means))
    with pytest.raises(ValueError):
        init_mixture(4, 0, torch.Generator())


def test_optimize_needs_init_or_generator():
    with pytest.raises(ValueError):
        optimize_mixture(random_network(3, 0), 1.0, n_components=2)


@pytest.mark.parametrize("seed", range(10))
def test_one_component_matches_mean_field(seed):
    net = random_network(8, seed)
    schedule = AnnealSchedule.geometric(60.0, 8)
    mixture = optimize_mixture(net, schedule, 1, generator=torch.Generator().manual_seed(seed))
    init = MeanFieldParams.random(8, torch.Generator().manual_seed(seed))
    mean_field = mf_anneal(net, None, schedule, init)

    assert_allclose(mixture.params.means[0], mean_field.params.means, rtol=0, atol=1e-8)
    assert_allclose(mutual_info_lower_bound(mixture.params), 0.0, atol=1e-10)
    assert_allclose(
        mixture_free_bound(mixture.params, net).total, mf_free_objective(net, mean_field.params), rtol=0, atol=1e-8
    )
    assert_allclose(
        mixture_pair_correlations(mixture.params), mf_pair_correlations(mean_field.params), rtol=0, atol=1e-8
    )


def test_fixed_temperature_run():
    net = random_network(5, 1)
    result = optimize_mixture(net, 2.0, 2, generator=torch.Generator().manual_seed(1))
    assert {T for T, _ in result.trace} == {2.0}
    with pytest.raises(ValueError):
        optimize_mixture(net, 0.0, 2, generator=torch.Generator())


def test_two_components_capture_both_modes(ferromagnet):
    exact = exact_pair_correlations(ferromagnet)
    n = ferromagnet.n_nodes
    half = torch.full((n,), 0.5, dtype=DTYPE)

    single = MixtureParams(
        torch.ones(1, dtype=DTYPE), half[None, :], marginals(half[None, :]), torch.ones(1, dtype=DTYPE)
    )
    pair_means = torch.stack([half, -half])
    pair = MixtureParams(
        torch.full((2,), 0.5, dtype=DTYPE), pair_means, marginals(pair_means), torch.ones(2, dtype=DTYPE)
    )
    one = optimize_mixture(ferromagnet, 1.0, init=single)
    two = optimize_mixture(ferromagnet, 1.0, init=pair)

    sse_one = float((correlation_differences(exact, mixture_pair_correlations(one.params)) ** 2).sum())
    sse_two = float((correlation_differences(exact, mixture_pair_correlations(two.params)) ** 2).sum())
    assert sse_two < sse_one
    assert (two.params.means[0] > 0).all() and (two.params.means[1] < 0).all()
    assert mixture_free_bound(two.params, ferromagnet).total < mixture_free_bound(one.params, ferromagnet).total


def test_factorized_target_is_recovered_by_one_component():
    biases = torch.tensor([0.4, -0.9, 1.3, 0.2], dtype=DTYPE)
    net = Network.fully_connected(torch.zeros(4, 4, dtype=DTYPE), biases)
    result = optimize_mixture(net, AnnealSchedule.geometric(60.0, 8), 1, generator=torch.Generator().manual_seed(0))
    differences = correlation_differences(exact_pair_correlations(net), mixture_pair_correlations(result.params))
    assert differences.abs().max() <= 1e-10


def test_serialization_round_trip():
    params = random_mixture(3, 2, 4)
    rebuilt = MixtureParams.from_dict(params.to_dict())
    assert torch.equal(rebuilt.means, params.means)
    assert torch.equal(rebuilt.smoothing, params.smoothing)


def test_learning_gradient():
    clamped = [
        MeanFieldParams.clamped(torch.tensor([0.0, 0.3, -0.2], dtype=DTYPE), ClampPattern.from_visible(3, [0], [1])),
        MeanFieldParams.clamped(torch.tensor([0.0, -0.5, 0.1], dtype=DTYPE), ClampPattern.from_visible(3, [0], [-1])),
    ]
    single = random_mixture(3, 1, 5)
    assert_allclose(
        mixture_learning_gradient(clamped, single, [2, 1]),
        mf_learning_gradient(clamped, MeanFieldParams(single.means[0]), [2, 1]),
        rtol=0,
        atol=1e-15,
    )

    params = random_mixture(3, 2, 6)
    gradient = mixture_learning_gradient(clamped, params)
    a, m = params.alphas, params.means
    clamped_12 = (0.3 * -0.2 + -0.5 * 0.1) / 2
    free_12 = float(a[0] * m[0, 1] * m[0, 2] + a[1] * m[1, 1] * m[1, 2])
    assert_allclose(gradient[2, 3], clamped_12 - free_12, rtol=0, atol=1e-15)
    free_bias_1 = float(a[0] * m[0, 0] + a[1] * m[1, 0])
    assert_allclose(gradient[0, 1], 0.0 - free_bias_1, rtol=0, atol=1e-15)
    assert torch.equal(gradient, gradient.T)


@pytest.mark.parametrize("seed", range(3))
def test_information_bound_ignores_labels_and_node_order(seed):
    params = random_mixture(5, 3, seed)
    components = torch.tensor([2, 0, 1])
    nodes = torch.tensor([3, 1, 4, 0, 2])
    relabelled = MixtureParams(
        params.alphas[components], params.means[components], params.smoothing[components], params.lambdas[components]
    )
    reordered = MixtureParams(params.alphas, params.means[:, nodes], params.smoothing[:, nodes], params.lambdas)
    expected = mutual_info_lower_bound(params)
    assert_allclose(mutual_info_lower_bound(relabelled), expected, rtol=0, atol=1e-12)
    assert_allclose(mutual_info_lower_bound(reordered), expected, rtol=0, atol=1e-12)


def test_constant_tables_give_overlap_one_eighth():
    generator = torch.Generator().manual_seed(0)
    means = (2 * torch.rand(1, 3, generator=generator, dtype=DTYPE) - 1) * 0.9
    params = MixtureParams(
        torch.ones(1, dtype=DTYPE), means, torch.full((1, 3, 2), 0.5, dtype=DTYPE), torch.ones(1, dtype=DTYPE)
    )
    assert_allclose(component_overlap(params, 0), 1 / 8, rtol=1e-14)
    assert_allclose(update_lambdas(params).lambdas, [8.0], rtol=1e-14)

    pair = random_mixture(3, 2, 1)
    pair = MixtureParams(pair.alphas, pair.means, torch.full((2, 3, 2), 0.5, dtype=DTYPE), pair.lambdas)
    assert_allclose(component_overlaps(pair), [1 / 8, 1 / 8], rtol=1e-14)
    assert_allclose(update_lambdas(pair).lambdas, 8 * pair.alphas, rtol=1e-14)


@pytest.mark.parametrize("seed", range(3))
def test_lambda_update_is_locally_optimal(seed):
    params = update_lambdas(random_mixture(6, 3, seed))
    best = mutual_info_lower_bound(params)
    for l in range(3):
        for delta in (-1e-3, 1e-3):
            lambdas = params.lambdas.clone()
            lambdas[l] += delta
            perturbed = MixtureParams(params.alphas, params.means, params.smoothing, lambdas)
            assert mutual_info_lower_bound(perturbed) <= best + 1e-13
    assert_allclose(update_lambdas(params).lambdas, params.lambdas, rtol=1e-12)


def separated_pair(n_nodes):
    """Two equal-weight components with means +1 and -1 on every node, uniform tables."""
    means = torch.stack([torch.ones(n_nodes, dtype=DTYPE), -torch.ones(n_nodes, dtype=DTYPE)])
    return MixtureParams(
        torch.full((2,), 0.5, dtype=DTYPE),
        means,
        torch.full((2, n_nodes, 2), 0.5, dtype=DTYPE),
        torch.ones(2, dtype=DTYPE),
    )


def test_separated_components_reach_exact_information():
    params = update_lambdas(separated_pair(6))
    assert_allclose(mutual_info_exact(params), math.log(2), rtol=1e-14)
    fitted = update_lambdas(update_smoothing(params))
    assert abs(mutual_info_lower_bound(fitted) - math.log(2)) <= 1e-3
    assert fitted.floor_hits > 0


@pytest.mark.parametrize(
    "params",
    [update_lambdas(separated_pair(6)), update_lambdas(random_mixture(6, 1, 4))],
    ids=["separated", "single"],
)
def test_smoothing_update_is_idempotent(params):
    once = update_smoothing(params)
    twice = update_smoothing(once)
    assert abs(mutual_info_lower_bound(twice) - mutual_info_lower_bound(once)) < 1e-10


def test_bound_does_not_increase_with_more_components():
    schedule = AnnealSchedule.geometric(60.0, 8)
    totals = {1: [], 2: [], 4: []}
    for seed in range(20):
        net = random_network(10, seed)
        log_z = log_partition_function(net)
        for n_components in totals:
            result = optimize_mixture(net, schedule, n_components, generator=torch.Generator().manual_seed(seed))
            total = mixture_free_bound(result.params, net).total
            assert total >= -log_z - 1e-10
            totals[n_components].append(total)
    medians = [float(torch.tensor(totals[k]).median()) for k in (1, 2, 4)]
    assert medians[1] <= medians[0] + 1e-9
    assert medians[2] <= medians[1] + 1e-9
