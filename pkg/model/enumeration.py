"""Exact inference by enumerating every configuration of a small network"""

import enum
import logging
import math
from typing import Iterator, Optional, Sequence, Tuple

import torch

from .model import DTYPE, ClampPattern, Network, SpinLike, energy, spin_energies, validate_temperature


logger = logging.getLogger(__name__)

ENUMERATION_LIMIT = 20

# allowed deviation of a distribution table's total from one
NORMALIZATION_TOL = 1e-9

# nodes enumerated in one vectorized block; the remaining nodes follow a Gray code
BLOCK_BITS = 12


class EnumerationLimitError(ValueError):
    """Raised when a network is too large for exact enumeration."""


class EnumerationMethod(enum.Enum):
    """`Enum` for the state orderings used by the enumerator."""

    GRAY = "gray"
    BINARY = "binary"


def check_enumerable(n_nodes: int) -> None:
    if n_nodes > ENUMERATION_LIMIT:
        raise EnumerationLimitError(
            f"Exact enumeration supports at most {ENUMERATION_LIMIT} free nodes, received {n_nodes}."
        )


def binary_states(n_nodes: int) -> torch.Tensor:
    """All 2^n configurations in binary-counter order; node i follows bit i."""
    check_enumerable(n_nodes)
    codes = torch.arange(2**n_nodes, dtype=torch.long)[:, None]
    bits = (codes >> torch.arange(n_nodes, dtype=torch.long)) & 1
    return (2 * bits - 1).to(DTYPE)


def _binary_blocks(net: Network) -> Iterator[Tuple[torch.Tensor, torch.Tensor]]:
    states = binary_states(net.n_nodes)
    yield states, spin_energies(states, net.weights, net.biases)


def _gray_blocks(net: Network, block_bits: int = BLOCK_BITS) -> Iterator[Tuple[torch.Tensor, torch.Tensor]]:
    """Blocks of configurations whose high nodes step through a Gray code.

    Each step flips one high node, so the block energies are updated incrementally
    from that node's local field instead of being recomputed.
    """
    n = net.n_nodes
    check_enumerable(n)
    low = min(n, block_bits)
    high = n - low
    weights, biases = net.weights, net.biases
    if high:
        logger.debug(f"Enumerating {n} nodes as {2**high} Gray-code blocks of {2**low} configurations")

    low_states = binary_states(low)
    high_state = -torch.ones(high, dtype=DTYPE)
    states = torch.cat([low_states, high_state.expand(low_states.shape[0], high)], dim=1)
    energies = spin_energies(states, weights, biases)
    yield states, energies

    low_fields = low_states @ weights[:low, low:]
    for step in range(1, 2**high):
        k = (step & -step).bit_length() - 1
        node = low + k
        field = low_fields[:, k] + high_state @ weights[low:, node] + biases[node]
        energies = energies + 2.0 * high_state[k] * field
        high_state = high_state.clone()
        high_state[k] = -high_state[k]
        states = torch.cat([low_states, high_state.expand(low_states.shape[0], high)], dim=1)
        yield states, energies


def _blocks(net: Network, method: str) -> Iterator[Tuple[torch.Tensor, torch.Tensor]]:
    method = EnumerationMethod(method)
    if method == EnumerationMethod.GRAY:
        return _gray_blocks(net)
    return _binary_blocks(net)


def log_partition_function(net: Network, T: float = 1.0, method: str = EnumerationMethod.GRAY.value) -> float:
    """ln Z, accumulated with log-sum-exp."""
    T = validate_temperature(T)
    check_enumerable(net.n_nodes)
    block_logs = torch.stack([torch.logsumexp(-e / T, dim=0) for _, e in _blocks(net, method)])
    return float(torch.logsumexp(block_logs, dim=0))


def partition_function(net: Network, T: float = 1.0, method: str = EnumerationMethod.GRAY.value) -> float:
    """Z = sum_S exp(-E(S)/T) over all 2^L configurations."""
    return math.exp(log_partition_function(net, T, method))


def log_prob(net: Network, s: SpinLike, T: float = 1.0) -> float:
    T = validate_temperature(T)
    return -energy(net, s) / T - log_partition_function(net, T)


def _augmented_moments(net: Network, T: float, method: str) -> torch.Tensor:
    log_z = log_partition_function(net, T, method)
    n = net.n_nodes
    moments = torch.zeros(n + 1, n + 1, dtype=DTYPE)
    for states, energies in _blocks(net, method):
        probs = torch.exp(-energies / T - log_z)
        augmented = torch.cat([torch.ones(states.shape[0], 1, dtype=DTYPE), states], dim=1)
        moments += augmented.T @ (probs[:, None] * augmented)
    moments = 0.5 * (moments + moments.T)
    moments.fill_diagonal_(1.0)
    return moments


def condition_on(net: Network, clamp: ClampPattern) -> Tuple[Network, float]:
    """Network over the free nodes given the clamped values, plus the constant clamped energy.

    E(H, V) = E_reduced(H) + offset.
    """
    if clamp.n_nodes != net.n_nodes:
        raise ValueError(f"Clamp pattern has {clamp.n_nodes} nodes but the network has {net.n_nodes}.")
    free = clamp.free_indices
    fixed = clamp.clamped_indices
    values = clamp.values[fixed]
    weights = net.weights
    reduced = Network(
        weights[free][:, free],
        net.biases[free] + weights[free][:, fixed] @ values,
        net.adjacency[free][:, free],
    )
    offset = -(0.5 * values @ weights[fixed][:, fixed] @ values + net.biases[fixed] @ values)
    return reduced, float(offset)


def clamped_log_partition(
    net: Network, clamp: ClampPattern, T: float = 1.0, method: str = EnumerationMethod.GRAY.value
) -> float:
    """ln sum_H exp(-E(H, V)/T) for the clamped values V."""
    T = validate_temperature(T)
    reduced, offset = condition_on(net, clamp)
    return log_partition_function(reduced, T, method) - offset / T


def exact_pair_correlations(
    net: Network,
    T: float = 1.0,
    clamp: Optional[ClampPattern] = None,
    method: str = EnumerationMethod.GRAY.value,
) -> torch.Tensor:
    """<s_i s_j> including the bias row/column (s_0 = 1), with a unit diagonal.

    With a clamp pattern the expectation is over the free nodes only and clamped
    nodes keep their observed values.
    """
    T = validate_temperature(T)
    if clamp is None:
        return _augmented_moments(net, T, method)

    reduced, _ = condition_on(net, clamp)
    reduced_moments = _augmented_moments(reduced, T, method)
    n = net.n_nodes
    free = clamp.free_indices
    means = torch.ones(n + 1, dtype=DTYPE)
    means[1:] = clamp.values
    means[free + 1] = reduced_moments[0, 1:]
    moments = torch.outer(means, means)
    index = torch.cat([torch.zeros(1, dtype=torch.long), free + 1])
    moments[index[:, None], index[None, :]] = reduced_moments
    moments.fill_diagonal_(1.0)
    return moments


def _pattern_weights(n_patterns: int, weights: Optional[Sequence[float]]) -> torch.Tensor:
    if weights is None:
        return torch.ones(n_patterns, dtype=DTYPE)
    weights = torch.as_tensor(weights, dtype=DTYPE)
    if weights.shape != (n_patterns,) or (weights <= 0).any():
        raise ValueError(f"Expected {n_patterns} positive pattern weights, received {weights.tolist()}")
    return weights


def exact_log_likelihood(
    net: Network,
    patterns: Sequence[ClampPattern],
    T: float = 1.0,
    weights: Optional[Sequence[float]] = None,
) -> float:
    """sum_n ln sum_{H_n} P(H_n, V_n); `weights` are pattern multiplicities."""
    T = validate_temperature(T)
    weights = _pattern_weights(len(patterns), weights)
    log_z = log_partition_function(net, T)
    total = 0.0
    for weight, clamp in zip(weights.tolist(), patterns):
        total += weight * (clamped_log_partition(net, clamp, T) - log_z)
    return total


def exact_likelihood_gradient(
    net: Network,
    patterns: Sequence[ClampPattern],
    T: float = 1.0,
    weights: Optional[Sequence[float]] = None,
) -> torch.Tensor:
    """<s_i s_j>_C averaged over patterns minus <s_i s_j>_F, bias in column 0."""
    if not patterns:
        raise ValueError("At least one pattern is needed for a likelihood gradient.")
    weights = _pattern_weights(len(patterns), weights)
    clamped = sum(w * exact_pair_correlations(net, T, clamp) for w, clamp in zip(weights.tolist(), patterns))
    return clamped / weights.sum() - exact_pair_correlations(net, T)


def exact_entropy(net: Network, T: float = 1.0) -> float:
    """-sum_S P(S) ln P(S) for the network distribution."""
    T = validate_temperature(T)
    log_z = log_partition_function(net, T)
    total = 0.0
    for _, energies in _blocks(net, EnumerationMethod.GRAY.value):
        log_p = -energies / T - log_z
        total -= float((torch.exp(log_p) * log_p).sum())
    return total


def kl_divergence_discrete(p: torch.Tensor, q: torch.Tensor) -> float:
    """sum p ln(p/q) for two distribution tables over the same support."""
    p = torch.as_tensor(p, dtype=DTYPE)
    q = torch.as_tensor(q, dtype=DTYPE)
    if p.shape != q.shape:
        raise ValueError(f"Distribution tables have different supports: {tuple(p.shape)} and {tuple(q.shape)}")
    if (p < 0).any() or (q < 0).any():
        raise ValueError("Distribution tables must be non-negative.")
    for name, table in (("p", p), ("q", q)):
        if abs(float(table.sum()) - 1.0) > NORMALIZATION_TOL:
            raise ValueError(f"`{name}` is not normalized: its entries sum to {float(table.sum())}")
    if ((q == 0) & (p > 0)).any():
        raise ValueError("`q` is zero where `p` is positive; the divergence is infinite.")
    return float((torch.xlogy(p, p) - torch.xlogy(p, q)).sum())
