"""Boltzmann machine over +/-1 units: network parameters, spin states, clamping and energy"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence, Tuple, Union

import torch


DTYPE = torch.float64

SpinLike = Union["SpinConfig", torch.Tensor, Sequence[float]]


def _as_tensor(values: Any, name: str) -> torch.Tensor:
    tensor = torch.as_tensor(values, dtype=DTYPE)
    if not torch.isfinite(tensor).all():
        raise ValueError(f"`{name}` contains non-finite values.")
    return tensor


def validate_temperature(T: float) -> float:
    """Check that a temperature is a positive real and return it as a float."""
    T = float(T)
    if not T > 0:
        raise ValueError(f"Temperature must be positive, received: {T}")
    return T


def _check_spins(states: torch.Tensor, name: str = "states") -> None:
    if states.ndim != 1:
        raise ValueError(f"`{name}` should be a vector, received shape {tuple(states.shape)}")
    if not ((states == 1) | (states == -1)).all():
        raise ValueError(f"Every entry of `{name}` must be exactly -1 or +1.")


@dataclass(frozen=True, eq=False)
class SpinConfig:
    """An assignment of +/-1 states to every node of a network."""

    states: torch.Tensor

    def __post_init__(self):
        states = _as_tensor(self.states, "states")
        _check_spins(states)
        object.__setattr__(self, "states", states)

    def __len__(self) -> int:
        return self.states.shape[0]

    @classmethod
    def from_any(cls, s: SpinLike) -> "SpinConfig":
        return s if isinstance(s, SpinConfig) else cls(s)


@dataclass(frozen=True, eq=False)
class ClampPattern:
    """Clamping of a subset of nodes to observed values.

    Args:
        mask (torch.Tensor): Boolean vector, True for clamped (visible) nodes.
        values (torch.Tensor): +/-1 on clamped nodes, 0 on free nodes.
    """

    mask: torch.Tensor
    values: torch.Tensor

    def __post_init__(self):
        mask = torch.as_tensor(self.mask, dtype=torch.bool)
        values = _as_tensor(self.values, "values")
        if mask.ndim != 1 or values.shape != mask.shape:
            raise ValueError(
                f"Clamp mask and values must be vectors of equal length, received {tuple(mask.shape)} and {tuple(values.shape)}"
            )
        if not ((values[mask] == 1) | (values[mask] == -1)).all():
            raise ValueError("Clamped values must be exactly -1 or +1.")
        if (values[~mask] != 0).any():
            raise ValueError("Values must be defined exactly on clamped nodes (0 on free nodes).")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_visible(cls, n_nodes: int, visible: Sequence[int], values: Sequence[float]) -> "ClampPattern":
        """Clamp the `visible` nodes (0-based indices) to `values`."""
        if len(visible) != len(values):
            raise ValueError(f"Got {len(values)} values for {len(visible)} visible nodes.")
        mask = torch.zeros(n_nodes, dtype=torch.bool)
        full = torch.zeros(n_nodes, dtype=DTYPE)
        index = torch.as_tensor(list(visible), dtype=torch.long)
        mask[index] = True
        full[index] = _as_tensor(values, "values")
        return cls(mask, full)

    @property
    def n_nodes(self) -> int:
        return self.mask.shape[0]

    @property
    def free_indices(self) -> torch.Tensor:
        return torch.nonzero(~self.mask).flatten()

    @property
    def clamped_indices(self) -> torch.Tensor:
        return torch.nonzero(self.mask).flatten()

    def key(self) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
        """Hashable identity used to merge duplicate patterns."""
        return tuple(self.clamped_indices.tolist()), tuple(int(v) for v in self.values[self.mask].tolist())


@dataclass(frozen=True)
class Topology:
    """Graph structure of a Boltzmann machine and the roles of its nodes.

    Edges are unordered 0-based pairs (i < j). Every node carries a bias.
    """

    n_nodes: int
    edges: Tuple[Tuple[int, int], ...]
    visible: Tuple[int, ...]
    grid_shape: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.n_nodes < 1:
            raise ValueError(f"A topology needs at least one node, received n_nodes={self.n_nodes}")
        edges = tuple(sorted({(min(i, j), max(i, j)) for i, j in self.edges}))
        for i, j in edges:
            if i == j or not (0 <= i < self.n_nodes and 0 <= j < self.n_nodes):
                raise ValueError(f"Invalid edge ({i}, {j}) for {self.n_nodes} nodes.")
        visible = tuple(self.visible)
        if len(set(visible)) != len(visible) or any(not 0 <= v < self.n_nodes for v in visible):
            raise ValueError(f"Invalid visible node indices: {visible}")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "visible", visible)

    @classmethod
    def fully_connected(cls, n_nodes: int, n_visible: Optional[int] = None) -> "Topology":
        """Complete graph; the first `n_visible` nodes are visible (all of them by default)."""
        n_visible = n_nodes if n_visible is None else n_visible
        edges = tuple((i, j) for i in range(n_nodes) for j in range(i + 1, n_nodes))
        return cls(n_nodes=n_nodes, edges=edges, visible=tuple(range(n_visible)))

    @property
    def hidden(self) -> Tuple[int, ...]:
        visible = set(self.visible)
        return tuple(i for i in range(self.n_nodes) if i not in visible)

    @property
    def adjacency(self) -> torch.Tensor:
        adjacency = torch.zeros(self.n_nodes, self.n_nodes, dtype=torch.bool)
        if self.edges:
            index = torch.as_tensor(self.edges, dtype=torch.long)
            adjacency[index[:, 0], index[:, 1]] = True
            adjacency[index[:, 1], index[:, 0]] = True
        return adjacency

    def clamp(self, values: Sequence[float]) -> ClampPattern:
        return ClampPattern.from_visible(self.n_nodes, self.visible, values)


@dataclass(frozen=True, eq=False)
class Network:
    """Symmetric couplings, biases and the adjacency structure that permits couplings.

    Args:
        weights (torch.Tensor): L x L symmetric matrix with zero diagonal.
        biases (torch.Tensor): Length-L bias vector (the couplings to the s_0 = 1 pseudo-node).
        adjacency (torch.Tensor): L x L symmetric boolean matrix of permitted couplings.
    """

    weights: torch.Tensor
    biases: torch.Tensor
    adjacency: torch.Tensor

    def __post_init__(self):
        weights = _as_tensor(self.weights, "weights")
        biases = _as_tensor(self.biases, "biases")
        adjacency = torch.as_tensor(self.adjacency, dtype=torch.bool)
        n = biases.shape[0] if biases.ndim == 1 else -1
        if n < 0 or weights.shape != (n, n) or adjacency.shape != (n, n):
            raise ValueError(
                f"Inconsistent shapes: weights {tuple(weights.shape)}, biases {tuple(biases.shape)}, adjacency {tuple(adjacency.shape)}"
            )
        if not torch.equal(weights, weights.T):
            raise ValueError("`weights` must be symmetric.")
        if not torch.equal(adjacency, adjacency.T) or adjacency.diagonal().any():
            raise ValueError("`adjacency` must be symmetric with an empty diagonal.")
        if (weights.diagonal() != 0).any():
            raise ValueError("`weights` must have a zero diagonal.")
        if (weights[~adjacency] != 0).any():
            raise ValueError("`weights` must be zero for every pair that is not in `adjacency`.")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)
        object.__setattr__(self, "adjacency", adjacency)

    @property
    def n_nodes(self) -> int:
        return self.biases.shape[0]

    @property
    def n_parameters(self) -> int:
        """Independent parameters: one per edge plus one bias per node."""
        return int(self.adjacency.triu(1).sum()) + self.n_nodes

    @classmethod
    def from_edges(
        cls,
        n_nodes: int,
        edges: Iterable[Tuple[int, int, float]],
        biases: Optional[Sequence[float]] = None,
    ) -> "Network":
        """Build a network from 0-based `(i, j, w)` triples."""
        weights = torch.zeros(n_nodes, n_nodes, dtype=DTYPE)
        adjacency = torch.zeros(n_nodes, n_nodes, dtype=torch.bool)
        for i, j, w in edges:
            i, j = int(i), int(j)
            if i == j or not (0 <= i < n_nodes and 0 <= j < n_nodes):
                raise ValueError(f"Invalid edge ({i}, {j}) for {n_nodes} nodes.")
            weights[i, j] = weights[j, i] = float(w)
            adjacency[i, j] = adjacency[j, i] = True
        if biases is None:
            biases = torch.zeros(n_nodes, dtype=DTYPE)
        return cls(weights, biases, adjacency)

    @classmethod
    def fully_connected(cls, weights: Any, biases: Any) -> "Network":
        biases = _as_tensor(biases, "biases")
        n = biases.shape[0]
        adjacency = ~torch.eye(n, dtype=torch.bool)
        return cls(weights, biases, adjacency)

    @classmethod
    def zeros(cls, topology: Topology) -> "Network":
        n = topology.n_nodes
        return cls(torch.zeros(n, n, dtype=DTYPE), torch.zeros(n, dtype=DTYPE), topology.adjacency)

    def augmented(self) -> torch.Tensor:
        """(L+1) x (L+1) parameter matrix with the biases in row/column 0."""
        n = self.n_nodes
        params = torch.zeros(n + 1, n + 1, dtype=DTYPE)
        params[1:, 1:] = self.weights
        params[0, 1:] = self.biases
        params[1:, 0] = self.biases
        return params

    def augmented_mask(self) -> torch.Tensor:
        """Entries of the augmented matrix that are free parameters."""
        n = self.n_nodes
        mask = torch.zeros(n + 1, n + 1, dtype=torch.bool)
        mask[1:, 1:] = self.adjacency
        mask[0, 1:] = True
        mask[1:, 0] = True
        return mask

    @classmethod
    def from_augmented(cls, params: torch.Tensor, adjacency: torch.Tensor) -> "Network":
        """Inverse of `augmented`; the upper triangle is authoritative and off-adjacency entries are zeroed."""
        params = _as_tensor(params, "params")
        adjacency = torch.as_tensor(adjacency, dtype=torch.bool)
        upper = torch.triu(params[1:, 1:], diagonal=1) * adjacency
        return cls(upper + upper.T, params[0, 1:].clone(), adjacency)

    def scaled(self, factor: float) -> "Network":
        return Network(self.weights * factor, self.biases * factor, self.adjacency)

    def to_dict(self) -> Dict[str, Any]:
        """Structured form with 1-based node indices; index 0 is the bias pseudo-node and never appears in edges."""
        index = torch.nonzero(self.adjacency.triu(1)).tolist()
        return {
            "L": self.n_nodes,
            "edges": [[i + 1, j + 1, float(self.weights[i, j])] for i, j in index],
            "biases": [float(b) for b in self.biases],
        }

    @classmethod
    def from_dict(cls, network_dict: Dict[str, Any]) -> "Network":
        try:
            n = int(network_dict["L"])
            edges = network_dict["edges"]
            biases = network_dict["biases"]
        except KeyError as exc:
            raise ValueError(f"Network description is missing the field {exc}") from exc
        if len(biases) != n:
            raise ValueError(f"Expected {n} biases, received {len(biases)}")
        for edge in edges:
            if len(edge) != 3 or int(edge[0]) < 1 or int(edge[1]) < 1:
                raise ValueError(f"Edges are 1-based `[i, j, w]` triples, received {edge}")
        return cls.from_edges(n, [(int(i) - 1, int(j) - 1, float(w)) for i, j, w in edges], biases)

    def to_json_string(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_json_string())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Network":
        return cls.from_dict(json.loads(Path(path).read_text()))


def spin_energies(states: torch.Tensor, weights: torch.Tensor, biases: torch.Tensor) -> torch.Tensor:
    """Energies of a batch of configurations (rows of `states`)."""
    return -(0.5 * ((states @ weights) * states).sum(-1) + states @ biases)


def energy(net: Network, s: SpinLike) -> float:
    """E(S) = -sum_i { sum_{j>i} w_ij s_i s_j + b_i s_i }."""
    states = SpinConfig.from_any(s).states
    if states.shape[0] != net.n_nodes:
        raise ValueError(f"Configuration has length {states.shape[0]} but the network has {net.n_nodes} nodes.")
    return float(spin_energies(states[None, :], net.weights, net.biases)[0])
