# Copyright contributors to the Boltzmann mixtures project
#
"""Naive mean field theory: factorized distributions, bounds, fixed points and annealing"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from model.model import DTYPE, ClampPattern, Network, validate_temperature

from .util import has_converged, weighted_average


logger = logging.getLogger(__name__)

INIT_SCALE = 0.1


def binary_entropy(p: Union[float, torch.Tensor]) -> Union[float, torch.Tensor]:
    """-p ln p - (1-p) ln(1-p) with 0 ln 0 = 0.

    Accepts a scalar or a tensor; a scalar input returns a float.
    """
    is_scalar = not isinstance(p, torch.Tensor)
    p = torch.as_tensor(p, dtype=DTYPE)
    if ((p < 0) | (p > 1) | torch.isnan(p)).any():
        raise ValueError(f"Binary entropy is defined on [0, 1], received {p.tolist()}")
    h = torch.special.entr(p) + torch.special.entr(1 - p)
    return float(h) if is_scalar else h


def mf_marginal_prob(mean: Union[float, torch.Tensor], s: Union[int, torch.Tensor]) -> Union[float, torch.Tensor]:
    """Probability of state `s` under a factorized unit with the given mean."""
    if isinstance(mean, torch.Tensor) or isinstance(s, torch.Tensor):
        return (1 + torch.as_tensor(s, dtype=DTYPE) * mean) / 2
    if s not in (-1, 1):
        raise ValueError(f"`s` must be -1 or +1, received {s}")
    return (1 + s * mean) / 2


def init_means(n_nodes: int, generator: torch.Generator, scale: float = INIT_SCALE) -> torch.Tensor:
    """Means drawn uniformly from (-scale, scale)."""
    return (2 * torch.rand(n_nodes, generator=generator, dtype=DTYPE) - 1) * scale


@dataclass(frozen=True, eq=False)
class MeanFieldParams:
    """Per-node means of a factorized distribution.

    Serves both as the clamped-phase parameters (with `clamp`) and the free-phase ones.
    """

    means: torch.Tensor
    clamp: Optional[ClampPattern] = None

    def __post_init__(self):
        means = torch.as_tensor(self.means, dtype=DTYPE)
        if means.ndim != 1:
            raise ValueError(f"`means` should be a vector, received shape {tuple(means.shape)}")
        if torch.isnan(means).any() or (means.abs() > 1).any():
            raise ValueError("Every mean must lie in [-1, 1].")
        if self.clamp is not None:
            if self.clamp.n_nodes != means.shape[0]:
                raise ValueError(f"Clamp pattern has {self.clamp.n_nodes} nodes, means have {means.shape[0]}.")
            if not torch.equal(means[self.clamp.mask], self.clamp.values[self.clamp.mask]):
                raise ValueError("Clamped means must equal their observed values.")
        object.__setattr__(self, "means", means)

    @property
    def n_nodes(self) -> int:
        return self.means.shape[0]

    @property
    def free_indices(self) -> List[int]:
        if self.clamp is None:
            return list(range(self.n_nodes))
        return self.clamp.free_indices.tolist()

    @classmethod
    def clamped(cls, means: torch.Tensor, clamp: Optional[ClampPattern]) -> "MeanFieldParams":
        """Overwrite the clamped entries of `means` with the observed values."""
        means = torch.as_tensor(means, dtype=DTYPE).clone()
        if clamp is not None:
            means[clamp.mask] = clamp.values[clamp.mask]
        return cls(means, clamp)

    @classmethod
    def random(
        cls, n_nodes: int, generator: torch.Generator, clamp: Optional[ClampPattern] = None
    ) -> "MeanFieldParams":
        return cls.clamped(init_means(n_nodes, generator), clamp)

    def to_dict(self) -> Dict[str, Any]:
        return {"means": self.means.tolist()}


@dataclass(frozen=True)
class AnnealSchedule:
    """Strictly decreasing temperatures ending at T = 1."""

    temperatures: Tuple[float, ...] = (1.0,)

    def __post_init__(self):
        temperatures = tuple(float(t) for t in self.temperatures)
        if not temperatures:
            raise ValueError("An annealing schedule needs at least one temperature.")
        if any(t <= 0 for t in temperatures):
            raise ValueError(f"Temperatures must be positive, received {temperatures}")
        if any(a <= b for a, b in zip(temperatures, temperatures[1:])):
            raise ValueError(f"Temperatures must be strictly decreasing, received {temperatures}")
        if temperatures[-1] != 1.0:
            raise ValueError(f"An annealing schedule must end at T = 1, received {temperatures}")
        object.__setattr__(self, "temperatures", temperatures)

    @classmethod
    def none(cls) -> "AnnealSchedule":
        return cls((1.0,))

    @classmethod
    def geometric(cls, start: float, n_steps: int) -> "AnnealSchedule":
        """`n_steps` temperatures spaced geometrically from `start` down to 1, both included."""
        if n_steps < 1:
            raise ValueError(f"`n_steps` must be at least 1, received {n_steps}")
        if n_steps == 1:
            return cls.none()
        temperatures = [float(t) for t in np.geomspace(start, 1.0, n_steps)]
        temperatures[-1] = 1.0
        return cls(tuple(temperatures))

    def __iter__(self):
        return iter(self.temperatures)

    def __len__(self) -> int:
        return len(self.temperatures)


@dataclass(frozen=True)
class FixedPointSettings:
    """Stopping rule for iterative variational updates.

    Defaults: stop once the objective changes by no more than 0.01%, after at most 20 sweeps.
    """

    max_sweeps: int = 20
    rel_tol: float = 1e-4
    damping: float = 0.0

    def __post_init__(self):
        if self.max_sweeps < 1:
            raise ValueError(f"`max_sweeps` must be at least 1, received {self.max_sweeps}")
        if not self.rel_tol > 0:
            raise ValueError(f"`rel_tol` must be positive, received {self.rel_tol}")
        if not 0 <= self.damping < 1:
            raise ValueError(f"`damping` must lie in [0, 1), received {self.damping}")

    def to_dict(self) -> Dict[str, Any]:
        return {"max_sweeps": self.max_sweeps, "rel_tol": self.rel_tol, "damping": self.damping}

    @classmethod
    def from_dict(cls, settings_dict: Dict[str, Any]) -> "FixedPointSettings":
        return cls(**settings_dict)


@dataclass
class MeanFieldResult:
    params: MeanFieldParams
    converged: bool
    n_sweeps: int
    trace: List[Tuple[float, float]] = field(default_factory=list)


def scaled_parameters(net: Network, T: float) -> Tuple[torch.Tensor, torch.Tensor]:
    """Temperature absorbed into the couplings: (w/T, b/T)."""
    T = validate_temperature(T)
    return net.weights / T, net.biases / T


def local_fields(means: torch.Tensor, i: int, weights: torch.Tensor, biases: torch.Tensor) -> torch.Tensor:
    """sum_j w_ij m_j + b_i for every row of `means` (one row per factorized component)."""
    return means @ weights[:, i] + biases[i]


def relax(means: torch.Tensor, i: int, target: torch.Tensor, damping: float) -> None:
    if damping == 0:
        means[:, i] = target
    else:
        means[:, i] = (1 - damping) * target + damping * means[:, i]


def factorized_terms(means: torch.Tensor, net: Network, T: float) -> Tuple[torch.Tensor, torch.Tensor]:
    """E_Q[E]/T and H(Q) for each row of `means`."""
    weights, biases = scaled_parameters(net, T)
    energy = -(0.5 * ((means @ weights) * means).sum(-1) + means @ biases)
    entropy = binary_entropy((1 + means) / 2).sum(-1)
    return energy, entropy


def _check_net(net: Network, params: MeanFieldParams) -> None:
    if params.n_nodes != net.n_nodes:
        raise ValueError(f"Mean field parameters have {params.n_nodes} nodes, the network has {net.n_nodes}.")


def mf_free_objective(net: Network, m: MeanFieldParams, T: float = 1.0) -> float:
    """L_F(m) = E_Q[E/T] - H(Q), an upper bound on -ln Z(T)."""
    _check_net(net, m)
    energy, entropy = factorized_terms(m.means[None, :], net, T)
    return float(energy[0] - entropy[0])


def mf_clamped_objective(net: Network, mu: MeanFieldParams, T: float = 1.0) -> float:
    """L_C(mu) = -E_Q[E/T] + H(Q over the free nodes), a lower bound on ln sum_H exp(-E(H, V)/T)."""
    _check_net(net, mu)
    if mu.clamp is None:
        raise ValueError("The clamped objective needs parameters with a clamp pattern.")
    energy, _ = factorized_terms(mu.means[None, :], net, T)
    free = mu.clamp.free_indices
    entropy = binary_entropy((1 + mu.means[free]) / 2).sum()
    return float(-energy[0] + entropy)


def _sweep(means: torch.Tensor, free: Sequence[int], weights: torch.Tensor, biases: torch.Tensor, damping: float):
    for i in free:
        relax(means, i, torch.tanh(local_fields(means, i, weights, biases)), damping)


def mf_fixed_point(
    net: Network,
    clamp: Optional[ClampPattern],
    T: float,
    init: MeanFieldParams,
    settings: Optional[FixedPointSettings] = None,
) -> MeanFieldResult:
    """Sequential tanh fixed-point sweeps over the free nodes at temperature T.

    Stops when the relative change of the phase's objective is at most `rel_tol`
    or after `max_sweeps` sweeps; non-convergence is flagged, not raised.
    """
    settings = settings or FixedPointSettings()
    _check_net(net, init)
    params = MeanFieldParams.clamped(init.means, clamp)
    weights, biases = scaled_parameters(net, T)

    def objective(p: MeanFieldParams) -> float:
        if clamp is None:
            return mf_free_objective(net, p, T)
        return mf_clamped_objective(net, p, T)

    means = params.means.clone()[None, :]
    free = params.free_indices
    previous = objective(params)
    trace = []
    converged = False
    n_sweeps = 0
    for n_sweeps in range(1, settings.max_sweeps + 1):
        _sweep(means, free, weights, biases, settings.damping)
        params = MeanFieldParams(means[0].clone(), clamp)
        current = objective(params)
        trace.append((T, current))
        if has_converged(previous, current, settings.rel_tol):
            converged = True
            break
        previous = current

    if not converged:
        logger.debug(f"Mean field did not converge at T={T} after {n_sweeps} sweeps")
    return MeanFieldResult(params=params, converged=converged, n_sweeps=n_sweeps, trace=trace)


def mf_anneal(
    net: Network,
    clamp: Optional[ClampPattern],
    schedule: AnnealSchedule,
    init: MeanFieldParams,
    settings: Optional[FixedPointSettings] = None,
) -> MeanFieldResult:
    """Solve at each temperature of the schedule, warm-starting from the previous stage.

    Each stage applies the stopping rule on its own. The annealed T = 1 solution is only
    reliably at least as good as a direct T = 1 solve when the stages run to convergence,
    e.g. with `max_sweeps=2000, rel_tol=1e-14`; the default cap of 20 sweeps often stops
    the last stage early.
    """
    params = init
    trace = []
    n_sweeps = 0
    result = None
    for T in schedule:
        result = mf_fixed_point(net, clamp, T, params, settings)
        params = result.params
        trace.extend(result.trace)
        n_sweeps += result.n_sweeps
    return MeanFieldResult(params=params, converged=result.converged, n_sweeps=n_sweeps, trace=trace)


def augmented_outer(means: torch.Tensor) -> torch.Tensor:
    """Outer product of (1, m) with itself and a unit diagonal."""
    augmented = torch.cat([torch.ones(1, dtype=DTYPE), means])
    outer = torch.outer(augmented, augmented)
    outer.fill_diagonal_(1.0)
    return outer


def mf_pair_correlations(m: MeanFieldParams) -> torch.Tensor:
    return augmented_outer(m.means)


def clamped_correlations(
    mu_per_pattern: Sequence[MeanFieldParams], weights: Optional[Sequence[float]] = None
) -> torch.Tensor:
    """Pattern average of mu_i mu_j, bias in column 0."""
    if not mu_per_pattern:
        raise ValueError("At least one clamped solution is needed.")
    return weighted_average([mf_pair_correlations(mu) for mu in mu_per_pattern], weights)


def mf_learning_gradient(
    mu_per_pattern: Sequence[MeanFieldParams],
    m: MeanFieldParams,
    weights: Optional[Sequence[float]] = None,
) -> torch.Tensor:
    """Pattern average of mu_i mu_j minus m_i m_j, bias in column 0."""
    return clamped_correlations(mu_per_pattern, weights) - mf_pair_correlations(m)
