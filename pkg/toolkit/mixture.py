# Copyright contributors to the Boltzmann mixtures project
#
"""Mixture of factorized distributions for the free phase

The free-phase bound of a mixture is the weighted component bounds minus the
mutual information between the component label and the state. The mutual
information is replaced by its tractable lower bound I_lambda built from
factorized smoothing tables R(s|l) and one positive scalar lambda per component,
so the total stays an upper bound on -ln Z.

Every coordinate update below is the exact optimum of the bound in the block it
updates with the other blocks held fixed, hence no update worsens the bound.
"""

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import torch

from model.enumeration import binary_states
from model.model import DTYPE, Network, SpinConfig, SpinLike, validate_temperature

from .meanfield import (
    AnnealSchedule,
    FixedPointSettings,
    augmented_outer,
    clamped_correlations,
    factorized_terms,
    init_means,
    local_fields,
    MeanFieldParams,
    relax,
    scaled_parameters,
)
from .util import has_converged


logger = logging.getLogger(__name__)

SMOOTHING_FLOOR = 1e-12
LAMBDA_FLOOR = 1e-300


class UpdateStep(enum.Enum):
    """`Enum` for the coordinate blocks of the mixture optimization."""

    MEANS = "means"
    SMOOTHING = "smoothing"
    LAMBDAS = "lambdas"
    ALPHAS = "alphas"


DEFAULT_UPDATE_ORDER = (
    UpdateStep.MEANS.value,
    UpdateStep.SMOOTHING.value,
    UpdateStep.LAMBDAS.value,
    UpdateStep.ALPHAS.value,
)


def marginals(means: torch.Tensor) -> torch.Tensor:
    """Factorized marginals q(s) stacked on the last axis as [q(-1), q(+1)]."""
    return torch.stack([(1 - means) / 2, (1 + means) / 2], dim=-1)


@dataclass(frozen=True, eq=False)
class MixtureParams:
    """Variational parameters of a mixture of factorized distributions.

    Args:
        alphas (torch.Tensor): Mixing weights, shape (K,), on the simplex.
        means (torch.Tensor): Component means, shape (K, L), in [-1, 1].
        smoothing (torch.Tensor): Factorized smoothing tables R_i(s|l), shape (K, L, 2) with s = -1 at
            index 0 and s = +1 at index 1; strictly positive.
        lambdas (torch.Tensor): Positive scalars, shape (K,).
        floor_hits (int): Running count of smoothing entries raised to the floor.
    """

    alphas: torch.Tensor
    means: torch.Tensor
    smoothing: torch.Tensor
    lambdas: torch.Tensor
    floor_hits: int = 0

    def __post_init__(self):
        alphas = torch.as_tensor(self.alphas, dtype=DTYPE)
        means = torch.as_tensor(self.means, dtype=DTYPE)
        smoothing = torch.as_tensor(self.smoothing, dtype=DTYPE)
        lambdas = torch.as_tensor(self.lambdas, dtype=DTYPE)
        k = alphas.shape[0] if alphas.ndim == 1 else -1
        if k < 1 or means.ndim != 2 or means.shape[0] != k:
            raise ValueError(f"Inconsistent component counts: alphas {tuple(alphas.shape)}, means {tuple(means.shape)}")
        if smoothing.shape != (k, means.shape[1], 2) or lambdas.shape != (k,):
            raise ValueError(
                f"Expected smoothing of shape {(k, means.shape[1], 2)} and lambdas of shape {(k,)}, "
                f"received {tuple(smoothing.shape)} and {tuple(lambdas.shape)}"
            )
        if torch.isnan(alphas).any() or (alphas < 0).any() or abs(float(alphas.sum()) - 1) > 1e-9:
            raise ValueError(f"`alphas` must be non-negative and sum to one, received {alphas.tolist()}")
        if torch.isnan(means).any() or (means.abs() > 1).any():
            raise ValueError("Every component mean must lie in [-1, 1].")
        if not (smoothing > 0).all() or not torch.isfinite(smoothing).all():
            raise ValueError("Smoothing tables must be finite and strictly positive.")
        if not (lambdas > 0).all() or not torch.isfinite(lambdas).all():
            raise ValueError("`lambdas` must be finite and strictly positive.")
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "smoothing", smoothing)
        object.__setattr__(self, "lambdas", lambdas)

    @property
    def n_components(self) -> int:
        return self.alphas.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.means.shape[1]

    def component_marginals(self) -> torch.Tensor:
        return marginals(self.means)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "alphas": self.alphas.tolist(),
            "means": self.means.tolist(),
            "smoothing": self.smoothing.tolist(),
            "lambdas": self.lambdas.tolist(),
            "floor_hits": self.floor_hits,
        }

    @classmethod
    def from_dict(cls, params_dict: Dict[str, Any]) -> "MixtureParams":
        return cls(
            alphas=params_dict["alphas"],
            means=params_dict["means"],
            smoothing=params_dict["smoothing"],
            lambdas=params_dict["lambdas"],
            floor_hits=int(params_dict.get("floor_hits", 0)),
        )


@dataclass(frozen=True)
class BoundBreakdown:
    """Pieces of the mixture free-phase bound: total = energy_term - entropy_term - mutual_info_lb."""

    energy_term: float
    entropy_term: float
    mutual_info_lb: float
    total: float

    def to_dict(self) -> Dict[str, float]:
        return {
            "energy_term": self.energy_term,
            "entropy_term": self.entropy_term,
            "mutual_info_lb": self.mutual_info_lb,
            "total": self.total,
        }


@dataclass
class MixtureResult:
    params: MixtureParams
    converged: bool
    n_cycles: int
    trace: List[Tuple[float, float]] = field(default_factory=list)


def _check_net(net: Network, params: MixtureParams) -> None:
    if params.n_nodes != net.n_nodes:
        raise ValueError(f"Mixture parameters have {params.n_nodes} nodes, the network has {net.n_nodes}.")


def _log_overlaps(smoothing: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """ln rho[l, k, i] with rho[l, k, i] = sum_s R_i(s|l) q_ki(s)."""
    return torch.log(torch.einsum("lis,kis->lki", smoothing, q))


def _log_alphas(params: MixtureParams) -> torch.Tensor:
    return torch.log(params.alphas)


def _log_component_overlaps(params: MixtureParams, log_rho: Optional[torch.Tensor] = None) -> torch.Tensor:
    if log_rho is None:
        log_rho = _log_overlaps(params.smoothing, params.component_marginals())
    return torch.logsumexp(_log_alphas(params)[None, :] + log_rho.sum(-1), dim=1)


def component_overlaps(params: MixtureParams) -> torch.Tensor:
    """pi_l = sum_S R(S|l) Q_mix(S) for every component, summed analytically over S."""
    return torch.exp(_log_component_overlaps(params))


def component_overlap(params: MixtureParams, l: int) -> float:
    if not 0 <= l < params.n_components:
        raise ValueError(f"Component index {l} out of range for {params.n_components} components.")
    return float(component_overlaps(params)[l])


def mix_prob(params: MixtureParams, s: SpinLike) -> float:
    """Q_mix(S) = sum_l alpha_l prod_i q_li(s_i)."""
    states = SpinConfig.from_any(s).states
    if states.shape[0] != params.n_nodes:
        raise ValueError(f"Configuration has length {states.shape[0]}, the mixture has {params.n_nodes} nodes.")
    factors = (1 + states[None, :] * params.means) / 2
    return float((params.alphas * factors.prod(-1)).sum())


def _enumerated_components(params: MixtureParams) -> Tuple[torch.Tensor, torch.Tensor]:
    """Q(S|l) for every configuration, shape (K, 2^L), and the configurations themselves."""
    states = binary_states(params.n_nodes)
    factors = (1 + states[None, :, :] * params.means[:, None, :]) / 2
    return factors.prod(-1), states


def mutual_info_exact(params: MixtureParams) -> float:
    """I(l, S) by enumeration of all configurations (diagnostic)."""
    q_components, _ = _enumerated_components(params)
    q_mix = params.alphas @ q_components
    weighted = params.alphas[:, None] * q_components
    return float((torch.xlogy(weighted, q_components) - torch.xlogy(weighted, q_mix[None, :])).sum())


def mutual_info_smoothed_exact(params: MixtureParams) -> float:
    """The mutual information rewritten with the smoothing tables, by enumeration.

    Equals `mutual_info_exact` for any positive smoothing tables.
    """
    q_components, states = _enumerated_components(params)
    q_mix = params.alphas @ q_components
    index = ((states + 1) / 2).long()
    log_r = torch.log(params.smoothing)
    log_r_states = torch.stack(
        [log_r[l].gather(1, index.T).sum(0) for l in range(params.n_components)]
    )
    weighted = params.alphas[:, None] * q_components
    first = (weighted * log_r_states).sum()
    second = -torch.xlogy(params.alphas, params.alphas).sum()
    third = (
        -first
        - torch.xlogy(weighted, q_mix[None, :]).sum()
        + torch.xlogy(weighted, params.alphas[:, None].expand_as(weighted)).sum()
        + torch.xlogy(weighted, q_components).sum()
    )
    return float(first + second + third)


def mixture_entropy_exact(params: MixtureParams) -> float:
    """H(Q_mix) by enumeration (diagnostic)."""
    q_components, _ = _enumerated_components(params)
    q_mix = params.alphas @ q_components
    return float(torch.special.entr(q_mix).sum())


def _smoothing_expectation(params: MixtureParams) -> torch.Tensor:
    """a_l = sum_i sum_s q_li(s) ln R_i(s|l)."""
    return torch.xlogy(params.component_marginals(), params.smoothing).sum((1, 2))


def mutual_info_lower_bound(params: MixtureParams) -> float:
    """I_lambda(l, S) <= I(l, S), every sum over configurations done in factorized form."""
    alphas, lambdas = params.alphas, params.lambdas
    overlaps = component_overlaps(params)
    value = (
        (alphas * _smoothing_expectation(params)).sum()
        - torch.xlogy(alphas, alphas).sum()
        - (lambdas * overlaps).sum()
        + torch.xlogy(alphas, lambdas).sum()
        + 1.0
    )
    return float(value)


def update_lambdas(params: MixtureParams) -> MixtureParams:
    """lambda_l = alpha_l / pi_l, the maximizer of I_lambda in lambda."""
    lambdas = torch.exp(_log_alphas(params) - _log_component_overlaps(params)).clamp_min(LAMBDA_FLOOR)
    return replace(params, lambdas=lambdas)


def update_smoothing(params: MixtureParams) -> MixtureParams:
    """Re-estimate the smoothing tables node by node.

    With everything except R_i(.|l) fixed, I_lambda is
    alpha_l sum_s q_li(s) ln R_i(s|l) - lambda_l sum_s R_i(s|l) D_li(s) + const, with
    D_li(s) = sum_k alpha_k q_ki(s) prod_{j != i} rho_lkj, whose maximizer is
    R_i(s|l) = alpha_l q_li(s) / (lambda_l D_li(s)).
    """
    q = params.component_marginals()
    log_q = torch.log(q)
    log_alphas = _log_alphas(params)
    log_lambdas = torch.log(params.lambdas)
    smoothing = params.smoothing.clone()
    log_rho = _log_overlaps(smoothing, q)
    floor_hits = 0

    for i in range(params.n_nodes):
        log_rest = log_rho.sum(-1) - log_rho[:, :, i]
        log_d = torch.logsumexp(log_alphas[None, :, None] + log_q[None, :, i, :] + log_rest[:, :, None], dim=1)
        log_r = log_alphas[:, None] + log_q[:, i, :] - log_lambdas[:, None] - log_d
        table = torch.exp(torch.nan_to_num(log_r, nan=float("-inf")))
        low = ~(table >= SMOOTHING_FLOOR)
        floor_hits += int(low.sum())
        smoothing[:, i, :] = torch.where(low, torch.full_like(table, SMOOTHING_FLOOR), table)
        log_rho[:, :, i] = torch.log(smoothing[:, i, :] @ q[:, i, :].T)

    if floor_hits:
        logger.debug(f"{floor_hits} smoothing entries raised to the floor {SMOOTHING_FLOOR}")
    return replace(params, smoothing=smoothing, floor_hits=params.floor_hits + floor_hits)


def update_alphas(params: MixtureParams, net: Network, T: float = 1.0) -> MixtureParams:
    """Minimize the total bound over the simplex with means, tables and lambdas fixed.

    For fixed lambda the bound is sum_k alpha_k c_k + sum_k alpha_k ln alpha_k - 1 with
    c_k = F_k - a_k - ln lambda_k + sum_l lambda_l prod_i rho_lki, so alpha = softmax(-c).
    """
    _check_net(net, params)
    energy, entropy = factorized_terms(params.means, net, T)
    log_rho = _log_overlaps(params.smoothing, params.component_marginals())
    coupling = torch.exp(torch.log(params.lambdas)[:, None] + log_rho.sum(-1)).sum(0)
    costs = energy - entropy - _smoothing_expectation(params) - torch.log(params.lambdas) + coupling
    return replace(params, alphas=torch.softmax(-costs, dim=0))


def update_component_means(
    params: MixtureParams, net: Network, T: float = 1.0, damping: float = 0.0
) -> MixtureParams:
    """One sequential sweep over the nodes, all components at once.

    In m_li the bound is alpha_l [-m h_li - H((1 + m)/2)] + const, where h_li is the
    mean-field local field plus the forcing of the information terms:
    (1/2) ln(R_i(+|l)/R_i(-|l)) - sum_l' lambda_l' (R_i(+|l') - R_i(-|l'))/2 prod_{j != i} rho_l'lj.
    The minimizer is m_li = tanh(h_li).
    """
    _check_net(net, params)
    weights, biases = scaled_parameters(net, T)
    smoothing = params.smoothing
    log_smoothing = torch.log(smoothing)
    log_lambdas = torch.log(params.lambdas)
    active = params.alphas > 0
    means = params.means.clone()
    q = marginals(means)
    log_rho = _log_overlaps(smoothing, q)

    for i in range(params.n_nodes):
        log_rest = log_rho.sum(-1) - log_rho[:, :, i]
        slope = 0.5 * (smoothing[:, i, 1] - smoothing[:, i, 0])
        forcing = 0.5 * (log_smoothing[:, i, 1] - log_smoothing[:, i, 0]) - (
            slope[:, None] * torch.exp(log_lambdas[:, None] + log_rest)
        ).sum(0)
        target = torch.tanh(local_fields(means, i, weights, biases) + forcing)
        relax(means, i, torch.where(active, target, means[:, i]), damping)
        q[:, i, :] = marginals(means[:, i])
        log_rho[:, :, i] = torch.log(smoothing[:, i, :] @ q[:, i, :].T)

    return replace(params, means=means)


def mixture_free_bound(params: MixtureParams, net: Network, T: float = 1.0) -> BoundBreakdown:
    """sum_l alpha_l [E_Ql[E/T] - H(Q_l)] - I_lambda, an upper bound on -ln Z(T)."""
    _check_net(net, params)
    energy, entropy = factorized_terms(params.means, net, T)
    energy_term = float((params.alphas * energy).sum())
    entropy_term = float((params.alphas * entropy).sum())
    mutual_info_lb = mutual_info_lower_bound(params)
    return BoundBreakdown(
        energy_term=energy_term,
        entropy_term=entropy_term,
        mutual_info_lb=mutual_info_lb,
        total=energy_term - entropy_term - mutual_info_lb,
    )


def init_mixture(n_nodes: int, n_components: int, generator: torch.Generator) -> MixtureParams:
    """Uniform weights, small random means per component, tables at each component's own marginals."""
    if n_components < 1:
        raise ValueError(f"`n_components` must be at least 1, received {n_components}")
    means = torch.stack([init_means(n_nodes, generator) for _ in range(n_components)])
    params = MixtureParams(
        alphas=torch.full((n_components,), 1.0 / n_components, dtype=DTYPE),
        means=means,
        smoothing=marginals(means),
        lambdas=torch.ones(n_components, dtype=DTYPE),
    )
    return update_lambdas(params)


def _apply_step(step: str, params: MixtureParams, net: Network, T: float, settings: FixedPointSettings):
    step = UpdateStep(step)
    if step == UpdateStep.MEANS:
        return update_component_means(params, net, T, settings.damping)
    if step == UpdateStep.SMOOTHING:
        return update_smoothing(params)
    if step == UpdateStep.LAMBDAS:
        return update_lambdas(params)
    return update_alphas(params, net, T)


def optimize_mixture(
    net: Network,
    schedule: Union[AnnealSchedule, float] = 1.0,
    n_components: Optional[int] = None,
    init: Optional[MixtureParams] = None,
    settings: Optional[FixedPointSettings] = None,
    generator: Optional[torch.Generator] = None,
    update_order: Sequence[str] = DEFAULT_UPDATE_ORDER,
) -> MixtureResult:
    """Coordinate descent on the mixture bound, annealed over the schedule with warm starts.

    The smoothing tables and lambdas are first fitted to the initial means. Each cycle
    runs one update of every block in `update_order`; a temperature stage ends when the
    relative change of the bound is at most `rel_tol` or after `max_sweeps` cycles.
    """
    settings = settings or FixedPointSettings()
    if isinstance(schedule, AnnealSchedule):
        temperatures = schedule.temperatures
    else:
        temperatures = (validate_temperature(schedule),)
    if init is None:
        if n_components is None or generator is None:
            raise ValueError("Either `init` or both `n_components` and `generator` are required.")
        init = init_mixture(net.n_nodes, n_components, generator)
    _check_net(net, init)
    order = [UpdateStep(step).value for step in update_order]

    params = update_lambdas(update_smoothing(init))
    trace = []
    converged = False
    n_cycles = 0
    for T in temperatures:
        previous = mixture_free_bound(params, net, T).total
        converged = False
        for _ in range(settings.max_sweeps):
            for step in order:
                params = _apply_step(step, params, net, T, settings)
            n_cycles += 1
            current = mixture_free_bound(params, net, T).total
            trace.append((T, current))
            if has_converged(previous, current, settings.rel_tol):
                converged = True
                break
            previous = current
        if not converged:
            logger.debug(f"Mixture bound did not converge at T={T} after {settings.max_sweeps} cycles")
    return MixtureResult(params=params, converged=converged, n_cycles=n_cycles, trace=trace)


def mixture_pair_correlations(params: MixtureParams) -> torch.Tensor:
    """sum_l alpha_l m_li m_lj with m_l0 = 1 and a unit diagonal."""
    correlations = sum(float(a) * augmented_outer(m) for a, m in zip(params.alphas, params.means))
    correlations.fill_diagonal_(1.0)
    return correlations


def mixture_learning_gradient(
    mu_per_pattern: Sequence[MeanFieldParams],
    params: MixtureParams,
    weights: Optional[Sequence[float]] = None,
) -> torch.Tensor:
    """Pattern average of mu_i mu_j minus sum_l alpha_l m_li m_lj, bias in column 0."""
    return clamped_correlations(mu_per_pattern, weights) - mixture_pair_correlations(params)
