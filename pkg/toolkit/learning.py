# Copyright contributors to the Boltzmann mixtures project
#
"""Maximum-likelihood learning of Boltzmann machines

Each iteration runs a generalized E-step (clamped inference per distinct pattern and
free-phase inference by the configured engine) followed by a gradient ascent M-step
on the permitted couplings and the biases.
"""

import enum
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Union

import pandas as pd
import torch
from tqdm import tqdm

from model.enumeration import (
    ENUMERATION_LIMIT,
    check_enumerable,
    clamped_log_partition,
    exact_pair_correlations,
    kl_divergence_discrete,
    log_partition_function,
)
from model.model import DTYPE, ClampPattern, Network, Topology, validate_temperature
from utils.data_preprocessing import deduplicate_patterns

from .callbacks import TrainingCallback
from .dataset import PatternSet
from .meanfield import (
    AnnealSchedule,
    FixedPointSettings,
    MeanFieldParams,
    clamped_correlations,
    mf_anneal,
    mf_clamped_objective,
    mf_free_objective,
    mf_pair_correlations,
)
from .mixture import (
    DEFAULT_UPDATE_ORDER,
    MixtureParams,
    UpdateStep,
    mixture_free_bound,
    mixture_pair_correlations,
    optimize_mixture,
)
from .util import make_generator, to_serializable, weighted_average


logger = logging.getLogger(__name__)

FreePhaseParams = Union[MeanFieldParams, MixtureParams]


class Engine(enum.Enum):
    """`Enum` for the free-phase inference engines."""

    EXACT = "exact"
    MEANFIELD = "meanfield"
    MIXTURE = "mixture"


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run.

    Args:
        engine (str): One of the `Engine` values.
        n_components (int): Mixture size; only used by the mixture engine.
        learning_rate (float): Step size applied to the pattern-averaged gradient.
        n_iterations (int): Number of E/M iterations.
        anneal (AnnealSchedule): Temperatures for the free phase (and the clamped phase when
            `anneal_clamped` is set).
        init_weight_std (float): Standard deviation of the Gaussian initial parameters.
        fixed_point (FixedPointSettings): Stopping rule of every inner solve.
        seed (int): Seed of the run's generator.
        anneal_clamped (bool): Anneal the clamped phase too.
        carry_over_free_phase (bool): Warm-start the free phase from the previous iteration instead
            of re-initializing it. A warm-started free phase is solved at T = 1 without annealing.
        update_order (tuple): Block order of the mixture coordinate descent.
    """

    engine: str = Engine.MEANFIELD.value
    n_components: int = 1
    learning_rate: float = 0.25
    n_iterations: int = 200
    anneal: AnnealSchedule = field(default_factory=AnnealSchedule.none)
    init_weight_std: float = 0.1
    fixed_point: FixedPointSettings = field(default_factory=FixedPointSettings)
    seed: int = 0
    anneal_clamped: bool = False
    carry_over_free_phase: bool = False
    update_order: Sequence[str] = DEFAULT_UPDATE_ORDER

    def __post_init__(self):
        Engine(self.engine)
        if self.n_components < 1:
            raise ValueError(f"`n_components` must be at least 1, received {self.n_components}")
        if not self.learning_rate > 0:
            raise ValueError(f"`learning_rate` must be positive, received {self.learning_rate}")
        if self.n_iterations < 1:
            raise ValueError(f"`n_iterations` must be at least 1, received {self.n_iterations}")
        if self.init_weight_std < 0:
            raise ValueError(f"`init_weight_std` must be non-negative, received {self.init_weight_std}")
        object.__setattr__(self, "update_order", tuple(UpdateStep(s).value for s in self.update_order))

    @property
    def engine_name(self) -> str:
        """Engine label used in result tables, e.g. `mixture(2)`."""
        if self.engine == Engine.MIXTURE.value:
            return f"{self.engine}({self.n_components})"
        return self.engine

    def to_dict(self) -> Dict[str, Any]:
        return {
            "engine": self.engine,
            "n_components": self.n_components,
            "learning_rate": self.learning_rate,
            "n_iterations": self.n_iterations,
            "anneal": list(self.anneal.temperatures),
            "init_weight_std": self.init_weight_std,
            "fixed_point": self.fixed_point.to_dict(),
            "seed": self.seed,
            "anneal_clamped": self.anneal_clamped,
            "carry_over_free_phase": self.carry_over_free_phase,
            "update_order": list(self.update_order),
        }

    @classmethod
    def from_dict(cls, config_dict: Dict[str, Any]) -> "TrainConfig":
        config_dict = dict(config_dict)
        if "anneal" in config_dict:
            config_dict["anneal"] = AnnealSchedule(tuple(config_dict["anneal"]))
        if "fixed_point" in config_dict:
            config_dict["fixed_point"] = FixedPointSettings.from_dict(config_dict["fixed_point"])
        return cls(**config_dict)


@dataclass
class EStepResult:
    """Output of one E-step.

    For the exact engine `clamped` and `free_phase` are None and the correlations and
    objectives are exact (clamped log partition functions and -ln Z).
    """

    clamped_correlations: torch.Tensor
    free_correlations: torch.Tensor
    clamped_objectives: List[float]
    free_objective: float
    clamped: Optional[List[MeanFieldParams]] = None
    free_phase: Optional[FreePhaseParams] = None
    clamped_converged: bool = True
    free_converged: bool = True
    free_sweeps: int = 0
    floor_hits: int = 0


@dataclass
class TrainingState:
    iteration: int
    network: Network
    config: TrainConfig
    last_row: Optional[Dict[str, Any]] = None


def init_network(topology: Topology, std: float, seed: Union[int, torch.Generator]) -> Network:
    """Zero-mean Gaussian couplings on every edge and Gaussian biases, edges drawn first."""
    if std < 0:
        raise ValueError(f"`std` must be non-negative, received {std}")
    generator = make_generator(seed)
    edge_weights = torch.randn(len(topology.edges), generator=generator, dtype=DTYPE) * std
    biases = torch.randn(topology.n_nodes, generator=generator, dtype=DTYPE) * std
    edges = [(i, j, float(w)) for (i, j), w in zip(topology.edges, edge_weights)]
    return Network.from_edges(topology.n_nodes, edges, biases)


def _clamped_phase(net, patterns, config, generator, weights):
    schedule = config.anneal if config.anneal_clamped else AnnealSchedule.none()
    clamped = []
    objectives = []
    converged = True
    for clamp in patterns:
        init = MeanFieldParams.random(net.n_nodes, generator, clamp)
        result = mf_anneal(net, clamp, schedule, init, config.fixed_point)
        clamped.append(result.params)
        objectives.append(mf_clamped_objective(net, result.params))
        converged = converged and result.converged
    return clamped, objectives, converged, clamped_correlations(clamped, weights)


def e_step(
    net: Network,
    patterns: Sequence[ClampPattern],
    config: TrainConfig,
    generator: torch.Generator,
    weights: Optional[Sequence[float]] = None,
    free_init: Optional[FreePhaseParams] = None,
) -> EStepResult:
    """Clamped inference for every pattern, then free-phase inference by the configured engine.

    `free_init` is only used when the config carries the free phase over between iterations.
    """
    if not patterns:
        raise ValueError("At least one pattern is required.")
    for clamp in patterns:
        if clamp.n_nodes != net.n_nodes:
            raise ValueError(f"Clamp pattern has {clamp.n_nodes} nodes but the network has {net.n_nodes}.")
    engine = Engine(config.engine)

    if engine == Engine.EXACT:
        check_enumerable(net.n_nodes)
        return EStepResult(
            clamped_correlations=weighted_average([exact_pair_correlations(net, 1.0, c) for c in patterns], weights),
            free_correlations=exact_pair_correlations(net),
            clamped_objectives=[clamped_log_partition(net, c) for c in patterns],
            free_objective=-log_partition_function(net),
        )

    clamped, clamped_objectives, clamped_converged, clamped_corr = _clamped_phase(
        net, patterns, config, generator, weights
    )
    warm = free_init if config.carry_over_free_phase else None
    # warm starts skip the anneal
    free_schedule = config.anneal if warm is None else AnnealSchedule.none()

    if engine == Engine.MEANFIELD:
        init = warm if warm is not None else MeanFieldParams.random(net.n_nodes, generator)
        result = mf_anneal(net, None, free_schedule, init, config.fixed_point)
        return EStepResult(
            clamped_correlations=clamped_corr,
            free_correlations=mf_pair_correlations(result.params),
            clamped_objectives=clamped_objectives,
            free_objective=mf_free_objective(net, result.params),
            clamped=clamped,
            free_phase=result.params,
            clamped_converged=clamped_converged,
            free_converged=result.converged,
            free_sweeps=result.n_sweeps,
        )

    result = optimize_mixture(
        net,
        free_schedule,
        n_components=config.n_components,
        init=warm,
        settings=config.fixed_point,
        generator=generator,
        update_order=config.update_order,
    )
    previous_hits = warm.floor_hits if warm is not None else 0
    return EStepResult(
        clamped_correlations=clamped_corr,
        free_correlations=mixture_pair_correlations(result.params),
        clamped_objectives=clamped_objectives,
        free_objective=mixture_free_bound(result.params, net).total,
        clamped=clamped,
        free_phase=result.params,
        clamped_converged=clamped_converged,
        free_converged=result.converged,
        free_sweeps=result.n_cycles,
        floor_hits=result.params.floor_hits - previous_hits,
    )


def assemble_gradient(result: EStepResult) -> torch.Tensor:
    """Clamped minus free correlations, bias in row/column 0."""
    return result.clamped_correlations - result.free_correlations


def m_step(net: Network, gradient: torch.Tensor, learning_rate: float) -> Network:
    """w <- w + learning_rate * gradient on the permitted couplings and the biases."""
    if not learning_rate > 0:
        raise ValueError(f"`learning_rate` must be positive, received {learning_rate}")
    gradient = torch.as_tensor(gradient, dtype=DTYPE)
    n = net.n_nodes
    if gradient.shape != (n + 1, n + 1):
        raise ValueError(f"Expected a gradient of shape {(n + 1, n + 1)}, received {tuple(gradient.shape)}")
    params = net.augmented() + learning_rate * gradient * net.augmented_mask()
    return Network.from_augmented(params, net.adjacency)


def model_visible_kl(
    net: Network,
    patterns: Sequence[ClampPattern],
    T: float = 1.0,
    weights: Optional[Sequence[float]] = None,
) -> float:
    """KL(empirical distribution of the visible patterns || model marginal P(V)).

    Only the data support contributes, so P(V) is needed at the observed patterns only;
    the model mass on every other visible vector is lumped into one extra entry.
    Duplicate patterns are merged and `weights` act as multiplicities.
    """
    T = validate_temperature(T)
    if not patterns:
        raise ValueError("At least one pattern is required.")
    weights = [1.0] * len(patterns) if weights is None else [float(w) for w in weights]
    if len(weights) != len(patterns):
        raise ValueError(f"Got {len(weights)} weights for {len(patterns)} patterns.")
    counts: Dict[Any, float] = {}
    clamps: Dict[Any, ClampPattern] = {}
    for clamp, weight in zip(patterns, weights):
        key = clamp.key()
        counts[key] = counts.get(key, 0.0) + weight
        clamps.setdefault(key, clamp)
    empirical = torch.tensor(list(counts.values()), dtype=DTYPE)
    empirical = empirical / empirical.sum()
    log_z = log_partition_function(net, T)
    model = torch.tensor([math.exp(clamped_log_partition(net, c, T) - log_z) for c in clamps.values()], dtype=DTYPE)
    rest = (1.0 - model.sum()).clamp_min(0.0)
    empirical = torch.cat([empirical, torch.zeros(1, dtype=DTYPE)])
    model = torch.cat([model, rest[None]])
    return kl_divergence_discrete(empirical, model)


def parameter_columns(net: Network) -> Dict[str, float]:
    """w_i_j for every edge (i < j) and b_i for every node, 1-based."""
    columns = {}
    for i, j in torch.nonzero(net.adjacency.triu(1)).tolist():
        columns[f"w_{i + 1}_{j + 1}"] = float(net.weights[i, j])
    for i, b in enumerate(net.biases.tolist()):
        columns[f"b_{i + 1}"] = b
    return columns


METRIC_COLUMNS = (
    "iteration",
    "clamped_objective",
    "free_objective",
    "objective",
    "log_likelihood",
    "kl_divergence",
    "clamped_converged",
    "free_converged",
    "free_sweeps",
    "floor_hits",
)


@dataclass
class RunRecord:
    """Per-iteration trace of a training run.

    Row t (1-based) describes the network at the start of iteration t: its objectives,
    its exact log-likelihood per pattern and KL when the network is enumerable (NaN otherwise),
    convergence flags, and every weight and bias. `snapshots` holds the matching free-phase
    variational parameters; `final_network` is the network after the last update.
    """

    engine: str
    config: Dict[str, Any]
    rows: List[Dict[str, Any]] = field(default_factory=list)
    snapshots: List[Dict[str, Any]] = field(default_factory=list)
    final_network: Optional[Network] = None

    def __len__(self) -> int:
        return len(self.rows)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.rows)
        if frame.empty:
            return pd.DataFrame(columns=list(METRIC_COLUMNS))
        params = [c for c in frame.columns if c not in METRIC_COLUMNS]
        return frame[list(METRIC_COLUMNS) + params]

    def column(self, name: str) -> List[float]:
        return [row[name] for row in self.rows]

    def snapshots_dict(self) -> Dict[str, Any]:
        return to_serializable(
            {
                "engine": self.engine,
                "config": self.config,
                "snapshots": self.snapshots,
                "final_network": self.final_network.to_dict() if self.final_network is not None else None,
            }
        )

    def snapshots_json(self) -> str:
        return json.dumps(self.snapshots_dict(), indent=2, sort_keys=True) + "\n"


def _training_patterns(topology: Topology, patterns, multiplicities):
    if isinstance(patterns, PatternSet):
        vectors, multiplicities = patterns.patterns, patterns.multiplicities
    else:
        vectors = patterns
    unique, counts = deduplicate_patterns(vectors, multiplicities)
    if unique.shape[1] != len(topology.visible):
        raise ValueError(
            f"Patterns have {unique.shape[1]} entries but the topology has {len(topology.visible)} visible nodes."
        )
    return [topology.clamp(v) for v in unique], counts


def train(
    topology: Topology,
    patterns: Union[PatternSet, Sequence[Sequence[float]], torch.Tensor],
    config: TrainConfig,
    multiplicities: Optional[Sequence[int]] = None,
    callbacks: Sequence[TrainingCallback] = (),
    progress: bool = False,
) -> RunRecord:
    """Alternate E-steps and M-steps for `config.n_iterations` iterations.

    Identical visible vectors share one clamped inference, weighted by multiplicity, and
    the gradient is the multiplicity-weighted average over patterns. Non-converging inner
    solves are recorded in the rows, never raised.
    """
    clamps, counts = _training_patterns(topology, patterns, multiplicities)
    generator = make_generator(config.seed)
    net = init_network(topology, config.init_weight_std, generator)
    enumerable = topology.n_nodes <= ENUMERATION_LIMIT
    total = float(sum(counts))
    record = RunRecord(engine=config.engine_name, config=config.to_dict())
    state = TrainingState(iteration=0, network=net, config=config)
    free_phase = None

    logger.info(
        f"Training {config.engine_name} on {len(clamps)} distinct patterns ({int(total)} total) "
        f"for {config.n_iterations} iterations"
    )
    for callback in callbacks:
        callback.on_train_begin(state)

    for iteration in tqdm(range(config.n_iterations), desc=config.engine_name, disable=not progress):
        state.iteration = iteration
        state.network = net
        for callback in callbacks:
            callback.on_iteration_begin(state)

        result = e_step(net, clamps, config, generator, counts, free_phase)
        free_phase = result.free_phase
        clamped_objective = sum(w * o for w, o in zip(counts, result.clamped_objectives)) / total
        row = {
            "iteration": iteration + 1,
            "clamped_objective": clamped_objective,
            "free_objective": result.free_objective,
            "objective": clamped_objective + result.free_objective,
            "log_likelihood": float("nan"),
            "kl_divergence": float("nan"),
            "clamped_converged": result.clamped_converged,
            "free_converged": result.free_converged,
            "free_sweeps": result.free_sweeps,
            "floor_hits": result.floor_hits,
        }
        if enumerable:
            log_z = log_partition_function(net)
            row["log_likelihood"] = (
                sum(w * clamped_log_partition(net, c) for w, c in zip(counts, clamps)) / total - log_z
            )
            row["kl_divergence"] = model_visible_kl(net, clamps, 1.0, counts)
        row.update(parameter_columns(net))
        record.rows.append(row)
        record.snapshots.append(
            {
                "iteration": iteration + 1,
                "free_phase": free_phase.to_dict() if free_phase is not None else None,
                "clamped_means": [mu.means.tolist() for mu in result.clamped] if result.clamped else None,
            }
        )

        net = m_step(net, assemble_gradient(result), config.learning_rate)
        state.last_row = row
        state.network = net
        for callback in callbacks:
            callback.on_iteration_end(state)

    record.final_network = net
    for callback in callbacks:
        callback.on_train_end(state)
    return record
