# Copyright contributors to the Boltzmann mixtures project
#
"""Experiment configuration, the benchmark and learning experiments, and result emission"""

import enum
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from model.enumeration import exact_pair_correlations
from model.model import DTYPE, Network, Topology

from .callbacks import ProgressCallback, TrackingCallback, TrainingCallback
from .dataset import gen_synthetic_images, image_topology, toy_pattern_set, toy_topology
from .learning import Engine, RunRecord, TrainConfig, train
from .meanfield import AnnealSchedule, FixedPointSettings
from .mixture import mixture_pair_correlations, optimize_mixture
from .util import flatten_dict, make_generator, to_serializable


logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MANIFEST_FILE = "manifest.json"

# difference histogram: 0.05-wide bins over [-1, 1] plus one outer bin on each side
HISTOGRAM_EDGES = np.concatenate([[-2.0], np.linspace(-1.0, 1.0, 41), [2.0]])

KL_TAIL = 100


class ConfigurationError(ValueError):
    """Raised for an invalid experiment configuration."""


class ExperimentId(enum.Enum):
    """`Enum` for the experiments that can be run from a configuration."""

    INFERENCE_BENCH = "inference-bench"
    TOY_LEARN = "toy-learn"
    IMAGE_LEARN = "image-learn"


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigurationError(message)


def _check_schedule(start: float, n_steps: int) -> None:
    try:
        AnnealSchedule.geometric(start, n_steps)
    except ValueError as exc:
        raise ConfigurationError(f"Invalid anneal schedule from T={start} in {n_steps} steps: {exc}") from exc


@dataclass(frozen=True)
class InferenceBenchConfig:
    """Random fully connected nets, mixture sizes swept against exact correlations."""

    n_nets: int = 100
    n_nodes: int = 10
    param_range: Tuple[float, float] = (-1.0, 1.0)
    component_counts: Tuple[int, ...] = tuple(range(1, 11))
    anneal_start: float = 60.0
    anneal_steps: int = 8

    def __post_init__(self):
        object.__setattr__(self, "param_range", tuple(float(v) for v in self.param_range))
        object.__setattr__(self, "component_counts", tuple(int(k) for k in self.component_counts))
        _require(self.n_nets >= 1, f"`n_nets` must be at least 1, received {self.n_nets}")
        _require(self.n_nodes >= 1, f"`n_nodes` must be at least 1, received {self.n_nodes}")
        _require(
            len(self.param_range) == 2 and self.param_range[0] <= self.param_range[1],
            f"`param_range` must be (low, high) with low <= high, received {self.param_range}",
        )
        _require(
            len(self.component_counts) > 0 and min(self.component_counts) >= 1,
            f"`component_counts` must be non-empty counts of at least 1, received {self.component_counts}",
        )
        _check_schedule(self.anneal_start, self.anneal_steps)

    @property
    def schedule(self) -> AnnealSchedule:
        return AnnealSchedule.geometric(self.anneal_start, self.anneal_steps)


@dataclass(frozen=True)
class ToyLearnConfig:
    """Two visible nodes, patterns (1, 1) twice and (-1, -1) once, no annealing.

    The mixture run warm-starts its free phase from the previous iteration when
    `mixture_carry_over` is set; mean field is always re-initialized.
    """

    n_iterations: int = 200
    learning_rate: float = 0.25
    init_weight_std: float = 0.1
    n_components: int = 2
    mixture_carry_over: bool = True

    def __post_init__(self):
        _require(self.n_iterations >= 1, f"`n_iterations` must be at least 1, received {self.n_iterations}")
        _require(self.learning_rate > 0, f"`learning_rate` must be positive, received {self.learning_rate}")
        _require(self.n_components >= 1, f"`n_components` must be at least 1, received {self.n_components}")


@dataclass(frozen=True)
class ImageLearnConfig:
    """Synthetic 8x8 digits on the grid-plus-hidden topology.

    200 patterns by default instead of 7000 so a run fits on a desk. As in `ToyLearnConfig`,
    `mixture_carry_over` warm-starts the mixture free phase; only the first iteration anneals it.
    """

    n_patterns: int = 200
    classes: Tuple[int, ...] = tuple(range(10))
    flip_prob: float = 0.05
    n_hidden: int = 10
    n_components: int = 10
    n_iterations: int = 30
    learning_rate: float = 0.1
    init_weight_std: float = 0.1
    anneal_start: float = 100.0
    anneal_steps: int = 7
    anneal_clamped: bool = False
    mixture_carry_over: bool = True

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(int(c) for c in self.classes))
        _require(len(self.classes) > 0, "`classes` must not be empty.")
        _require(
            self.n_patterns >= len(self.classes) and self.n_patterns % len(self.classes) == 0,
            f"`n_patterns` must be a positive multiple of the {len(self.classes)} classes, received {self.n_patterns}",
        )
        _require(0 <= self.flip_prob <= 1, f"`flip_prob` must lie in [0, 1], received {self.flip_prob}")
        _require(self.n_hidden >= 0, f"`n_hidden` must be non-negative, received {self.n_hidden}")
        _require(self.n_components >= 1, f"`n_components` must be at least 1, received {self.n_components}")
        _require(self.n_iterations >= 1, f"`n_iterations` must be at least 1, received {self.n_iterations}")
        _require(self.learning_rate > 0, f"`learning_rate` must be positive, received {self.learning_rate}")
        _check_schedule(self.anneal_start, self.anneal_steps)

    @property
    def schedule(self) -> AnnealSchedule:
        return AnnealSchedule.geometric(self.anneal_start, self.anneal_steps)

    @property
    def count_per_class(self) -> int:
        return self.n_patterns // len(self.classes)


def _section(cls, values: Optional[Dict[str, Any]], name: str):
    values = values or {}
    if not isinstance(values, dict):
        raise ConfigurationError(f"Section `{name}` must be a mapping, received {values!r}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(f"Unknown keys in section `{name}`: {unknown}")
    try:
        return cls(**values)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"Invalid section `{name}`: {exc}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one experiment run; serialized into its manifest."""

    experiment: str = ExperimentId.INFERENCE_BENCH.value
    seed: int = 0
    output_dir: str = "results"
    fixed_point: FixedPointSettings = field(default_factory=FixedPointSettings)
    inference_bench: InferenceBenchConfig = field(default_factory=InferenceBenchConfig)
    toy_learn: ToyLearnConfig = field(default_factory=ToyLearnConfig)
    image_learn: ImageLearnConfig = field(default_factory=ImageLearnConfig)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        try:
            ExperimentId(self.experiment)
        except ValueError as exc:
            raise ConfigurationError(
                f"Unknown experiment {self.experiment!r}; expected one of {[e.value for e in ExperimentId]}"
            ) from exc
        _require(
            self.schema_version == SCHEMA_VERSION,
            f"Unsupported schema_version {self.schema_version}, expected {SCHEMA_VERSION}",
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "experiment": self.experiment,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "fixed_point": self.fixed_point.to_dict(),
            "inference_bench": to_serializable(asdict(self.inference_bench)),
            "toy_learn": asdict(self.toy_learn),
            "image_learn": to_serializable(asdict(self.image_learn)),
        }

    @classmethod
    def from_dict(cls, config_dict: Dict[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(config_dict) - known)
        if unknown:
            raise ConfigurationError(f"Unknown configuration keys: {unknown}")
        values = dict(config_dict)
        values["fixed_point"] = _section(FixedPointSettings, values.get("fixed_point"), "fixed_point")
        values["inference_bench"] = _section(InferenceBenchConfig, values.get("inference_bench"), "inference_bench")
        values["toy_learn"] = _section(ToyLearnConfig, values.get("toy_learn"), "toy_learn")
        values["image_learn"] = _section(ImageLearnConfig, values.get("image_learn"), "image_learn")
        return cls(**values)

    def to_json_string(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json_file(cls, path: Union[str, Path]) -> "ExperimentConfig":
        try:
            config_dict = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path} is not valid JSON: {exc}") from exc
        if not isinstance(config_dict, dict):
            raise ConfigurationError(f"{path} must hold a JSON object.")
        return cls.from_dict(config_dict)


@dataclass
class ExperimentOutput:
    """Result tables (written as CSV), JSON sidecars and the training records behind them."""

    tables: Dict[str, pd.DataFrame]
    sidecars: Dict[str, Any] = field(default_factory=dict)
    records: Dict[str, RunRecord] = field(default_factory=dict)


def gen_random_nets(
    count: int,
    n_nodes: int,
    param_range: Tuple[float, float] = (-1.0, 1.0),
    seed: Union[int, torch.Generator] = 0,
) -> List[Network]:
    """Fully connected nets with every weight, then every bias, drawn uniformly from `param_range`."""
    if count < 1 or n_nodes < 1:
        raise ValueError(f"`count` and `n_nodes` must be at least 1, received {count} and {n_nodes}")
    low, high = param_range
    if low > high:
        raise ValueError(f"`param_range` must satisfy low <= high, received {param_range}")
    generator = make_generator(seed)
    topology = Topology.fully_connected(n_nodes)
    nets = []
    for _ in range(count):
        weights = low + (high - low) * torch.rand(len(topology.edges), generator=generator, dtype=DTYPE)
        biases = low + (high - low) * torch.rand(n_nodes, generator=generator, dtype=DTYPE)
        edges = [(i, j, float(w)) for (i, j), w in zip(topology.edges, weights)]
        nets.append(Network.from_edges(n_nodes, edges, biases))
    return nets


def correlation_differences(exact: torch.Tensor, approx: torch.Tensor) -> torch.Tensor:
    """Exact minus approximate correlations over i < j of the augmented matrices (bias column included)."""
    rows, cols = torch.triu_indices(exact.shape[0], exact.shape[1], offset=1)
    return exact[rows, cols] - approx[rows, cols]


def count_worsenings(trace: Sequence[float]) -> int:
    """Iterations whose objective dropped below the previous one (the objective is maximized)."""
    values = np.asarray(trace, dtype=np.float64)
    return int((np.diff(values) < 0).sum())


def difference_histogram(differences: np.ndarray) -> np.ndarray:
    counts, _ = np.histogram(differences, bins=HISTOGRAM_EDGES)
    return counts


def inference_bench(config: ExperimentConfig) -> ExperimentOutput:
    """Mixture correlations against exact ones on random nets, for every mixture size."""
    bench = config.inference_bench
    generator = make_generator(config.seed)
    nets = gen_random_nets(bench.n_nets, bench.n_nodes, bench.param_range, generator)
    schedule = bench.schedule
    logger.info(
        f"Inference benchmark: {bench.n_nets} nets of {bench.n_nodes} nodes, "
        f"components {list(bench.component_counts)}, anneal {list(schedule.temperatures)}"
    )

    sse_rows = []
    difference_rows = []
    pairs = torch.triu_indices(bench.n_nodes + 1, bench.n_nodes + 1, offset=1).T.tolist()
    for index, net in enumerate(tqdm(nets, desc="inference-bench")):
        exact = exact_pair_correlations(net)
        for n_components in bench.component_counts:
            result = optimize_mixture(
                net, schedule, n_components, settings=config.fixed_point, generator=generator
            )
            differences = correlation_differences(exact, mixture_pair_correlations(result.params))
            sse_rows.append(
                {
                    "net": index,
                    "n_components": n_components,
                    "sse": float((differences**2).sum()),
                    "converged": result.converged,
                    "n_cycles": result.n_cycles,
                    "floor_hits": result.params.floor_hits,
                }
            )
            for (i, j), difference in zip(pairs, differences.tolist()):
                difference_rows.append(
                    {"net": index, "n_components": n_components, "i": i, "j": j, "difference": difference}
                )

    sse = pd.DataFrame(sse_rows)
    differences = pd.DataFrame(difference_rows)
    histogram_rows = []
    for n_components, group in differences.groupby("n_components", sort=True):
        counts = difference_histogram(group["difference"].to_numpy())
        for left, right, count in zip(HISTOGRAM_EDGES[:-1], HISTOGRAM_EDGES[1:], counts):
            histogram_rows.append(
                {"n_components": n_components, "bin_left": left, "bin_right": right, "count": int(count)}
            )
    summary = (
        sse.groupby("n_components", sort=True)["sse"]
        .agg(median_sse="median", mean_sse="mean")
        .reset_index()
    )
    for _, row in summary.iterrows():
        logger.info(f"n_components={int(row['n_components'])}: median SSE {row['median_sse']:.6g}")
    return ExperimentOutput(
        tables={
            "inference_bench_sse": sse,
            "inference_bench_differences": differences,
            "inference_bench_histogram": pd.DataFrame(histogram_rows),
            "inference_bench_summary": summary,
        }
    )


def _slug(engine_name: str) -> str:
    return engine_name.replace("(", "").replace(")", "")


def _learning_output(prefix: str, records: Dict[str, RunRecord], tail: int) -> ExperimentOutput:
    tables = {}
    summary_rows = []
    sidecars = {}
    for name, record in records.items():
        frame = record.to_frame()
        frame.insert(0, "engine", name)
        tables[f"{prefix}_{_slug(name)}_trace"] = frame
        kl = np.asarray(record.column("kl_divergence"), dtype=np.float64)
        summary_rows.append(
            {
                "engine": name,
                "final_objective": record.rows[-1]["objective"],
                "final_kl": float(kl[-1]),
                "kl_std_tail": float(np.std(kl[-tail:])),
                "objective_worsenings": count_worsenings(record.column("objective")),
            }
        )
        sidecars[f"{prefix}_{_slug(name)}_snapshots"] = record.snapshots_dict()
    tables[f"{prefix}_summary"] = pd.DataFrame(summary_rows)
    return ExperimentOutput(tables=tables, sidecars=sidecars, records=records)


def _run_callbacks(n_iterations: int) -> List[TrainingCallback]:
    return [TrackingCallback(), ProgressCallback(every=max(1, n_iterations // 10))]


def toy_learn(config: ExperimentConfig) -> ExperimentOutput:
    """Exact, mean field and mixture training on the two-node toy data with identical seeds."""
    toy = config.toy_learn
    data = toy_pattern_set()
    topology = toy_topology()
    records = {}
    for engine, n_components in (
        (Engine.EXACT.value, 1),
        (Engine.MEANFIELD.value, 1),
        (Engine.MIXTURE.value, toy.n_components),
    ):
        train_config = TrainConfig(
            engine=engine,
            n_components=n_components,
            learning_rate=toy.learning_rate,
            n_iterations=toy.n_iterations,
            anneal=AnnealSchedule.none(),
            init_weight_std=toy.init_weight_std,
            fixed_point=config.fixed_point,
            seed=config.seed,
            carry_over_free_phase=engine == Engine.MIXTURE.value and toy.mixture_carry_over,
        )
        record = train(topology, data, train_config, callbacks=_run_callbacks(toy.n_iterations))
        records[train_config.engine_name] = record
        logger.info(f"toy-learn {train_config.engine_name}: final KL {record.rows[-1]['kl_divergence']:.6g}")
    return _learning_output("toy_learn", records, KL_TAIL)


def image_learn(config: ExperimentConfig) -> ExperimentOutput:
    """Mean field and mixture training on synthetic digits."""
    image = config.image_learn
    data = gen_synthetic_images(image.count_per_class, image.classes, seed=config.seed, flip_prob=image.flip_prob)
    topology = image_topology(data.grid_shape, image.n_hidden)
    records = {}
    for engine, n_components in ((Engine.MEANFIELD.value, 1), (Engine.MIXTURE.value, image.n_components)):
        train_config = TrainConfig(
            engine=engine,
            n_components=n_components,
            learning_rate=image.learning_rate,
            n_iterations=image.n_iterations,
            anneal=image.schedule,
            init_weight_std=image.init_weight_std,
            fixed_point=config.fixed_point,
            seed=config.seed,
            anneal_clamped=image.anneal_clamped,
            carry_over_free_phase=engine == Engine.MIXTURE.value and image.mixture_carry_over,
        )
        record = train(topology, data, train_config, callbacks=_run_callbacks(image.n_iterations), progress=True)
        records[train_config.engine_name] = record
        logger.info(
            f"image-learn {train_config.engine_name}: "
            f"{count_worsenings(record.column('objective'))} objective worsenings"
        )
    output = _learning_output("image_learn", records, image.n_iterations)
    output.tables["image_learn_patterns"] = data.to_frame()
    return output


def run_experiment(config: ExperimentConfig) -> ExperimentOutput:
    experiment = ExperimentId(config.experiment)
    if experiment == ExperimentId.INFERENCE_BENCH:
        return inference_bench(config)
    if experiment == ExperimentId.TOY_LEARN:
        return toy_learn(config)
    return image_learn(config)


def emit_results(
    tables: Dict[str, pd.DataFrame],
    out_dir: Union[str, Path],
    sidecars: Optional[Dict[str, Any]] = None,
    config: Optional[Dict[str, Any]] = None,
) -> List[Path]:
    """Write each table as `<name>.csv`, each sidecar as `<name>.json`, and `manifest.json`.

    Floats are written with 17 significant digits so values parse back exactly; NaN is
    an empty field. The manifest lists every file with its columns and row count, plus the
    resolved configuration. Nothing in the output depends on wall time.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sidecars = sidecars or {}
    written = []
    manifest = {"schema_version": SCHEMA_VERSION, "config": config, "tables": {}, "sidecars": []}

    for name in sorted(tables):
        frame = tables[name]
        path = out_dir / f"{name}.csv"
        frame.to_csv(path, index=False, float_format="%.17g")
        manifest["tables"][name] = {"file": path.name, "columns": list(frame.columns), "rows": len(frame)}
        written.append(path)

    for name in sorted(sidecars):
        path = out_dir / f"{name}.json"
        path.write_text(json.dumps(to_serializable(sidecars[name]), indent=2, sort_keys=True) + "\n")
        manifest["sidecars"].append(path.name)
        written.append(path)

    manifest["total_rows"] = sum(entry["rows"] for entry in manifest["tables"].values())
    manifest_path = out_dir / MANIFEST_FILE
    manifest_path.write_text(json.dumps(to_serializable(manifest), indent=2, sort_keys=True) + "\n")
    written.append(manifest_path)
    logger.info(f"Wrote {len(written)} files to {out_dir}")
    return written


def summarize_config(config: ExperimentConfig) -> Dict[str, Any]:
    """Dotted-key view of the resolved configuration, as logged at the start of a run."""
    return flatten_dict(config.to_dict())
