"""Command line entry point: `python -m toolkit.cli <command>`"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional

import click

from .dataset import gen_synthetic_images
from .experiments import (
    ConfigurationError,
    ExperimentConfig,
    ExperimentId,
    emit_results,
    run_experiment,
    summarize_config,
)


logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _resolve_config(
    obj: Dict[str, Any], experiment: str, section: Optional[str] = None, flags: Optional[Dict[str, Any]] = None
) -> ExperimentConfig:
    """Flags first, then the `--config` file on top of them."""
    values: Dict[str, Any] = {"experiment": experiment, "seed": obj["seed"], "output_dir": obj["out"]}
    flags = {k: v for k, v in (flags or {}).items() if v is not None}
    if section and flags:
        values[section] = flags
    if obj["config"] is not None:
        try:
            from_file = json.loads(Path(obj["config"]).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{obj['config']} is not valid JSON: {exc}") from exc
        if not isinstance(from_file, dict):
            raise ConfigurationError(f"{obj['config']} must hold a JSON object.")
        if from_file.get("experiment", experiment) != experiment:
            raise ConfigurationError(
                f"{obj['config']} describes experiment {from_file['experiment']!r}, not {experiment!r}"
            )
        values = _merge(values, from_file)
    return ExperimentConfig.from_dict(values)


def _run(obj: Dict[str, Any], experiment: str, section: str, flags: Dict[str, Any]) -> None:
    try:
        config = _resolve_config(obj, experiment, section, flags)
        for key, value in summarize_config(config).items():
            logger.debug(f"config {key} = {value}")
        output = run_experiment(config)
        written = emit_results(output.tables, config.output_dir, output.sidecars, config.to_dict())
    except ValueError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(f"{experiment}: wrote {len(written)} files to {config.output_dir}")


@click.group()
@click.option("--seed", type=int, default=0, show_default=True, help="Seed of every random draw.")
@click.option("--out", type=click.Path(file_okay=False), default="results", show_default=True, help="Output directory.")
@click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="JSON experiment configuration; its values override the flags.",
)
@click.option(
    "--log-level",
    type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
    default="INFO",
    show_default=True,
)
@click.pass_context
def main(ctx: click.Context, seed: int, out: str, config_path: Optional[str], log_level: str):
    """Mean field and mixture-of-mean-fields experiments on Boltzmann machines."""
    logging.basicConfig(level=getattr(logging, log_level.upper()), format=LOG_FORMAT)
    ctx.obj = {"seed": seed, "out": out, "config": config_path}


@main.command("inference-bench")
@click.option("--n-nets", type=int, default=None, help="Random nets to benchmark (default 100).")
@click.option("--n-nodes", type=int, default=None, help="Nodes per net (default 10).")
@click.option(
    "--components", type=int, multiple=True, help="Mixture sizes to sweep, repeatable (default 1 to 10)."
)
@click.pass_obj
def inference_bench(obj, n_nets: Optional[int], n_nodes: Optional[int], components):
    """Compare mixture correlations with exact ones on random fully connected nets."""
    flags = {"n_nets": n_nets, "n_nodes": n_nodes, "component_counts": list(components) or None}
    _run(obj, ExperimentId.INFERENCE_BENCH.value, "inference_bench", flags)


@main.command("toy-learn")
@click.option("--iterations", type=int, default=None, help="Learning iterations (default 200).")
@click.pass_obj
def toy_learn(obj, iterations: Optional[int]):
    """Exact, mean field and two-component mixture learning on the two-node toy data."""
    _run(obj, ExperimentId.TOY_LEARN.value, "toy_learn", {"n_iterations": iterations})


@main.command("image-learn")
@click.option("--n-patterns", type=int, default=None, help="Synthetic training images (default 200).")
@click.option("--iterations", type=int, default=None, help="Learning iterations (default 30).")
@click.option("--components", type=int, default=None, help="Mixture size (default 10).")
@click.pass_obj
def image_learn(obj, n_patterns: Optional[int], iterations: Optional[int], components: Optional[int]):
    """Mean field and mixture learning on synthetic 8x8 digits."""
    flags = {"n_patterns": n_patterns, "n_iterations": iterations, "n_components": components}
    _run(obj, ExperimentId.IMAGE_LEARN.value, "image_learn", flags)


@main.command("gen-data")
@click.option("--count-per-class", type=int, default=700, show_default=True)
@click.option("--flip-prob", type=float, default=None, help="Pixel flip probability (default 0.05).")
@click.option("--classes", type=int, multiple=True, help="Digit classes, repeatable (default all ten).")
@click.pass_obj
def gen_data(obj, count_per_class: int, flip_prob: Optional[float], classes):
    """Write a synthetic digit pattern set as CSV."""
    try:
        if count_per_class < 1:
            raise ConfigurationError(f"`--count-per-class` must be at least 1, received {count_per_class}")
        flags = {"classes": list(classes) or None, "flip_prob": flip_prob}
        n_classes = len(classes) if classes else 10
        flags["n_patterns"] = count_per_class * n_classes
        config = _resolve_config(obj, ExperimentId.IMAGE_LEARN.value, "image_learn", flags)
        image = config.image_learn
        data = gen_synthetic_images(image.count_per_class, image.classes, seed=config.seed, flip_prob=image.flip_prob)
        written = emit_results({"patterns": data.to_frame()}, config.output_dir, config=config.to_dict())
    except ValueError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(f"gen-data: wrote {len(data)} patterns ({len(written)} files) to {config.output_dir}")


if __name__ == "__main__":
    main()
