# Copyright contributors to the Boltzmann mixtures project
#
"""Basic functions and utilities"""

import math
from typing import Any, Dict, Optional, Sequence, Union

import numpy as np
import torch

from model.model import DTYPE


def make_generator(seed: Union[int, torch.Generator]) -> torch.Generator:
    """Seeded CPU generator; an existing generator is passed through so draws continue its stream."""
    if isinstance(seed, torch.Generator):
        return seed
    return torch.Generator().manual_seed(int(seed))


def has_converged(previous: float, current: float, rel_tol: float) -> bool:
    """Relative change of an objective is at most `rel_tol`.

    Args:
        previous (float): Objective before the update.
        current (float): Objective after the update.
        rel_tol (float): Tolerance on |current - previous| / |previous|.

    Returns:
        bool: True when the change is within tolerance (always for an unchanged value).
    """
    if current == previous:
        return True
    if not (math.isfinite(previous) and math.isfinite(current)):
        return False
    return abs(current - previous) <= rel_tol * max(abs(previous), abs(current))


def weighted_average(tensors: Sequence[torch.Tensor], weights: Optional[Sequence[float]] = None) -> torch.Tensor:
    if weights is None:
        weights = [1.0] * len(tensors)
    if len(weights) != len(tensors):
        raise ValueError(f"Got {len(weights)} weights for {len(tensors)} values.")
    weights = torch.as_tensor(weights, dtype=DTYPE)
    if (weights <= 0).any():
        raise ValueError("Weights must be positive.")
    total = sum(float(w) * t for w, t in zip(weights, tensors))
    return total / weights.sum()


def to_serializable(value: Any) -> Any:
    """Recursively convert tensors, arrays and numpy scalars to plain Python for JSON output."""
    if isinstance(value, torch.Tensor):
        return value.tolist()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, dict):
        return {str(k): to_serializable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_serializable(v) for v in value]
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def flatten_dict(nested: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    """Flatten nested dictionaries into dotted keys."""
    flat = {}
    for key, value in nested.items():
        name = f"{prefix}.{key}" if prefix else str(key)
        if isinstance(value, dict):
            flat.update(flatten_dict(value, name))
        else:
            flat[name] = value
    return flat
