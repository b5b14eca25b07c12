# Copyright contributors to the Boltzmann mixtures project
#
"""Tools for building pattern datasets and the topologies they are learned on"""

import logging
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch

from model.model import DTYPE, Topology
from utils.data_preprocessing import empirical_distribution

from .util import make_generator


logger = logging.getLogger(__name__)

PROTOTYPE_RESOURCE = "digit_prototypes.txt"
DEFAULT_GRID = (8, 8)
DEFAULT_FLIP_PROB = 0.05


class PatternSet(torch.utils.data.Dataset):
    """
    Visible +/-1 training vectors with multiplicities.

    Args:
        patterns (tensor-like, required): N x V matrix of +/-1 entries.
        multiplicities (list, optional): Copies of each row, all at least 1. Defaults to one copy each.
        labels (list, optional): Class label per row, e.g. the digit a synthetic image was drawn from.
        grid_shape (tuple, optional): (rows, cols) when the visible units form an image.
    """

    def __init__(
        self,
        patterns: Union[torch.Tensor, Sequence[Sequence[float]]],
        multiplicities: Optional[Sequence[int]] = None,
        labels: Optional[Sequence[int]] = None,
        grid_shape: Optional[Tuple[int, int]] = None,
    ):
        super().__init__()
        patterns = torch.as_tensor(patterns, dtype=DTYPE)
        if patterns.ndim != 2 or patterns.shape[0] == 0:
            raise ValueError(f"`patterns` should be a non-empty N x V matrix, received shape {tuple(patterns.shape)}")
        if not ((patterns == 1) | (patterns == -1)).all():
            raise ValueError("Every pattern entry must be exactly -1 or +1.")
        n = patterns.shape[0]
        multiplicities = [1] * n if multiplicities is None else [int(m) for m in multiplicities]
        if len(multiplicities) != n or min(multiplicities) < 1:
            raise ValueError(f"Expected {n} multiplicities of at least 1, received {multiplicities}")
        if labels is not None and len(labels) != n:
            raise ValueError(f"Expected {n} labels, received {len(labels)}")
        if grid_shape is not None:
            grid_shape = tuple(int(g) for g in grid_shape)
            if grid_shape[0] * grid_shape[1] != patterns.shape[1]:
                raise ValueError(f"Grid {grid_shape} does not match {patterns.shape[1]} visible units.")

        self.patterns = patterns
        self.multiplicities = multiplicities
        self.labels = None if labels is None else [int(label) for label in labels]
        self.grid_shape = grid_shape

    def __len__(self):
        return self.patterns.shape[0]

    def __getitem__(self, index: int):
        return self.patterns[index], self.multiplicities[index]

    @property
    def n_visible(self) -> int:
        return self.patterns.shape[1]

    @property
    def total_count(self) -> int:
        return sum(self.multiplicities)

    def empirical_distribution(self) -> np.ndarray:
        return empirical_distribution(self.multiplicities)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            self.patterns.numpy().astype(np.int64), columns=[f"v_{i + 1}" for i in range(self.n_visible)]
        )
        frame["multiplicity"] = self.multiplicities
        if self.labels is not None:
            frame["label"] = self.labels
        return frame

    def save_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def load_csv(cls, path: Union[str, Path], grid_shape: Optional[Tuple[int, int]] = None) -> "PatternSet":
        frame = pd.read_csv(path)
        visible = [c for c in frame.columns if c.startswith("v_")]
        if not visible:
            raise ValueError(f"{path} has no `v_*` columns.")
        multiplicities = frame["multiplicity"].tolist() if "multiplicity" in frame else None
        labels = frame["label"].tolist() if "label" in frame else None
        return cls(frame[visible].to_numpy(dtype=np.float64), multiplicities, labels, grid_shape)


def toy_pattern_set() -> PatternSet:
    """Two copies of (1, 1) and one copy of (-1, -1) over two visible nodes."""
    return PatternSet([[1.0, 1.0], [-1.0, -1.0]], multiplicities=[2, 1])


def toy_topology() -> Topology:
    """Two visible nodes joined by one edge, no hidden nodes."""
    return Topology.fully_connected(2)


def load_prototypes(text: Optional[str] = None) -> Dict[int, torch.Tensor]:
    """Parse `[label]` blocks of '#'/'.' text art into +/-1 images (row-major).

    Reads the packaged digit prototypes when no text is given.
    """
    if text is None:
        text = resources.files(__package__).joinpath("resources").joinpath(PROTOTYPE_RESOURCE).read_text()
    prototypes: Dict[int, List[List[float]]] = {}
    label = None
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            label = int(line[1:-1])
            prototypes[label] = []
            continue
        if label is None or set(line) - {"#", "."}:
            raise ValueError(f"Malformed prototype line: {line!r}")
        prototypes[label].append([1.0 if ch == "#" else -1.0 for ch in line])

    images = {}
    for label, rows in prototypes.items():
        if len({len(r) for r in rows}) != 1:
            raise ValueError(f"Prototype {label} has ragged rows.")
        images[label] = torch.tensor(rows, dtype=DTYPE)
    return images


def gen_synthetic_images(
    count_per_class: int,
    classes: Optional[Sequence[int]] = None,
    grid: Tuple[int, int] = DEFAULT_GRID,
    seed: Union[int, torch.Generator] = 0,
    flip_prob: float = DEFAULT_FLIP_PROB,
) -> PatternSet:
    """Noisy copies of the digit prototypes, each pixel flipped independently with `flip_prob`.

    Patterns are grouped by class in the order of `classes` (all prototypes by default) and
    are not deduplicated.
    """
    if count_per_class < 1:
        raise ValueError(f"`count_per_class` must be at least 1, received {count_per_class}")
    if not 0 <= flip_prob <= 1:
        raise ValueError(f"`flip_prob` must lie in [0, 1], received {flip_prob}")
    prototypes = load_prototypes()
    classes = sorted(prototypes) if classes is None else list(classes)
    unknown = [c for c in classes if c not in prototypes]
    if unknown:
        raise ValueError(f"No prototype for classes {unknown}; available: {sorted(prototypes)}")
    grid = tuple(grid)
    generator = make_generator(seed)

    patterns = []
    labels = []
    for label in classes:
        prototype = prototypes[label]
        if tuple(prototype.shape) != grid:
            raise ValueError(f"Prototype {label} has shape {tuple(prototype.shape)}, requested grid {grid}")
        flat = prototype.flatten()
        flips = torch.rand(count_per_class, flat.shape[0], generator=generator, dtype=DTYPE) < flip_prob
        patterns.append(torch.where(flips, -flat, flat))
        labels.extend([label] * count_per_class)

    logger.info(f"Generated {len(labels)} synthetic {grid[0]}x{grid[1]} images over {len(classes)} classes")
    return PatternSet(torch.cat(patterns), labels=labels, grid_shape=grid)


def grid_edges(rows: int, cols: int) -> List[Tuple[int, int]]:
    """Horizontal, vertical and both diagonal neighbour pairs of a row-major grid."""
    edges = []
    for r in range(rows):
        for c in range(cols):
            node = r * cols + c
            if c + 1 < cols:
                edges.append((node, node + 1))
            if r + 1 < rows:
                edges.append((node, node + cols))
                if c + 1 < cols:
                    edges.append((node, node + cols + 1))
                if c > 0:
                    edges.append((node, node + cols - 1))
    return edges


def image_topology(grid: Tuple[int, int] = DEFAULT_GRID, n_hidden: int = 10) -> Topology:
    """Visible grid with 8-neighbourhood edges plus hidden nodes connected to each other and to every pixel."""
    rows, cols = grid
    n_visible = rows * cols
    hidden = range(n_visible, n_visible + n_hidden)
    edges = grid_edges(rows, cols)
    edges += [(h, k) for h in hidden for k in hidden if h < k]
    edges += [(v, h) for h in hidden for v in range(n_visible)]
    return Topology(
        n_nodes=n_visible + n_hidden,
        edges=tuple(edges),
        visible=tuple(range(n_visible)),
        grid_shape=(rows, cols),
    )
