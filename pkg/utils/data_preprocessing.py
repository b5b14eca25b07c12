import numpy as np
import torch


def visible_key(vector):
    """Hashable +/-1 tuple for one visible vector."""
    values = np.asarray(vector, dtype=np.float64).ravel()
    if not np.isin(values, (-1.0, 1.0)).all():
        raise ValueError(f"Visible vectors must contain only -1 and +1, received {values.tolist()}")
    return tuple(int(v) for v in values)


def deduplicate_patterns(vectors, multiplicities=None):
    """Merge identical visible vectors, summing their multiplicities.

    Order of first appearance is kept so downstream generator draws stay reproducible.
    Returns a float64 tensor of unique vectors and a list of integer multiplicities.
    """
    vectors = [visible_key(v) for v in vectors]
    if multiplicities is None:
        multiplicities = [1] * len(vectors)
    if len(multiplicities) != len(vectors):
        raise ValueError(f"Got {len(multiplicities)} multiplicities for {len(vectors)} vectors.")
    if not vectors:
        raise ValueError("At least one pattern is required.")

    merged = {}
    for key, count in zip(vectors, multiplicities):
        if int(count) < 1:
            raise ValueError(f"Multiplicities must be at least 1, received {count}")
        merged[key] = merged.get(key, 0) + int(count)
    unique = torch.tensor(list(merged), dtype=torch.float64)
    return unique, list(merged.values())


def empirical_distribution(multiplicities):
    counts = np.asarray(multiplicities, dtype=np.float64)
    return counts / counts.sum()
