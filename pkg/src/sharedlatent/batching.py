from __future__ import annotations

import numpy as np
import torch

from .datagen import Dataset


def to_tensors(dataset: Dataset, idx=None, dtype=torch.float32):
    """Return (modality tensors, presence, labels) for the rows ``idx`` (all rows if None)."""
    if idx is None:
        idx = slice(None)
    xs = [torch.as_tensor(np.ascontiguousarray(m[idx])).to(dtype) for m in dataset.modalities]
    presence = torch.as_tensor(dataset.presence[idx])
    labels = torch.as_tensor(dataset.labels[idx])
    return xs, presence, labels


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless shuffled minibatch index stream (reshuffled every epoch)."""
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield perm[start : start + batch_size]


def chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))
