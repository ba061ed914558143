"""Deterministic sample generators for calibration and evaluation inputs."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .config import DatasetSpec
from .graph import Graph, weight_rng


@dataclass
class SampleSet:
    inputs: list[np.ndarray]
    seed: int
    targets: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.inputs)


def _read_csv(path: str) -> list[list[float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [[float(v) for v in row] for row in csv.reader(fh) if row]


def generate_samples(dataset: DatasetSpec, n: int, seed: int, graph: Graph | None = None) -> SampleSet:
    """Generate ``n`` inputs for ``dataset``.

    Random sets draw features uniformly from [-1, 1] (token ids uniformly from
    the vocabulary when the graph consumes integers). ``sinus`` places its
    inputs on an evenly spaced grid over [-pi, pi] with targets sin(x).
    ``csv_file`` returns rows in file order, wrapping when ``n`` exceeds the
    row count. ``graph`` supplies the exact input shape; without it a flat
    shape is inferred from the dataset arguments.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = weight_rng(seed)

    if dataset.name == "sinus":
        xs = np.linspace(-np.pi, np.pi, n, dtype=np.float64).astype(np.float32)
        return SampleSet(
            inputs=[np.array([x], dtype=np.float32) for x in xs],
            seed=seed,
            targets=[np.array([np.sin(x)], dtype=np.float32) for x in xs],
        )

    if dataset.name == "csv_file":
        rows = _read_csv(dataset.path)
        if not rows:
            raise OSError(f"{dataset.path}: no data rows")
        picked = [rows[i % len(rows)] for i in range(n)]
        return SampleSet(
            inputs=[np.asarray(r[:-1], dtype=np.float32) for r in picked],
            seed=seed,
            targets=[np.asarray(r[-1:], dtype=np.float32) for r in picked],
        )

    if graph is not None:
        shape, dtype = graph.input.shape, graph.input.dtype
    else:
        image = dataset.resolved_image_shape()
        seq = dataset.sequence_length
        if dataset.name == "randomset_sequence":
            shape = (seq, dataset.feature_dim)
        elif dataset.flat_features and dataset.feature_dim is not None:
            shape = (dataset.feature_dim,)
        elif dataset.flat_features:
            shape = (int(np.prod(image)),)
        else:
            shape = image
        dtype = "f32"

    if dtype == "i32":
        vocab = dataset.num_classes
        inputs = [rng.integers(0, vocab, size=shape).astype(np.int32) for _ in range(n)]
    else:
        inputs = [rng.uniform(-1.0, 1.0, size=shape).astype(np.float32) for _ in range(n)]
    return SampleSet(inputs=inputs, seed=seed)
