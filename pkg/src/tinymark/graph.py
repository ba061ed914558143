"""Computation graph, model builder and parameter/MAC accounting."""

from __future__ import annotations

import copy
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .config import ModelSpec
from .errors import ShapeError, UnsupportedCombination

DTYPE_SIZE = {"f32": 4, "f16": 2, "i32": 4, "i16": 2, "i8": 1}
NUMPY_DTYPE = {"f32": np.float32, "f16": np.float16, "i32": np.int32, "i16": np.int16, "i8": np.int8}

RECURRENT_KINDS = ("simple_rnn_cell", "lstm_cell", "gru_cell")
GATES = {"simple_rnn_cell": 1, "lstm_cell": 4, "gru_cell": 3}
# Node kinds whose weight tensors are subject to pruning/clustering.
WEIGHTED_KINDS = ("dense", "conv2d") + RECURRENT_KINDS


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    bits: int
    symmetric: bool

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.symmetric and self.zero_point != 0:
            raise ValueError("symmetric quantization requires zero_point == 0")

    @property
    def qmin(self) -> int:
        if self.symmetric:
            return -(2 ** (self.bits - 1) - 1)
        return -(2 ** (self.bits - 1))

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    def to_dict(self) -> dict[str, Any]:
        return {"scale": self.scale, "zero_point": self.zero_point, "bits": self.bits, "symmetric": self.symmetric}


@dataclass
class TensorInfo:
    shape: tuple[int, ...]
    dtype: str
    role: str  # weight | bias | activation | input | output
    quant: QuantParams | None = None
    data: np.ndarray | None = None

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1

    @property
    def nbytes(self) -> int:
        return self.size * DTYPE_SIZE[self.dtype]

    @property
    def is_constant(self) -> bool:
        return self.role in ("weight", "bias")


@dataclass
class OpNode:
    kind: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    attrs: dict[str, Any] = field(default_factory=dict)
    name: str = ""


@dataclass
class Graph:
    nodes: list[OpNode]
    tensors: dict[str, TensorInfo]
    input_ids: tuple[str, ...]
    output_ids: tuple[str, ...]
    name: str = ""
    task: str = "regression"

    @property
    def input(self) -> TensorInfo:
        return self.tensors[self.input_ids[0]]

    @property
    def output(self) -> TensorInfo:
        return self.tensors[self.output_ids[0]]

    def clone(self) -> Graph:
        return copy.deepcopy(self)

    def constants(self) -> list[tuple[str, TensorInfo]]:
        return [(tid, t) for tid, t in self.tensors.items() if t.is_constant]

    def weight_tensors(self) -> list[str]:
        """Kernel tensors of dense/conv/recurrent nodes (no biases)."""
        ids = []
        for node in self.nodes:
            if node.kind in WEIGHTED_KINDS:
                ids.extend(t for t in node.inputs[1:] if self.tensors[t].role == "weight")
        return ids

    def is_recurrent(self) -> bool:
        return any(n.kind in RECURRENT_KINDS for n in self.nodes)

    def validate(self) -> None:
        if len(self.input_ids) != 1 or len(self.output_ids) != 1:
            raise ShapeError("graphs must have exactly one input and one output")
        known = set(self.input_ids) | {tid for tid, t in self.tensors.items() if t.is_constant}
        for i, node in enumerate(self.nodes):
            for tid in node.inputs:
                if tid not in self.tensors:
                    raise ShapeError(f"node {i} ({node.kind}) reads unknown tensor {tid}")
                if tid not in known:
                    raise ShapeError(f"node {i} ({node.kind}) reads {tid} before it is produced")
            known.update(node.outputs)
        for tid, t in self.tensors.items():
            if t.is_constant:
                if t.data is None or t.data.dtype != NUMPY_DTYPE[t.dtype]:
                    raise ShapeError(f"constant {tid} lacks data of dtype {t.dtype}")

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self._meta(), sort_keys=True).encode())
        for tid in sorted(self.tensors):
            data = self.tensors[tid].data
            if data is not None:
                h.update(tid.encode())
                h.update(np.ascontiguousarray(data).tobytes())
        return h.hexdigest()[:16]

    def _meta(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "task": self.task,
            "input_ids": list(self.input_ids),
            "output_ids": list(self.output_ids),
            "nodes": [
                {"kind": n.kind, "name": n.name, "inputs": list(n.inputs), "outputs": list(n.outputs), "attrs": n.attrs}
                for n in self.nodes
            ],
            "tensors": {
                tid: {
                    "shape": list(t.shape),
                    "dtype": t.dtype,
                    "role": t.role,
                    "quant": t.quant.to_dict() if t.quant else None,
                }
                for tid, t in self.tensors.items()
            },
        }

    def save(self, path: str | Path) -> None:
        """Write the graph as an .npz archive (constants plus a JSON header)."""
        arrays = {f"data/{tid}": t.data for tid, t in self.tensors.items() if t.data is not None}
        buf = io.BytesIO()
        np.savez(buf, __meta__=np.frombuffer(json.dumps(self._meta(), sort_keys=True).encode(), dtype=np.uint8), **arrays)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path: str | Path) -> Graph:
        with np.load(path) as archive:
            meta = json.loads(archive["__meta__"].tobytes().decode())
            tensors = {}
            for tid, t in meta["tensors"].items():
                q = t["quant"]
                key = f"data/{tid}"
                tensors[tid] = TensorInfo(
                    shape=tuple(t["shape"]),
                    dtype=t["dtype"],
                    role=t["role"],
                    quant=QuantParams(**q) if q else None,
                    data=archive[key] if key in archive.files else None,
                )
        nodes = [OpNode(n["kind"], tuple(n["inputs"]), tuple(n["outputs"]), n["attrs"], n["name"]) for n in meta["nodes"]]
        return cls(nodes, tensors, tuple(meta["input_ids"]), tuple(meta["output_ids"]), meta["name"], meta["task"])


# -- builder ----------------------------------------------------------------


def weight_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; streams are stable across numpy versions."""
    return np.random.Generator(np.random.Philox(seed))


class _Builder:
    def __init__(self, seed: int):
        self.rng = weight_rng(seed)
        self.nodes: list[OpNode] = []
        self.tensors: dict[str, TensorInfo] = {}
        self._act = 0

    def const(self, name: str, shape: tuple[int, ...], role: str, offset: float = 0.0) -> str:
        data = (self.rng.uniform(-0.5, 0.5, size=shape) + offset).astype(np.float32)
        self.tensors[name] = TensorInfo(shape, "f32", role, data=data)
        return name

    def activation_tensor(self, shape: tuple[int, ...]) -> str:
        self._act += 1
        tid = f"t{self._act}"
        self.tensors[tid] = TensorInfo(tuple(shape), "f32", "activation")
        return tid

    def add(self, kind: str, inputs: list[str], out_shape: tuple[int, ...], name: str = "", **attrs) -> str:
        out = self.activation_tensor(out_shape)
        self.nodes.append(OpNode(kind, tuple(inputs), (out,), dict(attrs), name or f"{kind}_{len(self.nodes)}"))
        return out


def _io_dims(spec: ModelSpec) -> tuple[tuple[int, ...], str, int]:
    """Return (input shape, input dtype, output width) implied by the dataset."""
    ds = spec.dataset
    if spec.model_type == "RNN":
        seq = spec.effective_sequence_length
        if spec.embedding_dim is not None:
            return (seq,), "i32", ds.num_classes
        width = ds.num_classes if ds.num_classes is not None else ds.feature_dim
        return (seq, ds.feature_dim), "f32", width
    if ds.name == "sinus":
        return (1,), "f32", 1
    if ds.name == "csv_file":
        n_cols = csv_column_count(ds.path)
        if n_cols < 2:
            raise ShapeError(f"{ds.path}: need at least one feature column and a target column")
        return (n_cols - 1,), "f32", 1
    image = ds.resolved_image_shape()
    classes = ds.resolved_num_classes()
    width = classes if ds.task == "classification" else 1
    if spec.model_type == "CNN":
        return image, "f32", width
    if ds.flat_features and ds.feature_dim is not None:
        return (ds.feature_dim,), "f32", width
    if image is not None:
        return (int(np.prod(image)),), "f32", width
    return (ds.feature_dim,), "f32", width


def csv_column_count(path: str) -> int:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                return len(line.split(","))
    raise ShapeError(f"{path}: empty csv file")


def build_graph(spec: ModelSpec, name: str = "") -> Graph:
    """Generate the float graph for ``spec`` with seeded uniform[-0.5, 0.5] weights.

    Dropout contributes no nodes. Batch norm appears as a frozen per-channel
    scale/shift between the layer and its activation.
    """
    in_shape, in_dtype, out_width = _io_dims(spec)
    b = _Builder(spec.random_seed)
    b.tensors["input"] = TensorInfo(tuple(in_shape), in_dtype, "input")
    x, shape = "input", tuple(in_shape)
    act = spec.activation
    per_step = spec.model_type == "RNN"

    def batch_norm(x: str, shape: tuple[int, ...], tag: str) -> str:
        ch = shape[-1]
        scale = b.const(f"{tag}.bn_scale", (ch,), "weight", offset=1.0)
        shift = b.const(f"{tag}.bn_shift", (ch,), "bias")
        return b.add("batch_norm_frozen", [x, scale, shift], shape, name=f"{tag}.bn")

    for i, (channels, kernel, stride) in enumerate(spec.convs_params):
        tag = f"conv{i}"
        if len(shape) != 3:
            raise ShapeError(f"convs_params[{i}]: spatial layer after global pooling")
        h, w, c = shape
        if channels > 0:
            ho, wo = (h - kernel) // stride + 1, (w - kernel) // stride + 1
            if h < kernel or w < kernel:
                raise ShapeError(f"convs_params[{i}]: kernel {kernel} exceeds input {h}x{w}")
            wt = b.const(f"{tag}.w", (kernel, kernel, c, channels), "weight")
            bias = b.const(f"{tag}.b", (channels,), "bias")
            shape = (ho, wo, channels)
            x = b.add("conv2d", [x, wt, bias], shape, name=tag, kernel=kernel, stride=stride)
            if spec.use_batch_norm:
                x = batch_norm(x, shape, tag)
            x = b.add("activation", [x], shape, name=f"{tag}.act", fn=act)
        elif kernel > 0:
            if h < kernel or w < kernel:
                raise ShapeError(f"convs_params[{i}]: pooling {kernel} below 1x1 on {h}x{w} input")
            shape = ((h - kernel) // stride + 1, (w - kernel) // stride + 1, c)
            x = b.add("maxpool2d", [x], shape, name=f"pool{i}", pool=kernel, stride=stride)
        else:
            shape = (c,)
            x = b.add("global_avg_pool2d", [x], shape, name=f"gap{i}")

    if spec.model_type == "RNN":
        if spec.embedding_dim is not None:
            vocab = spec.dataset.num_classes
            table = b.const("embedding.table", (vocab, spec.embedding_dim), "weight")
            shape = (shape[0], spec.embedding_dim)
            x = b.add("embedding_lookup", [x, table], shape, name="embedding")
        kind = {"simple": "simple_rnn_cell", "lstm": "lstm_cell", "gru": "gru_cell"}[spec.rnn_kind]
        units, feat = spec.rnn_units, shape[-1]
        g = GATES[kind]
        ins = [x, b.const("rnn.w", (feat, g * units), "weight"), b.const("rnn.u", (units, g * units), "weight")]
        if kind == "gru_cell":
            # reset-after formulation: separate input and recurrent biases
            ins += [b.const("rnn.b_in", (g * units,), "bias"), b.const("rnn.b_rec", (g * units,), "bias")]
        else:
            ins.append(b.const("rnn.b", (g * units,), "bias"))
        shape = (shape[0], units)
        x = b.add(kind, ins, shape, name="rnn", units=units)

    def dense(x: str, shape: tuple[int, ...], n: int, tag: str) -> tuple[str, tuple[int, ...]]:
        flatten = not per_step and len(shape) > 1
        fan_in = int(np.prod(shape)) if flatten else shape[-1]
        wt = b.const(f"{tag}.w", (fan_in, n), "weight")
        bias = b.const(f"{tag}.b", (n,), "bias")
        out_shape = (shape[0], n) if per_step else (n,)
        return b.add("dense", [x, wt, bias], out_shape, name=tag, flatten=flatten, per_step=per_step), out_shape

    for i, n in enumerate(spec.denses_params):
        x, shape = dense(x, shape, n, f"dense{i}")
        if spec.use_batch_norm:
            x = batch_norm(x, shape, f"dense{i}")
        x = b.add("activation", [x], shape, name=f"dense{i}.act", fn=act)

    if out_width is None or out_width < 1:
        raise UnsupportedCombination("dataset does not determine an output width")
    x, shape = dense(x, shape, out_width, "head")
    task = spec.dataset.task
    if task == "classification":
        x = b.add("softmax", [x], shape, name="softmax")

    b.tensors[x].role = "output"
    graph = Graph(b.nodes, b.tensors, ("input",), (x,), name=name or spec.model_type.lower(), task=task)
    graph.validate()
    return graph


# -- statistics ---------------------------------------------------------------


@dataclass
class LayerStats:
    index: int
    kind: str
    name: str
    params: int
    macs: int


@dataclass
class ModelStats:
    param_count: int
    mac_count: int
    per_layer: list[LayerStats]


def count_params(graph: Graph) -> int:
    return sum(t.size for _, t in graph.constants())


def _node_macs(graph: Graph, node: OpNode, steps: int | None) -> int:
    ts = graph.tensors
    if node.kind == "dense":
        fan_in, fan_out = ts[node.inputs[1]].shape
        positions = 1
        if node.attrs.get("per_step"):
            positions = steps if steps is not None else ts[node.inputs[0]].shape[0]
        return positions * fan_in * fan_out
    if node.kind == "conv2d":
        k, _, cin, cout = ts[node.inputs[1]].shape
        ho, wo, _ = ts[node.outputs[0]].shape
        return ho * wo * cout * k * k * cin
    if node.kind in RECURRENT_KINDS:
        feat, gu = ts[node.inputs[1]].shape
        units = ts[node.inputs[2]].shape[0]
        t = steps if steps is not None else ts[node.inputs[0]].shape[0]
        return t * gu * (feat + units)
    return 0


def count_macs(graph: Graph, sequence_length: int | None = None) -> int:
    """Multiplies only: one per weight x input product.

    Biases, activations, pooling and normalization are not counted. Recurrent
    layers and the per-step dense layers that follow them are multiplied by the
    sequence length (taken from the graph unless overridden).
    """
    return sum(_node_macs(graph, n, sequence_length) for n in graph.nodes)


def model_stats(graph: Graph) -> ModelStats:
    layers = []
    for i, node in enumerate(graph.nodes):
        params = sum(graph.tensors[t].size for t in node.inputs if graph.tensors[t].is_constant)
        layers.append(LayerStats(i, node.kind, node.name, params, _node_macs(graph, node, None)))
    return ModelStats(count_params(graph), count_macs(graph), layers)
