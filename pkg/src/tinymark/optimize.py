"""Model variants: post-training quantization, magnitude pruning, weight clustering."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datasets import SampleSet
from .errors import NonFiniteOutput, UnsupportedOp
from .graph import RECURRENT_KINDS, Graph, OpNode, QuantParams, TensorInfo
from .kernels import execute, quantize_values, round_half_away

SCHEMES = ("basic", "dynamic", "int8", "int8_only", "a16w8", "a16w8_int_only", "float16")
SCHEME_NAMES = {
    "basic": "basic",
    "dynamic": "dynamic",
    "int8": "int8",
    "int8_only": "int8_only",
    "a16w8": "16x8",
    "a16w8_int_only": "16x8_int_only",
    "float16": "float16",
}
_NAME_TO_SCHEME = {v: k for k, v in SCHEME_NAMES.items()}
INTEGER_SCHEMES = ("int8", "int8_only", "a16w8", "a16w8_int_only")
MIN_RANGE = 1e-6
LLOYD_ITERATIONS = 30

_QUANTIZABLE = {
    "dense",
    "conv2d",
    "maxpool2d",
    "global_avg_pool2d",
    "activation",
    "batch_norm_frozen",
    "softmax",
    "embedding_lookup",
    *RECURRENT_KINDS,
}


@dataclass(frozen=True)
class VariantDescriptor:
    scheme: str = "basic"
    pruned: bool = False
    clustered: bool = False
    sparsity: float = 0.5
    centroids: int = 16

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")

    @property
    def name(self) -> str:
        parts = [SCHEME_NAMES[self.scheme]]
        if self.pruned:
            parts.append("pruned")
        if self.clustered:
            parts.append("clustered")
        return "+".join(parts)

    @property
    def int_only(self) -> bool:
        return self.scheme.endswith("_int_only") or self.scheme == "int8_only"

    @classmethod
    def parse(cls, name: str) -> VariantDescriptor:
        head, *flags = name.split("+")
        if head not in _NAME_TO_SCHEME:
            raise ValueError(f"unknown variant {name!r}; schemes: {', '.join(SCHEME_NAMES.values())}")
        unknown = set(flags) - {"pruned", "clustered"}
        if unknown or len(flags) != len(set(flags)):
            raise ValueError(f"bad variant suffixes in {name!r}")
        return cls(_NAME_TO_SCHEME[head], pruned="pruned" in flags, clustered="clustered" in flags)


def _scheme(scheme: str) -> str:
    return _NAME_TO_SCHEME.get(scheme, scheme)


# -- calibration ------------------------------------------------------------------


@dataclass
class CalibrationStats:
    ranges: dict[str, tuple[float, float]]

    def __getitem__(self, tid: str) -> tuple[float, float]:
        return self.ranges[tid]


def _widen(lo: float, hi: float) -> tuple[float, float]:
    if hi - lo < MIN_RANGE:
        return lo - MIN_RANGE, hi + MIN_RANGE
    return lo, hi


def calibrate(graph: Graph, samples: SampleSet) -> CalibrationStats:
    """Observed (min, max) of every float activation tensor over the samples."""
    if not len(samples):
        raise ValueError("calibration needs at least one sample")
    ranges: dict[str, list[float]] = {}
    for x in samples.inputs:
        values = execute(graph, x, keep=True)
        for tid, v in values.items():
            if graph.tensors[tid].dtype == "i32":
                continue
            lo, hi = float(np.min(v)), float(np.max(v))
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise NonFiniteOutput(f"non-finite values in {tid} during calibration")
            if tid in ranges:
                ranges[tid] = [min(ranges[tid][0], lo), max(ranges[tid][1], hi)]
            else:
                ranges[tid] = [lo, hi]
    return CalibrationStats({tid: _widen(lo, hi) for tid, (lo, hi) in ranges.items()})


# -- parameter derivation ------------------------------------------------------------


def affine_int8_params(lo: float, hi: float) -> QuantParams:
    lo, hi = _widen(min(lo, 0.0), max(hi, 0.0))
    scale = (hi - lo) / 255.0
    zp = int(round_half_away(np.float64(-128.0 - lo / scale)))
    return QuantParams(scale, min(max(zp, -128), 127), 8, False)


def symmetric_params(amax: float, bits: int) -> QuantParams:
    amax = max(abs(amax), MIN_RANGE)
    return QuantParams(amax / (2 ** (bits - 1) - 1), 0, bits, True)


def activation_params(lo: float, hi: float, bits: int) -> QuantParams:
    if bits == 8:
        return affine_int8_params(lo, hi)
    return symmetric_params(max(abs(lo), abs(hi)), 16)


def softmax_output_params(bits: int) -> QuantParams:
    if bits == 8:
        return QuantParams(1.0 / 256.0, -128, 8, False)
    return QuantParams(1.0 / 32768.0, 0, 16, True)


def quantize_weight(data: np.ndarray) -> tuple[np.ndarray, QuantParams]:
    q = symmetric_params(float(np.max(np.abs(data))) if data.size else 0.0, 8)
    return quantize_values(data, q).astype(np.int8), q


def quantize_bias(data: np.ndarray, scale: float) -> tuple[np.ndarray, QuantParams]:
    q = QuantParams(scale, 0, 32, True)
    return quantize_values(data, q).astype(np.int32), q


# -- quantization -----------------------------------------------------------------------


def _dynamic_weights(graph: Graph) -> list[str]:
    ids = list(graph.weight_tensors())
    ids += [n.inputs[1] for n in graph.nodes if n.kind == "embedding_lookup"]
    return ids


def quantize(graph: Graph, scheme: str, stats: CalibrationStats | None = None) -> Graph:
    """Return a quantized copy of the float ``graph``.

    ``basic`` returns an unchanged copy; ``dynamic`` stores weight kernels as
    symmetric int8 and keeps float activations; ``float16`` stores all constants
    as half precision. The integer schemes need calibration ``stats``.
    """
    scheme = _scheme(scheme)
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    g = graph.clone()
    if scheme == "basic":
        return g
    if scheme == "dynamic":
        for tid in _dynamic_weights(g):
            t = g.tensors[tid]
            t.data, t.quant = quantize_weight(t.data)
            t.dtype = "i8"
        return g
    if scheme == "float16":
        for _, t in g.constants():
            t.data = t.data.astype(np.float16)
            t.dtype = "f16"
        return g
    if stats is None:
        raise ValueError(f"scheme {scheme} requires calibration stats")
    for node in g.nodes:
        if node.kind not in _QUANTIZABLE:
            raise UnsupportedOp(f"{node.kind} has no quantized kernel for {scheme}")

    bits = 8 if scheme.startswith("int8") else 16
    act_dtype = "i8" if bits == 8 else "i16"
    ts = g.tensors

    act_q: dict[str, QuantParams] = {}
    if ts[g.input_ids[0]].dtype != "i32":
        act_q[g.input_ids[0]] = activation_params(*stats[g.input_ids[0]], bits)
    for node in g.nodes:
        out = node.outputs[0]
        if node.kind == "maxpool2d":
            act_q[out] = act_q[node.inputs[0]]
        elif node.kind == "softmax":
            act_q[out] = softmax_output_params(bits)
        else:
            act_q[out] = activation_params(*stats[out], bits)

    for node in g.nodes:
        out_q = act_q[node.outputs[0]]
        in_q = act_q.get(node.inputs[0])
        if node.kind in ("dense", "conv2d", "batch_norm_frozen"):
            w, b = ts[node.inputs[1]], ts[node.inputs[2]]
            w.data, w.quant = quantize_weight(w.data)
            w.dtype = "i8"
            b.data, b.quant = quantize_bias(b.data, in_q.scale * w.quant.scale)
            b.dtype = "i32"
        elif node.kind == "embedding_lookup":
            t = ts[node.inputs[1]]
            t.data, t.quant = quantize_weight(t.data)
            t.dtype = "i8"
        elif node.kind in RECURRENT_KINDS:
            w, u = ts[node.inputs[1]], ts[node.inputs[2]]
            w.data, w.quant = quantize_weight(w.data)
            u.data, u.quant = quantize_weight(u.data)
            w.dtype = u.dtype = "i8"
            bias_scales = [in_q.scale * w.quant.scale]
            if node.kind == "gru_cell":
                bias_scales.append(out_q.scale * u.quant.scale)
            for tid, scale in zip(node.inputs[3:], bias_scales):
                b = ts[tid]
                b.data, b.quant = quantize_bias(b.data, scale)
                b.dtype = "i32"

    for tid, q in act_q.items():
        ts[tid].quant = q
        ts[tid].dtype = act_dtype

    if not scheme.endswith("only"):
        _add_float_boundary(g)
    g.validate()
    return g


def _add_float_boundary(g: Graph) -> None:
    """Keep float graph I/O with quantize/dequantize nodes at the edges."""
    ts = g.tensors
    in_id = g.input_ids[0]
    if ts[in_id].quant is not None:
        inner = f"{in_id}.q"
        ts[inner] = TensorInfo(ts[in_id].shape, ts[in_id].dtype, "activation", ts[in_id].quant)
        ts[in_id].dtype, ts[in_id].quant = "f32", None
        for node in g.nodes:
            node.inputs = tuple(inner if t == in_id else t for t in node.inputs)
        g.nodes.insert(0, OpNode("quantize", (in_id,), (inner,), {}, "input.quantize"))
    out_id = g.output_ids[0]
    inner = f"{out_id}.q"
    ts[inner] = TensorInfo(ts[out_id].shape, ts[out_id].dtype, "activation", ts[out_id].quant)
    ts[out_id].dtype, ts[out_id].quant = "f32", None
    last = g.nodes[-1]
    last.outputs = tuple(inner if t == out_id else t for t in last.outputs)
    g.nodes.append(OpNode("dequantize", (inner,), (out_id,), {}, "output.dequantize"))


# -- pruning and clustering ---------------------------------------------------------------


def prune_tensor(data: np.ndarray, sparsity: float) -> np.ndarray:
    flat = np.array(data, copy=True).reshape(-1)
    k = math.floor(sparsity * flat.size)
    order = np.argsort(np.abs(flat), kind="stable")
    flat[order[:k]] = 0
    return flat.reshape(data.shape)


def prune_magnitude(graph: Graph, sparsity: float) -> Graph:
    """Zero the floor(sparsity * n) smallest-magnitude entries of each kernel tensor.

    Shapes and dtypes are unchanged; biases are left alone. Ties go to the lower
    flat index.
    """
    if not 0.0 <= sparsity < 1.0:
        raise ValueError("sparsity must be in [0, 1)")
    g = graph.clone()
    for tid in g.weight_tensors():
        t = g.tensors[tid]
        t.data = prune_tensor(t.data, sparsity)
    return g


def _nearest(values: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # argmin returns the first minimum, so ties resolve to the lower centroid
    return np.argmin(np.abs(values[:, None] - centroids[None, :]), axis=1)


def kmeans_1d(values: np.ndarray, k: int, iterations: int = LLOYD_ITERATIONS) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm from linearly spaced centroids; returns (centroids, assignment)."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    centroids = np.linspace(v.min(), v.max(), k)
    for _ in range(iterations):
        assign = _nearest(v, centroids)
        for j in range(k):
            members = v[assign == j]
            if members.size:
                centroids[j] = members.mean()
    return centroids, _nearest(v, centroids)


def cluster_tensor(data: np.ndarray, k: int) -> np.ndarray:
    if np.unique(data).size <= k:
        return np.array(data, copy=True)
    centroids, assign = kmeans_1d(data, k)
    return centroids[assign].astype(data.dtype).reshape(data.shape)


def cluster_weights(graph: Graph, centroids: int = 16) -> Graph:
    if centroids < 2:
        raise ValueError("centroids must be >= 2")
    g = graph.clone()
    for tid in g.weight_tensors():
        t = g.tensors[tid]
        t.data = cluster_tensor(t.data, centroids)
    return g


def make_variant(graph: Graph, variant: VariantDescriptor, samples: SampleSet | None = None) -> Graph:
    """Apply prune -> cluster -> quantize, calibrating on the transformed float graph."""
    g = graph
    if variant.pruned:
        g = prune_magnitude(g, variant.sparsity)
    if variant.clustered:
        g = cluster_weights(g, variant.centroids)
    stats = None
    if variant.scheme in INTEGER_SCHEMES:
        if samples is None:
            raise ValueError(f"{variant.name} needs calibration samples")
        stats = calibrate(g, samples)
    out = quantize(g, variant.scheme, stats)
    out.name = f"{graph.name}@{variant.name}"
    return out

