"""Float and integer kernels plus the graph executor.

Float kernels run in single precision. Integer kernels follow one fixed-point
convention so any two implementations agree bit-for-bit:

* products accumulate exactly in 64-bit integers (int8 paths stay within the
  32-bit range);
* requantization multiplies the accumulator by the real scale ratio in double
  precision, rounds half away from zero, adds the output zero point and clamps;
* element-wise non-linearities are tables indexed by the input code, each
  entry computed in double precision with :mod:`math`;
* recurrent gates use fixed formats: pre-activations Q3.12, gate outputs Q0.15
  and the LSTM cell state Q4.11, all stored in 16 bits.
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteOutput, ShapeError, UnsupportedOp
from .graph import Graph, OpNode, QuantParams

LEAKY_ALPHA = 0.3
Q15 = 32768
I16_MIN, I16_MAX = -32768, 32767


# -- scalar helpers -------------------------------------------------------------


def round_half_away(v: np.ndarray) -> np.ndarray:
    # a - floor(a) is exact in binary floating point, unlike a + 0.5
    a = np.abs(v)
    f = np.floor(a)
    r = f + (a - f >= 0.5)
    return np.where(v >= 0, r, -r)


def round_scalar(v: float) -> int:
    a = abs(v)
    f = math.floor(a)
    r = f + (1 if a - f >= 0.5 else 0)
    return r if v >= 0 else -r


def requantize_acc(acc: np.ndarray, ratio: float, zero_point: int, qmin: int, qmax: int) -> np.ndarray:
    scaled = round_half_away(np.asarray(acc, dtype=np.int64).astype(np.float64) * ratio)
    return np.clip(scaled + zero_point, qmin, qmax).astype(np.int64)


def _sat16(v: np.ndarray) -> np.ndarray:
    return np.clip(v, I16_MIN, I16_MAX)


def sigmoid_scalar(v: float) -> float:
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


SCALAR_FUNCS: dict[str, Callable[[float], float]] = {
    "relu": lambda v: v if v > 0.0 else 0.0,
    "leaky_relu": lambda v: v if v > 0.0 else LEAKY_ALPHA * v,
    "tanh": math.tanh,
    "sigmoid": sigmoid_scalar,
}


def _fixed_table(fn: str, in_frac_bits: int) -> np.ndarray:
    f = SCALAR_FUNCS[fn]
    step = 1.0 / (1 << in_frac_bits)
    out = np.empty(65536, dtype=np.int64)
    for i, q in enumerate(range(I16_MIN, I16_MAX + 1)):
        out[i] = min(max(round_scalar(f(q * step) * Q15), I16_MIN), I16_MAX)
    return out


@lru_cache(maxsize=None)
def gate_table(fn: str, in_frac_bits: int) -> np.ndarray:
    """Q(15-in_frac_bits).in_frac_bits int16 input -> Q0.15 output, indexed by q + 32768."""
    table = _fixed_table(fn, in_frac_bits)
    table.flags.writeable = False
    return table


def _lookup(table: np.ndarray, q: np.ndarray) -> np.ndarray:
    return table[np.asarray(q, dtype=np.int64) - I16_MIN]


@lru_cache(maxsize=4096)
def activation_table(fn: str, qin: QuantParams, qout: QuantParams) -> np.ndarray:
    out = np.array([_activation_code(fn, q, qin, qout) for q in range(qin.qmin, qin.qmax + 1)], dtype=np.int64)
    out.flags.writeable = False
    return out


# -- float kernels ---------------------------------------------------------------


def dense_f32(x: np.ndarray, w: np.ndarray, b: np.ndarray, flatten: bool = False) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if flatten:
        x = x.reshape(-1)
    return (x @ np.asarray(w, dtype=np.float32) + np.asarray(b, dtype=np.float32)).astype(np.float32)


def _patches(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    h, w, _ = x.shape
    if h < k or w < k:
        raise ShapeError(f"window {k} exceeds input {h}x{w}")
    win = sliding_window_view(x, (k, k), axis=(0, 1))[::stride, ::stride]  # (ho, wo, c, k, k)
    return win.transpose(0, 1, 3, 4, 2)  # (ho, wo, k, k, c)


def conv2d_f32(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
    k, _, cin, cout = w.shape
    p = _patches(np.asarray(x, dtype=np.float32), k, stride)
    ho, wo = p.shape[:2]
    cols = p.reshape(ho * wo, k * k * cin)
    y = cols @ np.asarray(w, dtype=np.float32).reshape(k * k * cin, cout) + np.asarray(b, dtype=np.float32)
    return y.reshape(ho, wo, cout).astype(np.float32)


def maxpool2d(x: np.ndarray, pool: int, stride: int) -> np.ndarray:
    return _patches(x, pool, stride).max(axis=(2, 3))


def global_avg_pool2d_f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).mean(axis=(0, 1), dtype=np.float32)


def _sigmoid_f32(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(np.float32)


def activation_f32(x: np.ndarray, fn: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if fn == "relu":
        return np.maximum(x, np.float32(0))
    if fn == "leaky_relu":
        return np.where(x > 0, x, np.float32(LEAKY_ALPHA) * x).astype(np.float32)
    if fn == "tanh":
        return np.tanh(x)
    if fn == "sigmoid":
        return _sigmoid_f32(x)
    raise UnsupportedOp(f"activation {fn}")


def batch_norm_f32(x: np.ndarray, scale: np.ndarray, shift: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=np.float32) * np.asarray(scale, dtype=np.float32) + np.asarray(shift, dtype=np.float32)).astype(np.float32)


def softmax_f32(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)


def embedding_f32(ids: np.ndarray, table: np.ndarray) -> np.ndarray:
    return np.asarray(table, dtype=np.float32)[np.asarray(ids, dtype=np.int64)]


def simple_rnn_f32(x, w, u, b) -> np.ndarray:
    w, u, b = (np.asarray(a, dtype=np.float32) for a in (w, u, b))
    units = u.shape[0]
    h = np.zeros(units, dtype=np.float32)
    out = np.empty((x.shape[0], units), dtype=np.float32)
    for t in range(x.shape[0]):
        h = np.tanh(x[t] @ w + h @ u + b)
        out[t] = h
    return out


def lstm_f32(x, w, u, b) -> np.ndarray:
    """Gate order i, f, g, o."""
    w, u, b = (np.asarray(a, dtype=np.float32) for a in (w, u, b))
    n = u.shape[0]
    h = np.zeros(n, dtype=np.float32)
    c = np.zeros(n, dtype=np.float32)
    out = np.empty((x.shape[0], n), dtype=np.float32)
    for t in range(x.shape[0]):
        z = x[t] @ w + h @ u + b
        i, f, o = _sigmoid_f32(z[:n]), _sigmoid_f32(z[n : 2 * n]), _sigmoid_f32(z[3 * n :])
        g = np.tanh(z[2 * n : 3 * n])
        c = f * c + i * g
        h = o * np.tanh(c)
        out[t] = h
    return out


def gru_f32(x, w, u, b_in, b_rec) -> np.ndarray:
    """Reset-after GRU, gate order z, r, h."""
    w, u, b_in, b_rec = (np.asarray(a, dtype=np.float32) for a in (w, u, b_in, b_rec))
    n = u.shape[0]
    h = np.zeros(n, dtype=np.float32)
    out = np.empty((x.shape[0], n), dtype=np.float32)
    for t in range(x.shape[0]):
        mx = x[t] @ w + b_in
        mh = h @ u + b_rec
        z = _sigmoid_f32(mx[:n] + mh[:n])
        r = _sigmoid_f32(mx[n : 2 * n] + mh[n : 2 * n])
        hh = np.tanh(mx[2 * n :] + r * mh[2 * n :])
        h = z * h + (np.float32(1) - z) * hh
        out[t] = h
    return out


# -- integer kernels -----------------------------------------------------------------


def quantize_values(x: np.ndarray, q: QuantParams) -> np.ndarray:
    v = round_half_away(np.asarray(x, dtype=np.float64) / q.scale)
    return np.clip(v + q.zero_point, q.qmin, q.qmax).astype(np.int64)


def dequantize_values(x: np.ndarray, q: QuantParams) -> np.ndarray:
    return (q.scale * (np.asarray(x, dtype=np.int64) - q.zero_point).astype(np.float64)).astype(np.float32)


def requantize_int(x: np.ndarray, qin: QuantParams, qout: QuantParams) -> np.ndarray:
    acc = np.asarray(x, dtype=np.int64) - qin.zero_point
    return requantize_acc(acc, qin.scale / qout.scale, qout.zero_point, qout.qmin, qout.qmax)


def dense_int(x, qx: QuantParams, w, qw: QuantParams, b, qy: QuantParams, flatten: bool = False) -> np.ndarray:
    xi = np.asarray(x, dtype=np.int64) - qx.zero_point
    if flatten:
        xi = xi.reshape(-1)
    acc = xi @ np.asarray(w, dtype=np.int64) + np.asarray(b, dtype=np.int64)
    return requantize_acc(acc, (qx.scale * qw.scale) / qy.scale, qy.zero_point, qy.qmin, qy.qmax)


def conv2d_int(x, qx: QuantParams, w, qw: QuantParams, b, qy: QuantParams, stride: int) -> np.ndarray:
    k, _, cin, cout = w.shape
    p = _patches(np.asarray(x, dtype=np.int64) - qx.zero_point, k, stride)
    ho, wo = p.shape[:2]
    acc = p.reshape(ho * wo, k * k * cin) @ np.asarray(w, dtype=np.int64).reshape(k * k * cin, cout)
    acc = acc + np.asarray(b, dtype=np.int64)
    y = requantize_acc(acc, (qx.scale * qw.scale) / qy.scale, qy.zero_point, qy.qmin, qy.qmax)
    return y.reshape(ho, wo, cout)


def global_avg_pool2d_int(x, qx: QuantParams, qy: QuantParams) -> np.ndarray:
    h, w, _ = x.shape
    acc = (np.asarray(x, dtype=np.int64) - qx.zero_point).sum(axis=(0, 1))
    return requantize_acc(acc, qx.scale / (qy.scale * (h * w)), qy.zero_point, qy.qmin, qy.qmax)


def batch_norm_int(x, qx: QuantParams, scale, qs: QuantParams, shift, qy: QuantParams) -> np.ndarray:
    acc = (np.asarray(x, dtype=np.int64) - qx.zero_point) * np.asarray(scale, dtype=np.int64)
    acc = acc + np.asarray(shift, dtype=np.int64)
    return requantize_acc(acc, (qx.scale * qs.scale) / qy.scale, qy.zero_point, qy.qmin, qy.qmax)


def _activation_code(fn: str, q: int, qx: QuantParams, qy: QuantParams) -> int:
    r = round_scalar(SCALAR_FUNCS[fn](qx.scale * (q - qx.zero_point)) / qy.scale)
    return min(max(r + qy.zero_point, qy.qmin), qy.qmax)


def activation_int(x, fn: str, qx: QuantParams, qy: QuantParams) -> np.ndarray:
    xi = np.asarray(x, dtype=np.int64)
    if qx.bits <= 8:
        return activation_table(fn, qx, qy)[xi - qx.qmin]
    # 16-bit inputs: evaluate only the codes that occur
    codes, inverse = np.unique(xi, return_inverse=True)
    mapped = np.array([_activation_code(fn, int(q), qx, qy) for q in codes], dtype=np.int64)
    return mapped[inverse].reshape(xi.shape)


def softmax_int(x, qx: QuantParams, qy: QuantParams) -> np.ndarray:
    """Softmax over the last axis, evaluated in double precision per row."""
    xi = np.asarray(x, dtype=np.int64)
    rows = xi.reshape(-1, xi.shape[-1])
    out = np.empty(rows.shape, dtype=np.int64)
    for r, row in enumerate(rows.tolist()):
        vals = [qx.scale * (q - qx.zero_point) for q in row]
        top = max(vals)
        exps = [math.exp(v - top) for v in vals]
        total = math.fsum(exps)
        for j, e in enumerate(exps):
            rq = round_scalar((e / total) / qy.scale)
            out[r, j] = min(max(rq + qy.zero_point, qy.qmin), qy.qmax)
    return out.reshape(xi.shape)


def embedding_int(ids, table, qt: QuantParams, qy: QuantParams) -> np.ndarray:
    rows = np.asarray(table, dtype=np.int64)[np.asarray(ids, dtype=np.int64)]
    return requantize_acc(rows, qt.scale / qy.scale, qy.zero_point, qy.qmin, qy.qmax)


def _rnn_ratios(qx: QuantParams, qw: QuantParams, qh: QuantParams, qu: QuantParams) -> tuple[float, float]:
    # accumulator -> Q3.12 pre-activation
    return (qx.scale * qw.scale) * 4096.0, (qh.scale * qu.scale) * 4096.0


def _rq(acc: np.ndarray, ratio: float) -> np.ndarray:
    return round_half_away(acc.astype(np.float64) * ratio).astype(np.int64)


def _hidden_out(v: np.ndarray, qh: QuantParams) -> np.ndarray:
    return np.clip(round_half_away(v).astype(np.int64) + qh.zero_point, qh.qmin, qh.qmax)


def simple_rnn_int(x, qx, w, qw, u, qu, b, qh) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64) - qx.zero_point
    w, u, b = (np.asarray(a, dtype=np.int64) for a in (w, u, b))
    rx, rh = _rnn_ratios(qx, qw, qh, qu)
    tanh = gate_table("tanh", 12)
    out_ratio = (1.0 / Q15) / qh.scale
    h = np.full(u.shape[0], qh.zero_point, dtype=np.int64)
    out = np.empty((x.shape[0], u.shape[0]), dtype=np.int64)
    for t in range(x.shape[0]):
        pre = _sat16(_rq(x[t] @ w + b, rx) + _rq((h - qh.zero_point) @ u, rh))
        h = _hidden_out(_lookup(tanh, pre).astype(np.float64) * out_ratio, qh)
        out[t] = h
    return out


def lstm_int(x, qx, w, qw, u, qu, b, qh) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64) - qx.zero_point
    w, u, b = (np.asarray(a, dtype=np.int64) for a in (w, u, b))
    n = u.shape[0]
    rx, rh = _rnn_ratios(qx, qw, qh, qu)
    sig, tanh, tanh_c = gate_table("sigmoid", 12), gate_table("tanh", 12), gate_table("tanh", 11)
    out_ratio = (1.0 / (1 << 30)) / qh.scale
    h = np.full(n, qh.zero_point, dtype=np.int64)
    c = np.zeros(n, dtype=np.int64)  # Q4.11
    out = np.empty((x.shape[0], n), dtype=np.int64)
    for t in range(x.shape[0]):
        pre = _sat16(_rq(x[t] @ w + b, rx) + _rq((h - qh.zero_point) @ u, rh))
        i = _lookup(sig, pre[:n])
        f = _lookup(sig, pre[n : 2 * n])
        g = _lookup(tanh, pre[2 * n : 3 * n])
        o = _lookup(sig, pre[3 * n :])
        c = _sat16(_rq(f * c, 1.0 / Q15) + _rq(i * g, 1.0 / (1 << 19)))
        h = _hidden_out((o * _lookup(tanh_c, c)).astype(np.float64) * out_ratio, qh)
        out[t] = h
    return out


def gru_int(x, qx, w, qw, u, qu, b_in, b_rec, qh) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64) - qx.zero_point
    w, u, b_in, b_rec = (np.asarray(a, dtype=np.int64) for a in (w, u, b_in, b_rec))
    n = u.shape[0]
    rx, rh = _rnn_ratios(qx, qw, qh, qu)
    sig, tanh = gate_table("sigmoid", 12), gate_table("tanh", 12)
    k1 = 1.0 / Q15
    k2 = (1.0 / (1 << 30)) / qh.scale
    h = np.full(n, qh.zero_point, dtype=np.int64)
    out = np.empty((x.shape[0], n), dtype=np.int64)
    for t in range(x.shape[0]):
        ax = x[t] @ w + b_in
        hp = h - qh.zero_point
        ah = hp @ u + b_rec
        z = _lookup(sig, _sat16(_rq(ax[:n], rx) + _rq(ah[:n], rh)))
        r = _lookup(sig, _sat16(_rq(ax[n : 2 * n], rx) + _rq(ah[n : 2 * n], rh)))
        rec = _sat16(_rq(ah[2 * n :], rh))
        hh = _lookup(tanh, _sat16(_rq(ax[2 * n :], rx) + _rq(r * rec, k1)))
        v = (z * hp).astype(np.float64) * k1 + ((Q15 - z) * hh).astype(np.float64) * k2
        h = _hidden_out(v, qh)
        out[t] = h
    return out


# -- dynamic-range (hybrid) kernels ------------------------------------------------


def _dynamic_quantize(x: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-call symmetric int8 quantization of a float activation."""
    amax = float(np.max(np.abs(x))) if x.size else 0.0
    scale = amax / 127.0 if amax > 0 else 1.0
    q = np.clip(round_half_away(np.asarray(x, dtype=np.float64) / scale), -127, 127).astype(np.int64)
    return q, scale


def hybrid_matmul(x: np.ndarray, w_q: np.ndarray, w_scale: float) -> np.ndarray:
    q, s = _dynamic_quantize(x)
    acc = q @ np.asarray(w_q, dtype=np.int64)
    return (acc.astype(np.float64) * (s * w_scale)).astype(np.float32)


def dense_hybrid(x, w, qw: QuantParams, b, flatten: bool = False) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if flatten:
        x = x.reshape(-1)
    if x.ndim == 1:
        y = hybrid_matmul(x, w, qw.scale)
    else:
        y = np.stack([hybrid_matmul(row, w, qw.scale) for row in x])
    return (y + np.asarray(b, dtype=np.float32)).astype(np.float32)


def conv2d_hybrid(x, w, qw: QuantParams, b, stride: int) -> np.ndarray:
    k, _, cin, cout = w.shape
    p = _patches(np.asarray(x, dtype=np.float32), k, stride)
    ho, wo = p.shape[:2]
    y = hybrid_matmul(p.reshape(ho * wo, k * k * cin), np.asarray(w).reshape(k * k * cin, cout), qw.scale)
    return (y + np.asarray(b, dtype=np.float32)).reshape(ho, wo, cout).astype(np.float32)


# -- executor ---------------------------------------------------------------------


def _is_quantized(graph: Graph, tid: str) -> bool:
    t = graph.tensors[tid]
    return t.quant is not None and t.role not in ("weight", "bias")


def _const(graph: Graph, tid: str) -> np.ndarray:
    return graph.tensors[tid].data


def _dequant_const(graph: Graph, tid: str) -> np.ndarray:
    t = graph.tensors[tid]
    if t.quant is not None:
        return dequantize_values(t.data, t.quant)
    return np.asarray(t.data, dtype=np.float32)


def run_node(graph: Graph, node: OpNode, values: dict[str, np.ndarray]) -> np.ndarray:
    ts = graph.tensors
    x = values[node.inputs[0]]
    out_q = ts[node.outputs[0]].quant
    kind = node.kind

    if kind == "quantize":
        return quantize_values(x, out_q)
    if kind == "dequantize":
        return dequantize_values(x, ts[node.inputs[0]].quant)
    if kind == "requantize":
        return requantize_int(x, ts[node.inputs[0]].quant, out_q)

    int_path = _is_quantized(graph, node.inputs[0]) if kind != "embedding_lookup" else out_q is not None
    if int_path:
        qx = ts[node.inputs[0]].quant
        if kind == "dense":
            w, b = (ts[t] for t in node.inputs[1:3])
            return dense_int(x, qx, w.data, w.quant, b.data, out_q, node.attrs.get("flatten", False))
        if kind == "conv2d":
            w, b = (ts[t] for t in node.inputs[1:3])
            return conv2d_int(x, qx, w.data, w.quant, b.data, out_q, node.attrs["stride"])
        if kind == "maxpool2d":
            return maxpool2d(np.asarray(x, dtype=np.int64), node.attrs["pool"], node.attrs["stride"])
        if kind == "global_avg_pool2d":
            return global_avg_pool2d_int(x, qx, out_q)
        if kind == "batch_norm_frozen":
            s, sh = (ts[t] for t in node.inputs[1:3])
            return batch_norm_int(x, qx, s.data, s.quant, sh.data, out_q)
        if kind == "activation":
            return activation_int(x, node.attrs["fn"], qx, out_q)
        if kind == "softmax":
            return softmax_int(x, qx, out_q)
        if kind == "embedding_lookup":
            t = ts[node.inputs[1]]
            return embedding_int(x, t.data, t.quant, out_q)
        if kind in ("simple_rnn_cell", "lstm_cell", "gru_cell"):
            w, u = ts[node.inputs[1]], ts[node.inputs[2]]
            biases = [ts[t].data for t in node.inputs[3:]]
            fn = {"simple_rnn_cell": simple_rnn_int, "lstm_cell": lstm_int, "gru_cell": gru_int}[kind]
            return fn(x, qx, w.data, w.quant, u.data, u.quant, *biases, out_q)
        raise UnsupportedOp(f"no integer kernel for {kind}")

    # float activations; weights may be f32, f16, or int8 (dynamic range)
    if kind in ("dense", "conv2d"):
        w, b = ts[node.inputs[1]], ts[node.inputs[2]]
        if w.quant is not None:
            if kind == "dense":
                return dense_hybrid(x, w.data, w.quant, _dequant_const(graph, node.inputs[2]), node.attrs.get("flatten", False))
            return conv2d_hybrid(x, w.data, w.quant, _dequant_const(graph, node.inputs[2]), node.attrs["stride"])
        if kind == "dense":
            return dense_f32(x, w.data, b.data, node.attrs.get("flatten", False))
        return conv2d_f32(x, w.data, b.data, node.attrs["stride"])
    if kind == "maxpool2d":
        return maxpool2d(np.asarray(x, dtype=np.float32), node.attrs["pool"], node.attrs["stride"])
    if kind == "global_avg_pool2d":
        return global_avg_pool2d_f32(x)
    if kind == "activation":
        return activation_f32(x, node.attrs["fn"])
    if kind == "batch_norm_frozen":
        return batch_norm_f32(x, *(_dequant_const(graph, t) for t in node.inputs[1:3]))
    if kind == "softmax":
        return softmax_f32(x)
    if kind == "embedding_lookup":
        return embedding_f32(x, _dequant_const(graph, node.inputs[1]))
    if kind in ("simple_rnn_cell", "lstm_cell", "gru_cell"):
        x = np.asarray(x, dtype=np.float32)
        w, u = ts[node.inputs[1]], ts[node.inputs[2]]
        biases = [_dequant_const(graph, t) for t in node.inputs[3:]]
        if w.quant is not None:
            return _hybrid_rnn(kind, x, w, u, biases)
        fn = {"simple_rnn_cell": simple_rnn_f32, "lstm_cell": lstm_f32, "gru_cell": gru_f32}[kind]
        return fn(x, w.data, u.data, *biases)
    raise UnsupportedOp(f"no float kernel for {kind}")


def _hybrid_rnn(kind: str, x: np.ndarray, w, u, biases: list[np.ndarray]) -> np.ndarray:
    """Recurrent cells with int8 weights: both matmuls run through the hybrid path."""
    n = u.shape[0]
    h = np.zeros(n, dtype=np.float32)
    c = np.zeros(n, dtype=np.float32)
    out = np.empty((x.shape[0], n), dtype=np.float32)
    for t in range(x.shape[0]):
        mx = hybrid_matmul(x[t], w.data, w.quant.scale)
        mh = hybrid_matmul(h, u.data, u.quant.scale)
        if kind == "simple_rnn_cell":
            h = np.tanh(mx + mh + biases[0])
        elif kind == "lstm_cell":
            z = mx + mh + biases[0]
            i, f, o = _sigmoid_f32(z[:n]), _sigmoid_f32(z[n : 2 * n]), _sigmoid_f32(z[3 * n :])
            c = f * c + i * np.tanh(z[2 * n : 3 * n])
            h = o * np.tanh(c)
        else:
            mx = mx + biases[0]
            mh = mh + biases[1]
            z = _sigmoid_f32(mx[:n] + mh[:n])
            r = _sigmoid_f32(mx[n : 2 * n] + mh[n : 2 * n])
            hh = np.tanh(mx[2 * n :] + r * mh[2 * n :])
            h = z * h + (np.float32(1) - z) * hh
        out[t] = h.astype(np.float32)
    return out


def execute(graph: Graph, x: np.ndarray, keep: bool = False) -> np.ndarray | dict[str, np.ndarray]:
    """Run the graph on one input. With ``keep`` return every tensor value."""
    inp = graph.input
    x = np.asarray(x)
    if tuple(x.shape) != tuple(inp.shape):
        raise ShapeError(f"input shape {x.shape} does not match graph input {inp.shape}")
    values = {graph.input_ids[0]: x}
    for node in graph.nodes:
        values[node.outputs[0]] = run_node(graph, node, values)
    if keep:
        return values
    return values[graph.output_ids[0]]


def run_reference(graph: Graph, x: np.ndarray) -> np.ndarray:
    """Single-precision forward pass of the float graph; the error oracle."""
    y = execute(graph, x)
    if not np.all(np.isfinite(y)):
        raise NonFiniteOutput(f"{graph.name}: non-finite reference output")
    return y
