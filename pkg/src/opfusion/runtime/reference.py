"""Unfused reference interpreter: one numpy implementation per operator kind."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .. import ops
from ..errors import ExecutionError
from ..graph import DTYPES, ECG, INPUT, INTERMEDIATE, WEIGHT

log = logging.getLogger(__name__)


@dataclass
class MemStats:
    bytes_read: int = 0
    bytes_written: int = 0
    materialized_count: int = 0
    materialized_bytes: int = 0
    kernel_invocations: int = 0
    stores: dict[str, int] = field(default_factory=dict)
    nonfinite: list[str] = field(default_factory=list)

    def record_store(self, g: ECG, tid: str, arr: np.ndarray) -> None:
        self.stores[tid] = self.stores.get(tid, 0) + 1
        self.bytes_written += arr.nbytes
        if g.tensors[tid].kind == INTERMEDIATE:
            self.materialized_count += 1
            self.materialized_bytes += arr.nbytes
        if arr.dtype.kind == "f" and not np.isfinite(arr).all():
            self.nonfinite.append(tid)
            log.warning("non-finite values in tensor %s", tid)

    def as_dict(self) -> dict:
        return {
            "bytes_read": self.bytes_read,
            "bytes_written": self.bytes_written,
            "materialized_count": self.materialized_count,
            "materialized_bytes": self.materialized_bytes,
            "kernel_invocations": self.kernel_invocations,
            "nonfinite": list(self.nonfinite),
        }


def _f64(x):
    return np.asarray(x, dtype=np.float64)


def _binary(fn):
    def impl(attrs, xs, n_out):
        return [fn(xs[0], xs[1])]
    return impl


def _unary(fn):
    def impl(attrs, xs, n_out):
        return [fn(xs[0])]
    return impl


def _bitshift(attrs, xs, n_out):
    x, s = xs
    scale = np.exp2(s).astype(x.dtype)
    if attrs.get("direction", "LEFT") == "LEFT":
        return [x * scale]
    return [np.floor(x / scale)]


def _clip(attrs, xs, n_out):
    x = xs[0]
    lo, hi = attrs.get("min"), attrs.get("max")
    out = x
    if lo is not None:
        out = np.maximum(out, x.dtype.type(lo))
    if hi is not None:
        out = np.minimum(out, x.dtype.type(hi))
    return [out]


def _recip(x):
    return np.reciprocal(x)


def _sigmoid(x):
    return (1 / (1 + np.exp(-x))).astype(x.dtype)


def _concat(attrs, xs, n_out):
    return [np.concatenate(xs, axis=attrs.get("axis", 0))]


def _slice(attrs, xs, n_out):
    params = ops.slice_params(attrs, xs[0].shape)
    return [xs[0][tuple(slice(s, e, st) for s, e, st in params)]]


def _split(attrs, xs, n_out):
    x = xs[0]
    axis = attrs.get("axis", 0)
    sizes = ops.split_sizes(attrs, x.shape, n_out)
    return list(np.split(x, np.cumsum(sizes)[:-1], axis=axis))


def _gather(attrs, xs, n_out):
    data, idx = xs
    axis = attrs.get("axis", 0) % data.ndim
    idx = idx.astype(np.int64)
    idx = np.where(idx < 0, idx + data.shape[axis], idx)
    return [np.take(data, idx, axis=axis)]


def _expand(attrs, xs, n_out):
    shape = ops.broadcast_shapes(xs[0].shape, tuple(attrs["shape"]))
    return [np.broadcast_to(xs[0], shape)]


def _resize(attrs, xs, n_out):
    x = xs[0]
    sizes = ops.resize_sizes(attrs, x.shape)
    index = [(np.arange(o) * i) // o for i, o in zip(x.shape, sizes)]
    return [x[np.ix_(*index)]]


def _reduce(kind):
    def impl(attrs, xs, n_out):
        x = xs[0]
        axes = ops.reduce_axes(attrs, x.ndim)
        keep = bool(attrs.get("keepdims", 1))
        if kind == "sum":
            r = np.sum(x, axis=axes, keepdims=keep, dtype=np.float64)
        elif kind == "prod":
            r = np.prod(x, axis=axes, keepdims=keep, dtype=np.float64)
        else:
            r = np.sum(x, axis=axes, keepdims=keep, dtype=np.float64) / ops.numel(x.shape[a] for a in axes)
        return [np.asarray(r).astype(x.dtype)]
    return impl


def _softmax(attrs, xs, n_out):
    x = xs[0]
    axis = attrs.get("axis", -1)
    z = _f64(x)
    z = np.exp(z - z.max(axis=axis, keepdims=True))
    return [(z / z.sum(axis=axis, keepdims=True)).astype(x.dtype)]


def _gemm(attrs, xs, n_out):
    a, b = _f64(xs[0]), _f64(xs[1])
    if attrs.get("transA", 0):
        a = a.T
    if attrs.get("transB", 0):
        b = b.T
    y = attrs.get("alpha", 1.0) * (a @ b)
    if len(xs) == 3:
        y = y + attrs.get("beta", 1.0) * _f64(xs[2])
    return [y.astype(xs[0].dtype)]


def _matmul(attrs, xs, n_out):
    return [np.matmul(_f64(xs[0]), _f64(xs[1])).astype(xs[0].dtype)]


def _windows(x, kernel, attrs, pad_value):
    strides, pads, dil, (oh, ow) = ops.conv_geometry(attrs, x.shape, kernel)
    xp = np.pad(x, ((0, 0), (0, 0), (pads[0], pads[2]), (pads[1], pads[3])), constant_values=pad_value)
    span = [dil[i] * (kernel[i] - 1) + 1 for i in range(2)]
    win = sliding_window_view(xp, span, axis=(2, 3))
    win = win[:, :, :: strides[0], :: strides[1], :: dil[0], :: dil[1]]
    return win[:, :, :oh, :ow]


def _conv(attrs, xs, n_out):
    x, w = xs[0], xs[1]
    group = attrs.get("group", 1)
    n, c = x.shape[:2]
    m, cg, kh, kw = w.shape
    win = _windows(x, (kh, kw), attrs, 0.0)
    oh, ow = win.shape[2:4]
    win = win.reshape(n, group, cg, oh, ow, kh, kw)
    wg = w.reshape(group, m // group, cg, kh, kw)
    y = np.einsum("ngchwij,gmcij->ngmhw", win, wg, dtype=np.float64).reshape(n, m, oh, ow)
    if len(xs) == 3:
        y = y + _f64(xs[2]).reshape(1, m, 1, 1)
    return [y.astype(x.dtype)]


def _maxpool(attrs, xs, n_out):
    x = xs[0]
    win = _windows(x, attrs["kernel_shape"], attrs, -np.inf)
    return [win.max(axis=(4, 5)).astype(x.dtype)]


def _avgpool(attrs, xs, n_out):
    x = xs[0]
    k = attrs["kernel_shape"]
    total = _windows(_f64(x), k, attrs, 0.0).sum(axis=(4, 5))
    if attrs.get("count_include_pad", 0):
        count = k[0] * k[1]
    else:
        count = _windows(np.ones((1, 1) + x.shape[2:]), k, attrs, 0.0).sum(axis=(4, 5))
    return [(total / count).astype(x.dtype)]


def _reorganize(attrs_to_shape):
    def impl(attrs, xs, n_out):
        return [xs[0].reshape(attrs_to_shape(attrs, xs[0].shape))]
    return impl


def _transpose(attrs, xs, n_out):
    return [np.transpose(xs[0], ops.transpose_perm(attrs, xs[0].ndim))]


def _depth_to_space(attrs, xs, n_out):
    x = xs[0]
    b = attrs["blocksize"]
    n, c, h, w = x.shape
    c2 = c // (b * b)
    if attrs.get("mode", "DCR") == "DCR":
        y = x.reshape(n, b, b, c2, h, w).transpose(0, 3, 4, 1, 5, 2)
    else:
        y = x.reshape(n, c2, b, b, h, w).transpose(0, 1, 4, 2, 5, 3)
    return [y.reshape(n, c2, h * b, w * b)]


IMPLS: dict[str, Callable] = {
    "Add": _binary(np.add),
    "Sub": _binary(np.subtract),
    "Mul": _binary(np.multiply),
    "Div": _binary(np.divide),
    "BitShift": _bitshift,
    "Recip": _unary(_recip),
    "Sqrt": _unary(np.sqrt),
    "Square": _unary(np.square),
    "Abs": _unary(np.abs),
    "Exp": _unary(np.exp),
    "Log": _unary(np.log),
    "Relu": _unary(lambda x: np.maximum(x, x.dtype.type(0))),
    "Sigmoid": _unary(_sigmoid),
    "Tanh": _unary(np.tanh),
    "Clip": _clip,
    "Concat": _concat,
    "Slice": _slice,
    "Split": _split,
    "Gather": _gather,
    "Expand": _expand,
    "Resize": _resize,
    "ReduceSum": _reduce("sum"),
    "ReduceProd": _reduce("prod"),
    "ReduceMean": _reduce("mean"),
    "Softmax": _softmax,
    "GEMM": _gemm,
    "MatMul": _matmul,
    "Conv2D": _conv,
    "MaxPool": _maxpool,
    "AveragePool": _avgpool,
    "Reshape": _reorganize(lambda a, s: ops.reshape_target(a, s)),
    "Flatten": _reorganize(lambda a, s: ops.infer_op_shapes("Flatten", a, [s], 1)[0]),
    "Squeeze": _reorganize(lambda a, s: ops.infer_op_shapes("Squeeze", a, [s], 1)[0]),
    "Unsqueeze": _reorganize(lambda a, s: ops.infer_op_shapes("Unsqueeze", a, [s], 1)[0]),
    "Transpose": _transpose,
    "DepthToSpace": _depth_to_space,
}
assert set(IMPLS) == set(ops.REGISTRY)


def apply_op(kind: str, attrs: dict, arrays: list[np.ndarray], n_out: int = 1) -> list[np.ndarray]:
    with np.errstate(all="ignore"):
        return IMPLS[kind](attrs, arrays, n_out)


def apply_views(arr: np.ndarray, views) -> np.ndarray:
    for vk, va in views:
        arr = apply_op(vk, va, [arr])[0]
    return arr


def operator_inputs(g: ECG, op, env: dict[str, np.ndarray]) -> list[np.ndarray]:
    arrays = []
    for slot, t in enumerate(op.inputs):
        if t not in env:
            raise ExecutionError(f"operator {op.id!r}: tensor {t!r} not available")
        arrays.append(apply_views(env[t], op.input_views.get(slot, [])))
    return arrays


def run_operator(g: ECG, op_id: str, env: dict[str, np.ndarray], stats: MemStats) -> None:
    """Execute one operator as its own kernel, materializing every output."""
    op = g.operators[op_id]
    arrays = operator_inputs(g, op, env)
    stats.bytes_read += sum(env[t].nbytes for t in dict.fromkeys(op.inputs))
    outs = apply_op(op.kind, op.attributes, arrays, len(op.outputs))
    stats.kernel_invocations += 1
    for t, arr in zip(op.outputs, outs):
        spec = g.tensors[t]
        arr = np.array(arr, dtype=DTYPES[spec.dtype], order="C")
        if arr.shape != tuple(spec.shape):
            raise ExecutionError(f"operator {op_id!r} produced {arr.shape} for {t!r}, expected {spec.shape}")
        env[t] = arr
        stats.record_store(g, t, arr)


def initial_env(g: ECG, inputs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    env: dict[str, np.ndarray] = {}
    for tid, spec in g.tensors.items():
        if spec.kind == WEIGHT and spec.data is not None:
            env[tid] = np.asarray(spec.data, dtype=DTYPES[spec.dtype])
        elif spec.kind in (INPUT, WEIGHT):
            if tid not in inputs:
                raise ExecutionError(f"missing value for {spec.kind} tensor {tid!r}")
            arr = np.asarray(inputs[tid], dtype=DTYPES[spec.dtype])
            if arr.shape != tuple(spec.shape):
                raise ExecutionError(f"value for {tid!r} has shape {arr.shape}, expected {spec.shape}")
            env[tid] = arr
    return env


def eval_reference(g: ECG, inputs: dict[str, np.ndarray]) -> tuple[dict[str, np.ndarray], MemStats]:
    """Run every operator in topological order, materializing all intermediates."""
    env = initial_env(g, inputs)
    stats = MemStats()
    for oid in g.topo_order:
        run_operator(g, oid, env, stats)
    return {t: env[t] for t in g.outputs()}, stats


def random_inputs(g: ECG, seed: int = 0, low: float = -1.0, high: float = 1.0) -> dict[str, np.ndarray]:
    """Seeded values for model inputs and for weights that carry no data."""
    rng = np.random.default_rng(seed)
    values = {}
    for tid, spec in g.tensors.items():
        if spec.kind not in (INPUT, WEIGHT) or spec.data is not None:
            continue
        if spec.dtype == "i64":
            extent = _gather_extent(g, tid)
            values[tid] = rng.integers(0, extent, size=spec.shape, dtype=np.int64)
        else:
            values[tid] = rng.uniform(low, high, size=spec.shape).astype(DTYPES[spec.dtype])
    return values


def _gather_extent(g: ECG, tid: str) -> int:
    extents = []
    for c in g.tensors[tid].consumers:
        op = g.operators[c]
        if op.kind == "Gather" and op.inputs[1] == tid:
            data = g.tensors[op.inputs[0]].shape
            extents.append(data[op.attributes.get("axis", 0) % len(data)])
    if not extents:
        raise ExecutionError(f"integer tensor {tid!r} has no data and feeds no Gather")
    return min(extents)
