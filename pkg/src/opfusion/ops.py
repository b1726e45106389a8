"""Operator registry: arity, mapping type, algebraic properties, shapes, FLOPs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

from .errors import GraphError, ShapeError
from .mapping import MappingType, most_complex

Shape = tuple[int, ...]

ASSOCIATIVE = "associative"
COMMUTATIVE = "commutative"
DISTRIBUTIVE = "distributive"


def numel(shape: Sequence[int]) -> int:
    return math.prod(shape)


def broadcast_shapes(*shapes: Sequence[int]) -> Shape:
    rank = max((len(s) for s in shapes), default=0)
    out = []
    for i in range(rank):
        dims = {s[len(s) - rank + i] for s in shapes if len(s) - rank + i >= 0}
        dims.discard(1)
        if len(dims) > 1:
            raise ShapeError(f"shapes {' and '.join(str(list(s)) for s in shapes)} are not broadcastable")
        out.append(dims.pop() if dims else 1)
    return tuple(out)


def _axis(axis: int, rank: int) -> int:
    a = axis + rank if axis < 0 else axis
    if not 0 <= a < rank:
        raise ShapeError(f"axis {axis} out of range for rank {rank}")
    return a


@dataclass(frozen=True)
class OpDef:
    name: str
    inputs: tuple[int, int]
    outputs: tuple[int, int | None]
    mapping: MappingType | None  # None: element-wise, decided by broadcasting
    shape_fn: Callable[[dict, list[Shape], int], list[Shape]]
    flop_fn: Callable[[dict, list[Shape], list[Shape]], int]
    properties: frozenset[str] = frozenset()
    defaults: dict[str, Any] = field(default_factory=dict)

    @property
    def elementwise(self) -> bool:
        return self.mapping is None


REGISTRY: dict[str, OpDef] = {}
ALIASES = {"Reciprocal": "Recip", "Gemm": "GEMM", "Conv": "Conv2D"}


def _register(op: OpDef) -> None:
    REGISTRY[op.name] = op


def canonical_kind(kind: str) -> str:
    kind = ALIASES.get(kind, kind)
    if kind not in REGISTRY:
        raise GraphError(f"unknown operator kind {kind!r}")
    return kind


def get(kind: str) -> OpDef:
    return REGISTRY[canonical_kind(kind)]


def attr(op_kind: str, attrs: dict, name: str):
    if name in attrs:
        return attrs[name]
    return REGISTRY[op_kind].defaults.get(name)


# --- shape functions -------------------------------------------------------


def _elementwise_shape(attrs, ins, n_out):
    return [broadcast_shapes(*ins)]


def _same_shape(attrs, ins, n_out):
    return [ins[0]]


def _concat_shape(attrs, ins, n_out):
    rank = len(ins[0])
    axis = _axis(attrs.get("axis", 0), rank)
    for s in ins[1:]:
        if len(s) != rank or any(s[i] != ins[0][i] for i in range(rank) if i != axis):
            raise ShapeError(f"Concat inputs {list(ins[0])} and {list(s)} differ off axis {axis}")
    out = list(ins[0])
    out[axis] = sum(s[axis] for s in ins)
    return [tuple(out)]


def slice_params(attrs, shape: Shape) -> list[tuple[int, int, int]]:
    """Per-dimension (start, stop, step) after normalization."""
    rank = len(shape)
    starts = list(attrs["starts"])
    ends = list(attrs["ends"])
    axes = [_axis(a, rank) for a in attrs.get("axes", range(len(starts)))]
    steps = list(attrs.get("steps", [1] * len(starts)))
    if not len(starts) == len(ends) == len(axes) == len(steps):
        raise ShapeError("Slice starts/ends/axes/steps lengths differ")
    params = [(0, d, 1) for d in shape]
    for s, e, a, st in zip(starts, ends, axes, steps):
        if st <= 0:
            raise ShapeError(f"Slice step {st} unsupported (must be positive)")
        d = shape[a]
        s = s + d if s < 0 else s
        e = e + d if e < 0 else e
        s, e = min(max(s, 0), d), min(max(e, 0), d)
        params[a] = (s, e, st)
    return params


def _slice_shape(attrs, ins, n_out):
    out = []
    for s, e, st in slice_params(attrs, ins[0]):
        n = max(0, -(-(e - s) // st))
        if n == 0:
            raise ShapeError(f"Slice produces an empty extent on {list(ins[0])}")
        out.append(n)
    return [tuple(out)]


def split_sizes(attrs, shape: Shape, n_out: int) -> list[int]:
    axis = _axis(attrs.get("axis", 0), len(shape))
    sizes = attrs.get("split")
    if sizes is None:
        if shape[axis] % n_out:
            raise ShapeError(f"cannot split extent {shape[axis]} into {n_out} equal parts")
        sizes = [shape[axis] // n_out] * n_out
    if len(sizes) != n_out or sum(sizes) != shape[axis] or min(sizes) < 1:
        raise ShapeError(f"Split sizes {list(sizes)} do not partition extent {shape[axis]} into {n_out} outputs")
    return list(sizes)


def _split_shape(attrs, ins, n_out):
    axis = _axis(attrs.get("axis", 0), len(ins[0]))
    outs = []
    for size in split_sizes(attrs, ins[0], n_out):
        s = list(ins[0])
        s[axis] = size
        outs.append(tuple(s))
    return outs


def _gather_shape(attrs, ins, n_out):
    data, idx = ins
    axis = _axis(attrs.get("axis", 0), len(data))
    return [tuple(data[:axis]) + tuple(idx) + tuple(data[axis + 1:])]


def _expand_shape(attrs, ins, n_out):
    return [broadcast_shapes(ins[0], tuple(attrs["shape"]))]


def resize_sizes(attrs, shape: Shape) -> Shape:
    if attrs.get("mode", "nearest") != "nearest":
        raise ShapeError(f"Resize mode {attrs.get('mode')!r} unsupported (nearest only)")
    if "sizes" in attrs:
        sizes = tuple(int(s) for s in attrs["sizes"])
    elif "scales" in attrs:
        sizes = tuple(int(math.floor(d * float(s))) for d, s in zip(shape, attrs["scales"]))
    else:
        raise ShapeError("Resize needs 'scales' or 'sizes'")
    if len(sizes) != len(shape) or min(sizes, default=1) < 1:
        raise ShapeError(f"Resize target {list(sizes)} invalid for input {list(shape)}")
    return sizes


def _resize_shape(attrs, ins, n_out):
    return [resize_sizes(attrs, ins[0])]


def reduce_axes(attrs, rank: int) -> tuple[int, ...]:
    axes = attrs.get("axes")
    if axes is None or len(axes) == 0:
        return tuple(range(rank))
    return tuple(sorted({_axis(a, rank) for a in axes}))


def _reduce_shape(attrs, ins, n_out):
    shape = ins[0]
    axes = reduce_axes(attrs, len(shape))
    keep = attrs.get("keepdims", 1)
    if keep:
        return [tuple(1 if i in axes else d for i, d in enumerate(shape))]
    return [tuple(d for i, d in enumerate(shape) if i not in axes)]


def _softmax_shape(attrs, ins, n_out):
    _axis(attrs.get("axis", -1), len(ins[0]))
    return [ins[0]]


def _gemm_shape(attrs, ins, n_out):
    a, b = ins[0], ins[1]
    if len(a) != 2 or len(b) != 2:
        raise ShapeError(f"GEMM needs rank-2 operands, got {list(a)} and {list(b)}")
    m, k = (a[1], a[0]) if attrs.get("transA", 0) else a
    k2, n = (b[1], b[0]) if attrs.get("transB", 0) else b
    if k != k2:
        raise ShapeError(f"GEMM inner dimensions differ: {list(a)} and {list(b)}")
    if len(ins) == 3:
        try:
            broadcast_shapes(ins[2], (m, n))
        except ShapeError:
            raise ShapeError(f"GEMM bias {list(ins[2])} not broadcastable to {[m, n]}") from None
        if broadcast_shapes(ins[2], (m, n)) != (m, n):
            raise ShapeError(f"GEMM bias {list(ins[2])} would enlarge output {[m, n]}")
    return [(m, n)]


def _matmul_shape(attrs, ins, n_out):
    a, b = ins
    if len(a) < 2 or len(b) < 2:
        raise ShapeError(f"MatMul needs rank >= 2 operands, got {list(a)} and {list(b)}")
    if a[-1] != b[-2]:
        raise ShapeError(f"MatMul inner dimensions differ: {list(a)} and {list(b)}")
    batch = broadcast_shapes(a[:-2], b[:-2])
    return [batch + (a[-2], b[-1])]


def conv_geometry(attrs, x: Shape, kernel: Sequence[int]):
    """Returns (strides, pads[top,left,bottom,right], dilations, output spatial dims)."""
    strides = list(attrs.get("strides", [1, 1]))
    pads = list(attrs.get("pads", [0, 0, 0, 0]))
    dil = list(attrs.get("dilations", [1, 1]))
    if len(strides) != 2 or len(pads) != 4 or len(dil) != 2:
        raise ShapeError("2-D convolution/pooling needs 2 strides, 4 pads, 2 dilations")
    out = []
    for i in range(2):
        span = dil[i] * (kernel[i] - 1) + 1
        o = (x[2 + i] + pads[i] + pads[i + 2] - span) // strides[i] + 1
        if o < 1:
            raise ShapeError(f"window {list(kernel)} does not fit input {list(x)}")
        out.append(o)
    return strides, pads, dil, out


def _conv_shape(attrs, ins, n_out):
    x, w = ins[0], ins[1]
    if len(x) != 4 or len(w) != 4:
        raise ShapeError(f"Conv2D needs NCHW input and MCkk weight, got {list(x)} and {list(w)}")
    group = attrs.get("group", 1)
    if x[1] % group or w[0] % group or w[1] * group != x[1]:
        raise ShapeError(f"Conv2D channels mismatch: input {list(x)}, weight {list(w)}, group {group}")
    if len(ins) == 3 and tuple(ins[2]) != (w[0],):
        raise ShapeError(f"Conv2D bias {list(ins[2])} must be [{w[0]}]")
    _, _, _, (oh, ow) = conv_geometry(attrs, x, w[2:])
    return [(x[0], w[0], oh, ow)]


def _pool_shape(attrs, ins, n_out):
    x = ins[0]
    if len(x) != 4:
        raise ShapeError(f"pooling needs NCHW input, got {list(x)}")
    k = attrs.get("kernel_shape")
    if not k or len(k) != 2:
        raise ShapeError("pooling needs a 2-element kernel_shape")
    _, _, _, (oh, ow) = conv_geometry({"strides": attrs.get("strides", [1, 1]), "pads": attrs.get("pads", [0, 0, 0, 0])}, x, k)
    return [(x[0], x[1], oh, ow)]


def reshape_target(attrs, shape: Shape) -> Shape:
    target = list(attrs["shape"])
    if target.count(-1) > 1:
        raise ShapeError(f"Reshape target {target} has more than one -1")
    out = []
    for i, d in enumerate(target):
        if d == 0:
            if i >= len(shape):
                raise ShapeError(f"Reshape target {target}: 0 at position {i} has no source dim")
            d = shape[i]
        out.append(d)
    total = numel(shape)
    if -1 in out:
        known = numel(d for d in out if d != -1)
        if known == 0 or total % known:
            raise ShapeError(f"Reshape target {target} incompatible with {list(shape)}")
        out[out.index(-1)] = total // known
    if numel(out) != total or min(out, default=1) < 1:
        raise ShapeError(f"Reshape target {target} incompatible with {list(shape)}")
    return tuple(out)


def _reshape_shape(attrs, ins, n_out):
    return [reshape_target(attrs, ins[0])]


def _flatten_shape(attrs, ins, n_out):
    x = ins[0]
    axis = attrs.get("axis", 1)
    axis = axis + len(x) if axis < 0 else axis
    if not 0 <= axis <= len(x):
        raise ShapeError(f"Flatten axis {axis} out of range for {list(x)}")
    return [(numel(x[:axis]), numel(x[axis:]))]


def squeeze_axes(attrs, shape: Shape) -> tuple[int, ...]:
    axes = attrs.get("axes")
    if axes is None:
        return tuple(i for i, d in enumerate(shape) if d == 1)
    axes = tuple(sorted({_axis(a, len(shape)) for a in axes}))
    for a in axes:
        if shape[a] != 1:
            raise ShapeError(f"cannot squeeze axis {a} of extent {shape[a]}")
    return axes


def _squeeze_shape(attrs, ins, n_out):
    axes = squeeze_axes(attrs, ins[0])
    return [tuple(d for i, d in enumerate(ins[0]) if i not in axes)]


def unsqueeze_axes(attrs, shape: Shape) -> tuple[int, ...]:
    rank = len(shape) + len(attrs["axes"])
    return tuple(sorted({_axis(a, rank) for a in attrs["axes"]}))


def _unsqueeze_shape(attrs, ins, n_out):
    axes = unsqueeze_axes(attrs, ins[0])
    it = iter(ins[0])
    return [tuple(1 if i in axes else next(it) for i in range(len(ins[0]) + len(axes)))]


def transpose_perm(attrs, rank: int) -> tuple[int, ...]:
    perm = attrs.get("perm")
    if perm is None:
        return tuple(reversed(range(rank)))
    perm = tuple(_axis(p, rank) for p in perm)
    if sorted(perm) != list(range(rank)):
        raise ShapeError(f"Transpose perm {list(perm)} is not a permutation of rank {rank}")
    return perm


def _transpose_shape(attrs, ins, n_out):
    perm = transpose_perm(attrs, len(ins[0]))
    return [tuple(ins[0][p] for p in perm)]


def _d2s_shape(attrs, ins, n_out):
    x = ins[0]
    b = attrs["blocksize"]
    if len(x) != 4 or x[1] % (b * b):
        raise ShapeError(f"DepthToSpace blocksize {b} incompatible with {list(x)}")
    if attrs.get("mode", "DCR") not in ("DCR", "CRD"):
        raise ShapeError(f"DepthToSpace mode {attrs.get('mode')!r} unknown")
    return [(x[0], x[1] // (b * b), x[2] * b, x[3] * b)]


# --- FLOP conventions ---------------------------------------------------------


def _per_output(attrs, ins, outs):
    return sum(numel(s) for s in outs)


def _zero(attrs, ins, outs):
    return 0


def _reduce_flops(attrs, ins, outs):
    return numel(ins[0])


def _reduce_mean_flops(attrs, ins, outs):
    return numel(ins[0]) + numel(outs[0])


def _softmax_flops(attrs, ins, outs):
    # max, subtract, exp, sum, divide
    return 5 * numel(ins[0])


def _gemm_flops(attrs, ins, outs):
    a = ins[0]
    k = a[0] if attrs.get("transA", 0) else a[1]
    m, n = outs[0]
    return 2 * m * k * n + (m * n if len(ins) == 3 else 0)


def _matmul_flops(attrs, ins, outs):
    return 2 * numel(outs[0]) * ins[0][-1]


def _conv_flops(attrs, ins, outs):
    w = ins[1]
    per_out = w[1] * w[2] * w[3]
    return 2 * numel(outs[0]) * per_out + (numel(outs[0]) if len(ins) == 3 else 0)


def _pool_flops(attrs, ins, outs):
    k = attrs["kernel_shape"]
    return numel(outs[0]) * k[0] * k[1]


def _ew(name, props=(), n_in=2, defaults=None):
    _register(OpDef(name, (n_in, n_in), (1, 1), None, _elementwise_shape, _per_output, frozenset(props), defaults or {}))


def _unary(name, props=(), defaults=None):
    _register(OpDef(name, (1, 1), (1, 1), MappingType.ONE_TO_ONE, _same_shape, _per_output, frozenset(props), defaults or {}))


_ew("Add", (ASSOCIATIVE, COMMUTATIVE))
_ew("Sub", (DISTRIBUTIVE,))
_ew("Mul", (ASSOCIATIVE, COMMUTATIVE, DISTRIBUTIVE))
_ew("Div")
_ew("BitShift", (COMMUTATIVE,), defaults={"direction": "LEFT"})
_unary("Recip", (ASSOCIATIVE,))
_unary("Sqrt", (ASSOCIATIVE,))
_unary("Square", (ASSOCIATIVE,))
_unary("Abs", (ASSOCIATIVE,))
_unary("Exp", (COMMUTATIVE,))
_unary("Log")
_unary("Relu")
_unary("Sigmoid")
_unary("Tanh")
_unary("Clip")

O2O, O2M, M2M = MappingType.ONE_TO_ONE, MappingType.ONE_TO_MANY, MappingType.MANY_TO_MANY
REORG, SHUF = MappingType.REORGANIZE, MappingType.SHUFFLE

_register(OpDef("Concat", (1, 64), (1, 1), O2O, _concat_shape, _zero, defaults={"axis": 0}))
_register(OpDef("Slice", (1, 1), (1, 1), O2O, _slice_shape, _zero))
_register(OpDef("Split", (1, 1), (1, None), O2O, _split_shape, _zero, defaults={"axis": 0}))
_register(OpDef("Gather", (2, 2), (1, 1), O2M, _gather_shape, _zero, defaults={"axis": 0}))
_register(OpDef("Expand", (1, 1), (1, 1), O2M, _expand_shape, _zero))
_register(OpDef("Resize", (1, 1), (1, 1), O2M, _resize_shape, _zero, defaults={"mode": "nearest"}))
_register(OpDef("ReduceSum", (1, 1), (1, 1), M2M, _reduce_shape, _reduce_flops, frozenset({ASSOCIATIVE, COMMUTATIVE}), {"keepdims": 1}))
_register(OpDef("ReduceProd", (1, 1), (1, 1), M2M, _reduce_shape, _reduce_flops, frozenset({COMMUTATIVE}), {"keepdims": 1}))
_register(OpDef("ReduceMean", (1, 1), (1, 1), M2M, _reduce_shape, _reduce_mean_flops, defaults={"keepdims": 1}))
_register(OpDef("Softmax", (1, 1), (1, 1), M2M, _softmax_shape, _softmax_flops, defaults={"axis": -1}))
_register(OpDef("GEMM", (2, 3), (1, 1), M2M, _gemm_shape, _gemm_flops, defaults={"alpha": 1.0, "beta": 1.0, "transA": 0, "transB": 0}))
_register(OpDef("MatMul", (2, 2), (1, 1), M2M, _matmul_shape, _matmul_flops))
_register(OpDef("Conv2D", (2, 3), (1, 1), M2M, _conv_shape, _conv_flops, defaults={"group": 1}))
_register(OpDef("MaxPool", (1, 1), (1, 1), M2M, _pool_shape, _pool_flops))
_register(OpDef("AveragePool", (1, 1), (1, 1), M2M, _pool_shape, _pool_flops))
_register(OpDef("Reshape", (1, 1), (1, 1), REORG, _reshape_shape, _zero))
_register(OpDef("Flatten", (1, 1), (1, 1), REORG, _flatten_shape, _zero, defaults={"axis": 1}))
_register(OpDef("Squeeze", (1, 1), (1, 1), REORG, _squeeze_shape, _zero))
_register(OpDef("Unsqueeze", (1, 1), (1, 1), REORG, _unsqueeze_shape, _zero))
_register(OpDef("Transpose", (1, 1), (1, 1), SHUF, _transpose_shape, _zero))
_register(OpDef("DepthToSpace", (1, 1), (1, 1), SHUF, _d2s_shape, _zero, defaults={"mode": "DCR"}))

DATA_MOVEMENT = frozenset({"Reshape", "Flatten", "Squeeze", "Unsqueeze", "Transpose", "DepthToSpace", "Slice"})
REDUCTIONS = frozenset({"ReduceSum", "ReduceProd", "ReduceMean"})


def infer_op_shapes(kind: str, attrs: dict, in_shapes: list[Shape], n_out: int) -> list[Shape]:
    return [tuple(s) for s in get(kind).shape_fn(attrs, [tuple(s) for s in in_shapes], n_out)]


def classify_operator(kind: str, attrs: dict, in_shapes: Sequence[Sequence[int]], out_shapes: Sequence[Sequence[int]]) -> MappingType:
    """Mapping type of one operator at concrete shapes.

    Element-wise operators are One-to-Many when any input is stretched by
    broadcasting; multi-input operators take the most complex per-input type.
    """
    op = get(kind)
    if not op.elementwise:
        return op.mapping
    out = tuple(out_shapes[0])
    per_input = [
        MappingType.ONE_TO_ONE if tuple(s) == out else MappingType.ONE_TO_MANY
        for s in in_shapes
    ]
    return most_complex(per_input)


def op_flops(kind: str, attrs: dict, in_shapes: list[Shape], out_shapes: list[Shape]) -> int:
    return int(get(kind).flop_fn(attrs, in_shapes, out_shapes))
