"""Per-operator lowering: an output index maps to a scalar expression over input reads.

``lower_op`` receives an accessor ``get(slot, index)`` that yields the node for
input ``slot`` at ``index``. For external tensors the accessor emits a load; for
tensors produced inside the block it recurses into the producer, so the whole
block collapses into one expression per output element.
"""

from __future__ import annotations

from typing import Callable

from .. import ops
from ..errors import CodegenError
from .expr import INF, ExprBuilder

Index = tuple
Getter = Callable[[int, Index], int]

_BINARY = {"Add": "add", "Sub": "sub", "Mul": "mul", "Div": "div"}
_UNARY = {
    "Recip": "recip", "Sqrt": "sqrt", "Square": "square", "Abs": "abs", "Exp": "exp",
    "Log": "log", "Sigmoid": "sigmoid", "Tanh": "tanh",
}


def strides(shape) -> list[int]:
    out, acc = [], 1
    for d in reversed(shape):
        out.append(acc)
        acc *= d
    return out[::-1]


def broadcast_index(b: ExprBuilder, in_shape, out_shape, idx: Index) -> Index:
    """Right-aligned broadcasting: stretched dimensions read element 0."""
    off = len(out_shape) - len(in_shape)
    return tuple(
        ("c", 0) if d == 1 and out_shape[off + j] != 1 else idx[off + j]
        for j, d in enumerate(in_shape)
    )


def relinearize(b: ExprBuilder, in_shape, out_shape, idx: Index) -> Index:
    flat = b.linear(list(zip(idx, strides(out_shape))))
    return tuple(b.mod(b.div(flat, s), d) for s, d in zip(strides(in_shape), in_shape))


def view_index(b: ExprBuilder, kind: str, attrs: dict, in_shape, out_shape, idx: Index) -> Index:
    """Index into the input of a data-movement operator for a given output index."""
    in_shape, out_shape = tuple(in_shape), tuple(out_shape)
    if kind in ("Reshape", "Flatten"):
        return relinearize(b, in_shape, out_shape, idx)
    if kind == "Squeeze":
        axes = ops.squeeze_axes(attrs, in_shape)
        it = iter(idx)
        return tuple(("c", 0) if i in axes else next(it) for i in range(len(in_shape)))
    if kind == "Unsqueeze":
        axes = ops.unsqueeze_axes(attrs, in_shape)
        return tuple(e for i, e in enumerate(idx) if i not in axes)
    if kind == "Transpose":
        perm = ops.transpose_perm(attrs, len(in_shape))
        out = [None] * len(in_shape)
        for d, p in enumerate(perm):
            out[p] = idx[d]
        return tuple(out)
    if kind == "DepthToSpace":
        bs = attrs["blocksize"]
        n, c, h, w = idx
        c2 = in_shape[1] // (bs * bs)
        bh, bw = b.mod(h, bs), b.mod(w, bs)
        if attrs.get("mode", "DCR") == "DCR":
            ch = b.linear([(bh, bs * c2), (bw, c2), (c, 1)])
        else:
            ch = b.linear([(c, bs * bs), (bh, bs), (bw, 1)])
        return (n, ch, b.div(h, bs), b.div(w, bs))
    if kind == "Slice":
        return tuple(
            b.add(b.mul(e, st), ("c", s))
            for e, (s, _, st) in zip(idx, ops.slice_params(attrs, in_shape))
        )
    raise CodegenError(f"{kind} is not a data-movement operator")


def _replace(idx: Index, axis: int, e) -> Index:
    return idx[:axis] + (e,) + idx[axis + 1:]


def _window(b: ExprBuilder, attrs, x_shape, kernel, oh, ow, rh, rw):
    strides_, pads, dil, _ = ops.conv_geometry(attrs, x_shape, kernel)
    h = b.linear([(oh, strides_[0]), (rh, dil[0])], -pads[0])
    w = b.linear([(ow, strides_[1]), (rw, dil[1])], -pads[1])
    return h, w


def _padded(b: ExprBuilder, get: Getter, slot: int, idx: Index, shape, fill: float) -> int:
    ok = b.valid(idx, shape)
    safe = tuple(b.clip(e, 0, d - 1) for e, d in zip(idx, shape))
    v = get(slot, safe)
    return v if ok is None else b.sel(ok, v, b.const(fill))


def lower_op(b: ExprBuilder, kind: str, attrs: dict, in_shapes, out_shapes, k: int, idx: Index, get: Getter) -> int:
    out_shape = tuple(out_shapes[k])
    if kind in _BINARY or kind == "BitShift":
        a = get(0, broadcast_index(b, in_shapes[0], out_shape, idx))
        c = get(1, broadcast_index(b, in_shapes[1], out_shape, idx))
        if kind == "BitShift":
            return b.bin("shl" if attrs.get("direction", "LEFT") == "LEFT" else "shr", a, c)
        return b.bin(_BINARY[kind], a, c)
    if kind in _UNARY:
        return b.un(_UNARY[kind], get(0, idx))
    if kind == "Relu":
        return b.bin("max", get(0, idx), b.const(0.0))
    if kind == "Clip":
        v = get(0, idx)
        if attrs.get("min") is not None:
            v = b.bin("max", v, b.const(attrs["min"]))
        if attrs.get("max") is not None:
            v = b.bin("min", v, b.const(attrs["max"]))
        return v

    if kind == "Concat":
        axis = attrs.get("axis", 0) % len(out_shape)
        offsets = [0]
        for s in in_shapes:
            offsets.append(offsets[-1] + s[axis])
        value = None
        for slot in reversed(range(len(in_shapes))):
            local = b.clip(b.add(idx[axis], ("c", -offsets[slot])), 0, in_shapes[slot][axis] - 1)
            branch = get(slot, _replace(idx, axis, local))
            if value is None:
                value = branch
                continue
            cond = b.valid((idx[axis],), (offsets[slot + 1],))
            value = branch if cond is None else b.sel(cond, branch, value)
        return value
    if kind == "Split":
        axis = attrs.get("axis", 0) % len(out_shape)
        offset = sum(ops.split_sizes(attrs, in_shapes[0], len(out_shapes))[:k])
        return get(0, _replace(idx, axis, b.add(idx[axis], ("c", offset))))
    if kind == "Gather":
        data, ind = in_shapes
        axis = attrs.get("axis", 0) % len(data)
        r = len(ind)
        pos = get(1, idx[axis:axis + r])
        e = b.clip(("wrap", ("s", pos), data[axis]), 0, data[axis] - 1)
        return get(0, idx[:axis] + (e,) + idx[axis + r:])
    if kind == "Expand":
        return get(0, broadcast_index(b, in_shapes[0], out_shape, idx))
    if kind == "Resize":
        return get(0, tuple(b.div(b.mul(e, i), o) for e, i, o in zip(idx, in_shapes[0], out_shape)))

    if kind in ops.REDUCTIONS:
        shape = in_shapes[0]
        axes = ops.reduce_axes(attrs, len(shape))
        keep = attrs.get("keepdims", 1)
        rvars = {a: b.new_rvar(shape[a]) for a in axes}
        it = iter(idx)
        in_idx = []
        for a in range(len(shape)):
            if a in rvars:
                if keep:
                    next(it)
                in_idx.append(("v", rvars[a]))
            else:
                in_idx.append(next(it))
        body = get(0, tuple(in_idx))
        red = b.reduce("prod" if kind == "ReduceProd" else "sum", body, tuple(rvars.values()))
        if kind == "ReduceMean":
            return b.bin("div", red, b.const(ops.numel(shape[a] for a in axes)))
        return red
    if kind == "Softmax":
        axis = attrs.get("axis", -1) % len(out_shape)
        n = out_shape[axis]
        r1, r2 = b.new_rvar(n), b.new_rvar(n)
        m = b.reduce("max", get(0, _replace(idx, axis, ("v", r1))), (r1,))
        e = b.un("exp", b.bin("sub", get(0, idx), m))
        s = b.reduce("sum", b.un("exp", b.bin("sub", get(0, _replace(idx, axis, ("v", r2))), m)), (r2,))
        return b.bin("div", e, s)
    if kind == "GEMM":
        i, j = idx
        a_shape = in_shapes[0]
        kk = a_shape[0] if attrs.get("transA", 0) else a_shape[1]
        r = ("v", b.new_rvar(kk))
        a = get(0, (r, i) if attrs.get("transA", 0) else (i, r))
        w = get(1, (j, r) if attrs.get("transB", 0) else (r, j))
        y = b.reduce("sum", b.bin("mul", a, w), (r[1],))
        alpha = attrs.get("alpha", 1.0)
        if alpha != 1.0:
            y = b.bin("mul", y, b.const(alpha))
        if len(in_shapes) == 3:
            c = get(2, broadcast_index(b, in_shapes[2], out_shape, idx))
            beta = attrs.get("beta", 1.0)
            if beta != 1.0:
                c = b.bin("mul", c, b.const(beta))
            y = b.bin("add", y, c)
        return y
    if kind == "MatMul":
        a_shape, w_shape = in_shapes
        r = ("v", b.new_rvar(a_shape[-1]))
        batch = idx[:-2]
        a = get(0, broadcast_index(b, a_shape[:-2], out_shape[:-2], batch) + (idx[-2], r))
        w = get(1, broadcast_index(b, w_shape[:-2], out_shape[:-2], batch) + (r, idx[-1]))
        return b.reduce("sum", b.bin("mul", a, w), (r[1],))
    if kind == "Conv2D":
        x_shape, w_shape = in_shapes[0], in_shapes[1]
        n, m, oh, ow = idx
        mm, cg, kh, kw = w_shape
        per_group = mm // attrs.get("group", 1)
        rc, rh, rw = (b.new_rvar(cg), b.new_rvar(kh), b.new_rvar(kw))
        h, w = _window(b, attrs, x_shape, (kh, kw), oh, ow, ("v", rh), ("v", rw))
        ch = b.add(b.mul(b.div(m, per_group), cg), ("v", rc))
        xv = _padded(b, get, 0, (n, ch, h, w), x_shape, 0.0)
        wv = get(1, (m, ("v", rc), ("v", rh), ("v", rw)))
        y = b.reduce("sum", b.bin("mul", xv, wv), (rc, rh, rw))
        if len(in_shapes) == 3:
            y = b.bin("add", y, get(2, (m,)))
        return y
    if kind in ("MaxPool", "AveragePool"):
        x_shape = in_shapes[0]
        kh, kw = attrs["kernel_shape"]
        n, c, oh, ow = idx
        geom = {"strides": attrs.get("strides", [1, 1]), "pads": attrs.get("pads", [0, 0, 0, 0])}
        rh, rw = b.new_rvar(kh), b.new_rvar(kw)
        h, w = _window(b, geom, x_shape, (kh, kw), oh, ow, ("v", rh), ("v", rw))
        if kind == "MaxPool":
            return b.reduce("max", _padded(b, get, 0, (n, c, h, w), x_shape, -INF), (rh, rw))
        total = b.reduce("sum", _padded(b, get, 0, (n, c, h, w), x_shape, 0.0), (rh, rw))
        ok = b.valid((h, w), x_shape[2:])
        if attrs.get("count_include_pad", 0) or ok is None:
            count = b.const(kh * kw)
        else:
            ch, cw = b.new_rvar(kh), b.new_rvar(kw)
            h2, w2 = _window(b, geom, x_shape, (kh, kw), oh, ow, ("v", ch), ("v", cw))
            ok2 = b.valid((h2, w2), x_shape[2:])
            count = b.reduce("sum", b.sel(ok2, b.const(1.0), b.const(0.0)), (ch, cw))
        return b.bin("div", total, count)

    if kind in ops.DATA_MOVEMENT:
        return get(0, view_index(b, kind, attrs, in_shapes[0], out_shape, idx))
    raise CodegenError(f"no lowering for operator kind {kind!r}")
