"""Graph construction helpers and random-instance generators for tests and demos."""

from __future__ import annotations

import numpy as np

from . import ops
from .graph import DTYPES, ECG, INPUT, INTERMEDIATE, OUTPUT, WEIGHT, OperatorDescriptor, TensorSpec, infer_shapes
from .rewrite.patterns import PConst, POp, PVar, RewriteRule


class GraphBuilder:
    """Imperative ECG construction; ``build()`` promotes dangling tensors to outputs."""

    def __init__(self, name: str = "model", dtype: str = "f32"):
        self.g = ECG(name)
        self.dtype = dtype
        self._n = 0

    def input(self, tid: str, shape, dtype: str | None = None) -> str:
        self.g.add_tensor(TensorSpec(tid, tuple(shape), dtype or self.dtype, INPUT))
        return tid

    def weight(self, tid: str, shape, data=None, dtype: str | None = None) -> str:
        dtype = dtype or self.dtype
        arr = None if data is None else np.asarray(data, dtype=DTYPES[dtype]).reshape(tuple(shape))
        self.g.add_tensor(TensorSpec(tid, tuple(shape), dtype, WEIGHT, data=arr))
        return tid

    def op(self, kind: str, inputs, id: str | None = None, out: str | list[str] | None = None, n_out: int = 1, **attrs):
        self._n += 1
        oid = id or f"{kind.lower()}{self._n}"
        if out is None:
            outs = [oid] if n_out == 1 else [f"{oid}_{i}" for i in range(n_out)]
        else:
            outs = [out] if isinstance(out, str) else list(out)
        self.g.add_operator(OperatorDescriptor(oid, kind, list(inputs), outs, attrs))
        return outs[0] if len(outs) == 1 else outs

    def build(self, outputs=None) -> ECG:
        for tid, spec in self.g.tensors.items():
            if spec.kind == INTERMEDIATE and (not spec.consumers or (outputs and tid in outputs)):
                spec.kind = OUTPUT
        return infer_shapes(self.g)


# --- rule instances ---------------------------------------------------------------


def instantiate_rule(rule: RewriteRule, rng: np.random.Generator, max_dim: int = 64) -> tuple[ECG, dict[str, np.ndarray]]:
    """A graph computing a random mirror of ``rule``'s lhs, plus input values.

    Repeated subterms are built as separate operators, matching the
    per-occurrence costing of unrewritten graphs.
    """
    shape = (int(rng.integers(1, max_dim + 1)), int(rng.integers(1, max_dim + 1)))
    variant = rule.variants[int(rng.integers(len(rule.variants)))]
    scalar_vars = {a for g, args in rule.guards if g == "scalar_const" for a in args}
    reduce_attrs = {"axes": [int(rng.integers(2))], "keepdims": 1}
    b = GraphBuilder(f"{rule.name}_instance")
    values: dict[str, np.ndarray] = {}

    def build(p) -> str:
        if isinstance(p, PVar):
            if p.name in b.g.tensors:
                return p.name
            if p.name in scalar_vars:
                return b.weight(p.name, (), float(rng.integers(0, 3)))
            b.input(p.name, shape)
            values[p.name] = rng.uniform(0.25, 1.0, size=shape).astype(np.float32)
            return p.name
        if isinstance(p, PConst):
            return b.weight(f"c{len(b.g.tensors)}", (), p.value)
        args = [build(a) for a in p.args]
        attrs = dict(reduce_attrs) if p.kind in ops.REDUCTIONS else {}
        if p.kind == "BitShift":
            attrs["direction"] = "LEFT"
        return b.op(p.kind, args, **attrs)

    build(variant)
    return b.build(), values


# --- random DAGs --------------------------------------------------------------------

_MAX_STEP_OPS = 4
_CATEGORIES = ("o2o", "o2o", "o2o_bin", "o2m", "m2m", "reorg", "shuffle", "data")


class _DagGen:
    def __init__(self, rng: np.random.Generator, dtype: str):
        self.rng = rng
        self.b = GraphBuilder("random", dtype)
        self.bound: dict[str, float] = {}
        self.unused: list[str] = []
        self.pool: list[str] = []
        self.values: dict[str, np.ndarray] = {}
        self.nw = 0
        self._shapes: dict[str, tuple[int, ...]] = {}

    def weight(self, shape, scale=1.0, data=None, dtype=None):
        self.nw += 1
        tid = f"w{self.nw}"
        if data is None:
            data = self.rng.uniform(-scale, scale, size=shape)
        self.b.weight(tid, shape, data, dtype)
        self._shapes[tid] = tuple(shape)
        self.bound[tid] = float(np.max(np.abs(data))) if np.size(data) else 0.0
        return tid

    def emit(self, kind, inputs, bound, n_out=1, **attrs):
        out = self.b.op(kind, inputs, n_out=n_out, **attrs)
        outs = out if isinstance(out, list) else [out]
        in_shapes = [self._shapes[t] for t in inputs]
        shapes = ops.infer_op_shapes(kind, attrs, in_shapes, n_out)
        for t, s in zip(outs, shapes):
            self._shapes[t] = s
            self.bound[t] = bound
            self.pool.append(t)
            self.unused.append(t)
        for t in inputs:
            if t in self.unused:
                self.unused.remove(t)
        return outs[0]

    def pick(self, pred=lambda s: True):
        cands = [t for t in self.unused if pred(self._shapes[t])]
        if cands and self.rng.random() < 0.75:
            return cands[int(self.rng.integers(len(cands)))]
        cands = [t for t in self.pool if pred(self._shapes[t])]
        if not cands:
            return None
        # favor recent tensors to keep the graph deep
        k = min(len(cands), 6)
        return cands[-1 - int(self.rng.integers(k))]

    def tame(self, t, limit=8.0):
        """Insert a Tanh when the value bound of ``t`` grows large."""
        if self.bound[t] > limit:
            return self.emit("Tanh", [t], 1.0)
        return t

    def positive(self, t):
        return self.emit("Sigmoid", [t], 1.0)

    # one operator per category
    def step(self, cat):
        rng = self.rng
        small = lambda s: ops.numel(s) <= 1024
        if cat == "o2o":
            t = self.pick()
            kind = ["Relu", "Sigmoid", "Tanh", "Abs", "Exp", "Square", "Sqrt", "Log", "Recip", "Clip"][int(rng.integers(10))]
            if kind in ("Sqrt", "Log", "Recip"):
                p = self.positive(t)
                bound = {"Sqrt": 1.0, "Log": 8.0, "Recip": 200.0}[kind]
                return self.emit(kind, [p], bound)
            if kind in ("Exp", "Square"):
                t = self.tame(t, 3.0)
                b = np.exp(self.bound[t]) if kind == "Exp" else self.bound[t] ** 2
                return self.emit(kind, [t], b)
            if kind == "Clip":
                return self.emit(kind, [t], min(self.bound[t], 0.5), min=-0.5, max=0.5)
            return self.emit(kind, [t], self.bound[t] if kind in ("Relu", "Abs") else 1.0)
        if cat == "o2o_bin":
            a = self.tame(self.pick())
            sa = self._shapes[a]
            others = [t for t in self.pool if self._shapes[t] == sa and t != a]
            other = others[-1] if others and rng.random() < 0.7 else self.weight(sa)
            other = self.tame(other)
            kind = ["Add", "Sub", "Mul", "Div", "BitShift"][int(rng.integers(5))]
            if kind == "Div":
                return self.emit("Div", [a, self.positive(other)], self.bound[a] * 200.0)
            if kind == "BitShift":
                s = self.weight((), data=float(rng.integers(0, 3)))
                return self.emit("BitShift", [a, s], self.bound[a] * 4, direction="LEFT")
            b = self.bound[a] * self.bound[other] if kind == "Mul" else self.bound[a] + self.bound[other]
            return self.emit(kind, [a, other], b)
        if cat == "o2m":
            choice = int(rng.integers(4))
            t = self.tame(self.pick(small) or self.pick())
            s = self._shapes[t]
            if choice == 0 and s:
                bshape = tuple(d if rng.random() < 0.5 else 1 for d in s)
                if bshape == s:
                    bshape = (1,) * len(s)
                # broadcast the small operand up to the full one
                w = self.weight(bshape)
                kind = ["Add", "Mul", "Sub"][int(rng.integers(3))]
                args = [w, t] if rng.random() < 0.5 else [t, w]
                return self.emit(kind, args, self.bound[t] * 2 if kind != "Mul" else self.bound[t])
            if choice == 1 and ops.numel(s) <= 512:
                return self.emit("Expand", [t], self.bound[t], shape=[2] + list(s))
            if choice == 2 and len(s) == 4 and ops.numel(s) <= 512:
                return self.emit("Resize", [t], self.bound[t], scales=[1, 1, 2, 2])
            if s:
                axis = int(rng.integers(len(s)))
                idx = rng.integers(0, s[axis], size=(int(rng.integers(1, 5)),))
                w = self.weight(idx.shape, data=idx, dtype="i64")
                return self.emit("Gather", [t, w], self.bound[t], axis=axis)
            return self.emit("Expand", [t], self.bound[t], shape=[3])
        if cat == "m2m":
            t = self.tame(self.pick())
            s = self._shapes[t]
            choice = int(rng.integers(6))
            if len(s) == 4 and choice in (0, 1):
                if choice == 0:
                    c = s[1]
                    m = int(rng.choice([2, 4]))
                    k = int(rng.choice([1, 3]))
                    w = self.weight((m, c, k, k), scale=1.0 / (c * k * k))
                    extra = [self.weight((m,))] if rng.random() < 0.5 else []
                    pad = k // 2
                    return self.emit("Conv2D", [t, w] + extra, self.bound[t] + 1, pads=[pad] * 4)
                if s[2] >= 2 and s[3] >= 2:
                    kind = "MaxPool" if rng.random() < 0.5 else "AveragePool"
                    return self.emit(kind, [t], self.bound[t], kernel_shape=[2, 2], strides=[2, 2])
            if choice == 2 and s:
                f = t if len(s) == 2 else self.emit("Flatten", [t], self.bound[t], axis=max(1, len(s) - 1))
                fs = self._shapes[f]
                n = int(rng.choice([3, 5, 8]))
                w = self.weight((fs[1], n), scale=1.0 / fs[1])
                kind = "GEMM" if rng.random() < 0.5 else "MatMul"
                extra = [self.weight((n,))] if kind == "GEMM" and rng.random() < 0.5 else []
                return self.emit(kind, [f, w] + extra, self.bound[t] + 1)
            if choice == 3 and s:
                return self.emit("Softmax", [t], 1.0, axis=-1)
            if s:
                axis = int(rng.integers(len(s)))
                kind = ["ReduceSum", "ReduceMean", "ReduceProd"][int(rng.integers(3))]
                keep = int(rng.integers(2))
                if kind == "ReduceProd":
                    t = self.emit("Tanh", [t], 1.0)
                b = self.bound[t] * (s[axis] if kind == "ReduceSum" else 1)
                return self.emit(kind, [t], b, axes=[axis], keepdims=keep)
            return self.emit("Unsqueeze", [t], self.bound[t], axes=[0])
        if cat == "reorg":
            t = self.pick()
            s = self._shapes[t]
            choice = int(rng.integers(4))
            if choice == 0 and len(s) >= 2:
                return self.emit("Reshape", [t], self.bound[t], shape=[s[0], -1])
            if choice == 1 and len(s) >= 2:
                return self.emit("Flatten", [t], self.bound[t], axis=1)
            if choice == 2 and 1 in s:
                return self.emit("Squeeze", [t], self.bound[t], axes=[s.index(1)])
            return self.emit("Unsqueeze", [t], self.bound[t], axes=[0] if len(s) < 4 else [len(s)])
        if cat == "shuffle":
            t = self.pick()
            s = self._shapes[t]
            if len(s) == 4 and s[1] % 4 == 0 and rng.random() < 0.5:
                return self.emit("DepthToSpace", [t], self.bound[t], blocksize=2, mode=["DCR", "CRD"][int(rng.integers(2))])
            if len(s) >= 2:
                perm = list(rng.permutation(len(s)))
                return self.emit("Transpose", [t], self.bound[t], perm=[int(p) for p in perm])
            return self.emit("Unsqueeze", [t], self.bound[t], axes=[0])
        # data: Concat / Slice / Split
        t = self.pick()
        s = self._shapes[t]
        if not s:
            return self.emit("Unsqueeze", [t], self.bound[t], axes=[0])
        axis = int(rng.integers(len(s)))
        choice = int(rng.integers(3))
        if choice == 0:
            others = [u for u in self.pool if self._shapes[u] == s and u != t]
            other = others[-1] if others else self.weight(s)
            return self.emit("Concat", [t, other], max(self.bound[t], self.bound[other]), axis=axis)
        if choice == 1 and s[axis] >= 2:
            return self.emit("Slice", [t], self.bound[t], starts=[1], ends=[s[axis]], axes=[axis])
        if s[axis] >= 2:
            return self.emit("Split", [t], self.bound[t], n_out=2, axis=axis, split=[1, s[axis] - 1])
        return self.emit("Relu", [t], self.bound[t])


def random_dag(seed: int, n_ops: int | None = None, dtype: str = "f32") -> tuple[ECG, dict[str, np.ndarray]]:
    """A random model of 5..40 operators covering every mapping type, with input values."""
    rng = np.random.default_rng(seed)
    gen = _DagGen(rng, dtype)
    target = int(n_ops if n_ops is not None else rng.integers(5, 41))
    n_inputs = 1 + int(rng.integers(2))
    for i in range(n_inputs):
        shape = (1, int(rng.choice([2, 4])), int(rng.choice([4, 6, 8])), int(rng.choice([4, 6, 8])))
        if rng.random() < 0.3:
            shape = (int(rng.choice([4, 6, 8])), int(rng.choice([8, 16])))
        tid = gen.b.input(f"x{i}", shape)
        gen._shapes[tid] = shape
        gen.bound[tid] = 1.0
        gen.pool.append(tid)
        gen.unused.append(tid)
        gen.values[tid] = rng.uniform(-1, 1, size=shape).astype(DTYPES[dtype])
    while len(gen.b.g.operators) < target:
        before = len(gen.b.g.operators)
        if target - before >= _MAX_STEP_OPS:
            gen.step(_CATEGORIES[int(rng.integers(len(_CATEGORIES)))])
        else:
            # near the target, single operators keep the count exact
            t = gen.pick()
            gen.emit(["Relu", "Abs", "Tanh"][int(rng.integers(3))], [t], gen.bound[t])
    return gen.b.build(), gen.values
