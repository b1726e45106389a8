"""Index expressions and the interned scalar expression DAG of a fused kernel.

Index expressions are tuples:
    ("v", name)          loop variable
    ("c", k)             integer constant
    ("add", a, b)        a + b
    ("mul", a, k)        a * k, k a positive integer constant
    ("div", a, k)        floor(a / k)
    ("mod", a, k)        a mod k
    ("clip", a, lo, hi)  clamp into [lo, hi]
    ("wrap", a, n)       a + n when a < 0 (negative gather indices)
    ("s", node)          integer value of a scalar node (indirect indexing)

Scalar nodes are interned tuples referenced by integer id:
    ("load", param, idx)         read of an external tensor
    ("const", value)
    ("un", op, a) / ("bin", op, a, b)
    ("sel", cond, a, b)
    ("valid", idx, shape)        1 when idx lies inside shape, else 0
    ("red", kind, body, rvars)   sum/prod/max over reduction variables
"""

from __future__ import annotations

import math

import numpy as np

INF = math.inf

UNARY = {
    "neg": np.negative,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "tanh": np.tanh,
    "recip": np.reciprocal,
    "square": np.square,
    "sigmoid": lambda x: 1 / (1 + np.exp(-x)),
    "floor": np.floor,
}


def _shl(a, b):
    return a * np.exp2(b).astype(np.result_type(a))


def _shr(a, b):
    return np.floor(a / np.exp2(b).astype(np.result_type(a)))


BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "max": np.maximum,
    "min": np.minimum,
    "shl": _shl,
    "shr": _shr,
}

REDUCE_INIT = {"sum": 0.0, "prod": 1.0, "max": -INF}


class ExprBuilder:
    """Interning builder for one kernel; knows loop-variable extents for simplification."""

    def __init__(self):
        self.nodes: list[tuple] = []
        self._ids: dict[tuple, int] = {}
        self.extents: dict[str, int] = {}
        self.rvar_owner: dict[str, int] = {}
        self._n_rvars = 0

    # scalar nodes

    def intern(self, node: tuple) -> int:
        nid = self._ids.get(node)
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(node)
            self._ids[node] = nid
        return nid

    def const(self, value: float) -> int:
        return self.intern(("const", float(value)))

    def load(self, param: str, idx: tuple, shape: tuple[int, ...]) -> int:
        safe = []
        for e, d in zip(idx, shape):
            lo, hi = self.bounds(e)
            if lo < 0 or hi > d - 1:
                e = self.clip(e, 0, d - 1)
            safe.append(e)
        return self.intern(("load", param, tuple(safe)))

    def un(self, op: str, a: int) -> int:
        return self.intern(("un", op, a))

    def bin(self, op: str, a: int, b: int) -> int:
        return self.intern(("bin", op, a, b))

    def sel(self, c: int, a: int, b: int) -> int:
        return self.intern(("sel", c, a, b))

    def valid(self, idx: tuple, shape: tuple[int, ...]) -> int | None:
        """Validity predicate, or None when the index is provably in range."""
        checks = []
        for e, d in zip(idx, shape):
            lo, hi = self.bounds(e)
            if lo < 0 or hi > d - 1:
                checks.append((e, d))
        if not checks:
            return None
        return self.intern(("valid", tuple(e for e, _ in checks), tuple(d for _, d in checks)))

    def new_rvar(self, extent: int) -> str:
        name = f"r{self._n_rvars}"
        self._n_rvars += 1
        self.extents[name] = extent
        return name

    def reduce(self, kind: str, body: int, rvars: tuple[str, ...]) -> int:
        nid = self.intern(("red", kind, body, tuple(rvars)))
        for r in rvars:
            self.rvar_owner.setdefault(r, nid)
        return nid

    # index expressions with light simplification

    def var(self, name: str, extent: int) -> tuple:
        self.extents[name] = extent
        return ("v", name)

    def bounds(self, e) -> tuple[float, float]:
        tag = e[0]
        if tag == "v":
            return 0, self.extents[e[1]] - 1
        if tag == "c":
            return e[1], e[1]
        if tag == "add":
            a, b = self.bounds(e[1]), self.bounds(e[2])
            return a[0] + b[0], a[1] + b[1]
        if tag == "mul":
            a = self.bounds(e[1])
            return a[0] * e[2], a[1] * e[2]
        if tag == "div":
            a = self.bounds(e[1])
            return math.floor(a[0] / e[2]) if a[0] != -INF else -INF, math.floor(a[1] / e[2]) if a[1] != INF else INF
        if tag == "mod":
            return 0, e[2] - 1
        if tag == "clip":
            return e[2], e[3]
        if tag == "wrap":
            return -INF, INF
        return -INF, INF

    def add(self, a, b) -> tuple:
        if a[0] == "c" and b[0] == "c":
            return ("c", a[1] + b[1])
        if b[0] == "c" and b[1] == 0:
            return a
        if a[0] == "c" and a[1] == 0:
            return b
        if a[0] == "c":
            a, b = b, a
        if b[0] == "c" and a[0] == "add" and a[2][0] == "c":
            return self.add(a[1], ("c", a[2][1] + b[1]))
        return ("add", a, b)

    def mul(self, a, k: int) -> tuple:
        if k == 0:
            return ("c", 0)
        if k == 1:
            return a
        if a[0] == "c":
            return ("c", a[1] * k)
        return ("mul", a, k)

    def div(self, a, k: int) -> tuple:
        if k == 1:
            return a
        if a[0] == "c":
            return ("c", a[1] // k)
        lo, hi = self.bounds(a)
        if 0 <= lo and hi < k:
            return ("c", 0)
        if a[0] == "mul" and a[2] % k == 0:
            return self.mul(a[1], a[2] // k)
        return ("div", a, k)

    def mod(self, a, k: int) -> tuple:
        if k == 1:
            return ("c", 0)
        if a[0] == "c":
            return ("c", a[1] % k)
        lo, hi = self.bounds(a)
        if 0 <= lo and hi < k:
            return a
        if a[0] == "mul" and a[2] % k == 0:
            return ("c", 0)
        return ("mod", a, k)

    def clip(self, a, lo: int, hi: int) -> tuple:
        blo, bhi = self.bounds(a)
        if blo >= lo and bhi <= hi:
            return a
        return ("clip", a, lo, hi)

    def linear(self, terms: list[tuple[tuple, int]], offset: int = 0) -> tuple:
        e = ("c", offset)
        for t, k in terms:
            e = self.add(e, self.mul(t, k))
        return e


# --- free variables ---------------------------------------------------------------


def index_vars(e, node_vars) -> set[str]:
    tag = e[0]
    if tag == "v":
        return {e[1]}
    if tag == "c":
        return set()
    if tag == "s":
        return set(node_vars(e[1]))
    out = set()
    for part in e[1:]:
        if isinstance(part, tuple):
            out |= index_vars(part, node_vars)
    return out


def free_vars(nodes: list[tuple]) -> list[frozenset[str]]:
    """Loop variables each node depends on (a reduction binds its own variables)."""
    memo: list[frozenset[str] | None] = [None] * len(nodes)

    def fv(nid: int) -> frozenset[str]:
        got = memo[nid]
        if got is not None:
            return got
        n = nodes[nid]
        tag = n[0]
        if tag == "load":
            out = set().union(*(index_vars(e, fv) for e in n[2])) if n[2] else set()
        elif tag == "const":
            out = set()
        elif tag == "un":
            out = set(fv(n[2]))
        elif tag == "bin":
            out = fv(n[2]) | fv(n[3])
        elif tag == "sel":
            out = fv(n[1]) | fv(n[2]) | fv(n[3])
        elif tag == "valid":
            out = set().union(*(index_vars(e, fv) for e in n[1]))
        elif tag == "red":
            out = set(fv(n[2])) - set(n[3])
        else:
            raise ValueError(f"unknown node {n!r}")
        memo[nid] = frozenset(out)
        return memo[nid]

    return [fv(i) for i in range(len(nodes))]


def children(node: tuple) -> list[int]:
    """Scalar-node operands, including nodes referenced from index expressions."""
    tag = node[0]
    out: list[int] = []

    def from_index(e):
        if e[0] == "s":
            out.append(e[1])
        elif e[0] not in ("v", "c"):
            for part in e[1:]:
                if isinstance(part, tuple):
                    from_index(part)

    if tag == "load":
        for e in node[2]:
            from_index(e)
    elif tag == "un":
        out.append(node[2])
    elif tag == "bin":
        out.extend(node[2:4])
    elif tag == "sel":
        out.extend(node[1:4])
    elif tag == "valid":
        for e in node[1]:
            from_index(e)
    elif tag == "red":
        out.append(node[2])
    return out


def reachable(nodes: list[tuple], roots: list[int]) -> list[int]:
    """Nodes reachable from ``roots`` in dependency (post) order."""
    seen: set[int] = set()
    order: list[int] = []
    stack = [(r, False) for r in reversed(roots)]
    while stack:
        nid, done = stack.pop()
        if done:
            order.append(nid)
            continue
        if nid in seen:
            continue
        seen.add(nid)
        stack.append((nid, True))
        for c in reversed(children(nodes[nid])):
            if c not in seen:
                stack.append((c, False))
    return order


# --- vectorized evaluation -----------------------------------------------------------


class GridEvaluator:
    """Evaluates nodes over a broadcast grid: output variables first, then one axis per reduction variable."""

    def __init__(self, nodes, arrays: dict[str, np.ndarray], axes: dict[str, int], ranges: dict[str, tuple[int, int]], ndim: int, dtype):
        self.nodes = nodes
        self.arrays = arrays
        self.axes = axes
        self.ranges = ranges
        self.ndim = ndim
        self.dtype = dtype
        self.cache: dict[int, np.ndarray] = {}
        self.evaluations = 0
        self._var_cache: dict[str, np.ndarray] = {}

    def var_array(self, name: str) -> np.ndarray:
        arr = self._var_cache.get(name)
        if arr is None:
            lo, hi = self.ranges[name]
            shape = [1] * self.ndim
            shape[self.axes[name]] = hi - lo
            arr = np.arange(lo, hi, dtype=np.int64).reshape(shape)
            self._var_cache[name] = arr
        return arr

    def index(self, e):
        tag = e[0]
        if tag == "v":
            return self.var_array(e[1])
        if tag == "c":
            return e[1]
        if tag == "add":
            return self.index(e[1]) + self.index(e[2])
        if tag == "mul":
            return self.index(e[1]) * e[2]
        if tag == "div":
            return self.index(e[1]) // e[2]
        if tag == "mod":
            return self.index(e[1]) % e[2]
        if tag == "clip":
            return np.clip(self.index(e[1]), e[2], e[3])
        if tag == "wrap":
            a = self.index(e[1])
            return np.where(a < 0, a + e[2], a)
        if tag == "s":
            return np.asarray(self.eval(e[1])).astype(np.int64)
        raise ValueError(f"bad index expression {e!r}")

    def _affine(self, e):
        """(var, coeff, const) when ``e`` is coeff*var + const, else None."""
        if e[0] == "v":
            return e[1], 1, 0
        if e[0] == "c":
            return None, 0, e[1]
        if e[0] == "mul" and e[1][0] == "v":
            return e[1][1], e[2], 0
        if e[0] == "add" and e[2][0] == "c":
            inner = self._affine(e[1])
            if inner is not None and inner[0] is not None:
                return inner[0], inner[1], inner[2] + e[2][1]
        return None

    def load(self, param: str, idx: tuple) -> np.ndarray:
        arr = self.arrays[param]
        if not idx:
            return arr
        parts = [self._affine(e) for e in idx]
        used = [p[0] for p in parts if p is not None and p[0] is not None]
        if all(p is not None for p in parts) and len(used) == len(set(used)):
            # basic slicing: a strided view reshaped onto the grid axes
            sl = []
            order = []
            for v, k, c in parts:
                if v is None:
                    sl.append(c)
                else:
                    lo, hi = self.ranges[v]
                    sl.append(slice(c + k * lo, c + k * (hi - 1) + 1, k))
                    order.append(v)
            view = arr[tuple(sl)]
            perm = sorted(range(len(order)), key=lambda i: self.axes[order[i]])
            view = np.transpose(view, perm)
            shape = [1] * self.ndim
            for v in order:
                lo, hi = self.ranges[v]
                shape[self.axes[v]] = hi - lo
            return view.reshape(shape)
        return arr[tuple(self.index(e) for e in idx)]

    def eval(self, nid: int):
        got = self.cache.get(nid)
        if got is not None:
            return got
        self.evaluations += 1
        n = self.nodes[nid]
        tag = n[0]
        if tag == "load":
            out = self.load(n[1], n[2])
        elif tag == "const":
            out = np.asarray(n[1], dtype=self.dtype)
        elif tag == "un":
            out = UNARY[n[1]](self.eval(n[2]))
        elif tag == "bin":
            out = BINARY[n[1]](self.eval(n[2]), self.eval(n[3]))
        elif tag == "sel":
            out = np.where(self.eval(n[1]), self.eval(n[2]), self.eval(n[3]))
        elif tag == "valid":
            ok = True
            for e, d in zip(n[1], n[2]):
                v = self.index(e)
                ok = ok & (v >= 0) & (v < d)
            out = np.asarray(ok)
        elif tag == "red":
            out = self._reduce(n[1], n[2], n[3])
        else:
            raise ValueError(f"unknown node {n!r}")
        self.cache[nid] = out
        return out

    def _reduce(self, kind: str, body: int, rvars: tuple[str, ...]):
        val = np.asarray(self.eval(body))
        val = val.reshape(val.shape + (1,) * (self.ndim - val.ndim)) if val.ndim < self.ndim else val
        axes = tuple(self.axes[r] for r in rvars)
        shape = list(val.shape)
        for r in rvars:
            shape[self.axes[r]] = self.ranges[r][1] - self.ranges[r][0]
        val = np.broadcast_to(val, shape)
        if kind == "sum":
            out = np.sum(val, axis=axes, keepdims=True, dtype=np.float64)
        elif kind == "prod":
            out = np.prod(val, axis=axes, keepdims=True, dtype=np.float64)
        elif kind == "max":
            return np.max(val, axis=axes, keepdims=True)
        else:
            raise ValueError(f"unknown reduction {kind!r}")
        return out.astype(val.dtype if val.dtype.kind == "f" else self.dtype)
