"""Deterministic C-like rendering of a LoopNestKernel, for inspection and golden tests."""

from __future__ import annotations

from .expr import children, free_vars, reachable
from .kernel import LoopNestKernel

_CTYPE = {"f32": "float", "f64": "double", "i64": "long"}
_INFIX = {"add": "+", "sub": "-", "mul": "*", "div": "/"}
_CALL = {"max": "fmax", "min": "fmin", "shl": "shl", "shr": "shr"}
_UNARY = {
    "neg": "-{}", "exp": "exp({})", "log": "log({})", "sqrt": "sqrt({})", "abs": "fabs({})",
    "tanh": "tanh({})", "recip": "1 / {}", "square": "sq({})", "sigmoid": "sigmoid({})", "floor": "floor({})",
}
_INIT = {"sum": "0", "prod": "1", "max": "-INFINITY"}


def _index(e, expr) -> str:
    tag = e[0]
    if tag == "v":
        return e[1]
    if tag == "c":
        return str(e[1])
    if tag == "add":
        rhs = e[2]
        if rhs[0] == "c" and rhs[1] < 0:
            return f"{_index(e[1], expr)} - {-rhs[1]}"
        return f"{_index(e[1], expr)} + {_index(rhs, expr)}"
    if tag == "mul":
        return f"{_wrap(e[1], expr)} * {e[2]}"
    if tag == "div":
        return f"{_wrap(e[1], expr)} / {e[2]}"
    if tag == "mod":
        return f"{_wrap(e[1], expr)} % {e[2]}"
    if tag == "clip":
        return f"clamp({_index(e[1], expr)}, {e[2]}, {e[3]})"
    if tag == "wrap":
        return f"wrap({_index(e[1], expr)}, {e[2]})"
    if tag == "s":
        return f"(long){expr(e[1])}"
    raise ValueError(f"bad index expression {e!r}")


def _wrap(e, expr) -> str:
    text = _index(e, expr)
    return f"({text})" if e[0] in ("add",) else text


class _Emitter:
    def __init__(self, k: LoopNestKernel):
        self.k = k
        self.nodes = k.nodes
        self.fv = free_vars(k.nodes)
        self.lines: list[str] = []
        self.names: dict[int, str] = {}

    def expr(self, nid: int) -> str:
        if nid in self.names:
            return self.names[nid]
        n = self.nodes[nid]
        tag = n[0]
        if tag == "load":
            return n[1] + "".join(f"[{_index(e, self.expr)}]" for e in n[2])
        if tag == "const":
            v = n[1]
            if v == float("-inf"):
                return "-INFINITY"
            return repr(int(v)) if v == int(v) else repr(v)
        if tag == "un":
            return _UNARY[n[1]].format(self.atom(n[2]))
        if tag == "bin":
            if n[1] in _INFIX:
                return f"{self.atom(n[2])} {_INFIX[n[1]]} {self.atom(n[3])}"
            return f"{_CALL[n[1]]}({self.expr(n[2])}, {self.expr(n[3])})"
        if tag == "sel":
            return f"{self.atom(n[1])} ? {self.atom(n[2])} : {self.atom(n[3])}"
        if tag == "valid":
            parts = [f"inside({_index(e, self.expr)}, {d})" for e, d in zip(n[1], n[2])]
            return " && ".join(parts)
        raise ValueError(f"node {n!r} cannot be inlined")

    def atom(self, nid: int) -> str:
        text = self.expr(nid)
        n = self.nodes[nid]
        simple = nid in self.names or n[0] in ("load", "const") or (n[0] == "bin" and n[1] in _CALL)
        simple = simple or (n[0] == "un" and n[1] not in ("recip", "neg"))
        return text if simple else f"({text})"

    def emit(self, indent: int, text: str) -> None:
        self.lines.append("  " * indent + text)

    def nest(self, nest, index: int) -> None:
        order = reachable(self.nodes, [nest.root])
        uses: dict[int, int] = {}
        for nid in order:
            for c in children(self.nodes[nid]):
                uses[c] = uses.get(c, 0) + 1
        temps = [
            nid for nid in order
            if self.nodes[nid][0] == "red"
            or (uses.get(nid, 0) > 1 and self.nodes[nid][0] not in ("const", "valid"))
        ]
        owner = {}
        for nid in order:
            if self.nodes[nid][0] == "red":
                for r in self.nodes[nid][3]:
                    owner.setdefault(r, nid)
        depth: dict[int, int] = {}

        def scope(nid: int) -> int | None:
            best = None
            for v in self.fv[nid]:
                o = owner.get(v)
                if o is not None and (best is None or level(o) > level(best)):
                    best = o
            return best

        def level(red: int) -> int:
            if red not in depth:
                s = scope(red)
                depth[red] = 0 if s is None else level(s) + 1
            return depth[red]

        by_scope: dict[int | None, list[int]] = {}
        for nid in temps:
            by_scope.setdefault(scope(nid), []).append(nid)
        loops = nest.loops
        ctype = _CTYPE[self.k.dtype]
        for d, (var, extent, origin) in enumerate(loops):
            note = f"  // {origin}" if origin else ""
            self.emit(1 + d, f"for (int {var} = 0; {var} < {extent}; ++{var}){' {' if d == len(loops) - 1 else ''}{note}")
        body = 1 + len(loops)
        self._scope(None, by_scope, body, ctype)
        store = nest.output + "".join(f"[{v}]" for v, _, _ in loops)
        self.emit(body, f"{store} = {self.expr(nest.root)};")
        if loops:
            self.emit(len(loops), "}")

    def _scope(self, scope, by_scope, indent: int, ctype: str) -> None:
        for nid in by_scope.get(scope, []):
            n = self.nodes[nid]
            name = f"t{len(self.names)}"
            if n[0] != "red":
                self.emit(indent, f"{ctype} {name} = {self.expr(nid)};")
                self.names[nid] = name
                continue
            acc = "double" if n[1] in ("sum", "prod") else ctype
            self.emit(indent, f"{acc} {name} = {_INIT[n[1]]};")
            rvars = n[3]
            for j, r in enumerate(rvars):
                self.emit(indent + j, f"for (int {r} = 0; {r} < {self.k.extents[r]}; ++{r}){' {' if j == len(rvars) - 1 else ''}")
            inner = indent + len(rvars)
            self._scope(nid, by_scope, inner, ctype)
            body = self.expr(n[2])
            if n[1] == "sum":
                self.emit(inner, f"{name} += {body};")
            elif n[1] == "prod":
                self.emit(inner, f"{name} *= {body};")
            else:
                self.emit(inner, f"{name} = fmax({name}, {body});")
            self.emit(indent + len(rvars) - 1, "}")
            for nid2 in [x for x in self.names if by_scope_has(by_scope, nid, x)]:
                del self.names[nid2]
            self.names[nid] = name


def by_scope_has(by_scope, scope, nid) -> bool:
    return nid in by_scope.get(scope, [])


def emit_source(k: LoopNestKernel) -> str:
    """Nested for-loops, scalar temporaries, indexed loads and stores."""
    em = _Emitter(k)
    em.lines.append(f"// kernel {k.block_id}" + (f" ({k.mapping_type.value})" if k.mapping_type else ""))
    if k.structural_hash:
        em.lines.append(f"// structure {k.structural_hash[:16]}")
    for op, first, second, action in k.trace:
        em.lines.append(f"// fuse {op}: ({first}, {second}) -> {action}")
    for p, shape, dtype in k.inputs + k.outputs:
        em.lines.append(f"// {p} = {k.bindings.get(p, '?')}")
    params = [
        f"const {_CTYPE[dt]} {p}" + "".join(f"[{d}]" for d in shape) for p, shape, dt in k.inputs
    ] + [f"{_CTYPE[dt]} {p}" + "".join(f"[{d}]" for d in shape) for p, shape, dt in k.outputs]
    em.lines.append(f"void {k.block_id}({', '.join(params)}) {{")
    for i, nest in enumerate(k.nests):
        em.names = {}
        em.nest(nest, i)
    em.lines.append("}")
    return "\n".join(em.lines) + "\n"
