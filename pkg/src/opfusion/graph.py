"""Extended computational graph: tensors, operators, model I/O, shapes, FLOPs."""

from __future__ import annotations

import copy
import heapq
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from . import ops
from .errors import GraphError, ShapeError
from .mapping import MappingType

INPUT, WEIGHT, INTERMEDIATE, OUTPUT = "input", "weight", "intermediate", "output"
_KIND_ALIASES = {
    "input": INPUT, "model-input": INPUT,
    "weight": WEIGHT, "constant": WEIGHT, "weight/constant": WEIGHT,
    "intermediate": INTERMEDIATE,
    "output": OUTPUT, "model-output": OUTPUT,
}
DTYPES = {"f32": np.float32, "f64": np.float64, "i64": np.int64}
MAX_LITERAL_ELEMENTS = 4096


def itemsize(dtype: str) -> int:
    return np.dtype(DTYPES[dtype]).itemsize


@dataclass
class TensorSpec:
    id: str
    shape: tuple[int, ...] | None
    dtype: str = "f32"
    kind: str = INTERMEDIATE
    producer: str | None = None
    consumers: list[str] = field(default_factory=list)
    data: np.ndarray | None = None

    @property
    def numel(self) -> int:
        return ops.numel(self.shape)

    @property
    def nbytes(self) -> int:
        return self.numel * itemsize(self.dtype)

    @property
    def is_constant(self) -> bool:
        return self.kind == WEIGHT


@dataclass
class OperatorDescriptor:
    id: str
    kind: str
    inputs: list[str]
    outputs: list[str]
    attributes: dict[str, Any] = field(default_factory=dict)
    mapping_type: MappingType | None = None
    properties: frozenset[str] = frozenset()
    # input slot -> chain of (kind, attributes) index remaps folded into this read
    input_views: dict[int, list[tuple[str, dict]]] = field(default_factory=dict)


@dataclass
class FlopCount:
    total: int
    per_operator: dict[str, int]


@dataclass(frozen=True)
class Diagnostic:
    node: str
    message: str

    def __str__(self) -> str:
        return f"{self.node}: {self.message}"


class ExtendedComputationalGraph:
    """Operators and tensors keyed by id, plus fusion metadata.

    Passes never mutate a graph they receive; they work on ``copy()``.
    """

    def __init__(self, name: str = "model"):
        self.name = name
        self.operators: dict[str, OperatorDescriptor] = {}
        self.tensors: dict[str, TensorSpec] = {}
        self.ir_removable: dict[str, bool] = {}
        self._topo: list[str] | None = None

    # construction ----------------------------------------------------------

    def add_tensor(self, spec: TensorSpec) -> TensorSpec:
        if spec.id in self.tensors:
            raise GraphError(f"duplicate tensor id {spec.id!r}")
        self.tensors[spec.id] = spec
        return spec

    def add_operator(self, op: OperatorDescriptor) -> OperatorDescriptor:
        if op.id in self.operators:
            raise GraphError(f"duplicate operator id {op.id!r}")
        op.kind = ops.canonical_kind(op.kind)
        self.operators[op.id] = op
        for t in op.inputs:
            if t not in self.tensors:
                raise GraphError(f"operator {op.id!r} reads undeclared tensor {t!r}")
            if op.id not in self.tensors[t].consumers:
                self.tensors[t].consumers.append(op.id)
        for t in op.outputs:
            spec = self.tensors.get(t)
            if spec is None:
                spec = self.add_tensor(TensorSpec(t, None))
            if spec.producer is not None:
                raise GraphError(f"tensor {t!r} produced by both {spec.producer!r} and {op.id!r}")
            if spec.kind in (INPUT, WEIGHT):
                raise GraphError(f"operator {op.id!r} writes {spec.kind} tensor {t!r}")
            spec.producer = op.id
        op.properties = ops.get(op.kind).properties
        self._topo = None
        return op

    def remove_operator(self, op_id: str) -> None:
        op = self.operators.pop(op_id)
        for t in set(op.inputs):
            self.tensors[t].consumers.remove(op_id)
        for t in op.outputs:
            self.tensors[t].producer = None
        self._topo = None

    def replace_input(self, op_id: str, old: str, new: str) -> None:
        op = self.operators[op_id]
        op.inputs = [new if t == old else t for t in op.inputs]
        if op_id in self.tensors[old].consumers:
            self.tensors[old].consumers.remove(op_id)
        if op_id not in self.tensors[new].consumers:
            self.tensors[new].consumers.append(op_id)
        self._topo = None

    def drop_dead_tensors(self) -> None:
        for tid in [t for t, s in self.tensors.items() if s.producer is None and not s.consumers and s.kind in (WEIGHT, INTERMEDIATE)]:
            del self.tensors[tid]

    def copy(self) -> "ExtendedComputationalGraph":
        g = ExtendedComputationalGraph(self.name)
        for tid, t in self.tensors.items():
            g.tensors[tid] = TensorSpec(t.id, t.shape, t.dtype, t.kind, t.producer, list(t.consumers), t.data)
        for oid, o in self.operators.items():
            g.operators[oid] = OperatorDescriptor(
                o.id, o.kind, list(o.inputs), list(o.outputs), copy.deepcopy(o.attributes),
                o.mapping_type, o.properties, copy.deepcopy(o.input_views),
            )
        g.ir_removable = dict(self.ir_removable)
        g._topo = list(self._topo) if self._topo is not None else None
        return g

    # queries ----------------------------------------------------------------

    @property
    def topo_order(self) -> list[str]:
        if self._topo is None:
            order, cycle = _toposort(self)
            if cycle:
                raise GraphError(f"graph is cyclic: {' -> '.join(cycle)}")
            self._topo = order
        return self._topo

    def topo_index(self) -> dict[str, int]:
        return {op: i for i, op in enumerate(self.topo_order)}

    def successors(self, op_id: str) -> list[str]:
        seen: dict[str, None] = {}
        for t in self.operators[op_id].outputs:
            for c in self.tensors[t].consumers:
                seen.setdefault(c)
        return list(seen)

    def predecessors(self, op_id: str) -> list[str]:
        seen: dict[str, None] = {}
        for t in self.operators[op_id].inputs:
            p = self.tensors[t].producer
            if p is not None:
                seen.setdefault(p)
        return list(seen)

    def inputs(self) -> list[str]:
        return [t for t, s in self.tensors.items() if s.kind == INPUT]

    def weights(self) -> list[str]:
        return [t for t, s in self.tensors.items() if s.kind == WEIGHT]

    def outputs(self) -> list[str]:
        return [t for t, s in self.tensors.items() if s.kind == OUTPUT]

    def intermediates(self) -> list[str]:
        return [t for t, s in self.tensors.items() if s.kind == INTERMEDIATE and s.producer is not None]

    def irs_bytes(self) -> int:
        return sum(self.tensors[t].nbytes for t in self.intermediates())

    def shapes_of(self, tensor_ids: Iterable[str]) -> list[tuple[int, ...]]:
        return [self.tensors[t].shape for t in tensor_ids]

    def __repr__(self) -> str:
        return f"<ECG {self.name}: {len(self.operators)} operators, {len(self.tensors)} tensors>"


ECG = ExtendedComputationalGraph


def _toposort(g: ECG) -> tuple[list[str], list[str]]:
    """Kahn's algorithm, ties broken by insertion order. Returns (order, cycle)."""
    position = {op: i for i, op in enumerate(g.operators)}
    indeg = {op: 0 for op in g.operators}
    succ: dict[str, list[str]] = {op: [] for op in g.operators}
    for oid, op in g.operators.items():
        preds = set()
        for t in op.inputs:
            spec = g.tensors.get(t)
            p = spec.producer if spec is not None else None
            if p is not None and p in g.operators and p not in preds:
                preds.add(p)
                succ[p].append(oid)
        indeg[oid] = len(preds)
    heap = [(position[o], o) for o, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        _, o = heapq.heappop(heap)
        order.append(o)
        for s in succ[o]:
            indeg[s] -= 1
            if indeg[s] == 0:
                heapq.heappush(heap, (position[s], s))
    if len(order) == len(g.operators):
        return order, []
    return order, _find_cycle({o for o in g.operators if o not in set(order)}, succ)


def _find_cycle(nodes: set[str], succ: dict[str, list[str]]) -> list[str]:
    # every unsorted node has an unsorted predecessor, so walking backwards must loop
    pred: dict[str, list[str]] = {n: [] for n in nodes}
    for n in sorted(nodes):
        for s in succ[n]:
            if s in nodes:
                pred[s].append(n)
    path, index = [], {}
    node = min(nodes)
    while node not in index:
        index[node] = len(path)
        path.append(node)
        node = pred[node][0]
    cycle = path[index[node]:][::-1]
    return cycle + [cycle[0]]


# --- model file I/O -------------------------------------------------------------


def _load_data(entry: dict, shape, dtype: str, base_dir: Path | None) -> np.ndarray | None:
    if "data" in entry and entry["data"] is not None:
        arr = np.asarray(entry["data"], dtype=DTYPES[dtype])
        if arr.size > MAX_LITERAL_ELEMENTS:
            raise GraphError(f"weight {entry['id']!r}: literal data limited to {MAX_LITERAL_ELEMENTS} elements, use a sidecar path")
    elif entry.get("path"):
        path = Path(entry["path"])
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        arr = np.fromfile(path, dtype=np.dtype(DTYPES[dtype]).newbyteorder("<")).astype(DTYPES[dtype])
    else:
        return None
    if arr.size != ops.numel(shape):
        raise GraphError(f"weight {entry['id']!r}: {arr.size} values for shape {list(shape)}")
    return arr.reshape(shape)


def parse_model(text: str, base_dir: str | Path | None = None, name: str = "model") -> ECG:
    """Parse a JSON model description into a shape-inferred, classified ECG."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphError(f"syntax error: {exc.msg}", line=exc.lineno) from None
    if not isinstance(doc, dict):
        raise GraphError("model must be a JSON object with 'tensors' and 'operators'")
    base = Path(base_dir) if base_dir is not None else None
    g = ECG(doc.get("name", name))
    for entry in doc.get("tensors", []):
        try:
            tid = entry["id"]
        except (KeyError, TypeError):
            raise GraphError(f"tensor entry without id: {entry!r}") from None
        kind = _KIND_ALIASES.get(entry.get("kind", INTERMEDIATE))
        if kind is None:
            raise GraphError(f"tensor {tid!r}: unknown kind {entry.get('kind')!r}")
        dtype = entry.get("dtype", "f32")
        if dtype not in DTYPES:
            raise GraphError(f"tensor {tid!r}: unsupported dtype {dtype!r}")
        shape = entry.get("shape")
        if shape is not None:
            shape = tuple(int(d) for d in shape)
            if any(d < 1 for d in shape):
                raise ShapeError(f"tensor {tid!r}: extents must be >= 1, got {list(shape)}")
        elif kind in (INPUT, WEIGHT):
            raise ShapeError(f"{kind} tensor {tid!r} needs a declared shape")
        data = _load_data(entry, shape, dtype, base) if kind == WEIGHT else None
        g.add_tensor(TensorSpec(tid, shape, dtype, kind, data=data))

    op_entries = doc.get("operators") or []
    if not op_entries:
        raise GraphError("graph has no operators")
    for entry in op_entries:
        try:
            oid, kind = entry["id"], entry["kind"]
        except (KeyError, TypeError):
            raise GraphError(f"operator entry needs 'id' and 'kind': {entry!r}") from None
        definition = ops.get(kind)
        n_in, n_out = len(entry.get("inputs", [])), len(entry.get("outputs", []))
        lo, hi = definition.inputs
        olo, ohi = definition.outputs
        if not (lo <= n_in <= hi) or n_out < olo or (ohi is not None and n_out > ohi):
            raise GraphError(f"operator {oid!r} ({definition.name}): arity mismatch, {n_in} inputs / {n_out} outputs")
        g.add_operator(OperatorDescriptor(
            oid, kind, list(entry.get("inputs", [])), list(entry.get("outputs", [])),
            dict(entry.get("attributes", {})),
            input_views={int(k): [(vk, dict(va)) for vk, va in v] for k, v in entry.get("input_views", {}).items()},
        ))

    for tid, spec in g.tensors.items():
        if spec.producer is None and spec.kind in (INTERMEDIATE, OUTPUT):
            raise GraphError(f"tensor {tid!r} is declared {spec.kind} but no operator produces it")
        if spec.kind == INTERMEDIATE and not spec.consumers:
            spec.kind = OUTPUT
    g.topo_order  # raises on cycles
    return infer_shapes(g)


def load_model(path: str | Path) -> ECG:
    path = Path(path)
    return parse_model(path.read_text(), base_dir=path.parent, name=path.stem)


def render_model(g: ECG, sidecar_dir: str | Path | None = None) -> str:
    """Serialize to the JSON model format; large weights go to ``<id>.bin`` sidecars."""
    tensors = []
    for tid, t in g.tensors.items():
        if t.kind == INTERMEDIATE:
            continue
        entry: dict[str, Any] = {"id": tid, "kind": t.kind, "dtype": t.dtype}
        if t.shape is not None:
            entry["shape"] = list(t.shape)
        if t.data is not None:
            if t.data.size <= MAX_LITERAL_ELEMENTS:
                entry["data"] = t.data.reshape(-1).tolist()
            else:
                if sidecar_dir is None:
                    raise GraphError(f"weight {tid!r} needs a sidecar directory to be rendered")
                Path(sidecar_dir).mkdir(parents=True, exist_ok=True)
                fname = f"{tid}.bin"
                np.ascontiguousarray(t.data).astype(np.dtype(DTYPES[t.dtype]).newbyteorder("<")).tofile(Path(sidecar_dir) / fname)
                entry["path"] = fname
        tensors.append(entry)
    operators = []
    for oid in g.topo_order:
        op = g.operators[oid]
        entry = {"id": oid, "kind": op.kind, "inputs": op.inputs, "outputs": op.outputs, "attributes": op.attributes}
        if op.input_views:
            entry["input_views"] = {str(k): [[vk, va] for vk, va in v] for k, v in op.input_views.items()}
        operators.append(entry)
    def block(items):
        return ",\n".join("  " + json.dumps(e, default=_json_default) for e in items)

    return (
        "{\n"
        f' "name": {json.dumps(g.name)},\n'
        f' "tensors": [\n{block(tensors)}\n ],\n'
        f' "operators": [\n{block(operators)}\n ]\n'
        "}"
    )


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


# --- passes -----------------------------------------------------------------------


def view_shape(kind: str, attrs: dict, shape) -> tuple[int, ...]:
    return ops.infer_op_shapes(kind, attrs, [shape], 1)[0]


def effective_input_shapes(g: ECG, op: OperatorDescriptor) -> list[tuple[int, ...]]:
    """Input shapes as seen by the operator, after any folded index remaps."""
    shapes = []
    for slot, t in enumerate(op.inputs):
        shape = g.tensors[t].shape
        if shape is None:
            raise ShapeError(f"operator {op.id!r}: input {t!r} has no shape")
        for vk, va in op.input_views.get(slot, []):
            shape = view_shape(vk, va, shape)
        shapes.append(shape)
    return shapes


def infer_shapes(g: ECG) -> ECG:
    """Propagate shapes in topological order and assign mapping types."""
    g = g.copy()
    for oid in g.topo_order:
        op = g.operators[oid]
        in_shapes = effective_input_shapes(g, op)
        try:
            out_shapes = ops.infer_op_shapes(op.kind, op.attributes, in_shapes, len(op.outputs))
        except ShapeError as exc:
            raise ShapeError(f"operator {oid!r} ({op.kind}): {exc}") from None
        except (KeyError, TypeError) as exc:
            raise ShapeError(f"operator {oid!r} ({op.kind}): unresolvable attribute {exc}") from None
        for t, s in zip(op.outputs, out_shapes):
            spec = g.tensors[t]
            if spec.shape is not None and spec.kind == OUTPUT and tuple(spec.shape) != s:
                raise ShapeError(f"operator {oid!r}: declared shape {list(spec.shape)} of {t!r} but inferred {list(s)}")
            spec.shape = s
        float_in = [g.tensors[t].dtype for t in op.inputs if g.tensors[t].dtype != "i64"]
        for t in op.outputs:
            g.tensors[t].dtype = float_in[0] if float_in else "f32"
        op.mapping_type = ops.classify_operator(op.kind, op.attributes, in_shapes, out_shapes)
    return g


def flop_count(g: ECG) -> FlopCount:
    per = {}
    for oid in g.topo_order:
        op = g.operators[oid]
        out_shapes = [g.tensors[t].shape for t in op.outputs]
        if any(s is None for s in out_shapes):
            raise ShapeError(f"operator {oid!r}: shapes not inferred")
        per[oid] = ops.op_flops(op.kind, op.attributes, effective_input_shapes(g, op), out_shapes)
    return FlopCount(sum(per.values()), per)


def validate(g: ECG) -> list[Diagnostic]:
    """Check every structural invariant; returns one diagnostic per violation."""
    diags: list[Diagnostic] = []
    producers: dict[str, list[str]] = {}
    consumers: dict[str, set[str]] = {}
    for oid, op in g.operators.items():
        if op.kind not in ops.REGISTRY:
            diags.append(Diagnostic(oid, f"unknown operator kind {op.kind!r}"))
            continue
        d = ops.REGISTRY[op.kind]
        lo, hi = d.inputs
        olo, ohi = d.outputs
        if not (lo <= len(op.inputs) <= hi) or len(op.outputs) < olo or (ohi is not None and len(op.outputs) > ohi):
            diags.append(Diagnostic(oid, f"arity {len(op.inputs)}/{len(op.outputs)} invalid for {op.kind}"))
        for t in op.inputs:
            if t not in g.tensors:
                diags.append(Diagnostic(oid, f"reads undeclared tensor {t!r}"))
            consumers.setdefault(t, set()).add(oid)
        for t in op.outputs:
            producers.setdefault(t, []).append(oid)
    for tid, spec in g.tensors.items():
        if spec.shape is None:
            diags.append(Diagnostic(tid, "shape not inferred"))
        elif any(d < 1 for d in spec.shape):
            diags.append(Diagnostic(tid, f"non-positive extent in {list(spec.shape)}"))
        prods = producers.get(tid, [])
        if spec.kind in (INPUT, WEIGHT) and prods:
            diags.append(Diagnostic(tid, f"{spec.kind} tensor written by {prods}"))
        elif spec.kind in (INTERMEDIATE, OUTPUT) and len(prods) != 1:
            diags.append(Diagnostic(tid, f"expected exactly one producer, found {prods}"))
        if set(spec.consumers) != consumers.get(tid, set()) or len(spec.consumers) != len(set(spec.consumers)):
            diags.append(Diagnostic(tid, "consumer list does not match operator inputs"))
        if spec.kind == INTERMEDIATE and not consumers.get(tid):
            diags.append(Diagnostic(tid, "unconsumed non-constant tensor is not a model output"))
        if g.ir_removable.get(tid) and spec.kind != INTERMEDIATE:
            diags.append(Diagnostic(tid, f"marked IR-removable but is a {spec.kind} tensor"))
    order, cycle = _toposort(g)
    if cycle:
        diags.append(Diagnostic(cycle[0], "cycle: " + " -> ".join(cycle)))
    else:
        for oid, op in g.operators.items():
            if op.kind not in ops.REGISTRY or op.mapping_type is None:
                continue
            try:
                shapes_in = effective_input_shapes(g, op)
                expected = ops.classify_operator(op.kind, op.attributes, shapes_in, [g.tensors[t].shape for t in op.outputs])
            except (ShapeError, KeyError):
                continue
            if expected is not op.mapping_type:
                diags.append(Diagnostic(oid, f"mapping type {op.mapping_type.value} != registry {expected.value}"))
    return diags
