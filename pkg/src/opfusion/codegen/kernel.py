"""Fused loop-nest kernels: synthesis from a data-flow tree, execution, caching."""

from __future__ import annotations

import hashlib
import json
import math
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..errors import CodegenError
from ..graph import DTYPES, ECG, view_shape
from ..mapping import M2M, O2M, REORG, SHUF, FusionDecisionTable, MappingType, fusion_lookup
from .dft import DataFlowTree, build_dft, eliminate_common_subtrees
from .expr import ExprBuilder, GridEvaluator, free_vars, reachable
from .lowering import lower_op, view_index

TILE_ELEMS = 1 << 16


# --- codegen rules ---------------------------------------------------------------

ACTIONS = {
    "inline": "second operator's expression is inlined into the first's body",
    "index_substitution": "reads of the stretched operand go through the broadcast/gather index map",
    "skeleton": "the Many-to-Many operator supplies the loop skeleton; the other body is inlined into its reads",
    "epilogue": "applied per output element after the Many-to-Many accumulation",
    "relinearize": "output index is relinearized into the producer's index space",
    "permute": "loops are permuted so the shuffled operand is written through the permutation",
    "remap": "shuffle permutation and reorganize relinearization compose into one index map",
}


@dataclass(frozen=True)
class CodegenRule:
    first: MappingType
    second: MappingType
    action: str

    @property
    def description(self) -> str:
        return ACTIONS[self.action]


def _action(first: MappingType, second: MappingType) -> str:
    if second is SHUF:
        return "permute"
    if second is REORG:
        return "remap" if first is SHUF else "relinearize"
    if second is M2M:
        return "skeleton"
    if first is M2M:
        return "epilogue"
    if second is O2M:
        return "index_substitution"
    return "inline"


def codegen_rules(table: FusionDecisionTable | None = None) -> dict[tuple[MappingType, MappingType], CodegenRule]:
    """One rule per non-Break cell of the decision table."""
    from ..mapping import DEFAULT_TABLE

    table = table or DEFAULT_TABLE
    return {(a, b): CodegenRule(a, b, _action(a, b)) for a, b in table.non_break_cells()}


# --- kernel ---------------------------------------------------------------------


@dataclass
class LoopNest:
    output: str
    shape: tuple[int, ...]
    loops: list[tuple[str, int, str | None]]
    root: int


@dataclass
class LoopNestKernel:
    block_id: str
    mapping_type: MappingType | None
    inputs: list[tuple[str, tuple[int, ...], str]]
    outputs: list[tuple[str, tuple[int, ...], str]]
    nests: list[LoopNest]
    nodes: list[tuple]
    extents: dict[str, int]
    rvar_owner: dict[str, int]
    dtype: str
    bindings: dict[str, str] = field(default_factory=dict)
    trace: list[tuple[str, str, str, str]] = field(default_factory=list)
    structural_hash: str = ""
    evaluations: int = 0

    @property
    def loops(self) -> list[tuple[str, int, str | None]]:
        return self.nests[0].loops if self.nests else []

    def reads(self) -> list[str]:
        """Tensor ids read from memory by the kernel."""
        params = {n[1] for n in self.nodes if n[0] == "load"}
        return [self.bindings[p] for p, _, _ in self.inputs if p in params]

    def writes(self) -> list[str]:
        return [self.bindings[p] for p, _, _ in self.outputs]

    def index_maps(self) -> dict[str, list[tuple]]:
        out: dict[str, list[tuple]] = {}
        for n in self.nodes:
            if n[0] == "load":
                out.setdefault(n[1], []).append(n[2])
        return out

    def execute(self, env: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Run every loop nest over ``env`` (tensor id -> array); returns the written tensors."""
        arrays = {p: np.asarray(env[self.bindings[p]]) for p, _, _ in self.inputs}
        results: dict[str, np.ndarray] = {}
        self.evaluations = 0
        with np.errstate(all="ignore"):
            for nest in self.nests:
                results[self.bindings[nest.output]] = self._run_nest(nest, arrays)
        return results

    def _run_nest(self, nest: LoopNest, arrays) -> np.ndarray:
        dtype = DTYPES[self.dtype]
        order = reachable(self.nodes, [nest.root])
        rvars = sorted({r for nid in order if self.nodes[nid][0] == "red" for r in self.nodes[nid][3]}, key=lambda r: int(r[1:]))
        k = len(nest.shape)
        names = [v for v, _, _ in nest.loops]
        axes = {v: d for d, v in enumerate(names)}
        axes.update({r: k + j for j, r in enumerate(rvars)})
        ndim = k + len(rvars)
        volume = max((math.prod(self.extents[r] for r in rv) for rv in _reduction_scopes(self.nodes, order)), default=1)
        out = np.empty(nest.shape, dtype=dtype)
        rows = nest.shape[0] if k else 1
        inner = math.prod(nest.shape[1:]) if k else 1
        step = max(1, TILE_ELEMS // max(1, inner * volume))
        for lo in range(0, rows, step):
            hi = min(rows, lo + step)
            ranges = {v: (0, nest.shape[d]) for d, v in enumerate(names)}
            if k:
                ranges[names[0]] = (lo, hi)
            ranges.update({r: (0, self.extents[r]) for r in rvars})
            ev = GridEvaluator(self.nodes, arrays, axes, ranges, ndim, dtype)
            val = np.asarray(ev.eval(nest.root))
            self.evaluations += ev.evaluations
            if val.ndim == ndim and ndim > k:
                val = val.reshape(val.shape[:k])
            if k:
                out[lo:hi] = np.broadcast_to(val, (hi - lo,) + nest.shape[1:])
            else:
                out[...] = val
        return out


def _reduction_scopes(nodes, order) -> list[set[str]]:
    fv = free_vars(nodes)
    scopes = []
    for nid in order:
        n = nodes[nid]
        if n[0] == "red":
            scopes.append(set(n[3]) | {v for v in fv[nid] if v.startswith("r")})
    return scopes


# --- synthesis --------------------------------------------------------------------


def fold_rules(block, rules, table: FusionDecisionTable | None = None) -> list[tuple[str, str, str, str]]:
    """Replay the fusion order, invoking the rule for every fused pair."""
    trace = []
    running = None
    for op, direction, ty in block.fusion_order:
        if running is None:
            running = ty
            continue
        first, second = (running, ty) if direction != "pred" else (ty, running)
        rule = rules.get((first, second))
        if rule is None:
            raise CodegenError(f"block {block.id}: no codegen rule for ({first.value}, {second.value}) fusing {op}")
        trace.append((op, first.value, second.value, rule.action))
        running = fusion_lookup(first, second, table).fused_type
    return trace


def _loop_origin(t: DataFlowTree, root: str) -> str | None:
    node = t.nodes[root]
    if node.kind in ("Transpose", "DepthToSpace"):
        return f"permuted by {node.op}"
    for v in node.views.values():
        for vk, _ in v:
            if vk in ("Transpose", "DepthToSpace"):
                return f"permuted by folded {vk}"
    return None


def generate_kernel(block, t: DataFlowTree, rules=None, g: ECG | None = None, table: FusionDecisionTable | None = None) -> LoopNestKernel:
    rules = codegen_rules(table) if rules is None else rules
    trace = fold_rules(block, rules, table)
    b = ExprBuilder()
    params = {tid: f"in{i}" for i, tid in enumerate(block.inputs)}
    memo: dict[tuple[str, tuple], int] = {}

    def value(nid: str, idx: tuple) -> int:
        key = (nid, idx)
        got = memo.get(key)
        if got is not None:
            return got
        node = t.nodes[nid]
        if node.is_leaf:
            if node.id not in params:
                raise CodegenError(f"block {block.id}: leaf {node.id!r} is not a block input")
            out = b.load(params[node.id], idx, node.shape)
        else:
            def get(slot: int, in_idx: tuple) -> int:
                child = t.nodes[node.children[slot]]
                shapes = [child.shape]
                for vk, va in node.views.get(slot, []):
                    shapes.append(view_shape(vk, va, shapes[-1]))
                for j in reversed(range(len(node.views.get(slot, [])))):
                    vk, va = node.views[slot][j]
                    in_idx = view_index(b, vk, va, shapes[j], shapes[j + 1], in_idx)
                return value(node.children[slot], in_idx)

            out = lower_op(b, node.kind, node.attrs, node.in_shapes, node.out_shapes, node.output_index, idx, get)
        memo[key] = out
        return out

    nests = []
    outputs = []
    dtype = None
    for i, (tid, root) in enumerate(zip(block.outputs, t.roots)):
        node = t.nodes[root]
        dtype = dtype or node.dtype
        names = [f"i{d}" if i == 0 else f"i{i}_{d}" for d in range(len(node.shape))]
        idx = tuple(b.var(v, e) for v, e in zip(names, node.shape))
        origin = _loop_origin(t, root)
        loops = [(v, e, origin if d == 0 else None) for d, (v, e) in enumerate(zip(names, node.shape))]
        nests.append(LoopNest(f"out{i}", node.shape, loops, value(root, idx)))
        outputs.append((f"out{i}", node.shape, node.dtype))
    inputs = []
    for tid, p in params.items():
        leaf = t.nodes.get(tid)
        if leaf is None and g is not None:
            spec = g.tensors[tid]
            inputs.append((p, tuple(spec.shape), spec.dtype))
        elif leaf is not None:
            inputs.append((p, leaf.shape, leaf.dtype))
    bindings = {p: tid for tid, p in params.items()}
    bindings.update({f"out{i}": tid for i, tid in enumerate(block.outputs)})
    return LoopNestKernel(
        block.id, block.mapping_type, inputs, outputs, nests, b.nodes, dict(b.extents),
        dict(b.rvar_owner), dtype or "f32", bindings, trace,
    )


def block_structure(g: ECG, block) -> str:
    """Structural hash: identical operator patterns at identical shapes share a kernel."""
    ref = {tid: f"in{i}" for i, tid in enumerate(block.inputs)}
    members = []
    for j, m in enumerate(block.members):
        op = g.operators[m]
        for k, t in enumerate(op.outputs):
            ref[t] = f"m{j}.{k}"
    for j, m in enumerate(block.members):
        op = g.operators[m]
        members.append([
            op.kind, op.attributes, {str(s): v for s, v in sorted(op.input_views.items())},
            [ref[t] for t in op.inputs], [list(g.tensors[t].shape) for t in op.outputs],
        ])
    doc = {
        "inputs": [[list(g.tensors[t].shape), g.tensors[t].dtype] for t in block.inputs],
        "members": members,
        "outputs": [ref[t] for t in block.outputs],
        "order": [[d, ty.value] for _, d, ty in block.fusion_order],
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()


class KernelCache:
    """Structural-hash keyed kernel store with atomic insert-if-absent."""

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory is not None else None
        self._kernels: dict[str, LoopNestKernel] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._kernels)

    def get_or_build(self, key: str, build) -> tuple[LoopNestKernel, bool]:
        with self._lock:
            got = self._kernels.get(key)
            if got is not None:
                self.hits += 1
                return got, True
        kernel = build()
        kernel.structural_hash = key
        with self._lock:
            existing = self._kernels.setdefault(key, kernel)
            if existing is kernel:
                self.misses += 1
                if self.directory is not None:
                    from .emit import emit_source
                    self.directory.mkdir(parents=True, exist_ok=True)
                    (self.directory / f"{key}.kernel.txt").write_text(emit_source(kernel))
            else:
                self.hits += 1
        return existing, existing is not kernel


def kernel_for_block(g: ECG, block, cache: KernelCache | None = None, table: FusionDecisionTable | None = None, rules=None) -> LoopNestKernel:
    """Build (or reuse) the kernel of one block, bound to this block's tensors."""
    rules = codegen_rules(table) if rules is None else rules

    def build():
        t = eliminate_common_subtrees(build_dft(block, g))
        return generate_kernel(block, t, rules, g, table)

    if cache is None:
        k = build()
        k.structural_hash = block_structure(g, block)
        return k
    kernel, _ = cache.get_or_build(block_structure(g, block), build)
    bindings = {f"in{i}": tid for i, tid in enumerate(block.inputs)}
    bindings.update({f"out{i}": tid for i, tid in enumerate(block.outputs)})
    return replace(
        kernel, block_id=block.id, mapping_type=block.mapping_type, bindings=bindings,
        trace=fold_rules(block, rules, table),
    )


def generate_kernels(plan, cache: KernelCache | None = None, table: FusionDecisionTable | None = None) -> dict[str, LoopNestKernel]:
    cache = cache if cache is not None else KernelCache()
    return {b.id: kernel_for_block(plan.graph, b, cache, table) for b in plan.blocks}


def count_nodes(kernel: LoopNestKernel) -> int:
    return len(reachable(kernel.nodes, [n.root for n in kernel.nests]))


__all__ = [
    "ACTIONS", "CodegenRule", "KernelCache", "LoopNest", "LoopNestKernel", "block_structure",
    "codegen_rules", "count_nodes", "fold_rules", "generate_kernel", "generate_kernels", "kernel_for_block",
]
