"""Data-flow trees over fusion blocks and common sub-tree elimination.

Edges point from a node to the values it depends on. Before elimination the
structure has tree semantics: a value consumed twice is evaluated twice. After
``eliminate_common_subtrees`` structurally identical subtrees share one node and
evaluation visits every distinct node once.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from ..graph import ECG, effective_input_shapes
from ..runtime.reference import apply_op, apply_views

LEAF = "leaf"


@dataclass
class DFTNode:
    id: str
    kind: str
    shape: tuple[int, ...]
    dtype: str = "f32"
    children: list[str] = field(default_factory=list)
    attrs: dict = field(default_factory=dict)
    views: dict[int, list] = field(default_factory=dict)
    op: str | None = None
    output_index: int = 0
    in_shapes: list[tuple[int, ...]] = field(default_factory=list)
    out_shapes: list[tuple[int, ...]] = field(default_factory=list)

    @property
    def is_leaf(self) -> bool:
        return self.kind == LEAF


@dataclass
class DataFlowTree:
    roots: list[str]
    nodes: dict[str, DFTNode]
    shared: dict[str, str] = field(default_factory=dict)
    merged: bool = False

    @property
    def leaves(self) -> list[str]:
        return [n for n in self.order() if self.nodes[n].is_leaf]

    def order(self) -> list[str]:
        """Reachable nodes, children before parents."""
        seen: set[str] = set()
        out: list[str] = []

        def visit(n):
            if n in seen:
                return
            seen.add(n)
            for c in self.nodes[n].children:
                visit(c)
            out.append(n)

        for r in self.roots:
            visit(r)
        return out

    def tree_size(self) -> int:
        """Node count of the fully expanded tree (shared children counted per use)."""
        size: dict[str, int] = {}
        for n in self.order():
            size[n] = 1 + sum(size[c] for c in self.nodes[n].children)
        return sum(size[r] for r in dict.fromkeys(self.roots))

    def dag_size(self) -> int:
        return len(self.order())

    def evaluate(self, values: dict[str, np.ndarray]) -> tuple[dict[str, np.ndarray], int]:
        """Evaluate the roots; returns the values and the number of node evaluations.

        A merged DAG caches every node; an unmerged tree recomputes shared values.
        """
        count = 0
        cache: dict[str, np.ndarray] = {}

        def ev(n: str) -> np.ndarray:
            nonlocal count
            if self.merged and n in cache:
                return cache[n]
            count += 1
            node = self.nodes[n]
            if node.is_leaf:
                out = np.asarray(values[node.id])
            else:
                args = [apply_views(ev(c), node.views.get(slot, [])) for slot, c in enumerate(node.children)]
                out = apply_op(node.kind, node.attrs, args, len(node.out_shapes))[node.output_index]
            cache[n] = out
            return out

        return {r: ev(r) for r in self.roots}, count


def build_dft(block, g: ECG) -> DataFlowTree:
    """Tree rooted at the block outputs; leaves are the block's external inputs."""
    members = set(block.members)
    nodes: dict[str, DFTNode] = {}

    def node_for(tid: str) -> str:
        if tid in nodes:
            return tid
        spec = g.tensors[tid]
        if spec.producer not in members:
            nodes[tid] = DFTNode(tid, LEAF, tuple(spec.shape), spec.dtype)
            return tid
        op = g.operators[spec.producer]
        node = DFTNode(
            tid, op.kind, tuple(spec.shape), spec.dtype,
            attrs=dict(op.attributes), views={k: list(v) for k, v in op.input_views.items()},
            op=op.id, output_index=op.outputs.index(tid),
            in_shapes=[tuple(s) for s in effective_input_shapes(g, op)],
            out_shapes=[tuple(g.tensors[t].shape) for t in op.outputs],
        )
        nodes[tid] = node
        node.children = [node_for(t) for t in op.inputs]
        return tid

    roots = [node_for(t) for t in block.outputs]
    return DataFlowTree(roots, nodes)


def _structure(node: DFTNode, children: list[str]) -> str:
    if node.is_leaf:
        key = [LEAF, node.id]
    else:
        views = {str(k): v for k, v in sorted(node.views.items())}
        key = [node.kind, node.attrs, views, node.output_index, list(node.shape), children]
    text = json.dumps(key, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def eliminate_common_subtrees(t: DataFlowTree) -> DataFlowTree:
    """Merge structurally identical subtrees; the first occurrence represents the class."""
    canon: dict[str, str] = {}
    shared: dict[str, str] = {}
    nodes: dict[str, DFTNode] = {}
    for n in t.order():
        node = t.nodes[n]
        kids = [canon[c] for c in node.children]
        h = _structure(node, kids)
        if h in shared:
            canon[n] = shared[h]
            continue
        shared[h] = n
        canon[n] = n
        nodes[n] = DFTNode(
            node.id, node.kind, node.shape, node.dtype, kids, node.attrs, node.views,
            node.op, node.output_index, node.in_shapes, node.out_shapes,
        )
    roots = [canon[r] for r in t.roots]
    return DataFlowTree(roots, nodes, shared, merged=True)
