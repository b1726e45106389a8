"""Data-movement elimination inside blocks and layout selection across blocks."""

from __future__ import annotations

import copy
from dataclasses import replace

from ..graph import ECG, OUTPUT, flop_count
from ..planner import FusionPlan, block_io

FOLDABLE = frozenset({"Transpose", "DepthToSpace", "Reshape", "Flatten", "Squeeze", "Unsqueeze", "Slice"})

ROW_MAJOR = "row-major"
CHANNEL_LAST = "channel-last"

_PRIORITY = [
    ({"Conv2D"}, CHANNEL_LAST),
    ({"GEMM", "MatMul"}, ROW_MAJOR),
    ({"Softmax"}, ROW_MAJOR),
    ({"ReduceSum", "ReduceProd", "ReduceMean"}, ROW_MAJOR),
]
_POOLING = {"MaxPool", "AveragePool"}


def _foldable(g: ECG, oid: str, members: set[str]) -> str | None:
    """The consumer an operator can be folded into, if any."""
    op = g.operators[oid]
    if op.kind not in FOLDABLE or len(op.outputs) != 1:
        return None
    out = g.tensors[op.outputs[0]]
    if out.kind == OUTPUT or len(out.consumers) != 1:
        return None
    consumer = out.consumers[0]
    return consumer if consumer in members else None


def intra_block_optimize(g: ECG, plan: FusionPlan) -> tuple[ECG, FusionPlan]:
    """Delete single-consumer data-movement members; the consumer reads through an index map."""
    g = g.copy()
    blocks = []
    for block in plan.blocks:
        members = set(block.members)
        folded = []
        changed = True
        while changed:
            changed = False
            for oid in sorted(members, key=g.topo_index().__getitem__):
                consumer = _foldable(g, oid, members)
                if consumer is None:
                    continue
                op = g.operators[oid]
                cop = g.operators[consumer]
                src, mid = op.inputs[0], op.outputs[0]
                chain = list(op.input_views.get(0, [])) + [(op.kind, copy.deepcopy(op.attributes))]
                for slot, t in enumerate(cop.inputs):
                    if t == mid:
                        cop.input_views[slot] = chain + list(cop.input_views.get(slot, []))
                g.remove_operator(oid)
                g.replace_input(consumer, mid, src)
                del g.tensors[mid]
                g.ir_removable.pop(mid, None)
                members.discard(oid)
                folded.append(oid)
                changed = True
                break
        kept = [m for m in block.members if m in members]
        ins, outs = block_io(g, kept)
        blocks.append(replace(
            block, members=kept, inputs=ins, outputs=outs,
            fusion_order=list(block.fusion_order), folded=list(block.folded) + folded,
        ))
    g.drop_dead_tensors()
    unfused = [o for o in plan.unfused if o in g.operators]
    new = FusionPlan(g, blocks, unfused, list(plan.fusion_log), dict(plan.stats), list(plan.transforms), dict(plan.layouts))
    return g, new


def _preference(g: ECG, members: list[str], flops: dict[str, int]) -> str | None:
    kinds = {g.operators[m].kind for m in members}
    for group, layout in _PRIORITY:
        if kinds & group:
            return layout
    heaviest = max(members, key=lambda m: (flops.get(m, 0), -members.index(m)))
    if flops.get(heaviest, 0) and g.operators[heaviest].kind in _POOLING:
        return CHANNEL_LAST
    return None


def dominant_operator(g: ECG, members: list[str]) -> str:
    for group, _ in _PRIORITY:
        for m in members:
            if g.operators[m].kind in group:
                return m
    flops = flop_count(g).per_operator
    return max(members, key=lambda m: (flops.get(m, 0), -members.index(m)))


def inter_block_layout(plan: FusionPlan) -> FusionPlan:
    """Tag each unit with its dominant operator's layout; record one transform per differing boundary tensor."""
    g = plan.graph
    units = plan.units()
    owner = {m: u for u, ms in units for m in ms}
    flops = flop_count(g).per_operator
    layout: dict[str, str] = {}
    for u, ms in units:
        pref = _preference(g, ms, flops)
        if pref is None:
            upstream = None
            for m in ms:
                for t in g.operators[m].inputs:
                    p = g.tensors[t].producer
                    if p is not None and owner[p] != u:
                        upstream = layout[owner[p]]
                        break
                if upstream:
                    break
            pref = upstream or ROW_MAJOR
        layout[u] = pref
    transforms = []
    for u, ms in units:
        for m in ms:
            for t in g.operators[m].outputs:
                targets = {}
                for c in g.tensors[t].consumers:
                    v = owner[c]
                    if v != u and layout[v] != layout[u]:
                        targets.setdefault(layout[v], []).append(v)
                for to, consumers in sorted(targets.items()):
                    transforms.append({
                        "tensor": t, "from": layout[u], "to": to,
                        "producer": u, "consumers": sorted(set(consumers)),
                    })
    blocks = [replace(b, layout=layout[b.id]) for b in plan.blocks]
    return FusionPlan(g, blocks, list(plan.unfused), list(plan.fusion_log), dict(plan.stats), transforms, layout)
