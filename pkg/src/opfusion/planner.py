"""Seed-based fusion plan generation over the mapping-type decision table."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

from . import ops
from .graph import ECG, INTERMEDIATE, OUTPUT, flop_count
from .mapping import M2M, O2M, O2O, FusionDecisionTable, MappingType, Verdict, fusion_lookup
from .profiledb import ProfileDB, ProfileKey


class Decision(enum.Enum):
    FUSE_THROUGH = "fuse_through"
    FUSE_DEPEND = "fuse_depend"
    FUSE_BREAK = "fuse_break"


SUCC, PRED, SEED = "succ", "pred", "seed"


@dataclass
class PlannerConfig:
    max_live: int = 24
    max_block: int = 40
    dry_run: bool = True
    table: FusionDecisionTable | None = None
    profile_reps: int = 9

    def __post_init__(self):
        if self.max_live < 1 or self.max_block < 1:
            raise ValueError("planner thresholds must be positive")


@dataclass
class FusionBlock:
    id: str
    members: list[str]
    mapping_type: MappingType
    fusion_order: list[tuple[str, str, MappingType]] = field(default_factory=list)
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    live_values: int = 0
    layout: str | None = None
    folded: list[str] = field(default_factory=list)

    def replay_type(self, table: FusionDecisionTable | None = None) -> MappingType:
        """Left fold of the decision table over the recorded fusion order."""
        t = None
        for _, direction, ty in self.fusion_order:
            if t is None:
                t = ty
            elif direction == SUCC:
                t = fusion_lookup(t, ty, table).fused_type
            else:
                t = fusion_lookup(ty, t, table).fused_type
        return t

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "members": list(self.members),
            "mapping_type": self.mapping_type.value,
            "fusion_order": [[o, d, t.value] for o, d, t in self.fusion_order],
            "inputs": list(self.inputs),
            "outputs": list(self.outputs),
            "live_values": self.live_values,
            "layout": self.layout,
            "folded": list(self.folded),
        }


@dataclass
class FusionPlan:
    graph: ECG
    blocks: list[FusionBlock]
    unfused: list[str]
    fusion_log: list[tuple[str, str, str, str]] = field(default_factory=list)
    stats: dict = field(default_factory=dict)
    transforms: list[dict] = field(default_factory=list)
    layouts: dict[str, str] = field(default_factory=dict)

    def block_of(self) -> dict[str, str]:
        return {m: b.id for b in self.blocks for m in b.members}

    def units(self) -> list[tuple[str, list[str]]]:
        """Execution units (block id or op id, members) in quotient topological order."""
        owner = self.block_of()
        topo = self.graph.topo_index()
        members: dict[str, list[str]] = {}
        for oid in self.graph.topo_order:
            members.setdefault(owner.get(oid, oid), []).append(oid)
        succ: dict[str, set[str]] = {u: set() for u in members}
        indeg = {u: 0 for u in members}
        for u, ms in members.items():
            for m in ms:
                for s in self.graph.successors(m):
                    v = owner.get(s, s)
                    if v != u and v not in succ[u]:
                        succ[u].add(v)
                        indeg[v] += 1
        ready = sorted((min(topo[m] for m in ms), u) for u, ms in members.items() if indeg[u] == 0)
        order = []
        while ready:
            _, u = ready.pop(0)
            order.append(u)
            for v in succ[u]:
                indeg[v] -= 1
                if indeg[v] == 0:
                    ready.append((min(topo[m] for m in members[v]), v))
                    ready.sort()
        if len(order) != len(members):
            raise ValueError("fusion plan block-quotient graph is cyclic")
        return [(u, members[u]) for u in order]

    @property
    def layer_count(self) -> int:
        return len(self.blocks) + len(self.unfused)

    def to_dict(self) -> dict:
        return {
            "model": self.graph.name,
            "blocks": [b.to_dict() for b in self.blocks],
            "unfused": list(self.unfused),
            "fusion_order": [list(e) for e in self.fusion_log],
            "ir_removable": sorted(t for t, v in self.graph.ir_removable.items() if v),
            "layouts": dict(self.layouts),
            "transforms": list(self.transforms),
            "stats": dict(self.stats),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=False)


# --- steps ------------------------------------------------------------------------


def select_seed(g: ECG, consumed: set[str]) -> str | None:
    """The unconsumed One-to-One operator with the smallest output, earliest first on ties."""
    best = None
    for i, oid in enumerate(g.topo_order):
        op = g.operators[oid]
        if oid in consumed or op.mapping_type is not O2O:
            continue
        size = sum(g.tensors[t].nbytes for t in op.outputs)
        if best is None or size < best[0]:
            best = (size, i, oid)
    return best[2] if best else None


def _analytic_fuse(g: ECG, first: str, second: str) -> bool:
    """Byte-traffic model: fuse iff the fused pair moves fewer bytes than two kernels."""
    a, b = g.operators[first], g.operators[second]
    in1 = sum(g.tensors[t].nbytes for t in dict.fromkeys(a.inputs))
    link = [t for t in a.outputs if t in b.inputs]
    out1 = sum(g.tensors[t].nbytes for t in link)
    n_out1 = sum(g.tensors[t].numel for t in link)
    out2 = sum(g.tensors[t].nbytes for t in b.outputs)
    extra2 = sum(g.tensors[t].nbytes for t in dict.fromkeys(b.inputs) if t not in link)
    if b.mapping_type is O2M:
        amp = max(1.0, sum(g.tensors[t].numel for t in b.outputs) / max(n_out1, 1))
    elif b.mapping_type is M2M:
        # each element of the linking tensor is re-read about flops/2 / size times
        amp = max(1.0, flop_count_op(g, second) / 2 / max(n_out1, 1))
    else:
        amp = 1.0
    unfused = in1 + 2 * out1 + extra2 + out2
    fused = amp * in1 + extra2 + out2
    return fused < unfused


def flop_count_op(g: ECG, oid: str) -> int:
    from .graph import effective_input_shapes
    op = g.operators[oid]
    return ops.op_flops(op.kind, op.attributes, effective_input_shapes(g, op), [g.tensors[t].shape for t in op.outputs])


def profile_key(g: ECG, first: str, second: str) -> ProfileKey:
    a, b = g.operators[first], g.operators[second]
    return ProfileKey(a.kind, b.kind, tuple(g.tensors[a.outputs[0]].shape), tuple(g.tensors[b.outputs[0]].shape))


def profile_lookup(db: ProfileDB | None, g: ECG, first: str, second: str, dry_run: bool = True, reps: int = 9) -> bool:
    """True when fusing ``first`` into ``second`` pays off according to the database.

    A miss is measured and inserted in live mode; in dry-run mode a byte
    traffic estimate decides without touching the database.
    """
    key = profile_key(g, first, second)
    rec = db.get(key) if db is not None else None
    if rec is not None:
        return rec.fuse
    if dry_run or db is None:
        return _analytic_fuse(g, first, second)
    from .runtime.profiler import profile_graph_pair

    rec = db.add(profile_graph_pair(g, first, second, reps=reps))
    return rec.fuse


class FusionPlanner:
    def __init__(self, g: ECG, db: ProfileDB | None = None, config: PlannerConfig | None = None):
        self.g = g
        self.db = db
        self.config = config or PlannerConfig()
        self.topo = g.topo_index()
        self.owner: dict[str, str] = {}
        self.blocks: list[FusionBlock] = []
        self._block_ids: set[str] = set()

    # decisions

    def decide(self, block: FusionBlock, candidate: str, direction: str = SUCC) -> Decision:
        ct = self.g.operators[candidate].mapping_type
        if direction == SUCC:
            cell = fusion_lookup(block.mapping_type, ct, self.config.table)
        else:
            cell = fusion_lookup(ct, block.mapping_type, self.config.table)
        return {
            Verdict.DIRECT: Decision.FUSE_THROUGH,
            Verdict.PROFILE: Decision.FUSE_DEPEND,
            Verdict.BREAK: Decision.FUSE_BREAK,
        }[cell.verdict]

    def _neighbor_in_block(self, members: set[str], candidate: str, direction: str) -> str:
        if direction == SUCC:
            near = [p for p in self.g.predecessors(candidate) if p in members]
            return max(near, key=self.topo.__getitem__)
        near = [s for s in self.g.successors(candidate) if s in members]
        return min(near, key=self.topo.__getitem__)

    def resolve(self, block: FusionBlock, candidate: str, direction: str) -> bool:
        d = self.decide(block, candidate, direction)
        if d is Decision.FUSE_THROUGH:
            return True
        if d is Decision.FUSE_BREAK:
            return False
        near = self._neighbor_in_block(set(block.members), candidate, direction)
        first, second = (near, candidate) if direction == SUCC else (candidate, near)
        return profile_lookup(self.db, self.g, first, second, self.config.dry_run, self.config.profile_reps)

    # constraints

    def live_values(self, members: list[str]) -> int:
        """Peak number of values alive at once when the members run in topological order.

        An external input is live from its first use to its last, an internal
        result from its definition to its last in-block use.
        """
        order = sorted(members, key=self.topo.__getitem__)
        start: dict[str, int] = {}
        end: dict[str, int] = {}
        for i, m in enumerate(order):
            op = self.g.operators[m]
            for t in op.inputs:
                start.setdefault(t, i)
                end[t] = i
            for t in op.outputs:
                start.setdefault(t, i)
                end.setdefault(t, i)
        return max(
            (sum(1 for t in start if start[t] <= i <= end[t]) for i in range(len(order))),
            default=0,
        )

    def creates_cycle(self, members: set[str]) -> bool:
        """Would contracting ``members`` (with existing blocks contracted) close a cycle?"""
        def unit(o):
            return self.owner.get(o, o)

        def unit_succ(u):
            ms = [m for m, b in self.owner.items() if b == u] if u in self._block_ids else [u]
            out = set()
            for m in ms:
                for s in self.g.successors(m):
                    out.add(unit(s))
            return out

        start = set()
        for m in members:
            for s in self.g.successors(m):
                if s not in members:
                    start.add(unit(s))
        seen = set()
        stack = list(start)
        while stack:
            u = stack.pop()
            if u in seen:
                continue
            seen.add(u)
            for v in unit_succ(u):
                if v in members:
                    return True
                if v not in seen:
                    stack.append(v)
        return False

    def constraints_check(self, block: FusionBlock, candidate: str) -> bool:
        members = block.members + [candidate]
        if len(members) > self.config.max_block:
            return False
        if self.live_values(members) > self.config.max_live:
            return False
        return not self.creates_cycle(set(members))

    # exploration

    def _add(self, block: FusionBlock, candidate: str, direction: str) -> None:
        ct = self.g.operators[candidate].mapping_type
        if direction == SUCC:
            block.mapping_type = fusion_lookup(block.mapping_type, ct, self.config.table).fused_type
        else:
            block.mapping_type = fusion_lookup(ct, block.mapping_type, self.config.table).fused_type
        block.members.append(candidate)
        block.fusion_order.append((candidate, direction, ct))

    def _try(self, block: FusionBlock, candidate: str, direction: str, consumed: set[str]) -> bool:
        if candidate in consumed or candidate in block.members:
            return False
        if not self.resolve(block, candidate, direction):
            return False
        if not self.constraints_check(block, candidate):
            return False
        self._add(block, candidate, direction)
        return True

    def explore_successors(self, block: FusionBlock, op: str, consumed: set[str]) -> None:
        for s in sorted(self.g.successors(op), key=self.topo.__getitem__):
            if self._try(block, s, SUCC, consumed):
                self.explore_successors(block, s, consumed)

    def explore_predecessors(self, block: FusionBlock, consumed: set[str]) -> None:
        rejected: set[str] = set()
        while True:
            frontier = {
                p for m in block.members for p in self.g.predecessors(m)
                if p not in block.members and p not in consumed and p not in rejected
            }
            if not frontier:
                return
            for p in sorted(frontier, key=self.topo.__getitem__, reverse=True):
                if not self._try(block, p, PRED, consumed):
                    rejected.add(p)
                break

    def run(self) -> FusionPlan:
        g = self.g
        consumed: set[str] = set()
        tried: set[str] = set()
        log: list[tuple[str, str, str, str]] = []
        while True:
            seed = select_seed(g, consumed | tried)
            if seed is None:
                break
            block = FusionBlock(f"block{len(self.blocks)}", [seed], g.operators[seed].mapping_type)
            block.fusion_order.append((seed, SEED, block.mapping_type))
            self.explore_successors(block, seed, consumed)
            self.explore_predecessors(block, consumed)
            if len(block.members) == 1:
                tried.add(seed)
                continue
            self.blocks.append(block)
            self._block_ids.add(block.id)
            for m in block.members:
                consumed.add(m)
                self.owner[m] = block.id
            log.extend((block.id, o, d, t.value) for o, d, t in block.fusion_order)
        return self._finish(log)

    def _finish(self, log) -> FusionPlan:
        g = self.g.copy()
        g.ir_removable = {}
        kept, dissolved = [], []
        for b in self.blocks:
            removable = _removable(g, set(b.members))
            if not removable:
                dissolved.append(b.id)
                continue
            for t in removable:
                g.ir_removable[t] = True
            kept.append(b)
        log = [e for e in log if e[0] not in dissolved]
        for i, b in enumerate(kept):
            old = b.id
            b.id = f"block{i}"
            log = [(b.id if e[0] == old else e[0],) + tuple(e[1:]) for e in log]
            topo = g.topo_index()
            b.members.sort(key=topo.__getitem__)
            b.inputs, b.outputs = block_io(g, b.members)
            b.live_values = self.live_values(b.members)
        in_block = {m for b in kept for m in b.members}
        unfused = [o for o in g.topo_order if o not in in_block]
        plan = FusionPlan(g, kept, unfused, log)
        plan.stats = plan_stats(self.g, plan)
        return plan


def _removable(g: ECG, members: set[str]) -> list[str]:
    out = []
    for m in members:
        for t in g.operators[m].outputs:
            spec = g.tensors[t]
            if spec.kind == INTERMEDIATE and spec.consumers and all(c in members for c in spec.consumers):
                out.append(t)
    return sorted(out)


def block_io(g: ECG, members: list[str]) -> tuple[list[str], list[str]]:
    mset = set(members)
    ins: dict[str, None] = {}
    outs: dict[str, None] = {}
    for m in members:
        op = g.operators[m]
        for t in op.inputs:
            if g.tensors[t].producer not in mset:
                ins.setdefault(t)
        for t in op.outputs:
            spec = g.tensors[t]
            if spec.kind == OUTPUT or any(c not in mset for c in spec.consumers):
                outs.setdefault(t)
    return list(ins), list(outs)


def plan_stats(original: ECG, plan: FusionPlan) -> dict:
    n = len(original.operators)
    fused = plan.layer_count
    before = original.irs_bytes()
    after = sum(plan.graph.tensors[t].nbytes for t in plan.graph.intermediates() if not plan.graph.ir_removable.get(t))
    return {
        "original_layers": n,
        "fused_layers": fused,
        "fusion_rate": round(n / fused, 6) if fused else 1.0,
        "irs_bytes_before": before,
        "irs_bytes_after": after,
        "blocks": len(plan.blocks),
        "unfused": len(plan.unfused),
        "flops": flop_count(original).total,
    }


def generate_plan(g: ECG, db: ProfileDB | None = None, config: PlannerConfig | None = None) -> FusionPlan:
    return FusionPlanner(g, db, config).run()
