"""Partition-local greedy rewriting with algebraic rules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import ops
from ..errors import RewriteError, ShapeError
from ..graph import DTYPES, ECG, OUTPUT, WEIGHT, OperatorDescriptor, TensorSpec, flop_count, infer_shapes
from .patterns import PConst, POp, PVar, Pattern, RewriteRule, load_rules, op_nodes


@dataclass
class Partition:
    nodes: frozenset[str]
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass
class RuleMatch:
    rule: str
    variant: int
    root: str
    nodes: tuple[str, ...]
    binding: dict[str, str]
    flop_before: int
    flop_after: int
    loads_before: int
    loads_after: int

    @property
    def flop_reduction(self) -> int:
        return self.flop_before - self.flop_after

    @property
    def improving(self) -> bool:
        return (self.flop_after, self.loads_after) < (self.flop_before, self.loads_before)

    @property
    def equal_cost(self) -> bool:
        return (self.flop_after, self.loads_after) == (self.flop_before, self.loads_before)

    @property
    def key(self) -> tuple:
        return (self.rule, self.nodes[0], tuple(sorted(self.binding.items())))


@dataclass
class RewriteStep:
    rule: str
    nodes: tuple[str, ...]
    binding: dict[str, str]
    flop_before: int
    flop_after: int
    graph_flops: int
    created: tuple[str, ...] = ()

    def __str__(self) -> str:
        return f"{self.rule}: {','.join(self.nodes)} flops {self.flop_before}->{self.flop_after} (graph {self.graph_flops})"


@dataclass
class NameCounter:
    value: int = 0

    def fresh(self, g: ECG, prefix: str) -> str:
        while True:
            self.value += 1
            name = f"{prefix}_{self.value}"
            if name not in g.operators and name not in g.tensors:
                return name


# --- partitioning ------------------------------------------------------------------


def _algebraic(op: OperatorDescriptor) -> bool:
    return bool(op.properties) and not op.input_views


def partition(g: ECG) -> list[Partition]:
    """Maximal connected regions of operators carrying an algebraic property."""
    members = [o for o in g.topo_order if _algebraic(g.operators[o])]
    parent = {o: o for o in members}

    def find(o):
        while parent[o] != o:
            parent[o] = parent[parent[o]]
            o = parent[o]
        return o

    for o in members:
        for p in g.predecessors(o):
            if p in parent:
                parent[find(o)] = find(p)
    groups: dict[str, list[str]] = {}
    for o in members:
        groups.setdefault(find(o), []).append(o)
    parts = []
    for nodes in groups.values():
        node_set = frozenset(nodes)
        ins: dict[str, None] = {}
        outs: dict[str, None] = {}
        for o in nodes:
            op = g.operators[o]
            for t in op.inputs:
                if g.tensors[t].producer not in node_set:
                    ins.setdefault(t)
            for t in op.outputs:
                spec = g.tensors[t]
                if spec.kind == OUTPUT or any(c not in node_set for c in spec.consumers):
                    outs.setdefault(t)
        parts.append(Partition(node_set, tuple(ins), tuple(outs)))
    return parts


# --- matching ----------------------------------------------------------------------


def _match_at(g: ECG, pattern: POp, root: str, scope: frozenset[str]):
    """Match ``pattern`` rooted at operator ``root``; (binding, pattern-node -> op list) or None."""
    binding: dict[str, str] = {}
    matched: list[tuple[POp, str]] = []
    by_subterm: dict[str, OperatorDescriptor] = {}

    def op_ok(p: POp, oid: str) -> bool:
        op = g.operators[oid]
        if oid not in scope or op.kind != p.kind or len(op.inputs) != len(p.args) or len(op.outputs) != 1 or op.input_views:
            return False
        key = str(p)
        prior = by_subterm.get(key)
        if prior is not None and prior.id != oid and (prior.kind, prior.attributes) != (op.kind, op.attributes):
            return False
        by_subterm.setdefault(key, op)
        matched.append((p, oid))
        return all(walk(a, t) for a, t in zip(p.args, op.inputs))

    def walk(p: Pattern, tensor: str) -> bool:
        if isinstance(p, PVar):
            return binding.setdefault(p.name, tensor) == tensor
        if isinstance(p, PConst):
            spec = g.tensors[tensor]
            return spec.kind == WEIGHT and spec.data is not None and bool(np.all(spec.data == p.value))
        producer = g.tensors[tensor].producer
        return producer is not None and op_ok(p, producer)

    if not op_ok(pattern, root):
        return None
    return binding, matched


def _guards_hold(g: ECG, rule: RewriteRule, binding: dict[str, str], matched) -> bool:
    for name, args in rule.guards:
        if name == "scalar_const":
            for a in args:
                spec = g.tensors[binding[a]]
                if spec.kind != WEIGHT or spec.data is None or spec.numel != 1:
                    return False
        elif name == "shift_left":
            for _, oid in matched:
                op = g.operators[oid]
                if op.kind == "BitShift" and op.attributes.get("direction", "LEFT") != "LEFT":
                    return False
        else:
            raise RewriteError(f"unknown guard {name!r}")
    return True


def _rhs_attributes(g: ECG, matched) -> dict[str, dict]:
    attrs: dict[str, dict] = {}
    reduce_attrs = None
    for _, oid in matched:
        op = g.operators[oid]
        attrs.setdefault(op.kind, op.attributes)
        if reduce_attrs is None and op.kind in ops.REDUCTIONS:
            reduce_attrs = op.attributes
    if reduce_attrs is not None:
        for kind in ops.REDUCTIONS:
            attrs.setdefault(kind, reduce_attrs)
    return attrs


@dataclass
class _RhsNode:
    kind: str
    attrs: dict
    args: list  # ("t", tensor id) | ("n", node index) | ("c", value)
    shape: tuple[int, ...]


def _plan_rhs(g: ECG, rhs: Pattern, binding: dict[str, str], attrs: dict[str, dict]) -> tuple[list[_RhsNode], tuple]:
    """Hash-consed list of new nodes; the last one is the root."""
    nodes: list[_RhsNode] = []
    index: dict[str, int] = {}

    def build(p: Pattern):
        if isinstance(p, PVar):
            t = binding[p.name]
            return ("t", t), g.tensors[t].shape
        if isinstance(p, PConst):
            return ("c", p.value), ()
        refs = [build(a) for a in p.args]
        key = str(p)
        if key in index:
            i = index[key]
            return ("n", i), nodes[i].shape
        a = dict(attrs.get(p.kind, {}))
        shape = ops.infer_op_shapes(p.kind, a, [s for _, s in refs], 1)[0]
        nodes.append(_RhsNode(p.kind, a, [r for r, _ in refs], shape))
        index[key] = len(nodes) - 1
        return ("n", len(nodes) - 1), shape

    root_ref, _ = build(rhs)
    if root_ref[0] != "n":
        raise RewriteError("rule rhs must be an operator")
    return nodes, root_ref


def _removed_ops(g: ECG, root: str, matched, binding: dict[str, str]) -> list[str]:
    """Matched operators that die once the root is replaced."""
    removed = {root}
    bound = set(binding.values())
    candidates = list(dict.fromkeys(oid for _, oid in matched if oid != root))
    changed = True
    while changed:
        changed = False
        for oid in candidates:
            if oid in removed:
                continue
            out = g.operators[oid].outputs[0]
            spec = g.tensors[out]
            if spec.kind != OUTPUT and out not in bound and all(c in removed for c in spec.consumers):
                removed.add(oid)
                changed = True
    return [o for o in g.topo_order if o in removed]


def _loads(g: ECG, op_inputs: list[list[tuple[str, object]]]) -> int:
    total = 0
    for refs in op_inputs:
        seen = set()
        for kind, ref in refs:
            if kind == "t" and g.tensors[ref].numel > 1:
                seen.add(ref)
        total += len(seen)
    return total


def _evaluate(g: ECG, rule: RewriteRule, variant: int, root: str, scope: frozenset[str], per_op_flops: dict[str, int]) -> RuleMatch | None:
    found = _match_at(g, rule.variants[variant], root, scope)
    if found is None:
        return None
    binding, matched = found
    if not _guards_hold(g, rule, binding, matched):
        return None
    try:
        nodes, _ = _plan_rhs(g, rule.rhs, binding, _rhs_attributes(g, matched))
    except ShapeError:
        return None
    root_tensor = g.operators[root].outputs[0]
    if nodes[-1].shape != tuple(g.tensors[root_tensor].shape):
        return None
    removed = _removed_ops(g, root, matched, binding)
    removed_set = set(removed)
    before_inputs = [
        [("i", t) if g.tensors[t].producer in removed_set else ("t", t) for t in g.operators[o].inputs]
        for o in removed
    ]
    after_flops = 0
    for n in nodes:
        in_shapes = [g.tensors[r].shape if k == "t" else (nodes[r].shape if k == "n" else ()) for k, r in n.args]
        after_flops += ops.op_flops(n.kind, n.attrs, in_shapes, [n.shape])
    return RuleMatch(
        rule=rule.name,
        variant=variant,
        root=root,
        nodes=tuple(dict.fromkeys(oid for _, oid in matched)),
        binding=binding,
        flop_before=sum(per_op_flops[o] for o in removed),
        flop_after=after_flops,
        loads_before=_loads(g, before_inputs),
        loads_after=_loads(g, [n.args for n in nodes]),
    )


def _sort_key(m: RuleMatch):
    return (-m.flop_reduction, m.rule, min(m.nodes))


def match_rules(g: ECG, p: Partition, rules: list[RewriteRule], per_op_flops: dict[str, int] | None = None) -> list[RuleMatch]:
    """All guarded matches rooted inside ``p``, best FLOP reduction first."""
    per_op_flops = per_op_flops if per_op_flops is not None else flop_count(g).per_operator
    out: dict[tuple, RuleMatch] = {}
    for root in g.topo_order:
        if root not in p.nodes:
            continue
        for rule in rules:
            for v in range(len(rule.variants)):
                m = _evaluate(g, rule, v, root, p.nodes, per_op_flops)
                if m is not None:
                    out.setdefault((m.rule, frozenset(m.nodes), tuple(sorted(m.binding.items()))), m)
    return sorted(out.values(), key=_sort_key)


# --- application -------------------------------------------------------------------


def apply(g: ECG, m: RuleMatch, rules: list[RewriteRule] | dict[str, RewriteRule], counter: NameCounter | None = None) -> ECG:
    """Replace the matched lhs with the rule's rhs; returns a new graph."""
    return _apply(g, m, rules, counter)[0]


def _apply(g: ECG, m: RuleMatch, rules, counter: NameCounter | None) -> tuple[ECG, tuple[str, ...]]:
    by_name = rules if isinstance(rules, dict) else {r.name: r for r in rules}
    rule = by_name[m.rule]
    if m.root not in g.operators or any(n not in g.operators for n in m.nodes):
        raise RewriteError(f"stale match for {m.rule}: matched operators no longer exist")
    found = _match_at(g, rule.variants[m.variant], m.root, frozenset(m.nodes))
    if found is None or found[0] != m.binding:
        raise RewriteError(f"stale match for {m.rule} at {m.root}")
    binding, matched = found
    counter = counter or NameCounter()
    nodes, _ = _plan_rhs(g, rule.rhs, binding, _rhs_attributes(g, matched))
    removed = _removed_ops(g, m.root, matched, binding)

    g = g.copy()
    root_tensor = g.operators[m.root].outputs[0]
    dtype = g.tensors[root_tensor].dtype
    g.remove_operator(m.root)
    created: list[str] = []
    outputs: list[str] = []
    for i, n in enumerate(nodes):
        inputs = []
        for kind, ref in n.args:
            if kind == "t":
                inputs.append(ref)
            elif kind == "n":
                inputs.append(outputs[ref])
            else:
                cid = counter.fresh(g, rule.name)
                g.add_tensor(TensorSpec(cid, (), dtype, WEIGHT, data=np.array(ref, dtype=DTYPES[dtype])))
                inputs.append(cid)
        oid = counter.fresh(g, rule.name)
        out = root_tensor if i == len(nodes) - 1 else oid
        g.add_operator(OperatorDescriptor(oid, n.kind, inputs, [out], dict(n.attrs)))
        created.append(oid)
        outputs.append(out)
    for oid in removed:
        if oid != m.root:
            g.remove_operator(oid)
    g.drop_dead_tensors()
    return infer_shapes(g), tuple(created)


def _best_improving(g: ECG, rules: list[RewriteRule]) -> tuple[RuleMatch | None, list[RuleMatch]]:
    per_op = flop_count(g).per_operator
    matches: list[RuleMatch] = []
    for p in partition(g):
        matches.extend(match_rules(g, p, rules, per_op))
    matches.sort(key=_sort_key)
    return next((m for m in matches if m.improving), None), matches


@dataclass
class RewriteLog:
    steps: list[RewriteStep] = field(default_factory=list)
    flops_initial: int = 0
    flops_final: int = 0

    def lines(self) -> list[str]:
        return [str(s) for s in self.steps]


def rewrite_fixpoint(g: ECG, rules: list[RewriteRule] | None = None) -> tuple[ECG, RewriteLog]:
    """Greedily apply the best FLOP-reducing rule until none matches.

    Equal-cost rules are tried only when a strictly improving rule matches
    right after them, and at most once per binding per run.
    """
    rules = load_rules() if rules is None else rules
    by_name = {r.name: r for r in rules}
    cap = 10 * sum(len(p) for p in partition(g))
    log = RewriteLog(flops_initial=flop_count(g).total)
    counter = NameCounter()
    used: set[tuple] = set()
    iterations = 0
    while True:
        best, matches = _best_improving(g, rules)
        if best is None:
            for m in matches:
                if not m.equal_cost or m.key in used:
                    continue
                trial = apply(g, m, by_name, NameCounter(counter.value))
                if _best_improving(trial, rules)[0] is not None:
                    best = m
                    used.add(m.key)
                    break
        if best is None:
            break
        iterations += 1
        if iterations > cap:
            raise RewriteError(f"rewrite did not converge within {cap} applications")
        g, created = _apply(g, best, by_name, counter)
        log.steps.append(RewriteStep(
            best.rule, best.nodes, dict(best.binding), best.flop_before, best.flop_after,
            flop_count(g).total, created,
        ))
    log.flops_final = flop_count(g).total
    return g, log
