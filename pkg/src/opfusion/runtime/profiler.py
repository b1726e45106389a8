"""Host micro-profiling of operator pairs, fused vs unfused."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

from ..errors import ExecutionError
from ..graph import ECG, INPUT, INTERMEDIATE, OUTPUT, WEIGHT, OperatorDescriptor, TensorSpec, infer_shapes
from ..mapping import fusion_lookup
from ..profiledb import ProfileRecord, host_tag
from .executor import eval_plan
from .reference import eval_reference, random_inputs

MIN_REPS = 9


@dataclass(frozen=True)
class OpSpec:
    """An operator to profile: kind, attributes and the shapes of its non-linking inputs."""

    kind: str
    attributes: dict = field(default_factory=dict)
    extra_inputs: tuple[tuple[int, ...], ...] = ()


def spec_graph(first: OpSpec | str, second: OpSpec | str, shape: tuple[int, ...], dtype: str = "f32") -> ECG:
    """x -> first -> link -> second -> y; extra inputs become model inputs."""
    first = OpSpec(first) if isinstance(first, str) else first
    second = OpSpec(second) if isinstance(second, str) else second
    g = ECG(f"{first.kind}_{second.kind}")
    g.add_tensor(TensorSpec("x", tuple(shape), dtype, INPUT))
    for tag, spec in (("a", first), ("b", second)):
        for i, s in enumerate(spec.extra_inputs):
            g.add_tensor(TensorSpec(f"{tag}{i}", tuple(s), dtype, INPUT))
    g.add_tensor(TensorSpec("y", None, dtype, OUTPUT))
    g.add_operator(OperatorDescriptor("first", first.kind, ["x"] + [f"a{i}" for i in range(len(first.extra_inputs))], ["link"], dict(first.attributes)))
    g.tensors["link"].dtype = dtype
    g.add_operator(OperatorDescriptor("second", second.kind, ["link"] + [f"b{i}" for i in range(len(second.extra_inputs))], ["y"], dict(second.attributes)))
    return infer_shapes(g)


def pair_graph(g: ECG, first: str, second: str) -> ECG:
    """The two operators of ``g`` in isolation; every other input becomes a model input."""
    a, b = g.operators[first], g.operators[second]
    sub = ECG(f"{a.kind}_{b.kind}")
    produced = set(a.outputs)
    for t in dict.fromkeys(a.inputs + [t for t in b.inputs if t not in produced]):
        spec = g.tensors[t]
        kind = WEIGHT if spec.kind == WEIGHT and spec.data is not None else INPUT
        sub.add_tensor(TensorSpec(t, spec.shape, spec.dtype, kind, data=spec.data if kind == WEIGHT else None))
    for t in a.outputs + b.outputs:
        spec = g.tensors[t]
        linked = t in produced and t in b.inputs
        sub.add_tensor(TensorSpec(t, spec.shape, spec.dtype, INTERMEDIATE if linked else OUTPUT))
    for op in (a, b):
        sub.add_operator(OperatorDescriptor(op.id, op.kind, list(op.inputs), list(op.outputs), dict(op.attributes), input_views={k: list(v) for k, v in op.input_views.items()}))
    return infer_shapes(sub)


def _pair_plan(g: ECG, first: str, second: str):
    from ..planner import SEED, SUCC, FusionBlock, FusionPlan, block_io

    ta, tb = g.operators[first].mapping_type, g.operators[second].mapping_type
    block = FusionBlock("block0", [first, second], fusion_lookup(ta, tb).fused_type, [(first, SEED, ta), (second, SUCC, tb)])
    block.inputs, block.outputs = block_io(g, block.members)
    g.ir_removable = {t: True for t in g.operators[first].outputs if t in g.operators[second].inputs and g.tensors[t].kind == INTERMEDIATE}
    return FusionPlan(g, [block], [])


def _time(fn) -> int:
    t0 = time.perf_counter_ns()
    fn()
    return time.perf_counter_ns() - t0


def measure(g: ECG, first: str, second: str, reps: int = MIN_REPS, seed: int = 0) -> ProfileRecord:
    """Median fused and unfused latencies (microseconds) of one pair graph."""
    from ..codegen import generate_kernels
    from ..planner import profile_key

    if reps < MIN_REPS:
        raise ValueError(f"profiling needs reps >= {MIN_REPS}, got {reps}")
    plan = _pair_plan(g, first, second)
    kernels = generate_kernels(plan)
    inputs = random_inputs(g, seed)
    run_fused = lambda: eval_plan(plan, kernels, inputs)  # noqa: E731
    run_unfused = lambda: eval_reference(g, inputs)  # noqa: E731
    run_fused()
    run_unfused()
    fused, unfused = [], []
    for _ in range(reps):
        fused.append(_time(run_fused))
        unfused.append(_time(run_unfused))
    f_ns, u_ns = statistics.median(fused), statistics.median(unfused)
    resolution_ns = time.get_clock_info("perf_counter").resolution * 1e9
    if min(f_ns, u_ns) < 100 * resolution_ns:
        raise ExecutionError("timer resolution too coarse for this pair; raise reps or the problem size")
    return ProfileRecord(profile_key(g, first, second), f_ns / 1000, u_ns / 1000, reps, host_tag())


def profile_pair(first: OpSpec | str, second: OpSpec | str, shape: tuple[int, ...], reps: int = MIN_REPS, dtype: str = "f32") -> ProfileRecord:
    if reps < MIN_REPS:
        raise ValueError(f"profiling needs reps >= {MIN_REPS}, got {reps}")
    return measure(spec_graph(first, second, shape, dtype), "first", "second", reps)


def profile_graph_pair(g: ECG, first: str, second: str, reps: int = MIN_REPS) -> ProfileRecord:
    """Profile two adjacent operators of ``g`` at their shapes in ``g``."""
    return measure(pair_graph(g, first, second), first, second, reps)
