"""Fused-plan execution: one kernel call per block, reference kernels for unfused operators."""

from __future__ import annotations

import numpy as np

from ..errors import ExecutionError
from .reference import MemStats, initial_env, run_operator


def eval_plan(plan, kernels: dict, inputs: dict[str, np.ndarray]) -> tuple[dict[str, np.ndarray], MemStats]:
    """Execute the block-quotient DAG in topological order.

    Only tensors crossing a unit boundary (or model outputs) are stored.
    """
    g = plan.graph
    env = initial_env(g, inputs)
    stats = MemStats()
    for unit, members in plan.units():
        kernel = kernels.get(unit)
        if kernel is None:
            if unit not in g.operators:
                raise ExecutionError(f"no kernel generated for block {unit!r}")
            run_operator(g, unit, env, stats)
            continue
        reads = dict.fromkeys(kernel.bindings[p] for p, _, _ in kernel.inputs)
        missing = [t for t in reads if t not in env]
        if missing:
            raise ExecutionError(f"block {unit!r}: tensors {missing} not available")
        stats.bytes_read += sum(env[t].nbytes for t in reads)
        outs = kernel.execute(env)
        stats.kernel_invocations += 1
        for t, arr in outs.items():
            if arr.shape != tuple(g.tensors[t].shape):
                raise ExecutionError(f"block {unit!r} produced {arr.shape} for {t!r}, expected {g.tensors[t].shape}")
            env[t] = arr
            stats.record_store(g, t, arr)
    return {t: env[t] for t in g.outputs()}, stats


def max_rel_error(expected: dict[str, np.ndarray], actual: dict[str, np.ndarray]) -> float:
    """Largest max-norm relative error over all outputs."""
    worst = 0.0
    for t, ref in expected.items():
        got = actual[t]
        if got.shape != ref.shape:
            return float("inf")
        ref64, got64 = ref.astype(np.float64), got.astype(np.float64)
        both = np.isfinite(ref64) & np.isfinite(got64)
        if not np.array_equal(np.isfinite(ref64), np.isfinite(got64)):
            return float("inf")
        if not both.any():
            continue
        scale = max(np.abs(ref64[both]).max(), 1e-30)
        worst = max(worst, float(np.abs(ref64[both] - got64[both]).max() / scale))
    return worst


TOLERANCE = {"f32": 1e-5, "f64": 1e-12}
