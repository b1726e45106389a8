"""The fixed pass order: rewrite, plan, intra-block optimization, codegen, layout."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codegen import KernelCache, generate_kernels, inter_block_layout, intra_block_optimize
from .graph import ECG, infer_shapes
from .mapping import FusionDecisionTable
from .planner import FusionPlan, PlannerConfig, generate_plan, plan_stats
from .profiledb import ProfileDB
from .rewrite import RewriteLog, load_rules, rewrite_fixpoint
from .runtime import TOLERANCE, eval_plan, eval_reference, max_rel_error, random_inputs, report
from .runtime.report import RunReport


@dataclass
class PipelineConfig:
    rewrite: bool = True
    fuse: bool = True
    intra_opt: bool = True
    layout: bool = True
    max_live: int = 24
    max_block: int = 40
    table_path: Path | None = None
    rules_path: Path | None = None
    db_path: Path | None = None
    dry_run: bool = True
    seed: int = 0
    dtype: str | None = None

    def __post_init__(self):
        if self.max_live < 1 or self.max_block < 1:
            raise ValueError("--max-live and --max-block must be positive")
        for name in ("table_path", "rules_path"):
            path = getattr(self, name)
            if path is not None:
                path = Path(path)
                if not path.is_file():
                    raise FileNotFoundError(f"{name.replace('_path', '')} file {path} not found")
                setattr(self, name, path)
        if self.db_path is not None:
            self.db_path = Path(self.db_path)
        if self.dtype not in (None, "f32", "f64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    def table(self) -> FusionDecisionTable | None:
        return FusionDecisionTable.from_file(self.table_path) if self.table_path else None

    def planner_config(self) -> PlannerConfig:
        return PlannerConfig(self.max_live, self.max_block, self.dry_run, self.table())


@dataclass
class PipelineResult:
    original: ECG
    rewritten: ECG
    rewrite_log: RewriteLog | None
    plan: FusionPlan
    kernels: dict = field(default_factory=dict)

    @property
    def graph(self) -> ECG:
        return self.plan.graph


def cast_graph(g: ECG, dtype: str) -> ECG:
    """Switch every floating-point tensor to ``dtype``."""
    g = g.copy()
    for spec in g.tensors.values():
        if spec.dtype != "i64":
            spec.dtype = dtype
            if spec.data is not None:
                spec.data = np.asarray(spec.data).astype(dtype.replace("f", "float"))
    return infer_shapes(g)


def unfused_plan(g: ECG) -> FusionPlan:
    g = g.copy()
    g.ir_removable = {}
    plan = FusionPlan(g, [], list(g.topo_order))
    plan.stats = plan_stats(g, plan)
    return plan


def run_pipeline(g: ECG, config: PipelineConfig | None = None, db: ProfileDB | None = None, cache: KernelCache | None = None) -> PipelineResult:
    config = config or PipelineConfig()
    if config.dtype:
        g = cast_graph(g, config.dtype)
    log = None
    rewritten = g
    if config.rewrite:
        rewritten, log = rewrite_fixpoint(g, load_rules(config.rules_path))
    table = config.table()
    if config.fuse:
        plan = generate_plan(rewritten, db, config.planner_config())
    else:
        plan = unfused_plan(rewritten)
    if config.intra_opt:
        _, plan = intra_block_optimize(plan.graph, plan)
    kernels = generate_kernels(plan, cache, table)
    if config.layout:
        plan = inter_block_layout(plan)
    return PipelineResult(g, rewritten, log, plan, kernels)


@dataclass
class Verification:
    ok: bool
    error: float
    tolerance: float
    report: RunReport


def verify(g: ECG, config: PipelineConfig | None = None, db: ProfileDB | None = None, result: PipelineResult | None = None) -> Verification:
    """Reference run of the input model against the fused run of the pipeline output."""
    config = config or PipelineConfig()
    result = result or run_pipeline(g, config, db)
    original = result.original
    inputs = random_inputs(original, config.seed)
    t0 = time.perf_counter()
    ref, _ = eval_reference(original, inputs)
    t1 = time.perf_counter()
    _, ref_stats = eval_reference(result.rewritten, inputs)
    t2 = time.perf_counter()
    fused, fused_stats = eval_plan(result.plan, result.kernels, inputs)
    t3 = time.perf_counter()
    err = max_rel_error(ref, fused)
    dtype = next((s.dtype for s in original.tensors.values() if s.dtype != "i64"), "f32")
    tol = TOLERANCE[dtype]
    rep = report(original, result.plan, ref_stats, fused_stats, max_rel_error=err,
                 wall_s={"reference": t1 - t0, "fused": t3 - t2}, outputs=fused)
    rep.irs_bytes_before = result.rewritten.irs_bytes()
    return Verification(err <= tol, err, tol, rep)
