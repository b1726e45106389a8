import re

import numpy as np
import pytest

from opfusion.codegen import (
    KernelCache, build_dft, codegen_rules, eliminate_common_subtrees, emit_source, generate_kernel,
    generate_kernels, inter_block_layout, intra_block_optimize, kernel_for_block,
)
from opfusion.codegen.kernel import fold_rules
from opfusion.codegen.layout import CHANNEL_LAST, ROW_MAJOR
from opfusion.errors import CodegenError
from opfusion.mapping import M2M, O2O, SHUF, fusion_lookup
from opfusion.models import load_bundled
from opfusion.planner import SEED, SUCC, FusionBlock, block_io, generate_plan
from opfusion.runtime import eval_plan, eval_reference, max_rel_error, random_inputs
from opfusion.runtime.reference import initial_env
from opfusion.testing import GraphBuilder


def manual_block(g, steps, bid="block0"):
    """A block from (op, direction) steps, folding the decision table like the planner does."""
    order, t = [], None
    for op, direction in steps:
        ty = g.operators[op].mapping_type
        if t is None:
            t = ty
        elif direction == SUCC:
            t = fusion_lookup(t, ty).fused_type
        else:
            t = fusion_lookup(ty, t).fused_type
        order.append((op, direction, ty))
    members = sorted((op for op, _ in steps), key=g.topo_index().__getitem__)
    ins, outs = block_io(g, members)
    return FusionBlock(bid, members, t, order, ins, outs)


def run_kernel(g, block, seed=0):
    k = kernel_for_block(g, block)
    inputs = random_inputs(g, seed)
    env = initial_env(g, inputs)
    ref, _ = eval_reference(g, inputs)
    full = dict(env)
    full.update(ref)
    return k, k.execute(env), ref


# --- rules -----------------------------------------------------------------------


def test_one_rule_per_non_break_cell():
    rules = codegen_rules()
    assert len(rules) == 23
    assert (M2M, M2M) not in rules
    assert rules[(M2M, O2O)].action == "epilogue"
    assert rules[(O2O, SHUF)].action == "permute"
    assert rules[(O2O, O2O)].action == "inline"
    assert rules[(O2O, M2M)].action == "skeleton"
    assert all(r.description for r in rules.values())


def test_missing_rule_fails_loudly():
    g = load_bundled("conv_chain")
    plan = generate_plan(g)
    rules = dict(codegen_rules())
    del rules[(O2O, M2M)]
    with pytest.raises(CodegenError, match="no codegen rule"):
        fold_rules(plan.blocks[0], rules)


# --- data-flow trees -------------------------------------------------------------


def shared_gemm_block():
    plan = generate_plan(load_bundled("shared_gemm"))
    assert len(plan.blocks) == 1
    return plan, plan.blocks[0]


def test_shared_gemm_tree_shape():
    plan, block = shared_gemm_block()
    t = build_dft(block, plan.graph)
    root = t.nodes[t.roots[0]]
    assert root.id == "Out"
    assert root.children == ["IRS3", "IRS5"]
    assert sorted(t.leaves) == ["A", "B", "C", "D"]
    assert t.tree_size() == 13
    assert t.dag_size() == 10


def test_shared_gemm_cse_evaluates_shared_subtree_once():
    plan, block = shared_gemm_block()
    t = build_dft(block, plan.graph)
    merged = eliminate_common_subtrees(t)
    env = initial_env(plan.graph, random_inputs(plan.graph, 1))
    (tree_out, tree_count), (dag_out, dag_count) = t.evaluate(env), merged.evaluate(env)
    assert tree_count == 13
    assert dag_count == 10
    np.testing.assert_array_equal(tree_out["Out"], dag_out["Out"])


def test_single_op_tree():
    b = GraphBuilder()
    b.op("Relu", [b.input("x", (3,))], id="r")
    g = b.build()
    t = build_dft(manual_block(g, [("r", SEED)]), g)
    assert [n for n in t.order() if not t.nodes[n].is_leaf] == ["r"]


def test_repeated_structure_merged():
    b = GraphBuilder()
    x = b.input("x", (4, 4))
    e1 = b.op("Exp", [x], id="e1")
    e2 = b.op("Exp", [x], id="e2")
    b.op("Add", [e1, e2], id="add")
    g = b.build()
    block = manual_block(g, [("add", SEED), ("e1", "pred"), ("e2", "pred")])
    t = build_dft(block, g)
    merged = eliminate_common_subtrees(t)
    assert t.dag_size() == 4
    assert merged.dag_size() == 3
    assert merged.nodes["add"].children == ["e1", "e1"]


def test_tree_without_repeats_unchanged():
    plan = generate_plan(load_bundled("conv_chain"))
    t = build_dft(plan.blocks[0], plan.graph)
    merged = eliminate_common_subtrees(t)
    assert merged.order() == t.order()


def test_square_of_leaf_loaded_once():
    b = GraphBuilder()
    x = b.input("x", (4, 4))
    b.op("Relu", [b.op("Mul", [x, x], id="m")], id="r")
    g = b.build()
    k = kernel_for_block(g, manual_block(g, [("m", SEED), ("r", SUCC)]))
    assert len([n for n in k.nodes if n[0] == "load"]) == 1


# --- kernels ---------------------------------------------------------------------


def test_gemm_div_transpose_kernel():
    b = GraphBuilder()
    a, w = b.input("a", (4, 6)), b.input("w", (6, 8))
    s = b.input("s", (4, 8))
    m = b.op("GEMM", [a, w], id="gemm")
    d = b.op("Div", [m, s], id="div")
    b.op("Transpose", [d], id="tr", perm=[1, 0])
    g = b.build()
    block = manual_block(g, [("div", SEED), ("tr", SUCC), ("gemm", "pred")])
    k, out, ref = run_kernel(g, block)
    assert k.mapping_type is M2M
    assert [a for _, _, _, a in k.trace] == ["permute", "permute"]
    assert len(k.nests) == 1 and k.nests[0].shape == (8, 4)
    assert max_rel_error(ref, out) <= 1e-5


def test_add_recip_chain_is_one_to_one():
    b = GraphBuilder()
    x, y = b.input("x", (4, 8)), b.input("y", (4, 8))
    b.op("Recip", [b.op("Add", [x, y], id="add")], id="recip")
    g = b.build()
    k, out, ref = run_kernel(g, manual_block(g, [("add", SEED), ("recip", SUCC)]))
    assert k.mapping_type is O2O
    assert k.trace == [("recip", "OneToOne", "OneToOne", "inline")]
    assert max_rel_error(ref, out) <= 1e-5


@pytest.mark.parametrize("name", ["conv_chain", "shared_gemm"])
def test_bundled_kernels_match_reference(name):
    g = load_bundled(name)
    plan = generate_plan(g)
    kernels = generate_kernels(plan)
    inputs = random_inputs(g, 3)
    ref, _ = eval_reference(g, inputs)
    out, stats = eval_plan(plan, kernels, inputs)
    assert max_rel_error(ref, out) <= 1e-5
    removable = {t for t, v in plan.graph.ir_removable.items() if v}
    assert removable and not removable & set(stats.stores)


def test_multi_output_block():
    b = GraphBuilder()
    x = b.input("x", (3, 5))
    r = b.op("Relu", [x], id="relu")
    b.op("Exp", [r], id="exp")
    b.op("Tanh", [r], id="tanh")
    g = b.build()
    block = manual_block(g, [("relu", SEED), ("exp", SUCC), ("tanh", SUCC)])
    k, out, ref = run_kernel(g, block)
    assert len(k.nests) == 2
    assert {v for v, _, _ in k.nests[1].loops}.isdisjoint({v for v, _, _ in k.nests[0].loops})
    assert max_rel_error(ref, out) <= 1e-5


# --- emission --------------------------------------------------------------------


def test_emit_elementwise_add():
    b = GraphBuilder()
    b.op("Add", [b.input("x", (4, 8)), b.input("y", (4, 8))], id="add")
    g = b.build()
    block = manual_block(g, [("add", SEED)])
    k = generate_kernel(block, build_dft(block, g), g=g)
    text = emit_source(k)
    assert text.count("for (") == 2
    stores = [line for line in text.splitlines() if line.strip().startswith("out0[")]
    assert stores == ["      out0[i0][i1] = in0[i0][i1] + in1[i0][i1];"]


def test_emit_shared_gemm_no_intermediate_arrays():
    plan, block = shared_gemm_block()
    k = kernel_for_block(plan.graph, block)
    text = emit_source(k)
    assert text.count("for (") == 3
    body = text.split("{", 1)[1]
    assert not re.search(r"(float|double) \w+\[", body)
    assert emit_source(k) == text


# --- layout ----------------------------------------------------------------------


def _transpose_mul(second_consumer=False):
    b = GraphBuilder()
    x = b.input("x", (4, 6))
    t = b.op("Transpose", [x], id="tr", perm=[1, 0])
    b.op("Mul", [t, b.input("y", (6, 4))], id="mul")
    if second_consumer:
        w = b.input("w", (4, 5))
        b.op("Relu", [b.op("GEMM", [t, w], id="gemm")], id="relu")
    return b.build()


def test_transpose_folded_into_consumer():
    g = _transpose_mul()
    plan = generate_plan(g)
    assert plan.blocks[0].members == ["tr", "mul"]
    g2, plan2 = intra_block_optimize(plan.graph, plan)
    assert "tr" not in g2.operators
    assert plan2.blocks[0].folded == ["tr"]
    assert plan2.blocks[0].members == ["mul"]
    assert g2.operators["mul"].input_views[0] == [("Transpose", {"perm": [1, 0]})]
    inputs = random_inputs(g, 0)
    ref, _ = eval_reference(g, inputs)
    out, stats = eval_plan(plan2, generate_kernels(plan2), inputs)
    assert max_rel_error(ref, out) <= 1e-5


def test_transpose_with_two_consumers_kept():
    g = _transpose_mul(second_consumer=True)
    plan = generate_plan(g)
    g2, plan2 = intra_block_optimize(plan.graph, plan)
    assert "tr" in g2.operators


def test_slice_folded_into_add():
    b = GraphBuilder()
    x = b.input("x", (4, 10))
    s = b.op("Slice", [x], id="slice", starts=[2], ends=[8], axes=[1])
    b.op("Add", [s, b.input("y", (4, 6))], id="add")
    g = b.build()
    plan = generate_plan(g)
    g2, plan2 = intra_block_optimize(plan.graph, plan)
    assert "slice" not in g2.operators
    inputs = random_inputs(g, 0)
    ref, _ = eval_reference(g, inputs)
    out, _ = eval_plan(plan2, generate_kernels(plan2), inputs)
    assert max_rel_error(ref, out) <= 1e-5


def _conv_block(b, x, tag, w_name):
    w = b.weight(w_name, (2, 2, 3, 3), np.full((2, 2, 3, 3), 0.05))
    return b.op("Relu", [b.op("Conv2D", [x, w], id=f"conv{tag}", pads=[1, 1, 1, 1])], id=f"relu{tag}")


def test_conv_to_conv_needs_no_transform():
    b = GraphBuilder()
    r = _conv_block(b, b.input("x", (1, 2, 6, 6)), "1", "w1")
    _conv_block(b, r, "2", "w2")
    plan = inter_block_layout(generate_plan(b.build()))
    assert set(plan.layouts.values()) == {CHANNEL_LAST}
    assert plan.transforms == []


def test_conv_feeding_gemm_one_transform():
    b = GraphBuilder()
    r = _conv_block(b, b.input("x", (1, 2, 4, 4)), "1", "w1")
    f = b.op("Flatten", [r], id="flat", axis=1)
    w = b.input("w", (32, 8))
    b.op("Relu", [b.op("GEMM", [f, w], id="gemm")], id="relu2")
    plan = generate_plan(b.build())
    out = inter_block_layout(plan)
    owner = out.block_of()
    assert out.layouts[owner.get("conv1", "conv1")] == CHANNEL_LAST
    assert out.layouts[owner.get("gemm", "gemm")] == ROW_MAJOR
    assert len(out.transforms) == 1


def test_elementwise_block_inherits_upstream():
    b = GraphBuilder()
    r = _conv_block(b, b.input("x", (1, 2, 6, 6)), "1", "w1")
    w = b.weight("w2", (2, 2, 3, 3), np.full((2, 2, 3, 3), 0.05))
    c = b.op("Conv2D", [r, w], id="conv2", pads=[1, 1, 1, 1])
    b.op("Tanh", [b.op("Exp", [c], id="exp")], id="tanh")
    plan = generate_plan(b.build())
    g = plan.graph
    out = inter_block_layout(plan)
    assert set(out.layouts.values()) == {CHANNEL_LAST}
    assert all(blk.layout == CHANNEL_LAST for blk in out.blocks)


def test_elementwise_only_model_defaults_row_major():
    b = GraphBuilder()
    b.op("Exp", [b.op("Relu", [b.input("x", (3, 3))])])
    out = inter_block_layout(generate_plan(b.build()))
    assert set(out.layouts.values()) == {ROW_MAJOR}


# --- cache -----------------------------------------------------------------------


def _repeated():
    b = GraphBuilder()
    t = b.input("x", (8, 8))
    for i in range(5):
        t = b.op("GEMM", [t, b.input(f"w{i}", (8, 8))], id=f"gemm{i}")
        t = b.op("Relu", [t], id=f"relu{i}")
    return b.build()


def test_identical_blocks_share_kernel():
    g = _repeated()
    plan = generate_plan(g)
    cache = KernelCache()
    kernels = generate_kernels(plan, cache)
    assert [blk.members for blk in plan.blocks] == [
        ["relu0", "gemm1", "relu1"], ["relu2", "gemm3", "relu3"], ["gemm4", "relu4"],
    ]
    assert cache.hits == 1 and len(cache) == 2
    assert len({k.block_id for k in kernels.values()}) == len(plan.blocks)
    for blk in plan.blocks:
        assert kernels[blk.id].writes() == blk.outputs
    inputs = random_inputs(g, 0)
    ref, _ = eval_reference(g, inputs)
    out, _ = eval_plan(plan, kernels, inputs)
    assert max_rel_error(ref, out) <= 1e-5


def test_cache_writes_sources(tmp_path):
    plan = generate_plan(_repeated())
    cache = KernelCache(tmp_path)
    generate_kernels(plan, cache)
    assert len(list(tmp_path.glob("*.kernel.txt"))) == len(cache)
