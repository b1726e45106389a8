"""Each operator kind lowered on its own must agree with the reference interpreter."""

import numpy as np
import pytest

from opfusion.codegen import kernel_for_block
from opfusion.ops import REGISTRY
from opfusion.planner import SEED, FusionBlock, block_io
from opfusion.runtime import eval_reference, max_rel_error, random_inputs
from opfusion.runtime.reference import initial_env
from opfusion.testing import GraphBuilder

X = (2, 3, 4, 4)
W3 = np.linspace(-0.5, 0.5, 4 * 3 * 3 * 3).reshape(4, 3, 3, 3)

# kind -> (input shapes, attributes); strings name weights built below
CASES = {
    "Abs": ([X], {}),
    "Add": ([X, (1, 3, 1, 4)], {}),
    "AveragePool": ([X], {"kernel_shape": [3, 3], "pads": [1, 1, 1, 1], "strides": [2, 2]}),
    "BitShift": (["ints", "shift"], {"direction": "LEFT"}),
    "Clip": ([X], {"min": -0.25, "max": 0.5}),
    "Concat": ([X, (2, 2, 4, 4)], {"axis": 1}),
    "Conv2D": ([X, "conv_w"], {"pads": [1, 0, 1, 2], "strides": [1, 2]}),
    "DepthToSpace": ([(1, 8, 2, 3)], {"blocksize": 2}),
    "Div": ([X, "positive"], {}),
    "Exp": ([X], {}),
    "Expand": ([(3, 1)], {"shape": [2, 3, 5]}),
    "Flatten": ([X], {"axis": 2}),
    "GEMM": ([(5, 4), (3, 4)], {"transB": 1}),
    "Gather": ([(6, 5), "index"], {"axis": 0}),
    "Log": (["positive"], {}),
    "MatMul": ([(2, 5, 4), (4, 3)], {}),
    "MaxPool": ([X], {"kernel_shape": [2, 2], "strides": [2, 2]}),
    "Mul": ([X, X], {}),
    "Recip": (["positive"], {}),
    "ReduceMean": ([X], {"axes": [1, 3], "keepdims": 0}),
    "ReduceProd": ([X], {"axes": [2], "keepdims": 1}),
    "ReduceSum": ([X], {"axes": [-1], "keepdims": 1}),
    "Relu": ([X], {}),
    "Reshape": ([X], {"shape": [6, -1]}),
    "Resize": ([(1, 2, 3, 3)], {"scales": [1, 1, 2, 1.5]}),
    "Sigmoid": ([X], {}),
    "Slice": ([X], {"starts": [1, 0], "ends": [4, 3], "axes": [3, 2], "steps": [2, 1]}),
    "Softmax": ([X], {"axis": 1}),
    "Split": ([X], {"axis": 1, "split": [1, 2]}),
    "Sqrt": (["positive"], {}),
    "Square": ([X], {}),
    "Squeeze": ([(2, 1, 4)], {"axes": [1]}),
    "Sub": ([X, (4,)], {}),
    "Tanh": ([X], {}),
    "Transpose": ([X], {"perm": [0, 2, 3, 1]}),
    "Unsqueeze": ([(3, 4)], {"axes": [0, 3]}),
}


def build(kind):
    shapes, attrs = CASES[kind]
    b = GraphBuilder()
    names = []
    for i, s in enumerate(shapes):
        if s == "conv_w":
            names.append(b.weight("w", W3.shape, W3))
        elif s == "positive":
            names.append(b.weight(f"p{i}", X, np.linspace(0.5, 2.0, int(np.prod(X)))))
        elif s == "index":
            names.append(b.weight("idx", (2, 3), [[0, 5, 2], [-1, 3, 3]], dtype="i64"))
        elif s == "ints":
            names.append(b.weight("ints", (3, 4), np.arange(12), dtype="i64"))
        elif s == "shift":
            names.append(b.weight("shift", (), 2, dtype="i64"))
        else:
            names.append(b.input(f"x{i}", s))
    n_out = len(attrs["split"]) if kind == "Split" else 1
    b.op(kind, names, id="op", n_out=n_out, **attrs)
    return b.build()


def test_every_kind_covered():
    assert set(CASES) == set(REGISTRY)


@pytest.mark.parametrize("kind", sorted(CASES))
def test_single_op_kernel(kind):
    g = build(kind)
    ins, outs = block_io(g, ["op"])
    op = g.operators["op"]
    block = FusionBlock("b0", ["op"], op.mapping_type, [("op", SEED, op.mapping_type)], ins, outs)
    k = kernel_for_block(g, block)
    inputs = random_inputs(g, 5)
    ref, _ = eval_reference(g, inputs)
    got = k.execute(initial_env(g, inputs))
    assert set(got) == set(ref)
    if any(a.dtype.kind == "i" for a in ref.values()):
        for t in ref:
            np.testing.assert_array_equal(got[t], ref[t])
    else:
        assert max_rel_error(ref, got) <= 1e-5
