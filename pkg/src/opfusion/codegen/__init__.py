from .dft import DataFlowTree, DFTNode, build_dft, eliminate_common_subtrees
from .emit import emit_source
from .kernel import (
    CodegenRule,
    KernelCache,
    LoopNest,
    LoopNestKernel,
    block_structure,
    codegen_rules,
    generate_kernel,
    generate_kernels,
    kernel_for_block,
)
from .layout import dominant_operator, inter_block_layout, intra_block_optimize

__all__ = [
    "CodegenRule", "DFTNode", "DataFlowTree", "KernelCache", "LoopNest", "LoopNestKernel",
    "block_structure", "build_dft", "codegen_rules", "dominant_operator", "eliminate_common_subtrees",
    "emit_source", "generate_kernel", "generate_kernels", "inter_block_layout", "intra_block_optimize",
    "kernel_for_block",
]
