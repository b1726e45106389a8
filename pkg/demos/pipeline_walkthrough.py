"""Walk one bundled model through every pass and print what each one did.

    python demos/pipeline_walkthrough.py [model]
"""

import sys

from opfusion.codegen import emit_source
from opfusion.models import load_bundled
from opfusion.pipeline import PipelineConfig, run_pipeline, verify


def main(name="rewrite_fusion"):
    g = load_bundled(name)
    config = PipelineConfig()
    result = run_pipeline(g, config)

    print(f"== {name}: {len(g.operators)} operators")
    for line in result.rewrite_log.lines():
        print("rewrite", line)

    plan = result.plan
    for b in plan.blocks:
        print(f"{b.id} [{b.mapping_type.label}, {b.layout}] {' '.join(b.members)}")
    print("unfused", " ".join(plan.unfused) or "-")
    for t in plan.transforms:
        print(f"layout transform on {t['tensor']}: {t['from']} -> {t['to']}")

    for bid, k in sorted(result.kernels.items()):
        print()
        print(emit_source(k))

    v = verify(g, config, result=result)
    print(v.report.text())
    print("verify", "OK" if v.ok else "FAILED", f"(max rel error {v.error:.2e})")


if __name__ == "__main__":
    main(*sys.argv[1:])
