"""Plain-text and JSON run reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from ..graph import ECG
from .reference import MemStats


def _rate(before: int, after: int) -> float:
    return round(before / after, 2) if after else 1.0


@dataclass
class RunReport:
    model: str
    layers_before: int
    layers_after: int
    irs_bytes_before: int
    irs_bytes_after: int
    ref_stats: MemStats
    fused_stats: MemStats
    blocks: int = 0
    max_rel_error: float | None = None
    wall_s: dict[str, float] = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)

    @property
    def fusion_rate(self) -> float:
        return _rate(self.layers_before, self.layers_after)

    def text(self) -> str:
        r, f = self.ref_stats, self.fused_stats
        lines = [
            f"model {self.model}",
            f"layers {self.layers_before} → {self.layers_after}, fusion rate {self.fusion_rate}",
            f"blocks {self.blocks}",
            f"IRS bytes {self.irs_bytes_before} → {self.irs_bytes_after}",
            f"materialized intermediates {r.materialized_count} ({r.materialized_bytes} B) → {f.materialized_count} ({f.materialized_bytes} B)",
            f"bytes read {r.bytes_read} → {f.bytes_read}",
            f"bytes written {r.bytes_written} → {f.bytes_written}",
            f"kernel invocations {r.kernel_invocations} → {f.kernel_invocations}",
        ]
        if self.max_rel_error is not None:
            lines.append(f"max relative error {self.max_rel_error:.3g}")
        for name, secs in sorted(self.wall_s.items()):
            lines.append(f"wall {name} {secs * 1e3:.3f} ms")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "layers_before": self.layers_before,
            "layers_after": self.layers_after,
            "fusion_rate": self.fusion_rate,
            "blocks": self.blocks,
            "irs_bytes_before": self.irs_bytes_before,
            "irs_bytes_after": self.irs_bytes_after,
            "reference": self.ref_stats.as_dict(),
            "fused": self.fused_stats.as_dict(),
            "max_rel_error": self.max_rel_error,
            "wall_s": dict(self.wall_s),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def report(g: ECG, plan, ref_stats: MemStats, fused_stats: MemStats, **extra) -> RunReport:
    """Compare an unfused run of ``g`` with a run of ``plan``."""
    after_irs = sum(
        plan.graph.tensors[t].nbytes for t in plan.graph.intermediates() if not plan.graph.ir_removable.get(t)
    )
    return RunReport(
        g.name, len(g.operators), plan.layer_count, g.irs_bytes(), after_irs,
        ref_stats, fused_stats, blocks=len(plan.blocks), **extra,
    )
