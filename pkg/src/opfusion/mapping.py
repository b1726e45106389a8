"""Mapping-type lattice and the pairwise fusion decision table."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence


class MappingType(enum.Enum):
    ONE_TO_ONE = "OneToOne"
    ONE_TO_MANY = "OneToMany"
    MANY_TO_MANY = "ManyToMany"
    REORGANIZE = "Reorganize"
    SHUFFLE = "Shuffle"

    @property
    def label(self) -> str:
        return _LABELS[self]

    @property
    def complexity(self) -> int:
        """Position in the increasing-complexity order used for multi-input ops."""
        return _COMPLEXITY[self]

    @classmethod
    def parse(cls, text: str) -> "MappingType":
        key = text.strip().replace("-", "").replace("_", "").lower()
        for member in cls:
            if member.value.lower() == key:
                return member
        raise ValueError(f"unknown mapping type {text!r}")


_LABELS = {
    MappingType.ONE_TO_ONE: "One-to-One",
    MappingType.ONE_TO_MANY: "One-to-Many",
    MappingType.MANY_TO_MANY: "Many-to-Many",
    MappingType.REORGANIZE: "Reorganize",
    MappingType.SHUFFLE: "Shuffle",
}

_COMPLEXITY = {
    MappingType.ONE_TO_ONE: 0,
    MappingType.REORGANIZE: 1,
    MappingType.SHUFFLE: 2,
    MappingType.ONE_TO_MANY: 3,
    MappingType.MANY_TO_MANY: 4,
}

_IMPEDANCE = {
    MappingType.ONE_TO_ONE: 0,
    MappingType.REORGANIZE: 1,
    MappingType.SHUFFLE: 1,
    MappingType.ONE_TO_MANY: 2,
    MappingType.MANY_TO_MANY: 2,
}

O2O = MappingType.ONE_TO_ONE
O2M = MappingType.ONE_TO_MANY
M2M = MappingType.MANY_TO_MANY
REORG = MappingType.REORGANIZE
SHUF = MappingType.SHUFFLE


def impedance(t: MappingType) -> int:
    """Transformation impedance rank: 0 lowest, 2 strongest."""
    return _IMPEDANCE[t]


def most_complex(types: Iterable[MappingType]) -> MappingType:
    types = list(types)
    if not types:
        raise ValueError("no mapping types given")
    return max(types, key=lambda t: t.complexity)


class Verdict(enum.Enum):
    DIRECT = "Direct"
    PROFILE = "Profile"
    BREAK = "Break"

    @property
    def color(self) -> str:
        return {"Direct": "green", "Profile": "yellow", "Break": "red"}[self.value]


class Provenance(enum.Enum):
    FIXED = "Fixed"
    DECISION = "Decision"


@dataclass(frozen=True)
class FusionDecision:
    fused_type: MappingType
    verdict: Verdict
    provenance: Provenance


def _default_cells() -> dict[tuple[MappingType, MappingType], FusionDecision]:
    P, D = Provenance.FIXED, Provenance.DECISION
    cells: dict[tuple[MappingType, MappingType], FusionDecision] = {}

    def put(a, b, fused, verdict, prov):
        cells[a, b] = FusionDecision(fused, verdict, prov)

    # One-to-One fuses with anything in either order; the partner decides the type.
    for t in MappingType:
        put(O2O, t, t, Verdict.DIRECT, P)
        put(t, O2O, t, Verdict.DIRECT, P)

    put(O2M, M2M, M2M, Verdict.BREAK, P)
    put(M2M, M2M, M2M, Verdict.BREAK, P)
    put(M2M, O2M, M2M, Verdict.PROFILE, P)

    # Index remaps composed with copy-amplifying or compute-heavy ops need profiling.
    for remap in (REORG, SHUF):
        for heavy in (O2M, M2M):
            put(remap, heavy, heavy, Verdict.PROFILE, P)
            put(heavy, remap, heavy, Verdict.PROFILE, P)

    put(REORG, REORG, REORG, Verdict.DIRECT, D)
    put(SHUF, SHUF, SHUF, Verdict.DIRECT, D)
    put(REORG, SHUF, SHUF, Verdict.DIRECT, D)
    put(SHUF, REORG, SHUF, Verdict.DIRECT, D)
    put(O2M, O2M, O2M, Verdict.PROFILE, D)
    assert len(cells) == 25
    return cells


class FusionDecisionTable:
    """5x5 lookup from (first, second) mapping types to a fusion decision.

    Cells tagged ``Decision`` can be replaced from an override file; ``Fixed``
    cells cannot.
    """

    def __init__(self, cells: Mapping[tuple[MappingType, MappingType], FusionDecision] | None = None):
        self.cells = dict(cells) if cells is not None else _default_cells()
        missing = [(a, b) for a in MappingType for b in MappingType if (a, b) not in self.cells]
        if missing:
            raise ValueError(f"decision table incomplete, missing {missing}")

    def lookup(self, first: MappingType, second: MappingType) -> FusionDecision:
        return self.cells[first, second]

    def non_break_cells(self) -> list[tuple[MappingType, MappingType]]:
        return [k for k, v in self.cells.items() if v.verdict is not Verdict.BREAK]

    def with_overrides(self, rows: Sequence[tuple[MappingType, MappingType, MappingType, Verdict]]) -> "FusionDecisionTable":
        cells = dict(self.cells)
        for first, second, fused, verdict in rows:
            old = cells[first, second]
            if old.provenance is Provenance.FIXED and (old.fused_type, old.verdict) != (fused, verdict):
                raise ValueError(
                    f"cell ({first.value},{second.value}) is fixed; "
                    f"cannot override {old.fused_type.value}/{old.verdict.value} with {fused.value}/{verdict.value}"
                )
            cells[first, second] = FusionDecision(fused, verdict, old.provenance)
        return FusionDecisionTable(cells)

    @classmethod
    def from_file(cls, path: str | Path) -> "FusionDecisionTable":
        """Load an override file of 25 ``first,second,fused_type,verdict`` lines."""
        rows = []
        seen = set()
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 comma-separated fields, got {len(parts)}")
            try:
                first, second, fused = (MappingType.parse(p) for p in parts[:3])
                verdict = Verdict(parts[3].capitalize())
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if (first, second) in seen:
                raise ValueError(f"{path}:{lineno}: duplicate cell ({first.value},{second.value})")
            seen.add((first, second))
            rows.append((first, second, fused, verdict))
        if len(rows) != 25:
            raise ValueError(f"{path}: expected 25 cells, got {len(rows)}")
        return cls().with_overrides(rows)

    def to_lines(self) -> list[str]:
        return [
            f"{a.value},{b.value},{d.fused_type.value},{d.verdict.value}"
            for (a, b), d in sorted(self.cells.items(), key=lambda kv: (kv[0][0].complexity, kv[0][1].complexity))
        ]


DEFAULT_TABLE = FusionDecisionTable()


def fusion_lookup(first: MappingType, second: MappingType, table: FusionDecisionTable | None = None) -> FusionDecision:
    return (table or DEFAULT_TABLE).lookup(first, second)
