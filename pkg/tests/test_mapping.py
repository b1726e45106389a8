import pytest

from opfusion.mapping import (
    DEFAULT_TABLE, M2M, O2M, O2O, REORG, SHUF, FusionDecisionTable, MappingType, Provenance,
    Verdict, fusion_lookup, impedance, most_complex,
)
from opfusion.ops import classify_operator

ALL = list(MappingType)


def test_complexity_order():
    order = sorted(ALL, key=lambda t: t.complexity)
    assert order == [O2O, REORG, SHUF, O2M, M2M]


def test_most_complex_picks_dominant_input_type():
    assert most_complex([O2O, SHUF, REORG]) is SHUF
    assert most_complex([O2M, O2O]) is O2M
    with pytest.raises(ValueError):
        most_complex([])


def test_impedance_ranks():
    assert impedance(O2O) < impedance(REORG) == impedance(SHUF) < impedance(O2M) == impedance(M2M)


@pytest.mark.parametrize("other", ALL)
def test_one_to_one_absorbed_in_either_order(other):
    for first, second in [(O2O, other), (other, O2O)]:
        d = fusion_lookup(first, second)
        assert d.verdict is Verdict.DIRECT
        assert d.fused_type is other


def test_result_type_dominance():
    # the fused type is never simpler than either operand
    for (a, b), d in DEFAULT_TABLE.cells.items():
        assert d.fused_type.complexity >= max(a.complexity, b.complexity)
        assert d.fused_type in (a, b)


def test_non_break_cell_count():
    assert len(DEFAULT_TABLE.non_break_cells()) == 23
    breaks = {k for k, v in DEFAULT_TABLE.cells.items() if v.verdict is Verdict.BREAK}
    assert breaks == {(O2M, M2M), (M2M, M2M)}


def test_named_cells():
    assert fusion_lookup(M2M, O2M).verdict is Verdict.PROFILE
    assert fusion_lookup(REORG, M2M).verdict is Verdict.PROFILE
    assert fusion_lookup(M2M, SHUF).verdict is Verdict.PROFILE
    assert fusion_lookup(REORG, SHUF).fused_type is SHUF


def test_verdict_colors():
    assert [v.color for v in Verdict] == ["green", "yellow", "red"]


def test_parse_mapping_type_spellings():
    assert MappingType.parse("one-to-many") is O2M
    assert MappingType.parse("Many_To_Many") is M2M
    with pytest.raises(ValueError):
        MappingType.parse("diagonal")


def _write_table(path, table, edit=None):
    lines = table.to_lines()
    if edit:
        lines = [edit(line) for line in lines]
    path.write_text("\n".join(lines) + "\n")
    return path


def test_override_file_roundtrip(tmp_path):
    t = FusionDecisionTable.from_file(_write_table(tmp_path / "t.csv", DEFAULT_TABLE))
    assert t.cells == DEFAULT_TABLE.cells


def test_override_decision_cell(tmp_path):
    def edit(line):
        return "OneToMany,OneToMany,OneToMany,Break" if line.startswith("OneToMany,OneToMany,") else line

    t = FusionDecisionTable.from_file(_write_table(tmp_path / "t.csv", DEFAULT_TABLE, edit))
    assert t.lookup(O2M, O2M).verdict is Verdict.BREAK
    assert t.lookup(O2M, O2M).provenance is Provenance.DECISION


def test_override_of_fixed_cell_rejected(tmp_path):
    def edit(line):
        return "ManyToMany,ManyToMany,ManyToMany,Direct" if line.startswith("ManyToMany,ManyToMany,") else line

    with pytest.raises(ValueError, match="fixed"):
        FusionDecisionTable.from_file(_write_table(tmp_path / "t.csv", DEFAULT_TABLE, edit))


def test_override_file_incomplete(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("\n".join(DEFAULT_TABLE.to_lines()[:24]) + "\n")
    with pytest.raises(ValueError, match="25"):
        FusionDecisionTable.from_file(path)


@pytest.mark.parametrize("kind,attrs,ins,outs,expected", [
    ("Relu", {}, [(4, 8)], [(4, 8)], O2O),
    ("Add", {}, [(4, 8), (4, 8)], [(4, 8)], O2O),
    ("Add", {}, [(4, 8), (1, 8)], [(4, 8)], O2M),
    ("Expand", {"shape": [4, 8]}, [(1, 8)], [(4, 8)], O2M),
    ("GEMM", {}, [(4, 6), (6, 8)], [(4, 8)], M2M),
    ("ReduceSum", {"axes": [1]}, [(4, 8)], [(4, 1)], M2M),
    ("Reshape", {"shape": [8, 4]}, [(4, 8)], [(8, 4)], REORG),
    ("Transpose", {"perm": [1, 0]}, [(4, 8)], [(8, 4)], SHUF),
])
def test_classification(kind, attrs, ins, outs, expected):
    assert classify_operator(kind, attrs, ins, outs) is expected
