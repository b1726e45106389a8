import json

import pytest

from opfusion import cli
from opfusion.models import bundled_models, bundled_path
from opfusion.profiledb import ProfileDB, ProfileKey, ProfileRecord


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_inspect_conv_chain(capsys):
    code, out, _ = run(capsys, "inspect", "conv_chain")
    assert code == 0
    assert "6 operators: 4 One-to-One, 2 Many-to-Many" in out.splitlines()
    assert run(capsys, "inspect", str(bundled_path("conv_chain")))[1] == out


def test_inspect_empty_file(tmp_path, capsys):
    empty = tmp_path / "empty.json"
    empty.write_text("")
    code, _, err = run(capsys, "inspect", str(empty))
    assert code == 2
    assert "parse error" in err


def test_missing_model(capsys):
    assert run(capsys, "inspect", "no_such_model")[0] == 2


def test_unknown_flag(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["plan", "conv_chain", "--frobnicate"])
    assert info.value.code == 64
    assert "usage" in capsys.readouterr().err


def test_bad_threshold_is_usage_error(capsys, tmp_path):
    assert run(capsys, "plan", "conv_chain", "--max-block", "0", "--out", str(tmp_path))[0] == 64


@pytest.mark.parametrize("model", bundled_models())
def test_verify_bundled(model, tmp_path, capsys):
    code, out, _ = run(capsys, "verify", model, "--out", str(tmp_path))
    assert code == 0
    assert "verify OK" in out
    d = tmp_path / model
    for name in ("rewritten.json", "plan.json", "report.txt", "report.json"):
        assert (d / name).is_file()
    assert list((d / "kernels").glob("*.kernel.txt"))


def test_plan_conv_chain_artifact(tmp_path, capsys):
    code, out, _ = run(capsys, "plan", "conv_chain", "--out", str(tmp_path))
    assert code == 0
    assert "layers 6 → 2, fusion rate 3.0" in out
    plan = json.loads((tmp_path / "conv_chain" / "plan.json").read_text())
    assert plan["blocks"][0]["members"] == ["add", "conv", "relu", "mul", "sub"]
    assert plan["unfused"] == ["gemm"]


def _layers(out):
    line = next(l for l in out.splitlines() if l.startswith("layers"))
    return int(line.split("→")[1].split(",")[0])


def test_rewrite_reduces_layers(tmp_path, capsys):
    _, with_rw, _ = run(capsys, "plan", "rewrite_fusion", "--out", str(tmp_path))
    _, without, _ = run(capsys, "plan", "rewrite_fusion", "--no-rewrite", "--out", str(tmp_path))
    assert _layers(with_rw) < _layers(without)


def test_rewrite_command(tmp_path, capsys):
    code, out, _ = run(capsys, "rewrite", "rewrite_fusion", "--out", str(tmp_path))
    assert code == 0
    assert "assoc4" in out
    assert (tmp_path / "rewrite_fusion" / "rewritten.json").is_file()


def test_codegen_deterministic(tmp_path, capsys):
    run(capsys, "codegen", "shared_gemm", "--out", str(tmp_path / "a"))
    run(capsys, "codegen", "shared_gemm", "--out", str(tmp_path / "b"))
    a = (tmp_path / "a" / "shared_gemm" / "kernels" / "block0.kernel.txt").read_text()
    b = (tmp_path / "b" / "shared_gemm" / "kernels" / "block0.kernel.txt").read_text()
    assert a == b and "void block0(" in a


def test_run_f64(tmp_path, capsys):
    code, out, _ = run(capsys, "run", "shared_gemm", "--dtype", "f64", "--out", str(tmp_path))
    assert code == 0
    assert "IRS bytes" in out


def test_verify_failure_exit_code(tmp_path, capsys, monkeypatch):
    from opfusion import pipeline

    real = pipeline.max_rel_error
    monkeypatch.setattr(pipeline, "max_rel_error", lambda a, b: 1.0)
    code, out, _ = run(capsys, "verify", "conv_chain", "--out", str(tmp_path))
    monkeypatch.setattr(pipeline, "max_rel_error", real)
    assert code == 3
    assert "verify FAILED" in out


def test_live_mode_needs_db(tmp_path, capsys):
    missing = tmp_path / "db.txt"
    assert run(capsys, "plan", "conv_chain", "--db", str(missing), "--out", str(tmp_path))[0] == 4
    assert run(capsys, "plan", "conv_chain", "--db", str(missing), "--dry-run", "--out", str(tmp_path))[0] == 0


def _records(n):
    return [ProfileRecord(ProfileKey("Relu", "Exp", (i,), (i,)), 1.0 + i, 2.0, 9, "h") for i in range(n)]


def test_profile_db_import_export_stats(tmp_path, capsys):
    src = tmp_path / "in.txt"
    src.write_text("".join(r.to_line() + "\n" for r in _records(3)) + "garbage line\n")
    db = tmp_path / "db.txt"
    code, out, err = run(capsys, "profile-db", "import", str(src), "--db", str(db))
    assert code == 0
    assert "imported 3 records, skipped 1 malformed lines" in out
    assert err.count("warning") == 1 and ":4:" in err
    exported = tmp_path / "out.txt"
    assert run(capsys, "profile-db", "export", str(exported), "--db", str(db))[0] == 0
    fresh = tmp_path / "db2.txt"
    run(capsys, "profile-db", "import", str(exported), "--db", str(fresh))
    assert len(ProfileDB(fresh)) == 3
    code, out, _ = run(capsys, "profile-db", "stats", "--db", str(db))
    assert out.splitlines()[0] == "3 entries"
    assert "Relu->Exp 3" in out


def test_profile_db_empty_stats(tmp_path, capsys):
    code, out, _ = run(capsys, "profile-db", "stats", "--db", str(tmp_path / "none.txt"))
    assert code == 0 and out.startswith("0 entries")


def test_profile_db_needs_db(capsys):
    assert run(capsys, "profile-db", "stats")[0] == 64
