"""Command-line front end: inspect, rewrite, plan, codegen, run, verify, profile-db."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import models
from .codegen import emit_source
from .errors import CodegenError, ExecutionError, GraphError, RewriteError
from .graph import ECG, flop_count, load_model, render_model
from .mapping import MappingType
from .pipeline import PipelineConfig, PipelineResult, run_pipeline, verify
from .profiledb import ProfileDB, read_records

log = logging.getLogger("opfusion")

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_VERIFY = 3
EXIT_NO_DB = 4
EXIT_USAGE = 64


class UsageError(Exception):
    pass


class MissingDatabase(FileNotFoundError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def resolve_model(arg: str) -> ECG:
    """A model file path, or the name of a bundled model."""
    path = Path(arg)
    if path.exists():
        return load_model(path)
    if arg in models.bundled_models():
        return models.load_bundled(arg)
    raise FileNotFoundError(f"model {arg!r} not found (bundled: {', '.join(models.bundled_models())})")


def summarize(g: ECG) -> str:
    counts: dict[MappingType, int] = {}
    for op in g.operators.values():
        counts[op.mapping_type] = counts.get(op.mapping_type, 0) + 1
    parts = [f"{counts[t]} {t.label}" for t in sorted(counts, key=lambda t: t.complexity)]
    lines = [
        f"model {g.name}",
        f"{len(g.operators)} operators: {', '.join(parts)}",
        f"FLOPs {flop_count(g).total}",
        f"IRS bytes {g.irs_bytes()}",
        f"inputs {', '.join(g.inputs())}",
        f"outputs {', '.join(g.outputs())}",
    ]
    for oid in g.topo_order:
        op = g.operators[oid]
        shape = "x".join(str(d) for d in g.tensors[op.outputs[0]].shape) or "scalar"
        lines.append(f"  {oid:<16} {op.kind:<12} {op.mapping_type.label:<13} {shape}")
    return "\n".join(lines) + "\n"


def _config(args) -> PipelineConfig:
    return PipelineConfig(
        rewrite=not args.no_rewrite,
        max_live=args.max_live,
        max_block=args.max_block,
        table_path=args.table,
        rules_path=args.rules,
        db_path=args.db,
        dry_run=args.dry_run or args.db is None,
        seed=args.seed,
        dtype=args.dtype,
    )


def _open_db(config: PipelineConfig) -> ProfileDB | None:
    if config.db_path is None:
        return None
    if not config.dry_run and not config.db_path.exists():
        raise MissingDatabase(f"profile database {config.db_path} does not exist (live mode)")
    return ProfileDB(config.db_path)


def _outdir(args, g: ECG) -> Path:
    d = Path(args.out) / g.name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _pipeline(args, g: ECG) -> PipelineResult:
    config = _config(args)
    db = _open_db(config)
    result = run_pipeline(g, config, db)
    if db is not None and not config.dry_run:
        db.save()
    return result


def _write_plan(args, result: PipelineResult) -> Path:
    out = _outdir(args, result.original)
    (out / "rewritten.json").write_text(render_model(result.rewritten))
    path = out / "plan.json"
    path.write_text(result.plan.to_json() + "\n")
    return path


def _write_kernels(args, result: PipelineResult) -> Path:
    kdir = _outdir(args, result.original) / "kernels"
    kdir.mkdir(exist_ok=True)
    for bid, k in sorted(result.kernels.items()):
        (kdir / f"{bid}.kernel.txt").write_text(emit_source(k))
    return kdir


def _layers(result: PipelineResult) -> str:
    before = len(result.original.operators)
    after = result.plan.layer_count
    rate = round(before / after, 2) if after else 1.0
    return f"layers {before} → {after}, fusion rate {rate}"


# --- commands ---------------------------------------------------------------------


def cmd_inspect(args) -> int:
    sys.stdout.write(summarize(resolve_model(args.model)))
    return EXIT_OK


def cmd_rewrite(args) -> int:
    g = resolve_model(args.model)
    config = _config(args)
    from .rewrite import load_rules, rewrite_fixpoint

    rewritten, rlog = rewrite_fixpoint(g, load_rules(config.rules_path))
    out = _outdir(args, g)
    (out / "rewritten.json").write_text(render_model(rewritten))
    for line in rlog.lines():
        print(line)
    print(f"FLOPs {rlog.flops_initial} → {rlog.flops_final}, {len(rlog.steps)} rewrites")
    print(f"wrote {out / 'rewritten.json'}")
    return EXIT_OK


def cmd_plan(args) -> int:
    result = _pipeline(args, resolve_model(args.model))
    path = _write_plan(args, result)
    print(_layers(result))
    for b in result.plan.blocks:
        print(f"{b.id} [{b.mapping_type.label}] {', '.join(b.members)}")
    if result.plan.unfused:
        print(f"unfused {', '.join(result.plan.unfused)}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_codegen(args) -> int:
    result = _pipeline(args, resolve_model(args.model))
    _write_plan(args, result)
    kdir = _write_kernels(args, result)
    print(_layers(result))
    print(f"wrote {len(result.kernels)} kernels to {kdir}")
    return EXIT_OK


def _run_and_report(args):
    g = resolve_model(args.model)
    config = _config(args)
    result = _pipeline(args, g)
    v = verify(g, config, result=result)
    _write_plan(args, result)
    _write_kernels(args, result)
    out = _outdir(args, g)
    (out / "report.txt").write_text(v.report.text())
    (out / "report.json").write_text(v.report.to_json() + "\n")
    sys.stdout.write(v.report.text())
    return v


def cmd_run(args) -> int:
    _run_and_report(args)
    return EXIT_OK


def cmd_verify(args) -> int:
    v = _run_and_report(args)
    if not v.ok:
        print(f"verify FAILED: max relative error {v.error:.3g} > {v.tolerance:g}")
        return EXIT_VERIFY
    print(f"verify OK: max relative error {v.error:.3g} <= {v.tolerance:g}")
    return EXIT_OK


def cmd_profile_db(args) -> int:
    if args.db is None:
        raise UsageError("profile-db needs --db PATH")
    db = ProfileDB(args.db)
    if args.action == "import":
        total = bad = 0
        for f in args.files:
            records, problems = read_records(f)
            for lineno, msg in problems:
                print(f"warning: {f}:{lineno}: {msg}", file=sys.stderr)
            total += db.import_records(records)
            bad += len(problems)
        db.save()
        print(f"imported {total} records, skipped {bad} malformed lines")
    elif args.action == "export":
        if len(args.files) != 1:
            raise UsageError("profile-db export needs exactly one output file")
        db.save(args.files[0])
        print(f"exported {len(db)} entries to {args.files[0]}")
    else:
        print(f"{len(db)} entries")
        for pair, n in db.stats().items():
            print(f"  {pair} {n}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--rules", type=Path, help="rewrite rule file (default: built-in rules)")
    common.add_argument("--table", type=Path, help="decision-table override file")
    common.add_argument("--db", type=Path, help="profile database file")
    common.add_argument("--dry-run", action="store_true", help="never measure; decide profile cells analytically")
    common.add_argument("--seed", type=int, default=0, help="seed for random inputs")
    common.add_argument("--no-rewrite", action="store_true", help="skip algebraic rewriting")
    common.add_argument("--max-block", type=int, default=40)
    common.add_argument("--max-live", type=int, default=24)
    common.add_argument("--dtype", choices=["f32", "f64"])
    common.add_argument("--out", default="out", help="artifact directory (default: out)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="opfusion", description="Mapping-type driven operator fusion for small DNN graphs.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, fn, help_text in [
        ("inspect", cmd_inspect, "summarize a model"),
        ("rewrite", cmd_rewrite, "apply algebraic rewrites"),
        ("plan", cmd_plan, "compute a fusion plan"),
        ("codegen", cmd_codegen, "emit fused kernels"),
        ("run", cmd_run, "execute reference and fused runs and report"),
        ("verify", cmd_verify, "check fused outputs against the reference"),
    ]:
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("model", help="model JSON path or bundled model name")
        p.set_defaults(fn=fn)
    p = sub.add_parser("profile-db", parents=[common], help="maintain the profile database")
    p.add_argument("action", choices=["import", "export", "stats"])
    p.add_argument("files", nargs="*")
    p.set_defaults(fn=cmd_profile_db)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"opfusion: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GraphError, json.JSONDecodeError) as exc:
        print(f"opfusion: parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except MissingDatabase as exc:
        print(f"opfusion: {exc}", file=sys.stderr)
        return EXIT_NO_DB
    except FileNotFoundError as exc:
        print(f"opfusion: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (RewriteError, CodegenError, ExecutionError, ValueError) as exc:
        print(f"opfusion: error: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, ValueError) else 1


if __name__ == "__main__":
    sys.exit(main())
