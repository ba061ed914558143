"""Command line interface: run, menu, arena-search, report, stats."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import load_model_config, scan_config_dir
from .device_sim import Deployer, load_profiles
from .errors import SelectionError, TinymarkError
from .graph import build_graph, model_stats
from .orchestrator import (
    ModelContext,
    PipelineSelection,
    STAGES,
    default_output_dir,
    default_selection,
    format_trial_log,
    interactive_menu,
    run_pipeline,
    search_arena,
    suite_dir,
)
from .optimize import VariantDescriptor
from .reporting import emit_report, records_from_json

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


def _csv_list(text: str) -> tuple[str, ...]:
    return tuple(t for t in (s.strip() for s in text.split(",")) if t)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config-dir", default=None, help="directory of model configs (default: shipped suite)")
    p.add_argument("--out", default=None, help="output directory (default: $EDGEMARK_OUT or ./tinymark-out)")
    p.add_argument("--profiles", default=None, help="device/backend profile file (default: shipped profiles)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tinymark", description="Benchmark model variants on simulated microcontrollers.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the benchmark matrix")
    _add_common(run)
    run.add_argument("--stages", type=_csv_list, default=None, help=f"comma list from {','.join(STAGES)}")
    run.add_argument("--variants", type=_csv_list, default=None, help="comma list of variant names")
    run.add_argument("--backends", type=_csv_list, default=None)
    run.add_argument("--devices", type=_csv_list, default=None)
    run.add_argument("--jobs", type=int, default=1, help="worker threads (one model per worker)")
    run.add_argument("--no-resume", action="store_true", help="ignore cached job results")
    mode = run.add_mutually_exclusive_group()
    mode.add_argument("--all", action="store_true", help="every stage, variant, backend and device")
    mode.add_argument("--yes", action="store_true", help="accept the selection without prompting")

    menu = sub.add_parser("menu", help="choose stages and targets interactively, then run")
    _add_common(menu)
    menu.add_argument("--jobs", type=int, default=1)
    menu.add_argument("--yes", action="store_true", help="skip the menu and run the default selection")

    arena = sub.add_parser("arena-search", help="find the minimum arena for one deployment")
    arena.add_argument("--model", required=True, help="config file, or model name in --config-dir")
    arena.add_argument("--config-dir", default=None)
    arena.add_argument("--variant", default="basic")
    arena.add_argument("--backend", default="interpreter-rt")
    arena.add_argument("--device", default="cm4f-sim")
    arena.add_argument("--resolution", type=int, choices=(512, 1024, 2048), default=None)
    arena.add_argument("--profiles", default=None)

    report = sub.add_parser("report", help="re-emit a saved report.json in another format")
    report.add_argument("source", nargs="?", default=None, help="report.json (default: <out>/reports/report.json)")
    report.add_argument("--out", default=None)
    report.add_argument("--format", choices=("json", "csv", "markdown"), default="markdown")

    stats = sub.add_parser("stats", help="parameter and MAC counts of each config")
    stats.add_argument("--config-dir", default=None)
    return parser


def _selection_from_args(args: argparse.Namespace) -> PipelineSelection:
    sel = default_selection(args.config_dir, args.out, args.profiles)
    changes = {"workers": args.jobs}
    if not getattr(args, "all", False):
        for attr in ("stages", "variants", "backends", "devices"):
            value = getattr(args, attr, None)
            if value is not None:
                changes[attr] = value
    return PipelineSelection(**{**sel.__dict__, **changes})


def _finish(summary, out) -> int:
    done = sum(1 for j in summary.jobs if j.status == "done")
    skipped = sum(1 for j in summary.jobs if j.status == "skipped")
    out.write(
        f"{len(summary.jobs)} jobs: {done} ok, {len(summary.failed)} failed, {skipped} skipped, "
        f"{summary.cache_hits} from cache\n"
    )
    for name, message in summary.diagnostics:
        out.write(f"config {name}: {message}\n")
    for fmt, path in summary.report_paths.items():
        out.write(f"{fmt}: {path}\n")
    return EXIT_FAILED if summary.exit_code else EXIT_OK


def cmd_run(args, out) -> int:
    selection = _selection_from_args(args)
    return _finish(run_pipeline(selection, resume=not args.no_resume), out)


def cmd_menu(args, out, stdin) -> int:
    defaults = PipelineSelection(**{**default_selection(args.config_dir, args.out, args.profiles).__dict__, "workers": args.jobs})
    selection = interactive_menu(defaults, stdin, out, yes=args.yes)
    if selection is None:
        return EXIT_OK
    return _finish(run_pipeline(selection), out)


def _find_model(model: str, config_dir: str | None):
    path = Path(model)
    if path.is_file():
        return path.stem, load_model_config(path)
    scan = scan_config_dir(config_dir or suite_dir())
    for name, spec in scan.models:
        if name == model:
            return name, spec
    raise SelectionError(f"no model named {model!r}")


def cmd_arena(args, out) -> int:
    devices, backends = load_profiles(args.profiles)
    if args.backend not in backends or args.device not in devices:
        raise SelectionError(f"unknown backend or device: {args.backend}, {args.device}")
    try:
        variant = VariantDescriptor.parse(args.variant)
    except ValueError as exc:
        raise SelectionError(str(exc)) from exc
    name, spec = _find_model(args.model, args.config_dir)
    ctx = ModelContext.create(name, spec)
    deployer = Deployer(ctx.variant(variant.name), variant, backends[args.backend], devices[args.device])
    if not deployer.capability.ok:
        out.write(f"unsupported: {deployer.capability.reason} ({deployer.capability.detail})\n")
        return EXIT_FAILED
    result = search_arena(deployer, args.resolution)
    out.write(f"estimate={result.estimate} resolution={result.resolution}\n")
    out.write(format_trial_log(result.log))
    if result.minimum is None:
        out.write(f"infeasible: {result.failure.value} ({result.reason})\n")
        return EXIT_FAILED
    out.write(f"minimum arena: {result.minimum} bytes\n")
    return EXIT_OK


def cmd_report(args, out) -> int:
    source = Path(args.source) if args.source else Path(args.out or default_output_dir()) / "reports" / "report.json"
    records = records_from_json(source.read_text(encoding="utf-8"))
    out.write(emit_report(records, args.format))
    return EXIT_OK


def cmd_stats(args, out) -> int:
    scan = scan_config_dir(args.config_dir or suite_dir())
    out.write(f"{'model':20s} {'params':>10s} {'macs':>12s}\n")
    for name, spec in scan.models:
        s = model_stats(build_graph(spec, name))
        out.write(f"{name:20s} {s.param_count:10d} {s.mac_count:12d}\n")
    for name, message in scan.diagnostics:
        out.write(f"config {name}: {message}\n")
    return EXIT_FAILED if scan.diagnostics else EXIT_OK


def main(argv: list[str] | None = None, stdin=None, stdout=None) -> int:
    stdin = stdin or sys.stdin
    out = stdout or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "run":
            return cmd_run(args, out)
        if args.command == "menu":
            return cmd_menu(args, out, stdin)
        if args.command == "arena-search":
            return cmd_arena(args, out)
        if args.command == "report":
            return cmd_report(args, out)
        return cmd_stats(args, out)
    except SelectionError as exc:
        sys.stderr.write(f"tinymark: {exc}\n")
        return EXIT_USAGE
    except (TinymarkError, OSError) as exc:
        sys.stderr.write(f"tinymark: {exc}\n")
        return EXIT_FAILED
