"""pagescope command line: run experiments, replay traces, inspect hosts.

Exit codes: 0 success, 2 workload failure, 3 capability failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import blockmesh, report, tlbsim
from .counterhub import default_events, parse_event_names
from .hugepagectl import HugePageMode, RealFs, ThpMode, parse_thp, write_thp
from .hugepagectl import THP_ENABLED_PATH
from .metrics import CpuSpec

EXIT_OK = 0
EXIT_WORKLOAD = 2
EXIT_CAPABILITY = 3

_PATTERN_TOKENS = {"zone": blockmesh.TraversalPattern.ZoneSweep,
                   "block": blockmesh.TraversalPattern.BlockSweep,
                   "var": blockmesh.TraversalPattern.VarSweep,
                   "sum2d": blockmesh.TraversalPattern.RepeatedSum2D}


def _parse_layout(text: str) -> blockmesh.UnkLayout:
    try:
        nvar, ni, nj, nk, blocks = (int(x) for x in text.split(","))
    except ValueError:
        raise SystemExit(f"--layout wants nvar,ni,nj,nk,blocks, got {text!r}")
    return blockmesh.UnkLayout.simple(nvar, ni, nj, nk, blocks)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pagescope")
    sub = p.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="run a with/without huge-pages experiment")
    run.add_argument("--config", help="experiment config JSON file")
    run.add_argument("--mode-a", default=None,
                     choices=[m.value for m in HugePageMode],
                     help="baseline huge-page mode (default off)")
    run.add_argument("--mode-b", default=None,
                     choices=[m.value for m in HugePageMode],
                     help="treatment huge-page mode (default thp)")
    run.add_argument("--simulate-counters", action="store_true",
                     help="use the deterministic simulated counter backend")
    run.add_argument("--events", default=None,
                     help="comma-separated platform event names")
    run.add_argument("--freq-hz", type=float, default=None)
    run.add_argument("--line-bytes", type=int, default=None)
    run.add_argument("--workload", default=None,
                     choices=["block-sweep", "zone-sweep", "sum2d"],
                     help="built-in workload; or pass an external command "
                          "after --")
    run.add_argument("--layout", default=None,
                     help="nvar,ni,nj,nk,blocks (default 5,16,16,16,16)")
    run.add_argument("--n", type=int, default=None,
                     help="square side for the sum2d workload")
    run.add_argument("--passes", type=int, default=None)
    run.add_argument("--alloc", choices=["eager", "demand"], default=None)
    run.add_argument("--repetitions", type=int, default=None)
    run.add_argument("--label", default=None)
    run.add_argument("--out", default=None, help="results directory")
    run.add_argument("command", nargs=argparse.REMAINDER,
                     help="external workload argv (after --)")

    tlb = sub.add_parser("tlbsim", help="replay a trace at several page sizes")
    tlb.add_argument("--trace", required=True, help="binary trace file")
    tlb.add_argument("--sizes", default="4K,2M",
                     help="comma-separated page sizes, e.g. 4K,2M,512M")
    tlb.add_argument("--entries", type=int, default=tlbsim.DEFAULT_ENTRIES)
    tlb.add_argument("--assoc", type=int, default=None,
                     help="ways per set (default fully associative)")
    tlb.add_argument("--out", default=None, help="write CSV here instead of stdout")

    tr = sub.add_parser("trace", help="generate a workload address trace")
    tr.add_argument("--layout", default="5,16,16,16,16")
    tr.add_argument("--pattern", default="block", choices=sorted(_PATTERN_TOKENS))
    tr.add_argument("--passes", type=int, default=1)
    tr.add_argument("--out", required=True)

    sub.add_parser("doctor", help="report host capabilities (read-only)")

    ren = sub.add_parser("render", help="render a saved report")
    ren.add_argument("--report", required=True, action="append",
                     help="report JSON (repeat for multi-case charts)")
    ren.add_argument("--format", default="table",
                     choices=["table", "csv", "svg"])
    ren.add_argument("--region", default=None)
    ren.add_argument("--out", default=None)

    thp = sub.add_parser("thp", help="show or set the THP mode")
    thp.add_argument("--set", dest="set_mode", default=None,
                     choices=[m.value for m in ThpMode])
    thp.add_argument("--allow-system-writes", action="store_true",
                     help="required opt-in for sysfs writes")
    return p


def _build_run_config(args) -> report.ExperimentConfig:
    cfg_dict = {}
    if args.config:
        cfg_dict = json.loads(Path(args.config).read_text())

    command = [c for c in args.command if c != "--"]
    if command:
        workload = report.WorkloadSpec(kind=report.EXTERNAL, argv=tuple(command))
    elif args.workload or "workload" not in cfg_dict:
        kind = args.workload or "zone-sweep"
        if kind == "sum2d" and args.n:
            layout = blockmesh.UnkLayout.simple(1, args.n, args.n, 1, 1)
        else:
            layout = _parse_layout(args.layout or "5,16,16,16,16")
        workload = report.WorkloadSpec(kind=kind, layout=layout,
                                       passes=args.passes or 1,
                                       alloc=args.alloc or "eager")
    else:
        workload = report.WorkloadSpec.from_dict(cfg_dict["workload"])

    if cfg_dict:
        cfg_dict.setdefault("workload", workload.to_dict())
        config = report.ExperimentConfig.from_dict(cfg_dict)
    else:
        config = report.ExperimentConfig(workload=workload)
    # Flags override the config file where given.
    cpu = config.cpu
    if args.freq_hz or args.line_bytes:
        cpu = CpuSpec(freq_hz=args.freq_hz or cpu.freq_hz,
                      cache_line_bytes=args.line_bytes or cpu.cache_line_bytes)
    events = config.events
    if args.events:
        events = parse_event_names(args.events)
    elif not args.config:
        events = default_events()
    from dataclasses import replace
    config = replace(
        config,
        workload=workload if (command or args.workload or not args.config)
        else config.workload,
        baseline=HugePageMode(args.mode_a) if args.mode_a else config.baseline,
        treatment=HugePageMode(args.mode_b) if args.mode_b else config.treatment,
        events=events,
        cpu=cpu,
        repetitions=args.repetitions or config.repetitions,
        backend="simulated" if args.simulate_counters else config.backend,
        label=args.label or config.label,
    )
    return config


def _cmd_run(args) -> int:
    try:
        config = _build_run_config(args)
    except (ValueError, KeyError) as exc:
        print(f"bad configuration: {exc}", file=sys.stderr)
        return EXIT_CAPABILITY
    try:
        rep = report.run_experiment(config, out_dir=args.out)
    except report.WorkloadFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.partial is not None:
            print(report.render_table(exc.partial), end="")
        return EXIT_WORKLOAD
    except report.CounterUnavailable as exc:
        print(f"error: {exc}", file=sys.stderr)
        print("hint: pass --simulate-counters for a hardware-free run",
              file=sys.stderr)
        return EXIT_CAPABILITY
    print(report.render_table(rep), end="")
    for warning in rep.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    if args.out:
        print(f"report written under {args.out}", file=sys.stderr)
    return EXIT_OK


def _cmd_tlbsim(args) -> int:
    trace = blockmesh.load_trace(args.trace)
    sizes = sorted(tlbsim.parse_size(tok) for tok in args.sizes.split(","))
    config = tlbsim.TlbConfig(entries=args.entries, associativity=args.assoc,
                              page_size_bytes=sizes[0])
    rows = tlbsim.page_size_sweep(trace, config, sizes)
    csv = tlbsim.sweep_csv(rows)
    if args.out:
        Path(args.out).write_text(csv)
    else:
        print(csv, end="")
    return EXIT_OK


def _cmd_trace(args) -> int:
    layout = _parse_layout(args.layout)
    trace = blockmesh.gen_trace(layout, _PATTERN_TOKENS[args.pattern],
                                passes=args.passes)
    blockmesh.save_trace(trace, args.out)
    print(f"{trace.accesses} accesses -> {args.out} "
          f"(+ sidecar {blockmesh.sidecar_path(args.out).name})")
    return EXIT_OK


def _cmd_doctor(_args) -> int:
    print(report.doctor().render(), end="")
    return EXIT_OK


def _cmd_render(args) -> int:
    reports = [report.load_report(p) for p in args.report]
    if args.format == "table":
        text = "\n".join(report.render_table(r) for r in reports)
    elif args.format == "csv":
        text = "".join(report.render_csv(r) for r in reports)
    else:
        svg, csv = report.render_ratio_chart(reports, region=args.region)
        if args.out:
            Path(args.out).write_text(svg)
            Path(str(args.out) + ".csv").write_text(csv)
            print(f"chart -> {args.out}, data -> {args.out}.csv")
            return EXIT_OK
        text = svg
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    return EXIT_OK


def _cmd_thp(args) -> int:
    fs = RealFs()
    if args.set_mode:
        try:
            write_thp(fs, ThpMode(args.set_mode),
                      allow_system_writes=args.allow_system_writes)
        except Exception as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CAPABILITY
    try:
        print(parse_thp(fs.read_text(THP_ENABLED_PATH)).value)
    except (OSError, ValueError) as exc:
        print(f"error: THP state unavailable: {exc}", file=sys.stderr)
        return EXIT_CAPABILITY
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handler = {
        "run": _cmd_run,
        "tlbsim": _cmd_tlbsim,
        "trace": _cmd_trace,
        "doctor": _cmd_doctor,
        "render": _cmd_render,
        "thp": _cmd_thp,
    }[args.cmd]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
