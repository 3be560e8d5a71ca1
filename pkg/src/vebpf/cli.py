"""Command-line front end: ``vebpf {asm,disasm,run,compare,trace}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import isa
from .experiment import (CSV_COLUMNS, ConfigError, RunConfig, VerdictMismatch, csv_rows,
                         load_config, run_experiment)
from .manycore import EngineError
from .pktio import MIXES, PktioError, TrafficSpec
from .rules import BaselineConfig, emit_ruleset, normalize_types

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _traffic(text: str) -> tuple[str, int | None, tuple[int, ...] | None]:
    """``MIX[:COUNT[:SIZE,SIZE...]]``"""
    parts = text.split(":")
    if parts[0] not in MIXES or len(parts) > 3:
        raise argparse.ArgumentTypeError(
            f"traffic must be MIX[:COUNT[:SIZES]] with MIX in {', '.join(MIXES)}")
    try:
        count = int(parts[1]) if len(parts) > 1 and parts[1] else None
        sizes = tuple(_int_list(parts[2])) if len(parts) > 2 else None
    except (ValueError, argparse.ArgumentTypeError):
        raise argparse.ArgumentTypeError(f"bad traffic spec {text!r}")
    return parts[0], count, sizes


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vebpf", description="Many-core eBPF packet filter simulator")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("asm", help="assemble a listing (or a built-in ruleset) to bytecode")
    a.add_argument("source", nargs="?", help="assembly listing (.s)")
    a.add_argument("--rules", help="emit the built-in ruleset for these types, e.g. 4 or 1,2")
    a.add_argument("--out", "-o", help="output stem; writes <stem>.bin and <stem>.idx")

    d = sub.add_parser("disasm", help="disassemble bytecode back to a listing")
    d.add_argument("source", help="flat little-endian bytecode (.bin)")
    d.add_argument("--index", help="rule index sidecar (default: <source>.idx if present)")
    d.add_argument("--out", "-o", help="write the listing here instead of stdout")

    for name, help_text in (("run", "simulate traffic through the engine"),
                            ("compare", "simulate and compare against the sequential baseline"),
                            ("trace", "dump the JSON-lines event trace of a run")):
        r = sub.add_parser(name, help=help_text)
        r.add_argument("--config", help="YAML run configuration")
        r.add_argument("--seed", type=int)
        r.add_argument("--cores", type=_int_list, help="core count, or a comma list to sweep")
        r.add_argument("--rules", help="built-in types (e.g. 4, 1,3) or a .s/.bin file")
        src = r.add_mutually_exclusive_group()
        src.add_argument("--pcap", help="read packets from a pcap file")
        src.add_argument("--traffic", type=_traffic, help="synthetic MIX[:COUNT[:SIZES]]")
        r.add_argument("--rate", type=float, help="offered load in bit/s for synthetic traffic")
        r.add_argument("--clock", type=float, help="engine clock in Hz")
        r.add_argument("--slice", type=int, help="fixed header length (default: parse headers)")
        r.add_argument("--workers", type=int, help="threads for sweep points")
        r.add_argument("--out", "-o", help="report (or trace) output path")
        if name != "trace":
            r.add_argument("--format", choices=("json", "csv"), default="json")
            r.add_argument("--trace-out", help="also write the event trace (JSON lines)")
        if name == "compare":
            r.add_argument("--cost-factor", type=int)
            r.add_argument("--overhead", type=int)
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    engine = cfg.engine
    if args.clock is not None:
        engine = replace(engine, clock_hz=args.clock)
    if args.cores:
        engine = replace(engine, n_cores=args.cores[0])
        cfg = replace(cfg, sweep=args.cores if len(args.cores) > 1 else None)
    cfg = replace(cfg, engine=engine)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.rules is not None:
        cfg = replace(cfg, rules=args.rules)
    if args.slice is not None:
        cfg = replace(cfg, slice_length=args.slice)
    if args.workers is not None:
        cfg = replace(cfg, workers=args.workers)
    if args.pcap is not None:
        cfg = replace(cfg, pcap=args.pcap, traffic=None)
    traffic = cfg.traffic
    if args.traffic is not None:
        mix, count, sizes = args.traffic
        traffic = replace(traffic or TrafficSpec(), mix=mix)
        if count is not None:
            traffic = replace(traffic, count=count)
        if sizes is not None:
            traffic = replace(traffic, sizes=sizes)
        cfg = replace(cfg, pcap=None)
    if traffic is not None:
        if args.rate is not None:
            traffic = replace(traffic, rate_bps=args.rate)
        traffic = replace(traffic, clock_hz=cfg.engine.clock_hz)
    cfg = replace(cfg, traffic=traffic)
    if getattr(args, "cost_factor", None) is not None or getattr(args, "overhead", None) is not None:
        base = cfg.baseline or BaselineConfig()
        if args.cost_factor is not None:
            base = replace(base, cost_factor=args.cost_factor)
        if args.overhead is not None:
            base = replace(base, per_packet_overhead=args.overhead)
        cfg = replace(cfg, baseline=base)
    cfg.validate()
    return cfg


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    writer.writerows(csv_rows(report))
    return buf.getvalue()


def summary_table(report: dict) -> str:
    head = (f"{'cores':>5} {'pkts':>6} {'drops':>5} {'mean':>8} {'median':>7} {'p99':>6} "
            f"{'offered Mb/s':>12} {'achieved Mb/s':>13} {'line':>5}  verdicts")
    lines = [head]
    for pt in report["points"]:
        ag = pt["aggregates"]
        lat = ag["latency_cycles"]
        fmt = (lambda v: "-" if v is None else f"{v:.1f}")
        verdicts = " ".join(f"{k}={v}" for k, v in ag["verdicts"].items())
        lines.append(
            f"{pt['n_cores']:>5} {ag['packets']:>6} {ag['ingress_drops']:>5} "
            f"{fmt(lat['mean']):>8} {fmt(lat['median']):>7} {fmt(lat['p99']):>6} "
            f"{ag['offered_bps'] / 1e6:>12.3f} {ag['achieved_bps'] / 1e6:>13.3f} "
            f"{'yes' if ag['line_rate'] else 'no':>5}  {verdicts}")
        if "mean_speedup" in ag:
            lines.append(f"{'':>5} baseline mean ticks {ag['baseline_ticks']['mean']:.1f}, "
                         f"mean speedup {ag['mean_speedup']:.2f}x")
    return "\n".join(lines)


def _write(path: str | None, text: str) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_asm(args) -> int:
    if bool(args.source) == bool(args.rules):
        raise UsageError("give either a listing path or --rules")
    if args.rules:
        try:
            types = normalize_types(int(t) for t in args.rules.split(","))
        except ValueError as exc:
            raise UsageError(str(exc))
        stem = args.out or f"ruleset_type{''.join(map(str, types))}"
        paths = emit_ruleset(types, stem)
        print(" ".join(str(p) for p in paths))
        return EXIT_OK
    src = Path(args.source)
    image = isa.assemble(src.read_text())
    stem = Path(args.out) if args.out else src.with_suffix("")
    isa.write_bytecode(stem.with_suffix(".bin"), image)
    isa.write_rule_index(stem.with_suffix(".idx"), image)
    print(f"{stem.with_suffix('.bin')} {stem.with_suffix('.idx')}: "
          f"{len(image.rules)} rules, {len(image.words)} words")
    return EXIT_OK


def cmd_disasm(args) -> int:
    src = Path(args.source)
    index = args.index
    if index is None and src.with_suffix(".idx").exists():
        index = src.with_suffix(".idx")
    image = isa.load_bytecode(src, index)
    _write(args.out, isa.disassemble(image))
    return EXIT_OK


def _emit_traces(path: str | None, traces) -> None:
    _write(path, "".join(t.to_jsonl() for t in traces))


def cmd_run(args, compare: bool = False) -> int:
    cfg = resolve_config(args)
    traces: list | None = [] if args.trace_out else None
    report = run_experiment(cfg, compare=compare, traces=traces)
    text = report_json(report) if args.format == "json" else report_csv(report)
    if args.out:
        Path(args.out).write_text(text)
    print(summary_table(report))
    if traces is not None:
        _emit_traces(args.trace_out, traces)
    return EXIT_OK


def cmd_compare(args) -> int:
    return cmd_run(args, compare=True)


def cmd_trace(args) -> int:
    cfg = resolve_config(args)
    traces: list = []
    run_experiment(cfg, traces=traces)
    _emit_traces(args.out, traces)
    return EXIT_OK


COMMANDS = {"asm": cmd_asm, "disasm": cmd_disasm, "run": cmd_run, "compare": cmd_compare,
            "trace": cmd_trace}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except VerdictMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except isa.ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ConfigError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EngineError, PktioError, isa.IsaError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
