"""Experiment harness: packet streams through packet memory and the engine.

Timing model for a stream: a packet is DMA'd into packet memory at its
arrival tick (end of frame) and becomes visible to the slicer
``ceil(len/8)`` cycles later.  The engine handles one header at a time; a
header waits in the descriptor FIFO while the engine is busy.  The buffer is
freed when the verdict registers.  Ingress drops happen when the memory or
the descriptor FIFO is full at arrival time.

Throughput: ``achieved = delivered bits / max(offered window, service
span)`` where the offered window is the last arrival tick and the service
span runs from the first header becoming available to the last verdict.
When the engine keeps up, the service span never exceeds the offered window
and achieved equals offered exactly.
"""
from __future__ import annotations

import math
import statistics
from collections import Counter, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import yaml

from .isa import ProgramImage, assemble, load_bytecode
from .manycore import Engine, EngineConfig, PacketResult
from .pktio import (DescriptorFifoFull, OutOfPacketMemory, Packet, PacketMemory, TrafficSpec,
                    gen_synthetic, read_descriptor_with_result, read_pcap, slice_header)
from .rules import BaselineConfig, baseline_run, build_ruleset

CONFIG_VERSION = 1

# frozen column order of the per-packet CSV
CSV_COLUMNS = (
    "n_cores", "pkt_id", "size", "header_length", "verdict", "rules_executed",
    "arrival_tick", "header_cycle", "verdict_cycle", "queue_cycles", "dma_cycles",
    "latency_cycles", "latency_us", "baseline_verdict", "baseline_ticks", "speedup",
)


class ConfigError(ValueError):
    pass


class VerdictMismatch(RuntimeError):
    def __init__(self, rows: list[dict]):
        self.rows = rows
        lines = [f"pkt {r['pkt_id']} (n_cores={r['n_cores']}): engine {r['verdict']} "
                 f"vs baseline {r['baseline_verdict']}" for r in rows[:20]]
        more = f"\n... and {len(rows) - 20} more" if len(rows) > 20 else ""
        super().__init__("verdict mismatch between engine and baseline:\n"
                         + "\n".join(lines) + more)


@dataclass
class RunConfig:
    engine: EngineConfig = field(default_factory=EngineConfig)
    rules: str = "4"
    traffic: TrafficSpec | None = field(default_factory=TrafficSpec)
    pcap: str | None = None
    seed: int = 0
    sweep: list[int] | None = None
    slice_length: int | None = None  # None = parse headers
    mem_capacity: int = 65536
    fifo_depth: int = 256
    baseline: BaselineConfig | None = None
    workers: int = 1
    config_version: int = CONFIG_VERSION

    def validate(self) -> None:
        if self.config_version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config_version {self.config_version}")
        if (self.traffic is None) == (self.pcap is None):
            raise ConfigError("exactly one traffic source (synthetic traffic or pcap) is required")
        if self.sweep is not None and (not self.sweep or any(n < 1 for n in self.sweep)):
            raise ConfigError("sweep values must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.traffic is not None:
            try:
                self.traffic.validate()
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc

    @property
    def core_counts(self) -> list[int]:
        return list(self.sweep) if self.sweep else [self.engine.n_cores]

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.traffic is not None:
            d["traffic"]["sizes"] = list(self.traffic.sizes)
        return d


_SECTIONS = {"engine": EngineConfig, "traffic": TrafficSpec, "baseline": BaselineConfig}


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    raw = dict(raw)
    if "config_version" not in raw:
        raise ConfigError("config_version is required")
    known = set(RunConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS and value is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"{key} must be a mapping")
            cls = _SECTIONS[key]
            bad = set(value) - set(cls.__dataclass_fields__)
            if bad:
                raise ConfigError(f"unknown {key} keys: {sorted(bad)}")
            if key == "traffic" and "sizes" in value:
                value = {**value, "sizes": tuple(value["sizes"])}
            try:
                kwargs[key] = cls(**value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad {key} section: {exc}") from exc
        else:
            kwargs[key] = value
    if kwargs.get("pcap") is not None and "traffic" not in raw:
        kwargs["traffic"] = None
    if kwargs.get("rules") is not None:
        kwargs["rules"] = str(kwargs["rules"])
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(raw)


def load_rules(source: str) -> ProgramImage:
    """Built-in type list such as ``4`` or ``1,3``, or a .s / .bin file."""
    src = str(source).strip()
    if all(part.strip().isdigit() for part in src.split(",")):
        try:
            return build_ruleset([int(p) for p in src.split(",")])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    path = Path(src)
    if not path.exists():
        raise ConfigError(f"rules file not found: {src}")
    if path.suffix == ".bin":
        idx = path.with_suffix(".idx")
        return load_bytecode(path, idx if idx.exists() else None)
    return assemble(path.read_text())


def make_packets(cfg: RunConfig) -> list[Packet]:
    if cfg.pcap is not None:
        return list(read_pcap(cfg.pcap, clock_hz=cfg.engine.clock_hz))
    return list(gen_synthetic(cfg.traffic, cfg.seed))


@dataclass
class StreamResult:
    rows: list[dict]
    ingress_drops: list[dict]
    offered_bits: int
    offered_window: int
    unknown_r0: int
    engine: Engine


def simulate_stream(engine: Engine, packets: Sequence[Packet], *,
                    slice_length: int | None = None, mem_capacity: int = 65536,
                    fifo_depth: int = 256, baseline: BaselineConfig | None = None,
                    rules: ProgramImage | None = None) -> StreamResult:
    """Push ``packets`` (in arrival order) through memory and the engine."""
    mem = PacketMemory(mem_capacity, fifo_depth=fifo_depth)
    engine.csr.mem_base, engine.csr.mem_size = mem.base, mem.capacity
    clock = engine.config.clock_hz
    queue: deque[Packet] = deque()
    rows: list[dict] = []
    drops: list[dict] = []
    it = iter(packets)
    nxt = next(it, None)

    def admit(pkt: Packet) -> None:
        try:
            mem.dma_write(pkt)
            queue.append(pkt)
        except (OutOfPacketMemory, DescriptorFifoFull) as exc:
            reason = "no_memory" if isinstance(exc, OutOfPacketMemory) else "fifo_full"
            drops.append({"pkt_id": pkt.id, "size": len(pkt), "arrival_tick": pkt.arrival_tick,
                          "reason": reason})

    while nxt is not None or queue:
        if not queue:
            admit(nxt)
            nxt = next(it, None)
            continue
        pkt = queue[0]
        desc = mem.descriptors[0]
        start = max(engine.cycle, desc.resident_tick)
        stored = Packet(mem.read_packet(desc), desc.arrival_tick, desc.pkt_id)
        header = slice_header(stored, slice_length, cap=engine.config.data_depth)
        res = engine.process_packet(header, start_cycle=start, descriptor=desc)
        # arrivals while this header was being filtered see its buffer still live
        while nxt is not None and nxt.arrival_tick < res.verdict_cycle:
            admit(nxt)
            nxt = next(it, None)
        got = read_descriptor_with_result(engine.csr, mem)
        assert got is not None and got[0] is desc
        mem.free_descriptor()
        queue.popleft()
        rows.append(_row(engine.config.n_cores, pkt, desc.resident_tick, res, clock))

    if baseline is not None:
        for row, hdr in zip(rows, _headers_for(rows, packets, slice_length,
                                                engine.config.data_depth)):
            verdict, ticks = baseline_run(rules, hdr, baseline)
            row["baseline_verdict"] = str(verdict)
            row["baseline_ticks"] = ticks
            row["speedup"] = round(ticks / row["latency_cycles"], 6)

    offered_bits = sum(8 * len(p) for p in packets)
    window = max((p.arrival_tick for p in packets), default=0)
    return StreamResult(rows, drops, offered_bits, window, engine.unknown_r0_count, engine)


def _headers_for(rows, packets, slice_length, cap):
    by_id = {p.id: p for p in packets}
    return [slice_header(by_id[r["pkt_id"]], slice_length, cap=cap) for r in rows]


def _row(n_cores: int, pkt: Packet, resident: int, res: PacketResult, clock: float) -> dict:
    return {
        "n_cores": n_cores,
        "pkt_id": pkt.id,
        "size": len(pkt),
        "header_length": res.header_length,
        "verdict": str(res.verdict),
        "rules_executed": res.rules_executed,
        "arrival_tick": pkt.arrival_tick,
        "header_cycle": res.header_cycle,
        "verdict_cycle": res.verdict_cycle,
        "queue_cycles": res.header_cycle - resident,
        "dma_cycles": resident - pkt.arrival_tick,
        "latency_cycles": res.latency_cycles,
        "latency_us": round(res.latency_cycles / clock * 1e6, 6),
        "baseline_verdict": None,
        "baseline_ticks": None,
        "speedup": None,
    }


def p99(values: Sequence[float]) -> float:
    """Nearest-rank 99th percentile."""
    ordered = sorted(values)
    return ordered[max(0, math.ceil(0.99 * len(ordered)) - 1)]


def _latency_stats(values: list[int]) -> dict:
    if not values:
        return {"count": 0, "mean": None, "median": None, "p99": None, "max": None}
    return {"count": len(values), "mean": statistics.fmean(values),
            "median": statistics.median(values), "p99": p99(values), "max": max(values)}


def aggregate(rows: list[dict], drops: list[dict], offered_bits: int, offered_window: int,
              clock_hz: float) -> dict:
    """Summary numbers; everything here is recomputable from the rows."""
    by_size: dict[int, list[int]] = {}
    for r in rows:
        by_size.setdefault(r["size"], []).append(r["latency_cycles"])
    delivered_bits = sum(8 * r["size"] for r in rows)
    if rows:
        span = max(r["verdict_cycle"] for r in rows) + 1 - min(r["header_cycle"] for r in rows)
    else:
        span = 0
    denom = max(offered_window, span, 1)
    offered_bps = offered_bits * clock_hz / max(offered_window, 1)
    achieved_bps = delivered_bits * clock_hz / denom
    out = {
        "packets": len(rows) + len(drops),
        "processed": len(rows),
        "ingress_drops": len(drops),
        "verdicts": dict(sorted(Counter(r["verdict"] for r in rows).items())),
        "latency_cycles": _latency_stats([r["latency_cycles"] for r in rows]),
        "latency_by_size": {str(s): _latency_stats(v) for s, v in sorted(by_size.items())},
        "max_queue_cycles": max((r["queue_cycles"] for r in rows), default=0),
        "offered_bps": offered_bps,
        "achieved_bps": achieved_bps,
        "service_span_cycles": span,
        "offered_window_cycles": offered_window,
    }
    out["line_rate"] = bool(rows) and not drops and achieved_bps == offered_bps
    base = [r for r in rows if r["baseline_ticks"] is not None]
    if base:
        out["baseline_ticks"] = _latency_stats([r["baseline_ticks"] for r in base])
        out["mean_speedup"] = statistics.fmean(r["speedup"] for r in base)
    return out


def run_point(cfg: RunConfig, n_cores: int, image: ProgramImage, packets: Sequence[Packet],
              compare: bool = False, trace: bool = False):
    """Simulate one core count; returns (report point, event trace)."""
    engine = Engine(replace(cfg.engine, n_cores=n_cores), trace=trace)
    engine.upload_rules(image)
    baseline = (cfg.baseline or BaselineConfig()) if compare else None
    res = simulate_stream(engine, packets, slice_length=cfg.slice_length,
                          mem_capacity=cfg.mem_capacity, fifo_depth=cfg.fifo_depth,
                          baseline=baseline, rules=image)
    point = {
        "n_cores": n_cores,
        "aggregates": aggregate(res.rows, res.ingress_drops, res.offered_bits,
                                res.offered_window, cfg.engine.clock_hz),
        "unknown_r0": res.unknown_r0,
        "packets": res.rows,
        "ingress_drops": res.ingress_drops,
    }
    return point, engine.trace


def run_experiment(cfg: RunConfig, compare: bool = False, traces: list | None = None) -> dict:
    """Run every sweep point; returns the report as a plain dict.

    Pass a list as ``traces`` to record and collect one event trace per point.
    """
    trace = traces is not None
    cfg.validate()
    image = load_rules(cfg.rules)
    packets = make_packets(cfg)
    counts = cfg.core_counts
    if cfg.workers > 1 and len(counts) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(lambda n: run_point(cfg, n, image, packets, compare, trace),
                                    counts))
    else:
        results = [run_point(cfg, n, image, packets, compare, trace) for n in counts]
    points = [p for p, _ in results]
    if trace:
        traces.extend(t for _, t in results)
    if compare:
        bad = [r for p in points for r in p["packets"] if r["verdict"] != r["baseline_verdict"]]
        if bad:
            raise VerdictMismatch(bad)
    report = {
        "config": cfg.to_dict(),
        "rules": {"count": len(image.rules), "words": len(image.words),
                  "names": [r.name for r in image.rules]},
        "points": points,
    }
    return report


def csv_rows(report: dict) -> Iterable[list]:
    for point in report["points"]:
        for row in point["packets"]:
            yield [row[c] for c in CSV_COLUMNS]
