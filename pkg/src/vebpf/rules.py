"""Firewall rule generation and the sequential baseline processor model.

Every blocked value becomes its own eBPF rule.  Rules follow the engine ABI:
R1 points at the header in data memory, R2 holds its length, and R0 is set
to 0 (drop) on a match or 2 (don't care) otherwise.  Non-IPv4 frames and
headers too short to hold the inspected field are always don't-care.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .isa import ProgramImage, assemble, write_bytecode, write_rule_index
from .manycore import DEFAULT_PASS, R0_DONT_CARE, R0_DROP, R0_STORE, Verdict, error_verdict
from .manycore import DROP, STORE
from .pktio import (TYPE1_PREFIXES, TYPE1_SRC_IPS, TYPE2_UDP_PORTS, TYPE3_UDP_PORTS,
                    HeaderSlice, ip_to_int)
from .vcore import DEFAULT_TICK_BUDGET, CallHandlerRegistry, Core, CoreStatus

SRC_IP, UDP_DPORT = "src_ip", "udp_dport"

# no-op padding that lifts the short source-address rules to the benign UDP
# path length of the port rules (see build_ruleset(equalize=True))
_EQUALIZE_PAD = 11


@dataclass(frozen=True)
class FirewallRuleSpec:
    kind: str
    value: str | int
    name: str

    def __post_init__(self):
        if self.kind == SRC_IP:
            ip_to_int(str(self.value))
        elif self.kind == UDP_DPORT:
            if not isinstance(self.value, int) or not 0 <= self.value <= 0xFFFF:
                raise ValueError(f"port out of range: {self.value!r}")
        else:
            raise ValueError(f"unknown rule kind {self.kind!r}")

    @property
    def prefix_len(self) -> int:
        return TYPE1_PREFIXES[self.value] if self.kind == SRC_IP else 0


def _specs_for_type(t: int) -> list[FirewallRuleSpec]:
    if t == 1:
        return [FirewallRuleSpec(SRC_IP, ip, "src_" + ip.replace(".", "_")) for ip in TYPE1_SRC_IPS]
    if t == 2:
        return [FirewallRuleSpec(UDP_DPORT, p, f"udp_dport_{p}") for p in TYPE2_UDP_PORTS]
    if t == 3:
        return [FirewallRuleSpec(UDP_DPORT, p, f"udp_dport_{p}") for p in TYPE3_UDP_PORTS]
    raise ValueError(f"unknown rule type {t}")


def normalize_types(types: int | Iterable[int]) -> tuple[int, ...]:
    ts = {types} if isinstance(types, int) else set(types)
    bad = ts - {1, 2, 3, 4}
    if bad:
        raise ValueError(f"rule types must be drawn from 1..4, got {sorted(bad)}")
    if 4 in ts:
        ts |= {1, 2, 3}
    ts.discard(4)
    return tuple(sorted(ts))


def rule_specs(types: int | Iterable[int]) -> list[FirewallRuleSpec]:
    specs: list[FirewallRuleSpec] = []
    for t in normalize_types(types):
        specs.extend(_specs_for_type(t))
    return specs


def _src_ip_rule(spec: FirewallRuleSpec, pad: int) -> str:
    plen = spec.prefix_len
    mask = (0xFFFFFFFF << (32 - plen)) & 0xFFFFFFFF
    net = ip_to_int(str(spec.value)) & mask
    if pad and plen == 32:
        pad += 1  # no masking step to balance
    lines = ["    ja +0"] * pad
    lines += [
        "    jlt r2, 34, pass",
        "    ldxh r3, [r1+12]",
        "    jne r3, 0x0008, pass        # ethertype 0x0800 read little-endian",
        "    ldxw r3, [r1+26]",
        "    be32 r3",
    ]
    if plen < 32:
        lines.append(f"    and32 r3, {mask:#x}")
    lines += [
        f"    jne32 r3, {net:#x}, pass",
        f"    mov r0, {R0_DROP}",
        "    exit",
        f"pass: mov r0, {R0_DONT_CARE}",
        "    exit",
    ]
    return "\n".join(lines)


def _udp_port_rule(spec: FirewallRuleSpec) -> str:
    return "\n".join([
        "    jlt r2, 34, pass",
        "    ldxh r3, [r1+12]",
        "    jne r3, 0x0008, pass",
        "    ldxb r3, [r1+23]",
        f"    jne r3, 17, pass",
        "    ldxh r3, [r1+20]",
        "    jset r3, 0xff1f, pass       # non-first fragment: no UDP header",
        "    ldxb r4, [r1+14]",
        "    and r4, 0xf",
        "    lsh r4, 2",
        "    add r4, 14                  # r4 = offset of the UDP header",
        "    mov r5, r4",
        "    add r5, 4",
        "    jgt r5, r2, pass",
        "    add r4, r1",
        "    ldxh r3, [r4+2]",
        "    be16 r3",
        f"    jne r3, {spec.value}, pass",
        f"    mov r0, {R0_DROP}",
        "    exit",
        f"pass: mov r0, {R0_DONT_CARE}",
        "    exit",
    ])


def ruleset_listing(types: int | Iterable[int], equalize: bool = False) -> str:
    """Assembly text for the requested rule types (4 = all)."""
    types = normalize_types(types)
    chunks = [f"# firewall rule types {','.join(map(str, types))}"]
    for spec in rule_specs(types):
        chunks.append(f".rule {spec.name}")
        if spec.kind == SRC_IP:
            chunks.append(_src_ip_rule(spec, _EQUALIZE_PAD if equalize else 0))
        else:
            chunks.append(_udp_port_rule(spec))
    return "\n".join(chunks) + "\n"


def build_ruleset(types: int | Iterable[int], equalize: bool = False) -> ProgramImage:
    """ProgramImage with one rule per blocked value.

    ``equalize`` pads the source-address rules with no-ops so every rule
    retires the same number of instructions on a benign, unfragmented UDP
    packet.
    """
    return assemble(ruleset_listing(types, equalize))


def emit_ruleset(types: int | Iterable[int], stem: str | Path) -> tuple[Path, Path, Path]:
    """Write ``<stem>.s``, ``<stem>.bin`` and ``<stem>.idx``."""
    stem = Path(stem)
    text = ruleset_listing(types)
    image = assemble(text)
    paths = stem.with_suffix(".s"), stem.with_suffix(".bin"), stem.with_suffix(".idx")
    paths[0].write_text(text)
    write_bytecode(paths[1], image)
    write_rule_index(paths[2], image)
    return paths


@dataclass(frozen=True)
class BaselineConfig:
    """Sequential single-processor cost model (uncalibrated knobs)."""

    cost_factor: int = 4
    per_packet_overhead: int = 200
    tick_budget: int = DEFAULT_TICK_BUDGET
    data_depth: int = 128

    def __post_init__(self):
        if self.cost_factor < 1:
            raise ValueError("cost_factor must be >= 1")
        if self.per_packet_overhead < 0:
            raise ValueError("per_packet_overhead must be >= 0")


def _load_core(rules: ProgramImage, data_depth: int,
               handlers: CallHandlerRegistry | None = None) -> Core:
    core = Core(max(len(rules.words), 1), data_depth, handlers)
    for idx, word in enumerate(rules.words):
        core.write_prog_word(idx, word)
    return core


# a loaded core per image keeps the decode cache warm across packets; the
# core is fully re-initialised before each rule so reuse is not observable
_loaded_core = functools.lru_cache(maxsize=8)(_load_core)


def baseline_run(rules: ProgramImage, header: HeaderSlice, cfg: BaselineConfig | None = None,
                 handlers: CallHandlerRegistry | None = None) -> tuple[Verdict, int]:
    """Run every rule in index order on one core, stopping at the first verdict."""
    cfg = cfg or BaselineConfig()
    data = header.data
    if len(data) > cfg.data_depth:
        raise ValueError(f"header of {len(data)} bytes exceeds data depth {cfg.data_depth}")
    if handlers is None:
        core = _loaded_core(rules, cfg.data_depth)
    else:
        core = _load_core(rules, cfg.data_depth, handlers)
    retired = 0
    verdict = DEFAULT_PASS
    for rule in rules.rules:
        core.data_mem[:] = bytes(cfg.data_depth)
        core.data_mem[:len(data)] = data
        core.assert_reset()
        core.set_inputs(0, len(data), 0, 0, 0)
        core.reset(rule.start_word)
        core.release()
        status, ticks = core.run_until_halt(cfg.tick_budget)
        retired += ticks
        if status is CoreStatus.ERRORED:
            verdict = error_verdict(rule.rule_id)
            break
        r0 = core.regs[0]
        if r0 == R0_DROP:
            verdict = DROP
            break
        if r0 == R0_STORE:
            verdict = STORE
            break
        if r0 != R0_DONT_CARE:
            verdict = error_verdict(rule.rule_id)
            break
    return verdict, cfg.per_packet_overhead + cfg.cost_factor * retired
