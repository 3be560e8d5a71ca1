"""Clock-stepped simulator of a many-core eBPF packet filter."""
from .isa import Instruction, ProgramImage, RuleMeta, assemble, decode, disassemble, encode
from .manycore import Engine, EngineConfig, PacketResult, Verdict, VerdictKind
from .pktio import HeaderSlice, Packet, PacketMemory, TrafficSpec, gen_synthetic, slice_header
from .rules import BaselineConfig, baseline_run, build_ruleset
from .vcore import Core, CoreError, CoreStatus

__all__ = [
    "BaselineConfig", "Core", "CoreError", "CoreStatus", "Engine", "EngineConfig",
    "HeaderSlice", "Instruction", "Packet", "PacketMemory", "PacketResult", "ProgramImage",
    "RuleMeta", "TrafficSpec", "Verdict", "VerdictKind", "assemble", "baseline_run",
    "build_ruleset", "decode", "disassemble", "encode", "gen_synthetic", "slice_header",
]
