"""Clock-stepped many-core engine.

One engine owns ``n_cores`` cores that all hold the full rule image.  For each
packet header the engine broadcasts the header, then hands rules to idle
cores one per cycle until the result analyzer registers a verdict.

Per-rule handshake, for a rule granted in cycle ``t``::

    t      arbiter grants an idle core, re-programmer points its PC at the rule
    t+1    new PC visible, tracker releases the core from reset
    t+2    first instruction executes

so a rule retiring ``k`` instructions halts in cycle ``t+k+1``.  A core that
halts is back in the idle pool in the same cycle.

Rule result ABI: R0 = 0 drop, 1 store, 2 don't care.  Faults are reported on
the core's error output rather than through R0.  Rules see R1 = 0 (start of
the header in data memory), R2 = header length and R3-R5 = 0 at header load.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from .isa import ProgramImage, RuleMeta
from .pktio import CsrFile, HeaderSlice, PacketDescriptor
from .vcore import DEFAULT_TICK_BUDGET, CallHandlerRegistry, Core, CoreStatus

R0_DROP = 0
R0_STORE = 1
R0_DONT_CARE = 2


class EngineError(Exception):
    pass


class ImageTooLarge(EngineError):
    pass


class EngineBusy(EngineError):
    pass


class HeaderTooLong(EngineError):
    pass


class RulesNotUploaded(EngineError):
    pass


class CoreBusy(EngineError):
    pass


class RuleIndexOutOfRange(EngineError):
    pass


class VerdictKind(enum.Enum):
    DROP = "Drop"
    STORE = "Store"
    ERROR = "Error"
    DEFAULT_PASS = "DefaultPass"


@dataclass(frozen=True)
class Verdict:
    kind: VerdictKind
    rule_id: int | None = None  # set for ERROR only

    def __str__(self) -> str:
        if self.kind is VerdictKind.ERROR:
            return f"Error({self.rule_id})"
        return self.kind.value


DROP = Verdict(VerdictKind.DROP)
STORE = Verdict(VerdictKind.STORE)
DEFAULT_PASS = Verdict(VerdictKind.DEFAULT_PASS)


def error_verdict(rule_id: int | None) -> Verdict:
    return Verdict(VerdictKind.ERROR, rule_id)


def analyze_result(r0: int, errored: bool, rules_run: int, total_rules: int,
                   in_flight: int = 0, rule_id: int | None = None) -> Verdict | None:
    """Decide whether one rule's outcome settles the packet.

    A don't-care result only settles it once every rule has been dispatched
    and no other rule result is still outstanding.
    """
    if errored:
        return error_verdict(rule_id)
    if r0 == R0_DROP:
        return DROP
    if r0 == R0_STORE:
        return STORE
    if r0 == R0_DONT_CARE:
        if rules_run >= total_rules and in_flight == 0:
            return DEFAULT_PASS
        return None
    return error_verdict(rule_id)


def arbiter_grant(idle_mask: int, last_grant: int) -> int | None:
    """Round-robin: lowest idle index strictly after ``last_grant``, wrapping."""
    if not idle_mask:
        return None
    shift = last_grant + 1
    above = (idle_mask >> shift) << shift if shift >= 0 else idle_mask
    pick = above or idle_mask
    return (pick & -pick).bit_length() - 1


@dataclass(frozen=True)
class EngineConfig:
    n_cores: int = 12
    prog_depth: int = 1024
    data_depth: int = 128
    clock_hz: float = 100e6
    tick_budget: int = DEFAULT_TICK_BUDGET
    # bus cost of one broadcast 64-bit word
    prog_word_cycles: int = 1
    data_word_cycles: int = 1

    def __post_init__(self):
        if self.n_cores < 1:
            raise ValueError("n_cores must be >= 1")
        if self.prog_depth < 1 or self.data_depth < 1:
            raise ValueError("memory depths must be >= 1")
        if self.tick_budget < 1:
            raise ValueError("tick_budget must be >= 1")
        if self.prog_word_cycles < 1 or self.data_word_cycles < 1:
            raise ValueError("bus word costs must be >= 1 cycle")


class Event(NamedTuple):
    cycle: int
    module: str
    event: str
    payload: dict

    def to_json(self) -> str:
        return json.dumps({"cycle": self.cycle, "module": self.module,
                           "event": self.event, "payload": self.payload},
                          sort_keys=True, separators=(",", ":"))


class EventTrace:
    """Append-only event log; disabled traces drop everything."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.events: list[Event] = []

    def add(self, cycle: int, module: str, event: str, **payload) -> None:
        if self.enabled:
            self.events.append(Event(cycle, module, event, payload))

    def __iter__(self):
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def select(self, module: str | None = None, event: str | None = None) -> list[Event]:
        return [e for e in self.events
                if (module is None or e.module == module) and (event is None or e.event == event)]

    def to_jsonl(self) -> str:
        ordered = sorted(self.events, key=lambda e: e.cycle)  # stable: keeps emit order per cycle
        return "".join(e.to_json() + "\n" for e in ordered)


@dataclass
class PacketResult:
    pkt_id: int
    verdict: Verdict
    rules_executed: int
    latency_cycles: int
    per_rule_ticks: list[tuple[int, int]] = field(default_factory=list)
    header_cycle: int = 0
    verdict_cycle: int = 0
    deciding_rule: int | None = None
    header_length: int = 0


# core states inside the engine
IDLE, REPROGRAMMING, RUNNING = "idle", "reprogramming", "running"


class Engine:
    def __init__(self, config: EngineConfig | None = None,
                 handlers: CallHandlerRegistry | None = None, trace: bool = True):
        self.config = config or EngineConfig()
        cfg = self.config
        self.cores = [Core(cfg.prog_depth, cfg.data_depth, handlers, i) for i in range(cfg.n_cores)]
        self.cycle = 0
        self.trace = EventTrace(trace)
        self.csr = CsrFile(cores_count=cfg.n_cores)
        self.rules: list[RuleMeta] = []
        self.image_words = 0
        self.core_state = [IDLE] * cfg.n_cores
        self.core_rule: list[int | None] = [None] * cfg.n_cores
        self.run_from = [0] * cfg.n_cores
        self.last_grant = cfg.n_cores - 1
        self.next_rule_index = 0
        self.unknown_r0_count = 0
        self._packet: _PacketState | None = None

    # -- flags -------------------------------------------------------------

    @property
    def flags(self) -> dict[str, bool]:
        return self.csr.flags

    def _set_flag(self, name: str, value: bool, cycle: int | None = None) -> None:
        if self.csr.flags[name] != value:
            self.csr.flags[name] = value
            self.trace.add(self.cycle if cycle is None else cycle, "flags", name, value=value)

    @property
    def busy(self) -> bool:
        return self._packet is not None

    @property
    def idle_mask(self) -> int:
        mask = 0
        for i, state in enumerate(self.core_state):
            if state is IDLE:
                mask |= 1 << i
        return mask

    @property
    def total_rules(self) -> int:
        return len(self.rules)

    # -- program loader ----------------------------------------------------

    def upload_rules(self, image: ProgramImage) -> int:
        """Broadcast the rule image to every core; returns cycles consumed."""
        if self.busy:
            raise EngineBusy("cannot upload rules while a packet is in flight")
        if len(image.words) > self.config.prog_depth:
            raise ImageTooLarge(
                f"image of {len(image.words)} words exceeds program depth {self.config.prog_depth}")
        if self.flags["All_eBPF_rules_uploaded_flag"]:
            self.reset_ruleset()
        start = self.cycle
        for idx, word in enumerate(image.words):
            acks = [core.write_prog_word(idx, word) for core in self.cores]
            if not all(acks):
                raise EngineError(f"missing program-bus ACK for word {idx}")
        cost = len(image.words) * self.config.prog_word_cycles
        self.cycle += cost
        self.rules = list(image.rules)
        self.image_words = len(image.words)
        self.csr.rules_count = len(self.rules)
        self.trace.add(start, "program_loader", "upload", words=len(image.words),
                       rules=len(self.rules), cycles=cost)
        self._set_flag("VeBPF_rst_new_rules_flag", False)
        self._set_flag("All_eBPF_rules_uploaded_flag", True, max(start, self.cycle - 1))
        return cost

    def reset_ruleset(self) -> None:
        """Drop the current rules; program memories are cleared for the next upload."""
        if self.busy:
            raise EngineBusy("cannot reset the rule set while a packet is in flight")
        self._set_flag("VeBPF_rst_new_rules_flag", True)
        self._set_flag("All_eBPF_rules_uploaded_flag", False)
        for core in self.cores:
            for idx in range(self.image_words):
                core.write_prog_word(idx, 0)
        self.rules = []
        self.image_words = 0
        self.csr.rules_count = 0
        self.trace.add(self.cycle, "program_loader", "reset_ruleset")
        self.cycle += 1

    # -- data loader -------------------------------------------------------

    def load_header(self, header: HeaderSlice) -> int:
        """Broadcast a header slice to all cores, 8 bytes per bus cycle."""
        if not self.flags["All_eBPF_rules_uploaded_flag"]:
            raise RulesNotUploaded("upload rules before loading packet headers")
        if any(state is not IDLE for state in self.core_state):
            raise EngineBusy("cores must be idle in reset while the header is loaded")
        data = header.data
        if len(data) > self.config.data_depth:
            raise HeaderTooLong(
                f"header of {len(data)} bytes exceeds data depth {self.config.data_depth}")
        start = self.cycle
        n_words = -(-len(data) // 8)
        for w in range(n_words):
            chunk = data[8 * w:8 * w + 8]
            acks = []
            for core in self.cores:
                acks.append(_write_chunk(core, 8 * w, chunk))
            if not all(acks):
                raise EngineError(f"missing data-bus ACK for word {w}")
        for core in self.cores:
            core.data_mem[len(data):] = bytes(self.config.data_depth - len(data))
            core.set_inputs(0, len(data), 0, 0, 0)
        cost = n_words * self.config.data_word_cycles
        self.cycle += cost
        self.trace.add(start, "data_loader", "load_header", length=len(data), cycles=cost)
        self._set_flag("VeBPF_data_loading_done_flag", True, max(start, self.cycle - 1))
        return cost

    # -- scheduler ---------------------------------------------------------

    def reprogram_core(self, core_id: int, rule: RuleMeta) -> int:
        """Point an idle core at ``rule`` (one cycle) and hand it to the tracker."""
        if not 0 <= rule.rule_id < len(self.rules) or self.rules[rule.rule_id] != rule:
            raise RuleIndexOutOfRange(f"rule {rule.rule_id} is not in the uploaded set")
        core = self.cores[core_id]
        if self.core_state[core_id] is not IDLE or not core.in_reset:
            raise CoreBusy(f"core {core_id} is {self.core_state[core_id]}")
        cost = core.reset(rule.start_word)
        self.core_state[core_id] = REPROGRAMMING
        self.core_rule[core_id] = rule.rule_id
        self.next_rule_index += 1
        return cost

    def begin_packet(self, header: HeaderSlice, start_cycle: int | None = None) -> None:
        """Raise the header-available flag and load ``header`` into every core."""
        if self.busy:
            raise EngineBusy("previous packet has no verdict yet")
        if not self.flags["All_eBPF_rules_uploaded_flag"]:
            raise RulesNotUploaded("upload rules before processing packets")
        if start_cycle is not None and start_cycle > self.cycle:
            self.cycle = start_cycle
        h = self.cycle
        self._set_flag("VeBPF_result_registered_flag", False)
        self._set_flag("VeBPF_load_next_rxpkthdr_flag", False)
        self._set_flag("RxPktHdr_available_flag", True)
        self.trace.add(h, "slicer_dma", "header_available", pkt_id=header.pkt_id,
                       length=header.length)
        self.next_rule_index = 0
        self._packet = _PacketState(header, h)
        self.load_header(header)
        self._set_flag("RxPktHdr_available_flag", False, max(h, self.cycle - 1))

    def engine_tick(self) -> list[Event]:
        """Advance the global clock by one cycle."""
        pkt = self._packet
        if pkt is None:
            raise EngineError("no packet in flight")
        c = self.cycle
        first_event = len(self.trace.events)
        cores, states = self.cores, self.core_state
        budget = self.config.tick_budget
        finished: list[int] = []

        if not self.rules:
            self._register(pkt, DEFAULT_PASS, c, None)
        else:
            # (a) step running cores
            for i in range(len(cores)):
                if states[i] is not RUNNING or self.run_from[i] > c:
                    continue
                core = cores[i]
                if core.stall:
                    core.stall -= 1
                    continue
                if self.run_from[i] == c:
                    self.trace.add(c, "tracker", "running", core=i, rule=self.core_rule[i],
                                   pc=core.pc)
                status = core.step()
                if status is CoreStatus.RUNNING and core.ticks > budget:
                    status = core.exceed_budget()
                if status is not CoreStatus.RUNNING:
                    finished.append(i)

            # (b) forward results in ascending core order
            pending = sum(1 for s in states if s is not IDLE)
            for i in finished:
                core = cores[i]
                rule_id = self.core_rule[i]
                pending -= 1
                pkt.completed += 1
                pkt.per_rule_ticks.append((rule_id, core.ticks))
                self.trace.add(c, "tracker", "halt", core=i, rule=rule_id, r0=core.regs[0],
                               error=core.error.value if core.error else None, ticks=core.ticks)
                core.assert_reset()
                states[i] = IDLE
                self.core_rule[i] = None
                if pkt.verdict is not None:
                    continue
                if not core.errored and core.regs[0] not in (R0_DROP, R0_STORE, R0_DONT_CARE):
                    self.unknown_r0_count += 1
                verdict = analyze_result(core.regs[0], core.errored, self.next_rule_index,
                                         len(self.rules), pending, rule_id)
                if verdict is not None:
                    self._register(pkt, verdict, c, rule_id)

            if pkt.verdict is None:
                # (d) tracker releases cores reprogrammed last cycle
                for i in range(len(cores)):
                    if states[i] is REPROGRAMMING and self.run_from[i] == c:
                        cores[i].release()
                        states[i] = RUNNING
                        self.run_from[i] = c + 1
                        self.trace.add(c, "reprogrammer", "pc_set", core=i,
                                       rule=self.core_rule[i], pc=cores[i].pc)
                # (e) one grant per cycle
                if self.next_rule_index < len(self.rules):
                    grant = arbiter_grant(self.idle_mask, self.last_grant)
                    if grant is not None:
                        rule = self.rules[self.next_rule_index]
                        self.reprogram_core(grant, rule)
                        self.last_grant = grant
                        self.run_from[grant] = c + 1
                        self.trace.add(c, "arbiter", "grant", core=grant, rule=rule.rule_id,
                                       start_word=rule.start_word)
        self.cycle = c + 1
        return self.trace.events[first_event:]

    def _register(self, pkt: _PacketState, verdict: Verdict, c: int, rule_id: int | None) -> None:
        pkt.verdict = verdict
        pkt.verdict_cycle = c
        pkt.deciding_rule = rule_id
        for i, state in enumerate(self.core_state):
            if state is not IDLE:
                self.cores[i].assert_reset()
                self.trace.add(c, "analyzer", "cancel", core=i, rule=self.core_rule[i])
                self.core_state[i] = IDLE
                self.core_rule[i] = None
        self.trace.add(c, "analyzer", "verdict", pkt_id=pkt.header.pkt_id, verdict=str(verdict),
                       rule=rule_id)
        if pkt.descriptor is not None:
            pkt.descriptor.set_verdict(verdict, c)
        self._set_flag("VeBPF_data_loading_done_flag", False, c)
        self._set_flag("VeBPF_result_registered_flag", True, c)
        self._set_flag("VeBPF_load_next_rxpkthdr_flag", True, c)

    def finish_packet(self) -> PacketResult:
        pkt = self._packet
        if pkt is None or pkt.verdict is None:
            raise EngineError("packet has no verdict yet")
        self._packet = None
        return PacketResult(
            pkt_id=pkt.header.pkt_id,
            verdict=pkt.verdict,
            rules_executed=self.next_rule_index,
            latency_cycles=pkt.verdict_cycle - pkt.header_cycle + 1,
            per_rule_ticks=pkt.per_rule_ticks,
            header_cycle=pkt.header_cycle,
            verdict_cycle=pkt.verdict_cycle,
            deciding_rule=pkt.deciding_rule,
            header_length=pkt.header.length,
        )

    def process_packet(self, header: HeaderSlice, start_cycle: int | None = None,
                       descriptor: PacketDescriptor | None = None) -> PacketResult:
        """Load one header and tick until the analyzer registers a verdict."""
        self.begin_packet(header, start_cycle)
        self._packet.descriptor = descriptor
        while self._packet.verdict is None:
            self.engine_tick()
        return self.finish_packet()

    def run(self, headers: Iterable[HeaderSlice]) -> list[PacketResult]:
        return [self.process_packet(h) for h in headers]


@dataclass
class _PacketState:
    header: HeaderSlice
    header_cycle: int
    descriptor: PacketDescriptor | None = None
    verdict: Verdict | None = None
    verdict_cycle: int = 0
    deciding_rule: int | None = None
    completed: int = 0
    per_rule_ticks: list[tuple[int, int]] = field(default_factory=list)


def _write_chunk(core: Core, addr: int, chunk: bytes) -> bool:
    """One bus beat; a short final beat is split into byte-lane writes."""
    if len(chunk) == 8:
        return core.write_data_word(addr, int.from_bytes(chunk, "little"), 8)
    ack = True
    pos = 0
    for width in (4, 2, 1):
        if len(chunk) - pos >= width:
            ack &= core.write_data_word(addr + pos, int.from_bytes(chunk[pos:pos + width],
                                                                   "little"), width)
            pos += width
    return ack
