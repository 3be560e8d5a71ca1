"""A single packet-processing core: Harvard-architecture eBPF interpreter.

Address map seen by loads and stores:

* ``[0, data_depth)`` is the byte-wide data memory holding the header slice;
* ``[STACK_BASE, STACK_TOP)`` is the 512-byte stack, with R10 == STACK_TOP.

Anything else faults.  Every executed instruction costs one tick (a faulting
one included); CALL adds the extra ticks its handler declares.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

from . import isa
from .isa import Instruction

STACK_SIZE = 512
STACK_BASE = 1 << 32
STACK_TOP = STACK_BASE + STACK_SIZE
DEFAULT_TICK_BUDGET = 4096
RESET_CYCLES = 1

M64 = (1 << 64) - 1
M32 = (1 << 32) - 1


class CoreError(enum.Enum):
    OUT_OF_BOUNDS_LOAD = "OutOfBoundsLoad"
    OUT_OF_BOUNDS_STORE = "OutOfBoundsStore"
    PC_OUT_OF_RANGE = "PcOutOfRange"
    UNKNOWN_OPCODE = "UnknownOpcode"
    UNKNOWN_HELPER = "UnknownHelper"
    TICK_BUDGET_EXCEEDED = "TickBudgetExceeded"
    READ_ONLY_REGISTER = "ReadOnlyRegister"


class CoreStatus(enum.Enum):
    RUNNING = "Running"
    HALTED = "Halted"
    ERRORED = "Errored"


class VcoreError(Exception):
    """Misuse of the core's external interface (bus or reset protocol)."""


class NotInReset(VcoreError):
    pass


class StartPcOutOfRange(VcoreError):
    pass


class OutOfBoundsStore(VcoreError):
    pass


# handler(r1, r2, r3, r4, r5) -> (r0, extra_ticks)
CallHandler = Callable[[int, int, int, int, int], "tuple[int, int]"]


class CallHandlerRegistry:
    """Maps CALL immediates to custom handlers; unknown ids fault the core."""

    def __init__(self, handlers: dict[int, CallHandler] | None = None):
        self._handlers: dict[int, CallHandler] = dict(handlers or {})

    def register(self, call_id: int, handler: CallHandler) -> None:
        self._handlers[call_id] = handler

    def get(self, call_id: int) -> CallHandler | None:
        return self._handlers.get(call_id)

    def __contains__(self, call_id: int) -> bool:
        return call_id in self._handlers


def _s64(v: int) -> int:
    return v - (1 << 64) if v >> 63 else v


def _s32(v: int) -> int:
    return v - (1 << 32) if v >> 31 & 1 else v


def _bswap(value: int, nbytes: int) -> int:
    return int.from_bytes(value.to_bytes(nbytes, "little"), "big")


def _alu64(op: int, a: int, b: int) -> int:
    if op == 0x00:
        return (a + b) & M64
    if op == 0x10:
        return (a - b) & M64
    if op == 0x20:
        return (a * b) & M64
    if op == 0x30:
        return a // b if b else 0
    if op == 0x40:
        return a | b
    if op == 0x50:
        return a & b
    if op == 0x60:
        return (a << (b & 63)) & M64
    if op == 0x70:
        return a >> (b & 63)
    if op == 0x90:
        return a % b if b else a
    if op == 0xA0:
        return a ^ b
    if op == 0xB0:
        return b
    # arsh
    return (_s64(a) >> (b & 63)) & M64


def _alu32(op: int, a: int, b: int) -> int:
    a &= M32
    b &= M32
    if op == 0x00:
        return (a + b) & M32
    if op == 0x10:
        return (a - b) & M32
    if op == 0x20:
        return (a * b) & M32
    if op == 0x30:
        return a // b if b else 0
    if op == 0x40:
        return a | b
    if op == 0x50:
        return a & b
    if op == 0x60:
        return (a << (b & 31)) & M32
    if op == 0x70:
        return a >> (b & 31)
    if op == 0x90:
        return a % b if b else a
    if op == 0xA0:
        return a ^ b
    if op == 0xB0:
        return b
    return (_s32(a) >> (b & 31)) & M32


def _compare(op: int, a: int, b: int, bits: int) -> bool:
    if op == 0x10:
        return a == b
    if op == 0x50:
        return a != b
    if op == 0x20:
        return a > b
    if op == 0x30:
        return a >= b
    if op == 0xA0:
        return a < b
    if op == 0xB0:
        return a <= b
    if op == 0x40:
        return bool(a & b)
    sign = 1 << (bits - 1)
    sa = a - (sign << 1) if a & sign else a
    sb = b - (sign << 1) if b & sign else b
    if op == 0x60:
        return sa > sb
    if op == 0x70:
        return sa >= sb
    if op == 0xC0:
        return sa < sb
    return sa <= sb  # jsle


class Core:
    """Mutable state of one core plus its execution and bus interfaces.

    A new core starts held in reset with zeroed memories.
    """

    def __init__(self, prog_depth: int = 1024, data_depth: int = 128,
                 handlers: CallHandlerRegistry | None = None, core_id: int = 0):
        if prog_depth < 1 or data_depth < 0:
            raise ValueError("prog_depth must be >= 1 and data_depth >= 0")
        if data_depth > STACK_BASE:
            raise ValueError("data memory would overlap the stack window")
        self.core_id = core_id
        self.prog_depth = prog_depth
        self.data_depth = data_depth
        self.prog_mem = [0] * prog_depth
        self.data_mem = bytearray(data_depth)
        self.stack_mem = bytearray(STACK_SIZE)
        self.handlers = handlers if handlers is not None else CallHandlerRegistry()
        self.regs = [0] * isa.NUM_REGS
        self.regs[10] = STACK_TOP
        self.pc = 0
        self.ticks = 0
        self.halted = False
        self.errored = False
        self.error: CoreError | None = None
        self.in_reset = True
        # cycles still owed by a CALL handler; the engine burns these before
        # the next step
        self.stall = 0
        self._decoded: list[Instruction | None] = [None] * prog_depth

    def __repr__(self) -> str:
        state = ("reset" if self.in_reset else "halted" if self.halted
                 else "errored" if self.errored else "running")
        return f"<Core {self.core_id} {state} pc={self.pc} ticks={self.ticks}>"

    @property
    def status(self) -> CoreStatus:
        if self.errored:
            return CoreStatus.ERRORED
        if self.halted:
            return CoreStatus.HALTED
        return CoreStatus.RUNNING

    # -- reset protocol ----------------------------------------------------

    def assert_reset(self) -> None:
        """Drive reset_in HIGH: execution stops, state is kept until reset()."""
        self.in_reset = True
        self.stall = 0

    def reset(self, start_pc: int) -> int:
        """Point the core at ``start_pc``; returns the cycle cost (always 1)."""
        if not self.in_reset:
            raise NotInReset("reset() requires the core to be held in reset")
        if not 0 <= start_pc < self.prog_depth:
            raise StartPcOutOfRange(f"start pc {start_pc} >= program depth {self.prog_depth}")
        self.pc = start_pc
        regs = self.regs
        regs[0] = regs[6] = regs[7] = regs[8] = regs[9] = 0
        regs[10] = STACK_TOP
        self.stack_mem[:] = bytes(STACK_SIZE)
        self.ticks = 0
        self.halted = self.errored = False
        self.error = None
        self.stall = 0
        return RESET_CYCLES

    def release(self) -> None:
        """Drive reset_in LOW; a no-op if the core is already running."""
        self.in_reset = False

    def set_inputs(self, *values: int) -> None:
        """Load R1.. from the given values (only while held in reset)."""
        if not self.in_reset:
            raise NotInReset("input registers are written only during reset")
        if len(values) > 5:
            raise ValueError("only R1-R5 are input registers")
        for i, v in enumerate(values, start=1):
            self.regs[i] = v & M64

    # -- bus writes --------------------------------------------------------

    def write_data_word(self, byte_addr: int, word: int, width: int = 8) -> bool:
        if not self.in_reset:
            raise NotInReset("data memory is written only while the core is in reset")
        if width not in (1, 2, 4, 8):
            raise ValueError(f"bus width {width} not in 1/2/4/8")
        if byte_addr < 0 or byte_addr + width > self.data_depth:
            raise OutOfBoundsStore(
                f"data write [{byte_addr}, {byte_addr + width}) outside depth {self.data_depth}")
        self.data_mem[byte_addr:byte_addr + width] = (word & ((1 << (8 * width)) - 1)).to_bytes(
            width, "little")
        return True

    def write_prog_word(self, word_index: int, word: int) -> bool:
        if not self.in_reset:
            raise NotInReset("program memory is written only while the core is in reset")
        if not 0 <= word_index < self.prog_depth:
            raise OutOfBoundsStore(f"program word {word_index} >= depth {self.prog_depth}")
        self.prog_mem[word_index] = word & M64
        self._decoded[word_index] = None
        if word_index:
            self._decoded[word_index - 1] = None
        return True

    # -- execution ---------------------------------------------------------

    def _fault(self, kind: CoreError) -> CoreStatus:
        self.errored = True
        self.error = kind
        return CoreStatus.ERRORED

    def _fetch(self, pc: int) -> Instruction:
        ins = self._decoded[pc]
        if ins is None:
            nxt = self.prog_mem[pc + 1] if pc + 1 < self.prog_depth else None
            ins = isa.decode(self.prog_mem[pc], nxt)
            self._decoded[pc] = ins
        return ins

    def _mem(self, addr: int, size: int) -> tuple[bytearray, int] | None:
        if addr + size <= self.data_depth:
            return self.data_mem, addr
        if STACK_BASE <= addr and addr + size <= STACK_TOP:
            return self.stack_mem, addr - STACK_BASE
        return None

    def step(self) -> CoreStatus:
        """Execute exactly one instruction."""
        if self.in_reset:
            raise NotInReset("core is held in reset")
        if self.halted or self.errored:
            return self.status
        pc = self.pc
        self.ticks += 1
        if not 0 <= pc < self.prog_depth:
            return self._fault(CoreError.PC_OUT_OF_RANGE)
        try:
            ins = self._fetch(pc)
        except isa.TruncatedWideImmediate:
            return self._fault(CoreError.PC_OUT_OF_RANGE)
        except isa.IsaError:
            return self._fault(CoreError.UNKNOWN_OPCODE)

        regs = self.regs
        opc = ins.opcode
        cls = opc & 0x07
        kind = ins.info.kind

        if cls == isa.ALU64 or cls == isa.ALU:
            if ins.dst == 10:
                return self._fault(CoreError.READ_ONLY_REGISTER)
            a = regs[ins.dst]
            op = opc & 0xF0
            if kind == "neg":
                regs[ins.dst] = (-a) & (M64 if cls == isa.ALU64 else M32)
            elif kind == "end":
                n = ins.imm // 8
                low = a & ((1 << ins.imm) - 1)
                regs[ins.dst] = _bswap(low, n) if opc & isa.SRC_X else low
            elif cls == isa.ALU64:
                b = regs[ins.src] if opc & isa.SRC_X else ins.imm & M64
                regs[ins.dst] = _alu64(op, a, b)
            else:
                b = regs[ins.src] if opc & isa.SRC_X else ins.imm
                regs[ins.dst] = _alu32(op, a, b)
            self.pc = pc + 1
            return CoreStatus.RUNNING

        if cls == isa.JMP or cls == isa.JMP32:
            if kind == "exit":
                self.halted = True
                return CoreStatus.HALTED
            if kind == "call":
                handler = self.handlers.get(ins.imm)
                if handler is None:
                    return self._fault(CoreError.UNKNOWN_HELPER)
                r0, extra = handler(regs[1], regs[2], regs[3], regs[4], regs[5])
                regs[0] = r0 & M64
                self.ticks += extra
                self.stall = extra
                self.pc = pc + 1
                return CoreStatus.RUNNING
            if kind == "ja":
                self.pc = pc + 1 + ins.off
                return CoreStatus.RUNNING
            a = regs[ins.dst]
            b = regs[ins.src] if opc & isa.SRC_X else ins.imm & M64
            bits = 64
            if cls == isa.JMP32:
                a &= M32
                b &= M32
                bits = 32
            self.pc = pc + 1 + ins.off if _compare(opc & 0xF0, a, b, bits) else pc + 1
            return CoreStatus.RUNNING

        if kind == "lddw":
            if ins.dst == 10:
                return self._fault(CoreError.READ_ONLY_REGISTER)
            regs[ins.dst] = ins.imm
            self.pc = pc + 2
            return CoreStatus.RUNNING

        size = ins.info.size
        if kind == "ldx":
            if ins.dst == 10:
                return self._fault(CoreError.READ_ONLY_REGISTER)
            loc = self._mem((regs[ins.src] + ins.off) & M64, size)
            if loc is None:
                return self._fault(CoreError.OUT_OF_BOUNDS_LOAD)
            buf, at = loc
            regs[ins.dst] = int.from_bytes(buf[at:at + size], "little")
        else:
            value = regs[ins.src] if kind == "stx" else ins.imm & M64
            loc = self._mem((regs[ins.dst] + ins.off) & M64, size)
            if loc is None:
                return self._fault(CoreError.OUT_OF_BOUNDS_STORE)
            buf, at = loc
            buf[at:at + size] = (value & ((1 << (8 * size)) - 1)).to_bytes(size, "little")
        self.pc = pc + 1
        return CoreStatus.RUNNING

    def run_until_halt(self, tick_budget: int = DEFAULT_TICK_BUDGET) -> tuple[CoreStatus, int]:
        if self.in_reset:
            raise NotInReset("release the core before running it")
        status = self.status
        while status is CoreStatus.RUNNING:
            status = self.step()
            if status is CoreStatus.RUNNING and self.ticks > tick_budget:
                status = self._fault(CoreError.TICK_BUDGET_EXCEEDED)
        return status, self.ticks

    def exceed_budget(self) -> CoreStatus:
        """Fault the core for running past its tick budget (used by the engine)."""
        return self._fault(CoreError.TICK_BUDGET_EXCEEDED)


@dataclass
class RunResult:
    status: CoreStatus
    r0: int
    ticks: int
    error: CoreError | None


def run_program(words, data: bytes = b"", inputs: tuple[int, ...] = (),
                tick_budget: int = DEFAULT_TICK_BUDGET, start_pc: int = 0,
                data_depth: int | None = None,
                handlers: CallHandlerRegistry | None = None) -> RunResult:
    """Convenience: load ``words`` and ``data`` into a fresh core and run it."""
    words = list(words)
    core = Core(prog_depth=max(len(words), 1),
                data_depth=len(data) if data_depth is None else data_depth,
                handlers=handlers)
    for i, w in enumerate(words):
        core.write_prog_word(i, w)
    core.data_mem[:len(data)] = data
    core.reset(start_pc)
    core.set_inputs(*inputs)
    core.release()
    status, ticks = core.run_until_halt(tick_budget)
    return RunResult(status, core.regs[0], ticks, core.error)
