"""eBPF instruction model, bit-exact encoding and a small text assembler.

Words are handled as Python ints holding the little-endian interpretation of
the 8 instruction bytes, so ``word & 0xff`` is the opcode byte and
``word >> 32`` is the (unsigned) immediate field.

Supported subset: ALU/ALU64 arithmetic and logic, NEG, byte swaps (``le``/``be``
forms of the END op), every JMP/JMP32 conditional, JA, CALL, EXIT,
LDX/ST/STX in the MEM mode for all four sizes, and LDDW.  Atomics, tail calls,
packet-access LD modes (ABS/IND), signed division and sign-extending moves or
loads are rejected as unknown opcodes.

Assembly syntax::

    .rule block_tftp          ; starts a new rule, labels are local to it
        ldxh r3, [r1+12]      ; memory operands are [reg+off] / [reg-off]
        jne r3, 0x0008, pass  ; jump targets are labels or +N / -N
        mov r0, 0
        exit
    pass:
        mov r0, 2
        exit
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

# instruction classes (3 LSBs of the opcode)
LD, LDX, ST, STX, ALU, JMP, JMP32, ALU64 = range(8)

# memory access sizes
SIZE_W, SIZE_H, SIZE_B, SIZE_DW = 0x00, 0x08, 0x10, 0x18
SIZE_BYTES = {SIZE_W: 4, SIZE_H: 2, SIZE_B: 1, SIZE_DW: 8}
MODE_IMM, MODE_MEM = 0x00, 0x60

SRC_K, SRC_X = 0x00, 0x08

ALU_OPS = {
    "add": 0x00, "sub": 0x10, "mul": 0x20, "div": 0x30, "or": 0x40,
    "and": 0x50, "lsh": 0x60, "rsh": 0x70, "neg": 0x80, "mod": 0x90,
    "xor": 0xA0, "mov": 0xB0, "arsh": 0xC0,
}
OP_END = 0xD0

JMP_OPS = {
    "jeq": 0x10, "jgt": 0x20, "jge": 0x30, "jset": 0x40, "jne": 0x50,
    "jsgt": 0x60, "jsge": 0x70, "jlt": 0xA0, "jle": 0xB0, "jslt": 0xC0,
    "jsle": 0xD0,
}
OP_JA, OP_CALL, OP_EXIT = 0x00, 0x80, 0x90

OPC_LDDW = LD | MODE_IMM | SIZE_DW  # 0x18
OPC_EXIT = JMP | OP_EXIT  # 0x95
OPC_CALL = JMP | OP_CALL  # 0x85
OPC_JA = JMP | OP_JA  # 0x05

NUM_REGS = 11
WORD_MASK = (1 << 64) - 1

_SIZE_SUFFIX = {SIZE_B: "b", SIZE_H: "h", SIZE_W: "w", SIZE_DW: "dw"}
_BITWISE = {"and", "or", "xor", "jset"}


class IsaError(ValueError):
    """Base class for encoding, decoding and assembly failures."""


class UnknownOpcode(IsaError):
    pass


class TruncatedWideImmediate(IsaError):
    pass


class BadRegister(IsaError):
    pass


class ParseError(IsaError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class UndefinedLabel(ParseError):
    pass


class JumpOutOfRange(ParseError):
    pass


class UnterminatedRule(IsaError):
    """A path through a rule leaves the rule's region without hitting EXIT."""


@dataclass(frozen=True)
class _OpInfo:
    mnemonic: str
    kind: str  # alu_k alu_x neg end ja jmp_k jmp_x call exit ldx st stx lddw
    size: int = 0  # bytes for memory ops


def _build_table() -> dict[int, _OpInfo]:
    table: dict[int, _OpInfo] = {}
    for cls, suffix in ((ALU64, ""), (ALU, "32")):
        for name, op in ALU_OPS.items():
            if name == "neg":
                table[cls | op] = _OpInfo(name + suffix, "neg")
                continue
            table[cls | op | SRC_K] = _OpInfo(name + suffix, "alu_k")
            table[cls | op | SRC_X] = _OpInfo(name + suffix, "alu_x")
    table[ALU | OP_END | SRC_K] = _OpInfo("le", "end")
    table[ALU | OP_END | SRC_X] = _OpInfo("be", "end")
    for cls, suffix in ((JMP, ""), (JMP32, "32")):
        for name, op in JMP_OPS.items():
            table[cls | op | SRC_K] = _OpInfo(name + suffix, "jmp_k")
            table[cls | op | SRC_X] = _OpInfo(name + suffix, "jmp_x")
    table[OPC_JA] = _OpInfo("ja", "ja")
    table[OPC_CALL] = _OpInfo("call", "call")
    table[OPC_EXIT] = _OpInfo("exit", "exit")
    for size, suffix in _SIZE_SUFFIX.items():
        nbytes = SIZE_BYTES[size]
        table[LDX | MODE_MEM | size] = _OpInfo("ldx" + suffix, "ldx", nbytes)
        table[ST | MODE_MEM | size] = _OpInfo("st" + suffix, "st", nbytes)
        table[STX | MODE_MEM | size] = _OpInfo("stx" + suffix, "stx", nbytes)
    table[OPC_LDDW] = _OpInfo("lddw", "lddw", 8)
    return table


OPCODES: dict[int, _OpInfo] = _build_table()
_BY_MNEMONIC: dict[tuple[str, str], int] = {}
for _opc, _info in OPCODES.items():
    if _info.kind == "end":
        continue
    _src = "x" if _info.kind in ("alu_x", "jmp_x") else "k"
    _BY_MNEMONIC[(_info.mnemonic, _src)] = _opc

# which fields each instruction kind actually uses; the rest must be zero
_USES = {
    "alu_k": {"dst", "imm"}, "alu_x": {"dst", "src"}, "neg": {"dst"},
    "end": {"dst", "imm"}, "ja": {"off"}, "jmp_k": {"dst", "off", "imm"},
    "jmp_x": {"dst", "src", "off"}, "call": {"imm"}, "exit": set(),
    "ldx": {"dst", "src", "off"}, "st": {"dst", "off", "imm"},
    "stx": {"dst", "src", "off"}, "lddw": {"dst", "imm"},
}


def _signed(value: int, bits: int) -> int:
    value &= (1 << bits) - 1
    return value - (1 << bits) if value >> (bits - 1) else value


@dataclass(frozen=True)
class Instruction:
    """One decoded eBPF instruction.

    ``imm`` is the signed 32-bit immediate, except for LDDW where it holds the
    full unsigned 64-bit constant spread over two program words.
    """

    opcode: int
    dst: int = 0
    src: int = 0
    off: int = 0
    imm: int = 0

    def __post_init__(self):
        info = OPCODES.get(self.opcode)
        if info is None:
            raise UnknownOpcode(f"unsupported opcode 0x{self.opcode:02x}")
        for reg in (self.dst, self.src):
            if not 0 <= reg < NUM_REGS:
                raise BadRegister(f"register r{reg} out of range")
        if not -(1 << 15) <= self.off < (1 << 15):
            raise IsaError(f"offset {self.off} does not fit 16 bits")
        if info.kind == "lddw":
            if not 0 <= self.imm <= WORD_MASK:
                raise IsaError(f"lddw immediate {self.imm:#x} out of range")
        elif not -(1 << 31) <= self.imm < (1 << 31):
            raise IsaError(f"immediate {self.imm} does not fit 32 bits")
        uses = _USES[info.kind]
        for name in ("dst", "src", "off", "imm"):
            if name not in uses and getattr(self, name) != 0:
                raise UnknownOpcode(
                    f"{info.mnemonic}: field {name} must be zero, got {getattr(self, name)}")
        if info.kind == "end" and self.imm not in (16, 32, 64):
            raise UnknownOpcode(f"byte swap width {self.imm} not in 16/32/64")

    @property
    def info(self) -> _OpInfo:
        return OPCODES[self.opcode]

    @property
    def cls(self) -> int:
        return self.opcode & 0x07

    @property
    def is_wide(self) -> bool:
        return self.opcode == OPC_LDDW

    @property
    def n_words(self) -> int:
        return 2 if self.is_wide else 1

    def __str__(self) -> str:
        return format_instruction(self)


def _pack(opcode: int, dst: int, src: int, off: int, imm: int) -> int:
    return (opcode | (dst << 8) | (src << 12) | ((off & 0xFFFF) << 16)
            | ((imm & 0xFFFFFFFF) << 32))


def encode(instr: Instruction) -> tuple[int, ...]:
    """Encode to one word, or two for LDDW (high half in the second imm)."""
    if instr.is_wide:
        lo = instr.imm & 0xFFFFFFFF
        hi = instr.imm >> 32
        return (_pack(instr.opcode, instr.dst, 0, 0, lo), _pack(0, 0, 0, 0, hi))
    return (_pack(instr.opcode, instr.dst, instr.src, instr.off, instr.imm),)


def decode(word: int, next_word: int | None = None) -> Instruction:
    opcode = word & 0xFF
    dst = (word >> 8) & 0xF
    src = (word >> 12) & 0xF
    off = _signed(word >> 16, 16)
    imm = _signed(word >> 32, 32)
    if opcode not in OPCODES:
        raise UnknownOpcode(f"unsupported opcode 0x{opcode:02x}")
    if dst >= NUM_REGS or src >= NUM_REGS:
        raise BadRegister(f"register index out of range in word {word:#018x}")
    if opcode == OPC_LDDW:
        if next_word is None:
            raise TruncatedWideImmediate("lddw without its second word")
        if next_word & 0xFFFFFFFF:
            raise UnknownOpcode("lddw second word must only carry the immediate")
        return Instruction(opcode, dst, src, off,
                           ((next_word >> 32) << 32) | (word >> 32))
    return Instruction(opcode, dst, src, off, imm)


def decode_words(words: Sequence[int]) -> Iterator[tuple[int, Instruction]]:
    """Yield ``(word_index, instruction)`` over a flat program."""
    i = 0
    while i < len(words):
        nxt = words[i + 1] if i + 1 < len(words) else None
        ins = decode(words[i], nxt)
        yield i, ins
        i += ins.n_words


def words_to_bytes(words: Iterable[int]) -> bytes:
    return b"".join(w.to_bytes(8, "little") for w in words)


def bytes_to_words(data: bytes) -> list[int]:
    if len(data) % 8:
        raise IsaError(f"bytecode length {len(data)} is not a multiple of 8")
    return [int.from_bytes(data[i:i + 8], "little") for i in range(0, len(data), 8)]


# ---------------------------------------------------------------------------
# program images

@dataclass(frozen=True)
class RuleMeta:
    """Location of one rule inside the shared program image."""

    rule_id: int
    start_word: int
    word_count: int
    name: str = ""

    @property
    def end_word(self) -> int:
        return self.start_word + self.word_count


@dataclass(frozen=True)
class ProgramImage:
    words: tuple[int, ...] = ()
    rules: tuple[RuleMeta, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(self.words))
        object.__setattr__(self, "rules", tuple(self.rules))
        cursor = 0
        for i, rule in enumerate(self.rules):
            if rule.rule_id != i:
                raise IsaError(f"rule ids must be 0..n-1 in order, got {rule.rule_id} at {i}")
            if rule.start_word != cursor or rule.word_count <= 0:
                raise IsaError(f"rule {rule.name or i} is not contiguous with its predecessor")
            cursor = rule.end_word
        if cursor != len(self.words):
            raise IsaError("rule regions do not cover the program words exactly")

    @classmethod
    def single(cls, words: Sequence[int], name: str = "rule0") -> ProgramImage:
        rules = (RuleMeta(0, 0, len(words), name),) if words else ()
        return cls(tuple(words), rules)

    def __len__(self) -> int:
        return len(self.words)

    def rule_words(self, rule: RuleMeta) -> tuple[int, ...]:
        return self.words[rule.start_word:rule.end_word]

    def to_bytes(self) -> bytes:
        return words_to_bytes(self.words)

    def check_rules(self) -> None:
        """Every control path of every rule must end in EXIT inside the rule."""
        for rule in self.rules:
            _check_terminates(self.words, rule)


def _check_terminates(words: Sequence[int], rule: RuleMeta) -> None:
    lo, hi = rule.start_word, rule.end_word
    seen: set[int] = set()
    todo = [lo]
    while todo:
        pc = todo.pop()
        if pc in seen:
            continue
        if not lo <= pc < hi:
            raise UnterminatedRule(
                f"rule {rule.name or rule.rule_id}: control reaches word {pc} "
                f"outside [{lo}, {hi})")
        seen.add(pc)
        nxt = words[pc + 1] if pc + 1 < hi else None
        try:
            ins = decode(words[pc], nxt)
        except TruncatedWideImmediate:
            raise UnterminatedRule(f"rule {rule.name}: lddw split at rule end") from None
        kind = ins.info.kind
        if kind == "exit":
            continue
        if kind == "ja":
            todo.append(pc + 1 + ins.off)
        elif kind in ("jmp_k", "jmp_x"):
            todo.extend((pc + 1, pc + 1 + ins.off))
        else:
            todo.append(pc + ins.n_words)


# ---------------------------------------------------------------------------
# text form

def _fmt_off(off: int) -> str:
    return f"{off:+d}"


def _fmt_mem(reg: int, off: int) -> str:
    return f"[r{reg}{off:+d}]"


def _fmt_imm(mnemonic: str, imm: int) -> str:
    base = mnemonic[:-2] if mnemonic.endswith("32") else mnemonic
    if base in _BITWISE and not 0 <= imm < 256:
        return f"{imm & 0xFFFFFFFF:#x}"
    return str(imm)


def format_instruction(ins: Instruction) -> str:
    info = ins.info
    m, kind = info.mnemonic, info.kind
    if kind == "alu_k":
        return f"{m} r{ins.dst}, {_fmt_imm(m, ins.imm)}"
    if kind == "alu_x":
        return f"{m} r{ins.dst}, r{ins.src}"
    if kind == "neg":
        return f"{m} r{ins.dst}"
    if kind == "end":
        return f"{m}{ins.imm} r{ins.dst}"
    if kind == "ja":
        return f"ja {_fmt_off(ins.off)}"
    if kind == "jmp_k":
        return f"{m} r{ins.dst}, {_fmt_imm(m, ins.imm)}, {_fmt_off(ins.off)}"
    if kind == "jmp_x":
        return f"{m} r{ins.dst}, r{ins.src}, {_fmt_off(ins.off)}"
    if kind == "call":
        return f"call {ins.imm}"
    if kind == "exit":
        return "exit"
    if kind == "ldx":
        return f"{m} r{ins.dst}, {_fmt_mem(ins.src, ins.off)}"
    if kind == "st":
        return f"{m} {_fmt_mem(ins.dst, ins.off)}, {ins.imm}"
    if kind == "stx":
        return f"{m} {_fmt_mem(ins.dst, ins.off)}, r{ins.src}"
    return f"lddw r{ins.dst}, {ins.imm:#x}"


def disassemble(image: ProgramImage | Sequence[int]) -> str:
    """Canonical listing; ``assemble(disassemble(img)).words == img.words``."""
    if not isinstance(image, ProgramImage):
        image = ProgramImage.single(tuple(image))
    lines: list[str] = []
    for rule in image.rules:
        lines.append(f".rule {rule.name or f'rule{rule.rule_id}'}")
        words = image.rule_words(rule)
        for _, ins in decode_words(words):
            lines.append(f"    {format_instruction(ins)}")
    return "\n".join(lines) + ("\n" if lines else "")


_REG_RE = re.compile(r"^r(\d+)$")
_MEM_RE = re.compile(r"^\[\s*r(\d+)\s*(?:([+-])\s*(\w+)\s*)?\]$")
_LABEL_RE = re.compile(r"^([A-Za-z_.$][\w.$]*)\s*:(.*)$")
_IDENT_RE = re.compile(r"^[A-Za-z_.$][\w.$]*$")


def _split_operands(text: str) -> list[str]:
    if not text.strip():
        return []
    return [part.strip() for part in text.split(",")]


class _Line:
    __slots__ = ("lineno", "mnemonic", "operands", "index")

    def __init__(self, lineno: int, mnemonic: str, operands: list[str], index: int):
        self.lineno, self.mnemonic, self.operands, self.index = lineno, mnemonic, operands, index


def _parse_int(tok: str, lineno: int) -> int:
    try:
        return int(tok, 0)
    except ValueError:
        raise ParseError(lineno, f"expected a number, got {tok!r}") from None


def _parse_reg(tok: str, lineno: int) -> int:
    m = _REG_RE.match(tok)
    if not m:
        raise ParseError(lineno, f"expected a register, got {tok!r}")
    reg = int(m.group(1))
    if reg >= NUM_REGS:
        raise ParseError(lineno, f"no such register r{reg}")
    return reg


def _parse_mem(tok: str, lineno: int) -> tuple[int, int]:
    m = _MEM_RE.match(tok)
    if not m:
        raise ParseError(lineno, f"expected a memory operand [rN+off], got {tok!r}")
    reg = int(m.group(1))
    if reg >= NUM_REGS:
        raise ParseError(lineno, f"no such register r{reg}")
    off = _parse_int(m.group(3), lineno) if m.group(3) else 0
    if m.group(2) == "-":
        off = -off
    if not -(1 << 15) <= off < (1 << 15):
        raise ParseError(lineno, f"memory offset {off} does not fit 16 bits")
    return reg, off


def _parse_imm32(tok: str, lineno: int) -> int:
    value = _parse_int(tok, lineno)
    if not -(1 << 31) <= value < (1 << 32):
        raise ParseError(lineno, f"immediate {tok} does not fit 32 bits")
    return _signed(value, 32)


def _is_reg(tok: str) -> bool:
    return bool(_REG_RE.match(tok))


def _expect(line: _Line, n: int) -> list[str]:
    if len(line.operands) != n:
        raise ParseError(line.lineno,
                         f"{line.mnemonic} takes {n} operand(s), got {len(line.operands)}")
    return line.operands


def _resolve_target(tok: str, line: _Line, labels: dict[str, int]) -> int:
    if _IDENT_RE.match(tok):
        if tok not in labels:
            raise UndefinedLabel(line.lineno, f"undefined label {tok!r}")
        off = labels[tok] - (line.index + 1)
    else:
        off = _parse_int(tok, line.lineno)
    if not -(1 << 15) <= off < (1 << 15):
        raise JumpOutOfRange(line.lineno, f"jump offset {off} does not fit 16 bits")
    return off


def _size_of(line: _Line) -> int:
    return 2 if line.mnemonic == "lddw" else 1


def _build(line: _Line, labels: dict[str, int]) -> Instruction:
    m, ln = line.mnemonic, line.lineno
    try:
        if m == "exit":
            _expect(line, 0)
            return Instruction(OPC_EXIT)
        if m == "call":
            (tok,) = _expect(line, 1)
            return Instruction(OPC_CALL, imm=_parse_imm32(tok, ln))
        if m == "ja":
            (tok,) = _expect(line, 1)
            return Instruction(OPC_JA, off=_resolve_target(tok, line, labels))
        if m == "lddw":
            reg, tok = _expect(line, 2)
            value = _parse_int(tok, ln)
            if not -(1 << 63) <= value <= WORD_MASK:
                raise ParseError(ln, f"lddw immediate {tok} does not fit 64 bits")
            return Instruction(OPC_LDDW, dst=_parse_reg(reg, ln), imm=value & WORD_MASK)
        if m[:2] in ("le", "be") and m[2:] in ("16", "32", "64"):
            (reg,) = _expect(line, 1)
            src = SRC_X if m.startswith("be") else SRC_K
            return Instruction(ALU | OP_END | src, dst=_parse_reg(reg, ln), imm=int(m[2:]))
        if m in ("neg", "neg32"):
            (reg,) = _expect(line, 1)
            return Instruction(_BY_MNEMONIC[(m, "k")], dst=_parse_reg(reg, ln))
        if m.startswith("ldx"):
            reg, mem = _expect(line, 2)
            base, off = _parse_mem(mem, ln)
            opc = _BY_MNEMONIC.get((m, "k"))
            if opc is None:
                raise ParseError(ln, f"unknown mnemonic {m!r}")
            return Instruction(opc, dst=_parse_reg(reg, ln), src=base, off=off)
        if m.startswith("stx"):
            mem, reg = _expect(line, 2)
            base, off = _parse_mem(mem, ln)
            opc = _BY_MNEMONIC.get((m, "k"))
            if opc is None:
                raise ParseError(ln, f"unknown mnemonic {m!r}")
            return Instruction(opc, dst=base, src=_parse_reg(reg, ln), off=off)
        if m in ("stb", "sth", "stw", "stdw"):
            mem, tok = _expect(line, 2)
            base, off = _parse_mem(mem, ln)
            return Instruction(_BY_MNEMONIC[(m, "k")], dst=base, off=off,
                               imm=_parse_imm32(tok, ln))
        if (m, "k") in _BY_MNEMONIC and OPCODES[_BY_MNEMONIC[(m, "k")]].kind == "jmp_k":
            reg, rhs, tok = _expect(line, 3)
            off = _resolve_target(tok, line, labels)
            if _is_reg(rhs):
                return Instruction(_BY_MNEMONIC[(m, "x")], dst=_parse_reg(reg, ln),
                                   src=_parse_reg(rhs, ln), off=off)
            return Instruction(_BY_MNEMONIC[(m, "k")], dst=_parse_reg(reg, ln), off=off,
                               imm=_parse_imm32(rhs, ln))
        if (m, "k") in _BY_MNEMONIC and OPCODES[_BY_MNEMONIC[(m, "k")]].kind == "alu_k":
            reg, rhs = _expect(line, 2)
            if _is_reg(rhs):
                return Instruction(_BY_MNEMONIC[(m, "x")], dst=_parse_reg(reg, ln),
                                   src=_parse_reg(rhs, ln))
            return Instruction(_BY_MNEMONIC[(m, "k")], dst=_parse_reg(reg, ln),
                               imm=_parse_imm32(rhs, ln))
    except ParseError:
        raise
    except IsaError as exc:
        raise ParseError(ln, str(exc)) from None
    raise ParseError(ln, f"unknown mnemonic {m!r}")


def assemble(text: str, *, check: bool = True) -> ProgramImage:
    """Assemble a listing into a ProgramImage.

    Each ``.rule <name>`` directive opens a new rule; instructions before the
    first directive form an implicit rule named ``rule0``.  Labels are scoped
    to the rule that defines them.
    """
    # pass 1: tokenise, assign word indices, collect labels per rule
    groups: list[tuple[str, int, list[_Line], dict[str, int]]] = []
    index = 0

    def open_rule(name: str, lineno: int):
        groups.append((name, lineno, [], {}))

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = re.split(r"[#;]", raw, maxsplit=1)[0].strip()
        if not line:
            continue
        if line.startswith(".rule"):
            parts = line.split()
            if len(parts) != 2 or parts[0] != ".rule":
                raise ParseError(lineno, "expected '.rule <name>'")
            if groups and not groups[-1][2]:
                raise ParseError(groups[-1][1], f"rule {groups[-1][0]!r} is empty")
            open_rule(parts[1], lineno)
            continue
        if line.startswith("."):
            raise ParseError(lineno, f"unknown directive {line.split()[0]!r}")
        while True:
            lm = _LABEL_RE.match(line)
            if not lm:
                break
            if not groups:
                open_rule("rule0", lineno)
            labels = groups[-1][3]
            if lm.group(1) in labels:
                raise ParseError(lineno, f"duplicate label {lm.group(1)!r}")
            labels[lm.group(1)] = index
            line = lm.group(2).strip()
        if not line:
            continue
        if not groups:
            open_rule("rule0", lineno)
        parts = line.split(None, 1)
        mnemonic = parts[0].lower()
        operands = _split_operands(parts[1] if len(parts) > 1 else "")
        entry = _Line(lineno, mnemonic, operands, index)
        groups[-1][2].append(entry)
        index += _size_of(entry)
    if groups and not groups[-1][2]:
        raise ParseError(groups[-1][1], f"rule {groups[-1][0]!r} is empty")

    names = [g[0] for g in groups]
    dupes = {n for n in names if names.count(n) > 1}
    if dupes:
        raise ParseError(groups[0][1], f"duplicate rule name(s): {sorted(dupes)}")

    # pass 2: encode
    words: list[int] = []
    rules: list[RuleMeta] = []
    for rule_id, (name, _, lines, labels) in enumerate(groups):
        start = len(words)
        for entry in lines:
            words.extend(encode(_build(entry, labels)))
        rules.append(RuleMeta(rule_id, start, len(words) - start, name))
    image = ProgramImage(tuple(words), tuple(rules))
    if check:
        image.check_rules()
    return image


# ---------------------------------------------------------------------------
# files: flat little-endian bytecode plus a "<name> <start> <count>" sidecar

def write_bytecode(path: str | Path, image: ProgramImage) -> None:
    Path(path).write_bytes(image.to_bytes())


def write_rule_index(path: str | Path, image: ProgramImage) -> None:
    lines = [f"{r.name or f'rule{r.rule_id}'} {r.start_word} {r.word_count}"
             for r in image.rules]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_rule_index(path: str | Path) -> list[RuleMeta]:
    rules = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        parts = raw.split()
        if len(parts) != 3:
            raise ParseError(lineno, "expected '<rule_name> <start_word> <word_count>'")
        rules.append(RuleMeta(len(rules), int(parts[1]), int(parts[2]), parts[0]))
    return rules


def load_bytecode(path: str | Path, index_path: str | Path | None = None) -> ProgramImage:
    words = bytes_to_words(Path(path).read_bytes())
    if index_path is None:
        return ProgramImage.single(words)
    return ProgramImage(tuple(words), tuple(read_rule_index(index_path)))
