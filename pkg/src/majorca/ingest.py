"""Gadget ingestion: assembly subset parser, corpus files, raw-image back-scan.

Two paths produce RawGadgets: a textual corpus (one gadget per line, any
supported architecture) and a byte-level back-scan of a flat x86 image that
retries a decode at every offset within a fixed depth before each terminator.
"""

import re
from dataclasses import dataclass, field

from .errors import AsmParseError, CorpusError, UnsupportedArchError
from . import machine as m
from .machine import (
    MoveReg, LoadImm, Binop, ArithImm, LoadMem, StoreMem, StoreImm,
    ArithFromMem, ArithToMem, AdjustSP, Term,
)

DEFAULT_SCAN_DEPTH = 40

HALTING_MNEMONICS = {"hlt", "retf", "retw", "sti", "cli", "in", "out"}

_BINOP_MNEMONICS = {"add": "add", "sub": "sub", "xor": "xor", "and": "and", "or": "or"}
_MIPS_BINOPS = {"addu": "add", "subu": "sub", "xor": "xor", "and": "and", "or": "or"}
_PTR_WIDTHS = {"byte": 1, "word": 2, "dword": 4, "qword": 8}


@dataclass
class RawGadget:
    address: int
    asm_text: str
    micro_ops: tuple
    raw_bytes: bytes = None


@dataclass
class Corpus:
    profile: object
    gadgets: list
    base: int = 0
    writable: list = field(default_factory=list)  # [(start, end)] half-open
    symbols: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Number / operand helpers

def _parse_int(text, line=None):
    text = text.strip()
    neg = text.startswith("-")
    if neg:
        text = text[1:].strip()
    try:
        if text.lower().startswith("0x"):
            value = int(text, 16)
        elif re.fullmatch(r"[0-9a-fA-F]+h", text):
            value = int(text[:-1], 16)
        else:
            value = int(text, 10)
    except ValueError:
        raise AsmParseError(f"bad number {text!r}", line) from None
    return -value if neg else value


def _hex(value):
    return f"-0x{-value:x}" if value < 0 else f"0x{value:x}"


# ---------------------------------------------------------------------------
# x86 text parsing

_MEM_RE = re.compile(
    r"^(?:(byte|word|dword|qword)\s+ptr\s+)?\[\s*([a-z0-9]+)\s*(?:([+-])\s*(0x[0-9a-f]+|[0-9a-f]+h|\d+)\s*)?\]$"
)


def _parse_x86_operand(profile, text, line):
    text = text.strip().lower()
    mm = _MEM_RE.match(text)
    if mm:
        size, base, sign, disp = mm.groups()
        if not profile.is_register(base):
            raise AsmParseError(f"unknown base register {base!r}", line)
        off = _parse_int(disp, line) if disp else 0
        if sign == "-":
            off = -off
        width = _PTR_WIDTHS[size] if size else None
        return ("mem", base, off, width)
    if profile.is_register(text):
        return ("reg", text)
    return ("imm", _parse_int(text, line))


def _x86_instruction(profile, mnem, ops, line):
    word = profile.word_bytes

    def reg_width(name):
        return profile.reg_width(name)

    if mnem in HALTING_MNEMONICS:
        return [Term(m.HALT)]
    if mnem == "nop":
        return []
    if mnem == "ret":
        if ops:
            raise AsmParseError("ret with immediate is unsupported", line)
        return [Term(m.RET)]
    if mnem == "syscall":
        return [Term(m.SYSCALL)]
    if mnem == "int":
        if len(ops) != 1 or ops[0][0] != "imm":
            raise AsmParseError("int expects an immediate", line)
        return [Term(m.INT, number=ops[0][1] & 0xFF)]
    if mnem in ("jmp", "call"):
        if len(ops) != 1:
            raise AsmParseError(f"{mnem} expects one operand", line)
        op = ops[0]
        if op[0] == "reg":
            kind = m.JMP_REG if mnem == "jmp" else m.CALL_REG
            return [Term(kind, reg=op[1])]
        if op[0] == "mem":
            kind = m.JMP_MEM if mnem == "jmp" else m.CALL_MEM
            return [Term(kind, reg=op[1], offset=op[2])]
        raise AsmParseError(f"{mnem} to immediate is unsupported", line)
    if mnem == "pop":
        (kind, reg) = ops[0][:2] if ops else (None, None)
        if len(ops) != 1 or kind != "reg":
            raise AsmParseError("pop expects a register", line)
        return [LoadMem(reg, profile.sp, 0, reg_width(reg)), AdjustSP(word)]
    if mnem == "push":
        if len(ops) != 1 or ops[0][0] != "reg":
            raise AsmParseError("push expects a register", line)
        reg = ops[0][1]
        return [StoreMem(profile.sp, -word, reg, reg_width(reg)), AdjustSP(-word)]
    if mnem == "pushad":
        if profile.arch_id != m.X86_32:
            raise AsmParseError("pushad is 32-bit only", line)
        seq = []
        order = ("eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi")
        for i, reg in enumerate(order):
            seq.append(StoreMem(profile.sp, -4 * (i + 1), reg, 4))
        seq.append(AdjustSP(-32))
        return seq
    if mnem == "leave":
        bp = "rbp" if profile.arch_id == m.X86_64 else "ebp"
        return [MoveReg(profile.sp, bp), LoadMem(bp, profile.sp, 0, word), AdjustSP(word)]
    if mnem == "neg":
        if len(ops) != 1 or ops[0][0] != "reg":
            raise AsmParseError("neg expects a register", line)
        reg = ops[0][1]
        return [Binop("neg", reg, reg, reg)]
    if mnem in ("inc", "dec"):
        if len(ops) != 1 or ops[0][0] != "reg":
            raise AsmParseError(f"{mnem} expects a register", line)
        reg = ops[0][1]
        return [ArithImm("add" if mnem == "inc" else "sub", reg, reg, 1)]
    if mnem == "mov":
        if len(ops) != 2:
            raise AsmParseError("mov expects two operands", line)
        dst, src = ops
        if dst[0] == "reg" and src[0] == "reg":
            return [MoveReg(dst[1], src[1])]
        if dst[0] == "reg" and src[0] == "imm":
            return [LoadImm(dst[1], src[1])]
        if dst[0] == "reg" and src[0] == "mem":
            width = src[3] or reg_width(dst[1])
            if width != reg_width(dst[1]):
                raise AsmParseError("mov size mismatch", line)
            return [LoadMem(dst[1], src[1], src[2], width)]
        if dst[0] == "mem" and src[0] == "reg":
            width = dst[3] or reg_width(src[1])
            if width != reg_width(src[1]):
                raise AsmParseError("mov size mismatch", line)
            return [StoreMem(dst[1], dst[2], src[1], width)]
        if dst[0] == "mem" and src[0] == "imm":
            if dst[3] is None:
                raise AsmParseError("immediate store needs an explicit size", line)
            return [StoreImm(dst[1], dst[2], src[1], dst[3])]
        raise AsmParseError("unsupported mov form", line)
    if mnem in _BINOP_MNEMONICS:
        if len(ops) != 2:
            raise AsmParseError(f"{mnem} expects two operands", line)
        op = _BINOP_MNEMONICS[mnem]
        dst, src = ops
        if dst[0] == "reg" and src[0] == "reg":
            return [Binop(op, dst[1], dst[1], src[1])]
        if dst[0] == "reg" and src[0] == "imm":
            if dst[1] == profile.sp and op in ("add", "sub"):
                return [AdjustSP(src[1] if op == "add" else -src[1])]
            return [ArithImm(op, dst[1], dst[1], src[1])]
        if dst[0] == "reg" and src[0] == "mem":
            width = src[3] or reg_width(dst[1])
            return [ArithFromMem(op, dst[1], src[1], src[2], width)]
        if dst[0] == "mem" and src[0] == "reg":
            width = dst[3] or reg_width(src[1])
            return [ArithToMem(op, dst[1], dst[2], src[1], width)]
        raise AsmParseError(f"unsupported {mnem} form", line)
    raise AsmParseError(f"unsupported mnemonic {mnem!r}", line)


# ---------------------------------------------------------------------------
# MIPS text parsing

_MIPS_MEM_RE = re.compile(r"^(?:(-?(?:0x[0-9a-f]+|[0-9a-f]+h|\d+))\s*)?\(\s*\$([a-z0-9]+)\s*\)$")


def _mips_reg(profile, text, line):
    text = text.strip().lower()
    if not text.startswith("$"):
        raise AsmParseError(f"expected $register, got {text!r}", line)
    name = text[1:]
    if name == "s8":
        name = "fp"
    if not profile.is_register(name):
        raise AsmParseError(f"unknown register {text!r}", line)
    return name


def _mips_instruction(profile, mnem, args, line):
    if mnem == "nop":
        return []
    if mnem == "syscall":
        return [Term(m.SYSCALL)]
    if mnem == "jr":
        return [Term(m.JMP_REG, reg=_mips_reg(profile, args[0], line))]
    if mnem == "jalr":
        return [Term(m.CALL_REG, reg=_mips_reg(profile, args[-1], line))]
    if mnem == "break":
        return [Term(m.HALT)]
    if mnem in ("lw", "sw"):
        if len(args) != 2:
            raise AsmParseError(f"{mnem} expects two operands", line)
        rt = _mips_reg(profile, args[0], line)
        mm = _MIPS_MEM_RE.match(args[1].strip().lower())
        if not mm:
            raise AsmParseError(f"bad memory operand {args[1]!r}", line)
        off = _parse_int(mm.group(1), line) if mm.group(1) else 0
        base = mm.group(2)
        if base == "s8":
            base = "fp"
        if not profile.is_register(base):
            raise AsmParseError(f"unknown base register {base!r}", line)
        if mnem == "lw":
            return [LoadMem(rt, base, off, 4)]
        return [StoreMem(base, off, rt, 4)]
    if mnem == "move":
        return [MoveReg(_mips_reg(profile, args[0], line), _mips_reg(profile, args[1], line))]
    if mnem == "li":
        return [LoadImm(_mips_reg(profile, args[0], line), _parse_int(args[1], line))]
    if mnem == "addiu":
        dst = _mips_reg(profile, args[0], line)
        src = _mips_reg(profile, args[1], line)
        imm = _parse_int(args[2], line)
        if dst == profile.sp and src == profile.sp:
            return [AdjustSP(imm)]
        return [ArithImm("add", dst, src, imm)]
    if mnem == "sltiu":
        dst = _mips_reg(profile, args[0], line)
        src = _mips_reg(profile, args[1], line)
        return [ArithImm("sltu", dst, src, _parse_int(args[2], line))]
    if mnem in _MIPS_BINOPS:
        dst = _mips_reg(profile, args[0], line)
        s = _mips_reg(profile, args[1], line)
        t = _mips_reg(profile, args[2], line)
        return [Binop(_MIPS_BINOPS[mnem], dst, s, t)]
    if mnem == "negu":
        dst = _mips_reg(profile, args[0], line)
        src = _mips_reg(profile, args[1], line)
        return [Binop("neg", dst, src, src)]
    raise AsmParseError(f"unsupported mnemonic {mnem!r}", line)


def _split_operands(rest):
    # split on commas outside parentheses/brackets
    parts, depth, cur = [], 0, []
    for ch in rest:
        if ch in "([":
            depth += 1
        elif ch in ")]":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    if cur:
        parts.append("".join(cur))
    return [p.strip() for p in parts if p.strip()]


def decode_asm(profile, asm_text, line=None):
    """Decode one gadget's assembly text into a micro-op list.

    Instructions are semicolon separated.  The list ends with exactly one
    terminator; a trailing MIPS delay-slot instruction after jr/jalr is
    hoisted before the branch, reflecting actual execution order.
    """
    instructions = [s.strip() for s in asm_text.split(";") if s.strip()]
    if not instructions:
        raise AsmParseError("empty gadget", line)
    units = []
    for text in instructions:
        parts = text.split(None, 1)
        mnem = parts[0].lower()
        rest = parts[1] if len(parts) > 1 else ""
        ops_text = _split_operands(rest)
        if profile.arch_id == m.MIPS32BE:
            units.append(_mips_instruction(profile, mnem, ops_text, line))
        else:
            operands = [_parse_x86_operand(profile, o, line) for o in ops_text]
            units.append(_x86_instruction(profile, mnem, operands, line))

    term_indices = [i for i, unit in enumerate(units)
                    if any(m.is_terminator(op) for op in unit)]
    if not term_indices:
        raise AsmParseError("gadget lacks a terminator instruction", line)
    if len(term_indices) > 1:
        raise AsmParseError("multiple terminator instructions", line)
    ti = term_indices[0]
    term = units[ti][-1]
    trailing = units[ti + 1:]
    if trailing:
        # one delay-slot instruction may follow jr/jalr on MIPS; it executes first
        if (profile.arch_id != m.MIPS32BE or term.kind not in (m.JMP_REG, m.CALL_REG)
                or len(trailing) != 1):
            raise AsmParseError("instructions after the terminator", line)
    micro = []
    for unit in units[:ti]:
        micro.extend(unit)
    for unit in trailing:
        micro.extend(unit)
    micro.append(term)
    return micro


# ---------------------------------------------------------------------------
# Rendering micro-ops back to canonical text

def _x86_mem(reg, off, width=None):
    size = {1: "byte ptr ", 2: "word ptr ", 4: "dword ptr ", 8: "qword ptr "}[width] if width else ""
    if off:
        sign = "+" if off >= 0 else "-"
        return f"{size}[{reg}{sign}{_hex(abs(off))}]"
    return f"{size}[{reg}]"


def _render_x86(profile, op):
    if isinstance(op, MoveReg):
        return f"mov {op.dst}, {op.src}"
    if isinstance(op, LoadImm):
        return f"mov {op.dst}, {_hex(op.imm)}"
    if isinstance(op, Binop):
        if op.op == "neg":
            return f"neg {op.dst}"
        if op.dst != op.src1:
            raise AsmParseError(f"unrenderable x86 binop {op!r}")
        return f"{op.op} {op.dst}, {op.src2}"
    if isinstance(op, ArithImm):
        if op.dst != op.src:
            raise AsmParseError(f"unrenderable x86 arith-imm {op!r}")
        return f"{op.op} {op.dst}, {_hex(op.imm)}"
    if isinstance(op, LoadMem):
        return f"mov {op.dst}, {_x86_mem(op.addr_reg, op.offset)}"
    if isinstance(op, StoreMem):
        return f"mov {_x86_mem(op.addr_reg, op.offset)}, {op.src}"
    if isinstance(op, StoreImm):
        return f"mov {_x86_mem(op.addr_reg, op.offset, op.width)}, {_hex(op.imm)}"
    if isinstance(op, ArithFromMem):
        return f"{op.op} {op.dst}, {_x86_mem(op.addr_reg, op.offset)}"
    if isinstance(op, ArithToMem):
        return f"{op.op} {_x86_mem(op.addr_reg, op.offset)}, {op.src}"
    if isinstance(op, AdjustSP):
        if op.delta >= 0:
            return f"add {profile.sp}, {_hex(op.delta)}"
        return f"sub {profile.sp}, {_hex(-op.delta)}"
    if isinstance(op, Term):
        return {
            m.RET: "ret",
            m.SYSCALL: "syscall",
            m.HALT: "hlt",
        }.get(op.kind) or {
            m.JMP_REG: f"jmp {op.reg}",
            m.CALL_REG: f"call {op.reg}",
            m.JMP_MEM: f"jmp {_x86_mem(op.reg, op.offset)}",
            m.CALL_MEM: f"call {_x86_mem(op.reg, op.offset)}",
            m.INT: f"int {_hex(op.number or 0)}",
        }[op.kind]
    raise AsmParseError(f"unrenderable micro-op {op!r}")


def _render_mips(profile, op):
    if isinstance(op, MoveReg):
        return f"move ${op.dst}, ${op.src}"
    if isinstance(op, LoadImm):
        return f"li ${op.dst}, {_hex(op.imm)}"
    if isinstance(op, Binop):
        if op.op == "neg":
            return f"negu ${op.dst}, ${op.src1}"
        name = {v: k for k, v in _MIPS_BINOPS.items()}[op.op]
        return f"{name} ${op.dst}, ${op.src1}, ${op.src2}"
    if isinstance(op, ArithImm):
        if op.op == "sltu":
            return f"sltiu ${op.dst}, ${op.src}, {_hex(op.imm)}"
        if op.op == "add":
            return f"addiu ${op.dst}, ${op.src}, {_hex(op.imm)}"
        raise AsmParseError(f"unrenderable mips arith-imm {op!r}")
    if isinstance(op, LoadMem):
        return f"lw ${op.dst}, {_hex(op.offset)}(${op.addr_reg})"
    if isinstance(op, StoreMem):
        return f"sw ${op.src}, {_hex(op.offset)}(${op.addr_reg})"
    if isinstance(op, AdjustSP):
        return f"addiu $sp, $sp, {_hex(op.delta)}"
    if isinstance(op, Term):
        if op.kind == m.SYSCALL:
            return "syscall"
        if op.kind == m.JMP_REG:
            return f"jr ${op.reg}"
        if op.kind == m.CALL_REG:
            return f"jalr ${op.reg}"
        if op.kind == m.HALT:
            return "break"
    raise AsmParseError(f"unrenderable micro-op {op!r}")


def _resugar_x86(profile, ops):
    """Collapse decoded expansions back to pop/push/leave/pushad mnemonics."""
    word = profile.word_bytes
    bp = "rbp" if profile.arch_id == m.X86_64 else "ebp"
    pushad = tuple(
        StoreMem("esp", -4 * (i + 1), r, 4)
        for i, r in enumerate(("eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi"))
    ) + (AdjustSP(-32),)
    out = []
    i = 0
    while i < len(ops):
        op = ops[i]
        pair = tuple(ops[i:i + 2])
        if len(pair) == 2 and pair == (LoadMem(getattr(op, "dst", ""), profile.sp, 0, word),
                                       AdjustSP(word)) and profile.is_register(op.dst):
            out.append(f"pop {op.dst}")
            i += 2
            continue
        if (isinstance(op, StoreMem)
                and pair == (StoreMem(profile.sp, -word, op.src, word), AdjustSP(-word))):
            out.append(f"push {op.src}")
            i += 2
            continue
        if tuple(ops[i:i + 3]) == (MoveReg(profile.sp, bp), LoadMem(bp, profile.sp, 0, word),
                                   AdjustSP(word)):
            out.append("leave")
            i += 3
            continue
        if profile.arch_id == m.X86_32 and tuple(ops[i:i + 9]) == pushad:
            out.append("pushad")
            i += 9
            continue
        out.append(_render_x86(profile, op))
        i += 1
    return " ; ".join(out)


def render_asm(profile, micro_ops):
    """Canonical text for a micro-op list; inverse of decode_asm on its output."""
    if profile.arch_id == m.MIPS32BE:
        return " ; ".join(_render_mips(profile, op) for op in micro_ops)
    return _resugar_x86(profile, micro_ops)


# ---------------------------------------------------------------------------
# Corpus files

_HEADER_RE = re.compile(r"^(arch|base|writable|symbol)\s*=\s*(.+)$")
_GADGET_RE = re.compile(r"^(0x[0-9a-fA-F]+)\s*:\s*(.+)$")


def parse_corpus(text, lenient=False):
    """Parse a corpus file into (Corpus).  Header lines precede gadget lines."""
    profile = None
    base = 0
    writable = []
    symbols = {}
    gadgets = []
    warnings = []
    in_body = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        hm = _HEADER_RE.match(line)
        if hm and not in_body:
            key, value = hm.group(1), hm.group(2).strip()
            if key == "arch":
                profile = m.make_arch_profile(value)
            elif key == "base":
                base = _parse_int(value, lineno)
            elif key == "writable":
                lo, _, hi = value.partition("-")
                if not hi:
                    raise CorpusError(f"line {lineno}: writable wants 0xLO-0xHI")
                writable.append((_parse_int(lo, lineno), _parse_int(hi, lineno)))
            elif key == "symbol":
                name, _, addr = value.partition(":")
                if not addr:
                    raise CorpusError(f"line {lineno}: symbol wants name:0xADDR")
                symbols[name.strip()] = _parse_int(addr, lineno)
            continue
        gm = _GADGET_RE.match(line)
        if gm:
            if profile is None:
                raise CorpusError(f"line {lineno}: gadget before arch= header")
            in_body = True
            address = int(gm.group(1), 16)
            try:
                micro = decode_asm(profile, gm.group(2), line=lineno)
            except AsmParseError as exc:
                if lenient:
                    warnings.append(f"line {lineno}: {exc}")
                    continue
                raise
            gadgets.append(RawGadget(address, render_asm(profile, micro), tuple(micro)))
            continue
        raise CorpusError(f"line {lineno}: unrecognized line {line!r}")
    if profile is None:
        raise CorpusError("corpus has no arch= header")
    return Corpus(profile, gadgets, base, writable, symbols, warnings)


# ---------------------------------------------------------------------------
# x86 raw-image back-scan

_X86_REG64 = ("rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi",
              "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15")
_X86_REG32_64 = ("eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi",
                 "r8d", "r9d", "r10d", "r11d", "r12d", "r13d", "r14d", "r15d")
_X86_REG32 = ("eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi")
_X86_REG8 = ("al", "cl", "dl", "bl")

_HALTING_BYTES = {0xF4, 0xCB, 0xCA, 0xFA, 0xFB, 0xE4, 0xE5, 0xEC, 0xED, 0xE6, 0xE7, 0xEE, 0xEF}

_GRP1_OPS = {0: "add", 1: "or", 4: "and", 5: "sub", 6: "xor"}
_ARITH_RM_R = {0x01: "add", 0x09: "or", 0x21: "and", 0x29: "sub", 0x31: "xor"}
_ARITH_R_RM = {0x03: "add", 0x0B: "or", 0x23: "and", 0x2B: "sub", 0x33: "xor"}


class _Decoder:
    """Minimal linear x86 decoder for the supported gadget subset."""

    def __init__(self, profile, buf):
        self.profile = profile
        self.buf = buf
        self.pos = 0
        self.mode64 = profile.arch_id == m.X86_64

    def u8(self):
        if self.pos >= len(self.buf):
            raise AsmParseError("truncated instruction")
        b = self.buf[self.pos]
        self.pos += 1
        return b

    def imm(self, size, signed=True):
        if self.pos + size > len(self.buf):
            raise AsmParseError("truncated immediate")
        v = int.from_bytes(self.buf[self.pos:self.pos + size], "little", signed=signed)
        self.pos += size
        return v

    def reg_name(self, idx, width):
        if self.mode64:
            table = _X86_REG64 if width == 8 else _X86_REG32_64 if width == 4 else None
            if width == 1:
                if idx < 4:
                    return _X86_REG8[idx]
                raise AsmParseError("unsupported 8-bit register")
            if table is None:
                raise AsmParseError("unsupported operand width")
            return table[idx]
        if width == 4:
            return _X86_REG32[idx]
        if width == 1 and idx < 4:
            return _X86_REG8[idx]
        raise AsmParseError("unsupported operand width")

    def modrm(self, rex, width):
        """Decode a modrm byte into ('reg', name) or ('mem', base, disp) plus /reg field."""
        b = self.u8()
        mod, reg, rm = b >> 6, (b >> 3) & 7, b & 7
        if rex & 4:
            reg += 8
        if mod == 3:
            name = self.reg_name(rm + (8 if rex & 1 else 0), width)
            return ("reg", name, 0), reg
        # memory operand
        base_idx = rm
        if rm == 4:  # SIB
            sib = self.u8()
            scale, index, base = sib >> 6, (sib >> 3) & 7, sib & 7
            if index != 4:
                raise AsmParseError("indexed addressing unsupported")
            if base == 5 and mod == 0:
                raise AsmParseError("absolute addressing unsupported")
            base_idx = base
        elif rm == 5 and mod == 0:
            raise AsmParseError("rip-relative/absolute addressing unsupported")
        disp = 0
        if mod == 1:
            disp = self.imm(1)
        elif mod == 2:
            disp = self.imm(4)
        base_name = self.reg_name(base_idx + (8 if rex & 1 else 0), 8 if self.mode64 else 4)
        return ("mem", base_name, disp), reg

    def instruction(self):
        """Decode one instruction; returns a micro-op list (possibly empty for nop)."""
        start = self.pos
        b = self.u8()
        word = self.profile.word_bytes

        if not self.mode64 and 0x40 <= b <= 0x4F:  # inc/dec r32 in 32-bit mode
            idx = b & 7
            op = "add" if b < 0x48 else "sub"
            reg = self.reg_name(idx, 4)
            return [ArithImm(op, reg, reg, 1)]

        rex = 0
        if self.mode64 and 0x40 <= b <= 0x4F:
            rex = b & 0xF
            b = self.u8()
        wide = 8 if (self.mode64 and rex & 8) else 4

        if b == 0x66:
            nxt = self.u8()
            if nxt == 0xC3:
                return [Term(m.HALT)]  # retw
            raise AsmParseError("operand-size prefix unsupported")
        if b in _HALTING_BYTES:
            return [Term(m.HALT)]
        if b == 0x90:
            return []
        if b == 0xC3:
            return [Term(m.RET)]
        if b == 0xC9:  # leave
            bp = "rbp" if self.mode64 else "ebp"
            return [MoveReg(self.profile.sp, bp), LoadMem(bp, self.profile.sp, 0, word),
                    AdjustSP(word)]
        if b == 0x0F:
            if self.u8() == 0x05 and self.mode64:
                return [Term(m.SYSCALL)]
            raise AsmParseError("unsupported 0f opcode")
        if b == 0xCD:
            return [Term(m.INT, number=self.u8())]
        if b == 0x60 and not self.mode64:
            seq = []
            for i, reg in enumerate(("eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi")):
                seq.append(StoreMem("esp", -4 * (i + 1), reg, 4))
            seq.append(AdjustSP(-32))
            return seq
        if 0x50 <= b <= 0x57:  # push
            reg = self.reg_name((b & 7) + (8 if rex & 1 else 0), word)
            return [StoreMem(self.profile.sp, -word, reg, word), AdjustSP(-word)]
        if 0x58 <= b <= 0x5F:  # pop
            reg = self.reg_name((b & 7) + (8 if rex & 1 else 0), word)
            return [LoadMem(reg, self.profile.sp, 0, word), AdjustSP(word)]
        if 0xB8 <= b <= 0xBF:  # mov r, imm
            idx = (b & 7) + (8 if rex & 1 else 0)
            if wide == 8:
                return [LoadImm(self.reg_name(idx, 8), self.imm(8, signed=False))]
            return [LoadImm(self.reg_name(idx, 4), self.imm(4, signed=False))]
        if b in (0x89, 0x8B):  # mov rm,r / r,rm
            operand, reg_idx = self.modrm(rex, wide)
            reg = self.reg_name(reg_idx, wide)
            if operand[0] == "reg":
                return [MoveReg(operand[1], reg)] if b == 0x89 else [MoveReg(reg, operand[1])]
            base, disp = operand[1], operand[2]
            if b == 0x89:
                return [StoreMem(base, disp, reg, wide)]
            return [LoadMem(reg, base, disp, wide)]
        if b in _ARITH_RM_R or b in _ARITH_R_RM:
            op = _ARITH_RM_R.get(b) or _ARITH_R_RM[b]
            operand, reg_idx = self.modrm(rex, wide)
            reg = self.reg_name(reg_idx, wide)
            if operand[0] == "reg":
                if b in _ARITH_RM_R:
                    return [Binop(op, operand[1], operand[1], reg)]
                return [Binop(op, reg, reg, operand[1])]
            base, disp = operand[1], operand[2]
            if b in _ARITH_RM_R:
                return [ArithToMem(op, base, disp, reg, wide)]
            return [ArithFromMem(op, reg, base, disp, wide)]
        if b in (0x83, 0x81):  # group-1 imm
            operand, ext = self.modrm(rex, wide)
            if ext not in _GRP1_OPS:
                raise AsmParseError("unsupported group-1 operation")
            op = _GRP1_OPS[ext]
            value = self.imm(1) if b == 0x83 else self.imm(4)
            if operand[0] != "reg":
                raise AsmParseError("group-1 on memory unsupported")
            reg = operand[1]
            if self.profile.full_reg(reg) == self.profile.sp and op in ("add", "sub"):
                if self.profile.reg_width(reg) == word:
                    return [AdjustSP(value if op == "add" else -value)]
            return [ArithImm(op, reg, reg, value)]
        if b == 0xC7:
            operand, ext = self.modrm(rex, wide)
            if ext != 0:
                raise AsmParseError("unsupported c7 extension")
            value = self.imm(4)
            if operand[0] == "reg":
                return [LoadImm(operand[1], value & ((1 << (8 * wide)) - 1))]
            return [StoreImm(operand[1], operand[2], value & 0xFFFFFFFF, 4)]
        if b == 0xC6:
            operand, ext = self.modrm(rex, 1)
            if ext != 0:
                raise AsmParseError("unsupported c6 extension")
            value = self.imm(1, signed=False)
            if operand[0] == "reg":
                return [LoadImm(operand[1], value)]
            return [StoreImm(operand[1], operand[2], value, 1)]
        if b == 0xF7:
            operand, ext = self.modrm(rex, wide)
            if ext != 3 or operand[0] != "reg":
                raise AsmParseError("unsupported f7 form")
            reg = operand[1]
            return [Binop("neg", reg, reg, reg)]
        if b == 0xFF:
            operand, ext = self.modrm(rex, wide)
            if ext == 0 and operand[0] == "reg":
                return [ArithImm("add", operand[1], operand[1], 1)]
            if ext == 1 and operand[0] == "reg":
                return [ArithImm("sub", operand[1], operand[1], 1)]
            if ext in (2, 4):
                kind_reg = m.CALL_REG if ext == 2 else m.JMP_REG
                kind_mem = m.CALL_MEM if ext == 2 else m.JMP_MEM
                if operand[0] == "reg":
                    # indirect jumps/calls are word sized regardless of REX.W
                    name = operand[1]
                    if self.profile.reg_width(name) != word:
                        full = self.profile.full_reg(name)
                        name = full
                    return [Term(kind_reg, reg=name)]
                return [Term(kind_mem, reg=operand[1], offset=operand[2])]
            raise AsmParseError("unsupported ff form")
        raise AsmParseError(f"unsupported opcode {b:#04x} at {start}")


def _decode_buffer(profile, buf):
    """Decode an entire byte buffer; None unless it is a clean gadget."""
    dec = _Decoder(profile, buf)
    micro = []
    try:
        while dec.pos < len(buf):
            ops = dec.instruction()
            for op in ops:
                if m.is_terminator(op):
                    if op.kind == m.HALT:
                        return None  # halting instruction: discard candidate
                    if dec.pos != len(buf):
                        return None  # terminator before the candidate's end
                    micro.append(op)
                    return micro
                micro.append(op)
    except AsmParseError:
        return None
    return None  # ran off the end without a terminator


def scan_binary(profile, image, base_addr, depth_bytes=DEFAULT_SCAN_DEPTH):
    """Back-scan a flat x86 image for gadgets ending at control transfers.

    Seeds from every decodable terminator (ret, jmp/call through a register
    or memory, syscall, int 0x80 on 32-bit) and tries every start offset up
    to depth_bytes before it, keeping fully decodable halting-free suffixes.
    """
    if profile.arch_id not in (m.X86_64, m.X86_32):
        raise UnsupportedArchError(
            f"raw scan supports x86 only, not {profile.arch_id}; use a corpus file")
    if depth_bytes < 1:
        raise ValueError("depth_bytes must be >= 1")

    seeds = []
    for i in range(len(image)):
        dec = _Decoder(profile, image[i:i + 16])
        try:
            ops = dec.instruction()
        except AsmParseError:
            continue
        if ops and m.is_terminator(ops[-1]) and ops[-1].kind != m.HALT:
            if profile.arch_id == m.X86_32 and ops[-1].kind == m.INT and ops[-1].number != 0x80:
                continue
            seeds.append((i, i + dec.pos))

    gadgets = {}
    for ts, te in seeds:
        for start in range(max(0, ts - depth_bytes), ts + 1):
            buf = bytes(image[start:te])
            micro = _decode_buffer(profile, buf)
            if micro is None:
                continue
            addr = base_addr + start
            if addr not in gadgets:
                gadgets[addr] = RawGadget(addr, render_asm(profile, micro), tuple(micro), buf)
    return [gadgets[a] for a in sorted(gadgets)]
