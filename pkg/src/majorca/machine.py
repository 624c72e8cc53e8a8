"""Architecture profiles and the deterministic micro-op interpreter.

Gadgets are executed concretely on lazily initialized state.  Every
register or memory byte read before it is written gets its value from an
initialization policy (uniform random or a fixed corner value) and the
access is logged, so a finished run exposes both the effective initial
state and the final state.
"""

import random
from dataclasses import dataclass, field

from .errors import UnsupportedArchError

X86_64 = "x86_64"
X86_32 = "x86_32"
MIPS32BE = "mips32be"

# Linux syscall numbers per target ABI.
_SYSCALLS_X86_64 = {
    "read": 0, "write": 1, "open": 2, "close": 3, "mprotect": 10,
    "mmap": 9, "dup2": 33, "execve": 59, "exit": 60, "setuid": 105,
}
_SYSCALLS_X86_32 = {
    "exit": 1, "read": 3, "write": 4, "open": 5, "close": 6,
    "execve": 11, "setuid": 23, "dup2": 63, "mmap": 90, "mprotect": 125,
}
_SYSCALLS_MIPS_O32 = {
    "exit": 4001, "read": 4003, "write": 4004, "open": 4005, "close": 4006,
    "setuid": 4023, "dup2": 4063, "mmap": 4090, "mprotect": 4125,
    "execve": 4011,
}


@dataclass(frozen=True)
class ArchProfile:
    """Register file, widths, endianness and calling conventions for one target."""

    arch_id: str
    word_bytes: int
    endianness: str  # 'little' | 'big'
    registers: tuple
    sp: str
    ip: str
    subreg_map: dict  # narrow name -> (full register, byte width)
    syscall_number_reg: str
    syscall_arg_regs: tuple
    syscall_kind: str  # 'syscall' | 'int80'
    call_arg_regs: tuple
    syscall_table: dict
    zero_reg: str = None  # register hardwired to zero (MIPS)

    @property
    def word_bits(self):
        return self.word_bytes * 8

    @property
    def word_mask(self):
        return (1 << self.word_bits) - 1

    def is_register(self, name):
        return name in self.registers or name in self.subreg_map

    def resolve(self, name):
        """Return (full register, access width in bytes) for any register name."""
        if name in self.subreg_map:
            return self.subreg_map[name]
        if name in self.registers:
            return name, self.word_bytes
        raise KeyError(f"unknown register {name!r} for {self.arch_id}")

    def full_reg(self, name):
        return self.resolve(name)[0]

    def reg_width(self, name):
        return self.resolve(name)[1]

    def syscall_number(self, name):
        if name not in self.syscall_table:
            raise KeyError(f"unknown syscall {name!r} for {self.arch_id}")
        return self.syscall_table[name]


def _x86_64_profile():
    gp = ("rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp", "rsp",
          "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15")
    sub = {}
    for full, dword in (("rax", "eax"), ("rbx", "ebx"), ("rcx", "ecx"),
                        ("rdx", "edx"), ("rsi", "esi"), ("rdi", "edi"),
                        ("rbp", "ebp"), ("rsp", "esp")):
        sub[dword] = (full, 4)
    for n in range(8, 16):
        sub[f"r{n}d"] = (f"r{n}", 4)
    # 16/8-bit aliases: readable in the decoder but merge on write, see write_reg.
    for full, word16, low8 in (("rax", "ax", "al"), ("rbx", "bx", "bl"),
                               ("rcx", "cx", "cl"), ("rdx", "dx", "dl")):
        sub[word16] = (full, 2)
        sub[low8] = (full, 1)
    return ArchProfile(
        arch_id=X86_64, word_bytes=8, endianness="little",
        registers=gp + ("rip",), sp="rsp", ip="rip", subreg_map=sub,
        syscall_number_reg="rax",
        syscall_arg_regs=("rdi", "rsi", "rdx", "r10", "r8", "r9"),
        syscall_kind="syscall",
        call_arg_regs=("rdi", "rsi", "rdx", "rcx", "r8", "r9"),
        syscall_table=dict(_SYSCALLS_X86_64),
    )


def _x86_32_profile():
    gp = ("eax", "ebx", "ecx", "edx", "esi", "edi", "ebp", "esp")
    sub = {}
    for full, word16, low8 in (("eax", "ax", "al"), ("ebx", "bx", "bl"),
                               ("ecx", "cx", "cl"), ("edx", "dx", "dl")):
        sub[word16] = (full, 2)
        sub[low8] = (full, 1)
    return ArchProfile(
        arch_id=X86_32, word_bytes=4, endianness="little",
        registers=gp + ("eip",), sp="esp", ip="eip", subreg_map=sub,
        syscall_number_reg="eax",
        syscall_arg_regs=("ebx", "ecx", "edx", "esi", "edi", "ebp"),
        syscall_kind="int80",
        call_arg_regs=(),
        syscall_table=dict(_SYSCALLS_X86_32),
    )


def _mips32be_profile():
    gp = ("zero", "at", "v0", "v1", "a0", "a1", "a2", "a3",
          "t0", "t1", "t2", "t3", "t4", "t5", "t6", "t7",
          "s0", "s1", "s2", "s3", "s4", "s5", "s6", "s7",
          "t8", "t9", "k0", "k1", "gp", "sp", "fp", "ra")
    return ArchProfile(
        arch_id=MIPS32BE, word_bytes=4, endianness="big",
        registers=gp + ("pc",), sp="sp", ip="pc", subreg_map={},
        syscall_number_reg="v0",
        syscall_arg_regs=("a0", "a1", "a2", "a3"),
        syscall_kind="syscall",
        call_arg_regs=("a0", "a1", "a2", "a3"),
        syscall_table=dict(_SYSCALLS_MIPS_O32),
        zero_reg="zero",
    )


_PROFILES = {
    X86_64: _x86_64_profile(),
    X86_32: _x86_32_profile(),
    MIPS32BE: _mips32be_profile(),
}


def make_arch_profile(arch_id):
    try:
        return _PROFILES[arch_id]
    except KeyError:
        raise UnsupportedArchError(f"unsupported architecture {arch_id!r}") from None


def supported_archs():
    return tuple(_PROFILES)


# ---------------------------------------------------------------------------
# Micro-ops

@dataclass(frozen=True)
class MoveReg:
    dst: str
    src: str


@dataclass(frozen=True)
class LoadImm:
    dst: str
    imm: int


@dataclass(frozen=True)
class Binop:
    op: str  # add sub xor and or neg sltu
    dst: str
    src1: str
    src2: str


@dataclass(frozen=True)
class ArithImm:
    op: str
    dst: str
    src: str
    imm: int


@dataclass(frozen=True)
class LoadMem:
    dst: str
    addr_reg: str
    offset: int
    width: int


@dataclass(frozen=True)
class StoreMem:
    addr_reg: str
    offset: int
    src: str
    width: int


@dataclass(frozen=True)
class StoreImm:
    addr_reg: str
    offset: int
    imm: int
    width: int


@dataclass(frozen=True)
class ArithFromMem:
    op: str
    dst: str
    addr_reg: str
    offset: int
    width: int


@dataclass(frozen=True)
class ArithToMem:
    op: str
    addr_reg: str
    offset: int
    src: str
    width: int


@dataclass(frozen=True)
class AdjustSP:
    delta: int


RET = "ret"
JMP_REG = "jmp_reg"
JMP_MEM = "jmp_mem"
CALL_REG = "call_reg"
CALL_MEM = "call_mem"
SYSCALL = "syscall"
INT = "int"
HALT = "halt"


@dataclass(frozen=True)
class Term:
    kind: str
    reg: str = None
    offset: int = 0
    number: int = None


def is_terminator(op):
    return isinstance(op, Term)


# ---------------------------------------------------------------------------
# Initialization policies

class RandomPolicy:
    """Uniform random words / bytes, reproducible for a fixed seed."""

    def __init__(self, seed):
        self._rng = random.Random(seed)

    def reg_value(self, profile, reg):
        return self._rng.getrandbits(profile.word_bits)

    def mem_byte(self, addr):
        return self._rng.getrandbits(8)


class CornerPolicy:
    """Every first read observes one fixed corner value."""

    def __init__(self, value):
        self.value = value

    def reg_value(self, profile, reg):
        return self.value & profile.word_mask

    def mem_byte(self, addr):
        return (self.value >> (8 * (addr % 8))) & 0xFF


# A plausible mapped, aligned address: keeps store-through-register runs off
# the zero page without colliding with small constants.
CORNER_ADDRESS = 0x200000


def corner_values(profile):
    values = [0, 1, profile.word_mask]
    values += [1 << (8 * k) for k in range(1, profile.word_bytes)]
    values.append(CORNER_ADDRESS)
    seen, out = set(), []
    for v in values:
        v &= profile.word_mask
        if v not in seen:
            seen.add(v)
            out.append(v)
    return out


# ---------------------------------------------------------------------------
# Machine state

class MachineState:
    """Sparse register/memory state with first-access logging."""

    def __init__(self, profile, policy):
        self.profile = profile
        self.policy = policy
        self.regs = {}
        self.mem = {}  # byte addressed
        self.initial_regs = {}
        self.initial_mem = {}
        self.written_regs = set()
        self.written_mem = set()

    # -- registers ---------------------------------------------------------
    def read_reg(self, name):
        profile = self.profile
        full, width = profile.resolve(name)
        if profile.zero_reg is not None and full == profile.zero_reg:
            return 0
        if full not in self.regs:
            value = self.policy.reg_value(profile, full) & profile.word_mask
            self.regs[full] = value
            self.initial_regs[full] = value
        value = self.regs[full]
        if width < profile.word_bytes:
            value &= (1 << (8 * width)) - 1
        return value

    def write_reg(self, name, value):
        profile = self.profile
        full, width = profile.resolve(name)
        if profile.zero_reg is not None and full == profile.zero_reg:
            return  # writes to the hardwired zero register are discarded
        mask = (1 << (8 * width)) - 1
        value &= mask
        if width == profile.word_bytes:
            new = value
        elif profile.arch_id == X86_64 and width == 4:
            new = value  # 32-bit writes zero the upper half
        else:
            old = self.read_reg(full)
            new = (old & ~mask) | value
        self.regs[full] = new & profile.word_mask
        self.written_regs.add(full)

    # -- memory ------------------------------------------------------------
    def _touch_byte(self, addr):
        if addr not in self.mem:
            value = self.policy.mem_byte(addr) & 0xFF
            self.mem[addr] = value
            self.initial_mem[addr] = value

    def read_mem(self, addr, width):
        addr &= self.profile.word_mask
        data = bytearray()
        for i in range(width):
            a = (addr + i) & self.profile.word_mask
            self._touch_byte(a)
            data.append(self.mem[a])
        return int.from_bytes(bytes(data), self.profile.endianness)

    def write_mem(self, addr, value, width):
        addr &= self.profile.word_mask
        data = (value & ((1 << (8 * width)) - 1)).to_bytes(width, self.profile.endianness)
        for i, b in enumerate(data):
            a = (addr + i) & self.profile.word_mask
            self.mem[a] = b
            self.written_mem.add(a)

    def preload_mem(self, addr, data):
        for i, b in enumerate(data):
            self.mem[(addr + i) & self.profile.word_mask] = b

    def snapshot_regs(self):
        return dict(self.regs)


# ---------------------------------------------------------------------------
# Stepping

_BINOPS = {
    "add": lambda a, b, m: (a + b) & m,
    "sub": lambda a, b, m: (a - b) & m,
    "xor": lambda a, b, m: a ^ b,
    "and": lambda a, b, m: a & b,
    "or": lambda a, b, m: a | b,
    "neg": lambda a, b, m: (-a) & m,
    "sltu": lambda a, b, m: 1 if a < b else 0,
}


def _effective_addr(state, op):
    return (state.read_reg(op.addr_reg) + op.offset) & state.profile.word_mask


def step(profile, state, op, trace=None):
    """Execute one non-terminator micro-op in place."""
    if isinstance(op, MoveReg):
        state.write_reg(op.dst, state.read_reg(op.src))
    elif isinstance(op, LoadImm):
        state.write_reg(op.dst, op.imm)
    elif isinstance(op, Binop):
        width = profile.reg_width(op.dst)
        mask = (1 << (8 * width)) - 1
        a = state.read_reg(op.src1) & mask
        b = state.read_reg(op.src2) & mask
        state.write_reg(op.dst, _BINOPS[op.op](a, b, mask))
    elif isinstance(op, ArithImm):
        width = profile.reg_width(op.dst)
        mask = (1 << (8 * width)) - 1
        a = state.read_reg(op.src) & mask
        state.write_reg(op.dst, _BINOPS[op.op](a, op.imm & mask, mask))
    elif isinstance(op, LoadMem):
        addr = _effective_addr(state, op)
        value = state.read_mem(addr, op.width)
        if trace is not None:
            trace.note_read(addr, op.width, op.dst)
        state.write_reg(op.dst, value)
    elif isinstance(op, StoreMem):
        addr = _effective_addr(state, op)
        width = min(op.width, profile.reg_width(op.src))
        state.write_mem(addr, state.read_reg(op.src), width)
        if trace is not None:
            trace.note_write(addr, width)
    elif isinstance(op, StoreImm):
        addr = _effective_addr(state, op)
        state.write_mem(addr, op.imm, op.width)
        if trace is not None:
            trace.note_write(addr, op.width)
    elif isinstance(op, ArithFromMem):
        addr = _effective_addr(state, op)
        mask = (1 << (8 * op.width)) - 1
        mem = state.read_mem(addr, op.width)
        if trace is not None:
            trace.note_read(addr, op.width, op.dst)
        a = state.read_reg(op.dst) & mask
        state.write_reg(op.dst, _BINOPS[op.op](a, mem, mask))
    elif isinstance(op, ArithToMem):
        addr = _effective_addr(state, op)
        mask = (1 << (8 * op.width)) - 1
        mem = state.read_mem(addr, op.width)
        if trace is not None:
            trace.note_read(addr, op.width, None)
        val = state.read_reg(op.src) & mask
        state.write_mem(addr, _BINOPS[op.op](mem, val, mask), op.width)
        if trace is not None:
            trace.note_write(addr, op.width)
    elif isinstance(op, AdjustSP):
        state.write_reg(profile.sp, state.read_reg(profile.sp) + op.delta)
    elif isinstance(op, Term):
        raise ValueError("step() does not execute terminators")
    else:
        raise TypeError(f"unknown micro-op {op!r}")
    return state


# ---------------------------------------------------------------------------
# Whole-gadget interpretation

IP_STACK = "stack"
IP_REG = "reg"
IP_MEM = "mem"
IP_SYSCALL = "syscall"
IP_INT = "int"
IP_CALL_REG = "call_reg"
IP_CALL_MEM = "call_mem"
IP_NONE = "none"


class ExecutionTrace:
    """Observable effects of one gadget run."""

    def __init__(self, profile):
        self.profile = profile
        self.initial_regs = {}
        self.final_regs = {}
        self.initial_sp = 0
        self.final_sp = 0
        self.sp_delta = 0
        self.ip_source = (IP_NONE, None)
        self.ip_value = None  # concrete next-IP (when meaningful)
        self.ip_mem_addr = None  # memory address the next IP was read from
        self.stack_reads = []  # (frame offset, destination register or None)
        self.mem_reads = []  # (addr, width, destination register or None)
        self.mem_writes = []  # (addr, width)
        self.usable = True
        self._state = None
        self._initial_mem = {}
        self._final_mem = {}
        self._written_mem = set()

    def note_read(self, addr, width, dst):
        self.mem_reads.append((addr, width, dst))

    def note_write(self, addr, width):
        self.mem_writes.append((addr, width))

    # -- value accessors used by hypothesis checks -------------------------
    def init_reg(self, name):
        full, width = self.profile.resolve(name)
        if self.profile.zero_reg is not None and full == self.profile.zero_reg:
            return 0
        value = self.initial_regs.get(full)
        if value is None:
            return None
        if width < self.profile.word_bytes:
            value &= (1 << (8 * width)) - 1
        return value

    def final_reg(self, name):
        full, width = self.profile.resolve(name)
        if self.profile.zero_reg is not None and full == self.profile.zero_reg:
            return 0
        value = self.final_regs.get(full)
        if value is None:
            value = self.initial_regs.get(full)
        if value is None:
            return None
        if width < self.profile.word_bytes:
            value &= (1 << (8 * width)) - 1
        return value

    def reg_changed(self, full):
        if full not in self.final_regs:
            return False
        init = self.initial_regs.get(full)
        return init is None or init != self.final_regs[full]

    def changed_regs(self):
        return {r for r in self.final_regs if self.reg_changed(r)}

    def initial_mem_value(self, addr, width):
        """Word assembled from first-access bytes; None if any byte unseen."""
        data = bytearray()
        for i in range(width):
            b = self._initial_mem.get((addr + i) & self.profile.word_mask)
            if b is None:
                return None
            data.append(b)
        return int.from_bytes(bytes(data), self.profile.endianness)

    def final_mem_value(self, addr, width, require_written=False):
        data = bytearray()
        for i in range(width):
            a = (addr + i) & self.profile.word_mask
            if require_written and a not in self._written_mem:
                return None
            b = self._final_mem.get(a)
            if b is None:
                return None
            data.append(b)
        return int.from_bytes(bytes(data), self.profile.endianness)

    def initial_stack_word(self, offset):
        return self.initial_mem_value(
            (self.initial_sp + offset) & self.profile.word_mask, self.profile.word_bytes)


def run_gadget(profile, micro_ops, policy=None, seed=0, state=None):
    """Interpret a decoded gadget once and return its ExecutionTrace.

    The micro-op list must end with exactly one terminator.  A fresh state
    with the given policy is created unless an explicit one is supplied.
    """
    if not micro_ops or not is_terminator(micro_ops[-1]):
        raise ValueError("gadget must end with a terminator micro-op")
    if any(is_terminator(op) for op in micro_ops[:-1]):
        raise ValueError("terminator before the end of the gadget")

    if state is None:
        state = MachineState(profile, policy if policy is not None else RandomPolicy(seed))
    trace = ExecutionTrace(profile)
    sp0 = state.read_reg(profile.sp)
    trace.initial_sp = sp0

    for op in micro_ops[:-1]:
        step(profile, state, op, trace)

    term = micro_ops[-1]
    word = profile.word_bytes
    if term.kind == RET:
        sp = state.read_reg(profile.sp)
        value = state.read_mem(sp, word)
        trace.note_read(sp, word, profile.ip)
        trace.ip_source = (IP_STACK, (sp - sp0) & profile.word_mask)
        trace.ip_value = value
        state.write_reg(profile.sp, sp + word)
        state.write_reg(profile.ip, value)
    elif term.kind == JMP_REG:
        value = state.read_reg(term.reg)
        trace.ip_source = (IP_REG, profile.full_reg(term.reg))
        trace.ip_value = value
        state.write_reg(profile.ip, value)
    elif term.kind == JMP_MEM:
        addr = (state.read_reg(term.reg) + term.offset) & profile.word_mask
        value = state.read_mem(addr, word)
        trace.note_read(addr, word, profile.ip)
        trace.ip_source = (IP_MEM, (profile.full_reg(term.reg), term.offset))
        trace.ip_value = value
        trace.ip_mem_addr = addr
        state.write_reg(profile.ip, value)
    elif term.kind == CALL_REG:
        value = state.read_reg(term.reg)
        sp = state.read_reg(profile.sp) - word
        state.write_mem(sp, 0, word)  # pushed return address; content irrelevant
        trace.note_write(sp, word)
        state.write_reg(profile.sp, sp)
        trace.ip_source = (IP_CALL_REG, profile.full_reg(term.reg))
        trace.ip_value = value
        state.write_reg(profile.ip, value)
    elif term.kind == CALL_MEM:
        addr = (state.read_reg(term.reg) + term.offset) & profile.word_mask
        value = state.read_mem(addr, word)
        trace.note_read(addr, word, profile.ip)
        trace.ip_mem_addr = addr
        sp = state.read_reg(profile.sp) - word
        state.write_mem(sp, 0, word)
        trace.note_write(sp, word)
        state.write_reg(profile.sp, sp)
        trace.ip_source = (IP_CALL_MEM, (profile.full_reg(term.reg), term.offset))
        trace.ip_value = value
        state.write_reg(profile.ip, value)
    elif term.kind == SYSCALL:
        trace.ip_source = (IP_SYSCALL, None)
    elif term.kind == INT:
        trace.ip_source = (IP_INT, term.number)
    elif term.kind == HALT:
        trace.usable = False
        trace.ip_source = (IP_NONE, None)
    else:
        raise ValueError(f"unknown terminator {term.kind!r}")

    trace.initial_regs = dict(state.initial_regs)
    trace.final_regs = {r: state.regs[r] for r in state.written_regs}
    trace.final_sp = state.read_reg(profile.sp)
    trace.sp_delta = (trace.final_sp - sp0) & profile.word_mask
    # interpret as signed for downward shifts
    if trace.sp_delta > profile.word_mask // 2:
        trace.sp_delta -= profile.word_mask + 1
    trace._initial_mem = dict(state.initial_mem)
    trace._final_mem = dict(state.mem)
    trace._written_mem = set(state.written_mem)
    for addr, width, dst in trace.mem_reads:
        off = (addr - sp0) & profile.word_mask
        if off < 0x10000 and dst not in (profile.ip, None):
            trace.stack_reads.append((off, dst))
    trace._state = state
    return trace
