"""Semantic gadget classification by repeated concrete interpretation.

Each gadget runs on several random states plus a corner-value sweep.
Type hypotheses are generated from the first random trace and kept only if
their postcondition holds on every trace, so coincidental matches die off.
Classification is probabilistic by design; the emulation-based verifier is
the final arbiter for whole chains.
"""

from dataclasses import dataclass, field

from . import machine as m
from .machine import RandomPolicy, CornerPolicy, corner_values, run_gadget

# Table of semantic kinds, grouped by how they chain.
DATA_KINDS = ("NoOp", "MoveReg", "LoadConst", "Arithmetic", "LoadMem", "StoreMem",
              "ArithLoad", "ArithStore", "InitConst", "Neg", "ArithConst", "InitMem")
SP_KINDS = ("ShiftStack", "GetSP", "ArithSP")
TERMINAL_KINDS = ("Jump", "JumpMem", "JumpSP", "Call", "CallMem", "Int", "Syscall",
                  "StackPivot", "ArithStack", "PushAll")

ARITH_OPS = ("add", "sub", "xor", "and", "or")
ARITH_CONST_OPS = ("add", "xor")  # per the catalog's type table
SHIFT_OPS = ("add", "sub")

CONTROL_RET = "ret"
CONTROL_JOP = "jop"
CONTROL_NONE = "none"

_OFF_BOUND = 0x8000


@dataclass
class FrameDescriptor:
    """Stack frame shape of one catalog entry."""

    size: int = None            # bytes consumed from the stack (sp delta)
    next_ip_slot: int = None    # frame offset feeding the next IP, ret entries only
    param_slots: dict = field(default_factory=dict)   # register -> frame offset
    fixed_slots: dict = field(default_factory=dict)   # offset -> (word value, comment)

    def copy(self):
        return FrameDescriptor(self.size, self.next_ip_slot,
                               dict(self.param_slots), dict(self.fixed_slots))


@dataclass
class SemanticEntry:
    """One classified (gadget, type) pair with side effects and frame info."""

    gadget: object
    kind: str
    params: dict
    clobbers: frozenset
    frame: FrameDescriptor
    control: str
    jump_reg: str = None        # for control == 'jop': register holding the next address
    score: float = None

    @property
    def address(self):
        return self.gadget.address

    @property
    def asm_text(self):
        return self.gadget.asm_text

    def key(self):
        items = tuple(sorted((k, v) for k, v in self.params.items()))
        return (self.kind, items, self.control)

    def identity(self):
        fixed = tuple(sorted((o, v) for o, (v, _) in self.frame.fixed_slots.items()))
        return (self.address, self.key(), self.frame.size, self.frame.next_ip_slot,
                tuple(sorted(self.clobbers)), fixed)

    def __repr__(self):
        p = ", ".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        return f"<{self.kind}({p}) @{self.address:#x} {self.asm_text!r}>"


def output_regs(profile, kind, params):
    """Full registers an entry's semantics define (excluded from clobbers)."""
    out = set()
    if kind == "LoadConst":
        out.update(r for r, _ in params["loads"])
    elif kind in ("MoveReg", "Arithmetic", "LoadMem", "ArithLoad", "Neg", "ArithConst"):
        out.add(profile.full_reg(params["out"]))
    elif kind in ("InitConst", "GetSP", "ArithSP"):
        out.add(profile.full_reg(params["out"]))
    return out


def input_regs(profile, kind, params):
    """Full registers whose initial values the semantics consume."""
    regs = set()
    for key in ("in", "in1", "in2", "addr_reg"):
        if key in params:
            regs.add(profile.full_reg(params[key]))
    if kind == "ArithLoad":
        regs.add(profile.full_reg(params["out"]))  # op-assign reads its target
    return regs


def stored_bytes(kind, params):
    """Bytes the semantic operation writes to memory (for scoring)."""
    if kind in ("StoreMem", "ArithStore"):
        return params["width"]
    if kind == "InitMem":
        return params["size"]
    return 0


# ---------------------------------------------------------------------------
# Views: register names usable as semantic parameters at a given width

def _data_views(profile):
    skip = {profile.sp, profile.ip}
    if profile.zero_reg:
        skip.add(profile.zero_reg)
    views = []
    for reg in profile.registers:
        if reg in skip:
            continue
        views.append((reg, reg, profile.word_bytes))
    if profile.arch_id == m.X86_64:
        for alias, (full, width) in profile.subreg_map.items():
            if width == 4 and full not in skip:
                views.append((alias, full, 4))
    return views


def _addr_regs(profile):
    skip = {profile.sp, profile.ip}
    if profile.zero_reg:
        skip.add(profile.zero_reg)
    return [r for r in profile.registers if r not in skip]


def _signed(value, bits):
    value &= (1 << bits) - 1
    if value >= 1 << (bits - 1):
        value -= 1 << bits
    return value


# ---------------------------------------------------------------------------
# Control-flow shape

def _control_of_trace(profile, trace):
    """(control, detail) for one trace; detail is nip offset or jump register."""
    kind, data = trace.ip_source
    word = profile.word_bytes
    if kind == m.IP_STACK:
        off = _signed(data, profile.word_bits)
        if (trace.sp_delta is not None and word <= trace.sp_delta <= 0x10000
                and 0 <= off <= trace.sp_delta - word):
            return CONTROL_RET, off
        return CONTROL_NONE, None
    if kind == m.IP_REG:
        if data == profile.sp:
            return CONTROL_NONE, None
        for off, dst in trace.stack_reads:
            off = _signed(off, profile.word_bits)
            if off < 0 or off % word:
                continue
            if trace.initial_stack_word(off) == trace.ip_value:
                if (word <= trace.sp_delta <= 0x10000
                        and 0 <= off <= trace.sp_delta - word):
                    return CONTROL_RET, off
        return CONTROL_JOP, data
    return CONTROL_NONE, None


def _derive_control(profile, traces):
    shapes = [_control_of_trace(profile, t) for t in traces]
    first = shapes[0]
    if any(s != first for s in shapes[1:]):
        return CONTROL_NONE, None
    return first


# ---------------------------------------------------------------------------
# Hypothesis postconditions

def _zext_ok(profile, trace, out_view):
    """On x86_64 a 4-byte result must have zeroed the upper half."""
    full, width = profile.resolve(out_view)
    if width == profile.word_bytes:
        return True
    return trace.final_reg(full) == trace.final_reg(out_view)


def hypothesis_check(profile, kind, params, trace):
    """Table postcondition for one (kind, params) instance against one trace."""
    word = profile.word_bytes
    mask_of = lambda w: (1 << (8 * w)) - 1

    if kind == "NoOp":
        changed = trace.changed_regs() - {profile.sp, profile.ip}
        return not changed and not trace.mem_writes
    if kind == "MoveReg":
        w = params["width"]
        return (trace.final_reg(params["out"]) == trace.init_reg(params["in"])
                and _zext_ok(profile, trace, params["out"]))
    if kind == "LoadConst":
        for reg, off in params["loads"]:
            if trace.final_reg(reg) != trace.initial_stack_word(off):
                return False
        return True
    if kind == "Arithmetic":
        w = params["width"]
        a = trace.init_reg(params["in1"])
        b = trace.init_reg(params["in2"])
        if a is None or b is None:
            return False
        want = m._BINOPS[params["op"]](a & mask_of(w), b & mask_of(w), mask_of(w))
        return (trace.final_reg(params["out"]) == want
                and _zext_ok(profile, trace, params["out"]))
    if kind == "LoadMem":
        base = trace.init_reg(params["addr_reg"])
        if base is None:
            return False
        addr = (base + params["off"]) & profile.word_mask
        value = trace.initial_mem_value(addr, params["width"])
        return (value is not None and trace.final_reg(params["out"]) == value
                and _zext_ok(profile, trace, params["out"]))
    if kind == "StoreMem":
        base = trace.init_reg(params["addr_reg"])
        if base is None:
            return False
        addr = (base + params["off"]) & profile.word_mask
        value = trace.final_mem_value(addr, params["width"], require_written=True)
        return value is not None and value == trace.init_reg(params["in"]) & mask_of(params["width"])
    if kind == "ArithLoad":
        base = trace.init_reg(params["addr_reg"])
        if base is None:
            return False
        w = params["width"]
        addr = (base + params["off"]) & profile.word_mask
        mem = trace.initial_mem_value(addr, w)
        a = trace.init_reg(params["out"])
        if mem is None or a is None:
            return False
        want = m._BINOPS[params["op"]](a & mask_of(w), mem, mask_of(w))
        return (trace.final_reg(params["out"]) == want
                and _zext_ok(profile, trace, params["out"]))
    if kind == "ArithStore":
        base = trace.init_reg(params["addr_reg"])
        if base is None:
            return False
        w = params["width"]
        addr = (base + params["off"]) & profile.word_mask
        mem0 = trace.initial_mem_value(addr, w)
        mem1 = trace.final_mem_value(addr, w, require_written=True)
        value = trace.init_reg(params["in"])
        if mem0 is None or mem1 is None or value is None:
            return False
        return mem1 == m._BINOPS[params["op"]](mem0, value & mask_of(w), mask_of(w))
    if kind == "InitConst":
        return trace.final_reg(params["out"]) == params["val"]
    if kind == "Neg":
        w = params["width"]
        a = trace.init_reg(params["in"])
        if a is None:
            return False
        return (trace.final_reg(params["out"]) == (-(a & mask_of(w))) & mask_of(w)
                and _zext_ok(profile, trace, params["out"]))
    if kind == "ArithConst":
        w = params["width"]
        a = trace.init_reg(params["in"])
        if a is None:
            return False
        want = m._BINOPS[params["op"]](a & mask_of(w), params["val"] & mask_of(w), mask_of(w))
        return (trace.final_reg(params["out"]) == want
                and _zext_ok(profile, trace, params["out"]))
    if kind == "InitMem":
        base = trace.init_reg(params["addr_reg"])
        if base is None:
            return False
        addr = (base + params["off"]) & profile.word_mask
        value = trace.final_mem_value(addr, params["size"], require_written=True)
        return value is not None and value == params["val"]
    if kind == "ShiftStack":
        if trace.changed_regs() - {profile.sp, profile.ip} or trace.mem_writes:
            return False
        for addr, width, dst in trace.mem_reads:
            if dst != profile.ip:
                return False
        delta = trace.sp_delta
        want = delta if params["op"] == "add" else -delta
        return want == params["off"] and params["off"] != 0
    if kind == "GetSP":
        return trace.final_reg(params["out"]) == trace.initial_sp
    if kind == "ArithSP":
        a = trace.init_reg(params["in"])
        if a is None:
            return False
        want = m._BINOPS[params["op"]](a, trace.initial_sp, profile.word_mask)
        return trace.final_reg(params["out"]) == want
    if kind == "StackPivot":
        return (trace.final_reg(profile.sp) & profile.word_mask) == trace.init_reg(params["in"])
    if kind == "ArithStack":
        a = trace.init_reg(params["in"])
        if a is None:
            return False
        want = m._BINOPS[params["op"]](trace.initial_sp, a, profile.word_mask)
        return (trace.final_reg(profile.sp) & profile.word_mask) == want
    if kind == "Jump":
        return (trace.ip_source[0] == m.IP_REG
                and trace.ip_value == trace.init_reg(params["addr_reg"]))
    if kind == "JumpMem":
        if trace.ip_source[0] != m.IP_MEM:
            return False
        base = trace.init_reg(params["addr_reg"])
        if base is None:
            return False
        addr = (base + params["off"]) & profile.word_mask
        return trace.ip_value == trace.initial_mem_value(addr, word)
    if kind == "JumpSP":
        return trace.ip_source[0] == m.IP_REG and trace.ip_value == trace.initial_sp
    if kind == "Call":
        return (trace.ip_source[0] == m.IP_CALL_REG
                and trace.ip_value == trace.init_reg(params["addr_reg"]))
    if kind == "CallMem":
        if trace.ip_source[0] != m.IP_CALL_MEM:
            return False
        base = trace.init_reg(params["addr_reg"])
        if base is None:
            return False
        addr = (base + params["off"]) & profile.word_mask
        return trace.ip_value == trace.initial_mem_value(addr, word)
    if kind == "Int":
        return trace.ip_source == (m.IP_INT, params["value"])
    if kind == "Syscall":
        return trace.ip_source[0] == m.IP_SYSCALL
    if kind == "PushAll":
        if profile.arch_id != m.X86_32 or trace.ip_source[0] != m.IP_STACK:
            return False
        order = ("eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi")
        sp0 = trace.initial_sp
        for i, reg in enumerate(order):
            want = trace.initial_sp if reg == "esp" else trace.init_reg(reg)
            got = trace.final_mem_value((sp0 - 4 * (i + 1)) & profile.word_mask, 4,
                                        require_written=True)
            if got != want:
                return False
        return trace.ip_value == trace.init_reg("edi")
    raise ValueError(f"unknown gadget kind {kind!r}")


# ---------------------------------------------------------------------------
# Candidate generation from the first random trace

def _changed_views(profile, trace):
    changed = trace.changed_regs() - {profile.sp, profile.ip}
    return [(n, f, w) for (n, f, w) in _data_views(profile) if f in changed]


def _mem_offset_candidates(profile, trace, addr):
    """(reg, signed offset) pairs that could address `addr` through a register."""
    pairs = []
    for reg in _addr_regs(profile):
        base = trace.init_reg(reg)
        if base is None:
            continue
        off = _signed(addr - base, profile.word_bits)
        if abs(off) <= _OFF_BOUND:
            pairs.append((reg, off))
    return pairs


def _candidates(profile, trace, control, nip):
    word = profile.word_bytes
    mask_of = lambda w: (1 << (8 * w)) - 1
    out = []
    add = lambda kind, **params: out.append((kind, params))

    if control in (CONTROL_RET, CONTROL_JOP):
        changed = trace.changed_regs() - {profile.sp, profile.ip}
        ch_views = _changed_views(profile, trace)
        # inputs can only come from registers the gadget actually read
        all_views = [(n, f, w) for (n, f, w) in _data_views(profile)
                     if trace.init_reg(n) is not None]

        if not changed and not trace.mem_writes:
            add("NoOp")

        # loads from the gadget's own frame
        seen_loads = set()
        for off, dst in trace.stack_reads:
            off = _signed(off, profile.word_bits)
            full = profile.full_reg(dst)
            if full in (profile.sp, profile.ip) or off == nip or off < 0 or off % word:
                continue
            if (full, off) in seen_loads:
                continue
            if trace.final_reg(full) == trace.initial_stack_word(off):
                seen_loads.add((full, off))
                add("LoadConst", loads=((full, off),))

        for on, of, ow in ch_views:
            if not _zext_ok(profile, trace, on):
                continue
            fv = trace.final_reg(on)
            add("InitConst", out=of, val=trace.final_reg(of))
            for in_, if_, iw in all_views:
                if iw != ow:
                    continue
                iv = trace.init_reg(in_)
                if if_ != of and fv == iv:
                    add("MoveReg", **{"in": in_, "out": on, "width": ow})
                if fv == (-(iv & mask_of(ow))) & mask_of(ow):
                    add("Neg", **{"in": in_, "out": on, "width": ow})
                for op in ARITH_CONST_OPS:
                    val = (fv - iv) & mask_of(ow) if op == "add" else (fv ^ iv) & mask_of(ow)
                    if val:
                        add("ArithConst", op=op, **{"in": in_, "out": on},
                            val=val, width=ow)
            for op in ARITH_OPS:
                fn = m._BINOPS[op]
                for i1, f1, w1 in all_views:
                    if w1 != ow:
                        continue
                    a = trace.init_reg(i1) & mask_of(ow)
                    for i2, f2, w2 in all_views:
                        # equal operands cannot hold two independent values;
                        # such hypotheses duplicate MoveReg/InitConst anyway
                        if w2 != ow or i1 == i2:
                            continue
                        if op in ("add", "xor", "and", "or") and i2 < i1:
                            continue  # symmetric; keep one ordering
                        b = trace.init_reg(i2) & mask_of(ow)
                        if fv == fn(a, b, mask_of(ow)):
                            add("Arithmetic", op=op, in1=i1, in2=i2, out=on, width=ow)

        # memory reads feeding registers
        for addr, rwidth, dst in trace.mem_reads:
            if dst in (profile.ip, None):
                continue
            for on, of, ow in ch_views:
                if ow != rwidth:
                    continue
                value = trace.initial_mem_value(addr, rwidth)
                if value is None:
                    continue
                a = trace.init_reg(on)
                for reg, off in _mem_offset_candidates(profile, trace, addr):
                    if trace.final_reg(on) == value and _zext_ok(profile, trace, on):
                        add("LoadMem", addr_reg=reg, out=on, off=off, width=rwidth)
                    if a is None:
                        continue  # op-assign reads its target; this one was never read
                    for op in ARITH_OPS:
                        want = m._BINOPS[op](a & mask_of(ow), value, mask_of(ow))
                        if trace.final_reg(on) == want and _zext_ok(profile, trace, on):
                            add("ArithLoad", op=op, addr_reg=reg, out=on,
                                off=off, width=rwidth)

        # memory writes
        for addr, wwidth in trace.mem_writes:
            final = trace.final_mem_value(addr, wwidth, require_written=True)
            if final is None:
                continue
            initial = trace.initial_mem_value(addr, wwidth)
            for reg, off in _mem_offset_candidates(profile, trace, addr):
                if profile.full_reg(reg) == profile.sp:
                    continue
                add("InitMem", addr_reg=reg, off=off, val=final, size=wwidth)
                for in_, if_, iw in all_views:
                    if iw != wwidth:
                        continue
                    iv = trace.init_reg(in_) & mask_of(wwidth)
                    if final == iv:
                        add("StoreMem", addr_reg=reg, **{"in": in_}, off=off, width=wwidth)
                    if initial is not None:
                        for op in ARITH_OPS:
                            if final == m._BINOPS[op](initial, iv, mask_of(wwidth)):
                                add("ArithStore", op=op, addr_reg=reg, **{"in": in_},
                                    off=off, width=wwidth)

    if control == CONTROL_RET:
        # pure stack shift plus SP-relative results
        if hypothesis_check(profile, "ShiftStack", {"op": "add", "off": trace.sp_delta}, trace):
            add("ShiftStack", op="add", off=trace.sp_delta)
        for on, of, ow in _changed_views(profile, trace):
            if ow != word:
                continue
            if trace.final_reg(of) == trace.initial_sp:
                add("GetSP", out=of)
            for in_, if_, iw in _data_views(profile):
                if iw != word or trace.init_reg(in_) is None:
                    continue
                a = trace.init_reg(in_)
                for op in ARITH_OPS:
                    if trace.final_reg(of) == m._BINOPS[op](a, trace.initial_sp,
                                                            profile.word_mask):
                        add("ArithSP", op=op, **{"in": in_}, out=of)

    if control == CONTROL_JOP:
        for reg in _addr_regs(profile):
            if trace.init_reg(reg) == trace.ip_value:
                add("Jump", addr_reg=reg)

    if control == CONTROL_NONE:
        kind, data = trace.ip_source
        if kind == m.IP_SYSCALL:
            add("Syscall")
        elif kind == m.IP_INT:
            add("Int", value=data)
        elif kind == m.IP_CALL_REG:
            for reg in _addr_regs(profile):
                if trace.init_reg(reg) == trace.ip_value:
                    add("Call", addr_reg=reg)
        elif kind == m.IP_CALL_MEM:
            if trace.ip_mem_addr is not None:
                for reg, off in _mem_offset_candidates(profile, trace, trace.ip_mem_addr):
                    add("CallMem", addr_reg=reg, off=off)
        elif kind == m.IP_MEM:
            if trace.ip_mem_addr is not None:
                for reg, off in _mem_offset_candidates(profile, trace, trace.ip_mem_addr):
                    add("JumpMem", addr_reg=reg, off=off)
        elif kind == m.IP_REG:
            if trace.ip_value == trace.initial_sp:
                add("JumpSP")
        elif kind == m.IP_STACK:
            # stack-pivot family: ret through a relocated stack
            for in_, if_, iw in _data_views(profile):
                if iw != word or trace.init_reg(in_) is None:
                    continue
                a = trace.init_reg(in_)
                if (trace.final_reg(profile.sp) & profile.word_mask) == a:
                    add("StackPivot", **{"in": in_})
                for op in SHIFT_OPS:
                    want = m._BINOPS[op](trace.initial_sp, a, profile.word_mask)
                    if (trace.final_reg(profile.sp) & profile.word_mask) == want:
                        add("ArithStack", op=op, **{"in": in_})
            if hypothesis_check(profile, "PushAll", {}, trace):
                add("PushAll")
            for op in SHIFT_OPS:
                off = trace.sp_delta if op == "add" else -trace.sp_delta
                if off > 0 and hypothesis_check(profile, "ShiftStack",
                                                {"op": op, "off": off}, trace):
                    add("ShiftStack", op=op, off=off)
    return out


# ---------------------------------------------------------------------------

def _frame_for(profile, kind, params, control, nip, sp_delta, traces):
    frame = FrameDescriptor()
    frame.size = sp_delta
    if control == CONTROL_RET:
        frame.next_ip_slot = nip
    if kind == "LoadConst":
        for reg, off in params["loads"]:
            if control == CONTROL_RET and not (0 <= off <= sp_delta - profile.word_bytes):
                return None
            if control == CONTROL_JOP and not (0 <= off <= sp_delta - profile.word_bytes):
                return None
            frame.param_slots[reg] = off
    return frame


def classify(profile, gadget, n_runs=3, seed=0):
    """All surviving semantic entries for one decoded gadget."""
    traces = []
    for i in range(n_runs):
        sub_seed = hash((seed, gadget.address, i)) & 0xFFFFFFFF
        traces.append(run_gadget(profile, gadget.micro_ops, RandomPolicy(sub_seed)))
    for value in corner_values(profile):
        traces.append(run_gadget(profile, gadget.micro_ops, CornerPolicy(value)))
    if any(not t.usable for t in traces):
        return []

    # Control shape comes from the random runs only: corner runs initialize
    # everything to one value, which aliases stack words with registers.
    control, detail = _derive_control(profile, traces[:n_runs])
    nip = detail if control == CONTROL_RET else None
    jump_reg = detail if control == CONTROL_JOP else None

    sp_deltas = {t.sp_delta for t in traces}
    sp_delta = sp_deltas.pop() if len(sp_deltas) == 1 else None
    if control in (CONTROL_RET, CONTROL_JOP) and sp_delta is None:
        return []

    seen = set()
    entries = []
    written = set()
    for t in traces:
        written |= set(t.final_regs)
    for kind, params in _candidates(profile, traces[0], control, nip):
        key = (kind, tuple(sorted(params.items())))
        if key in seen:
            continue
        seen.add(key)
        if not all(hypothesis_check(profile, kind, params, t) for t in traces):
            continue
        frame = _frame_for(profile, kind, params, control, nip, sp_delta, traces)
        if frame is None:
            continue
        clobbers = frozenset(written - output_regs(profile, kind, params)
                             - {profile.sp, profile.ip})
        entries.append(SemanticEntry(gadget, kind, params, clobbers, frame,
                                     control, jump_reg))
    return entries
