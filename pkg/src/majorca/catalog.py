"""The queryable gadget catalog.

Pipeline: classify -> derive pop combinations -> combine JOP gadgets ->
filter (hard rules plus dominance over a partial order) -> score -> index.
Combined JOP entries are ordinary ret-style entries whose frame carries a
fixed slot holding the jump gadget's address.
"""

import json
from collections import defaultdict

from .errors import CatalogError
from . import machine as m
from .badchar import screen_address, screen
from .classify import (
    SemanticEntry, FrameDescriptor, classify, output_regs, input_regs,
    stored_bytes, DATA_KINDS, CONTROL_RET, CONTROL_JOP, CONTROL_NONE,
)
from .ingest import RawGadget, decode_asm

DEFAULT_FRAME_LIMIT = 1000
MAX_POP_COMBINE = 8  # cap on registers expanded into subsets

CATALOG_MAGIC = "majorca-catalog v1"

# control flavor each kind is queried under
_KIND_CONTROL = {}
for _k in DATA_KINDS + ("ShiftStack", "GetSP", "ArithSP"):
    _KIND_CONTROL[_k] = CONTROL_RET
_KIND_CONTROL["Jump"] = CONTROL_JOP
for _k in ("JumpMem", "JumpSP", "Call", "CallMem", "Int", "Syscall",
           "StackPivot", "ArithStack", "PushAll"):
    _KIND_CONTROL[_k] = CONTROL_NONE


def derive_pop_combinations(entries):
    """Expand same-address single-register loads into all register subsets.

    For k loadable registers this yields 2**k - 1 entries; registers left
    out of a subset move into that entry's clobber set.
    """
    if not entries:
        return []
    base = entries[0]
    profile_regs = {r for e in entries for r, _ in e.params["loads"]}
    loads = sorted({(r, o) for e in entries for r, o in e.params["loads"]},
                   key=lambda p: p[1])
    if len(loads) > MAX_POP_COMBINE:
        loads = loads[:MAX_POP_COMBINE]
    all_regs = {r for r, _ in loads}
    # side effects shared by every variant: writes that are not loads at all
    extra_clobbers = set(base.clobbers) - all_regs
    out = []
    for mask in range(1, 1 << len(loads)):
        subset = tuple(loads[i] for i in range(len(loads)) if mask >> i & 1)
        subset_regs = {r for r, _ in subset}
        frame = base.frame.copy()
        frame.param_slots = {r: o for r, o in subset}
        out.append(SemanticEntry(
            base.gadget, "LoadConst", {"loads": subset},
            frozenset(extra_clobbers | (all_regs - subset_regs)),
            frame, base.control, base.jump_reg))
    return out


def _apply_pop_derivation(entries):
    singles = defaultdict(list)
    rest = []
    for e in entries:
        if e.kind == "LoadConst" and len(e.params["loads"]) == 1 and not e.frame.fixed_slots:
            singles[(e.address, e.asm_text, e.control)].append(e)
        else:
            rest.append(e)
    for group in singles.values():
        rest.extend(derive_pop_combinations(group))
    return rest


def combine_jop(profile, entries):
    """Pair jump-terminated gadgets with ret loaders of their target register.

    The loader's frame leads; its old next-IP slot is fixed to the jump
    gadget's address and the slot that loads the jump register becomes the
    combined entry's next-IP slot.  The jump gadget's own stack consumption
    is appended to the frame.
    """
    jumps = [e for e in entries if e.kind == "Jump" and e.control == CONTROL_JOP]
    inner_by_addr = defaultdict(list)
    for e in entries:
        if e.control == CONTROL_JOP and e.kind in DATA_KINDS:
            inner_by_addr[e.address].append(e)
    loaders = [e for e in entries
               if e.kind == "LoadConst" and e.control == CONTROL_RET
               and not e.frame.fixed_slots]

    combined = []
    for jmp in jumps:
        target = jmp.params["addr_reg"]
        for inner in inner_by_addr[jmp.address]:
            touched = input_regs(profile, inner.kind, inner.params) \
                | output_regs(profile, inner.kind, inner.params)
            if target in touched:
                continue
            for loader in loaders:
                loaded = {r for r, _ in loader.params["loads"]}
                if target not in loaded:
                    continue
                extra = loaded - {target}
                if extra & input_regs(profile, inner.kind, inner.params):
                    continue  # loader would overwrite a value the jump gadget consumes
                if extra & output_regs(profile, inner.kind, inner.params):
                    continue  # its own loads would die immediately
                if inner.kind in ("LoadConst", "NoOp"):
                    loads = [(r, o) for r, o in loader.params["loads"] if r != target]
                    if inner.kind == "LoadConst":
                        loads += [(r, loader.frame.size + o)
                                  for r, o in inner.params["loads"]]
                    loads = tuple(sorted(loads, key=lambda p: p[1]))
                    kind, params = ("LoadConst", {"loads": loads}) if loads else ("NoOp", {})
                else:
                    if extra:
                        continue  # mixed load-plus-op entries are not a catalog type
                    kind, params = inner.kind, dict(inner.params)
                frame = FrameDescriptor(
                    size=loader.frame.size + inner.frame.size,
                    next_ip_slot=loader.frame.param_slots[target],
                    param_slots={r: o for r, o in params.get("loads", ())},
                    fixed_slots={loader.frame.next_ip_slot:
                                 (jmp.address, inner.asm_text)},
                )
                outs = output_regs(profile, kind, params)
                clobbers = (set(loader.clobbers) | set(inner.clobbers)
                            | {target}) - outs
                combined.append(SemanticEntry(
                    loader.gadget, kind, params, frozenset(clobbers),
                    frame, CONTROL_RET))
    return combined


# ---------------------------------------------------------------------------
# Filtering

def _dominance_class(entry):
    if entry.kind == "LoadConst":
        return ("LoadConst", frozenset(r for r, _ in entry.params["loads"]), entry.control)
    return entry.key()


def _keep_maximal(group):
    """Drop entries strictly dominated on (frame size, clobber subset)."""
    def dominates(a, b):
        if a.frame.size is None or b.frame.size is None:
            return False
        if a.frame.size > b.frame.size or not (a.clobbers <= b.clobbers):
            return False
        return a.frame.size < b.frame.size or a.clobbers < b.clobbers

    ordered = sorted(group, key=lambda e: (e.frame.size if e.frame.size is not None else -1,
                                           len(e.clobbers), e.address))
    survivors = []
    for e in ordered:
        if any(dominates(s, e) for s in survivors):
            continue
        survivors.append(e)
    return survivors


def filter_entries(profile, entries, bad_bytes=frozenset(), frame_limit=DEFAULT_FRAME_LIMIT,
                   addr_screen="full"):
    bad = frozenset(bad_bytes)
    kept = []
    for e in entries:
        if e.frame.size is not None and e.frame.size > frame_limit:
            continue
        if bad:
            if not screen_address(e.address, profile.word_bytes, bad, addr_screen):
                continue
            if any(not screen_address(v, profile.word_bytes, bad, addr_screen)
                   for v, _ in e.frame.fixed_slots.values()):
                continue
        kept.append(e)

    # exact duplicates: same semantics and shape at any address; keep lowest
    by_identity = {}
    for e in kept:
        ident = e.identity()[1:]  # identity minus the address
        cur = by_identity.get(ident)
        if cur is None or e.address < cur.address:
            by_identity[ident] = e
    kept = list(by_identity.values())

    groups = defaultdict(list)
    for e in kept:
        groups[_dominance_class(e)].append(e)
    out = []
    for group in groups.values():
        out.extend(_keep_maximal(group))
    return out


def score(profile, entry):
    """Quality score; lower is better and drives query ordering."""
    clobbered_bytes = profile.word_bytes * len(entry.clobbers)
    frame_size = entry.frame.size if entry.frame.size else 0
    sb = stored_bytes(entry.kind, entry.params)
    if sb:
        return clobbered_bytes + 10_000_000 * frame_size / sb
    return clobbered_bytes + 10_000_000 * frame_size


# ---------------------------------------------------------------------------

class Catalog:
    """Immutable, indexed set of scored entries for one binary image."""

    def __init__(self, profile, entries, writable=(), symbols=None,
                 bad_bytes=frozenset(), addr_screen="full", stage_counts=None):
        self.profile = profile
        self.writable = list(writable)
        self.symbols = dict(symbols or {})
        self.bad_bytes = frozenset(bad_bytes)
        self.addr_screen = addr_screen
        self.stage_counts = dict(stage_counts or {})
        for e in entries:
            if e.score is None:
                e.score = score(profile, e)
        self.entries = sorted(entries, key=self._order)
        self._by_kind = defaultdict(list)
        for e in self.entries:
            self._by_kind[(e.kind, e.control)].append(e)
        self._cache = {}

    @staticmethod
    def _order(e):
        return (e.score, e.frame.size if e.frame.size is not None else 0, e.address)

    def query(self, kind, control=None, **constraints):
        """Entries of one kind matching parameter constraints, best first.

        LoadConst supports loads_exactly=<register set> and
        loads_contains=<register>; other kinds match parameters by equality.
        """
        if control is None:
            control = _KIND_CONTROL.get(kind, CONTROL_RET)
        key = (kind, control, tuple(sorted(
            (k, tuple(sorted(v)) if isinstance(v, (set, frozenset)) else v)
            for k, v in constraints.items())))
        if key in self._cache:
            return list(self._cache[key])
        out = []
        for e in self._by_kind.get((kind, control), ()):
            ok = True
            for ck, cv in constraints.items():
                if ck == "loads_exactly":
                    ok = {r for r, _ in e.params["loads"]} == set(cv)
                elif ck == "loads_contains":
                    ok = any(r == cv for r, _ in e.params["loads"])
                else:
                    ok = e.params.get(ck) == cv
                if not ok:
                    break
            if ok:
                out.append(e)
        self._cache[key] = out
        return list(out)

    def gadget_map(self):
        """address -> micro-op tuple for every distinct underlying gadget."""
        table = {}
        for e in self.entries:
            table.setdefault(e.address, e.gadget.micro_ops)
            for off, (addr, asm) in e.frame.fixed_slots.items():
                if addr not in table:
                    table[addr] = tuple(decode_asm(self.profile, asm))
        return table

    def has_syscall_entry(self):
        if self.profile.syscall_kind == "int80":
            return any(e.kind == "Int" and e.params.get("value") == 0x80
                       for e in self.entries)
        return any(e.kind == "Syscall" for e in self.entries)

    # -- persistence --------------------------------------------------------
    def dumps(self):
        lines = [CATALOG_MAGIC, f"arch={self.profile.arch_id}"]
        for lo, hi in self.writable:
            lines.append(f"writable=0x{lo:x}-0x{hi:x}")
        for name, addr in sorted(self.symbols.items()):
            lines.append(f"symbol={name}:0x{addr:x}")
        for k, v in sorted(self.stage_counts.items()):
            lines.append(f"count={k}:{v}")
        for e in self.entries:
            fixed = ";".join(f"{off}:0x{val:x}:{cmt}"
                             for off, (val, cmt) in sorted(e.frame.fixed_slots.items()))
            fields = [
                f"addr=0x{e.address:x}",
                f"kind={e.kind}",
                f"control={e.control}",
                f"jreg={e.jump_reg or ''}",
                f"clob={','.join(sorted(e.clobbers))}",
                f"fsize={'' if e.frame.size is None else e.frame.size}",
                f"nip={'' if e.frame.next_ip_slot is None else e.frame.next_ip_slot}",
                f"fixed={fixed}",
                f"score={e.score!r}",
                f"params={json.dumps(e.params, sort_keys=True)}",
                f"asm={e.asm_text}",
            ]
            lines.append("entry\t" + "\t".join(fields))
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())


def _params_from_json(kind, data):
    if kind == "LoadConst":
        data["loads"] = tuple((r, o) for r, o in data["loads"])
    return data


def load_catalog(text):
    lines = text.splitlines()
    if not lines or lines[0].strip() != CATALOG_MAGIC:
        raise CatalogError("not a catalog file (bad magic)")
    profile = None
    writable, symbols, counts, entries = [], {}, {}, []
    gadget_cache = {}
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip() or line.startswith("#"):
            continue
        if line.startswith("arch="):
            profile = m.make_arch_profile(line[5:].strip())
            continue
        if line.startswith("writable="):
            lo, _, hi = line[9:].partition("-")
            writable.append((int(lo, 16), int(hi, 16)))
            continue
        if line.startswith("symbol="):
            name, _, addr = line[7:].partition(":")
            symbols[name] = int(addr, 16)
            continue
        if line.startswith("count="):
            name, _, value = line[6:].partition(":")
            counts[name] = int(value)
            continue
        if not line.startswith("entry\t"):
            raise CatalogError(f"line {lineno}: unrecognized catalog line")
        if profile is None:
            raise CatalogError("entry before arch= line")
        fields = {}
        for part in line.split("\t")[1:]:
            k, _, v = part.partition("=")
            fields[k] = v
        addr = int(fields["addr"], 16)
        asm = fields["asm"]
        gkey = (addr, asm)
        if gkey not in gadget_cache:
            gadget_cache[gkey] = RawGadget(addr, asm, tuple(decode_asm(profile, asm)))
        frame = FrameDescriptor(
            size=int(fields["fsize"]) if fields["fsize"] else None,
            next_ip_slot=int(fields["nip"]) if fields["nip"] else None,
        )
        if fields["fixed"]:
            for item in fields["fixed"].split(";"):
                off, val, cmt = item.split(":", 2)
                frame.fixed_slots[int(off)] = (int(val, 16), cmt)
        params = _params_from_json(fields["kind"], json.loads(fields["params"]))
        if fields["kind"] == "LoadConst":
            frame.param_slots = {r: o for r, o in params["loads"]}
        raw_score = fields["score"]
        entries.append(SemanticEntry(
            gadget_cache[gkey], fields["kind"], params,
            frozenset(r for r in fields["clob"].split(",") if r),
            frame, fields["control"], fields["jreg"] or None,
            score=float(raw_score) if "." in raw_score or "e" in raw_score
            else int(raw_score),
        ))
    if profile is None:
        raise CatalogError("catalog lacks an arch= line")
    return Catalog(profile, entries, writable, symbols, stage_counts=counts)


def build_catalog(corpus, bad_bytes=frozenset(), frame_limit=DEFAULT_FRAME_LIMIT,
                  n_runs=3, seed=0, addr_screen="full"):
    """Classify a corpus and run the full preprocessing pipeline."""
    profile = corpus.profile
    raw = {}
    for g in corpus.gadgets:
        raw.setdefault(g.address, g)
    counts = {"gadgets": len(raw)}

    classified = []
    for g in raw.values():
        classified.extend(classify(profile, g, n_runs=n_runs, seed=seed))
    counts["classified"] = len(classified)

    derived = _apply_pop_derivation(classified)
    counts["derived"] = len(derived)

    derived = derived + combine_jop(profile, derived)
    counts["combined"] = len(derived)

    filtered = filter_entries(profile, derived, bad_bytes, frame_limit, addr_screen)
    counts["filtered"] = len(filtered)

    return Catalog(profile, filtered, corpus.writable, corpus.symbols,
                   bad_bytes, addr_screen, counts)
