"""Gadget dependency DAGs and the backward worklist scheduler.

Edges run from producer to consumer and carry the consumer's parameter name
plus the register transporting the value; DEP edges order two nodes without
any data flow.  Dangling edges (no consumer) are the DAG's outputs and seed
the scheduler, which builds chains back to front: it repeatedly picks a node
all of whose output edges are live, provided it clobbers no other live edge's
register, and prepends it to the chain.
"""

from dataclasses import dataclass, field

from .classify import output_regs, input_regs

DEP = "DEP"

_IN_PARAMS = {
    "MoveReg": {"in"}, "Neg": {"in"}, "ArithConst": {"in"},
    "Arithmetic": {"in1", "in2"},
    "LoadMem": {"addr_reg"}, "ArithLoad": {"addr_reg"},
    "StoreMem": {"addr_reg", "in"}, "ArithStore": {"addr_reg", "in"},
    "InitMem": {"addr_reg"},
    "Jump": {"addr_reg"}, "JumpMem": {"addr_reg"},
    "Call": {"addr_reg"}, "CallMem": {"addr_reg"},
    "Syscall": {"sysno", "arg0", "arg1", "arg2", "arg3", "arg4", "arg5"},
    "Int": {"sysno", "arg0", "arg1", "arg2", "arg3", "arg4", "arg5"},
    "LoadConst": set(), "InitConst": set(), "NoOp": set(), "GetSP": set(),
    "StackPivot": {"in"}, "ArithStack": {"in"}, "ArithSP": {"in"},
    "ShiftStack": set(), "ReturnTo": set(), "JumpSP": set(), "PushAll": set(),
}

TERMINAL_NODE_KINDS = {"Syscall", "Int", "Jump", "JumpMem", "JumpSP",
                       "Call", "CallMem", "ReturnTo"}


@dataclass(eq=False)
class DagNode:
    entry: object
    node_id: int
    stack_params: dict = field(default_factory=dict)  # frame offset -> SlotValue

    @property
    def kind(self):
        return self.entry.kind

    def __repr__(self):
        return f"<node {self.node_id} {self.entry.kind} @{self.entry.address:#x}>"


@dataclass(eq=False)
class DagEdge:
    src: DagNode
    dst: DagNode  # None marks a dangling output edge
    param: str
    reg: str = None  # None for DEP

    def __repr__(self):
        dst = self.dst.node_id if self.dst is not None else "out"
        return f"<edge {self.src.node_id}->{dst} {self.param}:{self.reg}>"


class GadgetDag:
    def __init__(self, profile):
        self.profile = profile
        self.nodes = []
        self.edges = []
        self._next_id = 0

    def add_node(self, entry, stack_params=None):
        node = DagNode(entry, self._next_id, dict(stack_params or {}))
        self._next_id += 1
        self.nodes.append(node)
        return node

    def add_edge(self, src, dst, param, reg):
        edge = DagEdge(src, dst, param, reg)
        self.edges.append(edge)
        return edge

    def add_dep(self, src, dst):
        return self.add_edge(src, dst, DEP, None)

    def add_output(self, src, reg=None, param=DEP):
        edge = DagEdge(src, None, param if reg is not None else DEP, reg)
        self.edges.append(edge)
        return edge

    @property
    def outputs(self):
        return [e for e in self.edges if e.dst is None]

    def outs(self, node):
        return [e for e in self.edges if e.src is node]

    def ins(self, node):
        return [e for e in self.edges if e.dst is node]

    def node_writes(self, node):
        entry = node.entry
        regs = set(entry.clobbers) | output_regs(self.profile, entry.kind, entry.params)
        regs.update(e.reg for e in self.outs(node) if e.reg is not None)
        return regs

    def merge(self, other):
        """Absorb another DAG's nodes and edges (ids are reassigned)."""
        for node in other.nodes:
            node.node_id = self._next_id
            self._next_id += 1
            self.nodes.append(node)
        self.edges.extend(other.edges)

    def dump(self):
        lines = [f"dag with {len(self.nodes)} nodes"]
        for n in self.nodes:
            lines.append(f"  {n!r}")
        for e in self.edges:
            lines.append(f"  {e!r}")
        return "\n".join(lines)


def validate(dag):
    """None when the DAG is well formed, else a violation string."""
    ids = {n.node_id for n in dag.nodes}
    if len(ids) != len(dag.nodes):
        return "duplicate node ids"
    for e in dag.edges:
        if e.src not in dag.nodes or (e.dst is not None and e.dst not in dag.nodes):
            return f"edge {e!r} references a foreign node"
        if e.param != DEP:
            if e.reg is None:
                return f"edge {e!r} lacks a register"
            if e.dst is None:
                continue  # dangling data output: requested result
            allowed = _IN_PARAMS.get(e.dst.kind)
            if allowed is None or e.param not in allowed:
                return f"edge {e!r}: node {e.dst.node_id} ({e.dst.kind}) has no parameter {e.param}"

    terminals = [n for n in dag.nodes if n.kind in TERMINAL_NODE_KINDS]
    if len(terminals) > 1:
        return f"multiple terminal nodes: {terminals}"
    for n in dag.nodes:
        if n.kind not in TERMINAL_NODE_KINDS and n.entry.control != "ret":
            return f"node {n.node_id} is not chainable (control={n.entry.control})"

    # acyclicity over producer->consumer edges
    succ = {n.node_id: [] for n in dag.nodes}
    for e in dag.edges:
        if e.dst is not None:
            succ[e.src.node_id].append(e.dst.node_id)
    state = {}

    def dfs(nid):
        state[nid] = 1
        for nxt in succ[nid]:
            if state.get(nxt) == 1:
                return False
            if state.get(nxt) is None and not dfs(nxt):
                return False
        state[nid] = 2
        return True

    for n in dag.nodes:
        if state.get(n.node_id) is None and not dfs(n.node_id):
            return f"cycle through node {n.node_id}"

    # every node reachable from the output edges, walking inputs backward
    if dag.nodes:
        seen = set()
        work = [e.src for e in dag.outputs]
        while work:
            node = work.pop()
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            for e in dag.ins(node):
                work.append(e.src)
        unreachable = [n for n in dag.nodes if n.node_id not in seen]
        if unreachable:
            return f"nodes unreachable from outputs: {unreachable}"
    return None


def schedules(dag):
    """Lazily yield clobber-safe topological orders (lists of DagNodes).

    Backward worklist search: a state is (live edges, chain tail).  A state
    whose live edges carry a repeated register is infeasible.  Expanding a
    state schedules some node n (all of its output edges live, no live edge
    register written by n) in front of the chain, replacing n's output edges
    with its input edges.  The first-output-edge flag keeps any node from
    being expanded twice out of one state, so no schedule is yielded twice.
    """
    outs = {n.node_id: tuple(dag.outs(n)) for n in dag.nodes}
    ins = {n.node_id: tuple(dag.ins(n)) for n in dag.nodes}
    writes = {n.node_id: dag.node_writes(n) for n in dag.nodes}

    if not dag.nodes:
        yield []
        return

    stack = [(tuple(dag.outputs), ())]
    while stack:
        wl, chain = stack.pop()
        regs = [e.reg for e in wl if e.reg is not None]
        if len(regs) != len(set(regs)):
            continue
        for edge in wl:
            n = edge.src
            n_outs = outs[n.node_id]
            ok = True
            count = 0
            rest = []
            for e in wl:
                if e in n_outs:
                    count += 1
                    if count == 1 and e is not edge:
                        ok = False  # only the first of n's edges expands n
                        break
                else:
                    rest.append(e)
            if not ok or count != len(n_outs):
                continue
            if any(e.reg is not None and e.reg in writes[n.node_id] for e in rest):
                continue
            new_wl = tuple(rest) + ins[n.node_id]
            new_chain = (n,) + chain
            if not new_wl:
                yield list(new_chain)
            else:
                stack.append((new_wl, new_chain))


def check_schedule(dag, order):
    """Independent schedule checker: topological plus clobber windows."""
    pos = {n.node_id: i for i, n in enumerate(order)}
    if len(pos) != len(dag.nodes) or set(pos) != {n.node_id for n in dag.nodes}:
        return False
    for e in dag.edges:
        if e.dst is None:
            continue
        if pos[e.src.node_id] >= pos[e.dst.node_id]:
            return False
    for e in dag.edges:
        if e.reg is None:
            continue
        end = pos[e.dst.node_id] if e.dst is not None else len(order)
        for i in range(pos[e.src.node_id] + 1, end):
            if e.reg in dag.node_writes(order[i]):
                return False
    return True


def all_schedules_brute_force(dag):
    """Every valid schedule by filtering all permutations; test oracle."""
    from itertools import permutations
    return [list(p) for p in permutations(dag.nodes) if check_schedule(dag, list(p))]
