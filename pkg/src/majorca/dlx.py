"""Exact cover by dancing links.

Columns are universe elements, rows are candidate subsets; covers are
yielded lazily as tuples of row payloads in search order.
"""


class _Node:
    __slots__ = ("left", "right", "up", "down", "column", "payload")

    def __init__(self):
        self.left = self.right = self.up = self.down = self
        self.column = None
        self.payload = None


class _Column(_Node):
    __slots__ = ("size", "name")

    def __init__(self, name):
        super().__init__()
        self.size = 0
        self.name = name


def _cover(col):
    col.right.left = col.left
    col.left.right = col.right
    i = col.down
    while i is not col:
        j = i.right
        while j is not i:
            j.down.up = j.up
            j.up.down = j.down
            j.column.size -= 1
            j = j.right
        i = i.down


def _uncover(col):
    i = col.up
    while i is not col:
        j = i.left
        while j is not i:
            j.column.size += 1
            j.down.up = j
            j.up.down = j
            j = j.left
        i = i.up
    col.right.left = col
    col.left.right = col


def exact_covers(universe, subsets):
    """Yield every family of disjoint subsets covering the universe exactly.

    `subsets` is a sequence of (payload, iterable-of-elements); each yielded
    cover is a tuple of payloads.  Subset elements outside the universe make
    that subset unusable.
    """
    universe = list(dict.fromkeys(universe))
    if not universe:
        yield ()
        return
    uset = set(universe)

    header = _Column("root")
    columns = {}
    for el in universe:
        col = _Column(el)
        columns[el] = col
        col.right = header
        col.left = header.left
        header.left.right = col
        header.left = col

    for payload, elements in subsets:
        elements = list(dict.fromkeys(elements))
        if not elements or any(el not in uset for el in elements):
            continue
        row_nodes = []
        for el in elements:
            node = _Node()
            node.payload = payload
            node.column = columns[el]
            node.down = columns[el]
            node.up = columns[el].up
            columns[el].up.down = node
            columns[el].up = node
            columns[el].size += 1
            row_nodes.append(node)
        k = len(row_nodes)
        for i in range(k):
            row_nodes[i].right = row_nodes[(i + 1) % k]
            row_nodes[i].left = row_nodes[(i - 1) % k]

    solution = []

    def search():
        if header.right is header:
            yield tuple(node.payload for node in solution)
            return
        col = header.right
        c = col.right
        while c is not header:
            if c.size < col.size:
                col = c
            c = c.right
        if col.size == 0:
            return
        _cover(col)
        r = col.down
        while r is not col:
            solution.append(r)
            j = r.right
            while j is not r:
                _cover(j.column)
                j = j.right
            yield from search()
            solution.pop()
            j = r.left
            while j is not r:
                _uncover(j.column)
                j = j.left
            r = r.down
        _uncover(col)

    yield from search()
