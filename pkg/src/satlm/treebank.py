"""Gold constituency/dependency ingestion and distance <-> span conversions.

Spans throughout are 1-based inclusive ``(start, end)`` token ranges.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import DataError, ParseError, ValidityError

MAIN_TYPES = ("NP", "VP", "PP", "ADJP", "ADVP")


def bucket_label(label):
    return label if label in MAIN_TYPES else "Other"


@dataclass
class Node:
    label: str
    children: list = field(default_factory=list)  # Node or str
    start: int = 0
    end: int = 0

    def to_bracketed(self):
        parts = [c if isinstance(c, str) else c.to_bracketed() for c in self.children]
        return "(" + " ".join([self.label] + parts) + ")"


@dataclass
class ConstituencyTree:
    root: Node
    tokens: List[str]

    def __len__(self):
        return len(self.tokens)

    def to_bracketed(self):
        return self.root.to_bracketed()

    def constituents(self):
        """All internal nodes as ``(label, start, end)``, pre-order."""
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            out.append((node.label, node.start, node.end))
            stack.extend(c for c in reversed(node.children) if isinstance(c, Node))
        return out

    def leaf_depths(self):
        """Edges from the root to each token."""
        depths = [0] * len(self.tokens)

        def walk(node, depth):
            pos = node.start
            for c in node.children:
                if isinstance(c, str):
                    depths[pos - 1] = depth + 1
                    pos += 1
                else:
                    walk(c, depth + 1)
                    pos = c.end + 1

        walk(self.root, 0)
        return depths

    def lowest_constituents(self):
        """For each token, the innermost node that directly holds it."""
        owner = [None] * len(self.tokens)

        def walk(node):
            pos = node.start
            for c in node.children:
                if isinstance(c, str):
                    owner[pos - 1] = node
                    pos += 1
                else:
                    walk(c)
                    pos = c.end + 1

        walk(self.root)
        return owner


def parse_ptb_bracketed(line):
    """Parse one bracketed tree such as ``(S (NP the dog) (VP barks))``."""
    text = line.strip()
    if not text:
        raise ParseError("empty tree", 0)
    tokens = []
    pos = 0

    def skip_ws():
        nonlocal pos
        while pos < len(text) and text[pos].isspace():
            pos += 1

    def read_atom():
        nonlocal pos
        begin = pos
        while pos < len(text) and not text[pos].isspace() and text[pos] not in "()":
            pos += 1
        return text[begin:pos]

    def read_node():
        nonlocal pos
        if pos >= len(text) or text[pos] != "(":
            raise ParseError("expected '('", _byte_offset(text, pos))
        pos += 1
        skip_ws()
        label = read_atom()
        if not label:
            raise ParseError("missing constituent label", _byte_offset(text, pos))
        node = Node(label, start=len(tokens) + 1)
        while True:
            skip_ws()
            if pos >= len(text):
                raise ParseError("unbalanced parentheses", _byte_offset(text, pos))
            ch = text[pos]
            if ch == ")":
                pos += 1
                break
            if ch == "(":
                node.children.append(read_node())
            else:
                word = read_atom()
                tokens.append(word)
                node.children.append(word)
        if not node.children:
            raise ParseError(f"constituent {label!r} has no children", _byte_offset(text, pos))
        node.end = len(tokens)
        return node

    root = read_node()
    skip_ws()
    if pos != len(text):
        raise ParseError("trailing characters after tree", _byte_offset(text, pos))
    return ConstituencyTree(root, tokens)


def _byte_offset(text, char_pos):
    return len(text[:char_pos].encode("utf-8"))


@dataclass
class DependencyGraph:
    heads: List[int]  # 1-based head per token, 0 = root
    tokens: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.heads)

    @property
    def root(self):
        return self.heads.index(0) + 1

    def depths(self):
        out = []
        for i in range(1, len(self.heads) + 1):
            depth, node = 0, i
            while self.heads[node - 1] != 0:
                node = self.heads[node - 1]
                depth += 1
            out.append(depth)
        return out

    def edges(self):
        """``(head, dependent)`` pairs, excluding the artificial root."""
        return [(h, d) for d, h in enumerate(self.heads, start=1) if h != 0]


def validate_heads(heads):
    n = len(heads)
    if n == 0:
        raise ValidityError("empty sentence")
    if any(h < 0 or h > n for h in heads):
        raise ValidityError(f"head index out of range in {heads}")
    roots = [i for i, h in enumerate(heads, start=1) if h == 0]
    if len(roots) != 1:
        raise ValidityError(f"expected exactly one root, found {len(roots)}")
    for start in range(1, n + 1):
        seen, node = set(), start
        while node != 0:
            if node in seen:
                raise ValidityError(f"dependency cycle through token {node}")
            seen.add(node)
            node = heads[node - 1]


def parse_conllx(block):
    """Read one CoNLL-X sentence (10 tab-separated columns per token)."""
    rows = [r for r in block.splitlines() if r.strip() and not r.startswith("#")]
    if not rows:
        raise ValidityError("empty sentence block")
    tokens, heads = [], []
    for lineno, row in enumerate(rows, start=1):
        cols = row.rstrip("\n").split("\t")
        if len(cols) != 10:
            raise DataError(f"CoNLL-X row {lineno} has {len(cols)} columns, expected 10")
        if int(cols[0]) != lineno:
            raise DataError(f"CoNLL-X row {lineno} has id {cols[0]}")
        tokens.append(cols[1])
        heads.append(int(cols[6]))
    validate_heads(heads)
    return DependencyGraph(heads, tokens)


def format_conllx(graph, postags=None):
    lines = []
    for i, (tok, head) in enumerate(zip(graph.tokens, graph.heads), start=1):
        tag = postags[i - 1] if postags else "_"
        rel = "root" if head == 0 else "dep"
        lines.append("\t".join([str(i), tok, tok, tag, tag, "_", str(head), rel, "_", "_"]))
    return "\n".join(lines) + "\n"


def read_trees(path):
    with open(path, encoding="utf-8") as fh:
        return [parse_ptb_bracketed(line) for line in fh if line.strip()]


def read_conllx(path):
    with open(path, encoding="utf-8") as fh:
        blocks = fh.read().split("\n\n")
    return [parse_conllx(b) for b in blocks if b.strip()]


def read_manifest(path):
    """``key = value`` manifest naming the ``sentences``, ``trees`` and ``deps`` files."""
    base = os.path.dirname(os.path.abspath(path))
    entries = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise DataError(f"manifest line without '=': {line!r}")
            entries[key.strip()] = os.path.join(base, value.strip())
    missing = {"sentences", "trees", "deps"} - entries.keys()
    if missing:
        raise DataError(f"manifest missing keys: {sorted(missing)}")
    return entries


# -- gold syntax ------------------------------------------------------------


@dataclass
class GoldSyntax:
    const: Optional[ConstituencyTree] = None
    dep: Optional[DependencyGraph] = None
    mode: str = "dep-depth"

    def __len__(self):
        return len(self.const) if self.const is not None else len(self.dep)

    @property
    def distances(self):
        return gold_distances(self, self.mode)

    @property
    def spans(self):
        if self.const is None:
            raise DataError("gold spans need a constituency tree")
        return [(s, e) for s, e, _ in gold_spans(self.const)]


def gold_distances(gold, mode="dep-depth"):
    if mode == "dep-depth":
        if gold.dep is None:
            raise DataError("dep-depth distances need a dependency graph")
        return np.asarray(gold.dep.depths(), dtype=np.float64)
    if mode == "const-height":
        if gold.const is None:
            raise DataError("const-height distances need a constituency tree")
        depths = np.asarray(gold.const.leaf_depths(), dtype=np.float64)
        return depths.max() - depths
    raise DataError(f"unknown gold distance mode {mode!r}")


def gold_spans(tree):
    """Partition tokens into runs that share the same lowest constituent.

    Returns ``(start, end, label)`` triples covering ``1..n`` in order.
    """
    owners = tree.lowest_constituents()
    spans = []
    start = 1
    for i in range(2, len(owners) + 2):
        if i > len(owners) or owners[i - 1] is not owners[start - 1]:
            spans.append((start, i - 1, owners[start - 1].label))
            start = i
    return spans


def distance_to_tree(d):
    """Top-down binary tree from distances: split before the leftmost argmax.

    Returns ``(tree, spans)`` where ``tree`` is nested tuples of 1-based leaf
    indices and ``spans`` is the set of internal-node spans.
    """
    d = np.asarray(d, dtype=np.float64)
    spans = set()

    def build(a, b):
        if a == b:
            return a
        spans.add((a, b))
        k = a + int(np.argmax(d[a - 1 : b]))
        if k == a:
            return (a, build(a + 1, b))
        return (build(a, k - 1), build(k, b))

    if len(d) == 0:
        return None, spans
    return build(1, len(d)), spans
