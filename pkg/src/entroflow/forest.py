"""Unlabeled trees and the weighted forests encoding gradient-flow time-derivatives.

The forest of order n is grown recursively: starting from a single node, every
step makes one copy of each tree per node and attaches a fresh leaf there.
Isomorphic copies are merged by an AHU-style canonical code, so multiplicities
stay exact while the underlying multiset has n! members.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import networkx as nx

MAX_FOREST_ORDER = 9
MAX_ENUM_NODES = 10


class TreeInputError(ValueError):
    pass


def _adjacency(node_count, edges):
    adj = [[] for _ in range(node_count)]
    for u, v in edges:
        if not (0 <= u < node_count and 0 <= v < node_count) or u == v:
            raise TreeInputError(f"bad edge ({u}, {v})")
        adj[u].append(v)
        adj[v].append(u)
    return adj


def _validate_tree(node_count, edges):
    if node_count < 1:
        raise TreeInputError("tree needs at least one node")
    if len(edges) != node_count - 1:
        raise TreeInputError("a tree on m nodes has m-1 edges")
    adj = _adjacency(node_count, edges)
    seen = {0}
    stack = [0]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    if len(seen) != node_count:
        raise TreeInputError("input graph is disconnected")
    return adj


def _centroids(node_count, adj):
    # node(s) whose removal leaves components of size <= floor(m/2)
    size = [1] * node_count
    order = []
    parent = [-1] * node_count
    stack = [0]
    visited = [False] * node_count
    while stack:
        u = stack.pop()
        visited[u] = True
        order.append(u)
        for v in adj[u]:
            if not visited[v]:
                parent[v] = u
                stack.append(v)
    for u in reversed(order):
        if parent[u] >= 0:
            size[parent[u]] += size[u]
    best, cands = node_count + 1, []
    for u in range(node_count):
        heaviest = node_count - size[u]
        for v in adj[u]:
            if parent[v] == u:
                heaviest = max(heaviest, size[v])
        if heaviest < best:
            best, cands = heaviest, [u]
        elif heaviest == best:
            cands.append(u)
    return cands


def _rooted_code(root, adj):
    def code(u, parent):
        subs = sorted(code(v, u) for v in adj[u] if v != parent)
        return b"(" + b"".join(subs) + b")"

    return code(root, -1)


def _canonical_relabel(root, adj):
    # preorder ids with children visited in sorted-code order; depends only on
    # the rooted code, so isomorphic rootings produce identical edge lists
    codes = {}

    def fill(u, parent):
        subs = sorted(fill(v, u) for v in adj[u] if v != parent)
        c = b"(" + b"".join(subs) + b")"
        codes[(u, parent)] = c
        return c

    fill(root, -1)
    ids = {}
    edges = []

    def assign(u, parent):
        ids[u] = len(ids)
        if parent != -1:
            a, b = ids[parent], ids[u]
            edges.append((min(a, b), max(a, b)))
        for v in sorted((v for v in adj[u] if v != parent), key=lambda v: codes[(v, u)]):
            assign(v, u)

    assign(root, -1)
    return tuple(sorted(edges))


def canonical_code(edges, node_count=None) -> bytes:
    """AHU code of an unlabeled tree, rooted at its centroid (lexicographic
    minimum over the at-most-two centroids).  Equal codes iff isomorphic."""
    edges = [tuple(e) for e in edges]
    if node_count is None:
        node_count = max((max(e) for e in edges), default=-1) + 1
        node_count = max(node_count, 1)
    adj = _validate_tree(node_count, edges)
    return min(_rooted_code(c, adj) for c in _centroids(node_count, adj))


@dataclass(frozen=True)
class CanonicalTree:
    """Unlabeled tree held in canonical labeling, identified by its AHU code."""

    node_count: int
    edges: tuple[tuple[int, int], ...]
    code: bytes

    @staticmethod
    def from_edges(edges, node_count=None) -> "CanonicalTree":
        edges = [tuple(e) for e in edges]
        if node_count is None:
            node_count = max((max(e) for e in edges), default=-1) + 1
            node_count = max(node_count, 1)
        adj = _validate_tree(node_count, edges)
        cands = _centroids(node_count, adj)
        coded = sorted((_rooted_code(c, adj), c) for c in cands)
        best_code, root = coded[0]
        return CanonicalTree(node_count, _canonical_relabel(root, adj), best_code)

    @property
    def adjacency(self):
        return _adjacency(self.node_count, self.edges)

    @property
    def degrees(self):
        deg = [0] * self.node_count
        for u, v in self.edges:
            deg[u] += 1
            deg[v] += 1
        return deg

    def centroids(self):
        return _centroids(self.node_count, self.adjacency)


def path_tree(m: int) -> CanonicalTree:
    return CanonicalTree.from_edges([(i, i + 1) for i in range(m - 1)], m)


def star_tree(m: int) -> CanonicalTree:
    return CanonicalTree.from_edges([(0, i) for i in range(1, m)], m)


@dataclass(frozen=True)
class WeightedForest:
    """Multiset of trees with exact integer multiplicities; order-n forests hold
    trees with n+1 nodes and total multiplicity n!."""

    order: int
    entries: tuple[tuple[CanonicalTree, int], ...]  # sorted by code

    def multiplicity_of(self, tree: CanonicalTree) -> int:
        for t, m in self.entries:
            if t.code == tree.code:
                return m
        return 0

    @property
    def total_multiplicity(self) -> int:
        return sum(m for _, m in self.entries)

    def shapes(self) -> set[bytes]:
        return {t.code for t, _ in self.entries}

    def to_json(self) -> str:
        doc = {
            "schema_version": 1,
            "order": self.order,
            "trees": [
                {"code": t.code.decode("ascii"), "edges": [list(e) for e in t.edges],
                 "multiplicity": m}
                for t, m in self.entries
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "WeightedForest":
        doc = json.loads(text)
        entries = []
        for item in doc["trees"]:
            t = CanonicalTree.from_edges([tuple(e) for e in item["edges"]])
            assert t.code.decode("ascii") == item["code"]
            entries.append((t, int(item["multiplicity"])))
        entries.sort(key=lambda tm: tm[0].code)
        return WeightedForest(int(doc["order"]), tuple(entries))


def generate_forest(n: int) -> WeightedForest:
    """Grow the order-n forest by iterating the leaf-attachment rule from the
    single-node seed, merging isomorphic trees at every step."""
    if not (0 <= n <= MAX_FOREST_ORDER):
        raise TreeInputError(f"forest order must lie in [0, {MAX_FOREST_ORDER}]")
    current: dict[bytes, tuple[CanonicalTree, int]] = {}
    seed = CanonicalTree.from_edges([], 1)
    current[seed.code] = (seed, 1)
    for _ in range(n):
        nxt: dict[bytes, tuple[CanonicalTree, int]] = {}
        for tree, mult in current.values():
            for node in range(tree.node_count):
                grown = CanonicalTree.from_edges(
                    list(tree.edges) + [(node, tree.node_count)], tree.node_count + 1
                )
                if grown.code in nxt:
                    t, m = nxt[grown.code]
                    nxt[grown.code] = (t, m + mult)
                else:
                    nxt[grown.code] = (grown, mult)
        current = nxt
    entries = tuple(sorted(current.values(), key=lambda tm: tm[0].code))
    return WeightedForest(n, entries)


def enumerate_trees(node_count: int) -> list[CanonicalTree]:
    """All unlabeled free trees on the given number of nodes, each exactly once,
    sorted by canonical code."""
    if not (1 <= node_count <= MAX_ENUM_NODES):
        raise TreeInputError(f"node count must lie in [1, {MAX_ENUM_NODES}]")
    if node_count == 1:
        return [CanonicalTree.from_edges([], 1)]
    if node_count == 2:
        return [CanonicalTree.from_edges([(0, 1)], 2)]
    out = []
    for g in nx.nonisomorphic_trees(node_count):
        out.append(CanonicalTree.from_edges(list(g.edges()), node_count))
    out.sort(key=lambda t: t.code)
    assert len({t.code for t in out}) == len(out)
    return out
