"""Multigraph tensor-diagram algebra over derivatives of the log-density.

A node of degree k stands for the symmetric tensor of k-th derivatives of
U = log(density); internal edges are contracted index pairs, dangling edges are
free indices.  Diagram expressions are exact rational linear combinations of
canonical multigraphs.  The module provides the Leibniz gradient, index
contraction, pointwise products, the integration-by-parts rewrite for scalar
integrands, and the compiler turning trees (and dangling trees) into their
closed local integrand form.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

from entroflow.forest import CanonicalTree

MAX_NODES = 10
MAX_EDGES = 14


class DiagramError(ValueError):
    pass


@dataclass(frozen=True)
class Multigraph:
    """Undirected multigraph with self-loops and labeled dangling half-edges.

    edges: sorted multiset of (u, v) with u <= v; a loop is (u, u) and counts
    twice toward the degree.  dangling: sorted (node, label) pairs with all
    labels distinct.
    """

    node_count: int
    edges: tuple[tuple[int, int], ...]
    dangling: tuple[tuple[int, str], ...] = ()

    def __post_init__(self):
        if self.node_count < 1 or self.node_count > MAX_NODES:
            raise DiagramError(f"node count {self.node_count} outside [1, {MAX_NODES}]")
        if len(self.edges) + len(self.dangling) > MAX_EDGES:
            raise DiagramError("edge budget exceeded")
        for u, v in self.edges:
            if not (0 <= u <= v < self.node_count):
                raise DiagramError(f"bad edge ({u}, {v})")
        if list(self.edges) != sorted(self.edges):
            raise DiagramError("edges must be sorted")
        labels = [lab for _, lab in self.dangling]
        if len(set(labels)) != len(labels):
            raise DiagramError("dangling labels must be pairwise distinct")
        if list(self.dangling) != sorted(self.dangling):
            raise DiagramError("dangling attachments must be sorted")

    @staticmethod
    def make(node_count, edges, dangling=()) -> "Multigraph":
        edges = tuple(sorted((min(u, v), max(u, v)) for u, v in edges))
        dangling = tuple(sorted((n, str(l)) for n, l in dangling))
        return Multigraph(node_count, edges, dangling)

    def degree(self, v) -> int:
        d = sum((u == v) + (w == v) for u, w in self.edges)
        return d + sum(1 for n, _ in self.dangling if n == v)

    @property
    def degrees(self) -> tuple[int, ...]:
        return tuple(self.degree(v) for v in range(self.node_count))

    @property
    def labels(self) -> frozenset[str]:
        return frozenset(lab for _, lab in self.dangling)


def _wl_colors(mg: Multigraph):
    # stable coloring refined from (labels, loops, degree) by neighbor multisets;
    # classes only split, so the loop ends as soon as the class count is stable
    n = mg.node_count
    loops = [0] * n
    nbrs = [[] for _ in range(n)]
    for u, v in mg.edges:
        if u == v:
            loops[u] += 1
        else:
            nbrs[u].append(v)
            nbrs[v].append(u)
    labat = [tuple(sorted(l for w, l in mg.dangling if w == v)) for v in range(n)]
    sig = [(labat[v], loops[v], mg.degree(v)) for v in range(n)]
    ranks = {s: i for i, s in enumerate(sorted(set(sig)))}
    color = [ranks[s] for s in sig]
    while True:
        sig = [(color[v], tuple(sorted(color[w] for w in nbrs[v]))) for v in range(n)]
        ranks = {s: i for i, s in enumerate(sorted(set(sig)))}
        new = [ranks[s] for s in sig]
        if len(set(new)) == len(set(color)):
            return new
        color = new


def _relabeled_key(mg: Multigraph, perm):
    edges = tuple(sorted((min(perm[u], perm[v]), max(perm[u], perm[v])) for u, v in mg.edges))
    dang = tuple(sorted((perm[n], l) for n, l in mg.dangling))
    return edges, dang


@lru_cache(maxsize=None)
def canonicalize(mg: Multigraph) -> Multigraph:
    """Minimal relabeling over all node permutations consistent with the stable
    color partition; dangling labels act as node colors.  Idempotent, and
    isomorphic inputs map to the identical output."""
    n = mg.node_count
    colors = _wl_colors(mg)
    groups: dict[int, list[int]] = {}
    for v, c in enumerate(colors):
        groups.setdefault(c, []).append(v)
    ordered_groups = [groups[c] for c in sorted(groups)]
    slot = 0
    slots = []
    for grp in ordered_groups:
        slots.append(list(range(slot, slot + len(grp))))
        slot += len(grp)
    best = None
    best_perm = None
    for assignment in itertools.product(*(itertools.permutations(s) for s in slots)):
        perm = [0] * n
        for grp, placed in zip(ordered_groups, assignment):
            for v, p in zip(grp, placed):
                perm[v] = p
        key = _relabeled_key(mg, perm)
        if best is None or key < best:
            best, best_perm = key, perm
    return Multigraph(n, best[0], best[1])


def _sort_key(mg: Multigraph):
    return (mg.node_count, mg.edges, mg.dangling)


@dataclass(frozen=True)
class DiagramExpr:
    """Exact rational linear combination of canonical multigraphs sharing one
    dangling label set.  Equality is literal equality of the term maps."""

    dangling_labels: frozenset[str]
    terms: tuple[tuple[Multigraph, Fraction], ...]

    @staticmethod
    def from_terms(labels, term_map) -> "DiagramExpr":
        labels = frozenset(labels)
        merged: dict[Multigraph, Fraction] = {}
        for mg, coeff in term_map.items():
            if mg.labels != labels:
                raise DiagramError(f"term labels {set(mg.labels)} != {set(labels)}")
            cmg = canonicalize(mg)
            merged[cmg] = merged.get(cmg, Fraction(0)) + Fraction(coeff)
        items = tuple(
            (mg, c) for mg, c in sorted(merged.items(), key=lambda t: _sort_key(t[0])) if c != 0
        )
        return DiagramExpr(labels, items)

    @staticmethod
    def zero(labels=()) -> "DiagramExpr":
        return DiagramExpr(frozenset(labels), ())

    @property
    def is_zero(self) -> bool:
        return not self.terms

    def term_map(self) -> dict[Multigraph, Fraction]:
        return dict(self.terms)

    def scale(self, c) -> "DiagramExpr":
        c = Fraction(c)
        if c == 0:
            return DiagramExpr.zero(self.dangling_labels)
        return DiagramExpr(self.dangling_labels, tuple((mg, c * w) for mg, w in self.terms))

    def __add__(self, other: "DiagramExpr") -> "DiagramExpr":
        if self.dangling_labels != other.dangling_labels:
            raise DiagramError("cannot add expressions with different dangling labels")
        out = self.term_map()
        for mg, c in other.terms:
            out[mg] = out.get(mg, Fraction(0)) + c
        items = tuple((mg, c) for mg, c in sorted(out.items(), key=lambda t: _sort_key(t[0])) if c != 0)
        return DiagramExpr(self.dangling_labels, items)

    def __sub__(self, other: "DiagramExpr") -> "DiagramExpr":
        return self + other.scale(-1)

    def relabel(self, mapping) -> "DiagramExpr":
        new_terms = {}
        for mg, c in self.terms:
            dang = tuple(sorted((n, mapping.get(l, l)) for n, l in mg.dangling))
            new_terms[Multigraph(mg.node_count, mg.edges, dang)] = c
        labels = frozenset(mapping.get(l, l) for l in self.dangling_labels)
        if len(labels) != len(self.dangling_labels):
            raise DiagramError("relabeling collapsed two labels")
        return DiagramExpr.from_terms(labels, new_terms)

    def max_degree(self) -> int:
        return max((max(mg.degrees) for mg, _ in self.terms), default=0)

    def to_json(self) -> str:
        doc = {
            "schema_version": 1,
            "dangling": sorted(self.dangling_labels),
            "terms": [
                {
                    "nodes": mg.node_count,
                    "edges": [[u, v] for u, v in mg.edges if u != v],
                    "loops": [u for u, v in mg.edges if u == v],
                    "dangling_at": [[n, l] for n, l in mg.dangling],
                    "coeff": f"{c.numerator}/{c.denominator}",
                }
                for mg, c in self.terms
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "DiagramExpr":
        doc = json.loads(text)
        terms = {}
        for item in doc["terms"]:
            edges = [tuple(e) for e in item["edges"]] + [(u, u) for u in item["loops"]]
            mg = Multigraph.make(item["nodes"], edges, [tuple(d) for d in item["dangling_at"]])
            num, den = item["coeff"].split("/")
            terms[mg] = terms.get(mg, Fraction(0)) + Fraction(int(num), int(den))
        return DiagramExpr.from_terms(doc["dangling"], terms)


def u_node(label) -> DiagramExpr:
    """The gradient of U as a diagram: one node carrying one dangling index."""
    return DiagramExpr.from_terms([label], {Multigraph.make(1, [], [(0, label)]): Fraction(1)})


def u_scalar() -> DiagramExpr:
    """U itself: a single node of degree zero."""
    return DiagramExpr.from_terms([], {Multigraph.make(1, []): Fraction(1)})


def grad(expr: DiagramExpr, new_label: str) -> DiagramExpr:
    """Leibniz gradient: attach a fresh dangling index to every node of every
    term in turn."""
    if new_label in expr.dangling_labels:
        raise DiagramError(f"label {new_label!r} already present")
    out: dict[Multigraph, Fraction] = {}
    for mg, c in expr.terms:
        for v in range(mg.node_count):
            dang = tuple(sorted(mg.dangling + ((v, new_label),)))
            g = Multigraph(mg.node_count, mg.edges, dang)
            cg = canonicalize(g)
            out[cg] = out.get(cg, Fraction(0)) + c
    return DiagramExpr.from_terms(expr.dangling_labels | {new_label}, out)


def contract(expr: DiagramExpr, a: str, b: str) -> DiagramExpr:
    """Join the two dangling edges labeled a and b into one internal edge
    (a self-loop when they sit on the same node)."""
    if a == b:
        raise DiagramError("cannot contract a label with itself")
    for lab in (a, b):
        if lab not in expr.dangling_labels:
            raise DiagramError(f"label {lab!r} not present")
    out: dict[Multigraph, Fraction] = {}
    for mg, c in expr.terms:
        na = next(n for n, l in mg.dangling if l == a)
        nb = next(n for n, l in mg.dangling if l == b)
        dang = tuple(t for t in mg.dangling if t[1] not in (a, b))
        edges = tuple(sorted(mg.edges + ((min(na, nb), max(na, nb)),)))
        g = Multigraph(mg.node_count, edges, dang)
        out[g] = out.get(g, Fraction(0)) + c
    return DiagramExpr.from_terms(expr.dangling_labels - {a, b}, out)


def multiply(e1: DiagramExpr, e2: DiagramExpr) -> DiagramExpr:
    """Pointwise product: disjoint union of diagrams, bilinear in the terms."""
    if e1.dangling_labels & e2.dangling_labels:
        raise DiagramError("label collision in product")
    out: dict[Multigraph, Fraction] = {}
    for mg1, c1 in e1.terms:
        for mg2, c2 in e2.terms:
            off = mg1.node_count
            edges = mg1.edges + tuple((u + off, v + off) for u, v in mg2.edges)
            dang = mg1.dangling + tuple((n + off, l) for n, l in mg2.dangling)
            g = Multigraph.make(mg1.node_count + mg2.node_count, edges, dang)
            out[g] = out.get(g, Fraction(0)) + c1 * c2
    return DiagramExpr.from_terms(e1.dangling_labels | e2.dangling_labels, out)


def ipp(mg: Multigraph, g: int, edge) -> DiagramExpr:
    """Integration-by-parts rewrite of a scalar integrand at node g along one
    incident edge: the integral of the input equals the integral of the result.

    Non-loop edge g--h: minus the sum of (loop moved onto g), (edge re-aimed at
    a fresh degree-one node), and (edge re-aimed at every node other than g, h).
    Loop at g: same, without the re-loop term and with all other nodes eligible.
    """
    if mg.dangling:
        raise DiagramError("integration by parts applies to scalar integrands only")
    e = (min(edge), max(edge))
    if e not in mg.edges:
        raise DiagramError(f"edge {edge} not in graph")
    if g not in e:
        raise DiagramError(f"edge {edge} not incident to node {g}")
    base = list(mg.edges)
    base.remove(e)
    out: dict[Multigraph, Fraction] = {}

    def emit(edges, node_count):
        gr = Multigraph.make(node_count, edges)
        out[gr] = out.get(gr, Fraction(0)) - 1

    if e[0] == e[1]:  # self-loop at g
        emit(base + [(g, mg.node_count)], mg.node_count + 1)
        for f in range(mg.node_count):
            if f != g:
                emit(base + [(g, f)], mg.node_count)
    else:
        h = e[0] if e[1] == g else e[1]
        emit(base + [(g, g)], mg.node_count)
        emit(base + [(g, mg.node_count)], mg.node_count + 1)
        for f in range(mg.node_count):
            if f not in (g, h):
                emit(base + [(g, f)], mg.node_count)
    return DiagramExpr.from_terms([], out)


# -- compilation of trees into closed local integrands ------------------------

@dataclass(frozen=True)
class DanglingTree:
    """A tree with a distinguished node; its value is a vector field."""

    tree: CanonicalTree
    distinguished: int

    def __post_init__(self):
        if not (0 <= self.distinguished < self.tree.node_count):
            raise DiagramError("distinguished node outside tree")


def _chain_product(child_exprs, order, cyclic):
    """Product of gradients of the children in the given order, contracted
    along the chain; returns (expr, first_grad_label, last_field_label) for an
    open chain, or the fully contracted scalar expr when cyclic."""
    m = len(order)
    factors = []
    for pos, idx in enumerate(order):
        f_lab, g_lab = f"@f{pos}", f"@g{pos}"
        e = child_exprs[idx].relabel({next(iter(child_exprs[idx].dangling_labels)): f_lab})
        factors.append(grad(e, g_lab))
    prod = factors[0]
    for f in factors[1:]:
        prod = multiply(prod, f)
    for pos in range(m - 1):
        prod = contract(prod, f"@f{pos}", f"@g{pos + 1}")
    if cyclic:
        return contract(prod, f"@f{m - 1}", "@g0")
    return prod, "@g0", f"@f{m - 1}"


def lambda_scalar(child_exprs) -> DiagramExpr:
    """The order-m symmetric trace-chain of the given one-index expressions,
    with sign (-1)^m and the 1/m cyclic normalization; potential-free."""
    m = len(child_exprs)
    total = DiagramExpr.zero([])
    for order in itertools.permutations(range(m)):
        total = total + _chain_product(child_exprs, order, cyclic=True)
    return total.scale(Fraction((-1) ** m, m))


def dangling_dual(child_exprs, out_label) -> DiagramExpr:
    """The vector field dual to pairing the order-(m+1) trace-chain against a
    test field: minus the divergence term and minus the log-density term of the
    symmetrized gradient-product matrix."""
    m = len(child_exprs)
    matrix = None
    for order in itertools.permutations(range(m)):
        prod, i_lab, j_lab = _chain_product(child_exprs, order, cyclic=False)
        prod = prod.relabel({i_lab: "@Mi", j_lab: "@Mj"})
        matrix = prod if matrix is None else matrix + prod
    matrix = matrix.scale(Fraction((-1) ** (m + 1)))
    div_term = contract(grad(matrix, "@t"), "@Mj", "@t")
    log_term = contract(multiply(matrix, u_node("@u")), "@Mj", "@u")
    out = (div_term + log_term).scale(-1)
    return out.relabel({"@Mi": out_label})


@lru_cache(maxsize=None)
def compile_dangling_tree(dt: DanglingTree, label: str = "i") -> DiagramExpr:
    """Bottom-up compilation of a dangling tree into a one-index diagram
    expression: a bare node compiles to the gradient of U, and an internal node
    dualizes the trace-chain of its compiled children."""
    tree = dt.tree
    if tree.node_count > 8:
        raise DiagramError("dangling trees supported up to 8 nodes")
    adj = tree.adjacency

    def go(node, parent, out_label):
        children = [v for v in adj[node] if v != parent]
        if not children:
            return u_node(out_label)
        child_exprs = tuple(go(c, node, f"@c{c}") for c in children)
        return dangling_dual(child_exprs, out_label)

    return go(dt.distinguished, -1, label)


@lru_cache(maxsize=None)
def compile_tree(t: CanonicalTree) -> DiagramExpr:
    """Closed local integrand of a tree's scalar value, in the canonical
    decomposition: a single centroid emits the trace-chain of its children's
    compiled fields; a centroid pair splits the central edge and pairs the two
    dangling halves.  A bare node compiles to U itself."""
    if t.node_count > 8:
        raise DiagramError("trees supported up to 8 nodes")
    if t.node_count == 1:
        return u_scalar()
    cents = t.centroids()
    if len(cents) == 1:
        return compile_tree_rooted(t, cents[0])
    c1, c2 = sorted(cents)
    left, right = _split_at_edge(t, c1, c2)
    e1 = compile_dangling_tree(left, "@a")
    e2 = compile_dangling_tree(right, "@b")
    return contract(multiply(e1, e2), "@a", "@b")


def compile_tree_rooted(t: CanonicalTree, root: int) -> DiagramExpr:
    """Trace-chain emission at an arbitrary root.  Different roots give
    different local integrands; their integrals against any density agree."""
    if t.node_count == 1:
        return u_scalar()
    adj = t.adjacency
    if not (0 <= root < t.node_count):
        raise DiagramError("root outside tree")
    child_exprs = tuple(
        compile_dangling_tree(_subtree_at(t, c, root), f"@c{c}") for c in adj[root]
    )
    return lambda_scalar(child_exprs)


def _subtree_at(t: CanonicalTree, node, banned) -> DanglingTree:
    # dangling tree of the component of `node` after removing edge (node, banned)
    adj = t.adjacency
    keep = {node}
    stack = [node]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v != banned and v not in keep:
                keep.add(v)
                stack.append(v)
    ids = {v: i for i, v in enumerate(sorted(keep))}
    edges = [(ids[u], ids[v]) for u, v in t.edges if u in keep and v in keep]
    sub = CanonicalTree.from_edges(edges, len(keep)) if edges else CanonicalTree.from_edges([], 1)
    # recover where `node` landed after canonical relabeling
    raw_edges = tuple(sorted((min(ids[u], ids[v]), max(ids[u], ids[v])) for u, v in t.edges
                             if u in keep and v in keep))
    dist = _locate(raw_edges, len(keep), ids[node], sub)
    return DanglingTree(sub, dist)


def _locate(raw_edges, n, marked, canonical_tree: CanonicalTree) -> int:
    # index of `marked` in the canonical labeling, matched through an
    # AHU-style code in which the marked node carries a distinguishing tag

    def marked_code(edges, nn, m):
        # AHU code where the marked node carries a distinguishing prefix
        adj = [[] for _ in range(nn)]
        for u, v in edges:
            adj[u].append(v)
            adj[v].append(u)

        def code(u, parent):
            subs = sorted(code(v, u) for v in adj[u] if v != parent)
            tag = b"*" if u == m else b""
            return b"(" + tag + b"".join(subs) + b")"

        return min(code(r, -1) for r in range(nn))

    target = marked_code(raw_edges, n, marked)
    for cand in range(canonical_tree.node_count):
        if marked_code(canonical_tree.edges, canonical_tree.node_count, cand) == target:
            return cand
    raise DiagramError("internal error: marked node not found after relabeling")


def _split_at_edge(t: CanonicalTree, c1, c2):
    return _subtree_at(t, c1, c2), _subtree_at(t, c2, c1)


def scan_signed_decomposition(t: CanonicalTree, density_grids, tol: float = 1e-8) -> dict:
    """Evaluate the tree's scalar value on each supplied (name, model, grid)
    triple and report the minimum value and its sign margin.  Purely
    exploratory; no proof search is attempted."""
    from entroflow.evaluator import eval_diagram

    expr = compile_tree(t)
    values = {}
    for name, model, grid in density_grids:
        values[name] = eval_diagram(expr, model, grid)
    vmin = min(values.values()) if values else float("nan")
    return {
        "tree_code": t.code.decode("ascii"),
        "node_count": t.node_count,
        "values": values,
        "min_value": vmin,
        "margin": vmin + tol,
        "nonnegative_within_tol": vmin >= -tol,
    }
