"""Batch harness: the verification suites and exploratory scans as subcommands.

Every command is deterministic given its configuration and seed, emits
machine-readable JSON (and CSV where tabular), and uses the exit-code contract
0 = pass, 2 = numerical tolerance breach, 3 = configuration or bounds error.
Timestamps never enter the main output; they go to a sidecar .meta.json.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import random
import sys
import time
from dataclasses import dataclass, field

import numpy as np
import sympy

from entroflow.density import (
    DensityError,
    build_grid,
    density_from_config,
    heat_evolve,
    logconcavity_margin,
    model_key,
)
from entroflow.diagram import DiagramError, DiagramExpr, compile_tree, ipp
from entroflow.evaluator import (
    PressureFamily,
    ResultRecord,
    entropy_time_derivative_fd,
    eval_diagram,
    eval_forest,
    eval_tree,
)
from entroflow.forest import CanonicalTree, TreeInputError, enumerate_trees, generate_forest, path_tree, star_tree
from entroflow.transport import (
    ConvectiveGeodesic,
    EntropyFunctional,
    LinearFunctional,
    Potential,
    TransportCouple,
    VelocityField,
    X_SYMS,
    energy_derivative_fd,
    energy_derivative_formula,
    gamma2_route,
    second_variation_hessian_route,
    wasserstein_fdb,
)

EXIT_OK = 0
EXIT_TOLERANCE = 2
EXIT_CONFIG = 3

NAMED_TREES = {
    "F1": lambda: path_tree(2),
    "F2": lambda: path_tree(3),
    "F3-star": lambda: star_tree(4),
    "F3-path": lambda: path_tree(4),
    "S1": lambda: star_tree(5),
    "S2": lambda: CanonicalTree.from_edges([(0, 1), (0, 2), (0, 3), (3, 4)]),
    "S3": lambda: path_tree(5),
    "T1": lambda: star_tree(6),
    "T2": lambda: CanonicalTree.from_edges([(0, 1), (1, 2), (1, 3), (2, 4), (2, 5)]),
    "T3": lambda: path_tree(6),
    "T4": lambda: CanonicalTree.from_edges([(0, 1), (0, 2), (0, 3), (0, 4), (4, 5)]),
    "T5": lambda: CanonicalTree.from_edges([(0, 1), (1, 2), (2, 3), (3, 4), (2, 5)]),
    "T6": lambda: CanonicalTree.from_edges([(0, 1), (0, 2), (0, 3), (3, 4), (4, 5)]),
}


@dataclass
class RunConfig:
    command: str
    density: dict | None = None
    times: tuple[float, ...] = ()
    orders: tuple[int, ...] = ()
    tol: float = 1e-8
    out: str | None = None
    seed: int = 0
    allow_nonlogconcave: bool = False
    golden: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")


def _parse_float_list(text):
    return tuple(float(v) for v in text.split(",") if v)


def _parse_int_list(text):
    return tuple(int(v) for v in text.split(",") if v)


def _load_density(path):
    if path is None:
        return None
    with open(path) as fh:
        return json.load(fh)


def resolve_tree(selector: str) -> CanonicalTree:
    if selector in NAMED_TREES:
        return NAMED_TREES[selector]()
    if selector.startswith("path:"):
        return path_tree(int(selector.split(":", 1)[1]))
    if selector.startswith("star:"):
        return star_tree(int(selector.split(":", 1)[1]))
    if selector.startswith("edges:"):
        pairs = selector.split(":", 1)[1].split(",")
        edges = [tuple(int(v) for v in p.split("-")) for p in pairs]
        return CanonicalTree.from_edges(edges)
    raise ValueError(f"unknown tree selector {selector!r}")


def _emit(doc: dict, out: str | None, csv_rows=None, csv_header=None) -> str:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out:
        with open(out if out.endswith(".json") else out + ".json", "w") as fh:
            fh.write(text + "\n")
        with open((out[: -len(".json")] if out.endswith(".json") else out) + ".meta.json", "w") as fh:
            json.dump({"written_at_unix": time.time()}, fh)
        if csv_rows is not None:
            base = out[: -len(".json")] if out.endswith(".json") else out
            with open(base + ".csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(csv_header)
                writer.writerows(csv_rows)
    else:
        print(text)
        if csv_rows is not None:
            buf = io.StringIO()
            writer = csv.writer(buf)
            writer.writerow(csv_header)
            writer.writerows(csv_rows)
            print(buf.getvalue(), end="")
    return text


def _golden_check(golden_dir, name, payload: str) -> int:
    import os

    os.makedirs(golden_dir, exist_ok=True)
    path = os.path.join(golden_dir, name)
    if os.path.exists(path):
        with open(path) as fh:
            if fh.read() != payload:
                print(f"golden mismatch: {path}", file=sys.stderr)
                return EXIT_TOLERANCE
        return EXIT_OK
    with open(path, "w") as fh:
        fh.write(payload)
    return EXIT_OK


def cmd_forest(cfg: RunConfig) -> int:
    n = cfg.extra["n"]
    forest = generate_forest(n)
    payload = forest.to_json()
    _emit(json.loads(payload), cfg.out)
    if cfg.golden:
        return _golden_check(cfg.golden, f"forest_{n}.json", payload)
    return EXIT_OK


def cmd_compile(cfg: RunConfig) -> int:
    selector = cfg.extra["tree"]
    tree = resolve_tree(selector)
    expr = compile_tree(tree)
    payload = expr.to_json()
    doc = json.loads(payload)
    doc["tree"] = {"code": tree.code.decode("ascii"), "edges": [list(e) for e in tree.edges]}
    _emit(doc, cfg.out)
    if cfg.golden:
        safe = selector.replace(":", "_").replace(",", "_").replace("-", "_")
        return _golden_check(cfg.golden, f"compile_{safe}.json", payload)
    return EXIT_OK


def _prepared_model(cfg_density, t):
    base = density_from_config(cfg_density)
    return heat_evolve(base, t) if t > 0 else base


def cmd_gcm_check(cfg: RunConfig) -> int:
    base_cfg = cfg.density or {"kind": "gaussian", "mean": [0.0], "cov": [1.0]}
    times = cfg.times or (0.5,)
    orders = cfg.orders or (1, 2, 3, 4, 5)
    if max(orders) > 5:
        raise TreeInputError("orders above 5 are out of scope for the sign table")
    with_fd = cfg.extra.get("fd", False)
    records = []
    rows = []
    worst = 0.0
    base = density_from_config(base_cfg)
    for t in times:
        model = heat_evolve(base, t) if t > 0 else base
        grid = build_grid(model, min(cfg.tol, 1e-8))
        margin = logconcavity_margin(model, grid)
        if margin > 1e-8 and not cfg.allow_nonlogconcave:
            print(f"log-concavity certificate failed (margin {margin:.3e})", file=sys.stderr)
            return EXIT_CONFIG
        for m in orders:
            val = eval_forest(generate_forest(m), model, grid)
            rec = {
                "density": model_key(model),
                "t": t,
                "order": m,
                "value": val,
                "sign_margin": val + cfg.tol,
                "method": "diagram",
            }
            if with_fd and m <= 4 and t > 0:
                fd = entropy_time_derivative_fd(base, t, m)
                rec["fd_value"] = (-1) ** m * fd.value
                rec["fd_error_estimate"] = fd.error_estimate
            records.append(rec)
            rows.append([t, m, f"{val:.12e}", f"{val + cfg.tol:.3e}",
                         rec.get("fd_value", "")])
            worst = min(worst, val)
    doc = {"schema_version": 1, "command": "gcm-check", "tolerance": cfg.tol,
           "records": records, "min_value": worst}
    _emit(doc, cfg.out, csv_rows=rows, csv_header=["t", "order", "value", "sign_margin", "fd_value"])
    return EXIT_OK if worst >= -cfg.tol else EXIT_TOLERANCE


def cmd_tree_values(cfg: RunConfig) -> int:
    lo, hi = cfg.extra["nodes"]
    times = cfg.times or (0.0,)
    base = density_from_config(cfg.density or {"kind": "gaussian", "mean": [0.0], "cov": [1.0]})
    rows, records = [], []
    worst = 0.0
    for t in times:
        model = heat_evolve(base, t) if t > 0 else base
        grid = build_grid(model, min(cfg.tol, 1e-8))
        margin = logconcavity_margin(model, grid)
        if margin > 1e-8 and not cfg.allow_nonlogconcave:
            print(f"log-concavity certificate failed (margin {margin:.3e})", file=sys.stderr)
            return EXIT_CONFIG
        for n in range(lo, hi + 1):
            for tree in enumerate_trees(n):
                val = eval_tree(tree, model, grid)
                worst = min(worst, val)
                records.append({"nodes": n, "code": tree.code.decode("ascii"), "t": t,
                                "value": val, "sign_margin": val + cfg.tol})
                rows.append([n, tree.code.decode("ascii"), t, f"{val:.12e}"])
    doc = {"schema_version": 1, "command": "tree-values", "tolerance": cfg.tol,
           "records": records, "min_value": worst}
    _emit(doc, cfg.out, csv_rows=rows, csv_header=["nodes", "code", "t", "value"])
    return EXIT_OK if worst >= -cfg.tol else EXIT_TOLERANCE


def cmd_fdb_verify(cfg: RunConfig) -> int:
    x0 = X_SYMS[0]
    base = density_from_config(cfg.density or {"kind": "quartic1d", "a": 0.25, "b": 0.5})
    v = VelocityField.from_exprs(1, [sympy.Rational(3, 10) * sympy.sin(x0)])
    tol = cfg.extra.get("rel_tol", 1e-4)
    cases = []
    couple = TransportCouple(base, v)
    for n in cfg.orders or (1, 2, 3, 4):
        lhs, rhs = wasserstein_fdb(couple, LinearFunctional(x0**4), n, 0.0)
        cases.append(("linear-nongeodesic", n, lhs, rhs))
    for n in (1, 2, 3):
        lhs, rhs = wasserstein_fdb(couple, EntropyFunctional(), n, 0.0)
        cases.append(("entropy-nongeodesic", n, lhs, rhs))
    geo = ConvectiveGeodesic(base, v)
    lhs, rhs = wasserstein_fdb(geo, LinearFunctional(x0**4), 3, 0.1)
    cases.append(("linear-geodesic-collapse", 3, lhs, rhs))
    records, ok = [], True
    for name, n, lhs, rhs in cases:
        rel = abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)
        records.append({"case": name, "order": n, "lhs": lhs, "rhs": rhs, "rel_err": rel})
        ok = ok and rel < tol
    doc = {"schema_version": 1, "command": "fdb-verify", "rel_tol": tol, "records": records}
    _emit(doc, cfg.out)
    return EXIT_OK if ok else EXIT_TOLERANCE


def cmd_energy_verify(cfg: RunConfig) -> int:
    x0 = X_SYMS[0]
    base = density_from_config(cfg.density or {"kind": "quartic1d", "a": 0.25, "b": 0.5})
    v = VelocityField.from_exprs(1, [sympy.Rational(3, 10) * sympy.sin(x0)])
    geo = ConvectiveGeodesic(base, v)
    grid = build_grid(base, 1e-9)
    tol = cfg.extra.get("rel_tol", 1e-4)
    fam = PressureFamily.entropy()
    records, ok = [], True
    for n in cfg.orders or (1, 2, 3):
        got = energy_derivative_formula(geo, None, fam, n, grid=grid)
        fd = energy_derivative_fd(geo, None, fam, n, grid=grid)
        rel = abs(got - fd.value) / max(abs(got), abs(fd.value), 1e-300)
        records.append({"case": "entropy-fd", "order": n, "formula": got, "fd": fd.value,
                        "rel_err": rel})
        ok = ok and rel < tol
    V = Potential.from_expr(1, x0**2 / 2 + sympy.log(sympy.sqrt(2 * sympy.pi)))
    a = gamma2_route(base, V, v, grid)
    b = second_variation_hessian_route(base, V, v, grid)
    rel = abs(a - b) / max(abs(a), abs(b), 1e-300)
    records.append({"case": "hessian-two-routes", "order": 2, "formula": a, "fd": b,
                    "rel_err": rel})
    ok = ok and rel < 1e-6
    doc = {"schema_version": 1, "command": "energy-verify", "rel_tol": tol, "records": records}
    _emit(doc, cfg.out)
    return EXIT_OK if ok else EXIT_TOLERANCE


def cmd_ipp_check(cfg: RunConfig) -> int:
    samples = cfg.extra.get("samples", 50)
    rel_tol = cfg.extra.get("rel_tol", 1e-6)
    base = density_from_config(cfg.density or {"kind": "quartic1d", "a": 0.25, "b": 0.5,
                                               "t": 0.25})
    grid = build_grid(base, 1e-8)
    rng = random.Random(cfg.seed)
    pool = []
    for n in range(2, 7):
        for tree in enumerate_trees(n):
            for mg, _ in compile_tree(tree).terms:
                if mg.node_count <= 5 and len(mg.edges) <= 7:
                    pool.append(mg)
    records, ok, produced = [], True, 0
    while produced < samples:
        mg = rng.choice(pool)
        g = rng.randrange(mg.node_count)
        incident = [e for e in mg.edges if g in e]
        if not incident:
            continue
        edge = rng.choice(incident)
        lhs = eval_diagram(DiagramExpr.from_terms([], {mg: 1}), base, grid)
        rhs = eval_diagram(ipp(mg, g, edge), base, grid)
        rel = abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)
        records.append({"nodes": mg.node_count, "edges": len(mg.edges), "node": g,
                        "edge": list(edge), "lhs": lhs, "rhs": rhs, "rel_err": rel})
        ok = ok and rel < rel_tol
        produced += 1
    doc = {"schema_version": 1, "command": "ipp-check", "seed": cfg.seed,
           "rel_tol": rel_tol, "samples": samples, "records": records}
    _emit(doc, cfg.out)
    return EXIT_OK if ok else EXIT_TOLERANCE


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="entroflow",
                                description="verification harness for entropy-derivative "
                                            "tensor diagrams along probability flows")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--density", help="density configuration JSON file")
        sp.add_argument("--t", default="", help="comma-separated times")
        sp.add_argument("--m", default="", help="comma-separated orders")
        sp.add_argument("--tol", type=float, default=1e-8)
        sp.add_argument("--out", help="output path stem (.json/.csv)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--allow-nonlogconcave", action="store_true")
        sp.add_argument("--golden", help="golden-file directory (write or compare)")

    sp = sub.add_parser("forest", help="dump a weighted forest as JSON")
    sp.add_argument("--n", type=int, required=True)
    common(sp)

    sp = sub.add_parser("compile", help="compile a tree to its diagram expression")
    sp.add_argument("--tree", required=True,
                    help="selector: F1..T6 names, path:N, star:N, or edges:0-1,1-2,...")
    common(sp)

    sp = sub.add_parser("gcm-check", help="sign table of forest values along the heat flow")
    sp.add_argument("--fd", action="store_true", help="add finite-difference cross-check")
    common(sp)

    sp = sub.add_parser("tree-values", help="per-tree value scan over node counts")
    sp.add_argument("--nodes", default="2-6", help="node range A-B or single count")
    common(sp)

    sp = sub.add_parser("fdb-verify", help="chain-rule verification along transport couples")
    sp.add_argument("--rel-tol", type=float, default=1e-4)
    common(sp)

    sp = sub.add_parser("energy-verify", help="internal-energy differential verification")
    sp.add_argument("--rel-tol", type=float, default=1e-4)
    common(sp)

    sp = sub.add_parser("ipp-check", help="randomized integration-by-parts identity checks")
    sp.add_argument("--samples", type=int, default=50)
    sp.add_argument("--rel-tol", type=float, default=1e-6)
    common(sp)
    return p


HANDLERS = {
    "forest": cmd_forest,
    "compile": cmd_compile,
    "gcm-check": cmd_gcm_check,
    "tree-values": cmd_tree_values,
    "fdb-verify": cmd_fdb_verify,
    "energy-verify": cmd_energy_verify,
    "ipp-check": cmd_ipp_check,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    extra = {}
    if args.command == "forest":
        extra["n"] = args.n
    if args.command == "compile":
        extra["tree"] = args.tree
    if args.command == "gcm-check":
        extra["fd"] = args.fd
    if args.command == "tree-values":
        text = args.nodes
        lo, hi = (text.split("-") + [text])[:2] if "-" in text else (text, text)
        extra["nodes"] = (int(lo), int(hi))
    if args.command in ("fdb-verify", "energy-verify", "ipp-check"):
        extra["rel_tol"] = args.rel_tol
    if args.command == "ipp-check":
        extra["samples"] = args.samples
    try:
        cfg = RunConfig(
            command=args.command,
            density=_load_density(args.density),
            times=_parse_float_list(args.t),
            orders=_parse_int_list(args.m),
            tol=args.tol,
            out=args.out,
            seed=args.seed,
            allow_nonlogconcave=args.allow_nonlogconcave,
            golden=args.golden,
            extra=extra,
        )
        return HANDLERS[args.command](cfg)
    except (DensityError, DiagramError, TreeInputError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
