"""Discretization of architecture logits into genotypes, plus collapse metrics.

Text format, one retained edge per line in canonical order (normal cell
first, then by target node, then by source node)::

    cell=normal; node=2; from=0; op=skip
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .supernet import OP_NAMES, PARAMETRIC_OPS, ArchParams, SearchSpaceSpec

CELL_TYPES = ("normal", "reduce")

Edge = tuple[int, int, str]  # (node, source, op)


class GenotypeParseError(ValueError):
    pass


@dataclass(frozen=True)
class Genotype:
    normal: tuple[Edge, ...]
    reduce: tuple[Edge, ...] = ()

    def __post_init__(self):
        for name in CELL_TYPES:
            edges = tuple(sorted(tuple(e) for e in getattr(self, name)))
            seen = set()
            for node, src, op in edges:
                if op not in OP_NAMES:
                    raise ValueError(f"unknown op {op!r}")
                if not 0 <= src < node:
                    raise ValueError(f"edge {src}->{node} is not forward")
                if (node, src) in seen:
                    raise ValueError(f"duplicate edge {src}->{node} in {name} cell")
                seen.add((node, src))
            object.__setattr__(self, name, edges)

    def cell(self, kind: str) -> tuple[Edge, ...]:
        return getattr(self, kind)

    def edge_ops(self, space: SearchSpaceSpec, kind: str = "normal") -> tuple[str, ...]:
        """Op per edge of ``space`` in edge order; unretained edges are 'none'."""
        lookup = {(n, s): op for n, s, op in self.cell(kind)}
        extra = set(lookup) - {(j, i) for i, j in space.edges}
        if extra:
            raise ValueError(f"genotype edges {sorted(extra)} are not in the space")
        return tuple(lookup.get((j, i), "none") for i, j in space.edges)

    def full(self, space: SearchSpaceSpec) -> Genotype:
        """Every edge of ``space`` listed explicitly, 'none' where not retained."""
        cells = {}
        for kind in CELL_TYPES:
            if kind == "reduce" and not space.has_reduction:
                cells[kind] = ()
                continue
            ops = self.edge_ops(space, kind)
            cells[kind] = tuple((j, i, op) for (i, j), op in zip(space.edges, ops))
        return Genotype(**cells)

    def __str__(self) -> str:
        return serialize_genotype(self)


def _best_ops(weights: np.ndarray, ops: tuple[str, ...]) -> tuple[np.ndarray, np.ndarray]:
    """Per edge: index of the heaviest non-'none' op (first on ties) and its weight."""
    masked = weights.copy()
    if "none" in ops:
        masked[:, ops.index("none")] = -np.inf
    best = np.argmax(masked, axis=1)  # argmax returns the first maximum
    return best, masked[np.arange(len(best)), best]


def _softmax(a: np.ndarray) -> np.ndarray:
    z = np.exp(a - a.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def per_node_k(space: SearchSpaceSpec, k: int | Sequence[int]) -> tuple[int, ...]:
    """Expand ``k`` to one retained-edge count per intermediate node."""
    ks = (k,) * space.num_nodes if isinstance(k, (int, np.integer)) else tuple(k)
    if len(ks) != space.num_nodes:
        raise ValueError(f"expected {space.num_nodes} per-node k values, got {len(ks)}")
    if any(int(v) < 1 for v in ks):
        raise ValueError("k must be >= 1")
    return tuple(int(v) for v in ks)


def derive_cell(
    alpha: np.ndarray, space: SearchSpaceSpec, k: int | Sequence[int]
) -> tuple[Edge, ...]:
    ks = per_node_k(space, k)
    ops = space.candidate_ops
    if all(o == "none" for o in ops):
        raise ValueError("no selectable (non-'none') op in the space")
    best, score = _best_ops(_softmax(alpha), ops)
    edges = space.edges
    chosen: list[Edge] = []
    for j, kj in zip(space.node_ids, ks):
        incoming = [e for e, (i, jj) in enumerate(edges) if jj == j]
        if kj > len(incoming):
            raise ValueError(f"k={kj} exceeds the {len(incoming)} incoming edges of node {j}")
        ranked = sorted(incoming, key=lambda e: (-score[e], e))
        chosen += [(j, edges[e][0], ops[best[e]]) for e in ranked[:kj]]
    return tuple(sorted(chosen))


def derive_genotype(
    arch: ArchParams, space: SearchSpaceSpec, k: int | Sequence[int] = 2
) -> Genotype:
    """Keep, per node, the ``k`` incoming edges whose best non-'none' op weighs most.

    ``k`` is either one count for every node or a sequence with one count per
    intermediate node. Ties: lower edge index wins between edges, lower op
    index within an edge.
    """
    per_node_k(space, k)
    arch.check_finite()
    normal = derive_cell(arch.normal, space, k)
    reduce = derive_cell(arch.reduce, space, k) if arch.reduce is not None else ()
    return Genotype(normal, reduce)


def count_parametric(g: Genotype) -> int:
    """Number of weight-bearing ops in the normal cell."""
    return sum(op in PARAMETRIC_OPS for _, _, op in g.normal)


def count_skips(g: Genotype) -> int:
    return sum(op == "skip" for _, _, op in g.normal)


def serialize_genotype(g: Genotype) -> str:
    lines = [
        f"cell={kind}; node={node}; from={src}; op={op}"
        for kind in CELL_TYPES
        for node, src, op in g.cell(kind)
    ]
    return "".join(line + "\n" for line in lines)


_FIELDS = ("cell", "node", "from", "op")


def _parse_line(line: str, lineno: int) -> tuple[str, Edge]:
    values = {}
    col = 1
    parts = line.split(";")
    if len(parts) != len(_FIELDS):
        raise GenotypeParseError(
            f"line {lineno}, column 1: expected {len(_FIELDS)} ';'-separated fields, got {len(parts)}"
        )
    for key, part in zip(_FIELDS, parts):
        lead = len(part) - len(part.lstrip())
        name, eq, value = part.strip().partition("=")
        if name != key or not eq or not value:
            raise GenotypeParseError(
                f"line {lineno}, column {col + lead}: expected '{key}=<value>', got {part.strip()!r}"
            )
        values[key] = (value, col + lead + len(key) + 1)
        col += len(part) + 1
    cell, ccol = values["cell"]
    if cell not in CELL_TYPES:
        raise GenotypeParseError(f"line {lineno}, column {ccol}: unknown cell type {cell!r}")
    ints = []
    for key in ("node", "from"):
        value, vcol = values[key]
        if not value.isdigit():
            raise GenotypeParseError(f"line {lineno}, column {vcol}: {key} must be an integer")
        ints.append(int(value))
    op, ocol = values["op"]
    if op not in OP_NAMES:
        raise GenotypeParseError(f"line {lineno}, column {ocol}: unknown op {op!r}")
    return cell, (ints[0], ints[1], op)


def parse_genotype(text: str) -> Genotype:
    """Inverse of :func:`serialize_genotype`. Blank lines and ``#`` comments are skipped."""
    cells: dict[str, list[Edge]] = {k: [] for k in CELL_TYPES}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        cell, edge = _parse_line(raw, lineno)
        cells[cell].append(edge)
    try:
        return Genotype(tuple(cells["normal"]), tuple(cells["reduce"]))
    except ValueError as exc:
        raise GenotypeParseError(str(exc)) from None
