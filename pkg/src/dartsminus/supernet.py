"""Cell-based supernet with softmax-mixed edges and an auxiliary skip branch.

A cell is a DAG over ``cell_inputs`` input nodes followed by ``num_nodes``
intermediate nodes. Every intermediate node ``j`` receives one edge from each
earlier node ``i < j``. Edges are numbered by target node, then source node.

Each mixed edge computes::

    beta * aux(x) + sum_o softmax(alpha_row)_o * o(x)

With ``aux`` the identity this is ``(beta + w_skip) * x + sum_{o != skip} w_o * o(x)``.
At ``beta == 0`` it is the plain DARTS mixture.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

OP_NAMES = ("none", "skip", "conv1x1", "conv3x3", "avgpool3x3", "sepconv3x3")
PARAMETRIC_OPS = frozenset({"conv1x1", "conv3x3", "sepconv3x3"})
AUX_KINDS = ("identity-skip", "learnable-projection")
AGGREGATES = ("concat", "sum", "last")


@dataclass(frozen=True)
class SearchSpaceSpec:
    num_nodes: int = 2
    candidate_ops: tuple[str, ...] = ("none", "skip", "conv3x3", "avgpool3x3")
    num_cells: int = 1
    channels: int = 8
    has_reduction: bool = False
    cell_inputs: int = 2
    aggregate: str = "concat"
    aux: str = "identity-skip"
    aux_on_input_edges: bool = True
    op_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "candidate_ops", tuple(self.candidate_ops))
        if self.num_nodes < 1:
            raise ValueError("num_nodes must be >= 1")
        if not self.candidate_ops:
            raise ValueError("candidate_ops must be nonempty")
        unknown = [o for o in self.candidate_ops if o not in OP_NAMES]
        if unknown:
            raise ValueError(f"unknown candidate ops {unknown}; choose from {OP_NAMES}")
        if len(set(self.candidate_ops)) != len(self.candidate_ops):
            raise ValueError("candidate_ops contains duplicates")
        if "skip" not in self.candidate_ops:
            raise ValueError("candidate_ops must include 'skip'")
        if self.num_cells < 1 or self.channels < 1:
            raise ValueError("num_cells and channels must be >= 1")
        if self.cell_inputs not in (1, 2):
            raise ValueError("cell_inputs must be 1 or 2")
        if self.aggregate not in AGGREGATES:
            raise ValueError(f"aggregate must be one of {AGGREGATES}")
        if self.aux not in AUX_KINDS:
            raise ValueError(f"aux must be one of {AUX_KINDS}")
        if self.has_reduction and self.num_cells < 2:
            raise ValueError("has_reduction needs num_cells >= 2")

    @property
    def edges(self) -> list[tuple[int, int]]:
        first = self.cell_inputs
        return [(i, j) for j in range(first, first + self.num_nodes) for i in range(j)]

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_ops(self) -> int:
        return len(self.candidate_ops)

    def op_index(self, name: str) -> int:
        return self.candidate_ops.index(name)

    @property
    def node_ids(self) -> list[int]:
        return list(range(self.cell_inputs, self.cell_inputs + self.num_nodes))

    def reduction_cells(self) -> list[int]:
        if not self.has_reduction:
            return []
        n = self.num_cells
        return sorted({k for k in (n // 3, 2 * n // 3) if 1 <= k < n} or {n - 1})

    def cell_types(self) -> list[str]:
        red = set(self.reduction_cells())
        return ["reduce" if k in red else "normal" for k in range(self.num_cells)]

    def has_aux(self, edge: tuple[int, int]) -> bool:
        return self.aux_on_input_edges or edge[0] >= self.cell_inputs

    def with_(self, **kw) -> SearchSpaceSpec:
        return replace(self, **kw)


@dataclass
class ArchParams:
    """Architecture logits, one (num_edges, num_ops) matrix per cell type."""

    normal: np.ndarray
    reduce: np.ndarray | None = None

    @classmethod
    def zeros(cls, space: SearchSpaceSpec) -> ArchParams:
        shape = (space.num_edges, space.num_ops)
        return cls(np.zeros(shape), np.zeros(shape) if space.has_reduction else None)

    @classmethod
    def random(cls, space: SearchSpaceSpec, rng: np.random.Generator, scale=1e-3) -> ArchParams:
        shape = (space.num_edges, space.num_ops)
        normal = scale * rng.standard_normal(shape)
        reduce = scale * rng.standard_normal(shape) if space.has_reduction else None
        return cls(normal, reduce)

    def items(self) -> list[tuple[str, np.ndarray]]:
        out = [("normal", self.normal)]
        if self.reduce is not None:
            out.append(("reduce", self.reduce))
        return out

    def copy(self) -> ArchParams:
        return ArchParams(
            self.normal.copy(), None if self.reduce is None else self.reduce.copy()
        )

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for _, a in self.items()])

    def unflatten(self, vec: np.ndarray) -> ArchParams:
        n = self.normal.size
        normal = np.asarray(vec[:n], dtype=np.float64).reshape(self.normal.shape).copy()
        reduce = None
        if self.reduce is not None:
            reduce = np.asarray(vec[n:], dtype=np.float64).reshape(self.reduce.shape).copy()
        return ArchParams(normal, reduce)

    def softmax(self, kind: str = "normal") -> np.ndarray:
        a = self.normal if kind == "normal" else self.reduce
        z = np.exp(a - a.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def check_finite(self):
        for name, a in self.items():
            if not np.isfinite(a).all():
                raise FloatingPointError(f"architecture logits ({name}) are not finite")


# ---------------------------------------------------------------------------
# candidate operations
# ---------------------------------------------------------------------------


def op_param_shapes(op: str, c: int) -> dict[str, tuple[int, ...]]:
    if op == "conv1x1":
        return {"w": (c, c, 1, 1)}
    if op == "conv3x3":
        return {"w": (c, c, 3, 3)}
    if op == "sepconv3x3":
        return {"w1": (c, c, 3, 3), "w2": (c, c, 3, 3)}
    return {}


def _relu_conv(x: Tensor, w: Tensor, stride: int, norm: bool) -> Tensor:
    y = ad.conv2d(ad.relu(x), w, stride=stride, padding=w.shape[-1] // 2)
    return ad.batchnorm(y) if norm else y


def _downsample(x: Tensor, stride: int) -> Tensor:
    return x if stride == 1 else ad.avgpool2d(x, kernel=3, stride=stride, padding=1)


def apply_op(
    op: str, x: Tensor, params: Mapping[str, Tensor], stride: int = 1, norm: bool = True
) -> Tensor | None:
    """Apply candidate ``op`` to ``x``. Returns ``None`` for 'none' (an all-zero output).

    Conv ops are ReLU -> conv, followed by batch normalization when ``norm``.
    """
    if op == "none":
        return None
    if op == "skip":
        return _downsample(x, stride)
    if op == "avgpool3x3":
        return ad.avgpool2d(x, kernel=3, stride=stride, padding=1)
    if op in ("conv1x1", "conv3x3"):
        return _relu_conv(x, params["w"], stride, norm)
    if op == "sepconv3x3":
        return _relu_conv(_relu_conv(x, params["w1"], stride, norm), params["w2"], 1, norm)
    raise KeyError(f"unknown op {op!r}")


def _zeros_like_output(x: Tensor, stride: int) -> Tensor:
    n, c, h, w = x.shape
    return Tensor(np.zeros((n, c, (h - 1) // stride + 1, (w - 1) // stride + 1)))


def aux_forward(kind: str, x: Tensor, proj: Tensor | None, stride: int) -> Tensor:
    """The auxiliary branch: stride-matched average pool, then identity or 1x1 projection."""
    y = _downsample(x, stride)
    if kind == "learnable-projection":
        y = ad.conv2d(y, proj, stride=1, padding=0)
    return y


def mixed_edge_forward(
    x: Tensor,
    alpha_row: Tensor,
    beta: float,
    ops: Sequence[tuple[str, Callable[[Tensor], Tensor | None]]],
    aux: Callable[[Tensor], Tensor] | None = None,
) -> Tensor:
    """``beta * aux(x) + sum_o softmax(alpha_row)_o * o(x)``.

    ``ops`` pairs each candidate name with a callable; a callable returning
    ``None`` contributes zero (the 'none' op). ``aux`` defaults to identity.
    """
    if alpha_row.shape != (len(ops),):
        raise ValueError(f"alpha_row has shape {alpha_row.shape}, expected ({len(ops)},)")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    weights = ad.softmax(alpha_row)
    terms = []
    for k, (name, fn) in enumerate(ops):
        y = fn(x)
        if y is None:
            continue
        if terms and y.shape != terms[0].shape:
            raise ValueError(
                f"mixed edge: op {name!r} output {y.shape} does not match {terms[0].shape}"
            )
        terms.append(ad.scale(y, ad.take(weights, k)))
    a = aux(x) if aux is not None else x
    if not terms:
        out = Tensor(np.zeros(a.shape))
    else:
        out = ad.add_n(terms)
    if a.shape != out.shape:
        raise ValueError(f"mixed edge: aux output {a.shape} does not match {out.shape}")
    return ad.add(out, ad.mul_const(a, beta))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _he(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def init_weights(
    space: SearchSpaceSpec,
    in_channels: int,
    num_classes: int,
    rng: np.random.Generator,
    edge_ops: Sequence[Sequence[str]] | None = None,
) -> dict[str, np.ndarray]:
    """Network weights in a fixed key order.

    ``edge_ops[c][e]`` restricts cell ``c`` / edge ``e`` to the listed ops (a
    discrete network); by default every candidate op gets weights.
    """
    c = space.channels
    w: dict[str, np.ndarray] = {"stem.w": _he(rng, (c, in_channels, 3, 3))}
    for k in range(space.num_cells):
        for e, edge in enumerate(space.edges):
            ops = space.candidate_ops if edge_ops is None else edge_ops[k][e]
            for op in ops:
                for pname, shape in op_param_shapes(op, c).items():
                    w[f"cell{k}.e{e}.{op}.{pname}"] = _he(rng, shape)
            if edge_ops is None and space.aux == "learnable-projection" and space.has_aux(edge):
                w[f"cell{k}.e{e}.aux.proj"] = np.eye(c).reshape(c, c, 1, 1)
        if space.aggregate == "concat" and space.num_nodes > 1:
            w[f"cell{k}.proj"] = _he(rng, (c, c * space.num_nodes, 1, 1))
    w["head.w"] = rng.standard_normal((c, num_classes)) * np.sqrt(1.0 / c)
    w["head.b"] = np.zeros(num_classes)
    return w


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _edge_params(weights: Mapping[str, Tensor], k: int, e: int, op: str) -> dict[str, Tensor]:
    prefix = f"cell{k}.e{e}.{op}."
    return {name[len(prefix):]: t for name, t in weights.items() if name.startswith(prefix)}


def _aggregate(space: SearchSpaceSpec, states: list[Tensor], weights, k: int) -> Tensor:
    nodes = states[space.cell_inputs:]
    if space.aggregate == "last" or len(nodes) == 1:
        return nodes[-1]
    if space.aggregate == "sum":
        return ad.add_n(nodes)
    return ad.conv2d(ad.concat(nodes, axis=1), weights[f"cell{k}.proj"])


def _check_inputs(space: SearchSpaceSpec, inputs: Sequence[Tensor]):
    if len(inputs) != space.cell_inputs:
        raise ValueError(f"cell expects {space.cell_inputs} inputs, got {len(inputs)}")
    for x in inputs:
        if x.shape[1] != space.channels:
            raise ValueError(
                f"cell input has {x.shape[1]} channels, space has {space.channels}"
            )


def _match_inputs(inputs: Sequence[Tensor]) -> list[Tensor]:
    # a cell after a reduction sees s0 at twice the resolution of s1
    if len(inputs) == 2 and inputs[0].shape[2] != inputs[1].shape[2]:
        return [ad.avgpool2d(inputs[0], kernel=3, stride=2, padding=1), inputs[1]]
    return list(inputs)


def cell_forward(
    space: SearchSpaceSpec,
    k: int,
    inputs: Sequence[Tensor],
    weights: Mapping[str, Tensor],
    alpha: Tensor,
    beta: float,
    reduction: bool = False,
) -> Tensor:
    """Mixed cell ``k``: node ``j`` is the sum of mixed edges from all ``i < j``."""
    _check_inputs(space, inputs)
    if alpha.shape != (space.num_edges, space.num_ops):
        raise ValueError(
            f"arch matrix {alpha.shape} does not match {space.num_edges} edges x {space.num_ops} ops"
        )
    states = _match_inputs(inputs)
    e = 0
    for j in space.node_ids:
        incoming = []
        for i in range(j):
            stride = 2 if reduction and i < space.cell_inputs else 1
            ops = [
                (op, _bind(op, _edge_params(weights, k, e, op), stride, space.op_norm))
                for op in space.candidate_ops
            ]
            if space.has_aux((i, j)):
                proj = weights.get(f"cell{k}.e{e}.aux.proj")
                aux = _bind_aux(space.aux, proj, stride)
                b = beta
            else:
                aux, b = _bind_aux("identity-skip", None, stride), 0.0
            incoming.append(mixed_edge_forward(states[i], ad.take(alpha, e), b, ops, aux))
            e += 1
        states.append(ad.add_n(incoming))
    return _aggregate(space, states, weights, k)


def _bind(op, params, stride, norm):
    return lambda x: apply_op(op, x, params, stride, norm)


def _bind_aux(kind, proj, stride):
    return lambda x: aux_forward(kind, x, proj, stride)


def discrete_cell_forward(
    space: SearchSpaceSpec,
    k: int,
    inputs: Sequence[Tensor],
    weights: Mapping[str, Tensor],
    edge_ops: Sequence[str],
    reduction: bool = False,
) -> Tensor:
    """Cell with one fixed op per edge (``edge_ops[e]``; 'none' drops the edge)."""
    _check_inputs(space, inputs)
    states = _match_inputs(inputs)
    e = 0
    for j in space.node_ids:
        incoming = []
        for i in range(j):
            stride = 2 if reduction and i < space.cell_inputs else 1
            params = _edge_params(weights, k, e, edge_ops[e])
            y = apply_op(edge_ops[e], states[i], params, stride, space.op_norm)
            if y is None:
                y = _zeros_like_output(states[i], stride)
            incoming.append(y)
            e += 1
        states.append(ad.add_n(incoming))
    return _aggregate(space, states, weights, k)


def _stem(x: Tensor, weights) -> Tensor:
    return ad.batchnorm(ad.conv2d(x, weights["stem.w"], stride=1, padding=1))


def _head(x: Tensor, weights) -> Tensor:
    return ad.bias(ad.matmul(ad.gap(x), weights["head.w"]), weights["head.b"])


def network_forward(
    space: SearchSpaceSpec,
    x: Tensor,
    weights: Mapping[str, Tensor],
    cell_fn: Callable[[int, list[Tensor], bool], Tensor],
) -> Tensor:
    s = _stem(x, weights)
    types = space.cell_types()
    if space.cell_inputs == 1:
        for k in range(space.num_cells):
            s = cell_fn(k, [s], types[k] == "reduce")
        return _head(s, weights)
    s0 = s1 = s
    for k in range(space.num_cells):
        s0, s1 = s1, cell_fn(k, [s0, s1], types[k] == "reduce")
    return _head(s1, weights)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


@dataclass
class Supernet:
    """Weights plus the space they instantiate; the architecture is passed per call."""

    space: SearchSpaceSpec
    in_channels: int
    num_classes: int
    weights: dict[str, np.ndarray] = field(repr=False)

    @classmethod
    def create(cls, space, in_channels, num_classes, rng) -> Supernet:
        return cls(space, in_channels, num_classes, init_weights(space, in_channels, num_classes, rng))

    def forward(self, x: Tensor, weights: Mapping[str, Tensor], arch: Mapping[str, Tensor], beta: float):
        def cell(k, inputs, reduction):
            alpha = arch["reduce"] if reduction else arch["normal"]
            return cell_forward(self.space, k, inputs, weights, alpha, beta, reduction)

        return network_forward(self.space, x, weights, cell)

    def loss_and_grads(
        self,
        batch: np.ndarray,
        labels: np.ndarray,
        arch: ArchParams,
        beta: float,
        wrt: str | None = "weights",
        context: str = "",
    ) -> tuple[float, float, dict[str, np.ndarray]]:
        """Cross-entropy loss, accuracy, and gradients w.r.t. ``wrt``.

        ``wrt`` is one of ``"weights"``, ``"arch"``, ``"both"`` or ``None``.
        Gradient keys are weight names and ``"arch.normal"`` / ``"arch.reduce"``.
        """
        tape = Tape()
        on_w = wrt in ("weights", "both")
        on_a = wrt in ("arch", "both")
        w = {k: tape.var(v) if on_w else Tensor(v) for k, v in self.weights.items()}
        a = {k: tape.var(v) if on_a else Tensor(v) for k, v in arch.items()}
        loss, acc, logits = supernet_forward(self, Tensor(batch), labels, a, beta, w, context)
        grads: dict[str, np.ndarray] = {}
        if wrt is not None:
            g = ad.backward(loss)
            if on_w:
                grads.update({k: g[t] for k, t in w.items()})
            if on_a:
                grads.update({f"arch.{k}": g[t] for k, t in a.items()})
        return loss.item(), acc, grads


def supernet_forward(
    net: Supernet,
    batch: Tensor,
    labels: np.ndarray,
    arch: Mapping[str, Tensor],
    beta: float,
    weights: Mapping[str, Tensor] | None = None,
    context: str = "",
) -> tuple[Tensor, float, np.ndarray]:
    """Cross-entropy loss tensor, batch accuracy, and raw logits."""
    labels = np.asarray(labels)
    if batch.shape[0] != labels.shape[0] or batch.shape[1] != net.in_channels:
        raise ValueError(f"batch {batch.shape} does not match labels {labels.shape}")
    if weights is None:
        weights = {k: Tensor(v) for k, v in net.weights.items()}
    logits = net.forward(batch, weights, arch, beta)
    loss = ad.cross_entropy(logits, labels)
    if not np.isfinite(loss.data).all():
        raise FloatingPointError(f"non-finite loss{' at ' + context if context else ''}")
    return loss, accuracy(logits.data, labels), logits.data


# ---------------------------------------------------------------------------
# discrete networks
# ---------------------------------------------------------------------------


@dataclass
class DiscreteNet:
    """Standalone network with the same cell repeated in every cell position."""

    space: SearchSpaceSpec
    edge_ops: dict[str, tuple[str, ...]]  # cell type -> op per edge
    in_channels: int
    num_classes: int
    weights: dict[str, np.ndarray] = field(repr=False)

    @classmethod
    def create(cls, space, edge_ops, in_channels, num_classes, rng) -> DiscreteNet:
        types = space.cell_types()
        per_cell = [[(op,) for op in edge_ops[t]] for t in types]
        weights = init_weights(space.with_(aux="identity-skip"), in_channels, num_classes, rng, per_cell)
        return cls(space, {k: tuple(v) for k, v in edge_ops.items()}, in_channels, num_classes, weights)

    def forward(self, x: Tensor, weights: Mapping[str, Tensor]) -> Tensor:
        def cell(k, inputs, reduction):
            ops = self.edge_ops["reduce" if reduction else "normal"]
            return discrete_cell_forward(self.space, k, inputs, weights, ops, reduction)

        return network_forward(self.space, x, weights, cell)

    def loss_and_grads(self, batch, labels, train: bool = True):
        tape = Tape()
        w = {k: tape.var(v) if train else Tensor(v) for k, v in self.weights.items()}
        logits = self.forward(Tensor(batch), w)
        loss = ad.cross_entropy(logits, labels)
        grads = {}
        if train:
            g = ad.backward(loss)
            grads = {k: g[t] for k, t in w.items()}
        return loss.item(), accuracy(logits.data, np.asarray(labels)), grads
