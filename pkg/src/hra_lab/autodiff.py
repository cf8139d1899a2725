"""Flat-tape reverse-mode automatic differentiation over float64 arrays.

A :class:`Graph` records every operation as a node in an append-only list,
so node ids grow monotonically and the graph is acyclic by construction.
``backward`` replays the tape in reverse; when a node feeds several
consumers, their gradient contributions are summed in ascending consumer
node-id order.  That fixed order makes gradients bit-reproducible from run
to run, which the training and checkpoint layers rely on.

All values are dense float64 numpy arrays.  Scalars are shape-() arrays.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

Array = np.ndarray


def _f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


def _stable_sigmoid(x: Array) -> Array:
    # exp(-|x|) never overflows; both branches share it
    e = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def _vector_broadcast(kind: str, a: Array, b: Array) -> bool:
    """True when b broadcasts as a vector over a's last axis; raises otherwise."""
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[0]:
        return True
    raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} are not compatible")


class Node:
    """One tape entry: an op kind, its input nodes, and the cached output."""

    __slots__ = ("graph", "nid", "kind", "parents", "value", "is_param", "name", "_vjp")

    def __init__(self, graph, nid, kind, parents, value, is_param=False, name=None, vjp=None):
        self.graph = graph
        self.nid = nid
        self.kind = kind
        self.parents = parents
        self.value = value
        self.is_param = is_param
        self.name = name
        self._vjp = vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Node({self.nid}: {self.kind}{tag}, shape={self.value.shape})"


class Graph:
    """Append-only computation tape."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._param_names: set[str] = set()
        self._cache: dict = {}

    # -- construction -------------------------------------------------

    def _append(self, kind, parents, value, vjp=None, is_param=False, name=None) -> Node:
        node = Node(self, len(self.nodes), kind, tuple(parents), value,
                    is_param=is_param, name=name, vjp=vjp)
        self.nodes.append(node)
        return node

    def parameter(self, value, name: str | None = None) -> Node:
        """Register a trainable leaf.  The array is copied; names must be unique."""
        if name is not None:
            if name in self._param_names:
                raise ContractError(f"duplicate parameter name: {name!r}")
            self._param_names.add(name)
        return self._append("param", (), np.array(value, dtype=np.float64),
                            is_param=True, name=name)

    def constant(self, value, name: str | None = None) -> Node:
        return self._append("const", (), np.array(value, dtype=np.float64), name=name)

    def wrap(self, x) -> Node:
        if isinstance(x, Node):
            if x.graph is not self:
                raise ContractError("node belongs to a different graph")
            return x
        return self.constant(x)

    def cached(self, key, builder: Callable[[], Node]) -> Node:
        node = self._cache.get(key)
        if node is None:
            node = builder()
            self._cache[key] = node
        return node

    # -- ops ----------------------------------------------------------

    def matmul(self, a, b) -> Node:
        a, b = self.wrap(a), self.wrap(b)
        av, bv = a.value, b.value
        if av.ndim != 2 or bv.ndim != 2:
            raise DimensionError(f"matmul needs 2-d operands, got {av.shape} and {bv.shape}")
        if av.shape[1] != bv.shape[0]:
            raise DimensionError(f"matmul: inner dimensions disagree: {av.shape} x {bv.shape}")

        def vjp(g):
            return g @ bv.T, av.T @ g

        return self._append("matmul", (a, b), av @ bv, vjp)

    def transpose(self, a) -> Node:
        a = self.wrap(a)
        if a.value.ndim != 2:
            raise DimensionError(f"transpose needs a 2-d operand, got {a.value.shape}")
        return self._append("transpose", (a,), np.ascontiguousarray(a.value.T),
                            lambda g: (np.ascontiguousarray(g.T),))

    def transposed(self, a: Node) -> Node:
        """Transpose with per-graph caching, for weights reused across calls."""
        a = self.wrap(a)
        return self.cached(("transpose", a.nid), lambda: self.transpose(a))

    def relu(self, a) -> Node:
        a = self.wrap(a)
        mask = a.value > 0.0  # gradient at exactly 0 is defined as 0
        return self._append("relu", (a,), np.where(mask, a.value, 0.0),
                            lambda g: (g * mask,))

    def tanh(self, a) -> Node:
        a = self.wrap(a)
        out = np.tanh(a.value)
        return self._append("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))

    def sigmoid(self, a) -> Node:
        a = self.wrap(a)
        out = _stable_sigmoid(a.value)
        return self._append("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))

    def add(self, a, b) -> Node:
        a, b = self.wrap(a), self.wrap(b)
        broadcast = _vector_broadcast("add", a.value, b.value)
        if broadcast:
            axes = tuple(range(a.value.ndim - 1))

            def vjp(g):
                return g, g.sum(axis=axes)
        else:

            def vjp(g):
                return g, g

        return self._append("add", (a, b), a.value + b.value, vjp)

    def mul(self, a, b) -> Node:
        a, b = self.wrap(a), self.wrap(b)
        av, bv = a.value, b.value
        broadcast = _vector_broadcast("mul", av, bv)
        if broadcast:
            axes = tuple(range(av.ndim - 1))

            def vjp(g):
                return g * bv, (g * av).sum(axis=axes)
        else:

            def vjp(g):
                return g * bv, g * av

        return self._append("mul", (a, b), av * bv, vjp)

    def affine(self, a, scale: float, shift: float) -> Node:
        a = self.wrap(a)
        scale = float(scale)
        return self._append("affine", (a,), scale * a.value + float(shift),
                            lambda g: (scale * g,))

    def sum(self, a) -> Node:
        a = self.wrap(a)
        shape = a.value.shape
        return self._append("sum", (a,), np.asarray(a.value.sum()),
                            lambda g: (np.full(shape, float(g)),))

    def log_softmax(self, a) -> Node:
        """Row-normalized log-probabilities over the last axis."""
        a = self.wrap(a)
        if a.value.ndim < 1:
            raise DimensionError("log_softmax needs at least one axis")
        shifted = a.value - a.value.max(axis=-1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

        def vjp(g):
            return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

        return self._append("log_softmax", (a,), out, vjp)

    def pick(self, a, row: int, col: int) -> Node:
        """Scalar gather of one element of a 2-d node."""
        a = self.wrap(a)
        if a.value.ndim != 2:
            raise DimensionError(f"pick needs a 2-d operand, got {a.value.shape}")
        shape = a.value.shape

        def vjp(g):
            z = np.zeros(shape)
            z[row, col] = float(g)
            return (z,)

        return self._append("pick", (a,), np.asarray(a.value[row, col]), vjp)

    def logaddexp(self, a, b) -> Node:
        a, b = self.wrap(a), self.wrap(b)
        if a.value.shape != b.value.shape:
            raise DimensionError(
                f"logaddexp: shapes {a.value.shape} and {b.value.shape} differ")
        out = np.logaddexp(a.value, b.value)

        def vjp(g):
            return g * np.exp(a.value - out), g * np.exp(b.value - out)

        return self._append("logaddexp", (a, b), out, vjp)

    def custom(self, kind: str, parents: Sequence[Node], value, vjp, name=None) -> Node:
        """Extension point for ops with externally computed forward/backward."""
        parents = tuple(self.wrap(p) for p in parents)
        return self._append(kind, parents, _f64(value), vjp, name=name)

    # -- reverse pass ---------------------------------------------------

    def backward(self, loss: Node) -> dict[Node, Array]:
        """Gradients of a scalar loss node for every parameter node.

        Parameters the loss does not depend on receive zero gradients of
        matching shape.  Contributions to a node from multiple consumers are
        summed in ascending (consumer id, input slot) order.
        """
        if loss.graph is not self:
            raise ContractError("loss node belongs to a different graph")
        if loss.value.shape != ():
            raise ContractError(
                f"backward needs a scalar loss node, got shape {loss.value.shape}")

        contribs: list[list[tuple[int, int, Array]]] = [[] for _ in self.nodes]
        grads: list[Array | None] = [None] * len(self.nodes)

        for nid in range(loss.nid, -1, -1):
            node = self.nodes[nid]
            if nid == loss.nid:
                total: Array = np.asarray(1.0)
            else:
                entries = contribs[nid]
                if not entries:
                    continue
                entries.sort(key=lambda e: (e[0], e[1]))
                total = entries[0][2]
                for _, _, arr in entries[1:]:
                    total = total + arr
            grads[nid] = total
            if node.parents:
                parts = node._vjp(total)
                for slot, (parent, arr) in enumerate(zip(node.parents, parts)):
                    contribs[parent.nid].append((nid, slot, np.asarray(arr)))

        return {
            n: (grads[n.nid] if grads[n.nid] is not None else np.zeros_like(n.value))
            for n in self.nodes
            if n.is_param
        }


# -- value-level wrappers ---------------------------------------------


def matmul(a, b) -> Array:
    """Matrix product of two 2-d arrays with shape validation."""
    g = Graph()
    return g.matmul(g.constant(a), g.constant(b)).value


def elementwise(kind: str, a, b=None) -> Array:
    """Pointwise op dispatch: relu/tanh/sigmoid (unary), add/mul (binary).

    Binary ops accept equal shapes, or a 1-d second operand broadcast over
    the last axis of the first.
    """
    g = Graph()
    an = g.constant(a)
    if kind in ("relu", "tanh", "sigmoid"):
        if b is not None:
            raise ContractError(f"{kind} is unary")
        return getattr(g, kind)(an).value
    if kind in ("add", "mul"):
        if b is None:
            raise ContractError(f"{kind} needs two operands")
        return getattr(g, kind)(an, g.constant(b)).value
    raise ContractError(f"unknown elementwise kind: {kind!r}")


def backward(graph: Graph, loss: Node) -> dict[Node, Array]:
    return graph.backward(loss)


def grad_check(build: Callable[[list[Array]], tuple[Node, list[Node]]],
               params: Sequence, eps: float = 1e-5) -> float:
    """Compare tape gradients against central finite differences.

    ``build`` receives a list of parameter arrays and must construct a fresh
    graph, returning ``(loss_node, param_nodes)``.  The finite-difference
    side only reads loss values at perturbed points, so it stays independent
    of the reverse pass it is checking.  Returns the max over coordinates of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if eps <= 0:
        raise ContractError("eps must be > 0")
    center = [np.array(p, dtype=np.float64) for p in params]
    loss, pnodes = build(center)
    if len(pnodes) != len(center):
        raise ContractError("build must return one node per parameter")
    if not np.isfinite(loss.value):
        raise NumericError("loss is not finite at the expansion point")
    gradmap = loss.graph.backward(loss)
    analytic = [np.asarray(gradmap[p]) for p in pnodes]

    def eval_loss(values: list[Array]) -> float:
        lnode, _ = build(values)
        v = float(lnode.value)
        if not np.isfinite(v):
            raise NumericError("non-finite loss at a finite-difference probe")
        return v

    worst = 0.0
    for i, base in enumerate(center):
        flat_analytic = analytic[i].reshape(-1)
        for j in range(base.size):
            probe = [c.copy() for c in center]
            pf = probe[i].reshape(-1)
            orig = pf[j]
            pf[j] = orig + eps
            lp = eval_loss(probe)
            pf[j] = orig - eps
            lm = eval_loss(probe)
            numeric = (lp - lm) / (2.0 * eps)
            a = float(flat_analytic[j])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if err > worst:
                worst = err
    return worst
