"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Graph` records one evaluation of a Python function written with
the ops in this module. Each node keeps its forward closure, so parts of
the graph can be re-executed at substituted values; that is what makes the
trajectory-average backward override possible without special-casing the
code that builds the graph.

Ops accept :class:`Var` handles or plain arrays. When no argument belongs
to a graph the op simply evaluates with numpy, which lets model and defense
code run untaped with exactly the same arithmetic as under the tape.
"""

from __future__ import annotations

import builtins
import contextvars
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from workbench import kernels


class GraphError(ValueError):
    """Misuse of a graph: bad shapes, missing evaluation, non-scalar output."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or inf."""

    def __init__(self, message, node=None, op=None):
        super().__init__(message)
        self.node = node
        self.op = op


# --------------------------------------------------------------------------
# call accounting
# --------------------------------------------------------------------------


@dataclass
class CostRecord:
    """Forward/backward pass counts split by network role."""

    forwards: Counter = field(default_factory=Counter)
    backwards: Counter = field(default_factory=Counter)

    def forward(self, role, n=1):
        self.forwards[role] += n

    def backward(self, role, n=1):
        self.backwards[role] += n

    def total(self, role=None):
        if role is None:
            return builtins.sum(self.forwards.values()) + builtins.sum(self.backwards.values())
        return self.forwards[role] + self.backwards[role]

    def merge(self, other):
        self.forwards.update(other.forwards)
        self.backwards.update(other.backwards)

    def as_dict(self):
        roles = sorted(set(self.forwards) | set(self.backwards))
        return {r: {"forward": self.forwards[r], "backward": self.backwards[r]} for r in roles}


_cost_stack: contextvars.ContextVar[tuple] = contextvars.ContextVar("workbench_cost", default=())


class track_cost:
    """Context manager collecting network pass counts made inside it.

    Nested scopes all receive the counts, so an outer scope sees the total.
    """

    def __init__(self, record=None):
        self.record = record if record is not None else CostRecord()

    def __enter__(self):
        self._token = _cost_stack.set(_cost_stack.get() + (self.record,))
        return self.record

    def __exit__(self, *exc):
        _cost_stack.reset(self._token)
        return False


def count_forward(role):
    if role is not None:
        for rec in _cost_stack.get():
            rec.forward(role)


def count_backward(role):
    if role is not None:
        for rec in _cost_stack.get():
            rec.backward(role)


# --------------------------------------------------------------------------
# overrides
# --------------------------------------------------------------------------

OVERRIDE_KINDS = ("identity", "linear", "trajectory")


@dataclass(frozen=True)
class BackwardOverride:
    """Replacement for a node's local Jacobian during backward.

    ``identity`` passes the incoming gradient to the first parent unchanged.
    ``linear`` applies ``payload`` (a callable, or a matrix multiplied on the
    right). ``trajectory`` averages the downstream gradient over a list of
    substituted values for the node; with ``payload=None`` the iterates
    recorded by a composite node are used.
    """

    kind: str
    payload: Any = None

    def __post_init__(self):
        if self.kind not in OVERRIDE_KINDS:
            raise ValueError(f"unknown override kind {self.kind!r}")
        if self.kind == "trajectory" and self.payload is not None and len(self.payload) == 0:
            raise ValueError("trajectory override needs at least one iterate")
        if self.kind == "linear" and self.payload is None:
            raise ValueError("linear override needs a map")

    @classmethod
    def identity(cls):
        return cls("identity")

    @classmethod
    def linear(cls, m):
        return cls("linear", m)

    @classmethod
    def trajectory(cls, iterates=None):
        if iterates is not None:
            iterates = [np.asarray(it, dtype=np.float64) for it in iterates]
        return cls("trajectory", iterates)


# --------------------------------------------------------------------------
# graph
# --------------------------------------------------------------------------


class Node:
    __slots__ = ("op", "parents", "value", "ctx", "fwd", "bwd", "override", "requires", "role")

    def __init__(self, op, parents, value, ctx, fwd, bwd, requires, role=None):
        self.op = op
        self.parents = parents
        self.value = value
        self.ctx = ctx
        self.fwd = fwd
        self.bwd = bwd
        self.override = None
        self.requires = requires
        self.role = role


class Var:
    """Handle to one node of a graph."""

    __slots__ = ("graph", "index")
    __array_priority__ = 100.0

    def __init__(self, graph, index):
        self.graph = graph
        self.index = index

    @property
    def value(self):
        return self.graph.nodes[self.index].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        node = self.graph.nodes[self.index]
        return f"Var(#{self.index} {node.op} shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


def value_of(x):
    return x.value if isinstance(x, Var) else x


class Graph:
    """A recorded evaluation of ``fn`` plus the state needed for backward.

    ``fn`` maps input :class:`Var` handles to one output :class:`Var`.
    ``input_shapes`` entries may use ``None`` for free (batch) dimensions.
    """

    def __init__(self, fn=None, input_shapes=None, name=""):
        self.fn = fn
        self.input_shapes = input_shapes
        self.name = name
        self.nodes: list[Node] = []
        self.inputs: list[int] = []
        self.output: int | None = None
        self.overrides: dict[int, BackwardOverride] = {}
        self.forward_calls = 0
        self.backward_calls = 0

    def __len__(self):
        return len(self.nodes)

    # -- recording ---------------------------------------------------------

    def reset(self):
        self.nodes = []
        self.inputs = []
        self.output = None

    def input(self, value, requires=True):
        value = np.asarray(value, dtype=np.float64)
        idx = len(self.nodes)
        self.nodes.append(Node("input", (), value, None, None, None, requires))
        self.inputs.append(idx)
        return Var(self, idx)

    def const(self, value):
        value = np.asarray(value, dtype=np.float64)
        idx = len(self.nodes)
        self.nodes.append(Node("const", (), value, None, None, None, False))
        return Var(self, idx)

    def _as_index(self, x):
        if isinstance(x, Var):
            if x.graph is not self:
                raise GraphError("cannot mix variables from different graphs")
            return x.index
        return self.const(x).index

    def push(self, op, args, fwd, bwd, role=None, override=None):
        parents = tuple(self._as_index(a) for a in args)
        values = [self.nodes[p].value for p in parents]
        idx = len(self.nodes)
        try:
            value, ctx = fwd(*values)
        except GraphError:
            raise
        except ValueError as exc:
            shapes = [v.shape for v in values]
            raise GraphError(f"node {idx} ({op}): {exc}; parent shapes {shapes}", node=idx) from exc
        _check_finite(value, op, idx)
        requires = any(self.nodes[p].requires for p in parents)
        node = Node(op, parents, value, ctx, fwd, bwd, requires, role)
        ov = override if override is not None else self.overrides.get(idx)
        if ov is not None:
            _validate_override(ov, node, values, idx)
            node.override = ov
        self.nodes.append(node)
        return Var(self, idx)

    # -- evaluation ----------------------------------------------------------

    def evaluate(self, inputs):
        if self.fn is None:
            raise GraphError("graph has no function to evaluate")
        inputs = [np.asarray(v, dtype=np.float64) for v in inputs]
        if self.input_shapes is not None:
            if len(inputs) != len(self.input_shapes):
                raise GraphError(f"expected {len(self.input_shapes)} inputs, got {len(inputs)}")
            for i, (v, shape) in enumerate(zip(inputs, self.input_shapes)):
                if len(shape) != v.ndim or any(s is not None and s != t for s, t in zip(shape, v.shape)):
                    raise GraphError(f"input {i} has shape {v.shape}, declared {tuple(shape)}", node=i)
        self.reset()
        handles = [self.input(v) for v in inputs]
        out = self.fn(*handles)
        if not isinstance(out, Var):
            out = self.const(out)
        self.output = out.index
        self.forward_calls += 1
        return out.value

    def vjp(self, seed, wrt):
        """Pull ``seed`` (shaped like the output) back to the listed nodes."""
        if self.output is None:
            raise GraphError("graph has not been evaluated")
        grads = self._backprop({self.output: np.asarray(seed, dtype=np.float64)}, self.output)
        out = []
        for idx in wrt:
            g = grads.get(idx)
            out.append(np.zeros_like(self.nodes[idx].value) if g is None else g)
        return out

    def _backprop(self, grads, start, values=None, ctxs=None, stop=None, among=None):
        """Accumulate gradients from node ``start`` backwards.

        ``values``/``ctxs`` replace node state for re-executed nodes, ``among``
        restricts propagation to a node subset, and ``stop`` marks a node
        whose gradient is wanted but whose parents are not visited.
        """
        nodes = self.nodes
        order = range(start, -1, -1) if among is None else sorted(among, reverse=True)
        for i in order:
            g = grads.get(i)
            if g is None:
                continue
            node = nodes[i]
            if not node.parents or i == stop or not node.requires:
                continue
            value = node.value if values is None else values.get(i, node.value)
            ctx = node.ctx if ctxs is None else ctxs.get(i, node.ctx)
            pvals = [nodes[p].value if values is None else values.get(p, nodes[p].value) for p in node.parents]
            needs = [nodes[p].requires for p in node.parents]
            pgrads = self._local_backward(i, node, g, ctx, pvals, value, needs)
            for p, gp, need in zip(node.parents, pgrads, needs):
                if gp is None or not need:
                    continue
                if among is not None and p not in among and p != stop:
                    continue
                prev = grads.get(p)
                grads[p] = gp if prev is None else prev + gp
        return grads

    def _local_backward(self, i, node, g, ctx, pvals, value, needs):
        ov = node.override
        if ov is None:
            return node.bwd(g, ctx, pvals, value, needs)
        rest = (None,) * (len(node.parents) - 1)
        if ov.kind == "identity":
            return (g,) + rest
        if ov.kind == "linear":
            m = ov.payload
            return ((m(g) if callable(m) else g @ np.asarray(m)),) + rest
        iterates = ov.payload
        if iterates is None:
            iterates = getattr(ctx, "iterates", None)
        if not iterates:
            raise GraphError(f"node {i} ({node.op}) has a trajectory override but no iterates", node=i)
        total = np.zeros_like(value)
        for it in iterates:
            it = np.asarray(it, dtype=np.float64)
            if it.shape != value.shape:
                raise GraphError(f"node {i}: iterate shape {it.shape} != node shape {value.shape}", node=i)
            total += self._downstream_grad(i, it)
        return (total / len(iterates),) + rest

    def _downstream_grad(self, k, value):
        """d(output)/d(node k) with node k's value replaced by ``value``."""
        nodes = self.nodes
        desc = set()
        reach = {k}
        for j in range(k + 1, self.output + 1):
            if any(p in reach for p in nodes[j].parents):
                desc.add(j)
                reach.add(j)
        if self.output not in desc and self.output != k:
            return np.zeros_like(value)
        values = {k: value}
        ctxs = {}
        for j in sorted(desc):
            node = nodes[j]
            pvals = [values.get(p, nodes[p].value) for p in node.parents]
            if node.override is not None and node.override.kind == "trajectory":
                raise GraphError(f"node {j}: nested trajectory overrides are not supported", node=j)
            v, c = node.fwd(*pvals)
            _check_finite(v, node.op, j)
            values[j] = v
            ctxs[j] = c
        if self.output == k:
            return np.ones_like(value)
        grads = {self.output: np.ones_like(values[self.output])}
        grads = self._backprop(grads, self.output, values=values, ctxs=ctxs, stop=k, among=desc | {k})
        g = grads.get(k)
        return np.zeros_like(value) if g is None else g


def _check_finite(value, op, idx):
    if isinstance(value, np.ndarray):
        if not np.isfinite(value).all():
            raise NonFiniteError(f"non-finite value produced by {op} at node {idx}", node=idx, op=op)
    elif not np.isfinite(value):
        raise NonFiniteError(f"non-finite value produced by {op}", node=idx, op=op)


def _validate_override(ov, node, pvals, idx):
    if not pvals:
        raise GraphError(f"node {idx} ({node.op}) has no parents to override", node=idx)
    if ov.kind in ("identity", "trajectory") and pvals[0].shape != node.value.shape:
        raise GraphError(
            f"{ov.kind} override on node {idx} ({node.op}) needs equal shapes, "
            f"got {pvals[0].shape} -> {node.value.shape}",
            node=idx,
        )


# --------------------------------------------------------------------------
# public graph operations
# --------------------------------------------------------------------------


def forward_eval(graph, inputs):
    """Record ``graph.fn`` on ``inputs`` and return the output value."""
    return graph.evaluate(inputs)


def backward_grad(graph, wrt=0):
    """Gradient of the scalar output with respect to input ``wrt``.

    ``wrt`` may be an index or a sequence of indices (a list is returned).
    """
    if graph.output is None:
        raise GraphError("backward_grad called before forward_eval")
    out = graph.nodes[graph.output].value
    if out.size != 1:
        raise GraphError(f"output must be scalar, has shape {out.shape}", node=graph.output)
    many = not isinstance(wrt, (int, np.integer))
    idxs = list(wrt) if many else [wrt]
    for w in idxs:
        if not 0 <= w < len(graph.inputs):
            raise GraphError(f"no input {w}")
    grads = graph.vjp(np.ones_like(out), [graph.inputs[w] for w in idxs])
    graph.backward_calls += 1
    return grads if many else grads[0]


def attach_override(graph, node, ov):
    """Use ``ov`` in place of the local Jacobian of ``node``.

    The override is remembered by index and re-applied whenever the graph is
    re-evaluated; forward values are never affected.
    """
    if not isinstance(ov, BackwardOverride):
        raise TypeError("expected a BackwardOverride")
    if graph.output is not None:
        if not 0 <= node < len(graph.nodes):
            raise GraphError(f"no node {node}", node=node)
        n = graph.nodes[node]
        _validate_override(ov, n, [graph.nodes[p].value for p in n.parents], node)
        n.override = ov
    graph.overrides[node] = ov
    return graph


def finite_diff_gradient(fn, x, h=1e-5):
    """Central-difference gradient of a scalar function."""
    if h <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(x))
        flat[i] = orig - h
        fm = float(fn(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"function returned non-finite value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def value_and_grad(fn, *inputs, wrt=0):
    """Evaluate scalar ``fn`` on a fresh graph and return (value, grad)."""
    graph = Graph(fn)
    out = forward_eval(graph, inputs)
    return float(out.reshape(())), backward_grad(graph, wrt)


# --------------------------------------------------------------------------
# op machinery
# --------------------------------------------------------------------------


def _graph_of(args):
    for a in args:
        if isinstance(a, Var):
            return a.graph
    return None


def _apply(op, fwd, bwd, *args, role=None, override=None):
    graph = _graph_of(args)
    if graph is None:
        value, _ = fwd(*[np.asarray(a, dtype=np.float64) for a in args])
        _check_finite(value, op, None)
        return value
    return graph.push(op, args, fwd, bwd, role=role, override=override)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary_fwd(f):
    def fwd(a, b):
        return f(a, b), None

    return fwd


def _raise_shapes(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b):
    def fwd(x, y):
        _raise_shapes(x, y)
        return x + y, None

    def bwd(g, ctx, pv, v, needs):
        return _unbroadcast(g, pv[0].shape), _unbroadcast(g, pv[1].shape)

    return _apply("add", fwd, bwd, a, b)


def sub(a, b):
    def fwd(x, y):
        _raise_shapes(x, y)
        return x - y, None

    def bwd(g, ctx, pv, v, needs):
        return _unbroadcast(g, pv[0].shape), _unbroadcast(-g, pv[1].shape)

    return _apply("sub", fwd, bwd, a, b)


def mul(a, b):
    def fwd(x, y):
        _raise_shapes(x, y)
        return x * y, None

    def bwd(g, ctx, pv, v, needs):
        x, y = pv
        return (
            _unbroadcast(g * y, x.shape) if needs[0] else None,
            _unbroadcast(g * x, y.shape) if needs[1] else None,
        )

    return _apply("mul", fwd, bwd, a, b)


def div(a, b):
    def fwd(x, y):
        _raise_shapes(x, y)
        return x / y, None

    def bwd(g, ctx, pv, v, needs):
        x, y = pv
        return (
            _unbroadcast(g / y, x.shape) if needs[0] else None,
            _unbroadcast(-g * x / (y * y), y.shape) if needs[1] else None,
        )

    return _apply("div", fwd, bwd, a, b)


def neg(a):
    return _apply("neg", lambda x: (-x, None), lambda g, c, pv, v, n: (-g,), a)


def affine(x, W, b):
    """Row-batched ``x @ W + b``."""

    def fwd(xv, Wv, bv):
        if xv.ndim != 2 or Wv.ndim != 2 or bv.ndim != 1:
            raise ValueError("affine expects x (n, d), W (d, h), b (h,)")
        if xv.shape[1] != Wv.shape[0] or Wv.shape[1] != bv.shape[0]:
            raise ValueError(f"affine dims: x {xv.shape}, W {Wv.shape}, b {bv.shape}")
        return kernels.affine(xv, Wv, bv), None

    def bwd(g, ctx, pv, v, needs):
        gx, gW, gb = kernels.affine_backward(g, pv[0], pv[1])
        return (gx if needs[0] else None, gW if needs[1] else None, gb if needs[2] else None)

    return _apply("affine", fwd, bwd, x, W, b)


def relu(x):
    def bwd(g, ctx, pv, v, needs):
        return (g * (pv[0] > 0),)

    return _apply("relu", lambda a: (np.maximum(a, 0.0), None), bwd, x)


def tanh(x):
    def bwd(g, ctx, pv, v, needs):
        return (g * (1.0 - v * v),)

    return _apply("tanh", lambda a: (np.tanh(a), None), bwd, x)


def exp(x):
    return _apply("exp", lambda a: (np.exp(a), None), lambda g, c, pv, v, n: (g * v,), x)


def log(x):
    return _apply("log", lambda a: (np.log(a), None), lambda g, c, pv, v, n: (g / pv[0],), x)


def softplus(x):
    """log(1 + exp(x)), stable for large |x|."""

    def fwd(a):
        return np.logaddexp(0.0, a), None

    def bwd(g, ctx, pv, v, needs):
        return (g * _sigmoid(pv[0]),)

    return _apply("softplus", fwd, bwd, x)


def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x):
    def bwd(g, ctx, pv, v, needs):
        return (g * v * (1.0 - v),)

    return _apply("sigmoid", lambda a: (_sigmoid(a), None), bwd, x)


def log_softmax(x, axis=-1):
    def fwd(a):
        m = a.max(axis=axis, keepdims=True)
        z = a - m
        return z - np.log(np.exp(z).sum(axis=axis, keepdims=True)), None

    def bwd(g, ctx, pv, v, needs):
        return (g - np.exp(v) * g.sum(axis=axis, keepdims=True),)

    return _apply("log_softmax", fwd, bwd, x)


def softmax(x, axis=-1):
    def fwd(a):
        z = np.exp(a - a.max(axis=axis, keepdims=True))
        return z / z.sum(axis=axis, keepdims=True), None

    def bwd(g, ctx, pv, v, needs):
        return (v * (g - (g * v).sum(axis=axis, keepdims=True)),)

    return _apply("softmax", fwd, bwd, x)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    def fwd(a):
        return np.asarray(a.sum(axis=axis, keepdims=keepdims)), None

    def bwd(g, ctx, pv, v, needs):
        shape = pv[0].shape
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _apply("sum", fwd, bwd, x)


def mean(x, axis=None, keepdims=False):
    def fwd(a):
        return np.asarray(a.mean(axis=axis, keepdims=keepdims)), None

    def bwd(g, ctx, pv, v, needs):
        shape = pv[0].shape
        count = pv[0].size if axis is None else shape[axis]
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _apply("mean", fwd, bwd, x)


def l2_norm(x, axis=None, keepdims=False):
    """Euclidean norm; the subgradient at zero is taken as zero."""

    def fwd(a):
        return np.asarray(np.sqrt((a * a).sum(axis=axis, keepdims=keepdims))), None

    def bwd(g, ctx, pv, v, needs):
        a = pv[0]
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
            v = np.expand_dims(v, axis)
        safe = np.where(v > 0, v, 1.0)
        return (np.where(v > 0, g * a / safe, 0.0),)

    return _apply("l2_norm", fwd, bwd, x)


def clamp(x, lo, hi, straight_through=False):
    """Clip to [lo, hi]; ``straight_through`` passes gradients everywhere."""

    def fwd(a):
        return np.clip(a, lo, hi), None

    def bwd(g, ctx, pv, v, needs):
        if straight_through:
            return (g,)
        a = pv[0]
        return (g * ((a >= lo) & (a <= hi)),)

    return _apply("clamp", fwd, bwd, x)


def concat(xs, axis=-1):
    xs = list(xs)

    def fwd(*vals):
        return np.concatenate(vals, axis=axis), None

    def bwd(g, ctx, pv, v, needs):
        sizes = np.cumsum([p.shape[axis] for p in pv])[:-1]
        return tuple(np.split(g, sizes, axis=axis))

    return _apply("concat", fwd, bwd, *xs)


def take(x, idx):
    """Row-wise gather ``x[i, idx[i]]`` for a 2-D ``x``."""
    idx = np.asarray(idx, dtype=np.int64)

    def fwd(a):
        if a.ndim != 2 or idx.shape != (a.shape[0],):
            raise ValueError(f"take expects (n, k) values and (n,) indices, got {a.shape}, {idx.shape}")
        return a[np.arange(a.shape[0]), idx], None

    def bwd(g, ctx, pv, v, needs):
        out = np.zeros_like(pv[0])
        out[np.arange(out.shape[0]), idx] = g
        return (out,)

    return _apply("take", fwd, bwd, x)


# --------------------------------------------------------------------------
# composite nodes
# --------------------------------------------------------------------------


class _Composite:
    __slots__ = ("graph", "iterates")

    def __init__(self, graph, iterates=None):
        self.graph = graph
        self.iterates = iterates


def composite(fn, *args, role=None, override=None, op="composite", with_iterates=False):
    """Evaluate ``fn`` as a single node backed by its own nested graph.

    Network calls use this with ``role`` set, which keeps per-network pass
    counts exact. When ``with_iterates`` is true, ``fn`` returns
    ``(output, iterates)`` and the iterates feed trajectory overrides.
    When the node carries a non-trajectory override the nested graph is
    skipped and ``fn`` runs eagerly; values are identical either way.
    """
    graph = _graph_of(args)

    def run_eager(*vals):
        count_forward(role)
        out = fn(*vals)
        if with_iterates:
            out, its = out
            return np.asarray(out), _Composite(None, [np.asarray(i) for i in its])
        return np.asarray(out), _Composite(None)

    def run_taped(*vals):
        count_forward(role)
        inner = Graph()
        handles = [inner.input(v) for v in vals]
        out = fn(*handles)
        its = None
        if with_iterates:
            out, its = out
            its = [np.asarray(value_of(i)) for i in its]
        if not isinstance(out, Var):
            out = inner.const(out)
        inner.output = out.index
        return out.value, _Composite(inner, its)

    if graph is None:
        value, _ = run_eager(*[np.asarray(a, dtype=np.float64) for a in args])
        _check_finite(value, op, None)
        return value

    args = [a if isinstance(a, Var) else graph.const(a) for a in args]
    ov = override if override is not None else graph.overrides.get(len(graph.nodes))
    eager = ov is not None

    def fwd(*vals):
        if eager:
            return run_eager(*vals)
        return run_taped(*vals)

    def bwd(g, ctx, pv, v, needs):
        inner = ctx.graph
        if inner is None:
            raise GraphError(f"composite {op} ran without a tape and has no override")
        count_backward(role)
        return tuple(inner.vjp(g, inner.inputs))

    return graph.push(op, args, fwd, bwd, role=role, override=override)


def max_except(x, idx):
    """Row-wise ``max_{j != idx[i]} x[i, j]``; the argmax is recomputed per forward."""
    idx = np.asarray(idx, dtype=np.int64)

    def fwd(a):
        if a.ndim != 2 or a.shape[1] < 2 or idx.shape != (a.shape[0],):
            raise ValueError(f"max_except expects (n, k>=2) values and (n,) indices, got {a.shape}, {idx.shape}")
        rows = np.arange(a.shape[0])
        masked = a.copy()
        masked[rows, idx] = -np.inf
        j = np.argmax(masked, axis=1)
        return a[rows, j], j

    def bwd(g, j, pv, v, needs):
        out = np.zeros_like(pv[0])
        out[np.arange(out.shape[0]), j] = g
        return (out,)

    return _apply("max_except", fwd, bwd, x)


def sort_desc(x):
    """Rows sorted in decreasing order (stable), differentiable as a permutation."""

    def fwd(a):
        if a.ndim != 2:
            raise ValueError(f"sort_desc expects a 2-D array, got {a.shape}")
        perm = np.argsort(-a, axis=1, kind="stable")
        return np.take_along_axis(a, perm, axis=1), perm

    def bwd(g, perm, pv, v, needs):
        out = np.zeros_like(pv[0])
        np.put_along_axis(out, perm, g, axis=1)
        return (out,)

    return _apply("sort_desc", fwd, bwd, x)


def column(x, j):
    """Column ``j`` of a 2-D array as a vector."""

    def fwd(a):
        return a[:, j].copy(), None

    def bwd(g, ctx, pv, v, needs):
        out = np.zeros_like(pv[0])
        out[:, j] = g
        return (out,)

    return _apply("column", fwd, bwd, x)


def matmul(a, b):
    """Matrix product of two 2-D operands."""

    def fwd(x, y):
        if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
            raise ValueError(f"matmul dims: {x.shape} @ {y.shape}")
        return x @ y, None

    def bwd(g, ctx, pv, v, needs):
        x, y = pv
        return (g @ y.T if needs[0] else None, x.T @ g if needs[1] else None)

    return _apply("matmul", fwd, bwd, a, b)


def transpose(x):
    return _apply("transpose", lambda a: (a.T.copy(), None), lambda g, c, pv, v, n: (g.T.copy(),), x)
