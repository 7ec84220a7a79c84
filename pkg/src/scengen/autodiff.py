"""Reverse-mode automatic differentiation on a define-by-run tape.

Every operation appends a node to a Graph and evaluates it eagerly in
float64.  Backward passes emit their vector-Jacobian products as new
graph nodes, so a gradient is itself differentiable: `input_grad_node`
builds d(root)/d(wrt) as a node that later backward passes can flow
through.  That one gradient-of-gradient pattern is all the training
objective needs; general higher-order AD is out of scope.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    """Operand shapes are inconsistent with the op signature."""


class NumericFaultError(AutodiffError):
    """A forward evaluation produced NaN or Inf."""


class UsageError(AutodiffError):
    """API misuse, e.g. backward from a non-scalar root."""


class NoSecondOrderRuleError(AutodiffError):
    """An op without a second-order rule sits between wrt and root."""


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    attrs: dict
    value: np.ndarray
    name: Optional[str] = None


@dataclass
class OpDef:
    forward: Callable
    # vjp(graph, node_id, adjoint_tensor) -> list of (Tensor | None), one per input
    vjp: Optional[Callable]
    second_order: bool = True


_OPS: dict[str, OpDef] = {}


def _op(kind, vjp, second_order=True):
    def register(fn):
        _OPS[kind] = OpDef(fn, vjp, second_order)
        return fn
    return register


class Tensor:
    """Handle to one node of a Graph; holds no state of its own."""

    __slots__ = ("graph", "node_id")

    def __init__(self, graph: "Graph", node_id: int):
        self.graph = graph
        self.node_id = node_id

    @property
    def values(self) -> np.ndarray:
        return self.graph.nodes[self.node_id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.graph is not self.graph:
                raise UsageError("operands belong to different graphs")
            return other
        return self.graph.constant(other)

    def __add__(self, other):
        return self.graph._apply("add", (self, self._coerce(other)))

    def __radd__(self, other):
        return self._coerce(other) + self

    def __sub__(self, other):
        return self.graph._apply("sub", (self, self._coerce(other)))

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        return self.graph._apply("mul", (self, self._coerce(other)))

    def __rmul__(self, other):
        return self._coerce(other) * self

    def __truediv__(self, other):
        other = self._coerce(other)
        return self * other ** -1.0

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __neg__(self):
        return self.graph._apply("neg", (self,))

    def __matmul__(self, other):
        return self.graph._apply("matmul", (self, self._coerce(other)))

    def __pow__(self, exponent):
        return self.graph._apply("pow_const", (self,), exponent=float(exponent))

    def exp(self):
        return self.graph._apply("exp", (self,))

    def log(self):
        return self.graph._apply("log", (self,))

    def sqrt(self):
        return self ** 0.5

    def relu(self):
        return self.graph._apply("relu", (self,))

    def leaky_relu(self, slope: float):
        return self.graph._apply("leaky_relu", (self,), slope=float(slope))

    def sigmoid(self):
        return self.graph._apply("sigmoid", (self,))

    def clip(self, lo: float, hi: float):
        return self.graph._apply("clip", (self,), lo=float(lo), hi=float(hi))

    def sum(self, axes=None, keepdims=False):
        ndim = self.values.ndim
        if axes is None:
            axes = tuple(range(ndim))
        elif isinstance(axes, int):
            axes = (axes,)
        axes = tuple(sorted(ax % ndim for ax in axes))
        return self.graph._apply("sum", (self,), axes=axes, keepdims=bool(keepdims))

    def mean(self, axes=None, keepdims=False):
        total = self.sum(axes, keepdims)
        return total * (float(total.size) / float(self.size))

    def reshape(self, shape):
        return self.graph._apply("reshape", (self,), shape=tuple(shape))

    def transpose(self, axes):
        return self.graph._apply("transpose", (self,), axes=tuple(axes))

    def broadcast_to(self, shape):
        return self.graph._apply("broadcast_to", (self,), shape=tuple(shape))

    def pad_last(self, lo: int, hi: int):
        return self.graph._apply("pad_last", (self,), lo=int(lo), hi=int(hi))

    def slice_last(self, start: int, length: int):
        return self.graph._apply("slice_last", (self,), start=int(start),
                                 length=int(length))

    def zero_stuff(self, stride: int):
        return self.graph._apply("zero_stuff", (self,), stride=int(stride))

    def downsample(self, stride: int):
        return self.graph._apply("downsample", (self,), stride=int(stride))

    def __repr__(self):
        node = self.graph.nodes[self.node_id]
        return f"Tensor(node={self.node_id}, kind={node.kind}, shape={self.shape})"


class Graph:
    """Ordered tape of nodes; inputs precede every node that uses them."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.check_finite = check_finite
        self._input_ids: dict[str, int] = {}

    def _append(self, kind, input_ids, attrs, value, name=None) -> Tensor:
        value = np.asarray(value, dtype=np.float64)
        if self.check_finite and not np.all(np.isfinite(value)):
            label = name or f"{kind}#{len(self.nodes)}"
            raise NumericFaultError(f"non-finite values at node {label}")
        self.nodes.append(Node(kind, tuple(input_ids), attrs, value, name))
        return Tensor(self, len(self.nodes) - 1)

    def input(self, name: str, values) -> Tensor:
        if name in self._input_ids:
            raise UsageError(f"duplicate input name {name!r}")
        t = self._append("input", (), {}, values, name=name)
        self._input_ids[name] = t.node_id
        return t

    def constant(self, values) -> Tensor:
        return self._append("const", (), {}, values)

    def _apply(self, kind, inputs: Sequence[Tensor], **attrs) -> Tensor:
        opdef = _OPS[kind]
        ids = tuple(t.node_id for t in inputs)
        vals = tuple(self.nodes[i].value for i in ids)
        # overflow and domain faults surface via the finite check, not warnings
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            value = opdef.forward(attrs, *vals)
        return self._append(kind, ids, attrs, value)

    # -- evaluation ----------------------------------------------------

    def forward_eval(self, inputs: Optional[dict] = None, root: Optional[Tensor] = None):
        """Replay the whole tape, rebinding the named inputs given.

        Returns the root's value (the last node when root is None).  All
        intermediate node values are refreshed in place, so a following
        backward pass sees the replayed state.
        """
        inputs = inputs or {}
        unknown = set(inputs) - set(self._input_ids)
        if unknown:
            raise UsageError(f"unbound input names: {sorted(unknown)}")
        for name, vals in inputs.items():
            node = self.nodes[self._input_ids[name]]
            vals = np.asarray(vals, dtype=np.float64)
            if vals.shape != node.value.shape:
                raise ShapeError(
                    f"input {name!r} expects shape {node.value.shape}, got {vals.shape}")
            node.value = vals
        for nid, node in enumerate(self.nodes):
            if node.kind in ("input", "const"):
                continue
            vals = tuple(self.nodes[i].value for i in node.inputs)
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                node.value = np.asarray(_OPS[node.kind].forward(node.attrs, *vals),
                                        dtype=np.float64)
            if self.check_finite and not np.all(np.isfinite(node.value)):
                label = node.name or f"{node.kind}#{nid}"
                raise NumericFaultError(f"non-finite values at node {label}")
        root_id = root.node_id if root is not None else len(self.nodes) - 1
        return self.nodes[root_id].value

    # -- differentiation -----------------------------------------------

    def _ancestors(self, root_id: int) -> set[int]:
        seen = {root_id}
        stack = [root_id]
        while stack:
            for i in self.nodes[stack.pop()].inputs:
                if i not in seen:
                    seen.add(i)
                    stack.append(i)
        return seen

    def _descendants(self, start_id: int, within: set[int]) -> set[int]:
        # restricted to `within` keeps this linear in the relevant subgraph
        out = {start_id}
        for nid in sorted(within):
            if nid <= start_id:
                continue
            if any(i in out for i in self.nodes[nid].inputs):
                out.add(nid)
        return out

    def _emit_adjoints(self, root: Tensor, into: Optional[set[int]] = None) -> dict[int, Tensor]:
        """Build adjoint nodes for root's ancestors; returns node_id -> Tensor.

        `into` restricts propagation to a node subset (plus root); used by
        input_grad_node to avoid emitting adjoints for irrelevant branches.
        """
        if root.size != 1:
            raise UsageError(f"backward root must be scalar, got shape {root.shape}")
        adjoints: dict[int, Tensor] = {
            root.node_id: self.constant(np.ones_like(root.values))
        }
        relevant = self._ancestors(root.node_id)
        if into is not None:
            relevant &= into | {root.node_id}
        for nid in sorted(relevant, reverse=True):
            adj = adjoints.get(nid)
            if adj is None:
                continue
            node = self.nodes[nid]
            if node.kind in ("input", "const"):
                continue
            contribs = _OPS[node.kind].vjp(self, nid, adj)
            for inp_id, contrib in zip(node.inputs, contribs):
                if contrib is None or (into is not None and inp_id not in into):
                    continue
                if inp_id in adjoints:
                    adjoints[inp_id] = adjoints[inp_id] + contrib
                else:
                    adjoints[inp_id] = contrib
        return adjoints


def forward_eval(graph: Graph, inputs: Optional[dict] = None, root: Optional[Tensor] = None):
    return graph.forward_eval(inputs, root)


def backward_grad(graph: Graph, root: Tensor) -> dict[int, Tensor]:
    """Adjoint of every node reachable from root, keyed by node id."""
    return graph._emit_adjoints(root)


def input_grad_node(graph: Graph, root: Tensor, wrt: Tensor) -> Tensor:
    """Build d(root)/d(wrt) as a differentiable node of the same graph.

    Every op between wrt and root must carry a second-order rule; ops like
    sigmoid that are deliberately excluded raise NoSecondOrderRuleError.
    A wrt that root does not depend on yields a zeros constant.
    """
    ancestors = graph._ancestors(root.node_id)
    if wrt.node_id not in ancestors:
        return graph.constant(np.zeros_like(wrt.values))
    path = graph._descendants(wrt.node_id, ancestors)
    for nid in sorted(path):
        node = graph.nodes[nid]
        if node.kind in ("input", "const"):
            continue
        if not _OPS[node.kind].second_order:
            raise NoSecondOrderRuleError(
                f"no second-order rule for op {node.kind!r} (node {nid}) "
                f"between wrt and root")
    adjoints = graph._emit_adjoints(root, into=path)
    return adjoints[wrt.node_id]


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    worst_index: tuple[int, ...]
    analytic_at_worst: float
    numeric_at_worst: float
    tolerance: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = self.max_rel_error < self.tolerance


def finite_diff_check(graph: Graph, root: Tensor, wrt: Tensor,
                      step: float = 1e-5, tolerance: float = 1e-4) -> FiniteDiffReport:
    """Compare backward_grad against central finite differences on wrt.

    wrt must be a named input so the tape can be replayed with perturbed
    values.  Error metric is |a - n| / max(|a|, |n|, 1), reported at the
    worst coordinate.
    """
    if step <= 0:
        raise UsageError("step must be positive")
    node = graph.nodes[wrt.node_id]
    if node.kind != "input":
        raise UsageError("finite_diff_check needs a named input as wrt")
    name = node.name
    base = node.value.copy()
    analytic = backward_grad(graph, root)[wrt.node_id].values.copy()
    numeric = np.zeros_like(base)
    flat = base.ravel()
    for i in range(flat.size):
        orig = flat[i]
        pert = base.copy().ravel()
        pert[i] = orig + step
        f_plus = float(graph.forward_eval({name: pert.reshape(base.shape)}, root))
        pert[i] = orig - step
        f_minus = float(graph.forward_eval({name: pert.reshape(base.shape)}, root))
        numeric.ravel()[i] = (f_plus - f_minus) / (2.0 * step)
    graph.forward_eval({name: base}, root)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    rel = np.abs(analytic - numeric) / denom
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape)
    return FiniteDiffReport(
        max_rel_error=float(rel[worst]),
        worst_index=tuple(int(k) for k in worst),
        analytic_at_worst=float(analytic[worst]),
        numeric_at_worst=float(numeric[worst]),
        tolerance=tolerance,
    )


# -- op implementations ------------------------------------------------
#
# VJP emitters return one entry per input; None means no gradient flows
# (that is how relu's kink carries an exactly-zero second derivative).


def _unbroadcast(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    if t.shape == shape:
        return t
    extra = t.values.ndim - len(shape)
    axes = list(range(extra))
    for i, dim in enumerate(shape):
        if dim == 1 and t.shape[extra + i] != 1:
            axes.append(extra + i)
    out = t.sum(axes=tuple(axes), keepdims=True) if axes else t
    return out.reshape(shape)


def _binary_shape_check(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast {a.shape} with {b.shape}") from None


@_op("add", lambda g, nid, a: (_unbroadcast(a, g.nodes[g.nodes[nid].inputs[0]].value.shape),
                               _unbroadcast(a, g.nodes[g.nodes[nid].inputs[1]].value.shape)))
def _add_fwd(attrs, a, b):
    _binary_shape_check("add", a, b)
    return a + b


@_op("sub", lambda g, nid, a: (_unbroadcast(a, g.nodes[g.nodes[nid].inputs[0]].value.shape),
                               _unbroadcast(-a, g.nodes[g.nodes[nid].inputs[1]].value.shape)))
def _sub_fwd(attrs, a, b):
    _binary_shape_check("sub", a, b)
    return a - b


def _mul_vjp(g, nid, a):
    n = g.nodes[nid]
    x = Tensor(g, n.inputs[0])
    y = Tensor(g, n.inputs[1])
    return (_unbroadcast(a * y, x.shape), _unbroadcast(a * x, y.shape))


@_op("mul", _mul_vjp)
def _mul_fwd(attrs, a, b):
    _binary_shape_check("mul", a, b)
    return a * b


@_op("neg", lambda g, nid, a: (-a,))
def _neg_fwd(attrs, a):
    return -a


def _pow_vjp(g, nid, a):
    n = g.nodes[nid]
    c = n.attrs["exponent"]
    x = Tensor(g, n.inputs[0])
    return (a * (x ** (c - 1.0)) * c,)


@_op("pow_const", _pow_vjp)
def _pow_fwd(attrs, x):
    c = attrs["exponent"]
    if c < 0:
        # 0**negative is pinned to 0 rather than inf; keeps the gradient of
        # sqrt-at-zero finite, matching the zero-subgradient convention.
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(x == 0.0, 0.0, np.power(x, c))
        return out
    return np.power(x, c)


@_op("exp", lambda g, nid, a: (a * Tensor(g, nid),))
def _exp_fwd(attrs, x):
    return np.exp(x)


def _log_vjp(g, nid, a):
    x = Tensor(g, g.nodes[nid].inputs[0])
    return (a * (x ** -1.0),)


@_op("log", _log_vjp)
def _log_fwd(attrs, x):
    # out-of-domain values surface as a NumericFaultError, not a warning
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.log(x)


def _matmul_vjp(g, nid, a):
    n = g.nodes[nid]
    x = Tensor(g, n.inputs[0])
    y = Tensor(g, n.inputs[1])
    return (a @ y.transpose((1, 0)), x.transpose((1, 0)) @ a)


@_op("matmul", _matmul_vjp)
def _matmul_fwd(attrs, a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def _relu_vjp(g, nid, a):
    mask = g._apply("relu_mask", (Tensor(g, g.nodes[nid].inputs[0]),))
    return (a * mask,)


@_op("relu", _relu_vjp)
def _relu_fwd(attrs, x):
    return np.maximum(x, 0.0)


@_op("relu_mask", lambda g, nid, a: (None,))
def _relu_mask_fwd(attrs, x):
    # gradient exactly 0 at x == 0 (pinned convention)
    return (x > 0.0).astype(np.float64)


def _leaky_vjp(g, nid, a):
    n = g.nodes[nid]
    mask = g._apply("leaky_mask", (Tensor(g, n.inputs[0]),), slope=n.attrs["slope"])
    return (a * mask,)


@_op("leaky_relu", _leaky_vjp)
def _leaky_fwd(attrs, x):
    return np.where(x > 0.0, x, attrs["slope"] * x)


@_op("leaky_mask", lambda g, nid, a: (None,))
def _leaky_mask_fwd(attrs, x):
    return np.where(x > 0.0, 1.0, attrs["slope"])


def _sigmoid_vjp(g, nid, a):
    s = Tensor(g, nid)
    return (a * s * (1.0 - s),)


@_op("sigmoid", _sigmoid_vjp, second_order=False)
def _sigmoid_fwd(attrs, x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _clip_vjp(g, nid, a):
    n = g.nodes[nid]
    mask = g._apply("clip_mask", (Tensor(g, n.inputs[0]),), **n.attrs)
    return (a * mask,)


@_op("clip", _clip_vjp)
def _clip_fwd(attrs, x):
    return np.clip(x, attrs["lo"], attrs["hi"])


@_op("clip_mask", lambda g, nid, a: (None,))
def _clip_mask_fwd(attrs, x):
    return ((x > attrs["lo"]) & (x < attrs["hi"])).astype(np.float64)


def _sum_vjp(g, nid, a):
    n = g.nodes[nid]
    x_shape = g.nodes[n.inputs[0]].value.shape
    if not n.attrs["keepdims"]:
        kept = list(x_shape)
        for ax in n.attrs["axes"]:
            kept[ax] = 1
        a = a.reshape(tuple(kept))
    return (a.broadcast_to(x_shape),)


@_op("sum", _sum_vjp)
def _sum_fwd(attrs, x):
    return np.sum(x, axis=attrs["axes"], keepdims=attrs["keepdims"])


def _broadcast_vjp(g, nid, a):
    return (_unbroadcast(a, g.nodes[g.nodes[nid].inputs[0]].value.shape),)


@_op("broadcast_to", _broadcast_vjp)
def _broadcast_fwd(attrs, x):
    return np.broadcast_to(x, attrs["shape"]).copy()


def _reshape_vjp(g, nid, a):
    return (a.reshape(g.nodes[g.nodes[nid].inputs[0]].value.shape),)


@_op("reshape", _reshape_vjp)
def _reshape_fwd(attrs, x):
    if int(np.prod(attrs["shape"])) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {attrs['shape']}")
    return np.reshape(x, attrs["shape"])


def _transpose_vjp(g, nid, a):
    inverse = tuple(int(i) for i in np.argsort(g.nodes[nid].attrs["axes"]))
    return (a.transpose(inverse),)


@_op("transpose", _transpose_vjp)
def _transpose_fwd(attrs, x):
    return np.transpose(x, attrs["axes"])


def _pad_last_vjp(g, nid, a):
    n = g.nodes[nid]
    length = g.nodes[n.inputs[0]].value.shape[-1]
    return (a.slice_last(n.attrs["lo"], length),)


@_op("pad_last", _pad_last_vjp)
def _pad_last_fwd(attrs, x):
    pads = [(0, 0)] * (x.ndim - 1) + [(attrs["lo"], attrs["hi"])]
    return np.pad(x, pads)


def _slice_last_vjp(g, nid, a):
    n = g.nodes[nid]
    orig = g.nodes[n.inputs[0]].value.shape[-1]
    start, length = n.attrs["start"], n.attrs["length"]
    return (a.pad_last(start, orig - start - length),)


@_op("slice_last", _slice_last_vjp)
def _slice_last_fwd(attrs, x):
    start, length = attrs["start"], attrs["length"]
    if start < 0 or start + length > x.shape[-1]:
        raise ShapeError(
            f"slice_last: window [{start}, {start + length}) outside length {x.shape[-1]}")
    return x[..., start:start + length]


def _zero_stuff_vjp(g, nid, a):
    return (a.downsample(g.nodes[nid].attrs["stride"]),)


@_op("zero_stuff", _zero_stuff_vjp)
def _zero_stuff_fwd(attrs, x):
    s = attrs["stride"]
    out = np.zeros(x.shape[:-1] + (x.shape[-1] * s,), dtype=np.float64)
    out[..., ::s] = x
    return out


def _downsample_vjp(g, nid, a):
    return (a.zero_stuff(g.nodes[nid].attrs["stride"]),)


@_op("downsample", _downsample_vjp)
def _downsample_fwd(attrs, x):
    return x[..., ::attrs["stride"]].copy()
