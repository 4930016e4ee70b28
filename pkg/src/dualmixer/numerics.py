"""Dense 2-D float64 tensors with a reverse-mode tape, plus Adam.

Everything here is deliberately small: matrices are plain numpy arrays in
row-major order, the tape is an append-only list of nodes (so it is
topologically ordered by construction), and every operation carries its own
local backward rule. One graph per loss evaluation; graphs are single
threaded, independent graphs may run in parallel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import erf

LAYERNORM_EPS = 1e-5

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class DegenerateVectorError(ValueError):
    """A cosine-similarity operand has zero norm."""


class GraphError(RuntimeError):
    """Tape misuse: mixed graphs, non-scalar loss, or bad registration."""


class Tensor:
    """A dense 2-D float64 matrix, optionally attached to a tape node.

    Tensors returned by the ops in this module are recorded on a graph when
    any operand lives on one; tensors with ``graph is None`` are plain
    values, and combining them with taped tensors treats them as constants
    (no gradient flows into them).
    """

    __slots__ = ("data", "graph", "node_id")

    def __init__(self, data, graph: "Graph | None" = None, node_id: int = -1):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.graph = graph
        self.node_id = node_id

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        tag = "" if self.graph is None else f", node={self.node_id}"
        return f"Tensor({self.rows}x{self.cols}{tag})"


@dataclass
class TapeNode:
    """One recorded operation: input node ids (-1 marks a constant operand)
    and a local backward rule mapping the output adjoint to per-input
    adjoint contributions. Leaves carry no rule."""

    op: str
    inputs: tuple[int, ...]
    backward: Optional[Callable[[np.ndarray], tuple]]
    shape: tuple[int, int]


class Graph:
    """Reverse-mode tape with a registry of named learnable leaves."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._params: dict[str, Tensor] = {}
        self.grads: dict[str, np.ndarray] = {}

    def _add_node(self, op, inputs, backward, shape) -> int:
        self.nodes.append(TapeNode(op, inputs, backward, shape))
        return len(self.nodes) - 1

    def constant(self, data) -> Tensor:
        """Wrap data for use in taped expressions without gradient flow."""
        return Tensor(data)

    def parameter(self, name: str, data: np.ndarray) -> Tensor:
        """Register (or fetch) a named learnable leaf.

        Registering the same name again returns the existing leaf, so a
        weight used at several tape positions accumulates its gradients
        additively. The array is used as storage, not copied.
        """
        existing = self._params.get(name)
        if existing is not None:
            if existing.data is not data:
                raise GraphError(f"parameter {name!r} re-registered with different storage")
            return existing
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"parameter {name!r} must be 2-D, got {arr.shape}")
        nid = self._add_node("param", (), None, arr.shape)
        t = Tensor(arr, self, nid)
        self._params[name] = t
        self.grads[name] = np.zeros_like(arr)
        return t

    @property
    def parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Reverse sweep from a scalar loss node.

        Accumulates into the parameter registry and returns it; registered
        parameters unreachable from the loss keep zero gradients.
        """
        if loss.graph is not self or loss.node_id < 0:
            raise GraphError("loss tensor is not recorded on this graph")
        if loss.shape != (1, 1):
            raise GraphError(f"loss must be a 1x1 scalar, got {loss.shape}")
        n = len(self.nodes)
        adjoint: list[Optional[np.ndarray]] = [None] * n
        owned = [False] * n
        adjoint[loss.node_id] = np.ones((1, 1))
        owned[loss.node_id] = True
        for nid in range(loss.node_id, -1, -1):
            adj = adjoint[nid]
            if adj is None:
                continue
            node = self.nodes[nid]
            if node.backward is None:
                continue
            for iid, contrib in zip(node.inputs, node.backward(adj)):
                if iid < 0 or contrib is None:
                    continue
                if adjoint[iid] is None:
                    # defer copying: most nodes receive exactly one contribution
                    adjoint[iid] = contrib
                elif owned[iid]:
                    adjoint[iid] += contrib
                else:
                    adjoint[iid] = adjoint[iid] + contrib
                    owned[iid] = True
        for name, leaf in self._params.items():
            adj = adjoint[leaf.node_id]
            if adj is not None:
                self.grads[name] += adj
        return self.grads


def backward(graph: Graph, loss: Tensor) -> dict[str, np.ndarray]:
    """Module-level alias for :meth:`Graph.backward`."""
    return graph.backward(loss)


# --------------------------------------------------------------------------
# op plumbing
# --------------------------------------------------------------------------

def _resolve_graph(*tensors: Tensor) -> Optional[Graph]:
    g = None
    for t in tensors:
        if t.graph is not None:
            if g is None:
                g = t.graph
            elif g is not t.graph:
                raise GraphError("operands belong to different graphs")
    return g

def _nid(g: Graph, t: Tensor) -> int:
    return t.node_id if t.graph is g else -1

def _record(g: Optional[Graph], op: str, out: np.ndarray, input_ids, bwd) -> Tensor:
    if g is None:
        return Tensor(out)
    return Tensor(out, g, g._add_node(op, tuple(input_ids), bwd, out.shape))

def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} needs identical shapes, got {a.shape} and {b.shape}")


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product (r x k) @ (k x c) -> (r x c)."""
    if a.cols != b.rows:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    g = _resolve_graph(a, b)
    ad, bd = a.data, b.data

    def bwd(adj):
        return adj @ bd.T, ad.T @ adj

    return _record(g, "matmul", out, (_nid(g, a), _nid(g, b)), bwd)


def transpose(a: Tensor) -> Tensor:
    out = np.ascontiguousarray(a.data.T)

    def bwd(adj):
        return (np.ascontiguousarray(adj.T),)

    return _record(a.graph, "transpose", out, (a.node_id,), bwd)


def block_transpose(a: Tensor, blocks: int) -> Tensor:
    """Transpose each of ``blocks`` stacked row blocks independently.

    (blocks*r) x c -> (blocks*c) x r, block i transposed in place. With
    blocks=1 this is a plain transpose; it is the batched form of applying
    a per-sample transpose to vertically stacked sample matrices.
    """
    if a.rows % blocks != 0:
        raise ShapeError(f"block_transpose: {a.rows} rows not divisible by {blocks} blocks")
    r = a.rows // blocks
    c = a.cols
    out = a.data.reshape(blocks, r, c).transpose(0, 2, 1).reshape(blocks * c, r)
    out = np.ascontiguousarray(out)

    def bwd(adj):
        back = adj.reshape(blocks, c, r).transpose(0, 2, 1).reshape(blocks * r, c)
        return (np.ascontiguousarray(back),)

    return _record(a.graph, "block_transpose", out, (a.node_id,), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    out = a.data + b.data
    g = _resolve_graph(a, b)

    def bwd(adj):
        return adj, adj

    return _record(g, "add", out, (_nid(g, a), _nid(g, b)), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    out = a.data - b.data
    g = _resolve_graph(a, b)

    def bwd(adj):
        return adj, -adj

    return _record(g, "sub", out, (_nid(g, a), _nid(g, b)), bwd)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    _check_same_shape("hadamard", a, b)
    out = a.data * b.data
    g = _resolve_graph(a, b)
    ad, bd = a.data, b.data

    def bwd(adj):
        return adj * bd, adj * ad

    return _record(g, "hadamard", out, (_nid(g, a), _nid(g, b)), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    out = a.data * c

    def bwd(adj):
        return (adj * c,)

    return _record(a.graph, "scale", out, (a.node_id,), bwd)


def exp(a: Tensor) -> Tensor:
    # unguarded: callers that may see large arguments must shift first
    # (the losses use a log-sum-exp with a detached max)
    out = np.exp(a.data)

    def bwd(adj):
        return (adj * out,)

    return _record(a.graph, "exp", out, (a.node_id,), bwd)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    ad = a.data

    def bwd(adj):
        return (adj / ad,)

    return _record(a.graph, "log", out, (a.node_id,), bwd)


def sum_all(a: Tensor) -> Tensor:
    """Sum of all entries as a 1x1 tensor."""
    out = np.array([[a.data.sum()]])
    shape = a.shape

    def bwd(adj):
        return (np.full(shape, float(adj[0, 0])),)

    return _record(a.graph, "sum_all", out, (a.node_id,), bwd)


def reshape(a: Tensor, rows: int, cols: int) -> Tensor:
    if rows * cols != a.rows * a.cols:
        raise ShapeError(f"reshape {a.shape} -> ({rows}, {cols}) changes size")
    out = np.ascontiguousarray(a.data).reshape(rows, cols)
    shape = a.shape

    def bwd(adj):
        return (np.ascontiguousarray(adj).reshape(shape),)

    return _record(a.graph, "reshape", out, (a.node_id,), bwd)


def rows_slice(a: Tensor, i0: int, i1: int) -> Tensor:
    """Rows [i0, i1) as an own-storage tensor; backward scatters."""
    if not (0 <= i0 < i1 <= a.rows):
        raise ShapeError(f"rows_slice [{i0}, {i1}) out of range for {a.rows} rows")
    out = a.data[i0:i1].copy()
    shape = a.shape

    def bwd(adj):
        full = np.zeros(shape)
        full[i0:i1] = adj
        return (full,)

    return _record(a.graph, "rows_slice", out, (a.node_id,), bwd)


def gelu(a: Tensor) -> Tensor:
    """Exact GeLU x * Phi(x) with Phi the standard normal CDF."""
    ad = a.data
    cdf = 0.5 * (1.0 + erf(ad * _INV_SQRT2))
    out = ad * cdf

    def bwd(adj):
        pdf = np.exp(-0.5 * ad * ad) * _INV_SQRT_2PI
        return (adj * (cdf + ad * pdf),)

    return _record(a.graph, "gelu", out, (a.node_id,), bwd)


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    # piecewise form never overflows; exp underflow gives exact 0/1 saturation
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_values(a.data)

    def bwd(adj):
        return (adj * out * (1.0 - out),)

    return _record(a.graph, "sigmoid", out, (a.node_id,), bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Per-row normalization over the last axis, then affine.

    gain and bias are 1 x cols; variance is the population variance with an
    epsilon floor, so constant rows map to the bias.
    """
    ncols = a.cols
    for name, t in (("gain", gain), ("bias", bias)):
        if t.shape != (1, ncols):
            raise ShapeError(f"layer_norm {name} must be 1x{ncols}, got {t.shape}")
    mu = a.data.mean(axis=1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYERNORM_EPS)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data
    g = _resolve_graph(a, gain, bias)

    def bwd(adj):
        dgain = (adj * xhat).sum(axis=0, keepdims=True)
        dbias = adj.sum(axis=0, keepdims=True)
        dxhat = adj * gd
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgain, dbias

    return _record(g, "layer_norm", out, (_nid(g, a), _nid(g, gain), _nid(g, bias)), bwd)


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Cosine of the row-major flattenings of u and v, as a 1x1 tensor."""
    uf = u.data.ravel()
    vf = v.data.ravel()
    if uf.size != vf.size:
        raise ShapeError(f"cosine_similarity sizes disagree: {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(uf))
    nv = float(np.linalg.norm(vf))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateVectorError("cosine_similarity of a zero-norm vector")
    s = float(uf @ vf) / (nu * nv)
    out = np.array([[s]])
    g = _resolve_graph(u, v)
    ushape, vshape = u.shape, v.shape

    def bwd(adj):
        a0 = float(adj[0, 0])
        du = (vf / (nu * nv) - s * uf / (nu * nu)) * a0
        dv = (uf / (nu * nv) - s * vf / (nv * nv)) * a0
        return du.reshape(ushape), dv.reshape(vshape)

    return _record(g, "cosine_similarity", out, (_nid(g, u), _nid(g, v)), bwd)


def logsumexp(terms: list[Tensor]) -> Tensor:
    """log(sum_k exp(t_k)) over 1x1 tensors, shifted by the detached max.

    Treating the max as a constant leaves the gradient unchanged (it is the
    softmax either way) while keeping every exp argument at or below zero.
    """
    if not terms:
        raise ShapeError("logsumexp needs at least one term")
    m = max(t.item() for t in terms)
    shift = Tensor(np.array([[m]]))
    acc = exp(sub(terms[0], shift))
    for t in terms[1:]:
        acc = add(acc, exp(sub(t, shift)))
    return add(log(acc), shift)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter Adam moments plus the shared step counter."""

    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]) -> None:
    """One bias-corrected Adam update, in place; used gradients are zeroed."""
    state.step_count += 1
    t = state.step_count
    b1c = 1.0 - state.beta1 ** t
    b2c = 1.0 - state.beta2 ** t
    for name, p in params.items():
        gr = grads[name]
        if gr.shape != p.shape:
            raise ShapeError(f"adam_step: grad {gr.shape} vs param {p.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p)
        m *= state.beta1
        m += (1.0 - state.beta1) * gr
        v *= state.beta2
        v += (1.0 - state.beta2) * (gr * gr)
        p -= state.lr * (m / b1c) / (np.sqrt(v / b2c) + state.eps)
        gr[...] = 0.0
