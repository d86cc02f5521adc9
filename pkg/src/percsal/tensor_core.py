"""Dense float64 tensors plus a recording tape for reverse-mode differentiation.

Everything is CPU numpy under the hood.  A ``Tensor`` is an immutable value;
attaching one to a ``CompGraph`` (via ``CompGraph.leaf``) makes every operation
on it record a tape node, so that ``backward`` can later return gradients of a
scalar with respect to any recorded node.  Tensors that are *not* attached act
as constants: they participate in the arithmetic but the tape never
differentiates through them, which keeps perturbation runs (constants =
network weights) and training runs (constant = input image) equally cheap.

Image-like tensors use [C, H, W] layout throughout.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """An operand shape violates an operation's contract."""


class GraphError(ValueError):
    """Invalid tape usage (mixed graphs, non-scalar seed, detached tensor)."""


def _freeze(arr) -> np.ndarray:
    # 0-d results of numpy arithmetic arrive as scalar types; normalize them
    if not isinstance(arr, np.ndarray):
        arr = np.asarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


class Tensor:
    """Immutable dense array of 64-bit floats, optionally attached to a tape.

    ``shape`` is the tuple of extents and ``data`` the flat row-major view of
    the values; both are read-only.
    """

    __slots__ = ("_array", "graph", "node_id")

    def __init__(self, data, shape=None):
        arr = np.array(data, dtype=np.float64)
        if shape is not None:
            if arr.size != int(np.prod(shape)):
                raise ShapeError(
                    f"data of length {arr.size} cannot fill shape {tuple(shape)}"
                )
            arr = arr.reshape(tuple(shape))
        self._array = _freeze(arr)
        self.graph = None
        self.node_id = None

    @staticmethod
    def _wrap(arr: np.ndarray, graph=None, node_id=None) -> "Tensor":
        t = object.__new__(Tensor)
        t._array = _freeze(arr)
        t.graph = graph
        t.node_id = node_id
        return t

    @staticmethod
    def zeros(shape) -> "Tensor":
        return Tensor._wrap(np.zeros(shape, dtype=np.float64))

    @staticmethod
    def full(shape, value: float) -> "Tensor":
        return Tensor._wrap(np.full(shape, float(value), dtype=np.float64))

    @property
    def array(self) -> np.ndarray:
        """The underlying read-only ndarray."""
        return self._array

    @property
    def shape(self) -> tuple:
        return tuple(self._array.shape)

    @property
    def size(self) -> int:
        return int(self._array.size)

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the values (read-only)."""
        return self._array.reshape(-1)

    def item(self) -> float:
        if self._array.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self._array.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        tag = "" if self.graph is None else f", node={self.node_id}"
        return f"Tensor(shape={self.shape}{tag})"

    def __getstate__(self):
        # Graph attachment is never pickled; workers only need values.
        return np.array(self._array)

    def __setstate__(self, state):
        self._array = _freeze(state)
        self.graph = None
        self.node_id = None

    # Arithmetic sugar; the free functions below do the recording.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self) -> "Tensor":
        return tsum(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def flatten(self) -> "Tensor":
        return reshape(self, (self.size,))


class _Node:
    __slots__ = ("op", "parents", "output", "vjps")

    def __init__(self, op, parents, output, vjps):
        self.op = op
        self.parents = parents
        self.output = output
        self.vjps = vjps  # tuple of (parent_id, fn(grad_out) -> grad_parent)


class CompGraph:
    """Append-only operation tape; node k's parents always have ids < k.

    Instances are single-threaded.  Constants (tensors never attached via
    ``leaf``) are baked into the recorded closures and do not appear as nodes.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: list[np.ndarray | None] | None = None

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value) -> Tensor:
        """Register an input tensor whose gradient should be tracked."""
        arr = value.array if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        return self._record("leaf", arr, ())

    def value(self, node_id: int) -> Tensor:
        return Tensor._wrap(self.nodes[node_id].output, self, node_id)

    def _record(self, op: str, output, vjps) -> Tensor:
        if not isinstance(output, np.ndarray):
            output = np.asarray(output, dtype=np.float64)
        nid = len(self.nodes)
        parents = tuple(pid for pid, _ in vjps)
        self.nodes.append(_Node(op, parents, output, tuple(vjps)))
        return Tensor._wrap(output, self, nid)

    def backward(self, seed) -> dict[int, Tensor]:
        """Reverse accumulation from a scalar seed node.

        Returns a lookup from node id to gradient tensor for every node on a
        differentiable path to the seed; the same gradients are cached on
        ``self.grads``.
        """
        if isinstance(seed, Tensor):
            if seed.graph is not self:
                raise GraphError("seed tensor is not attached to this graph")
            sid = seed.node_id
        else:
            sid = int(seed)
            if not 0 <= sid < len(self.nodes):
                raise GraphError(f"seed node id {sid} out of range")
        if self.nodes[sid].output.size != 1:
            raise GraphError(
                f"backward() needs a scalar seed, got shape {self.nodes[sid].output.shape}"
            )
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[sid] = np.ones_like(self.nodes[sid].output)
        for nid in range(sid, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            for pid, fn in self.nodes[nid].vjps:
                contrib = fn(g)
                if grads[pid] is None:
                    grads[pid] = contrib
                else:
                    grads[pid] = grads[pid] + contrib
        self.grads = grads
        return {i: Tensor._wrap(gr) for i, gr in enumerate(grads) if gr is not None}


def backward(graph: CompGraph, seed) -> dict[int, Tensor]:
    """Module-level alias for ``CompGraph.backward``."""
    return graph.backward(seed)


# ---------------------------------------------------------------------------
# operand plumbing

def _as_tensor(x, like=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _arr(x) -> np.ndarray:
    return x.array if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _graph_of(*tensors) -> CompGraph | None:
    g = None
    for t in tensors:
        if isinstance(t, Tensor) and t.graph is not None:
            if g is None:
                g = t.graph
            elif g is not t.graph:
                raise GraphError("operands come from different graphs")
    return g


def _attached(t) -> bool:
    return isinstance(t, Tensor) and t.graph is not None


# ---------------------------------------------------------------------------
# elementwise / reduction ops

def add(a, b) -> Tensor:
    xa, xb = _arr(a), _arr(b)
    if xa.shape != xb.shape and xa.size != 1 and xb.size != 1:
        raise ShapeError(f"add: shapes {xa.shape} and {xb.shape} do not match")
    out = xa + xb
    g = _graph_of(a, b)
    if g is None:
        return Tensor._wrap(out)
    vjps = []
    if _attached(a):
        vjps.append((a.node_id, (lambda go: go) if xa.shape == out.shape else (lambda go: go.sum().reshape(xa.shape))))
    if _attached(b):
        vjps.append((b.node_id, (lambda go: go) if xb.shape == out.shape else (lambda go: go.sum().reshape(xb.shape))))
    return g._record("add", out, vjps)


def sub(a, b) -> Tensor:
    xa, xb = _arr(a), _arr(b)
    if xa.shape != xb.shape and xa.size != 1 and xb.size != 1:
        raise ShapeError(f"sub: shapes {xa.shape} and {xb.shape} do not match")
    out = xa - xb
    g = _graph_of(a, b)
    if g is None:
        return Tensor._wrap(out)
    vjps = []
    if _attached(a):
        vjps.append((a.node_id, (lambda go: go) if xa.shape == out.shape else (lambda go: go.sum().reshape(xa.shape))))
    if _attached(b):
        vjps.append((b.node_id, (lambda go: -go) if xb.shape == out.shape else (lambda go: -go.sum().reshape(xb.shape))))
    return g._record("sub", out, vjps)


def mul(a, b) -> Tensor:
    xa, xb = _arr(a), _arr(b)
    if xa.shape != xb.shape and xa.size != 1 and xb.size != 1:
        raise ShapeError(f"mul: shapes {xa.shape} and {xb.shape} do not match")
    out = xa * xb
    g = _graph_of(a, b)
    if g is None:
        return Tensor._wrap(out)
    vjps = []
    if _attached(a):
        if xa.shape == out.shape:
            vjps.append((a.node_id, lambda go: go * xb))
        else:
            vjps.append((a.node_id, lambda go: (go * xb).sum().reshape(xa.shape)))
    if _attached(b):
        if xb.shape == out.shape:
            vjps.append((b.node_id, lambda go: go * xa))
        else:
            vjps.append((b.node_id, lambda go: (go * xa).sum().reshape(xb.shape)))
    return g._record("mul", out, vjps)


def tsum(t) -> Tensor:
    x = _arr(t)
    out = np.asarray(x.sum())
    g = _graph_of(t)
    if g is None:
        return Tensor._wrap(out)
    shape = x.shape
    return g._record("sum", out, ((t.node_id, lambda go: np.broadcast_to(go, shape).copy()),))


def reshape(t, shape) -> Tensor:
    x = _arr(t)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    out = x.reshape(shape)
    g = _graph_of(t)
    if g is None:
        return Tensor._wrap(out)
    orig = x.shape
    return g._record("reshape", out, ((t.node_id, lambda go: go.reshape(orig)),))


def pick(t, index: int) -> Tensor:
    """Scalar element of a 1-D tensor; gradient scatters back to that slot."""
    x = _arr(t)
    if x.ndim != 1:
        raise ShapeError(f"pick: expected 1-D tensor, got shape {x.shape}")
    index = int(index)
    if not 0 <= index < x.shape[0]:
        raise ShapeError(f"pick: index {index} out of range for length {x.shape[0]}")
    out = np.asarray(x[index])
    g = _graph_of(t)
    if g is None:
        return Tensor._wrap(out)
    n = x.shape[0]

    def vjp(go):
        grad = np.zeros(n, dtype=np.float64)
        grad[index] = go
        return grad

    return g._record("pick", out, ((t.node_id, vjp),))


def channel(t, index: int) -> Tensor:
    """Channel slice [H, W] of a [K, H, W] tensor."""
    x = _arr(t)
    if x.ndim != 3:
        raise ShapeError(f"channel: expected [K,H,W] tensor, got shape {x.shape}")
    index = int(index)
    if not 0 <= index < x.shape[0]:
        raise ShapeError(f"channel: index {index} out of range for {x.shape[0]} channels")
    out = x[index]
    g = _graph_of(t)
    if g is None:
        return Tensor._wrap(out)
    shape = x.shape

    def vjp(go):
        grad = np.zeros(shape, dtype=np.float64)
        grad[index] = go
        return grad

    return g._record("channel", out, ((t.node_id, vjp),))


def max_all(t) -> Tensor:
    """Maximum over all elements; ties route to the first flat position."""
    x = _arr(t)
    if x.size == 0:
        raise ShapeError("max_all: empty tensor")
    flat_idx = int(np.argmax(x.reshape(-1)))
    out = np.asarray(x.reshape(-1)[flat_idx])
    g = _graph_of(t)
    if g is None:
        return Tensor._wrap(out)
    shape = x.shape

    def vjp(go):
        grad = np.zeros(shape, dtype=np.float64)
        grad.reshape(-1)[flat_idx] = go
        return grad

    return g._record("max_all", out, ((t.node_id, vjp),))


def channel_max(t) -> Tensor:
    """Per-channel maximum of a [K, H, W] tensor, first-occurrence ties."""
    x = _arr(t)
    if x.ndim != 3:
        raise ShapeError(f"channel_max: expected [K,H,W] tensor, got shape {x.shape}")
    k = x.shape[0]
    flat = x.reshape(k, -1)
    idx = np.argmax(flat, axis=1)
    out = flat[np.arange(k), idx]
    g = _graph_of(t)
    if g is None:
        return Tensor._wrap(out)
    shape = x.shape

    def vjp(go):
        grad = np.zeros((k, shape[1] * shape[2]), dtype=np.float64)
        grad[np.arange(k), idx] = go
        return grad.reshape(shape)

    return g._record("channel_max", out, ((t.node_id, vjp),))


# ---------------------------------------------------------------------------
# network layers

def relu(input) -> Tensor:
    """Elementwise max(0, v); the subgradient at exactly 0 is 0."""
    x = _arr(input)
    out = np.maximum(x, 0.0)
    g = _graph_of(input)
    if g is None:
        return Tensor._wrap(out)
    mask = x > 0.0
    return g._record("relu", out, ((input.node_id, lambda go: go * mask),))


def conv2d(input, weight, bias, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    input [C_in, H, W], weight [C_out, C_in, kH, kW] with odd kH/kW,
    bias [C_out].  The output extent (H + 2*pad - kH)/stride + 1 must be
    integral.  Differentiable w.r.t. input, weight and bias.
    """
    x, w, b = _arr(input), _arr(weight), _arr(bias)
    if x.ndim != 3:
        raise ShapeError(f"conv2d: input must be [C,H,W], got shape {x.shape}")
    if w.ndim != 4:
        raise ShapeError(f"conv2d: weight must be [O,C,kH,kW], got shape {w.shape}")
    cout, cin, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if x.shape[0] != cin:
        raise ShapeError(
            f"conv2d: input has {x.shape[0]} channels but weight expects {cin}"
        )
    if b.shape != (cout,):
        raise ShapeError(f"conv2d: bias must be [{cout}], got shape {b.shape}")
    if pad < 0:
        raise ShapeError("conv2d: pad must be >= 0")
    if stride < 1:
        raise ShapeError("conv2d: stride must be >= 1")
    h, wd = x.shape[1], x.shape[2]
    if (h + 2 * pad - kh) % stride or (wd + 2 * pad - kw) % stride:
        raise ShapeError(
            f"conv2d: output extent not integral for input {h}x{wd}, "
            f"kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )
    hout = (h + 2 * pad - kh) // stride + 1
    wout = (wd + 2 * pad - kw) // stride + 1
    if hout < 1 or wout < 1:
        raise ShapeError("conv2d: kernel larger than padded input")

    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # win: [C, H', W', kh, kw]; contract channel and kernel axes against weight
    out = np.tensordot(win, w, axes=([0, 3, 4], [1, 2, 3]))  # [H', W', O]
    out = np.ascontiguousarray(np.moveaxis(out, 2, 0)) + b[:, None, None]

    g = _graph_of(input, weight, bias)
    if g is None:
        return Tensor._wrap(out)
    vjps = []
    if _attached(input):
        in_shape = x.shape

        def vjp_input(go):
            if stride > 1:
                gd = np.zeros((cout, h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1))
                gd[:, ::stride, ::stride] = go
            else:
                gd = go
            gdp = np.pad(gd, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            wing = sliding_window_view(gdp, (kh, kw), axis=(1, 2))
            wf = w[:, :, ::-1, ::-1]
            gxp = np.tensordot(wing, wf, axes=([0, 3, 4], [0, 2, 3]))  # [Hp, Wp, C]
            gxp = np.moveaxis(gxp, 2, 0)
            if pad:
                gxp = gxp[:, pad:pad + in_shape[1], pad:pad + in_shape[2]]
            return np.ascontiguousarray(gxp)

        vjps.append((input.node_id, vjp_input))
    if _attached(weight):

        def vjp_weight(go):
            gw = np.tensordot(win, go, axes=([1, 2], [1, 2]))  # [C, kh, kw, O]
            return np.ascontiguousarray(np.moveaxis(gw, 3, 0))

        vjps.append((weight.node_id, vjp_weight))
    if _attached(bias):
        vjps.append((bias.node_id, lambda go: go.sum(axis=(1, 2))))
    return g._record("conv2d", out, vjps)


def maxpool2(input) -> Tensor:
    """2x2 non-overlapping max pool; gradient goes to the first max per window."""
    x = _arr(input)
    if x.ndim != 3:
        raise ShapeError(f"maxpool2: input must be [C,H,W], got shape {x.shape}")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial extents must be even, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = x.reshape(c, h2, 2, w2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, 4)
    idx = np.argmax(win, axis=3)  # first occurrence within the row-major window
    out = np.take_along_axis(win, idx[..., None], axis=3)[..., 0]
    g = _graph_of(input)
    if g is None:
        return Tensor._wrap(out)

    def vjp(go):
        dwin = np.zeros((c, h2, w2, 4), dtype=np.float64)
        np.put_along_axis(dwin, idx[..., None], go[..., None], axis=3)
        return dwin.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)

    return g._record("maxpool2", out, ((input.node_id, vjp),))


def batchnorm_eval(input, mean, var, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Inference-mode batch normalization over the channel axis of [C, H, W].

    Differentiable w.r.t. input, gamma and beta; mean/var are statistics and
    must be constants.
    """
    x, m, v, ga, be = _arr(input), _arr(mean), _arr(var), _arr(gamma), _arr(beta)
    if x.ndim != 3:
        raise ShapeError(f"batchnorm_eval: input must be [C,H,W], got shape {x.shape}")
    c = x.shape[0]
    for name, p in (("mean", m), ("var", v), ("gamma", ga), ("beta", be)):
        if p.shape != (c,):
            raise ShapeError(f"batchnorm_eval: {name} must be [{c}], got shape {p.shape}")
    if np.any(v < 0):
        raise ShapeError("batchnorm_eval: variance must be non-negative")
    if _attached(mean) or _attached(var):
        raise GraphError("batchnorm_eval: mean/var are frozen statistics, not differentiable")
    inv = 1.0 / np.sqrt(v + eps)
    xhat = (x - m[:, None, None]) * inv[:, None, None]
    out = xhat * ga[:, None, None] + be[:, None, None]
    g = _graph_of(input, gamma, beta)
    if g is None:
        return Tensor._wrap(out)
    vjps = []
    if _attached(input):
        scale = ga * inv
        vjps.append((input.node_id, lambda go: go * scale[:, None, None]))
    if _attached(gamma):
        vjps.append((gamma.node_id, lambda go: (go * xhat).sum(axis=(1, 2))))
    if _attached(beta):
        vjps.append((beta.node_id, lambda go: go.sum(axis=(1, 2))))
    return g._record("batchnorm_eval", out, vjps)


def linear(input, weight, bias) -> Tensor:
    """Affine map: weight [K, F] @ input [F] + bias [K]."""
    x, w, b = _arr(input), _arr(weight), _arr(bias)
    if x.ndim != 1:
        raise ShapeError(f"linear: input must be 1-D, got shape {x.shape}")
    if w.ndim != 2 or w.shape[1] != x.shape[0]:
        raise ShapeError(
            f"linear: weight shape {w.shape} incompatible with input length {x.shape[0]}"
        )
    if b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias must be [{w.shape[0]}], got shape {b.shape}")
    out = w @ x + b
    g = _graph_of(input, weight, bias)
    if g is None:
        return Tensor._wrap(out)
    vjps = []
    if _attached(input):
        vjps.append((input.node_id, lambda go: go @ w))
    if _attached(weight):
        vjps.append((weight.node_id, lambda go: np.outer(go, x)))
    if _attached(bias):
        vjps.append((bias.node_id, lambda go: go.copy()))
    return g._record("linear", out, vjps)


# ---------------------------------------------------------------------------
# training losses (fused for stability and speed)

def softmax_cross_entropy(logits, label: int) -> Tensor:
    """Cross-entropy of softmax(logits) against an integer class label."""
    x = _arr(logits)
    if x.ndim != 1:
        raise ShapeError(f"softmax_cross_entropy: logits must be 1-D, got {x.shape}")
    label = int(label)
    if not 0 <= label < x.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: label {label} out of range")
    m = x.max()
    z = x - m
    lse = math.log(np.exp(z).sum()) + m
    out = np.asarray(lse - x[label])
    g = _graph_of(logits)
    if g is None:
        return Tensor._wrap(out)
    p = np.exp(x - lse)

    def vjp(go):
        grad = p * go
        grad[label] -= go
        return grad

    return g._record("softmax_cross_entropy", out, ((logits.node_id, vjp),))


def sigmoid_cross_entropy(scores, targets) -> Tensor:
    """Mean binary cross-entropy with logits against a 0/1 target vector."""
    x = _arr(scores)
    t = np.asarray(targets, dtype=np.float64)
    if x.ndim != 1 or t.shape != x.shape:
        raise ShapeError(
            f"sigmoid_cross_entropy: scores {x.shape} and targets {t.shape} must be equal 1-D"
        )
    k = x.shape[0]
    loss = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = np.asarray(loss.sum() / k)
    g = _graph_of(scores)
    if g is None:
        return Tensor._wrap(out)
    sig = 1.0 / (1.0 + np.exp(-x))
    return g._record(
        "sigmoid_cross_entropy", out, ((scores.node_id, lambda go: (sig - t) * (go / k)),)
    )


def softmax(values) -> np.ndarray:
    """Plain (non-recorded) stable softmax of a 1-D array or tensor."""
    x = _arr(values)
    z = np.exp(x - x.max())
    return z / z.sum()
