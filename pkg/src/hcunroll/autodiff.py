"""Tape-based reverse-mode differentiation over dense float64 arrays.

Operations are recorded only while a :class:`Graph` is active (``with Graph()
as g: ...``).  Outside of a graph every op evaluates eagerly and nothing is
retained, which is how inference and the classical solvers run.

The tape is append-only; :func:`backward` walks it in exact reverse order.
Each thread has its own active-graph stack, so independent examples can be
differentiated concurrently as long as each builds its own graph.
"""

from __future__ import annotations

import threading
from collections.abc import Callable, Sequence
from typing import NamedTuple

import numpy as np

from .errors import ContractError, NumericalError, ShapeError

_state = threading.local()


def _stack() -> list[Graph]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_graph() -> Graph | None:
    stack = _stack()
    return stack[-1] if stack else None


class Node(NamedTuple):
    op: str
    inputs: tuple[int | None, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None


class Graph:
    """Append-only record of the operations applied to tracked tensors."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._leaf_ids: dict[int, int] = {}
        # keeps leaves alive so their id() cannot be recycled mid-graph
        self._leaf_refs: list[Tensor] = []

    def __enter__(self) -> Graph:
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("graph contexts exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def node_of(self, t: Tensor) -> int | None:
        """Node id of ``t`` in this graph, or None if it never entered it."""
        if t._graph is self:
            return t._node
        return self._leaf_ids.get(id(t))

    def _input_id(self, t: Tensor) -> int | None:
        if t._graph is not None:
            if t._graph is not self:
                raise ContractError("tensor belongs to a different graph")
            return t._node
        if not t.requires_grad:
            return None
        key = id(t)
        nid = self._leaf_ids.get(key)
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(Node("leaf", (), None))
            self._leaf_ids[key] = nid
            self._leaf_refs.append(t)
        return nid

    def release(self) -> None:
        """Drop the tape so its buffers are freed without waiting for the cycle collector."""
        self.nodes.clear()
        self._leaf_ids.clear()
        self._leaf_refs.clear()

    def gradient(self, t: Tensor, grads: dict[int, np.ndarray]) -> np.ndarray:
        """Gradient of ``t`` from a :func:`backward` result (zeros if unreached)."""
        nid = self.node_of(t)
        if nid is None or nid not in grads:
            return np.zeros_like(t.data)
        return grads[nid]


class Tensor:
    """A float64 array that may participate in a recorded graph."""

    __slots__ = ("data", "requires_grad", "_graph", "_node")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False) -> None:
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = requires_grad
        self._graph: Graph | None = None
        self._node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return neg(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericalError(f"{op} produced a non-finite value")
    return arr


def _record(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    _finite(out, op)
    result = Tensor(out)
    g = active_graph()
    if g is None:
        return result
    ids = tuple(g._input_id(t) for t in inputs)
    if all(i is None for i in ids):
        return result
    result.requires_grad = True
    result._graph = g
    result._node = len(g.nodes)
    g.nodes.append(Node(op, ids, vjp))
    return result


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if _is_scalar(t) and g.ndim:
        return np.asarray(g.sum())
    return g


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    return _record(
        "add", (a, b), a.data + b.data,
        lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    return _record(
        "sub", (a, b), a.data - b.data,
        lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(
        "mul", (a, b), ad * bd,
        lambda g: (_unbroadcast(g * bd, a), _unbroadcast(g * ad, b)),
    )


def div(a, b) -> Tensor:
    """Divide by a scalar tensor (or a same-shape tensor)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "div")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd  # non-finite results are rejected by _record
    return _record(
        "div", (a, b), out,
        lambda g: (_unbroadcast(g / bd, a), _unbroadcast(-g * out / bd, b)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _record("abs", (a,), np.abs(a.data), lambda g: (g * sign,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _record("sqrt", (a,), out, lambda g: (0.5 * g / out,))


def softplus(a) -> Tensor:
    """log(1 + e^x); maps -inf to exactly 0."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record("softplus", (a,), out, lambda g: (g * sig,))


def inverse_softplus(value: float) -> float:
    """Raw parameter whose softplus equals ``value`` (0 maps to -inf)."""
    if value < 0:
        raise ContractError("softplus range is [0, inf)")
    if value == 0:
        return -np.inf
    if value > 30:
        return float(value)
    return float(value + np.log(-np.expm1(-value)))


# -- reductions ----------------------------------------------------------------


def sum_(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _record(
        "sum", (a,), np.asarray(a.data.sum()),
        lambda g: (np.full(shape, float(g)),),
    )


def vdot(a, b) -> Tensor:
    """Real inner product sum(a * b) of two same-shape tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"vdot: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    out = np.asarray(np.dot(ad.ravel(), bd.ravel()))
    return _record("vdot", (a, b), out, lambda g: (float(g) * bd, float(g) * ad))


def norm2(a) -> Tensor:
    return sqrt(vdot(a, a))


# -- structural ----------------------------------------------------------------


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Stack ``C_i x H x W`` tensors along the channel axis, in order."""
    inputs = [as_tensor(t) for t in inputs]
    if not inputs:
        raise ContractError("concat_channels needs at least one input")
    spatial = inputs[0].shape[1:]
    for t in inputs:
        if t.data.ndim != 3 or t.shape[1:] != spatial:
            raise ShapeError(f"concat_channels: spatial shape {t.shape[1:]} != {spatial}")
    if len(inputs) == 1:
        return inputs[0]
    offsets = np.cumsum([0] + [t.shape[0] for t in inputs])
    out = np.concatenate([t.data for t in inputs], axis=0)
    return _record(
        "concat", inputs, out,
        lambda g: tuple(g[offsets[k]:offsets[k + 1]] for k in range(len(inputs))),
    )


def linear(x, forward: Callable, adjoint: Callable, op: str = "linear") -> Tensor:
    """Apply a fixed linear map whose adjoint is known in closed form."""
    x = as_tensor(x)
    return _record(op, (x,), forward(x.data), lambda g: (adjoint(g),))


def avg_pool2(x) -> Tensor:
    x = as_tensor(x)
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ContractError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def vjp(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)

    return _record("avg_pool2", (x,), out, vjp)


def upsample2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    x = as_tensor(x)
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def vjp(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return _record("upsample2", (x,), out, vjp)


# -- convolution ---------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    c, h, w = x.shape
    if kh == 1 and kw == 1:
        return x.reshape(c, h * w)
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((c, kh, kw, h, w))
    for dy in range(kh):
        for dx in range(kw):
            cols[:, dy, dx] = xp[:, dy:dy + h, dx:dx + w]
    return cols.reshape(c * kh * kw, h * w)


def _col2im(cols: np.ndarray, c: int, h: int, w: int, kh: int, kw: int) -> np.ndarray:
    if kh == 1 and kw == 1:
        return cols.reshape(c, h, w)
    ph, pw = kh // 2, kw // 2
    cols = cols.reshape(c, kh, kw, h, w)
    xp = np.zeros((c, h + 2 * ph, w + 2 * pw))
    for dy in range(kh):
        for dx in range(kw):
            xp[:, dy:dy + h, dx:dx + w] += cols[:, dy, dx]
    return xp[:, ph:ph + h, pw:pw + w]


def conv2d(x, kernel, bias=None) -> Tensor:
    """Same-padded, stride-1 cross-correlation of a ``C_in x H x W`` input."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape} / kernel {kernel.shape} have wrong rank")
    cout, cin, kh, kw = kernel.shape
    c, h, w = x.shape
    if cin != c:
        raise ShapeError(f"conv2d: kernel expects {cin} input channels, got {c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractError("conv2d: kernel sizes must be odd")
    k2 = kernel.data.reshape(cout, cin * kh * kw)
    # kept for the kernel gradient; trades memory for a second im2col pass
    cols = _im2col(x.data, kh, kw)
    out = k2 @ cols
    inputs: tuple[Tensor, ...] = (x, kernel)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
        out += bias.data[:, None]
        inputs = (x, kernel, bias)

    def vjp(g):
        g2 = g.reshape(cout, h * w)
        gx = _col2im(k2.T @ g2, c, h, w, kh, kw)
        gk = (g2 @ cols.T).reshape(kernel.shape)
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=1)

    return _record("conv2d", inputs, out.reshape(cout, h, w), vjp)


# -- differentiation -----------------------------------------------------------


def backward(graph: Graph, loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every tracked leaf.

    Returns a map from leaf node id to gradient array; use
    :meth:`Graph.gradient` to look a parameter up.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    start = graph.node_of(loss)
    if start is None:
        return {}
    nodes = graph.nodes
    grads: list[np.ndarray | None] = [None] * (start + 1)
    grads[start] = np.ones(loss.shape)
    leaves: dict[int, np.ndarray] = {}
    for nid in range(start, -1, -1):
        g = grads[nid]
        if g is None:
            continue
        grads[nid] = None
        node = nodes[nid]
        if node.vjp is None:
            leaves[nid] = g
            continue
        for inp, ig in zip(node.inputs, node.vjp(g)):
            if inp is None or ig is None:
                continue
            prev = grads[inp]
            grads[inp] = ig if prev is None else prev + ig
    return leaves


def gradients(graph: Graph, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` for ``params`` in order (zeros where unused)."""
    leaves = backward(graph, loss)
    return [graph.gradient(p, leaves) for p in params]


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-6,
    indices: dict[int, np.ndarray] | None = None,
) -> float:
    """Worst relative error between backward() and central differences.

    ``f`` is evaluated with no arguments and must read the current values of
    ``params`` (which are perturbed in place and restored).  The denominator
    is ``max(|analytic|, |numeric|, 1e-12)``.  ``indices`` optionally limits
    the probed flat coordinates per parameter position.
    """
    if h <= 0:
        raise ContractError("finite difference step must be positive")
    with Graph() as g:
        loss = f()
    analytic = gradients(g, loss, params)
    g.release()
    worst = 0.0
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        agrad = analytic[k].reshape(-1)
        coords = range(flat.size) if indices is None or k not in indices else indices[k]
        for i in coords:
            orig = flat[i]
            hi, lo = orig + h, orig - h
            flat[i] = hi
            fp = f().item()
            flat[i] = lo
            fm = f().item()
            flat[i] = orig
            # divide by the step actually taken, not the nominal 2h
            num = (fp - fm) / (hi - lo)
            denom = max(abs(agrad[i]), abs(num), 1e-12)
            worst = max(worst, abs(agrad[i] - num) / denom)
    return worst
