"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`ComputeGraph` is active are recorded on
its tape; ``backward`` replays the tape in reverse. Outside an active graph
(or inside :func:`no_grad`) operations are plain numpy computations and
their results carry no gradient, which is how stop-gradient branches are
expressed.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when an operation receives incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward output or gradient contains NaN or Inf."""


class GraphStateError(RuntimeError):
    """Raised on backward misuse (non-scalar loss, no forward pass)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def flat(self) -> np.ndarray:
        """Row-major flat view of the payload."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        out = Tensor(self.data, requires_grad=self.requires_grad, name=self.name)
        if self.grad is not None:
            out.grad = self.grad.copy()
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

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
        return mul(self, -1.0)


class Node:
    __slots__ = ("op", "index", "inputs", "output", "backward")

    def __init__(self, op, index, inputs, output, backward):
        self.op = op
        self.index = index
        self.inputs = inputs
        self.output = output
        self.backward = backward

    @property
    def label(self) -> str:
        return f"{self.op}#{self.index}"


_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active() -> "ComputeGraph | None":
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspend recording; results produced inside carry no gradient."""
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class ComputeGraph:
    """A differentiable program plus the tape of its last execution.

    ``fn`` maps a dict of named input tensors to a dict of named outputs and
    is built from the primitives in this module. The graph may also be used
    as a context manager to record ad-hoc code.
    """

    def __init__(self, fn: Callable[[Mapping[str, Tensor]], Mapping[str, Tensor]] | None = None):
        self.fn = fn
        self.nodes: list[Node] = []
        self._produced: set[int] = set()
        self._ran = False

    def __enter__(self) -> "ComputeGraph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()
        self._ran = True

    def reset(self) -> None:
        self.nodes = []
        self._produced = set()
        self._ran = False

    def next_label(self, op: str) -> str:
        return f"{op}#{len(self.nodes)}"

    def record(self, op, inputs, output, backward) -> None:
        self.nodes.append(Node(op, len(self.nodes), inputs, output, backward))
        self._produced.add(id(output))

    def forward(self, inputs: Mapping[str, Tensor]) -> dict[str, Tensor]:
        if self.fn is None:
            raise GraphStateError("graph has no program to run")
        self.reset()
        with self:
            outputs = dict(self.fn(inputs))
        for key, value in outputs.items():
            if not np.all(np.isfinite(value.data)):
                raise NonFiniteError(f"output {key!r} contains non-finite values")
        return outputs

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> None:
        """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

        Tensors listed in ``params`` that the loss does not reach get a zero
        gradient rather than ``None``.
        """
        if not self._ran:
            raise GraphStateError("backward called before forward")
        if loss.size != 1:
            raise GraphStateError(f"loss must be scalar, got shape {loss.shape}")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if loss.requires_grad and id(loss) not in self._produced:
            loss.grad = pending[id(loss)] if loss.grad is None else loss.grad + pending[id(loss)]
            leaves[id(loss)] = loss
        for node in reversed(self.nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            for tensor, gin in zip(node.inputs, node.backward(g)):
                if gin is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in self._produced:
                    if key in pending:
                        pending[key] = pending[key] + gin
                    else:
                        pending[key] = gin
                else:
                    tensor.grad = gin.copy() if tensor.grad is None else tensor.grad + gin
                    leaves[key] = tensor
        for tensor in leaves.values():
            tensor.grad = np.asarray(tensor.grad, dtype=np.float64).reshape(tensor.shape)
            if not np.all(np.isfinite(tensor.grad)):
                raise NonFiniteError(f"non-finite gradient for {tensor.name or tensor!r}")
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def forward(graph: ComputeGraph, inputs: Mapping[str, Tensor]) -> dict[str, Tensor]:
    return graph.forward(inputs)


def backward(graph: ComputeGraph, loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    graph.backward(loss, params)


# ---------------------------------------------------------------------------
# primitives


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _label(op: str) -> str:
    graph = _active()
    return graph.next_label(op) if graph is not None else op


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    graph = _active()
    out = Tensor(data)
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.record(op, tuple(inputs), out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{_label(op)}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _emit(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _emit(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _emit(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _emit(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def log(x: Tensor, floor: float = 1e-12) -> Tensor:
    """Natural log of ``max(x, floor)``; zero gradient where clamped."""
    clamped = x.data < floor
    safe = np.where(clamped, floor, x.data)
    return _emit("log", np.log(safe), (x,), lambda g: (np.where(clamped, 0.0, g / safe),))


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (x,), back)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    out = x.data / norm

    def back(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _emit("l2_normalize", out, (x,), back)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", np.asarray(out, dtype=np.float64), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size // np.asarray(out).size

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _emit("mean", np.asarray(out, dtype=np.float64), (x,), back)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"{_label('reshape')}: cannot reshape {x.shape} to {shape}") from None
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 1) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def back(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _emit("slice", x.data[index], (x,), back)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"{_label('concat')}: incompatible shapes {shapes}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _emit("concat", out, tensors, back)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"{_label('global_avg_pool')}: expected (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    return _emit(
        "global_avg_pool", out, (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),),
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``x`` (N, in) and ``weight`` (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"{_label('linear')}: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"{_label('linear')}: bias {bias.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        grads = [g @ weight.data if x.requires_grad else None, g.T @ x.data if weight.requires_grad else None]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _emit("linear", out, inputs, back)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2-D cross-correlation, ``x`` (N,Cin,H,W), ``weight`` (Cout,Cin,kh,kw)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"{_label('conv2d')}: input {x.shape} vs weight {weight.shape}")
    cout, cin, kh, kw = weight.shape
    n, _, h, w = x.shape
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"{_label('conv2d')}: bias {bias.shape} vs {cout} output channels")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"{_label('conv2d')}: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    # channels-last im2col: rows are output pixels, columns (kh, kw, Cin)
    xh = x.data.transpose(0, 2, 3, 1)
    if padding:
        xh = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(xh, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * cin)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(cout, kh * kw * cin)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = gx = None
        if weight.requires_grad:
            gw = np.ascontiguousarray((gm.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2))
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(n, ho, wo, kh, kw, cin)
            gxh = np.zeros((n, hp, wp, cin))
            for i in range(kh):
                for j in range(kw):
                    gxh[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, :, i, j]
            if padding:
                gxh = gxh[:, padding:padding + h, padding:padding + w]
            gx = np.ascontiguousarray(gxh.transpose(0, 3, 1, 2))
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _emit("conv2d", out, inputs, back)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution, ``x`` (N,Cin,H,W), ``weight`` (Cin,Cout,kh,kw)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"{_label('conv_transpose2d')}: input {x.shape} vs weight {weight.shape}")
    cin, cout, kh, kw = weight.shape
    n, _, h, w = x.shape
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"{_label('conv_transpose2d')}: bias {bias.shape} vs {cout} output channels")
    hf, wf = (h - 1) * stride + kh, (w - 1) * stride + kw
    if hf <= 2 * padding or wf <= 2 * padding:
        raise ShapeError(f"{_label('conv_transpose2d')}: padding {padding} too large")
    full = np.zeros((n, cout, hf, wf))
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + stride * h:stride, j:j + stride * w:stride] += (
                np.tensordot(x.data, weight.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            )
    out = full[:, :, padding:hf - padding, padding:wf - padding] if padding else full
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gfull = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        gx = np.zeros_like(x.data) if x.requires_grad else None
        gw = np.zeros_like(weight.data) if weight.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                gs = gfull[:, :, i:i + stride * h:stride, j:j + stride * w:stride]
                if gx is not None:
                    gx += np.tensordot(gs, weight.data[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
                if gw is not None:
                    gw[:, :, i, j] = np.tensordot(x.data, gs, axes=([0, 2, 3], [0, 2, 3]))
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _emit("conv_transpose2d", out, inputs, back)
