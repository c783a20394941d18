# src/signforge/gradcore.py
"""Reverse-mode differentiation over float64 numpy arrays.

A `DiffGraph` records every operation in execution order. Each recorded
`Node` holds its forward value (read-only) and, after `backward`, its
adjoint buffer. Ops are plain functions taking nodes (or constants, which
are lifted onto the graph of the first node argument).
"""
import math
from typing import Callable, Literal, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# A Tensor is a float64 ndarray; values stored on a graph are made read-only.
Tensor = np.ndarray

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Node:
    __slots__ = ("graph", "op", "inputs", "value", "backward_fn", "requires_grad", "grad")

    def __init__(
        self,
        graph: "DiffGraph",
        op: str,
        inputs: tuple["Node", ...],
        value: np.ndarray,
        backward_fn: BackwardFn | None,
        requires_grad: bool,
    ):
        self.graph = graph
        self.op = op
        self.inputs = inputs
        self.value = value
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    def __repr__(self) -> str:
        return f"<Node {self.op} shape={self.shape} requires_grad={self.requires_grad}>"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __add__(self, other) -> "Node":
        return add(self, other)

    def __radd__(self, other) -> "Node":
        return add(other, self)

    def __sub__(self, other) -> "Node":
        return sub(self, other)

    def __rsub__(self, other) -> "Node":
        return sub(other, self)

    def __mul__(self, other) -> "Node":
        return mul(self, other)

    def __rmul__(self, other) -> "Node":
        return mul(other, self)

    def __neg__(self) -> "Node":
        return mul(self, -1.0)

    def __getitem__(self, index) -> "Node":
        return take(self, index)

    def sum(self, axis=None) -> "Node":
        return reduce_sum(self, axis)

    def mean(self, axis=None) -> "Node":
        return reduce_mean(self, axis)


class DiffGraph:
    """Recorded tape of ops; `nodes` is in execution order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value, requires_grad: bool = True) -> Node:
        array = np.array(value, dtype=np.float64, copy=True)
        array.setflags(write=False)
        node = Node(self, "leaf", (), array, None, requires_grad)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self.leaf(value, requires_grad=False)

    def record(
        self,
        op: str,
        inputs: tuple[Node, ...],
        value: np.ndarray,
        backward_fn: BackwardFn,
    ) -> Node:
        value = np.asarray(value, dtype=np.float64)
        value.setflags(write=False)
        requires_grad = any(inp.requires_grad for inp in inputs)
        node = Node(self, op, inputs, value, backward_fn if requires_grad else None, requires_grad)
        self.nodes.append(node)
        return node

    def backward(self, output: Node) -> dict[Node, np.ndarray]:
        """Accumulate adjoints from scalar `output`; return gradients of marked leaves.

        Leaves with no path to `output` get a zero gradient.
        """
        if output.graph is not self:
            raise ValueError("Output node belongs to a different graph")
        if output.value.size != 1 or output.ndim != 0:
            raise ValueError(f"backward requires a scalar output, got shape {output.shape}")

        for node in self.nodes:
            node.grad = None
        output.grad = np.ones((), dtype=np.float64)

        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            input_grads = node.backward_fn(node.grad)
            for inp, g in zip(node.inputs, input_grads):
                if g is None or not inp.requires_grad:
                    continue
                g = np.asarray(g, dtype=np.float64)
                if g.shape != inp.shape:
                    raise RuntimeError(
                        f"Adjoint shape {g.shape} does not match value shape {inp.shape} in op '{node.op}'"
                    )
                inp.grad = g.copy() if inp.grad is None else inp.grad + g

        return {
            node: (node.grad if node.grad is not None else np.zeros(node.shape))
            for node in self.nodes
            if node.op == "leaf" and node.requires_grad
        }


def backward(graph: DiffGraph, output: Node) -> dict[Node, np.ndarray]:
    return graph.backward(output)


def _graph_of(args) -> DiffGraph:
    for arg in args:
        if isinstance(arg, Node):
            return arg.graph
    raise ValueError("At least one argument must be a graph node")


def _lift(*args) -> list[Node]:
    graph = _graph_of(args)
    nodes = []
    for arg in args:
        if isinstance(arg, Node):
            if arg.graph is not graph:
                raise ValueError("Cannot combine nodes from different graphs")
            nodes.append(arg)
        else:
            nodes.append(graph.constant(arg))
    return nodes


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast dimensions so `grad` matches `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# Elementwise arithmetic


def add(a, b) -> Node:
    a, b = _lift(a, b)
    return a.graph.record(
        "add", (a, b), a.value + b.value,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Node:
    a, b = _lift(a, b)
    return a.graph.record(
        "sub", (a, b), a.value - b.value,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Node:
    a, b = _lift(a, b)
    return a.graph.record(
        "mul", (a, b), a.value * b.value,
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def square(x: Node) -> Node:
    return x.graph.record("square", (x,), x.value * x.value, lambda g: (2.0 * x.value * g,))


def exp(x: Node) -> Node:
    value = np.exp(x.value)
    return x.graph.record("exp", (x,), value, lambda g: (g * value,))


def log(x: Node) -> Node:
    if np.any(x.value <= 0):
        raise ValueError("log requires strictly positive input")
    return x.graph.record("log", (x,), np.log(x.value), lambda g: (g / x.value,))


def absolute(x: Node) -> Node:
    # subgradient of |.| at 0 is 0
    return x.graph.record("abs", (x,), np.abs(x.value), lambda g: (g * np.sign(x.value),))


def clip(x: Node, low: float, high: float) -> Node:
    inside = (x.value >= low) & (x.value <= high)
    return x.graph.record("clip", (x,), np.clip(x.value, low, high), lambda g: (g * inside,))


# Activations


def sigmoid(x: Node) -> Node:
    value = _sigmoid(x.value)
    return x.graph.record("sigmoid", (x,), value, lambda g: (g * value * (1.0 - value),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def leaky_relu(x: Node, alpha: float = 0.1) -> Node:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"leaky_relu alpha must lie in (0, 1), got {alpha}")
    slope = np.where(x.value > 0, 1.0, alpha)
    return x.graph.record("leaky_relu", (x,), x.value * slope, lambda g: (g * slope,))


def activation(x: Node, kind: Literal["sigmoid", "leaky_relu"], alpha: float = 0.1) -> Node:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    raise ValueError(f"Unknown activation kind: {kind}")


def softmax_channels(x: Node) -> Node:
    """Softmax over the last axis, computed with max subtraction."""
    if x.shape[-1] < 1:
        raise ValueError("softmax_channels needs at least one channel")
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        return (value * (g - (g * value).sum(axis=-1, keepdims=True)),)

    return x.graph.record("softmax", (x,), value, backward_fn)


# Reductions and reshaping


def reduce_sum(x: Node, axis=None) -> Node:
    value = x.value.sum(axis=axis)

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return x.graph.record("sum", (x,), value, backward_fn)


def reduce_mean(x: Node, axis=None) -> Node:
    if axis is None:
        count = x.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(x.shape[a] for a in axes)
    return mul(reduce_sum(x, axis), 1.0 / count)


def prod(x: Node, axis: int = -1) -> Node:
    """Product along `axis`; exact partial derivatives even when factors are 0."""
    v = np.moveaxis(x.value, axis, -1)
    value = np.prod(v, axis=-1)

    def backward_fn(g):
        ones = np.ones(v.shape[:-1] + (1,))
        before = np.concatenate([ones, np.cumprod(v, axis=-1)[..., :-1]], axis=-1)
        after = np.concatenate([np.cumprod(v[..., ::-1], axis=-1)[..., ::-1][..., 1:], ones], axis=-1)
        grad = before * after * g[..., None]
        return (np.moveaxis(grad, -1, axis),)

    return x.graph.record("prod", (x,), value, backward_fn)


def l2norm(x: Node, axis: int = -1) -> Node:
    """Euclidean norm along `axis`; subgradient 0 where the norm is 0."""
    value = np.sqrt((x.value * x.value).sum(axis=axis))

    def backward_fn(g):
        norm = np.expand_dims(value, axis)
        safe = np.where(norm > 0, norm, 1.0)
        return (np.where(norm > 0, x.value / safe, 0.0) * np.expand_dims(g, axis),)

    return x.graph.record("l2norm", (x,), value, backward_fn)


def reshape(x: Node, shape: tuple[int, ...]) -> Node:
    return x.graph.record("reshape", (x,), x.value.reshape(shape), lambda g: (g.reshape(x.shape),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def take(x: Node, index) -> Node:
    """x[index] for basic or integer-array indices."""
    value = x.value[index]

    def backward_fn(g):
        grad = np.zeros(x.shape)
        if _is_basic_index(index):
            grad[index] += g
        else:
            np.add.at(grad, index, g)
        return (grad,)

    return x.graph.record("take", (x,), value, backward_fn)


def stack(nodes: Sequence[Node], axis: int = 0) -> Node:
    nodes = _lift(*nodes)
    value = np.stack([n.value for n in nodes], axis=axis)

    def backward_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(nodes)))

    return nodes[0].graph.record("stack", tuple(nodes), value, backward_fn)


def reduce_max_indexed(x: Node) -> tuple[Node, tuple[int, ...]]:
    """Maximum and its first row-major index; backward routes to that index only."""
    if x.value.size == 0:
        raise ValueError("reduce_max_indexed needs a nonempty tensor")
    index = tuple(int(i) for i in np.unravel_index(int(np.argmax(x.value)), x.shape))

    def backward_fn(g):
        grad = np.zeros(x.shape)
        grad[index] = g
        return (grad,)

    return x.graph.record("max", (x,), x.value[index], backward_fn), index


def logsumexp(x: Node, temperature: float) -> Node:
    """Smoothed max: temperature * log(sum(exp(x / temperature)))."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    scaled = x.value / temperature
    peak = scaled.max()
    e = np.exp(scaled - peak)
    total = e.sum()
    value = temperature * (peak + np.log(total))
    weights = e / total
    return x.graph.record("logsumexp", (x,), value, lambda g: (g * weights,))


# Convolution and pooling (H x W x C layout, optional leading batch axes)


def conv2d(x: Node, kernel: Node, stride: int = 1, padding: int = 0) -> Node:
    x, kernel = _lift(x, kernel)
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError(f"conv2d kernel must be k x k x Cin x Cout, got shape {kernel.shape}")
    k, _, kcin, _ = kernel.shape
    if k % 2 != 1:
        raise ValueError(f"conv2d kernel size must be odd, got {k}")
    if x.ndim < 3:
        raise ValueError(f"conv2d input must be H x W x Cin, got shape {x.shape}")
    h, w, cin = x.shape[-3:]
    if cin != kcin:
        raise ValueError(
            f"conv2d channel mismatch: input shape {x.shape} has {cin} channels, "
            f"kernel shape {kernel.shape} expects {kcin}"
        )
    if h < k or w < k:
        raise ValueError(f"conv2d input {h}x{w} is smaller than kernel {k}x{k}")
    if stride < 1 or padding < 0:
        raise ValueError(f"Invalid conv2d stride={stride} padding={padding}")

    lead = x.ndim - 3
    pad_width = [(0, 0)] * lead + [(padding, padding), (padding, padding), (0, 0)]
    padded = np.pad(x.value, pad_width)
    windows = sliding_window_view(padded, (k, k), axis=(-3, -2))[..., ::stride, ::stride, :, :, :]
    ho, wo = windows.shape[-5], windows.shape[-4]
    # windows: (..., Ho, Wo, Cin, ki, kj); kernel: (ki, kj, Cin, Cout)
    value = np.tensordot(windows, kernel.value, axes=([-3, -2, -1], [2, 0, 1]))

    def backward_fn(g):
        summed = tuple(range(lead + 2))
        grad_kernel = np.tensordot(windows, g, axes=(summed, summed)).transpose(1, 2, 0, 3)
        grad_padded = np.zeros(padded.shape)
        for i in range(k):
            for j in range(k):
                grad_padded[
                    ..., i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :
                ] += g @ kernel.value[i, j].T
        grad_x = grad_padded[..., padding:padding + h, padding:padding + w, :]
        return grad_x, grad_kernel

    return x.graph.record("conv2d", (x, kernel), value, backward_fn)


def max_pool2d(x: Node, size: int = 2) -> Node:
    h, w, c = x.shape[-3:]
    if h % size or w % size:
        raise ValueError(f"max_pool2d needs spatial dims divisible by {size}, got {h}x{w}")
    lead = x.shape[:-3]
    blocks = x.value.reshape(*lead, h // size, size, w // size, size, c)
    blocks = np.moveaxis(blocks, (-4, -2), (-2, -1)).reshape(*lead, h // size, w // size, c, size * size)
    arg = blocks.argmax(axis=-1)
    value = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        routed = (np.arange(size * size) == arg[..., None]) * g[..., None]
        routed = routed.reshape(*lead, h // size, w // size, c, size, size)
        return (np.moveaxis(routed, (-2, -1), (-4, -2)).reshape(x.shape),)

    return x.graph.record("max_pool2d", (x,), value, backward_fn)


# Geometry


def bilinear_warp(x: Node, transform, out_hw: tuple[int, int] | None = None) -> Node:
    """Warp an H x W x C image by a 2x3 affine mapping source (x, y) to output (x, y).

    Each output pixel samples the input at its inverse-mapped coordinate with
    bilinear weights; neighbours outside the input contribute 0. The result
    is differentiable in both the image and the affine parameters.
    """
    x, transform = _lift(x, transform)
    if x.ndim != 3:
        raise ValueError(f"bilinear_warp expects H x W x C, got shape {x.shape}")
    if transform.shape != (2, 3):
        raise ValueError(f"bilinear_warp transform must be 2x3, got shape {transform.shape}")
    linear = transform.value[:, :2]
    offset = transform.value[:, 2]
    det = float(np.linalg.det(linear))
    if abs(det) <= 1e-9:
        raise ValueError(f"bilinear_warp transform is singular (det={det:.3e})")
    inverse = np.linalg.inv(linear)

    h, w, c = x.shape
    ho, wo = out_hw if out_hw is not None else (h, w)
    rows, cols = np.meshgrid(np.arange(ho, dtype=np.float64), np.arange(wo, dtype=np.float64), indexing="ij")
    px = cols - offset[0]
    py = rows - offset[1]
    sx = inverse[0, 0] * px + inverse[0, 1] * py
    sy = inverse[1, 0] * px + inverse[1, 1] * py

    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    corners = []
    for dy, dx, weight in (
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (0, 1, fx * (1.0 - fy)),
        (1, 0, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ):
        yi = y0 + dy
        xi = x0 + dx
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        yc = np.clip(yi, 0, h - 1)
        xc = np.clip(xi, 0, w - 1)
        sample = x.value[yc, xc] * valid[..., None]
        corners.append((yc, xc, valid, weight, sample))

    value = sum(weight[..., None] * sample for _, _, _, weight, sample in corners)

    def backward_fn(g):
        grad_x = None
        if x.requires_grad:
            grad_x = np.zeros(x.shape)
            for yc, xc, valid, weight, _ in corners:
                np.add.at(grad_x, (yc, xc), (weight * valid)[..., None] * g)

        grad_t = None
        if transform.requires_grad:
            v00, v01, v10, v11 = (sample for _, _, _, _, sample in corners)
            d_sx = (1.0 - fy)[..., None] * (v01 - v00) + fy[..., None] * (v11 - v10)
            d_sy = (1.0 - fx)[..., None] * (v10 - v00) + fx[..., None] * (v11 - v01)
            g_sx = (g * d_sx).sum(axis=-1).ravel()
            g_sy = (g * d_sy).sum(axis=-1).ravel()
            g_src = np.stack([g_sx, g_sy])
            src = np.stack([sx.ravel(), sy.ravel()])
            grad_linear = -inverse.T @ (g_src @ src.T)
            grad_offset = -inverse.T @ g_src.sum(axis=1)
            grad_t = np.concatenate([grad_linear, grad_offset[:, None]], axis=1)
        return grad_x, grad_t

    return x.graph.record("bilinear_warp", (x, transform), value, backward_fn)


# Finite-difference checking


def _evaluate(fn: Callable[[DiffGraph, Node], Node], point: np.ndarray) -> float:
    graph = DiffGraph()
    return float(fn(graph, graph.leaf(point)).value)


def grad_check(fn: Callable[[DiffGraph, Node], Node], point, h: float = 1e-4) -> float:
    """Max relative error between the tape gradient and central differences.

    Relative error per coordinate is |a - n| / max(1e-8, |a| + |n|).
    Returns inf when the function is non-finite at any sampled point.
    """
    if h <= 0:
        raise ValueError(f"grad_check step must be positive, got {h}")
    point = np.array(point, dtype=np.float64)
    graph = DiffGraph()
    x = graph.leaf(point)
    out = fn(graph, x)
    if not np.isfinite(out.value).all():
        return math.inf
    analytic = graph.backward(out)[x]

    worst = 0.0
    for i in range(point.size):
        plus = point.copy()
        minus = point.copy()
        plus.flat[i] += h
        minus.flat[i] -= h
        f_plus = _evaluate(fn, plus)
        f_minus = _evaluate(fn, minus)
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            return math.inf
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = float(analytic.flat[i])
        rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, rel)
    return worst
