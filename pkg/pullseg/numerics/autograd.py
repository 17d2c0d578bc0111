"""A small float64 reverse-mode tape.

Every op records its parents and a closure mapping the output gradient to one
gradient per parent. Ops whose inputs are all constants produce constants, so
anything computed from teacher outputs never enters the graph.
"""
import functools
import typing

import numpy as np

import pullseg.numerics
from pullseg.utils import errors

BackwardFn = typing.Callable[[np.ndarray], typing.Sequence[typing.Optional[np.ndarray]]]


def unbroadcast(target_shape, grad: np.ndarray) -> np.ndarray:
    """Sum ``grad`` down to ``target_shape`` after numpy broadcasting."""
    while grad.ndim > len(target_shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(target_shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: typing.Sequence["Tensor"] = (),
        backward_fn: typing.Optional[BackwardFn] = None,
        name: typing.Optional[str] = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.grad: typing.Optional[np.ndarray] = None
        self.name = name

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} grad={self.requires_grad}>"

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    ################
    # Graph replay #
    ################

    def _topo_order(self):
        order, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self, grad: typing.Optional[np.ndarray] = None):
        if not self.requires_grad:
            raise errors.GraphNotRecorded("output does not depend on any recorded leaf")
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad)
        grads = {id(self): seed}
        for node in reversed(self._topo_order()):
            node_grad = grads.pop(id(node), None)
            if node_grad is None:
                continue
            if node.backward_fn is None:
                node.grad = node_grad if node.grad is None else node.grad + node_grad
                continue
            for parent, parent_grad in zip(node.parents, node.backward_fn(node_grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = unbroadcast(parent.shape, parent_grad)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + parent_grad
                else:
                    grads[id(parent)] = parent_grad

    ##############
    # Arithmetic #
    ##############

    def __add__(self, other):
        other = lift(other)
        return record(self.data + other.data, (self, other), lambda g: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        other = lift(other)
        return record(self.data - other.data, (self, other), lambda g: (g, -g))

    def __rsub__(self, other):
        return lift(other) - self

    def __neg__(self):
        return record(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        other = lift(other)
        a, b = self.data, other.data
        return record(a * b, (self, other), lambda g: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = lift(other)
        a, b = self.data, other.data
        return record(a / b, (self, other), lambda g: (g / b, -g * a / (b * b)))

    def __matmul__(self, other):
        other = lift(other)
        a, b = self.data, other.data
        return record(a @ b, (self, other), lambda g: (g @ b.T, a.T @ g))

    def square(self):
        a = self.data
        return record(a * a, (self,), lambda g: (2.0 * a * g,))

    ##############
    # Reductions #
    ##############

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def backward_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return record(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward_fn)

    def mean(self):
        return self.sum() * (1.0 / max(self.size, 1))

    def logsumexp(self, axis: int = -1):
        x = self.data
        peak = np.max(x, axis=axis, keepdims=True)
        total = np.sum(np.exp(x - peak), axis=axis, keepdims=True)
        out = np.squeeze(peak + np.log(total), axis=axis)
        weights = np.exp(x - peak) / total
        return record(
            out, (self,), lambda g: (np.expand_dims(g, axis) * weights,)
        )

    ###########
    # Reshape #
    ###########

    def reshape(self, *shape):
        original = self.shape
        return record(
            self.data.reshape(*shape), (self,), lambda g: (g.reshape(original),)
        )

    def take(self, indices):
        """Gather rows along the first axis (repeats allowed)."""
        indices = np.asarray(indices, dtype=np.int64)
        shape = self.shape

        def backward_fn(g):
            full = np.zeros(shape)
            np.add.at(full, indices, g)
            return (full,)

        return record(self.data[indices], (self,), backward_fn)

    def pick(self, labels):
        """Select ``x[i, labels[i]]`` from an (N, C) tensor."""
        labels = np.asarray(labels, dtype=np.int64)
        rows = np.arange(labels.shape[0])
        shape = self.shape

        def backward_fn(g):
            full = np.zeros(shape)
            np.add.at(full, (rows, labels), g)
            return (full,)

        return record(self.data[rows, labels], (self,), backward_fn)

    ###############
    # Activations #
    ###############

    def relu(self):
        active = self.data > 0
        return record(self.data * active, (self,), lambda g: (g * active,))

    def exp(self):
        out = np.exp(self.data)
        return record(out, (self,), lambda g: (g * out,))

    def log(self, floor: float = 0.0):
        x = self.data
        live = x > floor
        safe = np.where(live, x, floor if floor > 0 else 1.0)
        out = np.log(np.maximum(x, floor)) if floor > 0 else np.log(x)
        return record(out, (self,), lambda g: (np.where(live, g / safe, 0.0),))

    def softmax(self, axis: int = -1):
        p = pullseg.numerics.softmax(self.data, axis=axis)
        return record(
            p,
            (self,),
            lambda g: (p * (g - np.sum(g * p, axis=axis, keepdims=True)),),
        )

    def normalize_rows(self):
        """Row-wise x / (‖x‖ + eps) over the last axis."""
        x = self.data
        norms = np.linalg.norm(x, axis=-1, keepdims=True)
        scale = norms + pullseg.numerics.NORM_EPS
        out = x / scale
        inv_norm = np.where(norms > 0, 1.0 / np.where(norms > 0, norms, 1.0), 0.0)

        def backward_fn(g):
            radial = np.sum(x * g, axis=-1, keepdims=True)
            return (g / scale - x * radial * inv_norm / (scale * scale),)

        return record(out, (self,), backward_fn)


def lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def record(data, parents: typing.Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Create an op output; constant inputs give a constant output."""
    if not any(p.requires_grad for p in parents):
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn)


def leaf(data, name: typing.Optional[str] = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


###############
# Combinators #
###############


def concat(tensors: typing.Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return record(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward_fn)


def stack(tensors: typing.Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [lift(t) for t in tensors]

    def backward_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return record(np.stack([t.data for t in tensors], axis=axis), tensors, backward_fn)


###########
# Spatial #
###########


@functools.lru_cache(maxsize=64)
def _patch_index(height, width, kernel, stride):
    out_h = (height - kernel) // stride + 1
    out_w = (width - kernel) // stride + 1
    rows = (np.arange(out_h) * stride)[:, None, None, None] + np.arange(kernel)[
        None, None, :, None
    ]
    cols = (np.arange(out_w) * stride)[None, :, None, None] + np.arange(kernel)[
        None, None, None, :
    ]
    rows = np.broadcast_to(rows, (out_h, out_w, kernel, kernel))
    cols = np.broadcast_to(cols, (out_h, out_w, kernel, kernel))
    return rows, cols, out_h, out_w


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    """Zero-padded convolution of an (H, W, Cin) map with (k, k, Cin, Cout) weights."""
    x, weight, bias = lift(x), lift(weight), lift(bias)
    kernel, _, c_in, c_out = weight.shape
    if x.shape[2] != c_in:
        raise errors.ShapeMismatch(f"conv expects {c_in} input channels, got {x.shape[2]}")
    padded = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
    rows, cols, out_h, out_w = _patch_index(padded.shape[0], padded.shape[1], kernel, stride)
    patches = padded[rows, cols].reshape(out_h * out_w, kernel * kernel * c_in)
    flat_w = weight.data.reshape(kernel * kernel * c_in, c_out)
    out = (patches @ flat_w + bias.data).reshape(out_h, out_w, c_out)

    def backward_fn(g):
        g2 = g.reshape(out_h * out_w, c_out)
        grad_w = (patches.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        grad_b = g2.sum(axis=0) if bias.requires_grad else None
        grad_x = None
        if x.requires_grad:
            grad_patches = (g2 @ flat_w.T).reshape(out_h, out_w, kernel, kernel, c_in)
            grad_padded = np.zeros_like(padded)
            np.add.at(grad_padded, (rows, cols), grad_patches)
            grad_x = grad_padded[pad : pad + x.shape[0], pad : pad + x.shape[1]]
        return grad_x, grad_w, grad_b

    return record(out, (x, weight, bias), backward_fn)


def resample(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Apply fixed linear maps along both spatial axes: rows @ x @ colsᵀ per channel."""
    x = lift(x)
    out = np.einsum("Hh,hwc,Ww->HWc", rows, x.data, cols)
    return record(
        out, (x,), lambda g: (np.einsum("Hh,HWc,Ww->hwc", rows, g, cols),)
    )
