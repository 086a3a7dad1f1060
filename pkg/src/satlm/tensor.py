"""Dense float64 tensors with reverse-mode automatic differentiation.

Storage is a numpy array; every differentiable operation records its parents
and a closure mapping the output gradient to one gradient per parent.
Calling :meth:`Tensor.backward` on a scalar walks the recorded graph in
reverse topological order and accumulates gradients into the leaves.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ShapeError

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.array(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = _backward
        self.op = op

    # -- basic protocol -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._backward is None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    # -- operators ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a Python scalar is supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # -- autograd -------------------------------------------------------

    def backward(self):
        """Populate ``.grad`` of every reachable leaf with d(self)/d(leaf).

        Returns the number of graph nodes visited, which equals the number of
        distinct gradient-carrying nodes reachable from ``self``.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return 0
        order = _topological_order(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
        return len(order)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def graph_nodes(root):
    """Set of ids of gradient-carrying nodes reachable from ``root`` (recursive walk)."""
    found = set()

    def visit(node):
        if id(node) in found or not node.requires_grad:
            return
        found.add(id(node))
        for p in node._parents:
            visit(p)

    visit(root)
    return found


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data):
    return Tensor(data, requires_grad=True)


def _result(data, parents, backward, op):
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward, op)
    return Tensor(data, op=op)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise ------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def scale(x, c):
    c = float(c)

    def backward(g):
        return (g * c,)

    return _result(x.data * c, (x,), backward, "scale")


def sigmoid(x):
    x = as_tensor(x)
    # exp(-|x|) never overflows
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), backward, "sigmoid")


def relu(x):
    x = as_tensor(x)
    active = x.data > 0

    def backward(g):
        return (g * active,)

    return _result(np.where(active, x.data, 0.0), (x,), backward, "relu")


def exp(x):
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _result(out, (x,), backward, "exp")


def log(x):
    def backward(g):
        return (g / x.data,)

    return _result(np.log(x.data), (x,), backward, "log")


_ELEMENTWISE = {"sigmoid": sigmoid, "relu": relu, "add": add, "mul": mul, "scale": scale}


def elementwise(x, f, other=None):
    """Dispatch by name to one of sigmoid, relu, add, mul, scale."""
    try:
        fn = _ELEMENTWISE[f]
    except KeyError:
        raise ConfigError(f"unknown elementwise function {f!r}") from None
    if f in ("sigmoid", "relu"):
        return fn(x)
    return fn(x, other)


# -- reductions and reshaping ---------------------------------------------


def tsum(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), backward, "sum")


def tmean(x, axis=None, keepdims=False):
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape):
    shape = tuple(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _result(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(x.data, axes).copy(), (x,), backward, "transpose")


def take(x, indices, axis=0):
    """Gather slices of ``x`` along ``axis``; repeated indices accumulate on backward."""
    indices = np.asarray(indices, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0) if indices.ndim == 1 else g)
        return (full,)

    if indices.ndim != 1 and axis != 0:
        raise ShapeError("multi-dimensional indices only supported along axis 0")
    return _result(np.take(x.data, indices, axis=axis), (x,), backward, "take")


def pick(x, indices):
    """Select ``x[r, indices[r]]`` for each row ``r`` of a 2-D tensor."""
    rows = np.arange(x.shape[0])
    indices = np.asarray(indices, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, indices), g)
        return (full,)

    return _result(x.data[rows, indices], (x,), backward, "pick")


# -- linear algebra -------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def softmax_lastdim(x):
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty last dimension")
    if np.isnan(x.data).any():
        raise NumericError("softmax input contains NaN")
    z = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), backward, "softmax")


def log_softmax_lastdim(x):
    if np.isnan(x.data).any():
        raise NumericError("log-softmax input contains NaN")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must match last extent of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    width = x.shape[-1]

    def backward(g):
        gx_hat = g * gain.data
        gx = inv / width * (
            width * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        lead = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gain.data + bias.data, (x, gain, bias), backward, "layer_norm")


def conv1d(x, kernel, bias=None):
    """Same-padded cross-correlation along the token axis.

    ``x`` is ``[..., n, d_in]`` and ``kernel`` is ``[k, d_in, d_out]`` with odd
    ``k``; positions outside the sequence read as zeros.
    """
    width = kernel.shape[0]
    if width % 2 == 0:
        raise ConfigError(f"conv1d kernel width must be odd, got {width}")
    if kernel.ndim != 3 or kernel.shape[1] != x.shape[-1]:
        raise ShapeError(f"conv1d: kernel {kernel.shape} does not fit input {x.shape}")
    n, pad = x.shape[-2], width // 2
    pad_spec = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x.data, pad_spec)
    out = sum(np.matmul(xp[..., t : t + n, :], kernel.data[t]) for t in range(width))
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kernel.data)
        lead = tuple(range(x.ndim - 2))
        for t in range(width):
            window = xp[..., t : t + n, :]
            gxp[..., t : t + n, :] += np.matmul(g, kernel.data[t].T)
            gk[t] = np.matmul(np.swapaxes(window, -1, -2), g).sum(axis=lead)
        grads = [gxp[..., pad : pad + n, :], gk]
        if bias is not None:
            grads.append(g.sum(axis=tuple(range(g.ndim - 1))))
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, backward, "conv1d")


# -- finite differences ---------------------------------------------------


def numerical_gradient(fn, tensor, h=1e-3):
    """Central-difference estimate of d fn() / d tensor, perturbing in place."""
    grad = np.zeros_like(tensor.data)
    flat, gflat = tensor.data.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(fn().data)
        flat[i] = orig - h
        lo = float(fn().data)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * h)
    return grad


def relative_error(analytic, numeric):
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def check_gradients(fn, tensors, h=1e-3):
    """Compare backprop against central differences for every tensor in ``tensors``.

    ``fn`` must rebuild the graph from the current tensor values on each call
    and return a scalar Tensor.  Returns ``{index: relative_error}``.
    """
    for t in tensors:
        t.grad = None
    fn().backward()
    errors = {}
    for i, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        errors[i] = relative_error(analytic, numerical_gradient(fn, t, h))
    return errors
