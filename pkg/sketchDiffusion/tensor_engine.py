import contextlib
import logging
import struct
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .utilities import DataError, NumericError, UsageError, rng_stream

"""
A minimal dense-tensor core with reverse-mode automatic differentiation. Every network of the package
(stroke autoencoder, denoiser, perceptual and feature networks) is built from the primitives below.

Tensors hold float-64 numpy arrays. Each primitive is a Function with a forward pass on arrays and a
backward pass returning one gradient per parent. Operations may run inside a ComputationGraph, which records
the op nodes in creation (hence topological) order, or standalone, in which case Tensor.backward sorts the
graph from the output.
"""

logger = logging.getLogger(__name__)

_state = threading.local()

MAGIC = b"SKDTENS\x00"
FORMAT_VERSION = 1


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


def _active_graph():
    return getattr(_state, "graph", None)


@contextlib.contextmanager
def no_grad():
    """
    Within this context no operation records parents, so inference does not keep intermediates alive.
    """
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """
    An immutable float-64 array with an optional gradient slot.

    Parameters
    ----------
    data: array_like
        the values
    requires_grad: boolean
        whether gradients should be accumulated for this tensor
    name: string
        optional name, used for parameters
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad = False, name = None, _ctx = None):
        self.data = np.array(data, dtype = np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad = None
        self._ctx = _ctx

    def __repr__(self):
        label = "" if self.name is None else " " + self.name
        return "<Tensor{} shape={} requires_grad={}>".format(label, self.shape, self.requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def values(self):
        """Flat row-major copy of the values."""
        return self.data.ravel().copy()

    def numpy(self):
        return self.data.copy()

    def item(self):
        if self.data.size != 1:
            raise ShapeError("item() needs a single-value tensor, got shape {}".format(self.shape))
        return float(self.data.reshape(-1)[0])

    def __len__(self):
        return self.shape[0]

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
        return Neg.apply(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return Pow.apply(self, exponent = float(exponent))

    def __getitem__(self, index):
        return Slice.apply(self, index = index)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis = None, keepdims = False):
        return reduce_sum(self, axis = axis, keepdims = keepdims)

    def mean(self, axis = None, keepdims = False):
        return reduce_mean(self, axis = axis, keepdims = keepdims)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def backward(self, grad = None):
        """
        It propagates gradients from this tensor to every leaf with requires_grad, sorting the graph topologically.

        Parameters
        ----------
        grad: array_like
            upstream gradient; ones for scalar outputs when None
        """
        if grad is None:
            if self.size != 1:
                raise GraphError("backward on a non-scalar tensor of shape {} needs an explicit gradient".format(self.shape))
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        _propagate(order, self, np.asarray(grad, dtype = np.float64))


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis = 0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis = axis, keepdims = True)
    return grad.reshape(shape)


def _topological_order(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited or node._ctx is None:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._ctx.parents:
            if parent._ctx is not None and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _propagate(order, root, grad):
    grads = {id(root): grad}
    leaves = {}
    for node in reversed(order):
        upstream = grads.pop(id(node), None)
        if upstream is None:
            continue
        parent_grads = node._ctx.backward(upstream)
        for parent, parent_grad in zip(node._ctx.parents, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            parent_grad = _unbroadcast(np.asarray(parent_grad, dtype = np.float64), parent.shape)
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad
            if parent._ctx is None:
                leaves[key] = parent
    if root._ctx is None and root.requires_grad:
        leaves[id(root)] = root
    for key, leaf in leaves.items():
        leaf.grad = grads.get(key, np.zeros_like(leaf.data))
    return grads


## Primitive operations ###############

class Function:
    """
    Base class of every primitive. Subclasses implement forward on arrays and backward returning
    one gradient (or None) per parent.
    """

    def __init__(self, *parents, **attributes):
        self.parents = parents
        for key, value in attributes.items():
            setattr(self, key, value)

    @classmethod
    def apply(cls, *inputs, **attributes):
        tensors = [as_tensor(x) for x in inputs]
        fn = cls(*tensors, **attributes)
        graph = _active_graph()
        label = "{}:{}".format(len(graph.nodes) if graph is not None else "-", cls.__name__)
        try:
            out = fn.forward(*[t.data for t in tensors])
        except (ValueError, IndexError) as error:
            shapes = ", ".join(str(t.shape) for t in tensors)
            raise ShapeError("node {} rejected input shapes ({}): {}".format(label, shapes, error)) from None
        out = np.asarray(out, dtype = np.float64)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError("node {} produced non-finite values".format(label))
        requires_grad = _grad_enabled() and any(t.requires_grad for t in tensors)
        result = Tensor(out, requires_grad = requires_grad, _ctx = fn if requires_grad else None)
        if graph is not None:
            graph.record(cls.__name__, tensors, result)
        return result

    def forward(self, *arrays):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class Add(Function):
    def forward(self, x, y):
        return x + y

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    def forward(self, x, y):
        return x - y

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return grad * self.y, grad * self.x


class Div(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x / y

    def backward(self, grad):
        return grad / self.y, -grad * self.x / (self.y * self.y)


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class Pow(Function):
    def forward(self, x):
        self.x = x
        return x ** self.exponent

    def backward(self, grad):
        return (grad * self.exponent * self.x ** (self.exponent - 1.0),)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError("matmul operands must be at least 2-D")
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        return np.matmul(grad, np.swapaxes(self.b, -1, -2)), np.matmul(np.swapaxes(self.a, -1, -2), grad)


class BiasAdd(Function):
    """x + b where b broadcasts over every axis but the last."""

    def forward(self, x, b):
        if b.ndim != 1 or x.shape[-1] != b.shape[0]:
            raise ValueError("bias of shape {} does not match last axis of {}".format(b.shape, x.shape))
        return x + b

    def backward(self, grad):
        return grad, grad.reshape(-1, grad.shape[-1]).sum(axis = 0)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


class Sigmoid(Function):
    def forward(self, x):
        self.out = 0.5 * (1.0 + np.tanh(0.5 * x))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Softplus(Function):
    def forward(self, x):
        self.x = x
        return np.logaddexp(0.0, x)

    def backward(self, grad):
        return (grad * 0.5 * (1.0 + np.tanh(0.5 * self.x)),)


class Softmax(Function):
    def forward(self, x):
        shifted = x - x.max(axis = self.axis, keepdims = True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis = self.axis, keepdims = True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - (grad * y).sum(axis = self.axis, keepdims = True)),)


class LayerNormalize(Function):
    """Normalization over the last axis, without affine parameters."""

    def forward(self, x):
        mu = x.mean(axis = -1, keepdims = True)
        centered = x - mu
        var = (centered * centered).mean(axis = -1, keepdims = True)
        self.inv_std = 1.0 / np.sqrt(var + self.eps)
        self.xhat = centered * self.inv_std
        return self.xhat

    def backward(self, grad):
        g_mean = grad.mean(axis = -1, keepdims = True)
        gx_mean = (grad * self.xhat).mean(axis = -1, keepdims = True)
        return (self.inv_std * (grad - g_mean - self.xhat * gx_mean),)


class Norm(Function):
    """Euclidean norm over one axis; the subgradient at zero is zero."""

    def forward(self, x):
        self.x = x
        self.out = np.sqrt((x * x).sum(axis = self.axis))
        return self.out

    def backward(self, grad):
        n = np.expand_dims(self.out, self.axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, self.x / safe, 0.0) * np.expand_dims(grad, self.axis),)


class Sum(Function):
    def forward(self, x):
        self.shape = x.shape
        return x.sum(axis = self.axis, keepdims = self.keepdims)

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    def forward(self, x):
        self.shape = x.shape
        out = x.mean(axis = self.axis, keepdims = self.keepdims)
        self.count = x.size / max(np.size(out), 1)
        return out

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape) / self.count,)


class Reshape(Function):
    def forward(self, x):
        self.in_shape = x.shape
        return x.reshape(self.new_shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Transpose(Function):
    def forward(self, x):
        return np.transpose(x, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Slice(Function):
    def forward(self, x):
        self.shape = x.shape
        return np.array(x[self.index])

    def backward(self, grad):
        out = np.zeros(self.shape)
        index = self.index if isinstance(self.index, tuple) else (self.index,)
        if all(i is Ellipsis or isinstance(i, (int, np.integer, slice)) for i in index):
            out[self.index] = grad
        else:
            np.add.at(out, self.index, grad)
        return (out,)


class Concat(Function):
    def forward(self, *arrays):
        self.sizes = [a.shape[self.axis] for a in arrays]
        return np.concatenate(arrays, axis = self.axis)

    def backward(self, grad):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, cuts, axis = self.axis))


class GlobalAvgPool(Function):
    """Mean over the two trailing (spatial) axes: (B, C, H, W) -> (B, C)."""

    def forward(self, x):
        self.shape = x.shape
        return x.mean(axis = (-2, -1))

    def backward(self, grad):
        h, w = self.shape[-2:]
        return (np.broadcast_to(grad[..., None, None], self.shape) / (h * w),)


class AttentionPool(Function):
    """
    Attention-weighted pooling of x (..., N, D) with one query q (D,): softmax over N of x.q / sqrt(D),
    then the weighted sum of the N rows.
    """

    def forward(self, x, q):
        if q.ndim != 1 or x.shape[-1] != q.shape[0]:
            raise ValueError("query of shape {} does not match rows of {}".format(q.shape, x.shape))
        self.x, self.q = x, q
        self.scale = 1.0 / np.sqrt(q.shape[0])
        scores = (x @ q) * self.scale
        scores = scores - scores.max(axis = -1, keepdims = True)
        e = np.exp(scores)
        self.weights = e / e.sum(axis = -1, keepdims = True)
        return (self.weights[..., None] * x).sum(axis = -2)

    def backward(self, grad):
        a = self.weights
        dx = a[..., None] * grad[..., None, :]
        da = (self.x * grad[..., None, :]).sum(axis = -1)
        ds = a * (da - (a * da).sum(axis = -1, keepdims = True))
        dx = dx + ds[..., None] * self.q * self.scale
        dq = (ds[..., None] * self.x).reshape(-1, self.q.shape[0]).sum(axis = 0) * self.scale
        return dx, dq


class GaussianSample(Function):
    """Reparameterized draw mean + exp(0.5 * log_variance) * noise; the noise is a constant."""

    def forward(self, mean, log_variance):
        if self.noise.shape != mean.shape:
            raise ValueError("noise of shape {} does not match mean of shape {}".format(self.noise.shape, mean.shape))
        self.std = np.exp(0.5 * log_variance)
        return mean + self.std * self.noise

    def backward(self, grad):
        return grad, grad * self.noise * 0.5 * self.std


def _im2col(xp, k, stride, ho, wo):
    windows = sliding_window_view(xp, (k, k), axis = (2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return windows.transpose(0, 2, 3, 1, 4, 5)


def _col2im(cols, padded_shape, k, stride, ho, wo):
    out = np.zeros(padded_shape)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


class Conv2d(Function):
    """x (B, C, H, W) convolved with w (O, C, k, k)."""

    def forward(self, x, w):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ValueError("conv2d expects x (B,C,H,W) and w (O,C,k,k) with matching C")
        b, c, h, wd = x.shape
        o, _, k, _ = w.shape
        p, s = self.padding, self.stride
        ho, wo = (h + 2 * p - k) // s + 1, (wd + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ValueError("input {}x{} too small for kernel {}".format(h, wd, k))
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        self.x_shape, self.xp_shape, self.w = x.shape, xp.shape, w
        self.out_hw = (ho, wo)
        self.cols = np.ascontiguousarray(_im2col(xp, k, s, ho, wo)).reshape(b * ho * wo, c * k * k)
        out = self.cols @ w.reshape(o, -1).T
        return out.reshape(b, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(self, grad):
        b, c, h, wd = self.x_shape
        o, _, k, _ = self.w.shape
        ho, wo = self.out_hw
        p = self.padding
        g = grad.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (g.T @ self.cols).reshape(self.w.shape)
        dcols = (g @ self.w.reshape(o, -1)).reshape(b, ho, wo, c, k, k)
        dxp = _col2im(dcols, self.xp_shape, k, self.stride, ho, wo)
        return dxp[:, :, p:p + h, p:p + wd], dw


class ConvTranspose2d(Function):
    """
    x (B, Cin, H, W) with w (Cin, Cout, k, k); the adjoint of Conv2d with respect to its input,
    output size (H - 1) * stride - 2 * padding + k.
    """

    def forward(self, x, w):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
            raise ValueError("conv_transpose2d expects x (B,Cin,H,W) and w (Cin,Cout,k,k) with matching Cin")
        b, cin, h, wd = x.shape
        _, cout, k, _ = w.shape
        p, s = self.padding, self.stride
        hp, wp = (h - 1) * s + k, (wd - 1) * s + k
        if hp - 2 * p < 1 or wp - 2 * p < 1:
            raise ValueError("padding {} too large for output {}x{}".format(p, hp, wp))
        self.xt = x.transpose(0, 2, 3, 1).reshape(-1, cin)
        self.x_shape, self.w = x.shape, w
        cols = (self.xt @ w.reshape(cin, -1)).reshape(b, h, wd, cout, k, k)
        out = _col2im(cols, (b, cout, hp, wp), k, s, h, wd)
        return out[:, :, p:hp - p, p:wp - p]

    def backward(self, grad):
        b, cin, h, wd = self.x_shape
        _, cout, k, _ = self.w.shape
        p = self.padding
        gp = np.pad(grad, ((0, 0), (0, 0), (p, p), (p, p)))
        gcols = np.ascontiguousarray(_im2col(gp, k, self.stride, h, wd)).reshape(b * h * wd, cout * k * k)
        dx = (gcols @ self.w.reshape(cin, -1).T).reshape(b, h, wd, cin).transpose(0, 3, 1, 2)
        dw = (self.xt.T @ gcols).reshape(self.w.shape)
        return dx, dw


## Functional interface ###############

def add(x, y):
    return Add.apply(x, y)


def sub(x, y):
    return Sub.apply(x, y)


def mul(x, y):
    return Mul.apply(x, y)


def div(x, y):
    return Div.apply(x, y)


def matmul(a, b):
    return MatMul.apply(a, b)


def bias_add(x, b):
    return BiasAdd.apply(x, b)


def exp(x):
    return Exp.apply(x)


def log(x):
    return Log.apply(x)


def relu(x):
    return ReLU.apply(x)


def sigmoid(x):
    return Sigmoid.apply(x)


def softplus(x):
    return Softplus.apply(x)


def softmax(x, axis = -1):
    return Softmax.apply(x, axis = axis)


def layer_norm(x, eps = 1e-12):
    return LayerNormalize.apply(x, eps = eps)


def norm(x, axis = -1):
    return Norm.apply(x, axis = axis)


def reduce_sum(x, axis = None, keepdims = False):
    return Sum.apply(x, axis = axis, keepdims = keepdims)


def reduce_mean(x, axis = None, keepdims = False):
    return Mean.apply(x, axis = axis, keepdims = keepdims)


def reshape(x, shape):
    return Reshape.apply(x, new_shape = tuple(shape))


def transpose(x, axes):
    return Transpose.apply(x, axes = tuple(axes))


def concat(tensors, axis = -1):
    return Concat.apply(*tensors, axis = axis)


def conv2d(x, w, stride = 2, padding = 1):
    return Conv2d.apply(x, w, stride = stride, padding = padding)


def conv_transpose2d(x, w, stride = 2, padding = 1):
    return ConvTranspose2d.apply(x, w, stride = stride, padding = padding)


def global_avg_pool(x):
    return GlobalAvgPool.apply(x)


def attention_pool(x, query):
    return AttentionPool.apply(x, query)


def gaussian_sample(mean, log_variance, noise):
    return GaussianSample.apply(mean, log_variance, noise = np.asarray(noise, dtype = np.float64))


## Computation graphs ###############

class Node:
    """One recorded op: its index, kind, the ids of its inputs and its output tensor."""

    __slots__ = ("index", "kind", "inputs", "output")

    def __init__(self, index, kind, inputs, output):
        self.index, self.kind, self.inputs, self.output = index, kind, inputs, output

    def __repr__(self):
        return "<Node {}:{} shape={}>".format(self.index, self.kind, self.output.shape)


class ComputationGraph:
    """
    A named set of parameter leaves plus a builder function. forward() runs the builder while recording
    every op node; backward() walks the recorded nodes in reverse.

    Parameters
    ----------
    builder: callable
        builder(parameters, inputs) -> Tensor or dict of Tensors
    parameters: dict
        name -> Tensor leaves
    signature: dict
        optional name -> shape of the expected inputs (None entries match any size)
    name: string
        graph name used in error messages
    """

    def __init__(self, builder, parameters, signature = None, name = "graph"):
        self.builder = builder
        self.parameters = dict(parameters)
        self.signature = signature
        self.name = name
        self.nodes = []
        self.inputs = None
        self.outputs = None

    def record(self, kind, inputs, output):
        self.nodes.append(Node(len(self.nodes), kind, tuple(id(t) for t in inputs), output))

    def check_inputs(self, inputs):
        if self.signature is None:
            return
        missing = set(self.signature) - set(inputs)
        extra = set(inputs) - set(self.signature)
        if missing or extra:
            raise ShapeError("graph {}: inputs {} missing, {} unexpected".format(self.name, sorted(missing), sorted(extra)))
        for key, shape in self.signature.items():
            actual = inputs[key].shape
            if len(actual) != len(shape) or any(e is not None and e != a for e, a in zip(shape, actual)):
                raise ShapeError("graph {}: input {} has shape {}, expected {}".format(self.name, key, actual, shape))


def forward(graph, inputs = None):
    """
    It runs the graph's builder on named inputs, recording every node.

    Parameters
    ----------
    graph: ComputationGraph
        the graph
    inputs: dict
        name -> Tensor or array

    Returns
    -------
    outputs: dict
        name -> Tensor; a single-tensor builder output is returned under "output"
    """
    inputs = {key: as_tensor(value) for key, value in (inputs or {}).items()}
    graph.check_inputs(inputs)
    graph.nodes = []
    previous = _active_graph()
    _state.graph = graph
    try:
        outputs = graph.builder(graph.parameters, inputs)
    finally:
        _state.graph = previous
    if isinstance(outputs, Tensor):
        outputs = {"output": outputs}
    graph.inputs, graph.outputs = inputs, outputs
    return outputs


def backward(graph, output_gradient = None, output = "output"):
    """
    It propagates an output gradient back through the recorded nodes of the graph.

    Parameters
    ----------
    graph: ComputationGraph
        a graph on which forward has run
    output_gradient: Tensor or array
        upstream gradient; ones for a scalar output when None
    output: string
        which named output to differentiate

    Returns
    -------
    gradients: dict
        parameter name (and name of every input with requires_grad) -> gradient Tensor
    """
    if graph.outputs is None:
        raise GraphError("backward called on graph {} before forward".format(graph.name))
    if output not in graph.outputs:
        raise GraphError("graph {} has no output named {}".format(graph.name, output))
    root = graph.outputs[output]
    if output_gradient is None:
        if root.size != 1:
            raise GraphError("output {} is not scalar; pass output_gradient".format(output))
        grad = np.ones_like(root.data)
    else:
        grad = np.asarray(as_tensor(output_gradient).data, dtype = np.float64)
        if grad.shape != root.shape:
            raise ShapeError("output gradient shape {} does not match output {}".format(grad.shape, root.shape))
    order = [node.output for node in graph.nodes if node.output._ctx is not None]
    grads = _propagate(order, root, grad) if root._ctx is not None else {id(root): grad}
    leaves = dict(graph.parameters)
    leaves.update({key: value for key, value in graph.inputs.items() if value.requires_grad})
    return {key: Tensor(grads.get(id(t), np.zeros_like(t.data))) for key, t in leaves.items() if t.requires_grad}


class FiniteDifferenceReport:
    """Per-tensor maximum relative gradient error |g_ad - g_fd| / (|g_fd| + atol)."""

    def __init__(self, errors, checked):
        self.errors = errors
        self.checked = checked

    @property
    def max_relative_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    def __repr__(self):
        return "<FiniteDifferenceReport max={:.3e} over {} tensors>".format(self.max_relative_error, len(self.errors))


def finite_difference_check(graph, point = None, eps = 1e-5, n_samples = None, seed = 0, atol = 1e-8):
    """
    It compares automatic gradients with central finite differences.

    Parameters
    ----------
    graph: ComputationGraph
        a graph with a scalar output named "output"
    point: dict
        the inputs at which gradients are compared
    eps: float
        the central-difference step
    n_samples: int
        when given, at most this many entries per tensor are checked, chosen by a seeded stream
    seed: int
        seed of the entry sampling
    atol: float
        the absolute floor of the relative-error denominator

    Returns
    -------
    report: FiniteDifferenceReport
        per-tensor maximum relative error
    """
    outputs = forward(graph, point)
    if outputs["output"].size != 1:
        raise GraphError("finite_difference_check needs a scalar output, got shape {}".format(outputs["output"].shape))
    analytic = backward(graph)
    targets = dict(graph.parameters)
    targets.update({key: value for key, value in graph.inputs.items() if value.requires_grad})
    errors, checked = {}, {}
    for key, tensor in targets.items():
        if key not in analytic:
            continue
        flat = tensor.data.reshape(-1)
        g_ad = analytic[key].data.reshape(-1)
        indices = np.arange(flat.size)
        if n_samples is not None and flat.size > n_samples:
            indices = np.sort(rng_stream(seed, "fd", key).choice(flat.size, size = n_samples, replace = False))
        worst = 0.0
        for index in indices:
            original = flat[index]
            # the harness perturbs leaf values between forward passes and restores them
            flat[index] = original + eps
            plus = forward(graph, graph.inputs)["output"].item()
            flat[index] = original - eps
            minus = forward(graph, graph.inputs)["output"].item()
            flat[index] = original
            g_fd = (plus - minus) / (2.0 * eps)
            worst = max(worst, abs(g_ad[index] - g_fd) / (abs(g_fd) + atol))
        errors[key], checked[key] = worst, len(indices)
    forward(graph, graph.inputs)
    return FiniteDifferenceReport(errors, checked)


## Checkpoint container ###############

def save_container(path, entries, header = ""):
    """
    It writes named arrays into the versioned container: magic string, u32 format version, u32 header length
    and UTF-8 key=value header text, u32 entry count, then per entry the name length, UTF-8 name, u32 rank,
    u32 dims and the little-endian float-64 payload.

    Parameters
    ----------
    path: string or file-like
        destination
    entries: dict
        name -> numpy array
    header: string
        key=value lines echoed into the file
    """
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    header_bytes = header.encode("utf-8")
    chunks += [struct.pack("<I", len(header_bytes)), header_bytes, struct.pack("<I", len(entries))]
    for name, array in entries.items():
        array = np.asarray(array, dtype = "<f8")
        name_bytes = name.encode("utf-8")
        chunks += [struct.pack("<I", len(name_bytes)), name_bytes, struct.pack("<I", array.ndim)]
        chunks += [struct.pack("<{}I".format(array.ndim), *array.shape), np.ascontiguousarray(array).tobytes()]
    payload = b"".join(chunks)
    if hasattr(path, "write"):
        path.write(payload)
    else:
        with open(path, "wb") as handle:
            handle.write(payload)


def load_container(path):
    """
    It reads a container written by save_container.

    Parameters
    ----------
    path: string or file-like
        source

    Returns
    -------
    entries, header: tuple
        name -> numpy array (insertion order preserved) and the header text
    """
    if hasattr(path, "read"):
        payload = path.read()
    else:
        try:
            with open(path, "rb") as handle:
                payload = handle.read()
        except FileNotFoundError:
            raise CheckpointError("artifact {} does not exist".format(path)) from None
    if payload[:len(MAGIC)] != MAGIC:
        raise CheckpointError("{} is not a tensor container".format(path))
    offset = len(MAGIC)

    def take(fmt):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(payload):
            raise CheckpointError("{} is truncated".format(path))
        values = struct.unpack_from(fmt, payload, offset)
        offset += size
        return values

    (version,) = take("<I")
    if version != FORMAT_VERSION:
        raise FormatVersionError("{} has container version {}, expected {}".format(path, version, FORMAT_VERSION))
    (header_length,) = take("<I")
    header = payload[offset:offset + header_length].decode("utf-8")
    offset += header_length
    (count,) = take("<I")
    entries = {}
    for _ in range(count):
        (name_length,) = take("<I")
        name = payload[offset:offset + name_length].decode("utf-8")
        offset += name_length
        (rank,) = take("<I")
        dims = take("<{}I".format(rank)) if rank else ()
        n_values = int(np.prod(dims)) if rank else 1
        if offset + 8 * n_values > len(payload):
            raise CheckpointError("{} is truncated in entry {}".format(path, name))
        entries[name] = np.frombuffer(payload, dtype = "<f8", count = n_values, offset = offset).reshape(dims).astype(np.float64)
        offset += 8 * n_values
    return entries, header


class GraphError(UsageError):
    """Raised when a graph is differentiated before forward or on a non-scalar output without gradient"""
class ShapeError(NumericError):
    """Raised when operand shapes do not match"""
class NonFiniteError(NumericError):
    """Raised when an op produces NaN or Inf"""
class CheckpointError(DataError):
    """Raised when a container file is missing or malformed"""
class FormatVersionError(DataError):
    """Raised when an artifact has an unexpected format version"""
