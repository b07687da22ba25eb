"""Reverse-mode automatic differentiation on float64 numpy buffers.

Implements the small set of ops needed by the pose-regression networks:
elementwise arithmetic, matmul, conv2d, pooling, bilinear upsampling,
softmax, reductions, concatenation, a gradient reversal layer, soft-argmax
decoding, and an Adam optimizer. The graph is dynamic: every forward pass
rebuilds it from scratch, and ``backward`` walks it in reverse execution
order, accumulating gradients additively into every ``requires_grad`` leaf.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class NumericsError(ArithmeticError):
    """Raised when an op produces NaN or Inf values."""


class InvalidStateError(RuntimeError):
    """Raised when the optimizer is stepped without populated gradients."""


class Tensor:
    """Shape-tagged float64 array participating in a dynamic autodiff graph.

    Parents and per-op gradient closures are recorded at construction time
    whenever any input requires grad; ``backward`` replays them in reverse
    topological order.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad=False, _parents=(), _grad_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise NumericsError("tensor holds non-finite values")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents if self.requires_grad else ()
        self._grad_fn = _grad_fn if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _result(data, parents, grad_fn):
    requires = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires, _parents=tuple(parents), _grad_fn=grad_fn)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ops ---------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), grad_fn)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), grad_fn)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), grad_fn)


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0.0

    def grad_fn(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0.0), (x,), grad_fn)


def sigmoid(x):
    x = _as_tensor(x)
    out = 1.0 / (1.0 + np.exp(-x.data))

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), grad_fn)


def log(x):
    x = _as_tensor(x)

    def grad_fn(g):
        return (g / x.data,)

    return _result(np.log(x.data), (x,), grad_fn)


def exp(x):
    x = _as_tensor(x)
    out = np.exp(x.data)

    def grad_fn(g):
        return (g * out,)

    return _result(out, (x,), grad_fn)


# -- shape ops ---------------------------------------------------------------


def reshape(x, shape):
    x = _as_tensor(x)
    old = x.data.shape

    def grad_fn(g):
        return (g.reshape(old),)

    return _result(x.data.reshape(shape), (x,), grad_fn)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    return _result(out, tensors, grad_fn)


# -- reductions --------------------------------------------------------------


def sum_(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    shape = x.data.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), grad_fn)


def mean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    shape = x.data.shape
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[a] for a in axes]))

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy() / count,)

    return _result(x.data.mean(axis=axis, keepdims=keepdims), (x,), grad_fn)


def softmax(x, axis=-1):
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _result(out, (x,), grad_fn)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), grad_fn)


# -- spatial ops -------------------------------------------------------------


def conv2d(x, w, stride=1, pad=0):
    """2D convolution (cross-correlation): x (B,C,H,W), w (O,C,kh,kw)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4D input/kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch between input {x.shape} and kernel {w.shape}")
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    OH = (H + 2 * pad - kh) // stride + 1
    OW = (W + 2 * pad - kw) // stride + 1
    if OH < 1 or OW < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} too large for input {x.shape} with pad {pad}")
    # im2col + one GEMM forward; GEMM + col2im scatter backward
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(C * kh * kw, B * OH * OW)
    out = (w.data.reshape(O, -1) @ cols).reshape(O, B, OH, OW).transpose(1, 0, 2, 3)

    def grad_fn(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(O, -1)  # (O, B*OH*OW)
        dw = (gmat @ cols.T).reshape(w.data.shape)
        dcols = (w.data.reshape(O, -1).T @ gmat).reshape(C, kh, kw, B, OH, OW)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * OH:stride,
                    j:j + stride * OW:stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
        dx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
        return dx, dw

    return _result(out, (x, w), grad_fn)


def max_pool2d(x, kernel=2):
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d: need 4D input, got {x.shape}")
    B, C, H, W = x.shape
    k = kernel
    if H % k or W % k:
        raise ShapeError(f"max_pool2d: input {x.shape} not divisible by kernel {k}")
    win = x.data.reshape(B, C, H // k, k, W // k, k).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(B * C * (H // k) * (W // k), k * k)
    idx = win.argmax(axis=1)
    rows = np.arange(win.shape[0])
    out = win[rows, idx].reshape(B, C, H // k, W // k)

    def grad_fn(g):
        dwin = np.zeros_like(win)
        dwin[rows, idx] = g.ravel()
        dx = dwin.reshape(B, C, H // k, W // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return (dx.reshape(B, C, H, W),)

    return _result(out, (x,), grad_fn)


def _bilinear_matrix(out_n, in_n):
    """Row-stochastic (out_n, in_n) interpolation matrix, half-pixel centers."""
    M = np.zeros((out_n, in_n))
    if in_n == 1:
        M[:, 0] = 1.0
        return M
    src = (np.arange(out_n) + 0.5) * in_n / out_n - 0.5
    src = np.clip(src, 0.0, in_n - 1.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, in_n - 1)
    frac = src - lo
    M[np.arange(out_n), lo] += 1.0 - frac
    M[np.arange(out_n), hi] += frac
    return M


def upsample_bilinear(x, out_h, out_w):
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_bilinear: need 4D input, got {x.shape}")
    B, C, H, W = x.shape
    Mh = _bilinear_matrix(out_h, H)
    Mw = _bilinear_matrix(out_w, W)
    flat = x.data.reshape(B * C, H, W)
    out = (Mh @ flat @ Mw.T).reshape(B, C, out_h, out_w)

    def grad_fn(g):
        gf = g.reshape(B * C, out_h, out_w)
        return ((Mh.T @ gf @ Mw).reshape(B, C, H, W),)

    return _result(out, (x,), grad_fn)


# -- domain adaptation / decoding ---------------------------------------------


def grl(x, lam):
    """Gradient reversal: identity forward, gradient scaled by -lam backward."""
    x = _as_tensor(x)
    if lam < 0:
        raise ValueError(f"grl: lambda must be >= 0, got {lam}")

    def grad_fn(g):
        return (-lam * g,)

    return _result(x.data, (x,), grad_fn)


def soft_argmax(heatmap, beta=100.0):
    """Differentiable (u, v) decode of a single HxW heatmap.

    Returns a length-2 tensor [u, v] = expectation of the column/row grids
    under softmax(beta * heatmap). Always lies inside [0, W-1] x [0, H-1].
    """
    heatmap = _as_tensor(heatmap)
    if heatmap.data.ndim != 2:
        raise ShapeError(f"soft_argmax: need 2D heatmap, got {heatmap.shape}")
    if beta <= 0:
        raise ValueError(f"soft_argmax: beta must be > 0, got {beta}")
    H, W = heatmap.shape
    flat = reshape(mul(heatmap, _as_tensor(beta)), (H * W,))
    p = softmax(flat, axis=0)
    vv, uu = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64),
                         indexing="ij")
    u = sum_(mul(p, Tensor(uu.ravel())))
    v = sum_(mul(p, Tensor(vv.ravel())))
    return concat([reshape(u, (1,)), reshape(v, (1,))], axis=0)


# -- backward pass -------------------------------------------------------------


def _topo_order(root):
    """Tensors reachable from ``root`` through grad-requiring parents,
    in topological order (parents before children)."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss):
    """Propagate d(loss)/d(tensor) to every requires_grad tensor in the graph.

    Gradients accumulate additively into ``.grad`` across repeated calls.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward: loss must be a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not require grad")
    adjoint = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        if node._grad_fn is None:
            continue
        parent_grads = node._grad_fn(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            key = id(p)
            if key in adjoint:
                adjoint[key] = adjoint[key] + pg
            else:
                adjoint[key] = pg


def zero_grads(params):
    for p in params:
        p.grad = None


# -- optimizer -----------------------------------------------------------------


def adam_init(params):
    return {
        "step": 0,
        "m": [np.zeros_like(p.data) for p in params],
        "v": [np.zeros_like(p.data) for p in params],
    }


def adam_step(params, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place Adam update with bias correction."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise InvalidStateError(f"adam_step: parameter {i} has no gradient")
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p, m, v in zip(params, state["m"], state["v"]):
        m *= beta1
        m += (1.0 - beta1) * p.grad
        v *= beta2
        v += (1.0 - beta2) * p.grad * p.grad
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
