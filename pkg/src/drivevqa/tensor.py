"""Minimal reverse-mode autodiff on numpy arrays.

Tensors hold float arrays (float32 for training, float64 for gradient
checking); integer data such as token ids stays in plain numpy arrays.
Every op that participates in a graph registers a backward closure; calling
``backward()`` on a scalar runs the tape in reverse topological order.

Mutation rules: batch-norm running statistics and dropout RNG state are the
only mutable pieces of layer state, and they live outside Tensor. Tensor
data is never mutated by ops (optimizers update ``.data`` in place between
graph builds, which is safe because graphs are not retained across steps).
"""

import numpy as np


class ShapeError(ValueError):
    """Contract violation on an array shape; message names the offending axis."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf surfaced where finite values are required."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph construction (eval/inference path)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        """The raw array (shared storage, not a copy)."""
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- graph plumbing ------------------------------------------------
    def _accumulate(self, g):
        # copy on first write: g may alias another node's grad or a view
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def _accumulate_owned(self, g):
        """Accumulate a gradient array the caller guarantees is freshly
        allocated and unaliased (hot-path variant that skips the copy)."""
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Reverse-mode sweep from this tensor.

        ``grad`` defaults to ones (the usual scalar-loss case is seeding a
        0-d tensor with 1.0).
        """
        if grad is None:
            grad = np.ones_like(self.data)
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            # free intermediate grads and closures so big activations die early
            if node is not self and not node.requires_grad:
                node.grad = None

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, pow_scalar(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __getitem__(self, key):
        return tslice(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def astensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float32))


def _node(data, parents, backward):
    """Wrap ``data`` as a graph node when grad is on and a parent needs it."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
        # mark so downstream nodes keep linking even through non-leaf tensors
        out.requires_grad = False
    return out


def _needs_grad(t):
    return t.requires_grad or t._parents


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def assert_finite(arr, what="tensor"):
    """Raise NonFiniteError if ``arr`` holds NaN or Inf."""
    a = arr.data if isinstance(arr, Tensor) else arr
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{what} contains NaN or Inf")


# -- elementary ops ------------------------------------------------------

def add(a, b):
    a, b = astensor(a), astensor(b)
    out_data = a.data + b.data

    def backward(g):
        if _needs_grad(a):
            a._accumulate(_unbroadcast(g, a.data.shape))
        if _needs_grad(b):
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), backward)


def mul(a, b):
    a, b = astensor(a), astensor(b)
    out_data = a.data * b.data

    def backward(g):
        if _needs_grad(a):
            a._accumulate_owned(_unbroadcast(g * b.data, a.data.shape))
        if _needs_grad(b):
            b._accumulate_owned(_unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), backward)


def pow_scalar(a, p):
    a = astensor(a)
    out_data = a.data ** p

    def backward(g):
        if _needs_grad(a):
            a._accumulate_owned(g * p * a.data ** (p - 1.0))

    return _node(out_data, (a,), backward)


def texp(a):
    a = astensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        if _needs_grad(a):
            a._accumulate_owned(g * out_data)

    return _node(out_data, (a,), backward)


def tlog(a):
    a = astensor(a)
    out_data = np.log(a.data)

    def backward(g):
        if _needs_grad(a):
            a._accumulate_owned(g / a.data)

    return _node(out_data, (a,), backward)


def tsqrt(a):
    a = astensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        if _needs_grad(a):
            a._accumulate_owned(g * 0.5 / out_data)

    return _node(out_data, (a,), backward)


def matmul(a, b):
    """Matrix product with numpy broadcasting over leading batch axes."""
    a, b = astensor(a), astensor(b)
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if _needs_grad(a):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate_owned(_unbroadcast(ga, a.data.shape))
        if _needs_grad(b):
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate_owned(_unbroadcast(gb, b.data.shape))

    return _node(out_data, (a, b), backward)


def tsum(a, axis=None, keepdims=False):
    a = astensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not _needs_grad(a):
            return
        if axis is None:
            a._accumulate_owned(np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate_owned(np.broadcast_to(g, a.data.shape).copy())

    return _node(out_data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = astensor(a)
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def _axis_slice(ndim, axis, k):
    idx = [slice(None)] * ndim
    idx[axis] = slice(k, k + 1)
    return tuple(idx)


def tmax(a, axis, keepdims=False):
    """Max-reduce along one axis; gradient routes to the first argmax."""
    a = astensor(a)
    n = a.data.shape[axis]
    if n <= 16:
        # short axis: plain max forward, equality scans in axis order for the
        # backward routing (no argmax pass, no index buffers)
        kept = a.data.max(axis=axis, keepdims=True)
        out_data = kept if keepdims else np.squeeze(kept, axis=axis)

        def backward_scan(g):
            if not _needs_grad(a):
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            ga = np.zeros_like(a.data)
            taken = None
            routed = np.empty(kept.shape, dtype=a.data.dtype)
            for k in range(n):
                sl = _axis_slice(a.data.ndim, axis, k)
                sel = a.data[sl] == kept
                if taken is None:
                    taken = sel
                else:
                    sel &= ~taken
                    if k < n - 1:
                        taken |= sel
                np.multiply(g, sel, out=routed)
                ga[sl] += routed
            a._accumulate_owned(ga)

        return _node(out_data, (a,), backward_scan)

    idx = np.argmax(a.data, axis=axis)
    out_data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out_data = np.squeeze(out_data, axis=axis)

    def backward(g):
        if not _needs_grad(a):
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), g, axis=axis)
        a._accumulate_owned(ga)

    return _node(out_data, (a,), backward)


def reshape(a, shape):
    a = astensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        if _needs_grad(a):
            a._accumulate(g.reshape(a.data.shape))

    return _node(out_data, (a,), backward)


def transpose(a, axes):
    a = astensor(a)
    axes = tuple(axes)
    out_data = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        if _needs_grad(a):
            a._accumulate_owned(np.ascontiguousarray(np.transpose(g, inv)))

    return _node(out_data, (a,), backward)


def concat(tensors, axis=0):
    tensors = [astensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if _needs_grad(t):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate_owned(np.ascontiguousarray(g[tuple(sl)]))

    return _node(out_data, tuple(tensors), backward)


def tslice(a, key):
    """Basic (slice/int) indexing as a graph op."""
    a = astensor(a)
    out_data = a.data[key]

    def backward(g):
        if _needs_grad(a):
            ga = np.zeros_like(a.data)
            ga[key] = g
            a._accumulate_owned(ga)

    return _node(out_data, (a,), backward)


def gather_rows(a, idx):
    """out[b, k, :] = a[b, idx[b, k], :] for a of shape (B, L, D).

    Backward scatter-adds, so repeated indices accumulate.
    """
    a = astensor(a)
    idx = np.asarray(idx)
    if a.ndim != 3:
        raise ShapeError(f"gather_rows expects rank-3 input, got rank {a.ndim}")
    bidx = np.arange(a.data.shape[0])[:, None]
    out_data = a.data[bidx, idx]

    def backward(g):
        if _needs_grad(a):
            ga = np.zeros_like(a.data)
            np.add.at(ga, (bidx, idx), g)
            a._accumulate_owned(ga)

    return _node(out_data, (a,), backward)


def relu(a):
    a = astensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        if _needs_grad(a):
            a._accumulate_owned(g * (a.data > 0))

    return _node(out_data, (a,), backward)


def sigmoid(a):
    a = astensor(a)
    # tanh form is overflow-proof on both tails
    out_data = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def backward(g):
        if _needs_grad(a):
            a._accumulate_owned(g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), backward)


def softmax(a, axis=-1):
    a = astensor(a)
    if a.data.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if _needs_grad(a):
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a._accumulate_owned((g - dot) * out_data)

    return _node(out_data, (a,), backward)
