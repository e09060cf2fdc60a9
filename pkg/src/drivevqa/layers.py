"""Layer objects: parameter containers over the functional ops.

A Module auto-registers Tensors assigned with requires_grad=True as
parameters and nested Modules as children, so ``parameters()`` and
``state_dict()`` walk the tree in definition order (deterministic, which the
checkpoint format relies on).
"""

import numpy as np

from .tensor import Tensor, ShapeError
from . import functional as F


def parameter(data):
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)


def _fan_in_uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        """Non-learned state (running stats); saved with the model, no grad."""
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    # -- traversal -------------------------------------------------------
    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._children.items():
            yield from child.named_buffers(prefix + name + ".")

    def modules(self):
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self):
        for m in self.modules():
            object.__setattr__(m, "training", True)
        return self

    def eval(self):
        for m in self.modules():
            object.__setattr__(m, "training", False)
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    # -- persistence -------------------------------------------------------
    def state_dict(self):
        d = {name: p.data for name, p in self.named_parameters()}
        d.update({name: b for name, b in self.named_buffers()})
        return d

    def load_state_dict(self, d):
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(d)
        extra = set(d) - (set(own) | set(bufs))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(d[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ShapeError(f"parameter {name}: stored shape {arr.shape} != model shape {p.data.shape}")
            p.data = arr
        for name, b in bufs.items():
            arr = np.asarray(d[name], dtype=b.dtype)
            if arr.shape != b.shape:
                raise ShapeError(f"buffer {name}: stored shape {arr.shape} != model shape {b.shape}")
            b[...] = arr

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Sequential(Module):
    def __init__(self, *mods):
        super().__init__()
        for i, m in enumerate(mods):
            setattr(self, f"m{i}", m)
        self._mods = mods

    def forward(self, x):
        for m in self._mods:
            x = m(x)
        return x


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = parameter(_fan_in_uniform(rng, (in_features, out_features), in_features))
        self.bias = parameter(_fan_in_uniform(rng, (out_features,), in_features)) if bias else None

    def forward(self, x):
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


class ConvSpec:
    """Validated convolution geometry; raises on any ill-formed field."""

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0,
                 dilation=1, groups=1):
        if kernel < 1 or kernel % 2 == 0:
            raise ValueError(f"kernel axis: size must be odd and positive, got {kernel}")
        if stride < 1:
            raise ValueError(f"stride must be >= 1, got {stride}")
        if padding < 0:
            raise ValueError(f"padding must be >= 0, got {padding}")
        if dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {dilation}")
        if groups < 1:
            raise ValueError(f"groups must be >= 1, got {groups}")
        if in_channels % groups != 0:
            raise ShapeError(f"channel axis: in_channels={in_channels} not divisible by groups={groups}")
        if out_channels % groups != 0:
            raise ShapeError(f"channel axis: out_channels={out_channels} not divisible by groups={groups}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        self.groups = groups

    def out_size(self, n):
        out = (n + 2 * self.padding - self.dilation * (self.kernel - 1) - 1) // self.stride + 1
        if out < 1:
            raise ShapeError(f"spatial axis: input {n} collapses to {out} under {self!r}")
        return out

    def __repr__(self):
        return (f"ConvSpec({self.in_channels}->{self.out_channels}, k={self.kernel}, "
                f"s={self.stride}, p={self.padding}, d={self.dilation}, g={self.groups})")


class Conv2d(Module):
    def __init__(self, spec, rng, bias=True):
        super().__init__()
        self.spec = spec
        fan_in = (spec.in_channels // spec.groups) * spec.kernel * spec.kernel
        wshape = (spec.out_channels, spec.in_channels // spec.groups, spec.kernel, spec.kernel)
        self.weight = parameter(_fan_in_uniform(rng, wshape, fan_in))
        self.bias = parameter(_fan_in_uniform(rng, (spec.out_channels,), fan_in)) if bias else None

    def forward(self, x):
        s = self.spec
        if x.shape[1] != s.in_channels:
            raise ShapeError(f"channel axis: expected {s.in_channels} input channels, got {x.shape[1]}")
        s.out_size(x.shape[2]), s.out_size(x.shape[3])
        return F.conv2d(x, self.weight, self.bias, stride=s.stride,
                        padding=s.padding, dilation=s.dilation, groups=s.groups)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = parameter(np.ones(channels, dtype=np.float32))
        self.beta = parameter(np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x, fuse_relu=False):
        if x.shape[1] != self.channels:
            raise ShapeError(f"channel axis: batch norm built for {self.channels}, got {x.shape[1]}")
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean,
                            self.running_var, self.training,
                            momentum=self.momentum, eps=self.eps, fuse_relu=fuse_relu)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.dim = dim
        self.eps = eps
        self.gamma = parameter(np.ones(dim, dtype=np.float32))
        self.beta = parameter(np.zeros(dim, dtype=np.float32))

    def forward(self, x):
        if x.shape[-1] != self.dim:
            raise ShapeError(f"feature axis: layer norm built for {self.dim}, got {x.shape[-1]}")
        return F.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class Dropout(Module):
    """Keeps its own RNG stream so train-time noise is reproducible."""

    def __init__(self, p, rng):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng

    def forward(self, x):
        return F.dropout(x, self.p, self.rng, self.training)


class Embedding(Module):
    def __init__(self, vocab_size, dim, rng):
        super().__init__()
        self.vocab_size = vocab_size
        self.dim = dim
        self.weight = parameter(_fan_in_uniform(rng, (vocab_size, dim), dim))

    def forward(self, ids):
        return F.embedding_lookup(self.weight, ids)
