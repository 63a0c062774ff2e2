"""Parameterised layers built on :mod:`voxsegnet.ops`."""

import numpy as np

from . import ops
from .tensor import Tensor


class Module:
    """Minimal parameter container.

    Parameters are the ``Tensor`` attributes with ``requires_grad``; child
    modules are discovered from attributes and lists of modules. Names are
    dotted paths in attribute-definition order, which is stable across
    constructions and is what checkpoints key on.
    """

    training = True

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, child in self.children():
            yield from child.named_buffers(prefix + name + ".")

    def modules(self):
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype):
        """Cast parameters and buffers in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            if isinstance(m, BatchNorm3d) and m.running_mean is not None:
                m.running_mean = m.running_mean.astype(dtype)
                m.running_var = m.running_var.astype(dtype)
        return self

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv3d(Module):
    """3D atrous convolution ``C_in -> C_out`` with cubic kernel and 'same' padding."""

    def __init__(self, c_in, c_out, kernel_size=3, dilation=1, stride=1, padding="same",
                 rng=None, dtype=np.float64):
        if dilation < 1 or stride < 1:
            raise ValueError(f"dilation and stride must be positive, got {dilation}, {stride}")
        if padding == "same":
            ops.same_padding(kernel_size, dilation)
        rng = rng if rng is not None else np.random.default_rng(0)
        k = kernel_size
        fan_in = c_in * k ** 3
        self.weight = Tensor(_he_normal(rng, (c_out, c_in, k, k, k), fan_in, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.kernel_size = k
        self.dilation = dilation
        self.stride = stride
        self.padding = padding

    @property
    def effective_extent(self):
        return (self.kernel_size - 1) * self.dilation + 1

    def forward(self, x):
        return ops.conv3d(x, self.weight, self.bias, self.dilation, self.stride, self.padding)


class ConvTranspose3d(Module):
    """Stride-2, 3x3x3 transpose convolution doubling spatial extents."""

    def __init__(self, c_in, c_out, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(_he_normal(rng, (c_in, c_out, 3, 3, 3), c_in * 27, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return ops.conv3d_transpose(x, self.weight, self.bias, stride=2)


class BatchNorm3d(Module):
    """Per-channel batch normalization; also serves as the mutable BN state."""

    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float64):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.momentum = momentum
        self.eps = eps
        self.running_mean = None
        self.running_var = None

    def named_buffers(self, prefix=""):
        if self.running_mean is not None:
            yield prefix + "running_mean", self.running_mean
            yield prefix + "running_var", self.running_var

    def forward(self, x):
        return ops.batch_norm3d(x, self.gamma, self.beta, self)


class Linear(Module):
    def __init__(self, n_in, n_out, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(_he_normal(rng, (n_out, n_in), n_in, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return ops.fully_connected(x, self.weight, self.bias)


def set_buffer(model, name, value):
    """Assign a BN running statistic addressed by its dotted name."""
    *path, attr = name.split(".")
    target = model
    for part in path:
        target = target[int(part)] if isinstance(target, list) else getattr(target, part)
    if not isinstance(target, BatchNorm3d) or attr not in ("running_mean", "running_var"):
        raise KeyError(f"{name} is not a batch-norm buffer")
    setattr(target, attr, value)
