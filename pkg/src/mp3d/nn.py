"""Small module system on top of the tensor engine.

Modules hold named parameters (stable hierarchical names derived from
attribute paths) and child modules. Primitive layers know their own
parameter counts and output shapes so the cost profiler can walk a model
without executing it.
"""
from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor


class Module:
    """Base class: auto-registers Tensor attributes as parameters and
    Module attributes as children."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (prefix + name if prefix else name), p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + "." if prefix else name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def param_count(self):
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module):
        idx = len(self._items)
        self._items.append(module)
        self._children[str(idx)] = module

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, idx):
        return self._items[idx]


def _he_init(rng, shape, fan_in):
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(np.float32)


class Conv3d(Module):
    """Grouped 3D convolution layer; zero padding."""

    def __init__(self, in_channels, out_channels, kernel, stride=(1, 1, 1),
                 pad=(0, 0, 0), groups=1, bias=True, rng=None):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = ops._triple(kernel)
        self.stride = ops._triple(stride)
        self.pad = ops._triple(pad)
        self.groups = groups
        kd, kh, kw = self.kernel_size
        fan_in = (in_channels // groups) * kd * kh * kw
        self.weight = Tensor(_he_init(rng, (out_channels, in_channels // groups, kd, kh, kw), fan_in),
                             requires_grad=True)
        if bias:
            self.bias = Tensor(np.zeros(out_channels, dtype=np.float32), requires_grad=True)
        else:
            self.bias = None

    def forward(self, x):
        return ops.conv3d(x, self.weight, bias=self.bias, stride=self.stride,
                          pad=self.pad, groups=self.groups)

    # -- static analysis ---------------------------------------------------
    def out_shape(self, in_shape):
        n, c, d, h, w = in_shape
        kd, kh, kw = self.kernel_size
        sd, sh, sw = self.stride
        pd, ph, pw = self.pad
        return (n, self.out_channels,
                (d + 2 * pd - kd) // sd + 1,
                (h + 2 * ph - kh) // sh + 1,
                (w + 2 * pw - kw) // sw + 1)

    def flops(self, in_shape, flops_per_mac=2):
        out = self.out_shape(in_shape)
        kd, kh, kw = self.kernel_size
        macs = kd * kh * kw * (self.in_channels // self.groups) * self.out_channels \
            * out[0] * out[2] * out[3] * out[4]
        total = flops_per_mac * macs
        if self.bias is not None:
            total += self.out_channels * out[0] * out[2] * out[3] * out[4]
        return total


class GroupNorm(Module):
    def __init__(self, channels, num_groups, eps=1e-5):
        super().__init__()
        self.channels = channels
        self.num_groups = min(num_groups, channels)
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)

    def forward(self, x):
        return ops.group_norm(x, self.num_groups, self.gamma, self.beta, eps=self.eps)

    def out_shape(self, in_shape):
        return in_shape

    def flops(self, in_shape, flops_per_mac=2):
        # normalization counted at 2 FLOPs per element
        return 2 * int(np.prod(in_shape))


class SliceGroupNorm(GroupNorm):
    """Group normalization over [N, C, D, H, W] with statistics computed per
    depth slice (D folded into the batch axis).

    Keeping the slice axis out of the statistics preserves exact depth
    equivariance and replication-invariance: a depth-replicated input yields
    depth-replicated normalized output, which plain 3D group statistics
    would break."""

    def forward(self, x):
        from .tensor import reshape, transpose
        n, c, d, h, w = x.shape
        flat = reshape(transpose(x, (0, 2, 1, 3, 4)), (n * d, c, h, w))
        out = ops.group_norm(flat, self.num_groups, self.gamma, self.beta, eps=self.eps)
        return transpose(reshape(out, (n, d, c, h, w)), (0, 2, 1, 3, 4))


class Pool3d(Module):
    def __init__(self, mode, window, stride=None, pad=(0, 0, 0)):
        super().__init__()
        self.mode = mode
        self.window = ops._triple(window)
        self.stride = ops._triple(stride if stride is not None else window)
        self.pad = ops._triple(pad)

    def forward(self, x):
        return ops.pool3d(x, self.mode, self.window, self.stride, pad=self.pad)

    def out_shape(self, in_shape):
        n, c, d, h, w = in_shape
        wd, wh, ww = self.window
        sd, sh, sw = self.stride
        pd, ph, pw = self.pad
        return (n, c,
                (d + 2 * pd - wd) // sd + 1,
                (h + 2 * ph - wh) // sh + 1,
                (w + 2 * pw - ww) // sw + 1)

    def flops(self, in_shape, flops_per_mac=2):
        out = self.out_shape(in_shape)
        wd, wh, ww = self.window
        # one FLOP per window element visited
        return wd * wh * ww * int(np.prod(out))


def relu_flops(shape):
    # activations counted at 1 FLOP per element
    return int(np.prod(shape))


class SGD:
    """Plain SGD with momentum over a module's parameters."""

    def __init__(self, module, lr, momentum=0.9):
        self.params = list(module.parameters())
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data = p.data - self.lr * v

    def zero_grad(self):
        for p in self.params:
            p.grad = None
