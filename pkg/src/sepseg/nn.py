"""Parameter containers and the standard layers built on the tensor core.

Initialization convention (applied by every layer that takes an `rng`):
truncated-normal std 0.02 for weights, zeros for biases. Construction order
fixes the PRNG stream, so a given seed yields bit-identical parameters.
"""

import numpy as np

from . import tensor as T
from .rng import SplitMix64
from .tensor import Tensor

INIT_STD = 0.02


class Parameter(Tensor):
    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def trunc_normal_(rng: SplitMix64, shape, std: float = INIT_STD) -> np.ndarray:
    n = int(np.prod(shape))
    return rng.trunc_normal_array(n, std).reshape(shape).astype(np.float32)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def modules(self):
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self, flag: bool = True):
        for m in self.modules():
            object.__setattr__(m, "training", flag)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        out = {}
        for name, p in self.named_parameters():
            out[name] = p.data.copy()
        for name, b in self.named_buffers():
            out[name] = b.copy()
        return out

    def load_state_dict(self, state: dict):
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        extra = set(state) - (set(own) | set(bufs))
        if missing or extra:
            raise KeyError(f"state dict mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            if tuple(state[name].shape) != tuple(p.shape):
                raise T.ShapeError(f"load_state_dict: {name} shape {tuple(state[name].shape)} vs {tuple(p.shape)}")
            p.data[...] = state[name].astype(p.dtype)
        for name, b in bufs.items():
            if tuple(state[name].shape) != tuple(b.shape):
                raise T.ShapeError(f"load_state_dict: {name} shape {tuple(state[name].shape)} vs {tuple(b.shape)}")
            b[...] = state[name].astype(b.dtype)

    def to_dtype(self, dtype):
        """Cast all parameters and float buffers in place (grads are dropped)."""
        for p in self.parameters():
            p.data = np.ascontiguousarray(p.data.astype(dtype))
            p.grad = None
        for m in self.modules():
            for name, b in m._buffers.items():
                if b.dtype.kind == "f":
                    m.register_buffer(name, np.ascontiguousarray(b.astype(dtype)))
        return self

    @property
    def dtype(self):
        for p in self.parameters():
            return p.dtype
        return np.dtype(np.float32)


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._list = []
        for m in mods:
            self.append(m)

    def append(self, m: Module):
        self._modules[str(len(self._list))] = m
        self._list.append(m)

    def __iter__(self):
        return iter(self._list)

    def __len__(self):
        return len(self._list)

    def __getitem__(self, i):
        return self._list[i]


class Linear(Module):
    """y = x @ W + b with W stored (in_features, out_features)."""

    def __init__(self, in_features: int, out_features: int, rng: SplitMix64, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(trunc_normal_(rng, (in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features, dtype=np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        n = int(np.prod(lead)) if lead else 1
        out = T.matmul(x.reshape((n, self.in_features)), self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out.reshape(tuple(lead) + (self.out_features,))

    __call__ = forward


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: SplitMix64,
                 stride: int = 1, padding: int = 0, groups: int = 1, bias: bool = True):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.groups = groups
        self.weight = Parameter(trunc_normal_(rng, (out_ch, in_ch // groups, kernel, kernel)))
        self.bias = Parameter(np.zeros(out_ch, dtype=np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias,
                        stride=self.stride, padding=self.padding, groups=self.groups)

    __call__ = forward


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(dim, dtype=np.float32))
        self.beta = Parameter(np.zeros(dim, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)

    __call__ = forward


class BatchNorm2d(Module):
    """Running-statistics batch norm: momentum 0.9, eps 1e-5, learnable affine.

    Training mode normalizes with the current batch's (biased) statistics and
    updates running stats as running = 0.9*running + 0.1*batch; eval mode
    normalizes with the stored running stats.
    """

    def __init__(self, dim: int, eps: float = 1e-5, momentum: float = 0.9):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(dim, dtype=np.float32))
        self.beta = Parameter(np.zeros(dim, dtype=np.float32))
        self.register_buffer("running_mean", np.zeros(dim, dtype=np.float32))
        self.register_buffer("running_var", np.ones(dim, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise T.ShapeError(f"BatchNorm2d: expected 4-D input, got {tuple(x.shape)}")
        C = x.shape[1]
        if self.training:
            mu = T.tmean(x, axis=(0, 2, 3), keepdims=True)
            xc = x - mu
            var = T.tmean(xc * xc, axis=(0, 2, 3), keepdims=True)
            inv = T.power(var + self.eps, -0.5)
            y = xc * inv
            m = self.momentum
            self.running_mean[...] = m * self.running_mean + (1 - m) * mu.data.reshape(C)
            self.running_var[...] = m * self.running_var + (1 - m) * var.data.reshape(C)
        else:
            rm = Tensor(self.running_mean.reshape(1, C, 1, 1).astype(x.dtype))
            rv = Tensor(self.running_var.reshape(1, C, 1, 1).astype(x.dtype))
            y = (x - rm) * T.power(rv + self.eps, -0.5)
        g = self.gamma.reshape((1, C, 1, 1))
        b = self.beta.reshape((1, C, 1, 1))
        return y * g + b

    __call__ = forward
