"""Light module system: parameter registration, modes, and the basic layers."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ConfigError, Parameter, Tensor


def he_uniform(rng, shape, fan_in, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def fan_in_uniform(rng, shape, fan_in, dtype=np.float32) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Container tracking parameters, buffers, submodules and train/eval mode."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        else:
            self._params.pop(name, None)
            self._modules.pop(name, None)
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array: np.ndarray):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def set_buffer(self, name, array: np.ndarray):
        if name not in self._buffers:
            raise ConfigError(f"unknown buffer '{name}'")
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix: str = ""):
        """Yield (path, parameter) pairs; shared parameters appear once."""
        seen = set()
        for path, param in self._named_parameters(prefix):
            if id(param) not in seen:
                seen.add(id(param))
                yield path, param

    def _named_parameters(self, prefix):
        for name, param in self._params.items():
            yield (f"{prefix}.{name}" if prefix else name), param
        for name, module in self._modules.items():
            yield from module._named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        seen = set()
        for name, module in self._iter_modules(prefix):
            for bname, buf in module._buffers.items():
                key = id(module), bname
                if key not in seen:
                    seen.add(key)
                    yield (f"{name}.{bname}" if name else bname), module, bname, buf

    def _iter_modules(self, prefix):
        yield prefix, self
        for name, module in self._modules.items():
            yield from module._iter_modules(f"{prefix}.{name}" if prefix else name)

    def train(self, mode: bool = True):
        for _, module in self._iter_modules(""):
            object.__setattr__(module, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._list = []
        for m in modules:
            self.append(m)

    def append(self, module: Module):
        self._modules[str(len(self._list))] = module
        self._list.append(module)

    def __iter__(self):
        return iter(self._list)

    def __len__(self):
        return len(self._list)

    def __getitem__(self, i):
        return self._list[i]


class Conv2d(Module):
    """Convolution without bias (normalization always follows it here)."""

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0, rng=None, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel * kernel
        self.weight = Parameter(
            he_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in, dtype),
            name="weight",
        )

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, in_features, out_features, bias=True, rng=None, dtype=np.float32, scale=1.0):
        super().__init__()
        self.weight = Parameter(
            fan_in_uniform(rng, (in_features, out_features), in_features, dtype) * scale,
            name="weight",
        )
        self.bias = Parameter(np.zeros(out_features, dtype=dtype), name="bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


class BatchNorm2d(Module):
    """Per-channel batch normalization with running statistics.

    Training mode normalizes with batch statistics; eval mode uses the
    running buffers, which makes the mapping deterministic for gradient
    checking and inference.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.channels = channels
        self.weight = Parameter(np.ones(channels, dtype=dtype), name="weight")
        self.bias = Parameter(np.zeros(channels, dtype=dtype), name="bias")
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        c = self.channels
        if x.shape[1] != c:
            raise ConfigError(f"batchnorm expects {c} channels, got {x.shape[1]}")
        if self.training:
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            var = ((x - mu) * (x - mu)).mean(axis=(0, 2, 3), keepdims=True)
            m = self.momentum
            self.set_buffer("running_mean",
                            ((1 - m) * self.running_mean + m * mu.data.reshape(c)).astype(x.dtype))
            self.set_buffer("running_var",
                            ((1 - m) * self.running_var + m * var.data.reshape(c)).astype(x.dtype))
        else:
            mu = Tensor(self.running_mean.reshape(1, c, 1, 1).astype(x.dtype))
            var = Tensor(self.running_var.reshape(1, c, 1, 1).astype(x.dtype))
        xhat = (x - mu) * ((var + self.eps) ** -0.5)
        return xhat * self.weight.reshape(1, c, 1, 1) + self.bias.reshape(1, c, 1, 1)
