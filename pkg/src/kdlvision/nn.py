"""Parameters, modules and the two layer types every network here is built from."""

import hashlib
from collections.abc import Mapping

import numpy as np

from .tensor import Tensor, conv2d, default_dtype, matmul, add


class Parameter(Tensor):
    """A leaf tensor owned by a module. Frozen parameters never record on the tape."""

    def __init__(self, data):
        super().__init__(np.array(data, dtype=default_dtype()), requires_grad=True)
        self._frozen = False

    @property
    def frozen(self):
        return self._frozen

    @frozen.setter
    def frozen(self, value):
        self._frozen = bool(value)
        self.requires_grad = not self._frozen
        if self._frozen:
            self.grad = np.zeros_like(self.data)


class ParameterSet(Mapping):
    """Ordered ``path -> Parameter`` map with the frozen/trainable partition."""

    def __init__(self, items):
        self._params = {}
        for path, p in items:
            if path in self._params:
                raise ValueError(f"duplicate parameter path {path!r}")
            self._params[path] = p

    def __getitem__(self, path):
        return self._params[path]

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    @property
    def frozen_flags(self):
        return {k: p.frozen for k, p in self._params.items()}

    def trainable(self):
        return ParameterSet((k, p) for k, p in self._params.items() if not p.frozen)

    def frozen(self):
        return ParameterSet((k, p) for k, p in self._params.items() if p.frozen)

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None if not p.frozen else np.zeros_like(p.data)

    def count(self):
        return int(sum(p.size for p in self._params.values()))

    def checksum(self):
        h = hashlib.sha256()
        for k, p in self._params.items():
            h.update(k.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()

    def arrays(self):
        return {k: p.data for k, p in self._params.items()}

    def load(self, arrays, strict=True):
        """Copy arrays into the parameters in place, casting to their dtype."""
        missing = [k for k in self._params if k not in arrays]
        if strict and missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for k, p in self._params.items():
            if k not in arrays:
                continue
            arr = np.asarray(arrays[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr


class Module:
    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self):
        return ParameterSet(self.named_parameters())

    def freeze(self, frozen=True):
        for _, p in self.named_parameters():
            p.frozen = frozen
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Dense(Module):
    """``x @ weight + bias`` with weight stored as [in, out]."""

    def __init__(self, n_in, n_out, rng):
        self.weight = Parameter(glorot_uniform(rng, (n_in, n_out), n_in, n_out))
        self.bias = Parameter(np.zeros(n_out))

    def forward(self, x):
        return add(matmul(x, self.weight), self.bias)


def he_uniform(rng, shape, fan_in):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Conv2d(Module):
    """Convolution with He-uniform weights (every conv here feeds a ReLU).

    ``input_mid`` initialises the bias to cancel the response to a constant
    input of that value. Without normalisation layers, an all-positive input
    otherwise buries the texture signal under a per-filter offset that the
    bias needs hundreds of steps to learn away.
    """

    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=None, input_mid=None):
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = Parameter(he_uniform(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel))
        bias = np.zeros(c_out)
        if input_mid is not None:
            bias = -input_mid * self.weight.data.sum(axis=(1, 2, 3), dtype=np.float64)
        self.bias = Parameter(bias)

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
