"""Parameter containers and the layers the architectures are assembled from."""

from __future__ import annotations

from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import functional as F
from .tensor import DiffArray, get_dtype


class Parameter(DiffArray):
    """A trainable leaf array with a dotted name path, e.g. ``embed.block2.conv.weight``."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Module:
    """Minimal module tree: named parameters, buffers, train/eval mode."""

    def __init__(self):
        self.training = True

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}{i}", item

    def _own_parameters(self) -> Iterator[Tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield key, value

    def _own_buffers(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(())

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Parameter]]:
        out = [(prefix + key, p) for key, p in self._own_parameters()]
        for key, child in self.children():
            out.extend(child.named_parameters(f"{prefix}{key}."))
        return out

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> List[Tuple[str, np.ndarray]]:
        out = [(prefix + key, b) for key, b in self._own_buffers()]
        for key, child in self.children():
            out.extend(child.named_buffers(f"{prefix}{key}."))
        return out

    def assign_names(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """Copy arrays into parameters and buffers in place (names and shapes must match)."""
        expected = {name: arr.shape for name, arr in self.state_dict().items()}
        found = {name: tuple(np.shape(arr)) for name, arr in state.items()}
        if expected != found:
            raise ArchitectureMismatch(expected, found)
        for name, p in self.named_parameters():
            p.data = np.array(state[name], dtype=get_dtype())
        for name, buf in self.named_buffers():
            buf[...] = state[name]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ArchitectureMismatch(ValueError):
    """Parameter names or shapes of a checkpoint differ from the model."""

    def __init__(self, expected: Dict[str, tuple], found: Dict[str, tuple]):
        self.missing = sorted(set(expected) - set(found))
        self.unexpected = sorted(set(found) - set(expected))
        self.reshaped = sorted(k for k in set(expected) & set(found) if expected[k] != found[k])
        lines = ["checkpoint does not match model architecture"]
        lines += [f"  missing:    {k} {expected[k]}" for k in self.missing]
        lines += [f"  unexpected: {k} {found[k]}" for k in self.unexpected]
        lines += [f"  shape:      {k} expected {expected[k]} found {found[k]}" for k in self.reshaped]
        super().__init__("\n".join(lines))


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, padding: int, rng: np.random.Generator,
                 stride: int = 1):
        super().__init__()
        fan_in = cin * kernel * kernel
        self.weight = Parameter(he_normal(rng, (cout, cin, kernel, kernel), fan_in))
        self.bias = Parameter(np.zeros(cout))
        self.padding = padding
        self.stride = stride

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, padding=self.padding, stride=self.stride)


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=get_dtype())
        self.running_var = np.ones(channels, dtype=get_dtype())

    def _own_buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var

    def forward(self, x):
        return F.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             training=self.training)


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Parameter(he_normal(rng, (dout, din), din))
        self.bias = Parameter(np.zeros(dout))

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class ConvBlock(Module):
    """conv 3x3 -> batchnorm -> (leaky) ReLU -> optional 2x2 pooling."""

    def __init__(self, cin: int, cout: int, padding: int, pool: Optional[str],
                 rng: np.random.Generator, slope: float = 0.0, kernel: int = 3):
        super().__init__()
        if pool not in (None, "max", "avg"):
            raise ValueError(f"unknown pooling kind {pool!r}")
        self.conv = Conv2d(cin, cout, kernel, padding, rng)
        self.bn = BatchNorm2d(cout)
        self.slope = slope
        self.pool = pool

    def forward(self, x):
        x = F.leaky_relu(self.bn(self.conv(x)), self.slope)
        if self.pool == "max":
            x = F.maxpool2d(x, 2)
        elif self.pool == "avg":
            x = F.avgpool2d(x, 2)
        return x
