"""Parameter containers and the small layer set the models are built from."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .core import DEFAULT_DTYPE, Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    training = True

    def __init__(self):
        self._buffers: dict[str, np.ndarray] = {}

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v
            elif isinstance(value, dict) and value and all(isinstance(v, Module) for v in value.values()):
                for k in sorted(value):
                    yield f"{name}.{k}", value[k]

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        for name, p in self._named_parameters(prefix):
            if id(p) not in seen:
                seen.add(id(p))
                yield name, p

    def _named_parameters(self, prefix):
        for name, child in self._children():
            full = f"{prefix}{name}"
            if isinstance(child, Parameter):
                yield full, child
            else:
                yield from child._named_parameters(full + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            if isinstance(child, Module):
                yield from child.modules()

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, v in self._buffers.items():
            yield f"{prefix}{k}", v
        for name, child in self._children():
            if isinstance(child, Module):
                yield from child.named_buffers(f"{prefix}{name}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        out.update({name: b.copy() for name, b in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        params = dict(self.named_parameters())
        buffers = self._buffer_owners()
        missing = []
        for name, p in params.items():
            if name in state:
                if state[name].shape != p.data.shape:
                    raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {p.data.shape}")
                p.data = state[name].astype(p.data.dtype).copy()
            else:
                missing.append(name)
        for name, (owner, key) in buffers.items():
            if name in state:
                owner._buffers[key] = state[name].copy()
            else:
                missing.append(name)
        if strict:
            extra = set(state) - set(params) - set(buffers)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        return missing

    def _buffer_owners(self, prefix: str = "") -> dict[str, tuple["Module", str]]:
        out = {f"{prefix}{k}": (self, k) for k in self._buffers}
        for name, child in self._children():
            if isinstance(child, Module):
                out.update(child._buffer_owners(f"{prefix}{name}."))
        return out

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def to(self, dtype) -> "Module":
        """Cast parameters and buffers in place (float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            for k, v in m._buffers.items():
                m._buffers[k] = v.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def _init(rng: np.random.Generator, shape, fan_in: int, gain: float = 2.0) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(gain / max(fan_in, 1))).astype(DEFAULT_DTYPE)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True,
                 zero_init: bool = False):
        super().__init__()
        w = np.zeros((out_features, in_features), DEFAULT_DTYPE) if zero_init else \
            _init(rng, (out_features, in_features), in_features, gain=1.0)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features, DEFAULT_DTYPE)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int | None = None, groups: int = 1, bias: bool = True, zero_init: bool = False):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.groups = groups
        shape = (cout, cin // groups, k, k)
        fan_in = (cin // groups) * k * k
        self.weight = Parameter(np.zeros(shape, DEFAULT_DTYPE) if zero_init else _init(rng, shape, fan_in))
        self.bias = Parameter(np.zeros(cout, DEFAULT_DTYPE)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(dim, DEFAULT_DTYPE))
        self.bias = Parameter(np.zeros(dim, DEFAULT_DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class BatchNorm(Module):
    """Batch normalization over axis 1 with running statistics.

    In training mode a list of tensors is normalized with statistics shared
    across the whole list (synchronized BN, see ``F.sync_batchnorm``).
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = Parameter(np.ones(channels, DEFAULT_DTYPE))
        self.bias = Parameter(np.zeros(channels, DEFAULT_DTYPE))
        self.register_buffer("running_mean", np.zeros(channels, DEFAULT_DTYPE))
        self.register_buffer("running_var", np.ones(channels, DEFAULT_DTYPE))

    def forward(self, x):
        if isinstance(x, (list, tuple)):
            if not self.training:
                return [self.forward(g) for g in x]
            ys, (mu, var) = F.sync_batchnorm(x, self.weight, self.bias, self.eps)
            self._update_running(mu, var, int(sum(g.size // g.shape[1] for g in x)))
            return ys
        if not self.training:
            y, _ = F.batch_norm(x, self.weight, self.bias, self._buffers["running_mean"],
                                self._buffers["running_var"], self.eps)
            return y
        y, (mu, var) = F.batch_norm(x, self.weight, self.bias, eps=self.eps)
        self._update_running(mu, var, int(x.size // x.shape[1]))
        return y

    def _update_running(self, mu: np.ndarray, var: np.ndarray, count: int) -> None:
        m = self.momentum
        unbiased = var * count / max(count - 1, 1)
        rm, rv = self._buffers["running_mean"], self._buffers["running_var"]
        self._buffers["running_mean"] = ((1 - m) * rm + m * mu).astype(rm.dtype)
        self._buffers["running_var"] = ((1 - m) * rv + m * unbiased).astype(rv.dtype)


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class Lambda(Module):
    def __init__(self, fn):
        super().__init__()
        self._fn = fn

    def forward(self, x):
        return self._fn(x)


class ReLU(Lambda):
    def __init__(self):
        super().__init__(F.relu)


class GELU(Lambda):
    def __init__(self):
        super().__init__(F.gelu)
