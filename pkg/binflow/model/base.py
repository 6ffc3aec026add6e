from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from binflow.autodiff import ops
from binflow.autodiff.tensor import Tensor, default_dtype, parameter, xavier


class Module:
    """
    Parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; child modules
    may be attributes, lists or string-keyed dicts of modules. Names are built
    from attribute paths joined with ``.`` in definition order.
    """

    buffers: Tuple[str, ...] = ()

    def __init__(self):
        self.training = True

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield f"{name}.{key}", item

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                params[prefix + name] = value
        for name, child in self.children():
            params.update(child.named_parameters(f"{prefix}{name}."))
        return params

    def parameters(self):
        return list(self.named_parameters().values())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def named_buffers(self, prefix: str = "") -> Dict[str, Tuple["Module", str]]:
        """Fixed arrays listed in ``buffers``, saved alongside parameters, as name -> (owner, attribute)."""
        found = {prefix + name: (self, name) for name in self.buffers}
        for name, child in self.children():
            found.update(child.named_buffers(f"{prefix}{name}."))
        return found

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters().items()}
        for name, (owner, attr) in self.named_buffers().items():
            state[name] = np.array(getattr(owner, attr), copy=True)
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        buffers = self.named_buffers()
        missing = [name for name in [*params, *buffers] if name not in state]
        unexpected = [name for name in state if name not in params and name not in buffers]
        if strict and (missing or unexpected):
            raise ValueError(f"State mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in params.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"Shape mismatch for '{name}': checkpoint {value.shape}, model {p.shape}")
            p.data = value.astype(p.data.dtype, copy=True)
        for name, (owner, attr) in buffers.items():
            if name not in state:
                continue
            current = getattr(owner, attr)
            value = np.asarray(state[name])
            if value.shape != current.shape:
                raise ValueError(f"Shape mismatch for '{name}': checkpoint {value.shape}, model {current.shape}")
            setattr(owner, attr, value.astype(current.dtype, copy=True))

    def parameter_count(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))


class Linear(Module):
    """``y = x @ weight + bias`` with weight stored as (in, out)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        super().__init__()
        values = np.zeros((in_dim, out_dim), dtype=default_dtype()) if zero else xavier(rng, in_dim, out_dim)
        self.weight = parameter(values)
        self.bias = parameter(np.zeros(out_dim, dtype=default_dtype())) if bias else None

    def __call__(self, x) -> Tensor:
        out = ops.matmul(x, self.weight)
        if self.bias is not None:
            out = ops.add(out, self.bias)
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = parameter(np.ones(dim, dtype=default_dtype()))
        self.beta = parameter(np.zeros(dim, dtype=default_dtype()))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class Dropout(Module):
    def __init__(self, rate: float, rng: Optional[np.random.Generator]):
        super().__init__()
        self.rate = rate
        self.rng = rng

    def __call__(self, x) -> Tensor:
        return ops.dropout(x, self.rate, self.rng, training=self.training)
